// End-to-end acceptance suite. Each criterion prints exactly one PASS/FAIL
// line with its measured quantities and wall time; the exit code is the
// number of failed criteria. Tolerances and budgets live next to the check
// that uses them.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "gridse/chimera.hpp"
#include "gridse/contingency.hpp"
#include "gridse/dataset.hpp"
#include "gridse/estimation.hpp"
#include "gridse/evaluation.hpp"
#include "gridse/fdia.hpp"
#include "gridse/grid_model.hpp"
#include "gridse/nn.hpp"
#include "gridse/powerflow.hpp"
#include "gridse/rng.hpp"

namespace {

using namespace gridse;
namespace fs = std::filesystem;

class Stopwatch {
public:
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }

private:
    std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

std::string num(double v, int precision = 4) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*g", precision, v);
    return buf;
}

// Relative error with a floored scale: coordinates far below the floor are
// judged absolutely (|delta| < tol * floor), everything else relatively.
double rel_err(double got, double want, double floor_scale) {
    const double scale = std::max({std::abs(got), std::abs(want), floor_scale});
    return std::abs(got - want) / scale;
}

// The load corpus every data-dependent criterion runs on. One global scale
// keeps the CLI defaults, the unit fixtures, and this suite on the same
// operating regime.
constexpr double kLoadScale = 0.65;
constexpr double kTau = 0.5;

// ---------------------------------------------------------------- 1 ----

bool stealth_identity(const GridCase&, const MatrixBundle& kit, std::string& detail,
                      const Stopwatch& sw) {
    constexpr int kTrials = 1000;
    constexpr double kResidualTol = 1e-9;
    constexpr double kBudgetSeconds = 5.0;

    const int n = kit.bus_count();
    Rng rng(0xace1);
    double max_shift = 0.0;
    int unchanged = 0;
    for (int trial = 0; trial < kTrials; ++trial) {
        Eigen::VectorXd theta_red(n - 1);
        for (int i = 0; i < n - 1; ++i) theta_red(i) = 0.1 * rng.gaussian();
        // Noise spans quiet epochs and gross-error epochs so both verdict
        // classes are represented.
        const double noise_sd = 0.005 + 0.395 * rng.uniform();
        Eigen::VectorXd p = kit.H_dc * theta_red;
        for (int i = 0; i < n; ++i) p(i) += noise_sd * rng.gaussian();

        Eigen::VectorXd c(n - 1);
        for (int i = 0; i < n - 1; ++i) c(i) = 0.2 * rng.gaussian();
        const Eigen::VectorXd a = stealthy_injection(kit, c);
        const Eigen::VectorXd p_att = p + a.head(n);

        const Eigen::VectorXd est_before = dc_estimate(kit, p);
        const Eigen::VectorXd est_after = dc_estimate(kit, p_att);
        const double r_before = dc_residual_norm(kit, p, est_before);
        const double r_after = dc_residual_norm(kit, p_att, est_after);
        max_shift = std::max(max_shift, std::abs(r_before - r_after));
        if ((r_before < kTau) == (r_after < kTau)) ++unchanged;
    }
    const double secs = sw.seconds();
    detail = "max residual shift " + num(max_shift) + ", verdicts unchanged " +
             std::to_string(unchanged) + "/" + std::to_string(kTrials);
    return max_shift < kResidualTol && unchanged == kTrials && secs < kBudgetSeconds;
}

// ---------------------------------------------------------------- 2 ----

bool estimator_recovery(const GridCase& grid, const MatrixBundle& kit, std::string& detail,
                        const Stopwatch& sw) {
    constexpr int kEpochs = 100;
    constexpr double kWlsTol = 1e-6;
    constexpr double kDcTol = 1e-10;
    constexpr double kBudgetSeconds = 10.0;

    const int n = grid.bus_count();
    const Eigen::VectorXd p0 = grid.p_load_vector();
    const Eigen::VectorXd q0 = grid.q_load_vector();
    Rng rng(0xace2);
    double worst_wls = 0.0, worst_dc = 0.0;
    for (int e = 0; e < kEpochs; ++e) {
        // Per-bus jitter on top of the global scale stays below the
        // voltage-collapse nose near scale 0.95.
        const double scale = 0.5 + 0.3 * rng.uniform();
        Eigen::VectorXd p = p0 * scale, q = q0 * scale;
        for (int i = 0; i < n; ++i) {
            const double jitter = 1.0 + 0.15 * (2.0 * rng.uniform() - 1.0);
            p(i) *= jitter;
            q(i) *= jitter;
        }
        const AcSolution sol = solve_ac_power_flow(grid, p, q);
        const Eigen::VectorXd z = h_measure(grid, sol.state);
        const EstimateResult est = wls_estimate(grid, z);
        const double err =
            std::max((est.x_hat.theta - sol.state.theta).lpNorm<Eigen::Infinity>(),
                     (est.x_hat.v - sol.state.v).lpNorm<Eigen::Infinity>());
        worst_wls = std::max(worst_wls, err);

        Eigen::VectorXd theta_red(n - 1);
        for (int i = 0; i < n - 1; ++i) theta_red(i) = 0.15 * rng.gaussian();
        const Eigen::VectorXd p_dc = kit.H_dc * theta_red;
        const Eigen::VectorXd theta_hat = dc_estimate(kit, p_dc);
        worst_dc = std::max(
            worst_dc, (theta_hat - kit.expand_angles(theta_red)).lpNorm<Eigen::Infinity>());
    }
    const double secs = sw.seconds();
    detail = "worst WLS state error " + num(worst_wls) + ", worst DC angle error " + num(worst_dc);
    return worst_wls < kWlsTol && worst_dc < kDcTol && secs < kBudgetSeconds;
}

// ---------------------------------------------------------------- 3 ----

using OutageKey = std::pair<int, int>;

struct ScreenSets {
    std::set<OutageKey> overload;
    std::set<OutageKey> islanding;
};

ScreenSets sets_of(const ScreenResult& result) {
    ScreenSets sets;
    for (const Violation& v : result.violations) {
        const OutageKey key{v.outage[0], v.outage[1]};
        (v.islanding ? sets.islanding : sets.overload).insert(key);
    }
    return sets;
}

bool contingency_oracle(const GridCase& grid, const MatrixBundle& kit, const LodfTable& lodf,
                        std::string& detail, const Stopwatch& sw) {
    constexpr int kPoints = 50;
    constexpr int kExpectedPairs = 190;
    constexpr double kBudgetSeconds = 60.0;

    const int n = grid.bus_count();
    const int L = kit.branch_count();
    const Eigen::VectorXd p0 = grid.p_load_vector();
    const Eigen::VectorXd q0 = grid.q_load_vector();
    const Eigen::VectorXd limits = grid.f_limit_vector();
    Rng rng(0xace3);

    long mismatches = 0;
    long pair_counts_wrong = 0;
    for (int point = 0; point < kPoints; ++point) {
        const double scale = 0.5 + 0.25 * rng.uniform();
        Eigen::VectorXd p_load = p0 * scale, q_load = q0 * scale;
        for (int i = 0; i < n; ++i) {
            const double jitter = 1.0 + 0.2 * (2.0 * rng.uniform() - 1.0);
            p_load(i) *= jitter;
            q_load(i) *= jitter;
        }
        const AcSolution sol = solve_ac_power_flow(grid, p_load, q_load);
        const Eigen::VectorXd flows = dc_line_flows(kit, sol.state.theta);
        const Eigen::VectorXd inj = injections_from_flows(kit, flows);

        const ScreenResult s1 = screen_n1(kit, lodf, flows, limits);
        const ScreenResult s2 = screen_n2(kit, lodf, flows, limits);
        if (s2.examined != kExpectedPairs || s1.examined != L) ++pair_counts_wrong;
        const ScreenSets sets1 = sets_of(s1);
        const ScreenSets sets2 = sets_of(s2);

        ScreenSets oracle1, oracle2;
        for (int j = 0; j < L; ++j) {
            const std::array<int, 1> removed{j};
            const auto post = dc_flows_with_outages(kit, removed, inj);
            if (!post) {
                oracle1.islanding.insert({j, -1});
                continue;
            }
            for (int i = 0; i < L; ++i) {
                if (i != j && std::abs((*post)(i)) > limits(i)) {
                    oracle1.overload.insert({j, -1});
                    break;
                }
            }
        }
        for (int j = 0; j < L; ++j) {
            for (int k = j + 1; k < L; ++k) {
                const std::array<int, 2> removed{j, k};
                const auto post = dc_flows_with_outages(kit, removed, inj);
                if (!post) {
                    oracle2.islanding.insert({j, k});
                    continue;
                }
                for (int i = 0; i < L; ++i) {
                    if (i != j && i != k && std::abs((*post)(i)) > limits(i)) {
                        oracle2.overload.insert({j, k});
                        break;
                    }
                }
            }
        }

        if (sets1.overload != oracle1.overload || sets1.islanding != oracle1.islanding)
            ++mismatches;
        if (sets2.overload != oracle2.overload || sets2.islanding != oracle2.islanding)
            ++mismatches;
        const long count1 = static_cast<long>(oracle1.overload.size() + oracle1.islanding.size());
        const long count2 = static_cast<long>(oracle2.overload.size() + oracle2.islanding.size());
        if (s1.count != count1 || s2.count != count2) ++mismatches;
    }
    const double secs = sw.seconds();
    detail = std::to_string(kPoints) + " operating points, violation-set mismatches " +
             std::to_string(mismatches) + ", pair enumerations wrong " +
             std::to_string(pair_counts_wrong);
    return mismatches == 0 && pair_counts_wrong == 0 && secs < kBudgetSeconds;
}

// ---------------------------------------------------------------- 4 ----

// Toy feature series from real power flows so the composed losses see
// physically consistent inputs.
struct ToyData {
    FeatureSeries series;
    TruthSeries truth;
};

ToyData make_toy_series(const GridCase& grid, const MatrixBundle& kit, int epochs,
                        std::uint64_t seed) {
    const Eigen::VectorXd p0 = grid.p_load_vector();
    const Eigen::VectorXd q0 = grid.q_load_vector();
    Rng rng(seed);
    ToyData data;
    for (int t = 0; t < epochs; ++t) {
        const double wobble = kLoadScale * (1.0 + 0.25 * std::sin(0.4 * t));
        const AcSolution sol = solve_ac_power_flow(grid, p0 * wobble, q0 * wobble);
        Eigen::VectorXd z = h_measure(grid, sol.state);
        for (Eigen::Index i = 0; i < z.size(); ++i) z(i) += 0.01 * rng.gaussian();
        EpochFeatures feats;
        feats.z = z;
        feats.theta_tilde = dc_estimate(kit, z.head(grid.bus_count()));
        data.series.epochs.push_back(std::move(feats));
        data.truth.states.push_back(sol.state);
    }
    return data;
}

double fd_check_lstm(nn::LstmNet& net, const std::vector<Eigen::MatrixXd>& x_seq,
                     const Eigen::MatrixXd& target, double eps, double floor_scale) {
    nn::LstmCache cache;
    const Eigen::MatrixXd y = net.forward(x_seq, &cache);
    const Eigen::MatrixXd d_out = y - target;
    net.zero_grad();
    std::vector<Eigen::MatrixXd> d_inputs;
    net.backward(cache, d_out, &d_inputs);

    auto loss_at = [&](const std::vector<Eigen::MatrixXd>& seq) {
        const Eigen::MatrixXd out = net.forward(seq);
        return 0.5 * (out - target).squaredNorm();
    };

    double worst = 0.0;
    for (nn::Tensor* tensor : net.parameters()) {
        for (Eigen::Index r = 0; r < tensor->v.rows(); ++r) {
            for (Eigen::Index c = 0; c < tensor->v.cols(); ++c) {
                const double saved = tensor->v(r, c);
                tensor->v(r, c) = saved + eps;
                const double up = loss_at(x_seq);
                tensor->v(r, c) = saved - eps;
                const double down = loss_at(x_seq);
                tensor->v(r, c) = saved;
                const double fd = (up - down) / (2.0 * eps);
                worst = std::max(worst, rel_err(tensor->g(r, c), fd, floor_scale));
            }
        }
    }
    std::vector<Eigen::MatrixXd> probe = x_seq;
    for (std::size_t t = 0; t < probe.size(); ++t) {
        for (Eigen::Index r = 0; r < probe[t].rows(); ++r) {
            for (Eigen::Index c = 0; c < probe[t].cols(); ++c) {
                const double saved = probe[t](r, c);
                probe[t](r, c) = saved + eps;
                const double up = loss_at(probe);
                probe[t](r, c) = saved - eps;
                const double down = loss_at(probe);
                probe[t](r, c) = saved;
                const double fd = (up - down) / (2.0 * eps);
                worst = std::max(worst, rel_err(d_inputs[t](r, c), fd, floor_scale));
            }
        }
    }
    return worst;
}

double fd_check_mlp(nn::MlpNet& net, const Eigen::MatrixXd& x, const Eigen::MatrixXd& target,
                    double eps, double floor_scale) {
    nn::MlpCache cache;
    const Eigen::MatrixXd y = net.forward(x, &cache);
    const Eigen::MatrixXd d_out = y - target;
    net.zero_grad();
    Eigen::MatrixXd d_input;
    net.backward(cache, d_out, &d_input);

    auto loss_at = [&](const Eigen::MatrixXd& probe) {
        const Eigen::MatrixXd out = net.forward(probe);
        return 0.5 * (out - target).squaredNorm();
    };

    double worst = 0.0;
    for (nn::Tensor* tensor : net.parameters()) {
        for (Eigen::Index r = 0; r < tensor->v.rows(); ++r) {
            for (Eigen::Index c = 0; c < tensor->v.cols(); ++c) {
                const double saved = tensor->v(r, c);
                tensor->v(r, c) = saved + eps;
                const double up = loss_at(x);
                tensor->v(r, c) = saved - eps;
                const double down = loss_at(x);
                tensor->v(r, c) = saved;
                const double fd = (up - down) / (2.0 * eps);
                worst = std::max(worst, rel_err(tensor->g(r, c), fd, floor_scale));
            }
        }
    }
    Eigen::MatrixXd probe = x;
    for (Eigen::Index r = 0; r < probe.rows(); ++r) {
        for (Eigen::Index c = 0; c < probe.cols(); ++c) {
            const double saved = probe(r, c);
            probe(r, c) = saved + eps;
            const double up = loss_at(probe);
            probe(r, c) = saved - eps;
            const double down = loss_at(probe);
            probe(r, c) = saved;
            const double fd = (up - down) / (2.0 * eps);
            worst = std::max(worst, rel_err(d_input(r, c), fd, floor_scale));
        }
    }
    return worst;
}

// Gradient of the exact training objective through a freshly initialized
// network, checked coordinate by coordinate against central differences.
double fd_check_composed(const GridCase& grid, const MatrixBundle& kit, const ToyData& data,
                         ModelVariant variant, double eps, double floor_scale) {
    TrainConfig cfg;
    cfg.variant = variant;
    cfg.gamma = 1e-3;
    const int n = grid.bus_count();
    const int out_dim = 2 * n - 1;
    const int in_dim = variant == ModelVariant::chimera ? 3 * n : 2 * n;
    const int seq_len = variant == ModelVariant::mlp ? 1 : 4;

    TrainedModel shell;
    shell.variant = variant;
    shell.seq_len = seq_len;
    shell.input_mean = Eigen::VectorXd::Zero(in_dim);
    shell.input_sd = Eigen::VectorXd::Ones(in_dim);
    shell.gamma = cfg.gamma;

    const std::vector<std::size_t> epochs{2, 5, 8, 11};
    const int batch = static_cast<int>(epochs.size());
    std::vector<Eigen::MatrixXd> x_seq(static_cast<std::size_t>(seq_len),
                                       Eigen::MatrixXd(batch, in_dim));
    for (int b = 0; b < batch; ++b) {
        const auto window = assemble_window(shell, data.series, epochs[static_cast<std::size_t>(b)]);
        for (int step = 0; step < seq_len; ++step) {
            x_seq[static_cast<std::size_t>(step)].row(b) =
                window[static_cast<std::size_t>(step)].transpose();
        }
    }
    const TruthSeries* truth = variant == ModelVariant::mlp ? &data.truth : nullptr;

    Rng rng(0xace4);
    double worst = 0.0;
    if (variant == ModelVariant::mlp) {
        nn::MlpNet net = nn::MlpNet::make({in_dim, 10, out_dim}, rng);
        auto loss_at = [&]() {
            const Eigen::MatrixXd raw = net.forward(x_seq[0]);
            return training_loss(grid, kit, cfg, data.series, truth, epochs, {raw});
        };
        nn::MlpCache cache;
        const Eigen::MatrixXd raw = net.forward(x_seq[0], &cache);
        std::vector<Eigen::MatrixXd> d_raw;
        training_loss(grid, kit, cfg, data.series, truth, epochs, {raw}, &d_raw);
        net.zero_grad();
        net.backward(cache, d_raw[0]);
        for (nn::Tensor* tensor : net.parameters()) {
            for (Eigen::Index r = 0; r < tensor->v.rows(); ++r) {
                for (Eigen::Index c = 0; c < tensor->v.cols(); ++c) {
                    const double saved = tensor->v(r, c);
                    tensor->v(r, c) = saved + eps;
                    const double up = loss_at();
                    tensor->v(r, c) = saved - eps;
                    const double down = loss_at();
                    tensor->v(r, c) = saved;
                    const double fd = (up - down) / (2.0 * eps);
                    worst = std::max(worst, rel_err(tensor->g(r, c), fd, floor_scale));
                }
            }
        }
        return worst;
    }

    nn::LstmNet net = nn::LstmNet::make(in_dim, 6, 2, out_dim, seq_len, rng);
    auto loss_at = [&]() {
        const std::vector<Eigen::MatrixXd> raw = net.forward_all(x_seq);
        return training_loss(grid, kit, cfg, data.series, truth, epochs, raw);
    };
    nn::LstmCache cache;
    const std::vector<Eigen::MatrixXd> raw = net.forward_all(x_seq, &cache);
    std::vector<Eigen::MatrixXd> d_raw;
    training_loss(grid, kit, cfg, data.series, truth, epochs, raw, &d_raw);
    net.zero_grad();
    net.backward_all(cache, d_raw);
    for (nn::Tensor* tensor : net.parameters()) {
        for (Eigen::Index r = 0; r < tensor->v.rows(); ++r) {
            for (Eigen::Index c = 0; c < tensor->v.cols(); ++c) {
                const double saved = tensor->v(r, c);
                tensor->v(r, c) = saved + eps;
                const double up = loss_at();
                tensor->v(r, c) = saved - eps;
                const double down = loss_at();
                tensor->v(r, c) = saved;
                const double fd = (up - down) / (2.0 * eps);
                worst = std::max(worst, rel_err(tensor->g(r, c), fd, floor_scale));
            }
        }
    }
    return worst;
}

bool gradient_checks(const GridCase& grid, const MatrixBundle& kit, std::string& detail,
                     const Stopwatch& sw) {
    constexpr double kNetTol = 1e-4;
    constexpr double kComposedTol = 1e-3;
    constexpr double kEps = 1e-5;
    constexpr double kFloor = 1e-4;
    constexpr double kBudgetSeconds = 60.0;

    Rng rng(0xace5);
    nn::LstmNet lstm = nn::LstmNet::make(5, 4, 2, 3, 4, rng);
    std::vector<Eigen::MatrixXd> x_seq;
    for (int t = 0; t < 4; ++t) {
        Eigen::MatrixXd x(3, 5);
        for (Eigen::Index r = 0; r < x.rows(); ++r)
            for (Eigen::Index c = 0; c < x.cols(); ++c) x(r, c) = 0.5 * rng.gaussian();
        x_seq.push_back(std::move(x));
    }
    Eigen::MatrixXd target(3, 3);
    for (Eigen::Index r = 0; r < 3; ++r)
        for (Eigen::Index c = 0; c < 3; ++c) target(r, c) = 0.5 * rng.gaussian();
    const double worst_lstm = fd_check_lstm(lstm, x_seq, target, kEps, kFloor);

    nn::MlpNet mlp = nn::MlpNet::make({6, 5, 4}, rng);
    Eigen::MatrixXd x(3, 6), mlp_target(3, 4);
    for (Eigen::Index r = 0; r < x.rows(); ++r)
        for (Eigen::Index c = 0; c < x.cols(); ++c) x(r, c) = 0.5 * rng.gaussian();
    for (Eigen::Index r = 0; r < mlp_target.rows(); ++r)
        for (Eigen::Index c = 0; c < mlp_target.cols(); ++c) mlp_target(r, c) = 0.5 * rng.gaussian();
    const double worst_mlp = fd_check_mlp(mlp, x, mlp_target, kEps, kFloor);

    const ToyData toy = make_toy_series(grid, kit, 12, 0xace6);
    double worst_composed = 0.0;
    for (const ModelVariant v :
         {ModelVariant::chimera, ModelVariant::lstm_ref, ModelVariant::mlp}) {
        worst_composed = std::max(worst_composed, fd_check_composed(grid, kit, toy, v, kEps, kFloor));
    }

    const double secs = sw.seconds();
    detail = "worst rel err: lstm " + num(worst_lstm) + ", mlp " + num(worst_mlp) +
             ", composed loss " + num(worst_composed);
    return worst_lstm < kNetTol && worst_mlp < kNetTol && worst_composed < kComposedTol &&
           secs < kBudgetSeconds;
}

// ------------------------------------------------------------- 5 - 8 ----

struct PipelineArtifacts {
    Corpus corpus;
    FeatureSeries series;
    TruthSeries truth;
    SplitRanges splits;
    std::vector<ModelVariant> order;
    std::map<ModelVariant, TrainedModel> models;
    std::map<ModelVariant, double> train_seconds;
    std::map<ModelVariant, double> mape_total;
    std::map<ModelVariant, std::vector<int>> eps1, eps2;
    std::map<ModelVariant, std::vector<CampaignRecord>> campaigns;
    std::map<ModelVariant, std::vector<std::size_t>> campaign_pos;
    bool trained = false;
    bool attacked = false;
};

bool estimation_quality(const GridCase& grid, const MatrixBundle& kit, const LodfTable& lodf,
                        PipelineArtifacts& art, std::string& detail) {
    constexpr long kEpochs = 2000;
    constexpr double kMapeCapPercent = 5.0;
    constexpr double kTrainBudgetSeconds = 1800.0;
    constexpr std::uint64_t kDataSeed = 1;
    constexpr std::uint64_t kTrainSeed = 2;

    ProfileConfig pcfg;
    pcfg.epochs = kEpochs;
    pcfg.scale = kLoadScale;
    pcfg.seed = kDataSeed;
    // A chronological split on 2000 epochs puts the slow weekly sinusoid at a
    // phase the training range never visits, so hold it flat and keep the
    // daily cycle plus noise as the only drivers.
    pcfg.weekly_amplitude = 0.0;
    const LoadProfile profile = generate_profiles(grid, pcfg);
    CorpusConfig ccfg;
    ccfg.seed = kDataSeed + 0x9e37;
    art.corpus = build_corpus(grid, kit, profile, ccfg);
    if (art.corpus.dropped_epochs != 0 ||
        art.corpus.records.size() != static_cast<std::size_t>(kEpochs)) {
        detail = "corpus generation dropped " + std::to_string(art.corpus.dropped_epochs) +
                 " epochs";
        return false;
    }
    art.series = features_of(art.corpus);
    art.truth = truths_of(art.corpus);
    art.splits = split_corpus(art.corpus.records.size(), {0.7, 0.15, 0.15});
    const Eigen::VectorXd limits = grid.f_limit_vector();

    art.order = {ModelVariant::chimera, ModelVariant::lstm_ref, ModelVariant::mlp};
    for (const ModelVariant variant : art.order) {
        TrainConfig cfg;
        cfg.variant = variant;
        cfg.seed = kTrainSeed;
        // The physics loss has a shallow basin, so spend far more iterations
        // than the module defaults: a long constant-rate coarse phase followed
        // by a long triangular fine phase. Both fit the per-variant budget.
        cfg.coarse_iters = 4000;
        cfg.coarse_lr = 1e-3;
        cfg.fine_iters = 5000;
        cfg.train_begin = art.splits.train_begin;
        cfg.train_end = art.splits.train_end;
        cfg.val_begin = art.splits.val_begin;
        cfg.val_end = art.splits.val_end;
        Stopwatch train_sw;
        const TruthSeries* truth = variant == ModelVariant::mlp ? &art.truth : nullptr;
        art.models.emplace(variant, train_model(grid, kit, art.series, truth, cfg));
        art.train_seconds[variant] = train_sw.seconds();
    }
    art.trained = true;

    for (const ModelVariant variant : art.order) {
        const TrainedModel& model = art.models.at(variant);
        StateErrorStats err;
        std::vector<int> n1_est, n2_est, n1_truth, n2_truth;
        for (std::size_t t = art.splits.test_begin; t < art.splits.test_end; ++t) {
            const StateVector x_hat = estimate(model, grid, art.series, t);
            err.add(art.corpus.records[t].x_true, x_hat);
            const Eigen::VectorXd f_hat = dc_line_flows(kit, x_hat.theta);
            const ContingencyReport rep = analyze_contingencies(kit, lodf, f_hat, limits);
            n1_est.push_back(rep.n1);
            n2_est.push_back(rep.n2);
            n1_truth.push_back(art.corpus.records[t].n1_true);
            n2_truth.push_back(art.corpus.records[t].n2_true);
        }
        art.mape_total[variant] = err.total.value_percent();
        art.eps1[variant] = count_errors(n1_est, n1_truth);
        art.eps2[variant] = count_errors(n2_est, n2_truth);
    }

    bool pass = true;
    std::string mape_text, time_text;
    for (const ModelVariant variant : art.order) {
        const double mape = art.mape_total.at(variant);
        const double secs = art.train_seconds.at(variant);
        if (!(mape < kMapeCapPercent) || secs >= kTrainBudgetSeconds) pass = false;
        if (!mape_text.empty()) mape_text += "/";
        if (!time_text.empty()) time_text += "/";
        mape_text += num(mape, 3);
        time_text += num(secs, 3);
    }
    detail = "mape_total% (chimera/lstm_ref/mlp) " + mape_text + ", train s " + time_text;
    return pass;
}

bool contingency_fidelity(const PipelineArtifacts& art, std::string& detail) {
    constexpr double kMarginPoints = 0.05;

    const double frac_chimera = fraction_eq(art.eps1.at(ModelVariant::chimera), 0);
    const double frac_lstm = fraction_eq(art.eps1.at(ModelVariant::lstm_ref), 0);
    const double frac_mlp = fraction_eq(art.eps1.at(ModelVariant::mlp), 0);
    detail = "frac eps1=0 (chimera/lstm_ref/mlp) " + num(frac_chimera, 3) + "/" +
             num(frac_lstm, 3) + "/" + num(frac_mlp, 3);
    return frac_chimera >= frac_mlp + kMarginPoints - 1e-12 &&
           frac_lstm >= frac_mlp + kMarginPoints - 1e-12;
}

bool attack_resilience(const GridCase& grid, const MatrixBundle& kit, const LodfTable& lodf,
                       PipelineArtifacts& art, std::string& detail) {
    AttackConfig acfg;
    acfg.target_meters = p_meters_for_buses(grid, {1, 2, 3, 4, 5});

    std::map<ModelVariant, std::vector<int>> eps2a;
    for (const ModelVariant variant : art.order) {
        const TrainedModel& model = art.models.at(variant);
        const std::size_t warmup = static_cast<std::size_t>(model.seq_len - 1);
        const std::size_t begin = std::max(art.splits.test_begin, warmup);
        for (std::size_t t = begin; t < art.splits.test_end; ++t) {
            const EstimatorHooks hooks = make_model_hooks(model, grid, kit, art.series, t);
            CampaignRecord rec;
            rec.t = art.corpus.records[t].t;
            rec.result = optimize_attack(grid, kit, lodf, art.series.epochs[t].z, hooks, acfg);
            rec.n1_true = art.corpus.records[t].n1_true;
            rec.n2_true = art.corpus.records[t].n2_true;
            if (!rec.result.skipped) {
                eps2a[variant].push_back(std::abs(rec.result.n2_attacked - rec.n2_true));
            }
            art.campaigns[variant].push_back(std::move(rec));
            art.campaign_pos[variant].push_back(t);
        }
        if (eps2a[variant].empty()) {
            detail = to_string(variant) + " campaign produced no scored attacks";
            return false;
        }
    }
    art.attacked = true;

    const double mean_c = mean_of(eps2a.at(ModelVariant::chimera));
    const double mean_l = mean_of(eps2a.at(ModelVariant::lstm_ref));
    const double mean_m = mean_of(eps2a.at(ModelVariant::mlp));
    const double zero_c = fraction_eq(eps2a.at(ModelVariant::chimera), 0);
    const double zero_l = fraction_eq(eps2a.at(ModelVariant::lstm_ref), 0);
    const double lt5_c = fraction_leq(eps2a.at(ModelVariant::chimera), 4);
    const double lt5_l = fraction_leq(eps2a.at(ModelVariant::lstm_ref), 4);
    const double lt5_m = fraction_leq(eps2a.at(ModelVariant::mlp), 4);

    detail = "mean eps2_a " + num(mean_c, 3) + "/" + num(mean_l, 3) + "/" + num(mean_m, 3) +
             ", frac=0 " + num(zero_c, 3) + "/" + num(zero_l, 3) + ", frac<5 " + num(lt5_c, 3) +
             "/" + num(lt5_l, 3) + "/" + num(lt5_m, 3);
    return mean_c < mean_l && mean_l < mean_m && zero_c > zero_l && lt5_c > lt5_l && lt5_c > lt5_m;
}

bool attack_stealth(const GridCase& grid, const MatrixBundle& kit, PipelineArtifacts& art,
                    std::string& detail) {
    constexpr double kStealthFraction = 0.95;
    constexpr double kMapeRecurrentCap = 1.0;
    constexpr double kMapeMlpCap = 2.0;

    const int n = grid.bus_count();
    bool pass = true;
    std::string stealth_text, mape_text;
    for (const ModelVariant variant : art.order) {
        const TrainedModel& model = art.models.at(variant);
        const std::vector<CampaignRecord>& records = art.campaigns.at(variant);
        const std::vector<std::size_t>& positions = art.campaign_pos.at(variant);
        long claimed = 0, verified = 0;
        StateErrorStats att_err;
        for (std::size_t i = 0; i < records.size(); ++i) {
            const CampaignRecord& rec = records[i];
            if (rec.result.skipped) continue;
            const std::size_t t = positions[i];
            // Re-derivation from scratch: rebuild the attacked window the
            // way an operator's console would see it and score the residual
            // of the re-estimated state.
            const Eigen::VectorXd z_att = art.series.epochs[t].z + rec.result.a;
            std::vector<Eigen::VectorXd> window = assemble_window(model, art.series, t);
            EpochFeatures att;
            att.z = z_att;
            att.theta_tilde = dc_estimate(kit, z_att.head(n));
            window.back() = assemble_input(model.variant, att);
            const StateVector x_att = estimate_window(model, grid, window);
            att_err.add(art.corpus.records[t].x_true, x_att);
            if (rec.result.stealthy) {
                ++claimed;
                const double residual = evaluate_state(grid, z_att, x_att).residual_norm;
                if (residual < kTau) ++verified;
            }
        }
        const double frac =
            claimed > 0 ? static_cast<double>(verified) / static_cast<double>(claimed) : 0.0;
        const double mape_a = att_err.total.value_percent();
        const double cap = variant == ModelVariant::mlp ? kMapeMlpCap : kMapeRecurrentCap;
        if (claimed == 0 || frac < kStealthFraction || !(mape_a < cap)) pass = false;
        if (!stealth_text.empty()) stealth_text += "/";
        if (!mape_text.empty()) mape_text += "/";
        stealth_text += num(frac, 4);
        mape_text += num(mape_a, 3);
    }
    detail = "re-verified stealth fraction " + stealth_text + ", attacked mape_total% " + mape_text;
    return pass;
}

// ---------------------------------------------------------------- 9 ----

bool run_command(const std::string& command) {
    const std::string silenced = command + " >/dev/null 2>&1";
    return std::system(silenced.c_str()) == 0;
}

std::optional<std::string> slurp(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) return std::nullopt;
    std::ostringstream buffer;
    buffer << in.rdbuf();
    return buffer.str();
}

bool run_reduced_pipeline(const std::string& cli, const std::string& case_path,
                          const fs::path& dir, std::string& failure) {
    std::error_code ec;
    fs::remove_all(dir, ec);
    fs::create_directories(dir);
    const std::string corpus = (dir / "corpus.csv").string();
    std::vector<std::string> commands;
    commands.push_back(cli + " gen-data --case " + case_path + " --epochs 400 --seed 7 --scale " +
                       num(kLoadScale, 6) + " --out " + corpus);
    std::string model_args, campaign_args;
    for (const std::string name : {"chimera", "lstm_ref", "mlp"}) {
        const std::string model_path = (dir / (name + std::string(".json"))).string();
        const std::string campaign_path = (dir / (name + std::string("_campaign.jsonl"))).string();
        commands.push_back(cli + " train --case " + case_path + " --corpus " + corpus +
                           " --model " + name +
                           " --seed 2 --hidden 16 --seq-len 8 --coarse-iters 20"
                           " --fine-iters 20 --cycle 20 --val-every 10 --batch 16 --out " +
                           model_path);
        commands.push_back(cli + " attack --case " + case_path + " --corpus " + corpus +
                           " --model-file " + model_path + " --steps 10 --out " + campaign_path);
        model_args += " --model " + name + "=" + model_path;
        campaign_args += " --campaign " + name + "=" + campaign_path;
    }
    commands.push_back(cli + " evaluate --case " + case_path + " --corpus " + corpus + model_args +
                       campaign_args + " --range test --out-dir " + dir.string());
    for (const std::string& command : commands) {
        if (!run_command(command)) {
            failure = command;
            return false;
        }
    }
    return true;
}

bool determinism(const std::string& cli, const std::string& case_path, std::string& detail) {
    const fs::path dir_a = fs::temp_directory_path() / "gridse_accept_run_a";
    const fs::path dir_b = fs::temp_directory_path() / "gridse_accept_run_b";
    std::string failure;
    if (!run_reduced_pipeline(cli, case_path, dir_a, failure) ||
        !run_reduced_pipeline(cli, case_path, dir_b, failure)) {
        detail = "pipeline command failed: " + failure;
        return false;
    }
    const std::array<const char*, 3> tables{"metrics.csv", "metrics.json", "hist_eps.csv"};
    int identical = 0;
    std::string mismatch;
    for (const char* table : tables) {
        const auto a = slurp(dir_a / table);
        const auto b = slurp(dir_b / table);
        if (a && b && *a == *b) {
            ++identical;
        } else {
            if (!mismatch.empty()) mismatch += ",";
            mismatch += table;
        }
    }
    detail = "gen-data/train/attack/evaluate rerun, " + std::to_string(identical) + "/3 tables " +
             "byte-identical" + (mismatch.empty() ? "" : " (differs: " + mismatch + ")");
    return identical == static_cast<int>(tables.size());
}

void report(int index, const std::string& name, bool pass, const std::string& detail,
            double seconds) {
    std::printf("criterion %d %-21s %s  %s  [%.1f s]\n", index, name.c_str(),
                pass ? "PASS" : "FAIL", detail.c_str(), seconds);
    std::fflush(stdout);
}

}  // namespace

int main() {
    const std::string case_path = GRIDSE_CASE_FIXTURE;
    const std::string cli_path = GRIDSE_CLI_PATH;
    const GridCase grid = load_case(case_path);
    const MatrixBundle kit = build_matrices(grid);
    const LodfTable lodf = compute_lodf(kit);

    int failures = 0;
    auto run = [&](int index, const std::string& name, auto&& body) {
        Stopwatch sw;
        bool pass = false;
        std::string detail;
        try {
            pass = body(detail, sw);
        } catch (const std::exception& e) {
            pass = false;
            detail = std::string("exception: ") + e.what();
        }
        report(index, name, pass, detail, sw.seconds());
        if (!pass) ++failures;
        return pass;
    };

    run(1, "stealth-identity", [&](std::string& d, const Stopwatch& sw) {
        return stealth_identity(grid, kit, d, sw);
    });
    run(2, "estimator-recovery", [&](std::string& d, const Stopwatch& sw) {
        return estimator_recovery(grid, kit, d, sw);
    });
    run(3, "contingency-oracle", [&](std::string& d, const Stopwatch& sw) {
        return contingency_oracle(grid, kit, lodf, d, sw);
    });
    run(4, "gradient-checks", [&](std::string& d, const Stopwatch& sw) {
        return gradient_checks(grid, kit, d, sw);
    });

    PipelineArtifacts art;
    run(5, "estimation-quality", [&](std::string& d, const Stopwatch&) {
        return estimation_quality(grid, kit, lodf, art, d);
    });
    run(6, "contingency-fidelity", [&](std::string& d, const Stopwatch&) {
        if (!art.trained) {
            d = "skipped: no trained models";
            return false;
        }
        return contingency_fidelity(art, d);
    });
    run(7, "attack-resilience", [&](std::string& d, const Stopwatch&) {
        if (!art.trained) {
            d = "skipped: no trained models";
            return false;
        }
        return attack_resilience(grid, kit, lodf, art, d);
    });
    run(8, "attack-stealth", [&](std::string& d, const Stopwatch&) {
        if (!art.attacked) {
            d = "skipped: no attack campaigns";
            return false;
        }
        return attack_stealth(grid, kit, art, d);
    });
    run(9, "determinism", [&](std::string& d, const Stopwatch&) {
        return determinism(cli_path, case_path, d);
    });

    std::printf("acceptance: %d/9 criteria passed\n", 9 - failures);
    return failures;
}
