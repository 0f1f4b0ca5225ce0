#include "gridse/chimera.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>

#include <Eigen/Eigenvalues>
#include <nlohmann/json.hpp>

#include "gridse/run_manifest.hpp"

namespace gridse {

namespace {

using nlohmann::json;

bool is_recurrent(ModelVariant v) { return v != ModelVariant::mlp; }

// Packed state of the supervised decode = raw output + nominal voltage
// offset. The supervised loss is an identity metric on states, so the mlp
// needs no further conditioning.
Eigen::VectorXd packed_from_raw(const Eigen::VectorXd& raw, int n) {
    Eigen::VectorXd s = raw;
    s.tail(n).array() += 1.0;
    return s;
}

Eigen::VectorXd nominal_packed(int n) {
    Eigen::VectorXd p = Eigen::VectorXd::Zero(2 * n - 1);
    p.tail(n).array() = 1.0;
    return p;
}

// The physics loss seen through h has curvature J0'J0 whose eigenvalues
// span several decades (branch susceptances enter squared) and whose
// uniform-voltage direction is exactly flat, so first-order training
// stalls. The physics variants therefore read their output through
// S = (J0'J0 with floored spectrum)^(-1/2) at the nominal flat state:
// every state direction then shows the optimizer roughly unit curvature,
// while directions below the floor stay flat and are left to the window
// closure. S is a grid constant, not a learned parameter.
//
// The floor also caps the raw-to-state gain at 1/sqrt(floor * lambda_max),
// which keeps decoded voltages safely positive for moderate raw outputs.
constexpr double kWhitenFloor = 1e-2;

struct WhitenMap {
    Eigen::MatrixXd fwd;  // packed = nominal + fwd * raw
    Eigen::MatrixXd inv;  // raw = inv * (packed - nominal)
};

WhitenMap whitening_map(const GridCase& grid) {
    const int n = grid.bus_count();
    const StateVector flat = unpack_state(grid, nominal_packed(n));
    const Eigen::MatrixXd j0 = h_jacobian(grid, flat);
    const Eigen::MatrixXd gram = j0.transpose() * j0;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(gram);
    const Eigen::VectorXd lam =
        eig.eigenvalues().cwiseMax(kWhitenFloor * eig.eigenvalues().maxCoeff());
    WhitenMap map;
    map.fwd = eig.eigenvectors() * lam.cwiseSqrt().cwiseInverse().asDiagonal() *
              eig.eigenvectors().transpose();
    map.inv = eig.eigenvectors() * lam.cwiseSqrt().asDiagonal() *
              eig.eigenvectors().transpose();
    return map;
}

Eigen::VectorXd standardized(const Eigen::VectorXd& u, const TrainedModel& model) {
    return (u - model.input_mean).cwiseQuotient(model.input_sd);
}

std::size_t window_epoch(std::size_t t, int seq_len, int pos) {
    // pos 0 is the oldest step; negative history clamps to the series start.
    const long idx = static_cast<long>(t) - (seq_len - 1 - pos);
    return idx < 0 ? 0 : static_cast<std::size_t>(idx);
}

// Direction along which the measurement function of the lossless line model
// is nearly flat at a given state: scale every voltage by (1 + s) while
// compressing angles by (1 + s)^-2. P flows are invariant to first order
// and Q flows move only at second order.
Eigen::VectorXd weak_direction(const Eigen::VectorXd& packed, int n) {
    Eigen::VectorXd d(packed.size());
    d.head(n - 1) = -2.0 * packed.head(n - 1);
    d.tail(n) = packed.tail(n);
    return d;
}

// Derivative of weak_direction with respect to the packed state is the
// constant diagonal: -2 on the angle block, +1 on the voltage block.
double weak_direction_slope(Eigen::Index i, int n) { return i < n - 1 ? -2.0 : 1.0; }

// Probe step along the weak direction. The directional response is defined
// by this central difference, so the backward pass needs first derivatives
// of h only.
constexpr double kClosureEps = 1e-3;
// Keeps the solve inert when the window carries no scale information, e.g.
// at the flat zero-output state where the directional response vanishes.
constexpr double kClosureRidge = 1e-3;

struct ClosureStep {
    Eigen::VectorXd packed;    // decoded state at this step
    Eigen::VectorXd dir;       // weak direction at this step
    Eigen::VectorXd probe_up;  // packed + eps * dir
    Eigen::VectorXd probe_dn;  // packed - eps * dir
    Eigen::VectorXd a;         // directional response of h
    Eigen::VectorXd r;         // z - h(packed)
};

struct ClosureCache {
    std::vector<ClosureStep> steps;
    double den = 0.0;   // ridge + sum a.a
    double corr = 0.0;  // solved correction along the weak direction
};

// Ridge-regularized one-dimensional least squares over the whole window:
// corr = argmin_c sum_k ||r_k - a_k c||^2 + ridge c^2, applied along the
// last step's weak direction. Returns the corrected packed state.
Eigen::VectorXd closure_forward(const GridCase& grid,
                                const std::vector<Eigen::VectorXd>& packed_steps,
                                const std::vector<Eigen::VectorXd>& z_steps,
                                ClosureCache* cache) {
    const int n = grid.bus_count();
    double num = 0.0;
    double den = kClosureRidge;
    if (cache) cache->steps.clear();
    Eigen::VectorXd last_packed, last_dir;
    for (std::size_t k = 0; k < packed_steps.size(); ++k) {
        ClosureStep step;
        step.packed = packed_steps[k];
        step.dir = weak_direction(step.packed, n);
        step.probe_up = step.packed + kClosureEps * step.dir;
        step.probe_dn = step.packed - kClosureEps * step.dir;
        step.a = (h_measure(grid, unpack_state(grid, step.probe_up)) -
                  h_measure(grid, unpack_state(grid, step.probe_dn))) /
                 (2.0 * kClosureEps);
        step.r = z_steps[k] - h_measure(grid, unpack_state(grid, step.packed));
        num += step.a.dot(step.r);
        den += step.a.dot(step.a);
        last_packed = step.packed;
        last_dir = step.dir;
        if (cache) cache->steps.push_back(std::move(step));
    }
    const double corr = num / den;
    if (cache) {
        cache->den = den;
        cache->corr = corr;
    }
    return last_packed + corr * last_dir;
}

// Pulls a gradient at the corrected state back onto every step's packed
// state (accumulated into d_packed_steps, which must be pre-sized and
// zeroed). When d_z_last is non-null it accumulates the direct dependence
// of the corrected state on the last step's measurement vector.
void closure_backward(const GridCase& grid, const ClosureCache& cache,
                      const Eigen::VectorXd& d_x,
                      std::vector<Eigen::VectorXd>& d_packed_steps,
                      Eigen::VectorXd* d_z_last) {
    const int n = grid.bus_count();
    const std::size_t T = cache.steps.size();

    auto along_slope = [&](const Eigen::VectorXd& v) {
        Eigen::VectorXd out(v.size());
        for (Eigen::Index i = 0; i < v.size(); ++i) out(i) = weak_direction_slope(i, n) * v(i);
        return out;
    };

    // x = p_T + corr * dir(p_T): the direct part, then the scalar chain
    // through corr = num / den.
    d_packed_steps[T - 1] += d_x + cache.corr * along_slope(d_x);
    const double d_corr = cache.steps[T - 1].dir.dot(d_x);
    const double d_num = d_corr / cache.den;
    const double d_den = -d_corr * cache.corr / cache.den;

    for (std::size_t k = 0; k < T; ++k) {
        const ClosureStep& step = cache.steps[k];
        const Eigen::VectorXd d_a = d_num * step.r + 2.0 * d_den * step.a;
        const Eigen::VectorXd d_r = d_num * step.a;
        if (d_z_last && k + 1 == T) *d_z_last += d_r;

        const Eigen::MatrixXd j_up = h_jacobian(grid, unpack_state(grid, step.probe_up));
        const Eigen::MatrixXd j_dn = h_jacobian(grid, unpack_state(grid, step.probe_dn));
        const Eigen::MatrixXd j_at = h_jacobian(grid, unpack_state(grid, step.packed));

        const Eigen::VectorXd d_up = j_up.transpose() * d_a / (2.0 * kClosureEps);
        const Eigen::VectorXd d_dn = j_dn.transpose() * d_a / (-2.0 * kClosureEps);
        Eigen::VectorXd d_p = -(j_at.transpose() * d_r);
        d_p += d_up + kClosureEps * along_slope(d_up);
        d_p += d_dn - kClosureEps * along_slope(d_dn);
        d_packed_steps[k] += d_p;
    }
}

// Per-sample physics / supervised loss and its raw-output gradient. All the
// variants share this; which terms are active depends on the variant.
class LossEvaluator {
public:
    LossEvaluator(const GridCase& grid, const MatrixBundle& kit, const TrainConfig& cfg,
                  const FeatureSeries& series, const TruthSeries* truth)
        : grid_(grid), kit_(kit), cfg_(cfg), series_(series), truth_(truth),
          n_(grid.bus_count()), m_(2 * grid.bus_count()) {
        if (cfg.variant != ModelVariant::mlp) white_ = whitening_map(grid);
    }

    // Supervised loss on a single raw row. raw: out_dim vector for epoch t.
    double evaluate_mlp(std::size_t t, const Eigen::VectorXd& raw, Eigen::VectorXd* d_raw) const {
        const int out_dim = 2 * n_ - 1;
        const Eigen::VectorXd s_true = pack_state(grid_, truth_->states[t]);
        const Eigen::VectorXd diff = packed_from_raw(raw, n_) - s_true;
        if (d_raw) *d_raw = (2.0 / static_cast<double>(out_dim)) * diff;
        return diff.squaredNorm() / static_cast<double>(out_dim);
    }

    // Physics loss for epoch t, through the decode of the per-step raw
    // outputs of t's window (oldest first). d_raw_steps, when non-null, must
    // match raw_steps in shape and receives accumulated gradients.
    double evaluate_window(std::size_t t, const std::vector<Eigen::VectorXd>& raw_steps,
                           std::vector<Eigen::VectorXd>* d_raw_steps) const {
        const int T = static_cast<int>(raw_steps.size());
        const Eigen::VectorXd nominal = nominal_packed(n_);
        std::vector<Eigen::VectorXd> packed_steps(raw_steps.size());
        std::vector<Eigen::VectorXd> z_steps(raw_steps.size());
        for (int k = 0; k < T; ++k) {
            const auto ku = static_cast<std::size_t>(k);
            packed_steps[ku] = nominal + white_.fwd * raw_steps[ku];
            z_steps[ku] = series_.epochs[window_epoch(t, T, k)].z;
        }

        ClosureCache cc;
        const Eigen::VectorXd x_packed =
            closure_forward(grid_, packed_steps, z_steps, d_raw_steps ? &cc : nullptr);
        const StateVector x_hat = unpack_state(grid_, x_packed);

        const EpochFeatures& feats = series_.epochs[t];
        const Eigen::VectorXd r = feats.z - h_measure(grid_, x_hat);
        double loss = r.squaredNorm() / static_cast<double>(m_);
        Eigen::VectorXd d_x;
        if (d_raw_steps) {
            const Eigen::MatrixXd h_jac = h_jacobian(grid_, x_hat);
            d_x = -(2.0 / static_cast<double>(m_)) * (h_jac.transpose() * r);
        }

        if (cfg_.variant == ModelVariant::chimera) {
            const std::size_t prev = (t == 0) ? 0 : t - 1;
            const Eigen::VectorXd p_t = feats.z.head(n_);
            const Eigen::VectorXd p_prev = series_.epochs[prev].z.head(n_);
            const Eigen::VectorXd theta_red = x_packed.head(n_ - 1);
            const Eigen::VectorXd theta_tilde_prev =
                kit_.reduce_angles(series_.epochs[prev].theta_tilde);
            const Eigen::VectorXd d =
                (p_t - p_prev) - kit_.H_dc * (theta_red - theta_tilde_prev);
            loss += cfg_.gamma * d.squaredNorm() / static_cast<double>(n_);
            if (d_raw_steps) {
                d_x.head(n_ - 1) -=
                    cfg_.gamma * (2.0 / static_cast<double>(n_)) * (kit_.H_dc.transpose() * d);
            }
        }
        if (d_raw_steps) {
            std::vector<Eigen::VectorXd> d_packed_steps(raw_steps.size(),
                                                        Eigen::VectorXd::Zero(2 * n_ - 1));
            closure_backward(grid_, cc, d_x, d_packed_steps, nullptr);
            for (std::size_t k = 0; k < raw_steps.size(); ++k) {
                (*d_raw_steps)[k] += white_.fwd.transpose() * d_packed_steps[k];
            }
        }
        return loss;
    }

private:
    const GridCase& grid_;
    const MatrixBundle& kit_;
    const TrainConfig& cfg_;
    const FeatureSeries& series_;
    const TruthSeries* truth_;
    int n_, m_;
    WhitenMap white_;
};

}  // namespace

std::string to_string(ModelVariant v) {
    switch (v) {
        case ModelVariant::chimera: return "chimera";
        case ModelVariant::lstm_ref: return "lstm_ref";
        case ModelVariant::mlp: return "mlp";
    }
    throw InputError("unknown model variant");
}

ModelVariant variant_from_string(const std::string& name) {
    if (name == "chimera") return ModelVariant::chimera;
    if (name == "lstm_ref") return ModelVariant::lstm_ref;
    if (name == "mlp") return ModelVariant::mlp;
    throw InputError("unknown model variant '" + name + "' (expected chimera, lstm_ref or mlp)");
}

double static_loss(const GridCase& grid, const Eigen::VectorXd& z, const StateVector& x_hat) {
    const int m = 2 * grid.bus_count();
    if (z.size() != m) {
        throw InputError("static_loss expects " + std::to_string(m) + " measurements");
    }
    return (z - h_measure(grid, x_hat)).squaredNorm() / static_cast<double>(m);
}

double dynamic_loss(const MatrixBundle& kit, const Eigen::VectorXd& p_t,
                    const Eigen::VectorXd& p_prev, const Eigen::VectorXd& theta_hat,
                    const Eigen::VectorXd& theta_tilde_prev) {
    const int n = kit.bus_count();
    if (p_t.size() != n || p_prev.size() != n) {
        throw InputError("dynamic_loss expects " + std::to_string(n) + " P meters");
    }
    const Eigen::VectorXd d = (p_t - p_prev) -
        kit.H_dc * (kit.reduce_angles(theta_hat) - kit.reduce_angles(theta_tilde_prev));
    return d.squaredNorm() / static_cast<double>(n);
}

Eigen::VectorXd assemble_input(ModelVariant variant, const EpochFeatures& feats) {
    if (variant != ModelVariant::chimera) return feats.z;
    Eigen::VectorXd u(feats.z.size() + feats.theta_tilde.size());
    u << feats.z, feats.theta_tilde;
    return u;
}

std::vector<Eigen::VectorXd> assemble_window(const TrainedModel& model,
                                             const FeatureSeries& series, std::size_t t) {
    if (t >= series.size()) {
        throw InputError("epoch " + std::to_string(t) + " outside the series");
    }
    const int T = is_recurrent(model.variant) ? model.seq_len : 1;
    std::vector<Eigen::VectorXd> window;
    window.reserve(static_cast<std::size_t>(T));
    for (int k = 0; k < T; ++k) {
        window.push_back(
            assemble_input(model.variant, series.epochs[window_epoch(t, T, k)]));
    }
    return window;
}

TrainedModel train_model(const GridCase& grid, const MatrixBundle& kit,
                         const FeatureSeries& series, const TruthSeries* truth,
                         const TrainConfig& cfg, TrainLog* log) {
    const auto t_start = std::chrono::steady_clock::now();
    const int n = grid.bus_count();
    const int m = 2 * n;
    const int out_dim = 2 * n - 1;

    if (cfg.train_end <= cfg.train_begin || cfg.train_end > series.size() ||
        cfg.val_end <= cfg.val_begin || cfg.val_end > series.size()) {
        throw InputError("train/val ranges are empty or out of bounds");
    }
    if (cfg.batch_size <= 0 || cfg.coarse_iters < 0 || cfg.fine_iters < 0) {
        throw InputError("nonsensical training configuration");
    }
    if (cfg.variant == ModelVariant::mlp) {
        if (!truth || truth->states.size() != series.size()) {
            throw InputError("supervised variant needs ground truth for every epoch");
        }
    } else if (truth) {
        throw InputError("physics-trained variants must not receive ground truth");
    }

    TrainedModel model;
    model.variant = cfg.variant;
    model.seq_len = is_recurrent(cfg.variant) ? cfg.seq_len : 1;
    model.gamma = cfg.gamma;
    model.seed = cfg.seed;

    {
        std::string canon = to_string(cfg.variant) + "|h" + std::to_string(cfg.hidden) + "|l" +
                            std::to_string(cfg.lstm_layers) + "|T" + std::to_string(cfg.seq_len) +
                            "|g" + std::to_string(cfg.gamma) + "|b" + std::to_string(cfg.batch_size) +
                            "|c" + std::to_string(cfg.coarse_iters) + "@" +
                            std::to_string(cfg.coarse_lr) + "|f" + std::to_string(cfg.fine_iters) +
                            "|s" + std::to_string(cfg.seed) + "|tr" +
                            std::to_string(cfg.train_begin) + ":" + std::to_string(cfg.train_end) +
                            "|va" + std::to_string(cfg.val_begin) + ":" + std::to_string(cfg.val_end);
        for (int d : cfg.mlp_hidden) canon += "|m" + std::to_string(d);
        model.config_hash = fnv1a(canon);
    }

    const int in_dim = (cfg.variant == ModelVariant::chimera) ? m + n : m;

    // Raw inputs for the whole series; standardization uses train-range
    // statistics only.
    std::vector<Eigen::VectorXd> u_raw(series.size());
    for (std::size_t t = 0; t < series.size(); ++t) {
        u_raw[t] = assemble_input(cfg.variant, series.epochs[t]);
        if (u_raw[t].size() != in_dim) {
            throw InputError("series epoch " + std::to_string(t) + " has inconsistent width");
        }
    }
    Eigen::VectorXd mean = Eigen::VectorXd::Zero(in_dim);
    for (std::size_t t = cfg.train_begin; t < cfg.train_end; ++t) mean += u_raw[t];
    mean /= static_cast<double>(cfg.train_end - cfg.train_begin);
    Eigen::VectorXd var = Eigen::VectorXd::Zero(in_dim);
    for (std::size_t t = cfg.train_begin; t < cfg.train_end; ++t) {
        var += (u_raw[t] - mean).cwiseAbs2();
    }
    var /= static_cast<double>(cfg.train_end - cfg.train_begin);
    model.input_mean = mean;
    model.input_sd = var.cwiseSqrt().cwiseMax(1e-8);

    std::vector<Eigen::VectorXd> u_std(series.size());
    for (std::size_t t = 0; t < series.size(); ++t) {
        u_std[t] = standardized(u_raw[t], model);
    }

    Rng root(cfg.seed);
    Rng init_rng = root.fork(0x696e6974);
    Rng batch_rng = root.fork(0x62617463);

    if (is_recurrent(cfg.variant)) {
        model.lstm = nn::LstmNet::make(in_dim, cfg.hidden, cfg.lstm_layers, out_dim,
                                       cfg.seq_len, init_rng);
    } else {
        std::vector<int> dims;
        dims.push_back(in_dim);
        for (int d : cfg.mlp_hidden) dims.push_back(d);
        dims.push_back(out_dim);
        model.mlp = nn::MlpNet::make(dims, init_rng);
    }

    const std::vector<nn::Tensor*> params =
        is_recurrent(cfg.variant) ? model.lstm.parameters() : model.mlp.parameters();
    nn::Adam adam;
    const LossEvaluator losses(grid, kit, cfg, series, truth);
    const int T = model.seq_len;
    const std::size_t train_len = cfg.train_end - cfg.train_begin;

    // Both net kinds speak per-step blocks; the mlp is the single-step case.
    auto forward_batch = [&](const std::vector<std::size_t>& idx, nn::LstmCache* lstm_cache,
                             nn::MlpCache* mlp_cache) -> std::vector<Eigen::MatrixXd> {
        const int B = static_cast<int>(idx.size());
        if (is_recurrent(cfg.variant)) {
            std::vector<Eigen::MatrixXd> x_seq(static_cast<std::size_t>(T));
            for (int k = 0; k < T; ++k) {
                Eigen::MatrixXd& step = x_seq[static_cast<std::size_t>(k)];
                step.resize(B, in_dim);
                for (int b = 0; b < B; ++b) {
                    step.row(b) =
                        u_std[window_epoch(idx[static_cast<std::size_t>(b)], T, k)].transpose();
                }
            }
            return model.lstm.forward_all(x_seq, lstm_cache);
        }
        Eigen::MatrixXd x(B, in_dim);
        for (int b = 0; b < B; ++b) {
            x.row(b) = u_std[idx[static_cast<std::size_t>(b)]].transpose();
        }
        return {model.mlp.forward(x, mlp_cache)};
    };

    auto batch_loss_grad = [&](const std::vector<std::size_t>& idx,
                               const std::vector<Eigen::MatrixXd>& y_steps,
                               std::vector<Eigen::MatrixXd>* d_out) -> double {
        const int B = static_cast<int>(idx.size());
        if (d_out) {
            d_out->assign(y_steps.size(), Eigen::MatrixXd::Zero(B, out_dim));
        }
        double loss = 0.0;
        if (cfg.variant == ModelVariant::mlp) {
            Eigen::VectorXd d_raw;
            for (int b = 0; b < B; ++b) {
                loss += losses.evaluate_mlp(idx[static_cast<std::size_t>(b)],
                                            y_steps[0].row(b).transpose(),
                                            d_out ? &d_raw : nullptr);
                if (d_out) (*d_out)[0].row(b) = d_raw / static_cast<double>(B);
            }
            return loss / static_cast<double>(B);
        }
        std::vector<Eigen::VectorXd> raw_steps(y_steps.size());
        std::vector<Eigen::VectorXd> d_raw_steps;
        for (int b = 0; b < B; ++b) {
            for (std::size_t k = 0; k < y_steps.size(); ++k) {
                raw_steps[k] = y_steps[k].row(b).transpose();
            }
            if (d_out) d_raw_steps.assign(y_steps.size(), Eigen::VectorXd::Zero(out_dim));
            loss += losses.evaluate_window(idx[static_cast<std::size_t>(b)], raw_steps,
                                           d_out ? &d_raw_steps : nullptr);
            if (d_out) {
                for (std::size_t k = 0; k < y_steps.size(); ++k) {
                    (*d_out)[k].row(b) = d_raw_steps[k] / static_cast<double>(B);
                }
            }
        }
        return loss / static_cast<double>(B);
    };

    // Validation on a strided subsample keeps snapshot selection cheap.
    std::vector<std::size_t> val_idx;
    for (std::size_t t = cfg.val_begin; t < cfg.val_end; t += 3) val_idx.push_back(t);

    auto validation_loss = [&]() -> double {
        double total = 0.0;
        std::size_t done = 0;
        while (done < val_idx.size()) {
            const std::size_t chunk = std::min<std::size_t>(64, val_idx.size() - done);
            std::vector<std::size_t> idx(val_idx.begin() + static_cast<long>(done),
                                         val_idx.begin() + static_cast<long>(done + chunk));
            const std::vector<Eigen::MatrixXd> y = forward_batch(idx, nullptr, nullptr);
            total += batch_loss_grad(idx, y, nullptr) * static_cast<double>(chunk);
            done += chunk;
        }
        return total / static_cast<double>(val_idx.size());
    };

    std::vector<Eigen::MatrixXd> best_params;
    double best_val = std::numeric_limits<double>::infinity();
    long best_iter = -1;
    auto snapshot_if_better = [&](long iteration) {
        const double val = validation_loss();
        if (log) log->val_loss.emplace_back(iteration, val);
        if (val < best_val) {
            best_val = val;
            best_iter = iteration;
            best_params.clear();
            for (const nn::Tensor* p : params) best_params.push_back(p->v);
        }
    };

    snapshot_if_better(-1);

    const long total_iters = cfg.coarse_iters + cfg.fine_iters;
    for (long it = 0; it < total_iters; ++it) {
        const double lr = (it < cfg.coarse_iters)
                              ? cfg.coarse_lr
                              : cfg.fine_schedule.at(it - cfg.coarse_iters);

        std::vector<std::size_t> idx(static_cast<std::size_t>(cfg.batch_size));
        for (auto& t : idx) t = cfg.train_begin + batch_rng.below(train_len);

        nn::LstmCache lstm_cache;
        nn::MlpCache mlp_cache;
        const std::vector<Eigen::MatrixXd> y = forward_batch(idx, &lstm_cache, &mlp_cache);
        std::vector<Eigen::MatrixXd> d_out;
        const double loss = batch_loss_grad(idx, y, &d_out);
        if (!std::isfinite(loss)) {
            throw ConvergenceError("training diverged at iteration " + std::to_string(it));
        }
        if (log) log->train_loss.push_back(loss);

        if (is_recurrent(cfg.variant)) {
            model.lstm.zero_grad();
            model.lstm.backward_all(lstm_cache, d_out);
        } else {
            model.mlp.zero_grad();
            model.mlp.backward(mlp_cache, d_out[0]);
        }
        adam.step(params, lr);

        if ((cfg.val_every > 0 && (it + 1) % cfg.val_every == 0) || it + 1 == total_iters) {
            snapshot_if_better(it);
        }
    }

    if (!best_params.empty()) {
        for (std::size_t k = 0; k < params.size(); ++k) params[k]->v = best_params[k];
    }
    if (log) {
        log->best_iteration = best_iter;
        log->best_val_loss = best_val;
        log->seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    }
    return model;
}

double training_loss(const GridCase& grid, const MatrixBundle& kit, const TrainConfig& cfg,
                     const FeatureSeries& series, const TruthSeries* truth,
                     const std::vector<std::size_t>& epochs,
                     const std::vector<Eigen::MatrixXd>& raw_steps,
                     std::vector<Eigen::MatrixXd>* d_raw) {
    if (raw_steps.empty()) throw InputError("at least one raw output step expected");
    if (cfg.variant == ModelVariant::mlp && raw_steps.size() != 1) {
        throw InputError("the mlp variant has a single-step window");
    }
    for (const Eigen::MatrixXd& step : raw_steps) {
        if (step.rows() != static_cast<Eigen::Index>(epochs.size())) {
            throw InputError("one raw output row per epoch expected in every step");
        }
    }
    if (cfg.variant == ModelVariant::mlp) {
        if (!truth) throw InputError("supervised loss needs ground truth");
    } else if (truth) {
        throw InputError("physics losses must not receive ground truth");
    }
    const LossEvaluator losses(grid, kit, cfg, series, truth);
    const double B = static_cast<double>(epochs.size());
    if (d_raw) {
        d_raw->assign(raw_steps.size(),
                      Eigen::MatrixXd::Zero(raw_steps[0].rows(), raw_steps[0].cols()));
    }
    double total = 0.0;
    if (cfg.variant == ModelVariant::mlp) {
        Eigen::VectorXd g;
        for (std::size_t b = 0; b < epochs.size(); ++b) {
            total += losses.evaluate_mlp(epochs[b],
                                         raw_steps[0].row(static_cast<Eigen::Index>(b)).transpose(),
                                         d_raw ? &g : nullptr);
            if (d_raw) (*d_raw)[0].row(static_cast<Eigen::Index>(b)) = g.transpose() / B;
        }
        return total / B;
    }
    std::vector<Eigen::VectorXd> sample(raw_steps.size());
    std::vector<Eigen::VectorXd> g_steps;
    for (std::size_t b = 0; b < epochs.size(); ++b) {
        for (std::size_t k = 0; k < raw_steps.size(); ++k) {
            sample[k] = raw_steps[k].row(static_cast<Eigen::Index>(b)).transpose();
        }
        if (d_raw) {
            g_steps.assign(raw_steps.size(), Eigen::VectorXd::Zero(raw_steps[0].cols()));
        }
        total += losses.evaluate_window(epochs[b], sample, d_raw ? &g_steps : nullptr);
        if (d_raw) {
            for (std::size_t k = 0; k < raw_steps.size(); ++k) {
                (*d_raw)[k].row(static_cast<Eigen::Index>(b)) = g_steps[k].transpose() / B;
            }
        }
    }
    return total / B;
}

StateVector decode_estimate(const GridCase& grid, ModelVariant variant,
                            const std::vector<Eigen::VectorXd>& raw_steps,
                            const std::vector<Eigen::VectorXd>& z_steps) {
    const int n = grid.bus_count();
    if (raw_steps.empty()) throw InputError("decode_estimate needs at least one raw step");
    if (variant == ModelVariant::mlp) {
        return unpack_state(grid, packed_from_raw(raw_steps.back(), n));
    }
    if (z_steps.size() != raw_steps.size()) {
        throw InputError("decode_estimate needs one measurement vector per raw step");
    }
    const WhitenMap white = whitening_map(grid);
    const Eigen::VectorXd nominal = nominal_packed(n);
    std::vector<Eigen::VectorXd> packed_steps(raw_steps.size());
    for (std::size_t k = 0; k < raw_steps.size(); ++k) {
        packed_steps[k] = nominal + white.fwd * raw_steps[k];
    }
    return unpack_state(grid, closure_forward(grid, packed_steps, z_steps, nullptr));
}

Eigen::VectorXd encode_state(const GridCase& grid, ModelVariant variant, const StateVector& x) {
    const int n = grid.bus_count();
    const Eigen::VectorXd diff = pack_state(grid, x) - nominal_packed(n);
    if (variant == ModelVariant::mlp) return diff;
    return whitening_map(grid).inv * diff;
}

StateVector estimate_window(const TrainedModel& model, const GridCase& grid,
                            const std::vector<Eigen::VectorXd>& window) {
    const int n = grid.bus_count();
    const int m = 2 * n;
    const int T = is_recurrent(model.variant) ? model.seq_len : 1;
    if (static_cast<int>(window.size()) != T) {
        throw InputError("window length " + std::to_string(window.size()) + ", expected " +
                         std::to_string(T));
    }
    std::vector<Eigen::VectorXd> raw_steps(window.size());
    std::vector<Eigen::VectorXd> z_steps(window.size());
    if (is_recurrent(model.variant)) {
        std::vector<Eigen::MatrixXd> x_seq(window.size());
        for (std::size_t k = 0; k < window.size(); ++k) {
            x_seq[k] = standardized(window[k], model).transpose();
        }
        const std::vector<Eigen::MatrixXd> y = model.lstm.forward_all(x_seq, nullptr);
        for (std::size_t k = 0; k < window.size(); ++k) {
            raw_steps[k] = y[k].row(0).transpose();
            z_steps[k] = window[k].head(m);
        }
    } else {
        const Eigen::MatrixXd y =
            model.mlp.forward(standardized(window[0], model).transpose(), nullptr);
        raw_steps[0] = y.row(0).transpose();
    }
    return decode_estimate(grid, model.variant, raw_steps, z_steps);
}

StateVector estimate(const TrainedModel& model, const GridCase& grid,
                     const FeatureSeries& series, std::size_t t) {
    return estimate_window(model, grid, assemble_window(model, series, t));
}

Eigen::VectorXd input_gradient_z(const TrainedModel& model, const GridCase& grid,
                                 const MatrixBundle& kit,
                                 const std::vector<Eigen::VectorXd>& window,
                                 const Eigen::VectorXd& d_state) {
    const int n = grid.bus_count();
    const int m = 2 * n;
    if (d_state.size() != 2 * n - 1) {
        throw InputError("d_state must be packed-state sized");
    }

    Eigen::VectorXd d_u_std;
    Eigen::VectorXd d_z_direct = Eigen::VectorXd::Zero(m);
    if (is_recurrent(model.variant)) {
        std::vector<Eigen::MatrixXd> x_seq(window.size());
        std::vector<Eigen::VectorXd> z_steps(window.size());
        for (std::size_t k = 0; k < window.size(); ++k) {
            x_seq[k] = standardized(window[k], model).transpose();
            z_steps[k] = window[k].head(m);
        }
        nn::LstmCache cache;
        // Parameter gradients are clobbered here; harmless outside training.
        TrainedModel& mutable_model = const_cast<TrainedModel&>(model);
        mutable_model.lstm.zero_grad();
        const std::vector<Eigen::MatrixXd> y = mutable_model.lstm.forward_all(x_seq, &cache);
        const WhitenMap white = whitening_map(grid);
        const Eigen::VectorXd nominal = nominal_packed(n);
        std::vector<Eigen::VectorXd> packed_steps(window.size());
        for (std::size_t k = 0; k < window.size(); ++k) {
            packed_steps[k] = nominal + white.fwd * y[k].row(0).transpose();
        }

        ClosureCache cc;
        closure_forward(grid, packed_steps, z_steps, &cc);
        std::vector<Eigen::VectorXd> d_packed_steps(window.size(),
                                                    Eigen::VectorXd::Zero(2 * n - 1));
        closure_backward(grid, cc, d_state, d_packed_steps, &d_z_direct);

        std::vector<Eigen::MatrixXd> d_out_seq(window.size());
        for (std::size_t k = 0; k < window.size(); ++k) {
            d_out_seq[k] = (white.fwd.transpose() * d_packed_steps[k]).transpose();
        }
        std::vector<Eigen::MatrixXd> d_inputs;
        mutable_model.lstm.backward_all(cache, d_out_seq, &d_inputs);
        d_u_std = d_inputs.back().row(0).transpose();
    } else {
        nn::MlpCache cache;
        TrainedModel& mutable_model = const_cast<TrainedModel&>(model);
        mutable_model.mlp.zero_grad();
        mutable_model.mlp.forward(standardized(window[0], model).transpose(), &cache);
        Eigen::MatrixXd d_input;
        mutable_model.mlp.backward(cache, d_state.transpose(), &d_input);
        d_u_std = d_input.row(0).transpose();
    }

    const Eigen::VectorXd d_u = d_u_std.cwiseQuotient(model.input_sd);
    Eigen::VectorXd d_z = d_u.head(m) + d_z_direct;
    if (model.variant == ModelVariant::chimera) {
        // theta_tilde = expand(G^-1 H' P): pull the tail gradient back onto
        // the P meters. G is small, solve on the fly.
        const Eigen::MatrixXd gram = kit.H_dc.transpose() * kit.H_dc;
        const Eigen::VectorXd w = gram.ldlt().solve(kit.reduce_angles(d_u.tail(n)));
        d_z.head(n) += kit.H_dc * w;
    }
    return d_z;
}

namespace {

json matrix_to_json(const Eigen::MatrixXd& mat) {
    json rows = json::array();
    for (Eigen::Index r = 0; r < mat.rows(); ++r) {
        json row = json::array();
        for (Eigen::Index c = 0; c < mat.cols(); ++c) row.push_back(mat(r, c));
        rows.push_back(std::move(row));
    }
    return rows;
}

Eigen::MatrixXd matrix_from_json(const json& rows) {
    const Eigen::Index r = static_cast<Eigen::Index>(rows.size());
    if (r == 0) return {};
    const Eigen::Index c = static_cast<Eigen::Index>(rows.at(0).size());
    Eigen::MatrixXd mat(r, c);
    for (Eigen::Index i = 0; i < r; ++i) {
        const json& row = rows.at(static_cast<std::size_t>(i));
        if (static_cast<Eigen::Index>(row.size()) != c) {
            throw InputError("ragged matrix in checkpoint");
        }
        for (Eigen::Index j = 0; j < c; ++j) mat(i, j) = row.at(static_cast<std::size_t>(j));
    }
    return mat;
}

json vector_to_json(const Eigen::VectorXd& v) {
    json arr = json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i) arr.push_back(v(i));
    return arr;
}

Eigen::VectorXd vector_from_json(const json& arr) {
    Eigen::VectorXd v(static_cast<Eigen::Index>(arr.size()));
    for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = arr.at(static_cast<std::size_t>(i));
    return v;
}

}  // namespace

void save_model(const std::string& path, const TrainedModel& model) {
    json doc;
    doc["format"] = "gridse-model-v1";
    doc["variant"] = to_string(model.variant);
    doc["seq_len"] = model.seq_len;
    doc["gamma"] = model.gamma;
    doc["seed"] = model.seed;
    doc["config_hash"] = model.config_hash;
    doc["input_mean"] = vector_to_json(model.input_mean);
    doc["input_sd"] = vector_to_json(model.input_sd);

    if (model.variant == ModelVariant::mlp) {
        json net;
        net["w"] = json::array();
        net["b"] = json::array();
        for (const nn::Tensor& t : model.mlp.w) net["w"].push_back(matrix_to_json(t.v));
        for (const nn::Tensor& t : model.mlp.b) net["b"].push_back(vector_to_json(t.v.col(0)));
        doc["mlp"] = std::move(net);
    } else {
        json net;
        net["seq_len"] = model.lstm.seq_len;
        net["layers"] = json::array();
        for (const nn::LstmLayer& layer : model.lstm.layers) {
            json l;
            l["in_dim"] = layer.in_dim;
            l["hidden"] = layer.hidden;
            l["w"] = matrix_to_json(layer.w.v);
            l["r"] = matrix_to_json(layer.r.v);
            l["b"] = vector_to_json(layer.b.v.col(0));
            net["layers"].push_back(std::move(l));
        }
        net["w_out"] = matrix_to_json(model.lstm.w_out.v);
        net["b_out"] = vector_to_json(model.lstm.b_out.v.col(0));
        doc["lstm"] = std::move(net);
    }

    std::ofstream out(path);
    if (!out) throw InputError("cannot write model file " + path);
    out << doc.dump(1) << "\n";
}

TrainedModel load_model(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open model file " + path);
    json doc;
    try {
        in >> doc;
    } catch (const json::parse_error& err) {
        throw InputError(path + ": not valid JSON: " + err.what());
    }

    try {
        if (doc.at("format").get<std::string>() != "gridse-model-v1") {
            throw InputError(path + ": unsupported model format");
        }
        TrainedModel model;
        model.variant = variant_from_string(doc.at("variant").get<std::string>());
        model.seq_len = doc.at("seq_len").get<int>();
        model.gamma = doc.at("gamma").get<double>();
        model.seed = doc.at("seed").get<std::uint64_t>();
        model.config_hash = doc.at("config_hash").get<std::uint64_t>();
        model.input_mean = vector_from_json(doc.at("input_mean"));
        model.input_sd = vector_from_json(doc.at("input_sd"));

        if (model.variant == ModelVariant::mlp) {
            const json& net = doc.at("mlp");
            nn::MlpNet mlp;
            const json& ws = net.at("w");
            const json& bs = net.at("b");
            if (ws.size() != bs.size()) throw InputError(path + ": mlp weight/bias mismatch");
            for (std::size_t l = 0; l < ws.size(); ++l) {
                nn::Tensor w;
                w.v = matrix_from_json(ws.at(l));
                w.g = Eigen::MatrixXd::Zero(w.v.rows(), w.v.cols());
                nn::Tensor b;
                b.v = vector_from_json(bs.at(l));
                b.g = Eigen::MatrixXd::Zero(b.v.rows(), 1);
                mlp.w.push_back(std::move(w));
                mlp.b.push_back(std::move(b));
            }
            model.mlp = std::move(mlp);
        } else {
            const json& net = doc.at("lstm");
            nn::LstmNet lstm;
            lstm.seq_len = net.at("seq_len").get<int>();
            for (const json& l : net.at("layers")) {
                nn::LstmLayer layer;
                layer.in_dim = l.at("in_dim").get<int>();
                layer.hidden = l.at("hidden").get<int>();
                layer.w.v = matrix_from_json(l.at("w"));
                layer.w.g = Eigen::MatrixXd::Zero(layer.w.v.rows(), layer.w.v.cols());
                layer.r.v = matrix_from_json(l.at("r"));
                layer.r.g = Eigen::MatrixXd::Zero(layer.r.v.rows(), layer.r.v.cols());
                layer.b.v = vector_from_json(l.at("b"));
                layer.b.g = Eigen::MatrixXd::Zero(layer.b.v.rows(), 1);
                lstm.layers.push_back(std::move(layer));
            }
            lstm.w_out.v = matrix_from_json(net.at("w_out"));
            lstm.w_out.g = Eigen::MatrixXd::Zero(lstm.w_out.v.rows(), lstm.w_out.v.cols());
            lstm.b_out.v = vector_from_json(net.at("b_out"));
            lstm.b_out.g = Eigen::MatrixXd::Zero(lstm.b_out.v.rows(), 1);
            model.lstm = std::move(lstm);
        }
        return model;
    } catch (const json::exception& err) {
        throw InputError(path + ": bad model structure: " + err.what());
    }
}

}  // namespace gridse
