// Command-line frontend: synthetic corpus generation, model training,
// attack campaigns, and metric evaluation over one grid case.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "gridse/chimera.hpp"
#include "gridse/contingency.hpp"
#include "gridse/dataset.hpp"
#include "gridse/estimation.hpp"
#include "gridse/evaluation.hpp"
#include "gridse/fdia.hpp"
#include "gridse/grid_model.hpp"
#include "gridse/run_manifest.hpp"
#include "gridse/version.hpp"

namespace {

using namespace gridse;

namespace fs = std::filesystem;

// Relative outputs land under GRIDSE_OUT_DIR when it is set.
std::string resolve_out(const std::string& path) {
    const char* base = std::getenv("GRIDSE_OUT_DIR");
    if (!base || *base == '\0' || fs::path(path).is_absolute()) return path;
    return (fs::path(base) / path).string();
}

void ensure_parent_dir(const std::string& path) {
    const fs::path parent = fs::path(path).parent_path();
    if (!parent.empty()) fs::create_directories(parent);
}

struct Timer {
    std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    }
};

std::array<double, 3> parse_split(const std::string& text) {
    std::array<double, 3> fractions{};
    std::stringstream ss(text);
    std::string field;
    int k = 0;
    while (std::getline(ss, field, ',')) {
        if (k >= 3) throw InputError("--split wants three comma-separated fractions");
        fractions[static_cast<std::size_t>(k++)] = std::stod(field);
    }
    if (k != 3) throw InputError("--split wants three comma-separated fractions");
    return fractions;
}

std::pair<std::size_t, std::size_t> range_of(const std::string& name, const SplitRanges& splits,
                                             std::size_t total) {
    if (name == "train") return {splits.train_begin, splits.train_end};
    if (name == "val") return {splits.val_begin, splits.val_end};
    if (name == "test") return {splits.test_begin, splits.test_end};
    if (name == "all") return {0, total};
    throw InputError("unknown range '" + name + "' (train, val, test or all)");
}

std::vector<int> parse_bus_list(const std::string& text) {
    std::vector<int> ids;
    std::stringstream ss(text);
    std::string field;
    while (std::getline(ss, field, ',')) ids.push_back(std::stoi(field));
    if (ids.empty()) throw InputError("empty bus list");
    return ids;
}

// "name=path" pairs from repeatable options, order-preserving.
std::vector<std::pair<std::string, std::string>> parse_named_paths(
    const std::vector<std::string>& specs, const char* what) {
    std::vector<std::pair<std::string, std::string>> out;
    for (const std::string& spec : specs) {
        const auto eq = spec.find('=');
        if (eq == std::string::npos || eq == 0 || eq + 1 == spec.size()) {
            throw InputError(std::string(what) + " wants NAME=PATH, got '" + spec + "'");
        }
        out.emplace_back(spec.substr(0, eq), spec.substr(eq + 1));
    }
    return out;
}

int run_gen_data(const std::string& case_path, long epochs, std::uint64_t seed, double scale,
                 double noise_sigma, double interval_minutes, const std::string& out_arg) {
    Timer timer;
    const std::string out = resolve_out(out_arg);
    const GridCase grid = load_case(case_path);
    const MatrixBundle kit = build_matrices(grid);

    ProfileConfig pcfg;
    pcfg.epochs = epochs;
    pcfg.seed = seed;
    pcfg.scale = scale;
    pcfg.interval_minutes = interval_minutes;
    const LoadProfile profile = generate_profiles(grid, pcfg);

    CorpusConfig ccfg;
    ccfg.noise_sigma = noise_sigma;
    ccfg.seed = seed + 0x9e37;
    const Corpus corpus = build_corpus(grid, kit, profile, ccfg);

    ensure_parent_dir(out);
    write_corpus_csv(out, corpus);

    long n1_nonzero = 0;
    for (const EpochRecord& rec : corpus.records) {
        if (rec.n1_true > 0) ++n1_nonzero;
    }

    RunManifest manifest;
    manifest.command = "gen-data";
    manifest.seed = seed;
    manifest.config_hash = fnv1a("gen|" + std::to_string(epochs) + "|" + std::to_string(scale) +
                                 "|" + std::to_string(noise_sigma) + "|" +
                                 std::to_string(interval_minutes) + "|" + std::to_string(seed));
    manifest.inputs.emplace_back(case_path, fnv1a_file(case_path));
    manifest.outputs.push_back(out);
    manifest.seconds = timer.seconds();
    write_manifest(out + ".manifest.json", manifest);

    std::cout << "wrote " << corpus.records.size() << " epochs to " << out << " ("
              << corpus.dropped_epochs << " dropped, " << n1_nonzero
              << " with N-1 violations)\n";
    return 0;
}

int run_train(const std::string& case_path, const std::string& corpus_path,
              const std::string& variant_name, const TrainConfig& base_cfg,
              const std::string& split_text, const std::string& out_arg) {
    Timer timer;
    const std::string out = resolve_out(out_arg);
    const GridCase grid = load_case(case_path);
    const MatrixBundle kit = build_matrices(grid);
    const Corpus corpus = read_corpus_csv(corpus_path);
    if (corpus.bus_count != grid.bus_count()) {
        throw InputError("corpus was generated for a different bus count");
    }
    const SplitRanges splits = split_corpus(corpus.records.size(), parse_split(split_text));

    TrainConfig cfg = base_cfg;
    cfg.variant = variant_from_string(variant_name);
    cfg.train_begin = splits.train_begin;
    cfg.train_end = splits.train_end;
    cfg.val_begin = splits.val_begin;
    cfg.val_end = splits.val_end;

    const FeatureSeries series = features_of(corpus);
    TruthSeries truth;
    const TruthSeries* truth_ptr = nullptr;
    if (cfg.variant == ModelVariant::mlp) {
        truth = truths_of(corpus);
        truth_ptr = &truth;
    }

    TrainLog log;
    const TrainedModel model = train_model(grid, kit, series, truth_ptr, cfg, &log);
    ensure_parent_dir(out);
    save_model(out, model);

    RunManifest manifest;
    manifest.command = "train";
    manifest.seed = cfg.seed;
    manifest.config_hash = model.config_hash;
    manifest.inputs.emplace_back(case_path, fnv1a_file(case_path));
    manifest.inputs.emplace_back(corpus_path, fnv1a_file(corpus_path));
    manifest.outputs.push_back(out);
    manifest.seconds = timer.seconds();
    write_manifest(out + ".manifest.json", manifest);

    std::cout << "trained " << variant_name << " in " << log.seconds << " s, best val loss "
              << log.best_val_loss << " at iteration " << log.best_iteration << ", saved to "
              << out << "\n";
    return 0;
}

int run_attack(const std::string& case_path, const std::string& corpus_path,
               const std::string& model_path, const AttackConfig& base_cfg, double fm_mw,
               const std::string& bus_list, const std::string& range_name,
               const std::string& split_text, const std::string& out_arg) {
    Timer timer;
    const std::string out = resolve_out(out_arg);
    const GridCase grid = load_case(case_path);
    const MatrixBundle kit = build_matrices(grid);
    const LodfTable lodf = compute_lodf(kit);
    const Corpus corpus = read_corpus_csv(corpus_path);
    const TrainedModel model = load_model(model_path);
    const FeatureSeries series = features_of(corpus);
    const SplitRanges splits = split_corpus(corpus.records.size(), parse_split(split_text));
    auto [begin, end] = range_of(range_name, splits, corpus.records.size());

    AttackConfig cfg = base_cfg;
    cfg.f_m = fm_mw / grid.base_mva();
    cfg.target_meters = p_meters_for_buses(grid, parse_bus_list(bus_list));

    // Recurrent estimators need a full window of real history.
    const std::size_t warmup = static_cast<std::size_t>(model.seq_len - 1);
    std::vector<CampaignRecord> records;
    long stealthy = 0, effective = 0, skipped = 0;
    for (std::size_t t = std::max(begin, warmup); t < end; ++t) {
        const EstimatorHooks hooks = make_model_hooks(model, grid, kit, series, t);
        CampaignRecord rec;
        rec.t = corpus.records[t].t;
        rec.n1_true = corpus.records[t].n1_true;
        rec.n2_true = corpus.records[t].n2_true;
        rec.result = optimize_attack(grid, kit, lodf, corpus.records[t].z, hooks, cfg);
        if (rec.result.skipped) {
            ++skipped;
        } else {
            stealthy += rec.result.stealthy ? 1 : 0;
            effective += rec.result.effective ? 1 : 0;
        }
        records.push_back(std::move(rec));
    }

    ensure_parent_dir(out);
    write_campaign_jsonl(out, records);

    RunManifest manifest;
    manifest.command = "attack";
    manifest.config_hash = fnv1a("attack|" + std::to_string(cfg.tau) + "|" +
                                 std::to_string(cfg.f_m) + "|" + std::to_string(cfg.learning_rate) +
                                 "|" + std::to_string(cfg.max_steps) + "|" +
                                 std::to_string(cfg.magnitude_cap) + "|" + std::to_string(cfg.rho) +
                                 "|" + bus_list + "|" + range_name);
    manifest.inputs.emplace_back(case_path, fnv1a_file(case_path));
    manifest.inputs.emplace_back(corpus_path, fnv1a_file(corpus_path));
    manifest.inputs.emplace_back(model_path, fnv1a_file(model_path));
    manifest.outputs.push_back(out);
    manifest.seconds = timer.seconds();
    write_manifest(out + ".manifest.json", manifest);

    const long attacked = static_cast<long>(records.size()) - skipped;
    std::cout << "attacked " << attacked << " epochs (" << skipped << " skipped): " << stealthy
              << " stealthy, " << effective << " effective, written to " << out << "\n";
    return 0;
}

int run_evaluate(const std::string& case_path, const std::string& corpus_path,
                 const std::vector<std::string>& model_specs,
                 const std::vector<std::string>& campaign_specs, const std::string& range_name,
                 const std::string& split_text, const std::string& out_dir_arg) {
    Timer timer;
    const std::string out_dir = resolve_out(out_dir_arg);
    const GridCase grid = load_case(case_path);
    const MatrixBundle kit = build_matrices(grid);
    const LodfTable lodf = compute_lodf(kit);
    const Eigen::VectorXd limits = grid.f_limit_vector();
    const Corpus corpus = read_corpus_csv(corpus_path);
    const FeatureSeries series = features_of(corpus);
    const SplitRanges splits = split_corpus(corpus.records.size(), parse_split(split_text));
    auto [begin, end] = range_of(range_name, splits, corpus.records.size());

    const auto models = parse_named_paths(model_specs, "--model");
    if (models.empty()) throw InputError("evaluate needs at least one --model NAME=PATH");
    std::map<std::string, std::string> campaigns;
    for (auto& [name, path] : parse_named_paths(campaign_specs, "--campaign")) {
        campaigns[name] = path;
    }

    std::vector<std::pair<std::string, TrainedModel>> loaded;
    std::size_t warmup = 0;
    for (const auto& [name, path] : models) {
        loaded.emplace_back(name, load_model(path));
        warmup = std::max(warmup, static_cast<std::size_t>(loaded.back().second.seq_len - 1));
    }
    // All models are scored on the identical epoch set, so padded windows
    // are excluded using the longest warmup among them.
    begin = std::max(begin, warmup);
    if (begin >= end) throw InputError("evaluation range is empty after warmup exclusion");

    std::vector<ModelMetrics> rows;
    std::vector<HistogramRow> hist_rows;
    for (const auto& [name, model] : loaded) {
        ModelMetrics row;
        row.model = name;

        StateErrorStats clean_err;
        std::vector<int> n1_est, n2_est, n1_truth, n2_truth;
        for (std::size_t t = begin; t < end; ++t) {
            const StateVector x_hat = estimate(model, grid, series, t);
            clean_err.add(corpus.records[t].x_true, x_hat);
            const Eigen::VectorXd f_hat = dc_line_flows(kit, x_hat.theta);
            const ContingencyReport rep = analyze_contingencies(kit, lodf, f_hat, limits);
            n1_est.push_back(rep.n1);
            n2_est.push_back(rep.n2);
            n1_truth.push_back(corpus.records[t].n1_true);
            n2_truth.push_back(corpus.records[t].n2_true);
        }
        row.mape_v = clean_err.v.value_percent();
        row.mape_theta = clean_err.theta.value_percent();
        row.mape_total = clean_err.total.value_percent();
        const std::vector<int> eps1 = count_errors(n1_est, n1_truth);
        const std::vector<int> eps2 = count_errors(n2_est, n2_truth);
        row.mean_eps1 = mean_of(eps1);
        row.mean_eps2 = mean_of(eps2);
        row.frac_eps1_zero = fraction_eq(eps1, 0);
        row.frac_eps2_zero = fraction_eq(eps2, 0);
        row.frac_eps2_lt5 = fraction_leq(eps2, 4);
        row.epochs_scored = static_cast<long>(end - begin);
        hist_rows.push_back(HistogramRow{name, "eps1", histogram_of(eps1)});
        hist_rows.push_back(HistogramRow{name, "eps2", histogram_of(eps2)});

        const auto campaign_it = campaigns.find(name);
        if (campaign_it != campaigns.end()) {
            const std::vector<CampaignRecord> campaign = read_campaign_jsonl(campaign_it->second);
            // Corpus epoch ids map back to record positions.
            std::map<long, std::size_t> position;
            for (std::size_t i = 0; i < corpus.records.size(); ++i) {
                position[corpus.records[i].t] = i;
            }

            StateErrorStats att_err;
            std::vector<int> eps1_a, eps2_a;
            double abs_injection = 0.0;
            long injection_count = 0;
            long stealthy = 0, effective = 0;
            for (const CampaignRecord& rec : campaign) {
                if (rec.result.skipped) {
                    ++row.attacks_skipped;
                    continue;
                }
                const auto pos_it = position.find(rec.t);
                if (pos_it == position.end()) {
                    throw InputError("campaign epoch " + std::to_string(rec.t) +
                                     " is not in the corpus");
                }
                const std::size_t t = pos_it->second;
                const EstimatorHooks hooks = make_model_hooks(model, grid, kit, series, t);
                const StateVector x_att = hooks.estimate(corpus.records[t].z + rec.result.a);
                att_err.add(corpus.records[t].x_true, x_att);
                eps1_a.push_back(std::abs(rec.result.n1_attacked - rec.n1_true));
                eps2_a.push_back(std::abs(rec.result.n2_attacked - rec.n2_true));
                for (Eigen::Index i = 0; i < rec.result.a.size(); ++i) {
                    if (rec.result.a(i) != 0.0) {
                        abs_injection += std::abs(rec.result.a(i));
                        ++injection_count;
                    }
                }
                stealthy += rec.result.stealthy ? 1 : 0;
                effective += rec.result.effective ? 1 : 0;
                ++row.attacks_scored;
            }
            if (row.attacks_scored > 0) {
                row.mape_v_a = att_err.v.value_percent();
                row.mape_theta_a = att_err.theta.value_percent();
                row.mape_total_a = att_err.total.value_percent();
                row.mean_eps1_a = mean_of(eps1_a);
                row.mean_eps2_a = mean_of(eps2_a);
                row.frac_eps1a_zero = fraction_eq(eps1_a, 0);
                row.frac_eps2a_zero = fraction_eq(eps2_a, 0);
                row.frac_eps2a_lt5 = fraction_leq(eps2_a, 4);
                row.stealth_rate = static_cast<double>(stealthy) /
                                   static_cast<double>(row.attacks_scored);
                row.effective_rate = static_cast<double>(effective) /
                                     static_cast<double>(row.attacks_scored);
                row.mean_abs_injection =
                    injection_count > 0 ? abs_injection / static_cast<double>(injection_count) : 0.0;
                hist_rows.push_back(HistogramRow{name, "eps1_a", histogram_of(eps1_a)});
                hist_rows.push_back(HistogramRow{name, "eps2_a", histogram_of(eps2_a)});
            }
        }
        rows.push_back(std::move(row));
    }

    fs::create_directories(out_dir);
    const std::string metrics_csv = (fs::path(out_dir) / "metrics.csv").string();
    const std::string metrics_json = (fs::path(out_dir) / "metrics.json").string();
    const std::string hist_csv = (fs::path(out_dir) / "hist_eps.csv").string();
    write_metrics_csv(metrics_csv, rows);
    write_metrics_json(metrics_json, rows);
    write_histograms_csv(hist_csv, hist_rows);

    RunManifest manifest;
    manifest.command = "evaluate";
    std::string canon = "evaluate|" + range_name + "|" + split_text;
    manifest.inputs.emplace_back(case_path, fnv1a_file(case_path));
    manifest.inputs.emplace_back(corpus_path, fnv1a_file(corpus_path));
    for (const auto& [name, path] : models) {
        canon += "|m:" + name;
        manifest.inputs.emplace_back(path, fnv1a_file(path));
    }
    for (const auto& [name, path] : campaigns) {
        canon += "|c:" + name;
        manifest.inputs.emplace_back(path, fnv1a_file(path));
    }
    manifest.config_hash = fnv1a(canon);
    manifest.outputs = {metrics_csv, metrics_json, hist_csv};
    manifest.seconds = timer.seconds();
    write_manifest((fs::path(out_dir) / "manifest.json").string(), manifest);

    std::cout << "evaluated " << rows.size() << " model(s) over " << (end - begin)
              << " epochs, tables in " << out_dir << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Power grid state estimation security testbed"};
    app.set_version_flag("--version", std::string(gridse::kVersion));
    app.require_subcommand(1);

    // gen-data
    std::string gd_case, gd_out;
    long gd_epochs = 9030;
    std::uint64_t gd_seed = 1;
    double gd_scale = 0.65, gd_sigma = 0.01, gd_interval = 5.0;
    CLI::App* gen = app.add_subcommand("gen-data", "Synthesize a measurement corpus");
    gen->add_option("--case", gd_case, "Grid case JSON")->required();
    gen->add_option("--epochs", gd_epochs, "Number of 5-minute epochs");
    gen->add_option("--seed", gd_seed, "RNG seed");
    gen->add_option("--scale", gd_scale, "Global load scale");
    gen->add_option("--noise-sigma", gd_sigma, "Measurement noise sd (pu)");
    gen->add_option("--interval-minutes", gd_interval, "Epoch spacing in minutes");
    gen->add_option("--out", gd_out, "Output corpus CSV")->required();

    // train
    std::string tr_case, tr_corpus, tr_model, tr_out, tr_split = "0.7,0.15,0.15";
    TrainConfig tr_cfg;
    tr_cfg.seed = 2;
    CLI::App* train = app.add_subcommand("train", "Train a state estimator");
    train->add_option("--case", tr_case, "Grid case JSON")->required();
    train->add_option("--corpus", tr_corpus, "Corpus CSV")->required();
    train->add_option("--model", tr_model, "chimera, lstm_ref or mlp")->required();
    train->add_option("--seed", tr_cfg.seed, "RNG seed");
    train->add_option("--hidden", tr_cfg.hidden, "LSTM hidden width");
    train->add_option("--layers", tr_cfg.lstm_layers, "LSTM layer count");
    train->add_option("--seq-len", tr_cfg.seq_len, "Input window length");
    train->add_option("--gamma", tr_cfg.gamma, "Dynamic loss weight");
    train->add_option("--batch", tr_cfg.batch_size, "Minibatch size");
    train->add_option("--coarse-iters", tr_cfg.coarse_iters, "Coarse phase iterations");
    train->add_option("--coarse-lr", tr_cfg.coarse_lr, "Coarse phase learning rate");
    train->add_option("--fine-iters", tr_cfg.fine_iters, "Fine-tune iterations");
    train->add_option("--lr-min", tr_cfg.fine_schedule.lr_min, "Cyclical schedule floor");
    train->add_option("--lr-max", tr_cfg.fine_schedule.lr_max, "Cyclical schedule peak");
    train->add_option("--cycle", tr_cfg.fine_schedule.cycle, "Cyclical schedule period");
    train->add_option("--val-every", tr_cfg.val_every, "Validation cadence");
    train->add_option("--split", tr_split, "train,val,test fractions");
    train->add_option("--out", tr_out, "Output model JSON")->required();

    // attack
    std::string at_case, at_corpus, at_model, at_out, at_range = "test";
    std::string at_buses = "1,2,3,4,5", at_split = "0.7,0.15,0.15";
    AttackConfig at_cfg;
    double at_fm_mw = 3.0;
    CLI::App* attack = app.add_subcommand("attack", "Run an attack campaign");
    attack->add_option("--case", at_case, "Grid case JSON")->required();
    attack->add_option("--corpus", at_corpus, "Corpus CSV")->required();
    attack->add_option("--model-file", at_model, "Trained model JSON")->required();
    attack->add_option("--tau", at_cfg.tau, "Detection threshold");
    attack->add_option("--fm-mw", at_fm_mw, "True-system safety margin in MW");
    attack->add_option("--lr", at_cfg.learning_rate, "Ascent learning rate");
    attack->add_option("--steps", at_cfg.max_steps, "Maximum ascent steps");
    attack->add_option("--cap", at_cfg.magnitude_cap, "Per-meter injection cap (pu)");
    attack->add_option("--rho", at_cfg.rho, "Stealth penalty weight");
    attack->add_option("--target-buses", at_buses, "Comma-separated bus ids under attack");
    attack->add_option("--range", at_range, "train, val, test or all");
    attack->add_option("--split", at_split, "train,val,test fractions");
    attack->add_option("--out", at_out, "Output campaign JSONL")->required();

    // evaluate
    std::string ev_case, ev_corpus, ev_out_dir, ev_range = "test", ev_split = "0.7,0.15,0.15";
    std::vector<std::string> ev_models, ev_campaigns;
    CLI::App* evaluate = app.add_subcommand("evaluate", "Score models and campaigns");
    evaluate->add_option("--case", ev_case, "Grid case JSON")->required();
    evaluate->add_option("--corpus", ev_corpus, "Corpus CSV")->required();
    evaluate->add_option("--model", ev_models, "NAME=PATH model checkpoint (repeatable)")
        ->required();
    evaluate->add_option("--campaign", ev_campaigns, "NAME=PATH campaign JSONL (repeatable)");
    evaluate->add_option("--range", ev_range, "train, val, test or all");
    evaluate->add_option("--split", ev_split, "train,val,test fractions");
    evaluate->add_option("--out-dir", ev_out_dir, "Directory for metric tables")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (gen->parsed()) {
            return run_gen_data(gd_case, gd_epochs, gd_seed, gd_scale, gd_sigma, gd_interval,
                                gd_out);
        }
        if (train->parsed()) {
            return run_train(tr_case, tr_corpus, tr_model, tr_cfg, tr_split, tr_out);
        }
        if (attack->parsed()) {
            return run_attack(at_case, at_corpus, at_model, at_cfg, at_fm_mw, at_buses, at_range,
                              at_split, at_out);
        }
        if (evaluate->parsed()) {
            return run_evaluate(ev_case, ev_corpus, ev_models, ev_campaigns, ev_range, ev_split,
                                ev_out_dir);
        }
        std::cerr << "no subcommand selected\n";
        return 2;
    } catch (const gridse::Error& err) {
        std::cerr << "error: " << err.what() << "\n";
        return 2;
    } catch (const std::exception& err) {
        std::cerr << "internal error: " << err.what() << "\n";
        return 3;
    }
}
