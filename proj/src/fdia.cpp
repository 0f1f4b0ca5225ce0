#include "gridse/fdia.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <memory>
#include <set>

#include <nlohmann/json.hpp>

#include "gridse/powerflow.hpp"

namespace gridse {

namespace {

using nlohmann::json;

Eigen::VectorXd embed_support(const std::vector<int>& support, const Eigen::VectorXd& a_sup,
                              int m) {
    Eigen::VectorXd a = Eigen::VectorXd::Zero(m);
    for (std::size_t q = 0; q < support.size(); ++q) a(support[q]) = a_sup(static_cast<long>(q));
    return a;
}

// Weight applied to the residual inside d(stat)/d(residual).
Eigen::VectorXd stat_residual_weight(const Eigen::VectorXd& r, double stat_value,
                                     const Eigen::VectorXd& sigma, BddStatistic stat, int m) {
    switch (stat) {
        case BddStatistic::residual_norm: {
            const double denom = std::max(stat_value, 1e-12);
            return r / denom;
        }
        case BddStatistic::weighted_ssr:
            return 2.0 * r.cwiseQuotient(sigma.cwiseAbs2());
        case BddStatistic::weighted_ssr_over_m:
            return (2.0 / static_cast<double>(m)) * r.cwiseQuotient(sigma.cwiseAbs2());
    }
    throw InputError("unknown bdd statistic");
}

}  // namespace

Eigen::VectorXd stealthy_injection(const MatrixBundle& kit, const Eigen::VectorXd& c) {
    const int n = kit.bus_count();
    if (c.size() != n - 1) {
        throw InputError("stealthy_injection expects a reduced state deviation of size " +
                         std::to_string(n - 1));
    }
    Eigen::VectorXd a = Eigen::VectorXd::Zero(2 * n);
    a.head(n) = kit.H_dc * c;
    return a;
}

int select_target_line(const Eigen::VectorXd& post_outage_flows, const Eigen::VectorXd& limits,
                       double f_m, const std::vector<char>& excluded) {
    if (post_outage_flows.size() != limits.size()) {
        throw InputError("flow/limit size mismatch");
    }
    if (!excluded.empty() && static_cast<long>(excluded.size()) != limits.size()) {
        throw InputError("exclusion mask size mismatch");
    }
    int best = -1;
    double best_margin = std::numeric_limits<double>::infinity();
    for (int i = 0; i < limits.size(); ++i) {
        if (!excluded.empty() && excluded[static_cast<std::size_t>(i)]) continue;
        const double margin = limits(i) - std::abs(post_outage_flows(i));
        // Feasibility: pushing this line's reading past its limit stays a
        // fiction, the physical flow keeps at least f_m of headroom.
        if (margin <= f_m) continue;
        if (margin < best_margin) {
            best_margin = margin;
            best = i;
        }
    }
    if (best < 0) {
        throw AttackError("no feasible target line: every candidate is within " +
                          std::to_string(f_m) + " of its limit or excluded");
    }
    return best;
}

std::vector<int> p_meters_for_buses(const GridCase& grid, const std::vector<int>& bus_ids) {
    std::vector<int> meters;
    meters.reserve(bus_ids.size());
    for (int id : bus_ids) meters.push_back(grid.bus_index(id));
    return meters;
}

AttackResult optimize_attack(const GridCase& grid, const MatrixBundle& kit,
                             const LodfTable& lodf, const Eigen::VectorXd& z_clean,
                             const EstimatorHooks& hooks, const AttackConfig& cfg) {
    const int n = grid.bus_count();
    const int m = 2 * n;
    const int L = kit.branch_count();
    if (z_clean.size() != m) {
        throw InputError("measurement vector has wrong size");
    }
    if (cfg.target_meters.empty()) {
        throw AttackError("attack support is empty");
    }
    {
        std::set<int> seen;
        for (int k : cfg.target_meters) {
            if (k < 0 || k >= m) throw AttackError("target meter index out of range");
            if (!seen.insert(k).second) throw AttackError("duplicate target meter index");
        }
    }
    if (!hooks.estimate) throw AttackError("estimator hook missing");

    const Eigen::VectorXd limits = grid.f_limit_vector();
    const Eigen::VectorXd sigma =
        cfg.sigma.size() ? cfg.sigma : Eigen::VectorXd::Constant(m, 0.01);
    const Eigen::MatrixXd flow_map = kit.Y * kit.M.transpose();  // L x n

    AttackResult res;
    res.a = Eigen::VectorXd::Zero(m);

    // Contingency context from the clean estimate: the single outage whose
    // surviving-line margins are most binding.
    const StateVector x0 = hooks.estimate(z_clean);
    const Eigen::VectorXd f0 = dc_line_flows(kit, x0.theta);
    res.bdd_before = bdd_statistic(evaluate_state(grid, z_clean, x0, sigma), cfg.bdd);

    int worst_outage = -1;
    double worst_margin = std::numeric_limits<double>::infinity();
    Eigen::VectorXd post_worst;
    for (int j = 0; j < L; ++j) {
        if (lodf.islands[static_cast<std::size_t>(j)]) continue;
        const Eigen::VectorXd post = f0 + lodf.lambda.col(j) * f0(j);
        double margin = std::numeric_limits<double>::infinity();
        for (int i = 0; i < L; ++i) {
            if (i == j) continue;
            margin = std::min(margin, limits(i) - std::abs(post(i)));
        }
        if (margin < worst_margin) {
            worst_margin = margin;
            worst_outage = j;
            post_worst = post;
        }
    }
    if (worst_outage < 0) {
        res.skipped = true;
        res.skip_reason = "no non-islanding outage available";
        return res;
    }
    res.outage = worst_outage;

    std::vector<char> excluded(static_cast<std::size_t>(L), 0);
    excluded[static_cast<std::size_t>(worst_outage)] = 1;
    int target = -1;
    try {
        target = select_target_line(post_worst, limits, cfg.f_m, excluded);
    } catch (const AttackError& err) {
        res.skipped = true;
        res.skip_reason = err.what();
        return res;
    }
    res.target_line = target;
    res.f_prime_before = std::abs(post_worst(target));
    res.margin_before = limits(target) - res.f_prime_before;

    const double lambda_tj = lodf.lambda(target, worst_outage);
    // Post-outage flow of the target as a linear map of the full angle
    // vector; only the non-reference entries act on the packed state.
    const Eigen::VectorXd flow_row =
        (flow_map.row(target) + lambda_tj * flow_map.row(worst_outage)).transpose();
    Eigen::VectorXd d_state_flow = Eigen::VectorXd::Zero(2 * n - 1);
    d_state_flow.head(n - 1) = kit.reduce_angles(flow_row);

    const std::vector<int>& support = cfg.target_meters;
    const int k = static_cast<int>(support.size());

    struct Probe {
        double objective = 0.0;
        double f_prime = 0.0;  // signed
        double stat = 0.0;
        StateVector x_hat;
    };
    auto probe = [&](const Eigen::VectorXd& a_sup) -> Probe {
        const Eigen::VectorXd z_a = z_clean + embed_support(support, a_sup, m);
        Probe p;
        p.x_hat = hooks.estimate(z_a);
        p.stat = bdd_statistic(evaluate_state(grid, z_a, p.x_hat, sigma), cfg.bdd);
        const Eigen::VectorXd f_att = dc_line_flows(kit, p.x_hat.theta);
        p.f_prime = post_outage_flow(f_att(target), f_att(worst_outage), lambda_tj);
        p.objective = std::abs(p.f_prime) - cfg.rho * std::max(0.0, p.stat - cfg.tau);
        return p;
    };

    auto gradient = [&](const Eigen::VectorXd& a_sup, const Probe& p) -> Eigen::VectorXd {
        if (hooks.grad_z) {
            const Eigen::VectorXd z_a = z_clean + embed_support(support, a_sup, m);
            const Eigen::VectorXd r = z_a - h_measure(grid, p.x_hat);
            const double sign_f = (p.f_prime >= 0.0) ? 1.0 : -1.0;
            const bool penalized = p.stat > cfg.tau;

            Eigen::VectorXd d_state = sign_f * d_state_flow;
            Eigen::VectorXd d_z_direct = Eigen::VectorXd::Zero(m);
            if (penalized) {
                const Eigen::VectorXd wr = stat_residual_weight(r, p.stat, sigma, cfg.bdd, m);
                // stat depends on z directly and through the estimate.
                d_z_direct = -cfg.rho * wr;
                d_state += cfg.rho * (h_jacobian(grid, p.x_hat).transpose() * wr);
            }
            const Eigen::VectorXd d_z = d_z_direct + hooks.grad_z(z_a, d_state);
            Eigen::VectorXd g(k);
            for (int q = 0; q < k; ++q) g(q) = d_z(support[static_cast<std::size_t>(q)]);
            return g;
        }
        // Finite-difference fallback on the support coordinates.
        Eigen::VectorXd g(k);
        Eigen::VectorXd a_probe = a_sup;
        for (int q = 0; q < k; ++q) {
            const double save = a_probe(q);
            a_probe(q) = save + cfg.fd_step;
            const double up = probe(a_probe).objective;
            a_probe(q) = save - cfg.fd_step;
            const double down = probe(a_probe).objective;
            a_probe(q) = save;
            g(q) = (up - down) / (2.0 * cfg.fd_step);
        }
        return g;
    };

    // Adam ascent on the support coordinates.
    Eigen::VectorXd a_sup = Eigen::VectorXd::Zero(k);
    Eigen::VectorXd adam_m = Eigen::VectorXd::Zero(k);
    Eigen::VectorXd adam_v = Eigen::VectorXd::Zero(k);
    const double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

    Eigen::VectorXd best_a = a_sup;
    double best_objective = -std::numeric_limits<double>::infinity();

    for (int step = 0; step < cfg.max_steps; ++step) {
        const Probe p = probe(a_sup);
        res.steps = step + 1;
        if (p.objective > best_objective) {
            best_objective = p.objective;
            best_a = a_sup;
        }
        // Goal reached: the operator already sees an overload and the
        // injection still passes the detector.
        if (p.stat < cfg.tau && std::abs(p.f_prime) > limits(target)) break;

        const Eigen::VectorXd g = gradient(a_sup, p);
        adam_m = beta1 * adam_m + (1.0 - beta1) * g;
        adam_v = beta2 * adam_v.array().matrix() + (1.0 - beta2) * g.cwiseProduct(g);
        const double bc1 = 1.0 - std::pow(beta1, step + 1);
        const double bc2 = 1.0 - std::pow(beta2, step + 1);
        const Eigen::ArrayXd m_hat = adam_m.array() / bc1;
        const Eigen::ArrayXd v_hat = adam_v.array() / bc2;
        a_sup.array() += cfg.learning_rate * m_hat / (v_hat.sqrt() + eps);
        a_sup = a_sup.cwiseMax(-cfg.magnitude_cap).cwiseMin(cfg.magnitude_cap);
    }

    const Probe final_probe = probe(best_a);
    res.a = embed_support(support, best_a, m);
    res.bdd_after = final_probe.stat;
    res.f_prime_after = std::abs(final_probe.f_prime);
    res.stealthy = final_probe.stat < cfg.tau;

    const Eigen::VectorXd f_clean = dc_line_flows(kit, x0.theta);
    const Eigen::VectorXd f_attacked = dc_line_flows(kit, final_probe.x_hat.theta);
    const ContingencyReport clean_rep = analyze_contingencies(kit, lodf, f_clean, limits);
    const ContingencyReport att_rep = analyze_contingencies(kit, lodf, f_attacked, limits);
    res.n1_clean = clean_rep.n1;
    res.n2_clean = clean_rep.n2;
    res.n1_attacked = att_rep.n1;
    res.n2_attacked = att_rep.n2;
    res.effective = (res.n1_attacked != res.n1_clean) || (res.n2_attacked != res.n2_clean);
    return res;
}

EstimatorHooks make_model_hooks(const TrainedModel& model, const GridCase& grid,
                                const MatrixBundle& kit, const FeatureSeries& series,
                                std::size_t t) {
    auto base_window = std::make_shared<const std::vector<Eigen::VectorXd>>(
        assemble_window(model, series, t));
    const TrainedModel* model_ptr = &model;
    const GridCase* grid_ptr = &grid;
    const MatrixBundle* kit_ptr = &kit;
    const int n = grid.bus_count();

    auto window_for = [base_window, model_ptr, kit_ptr, n](const Eigen::VectorXd& z) {
        std::vector<Eigen::VectorXd> window = *base_window;
        EpochFeatures feats;
        feats.z = z;
        feats.theta_tilde = dc_estimate(*kit_ptr, z.head(n));
        window.back() = assemble_input(model_ptr->variant, feats);
        return window;
    };

    EstimatorHooks hooks;
    hooks.estimate = [window_for, model_ptr, grid_ptr](const Eigen::VectorXd& z) {
        return estimate_window(*model_ptr, *grid_ptr, window_for(z));
    };
    hooks.grad_z = [window_for, model_ptr, grid_ptr, kit_ptr](const Eigen::VectorXd& z,
                                                              const Eigen::VectorXd& d_state) {
        return input_gradient_z(*model_ptr, *grid_ptr, *kit_ptr, window_for(z), d_state);
    };
    return hooks;
}

EstimatorHooks make_wls_hooks(const GridCase& grid, const WlsConfig& cfg) {
    const GridCase* grid_ptr = &grid;
    EstimatorHooks hooks;
    hooks.estimate = [grid_ptr, cfg](const Eigen::VectorXd& z) {
        return wls_estimate(*grid_ptr, z, cfg).x_hat;
    };
    hooks.grad_z = [grid_ptr, cfg](const Eigen::VectorXd& z, const Eigen::VectorXd& d_state) {
        const EstimateResult est = wls_estimate(*grid_ptr, z, cfg);
        const int m = 2 * grid_ptr->bus_count();
        Eigen::VectorXd sigma = cfg.sigma;
        if (sigma.size() == 0) sigma = Eigen::VectorXd::Constant(m, 0.01);
        if (sigma.size() == 1) sigma = Eigen::VectorXd::Constant(m, sigma(0));
        const Eigen::VectorXd w = sigma.cwiseAbs2().cwiseInverse();
        const Eigen::MatrixXd h_jac = h_jacobian(*grid_ptr, est.x_hat);
        // Gauss-Newton sensitivity at the solution:
        //   d x_hat / d z = (H' W H)^-1 H' W
        const Eigen::MatrixXd gain = h_jac.transpose() * w.asDiagonal() * h_jac;
        const Eigen::VectorXd y = gain.ldlt().solve(d_state);
        return Eigen::VectorXd(w.asDiagonal() * (h_jac * y));
    };
    return hooks;
}

void write_campaign_jsonl(const std::string& path, const std::vector<CampaignRecord>& records) {
    std::ofstream out(path);
    if (!out) throw InputError("cannot write campaign file " + path);
    for (const CampaignRecord& rec : records) {
        json line;
        line["t"] = rec.t;
        line["n1_true"] = rec.n1_true;
        line["n2_true"] = rec.n2_true;
        const AttackResult& r = rec.result;
        line["skipped"] = r.skipped;
        if (r.skipped) {
            line["skip_reason"] = r.skip_reason;
        } else {
            json a = json::array();
            for (Eigen::Index i = 0; i < r.a.size(); ++i) a.push_back(r.a(i));
            line["a"] = std::move(a);
            line["outage"] = r.outage;
            line["target_line"] = r.target_line;
            line["margin_before"] = r.margin_before;
            line["f_prime_before"] = r.f_prime_before;
            line["f_prime_after"] = r.f_prime_after;
            line["bdd_before"] = r.bdd_before;
            line["bdd_after"] = r.bdd_after;
            line["stealthy"] = r.stealthy;
            line["effective"] = r.effective;
            line["n1_clean"] = r.n1_clean;
            line["n2_clean"] = r.n2_clean;
            line["n1_attacked"] = r.n1_attacked;
            line["n2_attacked"] = r.n2_attacked;
            line["steps"] = r.steps;
        }
        out << line.dump() << "\n";
    }
    if (!out) throw InputError("write failed for campaign file " + path);
}

std::vector<CampaignRecord> read_campaign_jsonl(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open campaign file " + path);
    std::vector<CampaignRecord> records;
    std::string text;
    long line_no = 0;
    while (std::getline(in, text)) {
        ++line_no;
        if (text.empty()) continue;
        json line;
        try {
            line = json::parse(text);
        } catch (const json::parse_error& err) {
            throw InputError(path + ":" + std::to_string(line_no) + ": " + err.what());
        }
        try {
            CampaignRecord rec;
            rec.t = line.at("t").get<long>();
            rec.n1_true = line.at("n1_true").get<int>();
            rec.n2_true = line.at("n2_true").get<int>();
            rec.result.skipped = line.at("skipped").get<bool>();
            if (rec.result.skipped) {
                rec.result.skip_reason = line.value("skip_reason", "");
            } else {
                const json& a = line.at("a");
                rec.result.a.resize(static_cast<Eigen::Index>(a.size()));
                for (Eigen::Index i = 0; i < rec.result.a.size(); ++i) {
                    rec.result.a(i) = a.at(static_cast<std::size_t>(i)).get<double>();
                }
                rec.result.outage = line.at("outage").get<int>();
                rec.result.target_line = line.at("target_line").get<int>();
                rec.result.margin_before = line.at("margin_before").get<double>();
                rec.result.f_prime_before = line.at("f_prime_before").get<double>();
                rec.result.f_prime_after = line.at("f_prime_after").get<double>();
                rec.result.bdd_before = line.at("bdd_before").get<double>();
                rec.result.bdd_after = line.at("bdd_after").get<double>();
                rec.result.stealthy = line.at("stealthy").get<bool>();
                rec.result.effective = line.at("effective").get<bool>();
                rec.result.n1_clean = line.at("n1_clean").get<int>();
                rec.result.n2_clean = line.at("n2_clean").get<int>();
                rec.result.n1_attacked = line.at("n1_attacked").get<int>();
                rec.result.n2_attacked = line.at("n2_attacked").get<int>();
                rec.result.steps = line.at("steps").get<int>();
            }
            records.push_back(std::move(rec));
        } catch (const json::exception& err) {
            throw InputError(path + ":" + std::to_string(line_no) + ": bad campaign record: " +
                             err.what());
        }
    }
    return records;
}

}  // namespace gridse
