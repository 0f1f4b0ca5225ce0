#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "gridse/chimera.hpp"
#include "gridse/contingency.hpp"
#include "gridse/estimation.hpp"
#include "gridse/grid_model.hpp"

namespace gridse {

// Injection that any estimator fitting the DC model cannot distinguish from
// a state change: the P meters move by H_dc c, Q meters are untouched, so
// the DC residual is invariant for every c. Returns an m-vector.
Eigen::VectorXd stealthy_injection(const MatrixBundle& kit, const Eigen::VectorXd& c);

// Among candidate lines, picks the one whose estimated post-outage loading
// sits closest below its limit while still leaving the true-system margin
// headroom: |f'_i| < limit_i - f_m. Ties resolve to the lowest index;
// throws AttackError when no line qualifies. excluded marks lines that are
// not valid targets (the outaged ones).
int select_target_line(const Eigen::VectorXd& post_outage_flows, const Eigen::VectorXd& limits,
                       double f_m, const std::vector<char>& excluded = {});

// Estimator under attack. estimate is mandatory; grad_z, when present, must
// return (d x_hat / d z)^T d_state for the packed state layout and is used
// for white-box gradients. Without it the optimizer falls back to central
// finite differences on the support coordinates.
struct EstimatorHooks {
    std::function<StateVector(const Eigen::VectorXd& z)> estimate;
    std::function<Eigen::VectorXd(const Eigen::VectorXd& z, const Eigen::VectorXd& d_state)> grad_z;
};

struct AttackConfig {
    std::vector<int> target_meters;  // indices into z the attacker controls
    double tau = 0.5;
    BddStatistic bdd = BddStatistic::residual_norm;
    Eigen::VectorXd sigma;   // meter sigmas for the weighted statistics
    double f_m = 0.03;       // true-system safety margin, per-unit
    double learning_rate = 1e-2;
    int max_steps = 60;
    double magnitude_cap = 1.0;  // per-coordinate |a_k| bound
    double rho = 100.0;          // stealth penalty weight
    double fd_step = 1e-4;       // finite-difference fallback step
};

struct AttackResult {
    bool skipped = false;
    std::string skip_reason;

    Eigen::VectorXd a;  // m values, zero outside the support
    int outage = -1;    // contingency context (branch index)
    int target_line = -1;
    double margin_before = 0.0;       // limit - |f'| at selection time
    double f_prime_before = 0.0;      // |estimated post-outage flow|, no attack
    double f_prime_after = 0.0;       // same, under the final injection
    double bdd_before = 0.0;
    double bdd_after = 0.0;
    bool stealthy = false;            // bdd_after < tau
    bool effective = false;           // estimated contingency counts moved
    int n1_clean = 0, n2_clean = 0;   // estimated counts without attack
    int n1_attacked = 0, n2_attacked = 0;
    int steps = 0;
};

// Gradient-ascent attack against one epoch. The contingency context is the
// most binding single-line outage of the estimated operating point; the
// objective pushes the estimated post-outage flow of the selected target
// line over its limit while a hinge penalty keeps the residual below tau.
AttackResult optimize_attack(const GridCase& grid, const MatrixBundle& kit,
                             const LodfTable& lodf, const Eigen::VectorXd& z_clean,
                             const EstimatorHooks& hooks, const AttackConfig& cfg);

// P meters at the given buses (indices into z for the default meter set).
std::vector<int> p_meters_for_buses(const GridCase& grid, const std::vector<int>& bus_ids);

// Hooks for a trained neural estimator at epoch t of a feature series. The
// window history stays clean; only the final epoch reflects the attacked
// measurements, including the DC estimate an operator would compute from
// them.
EstimatorHooks make_model_hooks(const TrainedModel& model, const GridCase& grid,
                                const MatrixBundle& kit, const FeatureSeries& series,
                                std::size_t t);

// Hooks for the classical estimator: WLS estimate plus its sensitivity
// (H' W H)^-1 H' W at the solution.
EstimatorHooks make_wls_hooks(const GridCase& grid, const WlsConfig& cfg);

struct CampaignRecord {
    long t = 0;
    AttackResult result;
    // True contingency counts of the epoch, for error metrics.
    int n1_true = 0;
    int n2_true = 0;
};

void write_campaign_jsonl(const std::string& path, const std::vector<CampaignRecord>& records);
std::vector<CampaignRecord> read_campaign_jsonl(const std::string& path);

}  // namespace gridse
