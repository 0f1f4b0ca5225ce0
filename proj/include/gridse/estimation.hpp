#pragma once

#include <Eigen/Dense>

#include "gridse/grid_model.hpp"
#include "gridse/powerflow.hpp"

namespace gridse {

// Statistic the bad-data detector compares against tau. The detector's job
// here is distinguishing structured injections from measurement noise, and
// the plain residual norm does that for classical and learned estimators
// alike. The weighted objective variants are kept for the chi-square style
// analysis; with sigma = 0.01 they amplify noise-level residuals by 1e4 and
// only make sense for estimators that fit the noise.
enum class BddStatistic {
    residual_norm,        // ||z - h(x_hat)||_2
    weighted_ssr,         // (z-h)' W (z-h), W = diag(sigma^-2)
    weighted_ssr_over_m,  // the above divided by the meter count
};

struct WlsConfig {
    Eigen::VectorXd sigma;  // per-meter noise sd; empty = 0.01 everywhere
    double tol = 1e-10;     // infinity norm of the state update
    int max_iter = 50;
    bool flat_start = true;
};

struct EstimateResult {
    StateVector x_hat;
    double objective = 0.0;      // (z-h)' W (z-h) at the solution
    double residual_norm = 0.0;  // ||z - h(x_hat)||_2
    int meter_count = 0;
    int iterations = 0;
    bool converged = false;
};

enum class BddVerdict { clean, bad_data };

double bdd_statistic(const EstimateResult& r, BddStatistic stat = BddStatistic::residual_norm);
BddVerdict bdd_check(const EstimateResult& r, double tau,
                     BddStatistic stat = BddStatistic::residual_norm);

// Gauss-Newton WLS on the full AC measurement model. Each step solves the
// weighted least-squares system sqrt(W) H ds = sqrt(W) r through a
// rank-revealing decomposition: at flat start the voltage block of H is
// structurally rank-deficient for this branch model and the minimum-norm
// step walks out of it. Persistent deficiency at the solution is reported
// as unobservable.
EstimateResult wls_estimate(const GridCase& grid, const Eigen::VectorXd& z,
                            const WlsConfig& cfg = {});

// Residual diagnostics for an externally produced state (e.g. a learned
// estimator): same fields as wls_estimate but no iteration.
EstimateResult evaluate_state(const GridCase& grid, const Eigen::VectorXd& z,
                              const StateVector& x_hat, const Eigen::VectorXd& sigma = {});

// Unweighted least-squares DC estimate from the n P-meters:
// theta_red = (H' H)^-1 H' p, returned with the reference angle inserted.
Eigen::VectorXd dc_estimate(const MatrixBundle& kit, const Eigen::VectorXd& p);

// ||p - H_dc theta_red||_2, the DC counterpart of residual_norm.
double dc_residual_norm(const MatrixBundle& kit, const Eigen::VectorXd& p,
                        const Eigen::VectorXd& theta);

}  // namespace gridse
