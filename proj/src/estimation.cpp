#include "gridse/estimation.hpp"

#include <cmath>

namespace gridse {

namespace {

Eigen::VectorXd resolve_sigma(const Eigen::VectorXd& sigma, int m) {
    if (sigma.size() == 0) return Eigen::VectorXd::Constant(m, 0.01);
    if (sigma.size() == 1) return Eigen::VectorXd::Constant(m, sigma(0));
    if (sigma.size() != m) {
        throw InputError("sigma has " + std::to_string(sigma.size()) + " entries, expected " +
                         std::to_string(m));
    }
    if ((sigma.array() <= 0.0).any()) {
        throw InputError("sigma entries must be positive");
    }
    return sigma;
}

}  // namespace

double bdd_statistic(const EstimateResult& r, BddStatistic stat) {
    switch (stat) {
        case BddStatistic::residual_norm:
            return r.residual_norm;
        case BddStatistic::weighted_ssr:
            return r.objective;
        case BddStatistic::weighted_ssr_over_m:
            if (r.meter_count <= 0) {
                throw InputError("weighted_ssr_over_m needs a positive meter count");
            }
            return r.objective / static_cast<double>(r.meter_count);
    }
    throw InputError("unknown bdd statistic");
}

BddVerdict bdd_check(const EstimateResult& r, double tau, BddStatistic stat) {
    return bdd_statistic(r, stat) < tau ? BddVerdict::clean : BddVerdict::bad_data;
}

EstimateResult evaluate_state(const GridCase& grid, const Eigen::VectorXd& z,
                              const StateVector& x_hat, const Eigen::VectorXd& sigma) {
    const int m = 2 * grid.bus_count();
    if (z.size() != m) {
        throw InputError("measurement vector has " + std::to_string(z.size()) +
                         " entries, expected " + std::to_string(m));
    }
    const Eigen::VectorXd sd = resolve_sigma(sigma, m);
    const Eigen::VectorXd r = z - h_measure(grid, x_hat);

    EstimateResult out;
    out.x_hat = x_hat;
    out.residual_norm = r.norm();
    out.objective = (r.array().square() / sd.array().square()).sum();
    out.meter_count = m;
    out.converged = true;
    return out;
}

EstimateResult wls_estimate(const GridCase& grid, const Eigen::VectorXd& z,
                            const WlsConfig& cfg) {
    const int n = grid.bus_count();
    const int m = 2 * n;
    const int ns = 2 * n - 1;
    if (z.size() != m) {
        throw InputError("measurement vector has " + std::to_string(z.size()) +
                         " entries, expected " + std::to_string(m));
    }
    const Eigen::VectorXd sd = resolve_sigma(cfg.sigma, m);
    const Eigen::VectorXd w_sqrt = sd.cwiseInverse();

    StateVector x;
    x.theta = Eigen::VectorXd::Zero(n);
    x.v = Eigen::VectorXd::Ones(n);
    if (!cfg.flat_start) {
        // Seed angles from the DC estimate to cut an iteration or two.
        const MatrixBundle kit = build_matrices(grid);
        x.theta = dc_estimate(kit, z.head(n));
    }

    EstimateResult out;
    out.meter_count = m;

    bool deficient = false;
    for (int iter = 0; iter < cfg.max_iter; ++iter) {
        const Eigen::VectorXd r = z - h_measure(grid, x);
        const Eigen::MatrixXd H = h_jacobian(grid, x);

        Eigen::MatrixXd A = w_sqrt.asDiagonal() * H;
        Eigen::VectorXd b = w_sqrt.asDiagonal() * r;
        Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(A);
        cod.setThreshold(1e-10);
        deficient = cod.rank() < ns;
        const Eigen::VectorXd step = cod.solve(b);

        Eigen::VectorXd s = pack_state(grid, x) + step;
        x = unpack_state(grid, s);
        out.iterations = iter + 1;

        if (step.lpNorm<Eigen::Infinity>() < cfg.tol) {
            out.converged = true;
            break;
        }
    }

    if (!out.converged) {
        throw ConvergenceError("WLS did not converge in " + std::to_string(cfg.max_iter) +
                               " iterations");
    }
    if (deficient) {
        // Transient flat-start deficiency is expected and resolves once the
        // voltage terms separate; deficiency at the converged point means
        // the meter set genuinely cannot pin the state down.
        throw SingularSystemError("measurement set is unobservable: gain matrix rank-deficient "
                                  "at the WLS solution");
    }

    const Eigen::VectorXd r = z - h_measure(grid, x);
    out.x_hat = x;
    out.residual_norm = r.norm();
    out.objective = (r.array() * w_sqrt.array()).square().sum();
    return out;
}

Eigen::VectorXd dc_estimate(const MatrixBundle& kit, const Eigen::VectorXd& p) {
    const int n = kit.bus_count();
    if (p.size() != n) {
        throw InputError("dc_estimate expects " + std::to_string(n) + " P meters, got " +
                         std::to_string(p.size()));
    }
    // H_dc has full column rank for a connected network, so the normal
    // equations are well posed; LDLT keeps this exactly reproducible.
    const Eigen::MatrixXd gram = kit.H_dc.transpose() * kit.H_dc;
    const Eigen::VectorXd theta_red = gram.ldlt().solve(kit.H_dc.transpose() * p);
    if (!theta_red.allFinite()) {
        throw SingularSystemError("DC estimation gain matrix is singular");
    }
    return kit.expand_angles(theta_red);
}

double dc_residual_norm(const MatrixBundle& kit, const Eigen::VectorXd& p,
                        const Eigen::VectorXd& theta) {
    return (p - kit.H_dc * kit.reduce_angles(theta)).norm();
}

}  // namespace gridse
