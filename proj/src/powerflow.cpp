#include "gridse/powerflow.hpp"

#include <cmath>

namespace gridse {

Eigen::VectorXd h_measure(const GridCase& grid, const StateVector& x) {
    const int n = grid.bus_count();
    if (x.theta.size() != n || x.v.size() != n) {
        throw InputError("state size mismatch: expected " + std::to_string(n) + " buses");
    }
    Eigen::VectorXd z = Eigen::VectorXd::Zero(2 * n);
    for (const Branch& br : grid.branches()) {
        const int i = grid.bus_index(br.from);
        const int j = grid.bus_index(br.to);
        const double vi = x.v(i), vj = x.v(j);
        const double d = x.theta(i) - x.theta(j);
        const double ps = br.b * vi * vj * std::sin(d);
        z(i) += ps;
        z(j) -= ps;  // sin is odd, so P_ji = -P_ij
        z(n + i) += br.b * (vi * vi - vi * vj * std::cos(d));
        z(n + j) += br.b * (vj * vj - vi * vj * std::cos(d));
    }
    return z;
}

Eigen::VectorXd pack_state(const GridCase& grid, const StateVector& x) {
    const int n = grid.bus_count();
    const int ref = grid.reference_index();
    Eigen::VectorXd s(2 * n - 1);
    int k = 0;
    for (int i = 0; i < n; ++i) {
        if (i != ref) s(k++) = x.theta(i);
    }
    s.segment(n - 1, n) = x.v;
    return s;
}

StateVector unpack_state(const GridCase& grid, const Eigen::VectorXd& s) {
    const int n = grid.bus_count();
    const int ref = grid.reference_index();
    if (s.size() != 2 * n - 1) {
        throw InputError("packed state size " + std::to_string(s.size()) + ", expected " +
                         std::to_string(2 * n - 1));
    }
    StateVector x;
    x.theta.resize(n);
    x.v = s.segment(n - 1, n);
    int k = 0;
    for (int i = 0; i < n; ++i) {
        x.theta(i) = (i == ref) ? 0.0 : s(k++);
    }
    return x;
}

Eigen::MatrixXd h_jacobian(const GridCase& grid, const StateVector& x) {
    const int n = grid.bus_count();
    const int ref = grid.reference_index();

    // Dense accumulation in full coordinates (all n angles), then drop the
    // reference angle column when packing.
    Eigen::MatrixXd dp_dth = Eigen::MatrixXd::Zero(n, n);
    Eigen::MatrixXd dp_dv = Eigen::MatrixXd::Zero(n, n);
    Eigen::MatrixXd dq_dth = Eigen::MatrixXd::Zero(n, n);
    Eigen::MatrixXd dq_dv = Eigen::MatrixXd::Zero(n, n);

    for (const Branch& br : grid.branches()) {
        const int i = grid.bus_index(br.from);
        const int j = grid.bus_index(br.to);
        const double vi = x.v(i), vj = x.v(j);
        const double d = x.theta(i) - x.theta(j);
        const double bs = br.b * std::sin(d);
        const double bc = br.b * std::cos(d);

        // P_ij = b vi vj sin(d), P_ji = -P_ij
        dp_dth(i, i) += vi * vj * bc;
        dp_dth(i, j) -= vi * vj * bc;
        dp_dth(j, j) += vi * vj * bc;
        dp_dth(j, i) -= vi * vj * bc;
        dp_dv(i, i) += vj * bs;
        dp_dv(i, j) += vi * bs;
        dp_dv(j, j) -= vi * bs;
        dp_dv(j, i) -= vj * bs;

        // Q_ij = b (vi^2 - vi vj cos(d)), Q_ji = b (vj^2 - vi vj cos(d))
        dq_dth(i, i) += vi * vj * bs;
        dq_dth(i, j) -= vi * vj * bs;
        dq_dth(j, j) -= vi * vj * bs;
        dq_dth(j, i) += vi * vj * bs;
        dq_dv(i, i) += br.b * (2.0 * vi - vj * std::cos(d));
        dq_dv(i, j) -= vi * bc;
        dq_dv(j, j) += br.b * (2.0 * vj - vi * std::cos(d));
        dq_dv(j, i) -= vj * bc;
    }

    Eigen::MatrixXd H(2 * n, 2 * n - 1);
    int col = 0;
    for (int j = 0; j < n; ++j) {
        if (j == ref) continue;
        H.col(col).head(n) = dp_dth.col(j);
        H.col(col).tail(n) = dq_dth.col(j);
        ++col;
    }
    for (int j = 0; j < n; ++j) {
        H.col(col).head(n) = dp_dv.col(j);
        H.col(col).tail(n) = dq_dv.col(j);
        ++col;
    }
    return H;
}

AcSolution solve_ac_power_flow(const GridCase& grid,
                               const Eigen::VectorXd& p_load,
                               const Eigen::VectorXd& q_load,
                               const AcSolveOptions& opt) {
    const int n = grid.bus_count();
    const int ref = grid.reference_index();
    if (p_load.size() != n || q_load.size() != n) {
        throw InputError("load vector size mismatch");
    }

    // Specified net injections at PQ buses; reference supplies the balance.
    Eigen::VectorXd p_spec = -p_load;
    Eigen::VectorXd q_spec = -q_load;

    StateVector x;
    x.theta = Eigen::VectorXd::Zero(n);
    x.v = Eigen::VectorXd::Ones(n);

    // Row/column selector: all non-reference buses, P block then Q block.
    const int nr = n - 1;
    std::vector<int> pq;
    pq.reserve(static_cast<std::size_t>(nr));
    for (int i = 0; i < n; ++i) {
        if (i != ref) pq.push_back(i);
    }

    auto mismatch = [&](const StateVector& s) {
        const Eigen::VectorXd z = h_measure(grid, s);
        Eigen::VectorXd g(2 * nr);
        for (int k = 0; k < nr; ++k) {
            g(k) = z(pq[static_cast<std::size_t>(k)]) - p_spec(pq[static_cast<std::size_t>(k)]);
            g(nr + k) = z(n + pq[static_cast<std::size_t>(k)]) - q_spec(pq[static_cast<std::size_t>(k)]);
        }
        return g;
    };
    auto advanced = [&](const StateVector& s, const Eigen::VectorXd& step, double alpha) {
        StateVector out = s;
        int k = 0;
        for (int i = 0; i < n; ++i) {
            if (i != ref) out.theta(i) += alpha * step(k++);
        }
        for (int i = 0; i < n; ++i) {
            if (i != ref) out.v(i) += alpha * step(k++);
        }
        return out;
    };

    AcSolution sol;
    for (int iter = 0; iter < opt.max_iter; ++iter) {
        const Eigen::VectorXd g = mismatch(x);
        sol.max_mismatch = g.lpNorm<Eigen::Infinity>();
        sol.iterations = iter;
        if (sol.max_mismatch < opt.tol) {
            sol.state = x;
            return sol;
        }

        // Unknown ordering matches h_jacobian's packed state minus the
        // reference voltage column (reference bus holds V = 1).
        const Eigen::MatrixXd H = h_jacobian(grid, x);
        Eigen::MatrixXd J(2 * nr, 2 * nr);
        for (int k = 0; k < nr; ++k) {
            const int bus = pq[static_cast<std::size_t>(k)];
            // theta columns of H are the first n-1, in bus order minus ref;
            // the k-th one corresponds to pq[k] directly.
            J.row(k).head(nr) = H.row(bus).head(nr);
            J.row(nr + k).head(nr) = H.row(n + bus).head(nr);
        }
        // Voltage columns: skip the reference bus column.
        int col = nr;
        for (int j = 0; j < n; ++j) {
            if (j == ref) continue;
            for (int k = 0; k < nr; ++k) {
                const int bus = pq[static_cast<std::size_t>(k)];
                J(k, col) = H(bus, (n - 1) + j);
                J(nr + k, col) = H(n + bus, (n - 1) + j);
            }
            ++col;
        }

        const Eigen::VectorXd step = J.partialPivLu().solve(-g);
        if (!step.allFinite()) {
            throw SingularSystemError("power flow Jacobian is singular at iteration " +
                                      std::to_string(iter));
        }
        // Backtracking keeps heavy-load iterations inside Newton's basin;
        // the full step is tried first, so well-conditioned cases converge
        // with the classical quadratic trajectory.
        const double g2 = g.squaredNorm();
        double alpha = 1.0;
        StateVector trial = advanced(x, step, alpha);
        for (int cut = 0; cut < 12 && mismatch(trial).squaredNorm() >= g2; ++cut) {
            alpha *= 0.5;
            trial = advanced(x, step, alpha);
        }
        x = std::move(trial);
    }
    throw ConvergenceError("power flow did not converge in " + std::to_string(opt.max_iter) +
                           " iterations (mismatch " + std::to_string(sol.max_mismatch) + ")");
}

Eigen::VectorXd dc_line_flows(const MatrixBundle& kit, const Eigen::VectorXd& theta) {
    if (theta.size() != kit.bus_count()) {
        throw InputError("dc_line_flows expects " + std::to_string(kit.bus_count()) + " angles");
    }
    return kit.Y * kit.M.transpose() * theta;
}

Eigen::VectorXd injections_from_flows(const MatrixBundle& kit, const Eigen::VectorXd& flows) {
    if (flows.size() != kit.branch_count()) {
        throw InputError("injections_from_flows expects " + std::to_string(kit.branch_count()) +
                         " flows");
    }
    return kit.M * flows;
}

}  // namespace gridse
