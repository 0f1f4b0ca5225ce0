#pragma once

#include <Eigen/Dense>

#include "gridse/grid_model.hpp"

namespace gridse {

// Bus voltage state. theta in radians with theta(ref) == 0 by convention,
// v in per-unit.
struct StateVector {
    Eigen::VectorXd theta;
    Eigen::VectorXd v;
};

// Lossless branch model: every line is a pure series susceptance b = 1/x.
// Power injected at bus i into line (i,j):
//   P_ij = b V_i V_j sin(theta_i - theta_j)
//   Q_ij = b (V_i^2 - V_i V_j cos(theta_i - theta_j))
// The measurement vector stacks net injections at every bus:
//   z = [P_1 .. P_n, Q_1 .. Q_n],  m = 2n.
Eigen::VectorXd h_measure(const GridCase& grid, const StateVector& x);

// State parameterization used by estimators: s = [theta at non-reference
// buses; v at all buses], dimension 2n-1. The reference angle is pinned at
// zero, reference voltage stays a free variable (it is observable through
// the Q injections).
Eigen::VectorXd pack_state(const GridCase& grid, const StateVector& x);
StateVector unpack_state(const GridCase& grid, const Eigen::VectorXd& s);

// Jacobian of h_measure with respect to the packed state, m x (2n-1).
Eigen::MatrixXd h_jacobian(const GridCase& grid, const StateVector& x);

struct AcSolveOptions {
    int max_iter = 50;
    double tol = 1e-10;  // infinity norm of the power mismatch
};

struct AcSolution {
    StateVector state;
    int iterations = 0;
    double max_mismatch = 0.0;
};

// Newton-Raphson power flow. p_load/q_load are per-bus demands (positive =
// consumption); every non-reference bus is PQ, the reference bus holds
// V = 1, theta = 0 and absorbs the system imbalance. Throws
// ConvergenceError when the mismatch fails to reach tol.
AcSolution solve_ac_power_flow(const GridCase& grid,
                               const Eigen::VectorXd& p_load,
                               const Eigen::VectorXd& q_load,
                               const AcSolveOptions& opt = {});

// DC branch flows f = Y M^T theta (signed, from -> to), length L.
Eigen::VectorXd dc_line_flows(const MatrixBundle& kit, const Eigen::VectorXd& theta);

// Net P injections consistent with branch flows: p = M f.
Eigen::VectorXd injections_from_flows(const MatrixBundle& kit, const Eigen::VectorXd& flows);

}  // namespace gridse
