#pragma once

#include <Eigen/Dense>
#include <array>
#include <optional>
#include <span>
#include <vector>

#include "gridse/grid_model.hpp"

namespace gridse {

// Power transfer distribution factors, L x n. Column s holds the branch
// flow changes for 1 pu injected at bus s and withdrawn at the reference
// bus; the reference column is identically zero.
Eigen::MatrixXd compute_ptdf(const MatrixBundle& kit);

// Line outage distribution factors. lambda(i, j) maps the pre-outage flow
// on branch j onto the flow change of surviving branch i when j trips:
//   f_i' = f_i + lambda(i, j) * f_j
// Diagonal entries are -1 (a tripped line carries nothing). Columns of
// branches whose outage splits the network are zeroed and flagged in
// islands; their factors do not exist.
struct LodfTable {
    Eigen::MatrixXd lambda;
    std::vector<char> islands;
};

LodfTable compute_lodf(const MatrixBundle& kit);

inline double post_outage_flow(double f_i, double f_j, double lambda_ij) {
    return f_i + lambda_ij * f_j;
}

struct Violation {
    std::array<int, 2> outage{-1, -1};  // branch indices; [1] = -1 for single outages
    int line = -1;                      // overloaded branch index; -1 for islanding
    double flow = 0.0;                  // |post-outage flow|
    double limit = 0.0;
    bool islanding = false;
};

struct ScreenOptions {
    // An outage that splits the network is a security violation in itself;
    // counting it keeps the screen conservative. Truth and estimate sides
    // must use the same setting for the error metrics to mean anything.
    bool count_islanding_as_violation = true;
    // Simultaneous-outage factor matrix determinant below this falls back
    // to a direct post-outage DC solve.
    double det_tol = 1e-9;
};

// One screened contingency order. count is the number of outages (pairs
// for order 2) whose post-contingency state violates at least one limit.
struct ScreenResult {
    int count = 0;
    int examined = 0;
    std::vector<Violation> violations;
};

ScreenResult screen_n1(const MatrixBundle& kit, const LodfTable& lodf,
                       const Eigen::VectorXd& flows, const Eigen::VectorXd& limits,
                       const ScreenOptions& opt = {});

ScreenResult screen_n2(const MatrixBundle& kit, const LodfTable& lodf,
                       const Eigen::VectorXd& flows, const Eigen::VectorXd& limits,
                       const ScreenOptions& opt = {});

struct ContingencyReport {
    int n1 = 0;
    int n2 = 0;
    std::vector<Violation> violations;
};

ContingencyReport analyze_contingencies(const MatrixBundle& kit, const LodfTable& lodf,
                                        const Eigen::VectorXd& flows,
                                        const Eigen::VectorXd& limits,
                                        const ScreenOptions& opt = {});

// True if the network stays connected with the given branches removed.
bool connected_without(const MatrixBundle& kit, std::span<const int> removed);

// Direct DC solve with branches removed: rebuilds the reduced susceptance
// matrix from the surviving branches and returns all L flows (zero at the
// removed ones), or nullopt when the removal splits the network.
// injections must sum to zero across buses.
std::optional<Eigen::VectorXd> dc_flows_with_outages(const MatrixBundle& kit,
                                                     std::span<const int> removed,
                                                     const Eigen::VectorXd& injections);

}  // namespace gridse
