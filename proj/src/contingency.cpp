#include "gridse/contingency.hpp"

#include <cmath>
#include <queue>

#include "gridse/powerflow.hpp"

namespace gridse {

namespace {

void check_screen_inputs(const MatrixBundle& kit, const Eigen::VectorXd& flows,
                         const Eigen::VectorXd& limits) {
    if (flows.size() != kit.branch_count() || limits.size() != kit.branch_count()) {
        throw InputError("screen expects " + std::to_string(kit.branch_count()) +
                         " flows and limits");
    }
}

// Appends the overloads of a post-outage flow pattern; returns whether any
// limit is exceeded.
bool collect_overloads(const Eigen::VectorXd& post, const Eigen::VectorXd& limits,
                       std::array<int, 2> outage, std::vector<Violation>& sink) {
    bool any = false;
    for (int i = 0; i < post.size(); ++i) {
        if (i == outage[0] || i == outage[1]) continue;
        const double mag = std::abs(post(i));
        if (mag > limits(i)) {
            any = true;
            sink.push_back(Violation{outage, i, mag, limits(i), false});
        }
    }
    return any;
}

}  // namespace

Eigen::MatrixXd compute_ptdf(const MatrixBundle& kit) {
    const int n = kit.bus_count();
    // X = B_red^-1 padded with a zero reference row/column, so PTDF columns
    // are transfers against the reference bus.
    const Eigen::MatrixXd x_red =
        kit.B_red.partialPivLu().solve(Eigen::MatrixXd::Identity(n - 1, n - 1));
    if (!x_red.allFinite()) {
        throw SingularSystemError("reduced susceptance matrix is singular; network disconnected?");
    }
    Eigen::MatrixXd x_full = Eigen::MatrixXd::Zero(n, n);
    int row = 0;
    for (int i = 0; i < n; ++i) {
        if (i == kit.ref) continue;
        int col = 0;
        for (int j = 0; j < n; ++j) {
            if (j == kit.ref) continue;
            x_full(i, j) = x_red(row, col);
            ++col;
        }
        ++row;
    }
    return kit.Y * kit.M.transpose() * x_full;
}

LodfTable compute_lodf(const MatrixBundle& kit) {
    const int L = kit.branch_count();
    const Eigen::MatrixXd ptdf = compute_ptdf(kit);

    LodfTable table;
    table.lambda = Eigen::MatrixXd::Zero(L, L);
    table.islands.assign(static_cast<std::size_t>(L), 0);

    for (int j = 0; j < L; ++j) {
        // Self-transfer factor of line j: flow induced on j by a unit
        // injection at its own terminals. 1 means the line is a bridge.
        const double self = ptdf(j, kit.from_index(j)) - ptdf(j, kit.to_index(j));
        const double denom = 1.0 - self;
        if (std::abs(denom) < 1e-9) {
            const int removed[] = {j};
            if (connected_without(kit, removed)) {
                throw SingularSystemError("LODF denominator vanished for non-bridge branch " +
                                          std::to_string(j));
            }
            table.islands[static_cast<std::size_t>(j)] = 1;
            continue;
        }
        for (int i = 0; i < L; ++i) {
            if (i == j) {
                table.lambda(i, j) = -1.0;
                continue;
            }
            const double transfer = ptdf(i, kit.from_index(j)) - ptdf(i, kit.to_index(j));
            table.lambda(i, j) = transfer / denom;
        }
    }
    return table;
}

bool connected_without(const MatrixBundle& kit, std::span<const int> removed) {
    const int n = kit.bus_count();
    const int L = kit.branch_count();
    std::vector<char> out(static_cast<std::size_t>(L), 0);
    for (int r : removed) {
        if (r < 0 || r >= L) throw InputError("branch index " + std::to_string(r) + " out of range");
        out[static_cast<std::size_t>(r)] = 1;
    }
    std::vector<std::vector<int>> adjacency(static_cast<std::size_t>(n));
    for (int l = 0; l < L; ++l) {
        if (out[static_cast<std::size_t>(l)]) continue;
        adjacency[static_cast<std::size_t>(kit.from_index(l))].push_back(kit.to_index(l));
        adjacency[static_cast<std::size_t>(kit.to_index(l))].push_back(kit.from_index(l));
    }
    std::vector<char> seen(static_cast<std::size_t>(n), 0);
    std::queue<int> frontier;
    frontier.push(0);
    seen[0] = 1;
    int visited = 1;
    while (!frontier.empty()) {
        const int u = frontier.front();
        frontier.pop();
        for (int v : adjacency[static_cast<std::size_t>(u)]) {
            if (!seen[static_cast<std::size_t>(v)]) {
                seen[static_cast<std::size_t>(v)] = 1;
                ++visited;
                frontier.push(v);
            }
        }
    }
    return visited == n;
}

std::optional<Eigen::VectorXd> dc_flows_with_outages(const MatrixBundle& kit,
                                                     std::span<const int> removed,
                                                     const Eigen::VectorXd& injections) {
    const int n = kit.bus_count();
    const int L = kit.branch_count();
    if (injections.size() != n) {
        throw InputError("expected " + std::to_string(n) + " injections");
    }
    if (!connected_without(kit, removed)) return std::nullopt;

    std::vector<char> out(static_cast<std::size_t>(L), 0);
    for (int r : removed) out[static_cast<std::size_t>(r)] = 1;

    Eigen::MatrixXd b_full = Eigen::MatrixXd::Zero(n, n);
    for (int l = 0; l < L; ++l) {
        if (out[static_cast<std::size_t>(l)]) continue;
        const int a = kit.from_index(l);
        const int b = kit.to_index(l);
        b_full(a, a) += kit.branch_b(l);
        b_full(b, b) += kit.branch_b(l);
        b_full(a, b) -= kit.branch_b(l);
        b_full(b, a) -= kit.branch_b(l);
    }
    Eigen::MatrixXd b_red(n - 1, n - 1);
    Eigen::VectorXd p_red(n - 1);
    int row = 0;
    for (int i = 0; i < n; ++i) {
        if (i == kit.ref) continue;
        p_red(row) = injections(i);
        int col = 0;
        for (int j = 0; j < n; ++j) {
            if (j == kit.ref) continue;
            b_red(row, col) = b_full(i, j);
            ++col;
        }
        ++row;
    }
    const Eigen::VectorXd theta_red = b_red.partialPivLu().solve(p_red);
    if (!theta_red.allFinite()) {
        throw SingularSystemError("post-outage susceptance matrix is singular despite connectivity");
    }
    const Eigen::VectorXd theta = kit.expand_angles(theta_red);

    Eigen::VectorXd flows = Eigen::VectorXd::Zero(L);
    for (int l = 0; l < L; ++l) {
        if (out[static_cast<std::size_t>(l)]) continue;
        flows(l) = kit.branch_b(l) * (theta(kit.from_index(l)) - theta(kit.to_index(l)));
    }
    return flows;
}

ScreenResult screen_n1(const MatrixBundle& kit, const LodfTable& lodf,
                       const Eigen::VectorXd& flows, const Eigen::VectorXd& limits,
                       const ScreenOptions& opt) {
    check_screen_inputs(kit, flows, limits);
    const int L = kit.branch_count();

    ScreenResult result;
    result.examined = L;
    for (int j = 0; j < L; ++j) {
        if (lodf.islands[static_cast<std::size_t>(j)]) {
            if (opt.count_islanding_as_violation) {
                ++result.count;
                result.violations.push_back(Violation{{j, -1}, -1, 0.0, 0.0, true});
            }
            continue;
        }
        Eigen::VectorXd post = flows + lodf.lambda.col(j) * flows(j);
        if (collect_overloads(post, limits, {j, -1}, result.violations)) {
            ++result.count;
        }
    }
    return result;
}

ScreenResult screen_n2(const MatrixBundle& kit, const LodfTable& lodf,
                       const Eigen::VectorXd& flows, const Eigen::VectorXd& limits,
                       const ScreenOptions& opt) {
    check_screen_inputs(kit, flows, limits);
    const int L = kit.branch_count();
    // Injections are only needed on the direct-solve fallback; derive them
    // lazily from the flow pattern via KCL.
    Eigen::VectorXd injections;

    ScreenResult result;
    for (int j = 0; j < L; ++j) {
        for (int k = j + 1; k < L; ++k) {
            ++result.examined;
            const int removed[] = {j, k};
            const bool pair_islands = lodf.islands[static_cast<std::size_t>(j)] ||
                                      lodf.islands[static_cast<std::size_t>(k)] ||
                                      !connected_without(kit, removed);
            if (pair_islands) {
                if (opt.count_islanding_as_violation) {
                    ++result.count;
                    result.violations.push_back(Violation{{j, k}, -1, 0.0, 0.0, true});
                }
                continue;
            }

            // Simultaneous outage: solve for the equivalent flows the two
            // lines would have to carry to cancel each other, then spread
            // them with the single-outage factors.
            const double det = 1.0 - lodf.lambda(j, k) * lodf.lambda(k, j);
            Eigen::VectorXd post;
            if (std::abs(det) < opt.det_tol) {
                if (injections.size() == 0) injections = injections_from_flows(kit, flows);
                const auto direct = dc_flows_with_outages(kit, removed, injections);
                // Connectivity was just checked, so the solve exists.
                post = *direct;
            } else {
                const double phi_j = (flows(j) + lodf.lambda(j, k) * flows(k)) / det;
                const double phi_k = (flows(k) + lodf.lambda(k, j) * flows(j)) / det;
                post = flows + lodf.lambda.col(j) * phi_j + lodf.lambda.col(k) * phi_k;
            }
            if (collect_overloads(post, limits, {j, k}, result.violations)) {
                ++result.count;
            }
        }
    }
    return result;
}

ContingencyReport analyze_contingencies(const MatrixBundle& kit, const LodfTable& lodf,
                                        const Eigen::VectorXd& flows,
                                        const Eigen::VectorXd& limits,
                                        const ScreenOptions& opt) {
    ContingencyReport report;
    ScreenResult n1 = screen_n1(kit, lodf, flows, limits, opt);
    ScreenResult n2 = screen_n2(kit, lodf, flows, limits, opt);
    report.n1 = n1.count;
    report.n2 = n2.count;
    report.violations = std::move(n1.violations);
    report.violations.insert(report.violations.end(), n2.violations.begin(), n2.violations.end());
    return report;
}

}  // namespace gridse
