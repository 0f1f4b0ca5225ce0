#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "gridse/errors.hpp"

namespace gridse {

struct Bus {
    int id = 0;
    bool is_reference = false;
    double p_load = 0.0;  // per-unit demand, positive = consumption
    double q_load = 0.0;
};

struct Branch {
    int id = 0;
    int from = 0;  // bus id
    int to = 0;    // bus id
    double b = 0.0;        // series susceptance magnitude, per-unit, > 0
    double f_limit = 0.0;  // thermal limit on |flow|, per-unit, > 0
};

// Validated network case. Bus/branch order is the file order; lookups by id
// go through bus_index()/branch_index().
class GridCase {
public:
    GridCase(double base_mva, std::vector<Bus> buses, std::vector<Branch> branches);

    double base_mva() const { return base_mva_; }
    int bus_count() const { return static_cast<int>(buses_.size()); }
    int branch_count() const { return static_cast<int>(branches_.size()); }
    int reference_index() const { return ref_index_; }

    const std::vector<Bus>& buses() const { return buses_; }
    const std::vector<Branch>& branches() const { return branches_; }
    const Bus& bus(int index) const { return buses_.at(static_cast<std::size_t>(index)); }
    const Branch& branch(int index) const { return branches_.at(static_cast<std::size_t>(index)); }

    int bus_index(int bus_id) const;
    int branch_index(int branch_id) const;

    Eigen::VectorXd p_load_vector() const;
    Eigen::VectorXd q_load_vector() const;
    Eigen::VectorXd f_limit_vector() const;

private:
    double base_mva_;
    std::vector<Bus> buses_;
    std::vector<Branch> branches_;
    int ref_index_;
};

// Dense matrix kit for the DC model. Sizes: n buses, L branches.
//   M     n x L   incidence, +1 at from bus, -1 at to bus
//   Y     L x L   diagonal of branch susceptances
//   B     n x n   nodal susceptance, B = M Y M^T
//   B_red (n-1) x (n-1)   B with the reference row and column removed
//   H_dc  n x (n-1)       B with only the reference column removed;
//                         P = H_dc theta_red for lossless DC flow
struct MatrixBundle {
    Eigen::MatrixXd M;
    Eigen::MatrixXd Y;
    Eigen::MatrixXd B;
    Eigen::MatrixXd B_red;
    Eigen::MatrixXd H_dc;
    int ref = 0;
    Eigen::VectorXi from_index;  // L, 0-based bus indices
    Eigen::VectorXi to_index;
    Eigen::VectorXd branch_b;    // L

    int bus_count() const { return static_cast<int>(B.rows()); }
    int branch_count() const { return static_cast<int>(Y.rows()); }

    // Insert 0 at the reference position: (n-1) angles -> n angles.
    Eigen::VectorXd expand_angles(const Eigen::VectorXd& theta_red) const;
    // Drop the reference entry: n angles -> (n-1) angles.
    Eigen::VectorXd reduce_angles(const Eigen::VectorXd& theta) const;
};

MatrixBundle build_matrices(const GridCase& grid);

GridCase load_case(const std::string& path);
GridCase parse_case_json(const std::string& text, const std::string& origin = "<string>");

}  // namespace gridse
