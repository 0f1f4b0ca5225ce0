#include "gridse/grid_model.hpp"

#include <fstream>
#include <queue>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include <nlohmann/json.hpp>

namespace gridse {

namespace {

// Every bus must be reachable through branches, otherwise B_red is singular
// and none of the downstream factors exist.
void require_connected(const std::vector<Bus>& buses,
                       const std::vector<Branch>& branches,
                       const std::unordered_map<int, int>& bus_index) {
    const std::size_t n = buses.size();
    std::vector<std::vector<int>> adjacency(n);
    for (const Branch& br : branches) {
        const int a = bus_index.at(br.from);
        const int b = bus_index.at(br.to);
        adjacency[static_cast<std::size_t>(a)].push_back(b);
        adjacency[static_cast<std::size_t>(b)].push_back(a);
    }
    std::vector<char> seen(n, 0);
    std::queue<int> frontier;
    frontier.push(0);
    seen[0] = 1;
    std::size_t visited = 1;
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
    if (visited != n) {
        throw InputError("case network is not connected (" + std::to_string(visited) +
                         " of " + std::to_string(n) + " buses reachable from bus " +
                         std::to_string(buses[0].id) + ")");
    }
}

}  // namespace

GridCase::GridCase(double base_mva, std::vector<Bus> buses, std::vector<Branch> branches)
    : base_mva_(base_mva), buses_(std::move(buses)), branches_(std::move(branches)), ref_index_(-1) {
    if (base_mva_ <= 0.0) {
        throw InputError("base_mva must be positive, got " + std::to_string(base_mva_));
    }
    if (buses_.size() < 2) {
        throw InputError("case needs at least two buses");
    }
    if (branches_.empty()) {
        throw InputError("case needs at least one branch");
    }

    std::unordered_map<int, int> bus_of_id;
    for (std::size_t i = 0; i < buses_.size(); ++i) {
        const Bus& bus = buses_[i];
        if (!bus_of_id.emplace(bus.id, static_cast<int>(i)).second) {
            throw InputError("duplicate bus id " + std::to_string(bus.id));
        }
        if (bus.is_reference) {
            if (ref_index_ >= 0) {
                throw InputError("more than one reference bus (" +
                                 std::to_string(buses_[static_cast<std::size_t>(ref_index_)].id) +
                                 " and " + std::to_string(bus.id) + ")");
            }
            ref_index_ = static_cast<int>(i);
        }
    }
    if (ref_index_ < 0) {
        throw InputError("no reference bus flagged");
    }

    std::unordered_set<int> branch_ids;
    for (const Branch& br : branches_) {
        if (!branch_ids.insert(br.id).second) {
            throw InputError("duplicate branch id " + std::to_string(br.id));
        }
        if (!bus_of_id.count(br.from) || !bus_of_id.count(br.to)) {
            throw InputError("branch " + std::to_string(br.id) + " references unknown bus " +
                             std::to_string(bus_of_id.count(br.from) ? br.to : br.from));
        }
        if (br.from == br.to) {
            throw InputError("branch " + std::to_string(br.id) + " is a self-loop at bus " +
                             std::to_string(br.from));
        }
        if (!(br.b > 0.0)) {
            throw InputError("branch " + std::to_string(br.id) +
                             " needs positive susceptance, got " + std::to_string(br.b));
        }
        if (!(br.f_limit > 0.0)) {
            throw InputError("branch " + std::to_string(br.id) +
                             " needs positive flow limit, got " + std::to_string(br.f_limit));
        }
    }

    require_connected(buses_, branches_, bus_of_id);
}

int GridCase::bus_index(int bus_id) const {
    for (std::size_t i = 0; i < buses_.size(); ++i) {
        if (buses_[i].id == bus_id) return static_cast<int>(i);
    }
    throw InputError("unknown bus id " + std::to_string(bus_id));
}

int GridCase::branch_index(int branch_id) const {
    for (std::size_t i = 0; i < branches_.size(); ++i) {
        if (branches_[i].id == branch_id) return static_cast<int>(i);
    }
    throw InputError("unknown branch id " + std::to_string(branch_id));
}

Eigen::VectorXd GridCase::p_load_vector() const {
    Eigen::VectorXd p(bus_count());
    for (int i = 0; i < bus_count(); ++i) p(i) = buses_[static_cast<std::size_t>(i)].p_load;
    return p;
}

Eigen::VectorXd GridCase::q_load_vector() const {
    Eigen::VectorXd q(bus_count());
    for (int i = 0; i < bus_count(); ++i) q(i) = buses_[static_cast<std::size_t>(i)].q_load;
    return q;
}

Eigen::VectorXd GridCase::f_limit_vector() const {
    Eigen::VectorXd lim(branch_count());
    for (int i = 0; i < branch_count(); ++i) lim(i) = branches_[static_cast<std::size_t>(i)].f_limit;
    return lim;
}

Eigen::VectorXd MatrixBundle::expand_angles(const Eigen::VectorXd& theta_red) const {
    const int n = bus_count();
    if (theta_red.size() != n - 1) {
        throw InputError("expand_angles expects " + std::to_string(n - 1) + " entries, got " +
                         std::to_string(theta_red.size()));
    }
    Eigen::VectorXd theta(n);
    int k = 0;
    for (int i = 0; i < n; ++i) theta(i) = (i == ref) ? 0.0 : theta_red(k++);
    return theta;
}

Eigen::VectorXd MatrixBundle::reduce_angles(const Eigen::VectorXd& theta) const {
    const int n = bus_count();
    if (theta.size() != n) {
        throw InputError("reduce_angles expects " + std::to_string(n) + " entries, got " +
                         std::to_string(theta.size()));
    }
    Eigen::VectorXd theta_red(n - 1);
    int k = 0;
    for (int i = 0; i < n; ++i) {
        if (i != ref) theta_red(k++) = theta(i);
    }
    return theta_red;
}

MatrixBundle build_matrices(const GridCase& grid) {
    const int n = grid.bus_count();
    const int L = grid.branch_count();

    MatrixBundle kit;
    kit.ref = grid.reference_index();
    kit.M = Eigen::MatrixXd::Zero(n, L);
    kit.Y = Eigen::MatrixXd::Zero(L, L);
    kit.from_index.resize(L);
    kit.to_index.resize(L);
    kit.branch_b.resize(L);

    for (int l = 0; l < L; ++l) {
        const Branch& br = grid.branch(l);
        const int a = grid.bus_index(br.from);
        const int b = grid.bus_index(br.to);
        kit.M(a, l) = 1.0;
        kit.M(b, l) = -1.0;
        kit.Y(l, l) = br.b;
        kit.from_index(l) = a;
        kit.to_index(l) = b;
        kit.branch_b(l) = br.b;
    }

    kit.B = kit.M * kit.Y * kit.M.transpose();

    kit.B_red.resize(n - 1, n - 1);
    kit.H_dc.resize(n, n - 1);
    int col = 0;
    for (int j = 0; j < n; ++j) {
        if (j == kit.ref) continue;
        kit.H_dc.col(col) = kit.B.col(j);
        int row = 0;
        for (int i = 0; i < n; ++i) {
            if (i == kit.ref) continue;
            kit.B_red(row, col) = kit.B(i, j);
            ++row;
        }
        ++col;
    }

    return kit;
}

GridCase parse_case_json(const std::string& text, const std::string& origin) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& err) {
        throw InputError(origin + ": not valid JSON: " + err.what());
    }

    try {
        const double base_mva = doc.at("base_mva").get<double>();

        std::vector<Bus> buses;
        for (const auto& item : doc.at("buses")) {
            Bus bus;
            bus.id = item.at("id").get<int>();
            bus.is_reference = item.value("is_reference", false);
            bus.p_load = item.value("p_load", 0.0);
            bus.q_load = item.value("q_load", 0.0);
            buses.push_back(bus);
        }

        std::vector<Branch> branches;
        for (const auto& item : doc.at("branches")) {
            Branch br;
            br.id = item.at("id").get<int>();
            br.from = item.at("from").get<int>();
            br.to = item.at("to").get<int>();
            br.b = item.at("b").get<double>();
            br.f_limit = item.at("f_limit").get<double>();
            branches.push_back(br);
        }

        return GridCase(base_mva, std::move(buses), std::move(branches));
    } catch (const nlohmann::json::exception& err) {
        throw InputError(origin + ": bad case structure: " + err.what());
    }
}

GridCase load_case(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw InputError("cannot open case file " + path);
    }
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_case_json(buf.str(), path);
}

}  // namespace gridse
