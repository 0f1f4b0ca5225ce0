#pragma once

#include <Eigen/Dense>
#include <filesystem>
#include <random>
#include <string>

#include "gridse/grid_model.hpp"
#include "gridse/rng.hpp"

namespace testutil {

inline std::string fixture_path() { return GRIDSE_CASE_FIXTURE; }

inline gridse::GridCase load_fixture() { return gridse::load_case(fixture_path()); }

// Fully meshed 3-bus toy: equal susceptances make every factor computable
// by hand.
inline gridse::GridCase make_triangle() {
    std::vector<gridse::Bus> buses = {
        {1, true, 0.0, 0.0},
        {2, false, 0.30, 0.10},
        {3, false, 0.20, 0.05},
    };
    std::vector<gridse::Branch> branches = {
        {1, 1, 2, 10.0, 2.0},
        {2, 1, 3, 10.0, 2.0},
        {3, 2, 3, 10.0, 2.0},
    };
    return gridse::GridCase(100.0, std::move(buses), std::move(branches));
}

// Unique scratch directory per test binary run, removed on destruction.
struct TempDir {
    std::filesystem::path path;

    explicit TempDir(const std::string& tag) {
        gridse::Rng rng(std::random_device{}());
        path = std::filesystem::temp_directory_path() /
               (tag + "-" + std::to_string(rng.next_u64()));
        std::filesystem::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path, ec);
    }

    std::string file(const std::string& name) const { return (path / name).string(); }
};

inline double rel_err(double got, double want) {
    const double scale = std::max({std::abs(got), std::abs(want), 1e-12});
    return std::abs(got - want) / scale;
}

// Relative error with a floor on the scale, for comparing analytic against
// finite-difference gradients: coordinates far below the floor are noise on
// both sides and must not dominate the check.
inline double grad_err(double got, double want, double floor = 1e-3) {
    const double scale = std::max({std::abs(got), std::abs(want), floor});
    return std::abs(got - want) / scale;
}

}  // namespace testutil
