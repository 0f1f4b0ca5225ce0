#pragma once

#include <Eigen/Dense>
#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "gridse/chimera.hpp"
#include "gridse/contingency.hpp"
#include "gridse/grid_model.hpp"
#include "gridse/powerflow.hpp"

namespace gridse {

// Zonal load synthesis. Each load bus carries base_i = p_load_i * scale and
// follows base * (1 + diurnal sine + weekly sine) + AR(1) jitter, clamped
// from below. Reactive demand tracks active demand at a fixed power factor
// of 0.8 (Q = 0.75 P).
struct ProfileConfig {
    long epochs = 9030;
    double interval_minutes = 5.0;
    double diurnal_amplitude = 0.30;
    double weekly_amplitude = 0.05;
    double ar_coeff = 0.9;
    double ar_noise_frac = 0.02;  // AR innovation sd as a fraction of base
    double floor_frac = 0.05;     // lower clamp as a fraction of base
    double scale = 0.65;
    std::uint64_t seed = 0;
};

struct LoadProfile {
    Eigen::MatrixXd p;  // epochs x n buses, per-unit demand
    Eigen::MatrixXd q;
    ProfileConfig cfg;
};

LoadProfile generate_profiles(const GridCase& grid, const ProfileConfig& cfg);

struct CorpusConfig {
    double noise_sigma = 0.01;  // measurement noise sd, per-unit
    std::uint64_t seed = 0;
};

struct EpochRecord {
    long t = 0;
    StateVector x_true;
    Eigen::VectorXd z;            // noisy measurements, m = 2n
    Eigen::VectorXd theta_tilde;  // DC estimate from the noisy P meters
    int n1_true = 0;
    int n2_true = 0;
};

struct Corpus {
    std::vector<EpochRecord> records;
    long dropped_epochs = 0;  // AC power flow failures during generation
    int bus_count = 0;
};

// Solves the AC power flow per epoch, measures it, perturbs with meter
// noise, and screens the true operating point. Epochs whose power flow
// fails to converge are dropped and counted.
Corpus build_corpus(const GridCase& grid, const MatrixBundle& kit, const LoadProfile& profile,
                    const CorpusConfig& cfg);

struct SplitRanges {
    std::size_t train_begin = 0, train_end = 0;
    std::size_t val_begin = 0, val_end = 0;
    std::size_t test_begin = 0, test_end = 0;
};

// Contiguous chronological split; fractions must sum to 1.
SplitRanges split_corpus(std::size_t total, const std::array<double, 3>& fractions);

FeatureSeries features_of(const Corpus& corpus);
TruthSeries truths_of(const Corpus& corpus);

void write_corpus_csv(const std::string& path, const Corpus& corpus);
Corpus read_corpus_csv(const std::string& path);

}  // namespace gridse
