#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "gridse/powerflow.hpp"

namespace gridse {

// Mean absolute percentage error with a guard: components whose true value
// has magnitude below guard are excluded rather than divided by.
struct MapeAccumulator {
    double guard = 1e-9;
    double sum = 0.0;
    long count = 0;
    long excluded = 0;

    void add(double truth, double estimate) {
        if (std::abs(truth) < guard) {
            ++excluded;
            return;
        }
        sum += std::abs((estimate - truth) / truth);
        ++count;
    }

    void add(const Eigen::VectorXd& truth, const Eigen::VectorXd& estimate) {
        for (Eigen::Index i = 0; i < truth.size(); ++i) add(truth(i), estimate(i));
    }

    // Percent. No valid components at all is reported as NaN, not zero.
    double value_percent() const {
        if (count == 0) return std::numeric_limits<double>::quiet_NaN();
        return 100.0 * sum / static_cast<double>(count);
    }
};

// Voltage, angle, and pooled MAPE over a set of (truth, estimate) state
// pairs. The reference angle is zero on both sides and falls out through
// the guard.
struct StateErrorStats {
    MapeAccumulator v, theta, total;

    void add(const StateVector& truth, const StateVector& estimate);
};

// Per-epoch absolute contingency-count errors |est - true|.
std::vector<int> count_errors(const std::vector<int>& estimated, const std::vector<int>& truth);

double mean_of(const std::vector<int>& xs);
double fraction_leq(const std::vector<int>& xs, int bound);  // P(x <= bound)
double fraction_eq(const std::vector<int>& xs, int value);

// value -> occurrences, dense from 0 to max(xs).
std::vector<long> histogram_of(const std::vector<int>& xs);

struct ModelMetrics {
    std::string model;

    // Clean test epochs.
    double mape_v = 0, mape_theta = 0, mape_total = 0;
    double mean_eps1 = 0, mean_eps2 = 0;
    double frac_eps1_zero = 0, frac_eps2_zero = 0, frac_eps2_lt5 = 0;
    long epochs_scored = 0;

    // Attacked epochs (estimates from falsified data vs. clean truth).
    double mape_v_a = 0, mape_theta_a = 0, mape_total_a = 0;
    double mean_eps1_a = 0, mean_eps2_a = 0;
    double frac_eps1a_zero = 0, frac_eps2a_zero = 0, frac_eps2a_lt5 = 0;
    double stealth_rate = 0, effective_rate = 0, mean_abs_injection = 0;
    long attacks_scored = 0, attacks_skipped = 0;
};

void write_metrics_csv(const std::string& path, const std::vector<ModelMetrics>& rows);
void write_metrics_json(const std::string& path, const std::vector<ModelMetrics>& rows);

struct HistogramRow {
    std::string model;
    std::string metric;  // "eps1", "eps2", "eps1_a", "eps2_a"
    std::vector<long> counts;
};

void write_histograms_csv(const std::string& path, const std::vector<HistogramRow>& rows);

// Round-trip-exact decimal rendering (shortest form), used by every table
// writer so reruns are byte-comparable.
std::string format_double(double value);

}  // namespace gridse
