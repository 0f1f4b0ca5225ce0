#include "gridse/evaluation.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>

#include "gridse/errors.hpp"

namespace gridse {

void StateErrorStats::add(const StateVector& truth, const StateVector& estimate) {
    if (truth.v.size() != estimate.v.size() || truth.theta.size() != estimate.theta.size()) {
        throw InputError("state size mismatch in error accumulation");
    }
    for (Eigen::Index i = 0; i < truth.v.size(); ++i) {
        v.add(truth.v(i), estimate.v(i));
        total.add(truth.v(i), estimate.v(i));
    }
    for (Eigen::Index i = 0; i < truth.theta.size(); ++i) {
        theta.add(truth.theta(i), estimate.theta(i));
        total.add(truth.theta(i), estimate.theta(i));
    }
}

std::vector<int> count_errors(const std::vector<int>& estimated, const std::vector<int>& truth) {
    if (estimated.size() != truth.size()) {
        throw InputError("count series length mismatch");
    }
    std::vector<int> errors(estimated.size());
    for (std::size_t i = 0; i < estimated.size(); ++i) {
        errors[i] = std::abs(estimated[i] - truth[i]);
    }
    return errors;
}

double mean_of(const std::vector<int>& xs) {
    if (xs.empty()) return std::numeric_limits<double>::quiet_NaN();
    long long sum = 0;
    for (int x : xs) sum += x;
    return static_cast<double>(sum) / static_cast<double>(xs.size());
}

double fraction_leq(const std::vector<int>& xs, int bound) {
    if (xs.empty()) return std::numeric_limits<double>::quiet_NaN();
    long hits = 0;
    for (int x : xs) {
        if (x <= bound) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(xs.size());
}

double fraction_eq(const std::vector<int>& xs, int value) {
    if (xs.empty()) return std::numeric_limits<double>::quiet_NaN();
    long hits = 0;
    for (int x : xs) {
        if (x == value) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(xs.size());
}

std::vector<long> histogram_of(const std::vector<int>& xs) {
    if (xs.empty()) return {};
    int max_val = 0;
    for (int x : xs) {
        if (x < 0) throw InputError("histogram input must be non-negative");
        max_val = std::max(max_val, x);
    }
    std::vector<long> counts(static_cast<std::size_t>(max_val) + 1, 0);
    for (int x : xs) ++counts[static_cast<std::size_t>(x)];
    return counts;
}

std::string format_double(double value) {
    char buf[64];
    const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), value);
    if (ec != std::errc{}) throw Error("double formatting failed");
    return std::string(buf, ptr);
}

namespace {

constexpr const char* kMetricColumns =
    "model,mape_v,mape_theta,mape_total,mean_eps1,mean_eps2,"
    "frac_eps1_zero,frac_eps2_zero,frac_eps2_lt5,epochs_scored,"
    "mape_v_a,mape_theta_a,mape_total_a,mean_eps1_a,mean_eps2_a,"
    "frac_eps1a_zero,frac_eps2a_zero,frac_eps2a_lt5,"
    "stealth_rate,effective_rate,mean_abs_injection,attacks_scored,attacks_skipped";

void append_row(std::string& out, const ModelMetrics& r) {
    out += r.model;
    for (double x : {r.mape_v, r.mape_theta, r.mape_total, r.mean_eps1, r.mean_eps2,
                     r.frac_eps1_zero, r.frac_eps2_zero, r.frac_eps2_lt5}) {
        out += ',';
        out += format_double(x);
    }
    out += ',';
    out += std::to_string(r.epochs_scored);
    for (double x : {r.mape_v_a, r.mape_theta_a, r.mape_total_a, r.mean_eps1_a, r.mean_eps2_a,
                     r.frac_eps1a_zero, r.frac_eps2a_zero, r.frac_eps2a_lt5, r.stealth_rate,
                     r.effective_rate, r.mean_abs_injection}) {
        out += ',';
        out += format_double(x);
    }
    out += ',';
    out += std::to_string(r.attacks_scored);
    out += ',';
    out += std::to_string(r.attacks_skipped);
    out += '\n';
}

}  // namespace

void write_metrics_csv(const std::string& path, const std::vector<ModelMetrics>& rows) {
    std::string text = kMetricColumns;
    text += '\n';
    for (const ModelMetrics& r : rows) append_row(text, r);
    std::ofstream out(path);
    if (!out) throw InputError("cannot write metrics file " + path);
    out << text;
    if (!out) throw InputError("write failed for metrics file " + path);
}

void write_metrics_json(const std::string& path, const std::vector<ModelMetrics>& rows) {
    nlohmann::json doc = nlohmann::json::array();
    for (const ModelMetrics& r : rows) {
        nlohmann::json row;
        row["model"] = r.model;
        row["mape_v"] = r.mape_v;
        row["mape_theta"] = r.mape_theta;
        row["mape_total"] = r.mape_total;
        row["mean_eps1"] = r.mean_eps1;
        row["mean_eps2"] = r.mean_eps2;
        row["frac_eps1_zero"] = r.frac_eps1_zero;
        row["frac_eps2_zero"] = r.frac_eps2_zero;
        row["frac_eps2_lt5"] = r.frac_eps2_lt5;
        row["epochs_scored"] = r.epochs_scored;
        row["mape_v_a"] = r.mape_v_a;
        row["mape_theta_a"] = r.mape_theta_a;
        row["mape_total_a"] = r.mape_total_a;
        row["mean_eps1_a"] = r.mean_eps1_a;
        row["mean_eps2_a"] = r.mean_eps2_a;
        row["frac_eps1a_zero"] = r.frac_eps1a_zero;
        row["frac_eps2a_zero"] = r.frac_eps2a_zero;
        row["frac_eps2a_lt5"] = r.frac_eps2a_lt5;
        row["stealth_rate"] = r.stealth_rate;
        row["effective_rate"] = r.effective_rate;
        row["mean_abs_injection"] = r.mean_abs_injection;
        row["attacks_scored"] = r.attacks_scored;
        row["attacks_skipped"] = r.attacks_skipped;
        doc.push_back(std::move(row));
    }
    std::ofstream out(path);
    if (!out) throw InputError("cannot write metrics file " + path);
    out << doc.dump(1) << "\n";
    if (!out) throw InputError("write failed for metrics file " + path);
}

void write_histograms_csv(const std::string& path, const std::vector<HistogramRow>& rows) {
    std::ofstream out(path);
    if (!out) throw InputError("cannot write histogram file " + path);
    out << "model,metric,value,count\n";
    for (const HistogramRow& row : rows) {
        for (std::size_t v = 0; v < row.counts.size(); ++v) {
            out << row.model << ',' << row.metric << ',' << v << ',' << row.counts[v] << "\n";
        }
    }
    if (!out) throw InputError("write failed for histogram file " + path);
}

}  // namespace gridse
