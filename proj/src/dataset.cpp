#include "gridse/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "gridse/estimation.hpp"
#include "gridse/evaluation.hpp"
#include "gridse/rng.hpp"

namespace gridse {

LoadProfile generate_profiles(const GridCase& grid, const ProfileConfig& cfg) {
    if (cfg.epochs <= 0) throw InputError("profile needs a positive epoch count");
    if (cfg.scale <= 0.0) throw InputError("profile scale must be positive");
    const int n = grid.bus_count();

    LoadProfile profile;
    profile.cfg = cfg;
    profile.p = Eigen::MatrixXd::Zero(cfg.epochs, n);
    profile.q = Eigen::MatrixXd::Zero(cfg.epochs, n);

    const double day = 24.0 * 60.0 / cfg.interval_minutes;   // epochs per day
    const double week = 7.0 * day;
    const double two_pi = 6.283185307179586476925286766559;

    Rng root(cfg.seed);
    for (int i = 0; i < n; ++i) {
        const double base = grid.bus(i).p_load * cfg.scale;
        if (base <= 0.0) continue;  // zero-injection bus, stays flat

        Rng zone_rng = root.fork(static_cast<std::uint64_t>(grid.bus(i).id));
        // Zones peak in the late afternoon with a little spread, so the
        // fleet does not move in perfect lockstep.
        const double diurnal_phase = -two_pi * 17.0 / 24.0 + zone_rng.uniform(-0.25, 0.25);
        const double weekly_phase = zone_rng.uniform(0.0, two_pi);
        const double sd = cfg.ar_noise_frac * base;

        double ar = 0.0;
        for (long t = 0; t < cfg.epochs; ++t) {
            ar = cfg.ar_coeff * ar + zone_rng.gaussian(0.0, sd);
            const double shape =
                1.0 +
                cfg.diurnal_amplitude *
                    std::sin(two_pi * static_cast<double>(t) / day + two_pi / 4.0 + diurnal_phase) +
                cfg.weekly_amplitude *
                    std::sin(two_pi * static_cast<double>(t) / week + weekly_phase);
            const double value = std::max(base * shape + ar, cfg.floor_frac * base);
            profile.p(t, i) = value;
            profile.q(t, i) = 0.75 * value;  // constant 0.8 power factor
        }
    }
    return profile;
}

Corpus build_corpus(const GridCase& grid, const MatrixBundle& kit, const LoadProfile& profile,
                    const CorpusConfig& cfg) {
    const int n = grid.bus_count();
    const int m = 2 * n;
    if (profile.p.cols() != n) {
        throw InputError("profile bus count does not match the case");
    }
    if (cfg.noise_sigma < 0.0) throw InputError("noise sigma must be non-negative");

    const LodfTable lodf = compute_lodf(kit);
    const Eigen::VectorXd limits = grid.f_limit_vector();

    Corpus corpus;
    corpus.bus_count = n;
    corpus.records.reserve(static_cast<std::size_t>(profile.p.rows()));

    Rng root(cfg.seed);
    for (long t = 0; t < profile.p.rows(); ++t) {
        // Per-epoch noise stream: epochs keep their identity even if some
        // are dropped along the way.
        Rng noise_rng = root.fork(static_cast<std::uint64_t>(t) + 1);

        EpochRecord rec;
        rec.t = t;
        try {
            const AcSolution sol =
                solve_ac_power_flow(grid, profile.p.row(t).transpose(), profile.q.row(t).transpose());
            rec.x_true = sol.state;
        } catch (const Error&) {
            ++corpus.dropped_epochs;
            continue;
        }

        const Eigen::VectorXd z_clean = h_measure(grid, rec.x_true);
        rec.z = z_clean;
        for (int k = 0; k < m; ++k) rec.z(k) += noise_rng.gaussian(0.0, cfg.noise_sigma);
        rec.theta_tilde = dc_estimate(kit, rec.z.head(n));

        const Eigen::VectorXd f_true = dc_line_flows(kit, rec.x_true.theta);
        const ContingencyReport report = analyze_contingencies(kit, lodf, f_true, limits);
        rec.n1_true = report.n1;
        rec.n2_true = report.n2;

        corpus.records.push_back(std::move(rec));
    }
    return corpus;
}

SplitRanges split_corpus(std::size_t total, const std::array<double, 3>& fractions) {
    const double sum = fractions[0] + fractions[1] + fractions[2];
    if (std::abs(sum - 1.0) > 1e-9) {
        throw InputError("split fractions must sum to 1");
    }
    if (fractions[0] <= 0.0 || fractions[1] <= 0.0 || fractions[2] <= 0.0) {
        throw InputError("split fractions must all be positive");
    }
    SplitRanges ranges;
    ranges.train_begin = 0;
    ranges.train_end = static_cast<std::size_t>(std::floor(fractions[0] * static_cast<double>(total)));
    ranges.val_begin = ranges.train_end;
    ranges.val_end = ranges.val_begin +
        static_cast<std::size_t>(std::floor(fractions[1] * static_cast<double>(total)));
    ranges.test_begin = ranges.val_end;
    ranges.test_end = total;
    if (ranges.train_end == 0 || ranges.val_end == ranges.val_begin ||
        ranges.test_end == ranges.test_begin) {
        throw InputError("split leaves an empty partition for " + std::to_string(total) +
                         " epochs");
    }
    return ranges;
}

FeatureSeries features_of(const Corpus& corpus) {
    FeatureSeries series;
    series.epochs.reserve(corpus.records.size());
    for (const EpochRecord& rec : corpus.records) {
        series.epochs.push_back(EpochFeatures{rec.z, rec.theta_tilde});
    }
    return series;
}

TruthSeries truths_of(const Corpus& corpus) {
    TruthSeries truth;
    truth.states.reserve(corpus.records.size());
    for (const EpochRecord& rec : corpus.records) truth.states.push_back(rec.x_true);
    return truth;
}

void write_corpus_csv(const std::string& path, const Corpus& corpus) {
    std::ofstream out(path);
    if (!out) throw InputError("cannot write corpus file " + path);

    const int n = corpus.bus_count;
    out << "t";
    for (int k = 0; k < 2 * n; ++k) out << ",z" << k;
    for (int k = 0; k < n; ++k) out << ",theta" << k;
    for (int k = 0; k < n; ++k) out << ",v" << k;
    for (int k = 0; k < n; ++k) out << ",theta_dc" << k;
    out << ",n1_true,n2_true\n";

    for (const EpochRecord& rec : corpus.records) {
        out << rec.t;
        for (int k = 0; k < 2 * n; ++k) out << "," << format_double(rec.z(k));
        for (int k = 0; k < n; ++k) out << "," << format_double(rec.x_true.theta(k));
        for (int k = 0; k < n; ++k) out << "," << format_double(rec.x_true.v(k));
        for (int k = 0; k < n; ++k) out << "," << format_double(rec.theta_tilde(k));
        out << "," << rec.n1_true << "," << rec.n2_true << "\n";
    }
    if (!out) throw InputError("write failed for corpus file " + path);
}

namespace {

double parse_double_field(const std::string& field, const std::string& path, long line) {
    double value = 0.0;
    const char* begin = field.data();
    const char* end = begin + field.size();
    const auto [ptr, ec] = std::from_chars(begin, end, value);
    if (ec != std::errc{} || ptr != end) {
        throw InputError(path + ":" + std::to_string(line) + ": bad numeric field '" + field + "'");
    }
    return value;
}

}  // namespace

Corpus read_corpus_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open corpus file " + path);

    std::string header;
    if (!std::getline(in, header)) throw InputError(path + ": empty corpus file");

    // Bus count from the header layout: 1 + 2n + 3n + 2 columns.
    long commas = static_cast<long>(std::count(header.begin(), header.end(), ','));
    if ((commas - 2) % 5 != 0 || commas < 7) {
        throw InputError(path + ": unrecognized corpus header");
    }
    const int n = static_cast<int>((commas - 2) / 5);

    Corpus corpus;
    corpus.bus_count = n;
    std::string line;
    long line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::vector<std::string> fields;
        std::stringstream ss(line);
        std::string field;
        while (std::getline(ss, field, ',')) fields.push_back(field);
        if (static_cast<long>(fields.size()) != commas + 1) {
            throw InputError(path + ":" + std::to_string(line_no) + ": expected " +
                             std::to_string(commas + 1) + " fields, got " +
                             std::to_string(fields.size()));
        }

        EpochRecord rec;
        std::size_t k = 0;
        rec.t = static_cast<long>(parse_double_field(fields[k++], path, line_no));
        rec.z.resize(2 * n);
        for (int i = 0; i < 2 * n; ++i) rec.z(i) = parse_double_field(fields[k++], path, line_no);
        rec.x_true.theta.resize(n);
        for (int i = 0; i < n; ++i) {
            rec.x_true.theta(i) = parse_double_field(fields[k++], path, line_no);
        }
        rec.x_true.v.resize(n);
        for (int i = 0; i < n; ++i) rec.x_true.v(i) = parse_double_field(fields[k++], path, line_no);
        rec.theta_tilde.resize(n);
        for (int i = 0; i < n; ++i) {
            rec.theta_tilde(i) = parse_double_field(fields[k++], path, line_no);
        }
        rec.n1_true = static_cast<int>(parse_double_field(fields[k++], path, line_no));
        rec.n2_true = static_cast<int>(parse_double_field(fields[k++], path, line_no));
        corpus.records.push_back(std::move(rec));
    }
    return corpus;
}

}  // namespace gridse
