#include "fedtabgan/eval.hpp"

#include "fedtabgan/errors.hpp"
#include "fedtabgan/kv.hpp"
#include "fedtabgan/rng.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace fedtabgan::eval {

namespace {

void require_same_length(std::span<const double> p, std::span<const double> q) {
    if (p.size() != q.size())
        throw ShapeError("probability vectors differ in length (" + std::to_string(p.size()) + " vs " +
                         std::to_string(q.size()) + ")");
    if (p.empty()) throw ShapeError("probability vectors are empty");
}

void require_same_width(const data::PatientMatrix& a, const data::PatientMatrix& b) {
    if (a.cols() != b.cols())
        throw ShapeError("matrices differ in feature count (" + std::to_string(a.cols()) + " vs " +
                         std::to_string(b.cols()) + ")");
}

std::string_view row_view(const data::PatientMatrix& m, std::size_t r) {
    auto row = m.row(r);
    return {reinterpret_cast<const char*>(row.data()), row.size()};
}

// Rows packed into 64-bit words for popcount dot products.
struct PackedRows {
    std::size_t words = 0;
    std::vector<std::uint64_t> bits;
    std::vector<std::uint32_t> ones;

    explicit PackedRows(const data::PatientMatrix& m) : words((m.cols() + 63) / 64) {
        bits.assign(m.rows() * words, 0);
        ones.assign(m.rows(), 0);
        for (std::size_t r = 0; r < m.rows(); ++r) {
            auto row = m.row(r);
            for (std::size_t c = 0; c < row.size(); ++c)
                if (row[c]) {
                    bits[r * words + c / 64] |= std::uint64_t{1} << (c % 64);
                    ++ones[r];
                }
        }
    }

    std::uint32_t dot(const PackedRows& other, std::size_t r, std::size_t s) const {
        const std::uint64_t* a = &bits[r * words];
        const std::uint64_t* b = &other.bits[s * words];
        std::uint32_t total = 0;
        for (std::size_t w = 0; w < words; ++w) total += static_cast<std::uint32_t>(std::popcount(a[w] & b[w]));
        return total;
    }
};

}  // namespace

ProbVector feature_probabilities(const data::PatientMatrix& m) {
    if (m.rows() == 0) throw UsageError("feature probabilities of an empty matrix are undefined");
    std::vector<std::size_t> counts(m.cols(), 0);
    for (std::size_t r = 0; r < m.rows(); ++r) {
        auto row = m.row(r);
        for (std::size_t c = 0; c < row.size(); ++c) counts[c] += row[c];
    }
    ProbVector p(m.cols());
    for (std::size_t c = 0; c < m.cols(); ++c) p[c] = static_cast<double>(counts[c]) / static_cast<double>(m.rows());
    return p;
}

double rmse(std::span<const double> p, std::span<const double> q) {
    require_same_length(p, q);
    double sum = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) sum += (p[i] - q[i]) * (p[i] - q[i]);
    return std::sqrt(sum / static_cast<double>(p.size()));
}

double r_squared(std::span<const double> p, std::span<const double> q) {
    require_same_length(p, q);
    const double n = static_cast<double>(p.size());
    const double mp = std::accumulate(p.begin(), p.end(), 0.0) / n;
    const double mq = std::accumulate(q.begin(), q.end(), 0.0) / n;
    double spp = 0.0, sqq = 0.0, spq = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double a = p[i] - mp;
        const double b = q[i] - mq;
        spp += a * a;
        sqq += b * b;
        spq += a * b;
    }
    auto constant = [](std::span<const double> v) {
        return std::all_of(v.begin(), v.end(), [&](double x) { return x == v.front(); });
    };
    if (constant(p) || constant(q) || spp == 0.0 || sqq == 0.0) throw ValidationError("correlation undefined: a probability vector is constant");
    return std::clamp((spq * spq) / (spp * sqq), 0.0, 1.0);
}

double r_squared_identity(std::span<const double> p, std::span<const double> q) {
    require_same_length(p, q);
    const double mp = std::accumulate(p.begin(), p.end(), 0.0) / static_cast<double>(p.size());
    double ss_res = 0.0, ss_tot = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        ss_res += (q[i] - p[i]) * (q[i] - p[i]);
        ss_tot += (p[i] - mp) * (p[i] - mp);
    }
    if (ss_tot == 0.0) throw ValidationError("determination undefined: real probability vector is constant");
    return 1.0 - ss_res / ss_tot;
}

std::string format_scatter(std::span<const double> p_real, std::span<const double> p_synth,
                           const std::vector<std::string>& labels) {
    require_same_length(p_real, p_synth);
    if (!labels.empty() && labels.size() != p_real.size()) throw ShapeError("scatter labels do not match features");
    std::ostringstream ss;
    ss << "feature,real_prob,synth_prob\n";
    for (std::size_t i = 0; i < p_real.size(); ++i)
        ss << (labels.empty() ? std::to_string(i) : data::csv_escape(labels[i])) << ',' << format_double(p_real[i])
           << ',' << format_double(p_synth[i]) << '\n';
    return ss.str();
}

void scatter_export(std::span<const double> p_real, std::span<const double> p_synth,
                    const std::filesystem::path& path, const std::vector<std::string>& labels) {
    write_text_file(path, format_scatter(p_real, p_synth, labels));
}

Histogram histogram(std::span<const double> values, std::size_t bin_count) {
    if (bin_count == 0) throw UsageError("histogram needs at least one bin");
    if (values.empty()) throw UsageError("histogram of no values");
    const auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
    const double lo = *lo_it;
    const double hi = *hi_it;
    // A constant sample gets unit-width bins starting at its value.
    const double width = hi > lo ? (hi - lo) / static_cast<double>(bin_count) : 1.0 / static_cast<double>(bin_count);
    Histogram h;
    h.edges.resize(bin_count + 1);
    for (std::size_t i = 0; i <= bin_count; ++i) h.edges[i] = lo + width * static_cast<double>(i);
    if (hi > lo) h.edges.back() = hi;
    h.counts.assign(bin_count, 0);
    for (double v : values) {
        auto bin = static_cast<std::size_t>(std::floor((v - lo) / width));
        if (bin >= bin_count) bin = bin_count - 1;
        ++h.counts[bin];
    }
    return h;
}

std::string format_histogram(const Histogram& h) {
    std::ostringstream ss;
    ss << "bin,lower,upper,count\n";
    for (std::size_t i = 0; i < h.counts.size(); ++i)
        ss << i << ',' << format_double(h.edges[i]) << ',' << format_double(h.edges[i + 1]) << ',' << h.counts[i]
           << '\n';
    return ss.str();
}

std::size_t exact_duplicates(const data::PatientMatrix& real, const data::PatientMatrix& synth) {
    require_same_width(real, synth);
    // Set lookup compares full rows on hash hits, so the count is exact.
    std::unordered_set<std::string_view> synth_rows;
    synth_rows.reserve(synth.rows());
    for (std::size_t r = 0; r < synth.rows(); ++r) synth_rows.insert(row_view(synth, r));
    std::size_t count = 0;
    for (std::size_t r = 0; r < real.rows(); ++r) count += synth_rows.count(row_view(real, r));
    return count;
}

std::size_t distinct_rows(const data::PatientMatrix& m) {
    std::unordered_set<std::string_view> rows;
    rows.reserve(m.rows());
    for (std::size_t r = 0; r < m.rows(); ++r) rows.insert(row_view(m, r));
    return rows.size();
}

CosineDistances min_cosine_distances(const data::PatientMatrix& real, const data::PatientMatrix& synth) {
    require_same_width(real, synth);
    if (synth.rows() == 0) throw UsageError("minimum cosine distance needs a non-empty synthetic set");
    const PackedRows a(real);
    const PackedRows b(synth);
    CosineDistances out;
    out.values.resize(real.rows());
    out.zero_synth_rows = static_cast<std::size_t>(std::count(b.ones.begin(), b.ones.end(), 0u));
    for (std::size_t r = 0; r < real.rows(); ++r) {
        if (a.ones[r] == 0) {
            ++out.zero_real_rows;
            out.values[r] = out.zero_synth_rows > 0 ? 0.0 : 1.0;
            continue;
        }
        double best = 0.0;
        for (std::size_t s = 0; s < synth.rows() && best < 1.0; ++s) {
            if (b.ones[s] == 0) continue;
            const std::uint32_t d = a.dot(b, r, s);
            if (d == 0) continue;
            const double sim = static_cast<double>(d) /
                               std::sqrt(static_cast<double>(a.ones[r]) * static_cast<double>(b.ones[s]));
            best = std::max(best, sim);
        }
        out.values[r] = std::clamp(1.0 - best, 0.0, 1.0);
    }
    return out;
}

std::size_t threshold_violations(std::span<const double> distances, double threshold) {
    return static_cast<std::size_t>(
        std::count_if(distances.begin(), distances.end(), [threshold](double d) { return d < threshold; }));
}

MeanStd mean_std(std::span<const double> values) {
    if (values.empty()) return {};
    const double n = static_cast<double>(values.size());
    const double mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
    double ss = 0.0;
    for (double v : values) ss += (v - mean) * (v - mean);
    return {mean, std::sqrt(ss / n)};
}

EvalReport evaluate(const data::PatientMatrix& real, const data::PatientMatrix& synth, std::size_t hist_bins,
                    double distance_threshold) {
    require_same_width(real, synth);
    if (real.rows() == 0 || synth.rows() == 0) throw UsageError("evaluation needs non-empty real and synthetic sets");
    EvalReport report;
    report.real_rows = real.rows();
    report.synth_rows = synth.rows();
    report.features = real.cols();
    const auto p = feature_probabilities(real);
    const auto q = feature_probabilities(synth);
    report.rmse = rmse(p, q);
    try {
        report.r_squared = r_squared(p, q);
        report.r_squared_identity = r_squared_identity(p, q);
    } catch (const ValidationError& e) {
        report.r_squared = std::nan("");
        report.r_squared_identity = std::nan("");
        report.warnings.emplace_back(e.what());
    }
    report.duplicate_count = exact_duplicates(real, synth);
    report.distinct_synth_rows = distinct_rows(synth);
    const auto cos = min_cosine_distances(real, synth);
    if (cos.zero_real_rows > 0)
        report.warnings.push_back(std::to_string(cos.zero_real_rows) +
                                  " real patients have no diagnoses; cosine distance assigned by convention");
    const auto ms = mean_std(cos.values);
    report.min_cos_distance_mean = ms.mean;
    report.min_cos_distance_std = ms.stddev;
    report.distance_threshold = distance_threshold;
    report.threshold_violation_count = threshold_violations(cos.values, distance_threshold);
    report.histogram = histogram(cos.values, hist_bins);
    return report;
}

std::string format_report(const EvalReport& r) {
    std::ostringstream ss;
    ss << "# feature probability correlation\n"
       << "real_patients: " << r.real_rows << '\n'
       << "synthetic_patients: " << r.synth_rows << '\n'
       << "features: " << r.features << '\n'
       << "R Squared: " << format_double(r.r_squared) << '\n'
       << "R Squared (identity line): " << format_double(r.r_squared_identity) << '\n'
       << "RMSE: " << format_double(r.rmse) << '\n'
       << "# data privacy\n"
       << "Duplicates: " << r.duplicate_count << '\n'
       << "Mean Min Cos. Distance: " << format_double(r.min_cos_distance_mean) << '\n'
       << "Standard Dev.: " << format_double(r.min_cos_distance_std) << '\n'
       << "distance_threshold: " << format_double(r.distance_threshold) << '\n'
       << "threshold_violations: " << r.threshold_violation_count << '\n'
       << "distinct_synthetic_rows: " << r.distinct_synth_rows << '\n'
       << "histogram_bins: " << r.histogram.counts.size() << '\n';
    for (const auto& w : r.warnings) ss << "warning: " << w << '\n';
    return ss.str();
}

// ---- survey ----

const std::string_view kSurveyInstructions =
    "Please rate these 60 patients in terms of how plausible you consider them to be as ICU patients that\n"
    "you might encounter on a given day in your ICU or any ICU. Please try not to take into account how likely "
    "or unlikely it may be to encounter one of these patients, as rarity should not be a factor.\n"
    "* Please note that this list is a mixture of real patients (from an ICU in the United States) and generated "
    "synthetic patients.";

std::string_view to_string(Origin origin) { return kOriginNames[static_cast<std::size_t>(origin)]; }

Origin origin_from_string(std::string_view name) {
    for (std::size_t i = 0; i < kOriginCount; ++i)
        if (kOriginNames[i] == name) return static_cast<Origin>(i);
    throw ValidationError("unknown origin '" + std::string(name) + "'");
}

std::size_t category_index(std::string_view label) {
    for (std::size_t i = 0; i < kCategoryCount; ++i)
        if (kCategories[i] == label) return i;
    throw ValidationError("unknown category '" + std::string(label) + "'");
}

SurveyPack make_survey_pack(const data::PatientMatrix& real, const data::PatientMatrix& single_synth,
                            const data::PatientMatrix& fed_synth, std::size_t n_per_group,
                            const data::CodeDictionary& dict, std::uint64_t seed) {
    const std::array<const data::PatientMatrix*, kOriginCount> sources{&real, &single_synth, &fed_synth};
    struct Pending {
        Origin origin;
        std::vector<std::string> diagnoses;
    };
    std::vector<Pending> pending;
    for (std::size_t g = 0; g < kOriginCount; ++g) {
        const auto& m = *sources[g];
        if (m.rows() < n_per_group)
            throw ValidationError(std::string(kOriginNames[g]) + " source has " + std::to_string(m.rows()) +
                                  " patients, survey needs " + std::to_string(n_per_group));
        std::vector<std::size_t> rows(m.rows());
        std::iota(rows.begin(), rows.end(), std::size_t{0});
        Rng rng(seed, 0x7375727600ULL + g);
        rng.shuffle(std::span<std::size_t>(rows));
        for (std::size_t i = 0; i < n_per_group; ++i)
            pending.push_back({static_cast<Origin>(g), data::describe_patient(m, rows[i], dict)});
    }
    Rng order_rng(seed, 0x6F72646572ULL);
    order_rng.shuffle(std::span<Pending>(pending));

    const std::size_t width = std::to_string(pending.size()).size();
    SurveyPack pack;
    for (std::size_t i = 0; i < pending.size(); ++i) {
        std::ostringstream id;
        id << 'P' << std::setw(static_cast<int>(std::max<std::size_t>(width, 2))) << std::setfill('0') << (i + 1);
        pack.key.emplace(id.str(), pending[i].origin);
        pack.entries.push_back({id.str(), std::move(pending[i].diagnoses)});
    }
    return pack;
}

std::string format_pack(const SurveyPack& pack) {
    std::ostringstream ss;
    ss << kSurveyInstructions << "\n\nCategories:";
    for (std::size_t i = 0; i < kCategoryCount; ++i) ss << (i ? ", " : " ") << kCategories[i];
    ss << "\n\n";
    for (const auto& e : pack.entries) {
        ss << "Patient " << e.id << '\n';
        if (e.diagnoses.empty()) ss << "  (no recorded diagnoses)\n";
        for (const auto& d : e.diagnoses) ss << "  - " << d << '\n';
        ss << '\n';
    }
    return ss.str();
}

std::string format_key(const SurveyKey& key) {
    std::ostringstream ss;
    ss << "id,origin\n";
    for (const auto& [id, origin] : key) ss << id << ',' << to_string(origin) << '\n';
    return ss.str();
}

namespace {

std::vector<std::vector<std::string>> parse_two_column(std::string_view text, std::string_view what) {
    std::vector<std::vector<std::string>> rows;
    std::istringstream in{std::string(text)};
    std::string line;
    std::size_t line_no = 0;
    bool header = true;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        if (header) {
            header = false;
            continue;
        }
        auto fields = data::split_csv_line(line);
        for (auto& f : fields) {
            const auto a = f.find_first_not_of(" \t");
            const auto b = f.find_last_not_of(" \t");
            f = a == std::string::npos ? std::string{} : f.substr(a, b - a + 1);
        }
        if (fields.size() != 2)
            throw ValidationError(std::string(what) + " line " + std::to_string(line_no) + ": expected 2 fields");
        rows.push_back(std::move(fields));
    }
    return rows;
}

}  // namespace

SurveyKey parse_key(std::string_view text) {
    SurveyKey key;
    for (auto& row : parse_two_column(text, "key"))
        if (!key.emplace(row[0], origin_from_string(row[1])).second)
            throw ValidationError("duplicate id '" + row[0] + "' in key");
    return key;
}

SurveyResponse parse_response(std::string_view text) {
    SurveyResponse response;
    for (auto& row : parse_two_column(text, "response"))
        if (!response.emplace(row[0], category_index(row[1])).second)
            throw ValidationError("duplicate id '" + row[0] + "' in response");
    return response;
}

SurveyTables tabulate_survey(std::span<const SurveyResponse> responses, const SurveyKey& key) {
    SurveyTables tables;
    for (const auto& response : responses) {
        CountTable table{};
        for (const auto& [id, category] : response) {
            auto it = key.find(id);
            if (it == key.end()) throw ValidationError("unknown patient id '" + id + "'");
            if (category >= kCategoryCount) throw ValidationError("category index out of range for '" + id + "'");
            ++table[static_cast<std::size_t>(it->second)][category];
        }
        for (std::size_t o = 0; o < kOriginCount; ++o)
            for (std::size_t c = 0; c < kCategoryCount; ++c) tables.pooled[o][c] += table[o][c];
        tables.per_rater.push_back(table);
    }
    return tables;
}

std::string format_tables(const SurveyTables& tables, const std::vector<std::string>& rater_names) {
    std::ostringstream ss;
    ss << "rater,origin";
    for (auto c : kCategories) ss << ',' << c;
    ss << '\n';
    auto emit = [&](const std::string& rater, const CountTable& t) {
        for (std::size_t o = 0; o < kOriginCount; ++o) {
            ss << data::csv_escape(rater) << ',' << kOriginNames[o];
            for (auto n : t[o]) ss << ',' << n;
            ss << '\n';
        }
    };
    for (std::size_t i = 0; i < tables.per_rater.size(); ++i)
        emit(i < rater_names.size() ? rater_names[i] : "rater" + std::to_string(i + 1), tables.per_rater[i]);
    emit("pooled", tables.pooled);
    return ss.str();
}

std::string read_text_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text_file(const std::filesystem::path& path, std::string_view text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out << text;
    if (!out) throw IoError("failed writing '" + path.string() + "'");
}

}  // namespace fedtabgan::eval
