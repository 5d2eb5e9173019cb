#include "fedtabgan/data.hpp"

#include "fedtabgan/errors.hpp"
#include "fedtabgan/rng.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

namespace fedtabgan::data {

PatientMatrix::PatientMatrix(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), bits_(rows * cols, 0) {}

PatientMatrix::PatientMatrix(std::size_t rows, std::size_t cols, std::vector<std::uint8_t> bits,
                             std::vector<std::string> labels)
    : rows_(rows), cols_(cols), bits_(std::move(bits)) {
    if (bits_.size() != rows_ * cols_)
        throw ShapeError("patient matrix expects " + std::to_string(rows_ * cols_) + " cells, got " +
                         std::to_string(bits_.size()));
    if (std::any_of(bits_.begin(), bits_.end(), [](std::uint8_t b) { return b > 1; }))
        throw ValidationError("patient matrix cells must be 0 or 1");
    set_labels(std::move(labels));
}

void PatientMatrix::set_labels(std::vector<std::string> labels) {
    if (!labels.empty() && labels.size() != cols_)
        throw ShapeError("label count " + std::to_string(labels.size()) + " does not match " + std::to_string(cols_) +
                         " columns");
    labels_ = std::move(labels);
}

PatientMatrix PatientMatrix::select_rows(std::span<const std::size_t> indices) const {
    PatientMatrix out(indices.size(), cols_);
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] >= rows_) throw UsageError("row index " + std::to_string(indices[i]) + " out of range");
        std::copy_n(bits_.begin() + static_cast<std::ptrdiff_t>(indices[i] * cols_), cols_,
                    out.bits_.begin() + static_cast<std::ptrdiff_t>(i * cols_));
    }
    out.labels_ = labels_;
    return out;
}

std::size_t PatientMatrix::count_ones() const noexcept {
    return static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), std::uint8_t{1}));
}

std::vector<std::string> split_csv_line(std::string_view line) {
    std::vector<std::string> fields;
    std::string field;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char ch = line[i];
        if (quoted) {
            if (ch == '"') {
                if (i + 1 < line.size() && line[i + 1] == '"') {
                    field.push_back('"');
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                field.push_back(ch);
            }
        } else if (ch == '"') {
            quoted = true;
        } else if (ch == ',') {
            fields.push_back(std::move(field));
            field.clear();
        } else if (ch != '\r') {
            field.push_back(ch);
        }
    }
    if (quoted) throw ParseError("unterminated quoted field");
    fields.push_back(std::move(field));
    return fields;
}

std::string csv_escape(std::string_view field) {
    if (field.find_first_of(",\"\n\r") == std::string_view::npos) return std::string(field);
    std::string out = "\"";
    for (char ch : field) {
        if (ch == '"') out.push_back('"');
        out.push_back(ch);
    }
    out.push_back('"');
    return out;
}

namespace {

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out << text;
    if (!out) throw IoError("failed writing '" + path.string() + "'");
}

// Iterates non-empty lines, tracking 1-based line numbers.
class LineCursor {
public:
    explicit LineCursor(std::string_view text) : text_(text) {}

    bool next(std::string_view& line) {
        while (pos_ < text_.size()) {
            std::size_t end = text_.find('\n', pos_);
            if (end == std::string_view::npos) end = text_.size();
            line = text_.substr(pos_, end - pos_);
            pos_ = end + 1;
            ++line_no_;
            if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
            if (!line.empty()) return true;
        }
        return false;
    }

private:
    std::string_view text_;
    std::size_t pos_ = 0;
    std::size_t line_no_ = 0;
};

}  // namespace

PatientMatrix parse_matrix(std::string_view text) {
    LineCursor cursor(text);
    std::string_view line;
    if (!cursor.next(line)) throw ParseError("empty matrix file: missing header row");
    std::vector<std::string> labels = split_csv_line(line);
    const std::size_t cols = labels.size();

    std::vector<std::uint8_t> bits;
    std::size_t rows = 0;
    while (cursor.next(line)) {
        ++rows;
        std::size_t col = 0;
        std::size_t pos = 0;
        while (true) {
            std::size_t end = line.find(',', pos);
            if (end == std::string_view::npos) end = line.size();
            std::string_view cell = line.substr(pos, end - pos);
            ++col;
            if (col > cols)
                throw ParseError("ragged row " + std::to_string(rows) + ": more than " + std::to_string(cols) +
                                 " cells");
            if (cell == "0" || cell == "1") {
                bits.push_back(cell[0] == '1' ? 1 : 0);
            } else {
                throw ParseError("non-binary cell '" + std::string(cell) + "' at (row " + std::to_string(rows) +
                                 ", column " + std::to_string(col) + ")");
            }
            if (end == line.size()) break;
            pos = end + 1;
        }
        if (col != cols)
            throw ParseError("ragged row " + std::to_string(rows) + ": " + std::to_string(col) + " cells, expected " +
                             std::to_string(cols));
    }
    return PatientMatrix(rows, cols, std::move(bits), std::move(labels));
}

PatientMatrix load_matrix(const std::filesystem::path& path) {
    try {
        return parse_matrix(read_file(path));
    } catch (const ParseError& e) {
        throw ParseError(path.string() + ": " + e.what());
    }
}

std::string format_matrix(const PatientMatrix& matrix) {
    std::string out;
    out.reserve(matrix.rows() * matrix.cols() * 2 + matrix.cols() * 8);
    for (std::size_t c = 0; c < matrix.cols(); ++c) {
        if (c) out.push_back(',');
        out += matrix.has_labels() ? csv_escape(matrix.labels()[c]) : std::to_string(c);
    }
    out.push_back('\n');
    for (std::size_t r = 0; r < matrix.rows(); ++r) {
        auto row = matrix.row(r);
        for (std::size_t c = 0; c < row.size(); ++c) {
            if (c) out.push_back(',');
            out.push_back(row[c] ? '1' : '0');
        }
        out.push_back('\n');
    }
    return out;
}

void save_matrix(const PatientMatrix& matrix, const std::filesystem::path& path) {
    write_file(path, format_matrix(matrix));
}

nn::Matrix encode_pm1(const PatientMatrix& matrix) {
    nn::Matrix out(matrix.rows(), matrix.cols());
    const auto bits = matrix.bits();
    for (std::size_t i = 0; i < bits.size(); ++i) out.data()[i] = bits[i] ? 1.0 : -1.0;
    return out;
}

nn::Matrix encode_pm1(const PatientMatrix& matrix, std::span<const std::size_t> rows) {
    nn::Matrix out(rows.size(), matrix.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        auto row = matrix.row(rows[i]);
        for (std::size_t c = 0; c < row.size(); ++c) out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = row[c] ? 1.0 : -1.0;
    }
    return out;
}

PatientMatrix binarize(const nn::Matrix& values, double threshold) {
    std::vector<std::uint8_t> bits(static_cast<std::size_t>(values.size()));
    for (Eigen::Index i = 0; i < values.size(); ++i) bits[static_cast<std::size_t>(i)] = values.data()[i] > threshold ? 1 : 0;
    return PatientMatrix(static_cast<std::size_t>(values.rows()), static_cast<std::size_t>(values.cols()),
                         std::move(bits));
}

void validate(const SourceParams& params) {
    if (params.n_patients == 0) throw ConfigError("n_patients must be positive");
    if (params.n_features == 0) throw ConfigError("n_features must be positive");
    if (params.n_latent == 0) throw ConfigError("n_latent must be positive");
    if (!(params.sparsity_target > 0.0 && params.sparsity_target < 1.0))
        throw ConfigError("sparsity_target must lie in (0, 1)");
    if (!(params.silo_shift >= 0.0) || !std::isfinite(params.silo_shift))
        throw ConfigError("silo_shift must be a finite non-negative number");
}

namespace {

constexpr double kBaseScale = 1.0;
constexpr double kLoadingScale = 2.5;
constexpr double kMixtureScale = 2.0;
constexpr std::size_t kCalibrationPatients = 4096;
constexpr std::uint64_t kModelStream = 0x6D6F64656CULL;
constexpr std::uint64_t kCalibrationStream = 0x63616C6962ULL;
constexpr std::uint64_t kSiloStreamBase = 0x73696C6F00000000ULL;

double logistic(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

struct LatentModel {
    std::vector<double> base;     // n_features
    std::vector<double> loading;  // n_features x n_latent
    std::vector<double> drift;    // n_features
};

LatentModel draw_model(const SourceParams& p) {
    Rng rng(p.seed, kModelStream);
    LatentModel m;
    m.base.resize(p.n_features);
    m.loading.resize(p.n_features * p.n_latent);
    m.drift.resize(p.n_features);
    for (auto& b : m.base) b = kBaseScale * rng.normal();
    for (auto& l : m.loading) l = kLoadingScale * rng.normal();
    for (auto& d : m.drift) d = rng.normal();
    return m;
}

// Softmax of scaled Gaussian logits: peaked topic mixtures.
void draw_mixture(Rng& rng, std::span<double> out) {
    double peak = -1e300;
    for (auto& v : out) {
        v = kMixtureScale * rng.normal();
        peak = std::max(peak, v);
    }
    double total = 0.0;
    for (auto& v : out) {
        v = std::exp(v - peak);
        total += v;
    }
    for (auto& v : out) v /= total;
}

// Logits without the calibration offset, one row per patient.
std::vector<double> patient_logits(const SourceParams& p, const LatentModel& m, Rng& rng, std::size_t patients,
                                   std::size_t silo_index) {
    std::vector<double> logits(patients * p.n_features);
    std::vector<double> mix(p.n_latent);
    const double shift = static_cast<double>(silo_index) * p.silo_shift;
    for (std::size_t i = 0; i < patients; ++i) {
        draw_mixture(rng, mix);
        for (std::size_t j = 0; j < p.n_features; ++j) {
            double z = m.base[j] + shift * m.drift[j];
            const double* load = &m.loading[j * p.n_latent];
            for (std::size_t t = 0; t < p.n_latent; ++t) z += mix[t] * load[t];
            logits[i * p.n_features + j] = z;
        }
    }
    return logits;
}

double mean_probability(std::span<const double> logits, double offset) {
    double total = 0.0;
    for (double z : logits) total += logistic(z + offset);
    return total / static_cast<double>(logits.size());
}

// Offset that brings the mean probability over a fixed calibration cohort to
// the target. Monotone in the offset, so bisection suffices.
double calibrate_offset(const SourceParams& p, const LatentModel& m, std::size_t silo_index) {
    Rng rng(p.seed, kCalibrationStream);
    const auto logits = patient_logits(p, m, rng, kCalibrationPatients, silo_index);
    double lo = -60.0;
    double hi = 60.0;
    if (mean_probability(logits, lo) > p.sparsity_target || mean_probability(logits, hi) < p.sparsity_target)
        throw ConfigError("synthetic source calibration cannot reach sparsity target");
    for (int iter = 0; iter < 200 && hi - lo > 1e-12; ++iter) {
        const double mid = 0.5 * (lo + hi);
        if (mean_probability(logits, mid) < p.sparsity_target)
            lo = mid;
        else
            hi = mid;
    }
    const double offset = 0.5 * (lo + hi);
    const double achieved = mean_probability(logits, offset);
    if (std::abs(achieved - p.sparsity_target) > 1e-3 * p.sparsity_target)
        throw ConfigError("synthetic source calibration did not converge");
    return offset;
}

}  // namespace

std::vector<std::string> synthetic_labels(std::size_t n_features) {
    std::vector<std::string> labels(n_features);
    for (std::size_t j = 0; j < n_features; ++j) {
        std::ostringstream ss;
        ss << 'S' << std::setw(4) << std::setfill('0') << j;
        labels[j] = ss.str();
    }
    return labels;
}

PatientMatrix synth_source(const SourceParams& params, std::size_t silo_index) {
    validate(params);
    const LatentModel model = draw_model(params);
    const double offset = calibrate_offset(params, model, silo_index);
    Rng rng(params.seed, kSiloStreamBase + silo_index);
    const auto logits = patient_logits(params, model, rng, params.n_patients, silo_index);
    std::vector<std::uint8_t> bits(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) bits[i] = rng.uniform() < logistic(logits[i] + offset) ? 1 : 0;
    return PatientMatrix(params.n_patients, params.n_features, std::move(bits), synthetic_labels(params.n_features));
}

std::vector<double> synth_feature_probabilities(const SourceParams& params, std::size_t silo_index) {
    validate(params);
    const LatentModel model = draw_model(params);
    const double offset = calibrate_offset(params, model, silo_index);
    Rng rng(params.seed, kCalibrationStream);
    const auto logits = patient_logits(params, model, rng, kCalibrationPatients, silo_index);
    std::vector<double> probs(params.n_features, 0.0);
    for (std::size_t i = 0; i < kCalibrationPatients; ++i)
        for (std::size_t j = 0; j < params.n_features; ++j)
            probs[j] += logistic(logits[i * params.n_features + j] + offset);
    for (auto& v : probs) v /= static_cast<double>(kCalibrationPatients);
    return probs;
}

CodeDictionary parse_dictionary(std::string_view text) {
    LineCursor cursor(text);
    std::string_view line;
    CodeDictionary dict;
    if (!cursor.next(line)) return dict;  // header
    std::size_t line_no = 1;
    while (cursor.next(line)) {
        ++line_no;
        auto fields = split_csv_line(line);
        if (fields.size() != 2)
            throw ParseError("dictionary line " + std::to_string(line_no) + ": expected 2 fields, got " +
                             std::to_string(fields.size()));
        if (!dict.emplace(fields[0], fields[1]).second)
            throw ParseError("dictionary line " + std::to_string(line_no) + ": duplicate code '" + fields[0] + "'");
    }
    return dict;
}

CodeDictionary load_dictionary(const std::filesystem::path& path) {
    try {
        return parse_dictionary(read_file(path));
    } catch (const ParseError& e) {
        throw ParseError(path.string() + ": " + e.what());
    }
}

std::vector<std::string> describe_patient(const PatientMatrix& matrix, std::size_t row, const CodeDictionary& dict) {
    if (row >= matrix.rows())
        throw UsageError("row " + std::to_string(row) + " out of range for " + std::to_string(matrix.rows()) +
                         " patients");
    std::vector<std::string> out;
    auto bits = matrix.row(row);
    for (std::size_t c = 0; c < bits.size(); ++c) {
        if (!bits[c]) continue;
        const std::string code = matrix.has_labels() ? matrix.labels()[c] : std::to_string(c);
        auto it = dict.find(code);
        out.push_back(it != dict.end() ? it->second : code);
    }
    return out;
}

}  // namespace fedtabgan::data
