#pragma once

#include "fedtabgan/data.hpp"

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace fedtabgan::eval {

using ProbVector = std::vector<double>;

// Fraction of patients carrying each diagnosis.
ProbVector feature_probabilities(const data::PatientMatrix& m);

double rmse(std::span<const double> p, std::span<const double> q);

// Squared Pearson correlation. Throws ValidationError if either vector is constant.
double r_squared(std::span<const double> p, std::span<const double> q);

// Coefficient of determination of q against the line q = p.
double r_squared_identity(std::span<const double> p, std::span<const double> q);

std::string format_scatter(std::span<const double> p_real, std::span<const double> p_synth,
                           const std::vector<std::string>& labels = {});
void scatter_export(std::span<const double> p_real, std::span<const double> p_synth,
                    const std::filesystem::path& path, const std::vector<std::string>& labels = {});

struct Histogram {
    std::vector<double> edges;  // bin_count + 1 entries
    std::vector<std::size_t> counts;
};

// Equal-width bins over [min, max]; the last bin is closed on the right.
Histogram histogram(std::span<const double> values, std::size_t bin_count);
std::string format_histogram(const Histogram& h);

// Real rows that have at least one bitwise-equal synthetic row.
std::size_t exact_duplicates(const data::PatientMatrix& real, const data::PatientMatrix& synth);

struct CosineDistances {
    std::vector<double> values;  // one per real row
    std::size_t zero_real_rows = 0;
    std::size_t zero_synth_rows = 0;
};

// 1 - max cosine similarity from each real row to the synthetic set. An
// all-zero real row is at distance 0 from an all-zero synthetic row and 1
// from every other row.
CosineDistances min_cosine_distances(const data::PatientMatrix& real, const data::PatientMatrix& synth);

inline constexpr double kDefaultDistanceThreshold = 0.1;

// Entries strictly below the threshold (similarity above 1 - threshold).
std::size_t threshold_violations(std::span<const double> distances, double threshold = kDefaultDistanceThreshold);

struct MeanStd {
    double mean = 0.0;
    double stddev = 0.0;  // population
};
MeanStd mean_std(std::span<const double> values);

struct EvalReport {
    std::size_t real_rows = 0;
    std::size_t synth_rows = 0;
    std::size_t features = 0;
    double r_squared = 0.0;
    double r_squared_identity = 0.0;
    double rmse = 0.0;
    std::size_t duplicate_count = 0;
    double min_cos_distance_mean = 0.0;
    double min_cos_distance_std = 0.0;
    double distance_threshold = kDefaultDistanceThreshold;
    std::size_t threshold_violation_count = 0;
    std::size_t distinct_synth_rows = 0;
    Histogram histogram;
    std::vector<std::string> warnings;
};

EvalReport evaluate(const data::PatientMatrix& real, const data::PatientMatrix& synth, std::size_t hist_bins = 20,
                    double distance_threshold = kDefaultDistanceThreshold);

std::string format_report(const EvalReport& report);

std::size_t distinct_rows(const data::PatientMatrix& m);

// ---- clinician plausibility survey ----

enum class Origin { real, single_gan, federated_gan };
inline constexpr std::size_t kOriginCount = 3;
inline constexpr std::array<std::string_view, kOriginCount> kOriginNames{"real", "single_gan", "federated_gan"};

inline constexpr std::size_t kCategoryCount = 6;
inline constexpr std::array<std::string_view, kCategoryCount> kCategories{
    "Highly Plausible", "Plausible", "Slightly Plausible", "Slightly Implausible", "Implausible", "Highly Implausible"};

extern const std::string_view kSurveyInstructions;

std::string_view to_string(Origin origin);
Origin origin_from_string(std::string_view name);
std::size_t category_index(std::string_view label);  // throws ValidationError naming the label

struct SurveyEntry {
    std::string id;
    std::vector<std::string> diagnoses;
};

using SurveyKey = std::map<std::string, Origin>;

struct SurveyPack {
    std::vector<SurveyEntry> entries;  // presentation order
    SurveyKey key;
};

SurveyPack make_survey_pack(const data::PatientMatrix& real, const data::PatientMatrix& single_synth,
                            const data::PatientMatrix& fed_synth, std::size_t n_per_group,
                            const data::CodeDictionary& dict, std::uint64_t seed);

std::string format_pack(const SurveyPack& pack);
std::string format_key(const SurveyKey& key);
SurveyKey parse_key(std::string_view text);

// One rater's answers: id -> category index into kCategories.
using SurveyResponse = std::map<std::string, std::size_t>;
SurveyResponse parse_response(std::string_view text);

using CountTable = std::array<std::array<std::size_t, kCategoryCount>, kOriginCount>;

struct SurveyTables {
    std::vector<CountTable> per_rater;
    CountTable pooled{};
};

SurveyTables tabulate_survey(std::span<const SurveyResponse> responses, const SurveyKey& key);

// CSV `rater,origin,<category columns>`; the pooled table uses rater "pooled".
std::string format_tables(const SurveyTables& tables, const std::vector<std::string>& rater_names = {});

std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, std::string_view text);

}  // namespace fedtabgan::eval
