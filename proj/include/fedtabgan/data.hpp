#pragma once

#include "fedtabgan/nn.hpp"

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace fedtabgan::data {

// Dense binary patient-by-diagnosis matrix, one byte per cell, row-major.
class PatientMatrix {
public:
    PatientMatrix() = default;
    PatientMatrix(std::size_t rows, std::size_t cols);
    PatientMatrix(std::size_t rows, std::size_t cols, std::vector<std::uint8_t> bits,
                  std::vector<std::string> labels = {});

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    bool empty() const noexcept { return rows_ == 0; }

    std::uint8_t at(std::size_t r, std::size_t c) const { return bits_[r * cols_ + c]; }
    void set(std::size_t r, std::size_t c, bool value) { bits_[r * cols_ + c] = value ? 1 : 0; }

    std::span<const std::uint8_t> row(std::size_t r) const { return {bits_.data() + r * cols_, cols_}; }
    std::span<const std::uint8_t> bits() const noexcept { return bits_; }

    const std::vector<std::string>& labels() const noexcept { return labels_; }
    bool has_labels() const noexcept { return !labels_.empty(); }
    void set_labels(std::vector<std::string> labels);

    // New matrix made of the given rows, in order. Labels carry over.
    PatientMatrix select_rows(std::span<const std::size_t> indices) const;

    std::size_t count_ones() const noexcept;

    friend bool operator==(const PatientMatrix&, const PatientMatrix&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<std::uint8_t> bits_;
    std::vector<std::string> labels_;
};

// CSV: header of feature codes, then one 0/1 row per patient. Unlabelled
// matrices are written with their column indices as the header.
PatientMatrix load_matrix(const std::filesystem::path& path);
PatientMatrix parse_matrix(std::string_view text);
void save_matrix(const PatientMatrix& matrix, const std::filesystem::path& path);
std::string format_matrix(const PatientMatrix& matrix);

// 0 -> -1, 1 -> +1.
nn::Matrix encode_pm1(const PatientMatrix& matrix);
nn::Matrix encode_pm1(const PatientMatrix& matrix, std::span<const std::size_t> rows);

// value > threshold -> 1, otherwise 0.
PatientMatrix binarize(const nn::Matrix& values, double threshold = 0.0);

struct SourceParams {
    std::size_t n_patients = 5000;
    std::size_t n_features = 200;
    std::size_t n_latent = 8;
    double sparsity_target = 0.03;
    double silo_shift = 0.0;
    std::uint64_t seed = 1;
};

void validate(const SourceParams& params);

// Latent-factor Bernoulli source standing in for a real cohort. Feature
// loadings, base rates and drift directions depend only on the seed; the
// patients of silo i come from their own stream, and silo i's logits are
// shifted by i * silo_shift along the drift direction.
PatientMatrix synth_source(const SourceParams& params, std::size_t silo_index);

// Per-feature probabilities of the model for a silo (before sampling).
std::vector<double> synth_feature_probabilities(const SourceParams& params, std::size_t silo_index);

std::vector<std::string> synthetic_labels(std::size_t n_features);

using CodeDictionary = std::unordered_map<std::string, std::string>;

// Two-column CSV `code,description` with a header line; quoted fields allowed.
CodeDictionary load_dictionary(const std::filesystem::path& path);
CodeDictionary parse_dictionary(std::string_view text);

// Descriptions of every diagnosis present in the row, in feature order.
// Codes missing from the dictionary come back verbatim.
std::vector<std::string> describe_patient(const PatientMatrix& matrix, std::size_t row,
                                          const CodeDictionary& dict);

// Minimal RFC-4180 field splitter used by the CSV readers.
std::vector<std::string> split_csv_line(std::string_view line);
std::string csv_escape(std::string_view field);

}  // namespace fedtabgan::data
