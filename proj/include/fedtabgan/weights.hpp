#pragma once

#include "fedtabgan/gan.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace fedtabgan::federation {

struct TensorShape {
    std::uint32_t rows = 0;
    std::uint32_t cols = 0;

    std::uint64_t size() const noexcept { return std::uint64_t{rows} * cols; }
    friend bool operator==(const TensorShape&, const TensorShape&) = default;
};

// All trainable parameters as 32-bit floats. Tensor order: for each generator
// layer its weight matrix (out x in) then its bias (out x 1), then the same
// for the discriminator. Values are row-major within a tensor.
struct WeightsBundle {
    std::vector<TensorShape> layout;
    std::vector<float> values;
    std::uint32_t checksum = 0;  // CRC-32 of the encoding up to the checksum

    friend bool operator==(const WeightsBundle&, const WeightsBundle&) = default;
};

WeightsBundle extract_weights(const gan::GanModel& model);

// Installs bundle values into the model's networks. Optimizer state and the
// randomness stream are left alone.
void load_weights(gan::GanModel& model, const WeightsBundle& bundle);

// Rounds every parameter to 32-bit precision, as a wire hand-off would.
void round_weights_to_f32(gan::GanModel& model);

std::vector<TensorShape> expected_layout(const gan::GanConfig& config);

// Wire form: u16 tensor count, (u32 rows, u32 cols) per tensor, f32 values,
// u32 CRC-32 over all preceding bytes. Everything little-endian.
std::vector<std::uint8_t> encode_weights(const WeightsBundle& bundle);
WeightsBundle decode_weights(std::span<const std::uint8_t> bytes);

// Byte-exact comparison of the float payloads.
bool same_values(const WeightsBundle& a, const WeightsBundle& b);

std::uint32_t crc32(std::span<const std::uint8_t> bytes);

// Model file: magic, config text with its SHA-256 digest, feature labels,
// the encoded bundle, and a trailing CRC-32 over the whole file.
struct ModelFile {
    gan::GanConfig config;
    gan::ConfigDigest digest{};
    std::vector<std::string> labels;
    WeightsBundle weights;
};

std::vector<std::uint8_t> encode_model_file(const ModelFile& file);
// verify_digest=false skips only the config digest check; checksums always apply.
ModelFile decode_model_file(std::span<const std::uint8_t> bytes, bool verify_digest = true);
void save_model(const std::filesystem::path& path, const ModelFile& file);
ModelFile load_model(const std::filesystem::path& path, bool verify_digest = true);

ModelFile make_model_file(const gan::GanModel& model, std::vector<std::string> labels = {});

// Rebuilds a model with the file's architecture and weights.
gan::GanModel model_from_file(const ModelFile& file);

}  // namespace fedtabgan::federation
