#pragma once

#include "fedtabgan/data.hpp"
#include "fedtabgan/kv.hpp"
#include "fedtabgan/nn.hpp"
#include "fedtabgan/rng.hpp"

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace fedtabgan::gan {

enum class LossKind { vanilla, wgan_gp };

std::string_view to_string(LossKind kind);
LossKind loss_kind_from_string(std::string_view name);

// Defaults reproduce the published architecture and hyperparameters.
struct GanConfig {
    std::size_t feature_dim = 1071;
    std::size_t noise_dim = 128;
    std::vector<std::size_t> g_hidden{128, 256, 512};
    std::vector<std::size_t> d_hidden{512, 256, 128};
    double learning_rate = 0.0002;
    std::size_t batch_size = 1500;
    std::size_t d_steps_per_g_step = 2;
    LossKind loss_kind = LossKind::vanilla;
    double gp_lambda = 10.0;
    std::uint64_t seed = 0;

    friend bool operator==(const GanConfig&, const GanConfig&) = default;
};

void validate(const GanConfig& config);

// Canonical key=value rendering; the digest is SHA-256 over it.
std::string to_text(const GanConfig& config);
GanConfig config_from_key_values(const KeyValues& kv, GanConfig base = {});

using ConfigDigest = std::array<std::uint8_t, 32>;
ConfigDigest digest(const GanConfig& config);
std::string to_hex(std::span<const std::uint8_t> bytes);

std::vector<nn::LayerSpec> generator_specs(const GanConfig& config);
std::vector<nn::LayerSpec> discriminator_specs(const GanConfig& config);

struct GanModel {
    GanConfig config;
    nn::Network generator;
    nn::Network discriminator;
    nn::AdamState g_opt;
    nn::AdamState d_opt;
    Rng rng;  // noise, minibatch shuffles and interpolation weights
    std::uint64_t d_updates = 0;
    std::uint64_t g_updates = 0;
};

// `stream` selects the training randomness stream; initial weights depend
// only on config.seed.
GanModel build_gan(const GanConfig& config, std::uint64_t stream = 0);

struct StepResult {
    double loss = 0.0;
    std::optional<double> gradient_penalty;
};

// One discriminator (or critic) update. real_batch is +/-1 encoded.
StepResult d_train_step(GanModel& model, const nn::Matrix& real_batch);

// One generator update on a fresh noise batch of config.batch_size rows.
StepResult g_train_step(GanModel& model);
StepResult g_train_step(GanModel& model, std::size_t batch_rows);

struct PenaltyResult {
    double value = 0.0;
    std::vector<nn::DenseParams> gradients;  // same shapes as the critic
};

// lambda * mean((||grad_x C(x_hat)|| - 1)^2) with x_hat = u*real + (1-u)*fake,
// one u per row taken from `mix`. Bias gradients are zero: hidden layers must
// be piecewise linear (leaky_relu or identity) and the head identity, so the
// input gradient does not depend on biases.
PenaltyResult gradient_penalty(const nn::Network& critic, const nn::Matrix& real_batch,
                               const nn::Matrix& fake_batch, double lambda, std::span<const double> mix);

struct TrainRecord {
    std::uint64_t step = 0;
    double d_loss = 0.0;
    double g_loss = 0.0;
    std::optional<double> gp;
    double elapsed_ms = 0.0;
};

struct TrainLog {
    std::vector<TrainRecord> records;
    std::uint64_t d_updates = 0;
    std::uint64_t g_updates = 0;
    std::vector<std::string> warnings;
    std::uint32_t round = 0;
    std::uint32_t node = 0;
};

std::string format_log_csv(const TrainLog& log);
void write_log_csv(const TrainLog& log, const std::filesystem::path& path);

struct TrainHooks {
    // Called with the matrix and row indices of every real minibatch drawn.
    std::function<void(const data::PatientMatrix&, std::span<const std::size_t>)> on_minibatch;
    std::function<void(const TrainRecord&)> on_step;
};

// `epochs` scheduled iterations, each d_steps_per_g_step discriminator
// updates on fresh minibatches followed by one generator update. Dispatches
// on config.loss_kind.
TrainLog train(GanModel& model, const data::PatientMatrix& data, std::uint64_t epochs, const TrainHooks& hooks = {});

// train() for models configured with LossKind::wgan_gp.
TrainLog wgan_train(GanModel& model, const data::PatientMatrix& data, std::uint64_t epochs,
                    const TrainHooks& hooks = {});

// Generator output before binarization, each entry in (-1, 1).
nn::Matrix generate_raw(const GanModel& model, std::size_t n, std::uint64_t seed);
data::PatientMatrix generate(const GanModel& model, std::size_t n, std::uint64_t seed);

}  // namespace fedtabgan::gan
