#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

namespace fedtabgan::nn {

// Batches are row-major: one sample per row.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

enum class Activation { leaky_relu, sigmoid, tanh, identity };

inline constexpr double kLeakySlope = 0.2;

std::string_view to_string(Activation kind);
Activation activation_from_string(std::string_view name);

struct ActivationValue {
    double value;
    double derivative;
};

ActivationValue activation_eval(Activation kind, double x);

struct LayerSpec {
    std::size_t input_dim = 0;
    std::size_t output_dim = 0;
    Activation activation = Activation::identity;

    friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

// weights: output_dim x input_dim, biases: output_dim.
struct DenseParams {
    Matrix weights;
    Vector biases;

    std::size_t parameter_count() const noexcept {
        return static_cast<std::size_t>(weights.size() + biases.size());
    }
    static DenseParams zeros_like(const DenseParams& other);
};

bool bitwise_equal(std::span<const DenseParams> a, std::span<const DenseParams> b);

class Network {
public:
    Network() = default;
    Network(std::vector<LayerSpec> specs, std::vector<DenseParams> params, std::uint64_t seed);
    Network(const Network& other);
    Network& operator=(const Network& other);
    Network(Network&&) noexcept = default;
    Network& operator=(Network&&) noexcept = default;

    const std::vector<LayerSpec>& specs() const noexcept { return specs_; }
    const std::vector<DenseParams>& params() const noexcept { return params_; }

    // Any mutable access invalidates outstanding forward caches.
    std::vector<DenseParams>& mutable_params() noexcept {
        ++generation_;
        return params_;
    }

    std::size_t layer_count() const noexcept { return specs_.size(); }
    std::size_t input_dim() const noexcept { return specs_.empty() ? 0 : specs_.front().input_dim; }
    std::size_t output_dim() const noexcept { return specs_.empty() ? 0 : specs_.back().output_dim; }
    std::size_t parameter_count() const noexcept;
    std::uint64_t seed() const noexcept { return seed_; }
    std::uint64_t id() const noexcept { return id_; }
    std::uint64_t generation() const noexcept { return generation_; }

private:
    std::vector<LayerSpec> specs_;
    std::vector<DenseParams> params_;
    std::uint64_t seed_ = 0;
    std::uint64_t id_ = 0;
    std::uint64_t generation_ = 0;
};

// Glorot-uniform weights, zero biases. Weights are rounded to 32-bit floats
// so a freshly built network survives the wire format unchanged.
Network init_network(std::span<const LayerSpec> specs, std::uint64_t seed);

void validate_chain(std::span<const LayerSpec> specs);

struct ForwardCache {
    // activations[0] is the input batch, activations[k + 1] the output of layer k.
    std::vector<Matrix> activations;
    std::vector<Matrix> pre_activations;
    std::uint64_t network_id = 0;
    std::uint64_t generation = 0;
};

struct ForwardResult {
    Matrix output;
    ForwardCache cache;
};

ForwardResult forward(const Network& net, const Matrix& batch);

// Forward pass without keeping intermediates.
Matrix predict(const Network& net, const Matrix& batch);

struct BackwardOptions {
    bool parameter_gradients = true;
    bool input_gradient = true;
    // When set, the supplied gradient is taken with respect to the last
    // layer's pre-activation (used for losses fused with a sigmoid head).
    bool gradient_wrt_preactivation = false;
};

struct Gradients {
    std::vector<DenseParams> params;  // empty unless requested
    Matrix input;                     // empty unless requested
};

Gradients backward(const Network& net, const ForwardCache& cache, const Matrix& output_gradient,
                   BackwardOptions options = {});

// Elementwise activation and its derivative, given pre-activations.
Matrix apply_activation(Activation kind, const Matrix& pre);
Matrix activation_derivative(Activation kind, const Matrix& pre, const Matrix& post);

struct AdamState {
    std::uint64_t step_count = 0;
    std::vector<DenseParams> first_moment;
    std::vector<DenseParams> second_moment;
    double learning_rate = 0.0002;
    double beta1 = 0.5;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

AdamState make_adam_state(const Network& net, double learning_rate, double beta1 = 0.5,
                          double beta2 = 0.999, double epsilon = 1e-8);

// Bias-corrected Adam. Throws NumericalError carrying the layer index when a
// gradient entry is not finite; parameters are untouched in that case.
void adam_step(std::span<DenseParams> params, std::span<const DenseParams> grads, AdamState& state);
void adam_step(Network& net, std::span<const DenseParams> grads, AdamState& state);

}  // namespace fedtabgan::nn
