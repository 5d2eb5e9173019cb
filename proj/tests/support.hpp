#pragma once

#include "fedtabgan/data.hpp"
#include "fedtabgan/gan.hpp"
#include "fedtabgan/nn.hpp"
#include "fedtabgan/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

namespace testsupport {

using fedtabgan::nn::Matrix;

inline Matrix random_matrix(fedtabgan::Rng& rng, std::size_t rows, std::size_t cols, double scale = 1.0) {
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
    return m;
}

inline fedtabgan::data::PatientMatrix random_patients(fedtabgan::Rng& rng, std::size_t rows, std::size_t cols,
                                                      double p = 0.3) {
    fedtabgan::data::PatientMatrix m(rows, cols);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) m.set(r, c, rng.uniform() < p);
    return m;
}

inline double relative_error(double a, double b) {
    return std::abs(a - b) / std::max({1e-4, std::abs(a), std::abs(b)});
}

// Worst relative error between analytic gradients and central differences
// of L = sum(output .* weights) for one random network and batch.
struct GradientCheck {
    double max_param_error = 0.0;
    double max_input_error = 0.0;
};

inline GradientCheck check_network_gradients(fedtabgan::Rng& rng, std::size_t max_layers = 3,
                                             std::size_t max_dim = 16, std::size_t max_batch = 8) {
    using namespace fedtabgan::nn;
    static constexpr Activation kinds[] = {Activation::leaky_relu, Activation::sigmoid, Activation::tanh,
                                           Activation::identity};
    const std::size_t layers = 1 + rng.below(max_layers);
    std::vector<LayerSpec> specs;
    std::size_t in = 1 + rng.below(max_dim);
    for (std::size_t l = 0; l < layers; ++l) {
        const std::size_t out = 1 + rng.below(max_dim);
        specs.push_back({in, out, kinds[rng.below(4)]});
        in = out;
    }
    Network net = init_network(specs, rng.next_u64());
    for (auto& p : net.mutable_params())
        for (Eigen::Index i = 0; i < p.biases.size(); ++i) p.biases[i] = 0.1 * rng.normal();
    const std::size_t batch = 1 + rng.below(max_batch);
    Matrix x = random_matrix(rng, batch, specs.front().input_dim);
    Matrix w = random_matrix(rng, batch, specs.back().output_dim);

    auto loss = [&](const Network& n, const Matrix& input) { return (predict(n, input).array() * w.array()).sum(); };
    auto fwd = forward(net, x);
    auto grads = backward(net, fwd.cache, w);

    constexpr double h = 1e-5;
    GradientCheck out;
    for (std::size_t l = 0; l < specs.size(); ++l) {
        for (int part = 0; part < 2; ++part) {
            const Eigen::Index count = part == 0 ? net.params()[l].weights.size() : net.params()[l].biases.size();
            for (Eigen::Index i = 0; i < count; ++i) {
                auto value_at = [&](Network& n) -> double& {
                    return part == 0 ? n.mutable_params()[l].weights.data()[i] : n.mutable_params()[l].biases[i];
                };
                Network plus = net;
                Network minus = net;
                value_at(plus) += h;
                value_at(minus) -= h;
                const double numeric = (loss(plus, x) - loss(minus, x)) / (2 * h);
                const double analytic =
                    part == 0 ? grads.params[l].weights.data()[i] : grads.params[l].biases[i];
                out.max_param_error = std::max(out.max_param_error, relative_error(numeric, analytic));
            }
        }
    }
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        Matrix plus = x;
        Matrix minus = x;
        plus.data()[i] += h;
        minus.data()[i] -= h;
        const double numeric = (loss(net, plus) - loss(net, minus)) / (2 * h);
        out.max_input_error = std::max(out.max_input_error, relative_error(numeric, grads.input.data()[i]));
    }
    return out;
}

// Small architecture used wherever a test needs a full GAN quickly.
inline fedtabgan::gan::GanConfig tiny_config(std::size_t features, std::uint64_t seed = 1) {
    fedtabgan::gan::GanConfig c;
    c.feature_dim = features;
    c.noise_dim = 8;
    c.g_hidden = {16, 16};
    c.d_hidden = {16, 16};
    c.batch_size = 16;
    c.seed = seed;
    return c;
}

}  // namespace testsupport
