#include "fedtabgan/nn.hpp"

#include "fedtabgan/errors.hpp"
#include "fedtabgan/rng.hpp"

#include <atomic>
#include <cmath>
#include <cstring>
#include <string>

namespace fedtabgan::nn {

namespace {

std::uint64_t next_network_id() {
    static std::atomic<std::uint64_t> counter{1};
    return counter.fetch_add(1, std::memory_order_relaxed);
}

double sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

std::string shape_str(Eigen::Index rows, Eigen::Index cols) {
    return std::to_string(rows) + "x" + std::to_string(cols);
}

}  // namespace

std::string_view to_string(Activation kind) {
    switch (kind) {
        case Activation::leaky_relu: return "leaky_relu";
        case Activation::sigmoid: return "sigmoid";
        case Activation::tanh: return "tanh";
        case Activation::identity: return "identity";
    }
    return "identity";
}

Activation activation_from_string(std::string_view name) {
    if (name == "leaky_relu") return Activation::leaky_relu;
    if (name == "sigmoid") return Activation::sigmoid;
    if (name == "tanh") return Activation::tanh;
    if (name == "identity") return Activation::identity;
    throw ConfigError("unknown activation '" + std::string(name) + "'");
}

ActivationValue activation_eval(Activation kind, double x) {
    switch (kind) {
        case Activation::leaky_relu:
            return x >= 0.0 ? ActivationValue{x, 1.0} : ActivationValue{kLeakySlope * x, kLeakySlope};
        case Activation::sigmoid: {
            const double s = sigmoid(x);
            return {s, s * (1.0 - s)};
        }
        case Activation::tanh: {
            const double t = std::tanh(x);
            return {t, 1.0 - t * t};
        }
        case Activation::identity: return {x, 1.0};
    }
    return {x, 1.0};
}

DenseParams DenseParams::zeros_like(const DenseParams& other) {
    return {Matrix::Zero(other.weights.rows(), other.weights.cols()), Vector::Zero(other.biases.size())};
}

bool bitwise_equal(std::span<const DenseParams> a, std::span<const DenseParams> b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const auto& x = a[i];
        const auto& y = b[i];
        if (x.weights.rows() != y.weights.rows() || x.weights.cols() != y.weights.cols() ||
            x.biases.size() != y.biases.size())
            return false;
        if (std::memcmp(x.weights.data(), y.weights.data(), sizeof(double) * x.weights.size()) != 0 ||
            std::memcmp(x.biases.data(), y.biases.data(), sizeof(double) * x.biases.size()) != 0)
            return false;
    }
    return true;
}

Network::Network(std::vector<LayerSpec> specs, std::vector<DenseParams> params, std::uint64_t seed)
    : specs_(std::move(specs)), params_(std::move(params)), seed_(seed), id_(next_network_id()) {
    validate_chain(specs_);
    if (params_.size() != specs_.size()) throw ConfigError("parameter set count does not match layer count");
    for (std::size_t k = 0; k < specs_.size(); ++k) {
        const auto& p = params_[k];
        if (p.weights.rows() != static_cast<Eigen::Index>(specs_[k].output_dim) ||
            p.weights.cols() != static_cast<Eigen::Index>(specs_[k].input_dim) ||
            p.biases.size() != static_cast<Eigen::Index>(specs_[k].output_dim))
            throw ShapeError("layer " + std::to_string(k) + " parameters have shape " +
                             shape_str(p.weights.rows(), p.weights.cols()) + ", expected " +
                             shape_str(specs_[k].output_dim, specs_[k].input_dim));
    }
}

Network::Network(const Network& other)
    : specs_(other.specs_), params_(other.params_), seed_(other.seed_), id_(next_network_id()) {}

Network& Network::operator=(const Network& other) {
    if (this != &other) {
        specs_ = other.specs_;
        params_ = other.params_;
        seed_ = other.seed_;
        id_ = next_network_id();
        generation_ = 0;
    }
    return *this;
}

std::size_t Network::parameter_count() const noexcept {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.parameter_count();
    return n;
}

void validate_chain(std::span<const LayerSpec> specs) {
    if (specs.empty()) throw ConfigError("network needs at least one layer");
    for (std::size_t k = 0; k < specs.size(); ++k) {
        if (specs[k].input_dim == 0 || specs[k].output_dim == 0)
            throw ConfigError("layer " + std::to_string(k) + " has a zero dimension");
        if (k + 1 < specs.size() && specs[k].output_dim != specs[k + 1].input_dim)
            throw ConfigError("layer " + std::to_string(k) + " output_dim " + std::to_string(specs[k].output_dim) +
                              " does not match layer " + std::to_string(k + 1) + " input_dim " +
                              std::to_string(specs[k + 1].input_dim));
    }
}

Network init_network(std::span<const LayerSpec> specs, std::uint64_t seed) {
    validate_chain(specs);
    Rng rng(seed, 0x696E6974 /* "init" */);
    std::vector<DenseParams> params;
    params.reserve(specs.size());
    for (const auto& spec : specs) {
        const double bound = std::sqrt(6.0 / static_cast<double>(spec.input_dim + spec.output_dim));
        const float fbound = static_cast<float>(bound);
        // Largest float not exceeding the real bound.
        const float limit = static_cast<double>(fbound) > bound ? std::nextafter(fbound, 0.0f) : fbound;
        DenseParams p{Matrix(spec.output_dim, spec.input_dim), Vector::Zero(spec.output_dim)};
        for (Eigen::Index i = 0; i < p.weights.size(); ++i) {
            float w = static_cast<float>(rng.uniform(-bound, bound));
            if (w > limit) w = limit;
            if (w < -limit) w = -limit;
            p.weights.data()[i] = static_cast<double>(w);
        }
        params.push_back(std::move(p));
    }
    return Network({specs.begin(), specs.end()}, std::move(params), seed);
}

Matrix apply_activation(Activation kind, const Matrix& pre) {
    switch (kind) {
        case Activation::leaky_relu: return pre.cwiseMax(0.0) + kLeakySlope * pre.cwiseMin(0.0);
        case Activation::sigmoid: return pre.unaryExpr([](double z) { return sigmoid(z); });
        case Activation::tanh: return pre.array().tanh().matrix();
        case Activation::identity: return pre;
    }
    return pre;
}

Matrix activation_derivative(Activation kind, const Matrix& pre, const Matrix& post) {
    switch (kind) {
        case Activation::leaky_relu:
            return pre.unaryExpr([](double z) { return z >= 0.0 ? 1.0 : kLeakySlope; });
        case Activation::sigmoid: return (post.array() * (1.0 - post.array())).matrix();
        case Activation::tanh: return (1.0 - post.array().square()).matrix();
        case Activation::identity: return Matrix::Ones(pre.rows(), pre.cols());
    }
    return Matrix::Ones(pre.rows(), pre.cols());
}

namespace {

void check_input(const Network& net, const Matrix& batch) {
    if (net.layer_count() == 0) throw UsageError("forward on an empty network");
    if (batch.cols() != static_cast<Eigen::Index>(net.input_dim()))
        throw ShapeError("batch has " + std::to_string(batch.cols()) + " columns, network expects " +
                         std::to_string(net.input_dim()));
}

Matrix affine(const Matrix& input, const DenseParams& p) {
    Matrix z(input.rows(), p.weights.rows());
    z.noalias() = input * p.weights.transpose();
    z.rowwise() += p.biases.transpose();
    return z;
}

}  // namespace

ForwardResult forward(const Network& net, const Matrix& batch) {
    check_input(net, batch);
    ForwardResult result;
    auto& cache = result.cache;
    cache.network_id = net.id();
    cache.generation = net.generation();
    cache.activations.reserve(net.layer_count() + 1);
    cache.pre_activations.reserve(net.layer_count());
    cache.activations.push_back(batch);
    for (std::size_t k = 0; k < net.layer_count(); ++k) {
        cache.pre_activations.push_back(affine(cache.activations.back(), net.params()[k]));
        cache.activations.push_back(apply_activation(net.specs()[k].activation, cache.pre_activations.back()));
    }
    result.output = cache.activations.back();
    return result;
}

Matrix predict(const Network& net, const Matrix& batch) {
    check_input(net, batch);
    Matrix current = batch;
    for (std::size_t k = 0; k < net.layer_count(); ++k)
        current = apply_activation(net.specs()[k].activation, affine(current, net.params()[k]));
    return current;
}

Gradients backward(const Network& net, const ForwardCache& cache, const Matrix& output_gradient,
                   BackwardOptions options) {
    const std::size_t layers = net.layer_count();
    if (cache.network_id != net.id() || cache.generation != net.generation())
        throw UsageError("forward cache is stale or belongs to a different network");
    if (cache.pre_activations.size() != layers || cache.activations.size() != layers + 1)
        throw UsageError("forward cache does not match the network depth");
    const Matrix& out = cache.activations.back();
    if (output_gradient.rows() != out.rows() || output_gradient.cols() != out.cols())
        throw ShapeError("output gradient has shape " + shape_str(output_gradient.rows(), output_gradient.cols()) +
                         ", expected " + shape_str(out.rows(), out.cols()));

    Gradients grads;
    if (options.parameter_gradients) grads.params.resize(layers);

    Matrix delta = options.gradient_wrt_preactivation
                       ? output_gradient
                       : Matrix(output_gradient.cwiseProduct(activation_derivative(
                             net.specs()[layers - 1].activation, cache.pre_activations[layers - 1], out)));

    for (std::size_t k = layers; k-- > 0;) {
        const auto& p = net.params()[k];
        if (options.parameter_gradients) {
            auto& g = grads.params[k];
            g.weights.resize(p.weights.rows(), p.weights.cols());
            g.weights.noalias() = delta.transpose() * cache.activations[k];
            g.biases = delta.colwise().sum().transpose();
        }
        if (k == 0) {
            if (options.input_gradient) {
                grads.input.resize(delta.rows(), p.weights.cols());
                grads.input.noalias() = delta * p.weights;
            }
            break;
        }
        Matrix upstream(delta.rows(), p.weights.cols());
        upstream.noalias() = delta * p.weights;
        delta = upstream.cwiseProduct(activation_derivative(net.specs()[k - 1].activation,
                                                            cache.pre_activations[k - 1], cache.activations[k]));
    }
    return grads;
}

AdamState make_adam_state(const Network& net, double learning_rate, double beta1, double beta2,
                          double epsilon) {
    AdamState state;
    state.learning_rate = learning_rate;
    state.beta1 = beta1;
    state.beta2 = beta2;
    state.epsilon = epsilon;
    for (const auto& p : net.params()) {
        state.first_moment.push_back(DenseParams::zeros_like(p));
        state.second_moment.push_back(DenseParams::zeros_like(p));
    }
    return state;
}

namespace {

template <typename P, typename G, typename M>
void adam_update(P& param, const G& grad, M& m, M& v, double lr, const AdamState& s, double bc1, double bc2) {
    m.array() = s.beta1 * m.array() + (1.0 - s.beta1) * grad.array();
    v.array() = s.beta2 * v.array() + (1.0 - s.beta2) * grad.array().square();
    param.array() -= lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + s.epsilon);
}

}  // namespace

void adam_step(std::span<DenseParams> params, std::span<const DenseParams> grads, AdamState& state) {
    if (params.size() != grads.size() || params.size() != state.first_moment.size() ||
        params.size() != state.second_moment.size())
        throw ShapeError("adam_step: parameter, gradient and moment set counts differ");
    for (std::size_t k = 0; k < params.size(); ++k) {
        const auto& p = params[k];
        const auto& g = grads[k];
        if (g.weights.rows() != p.weights.rows() || g.weights.cols() != p.weights.cols() ||
            g.biases.size() != p.biases.size())
            throw ShapeError("adam_step: gradient shape mismatch at layer " + std::to_string(k));
        if (!g.weights.allFinite() || !g.biases.allFinite())
            throw NumericalError("non-finite gradient entry", static_cast<std::int64_t>(k));
    }
    ++state.step_count;
    const double t = static_cast<double>(state.step_count);
    const double bc1 = 1.0 - std::pow(state.beta1, t);
    const double bc2 = 1.0 - std::pow(state.beta2, t);
    for (std::size_t k = 0; k < params.size(); ++k) {
        adam_update(params[k].weights, grads[k].weights, state.first_moment[k].weights,
                    state.second_moment[k].weights, state.learning_rate, state, bc1, bc2);
        adam_update(params[k].biases, grads[k].biases, state.first_moment[k].biases,
                    state.second_moment[k].biases, state.learning_rate, state, bc1, bc2);
    }
}

void adam_step(Network& net, std::span<const DenseParams> grads, AdamState& state) {
    adam_step(std::span<DenseParams>(net.mutable_params()), grads, state);
}

}  // namespace fedtabgan::nn
