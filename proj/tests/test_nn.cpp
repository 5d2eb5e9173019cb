#include "fedtabgan/errors.hpp"
#include "fedtabgan/nn.hpp"

#include "support.hpp"

#include <doctest.h>

#include <cmath>
#include <limits>

using namespace fedtabgan;
using namespace fedtabgan::nn;

TEST_CASE("activation values and derivatives") {
    CHECK(activation_eval(Activation::sigmoid, 0.0).value == doctest::Approx(0.5));
    const auto t = activation_eval(Activation::tanh, 0.0);
    CHECK(t.value == 0.0);
    CHECK(t.derivative == 1.0);
    CHECK(activation_eval(Activation::leaky_relu, -2.0).value == doctest::Approx(-0.4).epsilon(1e-15));
    CHECK(activation_eval(Activation::leaky_relu, -2.0).derivative == kLeakySlope);
    CHECK(activation_eval(Activation::leaky_relu, 3.0).derivative == 1.0);
    CHECK(activation_eval(Activation::identity, -7.5).value == -7.5);
    for (double x : {-30.0, -1.0, 0.3, 30.0}) {
        const auto s = activation_eval(Activation::sigmoid, x).value;
        CHECK(s >= 0.0);
        CHECK(s <= 1.0);
        const auto th = activation_eval(Activation::tanh, x).value;
        CHECK(th >= -1.0);
        CHECK(th <= 1.0);
    }
    CHECK(activation_from_string("leaky_relu") == Activation::leaky_relu);
    CHECK_THROWS_AS(activation_from_string("relu6"), ConfigError);
}

TEST_CASE("init is deterministic with zero biases and glorot bound") {
    const std::vector<LayerSpec> specs{{2, 3, Activation::tanh}};
    const auto a = init_network(specs, 7);
    const auto b = init_network(specs, 7);
    CHECK(bitwise_equal(a.params(), b.params()));
    const auto c = init_network(specs, 8);
    CHECK_FALSE(bitwise_equal(a.params(), c.params()));

    const std::vector<LayerSpec> big{{1071, 512, Activation::leaky_relu}, {512, 1, Activation::sigmoid}};
    const auto net = init_network(big, 3);
    const double bound = std::sqrt(6.0 / (1071 + 512));
    CHECK(bound == doctest::Approx(0.06156).epsilon(1e-4));
    CHECK(net.params()[0].weights.cwiseAbs().maxCoeff() <= bound);
    for (const auto& p : net.params()) CHECK(p.biases.isZero(0.0));
    // Weights are representable as 32-bit floats.
    for (Eigen::Index i = 0; i < net.params()[0].weights.size(); ++i) {
        const double w = net.params()[0].weights.data()[i];
        CHECK(static_cast<double>(static_cast<float>(w)) == w);
    }
}

TEST_CASE("init rejects broken chains") {
    const std::vector<LayerSpec> bad{{4, 3, Activation::tanh}, {2, 1, Activation::identity}};
    CHECK_THROWS_AS(init_network(bad, 1), ConfigError);
    const std::vector<LayerSpec> zero{{0, 3, Activation::tanh}};
    CHECK_THROWS_AS(init_network(zero, 1), ConfigError);
}

TEST_CASE("forward examples") {
    SUBCASE("identity layer passes input through") {
        DenseParams p{Matrix::Identity(3, 3), Vector::Zero(3)};
        Network net({{3, 3, Activation::identity}}, {p}, 0);
        Matrix x(2, 3);
        x << 1, -2, 3, 0.5, 0, -1;
        CHECK(predict(net, x) == x);
    }
    SUBCASE("sigmoid of zeros") {
        DenseParams p{Matrix::Zero(2, 4), Vector::Zero(2)};
        Network net({{4, 2, Activation::sigmoid}}, {p}, 0);
        const Matrix out = predict(net, Matrix::Zero(3, 4));
        CHECK((out.array() == 0.5).all());
    }
    SUBCASE("scalar tanh") {
        DenseParams p{Matrix::Constant(1, 1, 2.0), Vector::Constant(1, -1.0)};
        Network net({{1, 1, Activation::tanh}}, {p}, 0);
        CHECK(predict(net, Matrix::Constant(1, 1, 1.0))(0, 0) == doctest::Approx(0.761594).epsilon(1e-6));
    }
    SUBCASE("shape mismatch") {
        const auto net = init_network(std::vector<LayerSpec>{{3, 2, Activation::tanh}}, 1);
        CHECK_THROWS_AS(forward(net, Matrix::Zero(2, 4)), ShapeError);
    }
}

TEST_CASE("backward shapes, linearity and stale caches") {
    Rng rng(5);
    const std::vector<LayerSpec> specs{{5, 7, Activation::leaky_relu}, {7, 3, Activation::tanh}};
    auto net = init_network(specs, 2);
    const Matrix x = testsupport::random_matrix(rng, 4, 5);
    auto fwd = forward(net, x);
    CHECK(fwd.output.rows() == 4);
    CHECK(fwd.output.cols() == 3);

    const auto zero = backward(net, fwd.cache, Matrix::Zero(4, 3));
    for (const auto& g : zero.params) {
        CHECK(g.weights.isZero(0.0));
        CHECK(g.biases.isZero(0.0));
    }
    CHECK(zero.input.rows() == 4);
    CHECK(zero.input.cols() == 5);

    const auto other = init_network(specs, 2);
    CHECK_THROWS_AS(backward(other, fwd.cache, Matrix::Zero(4, 3)), UsageError);
    net.mutable_params()[0].weights(0, 0) += 0.1;
    CHECK_THROWS_AS(backward(net, fwd.cache, Matrix::Zero(4, 3)), UsageError);
    auto fresh = forward(net, x);
    CHECK_THROWS_AS(backward(net, fresh.cache, Matrix::Zero(4, 2)), ShapeError);
}

TEST_CASE("leaky relu local derivative uses the slope") {
    Matrix pre(1, 3);
    pre << -1.5, 0.0, 2.0;
    const Matrix post = apply_activation(Activation::leaky_relu, pre);
    const Matrix d = activation_derivative(Activation::leaky_relu, pre, post);
    CHECK(d(0, 0) == kLeakySlope);
    CHECK(d(0, 1) == 1.0);
    CHECK(d(0, 2) == 1.0);
}

TEST_CASE("analytic gradients match central differences") {
    Rng rng(20240601);
    for (int i = 0; i < 40; ++i) {
        const auto r = testsupport::check_network_gradients(rng);
        CHECK(r.max_param_error < 1e-4);
        CHECK(r.max_input_error < 1e-4);
    }
}

TEST_CASE("gradient with respect to pre-activation skips the head derivative") {
    Rng rng(9);
    const std::vector<LayerSpec> specs{{3, 4, Activation::leaky_relu}, {4, 1, Activation::sigmoid}};
    const auto net = init_network(specs, 4);
    const Matrix x = testsupport::random_matrix(rng, 5, 3);
    auto fwd = forward(net, x);
    const Matrix g = testsupport::random_matrix(rng, 5, 1);
    BackwardOptions pre_opts;
    pre_opts.gradient_wrt_preactivation = true;
    const auto a = backward(net, fwd.cache, g, pre_opts);
    const Matrix s = fwd.output;
    const Matrix chained = (g.array() / (s.array() * (1.0 - s.array()))).matrix();
    const auto b = backward(net, fwd.cache, chained);
    for (std::size_t l = 0; l < specs.size(); ++l)
        CHECK((a.params[l].weights - b.params[l].weights).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("adam step arithmetic") {
    SUBCASE("scalar example") {
        Network net({{1, 1, Activation::identity}}, {DenseParams{Matrix::Zero(1, 1), Vector::Zero(1)}}, 0);
        auto state = make_adam_state(net, 0.0002, 0.5, 0.999, 1e-8);
        std::vector<DenseParams> g{DenseParams{Matrix::Constant(1, 1, 1.0), Vector::Zero(1)}};
        adam_step(net, g, state);
        CHECK(net.params()[0].weights(0, 0) == doctest::Approx(-0.0002).epsilon(1e-6));
        CHECK(state.step_count == 1);
        CHECK(net.params()[0].biases(0) == 0.0);
    }
    SUBCASE("first step moves by lr times sign") {
        Rng rng(3);
        const std::vector<LayerSpec> specs{{6, 5, Activation::tanh}};
        auto net = init_network(specs, 1);
        const auto before = net.params();
        auto state = make_adam_state(net, 0.001);
        std::vector<DenseParams> g{DenseParams{testsupport::random_matrix(rng, 5, 6, 50.0),
                                               testsupport::random_matrix(rng, 5, 1, 1e-3).col(0)}};
        adam_step(net, g, state);
        for (Eigen::Index i = 0; i < g[0].weights.size(); ++i) {
            const double step = net.params()[0].weights.data()[i] - before[0].weights.data()[i];
            const double expect = -0.001 * (g[0].weights.data()[i] > 0 ? 1.0 : -1.0);
            CHECK(std::abs(step - expect) < 1e-6);
        }
        for (const auto& v : state.second_moment) CHECK((v.weights.array() >= 0).all());
    }
    SUBCASE("zero gradients are a fixed point") {
        auto net = init_network(std::vector<LayerSpec>{{3, 2, Activation::tanh}}, 5);
        const auto before = net.params();
        auto state = make_adam_state(net, 0.01);
        const std::vector<DenseParams> g{DenseParams::zeros_like(before[0])};
        for (int i = 0; i < 20; ++i) adam_step(net, g, state);
        CHECK(bitwise_equal(net.params(), before));
        CHECK(state.step_count == 20);
    }
    SUBCASE("non-finite gradient names the layer") {
        const std::vector<LayerSpec> specs{{3, 2, Activation::tanh}, {2, 2, Activation::identity}};
        auto net = init_network(specs, 5);
        const auto before = net.params();
        auto state = make_adam_state(net, 0.01);
        std::vector<DenseParams> g{DenseParams::zeros_like(before[0]), DenseParams::zeros_like(before[1])};
        g[1].weights(1, 0) = std::numeric_limits<double>::quiet_NaN();
        try {
            adam_step(net, g, state);
            FAIL("expected NumericalError");
        } catch (const NumericalError& e) {
            CHECK(e.index() == 1);
        }
        CHECK(bitwise_equal(net.params(), before));
        CHECK(state.step_count == 0);
    }
}

TEST_CASE("identical inputs give bitwise identical training") {
    auto run = [] {
        Rng rng(77);
        const std::vector<LayerSpec> specs{{4, 8, Activation::leaky_relu}, {8, 2, Activation::tanh}};
        auto net = init_network(specs, 11);
        auto state = make_adam_state(net, 0.01);
        for (int i = 0; i < 10; ++i) {
            const Matrix x = testsupport::random_matrix(rng, 6, 4);
            auto fwd = forward(net, x);
            auto g = backward(net, fwd.cache, fwd.output, {true, false, false});
            adam_step(net, g.params, state);
        }
        return net;
    };
    const auto a = run();
    const auto b = run();
    CHECK(bitwise_equal(a.params(), b.params()));
}
