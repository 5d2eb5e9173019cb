#include "fedtabgan/errors.hpp"
#include "fedtabgan/gan.hpp"

#include "support.hpp"

#include <doctest.h>

#include <cmath>

using namespace fedtabgan;
using namespace fedtabgan::gan;
using nn::Matrix;

namespace {

data::PatientMatrix tiny_data(std::uint64_t seed, std::size_t rows = 16, std::size_t cols = 8) {
    Rng rng(seed, 99);
    return testsupport::random_patients(rng, rows, cols, 0.3);
}

nn::Network linear_critic(const nn::Vector& w) {
    nn::DenseParams p{w.transpose(), nn::Vector::Zero(1)};
    return nn::Network({{static_cast<std::size_t>(w.size()), 1, nn::Activation::identity}}, {p}, 0);
}

}  // namespace

TEST_CASE("published architecture parameter counts") {
    GanConfig c;
    const auto model = build_gan(c);
    // Dense layer parameters: in * out weights plus out biases.
    auto dense_total = [](std::vector<std::size_t> dims) {
        std::size_t total = 0;
        for (std::size_t i = 0; i + 1 < dims.size(); ++i) total += dims[i] * dims[i + 1] + dims[i + 1];
        return total;
    };
    const std::size_t g_expected = dense_total({128, 128, 256, 512, 1071});
    const std::size_t d_expected = dense_total({1071, 512, 256, 128, 1});
    CHECK(g_expected == 730543);
    CHECK(d_expected == 713217);
    CHECK(model.generator.parameter_count() == g_expected);
    CHECK(model.discriminator.parameter_count() == d_expected);
    CHECK(model.generator.specs().back().activation == nn::Activation::tanh);
    CHECK(model.discriminator.specs().back().activation == nn::Activation::sigmoid);
    for (std::size_t l = 0; l < 3; ++l) {
        CHECK(model.generator.specs()[l].activation == nn::Activation::leaky_relu);
        CHECK(model.discriminator.specs()[l].activation == nn::Activation::leaky_relu);
    }
    c.loss_kind = LossKind::wgan_gp;
    CHECK(discriminator_specs(c).back().activation == nn::Activation::identity);
}

TEST_CASE("config validation, text and digest") {
    auto c = testsupport::tiny_config(8);
    CHECK_NOTHROW(validate(c));
    auto bad = c;
    bad.d_steps_per_g_step = 0;
    CHECK_THROWS_AS(validate(bad), ConfigError);
    bad = c;
    bad.g_hidden = {16, 0};
    CHECK_THROWS_AS(build_gan(bad), ConfigError);

    c.learning_rate = 0.00015;
    c.loss_kind = LossKind::wgan_gp;
    const auto back = config_from_key_values(parse_key_values(to_text(c)));
    CHECK(back == c);
    CHECK(digest(back) == digest(c));
    auto other = c;
    other.seed += 1;
    CHECK(digest(other) != digest(c));
    CHECK(to_hex(digest(c)).size() == 64);
}

TEST_CASE("builds are deterministic per seed") {
    const auto a = build_gan(testsupport::tiny_config(8, 3));
    const auto b = build_gan(testsupport::tiny_config(8, 3));
    const auto c = build_gan(testsupport::tiny_config(8, 4));
    CHECK(nn::bitwise_equal(a.generator.params(), b.generator.params()));
    CHECK(nn::bitwise_equal(a.discriminator.params(), b.discriminator.params()));
    CHECK_FALSE(nn::bitwise_equal(a.generator.params(), c.generator.params()));
    // Streams change randomness, not initial weights.
    const auto s = build_gan(testsupport::tiny_config(8, 3), 5);
    CHECK(nn::bitwise_equal(a.generator.params(), s.generator.params()));
    CHECK_FALSE(a.rng == s.rng);
}

TEST_CASE("losses at initialisation") {
    const auto d = tiny_data(1);
    auto model = build_gan(testsupport::tiny_config(8));
    const auto dl = d_train_step(model, data::encode_pm1(d));
    CHECK(std::abs(dl.loss - 1.386) < 0.7);
    CHECK_FALSE(dl.gradient_penalty.has_value());
    auto fresh = build_gan(testsupport::tiny_config(8));
    const auto gl = g_train_step(fresh);
    CHECK(std::abs(gl.loss - 0.693) < 0.4);
}

TEST_CASE("zero learning rate leaves parameters unchanged") {
    auto c = testsupport::tiny_config(8);
    c.learning_rate = 0.0;
    auto model = build_gan(c);
    const auto g0 = model.generator.params();
    const auto d0 = model.discriminator.params();
    d_train_step(model, data::encode_pm1(tiny_data(2)));
    g_train_step(model);
    CHECK(nn::bitwise_equal(model.generator.params(), g0));
    CHECK(nn::bitwise_equal(model.discriminator.params(), d0));
}

TEST_CASE("each step only updates its own network") {
    for (auto kind : {LossKind::vanilla, LossKind::wgan_gp}) {
        auto c = testsupport::tiny_config(8);
        c.loss_kind = kind;
        auto model = build_gan(c);
        const auto g0 = model.generator.params();
        const auto d0 = model.discriminator.params();
        d_train_step(model, data::encode_pm1(tiny_data(3)));
        CHECK(nn::bitwise_equal(model.generator.params(), g0));
        CHECK_FALSE(nn::bitwise_equal(model.discriminator.params(), d0));
        const auto d1 = model.discriminator.params();
        g_train_step(model);
        CHECK(nn::bitwise_equal(model.discriminator.params(), d1));
        CHECK_FALSE(nn::bitwise_equal(model.generator.params(), g0));
    }
}

TEST_CASE("discriminator loss falls on a fixed tiny dataset for most seeds") {
    int decreasing = 0;
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        auto model = build_gan(testsupport::tiny_config(8, seed));
        const Matrix real = data::encode_pm1(tiny_data(seed + 1000));
        double first = 0.0;
        double last = 0.0;
        for (int step = 0; step < 50; ++step) {
            const double loss = d_train_step(model, real).loss;
            if (step == 0) first = loss;
            last = loss;
        }
        if (last < first) ++decreasing;
    }
    CHECK(decreasing >= 45);
}

TEST_CASE("training schedule and logging") {
    const auto d = tiny_data(4, 40);
    SUBCASE("epochs=0 leaves the model untouched") {
        auto model = build_gan(testsupport::tiny_config(8));
        const auto g0 = model.generator.params();
        const auto log = train(model, d, 0);
        CHECK(log.records.empty());
        CHECK(nn::bitwise_equal(model.generator.params(), g0));
    }
    SUBCASE("2:1 schedule") {
        auto model = build_gan(testsupport::tiny_config(8));
        const auto log = train(model, d, 5);
        CHECK(log.d_updates == 10);
        CHECK(log.g_updates == 5);
        CHECK(model.d_updates == 10);
        CHECK(model.g_updates == 5);
        REQUIRE(log.records.size() == 5);
        for (std::size_t i = 0; i < 5; ++i) CHECK(log.records[i].step == i);
        const auto csv = format_log_csv(log);
        CHECK(csv.rfind("step,d_loss,g_loss,gp,elapsed_ms\n", 0) == 0);
        CHECK(csv.find(",,") != std::string::npos);  // empty gp column
    }
    SUBCASE("custom d steps") {
        auto c = testsupport::tiny_config(8);
        c.d_steps_per_g_step = 3;
        auto model = build_gan(c);
        const auto log = train(model, d, 4);
        CHECK(log.d_updates == 12);
        CHECK(log.g_updates == 4);
    }
    SUBCASE("oversized batch is clamped with a warning") {
        auto c = testsupport::tiny_config(8);
        c.batch_size = 100;
        auto model = build_gan(c);
        std::size_t seen = 0;
        TrainHooks hooks;
        hooks.on_minibatch = [&](const data::PatientMatrix&, std::span<const std::size_t> rows) { seen = rows.size(); };
        const auto log = train(model, d, 2, hooks);
        REQUIRE(log.warnings.size() == 1);
        CHECK(seen == 40);
    }
    SUBCASE("minibatches draw without replacement within a pass") {
        auto c = testsupport::tiny_config(8);
        c.batch_size = 8;
        auto model = build_gan(c);
        std::vector<std::size_t> drawn;
        TrainHooks hooks;
        hooks.on_minibatch = [&](const data::PatientMatrix&, std::span<const std::size_t> rows) {
            drawn.insert(drawn.end(), rows.begin(), rows.end());
        };
        train(model, d, 2, hooks);  // 4 batches of 8 out of 40 rows
        std::sort(drawn.begin(), drawn.end());
        CHECK(std::adjacent_find(drawn.begin(), drawn.end()) == drawn.end());
    }
    SUBCASE("feature mismatch") {
        auto model = build_gan(testsupport::tiny_config(9));
        CHECK_THROWS_AS(train(model, d, 1), ConfigError);
        CHECK_THROWS_AS(train(model, data::PatientMatrix(0, 9), 1), UsageError);
    }
}

TEST_CASE("training is bitwise reproducible") {
    const auto d = tiny_data(5, 64);
    auto a = build_gan(testsupport::tiny_config(8, 9));
    auto b = build_gan(testsupport::tiny_config(8, 9));
    train(a, d, 25);
    train(b, d, 25);
    CHECK(nn::bitwise_equal(a.generator.params(), b.generator.params()));
    CHECK(nn::bitwise_equal(a.discriminator.params(), b.discriminator.params()));
}

TEST_CASE("generation") {
    const auto model = build_gan(testsupport::tiny_config(8));
    const auto empty = generate(model, 0, 1);
    CHECK(empty.rows() == 0);
    CHECK(empty.cols() == 8);
    const auto a = generate(model, 300, 4);
    const auto b = generate(model, 300, 4);
    CHECK(a == b);
    CHECK(a.rows() == 300);
    for (auto v : a.bits()) CHECK((v == 0 || v == 1));
    const auto raw = generate_raw(model, 300, 4);
    CHECK((raw.array().abs() < 1.0).all());
    CHECK(data::binarize(raw) == a);
    CHECK_FALSE(generate(model, 300, 5) == a);
}

TEST_CASE("gradient penalty closed forms") {
    Rng rng(12);
    const Matrix real = testsupport::random_matrix(rng, 6, 4);
    const Matrix fake = testsupport::random_matrix(rng, 6, 4);
    std::vector<double> mix(6);
    for (auto& u : mix) u = rng.uniform();

    nn::Vector unit(4);
    unit << 0.5, -0.5, 0.5, 0.5;
    CHECK(std::abs(gradient_penalty(linear_critic(unit), real, fake, 10.0, mix).value) < 1e-12);

    nn::Vector three(4);
    three << 3.0, 0.0, 0.0, 0.0;
    CHECK(gradient_penalty(linear_critic(three), real, fake, 10.0, mix).value == doctest::Approx(40.0).epsilon(1e-12));
    CHECK(gradient_penalty(linear_critic(three), real, fake, 0.0, mix).value == 0.0);

    CHECK_THROWS_AS(gradient_penalty(linear_critic(three), Matrix(0, 4), Matrix(0, 4), 10.0, {}), UsageError);
    auto c = testsupport::tiny_config(4);
    const auto vanilla = build_gan(c);
    CHECK_THROWS_AS(gradient_penalty(vanilla.discriminator, real, fake, 10.0, mix), UsageError);
}

TEST_CASE("gradient penalty parameter gradients match central differences") {
    Rng rng(31);
    for (int trial = 0; trial < 10; ++trial) {
        const std::size_t in = 2 + rng.below(5);
        const std::vector<nn::LayerSpec> specs{{in, 6, nn::Activation::leaky_relu},
                                               {6, 5, nn::Activation::leaky_relu},
                                               {5, 1, nn::Activation::identity}};
        auto critic = nn::init_network(specs, rng.next_u64());
        const Matrix real = testsupport::random_matrix(rng, 5, in);
        const Matrix fake = testsupport::random_matrix(rng, 5, in);
        std::vector<double> mix(5);
        for (auto& u : mix) u = rng.uniform();
        const auto pr = gradient_penalty(critic, real, fake, 10.0, mix);
        CHECK(pr.value >= 0.0);
        constexpr double h = 1e-6;
        for (std::size_t l = 0; l < specs.size(); ++l) {
            for (Eigen::Index i = 0; i < critic.params()[l].weights.size(); ++i) {
                auto plus = critic;
                auto minus = critic;
                plus.mutable_params()[l].weights.data()[i] += h;
                minus.mutable_params()[l].weights.data()[i] -= h;
                const double numeric = (gradient_penalty(plus, real, fake, 10.0, mix).value -
                                        gradient_penalty(minus, real, fake, 10.0, mix).value) /
                                       (2 * h);
                CHECK(testsupport::relative_error(numeric, pr.gradients[l].weights.data()[i]) < 1e-4);
            }
            CHECK(pr.gradients[l].biases.isZero(0.0));
        }
    }
}

TEST_CASE("wgan critic at initialisation and penalty logging") {
    auto c = testsupport::tiny_config(8);
    c.loss_kind = LossKind::wgan_gp;
    auto model = build_gan(c);
    const auto r = d_train_step(model, data::encode_pm1(tiny_data(6)));
    REQUIRE(r.gradient_penalty.has_value());
    CHECK(std::abs(r.loss - *r.gradient_penalty) < 0.5);

    auto trained = build_gan(c);
    const auto log = wgan_train(trained, tiny_data(7, 64), 30);
    for (const auto& rec : log.records) {
        REQUIRE(rec.gp.has_value());
        CHECK(*rec.gp >= 0.0);
        CHECK(std::isfinite(rec.d_loss));
        CHECK(std::isfinite(rec.g_loss));
    }
    auto vanilla = build_gan(testsupport::tiny_config(8));
    CHECK_THROWS_AS(wgan_train(vanilla, tiny_data(7), 1), UsageError);
    auto untouched = build_gan(c);
    const auto g0 = untouched.generator.params();
    CHECK(wgan_train(untouched, tiny_data(7), 0).records.empty());
    CHECK(nn::bitwise_equal(untouched.generator.params(), g0));
}
