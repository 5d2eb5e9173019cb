#include "fedtabgan/errors.hpp"
#include "fedtabgan/federation.hpp"
#include "fedtabgan/kv.hpp"
#include "fedtabgan/weights.hpp"

#include "support.hpp"

#include <doctest.h>

#include <filesystem>
#include <numeric>
#include <set>

using namespace fedtabgan;
using namespace fedtabgan::federation;

namespace {

data::PatientMatrix cohort(std::size_t rows, std::size_t cols, std::uint64_t seed) {
    Rng rng(seed, 77);
    return testsupport::random_patients(rng, rows, cols, 0.3);
}

bool same_model(const gan::GanModel& a, const gan::GanModel& b) {
    return nn::bitwise_equal(a.generator.params(), b.generator.params()) &&
           nn::bitwise_equal(a.discriminator.params(), b.discriminator.params());
}

}  // namespace

TEST_CASE("partition sizes") {
    data::PatientMatrix big(46520, 2);
    const auto two = partition(big, 2, 1);
    CHECK(two.silos.size() == 2);
    CHECK(two.silos[0].rows() == 23260);
    CHECK(two.silos[1].rows() == 23260);
    CHECK(two.dropped == 0);
    const auto three = partition(big, 3, 1);
    for (const auto& s : three.silos) CHECK(s.rows() == 15506);
    CHECK(three.dropped == 2);
    const auto five = partition(big, 5, 1);
    for (const auto& s : five.silos) CHECK(s.rows() == 9304);
    const auto kept = partition(big, 3, 1, true);
    CHECK(kept.silos[2].rows() == 15508);
    CHECK(kept.dropped == 0);
    CHECK_THROWS_AS(partition(data::PatientMatrix(2, 2), 3, 1), ConfigError);
}

TEST_CASE("partition is a seeded permutation with disjoint silos") {
    auto m = cohort(10, 5, 1);
    const auto one = partition(m, 1, 4);
    CHECK(one.silos[0].rows() == 10);
    std::multiset<std::string> a, b;
    auto row_key = [](const data::PatientMatrix& x, std::size_t r) {
        return std::string(x.row(r).begin(), x.row(r).end());
    };
    for (std::size_t r = 0; r < 10; ++r) {
        a.insert(row_key(m, r));
        b.insert(row_key(one.silos[0], r));
    }
    CHECK(a == b);

    const auto p = partition(cohort(103, 4, 2), 4, 9);
    std::set<std::size_t> seen;
    for (const auto& [start, end] : p.ranges)
        for (std::size_t i = start; i < end; ++i) CHECK(seen.insert(p.order[i]).second);
    CHECK(seen.size() == 100);
    CHECK(partition(cohort(103, 4, 2), 4, 9).order == p.order);
    CHECK_FALSE(partition(cohort(103, 4, 2), 4, 10).order == p.order);
}

TEST_CASE("epoch budgets") {
    CHECK(epoch_budget(20000, 2) == std::vector<std::uint64_t>{10000, 10000});
    CHECK(epoch_budget(20000, 5) == std::vector<std::uint64_t>(5, 4000));
    CHECK(epoch_budget(20000, 3) == std::vector<std::uint64_t>{6667, 6667, 6666});
    Rng rng(3, 3);
    for (int i = 0; i < 200; ++i) {
        const std::uint64_t total = rng.below(100000);
        const std::size_t k = 1 + rng.below(12);
        const auto b = epoch_budget(total, k);
        CHECK(b.size() == k);
        CHECK(std::accumulate(b.begin(), b.end(), std::uint64_t{0}) == total);
        CHECK(*std::max_element(b.begin(), b.end()) - *std::min_element(b.begin(), b.end()) <= 1);
    }
}

TEST_CASE("plan schedule") {
    FederationPlan plan;
    plan.silo_count = 2;
    plan.total_epochs = 20000;
    auto s = plan.schedule();
    CHECK(s == std::vector<std::vector<std::uint64_t>>{{10000, 10000}});
    plan.rounds = 2;
    s = plan.schedule();
    CHECK(s == std::vector<std::vector<std::uint64_t>>{{5000, 5000}, {5000, 5000}});
    CHECK(plan.epochs_per_node() == std::vector<std::uint64_t>{10000, 10000});
    CHECK(plan.node_order(0) == std::vector<std::size_t>{0, 1});

    plan.silo_count = 3;
    plan.rounds = 4;
    plan.total_epochs = 1001;
    std::uint64_t total = 0;
    for (const auto& round : plan.schedule())
        for (auto e : round) total += e;
    CHECK(total == 1001);

    plan.shuffle_node_order = true;
    plan.shuffle_seed = 5;
    for (std::size_t r = 0; r < 4; ++r) {
        auto order = plan.node_order(r);
        std::sort(order.begin(), order.end());
        CHECK(order == std::vector<std::size_t>{0, 1, 2});
    }
}

TEST_CASE("plan text round trip") {
    FederationPlan plan;
    plan.gan = testsupport::tiny_config(9, 4);
    plan.silo_count = 3;
    plan.total_epochs = 1234;
    plan.rounds = 2;
    plan.shuffle_seed = 42;
    plan.shuffle_node_order = true;
    plan.remainder_to_last = true;
    plan.timeout_secs = 30;
    const auto back = plan_from_key_values(parse_key_values(to_text(plan)));
    CHECK(to_text(back) == to_text(plan));
    CHECK(back.gan == plan.gan);
    const auto path = std::filesystem::temp_directory_path() / "fedtabgan_plan.txt";
    save_plan(plan, path);
    CHECK(to_text(load_plan(path)) == to_text(plan));
    plan.rounds = 0;
    CHECK_THROWS(validate(plan));
}

TEST_CASE("single-node federation equals plain training") {
    const auto config = testsupport::tiny_config(8, 3);
    const auto data = cohort(40, 8, 3);
    auto plain = gan::build_gan(config);
    gan::train(plain, data, 25);
    round_weights_to_f32(plain);
    const auto fed = run_federation(config, data, 1, 1, 25, 0);
    CHECK(same_model(plain, fed.global));
    CHECK(fed.logs.size() == 1);
}

TEST_CASE("zero budgets leave the global untouched") {
    const auto config = testsupport::tiny_config(8, 5);
    const auto parts = partition(cohort(40, 8, 5), 2, 5);
    const auto global = gan::build_gan(config);
    const std::vector<std::uint64_t> zero{0, 0};
    CHECK(same_model(run_round(global, parts.silos, zero), global));
}

TEST_CASE("hand-off fidelity and silo isolation") {
    const auto config = testsupport::tiny_config(6, 6);
    const auto parts = partition(cohort(90, 6, 6), 3, 6);
    FederationPlan plan;
    plan.gan = config;
    plan.silo_count = 3;
    plan.total_epochs = 60;
    plan.rounds = 2;

    std::vector<WeightsBundle> starts, ends;
    std::size_t current = 0;
    bool isolated = true;
    std::size_t batches = 0;
    FederationHooks hooks;
    hooks.on_node_start = [&](std::size_t, std::size_t node, const gan::GanModel& local) {
        current = node;
        starts.push_back(extract_weights(local));
    };
    hooks.on_node_end = [&](std::size_t, std::size_t, const gan::GanModel& local) {
        ends.push_back(extract_weights(local));
    };
    hooks.train.on_minibatch = [&](const data::PatientMatrix& m, std::span<const std::size_t> rows) {
        ++batches;
        isolated = isolated && &m == &parts.silos[current];
        for (auto r : rows) isolated = isolated && r < m.rows();
    };
    const auto result = run_federation(plan, parts.silos, hooks);
    REQUIRE(starts.size() == 6);
    CHECK(same_values(starts[0], extract_weights(gan::build_gan(config))));
    for (std::size_t i = 1; i < starts.size(); ++i) CHECK(same_values(starts[i], ends[i - 1]));
    CHECK(same_values(ends.back(), extract_weights(result.global)));
    CHECK(isolated);
    CHECK(batches == 60 * config.d_steps_per_g_step);

    REQUIRE(result.logs.size() == 6);
    std::uint64_t g_total = 0;
    for (std::size_t i = 0; i < 6; ++i) {
        CHECK(result.logs[i].round == i / 3);
        CHECK(result.logs[i].node == i % 3);
        g_total += result.logs[i].g_updates;
    }
    CHECK(g_total == 60);
}

TEST_CASE("mismatched silo widths") {
    const auto config = testsupport::tiny_config(6, 1);
    std::vector<data::PatientMatrix> silos{cohort(20, 6, 1), cohort(20, 7, 2)};
    const std::vector<std::uint64_t> b{1, 1};
    CHECK_THROWS_AS(run_round(gan::build_gan(config), silos, b), ConfigError);
}

TEST_CASE("weights codec at the published size") {
    const auto model = gan::build_gan(gan::GanConfig{});
    const auto bundle = extract_weights(model);
    std::uint64_t expected = 0;
    for (auto m : {&model.generator, &model.discriminator})
        for (const auto& p : m->params()) expected += p.parameter_count();
    CHECK(expected == 1443760);
    CHECK(bundle.values.size() == expected);
    CHECK(bundle.layout == expected_layout(model.config));
    CHECK(bundle.layout.size() == 16);
    const auto bytes = encode_weights(bundle);
    CHECK(bytes.size() == 2 + 8 * 16 + 4 * expected + 4);
    const auto back = decode_weights(bytes);
    CHECK(same_values(back, bundle));
    CHECK(back.layout == bundle.layout);

    auto corrupt = bytes;
    corrupt[1000] ^= 0x10;
    CHECK_THROWS_AS(decode_weights(corrupt), IntegrityError);
    auto truncated = bytes;
    truncated.resize(bytes.size() - 5);
    CHECK_THROWS_AS(decode_weights(truncated), IntegrityError);
}

TEST_CASE("weights load and mismatch") {
    const auto a = gan::build_gan(testsupport::tiny_config(5, 1));
    auto b = gan::build_gan(testsupport::tiny_config(5, 2));
    load_weights(b, extract_weights(a));
    CHECK(same_values(extract_weights(a), extract_weights(b)));
    auto wrong = gan::build_gan(testsupport::tiny_config(6, 1));
    CHECK_THROWS_AS(load_weights(wrong, extract_weights(a)), IntegrityError);
}

TEST_CASE("model file") {
    const auto model = gan::build_gan(testsupport::tiny_config(4, 8));
    const auto file = make_model_file(model, {"a", "b", "c", "d"});
    const auto path = std::filesystem::temp_directory_path() / "fedtabgan_model.ftg";
    save_model(path, file);
    const auto back = load_model(path);
    CHECK(back.config == model.config);
    CHECK(back.labels == file.labels);
    CHECK(back.digest == gan::digest(model.config));
    CHECK(same_values(back.weights, file.weights));
    CHECK(same_model(model_from_file(back), model));

    auto bytes = encode_model_file(file);
    bytes[bytes.size() / 2] ^= 1;
    CHECK_THROWS_AS(decode_model_file(bytes), IntegrityError);
    CHECK_THROWS_AS(decode_model_file(std::vector<std::uint8_t>{1, 2, 3}), IntegrityError);
}
