#include "fedtabgan/federation.hpp"

#include "fedtabgan/errors.hpp"

#include <fstream>
#include <numeric>
#include <sstream>

namespace fedtabgan::federation {

namespace {

constexpr std::uint64_t kPartitionStream = 0x7061727469ULL;
constexpr std::uint64_t kOrderStream = 0x6F72646572ULL;

}  // namespace

Partition partition(const data::PatientMatrix& data, std::size_t k, std::uint64_t seed, bool remainder_to_last) {
    if (k == 0) throw ConfigError("silo count must be at least 1");
    if (k > data.rows())
        throw ConfigError("cannot split " + std::to_string(data.rows()) + " rows into " + std::to_string(k) + " silos");
    Partition out;
    out.order.resize(data.rows());
    std::iota(out.order.begin(), out.order.end(), std::size_t{0});
    Rng rng(seed, kPartitionStream);
    rng.shuffle(std::span<std::size_t>(out.order));

    const std::size_t per = data.rows() / k;
    for (std::size_t i = 0; i < k; ++i) {
        const std::size_t start = i * per;
        const std::size_t end = (i + 1 == k && remainder_to_last) ? data.rows() : start + per;
        out.ranges.emplace_back(start, end);
        out.silos.push_back(data.select_rows(std::span<const std::size_t>(out.order).subspan(start, end - start)));
    }
    out.dropped = data.rows() - out.ranges.back().second;
    return out;
}

std::vector<std::uint64_t> epoch_budget(std::uint64_t total, std::size_t k) {
    if (k == 0) throw ConfigError("epoch budget needs at least one node");
    std::vector<std::uint64_t> out(k, total / k);
    for (std::size_t i = 0; i < total % k; ++i) ++out[i];
    return out;
}

std::vector<std::vector<std::uint64_t>> FederationPlan::schedule() const {
    std::vector<std::vector<std::uint64_t>> out;
    for (auto per_round : epoch_budget(total_epochs, rounds)) out.push_back(epoch_budget(per_round, silo_count));
    return out;
}

std::vector<std::uint64_t> FederationPlan::epochs_per_node() const {
    std::vector<std::uint64_t> totals(silo_count, 0);
    for (const auto& round : schedule())
        for (std::size_t i = 0; i < silo_count; ++i) totals[i] += round[i];
    return totals;
}

std::vector<std::size_t> FederationPlan::node_order(std::size_t round) const {
    std::vector<std::size_t> order(silo_count);
    std::iota(order.begin(), order.end(), std::size_t{0});
    if (shuffle_node_order) {
        Rng rng(shuffle_seed, kOrderStream + round);
        rng.shuffle(std::span<std::size_t>(order));
    }
    return order;
}

void validate(const FederationPlan& plan) {
    gan::validate(plan.gan);
    if (plan.silo_count == 0) throw ConfigError("silo_count must be at least 1");
    if (plan.rounds == 0) throw ConfigError("rounds must be at least 1");
    if (plan.timeout_secs == 0) throw ConfigError("timeout_secs must be positive");
    if (!plan.silo_row_ranges.empty()) {
        if (plan.silo_row_ranges.size() != plan.silo_count)
            throw ConfigError("silo_row_ranges must list one range per silo");
        for (std::size_t i = 0; i < plan.silo_row_ranges.size(); ++i) {
            const auto [s, e] = plan.silo_row_ranges[i];
            if (s > e) throw ConfigError("silo row range " + std::to_string(i) + " is reversed");
            if (i > 0 && s < plan.silo_row_ranges[i - 1].second)
                throw ConfigError("silo row ranges overlap");
        }
    }
}

std::string to_text(const FederationPlan& plan) {
    std::ostringstream ss;
    ss << "# federation plan\n"
       << "silo_count=" << plan.silo_count << '\n'
       << "rounds=" << plan.rounds << '\n'
       << "total_epochs=" << plan.total_epochs << '\n'
       << "shuffle_seed=" << plan.shuffle_seed << '\n'
       << "remainder_to_last=" << (plan.remainder_to_last ? "true" : "false") << '\n'
       << "shuffle_node_order=" << (plan.shuffle_node_order ? "true" : "false") << '\n'
       << "timeout_secs=" << plan.timeout_secs << '\n';
    if (!plan.silo_row_ranges.empty()) {
        ss << "silo_row_ranges=";
        for (std::size_t i = 0; i < plan.silo_row_ranges.size(); ++i)
            ss << (i ? "," : "") << plan.silo_row_ranges[i].first << '-' << plan.silo_row_ranges[i].second;
        ss << '\n';
    }
    ss << "epochs_per_node=";
    const auto per_node = plan.epochs_per_node();
    for (std::size_t i = 0; i < per_node.size(); ++i) ss << (i ? "," : "") << per_node[i];
    ss << "\n# model\n" << gan::to_text(plan.gan);
    return ss.str();
}

FederationPlan plan_from_key_values(const KeyValues& kv, FederationPlan base) {
    FederationPlan plan = std::move(base);
    plan.gan = gan::config_from_key_values(kv, plan.gan);
    plan.silo_count = kv_uint(kv, "silo_count", plan.silo_count);
    plan.rounds = kv_uint(kv, "rounds", plan.rounds);
    plan.total_epochs = kv_uint(kv, "total_epochs", plan.total_epochs);
    plan.shuffle_seed = kv_uint(kv, "shuffle_seed", plan.shuffle_seed);
    plan.remainder_to_last = kv_bool(kv, "remainder_to_last", plan.remainder_to_last);
    plan.shuffle_node_order = kv_bool(kv, "shuffle_node_order", plan.shuffle_node_order);
    plan.timeout_secs = kv_uint(kv, "timeout_secs", plan.timeout_secs);
    if (auto it = kv.find("silo_row_ranges"); it != kv.end()) {
        plan.silo_row_ranges.clear();
        std::stringstream ss(it->second);
        std::string item;
        while (std::getline(ss, item, ',')) {
            const auto dash = item.find('-');
            if (dash == std::string::npos) throw ConfigError("silo_row_ranges: expected start-end, got '" + item + "'");
            plan.silo_row_ranges.emplace_back(parse_uint(item.substr(0, dash), "silo_row_ranges"),
                                              parse_uint(item.substr(dash + 1), "silo_row_ranges"));
        }
    }
    // epochs_per_node is derived from total_epochs; a stored copy must agree.
    if (auto it = kv.find("epochs_per_node"); it != kv.end()) {
        const auto stored = parse_size_list(it->second, "epochs_per_node");
        const auto derived = plan.epochs_per_node();
        if (stored.size() != derived.size() || !std::equal(stored.begin(), stored.end(), derived.begin()))
            throw ConfigError("epochs_per_node does not match total_epochs split over silo_count and rounds");
    }
    validate(plan);
    return plan;
}

FederationPlan load_plan(const std::filesystem::path& path) {
    try {
        return plan_from_key_values(load_key_values(path));
    } catch (const ConfigError& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
}

void save_plan(const FederationPlan& plan, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out << to_text(plan);
}

Federation::Federation(gan::GanModel global, std::size_t node_count) : global_(std::move(global)) {
    if (node_count == 0) throw ConfigError("federation needs at least one node");
    round_weights_to_f32(global_);
    locals_.reserve(node_count);
    for (std::size_t i = 0; i < node_count; ++i) locals_.push_back(gan::build_gan(global_.config, i));
}

std::vector<gan::TrainLog> Federation::run_round(std::span<const data::PatientMatrix> silos,
                                                 std::span<const std::uint64_t> budgets,
                                                 std::span<const std::size_t> order, std::uint32_t round_index,
                                                 const FederationHooks& hooks) {
    if (silos.size() != locals_.size() || budgets.size() != locals_.size())
        throw ConfigError("round needs one silo and one budget per node");
    for (std::size_t i = 0; i < silos.size(); ++i)
        if (silos[i].cols() != global_.config.feature_dim)
            throw ConfigError("silo " + std::to_string(i) + " has " + std::to_string(silos[i].cols()) +
                              " features, model expects " + std::to_string(global_.config.feature_dim));

    std::vector<gan::TrainLog> logs;
    for (const std::size_t node : order) {
        if (node >= locals_.size()) throw UsageError("node index out of range in round order");
        auto& local = locals_[node];
        load_weights(local, extract_weights(global_));
        if (hooks.on_node_start) hooks.on_node_start(round_index, node, local);
        auto log = gan::train(local, silos[node], budgets[node], hooks.train);
        log.round = round_index;
        log.node = static_cast<std::uint32_t>(node);
        round_weights_to_f32(local);
        load_weights(global_, extract_weights(local));
        if (hooks.on_node_end) hooks.on_node_end(round_index, node, local);
        logs.push_back(std::move(log));
    }
    return logs;
}

gan::GanModel run_round(const gan::GanModel& global, std::span<const data::PatientMatrix> silos,
                        std::span<const std::uint64_t> budgets, const FederationHooks& hooks) {
    if (silos.empty()) throw ConfigError("round needs at least one silo");
    Federation fed(global, silos.size());
    std::vector<std::size_t> order(silos.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    fed.run_round(silos, budgets, order, 0, hooks);
    return std::move(fed.global());
}

FederationResult run_federation(const FederationPlan& plan, std::span<const data::PatientMatrix> silos,
                                const FederationHooks& hooks) {
    validate(plan);
    if (silos.size() != plan.silo_count)
        throw ConfigError("plan expects " + std::to_string(plan.silo_count) + " silos, got " +
                          std::to_string(silos.size()));
    Federation fed(gan::build_gan(plan.gan), plan.silo_count);
    FederationResult result;
    const auto schedule = plan.schedule();
    for (std::size_t r = 0; r < plan.rounds; ++r) {
        const auto order = plan.node_order(r);
        auto logs = fed.run_round(silos, schedule[r], order, static_cast<std::uint32_t>(r), hooks);
        for (auto& l : logs) result.logs.push_back(std::move(l));
    }
    result.global = std::move(fed.global());
    return result;
}

FederationResult run_federation(const gan::GanConfig& config, const data::PatientMatrix& data, std::size_t k,
                                std::size_t rounds, std::uint64_t total_epochs, std::uint64_t shuffle_seed) {
    FederationPlan plan;
    plan.gan = config;
    plan.silo_count = k;
    plan.rounds = rounds;
    plan.total_epochs = total_epochs;
    plan.shuffle_seed = shuffle_seed;
    if (k == 1) return run_federation(plan, std::span<const data::PatientMatrix>(&data, 1));
    auto parts = partition(data, k, shuffle_seed);
    plan.silo_row_ranges = parts.ranges;
    return run_federation(plan, parts.silos);
}

}  // namespace fedtabgan::federation
