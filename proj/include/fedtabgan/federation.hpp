#pragma once

#include "fedtabgan/data.hpp"
#include "fedtabgan/gan.hpp"
#include "fedtabgan/weights.hpp"

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <utility>
#include <vector>

namespace fedtabgan::federation {

using RowRange = std::pair<std::size_t, std::size_t>;  // [start, end) into the shuffled row order

struct Partition {
    std::vector<data::PatientMatrix> silos;
    std::vector<RowRange> ranges;
    std::vector<std::size_t> order;  // shuffled row order the ranges index into
    std::size_t dropped = 0;
};

// Shuffles rows by seed and cuts k silos of floor(n/k) rows. The n mod k
// leftover rows are dropped unless remainder_to_last is set.
Partition partition(const data::PatientMatrix& data, std::size_t k, std::uint64_t seed,
                    bool remainder_to_last = false);

// floor(total/k) each, the first total mod k nodes get one more.
std::vector<std::uint64_t> epoch_budget(std::uint64_t total, std::size_t k);

struct FederationPlan {
    gan::GanConfig gan;
    std::size_t silo_count = 1;
    std::vector<RowRange> silo_row_ranges;  // informational; filled when the plan came from a partition
    std::uint64_t total_epochs = 20000;
    std::size_t rounds = 1;
    std::uint64_t shuffle_seed = 0;
    bool remainder_to_last = false;
    bool shuffle_node_order = false;
    std::uint64_t timeout_secs = 600;

    // schedule()[round][node]: the round budget is split over rounds first,
    // then across nodes.
    std::vector<std::vector<std::uint64_t>> schedule() const;
    std::vector<std::uint64_t> epochs_per_node() const;
    // Silo indices in training order for a round.
    std::vector<std::size_t> node_order(std::size_t round) const;
};

void validate(const FederationPlan& plan);
std::string to_text(const FederationPlan& plan);
FederationPlan plan_from_key_values(const KeyValues& kv, FederationPlan base = {});
FederationPlan load_plan(const std::filesystem::path& path);
void save_plan(const FederationPlan& plan, const std::filesystem::path& path);

struct FederationHooks {
    gan::TrainHooks train;
    std::function<void(std::size_t round, std::size_t node, const gan::GanModel& local)> on_node_start;
    std::function<void(std::size_t round, std::size_t node, const gan::GanModel& local)> on_node_end;
};

// Holds the global model and one persistent local model per node. Node i's
// local model draws randomness from stream i, so a one-node federation
// replays plain training exactly.
class Federation {
public:
    Federation(gan::GanModel global, std::size_t node_count);

    // One pass over the nodes in `order`: copy global into the local model,
    // train on the node's silo, round to 32-bit, install as the new global.
    std::vector<gan::TrainLog> run_round(std::span<const data::PatientMatrix> silos,
                                         std::span<const std::uint64_t> budgets, std::span<const std::size_t> order,
                                         std::uint32_t round_index = 0, const FederationHooks& hooks = {});

    const gan::GanModel& global() const noexcept { return global_; }
    gan::GanModel& global() noexcept { return global_; }
    const gan::GanModel& local(std::size_t node) const { return locals_.at(node); }
    std::size_t node_count() const noexcept { return locals_.size(); }

private:
    gan::GanModel global_;
    std::vector<gan::GanModel> locals_;
};

// Single round with fresh local models and silo-index ordering.
gan::GanModel run_round(const gan::GanModel& global, std::span<const data::PatientMatrix> silos,
                        std::span<const std::uint64_t> budgets, const FederationHooks& hooks = {});

struct FederationResult {
    gan::GanModel global;
    std::vector<gan::TrainLog> logs;  // one per (round, node), in execution order
};

// Runs plan.rounds rounds over pre-split silos.
FederationResult run_federation(const FederationPlan& plan, std::span<const data::PatientMatrix> silos,
                                const FederationHooks& hooks = {});

// Partitions `data` into k silos with plan.shuffle_seed, then runs the plan.
FederationResult run_federation(const gan::GanConfig& config, const data::PatientMatrix& data, std::size_t k,
                                std::size_t rounds, std::uint64_t total_epochs, std::uint64_t shuffle_seed = 0);

}  // namespace fedtabgan::federation
