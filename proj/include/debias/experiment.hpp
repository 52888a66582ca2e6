#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "debias/datagen.hpp"
#include "debias/eval.hpp"
#include "debias/trainer.hpp"

namespace debias {

// Training defaults tuned for the synthetic desk dataset (see README).
TrainConfig desk_train_config();
// Dataset defaults: 2 classes, one binary bias at rho = 0.95, 2 core + 2 bias +
// 16 noise dims.
BiasSpec desk_bias_spec();

struct EvalConfig {
    bool probe = true;
    std::vector<std::string> layers{"block2"};
    ProbeOptions probe_options;

    friend bool operator==(const EvalConfig&, const EvalConfig&) = default;
};

struct ExperimentConfig {
    std::string preset = "paper";  // "paper" or "desk": base values for train
    BiasSpec dataset;
    SplitSizes sizes;
    std::uint64_t dataset_seed = 0;
    TrainConfig train;
    EvalConfig eval;
    std::filesystem::path output_dir = "debias_run";
    std::vector<TrainMode> comparisons{TrainMode::erm, TrainMode::debiasify};
    // When set, every seed replaces both dataset_seed and train.seed.
    std::vector<std::uint64_t> seeds;

    void validate() const;
};

// Throws validation_error naming the offending field.
ExperimentConfig experiment_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ExperimentConfig& c);
// Parses file text; JSON syntax errors report line and column.
ExperimentConfig load_experiment(const std::filesystem::path& path);

BiasedDataset make_dataset(const BiasSpec& spec, const SplitSizes& sizes, std::uint64_t seed);

struct RunSummary {
    std::uint64_t seed = 0;
    TrainMode mode = TrainMode::erm;
    GroupMetrics final_val;
    GroupMetrics final_test;
    GroupMetrics best_val;
    GroupMetrics best_test;
    std::size_t best_epoch = 0;
    std::vector<DecodabilityRow> decodability;
    double wall_seconds = 0.0;
};

// Probes every configured layer for every bias attribute on the val split.
std::vector<DecodabilityRow> probe_layers(const ExperimentConfig& config, const TrainConfig& train,
                                          const NetworkParams& params, const BiasedDataset& ds, std::uint64_t seed);

// Executes every (seed, mode) pair with up to `jobs` concurrent runs and writes
// artifacts below `output_dir`. Returns the per-run summaries in (seed, mode)
// order.
std::vector<RunSummary> run_experiment(const ExperimentConfig& config, const std::filesystem::path& output_dir,
                                       unsigned jobs = 1);

inline constexpr std::string_view sweep_axes[] = {"gamma",   "alpha",          "shallow_tap_block",
                                                  "fixed_K", "distance_kind", "recluster_every"};

// Applies one sweep value; throws validation_error on an unknown axis or a
// value of the wrong type.
void apply_axis(ExperimentConfig& config, std::string_view axis, std::string_view value);

// Command-line entry point: returns 0, 2 (config error) or 3 (runtime error).
int cli_main(int argc, char** argv);

}  // namespace debias
