#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "debias/clustering.hpp"
#include "debias/datagen.hpp"
#include "debias/eval.hpp"
#include "debias/losses.hpp"
#include "debias/model.hpp"

namespace debias {

enum class TrainMode {
    erm,        // deep classifier cross-entropy only, no clustering
    debiasify,  // warm-up on L_ACE, cluster, then L_hybrid
    ace,        // L_ACE for every epoch
};

enum class AssignmentMode {
    nearest,  // nearest centroid on the current batch features
    frozen,   // the assignment recorded when the cluster model was built
};

enum class ClusterSource {
    aligned,  // alignment-layer output
    raw,      // block output at the tap, before alignment
};

std::string_view to_string(TrainMode m) noexcept;
std::string_view to_string(AssignmentMode m) noexcept;
std::string_view to_string(ClusterSource s) noexcept;
TrainMode train_mode_from_string(std::string_view s);
AssignmentMode assignment_mode_from_string(std::string_view s);
ClusterSource cluster_source_from_string(std::string_view s);

struct TrainConfig {
    TrainMode mode = TrainMode::debiasify;
    NetworkConfig network;
    std::size_t warmup_epochs = 5;
    std::size_t total_epochs = 50;
    std::size_t batch_size = 100;
    double learning_rate = 1e-4;
    double weight_decay = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double alpha = 0.1;
    ClusterOptions cluster;
    ClusterSource cluster_source = ClusterSource::aligned;
    AssignmentMode assignment = AssignmentMode::nearest;
    std::size_t recluster_every = 0;
    bool use_kl = true;
    bool detach_deep_in_akd = false;
    bool detach_deep_in_kl = false;
    DistanceKind distance = DistanceKind::mmd;
    std::optional<double> kernel_bandwidth;  // empty = median heuristic
    std::size_t min_cluster_batch = 2;
    std::uint64_t seed = 0;

    void validate() const;
    HybridOptions hybrid_options() const;

    friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

nlohmann::json to_json(const TrainConfig& c);
// Strict: unknown keys and wrong types throw validation_error naming the field.
// Missing keys keep the values already in `base`.
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});

struct AdamState {
    NetworkParams m;
    NetworkParams v;
    std::uint64_t step = 0;

    friend bool operator==(const AdamState&, const AdamState&) = default;
};

AdamState adam_init(const NetworkParams& params);
// Adam with decoupled weight decay: p <- p (1 - lr wd), then the moment update.
void adam_step(NetworkParams& params, const Gradients& grads, AdamState& state, const TrainConfig& config);

struct EpochRecord {
    std::size_t epoch = 0;  // 1-based
    double l_ace = 0.0;
    double l_akd = 0.0;
    double l_kl = 0.0;
    double l_hybrid = 0.0;
    double alpha = 0.0;
    double val_unbiased_acc = 0.0;
    double val_worst_group_acc = 0.0;
    std::vector<std::vector<std::size_t>> k_per_class;  // per tap; empty before clustering
    std::size_t skipped_terms = 0;

    friend bool operator==(const EpochRecord&, const EpochRecord&) = default;
};

struct ClusterEvent {
    std::size_t epoch = 0;  // clustering ran before this 1-based epoch
    std::vector<std::vector<std::size_t>> k_per_class;
    std::vector<std::vector<bool>> cap_reached;

    friend bool operator==(const ClusterEvent&, const ClusterEvent&) = default;
};

struct RunRecord {
    std::uint64_t seed = 0;
    TrainMode mode = TrainMode::debiasify;
    std::vector<EpochRecord> epochs;
    std::vector<ClusterEvent> cluster_events;
    NetworkParams final_params;
    NetworkParams best_params;
    std::size_t best_epoch = 0;
    GroupMetrics final_val;
    GroupMetrics final_test;
    GroupMetrics best_val;
    GroupMetrics best_test;
    std::vector<ClusterModel> cluster_models;  // latest, one per tap
    std::optional<std::filesystem::path> checkpoint;
    double wall_seconds = 0.0;
    bool completed = true;  // false when stopped early by TrainOptions
};

struct TrainOptions {
    std::optional<std::filesystem::path> checkpoint_path;
    std::size_t checkpoint_every = 0;  // epochs; 0 = only at the end when a path is given
    std::optional<std::size_t> stop_after_epoch;
    std::optional<std::filesystem::path> resume_from;
};

RunRecord train(const TrainConfig& config, const BiasedDataset& ds, const TrainOptions& options = {});

// Argmax of the deep logits, ties to the lowest class.
std::vector<int> predict(const NetworkConfig& network, const NetworkParams& params, const Matrix& x);

// Activations by layer name: "block1".."block4", or "aligned<b>" for the
// alignment output of the branch at block b.
Matrix layer_activations(const NetworkConfig& network, const NetworkParams& params, const Matrix& x,
                         std::string_view layer);

void write_metrics_jsonl(const RunRecord& record, const std::filesystem::path& path);
nlohmann::json to_json(const EpochRecord& e);

inline constexpr int checkpoint_format_version = 1;

nlohmann::json params_to_json(const NetworkParams& p);
NetworkParams params_from_json(const nlohmann::json& j);

void save_checkpoint(const NetworkParams& params, const TrainConfig& config, const std::filesystem::path& path);
struct LoadedCheckpoint {
    NetworkParams params;
    TrainConfig config;
};
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace debias
