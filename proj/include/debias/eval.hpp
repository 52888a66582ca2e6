#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "debias/datagen.hpp"
#include "debias/matrix.hpp"
#include "debias/rng.hpp"

namespace debias {

struct GroupAccuracy {
    int group_id = 0;
    int y = 0;
    std::vector<int> a;
    std::size_t count = 0;
    std::size_t correct = 0;
    double accuracy = 0.0;
};

struct GroupMetrics {
    std::vector<GroupAccuracy> groups;  // non-empty groups, ascending id
    std::vector<int> empty_groups;
    double unbiased_accuracy = 0.0;     // unweighted mean over non-empty groups
    double worst_group_accuracy = 0.0;
    double overall_accuracy = 0.0;      // sample-weighted, for reference
};

GroupMetrics group_metrics(std::span<const int> predictions, std::span<const int> labels,
                           std::span<const int> group_ids, const GroupLayout& layout);
GroupMetrics group_metrics(std::span<const int> predictions, const DatasetSlice& data);

nlohmann::json to_json(const GroupMetrics& m);
void write_group_csv(const GroupMetrics& m, const std::filesystem::path& path);

struct ProbeOptions {
    std::size_t max_steps = 500;
    double learning_rate = 0.1;
    double grad_tolerance = 1e-6;
    double train_fraction = 0.5;
};

struct ProbeResult {
    double accuracy = 0.0;        // on the balanced held-out split
    double train_accuracy = 0.0;
    std::size_t steps = 0;
    double final_grad_norm = 0.0;
    std::size_t train_size = 0;
    std::size_t holdout_size = 0;
    double learning_rate = 0.0;
};

// Affine + softmax probe on frozen features. Samples are split per label value
// into a train part and a held-out part, the held-out part truncated so every
// value has the same count. Features are standardized with train statistics;
// weights start at zero and follow full-batch gradient descent.
ProbeResult decodability_probe(const Matrix& features, std::span<const int> labels, SeededRng rng,
                               const ProbeOptions& options = {});

struct DecodabilityRow {
    std::string layer;
    std::string method;
    std::string attribute;
    double accuracy = 0.0;
    std::size_t steps = 0;
    double learning_rate = 0.0;
};

// Columns: layer, method, attribute, accuracy, steps, learning_rate.
void write_decodability_csv(const std::vector<DecodabilityRow>& rows, const std::filesystem::path& path);

}  // namespace debias
