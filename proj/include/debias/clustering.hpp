#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "debias/matrix.hpp"
#include "debias/pca.hpp"
#include "debias/rng.hpp"

namespace debias {

struct KmeansResult {
    Matrix centroids;              // K x p
    std::vector<int> assignments;  // nearest centroid, ties to the lowest index
    double objective = 0.0;        // sum of squared distances to assigned centroids
    double mean_within_cluster_variance = 0.0;  // objective / (n p)
    std::size_t iterations = 0;
    std::size_t best_restart = 0;
    // Objective after every assignment step of the winning restart.
    std::vector<double> objective_trace;
};

// Lloyd's algorithm with k-means++ seeding; best of `restarts` runs by
// objective. Clusters that go empty are re-seeded with the point farthest
// from its centroid.
KmeansResult kmeans_fit(const Matrix& x, std::size_t k, SeededRng rng, std::size_t restarts = 10,
                        std::size_t max_iters = 100);

// Sum of squared distances from each row to the mean of its cluster.
double kmeans_objective(const Matrix& x, std::span<const int> assignments, std::size_t k);

// Index of the nearest centroid; ties go to the lowest index.
int nearest_centroid(const Matrix& centroids, std::span<const double> point);

struct AdaptiveKResult {
    std::size_t chosen_k = 1;
    bool cap_reached = false;
    std::vector<double> variances;  // variance for K = 1, 2, ..., chosen_k
    KmeansResult fit;
};

// Smallest K in 1..K_max whose mean within-cluster variance is below gamma;
// K_max (flagged) when none qualifies. K is capped at the sample count.
AdaptiveKResult adaptive_k(const Matrix& x, double gamma, std::size_t k_max, SeededRng rng,
                           std::size_t restarts = 10, std::size_t max_iters = 100);

enum class ClusterNormalization {
    l2,   // each projected sample scaled to unit norm
    rms,  // all projections of a class divided by their root-mean-square norm
};

std::string_view to_string(ClusterNormalization n) noexcept;
ClusterNormalization cluster_normalization_from_string(std::string_view name);

struct ClusterOptions {
    double gamma = 0.02;
    std::size_t k_max = 16;
    std::optional<std::size_t> fixed_k;       // bypasses the adaptive rule
    std::optional<std::size_t> pca_dims;      // default min(32, n_y - 1, d)
    ClusterNormalization normalization = ClusterNormalization::l2;
    std::size_t restarts = 10;
    std::size_t max_iters = 100;

    friend bool operator==(const ClusterOptions&, const ClusterOptions&) = default;
};

struct ClassClusters {
    int label = 0;
    PcaModel pca;
    double scale = 1.0;  // rms normalization divisor (unused for l2)
    Matrix centroids;
    std::size_t chosen_k = 1;
    bool cap_reached = false;
    std::vector<double> variances;
};

struct ClusterModel {
    std::vector<ClassClusters> classes;  // ascending label
    double gamma = 0.0;
    ClusterNormalization normalization = ClusterNormalization::l2;
    std::vector<int> assignments;  // per training sample, in input order

    const ClassClusters& for_label(int label) const;
    std::vector<std::size_t> k_per_class() const;
};

// Per class: PCA on that class's features, normalize, choose K, record the
// assignment of every sample.
ClusterModel build_cluster_model(const Matrix& features, std::span<const int> labels, const ClusterOptions& options,
                                 const SeededRng& rng);

// Projects and normalizes rows the same way the model was built.
Matrix normalized_projection(const ClassClusters& cls, ClusterNormalization normalization, const Matrix& features);

// Nearest-centroid cluster of every row in its class's normalized PCA space.
std::vector<int> assign(const ClusterModel& model, const Matrix& features, std::span<const int> labels);

nlohmann::json to_json(const ClusterModel& model);
ClusterModel cluster_model_from_json(const nlohmann::json& j);

}  // namespace debias
