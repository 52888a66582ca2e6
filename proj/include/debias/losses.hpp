#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "debias/matrix.hpp"
#include "debias/model.hpp"

namespace debias {

using Labels = std::vector<int>;

// Gaussian RBF kernel exp(-||a - b||^2 / (2 sigma^2)). An empty bandwidth
// selects the median heuristic: sigma = median pairwise Euclidean distance of
// the pooled samples (1 when that median is zero), held constant for gradients.
struct KernelSpec {
    std::optional<double> bandwidth;
};

enum class DistanceKind { mmd, gaussian_kl };

std::string_view to_string(DistanceKind kind) noexcept;
DistanceKind distance_kind_from_string(std::string_view name);

struct CeResult {
    double value = 0.0;
    Matrix grad;  // d value / d logits
};

// Batch mean of -log softmax(logits)[label].
CeResult cross_entropy(const Matrix& logits, std::span<const int> labels);

struct LossTerm {
    double value = 0.0;
    TapGradients grad;
};

// 1/2 (CE(c_s) + CE(c_d)); with several auxiliary branches the shallow
// cross-entropy is averaged over branches first.
LossTerm ace_loss(const TapOutputs& taps, std::span<const int> labels);

struct MmdResult {
    double value = 0.0;
    double bandwidth = 0.0;
    Matrix grad_x;
    Matrix grad_y;
};

// Biased (V-statistic) squared MMD. Symmetric in its arguments bit-for-bit.
MmdResult mmd2(const Matrix& x, const Matrix& y, const KernelSpec& kernel);

double median_heuristic_bandwidth(const Matrix& x, const Matrix& y);

struct DistanceResult {
    double value = 0.0;
    Matrix grad_x;
    Matrix grad_y;
};

// Symmetric KL divergence between diagonal Gaussians fitted to each set
// (biased variances plus `variance_floor`).
DistanceResult gaussian_symmetric_kl(const Matrix& x, const Matrix& y, double variance_floor = 1e-3);

struct AkdOptions {
    KernelSpec kernel;
    DistanceKind distance = DistanceKind::mmd;
    std::size_t min_cluster_batch = 2;
    bool detach_deep = false;
    double variance_floor = 1e-3;
};

struct AkdTerm {
    std::size_t tap = 0;
    int label = 0;
    int cluster = 0;
    std::size_t class_count = 0;
    std::size_t cluster_count = 0;
    double value = 0.0;
};

struct AkdDiagnostics {
    std::vector<AkdTerm> terms;
    std::size_t skipped_terms = 0;
};

struct AkdResult {
    double value = 0.0;
    TapGradients grad;
    AkdDiagnostics diagnostics;
};

// Sum over taps, classes y and clusters k of D^2(P_y, P_{k,y}) where P_y are the
// deep features of the batch's class-y samples and P_{k,y} the aligned shallow
// features of class-y samples in cluster k. `assignments[t][i]` is the cluster
// of sample i at tap t. Clusters with fewer than min_cluster_batch samples in
// the batch are skipped and counted.
AkdResult akd_loss(const TapOutputs& taps, std::span<const int> labels,
                   const std::vector<std::vector<int>>& assignments, const AkdOptions& options);

// Batch mean of KL(softmax(c_s) || softmax(c_d)), averaged over branches.
LossTerm kl_loss(const TapOutputs& taps, bool detach_deep = false);

struct HybridOptions {
    double alpha = 0.1;
    AkdOptions akd;
    bool use_kl = true;
    bool detach_deep_in_kl = false;
};

struct LossBreakdown {
    double l_ace = 0.0;
    double l_akd = 0.0;
    double l_kl = 0.0;
    double l_hybrid = 0.0;
    double alpha = 0.0;
    TapGradients ace_grad;
    TapGradients akd_grad;
    TapGradients kl_grad;
    TapGradients total_grad;
    AkdDiagnostics akd_diagnostics;
};

// L_ACE + alpha L_AKD + L_KL with the matching gradient.
LossBreakdown hybrid_loss(const TapOutputs& taps, std::span<const int> labels,
                          const std::vector<std::vector<int>>& assignments, const HybridOptions& options);

}  // namespace debias
