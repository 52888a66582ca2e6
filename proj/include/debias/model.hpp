#pragma once

#include <array>
#include <cstddef>
#include <functional>
#include <vector>

#include "debias/matrix.hpp"
#include "debias/rng.hpp"

namespace debias {

// Four fully connected ReLU blocks with a deep classifier after block 4 and
// one auxiliary branch (alignment layer + shallow classifier) per shallow tap.
struct NetworkConfig {
    std::size_t input_dim = 20;
    std::array<std::size_t, 4> block_widths{32, 32, 32, 32};
    std::size_t num_classes = 2;
    // 1-based block indices, each in {1, 2, 3}, strictly increasing.
    std::vector<int> shallow_taps{2};

    std::size_t deep_width() const noexcept { return block_widths[3]; }
    std::size_t tap_width(int block) const { return block_widths.at(static_cast<std::size_t>(block - 1)); }
    void validate() const;

    friend bool operator==(const NetworkConfig&, const NetworkConfig&) = default;
};

// y = x · weight + bias, weight is (in x out).
struct Affine {
    Matrix weight;
    Vector bias;

    friend bool operator==(const Affine&, const Affine&) = default;
};

struct Branch {
    Affine align;       // tap width -> deep width, no activation
    Affine classifier;  // deep width -> classes

    friend bool operator==(const Branch&, const Branch&) = default;
};

struct NetworkParams {
    std::array<Affine, 4> blocks;
    std::vector<Branch> branches;  // one per shallow tap
    Affine deep_classifier;

    friend bool operator==(const NetworkParams&, const NetworkParams&) = default;
};

// Same layout as the parameters.
using Gradients = NetworkParams;

struct TapOutputs {
    std::vector<Matrix> shallow_raw;       // block output at each tap, pre-alignment
    std::vector<Matrix> shallow_features;  // aligned, n x deep width
    std::vector<Matrix> shallow_logits;    // c_s per branch
    Matrix deep_features;                  // block 4 output
    Matrix deep_logits;                    // c_d

    std::size_t batch_size() const noexcept { return deep_features.rows(); }
};

// Upstream gradient of a scalar loss w.r.t. TapOutputs. Empty matrices (or
// missing vector entries) stand for zero.
struct TapGradients {
    std::vector<Matrix> shallow_features;
    std::vector<Matrix> shallow_logits;
    Matrix deep_features;
    Matrix deep_logits;

    // this += scale * other; empty entries are treated as zero.
    void accumulate(const TapGradients& other, double scale = 1.0);
};

// Activations kept for the backward pass.
struct ForwardTrace {
    Matrix input;
    std::array<Matrix, 4> pre;   // pre-activation of each block
    std::array<Matrix, 4> post;  // ReLU output of each block
    TapOutputs taps;
};

NetworkParams init_params(const NetworkConfig& config, SeededRng rng);
NetworkParams zeros_like(const NetworkParams& params);

ForwardTrace forward_trace(const NetworkConfig& config, const NetworkParams& params, const Matrix& x);
TapOutputs forward(const NetworkConfig& config, const NetworkParams& params, const Matrix& x);

Gradients backward(const NetworkConfig& config, const NetworkParams& params, const ForwardTrace& trace,
                   const TapGradients& upstream);
Gradients backward(const NetworkConfig& config, const NetworkParams& params, const Matrix& x,
                   const TapGradients& upstream);

// Checks that params match the config's shapes; throws shape_error otherwise.
void check_shapes(const NetworkConfig& config, const NetworkParams& params);

// Visits every parameter array in a fixed order, paired with a congruent tree.
void for_each_array(NetworkParams& a, const NetworkParams& b,
                    const std::function<void(std::vector<double>&, const std::vector<double>&)>& fn);
void for_each_array(const NetworkParams& a, const std::function<void(const std::vector<double>&)>& fn);
void for_each_array(NetworkParams& a, const std::function<void(std::vector<double>&)>& fn);

std::size_t parameter_count(const NetworkParams& params);
bool all_finite(const NetworkParams& params);

}  // namespace debias
