#include "debias/model.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "debias/errors.hpp"

namespace debias {

void NetworkConfig::validate() const {
    if (input_dim < 1) throw validation_error("network.input_dim must be >= 1");
    for (std::size_t w : block_widths)
        if (w < 1) throw validation_error("network.block_widths entries must be >= 1");
    if (num_classes < 2) throw validation_error("network.num_classes must be >= 2");
    if (shallow_taps.empty()) throw validation_error("network.shallow_taps must name at least one block");
    int prev = 0;
    for (int t : shallow_taps) {
        if (t < 1 || t > 3) throw validation_error("network.shallow_taps entries must lie in {1, 2, 3}");
        if (t <= prev) throw validation_error("network.shallow_taps must be strictly increasing");
        prev = t;
    }
}

void TapGradients::accumulate(const TapGradients& other, double scale) {
    auto add = [scale](Matrix& into, const Matrix& from) {
        if (from.empty()) return;
        if (into.empty()) {
            into = scale * from;
            return;
        }
        if (into.rows() != from.rows() || into.cols() != from.cols())
            throw shape_error("TapGradients::accumulate: shape mismatch");
        for (std::size_t i = 0; i < into.size(); ++i) into.data()[i] += scale * from.data()[i];
    };
    auto add_list = [&](std::vector<Matrix>& into, const std::vector<Matrix>& from) {
        if (into.size() < from.size()) into.resize(from.size());
        for (std::size_t i = 0; i < from.size(); ++i) add(into[i], from[i]);
    };
    add_list(shallow_features, other.shallow_features);
    add_list(shallow_logits, other.shallow_logits);
    add(deep_features, other.deep_features);
    add(deep_logits, other.deep_logits);
}

namespace {

Affine make_affine(std::size_t in, std::size_t out, SeededRng rng) {
    Affine a{Matrix(in, out), Vector(out, 0.0)};
    const double limit = 1.0 / std::sqrt(static_cast<double>(in));
    for (double& w : a.weight.data()) w = rng.uniform(-limit, limit);
    return a;
}

Affine zero_affine(const Affine& like) {
    return Affine{Matrix(like.weight.rows(), like.weight.cols()), Vector(like.bias.size(), 0.0)};
}

Matrix apply(const Affine& layer, const Matrix& x) {
    Matrix out = matmul(x, layer.weight);
    add_row_vector(out, layer.bias);
    return out;
}

Matrix relu(const Matrix& m) {
    Matrix out = m;
    for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
    return out;
}

void require(const Matrix& m, std::size_t rows, std::size_t cols, const std::string& what) {
    if (m.rows() != rows || m.cols() != cols)
        throw shape_error(what + ": expected " + std::to_string(rows) + "x" + std::to_string(cols) + ", got " +
                          std::to_string(m.rows()) + "x" + std::to_string(m.cols()));
}

void require_affine(const Affine& a, std::size_t in, std::size_t out, const std::string& what) {
    require(a.weight, in, out, what + ".weight");
    if (a.bias.size() != out) throw shape_error(what + ".bias: expected length " + std::to_string(out));
}

// Accumulates the gradient of an affine layer given dL/d(output); returns dL/d(input).
Matrix affine_backward(const Affine& layer, const Matrix& input, const Matrix& grad_out, Affine& grad) {
    grad.weight += matmul_tn(input, grad_out);
    const Vector db = column_sums(grad_out);
    for (std::size_t j = 0; j < db.size(); ++j) grad.bias[j] += db[j];
    return matmul_nt(grad_out, layer.weight);
}

int tap_index(const NetworkConfig& config, int block) {
    for (std::size_t i = 0; i < config.shallow_taps.size(); ++i)
        if (config.shallow_taps[i] == block) return static_cast<int>(i);
    return -1;
}

}  // namespace

NetworkParams init_params(const NetworkConfig& config, SeededRng rng) {
    config.validate();
    NetworkParams p;
    std::size_t in = config.input_dim;
    for (std::size_t b = 0; b < 4; ++b) {
        p.blocks[b] = make_affine(in, config.block_widths[b], rng.substream("block" + std::to_string(b + 1)));
        in = config.block_widths[b];
    }
    for (int tap : config.shallow_taps) {
        const std::string suffix = std::to_string(tap);
        p.branches.push_back(Branch{
            make_affine(config.tap_width(tap), config.deep_width(), rng.substream("align" + suffix)),
            make_affine(config.deep_width(), config.num_classes, rng.substream("shallow_classifier" + suffix)),
        });
    }
    p.deep_classifier = make_affine(config.deep_width(), config.num_classes, rng.substream("deep_classifier"));
    return p;
}

NetworkParams zeros_like(const NetworkParams& params) {
    NetworkParams z;
    for (std::size_t b = 0; b < 4; ++b) z.blocks[b] = zero_affine(params.blocks[b]);
    for (const auto& br : params.branches) z.branches.push_back(Branch{zero_affine(br.align), zero_affine(br.classifier)});
    z.deep_classifier = zero_affine(params.deep_classifier);
    return z;
}

void check_shapes(const NetworkConfig& config, const NetworkParams& params) {
    config.validate();
    std::size_t in = config.input_dim;
    for (std::size_t b = 0; b < 4; ++b) {
        require_affine(params.blocks[b], in, config.block_widths[b], "block" + std::to_string(b + 1));
        in = config.block_widths[b];
    }
    if (params.branches.size() != config.shallow_taps.size())
        throw shape_error("expected " + std::to_string(config.shallow_taps.size()) + " auxiliary branches, got " +
                          std::to_string(params.branches.size()));
    for (std::size_t i = 0; i < params.branches.size(); ++i) {
        const int tap = config.shallow_taps[i];
        require_affine(params.branches[i].align, config.tap_width(tap), config.deep_width(),
                       "align" + std::to_string(tap));
        require_affine(params.branches[i].classifier, config.deep_width(), config.num_classes,
                       "shallow_classifier" + std::to_string(tap));
    }
    require_affine(params.deep_classifier, config.deep_width(), config.num_classes, "deep_classifier");
}

ForwardTrace forward_trace(const NetworkConfig& config, const NetworkParams& params, const Matrix& x) {
    check_shapes(config, params);
    if (x.cols() != config.input_dim)
        throw shape_error("forward: input has " + std::to_string(x.cols()) + " columns, network expects " +
                          std::to_string(config.input_dim));
    ForwardTrace t;
    t.input = x;
    const Matrix* h = &t.input;
    for (std::size_t b = 0; b < 4; ++b) {
        t.pre[b] = apply(params.blocks[b], *h);
        t.post[b] = relu(t.pre[b]);
        h = &t.post[b];
    }
    for (std::size_t i = 0; i < config.shallow_taps.size(); ++i) {
        const Matrix& raw = t.post[static_cast<std::size_t>(config.shallow_taps[i] - 1)];
        t.taps.shallow_raw.push_back(raw);
        t.taps.shallow_features.push_back(apply(params.branches[i].align, raw));
        t.taps.shallow_logits.push_back(apply(params.branches[i].classifier, t.taps.shallow_features.back()));
    }
    t.taps.deep_features = t.post[3];
    t.taps.deep_logits = apply(params.deep_classifier, t.post[3]);
    return t;
}

TapOutputs forward(const NetworkConfig& config, const NetworkParams& params, const Matrix& x) {
    return forward_trace(config, params, x).taps;
}

Gradients backward(const NetworkConfig& config, const NetworkParams& params, const ForwardTrace& trace,
                   const TapGradients& upstream) {
    const std::size_t n = trace.input.rows();
    const std::size_t taps = config.shallow_taps.size();
    auto check_up = [&](const Matrix& g, std::size_t cols, const std::string& what) {
        if (!g.empty()) require(g, n, cols, "upstream " + what);
    };
    check_up(upstream.deep_features, config.deep_width(), "deep_features");
    check_up(upstream.deep_logits, config.num_classes, "deep_logits");
    if (upstream.shallow_features.size() > taps || upstream.shallow_logits.size() > taps)
        throw shape_error("upstream gradients name more taps than the network has");
    for (std::size_t i = 0; i < upstream.shallow_features.size(); ++i)
        check_up(upstream.shallow_features[i], config.deep_width(), "shallow_features");
    for (std::size_t i = 0; i < upstream.shallow_logits.size(); ++i)
        check_up(upstream.shallow_logits[i], config.num_classes, "shallow_logits");

    Gradients g = zeros_like(params);

    // d(block 4 output)
    Matrix grad_h(n, config.deep_width());
    if (!upstream.deep_features.empty()) grad_h += upstream.deep_features;
    if (!upstream.deep_logits.empty())
        grad_h += affine_backward(params.deep_classifier, trace.post[3], upstream.deep_logits, g.deep_classifier);

    for (int b = 3; b >= 0; --b) {
        const auto bi = static_cast<std::size_t>(b);
        // Branch contributions land on the block output before the ReLU mask.
        const int tap = tap_index(config, b + 1);
        if (tap >= 0) {
            const auto ti = static_cast<std::size_t>(tap);
            Matrix grad_aligned(n, config.deep_width());
            if (ti < upstream.shallow_features.size() && !upstream.shallow_features[ti].empty())
                grad_aligned += upstream.shallow_features[ti];
            if (ti < upstream.shallow_logits.size() && !upstream.shallow_logits[ti].empty())
                grad_aligned += affine_backward(params.branches[ti].classifier, trace.taps.shallow_features[ti],
                                                upstream.shallow_logits[ti], g.branches[ti].classifier);
            grad_h += affine_backward(params.branches[ti].align, trace.post[bi], grad_aligned, g.branches[ti].align);
        }
        for (std::size_t k = 0; k < grad_h.size(); ++k)
            if (trace.pre[bi].data()[k] <= 0.0) grad_h.data()[k] = 0.0;
        const Matrix& input = b == 0 ? trace.input : trace.post[bi - 1];
        Matrix grad_in = affine_backward(params.blocks[bi], input, grad_h, g.blocks[bi]);
        if (b > 0) grad_h = std::move(grad_in);
    }
    return g;
}

Gradients backward(const NetworkConfig& config, const NetworkParams& params, const Matrix& x,
                   const TapGradients& upstream) {
    return backward(config, params, forward_trace(config, params, x), upstream);
}

void for_each_array(NetworkParams& a, const NetworkParams& b,
                    const std::function<void(std::vector<double>&, const std::vector<double>&)>& fn) {
    auto visit = [&](Affine& x, const Affine& y) {
        fn(x.weight.data(), y.weight.data());
        fn(x.bias, y.bias);
    };
    for (std::size_t i = 0; i < 4; ++i) visit(a.blocks[i], b.blocks[i]);
    if (a.branches.size() != b.branches.size()) throw shape_error("for_each_array: branch count mismatch");
    for (std::size_t i = 0; i < a.branches.size(); ++i) {
        visit(a.branches[i].align, b.branches[i].align);
        visit(a.branches[i].classifier, b.branches[i].classifier);
    }
    visit(a.deep_classifier, b.deep_classifier);
}

void for_each_array(NetworkParams& a, const std::function<void(std::vector<double>&)>& fn) {
    auto visit = [&](Affine& x) {
        fn(x.weight.data());
        fn(x.bias);
    };
    for (auto& blk : a.blocks) visit(blk);
    for (auto& br : a.branches) {
        visit(br.align);
        visit(br.classifier);
    }
    visit(a.deep_classifier);
}

void for_each_array(const NetworkParams& a, const std::function<void(const std::vector<double>&)>& fn) {
    auto visit = [&](const Affine& x) {
        fn(x.weight.data());
        fn(x.bias);
    };
    for (const auto& blk : a.blocks) visit(blk);
    for (const auto& br : a.branches) {
        visit(br.align);
        visit(br.classifier);
    }
    visit(a.deep_classifier);
}

std::size_t parameter_count(const NetworkParams& params) {
    std::size_t n = 0;
    for_each_array(params, [&](const std::vector<double>& v) { n += v.size(); });
    return n;
}

bool all_finite(const NetworkParams& params) {
    bool ok = true;
    for_each_array(params, [&](const std::vector<double>& v) {
        ok = ok && std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
    });
    return ok;
}

}  // namespace debias
