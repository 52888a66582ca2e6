#include "debias/losses.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <string>

#include "debias/errors.hpp"

namespace debias {

std::string_view to_string(DistanceKind kind) noexcept {
    return kind == DistanceKind::mmd ? "mmd" : "gaussian_kl";
}

DistanceKind distance_kind_from_string(std::string_view name) {
    if (name == "mmd") return DistanceKind::mmd;
    if (name == "gaussian_kl") return DistanceKind::gaussian_kl;
    throw validation_error("unknown distance kind '" + std::string(name) + "' (expected mmd or gaussian_kl)");
}

namespace {

void log_softmax_row(std::span<const double> logits, std::span<double> out) {
    const double mx = *std::max_element(logits.begin(), logits.end());
    double s = 0.0;
    for (double v : logits) s += std::exp(v - mx);
    const double lse = mx + std::log(s);
    for (std::size_t c = 0; c < logits.size(); ++c) out[c] = logits[c] - lse;
}

// Lexicographic order on (rows, cols, data); fixes the evaluation order of
// symmetric two-set functions.
bool canonical_less(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows()) return a.rows() < b.rows();
    if (a.cols() != b.cols()) return a.cols() < b.cols();
    return std::lexicographical_compare(a.data().begin(), a.data().end(), b.data().begin(), b.data().end());
}

double kernel_block_sum(const Matrix& a, const Matrix& b, double inv_two_sigma2) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < b.rows(); ++j) s += std::exp(-squared_distance(a.row(i), b.row(j)) * inv_two_sigma2);
    return s;
}

MmdResult mmd2_ordered(const Matrix& x, const Matrix& y, double sigma) {
    const std::size_t m = x.rows();
    const std::size_t r = y.rows();
    const std::size_t p = x.cols();
    const double inv_two_sigma2 = 1.0 / (2.0 * sigma * sigma);
    const double inv_sigma2 = 1.0 / (sigma * sigma);
    const double mm = static_cast<double>(m) * static_cast<double>(m);
    const double rr = static_cast<double>(r) * static_cast<double>(r);
    const double mr = static_cast<double>(m) * static_cast<double>(r);

    MmdResult out;
    out.bandwidth = sigma;
    out.grad_x = Matrix(m, p);
    out.grad_y = Matrix(r, p);

    const double kxx = kernel_block_sum(x, x, inv_two_sigma2);
    const double kyy = kernel_block_sum(y, y, inv_two_sigma2);
    const double kxy = kernel_block_sum(x, y, inv_two_sigma2);
    out.value = kxx / mm + kyy / rr - 2.0 * kxy / mr;

    // d k(a, b) / d a = -k(a, b) (a - b) / sigma^2
    for (std::size_t i = 0; i < m; ++i) {
        auto gi = out.grad_x.row(i);
        for (std::size_t j = 0; j < m; ++j) {
            if (i == j) continue;
            const double k = std::exp(-squared_distance(x.row(i), x.row(j)) * inv_two_sigma2);
            const double w = -2.0 * k * inv_sigma2 / mm;
            for (std::size_t d = 0; d < p; ++d) gi[d] += w * (x(i, d) - x(j, d));
        }
        for (std::size_t j = 0; j < r; ++j) {
            const double k = std::exp(-squared_distance(x.row(i), y.row(j)) * inv_two_sigma2);
            const double w = 2.0 * k * inv_sigma2 / mr;
            auto gj = out.grad_y.row(j);
            for (std::size_t d = 0; d < p; ++d) {
                const double diff = x(i, d) - y(j, d);
                gi[d] += w * diff;
                gj[d] -= w * diff;
            }
        }
    }
    for (std::size_t i = 0; i < r; ++i) {
        auto gi = out.grad_y.row(i);
        for (std::size_t j = 0; j < r; ++j) {
            if (i == j) continue;
            const double k = std::exp(-squared_distance(y.row(i), y.row(j)) * inv_two_sigma2);
            const double w = -2.0 * k * inv_sigma2 / rr;
            for (std::size_t d = 0; d < p; ++d) gi[d] += w * (y(i, d) - y(j, d));
        }
    }
    return out;
}

struct DiagGaussian {
    Vector mean;
    Vector var;
};

DiagGaussian fit_diag(const Matrix& x, double floor) {
    DiagGaussian g{column_means(x), Vector(x.cols(), 0.0)};
    for (std::size_t i = 0; i < x.rows(); ++i)
        for (std::size_t d = 0; d < x.cols(); ++d) {
            const double c = x(i, d) - g.mean[d];
            g.var[d] += c * c;
        }
    for (double& v : g.var) v = v / static_cast<double>(x.rows()) + floor;
    return g;
}

}  // namespace

CeResult cross_entropy(const Matrix& logits, std::span<const int> labels) {
    const std::size_t n = logits.rows();
    const std::size_t classes = logits.cols();
    if (n == 0) throw precondition_error("cross_entropy: empty batch");
    if (labels.size() != n)
        throw shape_error("cross_entropy: " + std::to_string(labels.size()) + " labels for " + std::to_string(n) +
                          " rows");
    CeResult out;
    out.grad = Matrix(n, classes);
    Vector logp(classes);
    const double inv_n = 1.0 / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
        const int y = labels[i];
        if (y < 0 || static_cast<std::size_t>(y) >= classes)
            throw precondition_error("cross_entropy: label " + std::to_string(y) + " outside [0, " +
                                     std::to_string(classes) + ")");
        log_softmax_row(logits.row(i), logp);
        out.value -= logp[static_cast<std::size_t>(y)];
        auto g = out.grad.row(i);
        for (std::size_t c = 0; c < classes; ++c) g[c] = std::exp(logp[c]) * inv_n;
        g[static_cast<std::size_t>(y)] -= inv_n;
    }
    out.value *= inv_n;
    return out;
}

LossTerm ace_loss(const TapOutputs& taps, std::span<const int> labels) {
    LossTerm out;
    const std::size_t branches = taps.shallow_logits.size();
    if (branches == 0) throw shape_error("ace_loss: no shallow classifier outputs");
    const double shallow_weight = 0.5 / static_cast<double>(branches);
    out.grad.shallow_logits.resize(branches);
    for (std::size_t b = 0; b < branches; ++b) {
        CeResult ce = cross_entropy(taps.shallow_logits[b], labels);
        out.value += shallow_weight * ce.value;
        out.grad.shallow_logits[b] = shallow_weight * ce.grad;
    }
    CeResult deep = cross_entropy(taps.deep_logits, labels);
    out.value += 0.5 * deep.value;
    out.grad.deep_logits = 0.5 * deep.grad;
    return out;
}

double median_heuristic_bandwidth(const Matrix& x, const Matrix& y) {
    std::vector<const Matrix*> sets{&x, &y};
    std::vector<std::span<const double>> rows;
    rows.reserve(x.rows() + y.rows());
    for (const Matrix* s : sets)
        for (std::size_t i = 0; i < s->rows(); ++i) rows.push_back(s->row(i));
    std::vector<double> d;
    d.reserve(rows.size() * (rows.size() - 1) / 2);
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t j = i + 1; j < rows.size(); ++j) d.push_back(std::sqrt(squared_distance(rows[i], rows[j])));
    if (d.empty()) return 1.0;
    std::sort(d.begin(), d.end());
    const std::size_t h = d.size() / 2;
    const double med = d.size() % 2 == 1 ? d[h] : 0.5 * (d[h - 1] + d[h]);
    return med > 0.0 ? med : 1.0;
}

MmdResult mmd2(const Matrix& x, const Matrix& y, const KernelSpec& kernel) {
    if (x.rows() == 0 || y.rows() == 0) throw precondition_error("mmd2: both sample sets must be non-empty");
    if (x.cols() != y.cols())
        throw shape_error("mmd2: dimension mismatch " + std::to_string(x.cols()) + " vs " + std::to_string(y.cols()));
    double sigma = 0.0;
    if (kernel.bandwidth) {
        sigma = *kernel.bandwidth;
        if (!(sigma > 0.0)) throw precondition_error("mmd2: bandwidth must be positive");
    } else {
        sigma = median_heuristic_bandwidth(x, y);
    }
    if (canonical_less(y, x)) {
        MmdResult swapped = mmd2_ordered(y, x, sigma);
        std::swap(swapped.grad_x, swapped.grad_y);
        return swapped;
    }
    return mmd2_ordered(x, y, sigma);
}

DistanceResult gaussian_symmetric_kl(const Matrix& x, const Matrix& y, double variance_floor) {
    if (x.rows() == 0 || y.rows() == 0) throw precondition_error("gaussian_symmetric_kl: empty sample set");
    if (x.cols() != y.cols()) throw shape_error("gaussian_symmetric_kl: dimension mismatch");
    if (!(variance_floor > 0.0)) throw precondition_error("gaussian_symmetric_kl: variance floor must be positive");
    const DiagGaussian gx = fit_diag(x, variance_floor);
    const DiagGaussian gy = fit_diag(y, variance_floor);
    const std::size_t p = x.cols();

    DistanceResult out;
    out.grad_x = Matrix(x.rows(), p);
    out.grad_y = Matrix(y.rows(), p);
    Vector dmx(p), dvx(p), dmy(p), dvy(p);
    for (std::size_t d = 0; d < p; ++d) {
        const double v1 = gx.var[d];
        const double v2 = gy.var[d];
        const double dm = gx.mean[d] - gy.mean[d];
        const double inv_sum = 1.0 / v1 + 1.0 / v2;
        out.value += 0.5 * (v1 / v2 + v2 / v1 - 2.0 + dm * dm * inv_sum);
        dmx[d] = dm * inv_sum;
        dmy[d] = -dm * inv_sum;
        dvx[d] = 0.5 * (1.0 / v2 - v2 / (v1 * v1) - dm * dm / (v1 * v1));
        dvy[d] = 0.5 * (1.0 / v1 - v1 / (v2 * v2) - dm * dm / (v2 * v2));
    }
    auto fill = [p](const Matrix& s, const DiagGaussian& g, const Vector& dm, const Vector& dv, Matrix& grad) {
        const double inv_n = 1.0 / static_cast<double>(s.rows());
        for (std::size_t i = 0; i < s.rows(); ++i)
            for (std::size_t d = 0; d < p; ++d)
                grad(i, d) = dm[d] * inv_n + dv[d] * 2.0 * (s(i, d) - g.mean[d]) * inv_n;
    };
    fill(x, gx, dmx, dvx, out.grad_x);
    fill(y, gy, dmy, dvy, out.grad_y);
    return out;
}

AkdResult akd_loss(const TapOutputs& taps, std::span<const int> labels,
                   const std::vector<std::vector<int>>& assignments, const AkdOptions& options) {
    const std::size_t n = taps.batch_size();
    const std::size_t ntaps = taps.shallow_features.size();
    if (labels.size() != n) throw shape_error("akd_loss: label count does not match batch");
    if (assignments.size() != ntaps)
        throw shape_error("akd_loss: expected assignments for " + std::to_string(ntaps) + " tap(s), got " +
                          std::to_string(assignments.size()));
    for (const auto& a : assignments)
        if (a.size() != n) throw precondition_error("akd_loss: every batch sample needs a cluster assignment");
    const std::size_t min_count = std::max<std::size_t>(options.min_cluster_batch, 1);

    AkdResult out;
    out.grad.shallow_features.resize(ntaps);
    for (std::size_t t = 0; t < ntaps; ++t) out.grad.shallow_features[t] = Matrix(n, taps.shallow_features[t].cols());
    if (!options.detach_deep) out.grad.deep_features = Matrix(n, taps.deep_features.cols());

    std::map<int, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < n; ++i) by_class[labels[i]].push_back(i);

    for (std::size_t t = 0; t < ntaps; ++t) {
        for (const auto& [label, class_rows] : by_class) {
            std::map<int, std::vector<std::size_t>> by_cluster;
            for (std::size_t i : class_rows) by_cluster[assignments[t][i]].push_back(i);
            const Matrix deep = gather_rows(taps.deep_features, class_rows);
            for (const auto& [cluster, rows] : by_cluster) {
                if (rows.size() < min_count) {
                    ++out.diagnostics.skipped_terms;
                    continue;
                }
                const Matrix shallow = gather_rows(taps.shallow_features[t], rows);
                Matrix g_deep, g_shallow;
                double value = 0.0;
                if (options.distance == DistanceKind::mmd) {
                    MmdResult r = mmd2(deep, shallow, options.kernel);
                    value = r.value;
                    g_deep = std::move(r.grad_x);
                    g_shallow = std::move(r.grad_y);
                } else {
                    DistanceResult r = gaussian_symmetric_kl(deep, shallow, options.variance_floor);
                    value = r.value;
                    g_deep = std::move(r.grad_x);
                    g_shallow = std::move(r.grad_y);
                }
                out.value += value;
                out.diagnostics.terms.push_back(AkdTerm{t, label, cluster, class_rows.size(), rows.size(), value});
                for (std::size_t k = 0; k < rows.size(); ++k) {
                    auto dst = out.grad.shallow_features[t].row(rows[k]);
                    auto src = g_shallow.row(k);
                    for (std::size_t d = 0; d < dst.size(); ++d) dst[d] += src[d];
                }
                if (!options.detach_deep) {
                    for (std::size_t k = 0; k < class_rows.size(); ++k) {
                        auto dst = out.grad.deep_features.row(class_rows[k]);
                        auto src = g_deep.row(k);
                        for (std::size_t d = 0; d < dst.size(); ++d) dst[d] += src[d];
                    }
                }
            }
        }
    }
    return out;
}

LossTerm kl_loss(const TapOutputs& taps, bool detach_deep) {
    const std::size_t branches = taps.shallow_logits.size();
    if (branches == 0) throw shape_error("kl_loss: no shallow classifier outputs");
    const Matrix& deep = taps.deep_logits;
    const std::size_t n = deep.rows();
    const std::size_t classes = deep.cols();
    if (n == 0) throw precondition_error("kl_loss: empty batch");

    LossTerm out;
    out.grad.shallow_logits.resize(branches);
    if (!detach_deep) out.grad.deep_logits = Matrix(n, classes);
    const double scale = 1.0 / (static_cast<double>(n) * static_cast<double>(branches));
    Vector lp(classes), lq(classes);
    for (std::size_t b = 0; b < branches; ++b) {
        const Matrix& shallow = taps.shallow_logits[b];
        if (shallow.rows() != n || shallow.cols() != classes)
            throw shape_error("kl_loss: shallow and deep logits differ in shape");
        out.grad.shallow_logits[b] = Matrix(n, classes);
        for (std::size_t i = 0; i < n; ++i) {
            log_softmax_row(shallow.row(i), lp);
            log_softmax_row(deep.row(i), lq);
            double kl = 0.0;
            for (std::size_t c = 0; c < classes; ++c) kl += std::exp(lp[c]) * (lp[c] - lq[c]);
            out.value += scale * kl;
            auto gs = out.grad.shallow_logits[b].row(i);
            for (std::size_t c = 0; c < classes; ++c) {
                const double pc = std::exp(lp[c]);
                gs[c] = scale * pc * ((lp[c] - lq[c]) - kl);
            }
            if (!detach_deep) {
                auto gd = out.grad.deep_logits.row(i);
                for (std::size_t c = 0; c < classes; ++c) gd[c] += scale * (std::exp(lq[c]) - std::exp(lp[c]));
            }
        }
    }
    return out;
}

LossBreakdown hybrid_loss(const TapOutputs& taps, std::span<const int> labels,
                          const std::vector<std::vector<int>>& assignments, const HybridOptions& options) {
    if (!(options.alpha >= 0.0)) throw precondition_error("hybrid_loss: alpha must be >= 0");
    LossBreakdown out;
    out.alpha = options.alpha;

    LossTerm ace = ace_loss(taps, labels);
    out.l_ace = ace.value;
    out.ace_grad = std::move(ace.grad);

    AkdResult akd = akd_loss(taps, labels, assignments, options.akd);
    out.l_akd = akd.value;
    out.akd_grad = std::move(akd.grad);
    out.akd_diagnostics = std::move(akd.diagnostics);

    if (options.use_kl) {
        LossTerm kl = kl_loss(taps, options.detach_deep_in_kl);
        out.l_kl = kl.value;
        out.kl_grad = std::move(kl.grad);
    }

    out.l_hybrid = out.l_ace + options.alpha * out.l_akd + out.l_kl;
    out.total_grad = out.ace_grad;
    if (options.alpha != 0.0) out.total_grad.accumulate(out.akd_grad, options.alpha);
    if (options.use_kl) out.total_grad.accumulate(out.kl_grad);
    return out;
}

}  // namespace debias
