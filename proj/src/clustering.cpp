#include "debias/clustering.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <string>

#include <json.hpp>

#include "debias/errors.hpp"

namespace debias {

int nearest_centroid(const Matrix& centroids, std::span<const double> point) {
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < centroids.rows(); ++c) {
        const double d = squared_distance(centroids.row(c), point);
        if (d < best_d) {
            best_d = d;
            best = static_cast<int>(c);
        }
    }
    return best;
}

double kmeans_objective(const Matrix& x, std::span<const int> assignments, std::size_t k) {
    Matrix sums(k, x.cols());
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < x.rows(); ++i) {
        const auto c = static_cast<std::size_t>(assignments[i]);
        ++counts[c];
        for (std::size_t d = 0; d < x.cols(); ++d) sums(c, d) += x(i, d);
    }
    for (std::size_t c = 0; c < k; ++c)
        if (counts[c] > 0)
            for (std::size_t d = 0; d < x.cols(); ++d) sums(c, d) /= static_cast<double>(counts[c]);
    double total = 0.0;
    for (std::size_t i = 0; i < x.rows(); ++i)
        total += squared_distance(x.row(i), sums.row(static_cast<std::size_t>(assignments[i])));
    return total;
}

namespace {

Matrix plus_plus_seeds(const Matrix& x, std::size_t k, SeededRng& rng) {
    const std::size_t n = x.rows();
    Matrix centroids(k, x.cols());
    std::size_t first = rng.uniform_int(n);
    std::copy(x.row(first).begin(), x.row(first).end(), centroids.row(0).begin());
    std::vector<double> d2(n);
    for (std::size_t i = 0; i < n; ++i) d2[i] = squared_distance(x.row(i), centroids.row(0));
    for (std::size_t c = 1; c < k; ++c) {
        double total = 0.0;
        for (double v : d2) total += v;
        std::size_t pick = 0;
        if (total > 0.0) {
            const double target = rng.uniform() * total;
            double acc = 0.0;
            pick = n - 1;
            for (std::size_t i = 0; i < n; ++i) {
                acc += d2[i];
                if (acc > target && d2[i] > 0.0) {
                    pick = i;
                    break;
                }
            }
        } else {
            pick = rng.uniform_int(n);
        }
        std::copy(x.row(pick).begin(), x.row(pick).end(), centroids.row(c).begin());
        for (std::size_t i = 0; i < n; ++i) d2[i] = std::min(d2[i], squared_distance(x.row(i), centroids.row(c)));
    }
    return centroids;
}

struct LloydRun {
    Matrix centroids;
    std::vector<int> assignments;
    double objective = 0.0;
    std::size_t iterations = 0;
    std::vector<double> trace;
};

double assign_all(const Matrix& x, const Matrix& centroids, std::vector<int>& assignments) {
    double obj = 0.0;
    for (std::size_t i = 0; i < x.rows(); ++i) {
        assignments[i] = nearest_centroid(centroids, x.row(i));
        obj += squared_distance(x.row(i), centroids.row(static_cast<std::size_t>(assignments[i])));
    }
    return obj;
}

LloydRun lloyd(const Matrix& x, std::size_t k, SeededRng rng, std::size_t max_iters) {
    const std::size_t n = x.rows();
    const std::size_t p = x.cols();
    LloydRun run;
    run.centroids = plus_plus_seeds(x, k, rng);
    run.assignments.assign(n, 0);
    run.objective = assign_all(x, run.centroids, run.assignments);
    run.trace.push_back(run.objective);

    std::vector<std::size_t> counts(k);
    for (std::size_t it = 0; it < max_iters; ++it) {
        run.iterations = it + 1;
        // update step
        Matrix sums(k, p);
        std::fill(counts.begin(), counts.end(), 0);
        for (std::size_t i = 0; i < n; ++i) {
            const auto c = static_cast<std::size_t>(run.assignments[i]);
            ++counts[c];
            for (std::size_t d = 0; d < p; ++d) sums(c, d) += x(i, d);
        }
        for (std::size_t c = 0; c < k; ++c) {
            if (counts[c] == 0) continue;
            for (std::size_t d = 0; d < p; ++d) run.centroids(c, d) = sums(c, d) / static_cast<double>(counts[c]);
        }
        // empty clusters take the point farthest from its centroid
        for (std::size_t c = 0; c < k; ++c) {
            if (counts[c] != 0) continue;
            std::size_t far = 0;
            double far_d = -1.0;
            for (std::size_t i = 0; i < n; ++i) {
                const auto ci = static_cast<std::size_t>(run.assignments[i]);
                if (counts[ci] <= 1) continue;
                const double d = squared_distance(x.row(i), run.centroids.row(ci));
                if (d > far_d) {
                    far_d = d;
                    far = i;
                }
            }
            --counts[static_cast<std::size_t>(run.assignments[far])];
            run.assignments[far] = static_cast<int>(c);
            counts[c] = 1;
            std::copy(x.row(far).begin(), x.row(far).end(), run.centroids.row(c).begin());
        }
        std::vector<int> next(n);
        const double obj = assign_all(x, run.centroids, next);
        run.trace.push_back(obj);
        const bool changed = next != run.assignments;
        run.assignments = std::move(next);
        run.objective = obj;
        if (!changed) break;
    }
    return run;
}

}  // namespace

KmeansResult kmeans_fit(const Matrix& x, std::size_t k, SeededRng rng, std::size_t restarts, std::size_t max_iters) {
    const std::size_t n = x.rows();
    if (k < 1) throw precondition_error("kmeans_fit: K must be >= 1");
    if (n < k) throw precondition_error("kmeans_fit: " + std::to_string(n) + " samples for K = " + std::to_string(k));
    if (restarts < 1) throw precondition_error("kmeans_fit: restarts must be >= 1");

    KmeansResult best;
    bool have = false;
    for (std::size_t r = 0; r < restarts; ++r) {
        LloydRun run = lloyd(x, k, rng.substream(r), max_iters);
        if (!have || run.objective < best.objective) {
            have = true;
            best.centroids = std::move(run.centroids);
            best.assignments = std::move(run.assignments);
            best.objective = run.objective;
            best.iterations = run.iterations;
            best.best_restart = r;
            best.objective_trace = std::move(run.trace);
        }
    }
    best.mean_within_cluster_variance = best.objective / (static_cast<double>(n) * static_cast<double>(x.cols()));
    return best;
}

AdaptiveKResult adaptive_k(const Matrix& x, double gamma, std::size_t k_max, SeededRng rng, std::size_t restarts,
                           std::size_t max_iters) {
    if (x.rows() == 0) throw precondition_error("adaptive_k: empty input");
    if (!(gamma > 0.0)) throw precondition_error("adaptive_k: gamma must be > 0");
    if (k_max < 1) throw precondition_error("adaptive_k: K_max must be >= 1");
    const std::size_t limit = std::min(k_max, x.rows());
    AdaptiveKResult out;
    for (std::size_t k = 1; k <= limit; ++k) {
        out.fit = kmeans_fit(x, k, rng.substream(k), restarts, max_iters);
        out.variances.push_back(out.fit.mean_within_cluster_variance);
        out.chosen_k = k;
        if (out.fit.mean_within_cluster_variance < gamma) return out;
    }
    out.cap_reached = true;
    return out;
}

std::string_view to_string(ClusterNormalization n) noexcept { return n == ClusterNormalization::l2 ? "l2" : "rms"; }

ClusterNormalization cluster_normalization_from_string(std::string_view name) {
    if (name == "l2") return ClusterNormalization::l2;
    if (name == "rms") return ClusterNormalization::rms;
    throw validation_error("unknown cluster normalization '" + std::string(name) + "' (expected l2 or rms)");
}

const ClassClusters& ClusterModel::for_label(int label) const {
    for (const auto& c : classes)
        if (c.label == label) return c;
    throw precondition_error("cluster model has no class " + std::to_string(label));
}

std::vector<std::size_t> ClusterModel::k_per_class() const {
    std::vector<std::size_t> out;
    for (const auto& c : classes) out.push_back(c.chosen_k);
    return out;
}

namespace {

void l2_normalize_rows(Matrix& z) {
    for (std::size_t i = 0; i < z.rows(); ++i) {
        auto r = z.row(i);
        double s = 0.0;
        for (double v : r) s += v * v;
        if (s > 0.0) {
            const double inv = 1.0 / std::sqrt(s);
            for (double& v : r) v *= inv;
        }
    }
}

double rms_norm(const Matrix& z) {
    double s = 0.0;
    for (double v : z.data()) s += v * v;
    const double rms = std::sqrt(s / static_cast<double>(std::max<std::size_t>(z.rows(), 1)));
    return rms > 0.0 ? rms : 1.0;
}

}  // namespace

Matrix normalized_projection(const ClassClusters& cls, ClusterNormalization normalization, const Matrix& features) {
    Matrix z = pca_transform(cls.pca, features);
    if (normalization == ClusterNormalization::l2) {
        l2_normalize_rows(z);
    } else {
        const double inv = 1.0 / cls.scale;
        for (double& v : z.data()) v *= inv;
    }
    return z;
}

ClusterModel build_cluster_model(const Matrix& features, std::span<const int> labels, const ClusterOptions& options,
                                 const SeededRng& rng) {
    if (labels.size() != features.rows()) throw shape_error("build_cluster_model: label count mismatch");
    if (!(options.gamma > 0.0)) throw precondition_error("build_cluster_model: gamma must be > 0");
    if (options.fixed_k && *options.fixed_k < 1) throw precondition_error("build_cluster_model: fixed K must be >= 1");

    std::map<int, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);

    ClusterModel model;
    model.gamma = options.gamma;
    model.normalization = options.normalization;
    model.assignments.assign(labels.size(), 0);

    for (const auto& [label, rows] : by_class) {
        if (rows.size() < 2) throw degenerate_class_error(label, rows.size());
        const Matrix xc = gather_rows(features, rows);
        ClassClusters cls;
        cls.label = label;
        std::size_t dims = std::min<std::size_t>({32, rows.size() - 1, features.cols()});
        if (options.pca_dims) dims = std::min(*options.pca_dims, std::min(rows.size() - 1, features.cols()));
        cls.pca = pca_fit(xc, RetainedDims{std::max<std::size_t>(dims, 1)});
        if (options.normalization == ClusterNormalization::rms) cls.scale = rms_norm(pca_transform(cls.pca, xc));
        const Matrix z = normalized_projection(cls, options.normalization, xc);

        const SeededRng class_rng = rng.substream(static_cast<std::uint64_t>(static_cast<std::int64_t>(label)));
        KmeansResult fit;
        if (options.fixed_k) {
            const std::size_t k = std::min(*options.fixed_k, rows.size());
            fit = kmeans_fit(z, k, class_rng.substream(k), options.restarts, options.max_iters);
            cls.chosen_k = k;
            cls.variances.push_back(fit.mean_within_cluster_variance);
        } else {
            AdaptiveKResult ak = adaptive_k(z, options.gamma, options.k_max, class_rng, options.restarts,
                                            options.max_iters);
            fit = std::move(ak.fit);
            cls.chosen_k = ak.chosen_k;
            cls.cap_reached = ak.cap_reached;
            cls.variances = std::move(ak.variances);
        }
        cls.centroids = std::move(fit.centroids);
        for (std::size_t j = 0; j < rows.size(); ++j) model.assignments[rows[j]] = fit.assignments[j];
        model.classes.push_back(std::move(cls));
    }
    return model;
}

std::vector<int> assign(const ClusterModel& model, const Matrix& features, std::span<const int> labels) {
    if (labels.size() != features.rows()) throw shape_error("assign: label count mismatch");
    std::vector<int> out(labels.size(), 0);
    std::map<int, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);
    for (const auto& [label, rows] : by_class) {
        const ClassClusters& cls = model.for_label(label);
        const Matrix z = normalized_projection(cls, model.normalization, gather_rows(features, rows));
        for (std::size_t j = 0; j < rows.size(); ++j) out[rows[j]] = nearest_centroid(cls.centroids, z.row(j));
    }
    return out;
}

nlohmann::json to_json(const ClusterModel& model) {
    auto mat = [](const Matrix& m) {
        return nlohmann::json{{"rows", m.rows()}, {"cols", m.cols()}, {"data", m.data()}};
    };
    nlohmann::json classes = nlohmann::json::array();
    for (const auto& c : model.classes) {
        classes.push_back({{"label", c.label},
                           {"chosen_k", c.chosen_k},
                           {"cap_reached", c.cap_reached},
                           {"variances", c.variances},
                           {"scale", c.scale},
                           {"centroids", mat(c.centroids)},
                           {"pca",
                            {{"mean", c.pca.mean},
                             {"basis", mat(c.pca.basis)},
                             {"retained_dims", c.pca.retained_dims},
                             {"explained_variance_ratio", c.pca.explained_variance_ratio}}}});
    }
    return {{"gamma", model.gamma},
            {"normalization", std::string(to_string(model.normalization))},
            {"classes", classes},
            {"assignments", model.assignments}};
}

ClusterModel cluster_model_from_json(const nlohmann::json& j) {
    auto mat = [](const nlohmann::json& m) {
        return Matrix(m.at("rows").get<std::size_t>(), m.at("cols").get<std::size_t>(),
                      m.at("data").get<std::vector<double>>());
    };
    ClusterModel model;
    model.gamma = j.at("gamma").get<double>();
    model.normalization = cluster_normalization_from_string(j.at("normalization").get<std::string>());
    model.assignments = j.at("assignments").get<std::vector<int>>();
    for (const auto& c : j.at("classes")) {
        ClassClusters cls;
        cls.label = c.at("label").get<int>();
        cls.chosen_k = c.at("chosen_k").get<std::size_t>();
        cls.cap_reached = c.at("cap_reached").get<bool>();
        cls.variances = c.at("variances").get<std::vector<double>>();
        cls.scale = c.at("scale").get<double>();
        cls.centroids = mat(c.at("centroids"));
        const auto& p = c.at("pca");
        cls.pca.mean = p.at("mean").get<Vector>();
        cls.pca.basis = mat(p.at("basis"));
        cls.pca.retained_dims = p.at("retained_dims").get<std::size_t>();
        cls.pca.explained_variance_ratio = p.at("explained_variance_ratio").get<double>();
        model.classes.push_back(std::move(cls));
    }
    return model;
}

}  // namespace debias
