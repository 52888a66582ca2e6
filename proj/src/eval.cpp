#include "debias/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>

#include "debias/errors.hpp"
#include "debias/losses.hpp"

namespace debias {

GroupMetrics group_metrics(std::span<const int> predictions, std::span<const int> labels,
                           std::span<const int> group_ids, const GroupLayout& layout) {
    if (predictions.empty()) throw precondition_error("group_metrics: empty slice");
    if (predictions.size() != labels.size() || labels.size() != group_ids.size())
        throw shape_error("group_metrics: " + std::to_string(predictions.size()) + " predictions for " +
                          std::to_string(labels.size()) + " samples");
    const std::size_t g_count = layout.group_count();
    std::vector<std::size_t> count(g_count, 0), correct(g_count, 0);
    std::size_t total_correct = 0;
    for (std::size_t i = 0; i < predictions.size(); ++i) {
        const int g = group_ids[i];
        if (g < 0 || static_cast<std::size_t>(g) >= g_count)
            throw precondition_error("group_metrics: group id " + std::to_string(g) + " out of range");
        ++count[static_cast<std::size_t>(g)];
        if (predictions[i] == labels[i]) {
            ++correct[static_cast<std::size_t>(g)];
            ++total_correct;
        }
    }
    GroupMetrics m;
    double sum = 0.0;
    double worst = 1.0;
    for (std::size_t g = 0; g < g_count; ++g) {
        if (count[g] == 0) {
            m.empty_groups.push_back(static_cast<int>(g));
            continue;
        }
        auto [y, a] = layout.decode(static_cast<int>(g));
        GroupAccuracy row{static_cast<int>(g), y, std::move(a), count[g], correct[g],
                          static_cast<double>(correct[g]) / static_cast<double>(count[g])};
        sum += row.accuracy;
        worst = std::min(worst, row.accuracy);
        m.groups.push_back(std::move(row));
    }
    m.unbiased_accuracy = sum / static_cast<double>(m.groups.size());
    m.worst_group_accuracy = worst;
    m.overall_accuracy = static_cast<double>(total_correct) / static_cast<double>(predictions.size());
    return m;
}

GroupMetrics group_metrics(std::span<const int> predictions, const DatasetSlice& data) {
    return group_metrics(predictions, data.y, data.group_id, data.layout);
}

nlohmann::json to_json(const GroupMetrics& m) {
    nlohmann::json groups = nlohmann::json::array();
    for (const auto& g : m.groups)
        groups.push_back({{"group_id", g.group_id},
                          {"y", g.y},
                          {"a", g.a},
                          {"count", g.count},
                          {"correct", g.correct},
                          {"accuracy", g.accuracy}});
    return {{"groups", groups},
            {"empty_groups", m.empty_groups},
            {"unbiased_accuracy", m.unbiased_accuracy},
            {"worst_group_accuracy", m.worst_group_accuracy},
            {"overall_accuracy", m.overall_accuracy}};
}

void write_group_csv(const GroupMetrics& m, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
    out << "group_id,y,a,count,correct,accuracy\n";
    char buf[32];
    for (const auto& g : m.groups) {
        std::string a;
        for (std::size_t k = 0; k < g.a.size(); ++k) a += (k ? ":" : "") + std::to_string(g.a[k]);
        std::snprintf(buf, sizeof buf, "%.17g", g.accuracy);
        out << g.group_id << ',' << g.y << ',' << a << ',' << g.count << ',' << g.correct << ',' << buf << '\n';
    }
}

ProbeResult decodability_probe(const Matrix& features, std::span<const int> labels, SeededRng rng,
                               const ProbeOptions& options) {
    const std::size_t n = features.rows();
    if (labels.size() != n) throw shape_error("decodability_probe: label count mismatch");
    if (!(options.train_fraction > 0.0 && options.train_fraction < 1.0))
        throw precondition_error("decodability_probe: train_fraction must lie in (0, 1)");

    std::map<int, std::vector<std::size_t>> by_value;
    for (std::size_t i = 0; i < n; ++i) by_value[labels[i]].push_back(i);
    if (by_value.size() < 2) throw precondition_error("decodability_probe: need at least 2 distinct label values");

    std::vector<std::size_t> train_rows, holdout_rows;
    std::vector<int> train_y, holdout_y;
    std::vector<std::vector<std::size_t>> held(by_value.size());
    std::size_t min_held = n;
    int v = 0;
    for (auto& [value, rows] : by_value) {
        if (rows.size() < 2)
            throw precondition_error("decodability_probe: label value " + std::to_string(value) +
                                     " has fewer than 2 samples");
        const auto perm = rng.substream(static_cast<std::uint64_t>(v)).permutation(rows.size());
        auto k = static_cast<std::size_t>(std::floor(options.train_fraction * static_cast<double>(rows.size())));
        k = std::clamp<std::size_t>(k, 1, rows.size() - 1);
        for (std::size_t j = 0; j < rows.size(); ++j) {
            if (j < k) {
                train_rows.push_back(rows[perm[j]]);
                train_y.push_back(v);
            } else {
                held[static_cast<std::size_t>(v)].push_back(rows[perm[j]]);
            }
        }
        min_held = std::min(min_held, held[static_cast<std::size_t>(v)].size());
        ++v;
    }
    for (std::size_t c = 0; c < held.size(); ++c)
        for (std::size_t j = 0; j < min_held; ++j) {
            holdout_rows.push_back(held[c][j]);
            holdout_y.push_back(static_cast<int>(c));
        }

    const std::size_t classes = by_value.size();
    const std::size_t p = features.cols();
    Matrix xtr = gather_rows(features, train_rows);
    Matrix xho = gather_rows(features, holdout_rows);
    const Vector mean = column_means(xtr);
    Vector sd(p, 0.0);
    for (std::size_t i = 0; i < xtr.rows(); ++i)
        for (std::size_t d = 0; d < p; ++d) sd[d] += (xtr(i, d) - mean[d]) * (xtr(i, d) - mean[d]);
    for (double& s : sd) {
        s = std::sqrt(s / static_cast<double>(xtr.rows()));
        if (!(s > 0.0)) s = 1.0;
    }
    for (Matrix* m : {&xtr, &xho})
        for (std::size_t i = 0; i < m->rows(); ++i)
            for (std::size_t d = 0; d < p; ++d) (*m)(i, d) = ((*m)(i, d) - mean[d]) / sd[d];

    Matrix w(p, classes);
    Vector b(classes, 0.0);
    ProbeResult out;
    out.learning_rate = options.learning_rate;
    out.train_size = train_rows.size();
    out.holdout_size = holdout_rows.size();
    auto logits_of = [&](const Matrix& x) {
        Matrix z = matmul(x, w);
        add_row_vector(z, b);
        return z;
    };
    for (std::size_t step = 0; step <= options.max_steps; ++step) {
        const CeResult ce = cross_entropy(logits_of(xtr), train_y);
        const Matrix gw = matmul_tn(xtr, ce.grad);
        const Vector gb = column_sums(ce.grad);
        double norm2 = 0.0;
        for (double g : gw.data()) norm2 += g * g;
        for (double g : gb) norm2 += g * g;
        out.final_grad_norm = std::sqrt(norm2);
        if (out.final_grad_norm < options.grad_tolerance || step == options.max_steps) break;
        for (std::size_t k = 0; k < w.size(); ++k) w.data()[k] -= options.learning_rate * gw.data()[k];
        for (std::size_t k = 0; k < classes; ++k) b[k] -= options.learning_rate * gb[k];
        out.steps = step + 1;
    }
    auto accuracy = [](const Matrix& logits, const std::vector<int>& y) {
        std::size_t hit = 0;
        for (std::size_t i = 0; i < logits.rows(); ++i) {
            const auto r = logits.row(i);
            const auto arg = static_cast<int>(std::max_element(r.begin(), r.end()) - r.begin());
            hit += arg == y[i] ? 1 : 0;
        }
        return static_cast<double>(hit) / static_cast<double>(y.size());
    };
    out.accuracy = accuracy(logits_of(xho), holdout_y);
    out.train_accuracy = accuracy(logits_of(xtr), train_y);
    return out;
}

void write_decodability_csv(const std::vector<DecodabilityRow>& rows, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
    out << "layer,method,attribute,accuracy,steps,learning_rate\n";
    char acc[32], lr[32];
    for (const auto& r : rows) {
        std::snprintf(acc, sizeof acc, "%.17g", r.accuracy);
        std::snprintf(lr, sizeof lr, "%.17g", r.learning_rate);
        out << r.layer << ',' << r.method << ',' << r.attribute << ',' << acc << ',' << r.steps << ',' << lr << '\n';
    }
}

}  // namespace debias
