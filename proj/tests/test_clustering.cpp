#include <doctest.h>

#include <cmath>
#include <limits>
#include <map>

#include "debias/clustering.hpp"
#include "debias/errors.hpp"

using namespace debias;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, SeededRng rng, double scale = 1.0) {
    Matrix m(r, c);
    for (double& v : m.data()) v = scale * rng.normal();
    return m;
}

double partition_cost(const Matrix& x, const std::vector<int>& label, std::size_t k) {
    double total = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
        std::vector<double> mean(x.cols(), 0.0);
        double count = 0.0;
        for (std::size_t i = 0; i < x.rows(); ++i)
            if (label[i] == static_cast<int>(c)) {
                for (std::size_t j = 0; j < x.cols(); ++j) mean[j] += x(i, j);
                count += 1.0;
            }
        if (count == 0.0) continue;
        for (double& v : mean) v /= count;
        for (std::size_t i = 0; i < x.rows(); ++i)
            if (label[i] == static_cast<int>(c))
                for (std::size_t j = 0; j < x.cols(); ++j) total += (x(i, j) - mean[j]) * (x(i, j) - mean[j]);
    }
    return total;
}

// Minimum within-cluster sum of squares over every labelling with at most k
// clusters (an empty cluster never lowers the optimum below a non-empty split).
double exhaustive_optimum(const Matrix& x, std::size_t k) {
    const std::size_t n = x.rows();
    std::vector<int> label(n, 0);
    double best = std::numeric_limits<double>::infinity();
    while (true) {
        best = std::min(best, partition_cost(x, label, k));
        std::size_t i = 0;
        while (i < n && label[i] == static_cast<int>(k) - 1) label[i++] = 0;
        if (i == n) break;
        ++label[i];
    }
    return best;
}

double choose2(double n) { return n * (n - 1.0) / 2.0; }

double adjusted_rand_index(const std::vector<int>& a, const std::vector<int>& b) {
    std::map<std::pair<int, int>, double> cells;
    std::map<int, double> ra, rb;
    for (std::size_t i = 0; i < a.size(); ++i) {
        cells[{a[i], b[i]}] += 1;
        ra[a[i]] += 1;
        rb[b[i]] += 1;
    }
    double index = 0.0, sa = 0.0, sb = 0.0;
    for (const auto& [_, c] : cells) index += choose2(c);
    for (const auto& [_, c] : ra) sa += choose2(c);
    for (const auto& [_, c] : rb) sb += choose2(c);
    const double expected = sa * sb / choose2(static_cast<double>(a.size()));
    return (index - expected) / (0.5 * (sa + sb) - expected);
}

}  // namespace

TEST_CASE("k = 1: the centroid is the column mean, variance is the per-dimension variance") {
    const Matrix x{{1, 2}, {3, 6}, {5, 10}};
    const KmeansResult r = kmeans_fit(x, 1, SeededRng(0));
    CHECK(r.centroids(0, 0) == doctest::Approx(3.0));
    CHECK(r.centroids(0, 1) == doctest::Approx(6.0));
    // per-dimension biased variances 8/3 and 32/3
    CHECK(r.mean_within_cluster_variance == doctest::Approx((8.0 / 3.0 + 32.0 / 3.0) / 2.0));
}

TEST_CASE("two separated pairs in 1-D") {
    const Matrix x{{0}, {0}, {10}, {10}};
    const KmeansResult r = kmeans_fit(x, 2, SeededRng(1));
    const double lo = std::min(r.centroids(0, 0), r.centroids(1, 0));
    const double hi = std::max(r.centroids(0, 0), r.centroids(1, 0));
    CHECK(lo == 0.0);
    CHECK(hi == 10.0);
    CHECK(r.objective == 0.0);
    CHECK(r.mean_within_cluster_variance == 0.0);
    CHECK(r.assignments[0] == r.assignments[1]);
    CHECK(r.assignments[2] == r.assignments[3]);
    CHECK(r.assignments[0] != r.assignments[2]);
}

TEST_CASE("eight points in two tight blobs reach the exhaustive optimum") {
    Matrix x(8, 2);
    SeededRng rng(2);
    for (std::size_t i = 0; i < 8; ++i) {
        x(i, 0) = (i < 4 ? -5.0 : 5.0) + 0.1 * rng.normal();
        x(i, 1) = 0.1 * rng.normal();
    }
    const KmeansResult r = kmeans_fit(x, 2, SeededRng(3), 10);
    CHECK(r.objective == doctest::Approx(exhaustive_optimum(x, 2)).epsilon(1e-12));
}

TEST_CASE("random small instances: best of 50 restarts equals the exhaustive optimum") {
    SeededRng rng(4);
    for (int t = 0; t < 20; ++t) {
        const std::size_t n = 4 + rng.uniform_int(5), k = 2 + rng.uniform_int(2);
        const Matrix x = random_matrix(n, 2, rng.substream(t));
        const KmeansResult r = kmeans_fit(x, k, rng.substream(t).substream("fit"), 50);
        CHECK(r.objective == doctest::Approx(exhaustive_optimum(x, k)).epsilon(1e-10));
        CHECK(r.objective == doctest::Approx(kmeans_objective(x, r.assignments, k)).epsilon(1e-12));
    }
}

TEST_CASE("objective never increases across Lloyd iterations") {
    for (std::uint64_t s = 0; s < 10; ++s) {
        const Matrix x = random_matrix(60, 3, SeededRng(100 + s));
        const KmeansResult r = kmeans_fit(x, 4, SeededRng(200 + s), 3);
        REQUIRE_FALSE(r.objective_trace.empty());
        for (std::size_t i = 1; i < r.objective_trace.size(); ++i)
            CHECK(r.objective_trace[i] <= r.objective_trace[i - 1] + 1e-12);
        CHECK(r.objective_trace.back() == doctest::Approx(r.objective));
    }
}

TEST_CASE("kmeans errors and determinism") {
    CHECK_THROWS_AS(kmeans_fit(Matrix(2, 1), 3, SeededRng(0)), precondition_error);
    const Matrix x = random_matrix(30, 2, SeededRng(5));
    const KmeansResult a = kmeans_fit(x, 3, SeededRng(6));
    const KmeansResult b = kmeans_fit(x, 3, SeededRng(6));
    CHECK(a.centroids == b.centroids);
    CHECK(a.assignments == b.assignments);
    CHECK(a.objective == b.objective);
}

TEST_CASE("adaptive K: hand cases") {
    const Matrix x{{-1}, {-1}, {1}, {1}};
    const AdaptiveKResult two = adaptive_k(x, 0.5, 16, SeededRng(7));
    CHECK(two.chosen_k == 2);
    REQUIRE(two.variances.size() == 2);
    CHECK(two.variances[0] == doctest::Approx(1.0));
    CHECK(two.variances[1] == 0.0);
    CHECK_FALSE(two.cap_reached);
    CHECK(adaptive_k(x, 2.0, 16, SeededRng(7)).chosen_k == 1);

    const AdaptiveKResult same = adaptive_k(Matrix(5, 3, 0.7), 1e-6, 16, SeededRng(8));
    CHECK(same.chosen_k == 1);

    CHECK_THROWS_AS(adaptive_k(Matrix(0, 2), 0.5, 4, SeededRng(0)), precondition_error);
}

TEST_CASE("adaptive K picks the smallest qualifying K and flags the cap") {
    for (std::uint64_t s = 0; s < 5; ++s) {
        const Matrix x = random_matrix(40, 2, SeededRng(300 + s));
        const double gamma = 0.1;
        const AdaptiveKResult r = adaptive_k(x, gamma, 6, SeededRng(400 + s));
        REQUIRE(r.variances.size() == r.chosen_k);
        for (std::size_t k = 0; k + 1 < r.chosen_k; ++k) CHECK(r.variances[k] >= gamma);
        CHECK((r.variances.back() < gamma || (r.chosen_k == 6 && r.cap_reached)));
    }
    const Matrix spread = random_matrix(9, 2, SeededRng(9));
    const AdaptiveKResult capped = adaptive_k(spread, 1e-9, 3, SeededRng(10));
    CHECK(capped.chosen_k == 3);
    CHECK(capped.cap_reached);
    // the sample count caps K: three distinct points split into singletons
    const AdaptiveKResult three = adaptive_k(random_matrix(3, 2, SeededRng(19)), 1e-9, 16, SeededRng(10));
    CHECK(three.chosen_k == 3);
    CHECK(three.variances.back() == 0.0);
}

TEST_CASE("cluster model: one tight blob per class and large gamma give one cluster") {
    const std::size_t n = 40;
    Matrix x = random_matrix(n, 5, SeededRng(11), 0.01);
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) {
        y[i] = static_cast<int>(i % 2);
        x(i, 0) += y[i] ? 3.0 : -3.0;
    }
    ClusterOptions opt;
    opt.gamma = 10.0;
    const ClusterModel m = build_cluster_model(x, y, opt, SeededRng(12));
    CHECK(m.k_per_class() == std::vector<std::size_t>{1, 1});
    for (int a : m.assignments) CHECK(a == 0);
}

TEST_CASE("cluster model recovers engineered bias blobs inside each class") {
    const std::size_t n = 80;
    Matrix x = random_matrix(n, 6, SeededRng(13), 0.05);
    std::vector<int> y(n), bias(n);
    for (std::size_t i = 0; i < n; ++i) {
        y[i] = static_cast<int>(i % 2);
        bias[i] = static_cast<int>((i / 2) % 2);
        x(i, 0) += y[i] ? 4.0 : -4.0;
        x(i, 1) += bias[i] ? 2.0 : -2.0;
    }
    // L2-normalized projections: within-blob variance is tiny, one cluster
    // leaves the two antipodal blobs at per-dimension variance well above 0.02.
    ClusterOptions opt;
    opt.gamma = 0.02;
    const ClusterModel m = build_cluster_model(x, y, opt, SeededRng(14));
    CHECK(m.k_per_class() == std::vector<std::size_t>{2, 2});
    for (int label : {0, 1}) {
        std::vector<int> got, truth;
        for (std::size_t i = 0; i < n; ++i)
            if (y[i] == label) {
                got.push_back(m.assignments[i]);
                truth.push_back(bias[i]);
            }
        CHECK(adjusted_rand_index(got, truth) == doctest::Approx(1.0));
    }
    // training samples re-assign to their stored clusters
    CHECK(assign(m, x, y) == m.assignments);
    // a centroid maps to itself
    for (const auto& cls : m.classes)
        for (std::size_t c = 0; c < cls.centroids.rows(); ++c)
            CHECK(nearest_centroid(cls.centroids, cls.centroids.row(c)) == static_cast<int>(c));

    opt.normalization = ClusterNormalization::rms;
    const ClusterModel rms = build_cluster_model(x, y, opt, SeededRng(14));
    CHECK(rms.k_per_class() == std::vector<std::size_t>{2, 2});
}

TEST_CASE("nearest centroid ties go to the lowest index") {
    const Matrix c{{0, 0}, {2, 0}, {1, 5}};
    const double mid[] = {1, 0};
    CHECK(nearest_centroid(c, mid) == 0);
    const Matrix d{{2, 0}, {0, 0}};
    CHECK(nearest_centroid(d, mid) == 0);
}

TEST_CASE("cluster model errors") {
    const Matrix x = random_matrix(5, 3, SeededRng(15));
    const std::vector<int> y{0, 0, 0, 0, 1};
    try {
        build_cluster_model(x, y, ClusterOptions{}, SeededRng(16));
        FAIL("expected degenerate_class_error");
    } catch (const degenerate_class_error& e) {
        CHECK(e.label == 1);
        CHECK(e.count == 1);
        CHECK(std::string(e.what()).find("1") != std::string::npos);
    }
    const std::vector<int> ok{0, 0, 1, 1, 1};
    const ClusterModel m = build_cluster_model(x, ok, ClusterOptions{}, SeededRng(16));
    CHECK_THROWS(assign(m, x, std::vector<int>{0, 0, 1, 1, 2}));
}

TEST_CASE("cluster model is deterministic and survives a json round trip") {
    const std::size_t n = 60;
    const Matrix x = random_matrix(n, 8, SeededRng(17));
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) y[i] = static_cast<int>(i % 3);
    ClusterOptions opt;
    opt.gamma = 0.05;
    const ClusterModel a = build_cluster_model(x, y, opt, SeededRng(18));
    const ClusterModel b = build_cluster_model(x, y, opt, SeededRng(18));
    CHECK(a.assignments == b.assignments);
    CHECK(a.k_per_class() == b.k_per_class());
    for (std::size_t c = 0; c < 3; ++c) CHECK(a.classes[c].centroids == b.classes[c].centroids);

    const ClusterModel back = cluster_model_from_json(to_json(a));
    CHECK(back.assignments == a.assignments);
    CHECK(assign(back, x, y) == assign(a, x, y));

    ClusterOptions fixed = opt;
    fixed.fixed_k = 3;
    CHECK(build_cluster_model(x, y, fixed, SeededRng(18)).k_per_class() == std::vector<std::size_t>{3, 3, 3});
}
