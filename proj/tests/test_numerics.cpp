#include <doctest.h>

#include <cmath>
#include <set>

#include "debias/errors.hpp"
#include "debias/matrix.hpp"
#include "debias/pca.hpp"
#include "debias/rng.hpp"

using namespace debias;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, SeededRng rng) {
    Matrix m(r, c);
    for (double& v : m.data()) v = rng.normal();
    return m;
}

double naive_dot(const Matrix& a, std::size_t i, const Matrix& b, std::size_t j) {
    double s = 0.0;
    for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
    return s;
}

}  // namespace

TEST_CASE("matrix products agree with index loops") {
    const Matrix a = random_matrix(5, 3, SeededRng(1));
    const Matrix b = random_matrix(3, 4, SeededRng(2));
    const Matrix ab = matmul(a, b);
    REQUIRE(ab.rows() == 5);
    REQUIRE(ab.cols() == 4);
    for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t j = 0; j < 4; ++j) CHECK(ab(i, j) == doctest::Approx(naive_dot(a, i, b, j)).epsilon(1e-14));
    CHECK(max_abs_diff(matmul_tn(transpose(a), b), ab) < 1e-14);
    CHECK(max_abs_diff(matmul_nt(a, transpose(b)), ab) < 1e-14);
    CHECK_THROWS_AS(matmul(a, a), shape_error);
}

TEST_CASE("row helpers") {
    Matrix m{{1, 2}, {3, 4}, {5, 6}};
    CHECK(column_sums(m) == Vector{9, 12});
    CHECK(column_means(m) == Vector{3, 4});
    const std::size_t idx[] = {2, 0};
    CHECK(gather_rows(m, idx) == Matrix{{5, 6}, {1, 2}});
    add_row_vector(m, Vector{1, -1});
    CHECK(m == Matrix{{2, 1}, {4, 3}, {6, 5}});
    CHECK(squared_distance(m.row(0), m.row(1)) == 8.0);
    CHECK(m.all_finite());
    m(0, 0) = std::nan("");
    CHECK_FALSE(m.all_finite());
}

TEST_CASE("rng: identical seeds give identical streams") {
    SeededRng a(42), b(42);
    for (int i = 0; i < 1000; ++i) REQUIRE(a.next_u64() == b.next_u64());
    CHECK(SeededRng::algorithm == "splitmix64-ctr");
}

TEST_CASE("rng: named substreams differ and do not advance the parent") {
    const SeededRng root(7);
    SeededRng data = root.substream("data");
    SeededRng init = root.substream("init");
    SeededRng clus = root.substream("clustering");
    std::vector<std::uint64_t> sd, si, sc;
    for (int i = 0; i < 1000; ++i) {
        sd.push_back(data.next_u64());
        si.push_back(init.next_u64());
        sc.push_back(clus.next_u64());
    }
    CHECK(sd != si);
    CHECK(sd != sc);
    CHECK(si != sc);
    // no shared values at all across the first 1000 draws
    std::set<std::uint64_t> seen(sd.begin(), sd.end());
    for (auto v : si) CHECK(seen.count(v) == 0);
    CHECK(root.counter() == 0);
    SeededRng again = root.substream("data");
    CHECK(again.next_u64() == sd.front());
}

TEST_CASE("rng: first outputs follow the documented construction") {
    SeededRng r(0);
    const std::uint64_t key = splitmix64_mix(0x6A09E667F3BCC909ULL);
    CHECK(r.key() == key);
    CHECK(r.next_u64() == splitmix64_mix(key + 0x9E3779B97F4A7C15ULL));
    CHECK(r.next_u64() == splitmix64_mix(key + 2 * 0x9E3779B97F4A7C15ULL));
    // FNV-1a reference value for "a"
    CHECK(hash_name("a") == 0xaf63dc4c8601ec8cULL);
}

TEST_CASE("rng: uniform, integer and normal draws stay in range and look right") {
    SeededRng r(3);
    double sum = 0.0, sum2 = 0.0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
        const double u = r.uniform();
        REQUIRE(u >= 0.0);
        REQUIRE(u < 1.0);
        REQUIRE(r.uniform_int(7) < 7);
        const double z = r.normal();
        sum += z;
        sum2 += z * z;
    }
    CHECK(std::abs(sum / n) < 0.05);
    CHECK(std::abs(sum2 / n - 1.0) < 0.05);
    auto p = r.permutation(50);
    std::set<std::size_t> s(p.begin(), p.end());
    CHECK(s.size() == 50);
    CHECK(*s.rbegin() == 49);
}

TEST_CASE("pca: line in 2-D keeps all variance on one axis") {
    Matrix x(100, 2);
    for (std::size_t i = 0; i < 100; ++i) x(i, 0) = static_cast<double>(i) - 49.5;
    const PcaModel m = pca_fit(x, RetainedDims{1});
    CHECK(m.explained_variance_ratio == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(std::abs(std::abs(m.basis(0, 0)) - 1.0) < 1e-12);
    CHECK(std::abs(m.basis(1, 0)) < 1e-12);
}

TEST_CASE("pca: identical rows project to zero") {
    Matrix x(6, 3, 2.5);
    const PcaModel m = pca_fit(x, RetainedDims{2});
    const Matrix z = pca_transform(m, x);
    for (double v : z.data()) CHECK(v == 0.0);
}

TEST_CASE("pca: four-point set matches the hand eigendecomposition") {
    const Matrix x{{1, 0}, {-1, 0}, {0, 0.1}, {0, -0.1}};
    // covariance = diag(2/3, 0.02/3): eigenvalues 2/3 and 0.02/3
    const PcaModel m = pca_fit(x, RetainedDims{1});
    CHECK(std::abs(std::abs(m.basis(0, 0)) - 1.0) < 1e-12);
    CHECK(m.explained_variance_ratio == doctest::Approx(1.0 / 1.01).epsilon(1e-12));
    const Matrix z = pca_transform(m, x);
    const double sign = z(0, 0) > 0 ? 1.0 : -1.0;
    CHECK(sign * z(0, 0) == doctest::Approx(1.0));
    CHECK(sign * z(1, 0) == doctest::Approx(-1.0));
    CHECK(std::abs(z(2, 0)) < 1e-12);
    CHECK(std::abs(z(3, 0)) < 1e-12);
}

TEST_CASE("pca: projections of the fit data are centered; identity model is a no-op") {
    const Matrix x = random_matrix(40, 5, SeededRng(11));
    const PcaModel m = pca_fit(x, RetainedDims{3});
    const Vector means = column_means(pca_transform(m, x));
    for (double v : means) CHECK(std::abs(v) < 1e-8);

    PcaModel id;
    id.mean = Vector(5, 0.0);
    id.basis = identity(5);
    id.retained_dims = 5;
    CHECK(pca_transform(id, x) == x);
}

TEST_CASE("pca: basis is orthonormal, ratio grows and error shrinks with retained dims") {
    const Matrix x = random_matrix(30, 6, SeededRng(5));
    double prev_ratio = 0.0;
    double prev_err = 1e300;
    for (std::size_t k = 1; k <= 6; ++k) {
        const PcaModel m = pca_fit(x, RetainedDims{k});
        const Matrix g = matmul_tn(m.basis, m.basis);
        CHECK(max_abs_diff(g, identity(k)) < 1e-8);
        CHECK(m.explained_variance_ratio >= prev_ratio - 1e-15);
        const double err = [&] {
            const Matrix r = pca_inverse_transform(m, pca_transform(m, x));
            double e = 0.0;
            for (std::size_t i = 0; i < r.size(); ++i) e += (r.data()[i] - x.data()[i]) * (r.data()[i] - x.data()[i]);
            return e;
        }();
        CHECK(err <= prev_err + 1e-9);
        prev_ratio = m.explained_variance_ratio;
        prev_err = err;
        if (k == 6) CHECK(err < 1e-16 * 1e8);
    }
    const PcaModel full = pca_fit(x, RetainedDims{6});
    CHECK(max_abs_diff(pca_inverse_transform(full, pca_transform(full, x)), x) < 1e-8);
}

TEST_CASE("pca: variance-ratio target and error cases") {
    const Matrix x = random_matrix(30, 4, SeededRng(9));
    const PcaModel m = pca_fit(x, MinVarianceRatio{0.5});
    CHECK(m.explained_variance_ratio >= 0.5);
    if (m.retained_dims > 1) {
        const PcaModel fewer = pca_fit(x, RetainedDims{m.retained_dims - 1});
        CHECK(fewer.explained_variance_ratio < 0.5);
    }
    const PcaModel flat = pca_fit(Matrix(5, 3, 1.0), MinVarianceRatio{0.9});
    CHECK(flat.retained_dims == 1);
    CHECK(flat.explained_variance_ratio == 1.0);

    CHECK_THROWS_AS(pca_fit(Matrix(1, 3), RetainedDims{1}), precondition_error);
    CHECK_THROWS_AS(pca_fit(x, RetainedDims{5}), precondition_error);
    CHECK_THROWS_AS(pca_transform(m, Matrix(2, 3)), shape_error);
}

TEST_CASE("pca: deterministic bit-for-bit") {
    const Matrix x = random_matrix(25, 4, SeededRng(21));
    const PcaModel a = pca_fit(x, RetainedDims{2});
    const PcaModel b = pca_fit(x, RetainedDims{2});
    CHECK(a.basis == b.basis);
    CHECK(pca_transform(a, x) == pca_transform(b, x));
}
