#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <map>

#include "debias/datagen.hpp"
#include "debias/errors.hpp"
#include "debias/experiment.hpp"

using namespace debias;

namespace {

std::size_t aligned_train_count(const BiasedDataset& ds) {
    std::size_t c = 0;
    for (std::size_t i : ds.indices(Split::train)) c += ds.a[0][i] == ds.y[i] % ds.layout.cardinalities[0];
    return c;
}

// Two-class linear discriminant on the chosen columns: fit on one index set,
// score on another.
double lda_accuracy(const BiasedDataset& ds, std::size_t col0, std::size_t ncols, const std::vector<std::size_t>& fit,
                    const std::vector<std::size_t>& score) {
    std::vector<double> mu[2] = {std::vector<double>(ncols, 0.0), std::vector<double>(ncols, 0.0)};
    double count[2] = {0, 0};
    for (std::size_t i : fit) {
        for (std::size_t j = 0; j < ncols; ++j) mu[ds.y[i]][j] += ds.x(i, col0 + j);
        count[ds.y[i]] += 1;
    }
    for (int c = 0; c < 2; ++c)
        for (double& v : mu[c]) v /= count[c];
    // pooled covariance, solved by Gauss-Jordan
    std::vector<std::vector<double>> s(ncols, std::vector<double>(ncols + 1, 0.0));
    for (std::size_t i : fit)
        for (std::size_t j = 0; j < ncols; ++j)
            for (std::size_t k = 0; k < ncols; ++k)
                s[j][k] += (ds.x(i, col0 + j) - mu[ds.y[i]][j]) * (ds.x(i, col0 + k) - mu[ds.y[i]][k]);
    const double dof = static_cast<double>(fit.size()) - 2.0;
    for (std::size_t j = 0; j < ncols; ++j) {
        for (std::size_t k = 0; k < ncols; ++k) s[j][k] /= dof;
        s[j][ncols] = mu[1][j] - mu[0][j];
    }
    for (std::size_t p = 0; p < ncols; ++p) {
        const double piv = s[p][p];
        for (double& v : s[p]) v /= piv;
        for (std::size_t r = 0; r < ncols; ++r)
            if (r != p) {
                const double f = s[r][p];
                for (std::size_t k = 0; k <= ncols; ++k) s[r][k] -= f * s[p][k];
            }
    }
    double b = 0.0;
    for (std::size_t j = 0; j < ncols; ++j) b -= s[j][ncols] * 0.5 * (mu[0][j] + mu[1][j]);
    b += std::log(count[1] / count[0]);
    std::size_t correct = 0;
    for (std::size_t i : score) {
        double z = b;
        for (std::size_t j = 0; j < ncols; ++j) z += s[j][ncols] * ds.x(i, col0 + j);
        correct += (z > 0 ? 1 : 0) == ds.y[i];
    }
    return static_cast<double>(correct) / static_cast<double>(score.size());
}

}  // namespace

TEST_CASE("rho = 1 gives an all-aligned train split with empty minority groups") {
    BiasSpec spec;
    spec.attributes[0].alignment_ratio = 1.0;
    const BiasedDataset ds = generate(spec, SplitSizes{500, 40, 40}, SeededRng(1));
    CHECK(aligned_train_count(ds) == 500);
    const auto table = group_table(ds);
    REQUIRE(table.size() == 4);
    std::size_t empty = 0;
    for (const auto& row : table) {
        empty += row.train == 0;
        CHECK(row.val == 10);
        CHECK(row.test == 10);
    }
    CHECK(empty == 2);
}

TEST_CASE("rho = 0.5 on a binary bias lands within the binomial band") {
    BiasSpec spec;
    spec.attributes[0].alignment_ratio = 0.5;
    const BiasedDataset ds = generate(spec, SplitSizes{10000, 4, 4}, SeededRng(2));
    const double frac = static_cast<double>(aligned_train_count(ds)) / 10000.0;
    CHECK(frac >= 0.45);
    CHECK(frac <= 0.55);
}

TEST_CASE("aligned count equals a replay of the label stream") {
    const BiasSpec spec;
    const SeededRng root(2024);
    const BiasedDataset ds = generate(spec, SplitSizes{2000, 400, 400}, root);
    SeededRng replay = root.substream("train").substream("labels");
    std::size_t aligned = 0;
    for (int i = 0; i < 2000; ++i) {
        const auto y = replay.uniform_int(2);
        if (replay.uniform() < 0.95) {
            ++aligned;
        } else {
            replay.uniform_int(1);
        }
        REQUIRE(ds.y[static_cast<std::size_t>(i)] == static_cast<int>(y));
    }
    CHECK(aligned_train_count(ds) == aligned);
}

TEST_CASE("group table matches a direct recount") {
    const BiasedDataset ds = generate(BiasSpec{}, SplitSizes{}, SeededRng(3));
    std::map<int, std::size_t> counts[3];
    for (std::size_t i = 0; i < ds.size(); ++i) {
        CHECK(ds.group_id[i] == ds.y[i] * 2 + ds.a[0][i]);
        ++counts[static_cast<int>(ds.split[i])][ds.group_id[i]];
    }
    const auto table = group_table(ds);
    REQUIRE(table.size() == 4);
    std::size_t train_total = 0;
    for (std::size_t g = 0; g < 4; ++g) {
        CHECK(table[g].group_id == static_cast<int>(g));
        CHECK(table[g].y == static_cast<int>(g) / 2);
        CHECK(table[g].a == std::vector<int>{static_cast<int>(g) % 2});
        CHECK(table[g].train == counts[0][static_cast<int>(g)]);
        CHECK(table[g].val == counts[1][static_cast<int>(g)]);
        CHECK(table[g].test == counts[2][static_cast<int>(g)]);
        CHECK(table[g].test == 100);
        train_total += table[g].train;
    }
    CHECK(train_total == 2000);
}

TEST_CASE("feature dimension and block layout") {
    BiasSpec spec;
    spec.attributes.push_back(BiasAttribute{"a1", 3, 0.8, 2, 10.0});
    spec.validate();
    CHECK(spec.feature_dim() == 2 + 2 + 2 + 16);
    CHECK(spec.group_count() == 12);
    const BiasedDataset ds = generate(spec, SplitSizes{120, 12, 24}, SeededRng(4));
    CHECK(ds.x.cols() == 22);
    const auto table = group_table(ds);
    CHECK(table.size() == 12);
    for (const auto& row : table) CHECK(row.test == 2);

    // block means: pairwise distances equal the margin
    for (int card : {2, 3, 4})
        for (std::size_t dims : {std::size_t{1}, std::size_t{2}, std::size_t{4}}) {
            for (int u = 0; u < card; ++u)
                for (int v = u + 1; v < card; ++v) {
                    const Vector a = block_mean(u, card, dims, 5.0), b = block_mean(v, card, dims, 5.0);
                    double d = 0.0;
                    for (std::size_t j = 0; j < dims; ++j) d += (a[j] - b[j]) * (a[j] - b[j]);
                    if (dims >= static_cast<std::size_t>(card) || v == u + 1) CHECK(std::sqrt(d) == doctest::Approx(5.0));
                }
        }
}

TEST_CASE("group layout encodes and decodes in mixed radix") {
    const GroupLayout layout{3, {2, 4}};
    CHECK(layout.group_count() == 24);
    const std::vector<int> a{1, 3};
    CHECK(layout.group_id(2, a) == 2 * 8 + 1 * 4 + 3);
    for (int g = 0; g < 24; ++g) {
        const auto [y, av] = layout.decode(g);
        CHECK(layout.group_id(y, av) == g);
    }
    CHECK_THROWS(layout.group_id(3, a));
}

TEST_CASE("validation and precondition errors") {
    BiasSpec spec;
    spec.attributes[0].alignment_ratio = 1.5;
    CHECK_THROWS_AS(spec.validate(), validation_error);
    spec.attributes[0].alignment_ratio = -0.1;
    CHECK_THROWS_AS(generate(spec, SplitSizes{}, SeededRng(0)), validation_error);
    CHECK_THROWS_AS(generate(BiasSpec{}, SplitSizes{39, 4, 4}, SeededRng(0)), precondition_error);
    CHECK_THROWS_AS(generate(BiasSpec{}, SplitSizes{40, 3, 4}, SeededRng(0)), precondition_error);
    CHECK_NOTHROW(generate(BiasSpec{}, SplitSizes{40, 4, 4}, SeededRng(0)));
    BiasSpec bad;
    bad.core_margin = 0.0;
    CHECK_THROWS_AS(bad.validate(), validation_error);
}

TEST_CASE("same seed gives a bit-identical dataset, different seed does not") {
    const BiasedDataset a = generate(BiasSpec{}, SplitSizes{}, SeededRng(5));
    const BiasedDataset b = generate(BiasSpec{}, SplitSizes{}, SeededRng(5));
    const BiasedDataset c = generate(BiasSpec{}, SplitSizes{}, SeededRng(6));
    CHECK(a == b);
    CHECK_FALSE(a.x == c.x);
}

TEST_CASE("csv round trip is exact") {
    const BiasedDataset ds = generate(BiasSpec{}, SplitSizes{60, 8, 8}, SeededRng(7));
    const auto path = std::filesystem::temp_directory_path() / "debias_datagen_roundtrip.csv";
    write_csv(ds, path);
    const BiasedDataset back = read_csv(path, ds.layout);
    std::filesystem::remove(path);
    CHECK(back == ds);
    for (auto s : {Split::train, Split::val, Split::test}) CHECK(split_from_string(to_string(s)) == s);
}

TEST_CASE("desk dataset: bias-only linear classifier reaches rho on train") {
    const BiasSpec spec = desk_bias_spec();
    const BiasedDataset ds = make_dataset(spec, SplitSizes{}, 0);
    const auto train = ds.indices(Split::train);
    const double acc = lda_accuracy(ds, spec.core_signal_dims, spec.attributes[0].signal_dims, train, train);
    INFO("bias-only train accuracy " << acc);
    CHECK(acc >= spec.attributes[0].alignment_ratio);
}

TEST_CASE("desk dataset: core-only linear classifier reaches 95% test accuracy") {
    const BiasSpec spec = desk_bias_spec();
    const BiasedDataset ds = make_dataset(spec, SplitSizes{}, 0);
    const double acc = lda_accuracy(ds, 0, spec.core_signal_dims, ds.indices(Split::train), ds.indices(Split::test));
    INFO("core-only test accuracy " << acc);
    CHECK(acc >= 0.95);
}
