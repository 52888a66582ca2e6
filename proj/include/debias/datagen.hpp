#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "debias/matrix.hpp"
#include "debias/rng.hpp"

namespace debias {

struct BiasAttribute {
    std::string name;
    int cardinality = 2;
    double alignment_ratio = 0.95;  // P(a = y mod cardinality) in the train split
    std::size_t signal_dims = 2;
    double margin = 16.0;

    friend bool operator==(const BiasAttribute&, const BiasAttribute&) = default;
};

// Gaussian class/attribute-conditional features: core block carries y, one
// block per bias attribute carries a, noise block is pure N(0, noise_std^2).
// Value means inside a block sit at pairwise distance `margin`.
struct BiasSpec {
    int num_classes = 2;
    std::vector<BiasAttribute> attributes{BiasAttribute{"a0"}};
    std::size_t core_signal_dims = 2;
    std::size_t noise_dims = 16;
    double core_margin = 3.3;
    double noise_std = 1.0;

    std::size_t feature_dim() const noexcept;
    std::size_t group_count() const noexcept;
    void validate() const;

    friend bool operator==(const BiasSpec&, const BiasSpec&) = default;
};

struct SplitSizes {
    std::size_t train = 2000;
    std::size_t val = 400;
    std::size_t test = 400;

    friend bool operator==(const SplitSizes&, const SplitSizes&) = default;
};

enum class Split { train = 0, val = 1, test = 2 };

std::string_view to_string(Split split) noexcept;
Split split_from_string(std::string_view name);

// Mixed-radix group ids: group = y * prod(card) + a_0 * prod(card[1:]) + ...
struct GroupLayout {
    int num_classes = 2;
    std::vector<int> cardinalities{2};

    std::size_t group_count() const noexcept;
    int group_id(int y, std::span<const int> a) const;
    // Inverse of group_id: (y, a).
    std::pair<int, std::vector<int>> decode(int group) const;

    friend bool operator==(const GroupLayout&, const GroupLayout&) = default;
};

struct BiasedDataset {
    Matrix x;
    std::vector<int> y;
    std::vector<std::vector<int>> a;  // a[attribute][sample]
    std::vector<int> group_id;
    std::vector<Split> split;
    GroupLayout layout;

    std::size_t size() const noexcept { return y.size(); }
    std::vector<std::size_t> indices(Split s) const;

    friend bool operator==(const BiasedDataset&, const BiasedDataset&) = default;
};

// Rows of one split, in dataset order.
struct DatasetSlice {
    Matrix x;
    std::vector<int> y;
    std::vector<std::vector<int>> a;
    std::vector<int> group_id;
    std::vector<std::size_t> source_index;
    GroupLayout layout;

    std::size_t size() const noexcept { return y.size(); }
};

DatasetSlice slice(const BiasedDataset& ds, Split s);

// Train labels: for each sample y ~ U{0..C-1}; per attribute, u ~ U[0,1) and the
// aligned value y mod card is taken when u < rho, otherwise a uniform draw over
// the remaining values. These come from rng/"train"/"labels". Val and test are
// exactly group-balanced (round robin over groups). Features for each split
// come from rng/<split>/"features", sample by sample, block by block.
BiasedDataset generate(const BiasSpec& spec, const SplitSizes& sizes, const SeededRng& rng);

// Mean of value v inside a block of `dims` dimensions for `cardinality` values.
Vector block_mean(int value, int cardinality, std::size_t dims, double margin);

struct GroupCount {
    int group_id = 0;
    int y = 0;
    std::vector<int> a;
    std::size_t train = 0;
    std::size_t val = 0;
    std::size_t test = 0;
};

// One row per group in (y, a) order, including empty groups.
std::vector<GroupCount> group_table(const BiasedDataset& ds);

// CSV with header feature_0..feature_{d-1}, y, a_0.., group_id, split.
void write_csv(const BiasedDataset& ds, const std::filesystem::path& path);
BiasedDataset read_csv(const std::filesystem::path& path, const GroupLayout& layout);

}  // namespace debias
