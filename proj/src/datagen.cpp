#include "debias/datagen.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "debias/errors.hpp"

namespace debias {

std::size_t BiasSpec::feature_dim() const noexcept {
    std::size_t d = core_signal_dims + noise_dims;
    for (const auto& attr : attributes) d += attr.signal_dims;
    return d;
}

std::size_t BiasSpec::group_count() const noexcept {
    std::size_t g = static_cast<std::size_t>(std::max(num_classes, 0));
    for (const auto& attr : attributes) g *= static_cast<std::size_t>(std::max(attr.cardinality, 0));
    return g;
}

void BiasSpec::validate() const {
    if (num_classes < 2) throw validation_error("num_classes must be >= 2");
    if (attributes.empty()) throw validation_error("at least one bias attribute is required");
    if (core_signal_dims < 1) throw validation_error("core_signal_dims must be >= 1");
    if (!(core_margin > 0.0)) throw validation_error("core_margin must be > 0");
    if (!(noise_std > 0.0)) throw validation_error("noise_std must be > 0");
    for (const auto& attr : attributes) {
        if (attr.cardinality < 2)
            throw validation_error("attribute '" + attr.name + "': cardinality must be >= 2");
        if (!(attr.alignment_ratio >= 0.0 && attr.alignment_ratio <= 1.0))
            throw validation_error("attribute '" + attr.name + "': alignment_ratio must lie in [0, 1]");
        if (attr.signal_dims < 1) throw validation_error("attribute '" + attr.name + "': signal_dims must be >= 1");
        if (!(attr.margin > 0.0)) throw validation_error("attribute '" + attr.name + "': margin must be > 0");
    }
}

std::string_view to_string(Split split) noexcept {
    switch (split) {
        case Split::train: return "train";
        case Split::val: return "val";
        case Split::test: return "test";
    }
    return "train";
}

Split split_from_string(std::string_view name) {
    if (name == "train") return Split::train;
    if (name == "val") return Split::val;
    if (name == "test") return Split::test;
    throw parse_error("unknown split '" + std::string(name) + "'");
}

std::size_t GroupLayout::group_count() const noexcept {
    std::size_t g = static_cast<std::size_t>(num_classes);
    for (int c : cardinalities) g *= static_cast<std::size_t>(c);
    return g;
}

int GroupLayout::group_id(int y, std::span<const int> a) const {
    if (a.size() != cardinalities.size()) throw shape_error("group_id: attribute count mismatch");
    if (y < 0 || y >= num_classes) throw precondition_error("group_id: label out of range");
    int g = y;
    for (std::size_t k = 0; k < a.size(); ++k) {
        if (a[k] < 0 || a[k] >= cardinalities[k]) throw precondition_error("group_id: attribute value out of range");
        g = g * cardinalities[k] + a[k];
    }
    return g;
}

std::pair<int, std::vector<int>> GroupLayout::decode(int group) const {
    if (group < 0 || static_cast<std::size_t>(group) >= group_count())
        throw precondition_error("decode: group id out of range");
    std::vector<int> a(cardinalities.size());
    for (std::size_t k = cardinalities.size(); k-- > 0;) {
        a[k] = group % cardinalities[k];
        group /= cardinalities[k];
    }
    return {group, std::move(a)};
}

std::vector<std::size_t> BiasedDataset::indices(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < split.size(); ++i)
        if (split[i] == s) out.push_back(i);
    return out;
}

DatasetSlice slice(const BiasedDataset& ds, Split s) {
    DatasetSlice out;
    out.source_index = ds.indices(s);
    out.x = gather_rows(ds.x, out.source_index);
    out.layout = ds.layout;
    out.a.assign(ds.a.size(), {});
    for (std::size_t i : out.source_index) {
        out.y.push_back(ds.y[i]);
        out.group_id.push_back(ds.group_id[i]);
        for (std::size_t k = 0; k < ds.a.size(); ++k) out.a[k].push_back(ds.a[k][i]);
    }
    return out;
}

Vector block_mean(int value, int cardinality, std::size_t dims, double margin) {
    Vector mu(dims, 0.0);
    const auto card = static_cast<std::size_t>(cardinality);
    if (dims >= card) {
        // centred scaled one-hot: every pair of values is `margin` apart
        const double s = margin / std::sqrt(2.0);
        for (std::size_t j = 0; j < card; ++j) mu[j] = -s / static_cast<double>(card);
        mu[static_cast<std::size_t>(value)] += s;
    } else {
        // evenly spaced along the diagonal, adjacent values `margin` apart
        const double pos = (static_cast<double>(value) - 0.5 * static_cast<double>(card - 1)) * margin;
        const double per_dim = pos / std::sqrt(static_cast<double>(dims));
        for (double& v : mu) v = per_dim;
    }
    return mu;
}

namespace {

void fill_features(const BiasSpec& spec, SeededRng& rng, int y, std::span<const int> a, std::span<double> row) {
    std::size_t col = 0;
    auto block = [&](const Vector& mu) {
        for (double m : mu) row[col++] = m + spec.noise_std * rng.normal();
    };
    block(block_mean(y, spec.num_classes, spec.core_signal_dims, spec.core_margin));
    for (std::size_t k = 0; k < spec.attributes.size(); ++k) {
        const auto& attr = spec.attributes[k];
        block(block_mean(a[k], attr.cardinality, attr.signal_dims, attr.margin));
    }
    for (std::size_t j = 0; j < spec.noise_dims; ++j) row[col++] = spec.noise_std * rng.normal();
}

}  // namespace

BiasedDataset generate(const BiasSpec& spec, const SplitSizes& sizes, const SeededRng& rng) {
    spec.validate();
    const std::size_t groups = spec.group_count();
    if (sizes.train < 10 * groups)
        throw precondition_error("generate: train size " + std::to_string(sizes.train) + " is below 10 x " +
                                 std::to_string(groups) + " groups");
    if (sizes.val < groups || sizes.test < groups)
        throw precondition_error("generate: val and test need at least one sample per group (" +
                                 std::to_string(groups) + ")");

    BiasedDataset ds;
    ds.layout.num_classes = spec.num_classes;
    ds.layout.cardinalities.clear();
    for (const auto& attr : spec.attributes) ds.layout.cardinalities.push_back(attr.cardinality);

    const std::size_t n = sizes.train + sizes.val + sizes.test;
    const std::size_t nattr = spec.attributes.size();
    ds.x = Matrix(n, spec.feature_dim());
    ds.y.resize(n);
    ds.a.assign(nattr, std::vector<int>(n));
    ds.group_id.resize(n);
    ds.split.resize(n);

    std::vector<int> a(nattr);
    SeededRng labels = rng.substream("train").substream("labels");
    for (std::size_t i = 0; i < sizes.train; ++i) {
        const int y = static_cast<int>(labels.uniform_int(static_cast<std::uint64_t>(spec.num_classes)));
        for (std::size_t k = 0; k < nattr; ++k) {
            const int card = spec.attributes[k].cardinality;
            const int aligned = y % card;
            const double u = labels.uniform();
            if (u < spec.attributes[k].alignment_ratio) {
                a[k] = aligned;
            } else {
                int v = static_cast<int>(labels.uniform_int(static_cast<std::uint64_t>(card - 1)));
                if (v >= aligned) ++v;
                a[k] = v;
            }
        }
        ds.y[i] = y;
        for (std::size_t k = 0; k < nattr; ++k) ds.a[k][i] = a[k];
        ds.split[i] = Split::train;
    }
    std::size_t offset = sizes.train;
    for (auto [s, count] : {std::pair{Split::val, sizes.val}, std::pair{Split::test, sizes.test}}) {
        for (std::size_t j = 0; j < count; ++j) {
            const auto [y, av] = ds.layout.decode(static_cast<int>(j % groups));
            ds.y[offset + j] = y;
            for (std::size_t k = 0; k < nattr; ++k) ds.a[k][offset + j] = av[k];
            ds.split[offset + j] = s;
        }
        offset += count;
    }

    offset = 0;
    for (auto [s, count] : {std::pair{Split::train, sizes.train}, std::pair{Split::val, sizes.val},
                            std::pair{Split::test, sizes.test}}) {
        SeededRng features = rng.substream(to_string(s)).substream("features");
        for (std::size_t j = 0; j < count; ++j) {
            const std::size_t i = offset + j;
            for (std::size_t k = 0; k < nattr; ++k) a[k] = ds.a[k][i];
            fill_features(spec, features, ds.y[i], a, ds.x.row(i));
        }
        offset += count;
    }
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t k = 0; k < nattr; ++k) a[k] = ds.a[k][i];
        ds.group_id[i] = ds.layout.group_id(ds.y[i], a);
    }
    return ds;
}

std::vector<GroupCount> group_table(const BiasedDataset& ds) {
    std::vector<GroupCount> table(ds.layout.group_count());
    for (std::size_t g = 0; g < table.size(); ++g) {
        auto [y, a] = ds.layout.decode(static_cast<int>(g));
        table[g].group_id = static_cast<int>(g);
        table[g].y = y;
        table[g].a = std::move(a);
    }
    for (std::size_t i = 0; i < ds.size(); ++i) {
        auto& row = table.at(static_cast<std::size_t>(ds.group_id[i]));
        switch (ds.split[i]) {
            case Split::train: ++row.train; break;
            case Split::val: ++row.val; break;
            case Split::test: ++row.test; break;
        }
    }
    return table;
}

void write_csv(const BiasedDataset& ds, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
    for (std::size_t j = 0; j < ds.x.cols(); ++j) out << "feature_" << j << ',';
    out << 'y';
    for (std::size_t k = 0; k < ds.a.size(); ++k) out << ",a_" << k;
    out << ",group_id,split\n";
    char buf[32];
    for (std::size_t i = 0; i < ds.size(); ++i) {
        for (std::size_t j = 0; j < ds.x.cols(); ++j) {
            std::snprintf(buf, sizeof buf, "%.17g", ds.x(i, j));
            out << buf << ',';
        }
        out << ds.y[i];
        for (const auto& col : ds.a) out << ',' << col[i];
        out << ',' << ds.group_id[i] << ',' << to_string(ds.split[i]) << '\n';
    }
    if (!out) throw std::runtime_error("write failed: " + path.string());
}

namespace {

std::vector<std::string> split_fields(const std::string& line) {
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, ',')) fields.push_back(f);
    if (!line.empty() && line.back() == ',') fields.emplace_back();
    return fields;
}

template <class T>
T parse_number(const std::string& s, std::size_t line) {
    T v{};
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || ptr != s.data() + s.size())
        throw parse_error("line " + std::to_string(line) + ": bad number '" + s + "'");
    return v;
}

}  // namespace

BiasedDataset read_csv(const std::filesystem::path& path, const GroupLayout& layout) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    std::string line;
    if (!std::getline(in, line)) throw parse_error(path.string() + ": missing header");
    const auto header = split_fields(line);
    const std::size_t nattr = layout.cardinalities.size();
    if (header.size() < nattr + 3) throw parse_error(path.string() + ": header too short");
    const std::size_t d = header.size() - nattr - 3;
    for (std::size_t j = 0; j < d; ++j)
        if (header[j] != "feature_" + std::to_string(j)) throw parse_error("unexpected header column '" + header[j] + "'");
    if (header[d] != "y") throw parse_error("expected header column 'y'");
    for (std::size_t k = 0; k < nattr; ++k)
        if (header[d + 1 + k] != "a_" + std::to_string(k))
            throw parse_error("expected header column 'a_" + std::to_string(k) + "'");
    if (header[d + 1 + nattr] != "group_id" || header[d + 2 + nattr] != "split")
        throw parse_error("expected trailing header columns 'group_id,split'");

    BiasedDataset ds;
    ds.layout = layout;
    ds.a.assign(nattr, {});
    std::vector<double> values;
    std::size_t lineno = 1;
    std::vector<int> a(nattr);
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        const auto f = split_fields(line);
        if (f.size() != header.size())
            throw parse_error("line " + std::to_string(lineno) + ": expected " + std::to_string(header.size()) +
                              " fields, got " + std::to_string(f.size()));
        for (std::size_t j = 0; j < d; ++j) values.push_back(parse_number<double>(f[j], lineno));
        ds.y.push_back(parse_number<int>(f[d], lineno));
        for (std::size_t k = 0; k < nattr; ++k) {
            a[k] = parse_number<int>(f[d + 1 + k], lineno);
            ds.a[k].push_back(a[k]);
        }
        const int g = parse_number<int>(f[d + 1 + nattr], lineno);
        if (g != layout.group_id(ds.y.back(), a))
            throw parse_error("line " + std::to_string(lineno) + ": group_id inconsistent with (y, a)");
        ds.group_id.push_back(g);
        ds.split.push_back(split_from_string(f[d + 2 + nattr]));
    }
    ds.x = Matrix(ds.y.size(), d, std::move(values));
    return ds;
}

}  // namespace debias
