#include "debias/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "debias/errors.hpp"
#include "debias/json_reader.hpp"

namespace debias {

std::string_view to_string(TrainMode m) noexcept {
    switch (m) {
        case TrainMode::erm: return "erm";
        case TrainMode::debiasify: return "debiasify";
        case TrainMode::ace: return "ace";
    }
    return "debiasify";
}

std::string_view to_string(AssignmentMode m) noexcept { return m == AssignmentMode::nearest ? "nearest" : "frozen"; }
std::string_view to_string(ClusterSource s) noexcept { return s == ClusterSource::aligned ? "aligned" : "raw"; }

TrainMode train_mode_from_string(std::string_view s) {
    if (s == "erm") return TrainMode::erm;
    if (s == "debiasify") return TrainMode::debiasify;
    if (s == "ace") return TrainMode::ace;
    throw validation_error("unknown mode '" + std::string(s) + "' (expected erm, debiasify or ace)");
}

AssignmentMode assignment_mode_from_string(std::string_view s) {
    if (s == "nearest") return AssignmentMode::nearest;
    if (s == "frozen") return AssignmentMode::frozen;
    throw validation_error("unknown assignment mode '" + std::string(s) + "' (expected nearest or frozen)");
}

ClusterSource cluster_source_from_string(std::string_view s) {
    if (s == "aligned") return ClusterSource::aligned;
    if (s == "raw") return ClusterSource::raw;
    throw validation_error("unknown cluster source '" + std::string(s) + "' (expected aligned or raw)");
}

void TrainConfig::validate() const {
    network.validate();
    if (total_epochs < 1) throw validation_error("total_epochs must be >= 1");
    if (warmup_epochs >= total_epochs) throw validation_error("warmup_epochs must be < total_epochs");
    if (batch_size < 1) throw validation_error("batch_size must be >= 1");
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw validation_error("learning_rate must be > 0");
    if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay)) throw validation_error("weight_decay must be >= 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0)) throw validation_error("beta1 must lie in [0, 1)");
    if (!(beta2 >= 0.0 && beta2 < 1.0)) throw validation_error("beta2 must lie in [0, 1)");
    if (!(epsilon > 0.0)) throw validation_error("epsilon must be > 0");
    if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw validation_error("alpha must be >= 0");
    if (!(cluster.gamma > 0.0)) throw validation_error("cluster.gamma must be > 0");
    if (cluster.k_max < 1) throw validation_error("cluster.k_max must be >= 1");
    if (cluster.fixed_k && *cluster.fixed_k < 1) throw validation_error("cluster.fixed_k must be >= 1");
    if (cluster.pca_dims && *cluster.pca_dims < 1) throw validation_error("cluster.pca_dims must be >= 1");
    if (cluster.restarts < 1) throw validation_error("cluster.restarts must be >= 1");
    if (cluster.max_iters < 1) throw validation_error("cluster.max_iters must be >= 1");
    if (kernel_bandwidth && !(*kernel_bandwidth > 0.0)) throw validation_error("kernel_bandwidth must be > 0");
    if (min_cluster_batch < 1) throw validation_error("min_cluster_batch must be >= 1");
}

HybridOptions TrainConfig::hybrid_options() const {
    HybridOptions h;
    h.alpha = alpha;
    h.akd.kernel.bandwidth = kernel_bandwidth;
    h.akd.distance = distance;
    h.akd.min_cluster_batch = min_cluster_batch;
    h.akd.detach_deep = detach_deep_in_akd;
    h.use_kl = use_kl;
    h.detach_deep_in_kl = detach_deep_in_kl;
    return h;
}

// ---------------------------------------------------------------- config JSON

nlohmann::json to_json(const TrainConfig& c) {
    auto opt = [](const auto& v) -> nlohmann::json { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
    return {
        {"mode", std::string(to_string(c.mode))},
        {"network",
         {{"input_dim", c.network.input_dim},
          {"block_widths", c.network.block_widths},
          {"num_classes", c.network.num_classes},
          {"shallow_taps", c.network.shallow_taps}}},
        {"warmup_epochs", c.warmup_epochs},
        {"total_epochs", c.total_epochs},
        {"batch_size", c.batch_size},
        {"learning_rate", c.learning_rate},
        {"weight_decay", c.weight_decay},
        {"beta1", c.beta1},
        {"beta2", c.beta2},
        {"epsilon", c.epsilon},
        {"alpha", c.alpha},
        {"cluster",
         {{"gamma", c.cluster.gamma},
          {"k_max", c.cluster.k_max},
          {"fixed_k", opt(c.cluster.fixed_k)},
          {"pca_dims", opt(c.cluster.pca_dims)},
          {"normalization", std::string(to_string(c.cluster.normalization))},
          {"restarts", c.cluster.restarts},
          {"max_iters", c.cluster.max_iters}}},
        {"cluster_source", std::string(to_string(c.cluster_source))},
        {"assignment", std::string(to_string(c.assignment))},
        {"recluster_every", c.recluster_every},
        {"use_kl", c.use_kl},
        {"detach_deep_in_akd", c.detach_deep_in_akd},
        {"detach_deep_in_kl", c.detach_deep_in_kl},
        {"distance", std::string(to_string(c.distance))},
        {"kernel_bandwidth", opt(c.kernel_bandwidth)},
        {"min_cluster_batch", c.min_cluster_batch},
        {"seed", c.seed},
    };
}

TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig c) {
    StrictReader r(j, "train");
    r.read_enum("mode", c.mode, train_mode_from_string);
    if (r.has("network")) {
        StrictReader n(r.at("network"), r.field("network"));
        n.read_count("input_dim", c.network.input_dim);
        if (n.has("block_widths")) {
            const auto& w = n.at("block_widths");
            if (!w.is_array() || w.size() != 4)
                throw validation_error(n.field("block_widths") + " must be an array of 4 positive integers");
            for (std::size_t i = 0; i < 4; ++i) {
                if (!w[i].is_number_unsigned())
                    throw validation_error(n.field("block_widths") + " must be an array of 4 positive integers");
                c.network.block_widths[i] = w[i].get<std::size_t>();
            }
        }
        n.read_count("num_classes", c.network.num_classes);
        if (n.has("shallow_taps")) {
            const auto& t = n.at("shallow_taps");
            if (!t.is_array()) throw validation_error(n.field("shallow_taps") + " must be an array of integers");
            c.network.shallow_taps.clear();
            for (const auto& v : t) {
                if (!v.is_number_integer())
                    throw validation_error(n.field("shallow_taps") + " must be an array of integers");
                c.network.shallow_taps.push_back(v.get<int>());
            }
        }
        n.finish();
    }
    r.read_count("warmup_epochs", c.warmup_epochs);
    r.read_count("total_epochs", c.total_epochs);
    r.read_count("batch_size", c.batch_size);
    r.read("learning_rate", c.learning_rate);
    r.read("weight_decay", c.weight_decay);
    r.read("beta1", c.beta1);
    r.read("beta2", c.beta2);
    r.read("epsilon", c.epsilon);
    r.read("alpha", c.alpha);
    if (r.has("cluster")) {
        StrictReader k(r.at("cluster"), r.field("cluster"));
        k.read("gamma", c.cluster.gamma);
        k.read_count("k_max", c.cluster.k_max);
        k.read_optional_count("fixed_k", c.cluster.fixed_k);
        k.read_optional_count("pca_dims", c.cluster.pca_dims);
        k.read_enum("normalization", c.cluster.normalization, cluster_normalization_from_string);
        k.read_count("restarts", c.cluster.restarts);
        k.read_count("max_iters", c.cluster.max_iters);
        k.finish();
    }
    r.read_enum("cluster_source", c.cluster_source, cluster_source_from_string);
    r.read_enum("assignment", c.assignment, assignment_mode_from_string);
    r.read_count("recluster_every", c.recluster_every);
    r.read("use_kl", c.use_kl);
    r.read("detach_deep_in_akd", c.detach_deep_in_akd);
    r.read("detach_deep_in_kl", c.detach_deep_in_kl);
    r.read_enum("distance", c.distance, distance_kind_from_string);
    r.read_optional_real("kernel_bandwidth", c.kernel_bandwidth);
    r.read_count("min_cluster_batch", c.min_cluster_batch);
    r.read_u64("seed", c.seed);
    r.finish();
    return c;
}

// ---------------------------------------------------------------- optimizer

AdamState adam_init(const NetworkParams& params) { return AdamState{zeros_like(params), zeros_like(params), 0}; }

namespace {

std::vector<std::vector<double>*> arrays_of(NetworkParams& p) {
    std::vector<std::vector<double>*> out;
    for_each_array(p, [&](std::vector<double>& v) { out.push_back(&v); });
    return out;
}

std::vector<const std::vector<double>*> arrays_of(const NetworkParams& p) {
    std::vector<const std::vector<double>*> out;
    for_each_array(p, [&](const std::vector<double>& v) { out.push_back(&v); });
    return out;
}

}  // namespace

void adam_step(NetworkParams& params, const Gradients& grads, AdamState& state, const TrainConfig& config) {
    auto p = arrays_of(params);
    auto g = arrays_of(grads);
    auto m = arrays_of(state.m);
    auto v = arrays_of(state.v);
    if (g.size() != p.size() || m.size() != p.size() || v.size() != p.size())
        throw shape_error("adam_step: parameter trees differ");
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double bc1 = 1.0 - std::pow(config.beta1, t);
    const double bc2_sqrt = std::sqrt(1.0 - std::pow(config.beta2, t));
    const double step_size = config.learning_rate / bc1;
    const double shrink = 1.0 - config.learning_rate * config.weight_decay;
    for (std::size_t a = 0; a < p.size(); ++a) {
        auto& pa = *p[a];
        const auto& ga = *g[a];
        auto& ma = *m[a];
        auto& va = *v[a];
        if (ga.size() != pa.size()) throw shape_error("adam_step: gradient shape mismatch");
        for (std::size_t i = 0; i < pa.size(); ++i) {
            if (config.weight_decay != 0.0) pa[i] *= shrink;
            ma[i] = config.beta1 * ma[i] + (1.0 - config.beta1) * ga[i];
            va[i] = config.beta2 * va[i] + (1.0 - config.beta2) * ga[i] * ga[i];
            const double denom = std::sqrt(va[i]) / bc2_sqrt + config.epsilon;
            pa[i] -= step_size * ma[i] / denom;
        }
    }
}

// ---------------------------------------------------------------- helpers

std::vector<int> predict(const NetworkConfig& network, const NetworkParams& params, const Matrix& x) {
    const TapOutputs out = forward(network, params, x);
    std::vector<int> pred(x.rows());
    for (std::size_t i = 0; i < x.rows(); ++i) {
        const auto r = out.deep_logits.row(i);
        pred[i] = static_cast<int>(std::max_element(r.begin(), r.end()) - r.begin());
    }
    return pred;
}

Matrix layer_activations(const NetworkConfig& network, const NetworkParams& params, const Matrix& x,
                         std::string_view layer) {
    const ForwardTrace t = forward_trace(network, params, x);
    for (int b = 1; b <= 4; ++b)
        if (layer == "block" + std::to_string(b)) return t.post[static_cast<std::size_t>(b - 1)];
    for (std::size_t i = 0; i < network.shallow_taps.size(); ++i)
        if (layer == "aligned" + std::to_string(network.shallow_taps[i])) return t.taps.shallow_features[i];
    throw validation_error("unknown layer '" + std::string(layer) + "'");
}

nlohmann::json to_json(const EpochRecord& e) {
    nlohmann::json k;
    if (e.k_per_class.size() == 1)
        k = e.k_per_class.front();
    else
        k = e.k_per_class;
    return {{"epoch", e.epoch},
            {"l_ace", e.l_ace},
            {"l_akd", e.l_akd},
            {"l_kl", e.l_kl},
            {"l_hybrid", e.l_hybrid},
            {"val_unbiased_acc", e.val_unbiased_acc},
            {"val_worst_group_acc", e.val_worst_group_acc},
            {"K_per_class", e.k_per_class.empty() ? nlohmann::json::array() : k}};
}

void write_metrics_jsonl(const RunRecord& record, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
    for (const auto& e : record.epochs) out << to_json(e).dump() << '\n';
    if (!out) throw std::runtime_error("write failed: " + path.string());
}

// ---------------------------------------------------------------- checkpoints

namespace {

nlohmann::json matrix_json(const Matrix& m) { return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", m.data()}}; }

Matrix matrix_from(const nlohmann::json& j) {
    return Matrix(j.at("rows").get<std::size_t>(), j.at("cols").get<std::size_t>(),
                  j.at("data").get<std::vector<double>>());
}

nlohmann::json affine_json(const Affine& a) { return {{"weight", matrix_json(a.weight)}, {"bias", a.bias}}; }

Affine affine_from(const nlohmann::json& j) {
    Affine a{matrix_from(j.at("weight")), j.at("bias").get<Vector>()};
    if (a.bias.size() != a.weight.cols()) throw parse_error("bias length does not match weight columns");
    return a;
}

nlohmann::json epoch_state_json(const EpochRecord& e) {
    return {{"epoch", e.epoch},   {"l_ace", e.l_ace},
            {"l_akd", e.l_akd},   {"l_kl", e.l_kl},
            {"l_hybrid", e.l_hybrid}, {"alpha", e.alpha},
            {"val_unbiased_acc", e.val_unbiased_acc},
            {"val_worst_group_acc", e.val_worst_group_acc},
            {"k_per_class", e.k_per_class}, {"skipped_terms", e.skipped_terms}};
}

EpochRecord epoch_state_from(const nlohmann::json& j) {
    EpochRecord e;
    e.epoch = j.at("epoch").get<std::size_t>();
    e.l_ace = j.at("l_ace").get<double>();
    e.l_akd = j.at("l_akd").get<double>();
    e.l_kl = j.at("l_kl").get<double>();
    e.l_hybrid = j.at("l_hybrid").get<double>();
    e.alpha = j.at("alpha").get<double>();
    e.val_unbiased_acc = j.at("val_unbiased_acc").get<double>();
    e.val_worst_group_acc = j.at("val_worst_group_acc").get<double>();
    e.k_per_class = j.at("k_per_class").get<std::vector<std::vector<std::size_t>>>();
    e.skipped_terms = j.at("skipped_terms").get<std::size_t>();
    return e;
}

nlohmann::json read_json_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw parse_error(path.string() + ": " + e.what());
    }
}

void write_json_file(const nlohmann::json& j, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
    out << j.dump() << '\n';
    if (!out) throw std::runtime_error("write failed: " + path.string());
}

void check_version(const nlohmann::json& j) {
    if (!j.is_object() || !j.contains("format_version") || !j.at("format_version").is_number_integer())
        throw parse_error("checkpoint has no integer format_version");
    const int found = j.at("format_version").get<int>();
    if (found != checkpoint_format_version) throw version_error(found, checkpoint_format_version);
}

}  // namespace

nlohmann::json params_to_json(const NetworkParams& p) {
    nlohmann::json blocks = nlohmann::json::array();
    for (const auto& b : p.blocks) blocks.push_back(affine_json(b));
    nlohmann::json branches = nlohmann::json::array();
    for (const auto& b : p.branches)
        branches.push_back({{"align", affine_json(b.align)}, {"classifier", affine_json(b.classifier)}});
    return {{"blocks", blocks}, {"branches", branches}, {"deep_classifier", affine_json(p.deep_classifier)}};
}

NetworkParams params_from_json(const nlohmann::json& j) {
    NetworkParams p;
    const auto& blocks = j.at("blocks");
    if (!blocks.is_array() || blocks.size() != 4) throw parse_error("params.blocks must hold 4 layers");
    for (std::size_t i = 0; i < 4; ++i) p.blocks[i] = affine_from(blocks[i]);
    for (const auto& b : j.at("branches")) p.branches.push_back(Branch{affine_from(b.at("align")), affine_from(b.at("classifier"))});
    p.deep_classifier = affine_from(j.at("deep_classifier"));
    return p;
}

void save_checkpoint(const NetworkParams& params, const TrainConfig& config, const std::filesystem::path& path) {
    write_json_file({{"format_version", checkpoint_format_version},
                     {"config", to_json(config)},
                     {"params", params_to_json(params)}},
                    path);
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
    const nlohmann::json j = read_json_file(path);
    check_version(j);
    try {
        LoadedCheckpoint out{params_from_json(j.at("params")), train_config_from_json(j.at("config"))};
        check_shapes(out.config.network, out.params);
        return out;
    } catch (const nlohmann::json::exception& e) {
        throw parse_error(path.string() + ": " + e.what());
    }
}

// ---------------------------------------------------------------- training

namespace {

struct TrainState {
    NetworkParams params;
    AdamState adam;
    std::size_t epochs_done = 0;
    std::vector<ClusterModel> clusters;
    std::vector<EpochRecord> epochs;
    std::vector<ClusterEvent> events;
    NetworkParams best_params;
    std::size_t best_epoch = 0;
    double best_val = -1.0;
};

void save_state(const TrainState& s, const TrainConfig& config, const std::filesystem::path& path) {
    nlohmann::json clusters = nlohmann::json::array();
    for (const auto& c : s.clusters) clusters.push_back(to_json(c));
    nlohmann::json epochs = nlohmann::json::array();
    for (const auto& e : s.epochs) epochs.push_back(epoch_state_json(e));
    nlohmann::json events = nlohmann::json::array();
    for (const auto& e : s.events)
        events.push_back({{"epoch", e.epoch}, {"k_per_class", e.k_per_class}, {"cap_reached", e.cap_reached}});
    write_json_file({{"format_version", checkpoint_format_version},
                     {"config", to_json(config)},
                     {"params", params_to_json(s.params)},
                     {"state",
                      {{"epochs_done", s.epochs_done},
                       {"adam", {{"m", params_to_json(s.adam.m)}, {"v", params_to_json(s.adam.v)}, {"step", s.adam.step}}},
                       {"clusters", clusters},
                       {"epochs", epochs},
                       {"cluster_events", events},
                       {"best_params", params_to_json(s.best_params)},
                       {"best_epoch", s.best_epoch},
                       {"best_val", s.best_val}}}},
                    path);
}

TrainState load_state(const std::filesystem::path& path, const TrainConfig& config) {
    const nlohmann::json j = read_json_file(path);
    check_version(j);
    try {
        if (!j.contains("state")) throw parse_error(path.string() + ": checkpoint carries no training state");
        if (train_config_from_json(j.at("config")) != config)
            throw validation_error("resume: checkpoint config differs from the requested config");
        TrainState s;
        const auto& st = j.at("state");
        s.params = params_from_json(j.at("params"));
        s.adam.m = params_from_json(st.at("adam").at("m"));
        s.adam.v = params_from_json(st.at("adam").at("v"));
        s.adam.step = st.at("adam").at("step").get<std::uint64_t>();
        s.epochs_done = st.at("epochs_done").get<std::size_t>();
        for (const auto& c : st.at("clusters")) s.clusters.push_back(cluster_model_from_json(c));
        for (const auto& e : st.at("epochs")) s.epochs.push_back(epoch_state_from(e));
        for (const auto& e : st.at("cluster_events"))
            s.events.push_back(ClusterEvent{e.at("epoch").get<std::size_t>(),
                                            e.at("k_per_class").get<std::vector<std::vector<std::size_t>>>(),
                                            e.at("cap_reached").get<std::vector<std::vector<bool>>>()});
        s.best_params = params_from_json(st.at("best_params"));
        s.best_epoch = st.at("best_epoch").get<std::size_t>();
        s.best_val = st.at("best_val").get<double>();
        check_shapes(config.network, s.params);
        return s;
    } catch (const nlohmann::json::exception& e) {
        throw parse_error(path.string() + ": " + e.what());
    }
}

bool finite_tree(const TapGradients& g) {
    auto ok = [](const Matrix& m) { return m.all_finite(); };
    return std::all_of(g.shallow_features.begin(), g.shallow_features.end(), ok) &&
           std::all_of(g.shallow_logits.begin(), g.shallow_logits.end(), ok) && ok(g.deep_features) &&
           ok(g.deep_logits);
}

[[noreturn]] void abort_non_finite(std::size_t epoch, std::size_t batch, std::span<const std::size_t> rows,
                                   const Matrix& xb, double l_ace, double l_akd, double l_kl, const char* what) {
    std::ostringstream os;
    os.precision(17);
    os << "non-finite " << what << " at epoch " << epoch << ", batch " << batch << "\n";
    os << "  l_ace=" << l_ace << " l_akd=" << l_akd << " l_kl=" << l_kl << "\n";
    os << "  batch rows:";
    for (std::size_t i = 0; i < rows.size(); ++i) os << (i ? "," : " ") << rows[i];
    double mx = 0.0;
    for (double v : xb.data()) mx = std::max(mx, std::abs(v));
    os << "\n  max |x| in batch: " << mx << "\n";
    throw numeric_error(os.str());
}

}  // namespace

RunRecord train(const TrainConfig& config, const BiasedDataset& ds, const TrainOptions& options) {
    const auto t0 = std::chrono::steady_clock::now();
    config.validate();
    if (ds.x.cols() != config.network.input_dim)
        throw validation_error("network.input_dim is " + std::to_string(config.network.input_dim) +
                               " but the dataset has " + std::to_string(ds.x.cols()) + " features");
    if (static_cast<std::size_t>(ds.layout.num_classes) != config.network.num_classes)
        throw validation_error("network.num_classes does not match the dataset");

    const DatasetSlice tr = slice(ds, Split::train);
    const DatasetSlice val = slice(ds, Split::val);
    const DatasetSlice test = slice(ds, Split::test);
    const std::size_t n = tr.size();
    if (n == 0) throw precondition_error("train: empty train split");
    if (val.size() == 0) throw precondition_error("train: empty val split");

    const SeededRng root(config.seed);
    const SeededRng shuffle_rng = root.substream("shuffle");
    const SeededRng cluster_rng = root.substream("cluster");
    const HybridOptions hybrid = config.hybrid_options();
    const std::size_t ntaps = config.network.shallow_taps.size();

    TrainState s;
    if (options.resume_from) {
        s = load_state(*options.resume_from, config);
    } else {
        s.params = init_params(config.network, root.substream("init"));
        s.adam = adam_init(s.params);
        s.best_params = s.params;
    }

    auto save = [&](const std::filesystem::path& path) { save_state(s, config, path); };

    RunRecord rec;
    rec.seed = config.seed;
    rec.mode = config.mode;
    rec.completed = true;

    for (std::size_t e = s.epochs_done; e < config.total_epochs; ++e) {
        const bool hybrid_phase = config.mode == TrainMode::debiasify && e >= config.warmup_epochs;
        const bool recluster = hybrid_phase && (e == config.warmup_epochs ||
                                                (config.recluster_every > 0 && e > config.warmup_epochs &&
                                                 (e - config.warmup_epochs) % config.recluster_every == 0));
        if (recluster) {
            const TapOutputs full = forward(config.network, s.params, tr.x);
            ClusterEvent ev;
            ev.epoch = e + 1;
            s.clusters.clear();
            for (std::size_t t = 0; t < ntaps; ++t) {
                const Matrix& feats =
                    config.cluster_source == ClusterSource::raw ? full.shallow_raw[t] : full.shallow_features[t];
                try {
                    s.clusters.push_back(build_cluster_model(feats, tr.y, config.cluster,
                                                             cluster_rng.substream(e).substream(t)));
                } catch (const degenerate_class_error& err) {
                    throw degenerate_class_error(err.label, err.count, "clustering before epoch " + std::to_string(e + 1) + ": ");
                }
                ev.k_per_class.push_back(s.clusters.back().k_per_class());
                std::vector<bool> caps;
                for (const auto& c : s.clusters.back().classes) caps.push_back(c.cap_reached);
                ev.cap_reached.push_back(std::move(caps));
            }
            s.events.push_back(std::move(ev));
        }

        const auto perm = shuffle_rng.substream(e).permutation(n);
        double sum_ace = 0.0, sum_akd = 0.0, sum_kl = 0.0, sum_hybrid = 0.0;
        std::size_t skipped = 0;
        std::vector<std::size_t> rows;
        std::vector<int> yb;
        for (std::size_t start = 0, batch = 0; start < n; start += config.batch_size, ++batch) {
            const std::size_t stop = std::min(n, start + config.batch_size);
            rows.assign(perm.begin() + static_cast<std::ptrdiff_t>(start), perm.begin() + static_cast<std::ptrdiff_t>(stop));
            yb.clear();
            for (std::size_t i : rows) yb.push_back(tr.y[i]);
            const Matrix xb = gather_rows(tr.x, rows);
            const ForwardTrace trace = forward_trace(config.network, s.params, xb);

            double l_ace = 0.0, l_akd = 0.0, l_kl = 0.0, l_hybrid = 0.0;
            TapGradients upstream;
            if (config.mode == TrainMode::erm) {
                CeResult ce = cross_entropy(trace.taps.deep_logits, yb);
                l_ace = l_hybrid = ce.value;
                upstream.deep_logits = std::move(ce.grad);
            } else if (!hybrid_phase) {
                LossTerm ace = ace_loss(trace.taps, yb);
                l_ace = l_hybrid = ace.value;
                upstream = std::move(ace.grad);
            } else {
                std::vector<std::vector<int>> assignments(ntaps);
                for (std::size_t t = 0; t < ntaps; ++t) {
                    if (config.assignment == AssignmentMode::frozen) {
                        for (std::size_t i : rows) assignments[t].push_back(s.clusters[t].assignments[i]);
                    } else {
                        const Matrix& feats = config.cluster_source == ClusterSource::raw
                                                  ? trace.taps.shallow_raw[t]
                                                  : trace.taps.shallow_features[t];
                        assignments[t] = assign(s.clusters[t], feats, yb);
                    }
                }
                LossBreakdown lb = hybrid_loss(trace.taps, yb, assignments, hybrid);
                l_ace = lb.l_ace;
                l_akd = lb.l_akd;
                l_kl = lb.l_kl;
                l_hybrid = lb.l_hybrid;
                skipped += lb.akd_diagnostics.skipped_terms;
                upstream = std::move(lb.total_grad);
            }
            if (!std::isfinite(l_hybrid) || !finite_tree(upstream))
                abort_non_finite(e + 1, batch, rows, xb, l_ace, l_akd, l_kl, "loss");
            const Gradients grads = backward(config.network, s.params, trace, upstream);
            if (!all_finite(grads)) abort_non_finite(e + 1, batch, rows, xb, l_ace, l_akd, l_kl, "gradient");
            adam_step(s.params, grads, s.adam, config);

            const auto w = static_cast<double>(rows.size());
            sum_ace += w * l_ace;
            sum_akd += w * l_akd;
            sum_kl += w * l_kl;
            sum_hybrid += w * l_hybrid;
        }

        EpochRecord er;
        er.epoch = e + 1;
        er.alpha = hybrid_phase ? config.alpha : 0.0;
        er.l_ace = sum_ace / static_cast<double>(n);
        er.l_akd = sum_akd / static_cast<double>(n);
        er.l_kl = sum_kl / static_cast<double>(n);
        er.l_hybrid = sum_hybrid / static_cast<double>(n);
        er.skipped_terms = skipped;
        for (const auto& c : s.clusters) er.k_per_class.push_back(c.k_per_class());
        const GroupMetrics vm = group_metrics(predict(config.network, s.params, val.x), val);
        er.val_unbiased_acc = vm.unbiased_accuracy;
        er.val_worst_group_acc = vm.worst_group_accuracy;
        if (vm.unbiased_accuracy > s.best_val) {
            s.best_val = vm.unbiased_accuracy;
            s.best_epoch = e + 1;
            s.best_params = s.params;
        }
        s.epochs.push_back(std::move(er));
        s.epochs_done = e + 1;

        if (options.checkpoint_path && options.checkpoint_every > 0 && (e + 1) % options.checkpoint_every == 0)
            save(*options.checkpoint_path);
        if (options.stop_after_epoch && e + 1 >= *options.stop_after_epoch && e + 1 < config.total_epochs) {
            rec.completed = false;
            break;
        }
    }

    if (options.checkpoint_path) {
        save(*options.checkpoint_path);
        rec.checkpoint = options.checkpoint_path;
    }

    rec.epochs = s.epochs;
    rec.cluster_events = s.events;
    rec.final_params = s.params;
    rec.best_params = s.best_params;
    rec.best_epoch = s.best_epoch;
    rec.cluster_models = s.clusters;
    rec.final_val = group_metrics(predict(config.network, s.params, val.x), val);
    rec.best_val = group_metrics(predict(config.network, s.best_params, val.x), val);
    if (test.size() > 0) {
        rec.final_test = group_metrics(predict(config.network, s.params, test.x), test);
        rec.best_test = group_metrics(predict(config.network, s.best_params, test.x), test);
    }
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return rec;
}

}  // namespace debias
