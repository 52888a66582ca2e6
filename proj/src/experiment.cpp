#include "debias/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <exception>
#include <fstream>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

#include "debias/errors.hpp"
#include "debias/json_reader.hpp"

namespace debias {

TrainConfig desk_train_config() {
    TrainConfig c;
    c.learning_rate = 1e-3;
    c.alpha = 3.0;
    c.detach_deep_in_akd = true;
    c.assignment = AssignmentMode::frozen;
    c.cluster_source = ClusterSource::raw;
    c.cluster.normalization = ClusterNormalization::rms;
    c.cluster.fixed_k = 2;
    return c;
}

BiasSpec desk_bias_spec() {
    BiasSpec s;
    s.attributes = {BiasAttribute{"a0", 2, 0.95, 2, 16.0}};
    s.core_signal_dims = 2;
    s.noise_dims = 16;
    s.core_margin = 3.3;
    return s;
}

namespace {

std::string prefixed(const std::string& prefix, const std::exception& e) { return prefix + e.what(); }

bool valid_layer(const NetworkConfig& net, const std::string& layer) {
    for (int b = 1; b <= 4; ++b)
        if (layer == "block" + std::to_string(b)) return true;
    for (int t : net.shallow_taps)
        if (layer == "aligned" + std::to_string(t)) return true;
    return false;
}

}  // namespace

void ExperimentConfig::validate() const {
    try {
        dataset.validate();
    } catch (const validation_error& e) {
        throw validation_error(prefixed("dataset.", e));
    }
    const std::size_t groups = dataset.group_count();
    if (sizes.train < 10 * groups)
        throw validation_error("dataset.n_train must be >= 10 x " + std::to_string(groups) + " groups");
    if (sizes.val < groups) throw validation_error("dataset.n_val must cover every group");
    if (sizes.test < groups) throw validation_error("dataset.n_test must cover every group");
    try {
        train.validate();
    } catch (const validation_error& e) {
        throw validation_error(prefixed("train.", e));
    }
    if (train.network.input_dim != dataset.feature_dim())
        throw validation_error("train.network.input_dim must equal the dataset feature count (" +
                               std::to_string(dataset.feature_dim()) + ")");
    if (train.network.num_classes != static_cast<std::size_t>(dataset.num_classes))
        throw validation_error("train.network.num_classes must equal dataset.num_classes");
    for (const auto& layer : eval.layers)
        if (!valid_layer(train.network, layer))
            throw validation_error("eval.layers: unknown layer '" + layer + "'");
    if (eval.probe_options.max_steps < 1) throw validation_error("eval.probe_steps must be >= 1");
    if (!(eval.probe_options.learning_rate > 0.0)) throw validation_error("eval.probe_learning_rate must be > 0");
    if (comparisons.empty()) throw validation_error("comparisons must name at least one mode");
    if (output_dir.empty()) throw validation_error("output_dir must not be empty");
    for (const auto& part : output_dir)
        if (part == "..") throw validation_error("output_dir must not contain '..'");
}

ExperimentConfig experiment_from_json(const nlohmann::json& j) {
    ExperimentConfig c;
    StrictReader r(j, "");
    r.read("preset", c.preset);
    if (c.preset != "paper" && c.preset != "desk")
        throw validation_error("preset must be \"paper\" or \"desk\"");
    c.dataset = desk_bias_spec();
    if (c.preset == "desk") c.train = desk_train_config();

    if (r.has("dataset")) {
        StrictReader d(r.at("dataset"), "dataset");
        d.read("num_classes", c.dataset.num_classes);
        if (d.has("attributes")) {
            const auto& attrs = d.at("attributes");
            if (!attrs.is_array()) throw validation_error("dataset.attributes must be an array");
            c.dataset.attributes.clear();
            for (std::size_t i = 0; i < attrs.size(); ++i) {
                const std::string path = "dataset.attributes[" + std::to_string(i) + "]";
                StrictReader a(attrs[i], path);
                BiasAttribute attr;
                attr.name = "a" + std::to_string(i);
                a.read("name", attr.name);
                a.read("cardinality", attr.cardinality);
                a.read("alignment_ratio", attr.alignment_ratio);
                a.read_count("signal_dims", attr.signal_dims);
                a.read("margin", attr.margin);
                a.finish();
                c.dataset.attributes.push_back(std::move(attr));
            }
        }
        d.read_count("core_signal_dims", c.dataset.core_signal_dims);
        d.read_count("noise_dims", c.dataset.noise_dims);
        d.read("core_margin", c.dataset.core_margin);
        d.read("noise_std", c.dataset.noise_std);
        d.read_count("n_train", c.sizes.train);
        d.read_count("n_val", c.sizes.val);
        d.read_count("n_test", c.sizes.test);
        d.read_u64("seed", c.dataset_seed);
        d.finish();
    }

    c.train.network.input_dim = c.dataset.feature_dim();
    c.train.network.num_classes = static_cast<std::size_t>(std::max(c.dataset.num_classes, 0));
    if (r.has("train")) c.train = train_config_from_json(r.at("train"), c.train);

    if (r.has("eval")) {
        StrictReader e(r.at("eval"), "eval");
        e.read("probe", c.eval.probe);
        if (e.has("layers")) {
            const auto& l = e.at("layers");
            if (!l.is_array()) throw validation_error("eval.layers must be an array of strings");
            c.eval.layers.clear();
            for (const auto& v : l) {
                if (!v.is_string()) throw validation_error("eval.layers must be an array of strings");
                c.eval.layers.push_back(v.get<std::string>());
            }
        }
        e.read_count("probe_steps", c.eval.probe_options.max_steps);
        e.read("probe_learning_rate", c.eval.probe_options.learning_rate);
        e.finish();
    }
    if (r.has("output_dir")) {
        std::string dir;
        r.read("output_dir", dir);
        c.output_dir = dir;
    }
    if (r.has("comparisons")) {
        const auto& m = r.at("comparisons");
        if (!m.is_array()) throw validation_error("comparisons must be an array of mode names");
        c.comparisons.clear();
        for (const auto& v : m) {
            if (!v.is_string()) throw validation_error("comparisons must be an array of mode names");
            try {
                c.comparisons.push_back(train_mode_from_string(v.get<std::string>()));
            } catch (const validation_error& e) {
                throw validation_error(prefixed("comparisons: ", e));
            }
        }
    }
    if (r.has("seeds")) {
        const auto& s = r.at("seeds");
        if (!s.is_array()) throw validation_error("seeds must be an array of non-negative integers");
        for (const auto& v : s) {
            if (!v.is_number_unsigned()) throw validation_error("seeds must be an array of non-negative integers");
            c.seeds.push_back(v.get<std::uint64_t>());
        }
        if (c.seeds.empty()) throw validation_error("seeds must not be empty when given");
    }
    r.finish();
    c.validate();
    return c;
}

nlohmann::json to_json(const ExperimentConfig& c) {
    nlohmann::json attrs = nlohmann::json::array();
    for (const auto& a : c.dataset.attributes)
        attrs.push_back({{"name", a.name},
                         {"cardinality", a.cardinality},
                         {"alignment_ratio", a.alignment_ratio},
                         {"signal_dims", a.signal_dims},
                         {"margin", a.margin}});
    nlohmann::json modes = nlohmann::json::array();
    for (auto m : c.comparisons) modes.push_back(std::string(to_string(m)));
    return {{"preset", c.preset},
            {"dataset",
             {{"num_classes", c.dataset.num_classes},
              {"attributes", attrs},
              {"core_signal_dims", c.dataset.core_signal_dims},
              {"noise_dims", c.dataset.noise_dims},
              {"core_margin", c.dataset.core_margin},
              {"noise_std", c.dataset.noise_std},
              {"n_train", c.sizes.train},
              {"n_val", c.sizes.val},
              {"n_test", c.sizes.test},
              {"seed", c.dataset_seed}}},
            {"train", to_json(c.train)},
            {"eval",
             {{"probe", c.eval.probe},
              {"layers", c.eval.layers},
              {"probe_steps", c.eval.probe_options.max_steps},
              {"probe_learning_rate", c.eval.probe_options.learning_rate}}},
            {"output_dir", c.output_dir.generic_string()},
            {"comparisons", modes},
            {"seeds", c.seeds}};
}

ExperimentConfig load_experiment(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw validation_error("cannot read config file " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    const std::string text = ss.str();
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        std::size_t line = 1, col = 1;
        for (std::size_t i = 0; i + 1 < e.byte && i < text.size(); ++i) {
            if (text[i] == '\n') {
                ++line;
                col = 1;
            } else {
                ++col;
            }
        }
        throw validation_error(path.string() + ":" + std::to_string(line) + ":" + std::to_string(col) +
                               ": JSON syntax error");
    }
    return experiment_from_json(j);
}

BiasedDataset make_dataset(const BiasSpec& spec, const SplitSizes& sizes, std::uint64_t seed) {
    return generate(spec, sizes, SeededRng(seed).substream("data"));
}

std::vector<DecodabilityRow> probe_layers(const ExperimentConfig& config, const TrainConfig& train,
                                          const NetworkParams& params, const BiasedDataset& ds, std::uint64_t seed) {
    std::vector<DecodabilityRow> rows;
    const DatasetSlice val = slice(ds, Split::val);
    const SeededRng root = SeededRng(seed).substream("probe");
    for (const auto& layer : config.eval.layers) {
        const Matrix feats = layer_activations(train.network, params, val.x, layer);
        for (std::size_t k = 0; k < val.a.size(); ++k) {
            const ProbeResult pr = decodability_probe(feats, val.a[k], root.substream(layer).substream(k),
                                                      config.eval.probe_options);
            rows.push_back(DecodabilityRow{layer, std::string(to_string(train.mode)), config.dataset.attributes[k].name,
                                           pr.accuracy, pr.steps, pr.learning_rate});
        }
    }
    return rows;
}

namespace {

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
    out << text;
    if (!out) throw std::runtime_error("write failed: " + path.string());
}

std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t h = v.size() / 2;
    return v.size() % 2 ? v[h] : 0.5 * (v[h - 1] + v[h]);
}

RunSummary execute(const ExperimentConfig& config, std::uint64_t seed, TrainMode mode,
                   const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    const std::uint64_t data_seed = config.seeds.empty() ? config.dataset_seed : seed;
    const BiasedDataset ds = make_dataset(config.dataset, config.sizes, data_seed);
    TrainConfig tc = config.train;
    tc.mode = mode;
    tc.seed = seed;
    TrainOptions opts;
    opts.checkpoint_path = dir / "checkpoint.json";
    RunRecord rec;
    try {
        rec = train(tc, ds, opts);
    } catch (const std::exception& e) {
        write_text(dir / "diagnostics.txt", std::string(e.what()) + "\n");
        throw;
    }
    write_metrics_jsonl(rec, dir / "metrics.jsonl");

    nlohmann::json events = nlohmann::json::array();
    for (const auto& ev : rec.cluster_events)
        events.push_back({{"epoch", ev.epoch}, {"K_per_class", ev.k_per_class}, {"cap_reached", ev.cap_reached}});
    const nlohmann::json metrics = {{"seed", seed},
                                    {"mode", std::string(to_string(mode))},
                                    {"final_epoch", rec.epochs.size()},
                                    {"final_val", to_json(rec.final_val)},
                                    {"final_test", to_json(rec.final_test)},
                                    {"best_epoch", rec.best_epoch},
                                    {"best_val", to_json(rec.best_val)},
                                    {"best_test", to_json(rec.best_test)},
                                    {"cluster_events", events}};
    write_text(dir / "group_metrics.json", metrics.dump(2) + "\n");
    write_group_csv(rec.final_test, dir / "test_groups.csv");
    if (!rec.cluster_models.empty()) {
        nlohmann::json models = nlohmann::json::array();
        for (const auto& m : rec.cluster_models) models.push_back(to_json(m));
        write_text(dir / "clusters.json", models.dump() + "\n");
    }

    RunSummary s;
    s.seed = seed;
    s.mode = mode;
    s.final_val = rec.final_val;
    s.final_test = rec.final_test;
    s.best_val = rec.best_val;
    s.best_test = rec.best_test;
    s.best_epoch = rec.best_epoch;
    s.wall_seconds = rec.wall_seconds;
    if (config.eval.probe) {
        s.decodability = probe_layers(config, tc, rec.final_params, ds, seed);
        write_decodability_csv(s.decodability, dir / "decodability.csv");
    }
    return s;
}

}  // namespace

std::vector<RunSummary> run_experiment(const ExperimentConfig& config, const std::filesystem::path& output_dir,
                                       unsigned jobs) {
    config.validate();
    std::filesystem::create_directories(output_dir);
    write_text(output_dir / "config.json", to_json(config).dump(2) + "\n");

    const std::vector<std::uint64_t> seeds = config.seeds.empty() ? std::vector{config.train.seed} : config.seeds;
    struct Task {
        std::uint64_t seed;
        TrainMode mode;
        std::filesystem::path dir;
    };
    std::vector<Task> tasks;
    for (auto seed : seeds)
        for (auto mode : config.comparisons)
            tasks.push_back({seed, mode, output_dir / ("seed_" + std::to_string(seed)) / std::string(to_string(mode))});

    std::vector<RunSummary> results(tasks.size());
    std::vector<std::exception_ptr> errors(tasks.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next++; i < tasks.size(); i = next++) {
            try {
                results[i] = execute(config, tasks[i].seed, tasks[i].mode, tasks[i].dir);
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    const unsigned nthreads = std::max(1u, std::min<unsigned>(jobs, static_cast<unsigned>(tasks.size())));
    if (nthreads == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (unsigned t = 0; t < nthreads; ++t) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    for (const auto& e : errors)
        if (e) std::rethrow_exception(e);

    std::string runs = "seed,mode,val_unbiased,val_worst_group,test_unbiased,test_worst_group,best_epoch,"
                       "best_val_unbiased,best_val_worst_group,best_test_unbiased,best_test_worst_group\n";
    for (const auto& r : results)
        runs += std::to_string(r.seed) + "," + std::string(to_string(r.mode)) + "," + num(r.final_val.unbiased_accuracy) +
                "," + num(r.final_val.worst_group_accuracy) + "," + num(r.final_test.unbiased_accuracy) + "," +
                num(r.final_test.worst_group_accuracy) + "," + std::to_string(r.best_epoch) + "," +
                num(r.best_val.unbiased_accuracy) + "," + num(r.best_val.worst_group_accuracy) + "," +
                num(r.best_test.unbiased_accuracy) + "," + num(r.best_test.worst_group_accuracy) + "\n";
    write_text(output_dir / "runs.csv", runs);

    std::string summary = "mode,seeds,val_unbiased,val_worst_group,test_unbiased,test_worst_group,"
                          "best_val_unbiased,best_val_worst_group\n";
    for (auto mode : config.comparisons) {
        std::vector<double> vu, vw, tu, tw, bu, bw;
        for (const auto& r : results) {
            if (r.mode != mode) continue;
            vu.push_back(r.final_val.unbiased_accuracy);
            vw.push_back(r.final_val.worst_group_accuracy);
            tu.push_back(r.final_test.unbiased_accuracy);
            tw.push_back(r.final_test.worst_group_accuracy);
            bu.push_back(r.best_val.unbiased_accuracy);
            bw.push_back(r.best_val.worst_group_accuracy);
        }
        summary += std::string(to_string(mode)) + "," + std::to_string(vu.size()) + "," + num(median(vu)) + "," +
                   num(median(vw)) + "," + num(median(tu)) + "," + num(median(tw)) + "," + num(median(bu)) + "," +
                   num(median(bw)) + "\n";
    }
    write_text(output_dir / "summary.csv", summary);

    if (config.eval.probe) {
        // median over seeds, one row per (layer, method, attribute)
        std::map<std::tuple<std::string, std::string, std::string>, std::vector<double>> acc;
        std::vector<std::tuple<std::string, std::string, std::string>> order;
        for (const auto& r : results)
            for (const auto& d : r.decodability) {
                auto key = std::make_tuple(d.layer, d.method, d.attribute);
                if (!acc.count(key)) order.push_back(key);
                acc[key].push_back(d.accuracy);
            }
        std::string csv = "layer,method,attribute,accuracy\n";
        for (const auto& key : order)
            csv += std::get<0>(key) + "," + std::get<1>(key) + "," + std::get<2>(key) + "," + num(median(acc[key])) + "\n";
        write_text(output_dir / "decodability.csv", csv);
    }

    std::string timing = "seed,mode,wall_seconds\n";
    for (const auto& r : results)
        timing += std::to_string(r.seed) + "," + std::string(to_string(r.mode)) + "," + num(r.wall_seconds) + "\n";
    write_text(output_dir / "timing.csv", timing);
    return results;
}

void apply_axis(ExperimentConfig& config, std::string_view axis, std::string_view value) {
    const std::string v(value);
    auto as_real = [&] {
        std::size_t pos = 0;
        double d = 0.0;
        try {
            d = std::stod(v, &pos);
        } catch (const std::exception&) {
            pos = 0;
        }
        if (pos == 0 || pos != v.size()) throw validation_error("axis " + std::string(axis) + ": '" + v + "' is not a number");
        return d;
    };
    auto as_count = [&] {
        if (v.empty() || !std::all_of(v.begin(), v.end(), [](char ch) { return ch >= '0' && ch <= '9'; }))
            throw validation_error("axis " + std::string(axis) + ": '" + v + "' is not a non-negative integer");
        return static_cast<std::size_t>(std::stoull(v));
    };
    if (axis == "gamma") {
        config.train.cluster.gamma = as_real();
    } else if (axis == "alpha") {
        config.train.alpha = as_real();
    } else if (axis == "shallow_tap_block") {
        config.train.network.shallow_taps = {static_cast<int>(as_count())};
        for (auto& layer : config.eval.layers)
            if (layer.rfind("aligned", 0) == 0) layer = "aligned" + v;
    } else if (axis == "fixed_K") {
        if (v == "none" || v == "adaptive")
            config.train.cluster.fixed_k.reset();
        else
            config.train.cluster.fixed_k = as_count();
    } else if (axis == "distance_kind") {
        config.train.distance = distance_kind_from_string(v);
    } else if (axis == "recluster_every") {
        config.train.recluster_every = as_count();
    } else {
        std::string names;
        for (auto a : sweep_axes) names += (names.empty() ? "" : ", ") + std::string(a);
        throw validation_error("unknown sweep axis '" + std::string(axis) + "' (expected one of " + names + ")");
    }
}

}  // namespace debias
