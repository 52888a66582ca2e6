#include <cstdlib>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "debias/errors.hpp"
#include "debias/experiment.hpp"

namespace debias {

namespace {

std::filesystem::path resolve_output(const std::filesystem::path& dir) {
    if (dir.is_absolute()) return dir;
    if (const char* root = std::getenv("DEBIAS_OUTPUT_ROOT"); root && *root) return std::filesystem::path(root) / dir;
    return dir;
}

std::vector<std::string> split_csv(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        const auto b = item.find_first_not_of(" \t");
        const auto e = item.find_last_not_of(" \t");
        out.push_back(b == std::string::npos ? "" : item.substr(b, e - b + 1));
    }
    return out;
}

std::string dir_name(const std::string& axis, const std::string& value) {
    std::string safe;
    for (char c : value) safe += (std::isalnum(static_cast<unsigned char>(c)) || c == '.' || c == '-' || c == '_') ? c : '_';
    return axis + "_" + safe;
}

int guarded(const std::function<void()>& body) {
    try {
        body();
        return 0;
    } catch (const validation_error& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "runtime error: " << e.what() << "\n";
        return 3;
    }
}

void print_summary(const std::vector<RunSummary>& results) {
    for (const auto& r : results)
        std::cout << "seed " << r.seed << " " << to_string(r.mode) << ": val unbiased " << r.final_val.unbiased_accuracy
                  << ", worst-group " << r.final_val.worst_group_accuracy << "\n";
}

}  // namespace

int cli_main(int argc, char** argv) {
    CLI::App app{"Unsupervised debiasing by deep-to-shallow self-distillation on synthetic biased data"};
    app.require_subcommand(1);

    std::string config_path;
    unsigned jobs = 1;
    std::optional<std::uint64_t> seed_override;
    auto* run = app.add_subcommand("run", "Train every requested mode and write artifacts");
    run->add_option("--config", config_path, "JSON experiment config")->required();
    run->add_option("--jobs", jobs, "Concurrent runs")->check(CLI::PositiveNumber);
    run->add_option("--seed-override", seed_override, "Run only this seed");

    std::string axis, values;
    auto* sweep = app.add_subcommand("sweep", "Repeat the experiment once per axis value");
    sweep->add_option("--config", config_path, "JSON experiment config")->required();
    sweep->add_option("--axis", axis, "gamma | alpha | shallow_tap_block | fixed_K | distance_kind | recluster_every")
        ->required();
    sweep->add_option("--values", values, "Comma-separated values")->required();
    sweep->add_option("--jobs", jobs, "Concurrent runs")->check(CLI::PositiveNumber);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    if (run->parsed()) {
        return guarded([&] {
            ExperimentConfig cfg = load_experiment(config_path);
            if (seed_override) cfg.seeds = {*seed_override};
            const auto out = resolve_output(cfg.output_dir);
            print_summary(run_experiment(cfg, out, jobs));
            std::cout << "artifacts in " << out.string() << "\n";
        });
    }
    return guarded([&] {
        const ExperimentConfig base = load_experiment(config_path);
        const auto vals = split_csv(values);
        if (vals.empty()) throw validation_error("--values must list at least one value");
        std::vector<ExperimentConfig> configs;
        for (const auto& v : vals) {
            ExperimentConfig cfg = base;
            apply_axis(cfg, axis, v);
            cfg.validate();
            configs.push_back(std::move(cfg));
        }
        const auto root = resolve_output(base.output_dir);
        std::string table = axis + ",mode,seed,val_unbiased,val_worst_group\n";
        for (std::size_t i = 0; i < configs.size(); ++i) {
            std::cout << "== " << axis << " = " << vals[i] << "\n";
            const auto results = run_experiment(configs[i], root / dir_name(axis, vals[i]), jobs);
            print_summary(results);
            for (const auto& r : results) {
                std::ostringstream row;
                row.precision(17);
                row << vals[i] << ',' << to_string(r.mode) << ',' << r.seed << ',' << r.final_val.unbiased_accuracy << ','
                    << r.final_val.worst_group_accuracy << '\n';
                table += row.str();
            }
        }
        std::filesystem::create_directories(root);
        std::ofstream(root / "sweep.csv", std::ios::binary) << table;
    });
}

}  // namespace debias
