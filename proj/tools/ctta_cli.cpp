// Command-line runner for continual adaptation experiments.
//
//   ctta run --config exp.json --method tent --out runs/tent
//   ctta run --sweep alpha 0.9,0.96,0.99,0.996,0.999 --out runs/alpha
//   ctta dump-dataset --out stream.bin

#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ctta/ctta.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitConfig = 2;
constexpr int kExitNumerical = 3;

struct Overrides {
    std::string config_path;
    std::optional<std::string> method;
    std::optional<std::size_t> batch_size;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> order;
    std::optional<std::string> out;
};

ctta::ExperimentConfig load_with_overrides(const Overrides& o) {
    ctta::ExperimentConfig cfg = o.config_path.empty() ? ctta::ExperimentConfig{} : ctta::load_config_file(o.config_path);
    std::vector<std::string> errors;
    if (o.method) {
        try {
            cfg.method = ctta::parse_method(*o.method);
        } catch (const std::invalid_argument& e) {
            errors.push_back(std::string("--method: ") + e.what());
        }
    }
    if (o.batch_size) cfg.batch_size = *o.batch_size;
    if (o.seed) cfg.data_seed = cfg.model_seed = cfg.shuffle_seed = *o.seed;
    if (o.order) {
        if (*o.order == "fixed")
            cfg.order = ctta::DomainOrder::fixed;
        else if (*o.order == "shuffled")
            cfg.order = ctta::DomainOrder::shuffled;
        else
            errors.push_back("--order: expected fixed or shuffled, got " + *o.order);
    }
    if (o.out) cfg.output_dir = *o.out;
    if (!errors.empty()) throw ctta::ConfigError(errors);
    cfg.validate();
    return cfg;
}

std::vector<double> parse_values(const std::string& list) {
    std::vector<double> values;
    std::stringstream ss(list);
    std::string item;
    while (std::getline(ss, item, ',')) {
        std::size_t used = 0;
        double v = 0.0;
        try {
            v = std::stod(item, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used == 0 || used != item.size()) throw ctta::ConfigError({"--sweep: not a number: '" + item + "'"});
        values.push_back(v);
    }
    if (values.empty()) throw ctta::ConfigError({"--sweep: need at least one value"});
    return values;
}

void print_summary_line(const ctta::ordered_json& summary) {
    const auto& o = summary["overall"];
    std::printf("%s: mean accuracy %.2f%%, bias %.4f, ECE %.4f\n", summary["method"].get<std::string>().c_str(),
                o["mean_accuracy"].get<double>(), o["bias"].get<double>(), o["ece"].get<double>());
}

int run_single(const ctta::ExperimentConfig& cfg) {
    const ctta::SourceArtifacts source = ctta::prepare_source(cfg);
    const ctta::ExperimentResult result = ctta::run_experiment(cfg, source);
    ctta::write_outputs(cfg.output_dir, cfg, source, result);
    print_summary_line(result.summary);
    std::printf("outputs written to %s\n", cfg.output_dir.c_str());
    return kExitOk;
}

int run_sweep(const ctta::ExperimentConfig& cfg, const std::vector<std::string>& sweep) {
    ctta::SweepAxis axis{};
    try {
        axis = ctta::parse_sweep_axis(sweep.at(0));
    } catch (const std::invalid_argument& e) {
        throw ctta::ConfigError({std::string("--sweep: ") + e.what()});
    }
    const std::vector<double> values = parse_values(sweep.at(1));
    const auto rows = ctta::run_sweep(cfg, axis, values);
    std::ostringstream csv;
    ctta::write_sweep_csv(csv, axis, rows);
    std::filesystem::create_directories(cfg.output_dir);
    ctta::write_text(std::filesystem::path(cfg.output_dir) / "sweep.csv", csv.str());
    std::size_t failed = 0;
    for (const auto& row : rows) {
        if (row.summary) {
            std::printf("%s  ", row.directory.c_str());
            print_summary_line(*row.summary);
        } else {
            ++failed;
            std::fprintf(stderr, "%s: %s\n", row.directory.c_str(), row.error.c_str());
        }
    }
    std::printf("sweep written to %s\n", (std::filesystem::path(cfg.output_dir) / "sweep.csv").string().c_str());
    return failed == 0 ? kExitOk : kExitFailure;
}

int dump_dataset(const ctta::ExperimentConfig& cfg, const std::string& path) {
    const ctta::DomainStream stream = ctta::build_stream(cfg);
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + path);
    ctta::write_dataset_dump(os, stream, cfg.image_size);
    if (!os) throw std::runtime_error("write failed: " + path);
    std::printf("%zu samples in %zu domains written to %s\n", stream.total_samples(), stream.domains.size(),
                path.c_str());
    for (std::size_t k = 0; k < stream.domains.size(); ++k)
        std::printf("  domain %zu: %s\n", k, stream.domains[k].spec.name().c_str());
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Continual test-time adaptation with prototype regularization"};
    app.set_version_flag("--version", std::string(ctta::kVersionString));
    app.require_subcommand(1);

    Overrides run_opts;
    std::vector<std::string> sweep;
    CLI::App* run = app.add_subcommand("run", "Pretrain, adapt over the domain stream and write outputs");
    auto add_common = [](CLI::App* cmd, Overrides& o) {
        cmd->add_option("--config", o.config_path, "JSON config file (defaults apply when omitted)");
        cmd->add_option("--seed", o.seed, "Sets the data, model and shuffle seeds");
        cmd->add_option("--order", o.order, "Domain order: fixed or shuffled");
    };
    add_common(run, run_opts);
    run->add_option("--method", run_opts.method, "source, tent, ours-only or tent+ours");
    run->add_option("--batch-size", run_opts.batch_size, "Test batch size");
    run->add_option("--out", run_opts.out, "Output directory");
    run->add_option("--sweep", sweep, "Axis and comma-separated values, e.g. --sweep alpha 0.9,0.99")->expected(2);

    Overrides dump_opts;
    std::string dump_path = "dataset.bin";
    CLI::App* dump = app.add_subcommand("dump-dataset", "Write the target stream as a binary dataset file");
    add_common(dump, dump_opts);
    dump->add_option("--out", dump_path, "Output file");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitConfig;
    }

    try {
        if (*run) {
            const ctta::ExperimentConfig cfg = load_with_overrides(run_opts);
            return sweep.empty() ? run_single(cfg) : run_sweep(cfg, sweep);
        }
        return dump_dataset(load_with_overrides(dump_opts), dump_path);
    } catch (const ctta::ConfigError& e) {
        std::fprintf(stderr, "config error:\n");
        for (const auto& d : e.diagnostics()) std::fprintf(stderr, "  %s\n", d.c_str());
        return kExitConfig;
    } catch (const ctta::NumericalAbort& e) {
        std::fprintf(stderr, "numerical abort at step %zu: %s\n", e.step(), e.what());
        return kExitNumerical;
    } catch (const ctta::DivergenceError& e) {
        std::fprintf(stderr, "source pretraining diverged: %s\n", e.what());
        return kExitNumerical;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitFailure;
    }
}
