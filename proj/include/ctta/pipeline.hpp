#pragma once

// End-to-end experiment wiring: pretrain -> source prototypes -> stream ->
// adapt -> report, plus output-directory writing and parameter sweeps.

#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "config.hpp"
#include "engine.hpp"
#include "metrics.hpp"
#include "prototypes.hpp"
#include "streams.hpp"
#include "training.hpp"

namespace ctta {

/// The pretrained source model and everything derived from it before deployment.
struct SourceArtifacts {
    Model model;
    SourcePrototypes prototypes;
    double heldout_accuracy = 0.0;  // fraction, frozen statistics
};

inline SourceArtifacts prepare_source(const ExperimentConfig& cfg) {
    const SyntheticTask task = cfg.task();
    const LabeledDataset full = make_source_dataset(task, cfg.source_per_class, derive_seed(cfg.data_seed, 1));
    const DatasetSplit split = split_by_parity(full);
    Model model = pretrain_source(Model(cfg.model_config()), split.train, cfg.pretrain_config());
    SourcePrototypes protos = build_source_prototypes(model, split.train, cfg.source_cap, derive_seed(cfg.data_seed, 2));
    const double acc = frozen_accuracy(model, split.heldout);
    return {std::move(model), std::move(protos), acc};
}

inline std::vector<DomainSpec> domain_sequence(const ExperimentConfig& cfg) {
    return make_domain_sequence(cfg.corruptions, cfg.severity, cfg.order, cfg.shuffle_seed, cfg.clean_last);
}

inline DomainStream build_stream(const ExperimentConfig& cfg) {
    const auto specs = domain_sequence(cfg);
    return make_stream(cfg.task(), specs, cfg.target_per_domain, derive_seed(cfg.data_seed, 3));
}

struct ExperimentResult {
    RunReport report;
    ordered_json summary;
    Model adapted_model;
    Tensor final_target_prototypes;
    Tensor last_target_gt;
};

namespace detail {
struct TargetGtCapture : StreamObserver {
    Tensor last;
    void on_domain_end(const AdaptationState&, std::size_t, const Tensor& gt) override { last = gt; }
};
}  // namespace detail

inline ordered_json make_summary(const ExperimentConfig& cfg, const RunReport& report, double source_heldout_accuracy) {
    ordered_json s;
    s["version"] = kVersionString;
    s["method"] = std::string(to_string(cfg.method));
    s["source_heldout_accuracy"] = 100.0 * source_heldout_accuracy;
    const ordered_json metrics = summarize(report);
    for (const auto& [k, v] : metrics.items()) s[k] = v;
    return s;
}

/// Runs one configuration. `source` may be shared across runs with the same
/// task, model and pretraining settings.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg, const SourceArtifacts& source) {
    cfg.validate();
    const DomainStream stream = build_stream(cfg);
    AdaptationState state(source.model, source.prototypes, cfg.adapt_config());
    detail::TargetGtCapture capture;
    RunReport report = run_stream(state, stream, cfg.batch_size, &capture);
    ordered_json summary = make_summary(cfg, report, source.heldout_accuracy);
    return {std::move(report), std::move(summary), state.model(), state.target_prototypes().matrix(),
            std::move(capture.last)};
}

inline ExperimentResult run_experiment(const ExperimentConfig& cfg) { return run_experiment(cfg, prepare_source(cfg)); }

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    os << text;
    if (!os) throw std::runtime_error("write failed: " + path.string());
}

/// Writes every output file of a run into `dir`.
inline void write_outputs(const std::filesystem::path& dir, const ExperimentConfig& cfg,
                          const SourceArtifacts& source, const ExperimentResult& result) {
    std::filesystem::create_directories(dir);
    write_text(dir / "config.resolved", config_to_json(cfg.resolved()).dump(2) + "\n");
    write_text(dir / "summary.json", result.summary.dump(2) + "\n");
    write_text(dir / "report.json", report_to_json(result.report).dump() + "\n");
    {
        std::ostringstream os;
        write_metrics_csv(os, result.report);
        write_text(dir / "metrics.csv", os.str());
    }
    {
        std::ostringstream os;
        write_calibration_csv(os, calibration(result.report));
        write_text(dir / "calibration.csv", os.str());
    }
    {
        std::ostringstream os;
        write_prototype_csv(os, "source", source.prototypes.matrix(), true);
        write_prototype_csv(os, "target", result.final_target_prototypes, false);
        if (!result.last_target_gt.empty()) write_prototype_csv(os, "target-gt", result.last_target_gt, false);
        write_text(dir / "prototypes.csv", os.str());
    }
    source.model.save((dir / "model_source.ckpt").string());
    result.adapted_model.save((dir / "model_adapted.ckpt").string());
}

inline ExperimentConfig load_config_file(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError({"config: cannot open " + path.string()});
    nlohmann::ordered_json j;
    try {
        j = nlohmann::ordered_json::parse(is);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError({std::string("config: parse error: ") + e.what()});
    }
    return config_from_json(j);
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

enum class SweepAxis { batch_size, alpha, lambda_ema, lambda_src };

inline std::string_view to_string(SweepAxis a) {
    switch (a) {
    case SweepAxis::batch_size: return "batch-size";
    case SweepAxis::alpha: return "alpha";
    case SweepAxis::lambda_ema: return "lambda-ema";
    case SweepAxis::lambda_src: return "lambda-src";
    }
    return "unknown";
}

inline SweepAxis parse_sweep_axis(std::string_view s) {
    for (SweepAxis a : {SweepAxis::batch_size, SweepAxis::alpha, SweepAxis::lambda_ema, SweepAxis::lambda_src})
        if (to_string(a) == s) return a;
    throw std::invalid_argument("unknown sweep axis: " + std::string(s));
}

inline ExperimentConfig with_axis_value(ExperimentConfig cfg, SweepAxis axis, double value) {
    switch (axis) {
    case SweepAxis::batch_size:
        if (value < 2 || value != std::floor(value)) throw std::invalid_argument("batch size must be an integer >= 2");
        cfg.batch_size = static_cast<std::size_t>(value);
        break;
    case SweepAxis::alpha: cfg.alpha = value; break;
    case SweepAxis::lambda_ema: cfg.lambda_ema = value; break;
    case SweepAxis::lambda_src: cfg.lambda_src = value; break;
    }
    return cfg;
}

struct SweepRow {
    double value = 0.0;
    std::string directory;
    std::optional<ordered_json> summary;  // empty when the run failed
    std::string error;
};

/// One run per value with shared seeds and a shared source model.
/// Each run's outputs go to `<out>/<axis>=<value>/`; failures are recorded and the sweep continues.
inline std::vector<SweepRow> run_sweep(const ExperimentConfig& base, SweepAxis axis, std::span<const double> values) {
    if (values.empty()) throw std::invalid_argument("sweep: need at least one value");
    base.validate();
    const SourceArtifacts source = prepare_source(base);
    std::vector<SweepRow> rows;
    for (double v : values) {
        SweepRow row;
        row.value = v;
        std::ostringstream name;
        name << to_string(axis) << '=' << detail::format_double(v);
        row.directory = name.str();
        try {
            ExperimentConfig cfg = with_axis_value(base, axis, v);
            cfg.output_dir = (std::filesystem::path(base.output_dir) / row.directory).string();
            cfg.validate();
            const ExperimentResult result = run_experiment(cfg, source);
            write_outputs(cfg.output_dir, cfg, source, result);
            row.summary = result.summary;
        } catch (const std::exception& e) {
            row.error = e.what();
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

/// Columns: axis,value,status,mean_accuracy,pooled_accuracy,bias,ece,high_confidence_fraction,acc_<domain>...
inline void write_sweep_csv(std::ostream& os, SweepAxis axis, std::span<const SweepRow> rows) {
    using detail::format_double;
    std::vector<std::string> domain_names;
    for (const SweepRow& r : rows)
        if (r.summary) {
            for (const auto& d : (*r.summary)["domains"]) domain_names.push_back(d["name"].get<std::string>());
            break;
        }
    os << "axis,value,status,mean_accuracy,pooled_accuracy,bias,ece,high_confidence_fraction";
    for (const auto& n : domain_names) os << ",acc_" << n;
    os << '\n';
    for (const SweepRow& r : rows) {
        os << to_string(axis) << ',' << format_double(r.value) << ',';
        if (!r.summary) {
            os << "error";
            for (std::size_t i = 0; i < 5 + domain_names.size(); ++i) os << ',';
            os << '\n';
            continue;
        }
        const auto& o = (*r.summary)["overall"];
        os << "ok," << format_double(o["mean_accuracy"].get<double>()) << ','
           << format_double(o["pooled_accuracy"].get<double>()) << ',' << format_double(o["bias"].get<double>()) << ','
           << format_double(o["ece"].get<double>()) << ','
           << format_double(o["high_confidence_fraction"].get<double>());
        for (const auto& d : (*r.summary)["domains"]) os << ',' << format_double(d["accuracy"].get<double>());
        os << '\n';
    }
}

}  // namespace ctta
