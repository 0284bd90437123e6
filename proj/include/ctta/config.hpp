#pragma once

// Experiment configuration and its JSON schema (schema_version 1).
//
// Every field is optional in an input file; omitted fields take the defaults
// below. Unknown keys and wrongly typed values are rejected with the path of
// the offending field.

#include <cmath>
#include <cstdint>
#include <type_traits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "engine.hpp"
#include "losses.hpp"
#include "model.hpp"
#include "streams.hpp"
#include "training.hpp"

namespace ctta {

inline constexpr int kConfigSchemaVersion = 1;
inline constexpr const char* kVersionString = "ctta 1.0.0";

class ConfigError : public std::invalid_argument {
public:
    explicit ConfigError(std::vector<std::string> diagnostics)
        : std::invalid_argument(join(diagnostics)), diagnostics_(std::move(diagnostics)) {}
    const std::vector<std::string>& diagnostics() const noexcept { return diagnostics_; }

private:
    static std::string join(const std::vector<std::string>& d) {
        std::string s = "invalid configuration:";
        for (const auto& x : d) s += "\n  " + x;
        return s;
    }
    std::vector<std::string> diagnostics_;
};

struct ExperimentConfig {
    // task
    std::size_t num_classes = 10;
    std::size_t image_size = 16;
    std::size_t source_per_class = 500;
    std::size_t target_per_domain = 2000;
    std::vector<CorruptionKind> corruptions{kAllCorruptions.begin(), kAllCorruptions.end()};
    int severity = 5;
    bool clean_last = true;
    double orientation_jitter = SyntheticTask{}.orientation_jitter;
    double pixel_noise = SyntheticTask{}.pixel_noise;
    DomainOrder order = DomainOrder::fixed;

    // model
    std::vector<std::size_t> hidden{128, 128};
    std::size_t feature_dim = 64;

    // source pretraining
    std::size_t pretrain_epochs = 30;
    double pretrain_lr = 0.05;
    double pretrain_momentum = 0.9;
    std::size_t pretrain_batch_size = 64;
    std::size_t source_cap = kDefaultSourceCap;

    // adaptation
    Method method = Method::tent_ours;
    std::optional<double> lambda_ema;  // preset default when absent
    std::optional<double> lambda_src;
    double lambda_cons = 1.0;
    bool consistency = false;
    LabelMode label_mode = LabelMode::hard;
    bool filter_entropy = false;
    double alpha = 0.996;
    double e0_factor = 0.4;
    double lr = 2.5e-4;
    double momentum = 0.9;
    TrainScope scope = TrainScope::bn_affine;
    std::size_t batch_size = 64;

    // seeds
    std::uint64_t data_seed = 0;
    std::uint64_t model_seed = 0;
    std::uint64_t shuffle_seed = 0;

    std::string output_dir = "out";

    /// Fills preset-dependent defaults.
    ExperimentConfig resolved() const {
        ExperimentConfig c = *this;
        const LossWeights w = default_weights(method);
        if (!c.lambda_ema) c.lambda_ema = w.ema;
        if (!c.lambda_src) c.lambda_src = w.src;
        return c;
    }

    void validate() const {
        std::vector<std::string> errs;
        auto need = [&errs](bool ok, const char* msg) {
            if (!ok) errs.emplace_back(msg);
        };
        need(num_classes >= 2, "task.num_classes: must be at least 2");
        need(image_size >= 2, "task.image_size: must be at least 2");
        need(source_per_class >= 1, "task.source_per_class: must be at least 1");
        need(orientation_jitter >= 0.0 && std::isfinite(orientation_jitter),
             "task.orientation_jitter: must be finite and nonnegative");
        need(pixel_noise >= 0.0 && std::isfinite(pixel_noise), "task.pixel_noise: must be finite and nonnegative");
        need(severity >= 0 && severity <= 5, "task.severity: must be in [0, 5]");
        need(!corruptions.empty() || clean_last, "task.corruptions: stream would be empty");
        need(feature_dim >= 1, "model.feature_dim: must be positive");
        for (std::size_t h : hidden) need(h >= 1, "model.hidden: widths must be positive");
        need(pretrain_lr > 0.0, "pretrain.lr: must be positive");
        need(pretrain_momentum >= 0.0, "pretrain.momentum: must be nonnegative");
        need(pretrain_batch_size >= 2, "pretrain.batch_size: must be at least 2");
        need(source_cap >= 1, "pretrain.source_cap: must be positive");
        need(!lambda_ema || (*lambda_ema >= 0.0 && std::isfinite(*lambda_ema)),
             "adaptation.lambda_ema: must be finite and nonnegative");
        need(!lambda_src || (*lambda_src >= 0.0 && std::isfinite(*lambda_src)),
             "adaptation.lambda_src: must be finite and nonnegative");
        need(lambda_cons >= 0.0 && std::isfinite(lambda_cons), "adaptation.lambda_cons: must be finite and nonnegative");
        need(alpha > 0.0 && alpha < 1.0, "adaptation.alpha: must be in (0, 1)");
        need(e0_factor > 0.0 && std::isfinite(e0_factor), "adaptation.e0_factor: must be positive");
        need(lr > 0.0, "adaptation.lr: must be positive");
        need(momentum >= 0.0, "adaptation.momentum: must be nonnegative");
        need(batch_size >= 2, "adaptation.batch_size: must be at least 2");
        if (!errs.empty()) throw ConfigError(std::move(errs));
    }

    SyntheticTask task() const {
        SyntheticTask t;
        t.num_classes = num_classes;
        t.image_size = image_size;
        t.orientation_jitter = orientation_jitter;
        t.pixel_noise = pixel_noise;
        return t;
    }

    ModelConfig model_config() const {
        return ModelConfig{image_size * image_size, hidden, feature_dim, num_classes, model_seed};
    }

    PretrainConfig pretrain_config() const {
        return PretrainConfig{pretrain_epochs, pretrain_lr, pretrain_momentum, pretrain_batch_size,
                              derive_seed(model_seed, 7)};
    }

    AdaptConfig adapt_config() const {
        const ExperimentConfig r = resolved();
        AdaptConfig a;
        a.method = method;
        a.weights = {*r.lambda_ema, *r.lambda_src, lambda_cons};
        a.alpha = alpha;
        a.entropy_threshold = default_entropy_threshold(num_classes, e0_factor);
        a.lr = lr;
        a.momentum = momentum;
        a.scope = scope;
        a.label_mode = label_mode;
        a.consistency = consistency;
        a.filter_entropy = filter_entropy;
        a.augment_seed = derive_seed(data_seed, 99);
        return a;
    }
};

inline std::string_view to_string(DomainOrder o) { return o == DomainOrder::fixed ? "fixed" : "shuffled"; }
inline std::string_view to_string(LabelMode m) { return m == LabelMode::hard ? "hard" : "soft"; }
inline std::string_view to_string(TrainScope s) { return s == TrainScope::bn_affine ? "bn-affine" : "full-extractor"; }

inline nlohmann::ordered_json config_to_json(const ExperimentConfig& c) {
    using nlohmann::ordered_json;
    ordered_json corr = ordered_json::array();
    for (CorruptionKind k : c.corruptions) corr.push_back(std::string(to_string(k)));
    auto opt = [](const std::optional<double>& v) { return v ? ordered_json(*v) : ordered_json(nullptr); };
    return ordered_json{
        {"schema_version", kConfigSchemaVersion},
        {"task",
         {{"num_classes", c.num_classes},
          {"image_size", c.image_size},
          {"source_per_class", c.source_per_class},
          {"target_per_domain", c.target_per_domain},
          {"corruptions", corr},
          {"severity", c.severity},
          {"clean_last", c.clean_last},
          {"order", std::string(to_string(c.order))},
          {"orientation_jitter", c.orientation_jitter},
          {"pixel_noise", c.pixel_noise}}},
        {"model", {{"hidden", c.hidden}, {"feature_dim", c.feature_dim}}},
        {"pretrain",
         {{"epochs", c.pretrain_epochs},
          {"lr", c.pretrain_lr},
          {"momentum", c.pretrain_momentum},
          {"batch_size", c.pretrain_batch_size},
          {"source_cap", c.source_cap}}},
        {"adaptation",
         {{"method", std::string(to_string(c.method))},
          {"lambda_ema", opt(c.lambda_ema)},
          {"lambda_src", opt(c.lambda_src)},
          {"lambda_cons", c.lambda_cons},
          {"consistency", c.consistency},
          {"label_mode", std::string(to_string(c.label_mode))},
          {"filter_entropy", c.filter_entropy},
          {"alpha", c.alpha},
          {"e0_factor", c.e0_factor},
          {"lr", c.lr},
          {"momentum", c.momentum},
          {"scope", std::string(to_string(c.scope))},
          {"batch_size", c.batch_size}}},
        {"seeds", {{"data", c.data_seed}, {"model", c.model_seed}, {"shuffle", c.shuffle_seed}}},
        {"output_dir", c.output_dir}};
}

namespace detail {

class ConfigReader {
public:
    std::vector<std::string> errors;

    template <class F>
    void field(const nlohmann::ordered_json& obj, const std::string& section, const char* key, F assign) {
        if (!obj.contains(key)) return;
        const std::string path = section.empty() ? key : section + "." + key;
        try {
            assign(obj.at(key));
        } catch (const std::exception& e) {
            errors.push_back(path + ": " + e.what());
        }
    }

    void check_keys(const nlohmann::ordered_json& obj, const std::string& section,
                    std::initializer_list<const char*> allowed) {
        if (!obj.is_object()) {
            errors.push_back((section.empty() ? std::string("<root>") : section) + ": expected an object");
            return;
        }
        for (const auto& item : obj.items()) {
            bool ok = false;
            for (const char* a : allowed) ok = ok || item.key() == a;
            if (!ok) errors.push_back((section.empty() ? "" : section + ".") + item.key() + ": unknown field");
        }
    }
};

template <class T>
T get_checked(const nlohmann::ordered_json& j) {
    if constexpr (std::is_same_v<T, bool>) {
        if (!j.is_boolean()) throw std::invalid_argument("expected a boolean");
    } else if constexpr (std::is_integral_v<T>) {
        if (!j.is_number_integer()) throw std::invalid_argument("expected an integer");
        if constexpr (std::is_unsigned_v<T>)
            if (j.is_number_integer() && !j.is_number_unsigned()) throw std::invalid_argument("expected a nonnegative integer");
    } else if constexpr (std::is_floating_point_v<T>) {
        if (!j.is_number()) throw std::invalid_argument("expected a number");
    } else if constexpr (std::is_same_v<T, std::string>) {
        if (!j.is_string()) throw std::invalid_argument("expected a string");
    }
    return j.get<T>();
}

}  // namespace detail

inline ExperimentConfig config_from_json(const nlohmann::ordered_json& j) {
    using detail::get_checked;
    ExperimentConfig c;
    detail::ConfigReader rd;
    rd.check_keys(j, "", {"schema_version", "task", "model", "pretrain", "adaptation", "seeds", "output_dir"});
    if (!rd.errors.empty()) throw ConfigError(rd.errors);

    if (j.contains("schema_version")) {
        rd.field(j, "", "schema_version", [&](const auto& v) {
            if (get_checked<int>(v) != kConfigSchemaVersion)
                throw std::invalid_argument("unsupported schema version (expected " +
                                            std::to_string(kConfigSchemaVersion) + ")");
        });
    }
    if (j.contains("task")) {
        const auto& t = j.at("task");
        rd.check_keys(t, "task",
                      {"num_classes", "image_size", "source_per_class", "target_per_domain", "corruptions", "severity",
                       "clean_last", "order", "orientation_jitter", "pixel_noise"});
        if (t.is_object()) {
            rd.field(t, "task", "num_classes", [&](const auto& v) { c.num_classes = get_checked<std::size_t>(v); });
            rd.field(t, "task", "image_size", [&](const auto& v) { c.image_size = get_checked<std::size_t>(v); });
            rd.field(t, "task", "source_per_class",
                          [&](const auto& v) { c.source_per_class = get_checked<std::size_t>(v); });
            rd.field(t, "task", "target_per_domain",
                          [&](const auto& v) { c.target_per_domain = get_checked<std::size_t>(v); });
            rd.field(t, "task", "corruptions", [&](const auto& v) {
                if (!v.is_array()) throw std::invalid_argument("expected an array of corruption names");
                c.corruptions.clear();
                for (const auto& k : v) c.corruptions.push_back(parse_corruption_kind(get_checked<std::string>(k)));
            });
            rd.field(t, "task", "severity", [&](const auto& v) { c.severity = get_checked<int>(v); });
            rd.field(t, "task", "clean_last", [&](const auto& v) { c.clean_last = get_checked<bool>(v); });
            rd.field(t, "task", "orientation_jitter",
                     [&](const auto& v) { c.orientation_jitter = get_checked<double>(v); });
            rd.field(t, "task", "pixel_noise", [&](const auto& v) { c.pixel_noise = get_checked<double>(v); });
            rd.field(t, "task", "order", [&](const auto& v) {
                const auto s = get_checked<std::string>(v);
                if (s == "fixed") c.order = DomainOrder::fixed;
                else if (s == "shuffled") c.order = DomainOrder::shuffled;
                else throw std::invalid_argument("expected \"fixed\" or \"shuffled\"");
            });
        }
    }
    if (j.contains("model")) {
        const auto& m = j.at("model");
        rd.check_keys(m, "model", {"hidden", "feature_dim"});
        if (m.is_object()) {
            rd.field(m, "model", "hidden", [&](const auto& v) {
                if (!v.is_array()) throw std::invalid_argument("expected an array of widths");
                c.hidden.clear();
                for (const auto& w : v) c.hidden.push_back(get_checked<std::size_t>(w));
            });
            rd.field(m, "model", "feature_dim", [&](const auto& v) { c.feature_dim = get_checked<std::size_t>(v); });
        }
    }
    if (j.contains("pretrain")) {
        const auto& p = j.at("pretrain");
        rd.check_keys(p, "pretrain", {"epochs", "lr", "momentum", "batch_size", "source_cap"});
        if (p.is_object()) {
            rd.field(p, "pretrain", "epochs", [&](const auto& v) { c.pretrain_epochs = get_checked<std::size_t>(v); });
            rd.field(p, "pretrain", "lr", [&](const auto& v) { c.pretrain_lr = get_checked<double>(v); });
            rd.field(p, "pretrain", "momentum", [&](const auto& v) { c.pretrain_momentum = get_checked<double>(v); });
            rd.field(p, "pretrain", "batch_size",
                          [&](const auto& v) { c.pretrain_batch_size = get_checked<std::size_t>(v); });
            rd.field(p, "pretrain", "source_cap", [&](const auto& v) { c.source_cap = get_checked<std::size_t>(v); });
        }
    }
    if (j.contains("adaptation")) {
        const auto& a = j.at("adaptation");
        rd.check_keys(a, "adaptation",
                      {"method", "lambda_ema", "lambda_src", "lambda_cons", "consistency", "label_mode",
                       "filter_entropy", "alpha", "e0_factor", "lr", "momentum", "scope", "batch_size"});
        if (a.is_object()) {
            rd.field(a, "adaptation", "method", [&](const auto& v) { c.method = parse_method(get_checked<std::string>(v)); });
            rd.field(a, "adaptation", "lambda_ema", [&](const auto& v) {
                c.lambda_ema = v.is_null() ? std::nullopt : std::optional<double>(get_checked<double>(v));
            });
            rd.field(a, "adaptation", "lambda_src", [&](const auto& v) {
                c.lambda_src = v.is_null() ? std::nullopt : std::optional<double>(get_checked<double>(v));
            });
            rd.field(a, "adaptation", "lambda_cons", [&](const auto& v) { c.lambda_cons = get_checked<double>(v); });
            rd.field(a, "adaptation", "consistency", [&](const auto& v) { c.consistency = get_checked<bool>(v); });
            rd.field(a, "adaptation", "label_mode", [&](const auto& v) {
                const auto s = get_checked<std::string>(v);
                if (s == "hard") c.label_mode = LabelMode::hard;
                else if (s == "soft") c.label_mode = LabelMode::soft;
                else throw std::invalid_argument("expected \"hard\" or \"soft\"");
            });
            rd.field(a, "adaptation", "filter_entropy", [&](const auto& v) { c.filter_entropy = get_checked<bool>(v); });
            rd.field(a, "adaptation", "alpha", [&](const auto& v) { c.alpha = get_checked<double>(v); });
            rd.field(a, "adaptation", "e0_factor", [&](const auto& v) { c.e0_factor = get_checked<double>(v); });
            rd.field(a, "adaptation", "lr", [&](const auto& v) { c.lr = get_checked<double>(v); });
            rd.field(a, "adaptation", "momentum", [&](const auto& v) { c.momentum = get_checked<double>(v); });
            rd.field(a, "adaptation", "scope", [&](const auto& v) {
                const auto s = get_checked<std::string>(v);
                if (s == "bn-affine") c.scope = TrainScope::bn_affine;
                else if (s == "full-extractor") c.scope = TrainScope::full_extractor;
                else throw std::invalid_argument("expected \"bn-affine\" or \"full-extractor\"");
            });
            rd.field(a, "adaptation", "batch_size", [&](const auto& v) { c.batch_size = get_checked<std::size_t>(v); });
        }
    }
    if (j.contains("seeds")) {
        const auto& s = j.at("seeds");
        rd.check_keys(s, "seeds", {"data", "model", "shuffle"});
        if (s.is_object()) {
            rd.field(s, "seeds", "data", [&](const auto& v) { c.data_seed = get_checked<std::uint64_t>(v); });
            rd.field(s, "seeds", "model", [&](const auto& v) { c.model_seed = get_checked<std::uint64_t>(v); });
            rd.field(s, "seeds", "shuffle", [&](const auto& v) { c.shuffle_seed = get_checked<std::uint64_t>(v); });
        }
    }
    rd.field(j, "", "output_dir", [&](const auto& v) { c.output_dir = get_checked<std::string>(v); });
    if (!rd.errors.empty()) throw ConfigError(rd.errors);
    c.validate();
    return c;
}

}  // namespace ctta
