#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <optional>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "numerics.hpp"
#include "prototypes.hpp"
#include "tensor.hpp"

namespace ctta {

using ordered_json = nlohmann::ordered_json;

inline constexpr std::size_t kCalibrationBins = 20;
inline constexpr double kHighConfidence = 0.95;

// ---------------------------------------------------------------------------
// Records
// ---------------------------------------------------------------------------

struct LossValues {
    double total = 0.0;
    double unsup = 0.0;
    double ema = 0.0;
    double src = 0.0;
    double cons = 0.0;
};

struct BatchRecord {
    std::size_t step = 0;
    std::size_t domain = 0;
    std::vector<std::size_t> predictions;
    std::vector<std::size_t> labels;
    std::vector<double> confidences;
    std::vector<double> entropies;
    LossValues losses;
    std::size_t reliable_count = 0;

    std::size_t correct() const {
        std::size_t n = 0;
        for (std::size_t i = 0; i < predictions.size(); ++i) n += predictions[i] == labels[i];
        return n;
    }
};

struct GeometryResult {
    double gap = 0.0;
    double d_intra = 0.0;
    double d_inter = 0.0;
    double ratio = 0.0;
    std::vector<std::size_t> skipped_classes;
};

struct SimilarityResult {
    double to_source = 0.0;
    double to_target_gt = 0.0;
    std::vector<std::size_t> skipped_classes;
};

struct DomainRecord {
    std::size_t index = 0;
    std::string name;
    GeometryResult geometry;
    SimilarityResult similarity;
};

/// Append-only log of a run: one record per adapted batch plus per-domain
/// geometry computed from the features seen in that domain.
struct RunReport {
    std::size_t num_classes = 0;
    std::vector<DomainRecord> domains;
    std::vector<BatchRecord> batches;
};

// ---------------------------------------------------------------------------
// Metric functions
// ---------------------------------------------------------------------------

/// Percentage of correct predictions emitted while `domain` was streaming.
inline double online_accuracy(const RunReport& report, std::size_t domain) {
    std::size_t correct = 0, total = 0;
    for (const BatchRecord& b : report.batches) {
        if (b.domain != domain) continue;
        correct += b.correct();
        total += b.predictions.size();
    }
    return total == 0 ? 0.0 : 100.0 * static_cast<double>(correct) / static_cast<double>(total);
}

struct PredictionHistogram {
    std::vector<std::size_t> counts;
    double bias = 0.0;  // KL(empirical prediction distribution || uniform), nats
};

inline PredictionHistogram class_prediction_histogram(std::span<const std::size_t> predictions,
                                                      std::size_t num_classes) {
    PredictionHistogram h;
    h.counts.assign(num_classes, 0);
    for (std::size_t p : predictions) {
        if (p >= num_classes) throw std::out_of_range("class_prediction_histogram: prediction out of range");
        ++h.counts[p];
    }
    if (predictions.empty()) return h;
    const double n = static_cast<double>(predictions.size());
    const double c = static_cast<double>(num_classes);
    for (std::size_t k : h.counts) {
        if (k == 0) continue;
        const double q = static_cast<double>(k) / n;
        h.bias += q * std::log(q * c);
    }
    h.bias = std::max(h.bias, 0.0);
    return h;
}

inline PredictionHistogram class_prediction_histogram(const RunReport& report,
                                                      std::optional<std::size_t> domain = std::nullopt) {
    std::vector<std::size_t> preds;
    for (const BatchRecord& b : report.batches)
        if (!domain || b.domain == *domain) preds.insert(preds.end(), b.predictions.begin(), b.predictions.end());
    return class_prediction_histogram(preds, report.num_classes);
}

struct CalibrationBin {
    std::size_t count = 0;
    double mean_confidence = 0.0;
    double accuracy = 0.0;
    double mean_entropy = 0.0;
};

struct CalibrationResult {
    std::vector<CalibrationBin> bins;
    double ece = 0.0;
    double high_confidence_fraction = 0.0;
};

/// Bin b covers (b/n, (b+1)/n]; a confidence of exactly 0 falls in bin 0.
inline std::size_t calibration_bin(double confidence, std::size_t bins) {
    const double scaled = std::ceil(confidence * static_cast<double>(bins));
    if (scaled <= 1.0) return 0;
    return std::min(bins - 1, static_cast<std::size_t>(scaled) - 1);
}

inline CalibrationResult calibration(std::span<const double> confidences, std::span<const std::uint8_t> correct,
                                     std::span<const double> entropies, std::size_t bins = kCalibrationBins) {
    if (bins < 1) throw std::invalid_argument("calibration: need at least one bin");
    if (confidences.size() != correct.size() || (!entropies.empty() && entropies.size() != confidences.size()))
        throw std::invalid_argument("calibration: input lengths differ");
    CalibrationResult r;
    r.bins.assign(bins, {});
    std::vector<double> conf_sum(bins, 0.0), correct_sum(bins, 0.0), ent_sum(bins, 0.0);
    std::size_t high = 0;
    for (std::size_t i = 0; i < confidences.size(); ++i) {
        const std::size_t b = calibration_bin(confidences[i], bins);
        ++r.bins[b].count;
        conf_sum[b] += confidences[i];
        correct_sum[b] += correct[i] ? 1.0 : 0.0;
        if (!entropies.empty()) ent_sum[b] += entropies[i];
        if (confidences[i] > kHighConfidence) ++high;
    }
    const double n = static_cast<double>(confidences.size());
    for (std::size_t b = 0; b < bins; ++b) {
        CalibrationBin& bin = r.bins[b];
        if (bin.count == 0) continue;
        const double k = static_cast<double>(bin.count);
        bin.mean_confidence = conf_sum[b] / k;
        bin.accuracy = correct_sum[b] / k;
        bin.mean_entropy = ent_sum[b] / k;
        r.ece += (k / n) * std::abs(bin.accuracy - bin.mean_confidence);
    }
    r.high_confidence_fraction = confidences.empty() ? 0.0 : static_cast<double>(high) / n;
    return r;
}

inline CalibrationResult calibration(const RunReport& report, std::optional<std::size_t> domain = std::nullopt,
                                     std::size_t bins = kCalibrationBins) {
    std::vector<double> conf, ent;
    std::vector<std::uint8_t> ok;
    for (const BatchRecord& b : report.batches) {
        if (domain && b.domain != *domain) continue;
        for (std::size_t i = 0; i < b.predictions.size(); ++i) {
            conf.push_back(b.confidences[i]);
            ent.push_back(b.entropies[i]);
            ok.push_back(b.predictions[i] == b.labels[i] ? 1 : 0);
        }
    }
    return calibration(conf, ok, ent, bins);
}

/// Class geometry of one domain's features against the source prototypes.
///
/// gap     = mean_c ||P^s_c - P*_c||^2
/// d_intra = mean_c mean_{i in c} ||P*_c - f_i||^2
/// d_inter = mean_c mean_{c' != c} ||P*_c - P*_c'||^2
/// ratio   = mean_c d_intra_c / d_inter_c
/// where P*_c is the true-label centroid. Classes without samples are skipped.
inline GeometryResult feature_geometry(const Tensor& features, std::span<const std::size_t> labels,
                                       const Tensor& source_prototypes) {
    const std::size_t C = source_prototypes.rows();
    const auto [centroids, counts] = class_means(features, labels, C);
    GeometryResult g;
    std::vector<std::size_t> present;
    for (std::size_t c = 0; c < C; ++c) (counts[c] > 0 ? present : g.skipped_classes).push_back(c);
    if (present.empty()) {
        const double nan = std::numeric_limits<double>::quiet_NaN();
        g.gap = g.d_intra = g.d_inter = g.ratio = nan;
        return g;
    }
    std::vector<double> intra(C, 0.0);
    for (std::size_t i = 0; i < labels.size(); ++i)
        intra[labels[i]] += squared_distance(centroids.row(labels[i]), features.row(i));
    std::size_t ratio_terms = 0;
    for (std::size_t c : present) {
        intra[c] /= static_cast<double>(counts[c]);
        g.gap += squared_distance(source_prototypes.row(c), centroids.row(c));
        g.d_intra += intra[c];
        double inter = 0.0;
        for (std::size_t o : present)
            if (o != c) inter += squared_distance(centroids.row(c), centroids.row(o));
        if (present.size() > 1) inter /= static_cast<double>(present.size() - 1);
        g.d_inter += inter;
        if (inter > 0.0) {
            g.ratio += intra[c] / inter;
            ++ratio_terms;
        }
    }
    const double k = static_cast<double>(present.size());
    g.gap /= k;
    g.d_intra /= k;
    g.d_inter /= k;
    g.ratio = ratio_terms ? g.ratio / static_cast<double>(ratio_terms) : std::numeric_limits<double>::quiet_NaN();
    return g;
}

/// Mean over classes of cos(P^t_c, P^s_c) and cos(P^t_c, P*_c); zero rows are skipped.
inline SimilarityResult prototype_similarity(const Tensor& target, const Tensor& source, const Tensor& target_gt) {
    SimilarityResult r;
    std::size_t ns = 0, ng = 0;
    for (std::size_t c = 0; c < target.rows(); ++c) {
        const double cs = cosine_similarity(target.row(c), source.row(c));
        const double cg = cosine_similarity(target.row(c), target_gt.row(c));
        if (std::isnan(cs) || std::isnan(cg)) r.skipped_classes.push_back(c);
        if (!std::isnan(cs)) {
            r.to_source += cs;
            ++ns;
        }
        if (!std::isnan(cg)) {
            r.to_target_gt += cg;
            ++ng;
        }
    }
    const double nan = std::numeric_limits<double>::quiet_NaN();
    r.to_source = ns ? r.to_source / static_cast<double>(ns) : nan;
    r.to_target_gt = ng ? r.to_target_gt / static_cast<double>(ng) : nan;
    return r;
}

// ---------------------------------------------------------------------------
// Report construction
// ---------------------------------------------------------------------------

/// Collects batch records and per-domain features; computes geometry when a domain ends.
class ReportBuilder {
public:
    ReportBuilder(std::size_t num_classes, Tensor source_prototypes)
        : source_(std::move(source_prototypes)) {
        report_.num_classes = num_classes;
    }

    void begin_domain(std::size_t index, std::string name) {
        current_ = DomainRecord{index, std::move(name), {}, {}};
        features_.clear();
        labels_.clear();
        width_ = 0;
    }

    void add_batch(BatchRecord record, const Tensor& features) {
        if (!current_) throw std::logic_error("ReportBuilder: batch outside a domain");
        record.domain = current_->index;
        width_ = features.cols();
        features_.insert(features_.end(), features.data().begin(), features.data().end());
        labels_.insert(labels_.end(), record.labels.begin(), record.labels.end());
        report_.batches.push_back(std::move(record));
    }

    /// Closes the domain. Feature storage is released here.
    void end_domain(const Tensor& target_prototypes) {
        if (!current_) throw std::logic_error("ReportBuilder: no open domain");
        const std::size_t C = report_.num_classes;
        if (!labels_.empty()) {
            const Tensor feats({labels_.size(), width_}, std::move(features_));
            current_->geometry = feature_geometry(feats, labels_, source_);
            last_target_gt_ = class_means(feats, labels_, C).first;
            current_->similarity = prototype_similarity(target_prototypes, source_, last_target_gt_);
        } else {
            const double nan = std::numeric_limits<double>::quiet_NaN();
            current_->geometry = GeometryResult{nan, nan, nan, nan, {}};
            current_->similarity = SimilarityResult{nan, nan, {}};
            last_target_gt_ = Tensor::matrix(C, source_.cols());
        }
        features_ = {};
        labels_.clear();
        report_.domains.push_back(std::move(*current_));
        current_.reset();
    }

    /// True-label centroids of the most recently closed domain.
    const Tensor& last_target_gt() const noexcept { return last_target_gt_; }

    RunReport take() { return std::move(report_); }

private:
    RunReport report_;
    Tensor source_;
    std::optional<DomainRecord> current_;
    std::vector<double> features_;
    std::vector<std::size_t> labels_;
    std::size_t width_ = 0;
    Tensor last_target_gt_;
};

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

namespace detail {

inline ordered_json number_or_null(double v) { return std::isfinite(v) ? ordered_json(v) : ordered_json(nullptr); }

inline double number_from(const ordered_json& j) {
    return j.is_null() ? std::numeric_limits<double>::quiet_NaN() : j.get<double>();
}

inline std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace detail

inline ordered_json to_json(const GeometryResult& g) {
    return ordered_json{{"gap", detail::number_or_null(g.gap)},
                        {"d_intra", detail::number_or_null(g.d_intra)},
                        {"d_inter", detail::number_or_null(g.d_inter)},
                        {"ratio", detail::number_or_null(g.ratio)},
                        {"skipped_classes", g.skipped_classes}};
}

inline ordered_json to_json(const SimilarityResult& s) {
    return ordered_json{{"to_source", detail::number_or_null(s.to_source)},
                        {"to_target_gt", detail::number_or_null(s.to_target_gt)},
                        {"skipped_classes", s.skipped_classes}};
}

inline ordered_json report_to_json(const RunReport& r) {
    ordered_json j;
    j["format"] = "ctta-report/1";
    j["num_classes"] = r.num_classes;
    j["domains"] = ordered_json::array();
    for (const DomainRecord& d : r.domains)
        j["domains"].push_back({{"index", d.index},
                                {"name", d.name},
                                {"geometry", to_json(d.geometry)},
                                {"similarity", to_json(d.similarity)}});
    j["batches"] = ordered_json::array();
    for (const BatchRecord& b : r.batches)
        j["batches"].push_back({{"step", b.step},
                                {"domain", b.domain},
                                {"predictions", b.predictions},
                                {"labels", b.labels},
                                {"confidences", b.confidences},
                                {"entropies", b.entropies},
                                {"losses",
                                 {{"total", b.losses.total},
                                  {"unsup", b.losses.unsup},
                                  {"ema", b.losses.ema},
                                  {"src", b.losses.src},
                                  {"cons", b.losses.cons}}},
                                {"reliable_count", b.reliable_count}});
    return j;
}

inline RunReport report_from_json(const ordered_json& j) {
    if (j.at("format") != "ctta-report/1") throw std::invalid_argument("report_from_json: unsupported format");
    RunReport r;
    r.num_classes = j.at("num_classes").get<std::size_t>();
    for (const auto& d : j.at("domains")) {
        DomainRecord rec;
        rec.index = d.at("index").get<std::size_t>();
        rec.name = d.at("name").get<std::string>();
        const auto& g = d.at("geometry");
        rec.geometry = {detail::number_from(g.at("gap")), detail::number_from(g.at("d_intra")),
                        detail::number_from(g.at("d_inter")), detail::number_from(g.at("ratio")),
                        g.at("skipped_classes").get<std::vector<std::size_t>>()};
        const auto& s = d.at("similarity");
        rec.similarity = {detail::number_from(s.at("to_source")), detail::number_from(s.at("to_target_gt")),
                          s.at("skipped_classes").get<std::vector<std::size_t>>()};
        r.domains.push_back(std::move(rec));
    }
    for (const auto& b : j.at("batches")) {
        BatchRecord rec;
        rec.step = b.at("step").get<std::size_t>();
        rec.domain = b.at("domain").get<std::size_t>();
        rec.predictions = b.at("predictions").get<std::vector<std::size_t>>();
        rec.labels = b.at("labels").get<std::vector<std::size_t>>();
        rec.confidences = b.at("confidences").get<std::vector<double>>();
        rec.entropies = b.at("entropies").get<std::vector<double>>();
        const auto& l = b.at("losses");
        rec.losses = {l.at("total").get<double>(), l.at("unsup").get<double>(), l.at("ema").get<double>(),
                      l.at("src").get<double>(), l.at("cons").get<double>()};
        rec.reliable_count = b.at("reliable_count").get<std::size_t>();
        r.batches.push_back(std::move(rec));
    }
    return r;
}

inline ordered_json calibration_to_json(const CalibrationResult& c) {
    return ordered_json{{"ece", c.ece}, {"high_confidence_fraction", c.high_confidence_fraction}};
}

/// Per-domain and overall aggregates. A pure function of the report.
inline ordered_json summarize(const RunReport& r) {
    ordered_json j;
    j["format"] = "ctta-summary/1";
    j["num_classes"] = r.num_classes;
    j["domains"] = ordered_json::array();
    double acc_sum = 0.0;
    for (const DomainRecord& d : r.domains) {
        std::size_t samples = 0, batches = 0, reliable = 0;
        double entropy_sum = 0.0, conf_sum = 0.0;
        LossValues loss_sum;
        for (const BatchRecord& b : r.batches) {
            if (b.domain != d.index) continue;
            ++batches;
            samples += b.predictions.size();
            reliable += b.reliable_count;
            for (double e : b.entropies) entropy_sum += e;
            for (double c : b.confidences) conf_sum += c;
            loss_sum.total += b.losses.total;
            loss_sum.unsup += b.losses.unsup;
            loss_sum.ema += b.losses.ema;
            loss_sum.src += b.losses.src;
            loss_sum.cons += b.losses.cons;
        }
        const double ns = samples ? static_cast<double>(samples) : 1.0;
        const double nb = batches ? static_cast<double>(batches) : 1.0;
        const double acc = online_accuracy(r, d.index);
        acc_sum += acc;
        const auto hist = class_prediction_histogram(r, d.index);
        const auto cal = calibration(r, d.index);
        j["domains"].push_back({{"index", d.index},
                                {"name", d.name},
                                {"samples", samples},
                                {"batches", batches},
                                {"accuracy", acc},
                                {"mean_entropy", entropy_sum / ns},
                                {"mean_confidence", conf_sum / ns},
                                {"reliable_fraction", static_cast<double>(reliable) / ns},
                                {"bias", hist.bias},
                                {"histogram", hist.counts},
                                {"ece", cal.ece},
                                {"high_confidence_fraction", cal.high_confidence_fraction},
                                {"mean_losses",
                                 {{"total", loss_sum.total / nb},
                                  {"unsup", loss_sum.unsup / nb},
                                  {"ema", loss_sum.ema / nb},
                                  {"src", loss_sum.src / nb},
                                  {"cons", loss_sum.cons / nb}}},
                                {"geometry", to_json(d.geometry)},
                                {"similarity", to_json(d.similarity)}});
    }
    std::size_t correct = 0, total = 0;
    double entropy_sum = 0.0;
    for (const BatchRecord& b : r.batches) {
        correct += b.correct();
        total += b.predictions.size();
        for (double e : b.entropies) entropy_sum += e;
    }
    const auto hist = class_prediction_histogram(r);
    const auto cal = calibration(r);
    const double nt = total ? static_cast<double>(total) : 1.0;
    j["overall"] = {{"domains", r.domains.size()},
                    {"samples", total},
                    {"mean_accuracy", r.domains.empty() ? 0.0 : acc_sum / static_cast<double>(r.domains.size())},
                    {"pooled_accuracy", 100.0 * static_cast<double>(correct) / nt},
                    {"mean_entropy", entropy_sum / nt},
                    {"bias", hist.bias},
                    {"histogram", hist.counts},
                    {"ece", cal.ece},
                    {"high_confidence_fraction", cal.high_confidence_fraction}};
    return j;
}

/// One row per batch.
inline void write_metrics_csv(std::ostream& os, const RunReport& r) {
    using detail::format_double;
    os << "step,domain,domain_name,accuracy,mean_entropy,loss_total,loss_unsup,loss_ema,loss_src,loss_cons,"
          "reliable_count\n";
    for (const BatchRecord& b : r.batches) {
        const std::string name = b.domain < r.domains.size() ? r.domains[b.domain].name : std::string();
        double ent = 0.0;
        for (double e : b.entropies) ent += e;
        const double n = b.predictions.empty() ? 1.0 : static_cast<double>(b.predictions.size());
        os << b.step << ',' << b.domain << ',' << name << ','
           << format_double(100.0 * static_cast<double>(b.correct()) / n) << ',' << format_double(ent / n) << ','
           << format_double(b.losses.total) << ',' << format_double(b.losses.unsup) << ','
           << format_double(b.losses.ema) << ',' << format_double(b.losses.src) << ','
           << format_double(b.losses.cons) << ',' << b.reliable_count << '\n';
    }
}

/// One row per confidence bin over the whole run.
inline void write_calibration_csv(std::ostream& os, const CalibrationResult& c) {
    using detail::format_double;
    os << "bin,count,mean_confidence,accuracy,mean_entropy\n";
    for (std::size_t b = 0; b < c.bins.size(); ++b)
        os << b << ',' << c.bins[b].count << ',' << format_double(c.bins[b].mean_confidence) << ','
           << format_double(c.bins[b].accuracy) << ',' << format_double(c.bins[b].mean_entropy) << '\n';
}

}  // namespace ctta
