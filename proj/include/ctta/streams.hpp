#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numbers>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "dataset.hpp"
#include "random.hpp"
#include "tensor.hpp"

namespace ctta {

// ---------------------------------------------------------------------------
// Synthetic source task
// ---------------------------------------------------------------------------

/// Oriented sinusoidal gratings on a square single-channel image.
///
/// Class c has orientation pi * c / C and a spatial frequency that alternates
/// between two values across neighbouring classes. Each sample draws a random
/// phase, a small orientation perturbation, a contrast and a brightness, plus
/// per-pixel noise. Pixel values lie in [0, 1].
struct SyntheticTask {
    std::size_t num_classes = 10;
    std::size_t image_size = 16;
    double orientation_jitter = 0.05;  // radians, stddev
    double pixel_noise = 0.05;
    double low_frequency = 2.0;   // cycles per image
    double high_frequency = 3.5;

    std::size_t input_dim() const noexcept { return image_size * image_size; }

    void validate() const {
        if (num_classes < 2) throw std::invalid_argument("task: need at least 2 classes");
        if (image_size < 2) throw std::invalid_argument("task: image_size must be at least 2");
    }

    void render(std::size_t label, Rng& rng, std::span<double> out) const {
        if (out.size() != input_dim()) throw std::invalid_argument("SyntheticTask::render: output size mismatch");
        const double theta = std::numbers::pi * static_cast<double>(label) / static_cast<double>(num_classes) +
                             rng.normal(0.0, orientation_jitter);
        const double freq = (label % 2 == 0) ? low_frequency : high_frequency;
        const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
        const double amplitude = rng.uniform(0.25, 0.4);
        const double brightness = rng.uniform(0.4, 0.6);
        const double c = std::cos(theta), s = std::sin(theta);
        const double n = static_cast<double>(image_size);
        for (std::size_t y = 0; y < image_size; ++y)
            for (std::size_t x = 0; x < image_size; ++x) {
                const double u = (static_cast<double>(x) * c + static_cast<double>(y) * s) / n;
                const double v = brightness + amplitude * std::sin(2.0 * std::numbers::pi * freq * u + phase) +
                                 rng.normal(0.0, pixel_noise);
                out[y * image_size + x] = std::clamp(v, 0.0, 1.0);
            }
    }

    /// `count` samples with labels cycling over classes, then shuffled.
    LabeledDataset sample(std::size_t count, std::uint64_t seed) const {
        validate();
        Rng rng(seed);
        std::vector<std::size_t> labels(count);
        for (std::size_t i = 0; i < count; ++i) labels[i] = i % num_classes;
        rng.shuffle(labels);
        LabeledDataset ds;
        ds.inputs = Tensor::matrix(count, input_dim());
        for (std::size_t i = 0; i < count; ++i) render(labels[i], rng, ds.inputs.row(i));
        ds.labels = std::move(labels);
        return ds;
    }
};

/// Class-balanced labeled source set with `per_class` samples of each class.
inline LabeledDataset make_source_dataset(const SyntheticTask& task, std::size_t per_class, std::uint64_t seed) {
    if (per_class < 1) throw std::invalid_argument("make_source_dataset: per_class must be at least 1");
    return task.sample(per_class * task.num_classes, seed);
}

struct DatasetSplit {
    LabeledDataset train;    // even indices
    LabeledDataset heldout;  // odd indices
};

inline DatasetSplit split_by_parity(const LabeledDataset& data) {
    std::vector<std::size_t> even, odd;
    for (std::size_t i = 0; i < data.size(); ++i) (i % 2 == 0 ? even : odd).push_back(i);
    return {data.subset(even), data.subset(odd)};
}

// ---------------------------------------------------------------------------
// Corruptions
// ---------------------------------------------------------------------------

enum class CorruptionKind { gaussian_noise, impulse_noise, blur, contrast, pixelate };

inline constexpr std::array<CorruptionKind, 5> kAllCorruptions = {
    CorruptionKind::gaussian_noise, CorruptionKind::impulse_noise, CorruptionKind::blur,
    CorruptionKind::contrast, CorruptionKind::pixelate};

inline std::string_view to_string(CorruptionKind k) {
    switch (k) {
    case CorruptionKind::gaussian_noise: return "gaussian-noise";
    case CorruptionKind::impulse_noise: return "impulse-noise";
    case CorruptionKind::blur: return "blur";
    case CorruptionKind::contrast: return "contrast-scale";
    case CorruptionKind::pixelate: return "pixelate";
    }
    return "unknown";
}

inline CorruptionKind parse_corruption_kind(std::string_view name) {
    for (CorruptionKind k : kAllCorruptions)
        if (to_string(k) == name) return k;
    throw std::invalid_argument("unknown corruption kind: " + std::string(name));
}

/// Per-severity parameters (index 0 is severity 1).
namespace severity_table {
inline constexpr std::array<double, 5> gaussian_sigma = {0.08, 0.16, 0.24, 0.32, 0.40};
inline constexpr std::array<double, 5> impulse_fraction = {0.05, 0.10, 0.15, 0.20, 0.25};
inline constexpr std::array<int, 5> blur_passes = {1, 2, 3, 4, 5};  // 3x3 box passes
inline constexpr std::array<double, 5> contrast_factor = {0.6, 0.45, 0.3, 0.2, 0.1};
inline constexpr std::array<std::size_t, 5> pixelate_block = {2, 3, 4, 5, 6};
}  // namespace severity_table

struct Corruption {
    CorruptionKind kind = CorruptionKind::gaussian_noise;
    int severity = 5;  // 0 is the identity

    std::string name() const { return std::string(to_string(kind)) + "-" + std::to_string(severity); }
};

/// Applies `c` to a square image stored row-major. Output is clipped to [0, 1].
inline std::vector<double> corrupt(std::span<const double> image, const Corruption& c, std::uint64_t seed) {
    if (c.severity < 0 || c.severity > 5) throw std::invalid_argument("corrupt: severity must be in [0, 5]");
    std::vector<double> out(image.begin(), image.end());
    if (c.severity == 0) return out;
    const auto side = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(image.size()))));
    if (side * side != image.size()) throw std::invalid_argument("corrupt: image is not square");
    const std::size_t s = static_cast<std::size_t>(c.severity - 1);
    Rng rng(seed);

    switch (c.kind) {
    case CorruptionKind::gaussian_noise: {
        const double sigma = severity_table::gaussian_sigma[s];
        for (double& v : out) v += rng.normal(0.0, sigma);
        break;
    }
    case CorruptionKind::impulse_noise: {
        const double p = severity_table::impulse_fraction[s];
        for (double& v : out) {
            const double u = rng.uniform();
            if (u < p) v = (u < 0.5 * p) ? 0.0 : 1.0;
        }
        break;
    }
    case CorruptionKind::blur: {
        std::vector<double> tmp(out.size());
        for (int pass = 0; pass < severity_table::blur_passes[s]; ++pass) {
            for (std::size_t y = 0; y < side; ++y)
                for (std::size_t x = 0; x < side; ++x) {
                    double acc = 0.0;
                    for (int dy = -1; dy <= 1; ++dy)
                        for (int dx = -1; dx <= 1; ++dx) {
                            const auto yy = static_cast<std::size_t>(
                                std::clamp<long>(static_cast<long>(y) + dy, 0, static_cast<long>(side) - 1));
                            const auto xx = static_cast<std::size_t>(
                                std::clamp<long>(static_cast<long>(x) + dx, 0, static_cast<long>(side) - 1));
                            acc += out[yy * side + xx];
                        }
                    tmp[y * side + x] = acc / 9.0;
                }
            out.swap(tmp);
        }
        break;
    }
    case CorruptionKind::contrast: {
        double mean = 0.0;
        for (double v : out) mean += v;
        mean /= static_cast<double>(out.size());
        const double f = severity_table::contrast_factor[s];
        for (double& v : out) v = mean + (v - mean) * f;
        break;
    }
    case CorruptionKind::pixelate: {
        const std::size_t block = severity_table::pixelate_block[s];
        for (std::size_t by = 0; by < side; by += block)
            for (std::size_t bx = 0; bx < side; bx += block) {
                const std::size_t ey = std::min(side, by + block), ex = std::min(side, bx + block);
                double acc = 0.0;
                for (std::size_t y = by; y < ey; ++y)
                    for (std::size_t x = bx; x < ex; ++x) acc += image[y * side + x];
                acc /= static_cast<double>((ey - by) * (ex - bx));
                for (std::size_t y = by; y < ey; ++y)
                    for (std::size_t x = bx; x < ex; ++x) out[y * side + x] = acc;
            }
        break;
    }
    }
    for (double& v : out) v = std::clamp(v, 0.0, 1.0);
    return out;
}

/// Strong augmentation for the consistency loss: additive Gaussian noise
/// followed by one zero-filled square cutout per image.
struct StrongAugment {
    double noise_sigma = 0.1;
    double cutout_fraction = 0.25;  // cutout side relative to image side

    Tensor operator()(const Tensor& batch, Rng& rng) const {
        Tensor out = batch;
        const auto side = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(batch.cols()))));
        if (side * side != batch.cols()) throw std::invalid_argument("StrongAugment: images must be square");
        const auto cut = std::max<std::size_t>(
            1, static_cast<std::size_t>(std::lround(cutout_fraction * static_cast<double>(side))));
        for (std::size_t r = 0; r < out.rows(); ++r) {
            auto img = out.row(r);
            for (double& v : img) v = std::clamp(v + rng.normal(0.0, noise_sigma), 0.0, 1.0);
            const std::size_t y0 = rng.below(side - cut + 1), x0 = rng.below(side - cut + 1);
            for (std::size_t y = y0; y < y0 + cut; ++y)
                for (std::size_t x = x0; x < x0 + cut; ++x) img[y * side + x] = 0.0;
        }
        return out;
    }
};

// ---------------------------------------------------------------------------
// Domain streams
// ---------------------------------------------------------------------------

/// One target domain. An empty corruption is the clean domain.
struct DomainSpec {
    std::optional<Corruption> corruption;

    std::string name() const { return corruption ? corruption->name() : std::string("clean"); }
};

enum class DomainOrder { fixed, shuffled };

inline std::vector<DomainSpec> make_domain_sequence(std::span<const CorruptionKind> kinds, int severity,
                                                    DomainOrder order, std::uint64_t shuffle_seed,
                                                    bool clean_last = true) {
    if (kinds.empty() && !clean_last) throw std::invalid_argument("make_domain_sequence: empty sequence");
    std::vector<DomainSpec> seq;
    for (CorruptionKind k : kinds) seq.push_back({Corruption{k, severity}});
    if (order == DomainOrder::shuffled) {
        Rng rng(shuffle_seed);
        rng.shuffle(seq);
    }
    if (clean_last) seq.push_back({std::nullopt});
    return seq;
}

struct Domain {
    DomainSpec spec;
    LabeledDataset data;  // labels are for metrics only

    std::size_t num_batches(std::size_t batch_size) const noexcept {
        return batch_size == 0 ? 0 : data.size() / batch_size;
    }

    Tensor batch_inputs(std::size_t b, std::size_t batch_size) const {
        std::vector<std::size_t> idx(batch_size);
        for (std::size_t i = 0; i < batch_size; ++i) idx[i] = b * batch_size + i;
        return data.inputs.select_rows(idx);
    }

    std::vector<std::size_t> batch_labels(std::size_t b, std::size_t batch_size) const {
        return {data.labels.begin() + static_cast<std::ptrdiff_t>(b * batch_size),
                data.labels.begin() + static_cast<std::ptrdiff_t>((b + 1) * batch_size)};
    }
};

struct DomainStream {
    std::vector<Domain> domains;

    std::size_t total_samples() const {
        std::size_t n = 0;
        for (const Domain& d : domains) n += d.data.size();
        return n;
    }
};

/// Draws `per_domain` fresh samples for each domain and corrupts them.
/// Domain k's content depends only on (seed, spec), not on its position.
inline DomainStream make_stream(const SyntheticTask& task, std::span<const DomainSpec> specs, std::size_t per_domain,
                                std::uint64_t seed) {
    DomainStream stream;
    for (const DomainSpec& spec : specs) {
        const std::uint64_t tag = spec.corruption
                                      ? 100 + static_cast<std::uint64_t>(spec.corruption->kind) * 10 +
                                            static_cast<std::uint64_t>(spec.corruption->severity)
                                      : 1;
        const std::uint64_t domain_seed = derive_seed(seed, tag);
        Domain d{spec, task.sample(per_domain, domain_seed)};
        if (spec.corruption) {
            for (std::size_t i = 0; i < d.data.size(); ++i) {
                const auto img = corrupt(d.data.inputs.row(i), *spec.corruption, derive_seed(domain_seed, i + 1));
                std::copy(img.begin(), img.end(), d.data.inputs.row(i).begin());
            }
        }
        stream.domains.push_back(std::move(d));
    }
    return stream;
}

// Dataset dump layout (all little-endian):
//   header, 24 bytes: "CTTADS01" | u32 record_count | u32 height | u32 width | u32 reserved (0)
//   record, 8*height*width + 8 bytes: f64 pixels[height*width] row-major | u32 label | u32 domain_id
inline constexpr char kDatasetMagic[8] = {'C', 'T', 'T', 'A', 'D', 'S', '0', '1'};

namespace detail {
inline void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 4);
}
inline void put_f64(std::ostream& os, double d) {
    std::uint64_t bits;
    std::memcpy(&bits, &d, 8);
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(bits >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 8);
}
}  // namespace detail

inline void write_dataset_dump(std::ostream& os, const DomainStream& stream, std::size_t image_size) {
    os.write(kDatasetMagic, 8);
    detail::put_u32(os, static_cast<std::uint32_t>(stream.total_samples()));
    detail::put_u32(os, static_cast<std::uint32_t>(image_size));
    detail::put_u32(os, static_cast<std::uint32_t>(image_size));
    detail::put_u32(os, 0);
    for (std::size_t k = 0; k < stream.domains.size(); ++k) {
        const LabeledDataset& data = stream.domains[k].data;
        if (data.inputs.cols() != image_size * image_size)
            throw std::invalid_argument("write_dataset_dump: image size mismatch");
        for (std::size_t i = 0; i < data.size(); ++i) {
            for (double v : data.inputs.row(i)) detail::put_f64(os, v);
            detail::put_u32(os, static_cast<std::uint32_t>(data.labels[i]));
            detail::put_u32(os, static_cast<std::uint32_t>(k));
        }
    }
    if (!os) throw std::runtime_error("write_dataset_dump: write failed");
}

}  // namespace ctta
