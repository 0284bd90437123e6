#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "autodiff.hpp"
#include "random.hpp"
#include "tensor.hpp"

namespace ctta {

struct ModelConfig {
    std::size_t input_dim = 256;
    std::vector<std::size_t> hidden{128, 128};
    std::size_t feature_dim = 64;
    std::size_t num_classes = 10;
    std::uint64_t seed = 0;

    void validate() const {
        if (input_dim == 0) throw std::invalid_argument("model: input_dim must be positive");
        if (feature_dim == 0) throw std::invalid_argument("model: feature_dim must be positive");
        for (std::size_t w : hidden)
            if (w == 0) throw std::invalid_argument("model: hidden widths must be positive");
        if (num_classes < 2) throw std::invalid_argument("model: need at least 2 classes");
    }
};

/// Which normalization statistics a forward pass uses.
enum class ForwardMode {
    pretrain,  // batch statistics, running statistics are updated by the caller
    adapt,     // batch statistics, running statistics untouched
    frozen,    // running statistics
};

/// Parameter groups that may be optimized at test time. The head is never in either.
enum class TrainScope { bn_affine, full_extractor };

inline constexpr double kRunningStatMomentum = 0.1;

struct BatchNormLayer {
    Tensor gamma;
    Tensor beta;
    Tensor running_mean;
    Tensor running_var;
};

struct Block {
    Tensor weight;  // [out x in]
    BatchNormLayer bn;
};

/// Identifies one parameter tensor of a Model.
struct ParamId {
    enum class Kind : std::uint8_t { weight, bn_gamma, bn_beta, head } kind;
    std::size_t block = 0;

    friend bool operator==(const ParamId&, const ParamId&) = default;
};

/// Tape variables for one forward pass.
struct ForwardResult {
    Var features;  // [B x d], post-nonlinearity
    Var logits;    // [B x C]
    std::vector<BatchStats> stats;  // per block, populated for batch-stat modes
};

/// MLP feature extractor of (linear -> batch norm -> ReLU) blocks and a bias-free linear head.
class Model {
public:
    Model() = default;

    explicit Model(ModelConfig config) : config_(std::move(config)) {
        config_.validate();
        Rng rng(config_.seed);
        std::size_t in = config_.input_dim;
        for (std::size_t width : block_widths()) {
            Block b;
            b.weight = Tensor::matrix(width, in);
            const double stddev = std::sqrt(2.0 / static_cast<double>(in));
            for (double& w : b.weight.data()) w = rng.normal(0.0, stddev);
            b.bn.gamma = Tensor({width}, 1.0);
            b.bn.beta = Tensor({width}, 0.0);
            b.bn.running_mean = Tensor({width}, 0.0);
            b.bn.running_var = Tensor({width}, 1.0);
            blocks_.push_back(std::move(b));
            in = width;
        }
        head_ = Tensor::matrix(config_.num_classes, config_.feature_dim);
        const double head_std = 1.0 / std::sqrt(static_cast<double>(config_.feature_dim));
        for (double& w : head_.data()) w = rng.normal(0.0, head_std);
    }

    const ModelConfig& config() const noexcept { return config_; }
    std::size_t num_classes() const noexcept { return config_.num_classes; }
    std::size_t feature_dim() const noexcept { return config_.feature_dim; }
    const std::vector<Block>& blocks() const noexcept { return blocks_; }
    std::vector<Block>& blocks() noexcept { return blocks_; }
    const Tensor& head() const noexcept { return head_; }
    Tensor& head() noexcept { return head_; }

    std::vector<std::size_t> block_widths() const {
        std::vector<std::size_t> w = config_.hidden;
        w.push_back(config_.feature_dim);
        return w;
    }

    /// All parameters, in a fixed order: per block (weight, gamma, beta), then head.
    std::vector<ParamId> all_parameters() const {
        std::vector<ParamId> ids;
        for (std::size_t i = 0; i < blocks_.size(); ++i) {
            ids.push_back({ParamId::Kind::weight, i});
            ids.push_back({ParamId::Kind::bn_gamma, i});
            ids.push_back({ParamId::Kind::bn_beta, i});
        }
        ids.push_back({ParamId::Kind::head, 0});
        return ids;
    }

    std::vector<ParamId> trainable_parameters(TrainScope scope) const {
        std::vector<ParamId> ids;
        for (const ParamId& id : all_parameters()) {
            if (id.kind == ParamId::Kind::head) continue;
            if (scope == TrainScope::bn_affine && id.kind == ParamId::Kind::weight) continue;
            ids.push_back(id);
        }
        return ids;
    }

    Tensor& parameter(ParamId id) { return const_cast<Tensor&>(std::as_const(*this).parameter(id)); }

    const Tensor& parameter(ParamId id) const {
        if (id.kind == ParamId::Kind::head) return head_;
        const Block& b = blocks_.at(id.block);
        switch (id.kind) {
        case ParamId::Kind::weight: return b.weight;
        case ParamId::Kind::bn_gamma: return b.bn.gamma;
        case ParamId::Kind::bn_beta: return b.bn.beta;
        default: break;
        }
        throw std::logic_error("Model::parameter: unknown parameter kind");
    }

    /// Places every parameter on `tape`; those listed in `trainable` are
    /// differentiable, the rest are constants. Returned in all_parameters() order.
    std::vector<Var> bind(Tape& tape, std::span<const ParamId> trainable) const {
        std::vector<Var> vars;
        for (const ParamId& id : all_parameters()) {
            const bool train = std::find(trainable.begin(), trainable.end(), id) != trainable.end();
            vars.push_back(train ? tape.parameter(parameter(id)) : tape.constant(parameter(id)));
        }
        return vars;
    }

    /// Looks up the tape variable for `id` in the output of bind().
    Var bound(std::span<const Var> vars, ParamId id) const {
        const auto ids = all_parameters();
        for (std::size_t i = 0; i < ids.size(); ++i)
            if (ids[i] == id) return vars[i];
        throw std::out_of_range("Model::bound: parameter not found");
    }

    ForwardResult forward(Tape& tape, std::span<const Var> vars, Var input, ForwardMode mode) const {
        const std::size_t batch = tape.value(input).rows();
        if (batch == 0) throw std::invalid_argument("forward: empty batch");
        if (tape.value(input).cols() != config_.input_dim)
            throw std::invalid_argument("forward: input width mismatch");
        if (mode != ForwardMode::frozen && batch < 2)
            throw std::invalid_argument("forward: batch statistics need at least 2 samples");
        ForwardResult out;
        Var h = input;
        for (std::size_t i = 0; i < blocks_.size(); ++i) {
            const BatchNormLayer& bn = blocks_[i].bn;
            const Var w = bound(vars, {ParamId::Kind::weight, i});
            const Var g = bound(vars, {ParamId::Kind::bn_gamma, i});
            const Var b = bound(vars, {ParamId::Kind::bn_beta, i});
            const Var pre = tape.matmul_nt(h, w);
            Var normed;
            if (mode == ForwardMode::frozen) {
                normed = tape.fixed_norm(pre, g, b, bn.running_mean.data(), bn.running_var.data(), kBatchNormEpsilon);
            } else {
                BatchStats stats;
                normed = tape.batch_norm(pre, g, b, kBatchNormEpsilon, &stats);
                out.stats.push_back(std::move(stats));
            }
            h = tape.relu(normed);
        }
        out.features = h;
        out.logits = tape.matmul_nt(h, bound(vars, {ParamId::Kind::head, 0}));
        return out;
    }

    /// Gradient-free forward returning (features, logits) values.
    std::pair<Tensor, Tensor> predict(const Tensor& batch, ForwardMode mode) const {
        Tape tape;
        const auto vars = bind(tape, {});
        const Var x = tape.constant(batch);
        const ForwardResult r = forward(tape, vars, x, mode);
        return {tape.value(r.features), tape.value(r.logits)};
    }

    /// Exponential update of running statistics from one pretrain-mode pass.
    void update_running_stats(std::span<const BatchStats> stats) {
        if (stats.size() != blocks_.size()) throw std::invalid_argument("update_running_stats: block count mismatch");
        for (std::size_t i = 0; i < blocks_.size(); ++i) {
            BatchNormLayer& bn = blocks_[i].bn;
            for (std::size_t f = 0; f < bn.running_mean.size(); ++f) {
                bn.running_mean[f] = (1.0 - kRunningStatMomentum) * bn.running_mean[f] + kRunningStatMomentum * stats[i].mean[f];
                bn.running_var[f] = (1.0 - kRunningStatMomentum) * bn.running_var[f] + kRunningStatMomentum * stats[i].var[f];
            }
        }
    }

    /// Hash over every parameter and running statistic.
    std::uint64_t state_hash() const {
        std::uint64_t h = 0;
        auto mix = [&h](const Tensor& t) { h = derive_seed(h, content_hash(t)); };
        for (const Block& b : blocks_) {
            mix(b.weight);
            mix(b.bn.gamma);
            mix(b.bn.beta);
            mix(b.bn.running_mean);
            mix(b.bn.running_var);
        }
        mix(head_);
        return h;
    }

    friend bool operator==(const Model& a, const Model& b) {
        if (a.blocks_.size() != b.blocks_.size() || !(a.head_ == b.head_)) return false;
        for (std::size_t i = 0; i < a.blocks_.size(); ++i) {
            const Block& x = a.blocks_[i];
            const Block& y = b.blocks_[i];
            if (!(x.weight == y.weight && x.bn.gamma == y.bn.gamma && x.bn.beta == y.bn.beta &&
                  x.bn.running_mean == y.bn.running_mean && x.bn.running_var == y.bn.running_var))
                return false;
        }
        return true;
    }

    // Checkpoint layout (little-endian):
    //   "CTTAMDL" u8 version | u64 input_dim | u64 n_hidden | u64 hidden[] | u64 feature_dim
    //   | u64 num_classes | u64 seed | per block: weight, gamma, beta, running_mean, running_var
    //   | head. Each tensor is its doubles in row-major order.
    static constexpr char kCheckpointMagic[8] = {'C', 'T', 'T', 'A', 'M', 'D', 'L', '\x01'};

    void save(std::ostream& os) const {
        os.write(kCheckpointMagic, sizeof kCheckpointMagic);
        write_u64(os, config_.input_dim);
        write_u64(os, config_.hidden.size());
        for (std::size_t w : config_.hidden) write_u64(os, w);
        write_u64(os, config_.feature_dim);
        write_u64(os, config_.num_classes);
        write_u64(os, config_.seed);
        for (const Block& b : blocks_) {
            write_tensor(os, b.weight);
            write_tensor(os, b.bn.gamma);
            write_tensor(os, b.bn.beta);
            write_tensor(os, b.bn.running_mean);
            write_tensor(os, b.bn.running_var);
        }
        write_tensor(os, head_);
        if (!os) throw std::runtime_error("Model::save: write failed");
    }

    static Model load(std::istream& is) {
        char magic[sizeof kCheckpointMagic];
        is.read(magic, sizeof magic);
        if (!is || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0)
            throw std::runtime_error("Model::load: not a checkpoint or unsupported version");
        ModelConfig cfg;
        cfg.input_dim = read_u64(is);
        cfg.hidden.resize(read_u64(is));
        for (std::size_t& w : cfg.hidden) w = read_u64(is);
        cfg.feature_dim = read_u64(is);
        cfg.num_classes = read_u64(is);
        cfg.seed = read_u64(is);
        Model m(cfg);
        for (Block& b : m.blocks_) {
            read_tensor(is, b.weight);
            read_tensor(is, b.bn.gamma);
            read_tensor(is, b.bn.beta);
            read_tensor(is, b.bn.running_mean);
            read_tensor(is, b.bn.running_var);
        }
        read_tensor(is, m.head_);
        return m;
    }

    void save(const std::string& path) const {
        std::ofstream os(path, std::ios::binary);
        if (!os) throw std::runtime_error("Model::save: cannot open " + path);
        save(os);
    }

    static Model load(const std::string& path) {
        std::ifstream is(path, std::ios::binary);
        if (!is) throw std::runtime_error("Model::load: cannot open " + path);
        return load(is);
    }

private:
    static void write_u64(std::ostream& os, std::uint64_t v) {
        unsigned char bytes[8];
        for (int i = 0; i < 8; ++i) bytes[i] = static_cast<unsigned char>(v >> (8 * i));
        os.write(reinterpret_cast<const char*>(bytes), 8);
    }

    static std::uint64_t read_u64(std::istream& is) {
        unsigned char bytes[8];
        is.read(reinterpret_cast<char*>(bytes), 8);
        if (!is) throw std::runtime_error("Model::load: truncated checkpoint");
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
        return v;
    }

    static void write_tensor(std::ostream& os, const Tensor& t) {
        for (double d : t.data()) {
            std::uint64_t bits;
            std::memcpy(&bits, &d, sizeof bits);
            write_u64(os, bits);
        }
    }

    static void read_tensor(std::istream& is, Tensor& t) {
        for (double& d : t.data()) {
            const std::uint64_t bits = read_u64(is);
            std::memcpy(&d, &bits, sizeof d);
        }
    }

    ModelConfig config_;
    std::vector<Block> blocks_;
    Tensor head_;
};

}  // namespace ctta
