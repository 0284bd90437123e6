#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <functional>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ctta {

/// Dense row-major array of doubles.
///
/// Rank-1 tensors behave as a single row when viewed as a matrix, so
/// `rows()` is 1 and `cols()` is the length.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<std::size_t> shape, double fill = 0.0)
        : shape_(std::move(shape)), data_(element_count(shape_), fill) {}

    Tensor(std::vector<std::size_t> shape, std::vector<double> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (element_count(shape_) != data_.size())
            throw std::invalid_argument("Tensor: shape does not match data length");
    }

    static Tensor matrix(std::size_t rows, std::size_t cols, double fill = 0.0) {
        return Tensor({rows, cols}, fill);
    }

    static Tensor from_rows(const std::vector<std::vector<double>>& rows) {
        if (rows.empty()) return Tensor({0, 0});
        const std::size_t cols = rows.front().size();
        std::vector<double> data;
        data.reserve(rows.size() * cols);
        for (const auto& r : rows) {
            if (r.size() != cols) throw std::invalid_argument("Tensor::from_rows: ragged rows");
            data.insert(data.end(), r.begin(), r.end());
        }
        return Tensor({rows.size(), cols}, std::move(data));
    }

    static Tensor vector(std::vector<double> values) {
        const std::size_t n = values.size();
        return Tensor({n}, std::move(values));
    }

    const std::vector<std::size_t>& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    std::size_t rows() const noexcept {
        if (shape_.empty()) return 0;
        return shape_.size() == 1 ? 1 : shape_[0];
    }
    std::size_t cols() const noexcept { return shape_.empty() ? 0 : shape_.back(); }

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }
    std::vector<double>& storage() noexcept { return data_; }
    const std::vector<double>& storage() const noexcept { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

    std::span<double> row(std::size_t r) { return {data_.data() + r * cols(), cols()}; }
    std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols(), cols()}; }

    bool same_shape(const Tensor& other) const noexcept { return shape_ == other.shape_; }

    bool all_finite() const noexcept {
        return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
    }

    void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

    Tensor select_rows(std::span<const std::size_t> indices) const {
        Tensor out({indices.size(), cols()});
        for (std::size_t i = 0; i < indices.size(); ++i) {
            if (indices[i] >= rows()) throw std::out_of_range("Tensor::select_rows: index out of range");
            std::copy_n(row(indices[i]).begin(), cols(), out.row(i).begin());
        }
        return out;
    }

    friend bool operator==(const Tensor&, const Tensor&) = default;

private:
    static std::size_t element_count(const std::vector<std::size_t>& shape) {
        if (shape.empty()) return 0;
        return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
    }

    std::vector<std::size_t> shape_;
    std::vector<double> data_;
};

inline std::string shape_string(const Tensor& t) {
    std::string s = "[";
    for (std::size_t i = 0; i < t.rank(); ++i) {
        if (i) s += "x";
        s += std::to_string(t.shape()[i]);
    }
    return s + "]";
}

/// FNV-1a over the raw bytes of the data; used to check immutability.
inline std::uint64_t content_hash(const Tensor& t) {
    std::uint64_t h = 1469598103934665603ULL;
    for (double v : t.data()) {
        unsigned char bytes[sizeof(double)];
        std::memcpy(bytes, &v, sizeof(double));
        for (unsigned char b : bytes) {
            h ^= b;
            h *= 1099511628211ULL;
        }
    }
    return h;
}

}  // namespace ctta
