#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "pisces/error.hpp"

namespace pisces {

/// Dense row-major 2-D array. Vectors are stored as 1 x n matrices when they
/// have to live in a container.
template <typename T>
class basic_matrix {
public:
    using value_type = T;

    basic_matrix() = default;
    basic_matrix(std::size_t rows, std::size_t cols, T fill = T{})
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    basic_matrix(std::size_t rows, std::size_t cols, std::vector<T> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (data_.size() != rows_ * cols_) {
            throw validation_error("matrix payload has " + std::to_string(data_.size()) +
                                   " values, expected " + std::to_string(rows_ * cols_));
        }
    }

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }

    T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<T> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const T> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    std::vector<T>& data() noexcept { return data_; }
    const std::vector<T>& data() const noexcept { return data_; }

    template <typename U>
    basic_matrix<U> cast() const {
        basic_matrix<U> out(rows_, cols_);
        std::transform(data_.begin(), data_.end(), out.data().begin(),
                       [](T v) { return static_cast<U>(v); });
        return out;
    }

    friend bool operator==(const basic_matrix&, const basic_matrix&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<T> data_;
};

using matrix = basic_matrix<float>;
using vec = std::vector<float>;

template <typename T, typename U>
auto dot(std::span<const T> a, std::span<const U> b) {
    using R = decltype(T{} * U{});
    R acc{};
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
}

template <typename T>
T dot(const std::vector<T>& a, const std::vector<T>& b) {
    return dot(std::span<const T>(a), std::span<const T>(b));
}

template <typename T>
T l2_norm(std::span<const T> a) {
    return std::sqrt(dot(a, a));
}

template <typename T>
T l2_norm(const std::vector<T>& a) {
    return l2_norm(std::span<const T>(a));
}

template <typename T>
T cosine(std::span<const T> a, std::span<const T> b) {
    const T na = l2_norm(a);
    const T nb = l2_norm(b);
    if (na == T{} || nb == T{}) return T{};
    return dot(a, b) / (na * nb);
}

/// y = M x, M is (r x c), x has c entries.
template <typename T>
std::vector<T> matvec(const basic_matrix<T>& m, std::span<const T> x) {
    std::vector<T> y(m.rows());
    for (std::size_t r = 0; r < m.rows(); ++r) y[r] = dot(m.row(r), x);
    return y;
}

/// y = M^T x, M is (r x c), x has r entries.
template <typename T>
std::vector<T> matvec_t(const basic_matrix<T>& m, std::span<const T> x) {
    std::vector<T> y(m.cols(), T{});
    for (std::size_t r = 0; r < m.rows(); ++r) {
        const T xr = x[r];
        if (xr == T{}) continue;
        auto row = m.row(r);
        for (std::size_t c = 0; c < m.cols(); ++c) y[c] += xr * row[c];
    }
    return y;
}

template <typename T>
void axpy(T alpha, std::span<const T> x, std::span<T> y) {
    for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

template <typename T>
std::vector<T> to_vector(std::span<const T> s) {
    return {s.begin(), s.end()};
}

inline bool all_finite(std::span<const float> values) {
    return std::all_of(values.begin(), values.end(), [](float v) { return std::isfinite(v); });
}

/// Gaussian-filled matrix; the draw order is row-major so results are stable
/// for a given engine state.
template <typename T, typename Engine>
basic_matrix<T> random_normal(std::size_t rows, std::size_t cols, T stddev, Engine& rng) {
    std::normal_distribution<double> dist(0.0, 1.0);
    basic_matrix<T> m(rows, cols);
    for (auto& v : m.data()) v = static_cast<T>(dist(rng) * stddev);
    return m;
}

template <typename Engine>
std::vector<double> random_unit(std::size_t n, Engine& rng) {
    std::normal_distribution<double> dist(0.0, 1.0);
    std::vector<double> v(n);
    double norm = 0.0;
    do {
        for (auto& x : v) x = dist(rng);
        norm = l2_norm(v);
    } while (norm < 1e-12);
    for (auto& x : v) x /= norm;
    return v;
}

} // namespace pisces
