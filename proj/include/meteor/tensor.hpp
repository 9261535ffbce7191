#pragma once

#include <cassert>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

namespace meteor {

/// Dense row-major matrix. Rows are tokens, columns are channels.
template <typename T>
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<T> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, T fill = T{0}) : rows(r), cols(c), data(r * c, fill) {}

    std::span<T> row(std::size_t i) {
        assert(i < rows);
        return {data.data() + i * cols, cols};
    }
    std::span<const T> row(std::size_t i) const {
        assert(i < rows);
        return {data.data() + i * cols, cols};
    }
    T& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    const T& operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

    std::size_t size() const { return data.size(); }
    bool empty() const { return data.empty(); }

    bool operator==(const Matrix&) const = default;
};

/// Affine map y = W x + b with W stored [out x in].
template <typename T>
struct Affine {
    Matrix<T> weight;
    std::vector<T> bias;

    Affine() = default;
    Affine(std::size_t out, std::size_t in) : weight(out, in), bias(out, T{0}) {}

    std::size_t in_width() const { return weight.cols; }
    std::size_t out_width() const { return weight.rows; }

    void apply(std::span<const T> x, std::span<T> y) const {
        assert(x.size() == weight.cols && y.size() == weight.rows);
        for (std::size_t o = 0; o < weight.rows; ++o) {
            const T* w = weight.data.data() + o * weight.cols;
            T acc = bias[o];
            for (std::size_t i = 0; i < weight.cols; ++i) acc += w[i] * x[i];
            y[o] = acc;
        }
    }

    bool operator==(const Affine&) const = default;
};

template <typename T>
bool all_finite(std::span<const T> v) {
    for (T x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

template <typename T>
T dot(std::span<const T> a, std::span<const T> b) {
    assert(a.size() == b.size());
    T acc{0};
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
}

template <typename To, typename From>
Matrix<To> cast_matrix(const Matrix<From>& m) {
    Matrix<To> out(m.rows, m.cols);
    for (std::size_t i = 0; i < m.data.size(); ++i) out.data[i] = static_cast<To>(m.data[i]);
    return out;
}

template <typename To, typename From>
std::vector<To> cast_vector(const std::vector<From>& v) {
    return std::vector<To>(v.begin(), v.end());
}

}  // namespace meteor
