// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cassert>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "roimatch/error.hpp"
#include "roimatch/rng.hpp"

namespace roimatch::nn {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        out += std::to_string(s[i]);
        if (i + 1 < s.size()) out += ",";
    }
    return out + "]";
}

// Dense row-major tensor with value semantics. Kept deliberately small:
// contiguous storage only, no views, shape checked by the ops that use it.
template <typename T>
struct Tensor {
    Shape shape;
    std::vector<T> data;

    Tensor() = default;
    explicit Tensor(Shape s) : shape(std::move(s)) { data.assign(shape_numel(shape), T(0)); }
    Tensor(Shape s, T fill) : shape(std::move(s)) { data.assign(shape_numel(shape), fill); }

    static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
    static Tensor full(Shape s, T v) { return Tensor(std::move(s), v); }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int64_t dim(size_t i) const { return shape[i]; }
    size_t ndim() const { return shape.size(); }

    T* ptr() { return data.data(); }
    const T* ptr() const { return data.data(); }

    T& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
    const T& operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

    T& at(int64_t i, int64_t j) { return data[static_cast<size_t>(i * shape[1] + j)]; }
    const T& at(int64_t i, int64_t j) const { return data[static_cast<size_t>(i * shape[1] + j)]; }
    T& at(int64_t i, int64_t j, int64_t k) {
        return data[static_cast<size_t>((i * shape[1] + j) * shape[2] + k)];
    }
    const T& at(int64_t i, int64_t j, int64_t k) const {
        return data[static_cast<size_t>((i * shape[1] + j) * shape[2] + k)];
    }
    T& at(int64_t i, int64_t j, int64_t k, int64_t l) {
        return data[static_cast<size_t>(((i * shape[1] + j) * shape[2] + k) * shape[3] + l)];
    }
    const T& at(int64_t i, int64_t j, int64_t k, int64_t l) const {
        return data[static_cast<size_t>(((i * shape[1] + j) * shape[2] + k) * shape[3] + l)];
    }

    Tensor reshaped(Shape s) const {
        if (shape_numel(s) != numel()) {
            throw UsageError("reshape " + shape_str(shape) + " -> " + shape_str(s));
        }
        Tensor out = *this;
        out.shape = std::move(s);
        return out;
    }

    void fill_normal(Rng& rng, T stddev) {
        for (T& v : data) v = static_cast<T>(rng.normal()) * stddev;
    }
    void fill_uniform(Rng& rng, T lo, T hi) {
        for (T& v : data) v = static_cast<T>(rng.uniform(lo, hi));
    }

    bool all_finite() const {
        for (T v : data) {
            if (!std::isfinite(static_cast<double>(v))) return false;
        }
        return true;
    }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out;
        out.shape = shape;
        out.data.resize(data.size());
        for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
        return out;
    }
};

inline void check(bool cond, const std::string& msg) {
    if (!cond) throw UsageError(msg);
}

}  // namespace roimatch::nn
