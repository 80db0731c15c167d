#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "adrmx/error.hpp"

namespace adrmx {

class Tape;

/// Dense row-major 64-bit float array. When `tape`/`node` are set the value
/// participates in a reverse-mode gradient tape; otherwise it is a constant.
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<double> data;
    Tape* tape = nullptr;
    int node = -1;

    Tensor() = default;

    Tensor(std::vector<std::size_t> s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
        if (numel() != data.size()) {
            throw ShapeError("tensor data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_string());
        }
    }

    static Tensor zeros(std::vector<std::size_t> s) {
        std::size_t n = 1;
        for (const std::size_t e : s) n *= e;
        return Tensor(std::move(s), std::vector<double>(n, 0.0));
    }

    static Tensor full(std::vector<std::size_t> s, double value) {
        std::size_t n = 1;
        for (const std::size_t e : s) n *= e;
        return Tensor(std::move(s), std::vector<double>(n, value));
    }

    static Tensor scalar(double value) { return Tensor({1}, {value}); }

    static Tensor row_vector(std::vector<double> values) {
        const std::size_t n = values.size();
        return Tensor({1, n}, std::move(values));
    }

    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
        return Tensor({rows, cols}, std::move(values));
    }

    std::size_t numel() const {
        return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
    }

    std::size_t rank() const { return shape.size(); }

    std::size_t rows() const {
        require_rank(2, "rows()");
        return shape[0];
    }

    std::size_t cols() const {
        require_rank(2, "cols()");
        return shape[1];
    }

    double& at(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
    double at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }

    bool on_tape() const { return tape != nullptr && node >= 0; }

    /// Value of a one-element tensor.
    double item() const {
        if (numel() != 1) throw ContractError("item() requires a scalar tensor, got shape " + shape_string());
        return data[0];
    }

    bool same_shape(const Tensor& other) const { return shape == other.shape; }

    std::string shape_string() const {
        std::ostringstream out;
        out << '[';
        for (std::size_t i = 0; i < shape.size(); ++i) {
            if (i) out << 'x';
            out << shape[i];
        }
        out << ']';
        return out.str();
    }

    /// Detached copy: same value, no tape participation.
    Tensor constant() const { return Tensor(shape, data); }

private:
    void require_rank(std::size_t r, const char* what) const {
        if (shape.size() != r) {
            throw ShapeError(std::string(what) + " requires rank-" + std::to_string(r) + " tensor, got " +
                             shape_string());
        }
    }
};

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_shape(b)) {
        throw ShapeError(std::string(op) + ": shape mismatch " + a.shape_string() + " vs " + b.shape_string());
    }
}

inline void require_all_finite(const Tensor& t, const char* op) {
    for (const double v : t.data) {
        if (!std::isfinite(v)) {
            throw DivergenceError(std::string(op) + " produced a non-finite value");
        }
    }
}

}  // namespace adrmx
