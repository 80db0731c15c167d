#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "adrmx/error.hpp"
#include "adrmx/rng.hpp"
#include "adrmx/tape.hpp"
#include "adrmx/tensor.hpp"

namespace adrmx {

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatView = Eigen::Map<const RowMat>;
using MutMatView = Eigen::Map<RowMat>;

inline Tape* tape_of(const Tensor& a) { return a.on_tape() ? a.tape : nullptr; }

inline Tape* tape_of(const Tensor& a, const Tensor& b) {
    Tape* ta = tape_of(a);
    Tape* tb = tape_of(b);
    if (ta && tb && ta != tb) throw ContractError("operands recorded on different tapes");
    return ta ? ta : tb;
}

inline Eigen::Index idx(std::size_t v) { return static_cast<Eigen::Index>(v); }

}  // namespace detail

/// Matrix product a[m×k] · b[k×n]. Backward: dA += dC·Bᵀ, dB += Aᵀ·dC.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows()) {
        throw ShapeError("matmul: incompatible shapes " + a.shape_string() + " and " + b.shape_string());
    }
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    Tensor out = Tensor::zeros({m, n});
    {
        detail::MatView av(a.data.data(), detail::idx(m), detail::idx(k));
        detail::MatView bv(b.data.data(), detail::idx(k), detail::idx(n));
        detail::MutMatView ov(out.data.data(), detail::idx(m), detail::idx(n));
        ov.noalias() = av * bv;
    }
    require_all_finite(out, "matmul");
    if (Tape* tape = detail::tape_of(a, b)) {
        const int an = a.on_tape() ? a.node : -1;
        const int bn = b.on_tape() ? b.node : -1;
        out.tape = tape;
        out.node = tape->push_node(
            m * n, {an, bn},
            [m, k, n, an, bn, adata = a.data, bdata = b.data](Tape& t, std::span<const double> up) {
                detail::MatView g(up.data(), detail::idx(m), detail::idx(n));
                if (an >= 0) {
                    detail::MatView bv(bdata.data(), detail::idx(k), detail::idx(n));
                    detail::MutMatView ga(t.grad_mut(an).data(), detail::idx(m), detail::idx(k));
                    ga.noalias() += g * bv.transpose();
                }
                if (bn >= 0) {
                    detail::MatView av(adata.data(), detail::idx(m), detail::idx(k));
                    detail::MutMatView gb(t.grad_mut(bn).data(), detail::idx(k), detail::idx(n));
                    gb.noalias() += av.transpose() * g;
                }
            });
    }
    return out;
}

inline Tensor transpose(const Tensor& a) {
    if (a.rank() != 2) throw ShapeError("transpose requires a rank-2 tensor, got " + a.shape_string());
    const std::size_t m = a.rows(), n = a.cols();
    Tensor out = Tensor::zeros({n, m});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out.data[j * m + i] = a.data[i * n + j];
    if (Tape* tape = detail::tape_of(a)) {
        const int an = a.node;
        out.tape = tape;
        out.node = tape->push_node(n * m, {an}, [m, n, an](Tape& t, std::span<const double> up) {
            auto ga = t.grad_mut(an);
            for (std::size_t j = 0; j < n; ++j)
                for (std::size_t i = 0; i < m; ++i) ga[i * n + j] += up[j * m + i];
        });
    }
    return out;
}

namespace detail {

template <class Fwd, class Back>
Tensor binary_elementwise(const Tensor& a, const Tensor& b, const char* name, Fwd fwd, Back back) {
    require_same_shape(a, b, name);
    Tensor out = Tensor::zeros(a.shape);
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = fwd(a.data[i], b.data[i]);
    require_all_finite(out, name);
    if (Tape* tape = tape_of(a, b)) {
        const int an = a.on_tape() ? a.node : -1;
        const int bn = b.on_tape() ? b.node : -1;
        out.tape = tape;
        out.node = tape->push_node(out.numel(), {an, bn},
                                   [an, bn, adata = a.data, bdata = b.data, back](Tape& t, std::span<const double> up) {
                                       if (an >= 0) {
                                           auto ga = t.grad_mut(an);
                                           for (std::size_t i = 0; i < up.size(); ++i)
                                               ga[i] += back(up[i], adata[i], bdata[i], true);
                                       }
                                       if (bn >= 0) {
                                           auto gb = t.grad_mut(bn);
                                           for (std::size_t i = 0; i < up.size(); ++i)
                                               gb[i] += back(up[i], adata[i], bdata[i], false);
                                       }
                                   });
    }
    return out;
}

template <class Fwd, class Back>
Tensor unary_elementwise(const Tensor& a, const char* name, Fwd fwd, Back back) {
    Tensor out = Tensor::zeros(a.shape);
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = fwd(a.data[i]);
    require_all_finite(out, name);
    if (Tape* tape = tape_of(a)) {
        const int an = a.node;
        out.tape = tape;
        out.node = tape->push_node(out.numel(), {an},
                                   [an, adata = a.data, odata = out.data, back](Tape& t, std::span<const double> up) {
                                       auto ga = t.grad_mut(an);
                                       for (std::size_t i = 0; i < up.size(); ++i)
                                           ga[i] += back(up[i], adata[i], odata[i]);
                                   });
    }
    return out;
}

}  // namespace detail

/// Element-wise sum; shapes must match exactly (no implicit broadcasting).
inline Tensor add(const Tensor& a, const Tensor& b) {
    return detail::binary_elementwise(
        a, b, "add", [](double x, double y) { return x + y; },
        [](double g, double, double, bool) { return g; });
}

/// Element-wise difference; gradient is negated into the subtrahend.
inline Tensor sub(const Tensor& a, const Tensor& b) {
    return detail::binary_elementwise(
        a, b, "sub", [](double x, double y) { return x - y; },
        [](double g, double, double, bool lhs) { return lhs ? g : -g; });
}

/// Hadamard product.
inline Tensor mul(const Tensor& a, const Tensor& b) {
    return detail::binary_elementwise(
        a, b, "mul", [](double x, double y) { return x * y; },
        [](double g, double x, double y, bool lhs) { return lhs ? g * y : g * x; });
}

inline Tensor scale(const Tensor& a, double c) {
    return detail::unary_elementwise(
        a, "scale", [c](double x) { return c * x; }, [c](double g, double, double) { return c * g; });
}

/// max(0, x); gradient at exactly 0 is defined as 0.
inline Tensor relu(const Tensor& a) {
    return detail::unary_elementwise(
        a, "relu", [](double x) { return x > 0.0 ? x : 0.0; },
        [](double g, double x, double) { return x > 0.0 ? g : 0.0; });
}

inline Tensor exp(const Tensor& a) {
    return detail::unary_elementwise(
        a, "exp", [](double x) { return std::exp(x); }, [](double g, double, double y) { return g * y; });
}

inline Tensor log(const Tensor& a) {
    return detail::unary_elementwise(
        a, "log", [](double x) { return std::log(x); }, [](double g, double x, double) { return g / x; });
}

/// Element-wise product with a constant (no gradient into the constant).
inline Tensor mul_const(const Tensor& a, const std::vector<double>& c) {
    if (c.size() != a.numel()) throw ShapeError("mul_const: constant length does not match tensor");
    Tensor out = Tensor::zeros(a.shape);
    for (std::size_t i = 0; i < c.size(); ++i) out.data[i] = a.data[i] * c[i];
    require_all_finite(out, "mul_const");
    if (Tape* tape = detail::tape_of(a)) {
        const int an = a.node;
        out.tape = tape;
        out.node = tape->push_node(out.numel(), {an}, [an, c](Tape& t, std::span<const double> up) {
            auto ga = t.grad_mut(an);
            for (std::size_t i = 0; i < up.size(); ++i) ga[i] += up[i] * c[i];
        });
    }
    return out;
}

/// Element-wise sum with a constant tensor.
inline Tensor add_const(const Tensor& a, const std::vector<double>& c) {
    if (c.size() != a.numel()) throw ShapeError("add_const: constant length does not match tensor");
    Tensor out = Tensor::zeros(a.shape);
    for (std::size_t i = 0; i < c.size(); ++i) out.data[i] = a.data[i] + c[i];
    if (Tape* tape = detail::tape_of(a)) {
        const int an = a.node;
        out.tape = tape;
        out.node = tape->push_node(out.numel(), {an}, [an](Tape& t, std::span<const double> up) {
            auto ga = t.grad_mut(an);
            for (std::size_t i = 0; i < up.size(); ++i) ga[i] += up[i];
        });
    }
    return out;
}

/// Subtract a per-row constant from a [B×n] tensor; gradient passes through.
inline Tensor sub_row_const(const Tensor& a, const std::vector<double>& row_values) {
    if (a.rank() != 2 || row_values.size() != a.rows()) {
        throw ShapeError("sub_row_const: need one constant per row of " + a.shape_string());
    }
    const std::size_t n = a.cols();
    Tensor out = Tensor::zeros(a.shape);
    for (std::size_t r = 0; r < a.rows(); ++r)
        for (std::size_t j = 0; j < n; ++j) out.data[r * n + j] = a.data[r * n + j] - row_values[r];
    if (Tape* tape = detail::tape_of(a)) {
        const int an = a.node;
        out.tape = tape;
        out.node = tape->push_node(out.numel(), {an}, [an](Tape& t, std::span<const double> up) {
            auto ga = t.grad_mut(an);
            for (std::size_t i = 0; i < up.size(); ++i) ga[i] += up[i];
        });
    }
    return out;
}

/// Row-broadcast bias add: x[B×d] + bias[d].
inline Tensor bias_add(const Tensor& x, const Tensor& bias) {
    if (x.rank() != 2 || bias.rank() != 1 || bias.shape[0] != x.cols()) {
        throw ShapeError("bias_add: expected [Bxd] + [d], got " + x.shape_string() + " and " + bias.shape_string());
    }
    const std::size_t batch = x.rows(), d = x.cols();
    Tensor out = Tensor::zeros(x.shape);
    for (std::size_t r = 0; r < batch; ++r)
        for (std::size_t j = 0; j < d; ++j) out.data[r * d + j] = x.data[r * d + j] + bias.data[j];
    require_all_finite(out, "bias_add");
    if (Tape* tape = detail::tape_of(x, bias)) {
        const int xn = x.on_tape() ? x.node : -1;
        const int bn = bias.on_tape() ? bias.node : -1;
        out.tape = tape;
        out.node = tape->push_node(out.numel(), {xn, bn}, [batch, d, xn, bn](Tape& t, std::span<const double> up) {
            if (xn >= 0) {
                auto gx = t.grad_mut(xn);
                for (std::size_t i = 0; i < up.size(); ++i) gx[i] += up[i];
            }
            if (bn >= 0) {
                auto gb = t.grad_mut(bn);
                for (std::size_t r = 0; r < batch; ++r)
                    for (std::size_t j = 0; j < d; ++j) gb[j] += up[r * d + j];
            }
        });
    }
    return out;
}

/// Sum along each row: [B×n] -> [B].
inline Tensor row_sum(const Tensor& a) {
    if (a.rank() != 2) throw ShapeError("row_sum requires a rank-2 tensor, got " + a.shape_string());
    const std::size_t batch = a.rows(), n = a.cols();
    Tensor out = Tensor::zeros({batch});
    for (std::size_t r = 0; r < batch; ++r)
        for (std::size_t j = 0; j < n; ++j) out.data[r] += a.data[r * n + j];
    require_all_finite(out, "row_sum");
    if (Tape* tape = detail::tape_of(a)) {
        const int an = a.node;
        out.tape = tape;
        out.node = tape->push_node(batch, {an}, [batch, n, an](Tape& t, std::span<const double> up) {
            auto ga = t.grad_mut(an);
            for (std::size_t r = 0; r < batch; ++r)
                for (std::size_t j = 0; j < n; ++j) ga[r * n + j] += up[r];
        });
    }
    return out;
}

/// Sum of all elements -> scalar.
inline Tensor sum(const Tensor& a) {
    double total = 0.0;
    for (const double v : a.data) total += v;
    Tensor out = Tensor::scalar(total);
    require_all_finite(out, "sum");
    if (Tape* tape = detail::tape_of(a)) {
        const int an = a.node;
        const std::size_t n = a.numel();
        out.tape = tape;
        out.node = tape->push_node(1, {an}, [an, n](Tape& t, std::span<const double> up) {
            auto ga = t.grad_mut(an);
            for (std::size_t i = 0; i < n; ++i) ga[i] += up[0];
        });
    }
    return out;
}

/// Select rows of x[B×d] by index; backward scatter-adds into the source rows.
inline Tensor gather_rows(const Tensor& x, const std::vector<int>& rows) {
    if (x.rank() != 2) throw ShapeError("gather_rows requires a rank-2 tensor, got " + x.shape_string());
    const std::size_t batch = x.rows(), d = x.cols();
    for (const int r : rows) {
        if (r < 0 || static_cast<std::size_t>(r) >= batch) {
            throw IndexError("gather_rows: row " + std::to_string(r) + " outside [0, " + std::to_string(batch) + ")");
        }
    }
    Tensor out = Tensor::zeros({rows.size(), d});
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const std::size_t src = static_cast<std::size_t>(rows[i]) * d;
        std::copy_n(x.data.begin() + static_cast<std::ptrdiff_t>(src), d,
                    out.data.begin() + static_cast<std::ptrdiff_t>(i * d));
    }
    if (Tape* tape = detail::tape_of(x)) {
        const int xn = x.node;
        out.tape = tape;
        out.node = tape->push_node(out.numel(), {xn}, [xn, rows, d](Tape& t, std::span<const double> up) {
            auto gx = t.grad_mut(xn);
            for (std::size_t i = 0; i < rows.size(); ++i) {
                const std::size_t dst = static_cast<std::size_t>(rows[i]) * d;
                for (std::size_t j = 0; j < d; ++j) gx[dst + j] += up[i * d + j];
            }
        });
    }
    return out;
}

/// Divide each row of x[B×d] by its Euclidean norm. Output rows have unit
/// norm; backward applies the tangent-space projection (g - (g.y)y)/|x|.
inline Tensor l2_normalize(const Tensor& x) {
    if (x.rank() != 2) throw ShapeError("l2_normalize requires a rank-2 tensor, got " + x.shape_string());
    const std::size_t batch = x.rows(), d = x.cols();
    std::vector<double> norms(batch, 0.0);
    Tensor out = Tensor::zeros(x.shape);
    for (std::size_t r = 0; r < batch; ++r) {
        double sq = 0.0;
        for (std::size_t j = 0; j < d; ++j) sq += x.data[r * d + j] * x.data[r * d + j];
        norms[r] = std::sqrt(sq);
        if (norms[r] <= 1e-12) {
            throw DegenerateInputError("l2_normalize: row " + std::to_string(r) + " has near-zero norm");
        }
        for (std::size_t j = 0; j < d; ++j) out.data[r * d + j] = x.data[r * d + j] / norms[r];
    }
    require_all_finite(out, "l2_normalize");
    if (Tape* tape = detail::tape_of(x)) {
        const int xn = x.node;
        out.tape = tape;
        out.node = tape->push_node(out.numel(), {xn},
                                   [xn, batch, d, norms, ydata = out.data](Tape& t, std::span<const double> up) {
                                       auto gx = t.grad_mut(xn);
                                       for (std::size_t r = 0; r < batch; ++r) {
                                           double dot = 0.0;
                                           for (std::size_t j = 0; j < d; ++j) dot += up[r * d + j] * ydata[r * d + j];
                                           for (std::size_t j = 0; j < d; ++j) {
                                               gx[r * d + j] += (up[r * d + j] - dot * ydata[r * d + j]) / norms[r];
                                           }
                                       }
                                   });
    }
    return out;
}

/// Row-wise softmax of a constant tensor (no tape participation).
inline Tensor softmax_rows(const Tensor& logits) {
    if (logits.rank() != 2) throw ShapeError("softmax_rows requires a rank-2 tensor, got " + logits.shape_string());
    const std::size_t batch = logits.rows(), classes = logits.cols();
    Tensor out = Tensor::zeros(logits.shape);
    for (std::size_t r = 0; r < batch; ++r) {
        double hi = logits.data[r * classes];
        for (std::size_t c = 1; c < classes; ++c) hi = std::max(hi, logits.data[r * classes + c]);
        double denom = 0.0;
        for (std::size_t c = 0; c < classes; ++c) {
            out.data[r * classes + c] = std::exp(logits.data[r * classes + c] - hi);
            denom += out.data[r * classes + c];
        }
        for (std::size_t c = 0; c < classes; ++c) out.data[r * classes + c] /= denom;
    }
    return out;
}

/// Mean over the batch of -log softmax(logits)[target], stabilized by
/// max-subtraction. Backward per row: (softmax(logits) - onehot) / batch.
inline Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& targets) {
    if (logits.rank() != 2) {
        throw ShapeError("softmax_cross_entropy requires [BxC] logits, got " + logits.shape_string());
    }
    const std::size_t batch = logits.rows(), classes = logits.cols();
    if (classes < 2) throw ContractError("softmax_cross_entropy requires at least 2 classes");
    if (batch == 0) throw ContractError("softmax_cross_entropy requires a nonempty batch");
    if (targets.size() != batch) {
        throw ShapeError("softmax_cross_entropy: " + std::to_string(targets.size()) + " targets for batch " +
                         std::to_string(batch));
    }
    for (const int t : targets) {
        if (t < 0 || static_cast<std::size_t>(t) >= classes) {
            throw IndexError("softmax_cross_entropy: target " + std::to_string(t) + " outside [0, " +
                             std::to_string(classes) + ")");
        }
    }
    const Tensor probs = softmax_rows(logits);
    double total = 0.0;
    for (std::size_t r = 0; r < batch; ++r) {
        // log-prob computed as (logit - max) - log(sum exp) to avoid log(0)
        double hi = logits.data[r * classes];
        for (std::size_t c = 1; c < classes; ++c) hi = std::max(hi, logits.data[r * classes + c]);
        double denom = 0.0;
        for (std::size_t c = 0; c < classes; ++c) denom += std::exp(logits.data[r * classes + c] - hi);
        const double logp = logits.data[r * classes + static_cast<std::size_t>(targets[r])] - hi - std::log(denom);
        total -= logp;
    }
    Tensor out = Tensor::scalar(total / static_cast<double>(batch));
    require_all_finite(out, "softmax_cross_entropy");
    if (Tape* tape = detail::tape_of(logits)) {
        const int ln = logits.node;
        out.tape = tape;
        out.node = tape->push_node(
            1, {ln}, [ln, batch, classes, targets, probs = probs.data](Tape& t, std::span<const double> up) {
                auto gl = t.grad_mut(ln);
                const double inv = up[0] / static_cast<double>(batch);
                for (std::size_t r = 0; r < batch; ++r) {
                    for (std::size_t c = 0; c < classes; ++c) gl[r * classes + c] += inv * probs[r * classes + c];
                    gl[r * classes + static_cast<std::size_t>(targets[r])] -= inv;
                }
            });
    }
    return out;
}

/// Inverted dropout: keeps each element with probability 1-p and scales by
/// 1/(1-p). p = 0 is an exact pass-through.
inline Tensor dropout(const Tensor& x, double p, Rng& rng) {
    if (p < 0.0 || p >= 1.0) throw ConfigError("dropout probability must be in [0, 1)");
    if (p == 0.0) return x;
    std::vector<double> mask(x.numel());
    const double keep_scale = 1.0 / (1.0 - p);
    for (auto& m : mask) m = rng.uniform01() < p ? 0.0 : keep_scale;
    return mul_const(x, mask);
}

}  // namespace adrmx
