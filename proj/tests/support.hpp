#pragma once

// Shared oracles and helpers for the unit and acceptance suites. Everything
// here is independent of the library's gradient path: finite differences use
// forward evaluation only, and the loss oracles are direct double-loop
// summations.

#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "adrmx/nn.hpp"
#include "adrmx/rng.hpp"
#include "adrmx/tensor.hpp"

namespace testsupport {

inline constexpr double kFdStep = 1e-5;

/// Central finite differences of a scalar-valued function with respect to
/// one parameter's elements. The function must re-read p.value on each call.
inline std::vector<double> fd_gradient(adrmx::Parameter& p, const std::function<double()>& loss_value,
                                       double h = kFdStep) {
    std::vector<double> grad(p.value.numel(), 0.0);
    for (std::size_t i = 0; i < grad.size(); ++i) {
        const double saved = p.value.data[i];
        p.value.data[i] = saved + h;
        const double up = loss_value();
        p.value.data[i] = saved - h;
        const double down = loss_value();
        p.value.data[i] = saved;
        grad[i] = (up - down) / (2.0 * h);
    }
    return grad;
}

/// Central finite differences with respect to a raw buffer.
inline std::vector<double> fd_gradient_buffer(std::vector<double>& buffer,
                                              const std::function<double()>& loss_value, double h = kFdStep) {
    std::vector<double> grad(buffer.size(), 0.0);
    for (std::size_t i = 0; i < buffer.size(); ++i) {
        const double saved = buffer[i];
        buffer[i] = saved + h;
        const double up = loss_value();
        buffer[i] = saved - h;
        const double down = loss_value();
        buffer[i] = saved;
        grad[i] = (up - down) / (2.0 * h);
    }
    return grad;
}

/// Worst-case gradient discrepancy: relative error where the analytic value
/// is meaningful, absolute error (against an absolute floor) where it is
/// tiny. Returns the maximum over elements of the measure that applies.
inline double max_grad_error(const std::vector<double>& analytic, const std::vector<double>& fd,
                             double tiny = 1e-8) {
    double worst = 0.0;
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        const double a = analytic[i], f = fd[i];
        if (std::abs(a) < tiny) {
            // absolute comparison, scaled so that passing the 1e-8 floor
            // corresponds to an error value below 1.0 * tolerance users pick
            worst = std::max(worst, std::abs(a - f) > tiny ? 1.0 : 0.0);
        } else {
            worst = std::max(worst, std::abs(a - f) / std::abs(a));
        }
    }
    return worst;
}

/// Direct-summation softmax cross entropy: no max subtraction, no shared
/// code with the library implementation.
inline double ce_oracle(const std::vector<double>& logits, std::size_t batch, std::size_t classes,
                        const std::vector<int>& targets) {
    double total = 0.0;
    for (std::size_t r = 0; r < batch; ++r) {
        double denom = 0.0;
        for (std::size_t c = 0; c < classes; ++c) denom += std::exp(logits[r * classes + c]);
        const double p = std::exp(logits[r * classes + static_cast<std::size_t>(targets[r])]) / denom;
        total += -std::log(p);
    }
    return total / static_cast<double>(batch);
}

/// Direct softmax probabilities for gradient cross-checks.
inline std::vector<double> softmax_oracle(const std::vector<double>& logits, std::size_t batch,
                                          std::size_t classes) {
    std::vector<double> out(logits.size());
    for (std::size_t r = 0; r < batch; ++r) {
        double denom = 0.0;
        for (std::size_t c = 0; c < classes; ++c) denom += std::exp(logits[r * classes + c]);
        for (std::size_t c = 0; c < classes; ++c) out[r * classes + c] = std::exp(logits[r * classes + c]) / denom;
    }
    return out;
}

/// Brute-force supervised contrastive loss: explicit loops over every
/// (anchor, positive, denominator) triple, normalized by the count of
/// anchors that have at least one positive.
inline double supcon_oracle(const std::vector<double>& z, std::size_t batch, std::size_t dim,
                            const std::vector<int>& labels, double tau) {
    auto dot = [&](std::size_t i, std::size_t j) {
        double s = 0.0;
        for (std::size_t k = 0; k < dim; ++k) s += z[i * dim + k] * z[j * dim + k];
        return s;
    };
    double total = 0.0;
    std::size_t anchors_with_positives = 0;
    for (std::size_t i = 0; i < batch; ++i) {
        std::vector<std::size_t> positives;
        for (std::size_t p = 0; p < batch; ++p) {
            if (p != i && labels[p] == labels[i]) positives.push_back(p);
        }
        if (positives.empty()) continue;
        ++anchors_with_positives;
        double acc = 0.0;
        for (const std::size_t p : positives) {
            double denom = 0.0;
            for (std::size_t a = 0; a < batch; ++a) {
                if (a == i) continue;
                denom += std::exp(dot(i, a) / tau);
            }
            acc += std::log(std::exp(dot(i, p) / tau) / denom);
        }
        total += -acc / static_cast<double>(positives.size());
    }
    if (anchors_with_positives == 0) return 0.0;
    return total / static_cast<double>(anchors_with_positives);
}

inline adrmx::Tensor random_tensor(std::vector<std::size_t> shape, adrmx::Rng& rng, double lo = -1.0,
                                   double hi = 1.0) {
    adrmx::Tensor t = adrmx::Tensor::zeros(std::move(shape));
    for (auto& v : t.data) v = rng.uniform(lo, hi);
    return t;
}

/// FNV-1a over the raw bytes of a double buffer; used for bit-exactness and
/// parameter-freeze checks.
inline std::uint64_t buffer_checksum(const std::vector<double>& values) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    const auto* bytes = reinterpret_cast<const unsigned char*>(values.data());
    for (std::size_t i = 0; i < values.size() * sizeof(double); ++i) {
        h ^= bytes[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

}  // namespace testsupport
