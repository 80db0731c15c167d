#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "adrmx/error.hpp"
#include "adrmx/model.hpp"
#include "adrmx/ops.hpp"
#include "adrmx/tensor.hpp"

namespace adrmx {

/// In-batch supervised contrastive loss over unit-normalized rows. For each
/// anchor i with positives P(i) (same label, other rows):
///   -(1/|P(i)|) sum_{p in P(i)} log( exp(z_i.z_p/tau) / sum_{a != i} exp(z_i.z_a/tau) )
/// averaged over anchors that have at least one positive. Anchors without
/// positives contribute zero; a batch with none returns a constant zero.
inline Tensor supcon_loss(const Tensor& z, const std::vector<int>& labels, double tau) {
    if (z.rank() != 2) throw ShapeError("supcon_loss expects [Bxd] features, got " + z.shape_string());
    const std::size_t batch = z.rows(), dim = z.cols();
    if (batch < 2) throw ContractError("supcon_loss needs a batch of at least 2");
    if (labels.size() != batch) {
        throw ShapeError("supcon_loss: " + std::to_string(labels.size()) + " labels for batch " +
                         std::to_string(batch));
    }
    if (tau <= 0.0) throw ConfigError("supcon_loss: temperature must be positive");
    for (std::size_t r = 0; r < batch; ++r) {
        double sq = 0.0;
        for (std::size_t j = 0; j < dim; ++j) sq += z.data[r * dim + j] * z.data[r * dim + j];
        if (std::abs(std::sqrt(sq) - 1.0) > 1e-6) {
            throw ContractError("supcon_loss: row " + std::to_string(r) + " is not unit-normalized");
        }
    }

    std::vector<double> pos_mask(batch * batch, 0.0);
    std::vector<double> inv_pos_count(batch, 0.0);
    std::size_t eligible = 0;
    for (std::size_t i = 0; i < batch; ++i) {
        std::size_t count = 0;
        for (std::size_t p = 0; p < batch; ++p) {
            if (p != i && labels[p] == labels[i]) {
                pos_mask[i * batch + p] = 1.0;
                ++count;
            }
        }
        if (count > 0) {
            inv_pos_count[i] = 1.0 / static_cast<double>(count);
            ++eligible;
        }
    }
    if (eligible == 0) return Tensor::scalar(0.0);
    const double inv_eligible = 1.0 / static_cast<double>(eligible);

    // Similarity matrix, diagonal pushed to -inf territory so its exp is an
    // exact zero and the anchor never competes with itself.
    const Tensor sims = scale(matmul(z, transpose(z)), 1.0 / tau);
    std::vector<double> diag_penalty(batch * batch, 0.0);
    for (std::size_t i = 0; i < batch; ++i) diag_penalty[i * batch + i] = -1e9;
    const Tensor masked = add_const(sims, diag_penalty);

    // Detached per-row max keeps the exponentials bounded; adding it back to
    // log(sum exp) restores the exact log-denominator.
    std::vector<double> row_max(batch, 0.0);
    for (std::size_t i = 0; i < batch; ++i) {
        double hi = masked.data[i * batch];
        for (std::size_t j = 1; j < batch; ++j) hi = std::max(hi, masked.data[i * batch + j]);
        row_max[i] = hi;
    }
    const Tensor log_denom = add_const(log(row_sum(exp(sub_row_const(masked, row_max)))), row_max);

    // sum_i [-pos_sum_i / |P(i)| + log_denom_i] / eligible
    const Tensor pos_sum = row_sum(mul_const(sims, pos_mask));
    std::vector<double> pos_weight(batch), denom_weight(batch);
    for (std::size_t i = 0; i < batch; ++i) {
        pos_weight[i] = -inv_pos_count[i] * inv_eligible;
        denom_weight[i] = (inv_pos_count[i] > 0.0 ? 1.0 : 0.0) * inv_eligible;
    }
    return add(sum(mul_const(pos_sum, pos_weight)), sum(mul_const(log_denom, denom_weight)));
}

/// Mean cross-entropy over remixed samples; zero when no pairs formed.
inline Tensor remix_loss(const Tensor& logits_remix, const std::vector<int>& labels_remix) {
    if (labels_remix.empty()) return Tensor::scalar(0.0);
    return softmax_cross_entropy(logits_remix, labels_remix);
}

/// Discriminator objective: classify the source domain of x_dinv.
inline Tensor discriminator_loss(const Tensor& logits_disc, const std::vector<int>& domain_slots) {
    return softmax_cross_entropy(logits_disc, domain_slots);
}

/// Per-term values as they enter the generator objective, plus the
/// discriminator's own loss. `disc` is stored unscaled.
struct LossBreakdown {
    double ce_label = 0.0;
    double ce_domain = 0.0;
    double ce_dinv = 0.0;
    double remix = 0.0;
    double contrastive = 0.0;
    double disc = 0.0;
    double generator_total = 0.0;
};

/// Recompose the generator total from logged parts.
inline double recompose_generator_total(const LossBreakdown& parts, double lambda) {
    return parts.ce_label + parts.ce_domain + parts.ce_dinv + parts.remix + parts.contrastive -
           lambda * parts.disc;
}

struct GeneratorLoss {
    Tensor total;  // scalar, on the tape
    LossBreakdown parts;
};

namespace detail {

template <class Fn>
Tensor named_term(const char* name, Fn&& compute) {
    try {
        Tensor value = compute();
        if (!std::isfinite(value.item())) {
            throw DivergenceError(std::string(name) + " is not finite");
        }
        return value;
    } catch (const DivergenceError& e) {
        throw DivergenceError(std::string(name) + ": " + e.what());
    }
}

}  // namespace detail

/// Build the full generator objective from one forward pass. The returned
/// scalar lives on the forward tape; parts hold the logged values. The
/// adversarial term enters through logits_disc, which were produced with
/// constant discriminator weights, so -lambda * disc reaches only the
/// encoders.
inline GeneratorLoss assemble_generator_loss(const ForwardArtifacts& art, const CompositeBatch& batch,
                                             const AdrmxConfig& config) {
    GeneratorLoss out;

    Tensor ce_label = detail::named_term("ce_label", [&] {
        Tensor t = softmax_cross_entropy(art.logits_label, batch.labels);
        return config.ce_label_weight == 1.0 ? t : scale(t, config.ce_label_weight);
    });
    Tensor ce_domain = detail::named_term("ce_domain", [&] {
        Tensor t = softmax_cross_entropy(art.logits_domain, batch.domain_slots);
        return config.ce_domain_weight == 1.0 ? t : scale(t, config.ce_domain_weight);
    });
    Tensor ce_dinv = detail::named_term("ce_dinv", [&] {
        Tensor t = softmax_cross_entropy(art.logits_dinv, batch.labels);
        return config.ce_dinv_weight == 1.0 ? t : scale(t, config.ce_dinv_weight);
    });
    out.parts.ce_label = ce_label.item();
    out.parts.ce_domain = ce_domain.item();
    out.parts.ce_dinv = ce_dinv.item();

    Tensor total = add(add(ce_label, ce_domain), ce_dinv);

    if (config.use_remix) {
        Tensor remix_term =
            detail::named_term("remix", [&] { return remix_loss(art.logits_remix, art.remix_labels); });
        out.parts.remix = remix_term.item();
        total = add(total, remix_term);
    }

    if (config.use_contrastive) {
        Tensor contrastive = detail::named_term("contrastive", [&] {
            const bool on_label = config.contrastive_on != ContrastiveOn::kDinv;
            const bool on_dinv = config.contrastive_on != ContrastiveOn::kLabel;
            Tensor acc = Tensor::scalar(0.0);
            if (on_label) acc = add(acc, supcon_loss(l2_normalize(art.x_label), batch.labels, config.temperature));
            if (on_dinv) acc = add(acc, supcon_loss(l2_normalize(art.x_dinv), batch.labels, config.temperature));
            return acc;
        });
        out.parts.contrastive = contrastive.item();
        total = add(total, contrastive);
    }

    Tensor disc_term =
        detail::named_term("disc", [&] { return discriminator_loss(art.logits_disc, batch.domain_slots); });
    out.parts.disc = disc_term.item();
    if (config.lambda != 0.0) {
        total = sub(total, scale(disc_term, config.lambda));
    }

    out.parts.generator_total = total.item();
    out.total = std::move(total);
    return out;
}

}  // namespace adrmx
