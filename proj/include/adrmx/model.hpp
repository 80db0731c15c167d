#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "adrmx/data.hpp"
#include "adrmx/error.hpp"
#include "adrmx/nn.hpp"
#include "adrmx/ops.hpp"
#include "adrmx/rng.hpp"
#include "adrmx/tape.hpp"
#include "adrmx/tensor.hpp"
#include "adrmx/warnings.hpp"

namespace adrmx {

enum class ContrastiveOn { kLabel, kDinv, kBoth };

inline const char* to_string(ContrastiveOn v) {
    switch (v) {
        case ContrastiveOn::kLabel: return "label";
        case ContrastiveOn::kDinv: return "dinv";
        case ContrastiveOn::kBoth: return "both";
    }
    return "?";
}

inline ContrastiveOn contrastive_on_from_string(const std::string& s) {
    if (s == "label") return ContrastiveOn::kLabel;
    if (s == "dinv") return ContrastiveOn::kDinv;
    if (s == "both") return ContrastiveOn::kBoth;
    throw ConfigError("contrastive_on must be one of label|dinv|both, got '" + s + "'");
}

struct AdrmxConfig {
    std::size_t d_in = 0;
    std::size_t latent_dim = 64;
    std::vector<std::size_t> encoder_hidden = {256, 128};
    std::vector<std::size_t> head_hidden = {128};
    std::vector<std::size_t> discriminator_hidden = {128, 128};
    std::size_t num_classes = 0;
    std::size_t num_domains = 0;  // source domains S seen in training

    double lambda = 1.0;
    double temperature = 1.0;
    bool use_remix = true;
    bool use_contrastive = true;
    ContrastiveOn contrastive_on = ContrastiveOn::kBoth;
    bool dinv_uses_shared_head = true;

    // unit-weight defaults for the three cross-entropy terms
    double ce_label_weight = 1.0;
    double ce_domain_weight = 1.0;
    double ce_dinv_weight = 1.0;

    double dropout = 0.0;

    void validate() const {
        if (d_in == 0 || latent_dim == 0) throw ConfigError("model dims must be positive");
        if (num_classes < 2) throw ConfigError("need at least 2 classes");
        if (num_domains < 2) throw ConfigError("need at least 2 source domains");
        if (lambda < 0.0) throw ConfigError("lambda must be nonnegative");
        if (temperature <= 0.0) throw ConfigError("temperature must be positive");
        if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must lie in [0, 1)");
    }
};

/// All trainable parameter groups. The label classifier is one shared head:
/// the same parameters score x_label, x_dinv (under the default flag), and
/// x_remixed.
struct AdrmxParams {
    Mlp label_encoder;
    Mlp domain_encoder;
    Mlp label_classifier;
    Mlp dinv_classifier;  // only populated when !dinv_uses_shared_head
    Mlp domain_classifier;
    Mlp discriminator;

    /// Parameters updated by the generator optimizer.
    std::vector<Parameter*> generator_parameters() {
        std::vector<Parameter*> out;
        for (Mlp* net : {&label_encoder, &domain_encoder, &label_classifier, &dinv_classifier,
                         &domain_classifier}) {
            for (Parameter* p : net->parameters()) out.push_back(p);
        }
        return out;
    }

    std::vector<Parameter*> discriminator_parameters() { return discriminator.parameters(); }

    std::vector<Parameter*> all_parameters() {
        std::vector<Parameter*> out = generator_parameters();
        for (Parameter* p : discriminator_parameters()) out.push_back(p);
        return out;
    }

    std::vector<const Parameter*> generator_parameters() const {
        std::vector<const Parameter*> out;
        for (const Mlp* net : {&label_encoder, &domain_encoder, &label_classifier, &dinv_classifier,
                               &domain_classifier}) {
            for (const Parameter* p : net->parameters()) out.push_back(p);
        }
        return out;
    }

    std::vector<const Parameter*> discriminator_parameters() const { return discriminator.parameters(); }

    std::vector<const Parameter*> all_parameters() const {
        std::vector<const Parameter*> out = generator_parameters();
        for (const Parameter* p : discriminator_parameters()) out.push_back(p);
        return out;
    }
};

inline AdrmxParams make_adrmx_params(const AdrmxConfig& config, std::uint64_t seed) {
    config.validate();
    const auto widths = [](std::size_t in, const std::vector<std::size_t>& hidden, std::size_t out) {
        std::vector<std::size_t> w{in};
        w.insert(w.end(), hidden.begin(), hidden.end());
        w.push_back(out);
        return w;
    };
    AdrmxParams params;
    Rng r0(derive_seed(seed, "init", 0)), r1(derive_seed(seed, "init", 1)), r2(derive_seed(seed, "init", 2));
    Rng r3(derive_seed(seed, "init", 3)), r4(derive_seed(seed, "init", 4)), r5(derive_seed(seed, "init", 5));
    params.label_encoder = make_mlp("label_encoder", widths(config.d_in, config.encoder_hidden, config.latent_dim), r0);
    params.domain_encoder =
        make_mlp("domain_encoder", widths(config.d_in, config.encoder_hidden, config.latent_dim), r1);
    params.label_classifier =
        make_mlp("label_classifier", widths(config.latent_dim, config.head_hidden, config.num_classes), r2);
    if (!config.dinv_uses_shared_head) {
        params.dinv_classifier =
            make_mlp("dinv_classifier", widths(config.latent_dim, config.head_hidden, config.num_classes), r3);
    }
    params.domain_classifier =
        make_mlp("domain_classifier", widths(config.latent_dim, config.head_hidden, config.num_domains), r4);
    params.discriminator =
        make_mlp("discriminator", widths(config.latent_dim, config.discriminator_hidden, config.num_domains), r5);
    return params;
}

/// Which optimizer the current pass serves. The other side's parameters stay
/// off the tape, so its gradients are structurally zero rather than merely
/// discarded.
enum class TrainSide { kGenerator, kDiscriminator, kEval };

/// Everything one training step derives from a composite batch.
struct ForwardArtifacts {
    Tensor x_label;    // [B x d]
    Tensor x_domain;   // [B x d]
    Tensor x_dinv;     // [B x d], x_label - x_domain on the tape
    Tensor x_remixed;  // [R x d], R <= B
    std::vector<std::pair<int, int>> remix_pairs;  // (anchor, style donor)
    std::vector<int> remix_labels;
    Tensor logits_label;   // [B x C]
    Tensor logits_dinv;    // [B x C]
    Tensor logits_remix;   // [R x C]
    Tensor logits_domain;  // [B x S]
    Tensor logits_disc;    // [B x S]
};

/// Run both encoders. Independent parameter sets, independent graphs.
inline std::pair<Tensor, Tensor> encode(const AdrmxParams& params, const Tensor& inputs,
                                        LeafSet* leaves = nullptr) {
    if (inputs.rank() != 2 || inputs.cols() != params.label_encoder.input_dim()) {
        throw ShapeError("encode: inputs " + inputs.shape_string() + " do not match encoder input width " +
                         std::to_string(params.label_encoder.input_dim()));
    }
    return {params.label_encoder.forward(inputs, leaves), params.domain_encoder.forward(inputs, leaves)};
}

/// x_dinv = x_label - x_domain, on the tape when its inputs are.
inline Tensor disentangle(const Tensor& x_label, const Tensor& x_domain) { return sub(x_label, x_domain); }

/// For each anchor, one uniformly chosen partner with the same label from a
/// different domain. Anchors with no eligible partner are dropped.
inline std::vector<std::pair<int, int>> remix_pairing(const std::vector<int>& labels,
                                                      const std::vector<int>& domain_ids, Rng& rng) {
    if (labels.size() != domain_ids.size()) {
        throw ShapeError("remix_pairing: " + std::to_string(labels.size()) + " labels vs " +
                         std::to_string(domain_ids.size()) + " domain ids");
    }
    std::vector<std::pair<int, int>> pairs;
    std::vector<int> eligible;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        eligible.clear();
        for (std::size_t j = 0; j < labels.size(); ++j) {
            if (labels[j] == labels[i] && domain_ids[j] != domain_ids[i]) {
                eligible.push_back(static_cast<int>(j));
            }
        }
        if (eligible.empty()) continue;
        pairs.emplace_back(static_cast<int>(i), eligible[rng.below(eligible.size())]);
    }
    return pairs;
}

/// x_remixed = x_dinv[anchor] + x_domain[donor], row for row.
inline Tensor remix(const Tensor& x_dinv, const Tensor& x_domain,
                    const std::vector<std::pair<int, int>>& pairs) {
    require_same_shape(x_dinv, x_domain, "remix");
    std::vector<int> anchors, donors;
    anchors.reserve(pairs.size());
    donors.reserve(pairs.size());
    for (const auto& [i, j] : pairs) {
        anchors.push_back(i);
        donors.push_back(j);
    }
    return add(gather_rows(x_dinv, anchors), gather_rows(x_domain, donors));
}

/// Full training-side forward pass. `side` picks which parameter group joins
/// the tape; the other group is evaluated as constants, which is what routes
/// the adversarial gradients (encoders feel the discriminator through its
/// frozen weights, the discriminator sees x_dinv as fixed input).
inline ForwardArtifacts forward_train(AdrmxParams& params, const CompositeBatch& batch,
                                      const AdrmxConfig& config, Rng& rng, LeafSet* leaves = nullptr,
                                      TrainSide side = TrainSide::kEval) {
    config.validate();
    if (batch.labels.empty()) throw ContractError("forward_train: empty batch");
    const bool single_domain =
        std::all_of(batch.domain_slots.begin(), batch.domain_slots.end(),
                    [&](int s) { return s == batch.domain_slots.front(); });
    if (single_domain) emit_warning("composite batch covers a single domain; remix contributes nothing");

    LeafSet* gen_leaves = side == TrainSide::kGenerator ? leaves : nullptr;
    LeafSet* disc_leaves = side == TrainSide::kDiscriminator ? leaves : nullptr;
    Rng* dropout_rng = config.dropout > 0.0 ? &rng : nullptr;

    ForwardArtifacts art;
    auto [x_label, x_domain] = encode(params, batch.inputs, gen_leaves);
    art.x_label = std::move(x_label);
    art.x_domain = std::move(x_domain);
    art.x_dinv = disentangle(art.x_label, art.x_domain);

    art.logits_label = params.label_classifier.forward(art.x_label, gen_leaves, config.dropout, dropout_rng);
    const Mlp& dinv_head = config.dinv_uses_shared_head ? params.label_classifier : params.dinv_classifier;
    art.logits_dinv = dinv_head.forward(art.x_dinv, gen_leaves, config.dropout, dropout_rng);
    art.logits_domain = params.domain_classifier.forward(art.x_domain, gen_leaves, config.dropout, dropout_rng);

    art.x_remixed = Tensor::zeros({0, art.x_dinv.cols()});
    art.logits_remix = Tensor::zeros({0, static_cast<std::size_t>(config.num_classes)});
    if (config.use_remix) {
        art.remix_pairs = remix_pairing(batch.labels, batch.domain_ids, rng);
        if (!art.remix_pairs.empty()) {
            art.x_remixed = remix(art.x_dinv, art.x_domain, art.remix_pairs);
            for (const auto& pair : art.remix_pairs) {
                art.remix_labels.push_back(batch.labels[static_cast<std::size_t>(pair.first)]);
            }
            art.logits_remix =
                params.label_classifier.forward(art.x_remixed, gen_leaves, config.dropout, dropout_rng);
        }
    }

    // Discriminator reads x_dinv; on the generator side its weights stay
    // constant, on the discriminator side the input must be constant.
    const Tensor dinv_for_disc =
        side == TrainSide::kDiscriminator ? art.x_dinv.constant() : art.x_dinv;
    art.logits_disc = params.discriminator.forward(dinv_for_disc, disc_leaves, config.dropout, dropout_rng);
    return art;
}

/// Inference path: label encoder into the shared classifier, softmax rows.
/// The domain-side networks are never evaluated.
inline Tensor predict(const AdrmxParams& params, const Tensor& inputs) {
    if (inputs.rank() != 2 || inputs.cols() != params.label_encoder.input_dim()) {
        throw ShapeError("predict: inputs " + inputs.shape_string() + " do not match encoder input width " +
                         std::to_string(params.label_encoder.input_dim()));
    }
    return softmax_rows(params.label_classifier.forward(params.label_encoder.forward(inputs)));
}

}  // namespace adrmx
