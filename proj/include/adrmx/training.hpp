#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "adrmx/data.hpp"
#include "adrmx/error.hpp"
#include "adrmx/losses.hpp"
#include "adrmx/model.hpp"
#include "adrmx/nn.hpp"
#include "adrmx/parallel.hpp"
#include "adrmx/rng.hpp"

namespace adrmx {

/// Adam with bias correction. Moment buffers are keyed by parameter name, so
/// update outcomes do not depend on the order parameters are listed in.
struct AdamState {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;  // decoupled: theta -= lr * wd * theta
    std::uint64_t t = 0;

    struct Moments {
        std::vector<double> m, v;
    };
    std::map<std::string, Moments> slots;
};

inline void adam_step(AdamState& state, std::span<Parameter* const> params) {
    ++state.t;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
    for (Parameter* p : params) {
        auto& slot = state.slots[p->name];
        if (slot.m.empty()) {
            slot.m.assign(p->value.numel(), 0.0);
            slot.v.assign(p->value.numel(), 0.0);
        }
        if (slot.m.size() != p->grad.size()) {
            throw ContractError("adam_step: moment shape mismatch for " + p->name);
        }
        for (std::size_t i = 0; i < p->grad.size(); ++i) {
            const double g = p->grad[i];
            if (!std::isfinite(g)) {
                throw DivergenceError("adam_step: non-finite gradient in " + p->name);
            }
            slot.m[i] = state.beta1 * slot.m[i] + (1.0 - state.beta1) * g;
            slot.v[i] = state.beta2 * slot.v[i] + (1.0 - state.beta2) * g * g;
            const double m_hat = slot.m[i] / bc1;
            const double v_hat = slot.v[i] / bc2;
            double& theta = p->value.data[i];
            if (state.weight_decay != 0.0) theta -= state.lr * state.weight_decay * theta;
            theta -= state.lr * m_hat / (std::sqrt(v_hat) + state.eps);
        }
    }
}

struct TrainConfig {
    std::size_t steps = 2000;
    std::size_t batch_per_domain = 16;
    double eta_gen = 1e-3;
    double eta_disc = 0.0;  // 0 -> eta_gen * 0.5
    double lambda = 1.0;
    double temperature = 1.0;
    double holdout_fraction = 0.2;
    std::size_t latent_dim = 64;
    std::vector<std::size_t> encoder_hidden = {256, 128};
    std::vector<std::size_t> head_hidden = {128};
    std::vector<std::size_t> discriminator_hidden = {128, 128};
    bool use_remix = true;
    bool use_contrastive = true;
    ContrastiveOn contrastive_on = ContrastiveOn::kBoth;
    bool dinv_uses_shared_head = true;
    std::size_t disc_steps_per_gen = 1;
    double dropout = 0.0;
    double weight_decay = 0.0;
    double ce_label_weight = 1.0;
    double ce_domain_weight = 1.0;
    double ce_dinv_weight = 1.0;
    std::size_t eval_every = 100;
    std::uint64_t seed = 0;

    double disc_lr() const { return eta_disc > 0.0 ? eta_disc : eta_gen * 0.5; }

    void validate() const {
        if (steps == 0) throw ConfigError("steps must be at least 1");
        if (batch_per_domain == 0) throw ConfigError("batch_per_domain must be positive");
        if (eta_gen <= 0.0) throw ConfigError("eta_gen must be positive");
        if (eta_disc < 0.0) throw ConfigError("eta_disc must be nonnegative");
        if (lambda < 0.0) throw ConfigError("lambda must be nonnegative");
        if (temperature <= 0.0) throw ConfigError("temperature must be positive");
        if (eval_every == 0) throw ConfigError("eval_every must be positive");
        if (!(holdout_fraction > 0.0 && holdout_fraction < 1.0)) {
            throw ConfigError("holdout_fraction must lie in (0, 1)");
        }
    }

    AdrmxConfig model_config(std::size_t d_in, std::size_t num_classes, std::size_t num_domains) const {
        AdrmxConfig mc;
        mc.d_in = d_in;
        mc.latent_dim = latent_dim;
        mc.encoder_hidden = encoder_hidden;
        mc.head_hidden = head_hidden;
        mc.discriminator_hidden = discriminator_hidden;
        mc.num_classes = num_classes;
        mc.num_domains = num_domains;
        mc.lambda = lambda;
        mc.temperature = temperature;
        mc.use_remix = use_remix;
        mc.use_contrastive = use_contrastive;
        mc.contrastive_on = contrastive_on;
        mc.dinv_uses_shared_head = dinv_uses_shared_head;
        mc.ce_label_weight = ce_label_weight;
        mc.ce_domain_weight = ce_domain_weight;
        mc.ce_dinv_weight = ce_dinv_weight;
        mc.dropout = dropout;
        return mc;
    }
};

/// Mutable state of one training run.
struct TrainState {
    AdrmxConfig model_config;
    AdrmxParams params;
    AdamState adam_gen;
    AdamState adam_disc;
    Rng model_rng;  // remix pairing and dropout draws
    std::uint64_t step = 0;
    double best_val_acc = -1.0;
    std::uint64_t best_step = 0;
};

inline TrainState make_train_state(const AdrmxConfig& model_config, const TrainConfig& config) {
    TrainState state;
    state.model_config = model_config;
    state.params = make_adrmx_params(model_config, derive_seed(config.seed, "model"));
    state.adam_gen.lr = config.eta_gen;
    state.adam_gen.weight_decay = config.weight_decay;
    state.adam_disc.lr = config.disc_lr();
    state.adam_disc.weight_decay = config.weight_decay;
    state.model_rng.reseed(derive_seed(config.seed, "model-stream"));
    return state;
}

/// One generator update: forward with frozen discriminator weights, full
/// objective, Adam on the generator parameter group.
inline LossBreakdown generator_step(TrainState& state, const CompositeBatch& batch) {
    Tape tape;
    LeafSet leaves(tape);
    const ForwardArtifacts art =
        forward_train(state.params, batch, state.model_config, state.model_rng, &leaves, TrainSide::kGenerator);
    GeneratorLoss loss = assemble_generator_loss(art, batch, state.model_config);

    const auto params = state.params.generator_parameters();
    for (Parameter* p : params) p->zero_grad();
    tape.backward(loss.total);
    leaves.harvest();
    adam_step(state.adam_gen, params);
    return loss.parts;
}

/// One discriminator update: encoders run detached, CE against the batch's
/// domain slots, Adam on the discriminator group only.
inline double discriminator_step(TrainState& state, const CompositeBatch& batch) {
    Tape tape;
    LeafSet leaves(tape);
    auto [x_label, x_domain] = encode(state.params, batch.inputs);  // constants: no leaves
    const Tensor x_dinv = disentangle(x_label, x_domain);
    Rng* dropout_rng = state.model_config.dropout > 0.0 ? &state.model_rng : nullptr;
    const Tensor logits =
        state.params.discriminator.forward(x_dinv, &leaves, state.model_config.dropout, dropout_rng);
    const Tensor loss = discriminator_loss(logits, batch.domain_slots);

    const auto params = state.params.discriminator_parameters();
    for (Parameter* p : params) p->zero_grad();
    tape.backward(loss);
    leaves.harvest();
    adam_step(state.adam_disc, params);
    return loss.item();
}

struct EvalPoint {
    std::uint64_t step = 0;
    double val_acc = 0.0;
    LossBreakdown losses;
};

/// Outcome summary of one training run.
struct RunRecord {
    std::uint64_t seed = 0;
    std::uint64_t steps_completed = 0;
    std::vector<EvalPoint> history;
    double best_val_acc = -1.0;
    std::uint64_t best_step = 0;
    bool diverged = false;
    std::string divergence_message;
    double wall_seconds = 0.0;
};

/// Fraction of rows whose argmax probability hits the label. Ties resolve to
/// the lowest class index, matching argmax over equal logits.
inline double accuracy(const Tensor& probabilities, const std::vector<int>& labels) {
    if (probabilities.rank() != 2 || probabilities.rows() != labels.size()) {
        throw ShapeError("accuracy: probabilities " + probabilities.shape_string() + " vs " +
                         std::to_string(labels.size()) + " labels");
    }
    if (labels.empty()) throw ContractError("accuracy over an empty set");
    const std::size_t classes = probabilities.cols();
    std::size_t hits = 0;
    for (std::size_t r = 0; r < labels.size(); ++r) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < classes; ++c) {
            if (probabilities.at(r, c) > probabilities.at(r, best)) best = c;
        }
        if (static_cast<int>(best) == labels[r]) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(labels.size());
}

/// Pooled accuracy of the inference path over several datasets.
inline double pooled_accuracy(const AdrmxParams& params, const std::vector<const DomainDataset*>& sets) {
    double weighted = 0.0;
    std::size_t total = 0;
    for (const DomainDataset* ds : sets) {
        const Tensor probs = predict(params, ds->inputs);
        weighted += accuracy(probs, ds->labels) * static_cast<double>(ds->size());
        total += ds->size();
    }
    if (total == 0) throw ContractError("pooled_accuracy over empty sets");
    return weighted / static_cast<double>(total);
}

/// Selection metric: unweighted mean of per-domain accuracies, so every
/// source domain counts equally regardless of its validation-split size.
inline double mean_domain_accuracy(const AdrmxParams& params, const std::vector<const DomainDataset*>& sets) {
    if (sets.empty()) throw ContractError("mean_domain_accuracy over empty sets");
    double sum = 0.0;
    for (const DomainDataset* ds : sets) sum += accuracy(predict(params, ds->inputs), ds->labels);
    return sum / static_cast<double>(sets.size());
}

struct TrainResult {
    TrainState state;
    RunRecord record;
    AdrmxParams best_params;  // parameters at the best validation point
};

/// Deep copy of parameter values (moments and tape state excluded).
inline AdrmxParams snapshot_params(const AdrmxParams& params) { return params; }

/// Alternating training over the source domains of a task. The target
/// domain is never read here: callers pass sources only.
inline TrainResult train_on_sources(const std::vector<const DomainDataset*>& sources,
                                    const TrainConfig& config) {
    config.validate();
    if (sources.size() < 2) throw ConfigError("training requires at least 2 source domains");
    const std::size_t d_in = sources.front()->input_dim();
    const std::size_t num_classes = static_cast<std::size_t>(sources.front()->num_classes);

    std::vector<DomainDataset> train_parts, val_parts;
    train_parts.reserve(sources.size());
    val_parts.reserve(sources.size());
    for (const DomainDataset* src : sources) {
        auto [train, val] = split_train_val(*src, SplitSpec{config.holdout_fraction, config.seed});
        train_parts.push_back(std::move(train));
        val_parts.push_back(std::move(val));
    }
    std::vector<const DomainDataset*> train_ptrs, val_ptrs;
    for (const auto& part : train_parts) train_ptrs.push_back(&part);
    for (const auto& part : val_parts) val_ptrs.push_back(&part);

    DomainBatchSampler sampler(train_ptrs, config.batch_per_domain, derive_seed(config.seed, "sampler"));

    TrainResult result;
    result.state = make_train_state(config.model_config(d_in, num_classes, sources.size()), config);
    result.record.seed = config.seed;
    result.best_params = snapshot_params(result.state.params);

    const auto start = std::chrono::steady_clock::now();
    try {
        for (std::size_t step = 1; step <= config.steps; ++step) {
            const CompositeBatch batch = sampler.next();
            const LossBreakdown parts = generator_step(result.state, batch);
            double disc_loss = parts.disc;
            for (std::size_t k = 0; k < config.disc_steps_per_gen; ++k) {
                disc_loss = discriminator_step(result.state, batch);
            }
            result.state.step = step;
            result.record.steps_completed = step;

            if (step % config.eval_every == 0 || step == config.steps) {
                const double val_acc = mean_domain_accuracy(result.state.params, val_ptrs);
                LossBreakdown logged = parts;
                logged.disc = disc_loss;
                result.record.history.push_back(EvalPoint{step, val_acc, logged});
                if (val_acc > result.state.best_val_acc) {  // ties keep the earlier step
                    result.state.best_val_acc = val_acc;
                    result.state.best_step = step;
                    result.best_params = snapshot_params(result.state.params);
                }
            }
        }
    } catch (const DivergenceError& e) {
        result.record.diverged = true;
        result.record.divergence_message = e.what();
    }
    result.record.best_val_acc = result.state.best_val_acc;
    result.record.best_step = result.state.best_step;
    result.record.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return result;
}

// ---------------------------------------------------------------------------
// Random hyperparameter search

struct SearchSpace {
    double eta_lo = 1e-4, eta_hi = 1e-2;          // log-uniform
    double lambda_lo = 0.01, lambda_hi = 10.0;    // log-uniform
    std::vector<double> tau_choices = {0.5, 1.0};
    std::vector<std::size_t> batch_choices = {8, 16, 32};
};

struct TrialRecord {
    std::size_t trial = 0;
    TrainConfig config;
    std::vector<RunRecord> runs;  // one per seed
    double mean_val_acc = -1.0;
    bool failed = false;
};

struct SearchResult {
    std::vector<TrialRecord> trials;
    std::size_t selected_trial = 0;
    TrainConfig selected_config;
};

inline TrainConfig sample_config(const SearchSpace& space, const TrainConfig& base, Rng& rng) {
    TrainConfig config = base;
    config.eta_gen = std::exp(rng.uniform(std::log(space.eta_lo), std::log(space.eta_hi)));
    config.lambda = std::exp(rng.uniform(std::log(space.lambda_lo), std::log(space.lambda_hi)));
    config.temperature = space.tau_choices[rng.below(space.tau_choices.size())];
    config.batch_per_domain = space.batch_choices[rng.below(space.batch_choices.size())];
    return config;
}

/// Random search over the space; every trial trains once per seed and is
/// scored by the mean best validation accuracy. Diverged trials are recorded
/// and excluded from selection. Each (trial, seed) run is independent, so a
/// worker pool changes nothing but wall time.
inline SearchResult random_search(const std::vector<const DomainDataset*>& sources, const SearchSpace& space,
                                  const TrainConfig& base, std::size_t n_trials,
                                  const std::vector<std::uint64_t>& seeds, std::uint64_t sweep_seed,
                                  std::size_t workers = 1) {
    if (n_trials == 0) throw ConfigError("random_search: need at least one trial");
    if (seeds.empty()) throw ConfigError("random_search: need at least one seed");
    SearchResult result;
    result.trials.resize(n_trials);
    for (std::size_t trial = 0; trial < n_trials; ++trial) {
        Rng rng(derive_seed(sweep_seed, "sweep", trial));
        result.trials[trial].trial = trial;
        result.trials[trial].config = sample_config(space, base, rng);
        result.trials[trial].runs.resize(seeds.size());
    }

    parallel_for_index(n_trials * seeds.size(), workers, [&](std::size_t i) {
        const std::size_t trial = i / seeds.size(), k = i % seeds.size();
        TrainConfig per_seed = result.trials[trial].config;
        per_seed.seed = seeds[k];
        result.trials[trial].runs[k] = train_on_sources(sources, per_seed).record;
    });

    bool any_selected = false;
    double best_score = -1.0;
    for (std::size_t trial = 0; trial < n_trials; ++trial) {
        TrialRecord& record = result.trials[trial];
        double acc_sum = 0.0;
        for (const RunRecord& run : record.runs) {
            if (run.diverged) record.failed = true;
            acc_sum += std::max(run.best_val_acc, 0.0);
        }
        if (record.failed) continue;
        record.mean_val_acc = acc_sum / static_cast<double>(seeds.size());
        if (record.mean_val_acc > best_score) {  // ties keep the earlier trial
            best_score = record.mean_val_acc;
            result.selected_trial = trial;
            result.selected_config = record.config;
            any_selected = true;
        }
    }
    if (!any_selected) throw DivergenceError("random_search: every trial diverged");
    return result;
}

}  // namespace adrmx
