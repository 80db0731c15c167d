#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "adrmx/data.hpp"
#include "adrmx/losses.hpp"
#include "adrmx/model.hpp"
#include "adrmx/nn.hpp"
#include "adrmx/ops.hpp"
#include "adrmx/rng.hpp"
#include "adrmx/tape.hpp"
#include "adrmx/training.hpp"
#include "support.hpp"

using namespace adrmx;
using Catch::Approx;

namespace {

TrainConfig tiny_train_config() {
    TrainConfig config;
    config.steps = 40;
    config.batch_per_domain = 8;
    config.eta_gen = 3e-3;
    config.latent_dim = 8;
    config.encoder_hidden = {12};
    config.head_hidden = {8};
    config.discriminator_hidden = {8};
    config.eval_every = 10;
    return config;
}

std::vector<std::uint64_t> param_checksums(const std::vector<Parameter*>& params) {
    std::vector<std::uint64_t> sums;
    sums.reserve(params.size());
    for (const Parameter* p : params) sums.push_back(testsupport::buffer_checksum(p->value.data));
    return sums;
}

/// Inputs clustered far apart per domain, so x_dinv separates by construction.
MultiDomainTask clustered_domains(std::size_t per_domain, std::uint64_t seed, double input_scale = 1.0) {
    Rng rng(seed);
    MultiDomainTask task;
    for (int d = 0; d < 3; ++d) {
        DomainDataset ds;
        ds.domain_id = d;
        ds.domain_name = "cluster" + std::to_string(d);
        ds.num_classes = 2;
        ds.inputs = Tensor::zeros({per_domain, 6});
        for (std::size_t i = 0; i < per_domain; ++i) {
            for (std::size_t j = 0; j < 6; ++j) {
                ds.inputs.at(i, j) =
                    input_scale * (rng.gaussian() * 0.1 + (j == static_cast<std::size_t>(d) ? 8.0 : 0.0));
            }
            ds.labels.push_back(static_cast<int>(i % 2));
        }
        task.domains.push_back(std::move(ds));
    }
    task.target_index = 2;
    return task;
}

}  // namespace

TEST_CASE("adam leaves parameters alone on zero gradients", "[training]") {
    AdamState state;
    state.lr = 0.1;
    Parameter p("p", Tensor({2}, {1.5, -2.0}));
    p.zero_grad();
    std::vector<Parameter*> group{&p};

    adam_step(state, group);
    CHECK(state.t == 1);
    CHECK(p.value.data[0] == 1.5);
    CHECK(p.value.data[1] == -2.0);

    adam_step(state, group);
    CHECK(state.t == 2);
    CHECK(p.value.data[0] == 1.5);
    CHECK(p.value.data[1] == -2.0);
}

TEST_CASE("adam's first step moves each element by the learning rate", "[training]") {
    AdamState state;
    state.lr = 0.1;
    Parameter p("p", Tensor({3}, {0.0, 0.0, 0.0}));
    p.grad = {3.0, -0.02, 100.0};
    std::vector<Parameter*> group{&p};
    adam_step(state, group);

    // bias-corrected m_hat / sqrt(v_hat) equals sign(g) on the first step
    CHECK(p.value.data[0] == Approx(-0.1).epsilon(1e-6));
    CHECK(p.value.data[1] == Approx(0.1).epsilon(1e-6));
    CHECK(p.value.data[2] == Approx(-0.1).epsilon(1e-6));
}

TEST_CASE("adam minimizes a convex bowl along the reference trajectory", "[training]") {
    // ||theta||^2 from [1,1] at lr 0.1: the loss falls strictly for 11 steps,
    // momentum then overshoots the origin (inherent to the update rule), and
    // 100 steps end five orders of magnitude down. Reference values come from
    // an independent simulation of the same textbook update.
    AdamState state;
    state.lr = 0.1;
    Parameter p("theta", Tensor({2}, {1.0, 1.0}));
    std::vector<Parameter*> group{&p};

    auto value = [&] { return p.value.data[0] * p.value.data[0] + p.value.data[1] * p.value.data[1]; };
    const double start = value();
    double prev = start;
    for (int step = 1; step <= 100; ++step) {
        p.grad = {2.0 * p.value.data[0], 2.0 * p.value.data[1]};
        adam_step(state, group);
        const double next = value();
        if (step <= 11) {
            CHECK(next < prev);
        }
        if (step == 11) CHECK(next == Approx(5.2664624485829655e-05).epsilon(1e-12));
        if (step == 12) {
            CHECK(next > prev);  // the overshoot is part of the contract
            CHECK(next == Approx(0.006947349903838828).epsilon(1e-12));
        }
        if (step == 100) CHECK(next == Approx(1.724812811195824e-05).epsilon(1e-12));
        prev = next;
    }
    CHECK(prev < 1e-4 * start);
}

TEST_CASE("adam rejects non-finite gradients by parameter name", "[training]") {
    AdamState state;
    Parameter p("encoder.0.weight", Tensor({2}, {0.5, 0.5}));
    p.grad = {1.0, std::numeric_limits<double>::quiet_NaN()};
    std::vector<Parameter*> group{&p};
    CHECK_THROWS_WITH(adam_step(state, group),
                      Catch::Matchers::ContainsSubstring("encoder.0.weight"));
}

TEST_CASE("adam updates are invariant to parameter listing order", "[training]") {
    auto build = [] {
        std::pair<Parameter, Parameter> ps{Parameter("a", Tensor({2}, {0.3, -0.7})),
                                           Parameter("b", Tensor({2}, {1.1, 0.4}))};
        ps.first.grad = {0.2, -0.5};
        ps.second.grad = {-1.0, 0.8};
        return ps;
    };

    auto [a1, b1] = build();
    AdamState forward_order;
    forward_order.lr = 0.05;
    std::vector<Parameter*> fwd{&a1, &b1};
    adam_step(forward_order, fwd);
    a1.grad = {0.1, 0.1};
    b1.grad = {0.2, -0.2};
    adam_step(forward_order, fwd);

    auto [a2, b2] = build();
    AdamState reverse_order;
    reverse_order.lr = 0.05;
    std::vector<Parameter*> rev{&b2, &a2};
    adam_step(reverse_order, rev);
    a2.grad = {0.1, 0.1};
    b2.grad = {0.2, -0.2};
    adam_step(reverse_order, rev);

    CHECK(testsupport::buffer_checksum(a1.value.data) == testsupport::buffer_checksum(a2.value.data));
    CHECK(testsupport::buffer_checksum(b1.value.data) == testsupport::buffer_checksum(b2.value.data));
}

TEST_CASE("adam refuses a reused name with a different shape", "[training]") {
    AdamState state;
    Parameter p("w", Tensor({2}, {0.1, 0.2}));
    p.grad = {1.0, 1.0};
    std::vector<Parameter*> group{&p};
    adam_step(state, group);

    Parameter q("w", Tensor({3}, {0.1, 0.2, 0.3}));
    q.grad = {1.0, 1.0, 1.0};
    std::vector<Parameter*> other{&q};
    CHECK_THROWS_AS(adam_step(state, other), ContractError);
}

TEST_CASE("alternating steps never touch the other side's parameters", "[training]") {
    const MultiDomainTask task = gen_gaussian_domains(3, 40, 2, 5, 0.5, 101);
    TrainConfig config = tiny_train_config();
    TrainState state = make_train_state(config.model_config(5, 2, 2), config);

    std::vector<const DomainDataset*> sources;
    for (const DomainDataset* src : task.sources()) sources.push_back(src);
    DomainBatchSampler sampler(sources, 8, 7);
    const CompositeBatch batch = sampler.next();

    const auto disc_before = param_checksums(state.params.discriminator_parameters());
    const auto gen_before = param_checksums(state.params.generator_parameters());
    generator_step(state, batch);
    CHECK(param_checksums(state.params.discriminator_parameters()) == disc_before);
    CHECK(param_checksums(state.params.generator_parameters()) != gen_before);

    const auto gen_mid = param_checksums(state.params.generator_parameters());
    discriminator_step(state, batch);
    CHECK(param_checksums(state.params.generator_parameters()) == gen_mid);
    CHECK(param_checksums(state.params.discriminator_parameters()) != disc_before);
}

TEST_CASE("lambda zero reduces a generator step to plain supervised training", "[training]") {
    TrainConfig config = tiny_train_config();
    config.lambda = 0.0;
    config.use_remix = false;
    config.use_contrastive = false;
    const AdrmxConfig model_config = config.model_config(5, 2, 3);

    const MultiDomainTask task = gen_gaussian_domains(3, 30, 2, 5, 0.5, 33);
    std::vector<const DomainDataset*> sources;
    for (const auto& d : task.domains) sources.push_back(&d);
    DomainBatchSampler sampler(sources, 8, 7);
    const CompositeBatch batch = sampler.next();

    TrainState full = make_train_state(model_config, config);
    generator_step(full, batch);

    // baseline: same init, the discriminator is never evaluated at all
    AdrmxParams base = make_adrmx_params(model_config, derive_seed(config.seed, "model"));
    {
        Tape tape;
        LeafSet leaves(tape);
        auto [x_label, x_domain] = encode(base, batch.inputs, &leaves);
        const Tensor x_dinv = disentangle(x_label, x_domain);
        const Tensor logits_label = base.label_classifier.forward(x_label, &leaves);
        const Tensor logits_dinv = base.label_classifier.forward(x_dinv, &leaves);
        const Tensor logits_domain = base.domain_classifier.forward(x_domain, &leaves);
        const Tensor ce_label = softmax_cross_entropy(logits_label, batch.labels);
        const Tensor ce_domain = softmax_cross_entropy(logits_domain, batch.domain_slots);
        const Tensor ce_dinv = softmax_cross_entropy(logits_dinv, batch.labels);
        const Tensor total = add(add(ce_label, ce_domain), ce_dinv);

        const auto params = base.generator_parameters();
        for (Parameter* p : params) p->zero_grad();
        tape.backward(total);
        leaves.harvest();
        AdamState adam;
        adam.lr = config.eta_gen;
        adam_step(adam, params);
    }

    const auto updated = full.params.generator_parameters();
    const auto baseline = base.generator_parameters();
    REQUIRE(updated.size() == baseline.size());
    for (std::size_t i = 0; i < updated.size(); ++i) {
        REQUIRE(updated[i]->name == baseline[i]->name);
        REQUIRE(updated[i]->grad.size() == baseline[i]->grad.size());
        for (std::size_t j = 0; j < updated[i]->grad.size(); ++j) {
            CHECK(std::abs(updated[i]->grad[j] - baseline[i]->grad[j]) <= 1e-12);
            CHECK(std::abs(updated[i]->value.data[j] - baseline[i]->value.data[j]) <= 1e-12);
        }
    }
}

TEST_CASE("discriminator masters well-separated domains quickly", "[training]") {
    const MultiDomainTask task = clustered_domains(30, 55);
    TrainConfig config = tiny_train_config();
    config.eta_disc = 3e-3;
    TrainState state = make_train_state(config.model_config(6, 2, 3), config);

    std::vector<const DomainDataset*> sources;
    for (const auto& d : task.domains) sources.push_back(&d);
    DomainBatchSampler sampler(sources, 10, 21);

    // chance-level start needs small inputs so the fresh logits sit near zero
    {
        const MultiDomainTask faint = clustered_domains(30, 56, 0.08);
        TrainState fresh = make_train_state(config.model_config(6, 2, 3), config);
        std::vector<const DomainDataset*> faint_sources;
        for (const auto& d : faint.domains) faint_sources.push_back(&d);
        DomainBatchSampler faint_sampler(faint_sources, 10, 22);
        CHECK(discriminator_step(fresh, faint_sampler.next()) == Approx(std::log(3.0)).margin(0.05));
    }

    for (int step = 0; step < 500; ++step) discriminator_step(state, sampler.next());

    // train accuracy of the discriminator on all rows
    std::size_t hits = 0, total = 0;
    for (const DomainDataset* ds : sources) {
        auto [x_label, x_domain] = encode(state.params, ds->inputs);
        const Tensor logits = state.params.discriminator.forward(disentangle(x_label, x_domain));
        const Tensor probs = softmax_rows(logits);
        for (std::size_t r = 0; r < ds->size(); ++r) {
            std::size_t best = 0;
            for (std::size_t c = 1; c < probs.cols(); ++c) {
                if (probs.at(r, c) > probs.at(r, best)) best = c;
            }
            hits += best == static_cast<std::size_t>(ds->domain_id) ? 1 : 0;
            ++total;
        }
    }
    CHECK(static_cast<double>(hits) / static_cast<double>(total) > 0.95);
}

TEST_CASE("training records bookkeeping and reproduces bit-for-bit", "[training]") {
    const MultiDomainTask task = gen_gaussian_domains(3, 60, 2, 5, 0.5, 77);
    std::vector<const DomainDataset*> sources;
    for (const DomainDataset* src : task.sources()) sources.push_back(src);

    TrainConfig config = tiny_train_config();
    config.seed = 5;
    const TrainResult first = train_on_sources(sources, config);
    const TrainResult second = train_on_sources(sources, config);

    CHECK(first.record.steps_completed == config.steps);
    CHECK_FALSE(first.record.diverged);
    REQUIRE(first.record.history.size() == 4);
    CHECK(first.record.history.back().step == config.steps);
    CHECK(first.record.best_val_acc >= 0.0);
    CHECK(first.record.best_step >= 1);

    REQUIRE(second.record.history.size() == first.record.history.size());
    for (std::size_t i = 0; i < first.record.history.size(); ++i) {
        CHECK(first.record.history[i].step == second.record.history[i].step);
        CHECK(first.record.history[i].val_acc == second.record.history[i].val_acc);
        CHECK(first.record.history[i].losses.generator_total ==
              second.record.history[i].losses.generator_total);
    }
    CHECK(first.record.best_step == second.record.best_step);

    const auto a = first.best_params.all_parameters();
    const auto b = second.best_params.all_parameters();
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(testsupport::buffer_checksum(a[i]->value.data) ==
              testsupport::buffer_checksum(b[i]->value.data));
    }

    TrainConfig other = config;
    other.seed = 6;
    const TrainResult third = train_on_sources(sources, other);
    CHECK(third.record.history.back().losses.generator_total !=
          first.record.history.back().losses.generator_total);
}

TEST_CASE("a short run on an easy task reaches high validation accuracy", "[training]") {
    const MultiDomainTask task = gen_gaussian_domains(3, 80, 2, 5, 0.5, 11);
    std::vector<const DomainDataset*> sources;
    for (const DomainDataset* src : task.sources()) sources.push_back(src);

    TrainConfig config = tiny_train_config();
    config.steps = 250;
    config.eval_every = 50;
    config.seed = 1;
    const TrainResult result = train_on_sources(sources, config);
    CHECK_FALSE(result.record.diverged);
    CHECK(result.record.best_val_acc > 0.9);
}

TEST_CASE("divergence aborts with a message and keeps the last good checkpoint", "[training]") {
    const MultiDomainTask task = gen_gaussian_domains(3, 40, 2, 5, 0.5, 13);
    std::vector<const DomainDataset*> sources;
    for (const DomainDataset* src : task.sources()) sources.push_back(src);

    TrainConfig config = tiny_train_config();
    config.use_contrastive = false;
    config.eta_gen = 1e150;  // overflows the forward pass within a few steps
    config.steps = 60;
    config.eval_every = 5;
    const TrainResult result = train_on_sources(sources, config);
    CHECK(result.record.diverged);
    CHECK_FALSE(result.record.divergence_message.empty());
    CHECK(result.record.steps_completed < config.steps);
}

TEST_CASE("random search selects the best completed trial reproducibly", "[training]") {
    const MultiDomainTask task = gen_gaussian_domains(3, 40, 2, 5, 0.5, 99);
    std::vector<const DomainDataset*> sources;
    for (const DomainDataset* src : task.sources()) sources.push_back(src);

    TrainConfig base = tiny_train_config();
    base.steps = 12;
    base.eval_every = 6;
    const SearchSpace space;
    const std::vector<std::uint64_t> seeds{0, 1};

    SECTION("a single trial is always selected") {
        const SearchResult result = random_search(sources, space, base, 1, seeds, 42);
        REQUIRE(result.trials.size() == 1);
        CHECK(result.selected_trial == 0);
        CHECK(result.selected_config.eta_gen == result.trials[0].config.eta_gen);
        CHECK(result.trials[0].runs.size() == seeds.size());
    }

    SECTION("selection is the argmax over completed trials and repeats exactly") {
        const SearchResult result = random_search(sources, space, base, 3, seeds, 42);
        REQUIRE(result.trials.size() == 3);

        double best = -1.0;
        std::size_t best_trial = 0;
        for (const auto& trial : result.trials) {
            CHECK(trial.config.eta_gen >= space.eta_lo);
            CHECK(trial.config.eta_gen <= space.eta_hi);
            CHECK(trial.config.lambda >= space.lambda_lo);
            CHECK(trial.config.lambda <= space.lambda_hi);
            CHECK((trial.config.temperature == 0.5 || trial.config.temperature == 1.0));
            CHECK((trial.config.batch_per_domain == 8 || trial.config.batch_per_domain == 16 ||
                   trial.config.batch_per_domain == 32));
            if (!trial.failed && trial.mean_val_acc > best) {
                best = trial.mean_val_acc;
                best_trial = trial.trial;
            }
        }
        CHECK(result.selected_trial == best_trial);

        const SearchResult again = random_search(sources, space, base, 3, seeds, 42);
        CHECK(again.selected_trial == result.selected_trial);
        for (std::size_t i = 0; i < 3; ++i) {
            CHECK(again.trials[i].mean_val_acc == result.trials[i].mean_val_acc);
        }
    }

    SECTION("empty trial or seed lists are rejected") {
        CHECK_THROWS_AS(random_search(sources, space, base, 0, seeds, 42), ConfigError);
        CHECK_THROWS_AS(random_search(sources, space, base, 1, {}, 42), ConfigError);
    }
}
