#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "adrmx/data.hpp"
#include "adrmx/eval.hpp"
#include "adrmx/model.hpp"
#include "adrmx/rng.hpp"
#include "adrmx/tensor.hpp"
#include "adrmx/training.hpp"
#include "adrmx/warnings.hpp"
#include "support.hpp"

using namespace adrmx;
using Catch::Approx;

namespace {

TrainConfig tiny_eval_config(std::size_t steps) {
    TrainConfig config;
    config.steps = steps;
    config.batch_per_domain = 8;
    config.eta_gen = 3e-3;
    config.latent_dim = 8;
    config.encoder_hidden = {12};
    config.head_hidden = {8};
    config.discriminator_hidden = {8};
    config.eval_every = 10;
    return config;
}

std::size_t count_fields(const std::string& line) {
    return static_cast<std::size_t>(std::count(line.begin(), line.end(), ',')) + 1;
}

std::vector<std::string> split_lines(const std::string& text) {
    std::vector<std::string> lines;
    std::size_t start = 0;
    while (start < text.size()) {
        const std::size_t end = text.find('\n', start);
        lines.push_back(text.substr(start, end - start));
        if (end == std::string::npos) break;
        start = end + 1;
    }
    return lines;
}

}  // namespace

TEST_CASE("accuracy counts argmax hits", "[eval]") {
    SECTION("perfect one-hot predictions score 1") {
        const std::vector<int> labels{2, 0, 1, 2};
        Tensor probs = Tensor::zeros({4, 3});
        for (std::size_t i = 0; i < labels.size(); ++i) probs.at(i, static_cast<std::size_t>(labels[i])) = 1.0;
        CHECK(accuracy(probs, labels) == 1.0);
    }

    SECTION("binary complements partition the rows") {
        // 128 rows make both hit fractions exact dyadic rationals, so the two
        // accuracies sum to exactly one.
        const std::size_t n = 128;
        Rng rng(11);
        Tensor logits = Tensor::zeros({n, 2});
        std::vector<int> labels(n), flipped(n);
        for (std::size_t i = 0; i < n; ++i) {
            logits.at(i, 0) = rng.gaussian();
            logits.at(i, 1) = rng.gaussian();
            labels[i] = static_cast<int>(rng.below(2));
            flipped[i] = 1 - labels[i];
        }
        const Tensor probs = softmax_rows(logits);
        CHECK(accuracy(probs, labels) + accuracy(probs, flipped) == 1.0);
    }

    SECTION("uniform random predictions sit at chance") {
        const std::size_t n = 10000, classes = 10;
        Rng rng(5);
        Tensor probs = Tensor::zeros({n, classes});
        std::vector<int> labels(n);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t c = 0; c < classes; ++c) probs.at(i, c) = rng.uniform(0.0, 1.0);
            labels[i] = static_cast<int>(rng.below(classes));
        }
        CHECK(accuracy(probs, labels) == Approx(0.1).margin(0.01));
    }

    SECTION("malformed inputs are rejected") {
        CHECK_THROWS_AS(accuracy(Tensor::zeros({2, 3}), std::vector<int>{0}), ShapeError);
        CHECK_THROWS_AS(accuracy(Tensor::zeros({0, 3}), std::vector<int>{}), ContractError);
    }
}

TEST_CASE("leave one domain out covers every target with a clean audit", "[eval]") {
    const MultiDomainTask task = gen_gaussian_domains(4, 80, 2, 6, 0.5, 21);
    const TrainConfig config = tiny_eval_config(30);
    const std::vector<std::uint64_t> seeds{0, 1};

    AccessLog log;
    const ExperimentResult result = leave_one_domain_out(task.domains, config, seeds, &log);

    REQUIRE(result.per_target.size() == 4);
    REQUIRE(result.per_seed.size() == 4);
    REQUIRE(result.cells.size() == 8);
    CHECK(result.variant == "adrmx");
    CHECK_FALSE(result.incomplete);
    for (std::size_t t = 0; t < 4; ++t) {
        CHECK(result.target_names[t] == task.domains[t].domain_name);
        REQUIRE(result.per_seed[t].size() == 2);
        for (const double acc : result.per_seed[t]) {
            CHECK(acc >= 0.0);
            CHECK(acc <= 1.0);
        }
    }

    SECTION("mean is the arithmetic mean of per-target accuracies") {
        double sum = 0.0;
        for (const double a : result.per_target) sum += a;
        CHECK(result.mean == Approx(sum / 4.0).margin(1e-12));
    }

    SECTION("the audit trail never reads a cell's own target early") {
        CHECK(log.target_reads_clean());
        for (int d = 0; d < 4; ++d) {
            // One final evaluation per seed; as a source in the other three
            // cells the domain is split and validated once per seed each.
            CHECK(log.count(d, AccessPurpose::kFinalEval) == 2);
            CHECK(log.count(d, AccessPurpose::kTrainSplit) == 6);
            CHECK(log.count(d, AccessPurpose::kValEval) == 6);
        }

        AccessLog dirty;
        dirty.note(1, task.domains[1], AccessPurpose::kValEval, 0);
        CHECK_FALSE(dirty.target_reads_clean());
    }

    SECTION("rerunning a single cell reproduces its accuracy bit for bit") {
        const std::size_t t = 2, k = 1;
        std::vector<const DomainDataset*> sources;
        for (std::size_t s = 0; s < task.domains.size(); ++s) {
            if (s != t) sources.push_back(&task.domains[s]);
        }
        TrainConfig cell_config = config;
        cell_config.seed = seeds[k];
        const TrainResult run = train_on_sources(sources, cell_config);
        const double acc = accuracy(predict(run.best_params, task.domains[t].inputs), task.domains[t].labels);
        CHECK(acc == result.cells[t * 2 + k].target_accuracy);
    }
}

TEST_CASE("zero shift makes the held-out domain look like validation", "[eval]") {
    // With no domain style every domain draws from the same distribution, so
    // target accuracy must track source validation accuracy. The validation
    // splits are large enough that best-checkpoint selection cannot inflate
    // the validation side past the band.
    const MultiDomainTask task = gen_gaussian_domains(3, 400, 2, 6, 0.0, 3);
    for (const std::uint64_t seed : {0ull, 1ull, 2ull}) {
        TrainConfig config = tiny_eval_config(200);
        config.eval_every = 50;
        config.seed = seed;
        const TrainResult run = train_on_sources(task.sources(), config);
        REQUIRE_FALSE(run.record.diverged);
        const double target_acc =
            accuracy(predict(run.best_params, task.target().inputs), task.target().labels);
        CHECK(std::abs(target_acc - run.record.best_val_acc) <= 0.03 + 1e-12);
    }
}

TEST_CASE("diverged cells are marked incomplete instead of fabricated", "[eval]") {
    const MultiDomainTask task = gen_gaussian_domains(3, 60, 2, 6, 0.5, 9);
    TrainConfig config = tiny_eval_config(25);
    config.eta_gen = 1e150;  // overflows the forward pass within a few steps
    config.use_contrastive = false;

    const ExperimentResult result = leave_one_domain_out(task.domains, config, {0});
    CHECK(result.incomplete);
    REQUIRE(result.cells.size() == 3);
    for (const auto& cell : result.cells) {
        CHECK(cell.diverged);
        CHECK_FALSE(cell.record.divergence_message.empty());
    }
    for (const auto& accs : result.per_seed) {
        REQUIRE(accs.size() == 1);
        CHECK(std::isnan(accs[0]));
    }
    for (const double acc : result.per_target) CHECK(acc == 0.0);
    CHECK(result.mean == 0.0);
}

TEST_CASE("contract violations are rejected before any training", "[eval]") {
    const MultiDomainTask task = gen_gaussian_domains(3, 40, 2, 6, 0.5, 2);
    const TrainConfig config = tiny_eval_config(10);

    std::vector<DomainDataset> two(task.domains.begin(), task.domains.begin() + 2);
    CHECK_THROWS_AS(leave_one_domain_out(two, config, {0}), ConfigError);
    CHECK_THROWS_AS(leave_one_domain_out(task.domains, config, {}), ConfigError);

    std::vector<DomainDataset> clashing = task.domains;
    clashing[1].domain_id = clashing[0].domain_id;
    CHECK_THROWS_AS(leave_one_domain_out(clashing, config, {0}), ConfigError);

    ProbeConfig bad;
    bad.eta = 0.0;
    const AdrmxConfig mc = config.model_config(6, 2, 2);
    const AdrmxParams params = make_adrmx_params(mc, 0);
    CHECK_THROWS_AS(probe_domain_invariance(params, task.sources(), bad), ConfigError);
}

TEST_CASE("probes on untrained encoders stay close", "[eval]") {
    const MultiDomainTask task = gen_gaussian_domains(4, 200, 2, 6, 1.0, 31);
    const std::vector<const DomainDataset*> sources = task.sources();

    const AdrmxConfig mc = tiny_eval_config(1).model_config(6, 2, sources.size());
    const AdrmxParams params = make_adrmx_params(mc, 17);

    ProbeConfig pc;
    pc.steps = 400;
    pc.batch_per_domain = 8;
    pc.hidden = {16};
    pc.seed = 4;
    const ProbeOutcome outcome = probe_domain_invariance(params, sources, pc);

    // Random encoders treat both streams alike, and neither probe should
    // fall meaningfully below chance.
    CHECK(std::abs(outcome.gap()) < 0.05);
    CHECK(outcome.acc_on_label >= 1.0 / 3.0 - 0.02);
    CHECK(outcome.acc_on_dinv >= 1.0 / 3.0 - 0.02);
}

TEST_CASE("training hides domain identity in the invariant stream", "[eval]") {
    const MultiDomainTask task = gen_gaussian_domains(4, 300, 2, 6, 1.0, 41);
    const std::vector<const DomainDataset*> sources = task.sources();

    // The adversarial pressure needs room to act: by 1500 steps the probe
    // gap settles around eleven points on this task.
    TrainConfig config = tiny_eval_config(1500);
    config.latent_dim = 16;
    config.encoder_hidden = {24};
    config.eval_every = 100;
    config.seed = 7;
    const TrainResult run = train_on_sources(sources, config);
    REQUIRE_FALSE(run.record.diverged);

    ProbeConfig pc;
    pc.steps = 1000;
    pc.batch_per_domain = 8;
    pc.hidden = {16};
    pc.seed = 4;
    const ProbeOutcome outcome = probe_domain_invariance(run.best_params, sources, pc);

    CHECK(outcome.acc_on_dinv <= outcome.acc_on_label - 0.05);
    CHECK(outcome.acc_on_dinv >= 1.0 / 3.0 - 0.02);
}

TEST_CASE("ablation rows stay aligned for comparison", "[eval]") {
    const MultiDomainTask task = gen_gaussian_domains(3, 60, 2, 6, 0.5, 13);
    const TrainConfig config = tiny_eval_config(20);

    const std::vector<ExperimentResult> rows = run_ablations(task.domains, config, {0});
    REQUIRE(rows.size() == 4);
    CHECK(rows[0].variant == "adrmx");
    CHECK(rows[1].variant == "no_remix");
    CHECK(rows[2].variant == "no_contrastive");
    CHECK(rows[3].variant == "predict_from_dinv");

    CHECK(rows[0].config.use_remix);
    CHECK_FALSE(rows[1].config.use_remix);
    CHECK(rows[1].config.use_contrastive);
    CHECK_FALSE(rows[2].config.use_contrastive);

    for (const auto& row : rows) {
        CHECK(row.target_names == rows[0].target_names);
        REQUIRE(row.per_target.size() == 3);
        for (const double acc : row.per_target) {
            CHECK(acc >= 0.0);
            CHECK(acc <= 1.0);
        }
    }

    SECTION("the dinv-prediction variant shares the base training trajectory") {
        REQUIRE(rows[0].cells.size() == rows[3].cells.size());
        for (std::size_t i = 0; i < rows[0].cells.size(); ++i) {
            CHECK(rows[0].cells[i].record.best_val_acc == rows[3].cells[i].record.best_val_acc);
            CHECK(rows[0].cells[i].record.best_step == rows[3].cells[i].record.best_step);
        }
    }

    SECTION("the results table is one row per variant") {
        const std::string csv = results_table_csv(rows);
        const std::vector<std::string> lines = split_lines(csv);
        REQUIRE(lines.size() == 5);
        CHECK(lines[0] == "variant,gauss0,gauss1,gauss2,mean");
        for (std::size_t i = 1; i < lines.size(); ++i) CHECK(count_fields(lines[i]) == 5);
        CHECK(lines[1].rfind("adrmx,", 0) == 0);
    }
}

TEST_CASE("worker pools change wall time only", "[eval]") {
    const MultiDomainTask task = gen_gaussian_domains(3, 60, 2, 6, 0.5, 29);
    const TrainConfig config = tiny_eval_config(15);
    const std::vector<std::uint64_t> seeds{0, 1};

    AccessLog log_seq, log_pool;
    const ExperimentResult seq =
        leave_one_domain_out(task.domains, config, seeds, &log_seq, PredictStream::kLabel, 1);
    const ExperimentResult pool =
        leave_one_domain_out(task.domains, config, seeds, &log_pool, PredictStream::kLabel, 4);

    CHECK(seq.mean == pool.mean);
    CHECK(seq.per_target == pool.per_target);
    REQUIRE(seq.cells.size() == pool.cells.size());
    for (std::size_t i = 0; i < seq.cells.size(); ++i) {
        CHECK(seq.cells[i].target_accuracy == pool.cells[i].target_accuracy);
        CHECK(seq.cells[i].record.best_val_acc == pool.cells[i].record.best_val_acc);
        CHECK(seq.cells[i].seed == pool.cells[i].seed);
    }
    REQUIRE(log_seq.records.size() == log_pool.records.size());
    for (std::size_t i = 0; i < log_seq.records.size(); ++i) {
        CHECK(log_seq.records[i].cell_target == log_pool.records[i].cell_target);
        CHECK(log_seq.records[i].domain_id == log_pool.records[i].domain_id);
        CHECK(log_seq.records[i].purpose == log_pool.records[i].purpose);
        CHECK(log_seq.records[i].seed == log_pool.records[i].seed);
    }

    SECTION("random search is pool-invariant too") {
        SearchSpace space;
        space.eta_lo = 1e-3;
        space.eta_hi = 5e-3;
        const auto sources = task.sources();
        const SearchResult a = random_search(sources, space, config, 2, seeds, 5, 1);
        const SearchResult b = random_search(sources, space, config, 2, seeds, 5, 3);
        CHECK(a.selected_trial == b.selected_trial);
        REQUIRE(a.trials.size() == b.trials.size());
        for (std::size_t t = 0; t < a.trials.size(); ++t) {
            CHECK(a.trials[t].mean_val_acc == b.trials[t].mean_val_acc);
            REQUIRE(a.trials[t].runs.size() == b.trials[t].runs.size());
            for (std::size_t k = 0; k < a.trials[t].runs.size(); ++k) {
                CHECK(a.trials[t].runs[k].best_val_acc == b.trials[t].runs[k].best_val_acc);
            }
        }
    }
}

TEST_CASE("principal components preserve planted planar structure", "[eval]") {
    // Points in an exact 2-D affine subspace with distinct axis variances.
    const std::size_t n = 40, d = 7;
    Rng rng(23);
    std::vector<double> u(d), w(d);
    double nu = 0.0;
    for (auto& x : u) {
        x = rng.gaussian();
        nu += x * x;
    }
    for (std::size_t j = 0; j < d; ++j) u[j] /= std::sqrt(nu);
    double dot = 0.0, nw = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
        w[j] = rng.gaussian();
        dot += w[j] * u[j];
    }
    for (std::size_t j = 0; j < d; ++j) {
        w[j] -= dot * u[j];
        nw += w[j] * w[j];
    }
    for (std::size_t j = 0; j < d; ++j) w[j] /= std::sqrt(nw);

    Tensor features = Tensor::zeros({n, d});
    for (std::size_t i = 0; i < n; ++i) {
        const double t1 = 3.0 * rng.gaussian(), t2 = rng.gaussian();
        for (std::size_t j = 0; j < d; ++j) features.at(i, j) = 0.7 + t1 * u[j] + t2 * w[j];
    }

    std::vector<std::array<double, 2>> coords;
    std::array<double, 2> variances{};
    const std::size_t rank = adrmx::detail::project_top2(features, "plane", coords, variances);
    REQUIRE(rank == 2);
    CHECK(variances[0] >= variances[1]);

    SECTION("projections are centered") {
        double m1 = 0.0, m2 = 0.0;
        for (const auto& c : coords) {
            m1 += c[0];
            m2 += c[1];
        }
        CHECK(std::abs(m1 / n) < 1e-9);
        CHECK(std::abs(m2 / n) < 1e-9);
    }

    SECTION("component variances match the projections and stay ordered") {
        double v1 = 0.0, v2 = 0.0;
        for (const auto& c : coords) {
            v1 += c[0] * c[0];
            v2 += c[1] * c[1];
        }
        v1 /= static_cast<double>(n - 1);
        v2 /= static_cast<double>(n - 1);
        CHECK(v1 == Approx(variances[0]).epsilon(1e-9));
        CHECK(v2 == Approx(variances[1]).epsilon(1e-9));
        CHECK(v1 >= v2);
    }

    SECTION("pairwise distances survive the projection") {
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = i + 1; j < n; ++j) {
                double orig = 0.0;
                for (std::size_t k = 0; k < d; ++k) {
                    const double diff = features.at(i, k) - features.at(j, k);
                    orig += diff * diff;
                }
                const double da = coords[i][0] - coords[j][0];
                const double db = coords[i][1] - coords[j][1];
                CHECK(std::sqrt(da * da + db * db) == Approx(std::sqrt(orig)).epsilon(1e-6));
            }
        }
    }
}

TEST_CASE("rank-deficient features pad missing components with zeros", "[eval]") {
    std::vector<std::string> warnings;
    ScopedWarningHandler guard([&](const std::string& m) { warnings.push_back(m); });

    SECTION("a line keeps one component") {
        const std::size_t n = 12, d = 5;
        Tensor features = Tensor::zeros({n, d});
        Rng rng(3);
        for (std::size_t i = 0; i < n; ++i) {
            const double t = rng.gaussian();
            for (std::size_t j = 0; j < d; ++j) features.at(i, j) = t * static_cast<double>(j + 1);
        }
        std::vector<std::array<double, 2>> coords;
        std::array<double, 2> variances{};
        const std::size_t rank = adrmx::detail::project_top2(features, "line", coords, variances);
        CHECK(rank == 1);
        CHECK(variances[0] > 0.0);
        CHECK(variances[1] == 0.0);
        for (const auto& c : coords) CHECK(c[1] == 0.0);
        REQUIRE(warnings.size() == 1);
        CHECK(warnings[0].find("rank 1") != std::string::npos);
    }

    SECTION("constant features keep nothing") {
        Tensor features = Tensor::zeros({6, 4});
        for (auto& v : features.data) v = 2.5;
        std::vector<std::array<double, 2>> coords;
        std::array<double, 2> variances{};
        const std::size_t rank = adrmx::detail::project_top2(features, "flat", coords, variances);
        CHECK(rank == 0);
        for (const auto& c : coords) {
            CHECK(c[0] == 0.0);
            CHECK(c[1] == 0.0);
        }
        REQUIRE(warnings.size() == 1);
        CHECK(warnings[0].find("rank 0") != std::string::npos);
    }
}

TEST_CASE("embedding export labels every row", "[eval]") {
    const MultiDomainTask task = gen_gaussian_domains(3, 30, 2, 6, 0.5, 19);
    const AdrmxConfig mc = tiny_eval_config(1).model_config(6, 2, 2);
    const AdrmxParams params = make_adrmx_params(mc, 99);

    const std::vector<const DomainDataset*> split{&task.domains[0], &task.domains[1]};
    const EmbeddingExport exported = export_embeddings(params, split);

    const std::size_t total = 60;
    REQUIRE(exported.rows.size() == 2 * total);
    CHECK(exported.rank_domain == 2);
    CHECK(exported.rank_dinv == 2);
    CHECK(exported.variance_domain[0] >= exported.variance_domain[1]);
    CHECK(exported.variance_dinv[0] >= exported.variance_dinv[1]);

    for (std::size_t i = 0; i < total; ++i) {
        const EmbeddingRow& dom = exported.rows[i];
        const EmbeddingRow& dinv = exported.rows[total + i];
        CHECK(dom.feature_kind == "domain");
        CHECK(dinv.feature_kind == "dinv");
        CHECK(dom.sample_id == i);
        CHECK(dinv.sample_id == i);
        const DomainDataset& src = i < 30 ? task.domains[0] : task.domains[1];
        const std::size_t local = i % 30;
        CHECK(dom.class_label == src.labels[local]);
        CHECK(dom.domain_label == src.domain_id);
        CHECK(dinv.class_label == src.labels[local]);
        CHECK(dinv.domain_label == src.domain_id);
    }

    SECTION("each kind is centered") {
        for (const char* kind : {"domain", "dinv"}) {
            double m1 = 0.0, m2 = 0.0;
            for (const auto& r : exported.rows) {
                if (r.feature_kind != kind) continue;
                m1 += r.pc1;
                m2 += r.pc2;
            }
            CHECK(std::abs(m1 / static_cast<double>(total)) < 1e-9);
            CHECK(std::abs(m2 / static_cast<double>(total)) < 1e-9);
        }
    }

    SECTION("the CSV carries one line per row plus a header") {
        const std::string csv = embeddings_csv(exported.rows);
        const std::vector<std::string> lines = split_lines(csv);
        REQUIRE(lines.size() == 1 + 2 * total);
        CHECK(lines[0] == "sample_id,feature_kind,pc1,pc2,class_label,domain_label");
        CHECK(lines[1].rfind("0,domain,", 0) == 0);
        for (std::size_t i = 1; i < lines.size(); ++i) CHECK(count_fields(lines[i]) == 6);
    }
}
