#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "adrmx/data.hpp"
#include "adrmx/error.hpp"
#include "adrmx/losses.hpp"
#include "adrmx/model.hpp"
#include "adrmx/training.hpp"
#include "adrmx/warnings.hpp"

namespace adrmx {

// ---------------------------------------------------------------------------
// Access audit

/// Why a piece of domain data was touched. The evaluation protocol promises
/// that the held-out target appears only under kFinalEval.
enum class AccessPurpose { kTrainSplit, kValEval, kFinalEval };

inline const char* to_string(AccessPurpose p) {
    switch (p) {
        case AccessPurpose::kTrainSplit: return "train_split";
        case AccessPurpose::kValEval: return "val_eval";
        case AccessPurpose::kFinalEval: return "final_eval";
    }
    return "?";
}

struct AccessRecord {
    int cell_target = 0;  // the domain held out in the cell this read served
    int domain_id = 0;    // the domain actually read
    std::string domain_name;
    AccessPurpose purpose = AccessPurpose::kTrainSplit;
    std::uint64_t seed = 0;
};

/// Ordered trail of every dataset handed to a protocol phase.
struct AccessLog {
    std::vector<AccessRecord> records;

    void note(int cell_target, const DomainDataset& ds, AccessPurpose purpose, std::uint64_t seed) {
        records.push_back(AccessRecord{cell_target, ds.domain_id, ds.domain_name, purpose, seed});
    }

    std::size_t count(int domain_id, AccessPurpose purpose) const {
        std::size_t n = 0;
        for (const auto& r : records) {
            if (r.domain_id == domain_id && r.purpose == purpose) ++n;
        }
        return n;
    }

    /// The leakage guarantee: whenever a read touches the domain its own cell
    /// holds out, that read is the final accuracy evaluation and nothing else.
    bool target_reads_clean() const {
        return std::all_of(records.begin(), records.end(), [](const AccessRecord& r) {
            return r.domain_id != r.cell_target || r.purpose == AccessPurpose::kFinalEval;
        });
    }
};

// ---------------------------------------------------------------------------
// Leave-one-domain-out protocol

/// Which latent stream feeds the classifier at inference time. kDinv is the
/// ablation that predicts from x_label - x_domain instead of x_label.
enum class PredictStream { kLabel, kDinv };

inline Tensor predict_for_stream(const AdrmxParams& params, const Tensor& inputs, PredictStream stream,
                                 bool shared_head = true) {
    if (stream == PredictStream::kLabel) return predict(params, inputs);
    const auto [x_label, x_domain] = encode(params, inputs);
    const Mlp& head = shared_head ? params.label_classifier : params.dinv_classifier;
    return softmax_rows(head.forward(disentangle(x_label, x_domain)));
}

/// One (target domain, seed) training-and-evaluation run.
struct CellOutcome {
    int target_id = 0;
    std::string target_name;
    std::uint64_t seed = 0;
    double target_accuracy = 0.0;
    RunRecord record;
    bool diverged = false;
};

/// Full protocol outcome: per-target accuracies averaged over seeds, plus
/// their unweighted mean. `mean` is always the arithmetic mean of
/// `per_target`, including over cells marked incomplete.
struct ExperimentResult {
    std::string variant = "adrmx";
    std::vector<std::string> target_names;
    std::vector<double> per_target;              // seed-mean accuracy per target
    std::vector<std::vector<double>> per_seed;   // [target][seed], NaN where diverged
    std::vector<CellOutcome> cells;
    double mean = 0.0;
    TrainConfig config;
    bool incomplete = false;  // at least one cell diverged

    void recompute_mean() {
        if (per_target.empty()) throw ContractError("experiment has no targets");
        double sum = 0.0;
        for (const double a : per_target) sum += a;
        mean = sum / static_cast<double>(per_target.size());
    }
};

namespace detail {

inline void validate_domain_family(const std::vector<DomainDataset>& domains) {
    if (domains.size() < 3) {
        throw ConfigError("leave-one-domain-out needs at least 3 domains, got " +
                          std::to_string(domains.size()));
    }
    std::vector<int> ids;
    for (const auto& d : domains) {
        d.validate();
        ids.push_back(d.domain_id);
        if (d.input_dim() != domains.front().input_dim() || d.num_classes != domains.front().num_classes) {
            throw ConfigError("domain " + d.domain_name + " disagrees on input width or class count");
        }
    }
    std::sort(ids.begin(), ids.end());
    if (std::adjacent_find(ids.begin(), ids.end()) != ids.end()) {
        throw ConfigError("domain_ids must be unique");
    }
}

}  // namespace detail

/// Hold out each domain in turn, train on the rest, select the best
/// checkpoint by mean validation accuracy over the source splits, then score
/// once on the full held-out domain. Diverged cells carry NaN in `per_seed`,
/// are excluded from the per-target average, and mark the result incomplete.
/// Cells are independent: a worker pool affects wall time only, and the
/// audit log keeps its sequential record order.
inline ExperimentResult leave_one_domain_out(const std::vector<DomainDataset>& domains,
                                             const TrainConfig& config,
                                             const std::vector<std::uint64_t>& seeds,
                                             AccessLog* log = nullptr,
                                             PredictStream stream = PredictStream::kLabel,
                                             std::size_t workers = 1) {
    detail::validate_domain_family(domains);
    if (seeds.empty()) throw ConfigError("leave_one_domain_out: need at least one seed");
    config.validate();

    struct CellScratch {
        CellOutcome cell;
        AccessLog local_log;
        double acc = std::numeric_limits<double>::quiet_NaN();
    };
    const std::size_t n_seeds = seeds.size();
    std::vector<CellScratch> scratch(domains.size() * n_seeds);

    parallel_for_index(scratch.size(), workers, [&](std::size_t i) {
        const std::size_t t = i / n_seeds, k = i % n_seeds;
        const DomainDataset& target = domains[t];
        const std::uint64_t seed = seeds[k];

        std::vector<const DomainDataset*> sources;
        for (std::size_t s = 0; s < domains.size(); ++s) {
            if (s != t) sources.push_back(&domains[s]);
        }
        TrainConfig cell_config = config;
        cell_config.seed = seed;

        CellScratch& slot = scratch[i];
        AccessLog* cell_log = log ? &slot.local_log : nullptr;
        if (cell_log) {
            for (const DomainDataset* src : sources) {
                cell_log->note(target.domain_id, *src, AccessPurpose::kTrainSplit, seed);
            }
        }
        TrainResult run = train_on_sources(sources, cell_config);
        if (cell_log) {
            for (const DomainDataset* src : sources) {
                cell_log->note(target.domain_id, *src, AccessPurpose::kValEval, seed);
            }
        }

        slot.cell.target_id = target.domain_id;
        slot.cell.target_name = target.domain_name;
        slot.cell.seed = seed;
        slot.cell.record = std::move(run.record);
        slot.cell.diverged = slot.cell.record.diverged;
        if (!slot.cell.diverged) {
            if (cell_log) cell_log->note(target.domain_id, target, AccessPurpose::kFinalEval, seed);
            const Tensor probs =
                predict_for_stream(run.best_params, target.inputs, stream, config.dinv_uses_shared_head);
            slot.cell.target_accuracy = accuracy(probs, target.labels);
            slot.acc = slot.cell.target_accuracy;
        }
    });

    ExperimentResult result;
    result.config = config;
    for (std::size_t t = 0; t < domains.size(); ++t) {
        result.target_names.push_back(domains[t].domain_name);
        std::vector<double> accs;
        double acc_sum = 0.0;
        std::size_t completed = 0;
        for (std::size_t k = 0; k < n_seeds; ++k) {
            CellScratch& slot = scratch[t * n_seeds + k];
            if (log) {
                for (auto& record : slot.local_log.records) log->records.push_back(std::move(record));
            }
            if (slot.cell.diverged) {
                result.incomplete = true;
            } else {
                acc_sum += slot.acc;
                ++completed;
            }
            accs.push_back(slot.acc);
            result.cells.push_back(std::move(slot.cell));
        }
        result.per_seed.push_back(std::move(accs));
        result.per_target.push_back(completed > 0 ? acc_sum / static_cast<double>(completed) : 0.0);
    }
    result.recompute_mean();
    return result;
}

// ---------------------------------------------------------------------------
// Domain-invariance probe

/// Budget and shape of the frozen-encoder probes. Both probes share the
/// architecture, optimizer settings, step budget, initial weights, and batch
/// order, so their accuracies differ only through the features they read.
struct ProbeConfig {
    std::size_t steps = 1000;
    std::size_t batch_per_domain = 16;
    double eta = 1e-3;
    double holdout_fraction = 0.2;
    std::vector<std::size_t> hidden = {128, 128};
    std::uint64_t seed = 0;

    void validate() const {
        if (steps == 0) throw ConfigError("probe steps must be positive");
        if (batch_per_domain == 0) throw ConfigError("probe batch_per_domain must be positive");
        if (eta <= 0.0) throw ConfigError("probe eta must be positive");
        if (!(holdout_fraction > 0.0 && holdout_fraction < 1.0)) {
            throw ConfigError("probe holdout_fraction must lie in (0, 1)");
        }
    }
};

/// Held-out domain-classification accuracy of a probe trained on each
/// latent stream. A large (label - dinv) gap is the invariance evidence.
struct ProbeOutcome {
    double acc_on_label = 0.0;
    double acc_on_dinv = 0.0;
    double gap() const { return acc_on_label - acc_on_dinv; }
};

namespace detail {

/// Wrap a feature matrix as a dataset whose class label is the domain slot.
inline DomainDataset feature_dataset(Tensor features, int domain_id, const std::string& name, int slot,
                                     int num_slots) {
    DomainDataset ds;
    ds.domain_id = domain_id;
    ds.domain_name = name;
    ds.num_classes = num_slots;
    ds.labels.assign(features.rows(), slot);
    ds.inputs = std::move(features);
    return ds;
}

/// Train one probe and return its pooled held-out accuracy.
inline double run_probe(Mlp probe, const std::vector<const DomainDataset*>& train_sets,
                        const std::vector<const DomainDataset*>& val_sets, const ProbeConfig& config) {
    DomainBatchSampler sampler(train_sets, config.batch_per_domain, derive_seed(config.seed, "probe-sampler"));
    AdamState adam;
    adam.lr = config.eta;
    const auto params = probe.parameters();
    for (std::size_t step = 0; step < config.steps; ++step) {
        const CompositeBatch batch = sampler.next();
        Tape tape;
        LeafSet leaves(tape);
        const Tensor loss = softmax_cross_entropy(probe.forward(batch.inputs, &leaves), batch.labels);
        for (Parameter* p : params) p->zero_grad();
        tape.backward(loss);
        leaves.harvest();
        adam_step(adam, params);
    }
    double weighted = 0.0;
    std::size_t total = 0;
    for (const DomainDataset* ds : val_sets) {
        weighted += accuracy(softmax_rows(probe.forward(ds->inputs)), ds->labels) *
                    static_cast<double>(ds->size());
        total += ds->size();
    }
    return weighted / static_cast<double>(total);
}

}  // namespace detail

/// Freeze the encoders of a trained model and ask how much domain identity
/// each latent stream still carries: train fresh domain classifiers on
/// x_label and on x_dinv features of held-in data, score on held-out data.
inline ProbeOutcome probe_domain_invariance(const AdrmxParams& params,
                                            const std::vector<const DomainDataset*>& sources,
                                            const ProbeConfig& config) {
    config.validate();
    if (sources.size() < 2) throw ConfigError("probe needs at least 2 source domains");
    const int num_slots = static_cast<int>(sources.size());

    std::vector<DomainDataset> label_train, label_val, dinv_train, dinv_val;
    for (std::size_t s = 0; s < sources.size(); ++s) {
        const auto [train, val] = split_train_val(*sources[s], SplitSpec{config.holdout_fraction, config.seed});
        const int slot = static_cast<int>(s);
        for (const DomainDataset* part : {&train, &val}) {
            const auto [x_label, x_domain] = encode(params, part->inputs);
            const Tensor x_dinv = disentangle(x_label, x_domain);
            auto& label_out = part == &train ? label_train : label_val;
            auto& dinv_out = part == &train ? dinv_train : dinv_val;
            label_out.push_back(detail::feature_dataset(x_label, part->domain_id,
                                                        part->domain_name + "/xlabel", slot, num_slots));
            dinv_out.push_back(detail::feature_dataset(x_dinv, part->domain_id,
                                                       part->domain_name + "/xdinv", slot, num_slots));
        }
    }
    const auto ptrs = [](const std::vector<DomainDataset>& sets) {
        std::vector<const DomainDataset*> out;
        for (const auto& s : sets) out.push_back(&s);
        return out;
    };

    const std::size_t latent = params.label_encoder.output_dim();
    std::vector<std::size_t> widths{latent};
    widths.insert(widths.end(), config.hidden.begin(), config.hidden.end());
    widths.push_back(static_cast<std::size_t>(num_slots));

    // Identical init for both probes: same seed, fresh generator each time.
    const auto fresh_probe = [&] {
        Rng rng(derive_seed(config.seed, "probe-init"));
        return make_mlp("probe", widths, rng);
    };

    ProbeOutcome outcome;
    outcome.acc_on_label = detail::run_probe(fresh_probe(), ptrs(label_train), ptrs(label_val), config);
    outcome.acc_on_dinv = detail::run_probe(fresh_probe(), ptrs(dinv_train), ptrs(dinv_val), config);
    return outcome;
}

// ---------------------------------------------------------------------------
// Ablations

/// The four standard variants, each a full leave-one-domain-out experiment
/// under the same seeds, so batch sequences and splits match row for row.
inline std::vector<ExperimentResult> run_ablations(const std::vector<DomainDataset>& domains,
                                                   const TrainConfig& base,
                                                   const std::vector<std::uint64_t>& seeds,
                                                   AccessLog* log = nullptr, std::size_t workers = 1) {
    std::vector<ExperimentResult> rows;
    rows.push_back(leave_one_domain_out(domains, base, seeds, log, PredictStream::kLabel, workers));
    rows.back().variant = "adrmx";

    TrainConfig no_remix = base;
    no_remix.use_remix = false;
    rows.push_back(leave_one_domain_out(domains, no_remix, seeds, log, PredictStream::kLabel, workers));
    rows.back().variant = "no_remix";

    TrainConfig no_contrastive = base;
    no_contrastive.use_contrastive = false;
    rows.push_back(leave_one_domain_out(domains, no_contrastive, seeds, log, PredictStream::kLabel, workers));
    rows.back().variant = "no_contrastive";

    rows.push_back(leave_one_domain_out(domains, base, seeds, log, PredictStream::kDinv, workers));
    rows.back().variant = "predict_from_dinv";
    return rows;
}

namespace detail {

inline std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace detail

/// One CSV row per experiment: variant, per-target accuracies, mean.
inline std::string results_table_csv(const std::vector<ExperimentResult>& rows) {
    if (rows.empty()) throw ContractError("results table needs at least one experiment");
    std::string out = "variant";
    for (const auto& name : rows.front().target_names) out += "," + name;
    out += ",mean\n";
    for (const auto& row : rows) {
        if (row.target_names != rows.front().target_names) {
            throw ContractError("results table rows disagree on target domains");
        }
        out += row.variant;
        for (const double acc : row.per_target) out += "," + detail::format_double(acc);
        out += "," + detail::format_double(row.mean) + "\n";
    }
    return out;
}

// ---------------------------------------------------------------------------
// Embedding export

/// Projection of one sample's latent features onto the two leading principal
/// components of its feature kind.
struct EmbeddingRow {
    std::size_t sample_id = 0;
    std::string feature_kind;  // "domain" or "dinv"
    double pc1 = 0.0;
    double pc2 = 0.0;
    int class_label = 0;
    int domain_label = 0;
};

struct EmbeddingExport {
    std::vector<EmbeddingRow> rows;
    std::array<double, 2> variance_domain{0.0, 0.0};
    std::array<double, 2> variance_dinv{0.0, 0.0};
    std::size_t rank_domain = 0;  // principal components actually available
    std::size_t rank_dinv = 0;
};

namespace detail {

/// Dominant eigenvector of a symmetric PSD matrix by power iteration with a
/// fixed pseudo-random start. Convergence to 1e-9 in the vector; the sign is
/// normalized so the largest-magnitude entry is positive.
inline std::pair<std::vector<double>, double> power_top_eigen(const std::vector<double>& cov, std::size_t d,
                                                              std::uint64_t start_index) {
    constexpr double kTol = 1e-9;
    constexpr std::size_t kMaxIters = 100000;

    std::vector<double> v(d);
    Rng rng(derive_seed(0, "pca", start_index));
    double norm = 0.0;
    for (auto& x : v) {
        x = rng.gaussian();
        norm += x * x;
    }
    norm = std::sqrt(norm);
    for (auto& x : v) x /= norm;

    std::vector<double> next(d);
    for (std::size_t iter = 0; iter < kMaxIters; ++iter) {
        for (std::size_t i = 0; i < d; ++i) {
            double acc = 0.0;
            for (std::size_t j = 0; j < d; ++j) acc += cov[i * d + j] * v[j];
            next[i] = acc;
        }
        norm = 0.0;
        for (const double x : next) norm += x * x;
        norm = std::sqrt(norm);
        if (norm == 0.0) break;  // start vector fell into the null space
        double delta = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            next[i] /= norm;
            delta = std::max(delta, std::abs(next[i] - v[i]));
        }
        v.swap(next);
        if (delta < kTol) break;
    }

    std::size_t lead = 0;
    for (std::size_t i = 1; i < d; ++i) {
        if (std::abs(v[i]) > std::abs(v[lead])) lead = i;
    }
    if (v[lead] < 0.0) {
        for (auto& x : v) x = -x;
    }
    double lambda = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < d; ++j) acc += cov[i * d + j] * v[j];
        lambda += v[i] * acc;
    }
    return {std::move(v), lambda};
}

/// Center columns, take the top two principal components, and project.
/// Rank-deficient feature sets keep the components that exist; missing
/// coordinates stay zero and a warning is emitted.
inline std::size_t project_top2(const Tensor& features, const std::string& kind,
                                std::vector<std::array<double, 2>>& coords, std::array<double, 2>& variances) {
    const std::size_t n = features.rows(), d = features.cols();
    coords.assign(n, {0.0, 0.0});
    variances = {0.0, 0.0};

    std::vector<double> centered(features.data.begin(), features.data.end());
    for (std::size_t j = 0; j < d; ++j) {
        double mean = 0.0;
        for (std::size_t i = 0; i < n; ++i) mean += centered[i * d + j];
        mean /= static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i) centered[i * d + j] -= mean;
    }
    if (n < 2) {
        emit_warning("embedding export: feature kind '" + kind + "' has fewer than 2 samples; coordinates are zero");
        return 0;
    }

    std::vector<double> cov(d * d, 0.0);
    const double scale = 1.0 / static_cast<double>(n - 1);
    for (std::size_t i = 0; i < n; ++i) {
        const double* row = centered.data() + i * d;
        for (std::size_t a = 0; a < d; ++a) {
            for (std::size_t b = a; b < d; ++b) cov[a * d + b] += row[a] * row[b];
        }
    }
    for (std::size_t a = 0; a < d; ++a) {
        for (std::size_t b = a; b < d; ++b) {
            cov[a * d + b] *= scale;
            cov[b * d + a] = cov[a * d + b];
        }
    }
    double trace = 0.0;
    for (std::size_t a = 0; a < d; ++a) trace += cov[a * d + a];

    std::size_t rank = 0;
    for (std::size_t k = 0; k < 2; ++k) {
        auto [v, lambda] = power_top_eigen(cov, d, k);
        if (!(lambda > trace * 1e-12)) break;  // exhausted the spectrum
        variances[k] = lambda;
        for (std::size_t i = 0; i < n; ++i) {
            double acc = 0.0;
            for (std::size_t j = 0; j < d; ++j) acc += centered[i * d + j] * v[j];
            coords[i][k] = acc;
        }
        ++rank;
        // Deflate so the next sweep sees the residual spectrum.
        for (std::size_t a = 0; a < d; ++a) {
            for (std::size_t b = 0; b < d; ++b) cov[a * d + b] -= lambda * v[a] * v[b];
        }
    }
    if (rank < 2) {
        emit_warning("embedding export: feature kind '" + kind + "' has rank " + std::to_string(rank) +
                     " < 2; missing coordinates are zero");
    }
    return rank;
}

}  // namespace detail

/// Project x_domain and x_dinv of the given datasets onto their two leading
/// principal components. Each feature kind is centered and decomposed
/// independently; sample ids run over the concatenated rows.
inline EmbeddingExport export_embeddings(const AdrmxParams& params,
                                         const std::vector<const DomainDataset*>& split) {
    if (split.empty()) throw ConfigError("embedding export needs at least one dataset");
    std::size_t total = 0;
    for (const DomainDataset* ds : split) {
        ds->validate();
        total += ds->size();
    }

    const std::size_t d_in = split.front()->input_dim();
    Tensor inputs = Tensor::zeros({total, d_in});
    std::vector<int> class_labels, domain_labels;
    class_labels.reserve(total);
    domain_labels.reserve(total);
    std::size_t at = 0;
    for (const DomainDataset* ds : split) {
        std::copy(ds->inputs.data.begin(), ds->inputs.data.end(), inputs.data.begin() + static_cast<std::ptrdiff_t>(at * d_in));
        for (const int y : ds->labels) class_labels.push_back(y);
        for (std::size_t i = 0; i < ds->size(); ++i) domain_labels.push_back(ds->domain_id);
        at += ds->size();
    }

    const auto [x_label, x_domain] = encode(params, inputs);
    const Tensor x_dinv = disentangle(x_label, x_domain);

    EmbeddingExport out;
    std::vector<std::array<double, 2>> coords;
    const auto append_kind = [&](const Tensor& features, const char* kind, std::array<double, 2>& variances) {
        const std::size_t rank = detail::project_top2(features, kind, coords, variances);
        for (std::size_t i = 0; i < total; ++i) {
            out.rows.push_back(EmbeddingRow{i, kind, coords[i][0], coords[i][1], class_labels[i], domain_labels[i]});
        }
        return rank;
    };
    out.rank_domain = append_kind(x_domain, "domain", out.variance_domain);
    out.rank_dinv = append_kind(x_dinv, "dinv", out.variance_dinv);
    return out;
}

inline std::string embeddings_csv(const std::vector<EmbeddingRow>& rows) {
    std::string out = "sample_id,feature_kind,pc1,pc2,class_label,domain_label\n";
    for (const auto& r : rows) {
        out += std::to_string(r.sample_id) + "," + r.feature_kind + "," + detail::format_double(r.pc1) + "," +
               detail::format_double(r.pc2) + "," + std::to_string(r.class_label) + "," +
               std::to_string(r.domain_label) + "\n";
    }
    return out;
}

}  // namespace adrmx
