#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "adrmx/error.hpp"
#include "adrmx/io.hpp"
#include "adrmx/rng.hpp"
#include "adrmx/tensor.hpp"

namespace adrmx {

/// One domain's sample set: inputs [N x d_in] with class labels.
struct DomainDataset {
    int domain_id = 0;
    std::string domain_name;
    Tensor inputs;            // [N x d_in]
    std::vector<int> labels;  // [N], values in [0, num_classes)
    int num_classes = 0;

    std::size_t size() const { return inputs.rank() == 2 ? inputs.rows() : 0; }
    std::size_t input_dim() const { return inputs.rank() == 2 ? inputs.cols() : 0; }

    void validate() const {
        if (inputs.rank() != 2 || inputs.rows() == 0) {
            throw ConfigError("domain " + domain_name + ": inputs must be a nonempty [Nxd] tensor");
        }
        if (labels.size() != inputs.rows()) {
            throw ConfigError("domain " + domain_name + ": " + std::to_string(labels.size()) + " labels for " +
                              std::to_string(inputs.rows()) + " rows");
        }
        if (num_classes < 2) throw ConfigError("domain " + domain_name + ": need at least 2 classes");
        for (const int y : labels) {
            if (y < 0 || y >= num_classes) {
                throw ConfigError("domain " + domain_name + ": label " + std::to_string(y) + " outside [0, " +
                                  std::to_string(num_classes) + ")");
            }
        }
        require_all_finite(inputs, "domain inputs");
    }
};

/// A full generalization task: several source domains plus one held-out
/// target, all sharing input width and label space.
struct MultiDomainTask {
    std::vector<DomainDataset> domains;
    std::size_t target_index = 0;

    void validate() const {
        if (domains.size() < 3) {
            throw ConfigError("task needs at least 2 source domains plus a target, got " +
                              std::to_string(domains.size()) + " domains");
        }
        if (target_index >= domains.size()) throw ConfigError("target_index outside the domain list");
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

    const DomainDataset& target() const { return domains.at(target_index); }

    std::vector<const DomainDataset*> sources() const {
        std::vector<const DomainDataset*> out;
        for (std::size_t i = 0; i < domains.size(); ++i) {
            if (i != target_index) out.push_back(&domains[i]);
        }
        return out;
    }
};

/// Validation holdout specification. The split is a deterministic partition.
struct SplitSpec {
    double holdout_fraction = 0.2;
    std::uint64_t seed = 0;
};

namespace detail {

/// Apply the domain's style: disjoint-plane rotations then a translation.
/// Both scale with `shift`, so shift = 0 is the identity transform.
struct DomainStyle {
    std::vector<double> angles;       // one per (2k, 2k+1) axis plane
    std::vector<double> translation;  // length d_in, norm == shift

    static DomainStyle sample(std::size_t d_in, double shift, Rng& rng) {
        DomainStyle style;
        constexpr double kMaxAngle = 0.35;  // radians, scaled by shift
        for (std::size_t k = 0; 2 * k + 1 < d_in; ++k) {
            style.angles.push_back(shift * rng.uniform(-kMaxAngle, kMaxAngle));
        }
        std::vector<double> dir(d_in);
        double norm = 0.0;
        do {
            norm = 0.0;
            for (auto& v : dir) {
                v = rng.gaussian();
                norm += v * v;
            }
            norm = std::sqrt(norm);
        } while (norm < 1e-9);
        style.translation.resize(d_in);
        for (std::size_t j = 0; j < d_in; ++j) style.translation[j] = shift * dir[j] / norm;
        return style;
    }

    void apply(double* point, std::size_t d_in) const {
        for (std::size_t k = 0; k < angles.size(); ++k) {
            const double c = std::cos(angles[k]), s = std::sin(angles[k]);
            const double a = point[2 * k], b = point[2 * k + 1];
            point[2 * k] = c * a - s * b;
            point[2 * k + 1] = s * a + c * b;
        }
        for (std::size_t j = 0; j < d_in; ++j) point[j] += translation[j];
    }
};

}  // namespace detail

/// Distance between class means in the synthetic Gaussian task, in units of
/// the within-class standard deviation.
inline constexpr double kGaussianMeanSeparation = 4.0;

/// Synthetic multi-domain benchmark: shared class-conditional Gaussian
/// clusters, with a per-domain rotation + translation "style" whose size is
/// domain_shift_scale. Class geometry is preserved inside every domain.
inline MultiDomainTask gen_gaussian_domains(std::size_t num_domains, std::size_t per_domain_n,
                                            std::size_t num_classes, std::size_t d_in,
                                            double domain_shift_scale, std::uint64_t seed) {
    if (num_domains < 3) throw ConfigError("gen_gaussian_domains: need at least 3 domains");
    if (num_classes < 2) throw ConfigError("gen_gaussian_domains: need at least 2 classes");
    if (per_domain_n == 0 || d_in == 0) throw ConfigError("gen_gaussian_domains: sizes must be positive");

    // Shared class means. With one basis axis per class the pairwise mean
    // distance is exactly kGaussianMeanSeparation; with more classes than
    // axes the means fall back to random unit directions.
    std::vector<std::vector<double>> means(num_classes, std::vector<double>(d_in, 0.0));
    Rng mean_rng(derive_seed(seed, "gaussian-means"));
    const double mean_norm = kGaussianMeanSeparation / std::sqrt(2.0);
    for (std::size_t c = 0; c < num_classes; ++c) {
        if (c < d_in) {
            means[c][c] = mean_norm;
        } else {
            double norm = 0.0;
            for (auto& v : means[c]) {
                v = mean_rng.gaussian();
                norm += v * v;
            }
            norm = std::sqrt(norm);
            for (auto& v : means[c]) v *= mean_norm / norm;
        }
    }

    MultiDomainTask task;
    task.target_index = num_domains - 1;
    for (std::size_t d = 0; d < num_domains; ++d) {
        Rng rng(derive_seed(seed, "gaussian-domain", d));
        const auto style = detail::DomainStyle::sample(d_in, domain_shift_scale, rng);

        DomainDataset ds;
        ds.domain_id = static_cast<int>(d);
        ds.domain_name = "gauss" + std::to_string(d);
        ds.num_classes = static_cast<int>(num_classes);
        ds.inputs = Tensor::zeros({per_domain_n, d_in});
        ds.labels.resize(per_domain_n);
        for (std::size_t i = 0; i < per_domain_n; ++i) ds.labels[i] = static_cast<int>(i % num_classes);
        rng.shuffle(ds.labels);
        for (std::size_t i = 0; i < per_domain_n; ++i) {
            double* row = ds.inputs.data.data() + i * d_in;
            const auto& mu = means[static_cast<std::size_t>(ds.labels[i])];
            for (std::size_t j = 0; j < d_in; ++j) row[j] = mu[j] + rng.gaussian();
            style.apply(row, d_in);
        }
        task.domains.push_back(std::move(ds));
    }
    task.validate();
    return task;
}

/// Stratified train/validation partition. The validation part receives
/// round(N * holdout_fraction) samples, spread across classes by largest
/// remainder so per-class proportions match within one sample.
inline std::pair<DomainDataset, DomainDataset> split_train_val(const DomainDataset& ds, const SplitSpec& spec) {
    if (!(spec.holdout_fraction > 0.0 && spec.holdout_fraction < 1.0)) {
        throw ConfigError("holdout_fraction must lie in (0, 1)");
    }
    const std::size_t n = ds.size();
    const std::size_t val_total = static_cast<std::size_t>(std::llround(static_cast<double>(n) * spec.holdout_fraction));
    if (val_total < 1) throw ConfigError("holdout_fraction leaves an empty validation set");
    if (val_total >= n) throw ConfigError("holdout_fraction leaves an empty training set");

    std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(ds.num_classes));
    for (std::size_t i = 0; i < n; ++i) by_class[static_cast<std::size_t>(ds.labels[i])].push_back(i);

    Rng rng(derive_seed(spec.seed, "split", static_cast<std::uint64_t>(ds.domain_id)));
    for (auto& idxs : by_class) rng.shuffle(idxs);

    // Largest-remainder apportionment of the validation quota.
    std::vector<std::size_t> quota(by_class.size(), 0);
    std::vector<std::pair<double, std::size_t>> remainders;
    std::size_t assigned = 0;
    for (std::size_t c = 0; c < by_class.size(); ++c) {
        const double exact = static_cast<double>(by_class[c].size()) * spec.holdout_fraction;
        quota[c] = static_cast<std::size_t>(exact);
        quota[c] = std::min(quota[c], by_class[c].size());
        assigned += quota[c];
        remainders.emplace_back(exact - static_cast<double>(quota[c]), c);
    }
    std::sort(remainders.begin(), remainders.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
    });
    for (std::size_t k = 0; assigned < val_total && k < remainders.size(); ++k) {
        const std::size_t c = remainders[k].second;
        if (quota[c] < by_class[c].size()) {
            ++quota[c];
            ++assigned;
        }
    }
    if (assigned != val_total) {
        // Quotas hit class-size ceilings; take the leftovers anywhere.
        for (std::size_t c = 0; c < by_class.size() && assigned < val_total; ++c) {
            while (quota[c] < by_class[c].size() && assigned < val_total) {
                ++quota[c];
                ++assigned;
            }
        }
    }

    std::vector<std::size_t> val_rows, train_rows;
    for (std::size_t c = 0; c < by_class.size(); ++c) {
        for (std::size_t k = 0; k < by_class[c].size(); ++k) {
            (k < quota[c] ? val_rows : train_rows).push_back(by_class[c][k]);
        }
    }
    std::sort(val_rows.begin(), val_rows.end());
    std::sort(train_rows.begin(), train_rows.end());

    const auto take = [&](const std::vector<std::size_t>& rows, const char* suffix) {
        DomainDataset part;
        part.domain_id = ds.domain_id;
        part.domain_name = ds.domain_name + suffix;
        part.num_classes = ds.num_classes;
        part.inputs = Tensor::zeros({rows.size(), ds.input_dim()});
        part.labels.reserve(rows.size());
        const std::size_t d = ds.input_dim();
        for (std::size_t i = 0; i < rows.size(); ++i) {
            std::copy_n(ds.inputs.data.begin() + static_cast<std::ptrdiff_t>(rows[i] * d), d,
                        part.inputs.data.begin() + static_cast<std::ptrdiff_t>(i * d));
            part.labels.push_back(ds.labels[rows[i]]);
        }
        return part;
    };
    return {take(train_rows, "/train"), take(val_rows, "/val")};
}

/// One training step's worth of data: batch_per_domain samples from every
/// source domain, concatenated in source order.
struct CompositeBatch {
    Tensor inputs;                      // [S*B x d_in]
    std::vector<int> labels;            // class labels
    std::vector<int> domain_slots;      // position of the source domain (0..S-1)
    std::vector<int> domain_ids;        // original domain ids
    std::vector<std::size_t> source_rows;  // row index inside the source dataset
};

/// Without-replacement per-epoch sampler over several source domains. Each
/// domain reshuffles independently when it runs out; a final chunk smaller
/// than batch_per_domain is dropped.
class DomainBatchSampler {
public:
    DomainBatchSampler(std::vector<const DomainDataset*> sources, std::size_t batch_per_domain,
                       std::uint64_t seed)
        : sources_(std::move(sources)), batch_per_domain_(batch_per_domain) {
        if (sources_.empty()) throw ConfigError("batch sampler needs at least one source domain");
        if (batch_per_domain_ == 0) throw ConfigError("batch_per_domain must be positive");
        for (std::size_t s = 0; s < sources_.size(); ++s) {
            if (sources_[s]->size() < batch_per_domain_) {
                throw ConfigError("batch_per_domain " + std::to_string(batch_per_domain_) +
                                  " exceeds domain " + sources_[s]->domain_name + " size " +
                                  std::to_string(sources_[s]->size()));
            }
            streams_.push_back(Stream{Rng(derive_seed(seed, "sampler", s)), {}, 0});
            auto& stream = streams_.back();
            stream.order.resize(sources_[s]->size());
            std::iota(stream.order.begin(), stream.order.end(), std::size_t{0});
            stream.rng.shuffle(stream.order);
        }
        const std::size_t d = sources_.front()->input_dim();
        for (const auto* src : sources_) {
            if (src->input_dim() != d) throw ConfigError("source domains disagree on input width");
        }
    }

    std::size_t num_sources() const { return sources_.size(); }
    std::size_t batch_size() const { return sources_.size() * batch_per_domain_; }

    CompositeBatch next() {
        const std::size_t d = sources_.front()->input_dim();
        CompositeBatch batch;
        batch.inputs = Tensor::zeros({batch_size(), d});
        batch.labels.reserve(batch_size());
        batch.domain_slots.reserve(batch_size());
        batch.domain_ids.reserve(batch_size());
        batch.source_rows.reserve(batch_size());
        std::size_t out_row = 0;
        for (std::size_t s = 0; s < sources_.size(); ++s) {
            auto& stream = streams_[s];
            if (stream.cursor + batch_per_domain_ > stream.order.size()) {
                stream.rng.shuffle(stream.order);  // drops the partial remainder
                stream.cursor = 0;
            }
            const DomainDataset& src = *sources_[s];
            for (std::size_t k = 0; k < batch_per_domain_; ++k, ++out_row) {
                const std::size_t row = stream.order[stream.cursor++];
                std::copy_n(src.inputs.data.begin() + static_cast<std::ptrdiff_t>(row * d), d,
                            batch.inputs.data.begin() + static_cast<std::ptrdiff_t>(out_row * d));
                batch.labels.push_back(src.labels[row]);
                batch.domain_slots.push_back(static_cast<int>(s));
                batch.domain_ids.push_back(src.domain_id);
                batch.source_rows.push_back(row);
            }
        }
        return batch;
    }

private:
    struct Stream {
        Rng rng;
        std::vector<std::size_t> order;
        std::size_t cursor = 0;
    };

    std::vector<const DomainDataset*> sources_;
    std::size_t batch_per_domain_;
    std::vector<Stream> streams_;
};

// ---------------------------------------------------------------------------
// Binary dataset cache. Little-endian layout:
//   magic "ADRXDATA" | version u32 | num_domains u32 | target_index u32
//   per domain: domain_id i64 | name_len u32 | name bytes | num_classes u64
//               | N u64 | d_in u64 | inputs N*d_in f64 | labels N i64

inline constexpr std::uint32_t kDatasetCacheVersion = 1;

inline std::vector<std::uint8_t> serialize_task(const MultiDomainTask& task) {
    task.validate();
    std::vector<std::uint8_t> out;
    const char magic[] = "ADRXDATA";
    out.insert(out.end(), magic, magic + 8);
    io::put_u32_le(out, kDatasetCacheVersion);
    io::put_u32_le(out, static_cast<std::uint32_t>(task.domains.size()));
    io::put_u32_le(out, static_cast<std::uint32_t>(task.target_index));
    for (const auto& d : task.domains) {
        io::put_i64_le(out, d.domain_id);
        io::put_u32_le(out, static_cast<std::uint32_t>(d.domain_name.size()));
        out.insert(out.end(), d.domain_name.begin(), d.domain_name.end());
        io::put_u64_le(out, static_cast<std::uint64_t>(d.num_classes));
        io::put_u64_le(out, d.size());
        io::put_u64_le(out, d.input_dim());
        for (const double v : d.inputs.data) io::put_f64_le(out, v);
        for (const int y : d.labels) io::put_i64_le(out, y);
    }
    return out;
}

inline MultiDomainTask deserialize_task(const std::vector<std::uint8_t>& bytes) {
    io::ByteReader reader(bytes, "dataset cache");
    const std::uint8_t* magic = reader.take(8);
    if (std::memcmp(magic, "ADRXDATA", 8) != 0) throw FormatError("dataset cache: bad magic");
    const std::uint32_t version = reader.u32_le();
    if (version != kDatasetCacheVersion) {
        throw FormatError("dataset cache: unsupported version " + std::to_string(version));
    }
    const std::uint32_t num_domains = reader.u32_le();
    MultiDomainTask task;
    task.target_index = reader.u32_le();
    for (std::uint32_t i = 0; i < num_domains; ++i) {
        DomainDataset d;
        d.domain_id = static_cast<int>(reader.i64_le());
        const std::uint32_t name_len = reader.u32_le();
        const std::uint8_t* name = reader.take(name_len);
        d.domain_name.assign(reinterpret_cast<const char*>(name), name_len);
        d.num_classes = static_cast<int>(reader.u64_le());
        const std::uint64_t n = reader.u64_le();
        const std::uint64_t width = reader.u64_le();
        d.inputs = Tensor::zeros({static_cast<std::size_t>(n), static_cast<std::size_t>(width)});
        for (auto& v : d.inputs.data) v = reader.f64_le();
        d.labels.resize(static_cast<std::size_t>(n));
        for (auto& y : d.labels) y = static_cast<int>(reader.i64_le());
        task.domains.push_back(std::move(d));
    }
    if (reader.remaining() != 0) {
        throw LengthError("dataset cache: " + std::to_string(reader.remaining()) + " trailing bytes");
    }
    task.validate();
    return task;
}

inline void save_task(const std::string& path, const MultiDomainTask& task) {
    io::write_file_bytes(path, serialize_task(task));
}

inline MultiDomainTask load_task(const std::string& path) { return deserialize_task(io::read_file_bytes(path)); }

}  // namespace adrmx
