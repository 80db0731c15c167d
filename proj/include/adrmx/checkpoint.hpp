#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "adrmx/error.hpp"
#include "adrmx/io.hpp"
#include "adrmx/model.hpp"
#include "adrmx/nn.hpp"
#include "adrmx/rng.hpp"
#include "adrmx/training.hpp"

namespace adrmx {

/// Versioned named-tensor container. Entries are kept sorted by name, so the
/// byte image of a store is a pure function of its contents and
/// save -> load -> save round-trips bit-exactly.
///
/// Layout (all integers little-endian):
///   magic "ADRXCKPT" | u32 version=1 | u32 entry_count
///   per entry, in name order:
///     u32 name_len | name bytes | u8 dtype (0=f64, 1=u64, 2=i64)
///     u32 rank | u64 dims[rank] | payload (numel x 8 bytes)
class NamedTensorStore {
public:
    enum class Dtype : std::uint8_t { kF64 = 0, kU64 = 1, kI64 = 2 };

    struct Entry {
        Dtype dtype = Dtype::kF64;
        std::vector<std::size_t> dims;
        std::vector<double> f64;
        std::vector<std::uint64_t> u64;
        std::vector<std::int64_t> i64;

        std::size_t numel() const {
            std::size_t n = 1;
            for (const std::size_t d : dims) n *= d;
            return n;
        }
    };

    static constexpr char kMagic[9] = "ADRXCKPT";
    static constexpr std::uint32_t kVersion = 1;

    void put_f64(const std::string& name, std::vector<std::size_t> dims, std::vector<double> values) {
        Entry e;
        e.dtype = Dtype::kF64;
        e.dims = std::move(dims);
        e.f64 = std::move(values);
        insert(name, std::move(e));
    }

    void put_u64(const std::string& name, std::vector<std::size_t> dims, std::vector<std::uint64_t> values) {
        Entry e;
        e.dtype = Dtype::kU64;
        e.dims = std::move(dims);
        e.u64 = std::move(values);
        insert(name, std::move(e));
    }

    void put_i64(const std::string& name, std::vector<std::size_t> dims, std::vector<std::int64_t> values) {
        Entry e;
        e.dtype = Dtype::kI64;
        e.dims = std::move(dims);
        e.i64 = std::move(values);
        insert(name, std::move(e));
    }

    void put_scalar_f64(const std::string& name, double v) { put_f64(name, {1}, {v}); }
    void put_scalar_u64(const std::string& name, std::uint64_t v) { put_u64(name, {1}, {v}); }

    bool contains(const std::string& name) const { return entries_.count(name) > 0; }
    std::size_t size() const { return entries_.size(); }
    const std::map<std::string, Entry>& entries() const { return entries_; }

    const std::vector<double>& f64(const std::string& name) const {
        return fetch(name, Dtype::kF64).f64;
    }
    const std::vector<std::uint64_t>& u64(const std::string& name) const {
        return fetch(name, Dtype::kU64).u64;
    }
    const std::vector<std::int64_t>& i64(const std::string& name) const {
        return fetch(name, Dtype::kI64).i64;
    }
    const std::vector<std::size_t>& dims(const std::string& name) const { return fetch(name).dims; }

    double scalar_f64(const std::string& name) const { return single(f64(name), name); }
    std::uint64_t scalar_u64(const std::string& name) const { return single(u64(name), name); }

    std::vector<std::uint8_t> serialize() const {
        std::vector<std::uint8_t> out;
        out.insert(out.end(), kMagic, kMagic + 8);
        io::put_u32_le(out, kVersion);
        io::put_u32_le(out, static_cast<std::uint32_t>(entries_.size()));
        for (const auto& [name, e] : entries_) {
            io::put_u32_le(out, static_cast<std::uint32_t>(name.size()));
            out.insert(out.end(), name.begin(), name.end());
            out.push_back(static_cast<std::uint8_t>(e.dtype));
            io::put_u32_le(out, static_cast<std::uint32_t>(e.dims.size()));
            for (const std::size_t d : e.dims) io::put_u64_le(out, static_cast<std::uint64_t>(d));
            switch (e.dtype) {
                case Dtype::kF64:
                    for (const double v : e.f64) io::put_f64_le(out, v);
                    break;
                case Dtype::kU64:
                    for (const std::uint64_t v : e.u64) io::put_u64_le(out, v);
                    break;
                case Dtype::kI64:
                    for (const std::int64_t v : e.i64) io::put_i64_le(out, v);
                    break;
            }
        }
        return out;
    }

    static NamedTensorStore deserialize(const std::vector<std::uint8_t>& bytes,
                                        const std::string& source = "checkpoint") {
        io::ByteReader reader(bytes, source);
        const std::uint8_t* magic = reader.take(8);
        if (!std::equal(magic, magic + 8, reinterpret_cast<const std::uint8_t*>(kMagic))) {
            throw FormatError(source + ": bad magic \"" + std::string(magic, magic + 8) +
                              "\" (expected \"" + std::string(kMagic) + "\")");
        }
        const std::uint32_t version = reader.u32_le();
        if (version != kVersion) {
            throw FormatError(source + ": unsupported version " + std::to_string(version) +
                              " (expected " + std::to_string(kVersion) + ")");
        }
        const std::uint32_t count = reader.u32_le();
        NamedTensorStore store;
        for (std::uint32_t i = 0; i < count; ++i) {
            const std::uint32_t name_len = reader.u32_le();
            const std::uint8_t* name_bytes = reader.take(name_len);
            std::string name(name_bytes, name_bytes + name_len);
            const std::uint8_t raw_dtype = *reader.take(1);
            if (raw_dtype > 2) {
                throw FormatError(source + ": entry \"" + name + "\" has unknown dtype " +
                                  std::to_string(raw_dtype));
            }
            Entry e;
            e.dtype = static_cast<Dtype>(raw_dtype);
            const std::uint32_t rank = reader.u32_le();
            for (std::uint32_t r = 0; r < rank; ++r) {
                e.dims.push_back(static_cast<std::size_t>(reader.u64_le()));
            }
            const std::size_t n = e.numel();
            switch (e.dtype) {
                case Dtype::kF64:
                    e.f64.reserve(n);
                    for (std::size_t k = 0; k < n; ++k) e.f64.push_back(reader.f64_le());
                    break;
                case Dtype::kU64:
                    e.u64.reserve(n);
                    for (std::size_t k = 0; k < n; ++k) e.u64.push_back(reader.u64_le());
                    break;
                case Dtype::kI64:
                    e.i64.reserve(n);
                    for (std::size_t k = 0; k < n; ++k) e.i64.push_back(reader.i64_le());
                    break;
            }
            store.insert(name, std::move(e));
        }
        if (reader.remaining() != 0) {
            throw LengthError(source + ": " + std::to_string(reader.remaining()) +
                              " trailing bytes after the last entry");
        }
        return store;
    }

private:
    void insert(const std::string& name, Entry e) {
        const std::size_t expected = e.numel();
        const std::size_t actual = e.f64.size() + e.u64.size() + e.i64.size();
        if (expected != actual) {
            throw ShapeError("store entry \"" + name + "\": " + std::to_string(actual) +
                             " values do not fill dims for " + std::to_string(expected));
        }
        if (!entries_.emplace(name, std::move(e)).second) {
            throw FormatError("duplicate store entry \"" + name + "\"");
        }
    }

    const Entry& fetch(const std::string& name) const {
        const auto it = entries_.find(name);
        if (it == entries_.end()) throw FormatError("store entry \"" + name + "\" is missing");
        return it->second;
    }

    const Entry& fetch(const std::string& name, Dtype dtype) const {
        const Entry& e = fetch(name);
        if (e.dtype != dtype) {
            throw FormatError("store entry \"" + name + "\" holds dtype " +
                              std::to_string(static_cast<int>(e.dtype)) + ", requested " +
                              std::to_string(static_cast<int>(dtype)));
        }
        return e;
    }

    template <class T>
    static T single(const std::vector<T>& values, const std::string& name) {
        if (values.size() != 1) {
            throw ShapeError("store entry \"" + name + "\" is not a scalar");
        }
        return values.front();
    }

    std::map<std::string, Entry> entries_;
};

namespace detail {

inline void pack_parameter(NamedTensorStore& store, const std::string& prefix, const Parameter& p) {
    store.put_f64(prefix + p.name, p.value.shape, p.value.data);
}

inline void unpack_parameter(const NamedTensorStore& store, const std::string& prefix, Parameter& p) {
    const std::string key = prefix + p.name;
    const auto& dims = store.dims(key);
    if (dims != p.value.shape) {
        Tensor stored_shape;
        stored_shape.shape = dims;
        throw ShapeError("checkpoint tensor \"" + key + "\" has shape " + stored_shape.shape_string() +
                         ", model expects " + p.value.shape_string());
    }
    p.value.data = store.f64(key);
}

inline void pack_adam(NamedTensorStore& store, const std::string& prefix, const AdamState& adam) {
    store.put_scalar_f64(prefix + ".lr", adam.lr);
    store.put_scalar_f64(prefix + ".beta1", adam.beta1);
    store.put_scalar_f64(prefix + ".beta2", adam.beta2);
    store.put_scalar_f64(prefix + ".eps", adam.eps);
    store.put_scalar_f64(prefix + ".weight_decay", adam.weight_decay);
    store.put_scalar_u64(prefix + ".t", adam.t);
    for (const auto& [name, moments] : adam.slots) {
        store.put_f64(prefix + ".m." + name, {moments.m.size()}, moments.m);
        store.put_f64(prefix + ".v." + name, {moments.v.size()}, moments.v);
    }
}

inline void unpack_adam(const NamedTensorStore& store, const std::string& prefix, AdamState& adam) {
    adam.lr = store.scalar_f64(prefix + ".lr");
    adam.beta1 = store.scalar_f64(prefix + ".beta1");
    adam.beta2 = store.scalar_f64(prefix + ".beta2");
    adam.eps = store.scalar_f64(prefix + ".eps");
    adam.weight_decay = store.scalar_f64(prefix + ".weight_decay");
    adam.t = store.scalar_u64(prefix + ".t");
    adam.slots.clear();
    const std::string m_prefix = prefix + ".m.";
    for (const auto& [key, entry] : store.entries()) {
        if (key.rfind(m_prefix, 0) != 0) continue;
        const std::string name = key.substr(m_prefix.size());
        AdamState::Moments moments;
        moments.m = entry.f64;
        moments.v = store.f64(prefix + ".v." + name);
        adam.slots.emplace(name, std::move(moments));
    }
}

}  // namespace detail

/// Architecture fingerprint entries; the loader refuses a mismatched model.
inline void pack_model_dims(NamedTensorStore& store, const AdrmxConfig& config) {
    store.put_scalar_u64("config.d_in", static_cast<std::uint64_t>(config.d_in));
    store.put_scalar_u64("config.latent_dim", static_cast<std::uint64_t>(config.latent_dim));
    store.put_scalar_u64("config.num_classes", static_cast<std::uint64_t>(config.num_classes));
    store.put_scalar_u64("config.num_domains", static_cast<std::uint64_t>(config.num_domains));
}

inline void check_model_dims(const NamedTensorStore& store, const AdrmxConfig& config) {
    const auto expect = [&](const char* key, std::size_t want) {
        const std::uint64_t got = store.scalar_u64(key);
        if (got != want) {
            throw ShapeError(std::string("checkpoint ") + key + " is " + std::to_string(got) +
                             ", model expects " + std::to_string(want));
        }
    };
    expect("config.d_in", config.d_in);
    expect("config.latent_dim", config.latent_dim);
    expect("config.num_classes", static_cast<std::size_t>(config.num_classes));
    expect("config.num_domains", static_cast<std::size_t>(config.num_domains));
}

inline void pack_params(NamedTensorStore& store, const AdrmxParams& params) {
    for (const Parameter* p : params.all_parameters()) detail::pack_parameter(store, "param.", *p);
}

inline void unpack_params(const NamedTensorStore& store, AdrmxParams& params) {
    for (Parameter* p : params.all_parameters()) detail::unpack_parameter(store, "param.", *p);
}

inline NamedTensorStore pack_train_state(const TrainState& state) {
    NamedTensorStore store;
    pack_model_dims(store, state.model_config);
    pack_params(store, state.params);
    detail::pack_adam(store, "adam_gen", state.adam_gen);
    detail::pack_adam(store, "adam_disc", state.adam_disc);

    const Rng::State rng = state.model_rng.state();
    store.put_u64("rng.words", {4}, {rng.words[0], rng.words[1], rng.words[2], rng.words[3]});
    store.put_scalar_f64("rng.spare", rng.spare);
    store.put_scalar_u64("rng.has_spare", rng.has_spare ? 1 : 0);

    store.put_scalar_u64("train.step", state.step);
    store.put_scalar_u64("train.best_step", state.best_step);
    store.put_scalar_f64("train.best_val_acc", state.best_val_acc);
    return store;
}

/// Restore a TrainState whose architecture (params/config) is already built.
inline void unpack_train_state(const NamedTensorStore& store, TrainState& state) {
    check_model_dims(store, state.model_config);
    unpack_params(store, state.params);
    detail::unpack_adam(store, "adam_gen", state.adam_gen);
    detail::unpack_adam(store, "adam_disc", state.adam_disc);

    const auto& words = store.u64("rng.words");
    if (words.size() != 4) throw ShapeError("checkpoint rng.words must hold 4 words");
    Rng::State rng;
    for (std::size_t i = 0; i < 4; ++i) rng.words[i] = words[i];
    rng.spare = store.scalar_f64("rng.spare");
    rng.has_spare = store.scalar_u64("rng.has_spare") != 0;
    state.model_rng.set_state(rng);

    state.step = store.scalar_u64("train.step");
    state.best_step = store.scalar_u64("train.best_step");
    state.best_val_acc = store.scalar_f64("train.best_val_acc");
}

inline void save_train_state(const std::string& path, const TrainState& state) {
    io::write_file_bytes(path, pack_train_state(state).serialize());
}

inline void load_train_state(const std::string& path, TrainState& state) {
    unpack_train_state(NamedTensorStore::deserialize(io::read_file_bytes(path), path), state);
}

/// Parameters-only container for exported best checkpoints.
inline NamedTensorStore pack_best_params(const AdrmxConfig& config, const AdrmxParams& params) {
    NamedTensorStore store;
    pack_model_dims(store, config);
    pack_params(store, params);
    return store;
}

inline void unpack_best_params(const NamedTensorStore& store, const AdrmxConfig& config,
                               AdrmxParams& params) {
    check_model_dims(store, config);
    unpack_params(store, params);
}

}  // namespace adrmx
