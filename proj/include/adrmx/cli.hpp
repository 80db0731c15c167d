#pragma once

// Command-line front end: one flat typed key=value configuration shared by
// every verb, deterministic on-disk artifacts, and exit codes that separate
// misuse (2) from runtime failure (3). Each run directory carries an echoed
// copy of its full configuration; a finished run is reproducible from that
// echo alone.

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "adrmx/checkpoint.hpp"
#include "adrmx/data.hpp"
#include "adrmx/digits.hpp"
#include "adrmx/error.hpp"
#include "adrmx/eval.hpp"
#include "adrmx/idx.hpp"
#include "adrmx/io.hpp"
#include "adrmx/mnist_variants.hpp"
#include "adrmx/model.hpp"
#include "adrmx/training.hpp"

namespace adrmx::cli {

// ---------------------------------------------------------------------------
// Configuration schema

enum class FieldType { kU64, kI64, kF64, kBool, kString, kU64List, kF64List };

inline const char* to_string(FieldType type) {
    switch (type) {
        case FieldType::kU64: return "u64";
        case FieldType::kI64: return "i64";
        case FieldType::kF64: return "f64";
        case FieldType::kBool: return "bool";
        case FieldType::kString: return "string";
        case FieldType::kU64List: return "u64-list";
        case FieldType::kF64List: return "f64-list";
    }
    throw ContractError("unknown field type");
}

struct FieldSpec {
    const char* key;
    FieldType type;
    const char* preset;
    const char* help;
};

/// Every configuration key, in echo order. All keys are settable both in a
/// config file and as --key value; no command reads anything else.
inline const std::vector<FieldSpec>& config_schema() {
    static const std::vector<FieldSpec> schema = {
        {"dataset", FieldType::kString, "gaussian", "task family: gaussian | colored_mnist | rotated_mnist"},
        {"data_seed", FieldType::kU64, "0", "dataset construction seed, independent of the training seed"},
        {"data_dir", FieldType::kString, "", "directory with MNIST idx files; empty renders synthetic digits"},
        {"num_domains", FieldType::kU64, "4", "gaussian: total domains including the held-out target"},
        {"per_domain_n", FieldType::kU64, "500", "samples per domain"},
        {"num_classes", FieldType::kU64, "2", "gaussian: class count"},
        {"d_in", FieldType::kU64, "20", "gaussian: input width"},
        {"shift", FieldType::kF64, "1", "gaussian: domain style strength; 0 makes domains identical"},
        {"label_noise", FieldType::kF64, "0.25", "colored_mnist: label flip probability"},
        {"target", FieldType::kI64, "-1", "held-out domain index; -1 keeps the dataset default (last)"},
        {"steps", FieldType::kU64, "2000", "generator updates to run"},
        {"batch_per_domain", FieldType::kU64, "16", "samples drawn from each source domain per step"},
        {"eta_gen", FieldType::kF64, "0.001", "generator learning rate"},
        {"eta_disc", FieldType::kF64, "0", "discriminator learning rate; 0 means half of eta_gen"},
        {"lambda", FieldType::kF64, "1", "weight of the adversarial discriminator term"},
        {"temperature", FieldType::kF64, "1", "contrastive temperature"},
        {"holdout_fraction", FieldType::kF64, "0.2", "per-domain fraction held out for validation"},
        {"latent_dim", FieldType::kU64, "64", "width of the label/domain latent streams"},
        {"encoder_hidden", FieldType::kU64List, "256,128", "hidden widths of both encoders"},
        {"head_hidden", FieldType::kU64List, "128", "hidden widths of the classifier heads"},
        {"discriminator_hidden", FieldType::kU64List, "128,128", "hidden widths of the domain discriminator"},
        {"use_remix", FieldType::kBool, "true", "augment batches with cross-domain latent remixes"},
        {"use_contrastive", FieldType::kBool, "true", "add the supervised contrastive term"},
        {"contrastive_on", FieldType::kString, "both", "contrastive stream: label | dinv | both"},
        {"dinv_shared_head", FieldType::kBool, "true", "classify x_dinv with the label head instead of its own"},
        {"disc_steps_per_gen", FieldType::kU64, "1", "discriminator updates per generator update"},
        {"dropout", FieldType::kF64, "0", "dropout rate inside the MLP blocks"},
        {"weight_decay", FieldType::kF64, "0", "decoupled weight decay for both optimizers"},
        {"ce_label_weight", FieldType::kF64, "1", "weight of the label-stream cross entropy"},
        {"ce_domain_weight", FieldType::kF64, "1", "weight of the domain-stream cross entropy"},
        {"ce_dinv_weight", FieldType::kF64, "1", "weight of the invariant-stream cross entropy"},
        {"eval_every", FieldType::kU64, "100", "steps between validation evaluations"},
        {"seed", FieldType::kU64, "0", "training seed: init, batch order, splits"},
        {"trials", FieldType::kU64, "8", "sweep: number of sampled configurations"},
        {"seeds", FieldType::kU64List, "0,1,2", "sweep/ablate: training seeds run per configuration"},
        {"sweep_seed", FieldType::kU64, "0", "sweep: seed for sampling configurations"},
        {"eta_lo", FieldType::kF64, "0.0001", "sweep: log-uniform lower bound for eta_gen"},
        {"eta_hi", FieldType::kF64, "0.01", "sweep: log-uniform upper bound for eta_gen"},
        {"lambda_lo", FieldType::kF64, "0.01", "sweep: log-uniform lower bound for lambda"},
        {"lambda_hi", FieldType::kF64, "10", "sweep: log-uniform upper bound for lambda"},
        {"tau_choices", FieldType::kF64List, "0.5,1", "sweep: temperature choices"},
        {"batch_choices", FieldType::kU64List, "8,16,32", "sweep: batch_per_domain choices"},
        {"checkpoint", FieldType::kString, "", "eval/export: best-params checkpoint to load"},
        {"split", FieldType::kString, "val", "export: rows to embed: train | val | all"},
        {"out", FieldType::kString, "runs", "output root; each run gets a timestamped directory inside"},
        {"workers", FieldType::kU64, "1", "worker threads for sweep/ablate cells"},
    };
    return schema;
}

// ---------------------------------------------------------------------------
// Value parsing and canonical formatting

namespace detail {

inline std::string trim(const std::string& text) {
    const auto begin = text.find_first_not_of(" \t\r\n");
    if (begin == std::string::npos) return "";
    const auto end = text.find_last_not_of(" \t\r\n");
    return text.substr(begin, end - begin + 1);
}

inline std::vector<std::string> split_list(const std::string& text) {
    std::vector<std::string> parts;
    if (trim(text).empty()) return parts;
    std::size_t start = 0;
    while (true) {
        const std::size_t comma = text.find(',', start);
        parts.push_back(trim(text.substr(start, comma - start)));
        if (comma == std::string::npos) break;
        start = comma + 1;
    }
    return parts;
}

inline std::uint64_t parse_u64(const std::string& key, const std::string& text) {
    std::uint64_t value = 0;
    const char* begin = text.data();
    const char* end = begin + text.size();
    const auto [ptr, ec] = std::from_chars(begin, end, value);
    if (ec != std::errc() || ptr != end || text.empty()) {
        throw ConfigError("config key " + key + " needs a nonnegative integer, got \"" + text + "\"");
    }
    return value;
}

inline std::int64_t parse_i64(const std::string& key, const std::string& text) {
    std::int64_t value = 0;
    const char* begin = text.data();
    const char* end = begin + text.size();
    const auto [ptr, ec] = std::from_chars(begin, end, value);
    if (ec != std::errc() || ptr != end || text.empty()) {
        throw ConfigError("config key " + key + " needs an integer, got \"" + text + "\"");
    }
    return value;
}

inline double parse_f64(const std::string& key, const std::string& text) {
    double value = 0.0;
    const char* begin = text.data();
    const char* end = begin + text.size();
    const auto [ptr, ec] = std::from_chars(begin, end, value);
    if (ec != std::errc() || ptr != end || text.empty() || !std::isfinite(value)) {
        throw ConfigError("config key " + key + " needs a finite number, got \"" + text + "\"");
    }
    return value;
}

inline bool parse_bool(const std::string& key, const std::string& text) {
    if (text == "true" || text == "1") return true;
    if (text == "false" || text == "0") return false;
    throw ConfigError("config key " + key + " needs true or false, got \"" + text + "\"");
}

inline std::string format_u64(std::uint64_t value) {
    char buffer[24];
    const auto [ptr, ec] = std::to_chars(buffer, buffer + sizeof buffer, value);
    return std::string(buffer, ptr);
}

inline std::string format_i64(std::int64_t value) {
    char buffer[24];
    const auto [ptr, ec] = std::to_chars(buffer, buffer + sizeof buffer, value);
    return std::string(buffer, ptr);
}

/// Shortest decimal form that parses back to the same double.
inline std::string format_f64(double value) {
    char buffer[48];
    const auto [ptr, ec] = std::to_chars(buffer, buffer + sizeof buffer, value);
    return std::string(buffer, ptr);
}

/// Canonical text for a value of the field's type; rejects malformed input.
inline std::string canonicalize(const FieldSpec& spec, const std::string& value) {
    switch (spec.type) {
        case FieldType::kU64: return format_u64(parse_u64(spec.key, value));
        case FieldType::kI64: return format_i64(parse_i64(spec.key, value));
        case FieldType::kF64: return format_f64(parse_f64(spec.key, value));
        case FieldType::kBool: return parse_bool(spec.key, value) ? "true" : "false";
        case FieldType::kString: return trim(value);
        case FieldType::kU64List: {
            std::string joined;
            for (const std::string& part : split_list(value)) {
                if (!joined.empty()) joined += ",";
                joined += format_u64(parse_u64(spec.key, part));
            }
            return joined;
        }
        case FieldType::kF64List: {
            std::string joined;
            for (const std::string& part : split_list(value)) {
                if (!joined.empty()) joined += ",";
                joined += format_f64(parse_f64(spec.key, part));
            }
            return joined;
        }
    }
    throw ContractError("unknown field type");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// CliConfig: every key always present, values stored in canonical text form

class CliConfig {
public:
    static CliConfig defaults() {
        CliConfig config;
        for (const FieldSpec& spec : config_schema()) {
            config.values_[spec.key] = detail::canonicalize(spec, spec.preset);
        }
        return config;
    }

    static const FieldSpec& spec_for(const std::string& key) {
        for (const FieldSpec& spec : config_schema()) {
            if (key == spec.key) return spec;
        }
        throw ConfigError("unknown config key \"" + key + "\"; run --help-config for the schema");
    }

    void set(const std::string& key, const std::string& value) {
        values_[spec_for(key).key] = detail::canonicalize(spec_for(key), value);
    }

    const std::string& raw(const std::string& key) const {
        const auto found = values_.find(key);
        if (found == values_.end()) throw ConfigError("unknown config key \"" + key + "\"");
        return found->second;
    }

    std::uint64_t u64(const std::string& key) const { return detail::parse_u64(key, raw(key)); }
    std::int64_t i64(const std::string& key) const { return detail::parse_i64(key, raw(key)); }
    double f64(const std::string& key) const { return detail::parse_f64(key, raw(key)); }
    bool flag(const std::string& key) const { return detail::parse_bool(key, raw(key)); }
    const std::string& str(const std::string& key) const { return raw(key); }

    std::vector<std::uint64_t> u64_list(const std::string& key) const {
        std::vector<std::uint64_t> values;
        for (const std::string& part : detail::split_list(raw(key))) {
            values.push_back(detail::parse_u64(key, part));
        }
        return values;
    }

    std::vector<std::size_t> size_list(const std::string& key) const {
        std::vector<std::size_t> values;
        for (const std::uint64_t v : u64_list(key)) values.push_back(static_cast<std::size_t>(v));
        return values;
    }

    std::vector<double> f64_list(const std::string& key) const {
        std::vector<double> values;
        for (const std::string& part : detail::split_list(raw(key))) {
            values.push_back(detail::parse_f64(key, part));
        }
        return values;
    }

    /// Full configuration as parseable key = value lines, in schema order.
    std::string echo() const {
        std::string text = "# adrmx configuration; pass back with --config to reproduce this run\n";
        for (const FieldSpec& spec : config_schema()) {
            text += spec.key;
            text += " = ";
            text += raw(spec.key);
            text += "\n";
        }
        return text;
    }

private:
    std::map<std::string, std::string> values_;
};

/// Apply key = value lines from a file on top of the given config.
/// A # starts a comment when it opens the line or follows whitespace.
inline void apply_config_file(CliConfig& config, const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        for (std::size_t i = 0; i < line.size(); ++i) {
            if (line[i] == '#' && (i == 0 || line[i - 1] == ' ' || line[i - 1] == '\t')) {
                line.resize(i);
                break;
            }
        }
        const std::string stripped = detail::trim(line);
        if (stripped.empty()) continue;
        const std::size_t equals = stripped.find('=');
        if (equals == std::string::npos) {
            throw ConfigError("config file " + path + " line " + std::to_string(line_no) +
                              ": expected key = value");
        }
        config.set(detail::trim(stripped.substr(0, equals)), detail::trim(stripped.substr(equals + 1)));
    }
}

// ---------------------------------------------------------------------------
// Config -> library structures

inline TrainConfig train_config_from(const CliConfig& c) {
    TrainConfig tc;
    tc.steps = c.u64("steps");
    tc.batch_per_domain = c.u64("batch_per_domain");
    tc.eta_gen = c.f64("eta_gen");
    tc.eta_disc = c.f64("eta_disc");
    tc.lambda = c.f64("lambda");
    tc.temperature = c.f64("temperature");
    tc.holdout_fraction = c.f64("holdout_fraction");
    tc.latent_dim = c.u64("latent_dim");
    tc.encoder_hidden = c.size_list("encoder_hidden");
    tc.head_hidden = c.size_list("head_hidden");
    tc.discriminator_hidden = c.size_list("discriminator_hidden");
    tc.use_remix = c.flag("use_remix");
    tc.use_contrastive = c.flag("use_contrastive");
    const std::string& stream = c.str("contrastive_on");
    if (stream == "label") {
        tc.contrastive_on = ContrastiveOn::kLabel;
    } else if (stream == "dinv") {
        tc.contrastive_on = ContrastiveOn::kDinv;
    } else if (stream == "both") {
        tc.contrastive_on = ContrastiveOn::kBoth;
    } else {
        throw ConfigError("contrastive_on must be label, dinv, or both, got \"" + stream + "\"");
    }
    tc.dinv_uses_shared_head = c.flag("dinv_shared_head");
    tc.disc_steps_per_gen = c.u64("disc_steps_per_gen");
    tc.dropout = c.f64("dropout");
    tc.weight_decay = c.f64("weight_decay");
    tc.ce_label_weight = c.f64("ce_label_weight");
    tc.ce_domain_weight = c.f64("ce_domain_weight");
    tc.ce_dinv_weight = c.f64("ce_dinv_weight");
    tc.eval_every = c.u64("eval_every");
    tc.seed = c.u64("seed");
    tc.validate();
    return tc;
}

inline SearchSpace search_space_from(const CliConfig& c) {
    SearchSpace space;
    space.eta_lo = c.f64("eta_lo");
    space.eta_hi = c.f64("eta_hi");
    space.lambda_lo = c.f64("lambda_lo");
    space.lambda_hi = c.f64("lambda_hi");
    space.tau_choices = c.f64_list("tau_choices");
    space.batch_choices = c.size_list("batch_choices");
    if (!(space.eta_lo > 0.0) || space.eta_hi < space.eta_lo) {
        throw ConfigError("eta_lo/eta_hi must satisfy 0 < eta_lo <= eta_hi");
    }
    if (!(space.lambda_lo > 0.0) || space.lambda_hi < space.lambda_lo) {
        throw ConfigError("lambda_lo/lambda_hi must satisfy 0 < lambda_lo <= lambda_hi");
    }
    if (space.tau_choices.empty()) throw ConfigError("tau_choices must list at least one temperature");
    for (const double tau : space.tau_choices) {
        if (!(tau > 0.0)) throw ConfigError("tau_choices must be positive");
    }
    if (space.batch_choices.empty()) throw ConfigError("batch_choices must list at least one batch size");
    for (const std::size_t b : space.batch_choices) {
        if (b == 0) throw ConfigError("batch_choices must be positive");
    }
    return space;
}

namespace detail {

/// Base digits for the MNIST-style tasks: rendered synthetically, or read
/// from idx files when data_dir is set. Returns exactly `need` digits.
inline DigitSet load_base_digits(const CliConfig& c, std::size_t need) {
    const std::string& dir = c.str("data_dir");
    if (dir.empty()) return make_digit_set(need, c.u64("data_seed"));

    namespace fs = std::filesystem;
    const fs::path images_path = fs::path(dir) / "train-images-idx3-ubyte";
    const fs::path labels_path = fs::path(dir) / "train-labels-idx1-ubyte";
    if (!fs::exists(images_path) || !fs::exists(labels_path)) {
        throw ConfigError("data_dir " + dir +
                          " must contain train-images-idx3-ubyte and train-labels-idx1-ubyte");
    }
    MnistPair pair = load_mnist_pair(io::read_file_bytes(images_path.string()),
                                     io::read_file_bytes(labels_path.string()));
    if (pair.rows != kDigitImageSide || pair.cols != kDigitImageSide) {
        throw ConfigError("data_dir images are " + std::to_string(pair.rows) + "x" +
                          std::to_string(pair.cols) + ", expected 28x28");
    }
    if (pair.count < need) {
        throw ConfigError("data_dir provides " + std::to_string(pair.count) + " digits, need " +
                          std::to_string(need));
    }
    DigitSet set;
    set.images.assign(pair.images.begin(),
                      pair.images.begin() + static_cast<std::ptrdiff_t>(need * kDigitImagePixels));
    set.labels.assign(pair.labels.begin(), pair.labels.begin() + static_cast<std::ptrdiff_t>(need));
    return set;
}

}  // namespace detail

inline MultiDomainTask build_task(const CliConfig& c) {
    const std::string& name = c.str("dataset");
    const std::uint64_t data_seed = c.u64("data_seed");
    const std::size_t per_domain = c.u64("per_domain_n");
    MultiDomainTask task;
    if (name == "gaussian") {
        task = gen_gaussian_domains(c.u64("num_domains"), per_domain, c.u64("num_classes"),
                                    c.u64("d_in"), c.f64("shift"), data_seed);
    } else if (name == "colored_mnist") {
        const DigitSet base = detail::load_base_digits(c, 3 * per_domain);
        task = make_colored_mnist(base.images, base.labels, data_seed, c.f64("label_noise"));
    } else if (name == "rotated_mnist") {
        const DigitSet base = detail::load_base_digits(c, 6 * per_domain);
        task = make_rotated_mnist(base.images, base.labels, {0.0, 15.0, 30.0, 45.0, 60.0, 75.0},
                                  per_domain, data_seed);
    } else {
        throw ConfigError("dataset must be gaussian, colored_mnist, or rotated_mnist, got \"" + name +
                          "\"");
    }
    const std::int64_t target = c.i64("target");
    if (target >= 0) {
        if (static_cast<std::size_t>(target) >= task.domains.size()) {
            throw ConfigError("target index " + std::to_string(target) + " outside " +
                              std::to_string(task.domains.size()) + " domains");
        }
        task.target_index = static_cast<std::size_t>(target);
    }
    task.validate();
    return task;
}

// ---------------------------------------------------------------------------
// Artifact plumbing

namespace detail {

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError("cannot write " + path.string());
    out << text;
    out.flush();
    if (!out) throw ConfigError("write failed for " + path.string());
}

/// Timestamped run directory under the output root, plus a `latest` pointer
/// file beside it. Collisions within one second get a numeric suffix.
inline std::filesystem::path make_run_dir(const CliConfig& c, const std::string& verb) {
    namespace fs = std::filesystem;
    const fs::path root(c.str("out"));
    fs::create_directories(root);
    const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm utc{};
    gmtime_r(&now, &utc);
    char stamp[32];
    std::strftime(stamp, sizeof stamp, "%Y%m%d-%H%M%S", &utc);
    const std::string base = verb + "-" + stamp;
    fs::path dir = root / base;
    for (int n = 2; !fs::create_directory(dir); ++n) dir = root / (base + "-" + std::to_string(n));
    write_text(root / "latest", dir.string() + "\n");
    return dir;
}

/// JSON number text: shortest round-trip form, null for non-finite values.
inline std::string json_number(double value) {
    if (!std::isfinite(value)) return "null";
    return format_f64(value);
}

inline std::string metrics_line(const EvalPoint& point) {
    std::string line = "{\"step\":" + format_u64(point.step);
    line += ",\"ce_label\":" + json_number(point.losses.ce_label);
    line += ",\"ce_domain\":" + json_number(point.losses.ce_domain);
    line += ",\"ce_dinv\":" + json_number(point.losses.ce_dinv);
    line += ",\"remix\":" + json_number(point.losses.remix);
    line += ",\"contrastive\":" + json_number(point.losses.contrastive);
    line += ",\"disc\":" + json_number(point.losses.disc);
    line += ",\"gen_total\":" + json_number(point.losses.generator_total);
    line += ",\"val_acc\":" + json_number(point.val_acc);
    line += "}\n";
    return line;
}

/// Per-step metrics with no timestamps, so identical runs are byte identical.
inline std::string metrics_jsonl(const RunRecord& record) {
    std::string text;
    for (const EvalPoint& point : record.history) text += metrics_line(point);
    return text;
}

inline nlohmann::ordered_json history_json(const RunRecord& record) {
    auto history = nlohmann::ordered_json::array();
    for (const EvalPoint& p : record.history) {
        history.push_back({{"step", p.step},
                           {"ce_label", p.losses.ce_label},
                           {"ce_domain", p.losses.ce_domain},
                           {"ce_dinv", p.losses.ce_dinv},
                           {"remix", p.losses.remix},
                           {"contrastive", p.losses.contrastive},
                           {"disc", p.losses.disc},
                           {"gen_total", p.losses.generator_total},
                           {"val_acc", p.val_acc}});
    }
    return history;
}

inline nlohmann::ordered_json run_record_json(const RunRecord& record) {
    nlohmann::ordered_json j;
    j["seed"] = record.seed;
    j["steps_completed"] = record.steps_completed;
    j["best_val_acc"] = record.best_val_acc;
    j["best_step"] = record.best_step;
    j["diverged"] = record.diverged;
    j["divergence_message"] = record.divergence_message;
    j["wall_seconds"] = record.wall_seconds;
    j["history"] = history_json(record);
    return j;
}

inline void write_json(const std::filesystem::path& path, const nlohmann::ordered_json& j) {
    write_text(path, j.dump(2) + "\n");
}

/// Written last: every file the command produced, relative to the run dir.
inline void write_manifest(const std::filesystem::path& dir, const std::string& command,
                           std::vector<std::string> files) {
    files.emplace_back("manifest.json");
    nlohmann::ordered_json j;
    j["command"] = command;
    j["files"] = files;
    write_json(dir / "manifest.json", j);
}

inline void print_error(std::ostream& err, const std::string& type, const std::string& message) {
    nlohmann::ordered_json j;
    j["error"] = nlohmann::ordered_json{{"type", type}, {"message", message}};
    err << j.dump() << "\n";
}

inline AdrmxParams load_checkpoint_params(const CliConfig& c, const AdrmxConfig& mc) {
    const std::string& path = c.str("checkpoint");
    if (path.empty()) throw ConfigError("checkpoint must name a saved best-params file");
    AdrmxParams params = make_adrmx_params(mc, 0);
    unpack_best_params(NamedTensorStore::deserialize(io::read_file_bytes(path), path), mc, params);
    return params;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Commands

inline int cmd_train(const CliConfig& c, std::ostream& out, std::ostream& err) {
    const MultiDomainTask task = build_task(c);
    const TrainConfig tc = train_config_from(c);
    const std::filesystem::path dir = detail::make_run_dir(c, "train");
    detail::write_text(dir / "config.echo.txt", c.echo());

    const TrainResult result = train_on_sources(task.sources(), tc);

    detail::write_text(dir / "metrics.jsonl", detail::metrics_jsonl(result.record));
    detail::write_json(dir / "run_record.json", detail::run_record_json(result.record));
    io::write_file_bytes((dir / "best.ckpt").string(),
                         pack_best_params(result.state.model_config, result.best_params).serialize());
    save_train_state((dir / "final.ckpt").string(), result.state);
    detail::write_manifest(dir, "train",
                           {"config.echo.txt", "metrics.jsonl", "run_record.json", "best.ckpt",
                            "final.ckpt"});

    out << "run dir: " << dir.string() << "\n";
    if (result.record.diverged) {
        detail::print_error(err, "divergence", result.record.divergence_message);
        return 3;
    }
    out << "best val acc " << detail::format_f64(result.record.best_val_acc) << " at step "
        << result.record.best_step << "\n";
    return 0;
}

inline int cmd_eval(const CliConfig& c, std::ostream& out, std::ostream&) {
    const MultiDomainTask task = build_task(c);
    const TrainConfig tc = train_config_from(c);
    const auto sources = task.sources();
    const AdrmxConfig mc = tc.model_config(task.domains.front().input_dim(),
                                           task.domains.front().num_classes, sources.size());
    const AdrmxParams params = detail::load_checkpoint_params(c, mc);

    // The same holdout fraction and seed reproduce the training-time splits.
    std::vector<std::pair<DomainDataset, DomainDataset>> splits;
    splits.reserve(sources.size());
    for (const DomainDataset* src : sources) {
        splits.push_back(split_train_val(*src, SplitSpec{tc.holdout_fraction, tc.seed}));
    }
    std::vector<const DomainDataset*> val_ptrs;
    for (const auto& split : splits) val_ptrs.push_back(&split.second);

    nlohmann::ordered_json report;
    report["checkpoint"] = c.str("checkpoint");
    report["selection_val_acc"] = mean_domain_accuracy(params, val_ptrs);
    auto source_rows = nlohmann::ordered_json::array();
    for (std::size_t s = 0; s < sources.size(); ++s) {
        const auto& [train_part, val_part] = splits[s];
        source_rows.push_back(
            {{"domain", sources[s]->domain_name},
             {"train_acc", accuracy(predict(params, train_part.inputs), train_part.labels)},
             {"val_acc", accuracy(predict(params, val_part.inputs), val_part.labels)}});
    }
    report["sources"] = source_rows;
    const DomainDataset& target = task.target();
    report["target"] = {{"domain", target.domain_name},
                        {"accuracy", accuracy(predict(params, target.inputs), target.labels)}};

    const std::filesystem::path dir = detail::make_run_dir(c, "eval");
    detail::write_text(dir / "config.echo.txt", c.echo());
    detail::write_json(dir / "accuracy_report.json", report);
    detail::write_manifest(dir, "eval", {"config.echo.txt", "accuracy_report.json"});
    out << report.dump(2) << "\n";
    return 0;
}

inline int cmd_sweep(const CliConfig& c, std::ostream& out, std::ostream& err) {
    const MultiDomainTask task = build_task(c);
    const TrainConfig base = train_config_from(c);
    const SearchSpace space = search_space_from(c);
    const std::vector<std::uint64_t> seeds = c.u64_list("seeds");
    if (seeds.empty()) throw ConfigError("seeds must list at least one training seed");
    const std::size_t trials = c.u64("trials");

    const std::filesystem::path dir = detail::make_run_dir(c, "sweep");
    detail::write_text(dir / "config.echo.txt", c.echo());
    std::vector<std::string> files = {"config.echo.txt"};

    SearchResult result;
    try {
        result = random_search(task.sources(), space, base, trials, seeds, c.u64("sweep_seed"),
                               c.u64("workers"));
    } catch (const DivergenceError& e) {
        nlohmann::ordered_json j;
        j["error"] = nlohmann::ordered_json{{"type", "divergence"}, {"message", e.what()}};
        detail::write_json(dir / "error.json", j);
        files.emplace_back("error.json");
        detail::write_manifest(dir, "sweep", files);
        detail::print_error(err, "divergence", e.what());
        return 3;
    }

    auto trial_rows = nlohmann::ordered_json::array();
    for (const TrialRecord& trial : result.trials) {
        const std::string trial_dir = "trial" + detail::format_u64(trial.trial);
        std::filesystem::create_directories(dir / trial_dir);

        // Per-trial echo: the base config with the sampled values substituted,
        // so any trial can be rerun directly as a train command.
        CliConfig trial_config = c;
        trial_config.set("eta_gen", detail::format_f64(trial.config.eta_gen));
        trial_config.set("lambda", detail::format_f64(trial.config.lambda));
        trial_config.set("temperature", detail::format_f64(trial.config.temperature));
        trial_config.set("batch_per_domain", detail::format_u64(trial.config.batch_per_domain));
        detail::write_text(dir / trial_dir / "config.echo.txt", trial_config.echo());
        files.push_back(trial_dir + "/config.echo.txt");

        auto run_rows = nlohmann::ordered_json::array();
        for (const RunRecord& run : trial.runs) {
            const std::string seed_dir = trial_dir + "/seed" + detail::format_u64(run.seed);
            std::filesystem::create_directories(dir / seed_dir);
            detail::write_json(dir / seed_dir / "run_record.json", detail::run_record_json(run));
            files.push_back(seed_dir + "/run_record.json");
            run_rows.push_back({{"seed", run.seed},
                                {"best_val_acc", run.best_val_acc},
                                {"best_step", run.best_step},
                                {"diverged", run.diverged}});
        }
        trial_rows.push_back({{"trial", trial.trial},
                              {"failed", trial.failed},
                              {"mean_val_acc", trial.failed ? nlohmann::ordered_json()
                                                            : nlohmann::ordered_json(trial.mean_val_acc)},
                              {"eta_gen", trial.config.eta_gen},
                              {"lambda", trial.config.lambda},
                              {"temperature", trial.config.temperature},
                              {"batch_per_domain", trial.config.batch_per_domain},
                              {"runs", run_rows}});
    }

    nlohmann::ordered_json selection;
    selection["selected_trial"] = result.selected_trial;
    selection["selected_config"] =
        nlohmann::ordered_json{{"eta_gen", result.selected_config.eta_gen},
                               {"lambda", result.selected_config.lambda},
                               {"temperature", result.selected_config.temperature},
                               {"batch_per_domain", result.selected_config.batch_per_domain}};
    selection["seeds"] = seeds;
    selection["trials"] = trial_rows;
    detail::write_json(dir / "selection.json", selection);
    files.emplace_back("selection.json");
    detail::write_manifest(dir, "sweep", files);

    out << "run dir: " << dir.string() << "\n";
    out << "selected trial " << result.selected_trial << ": eta_gen "
        << detail::format_f64(result.selected_config.eta_gen) << ", lambda "
        << detail::format_f64(result.selected_config.lambda) << ", temperature "
        << detail::format_f64(result.selected_config.temperature) << ", batch_per_domain "
        << result.selected_config.batch_per_domain << "\n";
    return 0;
}

inline int cmd_ablate(const CliConfig& c, std::ostream& out, std::ostream& err) {
    const MultiDomainTask task = build_task(c);
    const TrainConfig base = train_config_from(c);
    const std::vector<std::uint64_t> seeds = c.u64_list("seeds");
    if (seeds.empty()) throw ConfigError("seeds must list at least one training seed");

    const std::filesystem::path dir = detail::make_run_dir(c, "ablate");
    detail::write_text(dir / "config.echo.txt", c.echo());

    AccessLog log;
    const std::vector<ExperimentResult> rows =
        run_ablations(task.domains, base, seeds, &log, c.u64("workers"));

    const std::string table = results_table_csv(rows);
    detail::write_text(dir / "results.csv", table);

    nlohmann::ordered_json results;
    results["seeds"] = seeds;
    auto row_json = nlohmann::ordered_json::array();
    for (const ExperimentResult& row : rows) {
        auto targets = nlohmann::ordered_json::array();
        for (std::size_t t = 0; t < row.target_names.size(); ++t) {
            targets.push_back({{"name", row.target_names[t]},
                               {"mean_acc", row.per_target[t]},
                               {"per_seed", row.per_seed[t]}});
        }
        auto cells = nlohmann::ordered_json::array();
        for (const CellOutcome& cell : row.cells) {
            cells.push_back({{"target", cell.target_name},
                             {"seed", cell.seed},
                             {"accuracy", cell.diverged ? nlohmann::ordered_json()
                                                        : nlohmann::ordered_json(cell.target_accuracy)},
                             {"diverged", cell.diverged},
                             {"best_val_acc", cell.record.best_val_acc},
                             {"best_step", cell.record.best_step}});
        }
        row_json.push_back({{"variant", row.variant},
                            {"mean", row.mean},
                            {"incomplete", row.incomplete},
                            {"targets", targets},
                            {"cells", cells}});
    }
    results["rows"] = row_json;
    detail::write_json(dir / "results.json", results);

    nlohmann::ordered_json audit;
    audit["target_reads_clean"] = log.target_reads_clean();
    audit["total_reads"] = log.records.size();
    auto reads = nlohmann::ordered_json::array();
    for (const AccessRecord& r : log.records) {
        reads.push_back({{"cell_target", r.cell_target},
                         {"domain_id", r.domain_id},
                         {"domain", r.domain_name},
                         {"purpose", to_string(r.purpose)},
                         {"seed", r.seed}});
    }
    audit["reads"] = reads;
    detail::write_json(dir / "audit.json", audit);

    detail::write_manifest(dir, "ablate",
                           {"config.echo.txt", "results.csv", "results.json", "audit.json"});

    out << "run dir: " << dir.string() << "\n";
    out << table;

    const bool all_diverged = std::all_of(rows.begin(), rows.end(), [](const ExperimentResult& row) {
        return std::all_of(row.cells.begin(), row.cells.end(),
                           [](const CellOutcome& cell) { return cell.diverged; });
    });
    if (all_diverged) {
        detail::print_error(err, "divergence", "every ablation cell diverged");
        return 3;
    }
    return 0;
}

inline int cmd_export(const CliConfig& c, std::ostream& out, std::ostream&) {
    const MultiDomainTask task = build_task(c);
    const TrainConfig tc = train_config_from(c);
    const auto sources = task.sources();
    const std::string& split = c.str("split");
    if (split != "train" && split != "val" && split != "all") {
        throw ConfigError("split must be train, val, or all, got \"" + split + "\"");
    }
    const AdrmxConfig mc = tc.model_config(task.domains.front().input_dim(),
                                           task.domains.front().num_classes, sources.size());
    const AdrmxParams params = detail::load_checkpoint_params(c, mc);

    // Source domains only; the held-out target never enters the export.
    std::vector<DomainDataset> owned;
    owned.reserve(sources.size());
    std::vector<const DomainDataset*> chosen;
    for (const DomainDataset* src : sources) {
        if (split == "all") {
            chosen.push_back(src);
            continue;
        }
        auto [train_part, val_part] = split_train_val(*src, SplitSpec{tc.holdout_fraction, tc.seed});
        owned.push_back(split == "train" ? std::move(train_part) : std::move(val_part));
        chosen.push_back(&owned.back());
    }

    const EmbeddingExport exported = export_embeddings(params, chosen);

    const std::filesystem::path dir = detail::make_run_dir(c, "export");
    detail::write_text(dir / "config.echo.txt", c.echo());
    detail::write_text(dir / "embeddings.csv", embeddings_csv(exported.rows));
    nlohmann::ordered_json pca;
    pca["variance_domain"] = exported.variance_domain;
    pca["variance_dinv"] = exported.variance_dinv;
    pca["rank_domain"] = exported.rank_domain;
    pca["rank_dinv"] = exported.rank_dinv;
    detail::write_json(dir / "pca.json", pca);
    detail::write_manifest(dir, "export", {"config.echo.txt", "embeddings.csv", "pca.json"});

    out << "run dir: " << dir.string() << "\n";
    out << "embedded " << exported.rows.size() << " rows from " << chosen.size() << " source domains ("
        << split << " split)\n";
    return 0;
}

// ---------------------------------------------------------------------------
// Argument parsing and dispatch

inline void print_usage(std::ostream& out) {
    out << "adrmx <command> [--key value ...]\n"
           "\n"
           "commands:\n"
           "  train    train on the source domains of a task and save checkpoints\n"
           "  eval     score a checkpoint on train/val splits and the held-out domain\n"
           "  sweep    random hyperparameter search scored by mean validation accuracy\n"
           "  ablate   leave-one-domain-out comparison of the method and its ablations\n"
           "  export   project latent embeddings of a checkpoint to 2d for plotting\n"
           "\n"
           "flags:\n"
           "  --config PATH     apply key = value lines from a file before other flags\n"
           "  --help-config     print every config key with type, default, and help\n"
           "  --no-remix        shorthand for --use_remix false\n"
           "  --no-contrastive  shorthand for --use_contrastive false\n"
           "  --<key> VALUE     override any config key, e.g. --seed 3 --out runs\n"
           "\n"
           "exit codes: 0 success, 2 usage or config error, 3 runtime failure\n";
}

inline void print_config_help(std::ostream& out) {
    out << "config keys (config file lines or --key value flags):\n";
    for (const FieldSpec& spec : config_schema()) {
        std::ostringstream line;
        line << "  " << std::left << std::setw(22) << spec.key << std::setw(10)
             << to_string(spec.type) << std::setw(14) << (spec.preset[0] ? spec.preset : "(empty)");
        out << line.str() << spec.help << "\n";
    }
}

inline int dispatch(const std::string& verb, const CliConfig& c, std::ostream& out,
                    std::ostream& err) {
    if (verb == "train") return cmd_train(c, out, err);
    if (verb == "eval") return cmd_eval(c, out, err);
    if (verb == "sweep") return cmd_sweep(c, out, err);
    if (verb == "ablate") return cmd_ablate(c, out, err);
    if (verb == "export") return cmd_export(c, out, err);
    throw ContractError("dispatch on unknown verb " + verb);
}

inline bool known_verb(const std::string& verb) {
    return verb == "train" || verb == "eval" || verb == "sweep" || verb == "ablate" ||
           verb == "export";
}

/// Entry point shared by main() and the tests. Never throws: failures become
/// an error line on `err` plus a nonzero exit code.
inline int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    try {
        if (args.empty()) {
            print_usage(err);
            return 2;
        }
        if (args[0] == "--help" || args[0] == "-h" || args[0] == "help") {
            print_usage(out);
            return 0;
        }
        if (args[0] == "--help-config") {
            print_config_help(out);
            return 0;
        }
        const std::string& verb = args[0];
        if (!known_verb(verb)) {
            detail::print_error(err, "usage", "unknown command \"" + verb + "\"");
            print_usage(err);
            return 2;
        }

        CliConfig config = CliConfig::defaults();
        // Config files apply first so explicit flags win regardless of order.
        for (std::size_t i = 1; i < args.size(); ++i) {
            if (args[i] == "--config") {
                if (i + 1 >= args.size()) throw ConfigError("--config needs a file path");
                apply_config_file(config, args[i + 1]);
                ++i;
            }
        }
        for (std::size_t i = 1; i < args.size(); ++i) {
            const std::string& arg = args[i];
            if (arg == "--help" || arg == "-h") {
                print_usage(out);
                return 0;
            }
            if (arg == "--help-config") {
                print_config_help(out);
                return 0;
            }
            if (arg == "--config") {
                ++i;
                continue;
            }
            if (arg == "--no-remix") {
                config.set("use_remix", "false");
                continue;
            }
            if (arg == "--no-contrastive") {
                config.set("use_contrastive", "false");
                continue;
            }
            if (arg.rfind("--", 0) != 0) {
                throw ConfigError("expected --key value, got \"" + arg + "\"");
            }
            const std::string key = arg.substr(2);
            if (i + 1 >= args.size()) throw ConfigError("flag --" + key + " needs a value");
            config.set(key, args[i + 1]);
            ++i;
        }
        return dispatch(verb, config, out, err);
    } catch (const ConfigError& e) {
        detail::print_error(err, "config", e.what());
        return 2;
    } catch (const FormatError& e) {
        detail::print_error(err, "format", e.what());
        return 2;
    } catch (const ShapeError& e) {
        detail::print_error(err, "shape", e.what());
        return 2;
    } catch (const LengthError& e) {
        detail::print_error(err, "length", e.what());
        return 2;
    } catch (const IndexError& e) {
        detail::print_error(err, "index", e.what());
        return 2;
    } catch (const DivergenceError& e) {
        detail::print_error(err, "divergence", e.what());
        return 3;
    } catch (const std::exception& e) {
        detail::print_error(err, "runtime", e.what());
        return 3;
    }
}

}  // namespace adrmx::cli
