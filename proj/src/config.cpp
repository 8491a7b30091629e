#include "linkforge/config.hpp"

#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "linkforge/common.hpp"
#include "linkforge/matrix_io.hpp"

namespace linkforge {

namespace {

std::string fmt_double(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

struct Field {
    std::function<std::string(const TrainConfig&)> get;
    std::function<void(TrainConfig&, const std::string&)> set;
};

int64_t parse_int(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        int64_t x = std::stoll(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': not an integer: " + v);
    }
}

double parse_double(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        double x = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': not a number: " + v);
    }
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "1" || v == "true") return true;
    if (v == "0" || v == "false") return false;
    throw ConfigError("config key '" + key + "': not a boolean: " + v);
}

// Ordered field table; the order fixes the serialization layout.
const std::vector<std::pair<std::string, Field>>& fields() {
    static const std::vector<std::pair<std::string, Field>> table = [] {
        std::vector<std::pair<std::string, Field>> t;
        auto add_double = [&](const std::string& k, double TrainConfig::* f) {
            t.push_back({k,
                         {[f](const TrainConfig& c) { return fmt_double(c.*f); },
                          [f, k](TrainConfig& c, const std::string& v) { c.*f = parse_double(k, v); }}});
        };
        auto add_int = [&](const std::string& k, int TrainConfig::* f) {
            t.push_back({k,
                         {[f](const TrainConfig& c) { return std::to_string(c.*f); },
                          [f, k](TrainConfig& c, const std::string& v) {
                              c.*f = static_cast<int>(parse_int(k, v));
                          }}});
        };
        auto add_bool = [&](const std::string& k, bool TrainConfig::* f) {
            t.push_back({k,
                         {[f](const TrainConfig& c) { return std::string((c.*f) ? "1" : "0"); },
                          [f, k](TrainConfig& c, const std::string& v) { c.*f = parse_bool(k, v); }}});
        };
        auto add_str = [&](const std::string& k, std::string TrainConfig::* f) {
            t.push_back({k,
                         {[f](const TrainConfig& c) { return c.*f; },
                          [f](TrainConfig& c, const std::string& v) { c.*f = v; }}});
        };
        add_double("peak_lr", &TrainConfig::peak_lr);
        add_double("end_lr", &TrainConfig::end_lr);
        t.push_back({"warmup",
                     {[](const TrainConfig& c) { return std::to_string(c.warmup); },
                      [](TrainConfig& c, const std::string& v) { c.warmup = parse_int("warmup", v); }}});
        add_int("epochs", &TrainConfig::epochs);
        add_int("hops", &TrainConfig::hops);
        add_int("experts_per_branch", &TrainConfig::experts_per_branch);
        add_double("dropout", &TrainConfig::dropout);
        add_int("hidden", &TrainConfig::hidden);
        add_int("encoder_layers", &TrainConfig::encoder_layers);
        add_int("batch_size", &TrainConfig::batch_size);
        t.push_back({"seed",
                     {[](const TrainConfig& c) { return std::to_string(c.seed); },
                      [](TrainConfig& c, const std::string& v) {
                          c.seed = static_cast<uint64_t>(parse_int("seed", v));
                      }}});
        add_int("structural_k", &TrainConfig::structural_k);
        add_int("sketch_precision", &TrainConfig::sketch_precision);
        add_int("sketch_hashes", &TrainConfig::sketch_hashes);
        add_double("tau0", &TrainConfig::tau0);
        add_double("tau_final", &TrainConfig::tau_final);
        add_double("tau_alpha", &TrainConfig::tau_alpha);
        add_int("gate_hidden", &TrainConfig::gate_hidden);
        add_int("gate_latent", &TrainConfig::gate_latent);
        add_int("batches_per_shard", &TrainConfig::batches_per_shard);
        add_int("pretrain_parts", &TrainConfig::pretrain_parts);
        add_str("norm_mode", &TrainConfig::norm_mode);
        add_str("gate_input", &TrainConfig::gate_input);
        add_bool("mask_edge", &TrainConfig::mask_edge);
        add_bool("hard_routing", &TrainConfig::hard_routing);
        add_bool("use_sketch_counts", &TrainConfig::use_sketch_counts);
        add_int("num_eval_neg", &TrainConfig::num_eval_neg);
        add_double("train_ratio", &TrainConfig::train_ratio);
        add_double("valid_ratio", &TrainConfig::valid_ratio);
        add_double("test_ratio", &TrainConfig::test_ratio);
        add_int("threads", &TrainConfig::threads);
        add_int("score_hidden_layers", &TrainConfig::score_hidden_layers);
        add_int("probe_edges", &TrainConfig::probe_edges);
        add_double("adapter_lr", &TrainConfig::adapter_lr);
        add_int("adapter_steps", &TrainConfig::adapter_steps);
        return t;
    }();
    return table;
}

void check(bool ok, const std::string& msg) {
    if (!ok) throw ConfigError("config: " + msg);
}

}  // namespace

void TrainConfig::validate() const {
    check(peak_lr > 0.0, "peak_lr must be positive");
    check(end_lr > 0.0 && end_lr <= peak_lr, "end_lr must be in (0, peak_lr]");
    check(warmup >= 0, "warmup must be >= 0");
    check(epochs >= 1 && epochs <= 100000, "epochs must be in [1, 100000]");
    check(hops >= 0 && hops <= 16, "hops must be in [0, 16]");
    check(experts_per_branch >= 1 && experts_per_branch <= 64,
          "experts_per_branch must be in [1, 64]");
    check(dropout >= 0.0 && dropout < 1.0, "dropout must be in [0, 1)");
    check(hidden >= 1 && hidden <= 8192, "hidden must be in [1, 8192]");
    check(encoder_layers >= 1 && encoder_layers <= 16, "encoder_layers must be in [1, 16]");
    check(batch_size >= 2 && batch_size % 2 == 0, "batch_size must be even and >= 2");
    check(structural_k >= 1 && structural_k <= 10, "structural_k must be in [1, 10]");
    check(sketch_precision >= 4 && sketch_precision <= 18,
          "sketch_precision must be in [4, 18]");
    check(sketch_hashes >= 16, "sketch_hashes must be >= 16");
    check(tau_final > 0.0 && tau_final <= tau0, "need 0 < tau_final <= tau0");
    check(tau_alpha > 0.0 && tau_alpha < 1.0, "tau_alpha must be in (0, 1)");
    check(gate_hidden >= 1 && gate_latent >= 1, "gate widths must be >= 1");
    check(batches_per_shard >= 1, "batches_per_shard must be >= 1");
    check(pretrain_parts >= 1, "pretrain_parts must be >= 1");
    norm_mode_from_string(norm_mode);  // throws on unknown value
    check(gate_input == "raw" || gate_input == "hop_mean",
          "gate_input must be raw or hop_mean");
    check(num_eval_neg >= 1, "num_eval_neg must be >= 1");
    check(train_ratio > 0.0 && valid_ratio > 0.0 && test_ratio > 0.0,
          "split ratios must be positive");
    check(std::abs(train_ratio + valid_ratio + test_ratio - 1.0) <= 1e-9,
          "split ratios must sum to 1");
    check(threads >= 1 && threads <= 1024, "threads must be in [1, 1024]");
    check(score_hidden_layers >= 1 && score_hidden_layers <= 8,
          "score_hidden_layers must be in [1, 8]");
    check(probe_edges >= 8, "probe_edges must be >= 8");
    check(adapter_lr > 0.0, "adapter_lr must be positive");
    check(adapter_steps >= 1, "adapter_steps must be >= 1");
}

std::string TrainConfig::serialize() const {
    std::string out;
    for (const auto& [key, field] : fields()) out += key + " = " + field.get(*this) + "\n";
    return out;
}

TrainConfig TrainConfig::parse(const std::string& text) {
    TrainConfig cfg;
    std::istringstream in(text);
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        size_t eq = t.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
        std::string key = trim(t.substr(0, eq));
        std::string val = trim(t.substr(eq + 1));
        bool found = false;
        for (const auto& [k, field] : fields()) {
            if (k == key) {
                field.set(cfg, val);
                found = true;
                break;
            }
        }
        if (!found) throw ConfigError("unknown config key: " + key);
    }
    cfg.validate();
    return cfg;
}

TrainConfig TrainConfig::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return parse(text);
}

void TrainConfig::save(const std::string& path) const {
    atomic_write_file(path, serialize());
}

uint64_t TrainConfig::fingerprint() const {
    return fnv1a64_str(serialize());
}

}  // namespace linkforge
