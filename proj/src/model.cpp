#include "linkforge/model.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <limits>
#include <sstream>

namespace linkforge {

namespace {

std::string meta_line(const std::string& key, const std::string& val) {
    return key + "=" + val + "\n";
}

std::unordered_map<std::string, std::string> parse_kv(const std::string& text) {
    std::unordered_map<std::string, std::string> kv;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        size_t eq = line.find('=');
        if (eq == std::string::npos) throw DataError("malformed metadata line: " + line);
        kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    return kv;
}

int kv_int(const std::unordered_map<std::string, std::string>& kv, const std::string& key) {
    auto it = kv.find(key);
    if (it == kv.end()) throw DataError("missing metadata key: " + key);
    return std::stoi(it->second);
}

double kv_double(const std::unordered_map<std::string, std::string>& kv, const std::string& key) {
    auto it = kv.find(key);
    if (it == kv.end()) throw DataError("missing metadata key: " + key);
    return std::stod(it->second);
}

std::string kv_str(const std::unordered_map<std::string, std::string>& kv,
                   const std::string& key) {
    auto it = kv.find(key);
    if (it == kv.end()) throw DataError("missing metadata key: " + key);
    return it->second;
}

std::string fmt_double(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

}  // namespace

std::string BankMeta::serialize() const {
    std::string out;
    out += meta_line("version", std::to_string(version));
    out += meta_line("hops", std::to_string(hops));
    out += meta_line("struct_k", std::to_string(struct_k));
    out += meta_line("feat_dim", std::to_string(feat_dim));
    out += meta_line("width", std::to_string(width));
    out += meta_line("enc_layers", std::to_string(enc_layers));
    out += meta_line("node_experts", std::to_string(node_experts));
    out += meta_line("edge_experts", std::to_string(edge_experts));
    out += meta_line("score_hidden", std::to_string(score_hidden));
    out += meta_line("score_hidden_layers", std::to_string(score_hidden_layers));
    out += meta_line("gate_hidden", std::to_string(gate_hidden));
    out += meta_line("gate_latent", std::to_string(gate_latent));
    out += meta_line("norm_mode", to_string(norm_mode));
    out += meta_line("gate_input", gate_input == GateInput::raw ? "raw" : "hop_mean");
    out += meta_line("tau_final", fmt_double(tau_final));
    out += meta_line("dropout", fmt_double(dropout));
    out += meta_line("mask_edge", mask_edge ? "1" : "0");
    out += meta_line("fingerprint", std::to_string(fingerprint));
    return out;
}

BankMeta BankMeta::parse(const std::string& text) {
    auto kv = parse_kv(text);
    BankMeta m;
    m.version = static_cast<uint32_t>(kv_int(kv, "version"));
    if (m.version != 1) throw DataError("unsupported bank version");
    m.hops = kv_int(kv, "hops");
    m.struct_k = kv_int(kv, "struct_k");
    m.feat_dim = kv_int(kv, "feat_dim");
    m.width = kv_int(kv, "width");
    m.enc_layers = kv_int(kv, "enc_layers");
    m.node_experts = kv_int(kv, "node_experts");
    m.edge_experts = kv_int(kv, "edge_experts");
    m.score_hidden = kv_int(kv, "score_hidden");
    m.score_hidden_layers = kv_int(kv, "score_hidden_layers");
    m.gate_hidden = kv_int(kv, "gate_hidden");
    m.gate_latent = kv_int(kv, "gate_latent");
    m.norm_mode = norm_mode_from_string(kv_str(kv, "norm_mode"));
    m.gate_input = kv_str(kv, "gate_input") == "raw" ? GateInput::raw : GateInput::hop_mean;
    m.tau_final = kv_double(kv, "tau_final");
    m.dropout = kv_double(kv, "dropout");
    m.mask_edge = kv_int(kv, "mask_edge") != 0;
    m.fingerprint = std::stoull(kv_str(kv, "fingerprint"));
    return m;
}

std::vector<std::string> ExpertBank::expert_ids() const {
    std::vector<std::string> ids;
    for (int i = 0; i < meta.node_experts; ++i) ids.push_back("N" + std::to_string(i));
    for (int i = 0; i < meta.edge_experts; ++i) ids.push_back("E" + std::to_string(i));
    return ids;
}

void save_bank(const std::string& path, const ExpertBank& bank) {
    save_params(path, bank.params, /*include_adam=*/false, bank.meta.serialize());
}

ExpertBank load_bank(const std::string& path) {
    ExpertBank bank;
    std::string meta;
    bank.params = load_params(path, &meta);
    bank.meta = BankMeta::parse(meta);

    // Metadata must agree with parameter shapes.
    auto expect = [&](const std::string& name, int rows, int cols) {
        if (!bank.params.has(name)) throw DataError("bank missing parameter " + name);
        const auto& v = bank.params.entry(name).value;
        if (v.rows != rows || v.cols != cols)
            throw DataError("bank parameter " + name + " has shape " + std::to_string(v.rows) +
                            "x" + std::to_string(v.cols) + ", metadata implies " +
                            std::to_string(rows) + "x" + std::to_string(cols));
    };
    if (bank.meta.node_experts > 0) {
        expect("enc.in.w", bank.meta.feat_dim, bank.meta.width);
        expect("ngate.centers", bank.meta.node_experts, bank.meta.gate_latent);
        expect("nscore0.l0.w", bank.meta.width, bank.meta.score_hidden);
    }
    if (bank.meta.edge_experts > 0) {
        expect("egate.centers", bank.meta.edge_experts, bank.meta.gate_latent);
        expect("escore0.l0.w", StructuralFeature::feature_length(bank.meta.struct_k),
               bank.meta.score_hidden);
    }
    return bank;
}

std::vector<float> edge_feature_input(const StructuralFeature& f) {
    std::vector<double> flat = f.flatten();
    std::vector<float> out(flat.size());
    for (size_t i = 0; i < flat.size(); ++i)
        out[i] = static_cast<float>(std::log1p(std::max(0.0, flat[i])));
    return out;
}

MatrixF encode_nodes(const ExpertBank& bank, const HopFeatures& hops, bool train_mode, Rng* rng) {
    EncoderConfig cfg = bank.meta.encoder_config();
    if (hops.hops != cfg.hops)
        throw DataError("hop features have K=" + std::to_string(hops.hops) +
                        " but the encoder expects K=" + std::to_string(cfg.hops));
    if (hops.dim != cfg.feat_dim) throw DataError("hop feature width mismatch");
    if (train_mode && rng == nullptr) throw ComputeError("encode_nodes: train mode needs rng");

    int S = cfg.tokens();
    ad::Mat<float> tokens(hops.n * S, hops.dim);
    for (int i = 0; i < hops.n; ++i)
        for (int k = 0; k < S; ++k) {
            const float* src = hops.slice(i, k);
            std::copy(src, src + hops.dim, &tokens(i * S + k, 0));
        }

    ad::Tape<float> tape;
    // The store is immutable here; binding copies values onto the tape.
    TapeBind<float> tb(tape, const_cast<ParamStore<float>&>(bank.params));
    auto enc = encoder_forward(tb, "enc", cfg, tape.leaf(std::move(tokens)), train_mode, rng);
    const auto& h = enc.h.val();
    MatrixF out(static_cast<uint64_t>(h.rows), static_cast<uint64_t>(h.cols));
    std::copy(h.a.begin(), h.a.end(), out.data.begin());
    return out;
}

namespace {

double mlp_logit(const ParamStore<float>& params, const std::string& prefix, const MlpConfig& cfg,
                 const std::vector<float>& input) {
    ad::Tape<float> tape;
    TapeBind<float> tb(tape, const_cast<ParamStore<float>&>(params));
    ad::Mat<float> x(1, static_cast<int>(input.size()));
    std::copy(input.begin(), input.end(), x.a.begin());
    auto out = score_mlp_forward(tb, prefix, cfg, tape.leaf(std::move(x)), false, nullptr);
    return static_cast<double>(out.val()(0, 0));
}

}  // namespace

double node_expert_logit(const ExpertBank& bank, int expert, const float* h_i, const float* h_j) {
    if (expert < 0 || expert >= bank.meta.node_experts)
        throw DataError("node expert index out of range");
    int F = bank.meta.width;
    std::vector<float> prod(static_cast<size_t>(F));
    for (int c = 0; c < F; ++c) prod[static_cast<size_t>(c)] = h_i[c] * h_j[c];
    return mlp_logit(bank.params, "nscore" + std::to_string(expert),
                     bank.meta.node_score_config(), prod);
}

double edge_expert_logit(const ExpertBank& bank, int expert, const StructuralFeature& f) {
    if (expert < 0 || expert >= bank.meta.edge_experts)
        throw DataError("edge expert index out of range");
    std::vector<float> input = edge_feature_input(f);
    if (static_cast<int>(input.size()) != StructuralFeature::feature_length(bank.meta.struct_k))
        throw DataError("structural feature length mismatch");
    return mlp_logit(bank.params, "escore" + std::to_string(expert),
                     bank.meta.edge_score_config(), input);
}

std::vector<double> gate_edge(const ExpertBank& bank, const std::string& gate_prefix,
                              const float* x_i, const float* x_j, int64_t epoch,
                              const TemperatureSchedule& sched, Rng* rng, bool train_mode,
                              bool hard) {
    int experts = gate_prefix == "ngate" ? bank.meta.node_experts : bank.meta.edge_experts;
    GateConfig cfg = bank.meta.gate_config(experts);
    ad::Mat<float> g(1, cfg.in_dim);
    for (int c = 0; c < cfg.in_dim; ++c) g(0, c) = x_i[c] + x_j[c];

    double tau = train_mode ? temperature_at(epoch, sched) : sched.tau_final;
    ad::Tape<float> tape;
    TapeBind<float> tb(tape, const_cast<ParamStore<float>&>(bank.params));
    auto gr = gate_forward(tb, gate_prefix, cfg, tape.leaf(std::move(g)), tau, rng,
                           /*noise=*/train_mode, hard, /*train=*/false, nullptr);
    std::vector<double> probs(static_cast<size_t>(experts));
    for (int k = 0; k < experts; ++k) probs[static_cast<size_t>(k)] = gr.probs.val()(0, k);
    return probs;
}

std::vector<std::vector<double>> gate_probs_eval(const ExpertBank& bank,
                                                 const std::string& gate_prefix,
                                                 const MatrixF& gate_feats) {
    int experts = gate_prefix == "ngate" ? bank.meta.node_experts : bank.meta.edge_experts;
    GateConfig cfg = bank.meta.gate_config(experts);
    ad::Mat<float> g(static_cast<int>(gate_feats.rows), static_cast<int>(gate_feats.cols));
    std::copy(gate_feats.data.begin(), gate_feats.data.end(), g.a.begin());
    ad::Tape<float> tape;
    TapeBind<float> tb(tape, const_cast<ParamStore<float>&>(bank.params));
    auto gr = gate_forward(tb, gate_prefix, cfg, tape.leaf(std::move(g)), bank.meta.tau_final,
                           nullptr, false, false, false, nullptr);
    std::vector<std::vector<double>> out(gate_feats.rows,
                                         std::vector<double>(static_cast<size_t>(experts)));
    for (uint64_t r = 0; r < gate_feats.rows; ++r)
        for (int k = 0; k < experts; ++k)
            out[r][static_cast<size_t>(k)] = gr.probs.val()(static_cast<int>(r), k);
    return out;
}

ad::Mat<float> kmeans_centers(const std::vector<std::vector<float>>& points, int k,
                              uint64_t seed, int lloyd_iters) {
    if (points.empty()) throw DataError("kmeans: no points");
    int dim = static_cast<int>(points[0].size());
    int n = static_cast<int>(points.size());
    Rng rng(seed);

    auto sqdist = [&](const std::vector<float>& a, const float* b) {
        double s = 0.0;
        for (int c = 0; c < dim; ++c) {
            double d = static_cast<double>(a[static_cast<size_t>(c)]) - b[c];
            s += d * d;
        }
        return s;
    };

    ad::Mat<float> centers(k, dim);
    // k-means++ seeding: D^2-weighted draws.
    std::vector<double> d2(static_cast<size_t>(n), std::numeric_limits<double>::max());
    int first = rng.uniform_int(n);
    for (int c = 0; c < dim; ++c) centers(0, c) = points[static_cast<size_t>(first)][static_cast<size_t>(c)];
    for (int j = 1; j < k; ++j) {
        double total = 0.0;
        for (int i = 0; i < n; ++i) {
            d2[static_cast<size_t>(i)] = std::min(
                d2[static_cast<size_t>(i)], sqdist(points[static_cast<size_t>(i)], &centers(j - 1, 0)));
            total += d2[static_cast<size_t>(i)];
        }
        int pick = 0;
        if (total > 0.0) {
            double target = rng.uniform() * total;
            double acc = 0.0;
            for (int i = 0; i < n; ++i) {
                acc += d2[static_cast<size_t>(i)];
                if (acc >= target) {
                    pick = i;
                    break;
                }
            }
        } else {
            pick = rng.uniform_int(n);
        }
        for (int c = 0; c < dim; ++c) centers(j, c) = points[static_cast<size_t>(pick)][static_cast<size_t>(c)];
    }

    std::vector<int> assign(static_cast<size_t>(n), 0);
    for (int it = 0; it < lloyd_iters; ++it) {
        for (int i = 0; i < n; ++i) {
            double best = std::numeric_limits<double>::max();
            for (int j = 0; j < k; ++j) {
                double d = sqdist(points[static_cast<size_t>(i)], &centers(j, 0));
                if (d < best) {
                    best = d;
                    assign[static_cast<size_t>(i)] = j;
                }
            }
        }
        std::vector<std::vector<double>> sums(static_cast<size_t>(k),
                                              std::vector<double>(static_cast<size_t>(dim), 0.0));
        std::vector<int> counts(static_cast<size_t>(k), 0);
        for (int i = 0; i < n; ++i) {
            ++counts[static_cast<size_t>(assign[static_cast<size_t>(i)])];
            for (int c = 0; c < dim; ++c)
                sums[static_cast<size_t>(assign[static_cast<size_t>(i)])][static_cast<size_t>(c)] +=
                    points[static_cast<size_t>(i)][static_cast<size_t>(c)];
        }
        for (int j = 0; j < k; ++j) {
            if (counts[static_cast<size_t>(j)] == 0) continue;  // keep the seeded point
            for (int c = 0; c < dim; ++c)
                centers(j, c) = static_cast<float>(sums[static_cast<size_t>(j)][static_cast<size_t>(c)] /
                                                   counts[static_cast<size_t>(j)]);
        }
    }
    return centers;
}

std::vector<std::vector<float>> gate_latents(const ParamStore<float>& params,
                                             const std::string& gate_prefix,
                                             const GateConfig& cfg, const MatrixF& gate_feats) {
    ad::Mat<float> g(static_cast<int>(gate_feats.rows), static_cast<int>(gate_feats.cols));
    std::copy(gate_feats.data.begin(), gate_feats.data.end(), g.a.begin());
    ad::Tape<float> tape;
    TapeBind<float> tb(tape, const_cast<ParamStore<float>&>(params));
    using namespace ad;
    Var<float> h = relu(add_rowvec(matmul(tape.leaf(std::move(g)), tb.p(gate_prefix + ".l0.w")),
                                   tb.p(gate_prefix + ".l0.b")));
    Var<float> z = add_rowvec(matmul(h, tb.p(gate_prefix + ".l1.w")), tb.p(gate_prefix + ".l1.b"));
    std::vector<std::vector<float>> out(gate_feats.rows,
                                        std::vector<float>(static_cast<size_t>(cfg.latent)));
    for (uint64_t r = 0; r < gate_feats.rows; ++r)
        for (int c = 0; c < cfg.latent; ++c) out[r][static_cast<size_t>(c)] = z.val()(static_cast<int>(r), c);
    return out;
}

}  // namespace linkforge
