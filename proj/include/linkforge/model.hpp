#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "linkforge/autodiff.hpp"
#include "linkforge/hop.hpp"
#include "linkforge/matrix_io.hpp"
#include "linkforge/optim.hpp"
#include "linkforge/rng.hpp"
#include "linkforge/sketch.hpp"

namespace linkforge {

// ---------------------------------------------------------------------------
// Shapes
// ---------------------------------------------------------------------------

struct EncoderConfig {
    int feat_dim = 0;  // d
    int hops = 3;      // K; the encoder consumes K+1 tokens per node
    int width = 64;    // F
    int layers = 2;    // transformer layers over the hop tokens
    double dropout = 0.1;

    int tokens() const { return hops + 1; }
};

struct MlpConfig {
    int in_dim = 0;
    int hidden = 64;
    int hidden_layers = 3;
    double dropout = 0.1;
};

struct GateConfig {
    int in_dim = 0;   // gate feature width (node feature width)
    int hidden = 64;  // F_g
    int latent = 32;
    int experts = 4;
    double dropout = 0.1;
};

// ---------------------------------------------------------------------------
// Parameter initialization (Glorot-uniform weights, zero biases)
// ---------------------------------------------------------------------------

template <typename Real>
ad::Mat<Real> glorot(int rows, int cols, Rng& rng) {
    ad::Mat<Real> m(rows, cols);
    double limit = std::sqrt(6.0 / (rows + cols));
    for (auto& v : m.a) v = static_cast<Real>((rng.uniform() * 2.0 - 1.0) * limit);
    return m;
}

template <typename Real>
void init_encoder(ParamStore<Real>& ps, const std::string& prefix, const EncoderConfig& cfg,
                  Rng& rng) {
    int F = cfg.width;
    ps.add(prefix + ".in.w", glorot<Real>(cfg.feat_dim, F, rng));
    ps.add(prefix + ".in.b", ad::Mat<Real>(1, F));
    for (int l = 0; l < cfg.layers; ++l) {
        std::string lp = prefix + ".l" + std::to_string(l);
        ps.add(lp + ".ln1.g", ad::Mat<Real>::full(1, F, Real(1)));
        ps.add(lp + ".ln1.b", ad::Mat<Real>(1, F));
        for (const char* w : {".attn.wq", ".attn.wk", ".attn.wv", ".attn.wo"})
            ps.add(lp + w, glorot<Real>(F, F, rng));
        for (const char* b : {".attn.bq", ".attn.bk", ".attn.bv", ".attn.bo"})
            ps.add(lp + b, ad::Mat<Real>(1, F));
        ps.add(lp + ".ln2.g", ad::Mat<Real>::full(1, F, Real(1)));
        ps.add(lp + ".ln2.b", ad::Mat<Real>(1, F));
        ps.add(lp + ".ffn.w1", glorot<Real>(F, 2 * F, rng));
        ps.add(lp + ".ffn.b1", ad::Mat<Real>(1, 2 * F));
        ps.add(lp + ".ffn.w2", glorot<Real>(2 * F, F, rng));
        ps.add(lp + ".ffn.b2", ad::Mat<Real>(1, F));
    }
    ps.add(prefix + ".out.g", ad::Mat<Real>::full(1, F, Real(1)));
    ps.add(prefix + ".out.b", ad::Mat<Real>(1, F));
    ps.add(prefix + ".readout.q", glorot<Real>(1, F, rng));
}

template <typename Real>
void init_score_mlp(ParamStore<Real>& ps, const std::string& prefix, const MlpConfig& cfg,
                    Rng& rng) {
    int in = cfg.in_dim;
    for (int l = 0; l < cfg.hidden_layers; ++l) {
        std::string lp = prefix + ".l" + std::to_string(l);
        ps.add(lp + ".w", glorot<Real>(in, cfg.hidden, rng));
        ps.add(lp + ".b", ad::Mat<Real>(1, cfg.hidden));
        in = cfg.hidden;
    }
    ps.add(prefix + ".out.w", glorot<Real>(in, 1, rng));
    ps.add(prefix + ".out.b", ad::Mat<Real>(1, 1));
}

template <typename Real>
void init_gate(ParamStore<Real>& ps, const std::string& prefix, const GateConfig& cfg, Rng& rng) {
    ps.add(prefix + ".l0.w", glorot<Real>(cfg.in_dim, cfg.hidden, rng));
    ps.add(prefix + ".l0.b", ad::Mat<Real>(1, cfg.hidden));
    ps.add(prefix + ".l1.w", glorot<Real>(cfg.hidden, cfg.latent, rng));
    ps.add(prefix + ".l1.b", ad::Mat<Real>(1, cfg.latent));
    // Centers are re-seeded from warmup gate latents before training; see
    // init_centers_from_latents.
    ps.add(prefix + ".centers", glorot<Real>(cfg.experts, cfg.latent, rng));
}

// ---------------------------------------------------------------------------
// Tape binding: parameters enter a tape once per forward build; harvest()
// moves accumulated tape gradients back into the store.
// ---------------------------------------------------------------------------

template <typename Real>
struct TapeBind {
    ad::Tape<Real>& tape;
    ParamStore<Real>& store;
    std::unordered_map<std::string, int> ids;

    TapeBind(ad::Tape<Real>& t, ParamStore<Real>& s) : tape(t), store(s) {}

    ad::Var<Real> p(const std::string& name) {
        auto it = ids.find(name);
        if (it != ids.end()) return {&tape, it->second};
        ad::Var<Real> v = tape.leaf(store.entry(name).value);
        ids.emplace(name, v.id);
        return v;
    }

    void harvest() {
        for (const auto& [name, id] : ids) {
            auto& g = store.entry(name).grad;
            const auto& tg = tape.grad(id);
            for (size_t i = 0; i < g.size(); ++i) g.a[i] += tg.a[i];
        }
    }
};

// ---------------------------------------------------------------------------
// Forward passes
// ---------------------------------------------------------------------------

template <typename Real>
struct EncodeResult {
    ad::Var<Real> h;        // B x F node embeddings
    ad::Var<Real> readout;  // B x (K+1) attention over hop tokens (rows sum to 1)
};

// tokens: (B*(K+1)) x d hop slices stacked per node. Self-attention runs over
// each node's K+1 tokens; an attention readout pools them into one vector.
template <typename Real>
EncodeResult<Real> encoder_forward(TapeBind<Real>& tb, const std::string& prefix,
                                   const EncoderConfig& cfg, ad::Var<Real> tokens, bool train,
                                   Rng* drop_rng) {
    using namespace ad;
    int S = cfg.tokens();
    if (tokens.cols() != cfg.feat_dim || tokens.rows() % S != 0)
        throw ComputeError("encoder: token shape mismatch");
    if (train && drop_rng == nullptr) throw ComputeError("encoder: train mode needs rng");

    Var<Real> x = add_rowvec(matmul(tokens, tb.p(prefix + ".in.w")), tb.p(prefix + ".in.b"));
    double att_scale = 1.0 / std::sqrt(static_cast<double>(cfg.width));
    for (int l = 0; l < cfg.layers; ++l) {
        std::string lp = prefix + ".l" + std::to_string(l);
        Var<Real> h = layer_norm_rows(x, tb.p(lp + ".ln1.g"), tb.p(lp + ".ln1.b"));
        Var<Real> q = add_rowvec(matmul(h, tb.p(lp + ".attn.wq")), tb.p(lp + ".attn.bq"));
        Var<Real> k = add_rowvec(matmul(h, tb.p(lp + ".attn.wk")), tb.p(lp + ".attn.bk"));
        Var<Real> v = add_rowvec(matmul(h, tb.p(lp + ".attn.wv")), tb.p(lp + ".attn.bv"));
        Var<Real> att = softmax_rows(block_qk(q, k, S, att_scale));
        Var<Real> o = block_av(att, v, S);
        o = add_rowvec(matmul(o, tb.p(lp + ".attn.wo")), tb.p(lp + ".attn.bo"));
        o = dropout(o, cfg.dropout, drop_rng, train);
        x = add(x, o);
        Var<Real> f = layer_norm_rows(x, tb.p(lp + ".ln2.g"), tb.p(lp + ".ln2.b"));
        Var<Real> f1 = relu(add_rowvec(matmul(f, tb.p(lp + ".ffn.w1")), tb.p(lp + ".ffn.b1")));
        f1 = dropout(f1, cfg.dropout, drop_rng, train);
        Var<Real> f2 = add_rowvec(matmul(f1, tb.p(lp + ".ffn.w2")), tb.p(lp + ".ffn.b2"));
        x = add(x, f2);
    }
    x = layer_norm_rows(x, tb.p(prefix + ".out.g"), tb.p(prefix + ".out.b"));
    Var<Real> alpha = softmax_rows(block_scores(x, tb.p(prefix + ".readout.q"), S));
    Var<Real> h = block_mix(alpha, x);
    return {h, alpha};
}

template <typename Real>
ad::Var<Real> score_mlp_forward(TapeBind<Real>& tb, const std::string& prefix,
                                const MlpConfig& cfg, ad::Var<Real> x, bool train,
                                Rng* drop_rng) {
    using namespace ad;
    if (x.cols() != cfg.in_dim) throw ComputeError("score mlp: input width mismatch");
    if (train && drop_rng == nullptr) throw ComputeError("score mlp: train mode needs rng");
    Var<Real> h = x;
    for (int l = 0; l < cfg.hidden_layers; ++l) {
        std::string lp = prefix + ".l" + std::to_string(l);
        h = relu(add_rowvec(matmul(h, tb.p(lp + ".w")), tb.p(lp + ".b")));
        h = dropout(h, cfg.dropout, drop_rng, train);
    }
    return add_rowvec(matmul(h, tb.p(prefix + ".out.w")), tb.p(prefix + ".out.b"));
}

template <typename Real>
struct GateResult {
    ad::Var<Real> probs;   // B x K expert probabilities (rows sum to 1)
    ad::Var<Real> scores;  // B x K negative distances to the centers
};

// Cluster gate: latent = MLP(gate feature), expert weight = negative
// euclidean distance to each learnable center, sampled via gumbel-softmax.
template <typename Real>
GateResult<Real> gate_forward(TapeBind<Real>& tb, const std::string& prefix,
                              const GateConfig& cfg, ad::Var<Real> gfeat, double tau,
                              Rng* gumbel_rng, bool noise, bool hard, bool train,
                              Rng* drop_rng) {
    using namespace ad;
    if (gfeat.cols() != cfg.in_dim) throw ComputeError("gate: feature width mismatch");
    if (train && drop_rng == nullptr) throw ComputeError("gate: train mode needs rng");
    Var<Real> h = relu(add_rowvec(matmul(gfeat, tb.p(prefix + ".l0.w")), tb.p(prefix + ".l0.b")));
    h = dropout(h, cfg.dropout, drop_rng, train);
    Var<Real> z = add_rowvec(matmul(h, tb.p(prefix + ".l1.w")), tb.p(prefix + ".l1.b"));
    Var<Real> w = neg_pairwise_dist(z, tb.p(prefix + ".centers"));
    Var<Real> probs = gumbel_softmax_rows(w, tau, gumbel_rng, noise, hard);
    return {probs, w};
}

// Expected logit under the gate: sum_k probs[:,k] * logits[:,k].
template <typename Real>
ad::Var<Real> mix_logits(ad::Var<Real> probs, ad::Var<Real> logit_columns) {
    if (probs.rows() != logit_columns.rows() || probs.cols() != logit_columns.cols())
        throw ComputeError("mix_logits: shape mismatch");
    return ad::row_sum(ad::elementwise_product(probs, logit_columns));
}

template <typename Real>
ad::Var<Real> concat_columns(std::vector<ad::Var<Real>> cols) {
    if (cols.empty()) throw ComputeError("concat_columns: empty");
    ad::Var<Real> out = cols[0];
    for (size_t i = 1; i < cols.size(); ++i) out = ad::concat_cols(out, cols[i]);
    return out;
}

// ---------------------------------------------------------------------------
// Frozen pretrained artifact
// ---------------------------------------------------------------------------

enum class GateInput { raw, hop_mean };

struct BankMeta {
    uint32_t version = 1;
    int hops = 3;          // K (node branch)
    int struct_k = 2;      // receptive field (edge branch)
    int feat_dim = 0;      // d
    int width = 64;        // F
    int enc_layers = 2;
    int node_experts = 4;  // m
    int edge_experts = 4;  // n
    int score_hidden = 64;
    int score_hidden_layers = 3;
    int gate_hidden = 64;
    int gate_latent = 32;
    NormMode norm_mode = NormMode::symmetric;
    GateInput gate_input = GateInput::raw;
    double tau_final = 0.1;
    double dropout = 0.1;
    bool mask_edge = false;
    uint64_t fingerprint = 0;

    std::string serialize() const;
    static BankMeta parse(const std::string& text);

    EncoderConfig encoder_config() const {
        return {feat_dim, hops, width, enc_layers, dropout};
    }
    MlpConfig node_score_config() const {
        return {width, score_hidden, score_hidden_layers, dropout};
    }
    MlpConfig edge_score_config() const {
        return {struct_k * struct_k + 2 * struct_k, score_hidden, score_hidden_layers, dropout};
    }
    GateConfig gate_config(int experts) const {
        return {feat_dim, gate_hidden, gate_latent, experts, dropout};
    }
};

struct ExpertBank {
    BankMeta meta;
    ParamStore<float> params;

    // Expert column order used everywhere: node experts then edge experts.
    std::vector<std::string> expert_ids() const;
};

void save_bank(const std::string& path, const ExpertBank& bank);
ExpertBank load_bank(const std::string& path);

// Structural counts are log1p-compressed before scoring; zero counts map to
// zero so an empty profile still exercises only the bias path.
std::vector<float> edge_feature_input(const StructuralFeature& f);

// ---------------------------------------------------------------------------
// Eval-mode entry points (no dropout, no gumbel noise, parameters untouched)
// ---------------------------------------------------------------------------

// One embedding per node from its hop-feature stack. Deterministic in eval
// mode; train mode applies dropout driven by rng.
MatrixF encode_nodes(const ExpertBank& bank, const HopFeatures& hops, bool train_mode = false,
                     Rng* rng = nullptr);

double node_expert_logit(const ExpertBank& bank, int expert, const float* h_i, const float* h_j);
double edge_expert_logit(const ExpertBank& bank, int expert, const StructuralFeature& f);

// Eq. of the cluster gate applied to one edge: probabilities over the branch's
// experts. Train mode draws gumbel noise at temperature_at(epoch); eval mode
// is the noise-free softmax at tau_final.
std::vector<double> gate_edge(const ExpertBank& bank, const std::string& gate_prefix,
                              const float* x_i, const float* x_j, int64_t epoch,
                              const TemperatureSchedule& sched, Rng* rng, bool train_mode,
                              bool hard = false);

// Gate probabilities for a batch of edges in eval mode (tau_final, no noise).
std::vector<std::vector<double>> gate_probs_eval(const ExpertBank& bank,
                                                 const std::string& gate_prefix,
                                                 const MatrixF& gate_feats);

// k-means++ seeding plus a few Lloyd iterations; used to place gate centers
// on warmup gate latents so no expert starts unreachable.
ad::Mat<float> kmeans_centers(const std::vector<std::vector<float>>& points, int k,
                              uint64_t seed, int lloyd_iters = 10);

// Gate latents for rows of gate features, eval mode (float path).
std::vector<std::vector<float>> gate_latents(const ParamStore<float>& params,
                                             const std::string& gate_prefix,
                                             const GateConfig& cfg, const MatrixF& gate_feats);

}  // namespace linkforge
