#include "linkforge/pretrain.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "linkforge/common.hpp"
#include "linkforge/eval.hpp"
#include "linkforge/rng.hpp"

namespace linkforge {

Shard make_shard(Graph g, const TrainConfig& cfg) {
    Shard s;
    s.hops = propagate_hops(g, cfg.hops, cfg.norm(), cfg.threads);
    s.edges = g.edge_list();
    s.g = std::move(g);
    return s;
}

std::vector<Shard> make_shards(const Graph& g, const TrainConfig& cfg) {
    std::vector<Shard> shards;
    if (cfg.pretrain_parts <= 1) {
        shards.push_back(make_shard(g, cfg));
        return shards;
    }
    Partitioning p = partition(g, cfg.pretrain_parts, cfg.seed);
    for (auto& part : p.parts) shards.push_back(make_shard(std::move(part), cfg));
    return shards;
}

StructProvider::StructProvider(const Graph& g, int k, bool mask_edge, bool use_sketch,
                               int precision, int signature_size, uint64_t seed)
    : g_(g), k_(k), mask_edge_(mask_edge) {
    if (use_sketch) sketches_.emplace(g, k, precision, signature_size, seed);
}

const std::vector<float>& StructProvider::features(int u, int v) {
    if (u > v) std::swap(u, v);
    int64_t key = static_cast<int64_t>(u) * g_.node_count() + v;
    auto it = cache_.find(key);
    if (it != cache_.end()) return it->second;
    StructuralFeature f = sketches_ ? approx_counts(*sketches_, u, v)
                                    : exact_counts(g_, u, v, k_, mask_edge_);
    return cache_.emplace(key, edge_feature_input(f)).first->second;
}

Branch branch_from_string(const std::string& s) {
    if (s == "node") return Branch::node;
    if (s == "edge") return Branch::edge;
    if (s == "both") return Branch::both;
    throw ConfigError("unknown branch: " + s);
}

namespace {

using ad::Mat;
using ad::Tape;
using ad::Var;

struct EdgeBatch {
    std::vector<EdgePair> pos;
    std::vector<EdgePair> neg;
    std::vector<EdgePair> all() const {
        std::vector<EdgePair> out = pos;
        out.insert(out.end(), neg.begin(), neg.end());
        return out;
    }
};

// Uniform positives (with replacement) plus uniform non-edge negatives.
EdgeBatch sample_batch(const Shard& shard, int batch_size, Rng& rng) {
    EdgeBatch b;
    int half = batch_size / 2;
    int m = static_cast<int>(shard.edges.size());
    if (m == 0) throw DataError("shard has no edges");
    for (int i = 0; i < half; ++i)
        b.pos.push_back(shard.edges[static_cast<size_t>(rng.uniform_int(m))]);
    int n = shard.g.node_count();
    int64_t attempts = 0;
    while (static_cast<int>(b.neg.size()) < half) {
        if (++attempts > 1000LL * batch_size)
            throw DataError("cannot sample negatives; shard is nearly complete");
        int u = rng.uniform_int(n);
        int v = rng.uniform_int(n);
        if (u == v || shard.g.has_edge(u, v)) continue;
        b.neg.push_back({std::min(u, v), std::max(u, v)});
    }
    return b;
}

Mat<float> gate_features_for(const Shard& shard, const std::vector<EdgePair>& edges,
                             GateInput mode) {
    int d = shard.g.feature_dim();
    Mat<float> g(static_cast<int>(edges.size()), d);
    for (size_t i = 0; i < edges.size(); ++i) {
        for (int c = 0; c < d; ++c) {
            float xi, xj;
            if (mode == GateInput::raw) {
                xi = shard.g.features().at(static_cast<uint64_t>(edges[i].u),
                                           static_cast<uint64_t>(c));
                xj = shard.g.features().at(static_cast<uint64_t>(edges[i].v),
                                           static_cast<uint64_t>(c));
            } else {
                double si = 0.0, sj = 0.0;
                for (int k = 0; k <= shard.hops.hops; ++k) {
                    si += shard.hops.slice(edges[i].u, k)[c];
                    sj += shard.hops.slice(edges[i].v, k)[c];
                }
                xi = static_cast<float>(si / (shard.hops.hops + 1));
                xj = static_cast<float>(sj / (shard.hops.hops + 1));
            }
            g(static_cast<int>(i), c) = xi + xj;
        }
    }
    return g;
}

// Pair-pooled node embeddings for a batch: encode the unique endpoints, then
// gather rows and take the elementwise product.
Var<float> node_pair_input(Tape<float>& tape, TapeBind<float>& tb, const EncoderConfig& enc_cfg,
                           const Shard& shard, const std::vector<EdgePair>& edges, bool train,
                           Rng* rng) {
    std::vector<int> uniq;
    std::unordered_map<int, int> local;
    auto local_id = [&](int v) {
        auto it = local.find(v);
        if (it != local.end()) return it->second;
        int id = static_cast<int>(uniq.size());
        uniq.push_back(v);
        local.emplace(v, id);
        return id;
    };
    std::vector<int> rows_i, rows_j;
    rows_i.reserve(edges.size());
    rows_j.reserve(edges.size());
    for (const auto& e : edges) {
        rows_i.push_back(local_id(e.u));
        rows_j.push_back(local_id(e.v));
    }

    int S = enc_cfg.tokens();
    Mat<float> tokens(static_cast<int>(uniq.size()) * S, enc_cfg.feat_dim);
    for (size_t i = 0; i < uniq.size(); ++i)
        for (int k = 0; k < S; ++k) {
            const float* src = shard.hops.slice(uniq[i], k);
            std::copy(src, src + enc_cfg.feat_dim, &tokens(static_cast<int>(i) * S + k, 0));
        }
    auto enc = encoder_forward(tb, "enc", enc_cfg, tape.leaf(std::move(tokens)), train, rng);
    Var<float> hi = ad::gather_rows(enc.h, rows_i);
    Var<float> hj = ad::gather_rows(enc.h, rows_j);
    return ad::elementwise_product(hi, hj);
}

Mat<float> struct_inputs_for(StructProvider& sp, const std::vector<EdgePair>& edges) {
    int fl = sp.feature_length();
    Mat<float> x(static_cast<int>(edges.size()), fl);
    for (size_t i = 0; i < edges.size(); ++i) {
        const auto& f = sp.features(edges[i].u, edges[i].v);
        std::copy(f.begin(), f.end(), &x(static_cast<int>(i), 0));
    }
    return x;
}

struct BranchDef {
    bool is_node = true;
    std::string gate_prefix;  // "ngate" / "egate"
    std::string score_prefix; // "nscore" / "escore"
    int experts = 0;
    EncoderConfig enc_cfg;
    MlpConfig score_cfg;
    GateConfig gate_cfg;
};

struct ForwardOut {
    Var<float> mixed;       // B x 1
    Var<float> gate_probs;  // B x experts
};

ForwardOut branch_forward(Tape<float>& tape, TapeBind<float>& tb, const BranchDef& def,
                          const Shard& shard, StructProvider* sp,
                          const std::vector<EdgePair>& edges, GateInput gate_input, double tau,
                          bool train, bool hard, Rng* rng) {
    Var<float> expert_input =
        def.is_node ? node_pair_input(tape, tb, def.enc_cfg, shard, edges, train, rng)
                    : tape.leaf(struct_inputs_for(*sp, edges));
    std::vector<Var<float>> cols;
    cols.reserve(static_cast<size_t>(def.experts));
    for (int k = 0; k < def.experts; ++k)
        cols.push_back(score_mlp_forward(tb, def.score_prefix + std::to_string(k), def.score_cfg,
                                         expert_input, train, rng));
    Var<float> logits = concat_columns(cols);
    Var<float> gfeat = tape.leaf(gate_features_for(shard, edges, gate_input));
    auto gate = gate_forward(tb, def.gate_prefix, def.gate_cfg, gfeat, tau, rng,
                             /*noise=*/train, hard, train, rng);
    return {mix_logits(gate.probs, logits), gate.probs};
}

// Eval-mode mixed logits for a fixed edge list (probe scoring).
std::vector<double> branch_eval_scores(ParamStore<float>& params, const BranchDef& def,
                                       const Shard& shard, StructProvider* sp,
                                       const std::vector<EdgePair>& edges, GateInput gate_input,
                                       double tau_final) {
    Tape<float> tape;
    TapeBind<float> tb(tape, params);
    auto out = branch_forward(tape, tb, def, shard, sp, edges, gate_input, tau_final,
                              /*train=*/false, /*hard=*/false, nullptr);
    std::vector<double> scores(edges.size());
    for (size_t i = 0; i < edges.size(); ++i)
        scores[i] = static_cast<double>(out.mixed.val()(static_cast<int>(i), 0));
    return scores;
}

struct ProbeSet {
    std::vector<size_t> shard_of;
    std::vector<EdgePair> pos, neg;  // parallel to shard_of
};

ProbeSet build_probe(const std::vector<Shard>& shards, int probe_edges, Rng& rng) {
    ProbeSet p;
    int per_shard = std::max(4, probe_edges / static_cast<int>(shards.size()));
    for (size_t s = 0; s < shards.size(); ++s) {
        int m = static_cast<int>(shards[s].edges.size());
        int take = std::min(per_shard, m);
        for (int i = 0; i < take; ++i) {
            p.shard_of.push_back(s);
            p.pos.push_back(shards[s].edges[static_cast<size_t>(rng.uniform_int(m))]);
            int n = shards[s].g.node_count();
            while (true) {
                int u = rng.uniform_int(n), v = rng.uniform_int(n);
                if (u == v || shards[s].g.has_edge(u, v)) continue;
                p.neg.push_back({std::min(u, v), std::max(u, v)});
                break;
            }
        }
    }
    return p;
}

struct ProbeEval {
    double bce = 0.0;
    double auc = 0.0;
};

ProbeEval probe_eval(ParamStore<float>& params, const BranchDef& def,
                     const std::vector<Shard>& shards, std::vector<StructProvider>& sps,
                     const ProbeSet& probe, GateInput gate_input, double tau_final) {
    std::vector<double> pos_scores, neg_scores;
    for (size_t s = 0; s < shards.size(); ++s) {
        std::vector<EdgePair> pos, neg;
        for (size_t i = 0; i < probe.shard_of.size(); ++i)
            if (probe.shard_of[i] == s) {
                pos.push_back(probe.pos[i]);
                neg.push_back(probe.neg[i]);
            }
        if (pos.empty()) continue;
        StructProvider* sp = def.is_node ? nullptr : &sps[s];
        auto ps = branch_eval_scores(params, def, shards[s], sp, pos, gate_input, tau_final);
        auto ns = branch_eval_scores(params, def, shards[s], sp, neg, gate_input, tau_final);
        pos_scores.insert(pos_scores.end(), ps.begin(), ps.end());
        neg_scores.insert(neg_scores.end(), ns.begin(), ns.end());
    }
    ProbeEval out;
    double total = 0.0;
    for (double s : pos_scores) total += ad::softplus_stable(-s);
    for (double s : neg_scores) total += ad::softplus_stable(s);
    out.bce = total / static_cast<double>(pos_scores.size() + neg_scores.size());
    out.auc = roc_auc(pos_scores, neg_scores);
    return out;
}

// Places the gate's cluster centers with k-means++ over warmup gate latents,
// so every expert owns a populated region before the first step.
void seed_gate_centers(ParamStore<float>& params, const BranchDef& def,
                       const std::vector<Shard>& shards, GateInput gate_input, uint64_t seed) {
    Rng rng(mix64(seed ^ 0xce11u));
    std::vector<std::vector<float>> latents;
    size_t budget = 10000;
    size_t per_shard = std::max<size_t>(16, budget / shards.size());
    for (const auto& shard : shards) {
        size_t take = std::min(per_shard, shard.edges.size());
        std::vector<EdgePair> sample;
        for (size_t i = 0; i < take; ++i)
            sample.push_back(
                shard.edges[static_cast<size_t>(rng.uniform_int(static_cast<int>(shard.edges.size())))]);
        Mat<float> gf = gate_features_for(shard, sample, gate_input);
        MatrixF gfm(static_cast<uint64_t>(gf.rows), static_cast<uint64_t>(gf.cols));
        std::copy(gf.a.begin(), gf.a.end(), gfm.data.begin());
        auto zs = gate_latents(params, def.gate_prefix, def.gate_cfg, gfm);
        latents.insert(latents.end(), zs.begin(), zs.end());
    }
    auto centers = kmeans_centers(latents, def.gate_cfg.experts, mix64(seed ^ 0x5eedu));
    params.entry(def.gate_prefix + ".centers").value = centers;
}

void train_branch(ParamStore<float>& params, const BranchDef& def,
                  const std::vector<Shard>& shards, std::vector<StructProvider>& sps,
                  const TrainConfig& cfg, std::vector<double>& probe_bce, double& probe_auc,
                  std::ofstream* log) {
    TemperatureSchedule sched = cfg.temperature_schedule();
    int64_t total_steps = static_cast<int64_t>(cfg.epochs) *
                          static_cast<int64_t>(shards.size()) * cfg.batches_per_shard;
    // Table-scale warmup can exceed a small run; the ramp is clamped so the
    // decay phase still exists.
    ScheduleConfig lr_sched{cfg.peak_lr, cfg.end_lr, std::min<int64_t>(cfg.warmup, total_steps - 1),
                            total_steps};
    GateInput gate_input = cfg.gate_input == "raw" ? GateInput::raw : GateInput::hop_mean;

    uint64_t branch_tag = def.is_node ? 0x6e6f6465u : 0x65646765u;
    Rng rng(mix64(cfg.seed ^ branch_tag));
    Rng probe_rng(mix64(cfg.seed ^ branch_tag ^ 0x9e0beu));
    ProbeSet probe = build_probe(shards, cfg.probe_edges, probe_rng);

    seed_gate_centers(params, def, shards, gate_input, cfg.seed ^ branch_tag);

    probe_bce.push_back(
        probe_eval(params, def, shards, sps, probe, gate_input, cfg.tau_final).bce);

    int64_t step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        double tau = temperature_at(epoch, sched);
        for (size_t s = 0; s < shards.size(); ++s) {
            for (int b = 0; b < cfg.batches_per_shard; ++b) {
                EdgeBatch batch = sample_batch(shards[s], cfg.batch_size, rng);
                std::vector<EdgePair> edges = batch.all();

                Tape<float> tape;
                TapeBind<float> tb(tape, params);
                StructProvider* sp = def.is_node ? nullptr : &sps[s];
                auto out = branch_forward(tape, tb, def, shards[s], sp, edges, gate_input, tau,
                                          /*train=*/true, cfg.hard_routing, &rng);
                int np = static_cast<int>(batch.pos.size());
                Var<float> loss = ad::bce_loss(ad::slice_rows(out.mixed, 0, np),
                                               ad::slice_rows(out.mixed, np, out.mixed.rows()));
                double loss_val = static_cast<double>(loss.val()(0, 0));
                if (!std::isfinite(loss_val))
                    throw ComputeError("non-finite loss at step " + std::to_string(step));
                params.zero_grads();
                tape.backward(loss);
                tb.harvest();
                double lr = lr_at(step, lr_sched);
                adam_step(params, lr);

                if (log) {
                    std::ostringstream line;
                    line.precision(8);
                    line << step << '\t' << (def.is_node ? "node" : "edge") << '\t' << loss_val
                         << '\t' << lr << '\t' << tau;
                    const auto& probs = out.gate_probs.val();
                    for (int k = 0; k < def.experts; ++k) {
                        double load = 0.0;
                        for (int r = 0; r < probs.rows; ++r) load += probs(r, k);
                        line << '\t' << load / probs.rows;
                    }
                    *log << line.str() << '\n';
                }
                ++step;
            }
        }
        probe_bce.push_back(
            probe_eval(params, def, shards, sps, probe, gate_input, cfg.tau_final).bce);
    }
    probe_auc = probe_eval(params, def, shards, sps, probe, gate_input, cfg.tau_final).auc;
}

}  // namespace

PretrainResult pretrain_bank(const std::vector<Shard>& shards, const TrainConfig& cfg,
                             Branch branch, const std::string& log_path) {
    cfg.validate();
    if (shards.empty()) throw DataError("pretrain: empty shard list");
    int d = shards[0].g.feature_dim();
    for (const auto& s : shards)
        if (s.g.feature_dim() != d) throw DataError("pretrain: shards disagree on feature width");

    PretrainResult res;
    BankMeta& meta = res.bank.meta;
    meta.hops = cfg.hops;
    meta.struct_k = cfg.structural_k;
    meta.feat_dim = d;
    meta.width = cfg.hidden;
    meta.enc_layers = cfg.encoder_layers;
    meta.node_experts = branch == Branch::edge ? 0 : cfg.experts_per_branch;
    meta.edge_experts = branch == Branch::node ? 0 : cfg.experts_per_branch;
    meta.score_hidden = cfg.hidden;
    meta.score_hidden_layers = cfg.score_hidden_layers;
    meta.gate_hidden = cfg.gate_hidden;
    meta.gate_latent = cfg.gate_latent;
    meta.norm_mode = cfg.norm();
    meta.gate_input = cfg.gate_input == "raw" ? GateInput::raw : GateInput::hop_mean;
    meta.tau_final = cfg.tau_final;
    meta.dropout = cfg.dropout;
    meta.mask_edge = cfg.mask_edge;
    meta.fingerprint = fnv1a64_str(cfg.serialize(), fnv1a64_str(std::to_string(cfg.seed)));

    std::ofstream log;
    if (!log_path.empty()) {
        log.open(log_path, std::ios::trunc);
        if (!log) throw DataError("cannot open training log: " + log_path);
        log << "step\tbranch\tloss\tlr\ttau\texpert_loads\n";
    }

    std::vector<StructProvider> sps;
    if (branch != Branch::node)
        for (const auto& s : shards)
            sps.emplace_back(s.g, cfg.structural_k, cfg.mask_edge, cfg.use_sketch_counts,
                             cfg.sketch_precision, cfg.sketch_hashes, cfg.seed);

    if (branch != Branch::edge) {
        ParamStore<float> node_params;
        node_params.rng_seed = cfg.seed;
        Rng init_rng(mix64(cfg.seed ^ 0x1217u));
        BranchDef def;
        def.is_node = true;
        def.gate_prefix = "ngate";
        def.score_prefix = "nscore";
        def.experts = cfg.experts_per_branch;
        def.enc_cfg = meta.encoder_config();
        def.score_cfg = meta.node_score_config();
        def.gate_cfg = meta.gate_config(cfg.experts_per_branch);
        init_encoder(node_params, "enc", def.enc_cfg, init_rng);
        for (int k = 0; k < def.experts; ++k)
            init_score_mlp(node_params, "nscore" + std::to_string(k), def.score_cfg, init_rng);
        init_gate(node_params, "ngate", def.gate_cfg, init_rng);

        std::vector<StructProvider> none;
        train_branch(node_params, def, shards, none, cfg, res.node_probe_bce,
                     res.node_probe_auc, log_path.empty() ? nullptr : &log);
        for (auto& e : node_params.entries())
            res.bank.params.add(e.name, std::move(e.value));
    }

    if (branch != Branch::node) {
        ParamStore<float> edge_params;
        edge_params.rng_seed = cfg.seed;
        Rng init_rng(mix64(cfg.seed ^ 0x3941u));
        BranchDef def;
        def.is_node = false;
        def.gate_prefix = "egate";
        def.score_prefix = "escore";
        def.experts = cfg.experts_per_branch;
        def.score_cfg = meta.edge_score_config();
        def.gate_cfg = meta.gate_config(cfg.experts_per_branch);
        for (int k = 0; k < def.experts; ++k)
            init_score_mlp(edge_params, "escore" + std::to_string(k), def.score_cfg, init_rng);
        init_gate(edge_params, "egate", def.gate_cfg, init_rng);

        train_branch(edge_params, def, shards, sps, cfg, res.edge_probe_bce, res.edge_probe_auc,
                     log_path.empty() ? nullptr : &log);
        for (auto& e : edge_params.entries())
            res.bank.params.add(e.name, std::move(e.value));
    }

    res.bank.params.rng_seed = cfg.seed;
    return res;
}

std::vector<double> expert_load_fractions(const ExpertBank& bank, const std::string& gate_prefix,
                                          const std::vector<Shard>& shards) {
    int experts = gate_prefix == "ngate" ? bank.meta.node_experts : bank.meta.edge_experts;
    std::vector<double> counts(static_cast<size_t>(experts), 0.0);
    size_t total = 0;
    for (const auto& shard : shards) {
        MatrixF gf(shard.edges.size(), static_cast<uint64_t>(shard.g.feature_dim()));
        Mat<float> gfm = gate_features_for(shard, shard.edges, bank.meta.gate_input);
        std::copy(gfm.a.begin(), gfm.a.end(), gf.data.begin());
        auto probs = gate_probs_eval(bank, gate_prefix, gf);
        for (const auto& row : probs) {
            int best = 0;
            for (int k = 1; k < experts; ++k)
                if (row[static_cast<size_t>(k)] > row[static_cast<size_t>(best)]) best = k;
            counts[static_cast<size_t>(best)] += 1.0;
            ++total;
        }
    }
    for (auto& c : counts) c /= static_cast<double>(std::max<size_t>(1, total));
    return counts;
}

FusionReport run_fusion_study(const Graph& g, int steps, uint64_t seed, const TrainConfig& cfg) {
    if (steps < 10) throw ConfigError("fusion study needs at least 10 steps");
    TrainConfig c = cfg;
    c.validate();

    Shard shard = make_shard(g, c);
    StructProvider sp(shard.g, c.structural_k, c.mask_edge, false, c.sketch_precision,
                      c.sketch_hashes, seed);

    EncoderConfig enc_cfg{g.feature_dim(), c.hops, c.hidden, c.encoder_layers, c.dropout};
    MlpConfig node_mlp{c.hidden, c.hidden, c.score_hidden_layers, c.dropout};
    MlpConfig fused_mlp{c.hidden + sp.feature_length(), c.hidden, c.score_hidden_layers,
                        c.dropout};

    // Identical encoder initialization bytes in both runs.
    ParamStore<float> enc_template;
    Rng enc_rng(mix64(seed ^ 0xfaceu));
    init_encoder(enc_template, "enc", enc_cfg, enc_rng);

    // Shared per-step edge batches keep the two runs paired.
    Rng batch_rng(mix64(seed ^ 0xba7c4u));
    std::vector<EdgeBatch> batches;
    batches.reserve(static_cast<size_t>(steps));
    for (int i = 0; i < steps; ++i) batches.push_back(sample_batch(shard, c.batch_size, batch_rng));

    FusionReport report;
    for (int fused = 0; fused < 2; ++fused) {
        ParamStore<float> params;
        for (const auto& e : enc_template.entries()) {
            ad::Mat<float> copy = e.value;
            params.add(e.name, std::move(copy));
        }
        Rng mlp_rng(mix64(seed ^ 0x5c04eu));
        init_score_mlp(params, "score", fused ? fused_mlp : node_mlp, mlp_rng);
        Rng rng(mix64(seed ^ (fused ? 0xf15e1u : 0x0a10eu)));

        auto& losses = fused ? report.fused_loss : report.node_only_loss;
        auto& grads = fused ? report.fused_encoder_grad : report.node_only_encoder_grad;
        for (int step = 0; step < steps; ++step) {
            const EdgeBatch& batch = batches[static_cast<size_t>(step)];
            std::vector<EdgePair> edges = batch.all();

            Tape<float> tape;
            TapeBind<float> tb(tape, params);
            Var<float> pair = node_pair_input(tape, tb, enc_cfg, shard, edges, true, &rng);
            Var<float> input = pair;
            if (fused) input = ad::concat_cols(pair, tape.leaf(struct_inputs_for(sp, edges)));
            Var<float> logits = score_mlp_forward(tb, "score", fused ? fused_mlp : node_mlp,
                                                  input, true, &rng);
            int np = static_cast<int>(batch.pos.size());
            Var<float> loss = ad::bce_loss(ad::slice_rows(logits, 0, np),
                                           ad::slice_rows(logits, np, logits.rows()));
            losses.push_back(static_cast<double>(loss.val()(0, 0)));
            params.zero_grads();
            tape.backward(loss);
            tb.harvest();
            double sq = 0.0;
            for (const auto& e : params.entries())
                if (e.name.rfind("enc.", 0) == 0)
                    for (float gv : e.grad.a) sq += static_cast<double>(gv) * gv;
            grads.push_back(std::sqrt(sq));
            adam_step(params, c.peak_lr);
        }
    }
    return report;
}

}  // namespace linkforge
