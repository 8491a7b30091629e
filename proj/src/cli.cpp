#include "linkforge/cli.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <unordered_map>

#include "CLI11.hpp"
#include "linkforge/adapt.hpp"
#include "linkforge/common.hpp"
#include "linkforge/config.hpp"
#include "linkforge/eval.hpp"
#include "linkforge/pretrain.hpp"
#include "linkforge/synthetic.hpp"

namespace linkforge {

namespace fs = std::filesystem;

namespace {

// Exclusive lock file in the output directory; refuses concurrent runs.
class DirLock {
  public:
    explicit DirLock(const std::string& dir) {
        fs::create_directories(dir);
        path_ = (fs::path(dir) / ".lock").string();
        int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
        if (fd < 0)
            throw ComputeError("output directory is locked by another run: " + path_);
        ::close(fd);
    }
    ~DirLock() {
        if (!path_.empty()) ::unlink(path_.c_str());
    }
    DirLock(const DirLock&) = delete;
    DirLock& operator=(const DirLock&) = delete;

  private:
    std::string path_;
};

struct CommonOpts {
    std::string config_path;
    std::string out_dir = "out";
    int64_t seed = -1;
    int threads = 0;
    std::string branch = "both";
    bool mask_edge = false;
    bool hard_routing = false;
};

void add_common(CLI::App* cmd, CommonOpts& o, bool wants_branch = false) {
    cmd->add_option("--config", o.config_path, "config file (key = value lines)");
    cmd->add_option("--out-dir", o.out_dir, "output directory");
    cmd->add_option("--seed", o.seed, "override the config seed");
    cmd->add_option("--threads", o.threads,
                    "worker threads (falls back to LINKFORGE_THREADS, then config)");
    if (wants_branch)
        cmd->add_option("--branch", o.branch, "node, edge, or both")
            ->check(CLI::IsMember({"node", "edge", "both"}));
    cmd->add_flag("--mask-edge", o.mask_edge, "mask the query edge in structural counts");
    cmd->add_flag("--hard-routing", o.hard_routing, "straight-through hard expert routing");
}

TrainConfig resolve_config(const CommonOpts& o) {
    TrainConfig cfg;
    if (!o.config_path.empty()) cfg = TrainConfig::load(o.config_path);
    if (o.seed >= 0) cfg.seed = static_cast<uint64_t>(o.seed);
    if (o.threads > 0) {
        cfg.threads = o.threads;
    } else if (const char* env = std::getenv("LINKFORGE_THREADS")) {
        try {
            cfg.threads = std::max(1, std::stoi(env));
        } catch (const std::exception&) {
            throw ConfigError("LINKFORGE_THREADS is not an integer");
        }
    }
    if (o.mask_edge) cfg.mask_edge = true;
    if (o.hard_routing) cfg.hard_routing = true;
    cfg.validate();
    return cfg;
}

void summary(const std::string& cmd, const std::vector<std::pair<std::string, std::string>>& kv) {
    std::ostringstream os;
    os << "RESULT cmd=" << cmd << " status=ok";
    for (const auto& [k, v] : kv) os << " " << k << "=" << v;
    std::cout << os.str() << std::endl;
}

std::string fmt(double v) {
    std::ostringstream os;
    os.precision(6);
    os << v;
    return os.str();
}

// ---------------------------------------------------------------------------
// preprocess
// ---------------------------------------------------------------------------

int cmd_preprocess(const CommonOpts& o, const std::string& edges_path,
                   const std::string& features_path) {
    TrainConfig cfg = resolve_config(o);
    DirLock lock(o.out_dir);
    fs::path out(o.out_dir);

    std::string manifest = "edges_hash " + std::to_string(fnv1a64_file(edges_path)) + "\n" +
                           "features_hash " + std::to_string(fnv1a64_file(features_path)) + "\n" +
                           "config_hash " + std::to_string(cfg.fingerprint()) + "\n";
    std::vector<std::string> outputs = {"split.bin", "structs_train.lfmx",
                                        "structs_valid_pos.lfmx", "structs_valid_neg.lfmx",
                                        "structs_test_pos.lfmx", "structs_test_neg.lfmx"};
    for (int k = 0; k <= cfg.hops; ++k) outputs.push_back(hop_file_name("feat", k));

    fs::path manifest_path = out / "manifest.txt";
    bool cache_hit = false;
    if (fs::exists(manifest_path)) {
        std::ifstream in(manifest_path);
        std::string existing((std::istreambuf_iterator<char>(in)),
                             std::istreambuf_iterator<char>());
        cache_hit = existing == manifest;
        for (const auto& f : outputs) cache_hit = cache_hit && fs::exists(out / f);
    }
    if (cache_hit) {
        summary("preprocess", {{"cache_hit", "1"}, {"out_dir", o.out_dir}});
        return 0;
    }

    Graph g = load_graph_files(edges_path, features_path);
    EdgeSplit split = split_edges(g, cfg.train_ratio, cfg.valid_ratio, cfg.test_ratio,
                                  cfg.num_eval_neg, cfg.seed);
    write_split((out / "split.bin").string(), split);

    HopFeatures hops = propagate_hops(g, cfg.hops, cfg.norm(), cfg.threads);
    write_hop_features(out.string(), "feat", hops);

    StructProvider sp(g, cfg.structural_k, cfg.mask_edge, cfg.use_sketch_counts,
                      cfg.sketch_precision, cfg.sketch_hashes, cfg.seed);
    int fl = sp.feature_length();
    auto write_struct = [&](const std::string& name, const std::vector<EdgePair>& pairs) {
        MatrixF m(pairs.size(), static_cast<uint64_t>(fl));
        for (size_t i = 0; i < pairs.size(); ++i) {
            const auto& f = sp.features(pairs[i].u, pairs[i].v);
            std::copy(f.begin(), f.end(), m.row(i));
        }
        write_matrix((out / name).string(), m);
    };
    auto neg_pairs = [&](const std::vector<EdgePair>& pos, const std::vector<int>& neg) {
        std::vector<EdgePair> pairs;
        for (size_t i = 0; i < pos.size(); ++i)
            for (int j = 0; j < split.num_eval_neg; ++j)
                pairs.push_back(
                    {pos[i].u, neg[i * static_cast<size_t>(split.num_eval_neg) + static_cast<size_t>(j)]});
        return pairs;
    };
    write_struct("structs_train.lfmx", split.train_pos);
    write_struct("structs_valid_pos.lfmx", split.valid_pos);
    write_struct("structs_valid_neg.lfmx", neg_pairs(split.valid_pos, split.valid_neg));
    write_struct("structs_test_pos.lfmx", split.test_pos);
    write_struct("structs_test_neg.lfmx", neg_pairs(split.test_pos, split.test_neg));

    atomic_write_file(manifest_path.string(), manifest);
    summary("preprocess",
            {{"cache_hit", "0"},
             {"nodes", std::to_string(g.node_count())},
             {"edges", std::to_string(g.edge_count())},
             {"train", std::to_string(split.train_pos.size())},
             {"valid", std::to_string(split.valid_pos.size())},
             {"test", std::to_string(split.test_pos.size())},
             {"out_dir", o.out_dir}});
    return 0;
}

// ---------------------------------------------------------------------------
// pretrain
// ---------------------------------------------------------------------------

int cmd_pretrain(const CommonOpts& o, const std::string& edges_path,
                 const std::string& features_path) {
    TrainConfig cfg = resolve_config(o);
    DirLock lock(o.out_dir);
    fs::path out(o.out_dir);

    Graph g = load_graph_files(edges_path, features_path);
    std::vector<Shard> shards = make_shards(g, cfg);
    Branch branch = branch_from_string(o.branch);
    PretrainResult res =
        pretrain_bank(shards, cfg, branch, (out / "train_log.tsv").string());
    save_bank((out / "bank.lfck").string(), res.bank);

    std::vector<std::pair<std::string, std::string>> kv = {
        {"shards", std::to_string(shards.size())},
        {"bank", (out / "bank.lfck").string()}};
    if (!res.node_probe_bce.empty()) {
        kv.push_back({"node_probe_bce_first", fmt(res.node_probe_bce.front())});
        kv.push_back({"node_probe_bce_last", fmt(res.node_probe_bce.back())});
        kv.push_back({"node_probe_auc", fmt(res.node_probe_auc)});
    }
    if (!res.edge_probe_bce.empty()) {
        kv.push_back({"edge_probe_bce_first", fmt(res.edge_probe_bce.front())});
        kv.push_back({"edge_probe_bce_last", fmt(res.edge_probe_bce.back())});
        kv.push_back({"edge_probe_auc", fmt(res.edge_probe_auc)});
    }
    summary("pretrain", kv);
    return 0;
}

// ---------------------------------------------------------------------------
// shared evaluation plumbing
// ---------------------------------------------------------------------------

int64_t pair_key(int u, int w) { return (static_cast<int64_t>(u) << 32) | static_cast<uint32_t>(w); }

// Candidate list for one split section: each positive followed by its
// negatives, labels 1/0, in rank-evaluation order.
std::vector<LabeledEdge> section_candidates(const EdgeSplit& split, SplitSection which) {
    const auto& pos = which == SplitSection::valid ? split.valid_pos : split.test_pos;
    const auto& neg = which == SplitSection::valid ? split.valid_neg : split.test_neg;
    std::vector<LabeledEdge> out;
    out.reserve(pos.size() * static_cast<size_t>(1 + split.num_eval_neg));
    for (size_t i = 0; i < pos.size(); ++i) {
        out.push_back({pos[i].u, pos[i].v, 1});
        for (int j = 0; j < split.num_eval_neg; ++j)
            out.push_back(
                {pos[i].u, neg[i * static_cast<size_t>(split.num_eval_neg) + static_cast<size_t>(j)], 0});
    }
    return out;
}

EvalReport mrr_from_scores(const std::vector<LabeledEdge>& candidates,
                           const std::vector<double>& scores, const EdgeSplit& split,
                           SplitSection which) {
    std::unordered_map<int64_t, double> lut;
    lut.reserve(candidates.size() * 2);
    for (size_t i = 0; i < candidates.size(); ++i)
        lut[pair_key(candidates[i].u, candidates[i].v)] = scores[i];
    return evaluate_mrr([&](int u, int w) { return lut.at(pair_key(u, w)); }, split, which);
}

// ---------------------------------------------------------------------------
// zeroshot
// ---------------------------------------------------------------------------

int cmd_zeroshot(const CommonOpts& o, const std::string& bank_path,
                 const std::string& edges_path, const std::string& features_path,
                 const std::string& split_path) {
    resolve_config(o);
    DirLock lock(o.out_dir);
    ExpertBank bank = load_bank(bank_path);
    if (bank.meta.node_experts == 0 || bank.meta.edge_experts == 0)
        throw DataError("zero-shot fusion needs both branches in the bank");
    Graph g = load_graph_files(edges_path, features_path);
    EdgeSplit split = read_split(split_path);

    std::vector<LabeledEdge> cands = section_candidates(split, SplitSection::test);
    BranchLogits bl = branch_logits(bank, g, cands);
    std::vector<double> fused(cands.size()), node_only(cands.size()), edge_only(cands.size());
    for (size_t i = 0; i < cands.size(); ++i) {
        fused[i] = zero_shot_sum(bl.node[i], bl.edge[i]);
        node_only[i] = bl.node[i];
        edge_only[i] = bl.edge[i];
    }
    EvalReport rep = mrr_from_scores(cands, fused, split, SplitSection::test);
    EvalReport rep_node = mrr_from_scores(cands, node_only, split, SplitSection::test);
    EvalReport rep_edge = mrr_from_scores(cands, edge_only, split, SplitSection::test);

    std::string report = "section test\nmethod late_fusion_sum\n" + rep.serialize() +
                         "node_only_mrr " + fmt(rep_node.mrr) + "\n" + "edge_only_mrr " +
                         fmt(rep_edge.mrr) + "\n";
    atomic_write_file((fs::path(o.out_dir) / "zeroshot_report.txt").string(), report);
    summary("zeroshot", {{"test_mrr", fmt(rep.mrr)},
                         {"node_only_mrr", fmt(rep_node.mrr)},
                         {"edge_only_mrr", fmt(rep_edge.mrr)}});
    return 0;
}

// ---------------------------------------------------------------------------
// adapt
// ---------------------------------------------------------------------------

int cmd_adapt(const CommonOpts& o, const std::string& bank_path, const std::string& edges_path,
              const std::string& features_path, const std::string& split_path) {
    TrainConfig cfg = resolve_config(o);
    DirLock lock(o.out_dir);
    fs::path out(o.out_dir);
    ExpertBank bank = load_bank(bank_path);
    Graph g = load_graph_files(edges_path, features_path);
    EdgeSplit split = read_split(split_path);

    // Adapter fits on the training positives plus 1:1 sampled negatives.
    std::vector<LabeledEdge> rows;
    for (const auto& e : split.train_pos) rows.push_back({e.u, e.v, 1});
    auto negs = sample_training_negatives(g, static_cast<int>(split.train_pos.size()),
                                          mix64(split.seed ^ 0xada9du));
    for (const auto& e : negs) rows.push_back({e.u, e.v, 0});

    // Logit cache keyed by bank fingerprint, graph content, and split seed.
    uint64_t graph_fp = fnv1a64_file(edges_path);
    graph_fp = fnv1a64_str(std::to_string(fnv1a64_file(features_path)), graph_fp);
    std::string cache_key = std::to_string(bank.meta.fingerprint) + "_" +
                            std::to_string(graph_fp) + "_" + std::to_string(split.seed);
    fs::path cache_dir = out / "cache";
    fs::create_directories(cache_dir);
    fs::path logits_path = cache_dir / ("logits_" + cache_key + ".lfmx");
    fs::path labels_path = cache_dir / ("labels_" + cache_key + ".lfmx");

    LogitMatrix lm;
    bool cache_hit = fs::exists(logits_path) && fs::exists(labels_path);
    if (cache_hit) {
        lm.logits = read_matrix(logits_path.string());
        MatrixF lab = read_matrix(labels_path.string());
        lm.labels.resize(lab.rows);
        for (uint64_t i = 0; i < lab.rows; ++i) lm.labels[i] = lab.at(i, 0) > 0.5f ? 1 : 0;
        lm.expert_ids = bank.expert_ids();
    } else {
        lm = collect_expert_logits(bank, g, rows);
        write_matrix(logits_path.string(), lm.logits);
        MatrixF lab(lm.labels.size(), 1);
        for (size_t i = 0; i < lm.labels.size(); ++i) lab.at(i, 0) = lm.labels[i];
        write_matrix(labels_path.string(), lab);
    }

    AdapterWeights w = fit_adapter(lm, cfg.adapter_lr, cfg.adapter_steps, cfg.seed);
    save_adapter((out / "adapter.txt").string(), w, lm.expert_ids);
    summary("adapt", {{"experts", std::to_string(lm.expert_ids.size())},
                      {"rows", std::to_string(lm.labels.size())},
                      {"steps", std::to_string(w.steps)},
                      {"train_bce", fmt(w.final_train_bce)},
                      {"cache_hit", cache_hit ? "1" : "0"},
                      {"adapter", (out / "adapter.txt").string()}});
    return 0;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

int cmd_eval(const CommonOpts& o, const std::string& bank_path, const std::string& adapter_path,
             const std::string& edges_path, const std::string& features_path,
             const std::string& split_path) {
    resolve_config(o);
    DirLock lock(o.out_dir);
    ExpertBank bank = load_bank(bank_path);
    Graph g = load_graph_files(edges_path, features_path);
    EdgeSplit split = read_split(split_path);
    std::vector<std::string> ids;
    AdapterWeights w = load_adapter(adapter_path, &ids);
    if (w.p.size() != bank.expert_ids().size())
        throw DataError("adapter expert count does not match the bank");

    std::vector<LabeledEdge> cands = section_candidates(split, SplitSection::test);
    LogitMatrix lm = collect_expert_logits(bank, g, cands);
    int cols = static_cast<int>(lm.logits.cols);

    std::vector<double> adapted(cands.size());
    for (size_t i = 0; i < cands.size(); ++i)
        adapted[i] = predict_adapted(
            w, std::span<const float>(lm.logits.row(i), static_cast<size_t>(cols)));
    EvalReport rep = mrr_from_scores(cands, adapted, split, SplitSection::test);

    std::ostringstream report;
    report << "section test\nmethod adapted\n" << rep.serialize();
    std::vector<std::pair<std::string, std::string>> kv = {{"test_mrr", fmt(rep.mrr)}};

    double best_single = 0.0;
    for (int c = 0; c < cols; ++c) {
        std::vector<double> col(cands.size());
        for (size_t i = 0; i < cands.size(); ++i) col[i] = lm.logits.at(i, static_cast<uint64_t>(c));
        EvalReport er = mrr_from_scores(cands, col, split, SplitSection::test);
        report << "expert_mrr_" << lm.expert_ids[static_cast<size_t>(c)] << " " << fmt(er.mrr)
               << "\n";
        best_single = std::max(best_single, er.mrr);
    }
    report << "best_single_expert_mrr " << fmt(best_single) << "\n";
    kv.push_back({"best_single_expert_mrr", fmt(best_single)});

    if (bank.meta.node_experts > 0 && bank.meta.edge_experts > 0) {
        BranchLogits bl = branch_logits(bank, g, cands);
        EvalReport rn = mrr_from_scores(cands, bl.node, split, SplitSection::test);
        EvalReport re = mrr_from_scores(cands, bl.edge, split, SplitSection::test);
        report << "node_branch_mrr " << fmt(rn.mrr) << "\nedge_branch_mrr " << fmt(re.mrr)
               << "\n";
        kv.push_back({"node_branch_mrr", fmt(rn.mrr)});
        kv.push_back({"edge_branch_mrr", fmt(re.mrr)});
    }

    atomic_write_file((fs::path(o.out_dir) / "eval_report.txt").string(), report.str());
    summary("eval", kv);
    return 0;
}

// ---------------------------------------------------------------------------
// analyze
// ---------------------------------------------------------------------------

int cmd_analyze(const CommonOpts& o, const std::string& bank_path, const std::string& edges_path,
                const std::string& features_path, const std::string& split_path,
                const std::string& ref_features_path) {
    TrainConfig cfg = resolve_config(o);
    DirLock lock(o.out_dir);
    fs::path out(o.out_dir);
    ExpertBank bank = load_bank(bank_path);
    Graph g = load_graph_files(edges_path, features_path);
    EdgeSplit split = read_split(split_path);

    MatrixF jac = expert_jaccard(bank, g, split);
    std::ostringstream jtxt;
    jtxt.precision(4);
    auto ids = bank.expert_ids();
    jtxt << "expert";
    for (const auto& id : ids) jtxt << "\t" << id;
    jtxt << "\n";
    for (uint64_t r = 0; r < jac.rows; ++r) {
        jtxt << ids[r];
        for (uint64_t c = 0; c < jac.cols; ++c) jtxt << "\t" << jac.at(r, c);
        jtxt << "\n";
    }
    atomic_write_file((out / "expert_jaccard.tsv").string(), jtxt.str());

    FlopsConfig fc;
    fc.nodes = g.node_count();
    fc.edges = g.edge_count();
    fc.hops = bank.meta.hops;
    fc.width = bank.meta.width;
    fc.avg_degree = std::max(1.0, 2.0 * static_cast<double>(g.edge_count()) / g.node_count());
    FlopsEstimate palp = flops_estimate(fc, FlopsMethod::palp);
    FlopsEstimate sub = flops_estimate(fc, FlopsMethod::subgraph);
    std::ostringstream ftxt;
    ftxt << "method\tflops_per_epoch\n";
    ftxt << "hop_token_moe\t" << palp.total << "\n";
    ftxt << "subgraph_extraction\t" << sub.total << (sub.saturated ? " (saturated)" : "") << "\n";
    atomic_write_file((out / "flops.tsv").string(), ftxt.str());

    std::vector<std::pair<std::string, std::string>> kv = {
        {"jaccard", (out / "expert_jaccard.tsv").string()},
        {"flops_ratio", fmt(static_cast<double>(sub.total) / static_cast<double>(palp.total))}};

    if (!ref_features_path.empty()) {
        MatrixF ref = read_matrix(ref_features_path);
        auto subsample = [&](const MatrixF& m, uint64_t salt) {
            if (m.rows <= 2000) return m;
            Rng rng(mix64(cfg.seed ^ salt));
            MatrixF outm(2000, m.cols);
            for (uint64_t i = 0; i < 2000; ++i) {
                uint64_t r = static_cast<uint64_t>(rng.uniform_int(static_cast<int>(m.rows)));
                std::copy(m.row(r), m.row(r) + m.cols, outm.row(i));
            }
            return outm;
        };
        double shift = mmd(subsample(g.features(), 0x111u), subsample(ref, 0x222u));
        kv.push_back({"mmd", fmt(shift)});
    }
    summary("analyze", kv);
    return 0;
}

// ---------------------------------------------------------------------------
// fusion-study
// ---------------------------------------------------------------------------

int cmd_fusion_study(const CommonOpts& o, int steps) {
    TrainConfig cfg = resolve_config(o);
    DirLock lock(o.out_dir);
    fs::path out(o.out_dir);

    SyntheticSpec spec;
    spec.nodes = 200;
    spec.feat_dim = 16;
    spec.avg_degree = 10.0;
    spec.seed = cfg.seed;
    spec.noise_scale = 1.0;
    spec.cluster_scale = 0.0;  // pure-noise features: only structure predicts
    Graph g = make_closure_link_graph(spec);

    FusionReport rep = run_fusion_study(g, steps, cfg.seed, cfg);
    std::ostringstream tsv;
    tsv << "step\tnode_only_loss\tfused_loss\tnode_only_encoder_grad\tfused_encoder_grad\n";
    tsv.precision(8);
    for (int i = 0; i < steps; ++i)
        tsv << i << '\t' << rep.node_only_loss[static_cast<size_t>(i)] << '\t'
            << rep.fused_loss[static_cast<size_t>(i)] << '\t'
            << rep.node_only_encoder_grad[static_cast<size_t>(i)] << '\t'
            << rep.fused_encoder_grad[static_cast<size_t>(i)] << '\n';
    atomic_write_file((out / "fusion_study.tsv").string(), tsv.str());

    auto mean_from = [&](const std::vector<double>& v, int lo) {
        double s = 0.0;
        int hi = static_cast<int>(v.size());
        for (int i = lo; i < hi; ++i) s += v[static_cast<size_t>(i)];
        return s / std::max(1, hi - lo);
    };
    int lo = std::min(10, steps - 1);
    summary("fusion-study",
            {{"steps", std::to_string(steps)},
             {"node_only_grad_mean", fmt(mean_from(rep.node_only_encoder_grad, lo))},
             {"fused_grad_mean", fmt(mean_from(rep.fused_encoder_grad, lo))},
             {"node_only_loss_at_20", fmt(rep.node_only_loss[static_cast<size_t>(std::min(steps - 1, 20))])},
             {"fused_loss_at_20", fmt(rep.fused_loss[static_cast<size_t>(std::min(steps - 1, 20))])},
             {"table", (out / "fusion_study.tsv").string()}});
    return 0;
}

// ---------------------------------------------------------------------------
// selftest
// ---------------------------------------------------------------------------

void expect(bool ok, const std::string& what) {
    if (!ok) throw ComputeError("selftest failed: " + what);
    std::cout << "ok " << what << std::endl;
}

int cmd_selftest() {
    // Composed model gradient check at 64-bit.
    {
        ParamStore<double> ps;
        Rng rng(11);
        EncoderConfig enc{5, 2, 6, 1, 0.0};
        MlpConfig mlp{6, 8, 2, 0.0};
        GateConfig gate{5, 8, 4, 3, 0.0};
        init_encoder(ps, "enc", enc, rng);
        for (int k = 0; k < 3; ++k) init_score_mlp(ps, "s" + std::to_string(k), mlp, rng);
        init_gate(ps, "g", gate, rng);

        int B = 4, S = enc.tokens();
        ad::Mat<double> tokens(2 * B * S, enc.feat_dim), gf(B, gate.in_dim);
        for (auto& v : tokens.a) v = rng.normal();
        for (auto& v : gf.a) v = rng.normal();
        std::vector<int> ri, rj;
        for (int i = 0; i < B; ++i) {
            ri.push_back(2 * i);
            rj.push_back(2 * i + 1);
        }
        auto build = [&](bool want_grad) {
            ad::Tape<double> tape;
            TapeBind<double> tb(tape, ps);
            Rng grng(99);
            auto er = encoder_forward(tb, "enc", enc, tape.leaf(tokens), false, nullptr);
            auto hi = ad::gather_rows(er.h, ri);
            auto hj = ad::gather_rows(er.h, rj);
            auto prod = ad::elementwise_product(hi, hj);
            std::vector<ad::Var<double>> cols;
            for (int k = 0; k < 3; ++k)
                cols.push_back(score_mlp_forward(tb, "s" + std::to_string(k), mlp, prod, false,
                                                 nullptr));
            auto gr = gate_forward(tb, "g", gate, tape.leaf(gf), 0.7, &grng, true, false, false,
                                   nullptr);
            auto mixed = mix_logits(gr.probs, concat_columns(cols));
            auto loss = ad::bce_loss(ad::slice_rows(mixed, 0, B / 2),
                                     ad::slice_rows(mixed, B / 2, B));
            if (want_grad) {
                tape.backward(loss);
                tb.harvest();
            }
            return static_cast<double>(loss.val()(0, 0));
        };
        auto rep = finite_difference_check(
            ps, [&] { ps.zero_grads(); build(true); }, [&] { return build(false); });
        expect(rep.max_rel_err <= 1e-4,
               "composed-model gradients (max rel err " + fmt(rep.max_rel_err) + ")");
    }
    // Structural counts against a direct definition on a path graph.
    {
        MatrixF feat(3, 1);
        Graph path(3, {{0, 1}, {1, 2}}, feat);
        StructuralFeature f = exact_counts(path, 0, 1, 2);
        expect(f.at(2, 1) == 1.0 && f.at(1, 1) == 0.0, "structural counts on a path");
    }
    // Gumbel-softmax statistics.
    {
        Rng rng(5);
        int count0 = 0;
        int draws = 4000;
        for (int i = 0; i < draws; ++i) {
            auto d = ad::gumbel_softmax({0.0, 0.0}, 1.0, rng, true, true);
            if (d.index == 0) ++count0;
        }
        double freq = static_cast<double>(count0) / draws;
        expect(std::abs(freq - 0.5) < 0.04, "gumbel-softmax selection frequency");
        auto d = ad::gumbel_softmax({1.0, 2.0, 3.0}, 2.0, rng, false, false);
        double denom = std::exp(0.5) + std::exp(1.0) + std::exp(1.5);
        expect(std::abs(d.probs[2] - std::exp(1.5) / denom) < 1e-9, "noise-free gumbel equals softmax");
    }
    // Schedules.
    {
        ScheduleConfig sc{1e-4, 1e-5, 10, 100};
        expect(lr_at(0, sc) == 0.0 && lr_at(10, sc) == 1e-4 && lr_at(100, sc) == 1e-5,
               "learning-rate schedule endpoints");
        TemperatureSchedule ts{1.0, 0.1, 0.8};
        expect(std::abs(temperature_at(3, ts) - 0.512) < 1e-12 && temperature_at(50, ts) == 0.1,
               "temperature schedule");
    }
    // Ranking and fusion arithmetic.
    {
        expect(std::abs(zero_shot_sum(0.0, 0.0) - ad::sigmoid_stable(1.0)) < 1e-12,
               "late-fusion sum at zero logits");
        FlopsConfig fc{100, 200, 3, 8, 10.0};
        expect(flops_estimate(fc, FlopsMethod::palp).total == 32000, "flops estimate");
    }
    summary("selftest", {{"checks", "passed"}});
    return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args) {
    CLI::App app{"link prediction pretraining and adaptation toolkit"};
    app.require_subcommand(1);

    CommonOpts o;
    std::string edges_path, features_path, bank_path, split_path, adapter_path, ref_features;
    int steps = 120;

    CLI::App* pre = app.add_subcommand("preprocess", "split edges, hop features, struct features");
    add_common(pre, o);
    pre->add_option("--edges", edges_path, "edge list file")->required();
    pre->add_option("--features", features_path, "feature matrix file")->required();

    CLI::App* pt = app.add_subcommand("pretrain", "two-branch expert pretraining");
    add_common(pt, o, true);
    pt->add_option("--edges", edges_path, "edge list file")->required();
    pt->add_option("--features", features_path, "feature matrix file")->required();

    CLI::App* zs = app.add_subcommand("zeroshot", "late-fusion zero-shot evaluation");
    add_common(zs, o);
    zs->add_option("--bank", bank_path, "pretrained bank checkpoint")->required();
    zs->add_option("--edges", edges_path)->required();
    zs->add_option("--features", features_path)->required();
    zs->add_option("--split", split_path)->required();

    CLI::App* ad_cmd = app.add_subcommand("adapt", "fit the expert-combination adapter");
    add_common(ad_cmd, o);
    ad_cmd->add_option("--bank", bank_path)->required();
    ad_cmd->add_option("--edges", edges_path)->required();
    ad_cmd->add_option("--features", features_path)->required();
    ad_cmd->add_option("--split", split_path)->required();

    CLI::App* ev = app.add_subcommand("eval", "evaluate the adapted predictor");
    add_common(ev, o);
    ev->add_option("--bank", bank_path)->required();
    ev->add_option("--adapter", adapter_path)->required();
    ev->add_option("--edges", edges_path)->required();
    ev->add_option("--features", features_path)->required();
    ev->add_option("--split", split_path)->required();

    CLI::App* an = app.add_subcommand("analyze", "expert overlap, flops, distribution shift");
    add_common(an, o);
    an->add_option("--bank", bank_path)->required();
    an->add_option("--edges", edges_path)->required();
    an->add_option("--features", features_path)->required();
    an->add_option("--split", split_path)->required();
    an->add_option("--ref-features", ref_features, "reference feature matrix for the shift metric");

    CLI::App* fsd = app.add_subcommand("fusion-study", "node-only vs early-fusion dynamics");
    add_common(fsd, o);
    fsd->add_option("--steps", steps, "training steps per run");

    app.add_subcommand("selftest", "gradient checks and arithmetic oracles");

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return 0;  // --help
        std::cerr << "error: " << e.what() << std::endl;
        return 2;
    }

    try {
        if (pre->parsed()) return cmd_preprocess(o, edges_path, features_path);
        if (pt->parsed()) return cmd_pretrain(o, edges_path, features_path);
        if (zs->parsed()) return cmd_zeroshot(o, bank_path, edges_path, features_path, split_path);
        if (ad_cmd->parsed())
            return cmd_adapt(o, bank_path, edges_path, features_path, split_path);
        if (ev->parsed())
            return cmd_eval(o, bank_path, adapter_path, edges_path, features_path, split_path);
        if (an->parsed())
            return cmd_analyze(o, bank_path, edges_path, features_path, split_path, ref_features);
        if (fsd->parsed()) return cmd_fusion_study(o, steps);
        return cmd_selftest();
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << std::endl;
        return 2;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << std::endl;
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "runtime error: " << e.what() << std::endl;
        return 4;
    }
}

}  // namespace linkforge
