#include "linkforge/adapt.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "linkforge/common.hpp"
#include "linkforge/hop.hpp"
#include "linkforge/rng.hpp"
#include "linkforge/sketch.hpp"

namespace linkforge {

double zero_shot_sum(double node_logit, double edge_logit) {
    return ad::sigmoid_stable(ad::sigmoid_stable(node_logit) + ad::sigmoid_stable(edge_logit));
}

namespace {

struct EdgeScores {
    MatrixF node_logits;  // rows = edges, cols = m (0x0 if branch absent)
    MatrixF edge_logits;  // rows = edges, cols = n
    MatrixF gate_feats;   // rows = edges, cols = d
};

EdgeScores expert_scores(const ExpertBank& bank, const Graph& g,
                         const std::vector<LabeledEdge>& edges) {
    const BankMeta& meta = bank.meta;
    if (g.feature_dim() != meta.feat_dim)
        throw DataError("graph feature width " + std::to_string(g.feature_dim()) +
                        " does not match bank feature width " + std::to_string(meta.feat_dim));
    for (const auto& e : edges)
        if (e.u < 0 || e.u >= g.node_count() || e.v < 0 || e.v >= g.node_count() || e.u == e.v)
            throw DataError("labeled edge endpoint out of range");

    EdgeScores out;
    size_t ne = edges.size();
    out.gate_feats = MatrixF(ne, static_cast<uint64_t>(meta.feat_dim));
    for (size_t i = 0; i < ne; ++i) {
        const float* xi = g.features().row(static_cast<uint64_t>(edges[i].u));
        const float* xj = g.features().row(static_cast<uint64_t>(edges[i].v));
        for (int c = 0; c < meta.feat_dim; ++c)
            out.gate_feats.at(i, static_cast<uint64_t>(c)) = xi[c] + xj[c];
    }

    if (meta.node_experts > 0) {
        HopFeatures hops = propagate_hops(g, meta.hops, meta.norm_mode);
        MatrixF H = encode_nodes(bank, hops);
        out.node_logits = MatrixF(ne, static_cast<uint64_t>(meta.node_experts));
        for (size_t i = 0; i < ne; ++i)
            for (int k = 0; k < meta.node_experts; ++k)
                out.node_logits.at(i, static_cast<uint64_t>(k)) = static_cast<float>(
                    node_expert_logit(bank, k, H.row(static_cast<uint64_t>(edges[i].u)),
                                      H.row(static_cast<uint64_t>(edges[i].v))));
    }
    if (meta.edge_experts > 0) {
        out.edge_logits = MatrixF(ne, static_cast<uint64_t>(meta.edge_experts));
        for (size_t i = 0; i < ne; ++i) {
            StructuralFeature f =
                exact_counts(g, edges[i].u, edges[i].v, meta.struct_k, meta.mask_edge);
            for (int k = 0; k < meta.edge_experts; ++k)
                out.edge_logits.at(i, static_cast<uint64_t>(k)) =
                    static_cast<float>(edge_expert_logit(bank, k, f));
        }
    }
    return out;
}

}  // namespace

BranchLogits branch_logits(const ExpertBank& bank, const Graph& g,
                           const std::vector<LabeledEdge>& edges) {
    EdgeScores sc = expert_scores(bank, g, edges);
    BranchLogits out;
    if (bank.meta.node_experts > 0) {
        auto probs = gate_probs_eval(bank, "ngate", sc.gate_feats);
        out.node.resize(edges.size(), 0.0);
        for (size_t i = 0; i < edges.size(); ++i)
            for (int k = 0; k < bank.meta.node_experts; ++k)
                out.node[i] += probs[i][static_cast<size_t>(k)] *
                               sc.node_logits.at(i, static_cast<uint64_t>(k));
    }
    if (bank.meta.edge_experts > 0) {
        auto probs = gate_probs_eval(bank, "egate", sc.gate_feats);
        out.edge.resize(edges.size(), 0.0);
        for (size_t i = 0; i < edges.size(); ++i)
            for (int k = 0; k < bank.meta.edge_experts; ++k)
                out.edge[i] += probs[i][static_cast<size_t>(k)] *
                               sc.edge_logits.at(i, static_cast<uint64_t>(k));
    }
    return out;
}

LogitMatrix collect_expert_logits(const ExpertBank& bank, const Graph& g,
                                  const std::vector<LabeledEdge>& edges) {
    EdgeScores sc = expert_scores(bank, g, edges);
    int m = bank.meta.node_experts, n = bank.meta.edge_experts;
    LogitMatrix lm;
    lm.expert_ids = bank.expert_ids();
    lm.logits = MatrixF(edges.size(), static_cast<uint64_t>(m + n));
    lm.labels.resize(edges.size());
    for (size_t i = 0; i < edges.size(); ++i) {
        lm.labels[i] = edges[i].label;
        for (int k = 0; k < m; ++k)
            lm.logits.at(i, static_cast<uint64_t>(k)) = sc.node_logits.at(i, static_cast<uint64_t>(k));
        for (int k = 0; k < n; ++k)
            lm.logits.at(i, static_cast<uint64_t>(m + k)) =
                sc.edge_logits.at(i, static_cast<uint64_t>(k));
    }
    return lm;
}

namespace {

double bce_of_weights(const MatrixF& logits, const std::vector<uint8_t>& labels,
                      const std::vector<size_t>& rows, const std::vector<double>& p, double bias) {
    double total = 0.0;
    for (size_t r : rows) {
        double z = bias;
        for (uint64_t c = 0; c < logits.cols; ++c)
            z += p[static_cast<size_t>(c)] * static_cast<double>(logits.at(r, c));
        total += ad::softplus_stable(z) - (labels[r] ? z : 0.0);
    }
    return total / static_cast<double>(rows.size());
}

}  // namespace

AdapterWeights fit_adapter_traced(const LogitMatrix& lm, double lr, int max_steps, uint64_t seed,
                                  bool use_bias, AdapterFitTrace* trace) {
    size_t n_rows = lm.labels.size();
    uint64_t n_cols = lm.logits.cols;
    if (lm.logits.rows != n_rows) throw DataError("fit_adapter: label/logit row mismatch");
    if (n_rows == 0 || n_cols == 0) throw DataError("fit_adapter: empty logit matrix");
    bool has_pos = false, has_neg = false;
    for (uint8_t y : lm.labels) (y ? has_pos : has_neg) = true;
    if (!has_pos || !has_neg) throw DataError("fit_adapter: labels must contain both classes");
    for (float v : lm.logits.data)
        if (!std::isfinite(v)) throw DataError("fit_adapter: non-finite logit");
    if (max_steps < 1) throw ConfigError("fit_adapter: max_steps must be >= 1");

    // Deterministic validation carve-out for early stopping (patience 20).
    Rng rng(seed);
    std::vector<size_t> order(n_rows);
    for (size_t i = 0; i < n_rows; ++i) order[i] = i;
    rng.shuffle(order);
    size_t n_val = n_rows / 5;
    std::vector<size_t> val_rows(order.begin(), order.begin() + n_val);
    std::vector<size_t> train_rows(order.begin() + n_val, order.end());
    bool val_usable = false;
    {
        bool vp = false, vn = false, tp = false, tn = false;
        for (size_t r : val_rows) (lm.labels[r] ? vp : vn) = true;
        for (size_t r : train_rows) (lm.labels[r] ? tp : tn) = true;
        val_usable = vp && vn && tp && tn && val_rows.size() >= 8;
        if (!(tp && tn)) {  // degenerate carve; train on everything
            train_rows = order;
            val_usable = false;
        }
    }

    // Uniform-ensemble start.
    std::vector<double> p(static_cast<size_t>(n_cols), 1.0 / static_cast<double>(n_cols));
    double bias = 0.0;
    std::vector<double> mp(p.size(), 0.0), vp2(p.size(), 0.0);
    double mb = 0.0, vb = 0.0;
    const double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

    AdapterWeights best;
    best.p = p;
    best.bias = bias;
    best.use_bias = use_bias;
    best.seed = seed;
    double best_val = std::numeric_limits<double>::max();
    int since_best = 0;
    int steps_run = 0;

    std::vector<double> grad(p.size());
    for (int step = 1; step <= max_steps; ++step) {
        std::fill(grad.begin(), grad.end(), 0.0);
        double grad_b = 0.0;
        double train_loss = 0.0;
        for (size_t r : train_rows) {
            double z = bias;
            for (uint64_t c = 0; c < n_cols; ++c)
                z += p[static_cast<size_t>(c)] * static_cast<double>(lm.logits.at(r, c));
            double y = lm.labels[r] ? 1.0 : 0.0;
            train_loss += ad::softplus_stable(z) - y * z;
            double dz = ad::sigmoid_stable(z) - y;
            for (uint64_t c = 0; c < n_cols; ++c)
                grad[static_cast<size_t>(c)] += dz * static_cast<double>(lm.logits.at(r, c));
            grad_b += dz;
        }
        double inv = 1.0 / static_cast<double>(train_rows.size());
        train_loss *= inv;
        if (trace) trace->train_bce.push_back(train_loss);

        double bc1 = 1.0 - std::pow(beta1, step);
        double bc2 = 1.0 - std::pow(beta2, step);
        for (size_t c = 0; c < p.size(); ++c) {
            double gcv = grad[c] * inv;
            mp[c] = beta1 * mp[c] + (1.0 - beta1) * gcv;
            vp2[c] = beta2 * vp2[c] + (1.0 - beta2) * gcv * gcv;
            p[c] -= lr * (mp[c] / bc1) / (std::sqrt(vp2[c] / bc2) + eps);
        }
        if (use_bias) {
            double gb = grad_b * inv;
            mb = beta1 * mb + (1.0 - beta1) * gb;
            vb = beta2 * vb + (1.0 - beta2) * gb * gb;
            bias -= lr * (mb / bc1) / (std::sqrt(vb / bc2) + eps);
        }
        steps_run = step;

        double monitor = val_usable ? bce_of_weights(lm.logits, lm.labels, val_rows, p, bias)
                                    : train_loss;
        if (monitor < best_val - 1e-12) {
            best_val = monitor;
            best.p = p;
            best.bias = bias;
            since_best = 0;
        } else if (++since_best >= 20 && val_usable) {
            break;
        }
    }

    best.steps = steps_run;
    best.final_train_bce = bce_of_weights(lm.logits, lm.labels, train_rows, best.p, best.bias);
    return best;
}

AdapterWeights fit_adapter(const LogitMatrix& lm, double lr, int max_steps, uint64_t seed,
                           bool use_bias) {
    return fit_adapter_traced(lm, lr, max_steps, seed, use_bias, nullptr);
}

double predict_adapted(const AdapterWeights& w, std::span<const float> expert_logits) {
    if (expert_logits.size() != w.p.size())
        throw DataError("predict_adapted: weight/logit length mismatch");
    double z = w.use_bias ? w.bias : 0.0;
    for (size_t i = 0; i < w.p.size(); ++i) z += w.p[i] * static_cast<double>(expert_logits[i]);
    return ad::sigmoid_stable(z);
}

std::string encode_adapter(const AdapterWeights& w, const std::vector<std::string>& expert_ids) {
    if (expert_ids.size() != w.p.size())
        throw DataError("encode_adapter: expert id count mismatch");
    std::ostringstream os;
    os.precision(17);
    os << "# adapter v1\n";
    os << "seed " << w.seed << "\n";
    os << "steps " << w.steps << "\n";
    os << "final_train_bce " << w.final_train_bce << "\n";
    os << "use_bias " << (w.use_bias ? 1 : 0) << "\n";
    if (w.use_bias) os << "bias " << w.bias << "\n";
    for (size_t i = 0; i < w.p.size(); ++i) os << expert_ids[i] << " " << w.p[i] << "\n";
    return os.str();
}

AdapterWeights decode_adapter(const std::string& text, std::vector<std::string>* expert_ids) {
    std::istringstream in(text);
    std::string line;
    AdapterWeights w;
    if (expert_ids) expert_ids->clear();
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ls(line);
        std::string key;
        ls >> key;
        if (key == "seed")
            ls >> w.seed;
        else if (key == "steps")
            ls >> w.steps;
        else if (key == "final_train_bce")
            ls >> w.final_train_bce;
        else if (key == "use_bias") {
            int b;
            ls >> b;
            w.use_bias = b != 0;
        } else if (key == "bias")
            ls >> w.bias;
        else {
            double val;
            if (!(ls >> val)) throw DataError("malformed adapter line: " + line);
            if (expert_ids) expert_ids->push_back(key);
            w.p.push_back(val);
        }
    }
    if (w.p.empty()) throw DataError("adapter file has no weights");
    return w;
}

void save_adapter(const std::string& path, const AdapterWeights& w,
                  const std::vector<std::string>& expert_ids) {
    atomic_write_file(path, encode_adapter(w, expert_ids));
}

AdapterWeights load_adapter(const std::string& path, std::vector<std::string>* expert_ids) {
    return decode_adapter(read_file_bytes(path), expert_ids);
}

}  // namespace linkforge
