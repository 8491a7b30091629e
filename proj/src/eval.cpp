#include "linkforge/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "linkforge/common.hpp"
#include "linkforge/hop.hpp"

namespace linkforge {

std::string EvalReport::serialize(bool include_ranks) const {
    std::ostringstream os;
    os.precision(10);
    os << "mrr " << mrr << "\n";
    os << "num_edges " << per_edge_ranks.size() << "\n";
    os << "num_negatives " << num_negatives << "\n";
    for (const auto& [k, v] : hits_at) os << "hits_at_" << k << " " << v << "\n";
    os << "seed " << seed << "\n";
    if (include_ranks) {
        os << "ranks";
        for (int r : per_edge_ranks) os << " " << r;
        os << "\n";
    }
    return os.str();
}

EvalReport evaluate_mrr(const std::function<double(int, int)>& score_fn, const EdgeSplit& split,
                        SplitSection which) {
    const auto& pos = which == SplitSection::valid ? split.valid_pos : split.test_pos;
    const auto& neg = which == SplitSection::valid ? split.valid_neg : split.test_neg;
    int nn = split.num_eval_neg;
    if (neg.size() != pos.size() * static_cast<size_t>(nn))
        throw DataError("split is missing evaluation negatives");

    EvalReport rep;
    rep.num_negatives = nn;
    rep.seed = split.seed;
    double sum_rr = 0.0;
    int hits1 = 0, hits3 = 0, hits10 = 0;
    for (size_t i = 0; i < pos.size(); ++i) {
        double s_pos = score_fn(pos[i].u, pos[i].v);
        if (!std::isfinite(s_pos)) throw ComputeError("non-finite score for a positive edge");
        int worse = 0, equal = 0;
        for (int j = 0; j < nn; ++j) {
            double s = score_fn(pos[i].u, neg[i * static_cast<size_t>(nn) + static_cast<size_t>(j)]);
            if (!std::isfinite(s)) throw ComputeError("non-finite score for a negative edge");
            if (s > s_pos)
                ++worse;
            else if (s == s_pos)
                ++equal;
        }
        int rank = 1 + worse + equal;
        rep.per_edge_ranks.push_back(rank);
        sum_rr += 1.0 / rank;
        if (rank <= 1) ++hits1;
        if (rank <= 3) ++hits3;
        if (rank <= 10) ++hits10;
    }
    size_t n = std::max<size_t>(1, pos.size());
    rep.mrr = sum_rr / static_cast<double>(n);
    rep.hits_at[1] = static_cast<double>(hits1) / static_cast<double>(n);
    rep.hits_at[3] = static_cast<double>(hits3) / static_cast<double>(n);
    rep.hits_at[10] = static_cast<double>(hits10) / static_cast<double>(n);
    return rep;
}

MatrixF expert_jaccard(const ExpertBank& bank, const Graph& g, const EdgeSplit& split) {
    int m = bank.meta.node_experts;
    int n_exp = m + bank.meta.edge_experts;

    HopFeatures hops = propagate_hops(g, bank.meta.hops, bank.meta.norm_mode);
    MatrixF H = encode_nodes(bank, hops);

    // Correct sets over valid + test positives, one per expert.
    std::vector<std::vector<char>> correct(static_cast<size_t>(n_exp));
    auto run_section = [&](const std::vector<EdgePair>& pos, const std::vector<int>& neg) {
        int nn = split.num_eval_neg;
        if (neg.size() != pos.size() * static_cast<size_t>(nn))
            throw DataError("split is missing evaluation negatives");
        for (size_t i = 0; i < pos.size(); ++i) {
            int u = pos[i].u, v = pos[i].v;
            for (int e = 0; e < n_exp; ++e) {
                auto score = [&](int a, int b) {
                    if (e < m) return node_expert_logit(bank, e, H.row(static_cast<uint64_t>(a)),
                                                        H.row(static_cast<uint64_t>(b)));
                    StructuralFeature f =
                        exact_counts(g, a, b, bank.meta.struct_k, bank.meta.mask_edge);
                    return edge_expert_logit(bank, e - m, f);
                };
                double s_pos = score(u, v);
                int rank = 1;
                for (int j = 0; j < nn && rank <= 3; ++j) {
                    double s = score(u, neg[i * static_cast<size_t>(nn) + static_cast<size_t>(j)]);
                    if (s >= s_pos) ++rank;
                }
                correct[static_cast<size_t>(e)].push_back(rank <= 3 ? 1 : 0);
            }
        }
    };
    run_section(split.valid_pos, split.valid_neg);
    run_section(split.test_pos, split.test_neg);

    MatrixF out(static_cast<uint64_t>(n_exp), static_cast<uint64_t>(n_exp));
    for (int a = 0; a < n_exp; ++a)
        for (int b = 0; b < n_exp; ++b) {
            size_t inter = 0, uni = 0;
            const auto& ca = correct[static_cast<size_t>(a)];
            const auto& cb = correct[static_cast<size_t>(b)];
            for (size_t i = 0; i < ca.size(); ++i) {
                inter += ca[i] && cb[i];
                uni += ca[i] || cb[i];
            }
            double val = uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
            out.at(static_cast<uint64_t>(a), static_cast<uint64_t>(b)) = static_cast<float>(val);
        }
    return out;
}

double mmd(const MatrixF& sample_a, const MatrixF& sample_b) {
    if (sample_a.rows == 0 || sample_b.rows == 0) throw DataError("mmd: empty sample");
    if (sample_a.cols != sample_b.cols) throw DataError("mmd: dimension mismatch");
    uint64_t na = sample_a.rows, nb = sample_b.rows, d = sample_a.cols;

    auto sqdist = [d](const float* x, const float* y) {
        double s = 0.0;
        for (uint64_t c = 0; c < d; ++c) {
            double diff = static_cast<double>(x[c]) - y[c];
            s += diff * diff;
        }
        return s;
    };

    // Median heuristic bandwidth over the pooled sample.
    std::vector<const float*> pooled;
    pooled.reserve(na + nb);
    for (uint64_t i = 0; i < na; ++i) pooled.push_back(sample_a.row(i));
    for (uint64_t i = 0; i < nb; ++i) pooled.push_back(sample_b.row(i));
    std::vector<double> dists;
    dists.reserve(pooled.size() * (pooled.size() - 1) / 2);
    for (size_t i = 0; i < pooled.size(); ++i)
        for (size_t j = i + 1; j < pooled.size(); ++j)
            dists.push_back(std::sqrt(sqdist(pooled[i], pooled[j])));
    if (dists.empty()) throw DataError("mmd: pooled sample has a single point");
    std::nth_element(dists.begin(), dists.begin() + dists.size() / 2, dists.end());
    double bandwidth = dists[dists.size() / 2];
    if (!(bandwidth > 0.0))
        throw DataError("mmd: zero bandwidth (all pooled points identical)");
    double gamma = 1.0 / (2.0 * bandwidth * bandwidth);

    auto kernel_mean = [&](const MatrixF& x, const MatrixF& y) {
        double s = 0.0;
        for (uint64_t i = 0; i < x.rows; ++i)
            for (uint64_t j = 0; j < y.rows; ++j)
                s += std::exp(-gamma * sqdist(x.row(i), y.row(j)));
        return s / (static_cast<double>(x.rows) * static_cast<double>(y.rows));
    };
    double est = kernel_mean(sample_a, sample_a) + kernel_mean(sample_b, sample_b) -
                 2.0 * kernel_mean(sample_a, sample_b);
    return std::max(0.0, est);
}

namespace {

// Saturating u64 accumulate of a product expressed in long double.
uint64_t sat_u64(long double v, bool& saturated) {
    if (v >= static_cast<long double>(std::numeric_limits<uint64_t>::max())) {
        saturated = true;
        return std::numeric_limits<uint64_t>::max();
    }
    return static_cast<uint64_t>(v);
}

}  // namespace

FlopsEstimate flops_estimate(const FlopsConfig& cfg, FlopsMethod method) {
    if (cfg.nodes <= 0 || cfg.edges <= 0 || cfg.width <= 0 || cfg.hops < 0)
        throw ConfigError("flops_estimate: config values must be positive");
    if (method == FlopsMethod::subgraph && !(cfg.avg_degree > 0.0))
        throw ConfigError("flops_estimate: subgraph method needs avg_degree > 0");

    FlopsEstimate est;
    long double f2 = static_cast<long double>(cfg.width) * cfg.width;
    long double node_term;
    if (method == FlopsMethod::palp) {
        node_term = static_cast<long double>(cfg.nodes) * cfg.hops * f2;
    } else {
        long double dk = std::pow(static_cast<long double>(cfg.avg_degree),
                                  static_cast<long double>(cfg.hops));
        node_term = static_cast<long double>(cfg.nodes) * dk * f2;
    }
    long double edge_term = static_cast<long double>(cfg.edges) * f2;
    est.node_term = sat_u64(node_term, est.saturated);
    est.edge_term = sat_u64(edge_term, est.saturated);
    est.total = sat_u64(node_term + edge_term, est.saturated);
    return est;
}

namespace {

// Regularized incomplete beta function via the continued-fraction expansion;
// used for the t-distribution tail.
double betacf(double a, double b, double x) {
    constexpr int kMaxIter = 200;
    constexpr double kEps = 3e-14;
    constexpr double kFpMin = 1e-300;
    double qab = a + b, qap = a + 1.0, qam = a - 1.0;
    double c = 1.0;
    double d = 1.0 - qab * x / qap;
    if (std::abs(d) < kFpMin) d = kFpMin;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= kMaxIter; ++m) {
        int m2 = 2 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < kFpMin) d = kFpMin;
        c = 1.0 + aa / c;
        if (std::abs(c) < kFpMin) c = kFpMin;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < kFpMin) d = kFpMin;
        c = 1.0 + aa / c;
        if (std::abs(c) < kFpMin) c = kFpMin;
        d = 1.0 / d;
        double del = d * c;
        h *= del;
        if (std::abs(del - 1.0) < kEps) break;
    }
    return h;
}

double betai(double a, double b, double x) {
    if (x <= 0.0) return 0.0;
    if (x >= 1.0) return 1.0;
    double bt = std::exp(std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                         a * std::log(x) + b * std::log1p(-x));
    if (x < (a + 1.0) / (a + b + 2.0)) return bt * betacf(a, b, x) / a;
    return 1.0 - bt * betacf(b, a, 1.0 - x) / b;
}

}  // namespace

Correlation correlate(const std::vector<double>& xs, const std::vector<double>& ys) {
    if (xs.size() != ys.size()) throw DataError("correlate: length mismatch");
    size_t n = xs.size();
    if (n < 3) throw DataError("correlate: need at least 3 points");
    double mx = 0.0, my = 0.0;
    for (size_t i = 0; i < n; ++i) {
        mx += xs[i];
        my += ys[i];
    }
    mx /= static_cast<double>(n);
    my /= static_cast<double>(n);
    double sxx = 0.0, syy = 0.0, sxy = 0.0;
    for (size_t i = 0; i < n; ++i) {
        double dx = xs[i] - mx, dy = ys[i] - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if (sxx == 0.0 || syy == 0.0) throw DataError("correlate: zero variance");
    Correlation c;
    c.r = sxy / std::sqrt(sxx * syy);
    c.r = std::clamp(c.r, -1.0, 1.0);
    double df = static_cast<double>(n) - 2.0;
    if (std::abs(c.r) >= 1.0) {
        c.p_value = 0.0;
    } else {
        double t2 = c.r * c.r * df / (1.0 - c.r * c.r);
        c.p_value = betai(df / 2.0, 0.5, df / (df + t2));
    }
    return c;
}

double roc_auc(const std::vector<double>& pos_scores, const std::vector<double>& neg_scores) {
    if (pos_scores.empty() || neg_scores.empty()) throw DataError("roc_auc: empty sample");
    double wins = 0.0;
    for (double p : pos_scores)
        for (double q : neg_scores) {
            if (p > q)
                wins += 1.0;
            else if (p == q)
                wins += 0.5;
        }
    return wins / (static_cast<double>(pos_scores.size()) * static_cast<double>(neg_scores.size()));
}

}  // namespace linkforge
