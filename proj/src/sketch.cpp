#include "linkforge/sketch.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <deque>
#include <limits>

#include "linkforge/common.hpp"
#include "linkforge/rng.hpp"

namespace linkforge {

std::vector<double> StructuralFeature::flatten() const {
    std::vector<double> out;
    out.reserve(a.size() + b_u.size() + b_v.size());
    out.insert(out.end(), a.begin(), a.end());
    out.insert(out.end(), b_u.begin(), b_u.end());
    out.insert(out.end(), b_v.begin(), b_v.end());
    return out;
}

namespace {

// Truncated BFS from src up to depth k; unreached entries stay -1.
// When mask_u/mask_v are set, traversal skips that single edge.
std::vector<int> bfs_capped(const Graph& g, int src, int k, int mask_u, int mask_v) {
    std::vector<int> dist(static_cast<size_t>(g.node_count()), -1);
    std::deque<int> q{src};
    dist[static_cast<size_t>(src)] = 0;
    while (!q.empty()) {
        int x = q.front();
        q.pop_front();
        if (dist[static_cast<size_t>(x)] >= k) continue;
        for (int y : g.neighbors(x)) {
            if ((x == mask_u && y == mask_v) || (x == mask_v && y == mask_u)) continue;
            if (dist[static_cast<size_t>(y)] == -1) {
                dist[static_cast<size_t>(y)] = dist[static_cast<size_t>(x)] + 1;
                q.push_back(y);
            }
        }
    }
    return dist;
}

}  // namespace

StructuralFeature exact_counts(const Graph& g, int u, int v, int k, bool mask_edge) {
    if (k < 1 || k > 10) throw ConfigError("receptive field k must be in [1, 10]");
    if (u == v) throw DataError("structural counts need two distinct endpoints");
    if (u < 0 || u >= g.node_count() || v < 0 || v >= g.node_count())
        throw DataError("structural count endpoint out of range");

    int mu = mask_edge ? u : -1;
    int mv = mask_edge ? v : -1;
    std::vector<int> du = bfs_capped(g, u, k, mu, mv);
    std::vector<int> dv = bfs_capped(g, v, k, mu, mv);

    StructuralFeature f;
    f.k = k;
    f.a.assign(static_cast<size_t>(k) * k, 0.0);
    f.b_u.assign(static_cast<size_t>(k), 0.0);
    f.b_v.assign(static_cast<size_t>(k), 0.0);
    for (int w = 0; w < g.node_count(); ++w) {
        if (w == u || w == v) continue;
        int a = du[static_cast<size_t>(w)];
        int b = dv[static_cast<size_t>(w)];
        if (a >= 1 && b >= 1)
            f.at(a, b) += 1.0;
        else if (a >= 1 && b == -1)
            f.b_u[static_cast<size_t>(a - 1)] += 1.0;
        else if (b >= 1 && a == -1)
            f.b_v[static_cast<size_t>(b - 1)] += 1.0;
    }
    return f;
}

void CardinalitySketch::init(int precision) {
    p = precision;
    regs.assign(static_cast<size_t>(1) << p, 0);
}

void CardinalitySketch::add_hash(uint64_t h) {
    size_t idx = static_cast<size_t>(h >> (64 - p));
    uint64_t rest = h << p;
    uint8_t rank = rest == 0 ? static_cast<uint8_t>(64 - p + 1)
                             : static_cast<uint8_t>(std::countl_zero(rest) + 1);
    if (rank > regs[idx]) regs[idx] = rank;
}

void CardinalitySketch::merge(const CardinalitySketch& other) {
    for (size_t i = 0; i < regs.size(); ++i) regs[i] = std::max(regs[i], other.regs[i]);
}

double CardinalitySketch::estimate() const {
    size_t m = regs.size();
    double sum = 0.0;
    size_t zeros = 0;
    for (uint8_t r : regs) {
        sum += std::ldexp(1.0, -static_cast<int>(r));
        if (r == 0) ++zeros;
    }
    double alpha;
    if (m == 16)
        alpha = 0.673;
    else if (m == 32)
        alpha = 0.697;
    else if (m == 64)
        alpha = 0.709;
    else
        alpha = 0.7213 / (1.0 + 1.079 / static_cast<double>(m));
    double raw = alpha * static_cast<double>(m) * static_cast<double>(m) / sum;
    if (raw <= 2.5 * static_cast<double>(m) && zeros > 0)
        return static_cast<double>(m) * std::log(static_cast<double>(m) / static_cast<double>(zeros));
    return raw;
}

void MinHashSignature::init(int h) {
    mins.assign(static_cast<size_t>(h), std::numeric_limits<uint64_t>::max());
}

void MinHashSignature::merge(const MinHashSignature& other) {
    for (size_t i = 0; i < mins.size(); ++i) mins[i] = std::min(mins[i], other.mins[i]);
}

double jaccard_estimate(const MinHashSignature& a, const MinHashSignature& b) {
    if (a.mins.size() != b.mins.size()) throw DataError("signature size mismatch");
    size_t same = 0;
    for (size_t i = 0; i < a.mins.size(); ++i)
        if (a.mins[i] == b.mins[i]) ++same;
    return static_cast<double>(same) / static_cast<double>(a.mins.size());
}

SketchSet::SketchSet(const Graph& g, int k, int precision, int signature_size, uint64_t seed,
                     int threads)
    : n_(g.node_count()), k_(k), p_(precision), h_(signature_size), seed_(seed) {
    if (p_ < 4 || p_ > 18) throw ConfigError("sketch precision must be in [4, 18]");
    if (h_ < 16) throw ConfigError("signature size must be >= 16");
    if (k_ < 1 || k_ > 10) throw ConfigError("receptive field k must be in [1, 10]");

    card_salt_ = mix64(seed_ ^ 0x5b8f3a2dULL);
    slot_salts_.resize(static_cast<size_t>(h_));
    for (int i = 0; i < h_; ++i)
        slot_salts_[static_cast<size_t>(i)] = mix64(seed_ + 0x9e3779b97f4a7c15ULL * (static_cast<uint64_t>(i) + 1));

    cards_.resize(static_cast<size_t>(n_) * k_);
    sigs_.resize(static_cast<size_t>(n_) * k_);

    // Depth 1 summarizes N(v) plus v itself.
    parallel_for(n_, threads, [&](int64_t v) {
        auto& c = cards_[static_cast<size_t>(v) * k_];
        auto& s = sigs_[static_cast<size_t>(v) * k_];
        c.init(p_);
        s.init(h_);
        auto insert = [&](int node) {
            c.add_hash(element_hash(node));
            for (int i = 0; i < h_; ++i) {
                uint64_t hv = slot_hash(node, i);
                if (hv < s.mins[static_cast<size_t>(i)]) s.mins[static_cast<size_t>(i)] = hv;
            }
        };
        insert(static_cast<int>(v));
        for (int w : g.neighbors(static_cast<int>(v))) insert(w);
    });

    for (int depth = 2; depth <= k_; ++depth) {
        parallel_for(n_, threads, [&](int64_t v) {
            auto& c = cards_[static_cast<size_t>(v) * k_ + depth - 1];
            auto& s = sigs_[static_cast<size_t>(v) * k_ + depth - 1];
            c = cards_[static_cast<size_t>(v) * k_ + depth - 2];
            s = sigs_[static_cast<size_t>(v) * k_ + depth - 2];
            for (int w : g.neighbors(static_cast<int>(v))) {
                c.merge(cards_[static_cast<size_t>(w) * k_ + depth - 2]);
                s.merge(sigs_[static_cast<size_t>(w) * k_ + depth - 2]);
            }
        });
    }
}

uint64_t SketchSet::element_hash(int node) const {
    return mix64(static_cast<uint64_t>(node) ^ card_salt_);
}

uint64_t SketchSet::slot_hash(int node, int slot) const {
    return mix64(static_cast<uint64_t>(node) ^ slot_salts_[static_cast<size_t>(slot)]);
}

const CardinalitySketch& SketchSet::ball_card(int node, int depth) const {
    if (node < 0 || node >= n_) throw DataError("sketch node out of range");
    if (depth < 1 || depth > k_) throw DataError("sketch depth out of range");
    return cards_[static_cast<size_t>(node) * k_ + depth - 1];
}

const MinHashSignature& SketchSet::ball_sig(int node, int depth) const {
    if (node < 0 || node >= n_) throw DataError("sketch node out of range");
    if (depth < 1 || depth > k_) throw DataError("sketch depth out of range");
    return sigs_[static_cast<size_t>(node) * k_ + depth - 1];
}

double SketchSet::ball_estimate(int node, int depth) const {
    if (depth == 0) return 1.0;
    return ball_card(node, depth).estimate();
}

namespace {

// Intersection of two sketched balls, fusing two estimators by inverse
// variance: HLL inclusion-exclusion (exact merged union) and the min-hash
// Jaccard route. The variance models are the standard asymptotic ones.
double intersection_estimate(const SketchSet& sk, int u, int a, int v, int b) {
    double ca = sk.ball_estimate(u, a);
    double cb = sk.ball_estimate(v, b);
    CardinalitySketch un = sk.ball_card(u, a);
    un.merge(sk.ball_card(v, b));
    double cu = un.estimate();
    double est_hll = ca + cb - cu;

    double j = jaccard_estimate(sk.ball_sig(u, a), sk.ball_sig(v, b));
    double est_mh = j / (1.0 + j) * (ca + cb);

    double c = 1.04 / std::sqrt(static_cast<double>(1ULL << sk.precision()));
    double var_hll = c * c * (ca * ca + cb * cb + cu * cu);
    double h = static_cast<double>(sk.signature_size());
    double var_j = (j * (1.0 - j) + 1.0 / h) / h;
    double dj = (ca + cb) / ((1.0 + j) * (1.0 + j));
    double var_mh = dj * dj * var_j + (j / (1.0 + j)) * (j / (1.0 + j)) * c * c * (ca * ca + cb * cb);

    double w1 = 1.0 / std::max(var_hll, 1e-12);
    double w2 = 1.0 / std::max(var_mh, 1e-12);
    double est = (w1 * est_hll + w2 * est_mh) / (w1 + w2);
    return std::clamp(est, 0.0, std::min(ca, cb));
}

}  // namespace

StructuralFeature approx_counts(const SketchSet& sk, int u, int v) {
    int n = sk.node_count();
    if (u < 0 || u >= n || v < 0 || v >= n)
        throw DataError("approx_counts endpoint missing from sketch set");
    if (u == v) throw DataError("structural counts need two distinct endpoints");
    int k = sk.k();

    // X[a][b] ~= |ball(u,a) n ball(v,b)|, indices 0..k. The pair under query
    // is treated as adjacent, so X[0][b] = X[a][0] = 1 (clamping absorbs the
    // error when it is not); X[0][0] = 0 since u != v.
    std::vector<std::vector<double>> X(static_cast<size_t>(k) + 1,
                                       std::vector<double>(static_cast<size_t>(k) + 1, 0.0));
    for (int a = 1; a <= k; ++a) X[static_cast<size_t>(a)][0] = 1.0;
    for (int b = 1; b <= k; ++b) X[0][static_cast<size_t>(b)] = 1.0;
    for (int a = 1; a <= k; ++a)
        for (int b = 1; b <= k; ++b)
            X[static_cast<size_t>(a)][static_cast<size_t>(b)] = intersection_estimate(sk, u, a, v, b);

    StructuralFeature f;
    f.k = k;
    f.a.assign(static_cast<size_t>(k) * k, 0.0);
    f.b_u.assign(static_cast<size_t>(k), 0.0);
    f.b_v.assign(static_cast<size_t>(k), 0.0);
    for (int a = 1; a <= k; ++a)
        for (int b = 1; b <= k; ++b) {
            double val = X[static_cast<size_t>(a)][static_cast<size_t>(b)] -
                         X[static_cast<size_t>(a - 1)][static_cast<size_t>(b)] -
                         X[static_cast<size_t>(a)][static_cast<size_t>(b - 1)] +
                         X[static_cast<size_t>(a - 1)][static_cast<size_t>(b - 1)];
            f.at(a, b) = std::max(0.0, val);
        }
    for (int d = 1; d <= k; ++d) {
        double annulus_u = sk.ball_estimate(u, d) - sk.ball_estimate(u, d - 1);
        double annulus_v = sk.ball_estimate(v, d) - sk.ball_estimate(v, d - 1);
        double row = 0.0, col = 0.0;
        for (int x = 1; x <= k; ++x) {
            row += f.at(d, x);
            col += f.at(x, d);
        }
        double adj = d == 1 ? 1.0 : 0.0;  // the assumed-adjacent endpoint
        f.b_u[static_cast<size_t>(d - 1)] = std::max(0.0, annulus_u - adj - row);
        f.b_v[static_cast<size_t>(d - 1)] = std::max(0.0, annulus_v - adj - col);
    }
    return f;
}

}  // namespace linkforge
