#pragma once

#include <cstdint>
#include <vector>

#include "linkforge/graph.hpp"

namespace linkforge {

// Pairwise distance-profile counts for an edge (u, v) with receptive field k:
//   a(du, dv) = #nodes at distance exactly du from u and dv from v (du,dv in 1..k)
//   b_u[d]    = #nodes at distance exactly d from u and beyond k from v
//   b_v[d]    = the same with the endpoint roles swapped
struct StructuralFeature {
    int k = 0;
    std::vector<double> a;    // k x k row-major
    std::vector<double> b_u;  // length k
    std::vector<double> b_v;  // length k

    double& at(int du, int dv) { return a[static_cast<size_t>(du - 1) * k + (dv - 1)]; }
    double at(int du, int dv) const { return a[static_cast<size_t>(du - 1) * k + (dv - 1)]; }

    // [a row-major | b_u | b_v], length k*k + 2k.
    std::vector<double> flatten() const;
    static int feature_length(int k) { return k * k + 2 * k; }
};

StructuralFeature exact_counts(const Graph& g, int u, int v, int k, bool mask_edge = false);

// HyperLogLog register array at precision p (2^p registers).
struct CardinalitySketch {
    int p = 0;
    std::vector<uint8_t> regs;

    void init(int precision);
    void add_hash(uint64_t h);
    void merge(const CardinalitySketch& other);
    double estimate() const;
};

// h independent min-hash values (one seeded hash function per slot).
struct MinHashSignature {
    std::vector<uint64_t> mins;

    void init(int h);
    void merge(const MinHashSignature& other);
};

double jaccard_estimate(const MinHashSignature& a, const MinHashSignature& b);

// Per node and per depth t in 1..k: a cardinality sketch and a min-hash
// signature of the ball {w : dist(v, w) <= t}, built by iterated neighbor
// merging. Depth t+1 of v merges depth t of v and of all its neighbors.
class SketchSet {
  public:
    SketchSet() = default;
    SketchSet(const Graph& g, int k, int precision, int signature_size, uint64_t seed,
              int threads = 1);

    int k() const { return k_; }
    int precision() const { return p_; }
    int signature_size() const { return h_; }
    int node_count() const { return n_; }

    const CardinalitySketch& ball_card(int node, int depth) const;
    const MinHashSignature& ball_sig(int node, int depth) const;
    double ball_estimate(int node, int depth) const;  // depth 0 returns exactly 1

    uint64_t element_hash(int node) const;              // hash used by cardinality sketches
    uint64_t slot_hash(int node, int slot) const;       // hash used by signature slot i

  private:
    int n_ = 0, k_ = 0, p_ = 0, h_ = 0;
    uint64_t seed_ = 0;
    uint64_t card_salt_ = 0;
    std::vector<uint64_t> slot_salts_;
    std::vector<CardinalitySketch> cards_;  // n * k, depth-major per node
    std::vector<MinHashSignature> sigs_;
};

StructuralFeature approx_counts(const SketchSet& sketches, int u, int v);

}  // namespace linkforge
