#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "linkforge/graph.hpp"

namespace linkforge {

// Synthetic benchmark graphs with planted link mechanisms. Features live in
// well-separated clusters so gate features carry region identity.

struct SyntheticSpec {
    int nodes = 100;
    int feat_dim = 16;
    double avg_degree = 8.0;
    uint64_t seed = 1;
    int feature_clusters = 2;       // cluster count within the generated region
    double cluster_scale = 4.0;     // separation of cluster means
    double noise_scale = 1.0;       // per-node feature noise
    double region_shift = 0.0;      // added to every mean (region identity)
    int mechanism_sign = +1;        // +1 links similar pairs, -1 dissimilar
};

// Links the top pairs by mechanism_sign * <x_i, x_j>. Feature proximity is
// the only signal; structure is whatever the feature rule induces.
Graph make_feature_link_graph(const SyntheticSpec& spec);

// Random seed edges plus triangle-closing edges: pairs with a common neighbor
// get connected until the degree target is met. Features are noise around the
// cluster means, so only structure predicts links.
Graph make_closure_link_graph(const SyntheticSpec& spec);

// Two halves: one feature-linked region, one closure-linked region, plus a
// few random bridges so the graph is connected.
Graph make_mixed_mechanism_graph(const SyntheticSpec& spec);

// The bundled demo dataset: a small mixed-mechanism graph written as an edge
// list and a feature matrix.
void write_demo_dataset(const std::string& dir, int nodes = 100, int feat_dim = 16,
                        uint64_t seed = 7);

}  // namespace linkforge
