#pragma once

#include <string>
#include <vector>

#include "linkforge/graph.hpp"
#include "linkforge/matrix_io.hpp"

namespace linkforge {

enum class NormMode { symmetric, row };

NormMode norm_mode_from_string(const std::string& s);
std::string to_string(NormMode m);

// Stack of K+1 propagated feature slices per node; slice 0 is X itself.
struct HopFeatures {
    int n = 0;
    int hops = 0;  // K
    int dim = 0;
    NormMode norm_mode = NormMode::symmetric;
    std::vector<float> data;  // n x (K+1) x dim, row-major

    const float* slice(int node, int hop) const {
        return data.data() + (static_cast<size_t>(node) * (hops + 1) + hop) * dim;
    }
    float* slice(int node, int hop) {
        return data.data() + (static_cast<size_t>(node) * (hops + 1) + hop) * dim;
    }
    MatrixF hop_matrix(int hop) const;  // n x dim copy of one slice
};

// data[:,k,:] = A_hat^k X with A_hat the degree-normalized adjacency with
// virtual self-loops. Accumulates in double so relabeling a graph permutes
// the output rows bit-exactly.
HopFeatures propagate_hops(const Graph& g, int K, NormMode mode, int threads = 1);

// One "LFMX" file per hop: <stem>_hop0.lfmx .. <stem>_hopK.lfmx.
void write_hop_features(const std::string& dir, const std::string& stem, const HopFeatures& h);
HopFeatures read_hop_features(const std::string& dir, const std::string& stem, int K,
                              NormMode mode);
std::string hop_file_name(const std::string& stem, int hop);

}  // namespace linkforge
