#include "linkforge/hop.hpp"

#include <cmath>
#include <filesystem>

#include "linkforge/common.hpp"

namespace linkforge {

NormMode norm_mode_from_string(const std::string& s) {
    if (s == "symmetric") return NormMode::symmetric;
    if (s == "row") return NormMode::row;
    throw ConfigError("unknown norm mode: " + s);
}

std::string to_string(NormMode m) {
    return m == NormMode::symmetric ? "symmetric" : "row";
}

MatrixF HopFeatures::hop_matrix(int hop) const {
    MatrixF m(static_cast<uint64_t>(n), static_cast<uint64_t>(dim));
    for (int i = 0; i < n; ++i) {
        const float* src = slice(i, hop);
        std::copy(src, src + dim, m.row(static_cast<uint64_t>(i)));
    }
    return m;
}

HopFeatures propagate_hops(const Graph& g, int K, NormMode mode, int threads) {
    if (K < 0) throw ConfigError("hop count K must be >= 0");
    int n = g.node_count();
    int d = g.feature_dim();

    HopFeatures out;
    out.n = n;
    out.hops = K;
    out.dim = d;
    out.norm_mode = mode;
    out.data.assign(static_cast<size_t>(n) * (K + 1) * d, 0.0f);

    std::vector<double> cur(static_cast<size_t>(n) * d);
    for (int i = 0; i < n; ++i)
        for (int c = 0; c < d; ++c) {
            float x = g.features().at(static_cast<uint64_t>(i), static_cast<uint64_t>(c));
            out.slice(i, 0)[c] = x;
            cur[static_cast<size_t>(i) * d + c] = x;
        }

    // inv_sqrt[i] = 1/sqrt(deg_i + 1); the +1 is the virtual self-loop.
    std::vector<double> inv_sqrt(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i)
        inv_sqrt[static_cast<size_t>(i)] = 1.0 / std::sqrt(static_cast<double>(g.degree(i)) + 1.0);

    std::vector<double> next(static_cast<size_t>(n) * d);
    for (int hop = 1; hop <= K; ++hop) {
        parallel_for(n, threads, [&](int64_t i) {
            double* dst = next.data() + i * d;
            const int ii = static_cast<int>(i);
            double wself = mode == NormMode::symmetric
                               ? inv_sqrt[i] * inv_sqrt[i]
                               : 1.0 / (static_cast<double>(g.degree(ii)) + 1.0);
            for (int c = 0; c < d; ++c) dst[c] = wself * cur[i * d + c];
            for (int j : g.neighbors(ii)) {
                double w = mode == NormMode::symmetric
                               ? inv_sqrt[i] * inv_sqrt[static_cast<size_t>(j)]
                               : 1.0 / (static_cast<double>(g.degree(ii)) + 1.0);
                const double* src = cur.data() + static_cast<size_t>(j) * d;
                for (int c = 0; c < d; ++c) dst[c] += w * src[c];
            }
        });
        for (int i = 0; i < n; ++i)
            for (int c = 0; c < d; ++c) {
                double v = next[static_cast<size_t>(i) * d + c];
                if (!std::isfinite(v))
                    throw ComputeError("non-finite value during propagation at hop " +
                                       std::to_string(hop));
                out.slice(i, hop)[c] = static_cast<float>(v);
            }
        std::swap(cur, next);
    }
    return out;
}

std::string hop_file_name(const std::string& stem, int hop) {
    return stem + "_hop" + std::to_string(hop) + ".lfmx";
}

void write_hop_features(const std::string& dir, const std::string& stem, const HopFeatures& h) {
    namespace fs = std::filesystem;
    for (int k = 0; k <= h.hops; ++k)
        write_matrix((fs::path(dir) / hop_file_name(stem, k)).string(), h.hop_matrix(k));
}

HopFeatures read_hop_features(const std::string& dir, const std::string& stem, int K,
                              NormMode mode) {
    namespace fs = std::filesystem;
    HopFeatures h;
    h.hops = K;
    h.norm_mode = mode;
    for (int k = 0; k <= K; ++k) {
        MatrixF m = read_matrix((fs::path(dir) / hop_file_name(stem, k)).string());
        if (k == 0) {
            h.n = static_cast<int>(m.rows);
            h.dim = static_cast<int>(m.cols);
            h.data.assign(static_cast<size_t>(h.n) * (K + 1) * h.dim, 0.0f);
        } else if (static_cast<int>(m.rows) != h.n || static_cast<int>(m.cols) != h.dim) {
            throw DataError("hop file shape mismatch at hop " + std::to_string(k));
        }
        for (int i = 0; i < h.n; ++i)
            std::copy(m.row(static_cast<uint64_t>(i)), m.row(static_cast<uint64_t>(i)) + h.dim,
                      h.slice(i, k));
    }
    return h;
}

}  // namespace linkforge
