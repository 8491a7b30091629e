#include "linkforge/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "linkforge/common.hpp"
#include "linkforge/rng.hpp"

namespace linkforge {

namespace {

MatrixF clustered_features(const SyntheticSpec& spec, Rng& rng) {
    MatrixF feat(static_cast<uint64_t>(spec.nodes), static_cast<uint64_t>(spec.feat_dim));
    std::vector<std::vector<double>> means(static_cast<size_t>(spec.feature_clusters),
                                           std::vector<double>(static_cast<size_t>(spec.feat_dim)));
    for (auto& mu : means)
        for (auto& v : mu) v = spec.region_shift + spec.cluster_scale * rng.normal();
    for (int i = 0; i < spec.nodes; ++i) {
        const auto& mu = means[static_cast<size_t>(i % spec.feature_clusters)];
        for (int c = 0; c < spec.feat_dim; ++c)
            feat.at(static_cast<uint64_t>(i), static_cast<uint64_t>(c)) =
                static_cast<float>(mu[static_cast<size_t>(c)] + spec.noise_scale * rng.normal());
    }
    return feat;
}

double dot_rows(const MatrixF& feat, int i, int j) {
    double s = 0.0;
    for (uint64_t c = 0; c < feat.cols; ++c)
        s += static_cast<double>(feat.at(static_cast<uint64_t>(i), c)) *
             feat.at(static_cast<uint64_t>(j), c);
    return s;
}

}  // namespace

Graph make_feature_link_graph(const SyntheticSpec& spec) {
    Rng rng(spec.seed);
    MatrixF feat = clustered_features(spec, rng);
    int n = spec.nodes;

    std::vector<std::pair<double, EdgePair>> scored;
    scored.reserve(static_cast<size_t>(n) * (n - 1) / 2);
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j)
            scored.push_back({spec.mechanism_sign * dot_rows(feat, i, j), {i, j}});
    size_t target = static_cast<size_t>(spec.avg_degree * n / 2.0);
    target = std::min(target, scored.size());
    std::partial_sort(scored.begin(), scored.begin() + static_cast<long>(target), scored.end(),
                      [](const auto& a, const auto& b) {
                          return a.first != b.first ? a.first > b.first : a.second < b.second;
                      });
    std::vector<EdgePair> edges;
    edges.reserve(target);
    for (size_t i = 0; i < target; ++i) edges.push_back(scored[i].second);
    return Graph(n, edges, std::move(feat));
}

Graph make_closure_link_graph(const SyntheticSpec& spec) {
    Rng rng(spec.seed);
    MatrixF feat = clustered_features(spec, rng);
    int n = spec.nodes;
    size_t target = static_cast<size_t>(spec.avg_degree * n / 2.0);

    std::set<EdgePair> edges;
    std::vector<std::set<int>> nbr(static_cast<size_t>(n));
    auto add_edge = [&](int a, int b) {
        if (a == b) return false;
        EdgePair e{std::min(a, b), std::max(a, b)};
        if (!edges.insert(e).second) return false;
        nbr[static_cast<size_t>(a)].insert(b);
        nbr[static_cast<size_t>(b)].insert(a);
        return true;
    };

    // Sparse random scaffold (~30% of the budget), then close open wedges.
    size_t scaffold = std::max<size_t>(n - 1, target * 3 / 10);
    while (edges.size() < scaffold) add_edge(rng.uniform_int(n), rng.uniform_int(n));
    int stall = 0;
    while (edges.size() < target && stall < 20000) {
        int v = rng.uniform_int(n);
        const auto& nv = nbr[static_cast<size_t>(v)];
        if (nv.size() < 2) {
            ++stall;
            continue;
        }
        // pick two distinct neighbors of v, connect them
        int a = rng.uniform_int(static_cast<int>(nv.size()));
        int b = rng.uniform_int(static_cast<int>(nv.size()));
        if (a == b) {
            ++stall;
            continue;
        }
        auto ita = nv.begin(), itb = nv.begin();
        std::advance(ita, a);
        std::advance(itb, b);
        if (!add_edge(*ita, *itb)) ++stall;
    }
    std::vector<EdgePair> edge_list(edges.begin(), edges.end());
    return Graph(n, edge_list, std::move(feat));
}

Graph make_mixed_mechanism_graph(const SyntheticSpec& spec) {
    int half = spec.nodes / 2;
    SyntheticSpec a = spec;
    a.nodes = half;
    a.seed = spec.seed * 2 + 1;
    SyntheticSpec b = spec;
    b.nodes = spec.nodes - half;
    b.seed = spec.seed * 2 + 2;
    b.region_shift = spec.region_shift - 2.0 * spec.cluster_scale;

    Graph ga = make_feature_link_graph(a);
    Graph gb = make_closure_link_graph(b);

    MatrixF feat(static_cast<uint64_t>(spec.nodes), static_cast<uint64_t>(spec.feat_dim));
    for (int i = 0; i < half; ++i)
        std::copy(ga.features().row(static_cast<uint64_t>(i)),
                  ga.features().row(static_cast<uint64_t>(i)) + spec.feat_dim,
                  feat.row(static_cast<uint64_t>(i)));
    for (int i = 0; i < spec.nodes - half; ++i)
        std::copy(gb.features().row(static_cast<uint64_t>(i)),
                  gb.features().row(static_cast<uint64_t>(i)) + spec.feat_dim,
                  feat.row(static_cast<uint64_t>(half + i)));

    std::vector<EdgePair> edges = ga.edge_list();
    for (const auto& e : gb.edge_list()) edges.push_back({e.u + half, e.v + half});
    // a few deterministic bridges keep the graph connected
    Rng rng(spec.seed * 2 + 3);
    int bridges = std::max(2, spec.nodes / 50);
    for (int i = 0; i < bridges; ++i)
        edges.push_back({rng.uniform_int(half), half + rng.uniform_int(spec.nodes - half)});
    return Graph(spec.nodes, edges, std::move(feat));
}

void write_demo_dataset(const std::string& dir, int nodes, int feat_dim, uint64_t seed) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    SyntheticSpec spec;
    spec.nodes = nodes;
    spec.feat_dim = feat_dim;
    spec.seed = seed;
    spec.avg_degree = 10.0;
    Graph g = make_mixed_mechanism_graph(spec);
    std::string edges_text = "# demo graph: " + std::to_string(g.node_count()) + " nodes, " +
                             std::to_string(g.edge_count()) + " edges\n";
    for (const auto& e : g.edge_list())
        edges_text += std::to_string(e.u) + " " + std::to_string(e.v) + "\n";
    atomic_write_file((fs::path(dir) / "edges.txt").string(), edges_text);
    write_matrix((fs::path(dir) / "features.lfmx").string(), g.features());
}

}  // namespace linkforge
