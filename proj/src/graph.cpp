#include "linkforge/graph.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <deque>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>

#include "linkforge/common.hpp"
#include "linkforge/rng.hpp"

namespace linkforge {

Graph::Graph(int n, const std::vector<EdgePair>& edges, MatrixF features,
             std::vector<int64_t> node_ids)
    : n_(n), feat_(std::move(features)), node_ids_(std::move(node_ids)) {
    if (n < 0) throw DataError("negative node count");
    if (feat_.rows != static_cast<uint64_t>(n))
        throw DataError("feature row count " + std::to_string(feat_.rows) +
                        " does not match node count " + std::to_string(n));
    for (float x : feat_.data)
        if (!std::isfinite(x)) throw DataError("non-finite feature value");
    if (!node_ids_.empty() && node_ids_.size() != static_cast<size_t>(n))
        throw DataError("node id map size mismatch");

    std::vector<std::vector<int>> nbrs(static_cast<size_t>(n));
    for (const auto& e : edges) {
        if (e.u < 0 || e.u >= n || e.v < 0 || e.v >= n)
            throw DataError("edge endpoint out of range: (" + std::to_string(e.u) + "," +
                            std::to_string(e.v) + ") with n=" + std::to_string(n));
        if (e.u == e.v) continue;  // self-loops dropped
        nbrs[static_cast<size_t>(e.u)].push_back(e.v);
        nbrs[static_cast<size_t>(e.v)].push_back(e.u);
    }
    offsets_.assign(static_cast<size_t>(n) + 1, 0);
    for (int v = 0; v < n; ++v) {
        auto& list = nbrs[static_cast<size_t>(v)];
        std::sort(list.begin(), list.end());
        list.erase(std::unique(list.begin(), list.end()), list.end());
        offsets_[static_cast<size_t>(v) + 1] = offsets_[static_cast<size_t>(v)] + list.size();
    }
    adj_.reserve(offsets_[static_cast<size_t>(n)]);
    for (int v = 0; v < n; ++v)
        adj_.insert(adj_.end(), nbrs[static_cast<size_t>(v)].begin(),
                    nbrs[static_cast<size_t>(v)].end());
}

bool Graph::has_edge(int u, int v) const {
    if (u < 0 || u >= n_ || v < 0 || v >= n_) return false;
    auto nb = neighbors(u);
    return std::binary_search(nb.begin(), nb.end(), v);
}

std::vector<EdgePair> Graph::edge_list() const {
    std::vector<EdgePair> out;
    out.reserve(static_cast<size_t>(edge_count()));
    for (int u = 0; u < n_; ++u)
        for (int v : neighbors(u))
            if (u < v) out.push_back({u, v});
    return out;
}

Graph load_graph(std::istream& edge_source, MatrixF features) {
    int n = static_cast<int>(features.rows);
    std::vector<EdgePair> edges;
    std::string line;
    size_t lineno = 0;
    while (std::getline(edge_source, line)) {
        ++lineno;
        size_t start = line.find_first_not_of(" \t\r");
        if (start == std::string::npos || line[start] == '#') continue;
        std::istringstream ls(line);
        long long u, v;
        if (!(ls >> u >> v))
            throw DataError("malformed edge at line " + std::to_string(lineno) + ": " + line);
        if (u < 0 || v < 0 || u >= n || v >= n)
            throw DataError("edge endpoint out of range at line " + std::to_string(lineno));
        edges.push_back({static_cast<int>(u), static_cast<int>(v)});
    }
    return Graph(n, edges, std::move(features));
}

Graph load_graph_files(const std::string& edge_path, const std::string& feature_path) {
    MatrixF feat = read_matrix(feature_path);
    std::ifstream in(edge_path);
    if (!in) throw DataError("cannot open edge list: " + edge_path);
    return load_graph(in, std::move(feat));
}

void save_edge_list(const Graph& g, std::ostream& out) {
    for (const auto& e : g.edge_list()) out << e.u << ' ' << e.v << '\n';
}

namespace {

// Rounds sections to ratio*m, then guarantees every section at least one edge
// by borrowing from the largest (stays within the +-1 rounding contract).
void section_sizes(int64_t m, const double r[3], int64_t out[3]) {
    out[0] = llround(static_cast<double>(m) * r[0]);
    out[1] = llround(static_cast<double>(m) * r[1]);
    out[2] = m - out[0] - out[1];
    for (int i = 0; i < 3; ++i) {
        while (out[i] < 1) {
            int big = 0;
            for (int j = 1; j < 3; ++j)
                if (out[j] > out[big]) big = j;
            if (out[big] <= 1) throw DataError("graph has too few edges to populate all splits");
            --out[big];
            ++out[i];
        }
    }
}

}  // namespace

EdgeSplit split_edges(const Graph& g, double train_ratio, double valid_ratio,
                      double test_ratio, int num_eval_neg, uint64_t seed) {
    const double r[3] = {train_ratio, valid_ratio, test_ratio};
    for (double x : r)
        if (!(x > 0.0)) throw ConfigError("split ratios must be positive");
    if (std::abs(r[0] + r[1] + r[2] - 1.0) > 1e-9)
        throw ConfigError("split ratios must sum to 1");
    if (num_eval_neg < 1) throw ConfigError("num_eval_neg must be >= 1");

    std::vector<EdgePair> edges = g.edge_list();
    int64_t m = static_cast<int64_t>(edges.size());
    if (m < 3) throw DataError("graph has fewer edges than 3; cannot populate all splits");

    int64_t sizes[3];
    section_sizes(m, r, sizes);

    Rng rng(seed);
    rng.shuffle(edges);

    EdgeSplit s;
    s.seed = seed;
    s.ratios[0] = r[0];
    s.ratios[1] = r[1];
    s.ratios[2] = r[2];
    s.num_eval_neg = num_eval_neg;
    s.train_pos.assign(edges.begin(), edges.begin() + sizes[0]);
    s.valid_pos.assign(edges.begin() + sizes[0], edges.begin() + sizes[0] + sizes[1]);
    s.test_pos.assign(edges.begin() + sizes[0] + sizes[1], edges.end());
    std::sort(s.train_pos.begin(), s.train_pos.end());
    std::sort(s.valid_pos.begin(), s.valid_pos.end());
    std::sort(s.test_pos.begin(), s.test_pos.end());

    int n = g.node_count();
    auto sample_negatives = [&](const std::vector<EdgePair>& pos, std::vector<int>& out) {
        out.reserve(pos.size() * static_cast<size_t>(num_eval_neg));
        for (const auto& e : pos) {
            int u = e.u;
            int candidates = n - 1 - g.degree(u);
            if (candidates < num_eval_neg)
                throw DataError("insufficient non-neighbors of node " + std::to_string(u) +
                                " for negative sampling");
            std::vector<int> drawn;
            drawn.reserve(static_cast<size_t>(num_eval_neg));
            while (static_cast<int>(drawn.size()) < num_eval_neg) {
                int w = rng.uniform_int(n);
                if (w == u || g.has_edge(u, w)) continue;
                if (std::find(drawn.begin(), drawn.end(), w) != drawn.end()) continue;
                drawn.push_back(w);
            }
            out.insert(out.end(), drawn.begin(), drawn.end());
        }
    };
    sample_negatives(s.valid_pos, s.valid_neg);
    sample_negatives(s.test_pos, s.test_neg);
    return s;
}

std::vector<EdgePair> sample_training_negatives(const Graph& g, int count, uint64_t seed) {
    if (count < 1) throw ConfigError("negative sample count must be >= 1");
    int n = g.node_count();
    int64_t max_edges = static_cast<int64_t>(n) * (n - 1) / 2;
    if (g.edge_count() >= max_edges)
        throw DataError("graph is complete; no negative pairs exist");
    Rng rng(seed);
    std::vector<EdgePair> out;
    out.reserve(static_cast<size_t>(count));
    while (static_cast<int>(out.size()) < count) {
        int u = rng.uniform_int(n);
        int v = rng.uniform_int(n);
        if (u == v || g.has_edge(u, v)) continue;
        out.push_back({std::min(u, v), std::max(u, v)});
    }
    return out;
}

double partition_balance_slack(int n, int num_parts) {
    return std::max(1.0, 0.25 * static_cast<double>(n) / num_parts);
}

namespace {

// Multi-source BFS hop distances; unreached stays INT_MAX.
std::vector<int> bfs_distances(const Graph& g, const std::vector<int>& sources) {
    std::vector<int> dist(static_cast<size_t>(g.node_count()), std::numeric_limits<int>::max());
    std::deque<int> q;
    for (int s : sources) {
        dist[static_cast<size_t>(s)] = 0;
        q.push_back(s);
    }
    while (!q.empty()) {
        int v = q.front();
        q.pop_front();
        for (int w : g.neighbors(v)) {
            if (dist[static_cast<size_t>(w)] == std::numeric_limits<int>::max()) {
                dist[static_cast<size_t>(w)] = dist[static_cast<size_t>(v)] + 1;
                q.push_back(w);
            }
        }
    }
    return dist;
}

Graph induced_subgraph(const Graph& g, const std::vector<int>& nodes) {
    std::vector<int> remap(static_cast<size_t>(g.node_count()), -1);
    for (size_t i = 0; i < nodes.size(); ++i) remap[static_cast<size_t>(nodes[i])] = static_cast<int>(i);
    std::vector<EdgePair> edges;
    for (int u : nodes) {
        int ru = remap[static_cast<size_t>(u)];
        for (int v : g.neighbors(u)) {
            int rv = remap[static_cast<size_t>(v)];
            if (rv >= 0 && ru < rv) edges.push_back({ru, rv});
        }
    }
    MatrixF feat(nodes.size(), g.features().cols);
    std::vector<int64_t> ids(nodes.size());
    for (size_t i = 0; i < nodes.size(); ++i) {
        const float* src = g.features().row(static_cast<uint64_t>(nodes[i]));
        std::copy(src, src + feat.cols, feat.row(i));
        ids[i] = g.node_ids().empty() ? nodes[i] : g.node_ids()[static_cast<size_t>(nodes[i])];
    }
    return Graph(static_cast<int>(nodes.size()), edges, std::move(feat), std::move(ids));
}

int64_t count_cut_edges(const Graph& g, const std::vector<int>& assign) {
    int64_t cut = 0;
    for (int u = 0; u < g.node_count(); ++u)
        for (int v : g.neighbors(u))
            if (u < v && assign[static_cast<size_t>(u)] != assign[static_cast<size_t>(v)]) ++cut;
    return cut;
}

}  // namespace

Partitioning partition(const Graph& g, int num_parts, uint64_t seed) {
    int n = g.node_count();
    if (num_parts < 1 || num_parts > n)
        throw ConfigError("num_parts must be in [1, node_count]");

    Partitioning p;
    p.assignment.assign(static_cast<size_t>(n), 0);
    if (num_parts == 1) {
        std::vector<int> all(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) all[static_cast<size_t>(i)] = i;
        p.nodes.push_back(all);
        p.parts.push_back(induced_subgraph(g, all));
        p.cut_edges = 0;
        return p;
    }

    Rng rng(seed);
    std::vector<int>& assign = p.assignment;
    std::fill(assign.begin(), assign.end(), -1);

    // Farthest-first seeds: the first is random, each next maximizes BFS hop
    // distance to the chosen set (unreachable components are taken first).
    std::vector<int> seeds;
    seeds.push_back(rng.uniform_int(n));
    while (static_cast<int>(seeds.size()) < num_parts) {
        std::vector<int> dist = bfs_distances(g, seeds);
        int best = -1;
        long long best_d = -1;
        for (int v = 0; v < n; ++v) {
            if (std::find(seeds.begin(), seeds.end(), v) != seeds.end()) continue;
            long long dv = dist[static_cast<size_t>(v)];
            if (dv > best_d) {
                best_d = dv;
                best = v;
            }
        }
        seeds.push_back(best);
    }

    double target = static_cast<double>(n) / num_parts;
    int64_t cap = std::max<int64_t>(1, static_cast<int64_t>(std::floor(1.25 * target)));
    std::vector<std::deque<int>> frontier(static_cast<size_t>(num_parts));
    std::vector<int64_t> size(static_cast<size_t>(num_parts), 0);
    int assigned = 0;

    auto take = [&](int part, int v) {
        assign[static_cast<size_t>(v)] = part;
        ++size[static_cast<size_t>(part)];
        ++assigned;
        for (int w : g.neighbors(v))
            if (assign[static_cast<size_t>(w)] == -1) frontier[static_cast<size_t>(part)].push_back(w);
    };
    for (int i = 0; i < num_parts; ++i)
        if (assign[static_cast<size_t>(seeds[static_cast<size_t>(i)])] == -1)
            take(i, seeds[static_cast<size_t>(i)]);

    // Smallest part grows first; an emptied frontier reseeds at the lowest
    // unassigned node so stranded components cannot starve a part.
    int next_unassigned = 0;
    while (assigned < n) {
        int part = -1;
        for (int i = 0; i < num_parts; ++i) {
            if (size[static_cast<size_t>(i)] >= cap) continue;
            if (part == -1 || size[static_cast<size_t>(i)] < size[static_cast<size_t>(part)]) part = i;
        }
        if (part == -1) ++cap, part = 0;  // all parts full yet nodes remain
        int v = -1;
        auto& fr = frontier[static_cast<size_t>(part)];
        while (!fr.empty()) {
            int cand = fr.front();
            fr.pop_front();
            if (assign[static_cast<size_t>(cand)] == -1) {
                v = cand;
                break;
            }
        }
        if (v == -1) {
            while (assign[static_cast<size_t>(next_unassigned)] != -1) ++next_unassigned;
            v = next_unassigned;
        }
        take(part, v);
    }

    // One greedy pass of boundary moves; every applied move strictly lowers
    // the cut and keeps sizes inside the balance band.
    double slack = partition_balance_slack(n, num_parts);
    double lo = target - slack, hi = target + slack;
    std::vector<int> in_part(static_cast<size_t>(num_parts), 0);
    for (int v = 0; v < n; ++v) {
        int a = assign[static_cast<size_t>(v)];
        std::fill(in_part.begin(), in_part.end(), 0);
        for (int w : g.neighbors(v)) ++in_part[static_cast<size_t>(assign[static_cast<size_t>(w)])];
        int best_part = a;
        int best_gain = 0;
        for (int b = 0; b < num_parts; ++b) {
            if (b == a || in_part[static_cast<size_t>(b)] == 0) continue;
            int gain = in_part[static_cast<size_t>(b)] - in_part[static_cast<size_t>(a)];
            if (gain > best_gain) {
                best_gain = gain;
                best_part = b;
            }
        }
        if (best_part != a && static_cast<double>(size[static_cast<size_t>(a)]) - 1 >= lo &&
            static_cast<double>(size[static_cast<size_t>(best_part)]) + 1 <= hi) {
            assign[static_cast<size_t>(v)] = best_part;
            --size[static_cast<size_t>(a)];
            ++size[static_cast<size_t>(best_part)];
        }
    }

    p.nodes.resize(static_cast<size_t>(num_parts));
    for (int v = 0; v < n; ++v) p.nodes[static_cast<size_t>(assign[static_cast<size_t>(v)])].push_back(v);
    for (int i = 0; i < num_parts; ++i) p.parts.push_back(induced_subgraph(g, p.nodes[static_cast<size_t>(i)]));
    p.cut_edges = count_cut_edges(g, assign);
    return p;
}

namespace {
constexpr char kSplitMagic[4] = {'L', 'F', 'S', 'P'};
constexpr uint32_t kSplitVersion = 1;

void put_edges(std::string& out, const std::vector<EdgePair>& edges) {
    put_u64(out, edges.size());
    for (const auto& e : edges) {
        put_u32(out, static_cast<uint32_t>(e.u));
        put_u32(out, static_cast<uint32_t>(e.v));
    }
}

std::vector<EdgePair> get_edges(ByteReader& r) {
    uint64_t count = r.u64();
    std::vector<EdgePair> edges(count);
    for (auto& e : edges) {
        e.u = static_cast<int>(r.u32());
        e.v = static_cast<int>(r.u32());
    }
    return edges;
}
}  // namespace

std::string encode_split(const EdgeSplit& s) {
    std::string out;
    out.append(kSplitMagic, 4);
    put_u32(out, kSplitVersion);
    put_u64(out, s.seed);
    for (double r : s.ratios) put_f64(out, r);
    put_u32(out, static_cast<uint32_t>(s.num_eval_neg));
    put_edges(out, s.train_pos);
    put_edges(out, s.valid_pos);
    put_edges(out, s.test_pos);
    put_u64(out, s.valid_neg.size());
    for (int w : s.valid_neg) put_u32(out, static_cast<uint32_t>(w));
    put_u64(out, s.test_neg.size());
    for (int w : s.test_neg) put_u32(out, static_cast<uint32_t>(w));
    return out;
}

EdgeSplit decode_split(const std::string& bytes) {
    ByteReader r(bytes);
    char magic[4];
    r.raw(magic, 4);
    if (std::memcmp(magic, kSplitMagic, 4) != 0) throw DataError("bad split magic");
    if (r.u32() != kSplitVersion) throw DataError("unsupported split version");
    EdgeSplit s;
    s.seed = r.u64();
    for (double& x : s.ratios) x = r.f64();
    s.num_eval_neg = static_cast<int>(r.u32());
    s.train_pos = get_edges(r);
    s.valid_pos = get_edges(r);
    s.test_pos = get_edges(r);
    s.valid_neg.resize(r.u64());
    for (int& w : s.valid_neg) w = static_cast<int>(r.u32());
    s.test_neg.resize(r.u64());
    for (int& w : s.test_neg) w = static_cast<int>(r.u32());
    if (!r.at_end()) throw DataError("trailing bytes in split file");
    return s;
}

void write_split(const std::string& path, const EdgeSplit& s) {
    atomic_write_file(path, encode_split(s));
}

EdgeSplit read_split(const std::string& path) {
    return decode_split(read_file_bytes(path));
}

}  // namespace linkforge
