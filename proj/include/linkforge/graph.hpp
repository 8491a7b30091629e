#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "linkforge/matrix_io.hpp"

namespace linkforge {

struct EdgePair {
    int u = 0;
    int v = 0;
    friend bool operator==(const EdgePair&, const EdgePair&) = default;
    friend auto operator<=>(const EdgePair&, const EdgePair&) = default;
};

// Immutable undirected graph: symmetric CSR adjacency plus node features.
// Neighbor lists are sorted, deduplicated, and self-loop free.
class Graph {
  public:
    Graph() = default;
    Graph(int n, const std::vector<EdgePair>& edges, MatrixF features,
          std::vector<int64_t> node_ids = {});

    int node_count() const { return n_; }
    int64_t edge_count() const { return static_cast<int64_t>(adj_.size()) / 2; }
    int degree(int v) const { return static_cast<int>(offsets_[v + 1] - offsets_[v]); }
    std::span<const int> neighbors(int v) const {
        return {adj_.data() + offsets_[v], adj_.data() + offsets_[v + 1]};
    }
    bool has_edge(int u, int v) const;

    const MatrixF& features() const { return feat_; }
    int feature_dim() const { return static_cast<int>(feat_.cols); }
    const std::vector<int64_t>& node_ids() const { return node_ids_; }

    // Canonical (u < v) edge list, sorted.
    std::vector<EdgePair> edge_list() const;

  private:
    int n_ = 0;
    std::vector<size_t> offsets_;
    std::vector<int> adj_;
    MatrixF feat_;
    std::vector<int64_t> node_ids_;
};

// Edges of a graph cut into disjoint train/valid/test positives, with a fixed
// panel of corrupted-target negatives for each evaluation positive.
struct EdgeSplit {
    uint64_t seed = 0;
    double ratios[3] = {0, 0, 0};
    int num_eval_neg = 0;
    std::vector<EdgePair> train_pos, valid_pos, test_pos;
    // Flattened: negatives for valid_pos[i] are valid_neg[i*num_eval_neg .. +num_eval_neg).
    // Each negative w pairs with the u endpoint of its positive: candidate edge (u, w).
    std::vector<int> valid_neg, test_neg;
};

struct Partitioning {
    std::vector<int> assignment;          // node -> part
    std::vector<Graph> parts;             // induced subgraphs, contiguous ids
    std::vector<std::vector<int>> nodes;  // part -> original node ids (sorted)
    int64_t cut_edges = 0;
};

// Parses "u v" lines (0-based ints, '#' comments) against a feature matrix
// whose row count declares the node count.
Graph load_graph(std::istream& edge_source, MatrixF features);
Graph load_graph_files(const std::string& edge_path, const std::string& feature_path);
void save_edge_list(const Graph& g, std::ostream& out);

EdgeSplit split_edges(const Graph& g, double train_ratio, double valid_ratio,
                      double test_ratio, int num_eval_neg, uint64_t seed);

std::vector<EdgePair> sample_training_negatives(const Graph& g, int count, uint64_t seed);

Partitioning partition(const Graph& g, int num_parts, uint64_t seed);

// Balance slack used by partition(): parts stay within 25% of n/num_parts,
// relaxed to +-1 node where the real-valued bound is unsatisfiable.
double partition_balance_slack(int n, int num_parts);

std::string encode_split(const EdgeSplit& s);
EdgeSplit decode_split(const std::string& bytes);
void write_split(const std::string& path, const EdgeSplit& s);
EdgeSplit read_split(const std::string& path);

}  // namespace linkforge
