#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "linkforge/graph.hpp"
#include "linkforge/matrix_io.hpp"
#include "linkforge/model.hpp"

namespace linkforge {

struct EvalReport {
    double mrr = 0.0;
    std::vector<int> per_edge_ranks;
    int num_negatives = 0;
    std::map<int, double> hits_at;  // {1, 3, 10}
    uint64_t seed = 0;

    std::string serialize(bool include_ranks = false) const;
};

enum class SplitSection { valid, test };

// Ranks each positive against its fixed negatives with pessimistic ties:
// rank = 1 + #{strictly better negatives} + #{equal-scoring negatives}.
// score_fn receives the candidate pair (u, w).
EvalReport evaluate_mrr(const std::function<double(int, int)>& score_fn, const EdgeSplit& split,
                        SplitSection which);

// Jaccard overlap of the experts' correct-edge sets on the valid+test
// positives; an edge is correct for an expert when the true target ranks in
// the top 3 among its sampled candidates. Matrix order: node experts then
// edge experts. Entry is 1 when both correct sets are empty, 0 when exactly
// one is.
MatrixF expert_jaccard(const ExpertBank& bank, const Graph& g, const EdgeSplit& split);

// Biased (V-statistic) squared maximum mean discrepancy with an RBF kernel;
// bandwidth is the median pairwise distance over the pooled sample.
double mmd(const MatrixF& sample_a, const MatrixF& sample_b);

struct FlopsConfig {
    int64_t nodes = 0;   // N
    int64_t edges = 0;   // E
    int hops = 0;        // K
    int width = 0;       // F
    double avg_degree = 0.0;  // d, used by the subgraph-extraction estimate
};

enum class FlopsMethod { palp, subgraph };

struct FlopsEstimate {
    uint64_t total = 0;
    uint64_t node_term = 0;
    uint64_t edge_term = 0;
    bool saturated = false;
};

// palp: N*K*F^2 + E*F^2. subgraph: N*d^K*F^2 + E*F^2. Saturates at uint64 max.
FlopsEstimate flops_estimate(const FlopsConfig& cfg, FlopsMethod method);

struct Correlation {
    double r = 0.0;
    double p_value = 1.0;
};

// Pearson r with a two-sided t-test p-value.
Correlation correlate(const std::vector<double>& shift_values,
                      const std::vector<double>& gain_values);

// Area under the ROC curve from positive/negative score samples (rank-based,
// ties counted half). Used by training probes and tests.
double roc_auc(const std::vector<double>& pos_scores, const std::vector<double>& neg_scores);

}  // namespace linkforge
