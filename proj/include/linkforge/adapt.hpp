#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "linkforge/graph.hpp"
#include "linkforge/matrix_io.hpp"
#include "linkforge/model.hpp"

namespace linkforge {

struct LabeledEdge {
    int u = 0;
    int v = 0;
    uint8_t label = 0;  // 1 = positive
};

// Per-edge logits of every frozen expert: node expert columns first, then
// edge expert columns, in the bank's expert_ids() order.
struct LogitMatrix {
    MatrixF logits;                        // rows = edges, cols = m + n
    std::vector<uint8_t> labels;           // 0/1 per row
    std::vector<std::string> expert_ids;   // fixed column order
};

// Late-fusion zero-shot score: sigma(sigma(l_node) + sigma(l_edge)).
double zero_shot_sum(double node_logit, double edge_logit);

// Branch-level logits under the bank's own eval-mode gate (probability-
// weighted mix of that branch's experts). Used by the zero-shot path.
struct BranchLogits {
    std::vector<double> node;  // one per edge; empty if the branch is absent
    std::vector<double> edge;
};
BranchLogits branch_logits(const ExpertBank& bank, const Graph& g,
                           const std::vector<LabeledEdge>& edges);

// One frozen forward pass per branch; the bank is bit-identical afterwards.
LogitMatrix collect_expert_logits(const ExpertBank& bank, const Graph& g,
                                  const std::vector<LabeledEdge>& edges);

struct AdapterWeights {
    std::vector<double> p;  // one weight per expert column
    double bias = 0.0;      // present only when use_bias was set
    bool use_bias = false;
    int steps = 0;
    double final_train_bce = 0.0;
    uint64_t seed = 0;
};

// Convex logistic fit of the expert-combination weights (no bias by default).
// Adam at the given rate, early stopping on a carved-out validation slice
// with patience 20, deterministic per seed.
AdapterWeights fit_adapter(const LogitMatrix& lm, double lr = 1e-3, int max_steps = 2000,
                           uint64_t seed = 0, bool use_bias = false);

double predict_adapted(const AdapterWeights& w, std::span<const float> expert_logits);

// Per-step training losses from the most recent fit (for the convexity
// property test and logging).
struct AdapterFitTrace {
    std::vector<double> train_bce;
};
AdapterWeights fit_adapter_traced(const LogitMatrix& lm, double lr, int max_steps, uint64_t seed,
                                  bool use_bias, AdapterFitTrace* trace);

// Versioned human-readable persistence: "expert_id weight" lines.
std::string encode_adapter(const AdapterWeights& w, const std::vector<std::string>& expert_ids);
AdapterWeights decode_adapter(const std::string& text, std::vector<std::string>* expert_ids);
void save_adapter(const std::string& path, const AdapterWeights& w,
                  const std::vector<std::string>& expert_ids);
AdapterWeights load_adapter(const std::string& path, std::vector<std::string>* expert_ids);

}  // namespace linkforge
