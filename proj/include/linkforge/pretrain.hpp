#pragma once

#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "linkforge/config.hpp"
#include "linkforge/graph.hpp"
#include "linkforge/hop.hpp"
#include "linkforge/model.hpp"
#include "linkforge/sketch.hpp"

namespace linkforge {

// One pretraining unit: a graph with its precomputed hop features. All of the
// shard's edges act as training positives.
struct Shard {
    Graph g;
    HopFeatures hops;
    std::vector<EdgePair> edges;
};

Shard make_shard(Graph g, const TrainConfig& cfg);

// Splits a graph into cfg.pretrain_parts shards (identity when 1).
std::vector<Shard> make_shards(const Graph& g, const TrainConfig& cfg);

// Caches per-edge structural features (log1p-compressed), exact by default or
// sketch-approximated when the config says so.
class StructProvider {
  public:
    StructProvider(const Graph& g, int k, bool mask_edge, bool use_sketch, int precision,
                   int signature_size, uint64_t seed);
    const std::vector<float>& features(int u, int v);
    int feature_length() const { return StructuralFeature::feature_length(k_); }

  private:
    const Graph& g_;
    int k_;
    bool mask_edge_;
    std::optional<SketchSet> sketches_;
    std::unordered_map<int64_t, std::vector<float>> cache_;
};

enum class Branch { node, edge, both };
Branch branch_from_string(const std::string& s);

struct PretrainResult {
    ExpertBank bank;
    // Probe BCE before training (index 0) and after each epoch, per branch.
    std::vector<double> node_probe_bce;
    std::vector<double> edge_probe_bce;
    double node_probe_auc = 0.0;
    double edge_probe_auc = 0.0;
};

// Trains the requested branch(es) independently on the shard set and
// assembles the frozen bank. Deterministic for a fixed config seed.
// log_path, when set, receives one tab-separated line per step:
// step, branch, loss, lr, tau, per-expert load fractions.
PretrainResult pretrain_bank(const std::vector<Shard>& shards, const TrainConfig& cfg,
                             Branch branch, const std::string& log_path = "");

// Fraction of edges hard-assigned to each expert by the eval-mode gate.
std::vector<double> expert_load_fractions(const ExpertBank& bank, const std::string& gate_prefix,
                                          const std::vector<Shard>& shards);

// ---------------------------------------------------------------------------
// Gradient-imbalance study: node-only training vs early fusion (a single
// score head over [h_i * h_j | e_ij]) with bit-identical encoder init.
// ---------------------------------------------------------------------------

struct FusionReport {
    std::vector<double> node_only_loss;
    std::vector<double> fused_loss;
    std::vector<double> node_only_encoder_grad;  // L2 norm per step
    std::vector<double> fused_encoder_grad;
};

FusionReport run_fusion_study(const Graph& g, int steps, uint64_t seed, const TrainConfig& cfg);

}  // namespace linkforge
