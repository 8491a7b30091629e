#pragma once

#include <cstdint>
#include <string>

#include "linkforge/hop.hpp"
#include "linkforge/model.hpp"
#include "linkforge/optim.hpp"

namespace linkforge {

// Flat key=value configuration with pretraining defaults. Unknown keys are
// rejected; every field is range-checked by validate().
struct TrainConfig {
    // Pretraining schedule and architecture.
    double peak_lr = 1e-4;
    double end_lr = 1e-5;
    int64_t warmup = 10000;
    int epochs = 10;
    int hops = 3;
    int experts_per_branch = 4;
    double dropout = 0.1;
    int hidden = 768;  // encoder width F and score-head hidden width
    int encoder_layers = 2;

    // Artifact-level knobs.
    int batch_size = 4096;
    uint64_t seed = 42;
    int structural_k = 2;
    int sketch_precision = 12;
    int sketch_hashes = 128;
    double tau0 = 1.0;
    double tau_final = 0.1;
    double tau_alpha = 0.8;
    int gate_hidden = 64;
    int gate_latent = 32;
    int batches_per_shard = 8;
    int pretrain_parts = 1;
    std::string norm_mode = "symmetric";
    std::string gate_input = "raw";
    bool mask_edge = false;
    bool hard_routing = false;
    bool use_sketch_counts = false;
    int num_eval_neg = 100;
    double train_ratio = 0.4;
    double valid_ratio = 0.1;
    double test_ratio = 0.5;
    int threads = 1;
    int score_hidden_layers = 3;
    int probe_edges = 256;
    double adapter_lr = 0.001;
    int adapter_steps = 2000;

    void validate() const;
    std::string serialize() const;
    static TrainConfig parse(const std::string& text);
    static TrainConfig load(const std::string& path);
    void save(const std::string& path) const;

    NormMode norm() const { return norm_mode_from_string(norm_mode); }
    TemperatureSchedule temperature_schedule() const { return {tau0, tau_final, tau_alpha}; }
    uint64_t fingerprint() const;
};

}  // namespace linkforge
