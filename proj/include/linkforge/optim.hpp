#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "linkforge/autodiff.hpp"
#include "linkforge/common.hpp"

namespace linkforge {

// Named parameter arrays with their gradient buffers and per-parameter Adam
// state. Iteration order is insertion order, which keeps checkpoints and
// updates deterministic.
template <typename Real>
class ParamStore {
  public:
    struct Entry {
        std::string name;
        ad::Mat<Real> value;
        ad::Mat<Real> grad;
        ad::Mat<Real> m;  // first moment
        ad::Mat<Real> v;  // second moment
        uint64_t step = 0;
    };

    uint64_t rng_seed = 0;

    ad::Mat<Real>& add(const std::string& name, ad::Mat<Real> init) {
        if (index_.count(name)) throw ComputeError("duplicate parameter: " + name);
        Entry e;
        e.name = name;
        e.grad = ad::Mat<Real>(init.rows, init.cols);
        e.m = ad::Mat<Real>(init.rows, init.cols);
        e.v = ad::Mat<Real>(init.rows, init.cols);
        e.value = std::move(init);
        index_[name] = entries_.size();
        entries_.push_back(std::move(e));
        return entries_.back().value;
    }

    bool has(const std::string& name) const { return index_.count(name) != 0; }

    Entry& entry(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw ComputeError("unknown parameter: " + name);
        return entries_[it->second];
    }
    const Entry& entry(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw ComputeError("unknown parameter: " + name);
        return entries_[it->second];
    }

    std::vector<Entry>& entries() { return entries_; }
    const std::vector<Entry>& entries() const { return entries_; }

    void zero_grads() {
        for (auto& e : entries_) std::fill(e.grad.a.begin(), e.grad.a.end(), Real(0));
    }

  private:
    std::vector<Entry> entries_;
    std::unordered_map<std::string, size_t> index_;
};

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Bias-corrected Adam over every entry. Aborts before mutating anything if a
// gradient is non-finite.
template <typename Real>
void adam_step(ParamStore<Real>& store, double lr, const AdamConfig& cfg = {}) {
    for (const auto& e : store.entries())
        for (Real g : e.grad.a)
            if (!std::isfinite(static_cast<double>(g)))
                throw ComputeError("non-finite gradient for parameter " + e.name +
                                   "; step aborted");
    for (auto& e : store.entries()) {
        e.step += 1;
        double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(e.step));
        double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(e.step));
        for (size_t i = 0; i < e.value.size(); ++i) {
            double g = static_cast<double>(e.grad.a[i]);
            double m = cfg.beta1 * static_cast<double>(e.m.a[i]) + (1.0 - cfg.beta1) * g;
            double v = cfg.beta2 * static_cast<double>(e.v.a[i]) + (1.0 - cfg.beta2) * g * g;
            e.m.a[i] = static_cast<Real>(m);
            e.v.a[i] = static_cast<Real>(v);
            double update = lr * (m / bc1) / (std::sqrt(v / bc2) + cfg.eps);
            e.value.a[i] = static_cast<Real>(static_cast<double>(e.value.a[i]) - update);
            if (!std::isfinite(static_cast<double>(e.value.a[i])))
                throw ComputeError("non-finite parameter after update: " + e.name);
        }
    }
}

// Linear warmup from 0 to peak_lr, then linear decay to end_lr.
struct ScheduleConfig {
    double peak_lr = 1e-4;
    double end_lr = 1e-5;
    int64_t warmup_steps = 10000;
    int64_t total_steps = 0;

    void validate() const {
        if (!(end_lr > 0.0) || end_lr > peak_lr)
            throw ConfigError("schedule requires 0 < end_lr <= peak_lr");
        if (warmup_steps < 0 || warmup_steps >= total_steps)
            throw ConfigError("schedule requires 0 <= warmup_steps < total_steps");
    }
};

double lr_at(int64_t step, const ScheduleConfig& cfg);

// tau_t = max(tau_final, tau0 * alpha^t), annealed per epoch.
struct TemperatureSchedule {
    double tau0 = 1.0;
    double tau_final = 0.1;
    double alpha = 0.8;

    void validate() const {
        if (!(tau_final > 0.0) || tau_final > tau0)
            throw ConfigError("temperature schedule requires 0 < tau_final <= tau0");
        if (!(alpha > 0.0) || !(alpha < 1.0))
            throw ConfigError("temperature decay alpha must be in (0, 1)");
    }
};

double temperature_at(int64_t epoch, const TemperatureSchedule& sched);

// ---------------------------------------------------------------------------
// Finite-difference gradient verification (64-bit mode).
// ---------------------------------------------------------------------------

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::string worst_param;
};

// backward_pass: zero grads, run forward + backward, leave gradients in the
// store. forward: evaluate the same scalar loss from current store values.
// Both must be deterministic (re-seed any rng they consume).
GradCheckReport finite_difference_check(ParamStore<double>& store,
                                        const std::function<void()>& backward_pass,
                                        const std::function<double()>& forward,
                                        double step = 1e-5);

// ---------------------------------------------------------------------------
// Checkpoint container ("LFCK"): named parameter table with optional Adam
// state and an opaque metadata string. Round trips are bit-exact.
// ---------------------------------------------------------------------------

std::string encode_params(const ParamStore<float>& store, bool include_adam,
                          const std::string& meta);
ParamStore<float> decode_params(const std::string& bytes, std::string* meta_out = nullptr);
void save_params(const std::string& path, const ParamStore<float>& store, bool include_adam,
                 const std::string& meta = "");
ParamStore<float> load_params(const std::string& path, std::string* meta_out = nullptr);

}  // namespace linkforge
