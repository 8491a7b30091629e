#include "linkforge/optim.hpp"

#include <cstring>

#include "linkforge/matrix_io.hpp"

namespace linkforge {

double lr_at(int64_t step, const ScheduleConfig& cfg) {
    cfg.validate();
    if (step < 0 || step > cfg.total_steps)
        throw ConfigError("lr_at: step " + std::to_string(step) + " outside [0, " +
                          std::to_string(cfg.total_steps) + "]");
    if (step < cfg.warmup_steps)
        return cfg.peak_lr * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
    double frac = static_cast<double>(step - cfg.warmup_steps) /
                  static_cast<double>(cfg.total_steps - cfg.warmup_steps);
    return cfg.peak_lr + (cfg.end_lr - cfg.peak_lr) * frac;
}

double temperature_at(int64_t epoch, const TemperatureSchedule& sched) {
    sched.validate();
    if (epoch < 0) throw ConfigError("temperature_at: epoch must be >= 0");
    return std::max(sched.tau_final, sched.tau0 * std::pow(sched.alpha, static_cast<double>(epoch)));
}

GradCheckReport finite_difference_check(ParamStore<double>& store,
                                        const std::function<void()>& backward_pass,
                                        const std::function<double()>& forward,
                                        double step) {
    backward_pass();
    std::vector<std::vector<double>> analytic;
    analytic.reserve(store.entries().size());
    for (const auto& e : store.entries()) analytic.push_back(e.grad.a);

    GradCheckReport rep;
    for (size_t pi = 0; pi < store.entries().size(); ++pi) {
        auto& e = store.entries()[pi];
        for (size_t i = 0; i < e.value.size(); ++i) {
            double saved = e.value.a[i];
            e.value.a[i] = saved + step;
            double f_plus = forward();
            e.value.a[i] = saved - step;
            double f_minus = forward();
            e.value.a[i] = saved;
            double fd = (f_plus - f_minus) / (2.0 * step);
            double an = analytic[pi][i];
            double denom = std::max({std::abs(an), std::abs(fd), 1e-3});
            double rel = std::abs(an - fd) / denom;
            if (rel > rep.max_rel_err) {
                rep.max_rel_err = rel;
                rep.worst_param = e.name + "[" + std::to_string(i) + "]";
            }
        }
    }
    return rep;
}

namespace {
constexpr char kCheckpointMagic[4] = {'L', 'F', 'C', 'K'};
constexpr uint32_t kCheckpointVersion = 1;

void put_mat(std::string& out, const ad::Mat<float>& m) {
    put_u64(out, static_cast<uint64_t>(m.rows));
    put_u64(out, static_cast<uint64_t>(m.cols));
    for (float v : m.a) put_f32(out, v);
}

ad::Mat<float> get_mat(ByteReader& r) {
    uint64_t rows = r.u64();
    uint64_t cols = r.u64();
    if (rows > (1ULL << 31) || cols > (1ULL << 31)) throw DataError("checkpoint matrix too large");
    ad::Mat<float> m(static_cast<int>(rows), static_cast<int>(cols));
    for (auto& v : m.a) v = r.f32();
    return m;
}
}  // namespace

std::string encode_params(const ParamStore<float>& store, bool include_adam,
                          const std::string& meta) {
    std::string out;
    out.append(kCheckpointMagic, 4);
    put_u32(out, kCheckpointVersion);
    put_u32(out, include_adam ? 1u : 0u);
    put_u64(out, store.rng_seed);
    put_u64(out, store.entries().size());
    for (const auto& e : store.entries()) {
        put_u32(out, static_cast<uint32_t>(e.name.size()));
        out.append(e.name);
        put_mat(out, e.value);
        if (include_adam) {
            put_u64(out, e.step);
            for (float v : e.m.a) put_f32(out, v);
            for (float v : e.v.a) put_f32(out, v);
        }
    }
    put_u64(out, meta.size());
    out.append(meta);
    return out;
}

ParamStore<float> decode_params(const std::string& bytes, std::string* meta_out) {
    ByteReader r(bytes);
    char magic[4];
    r.raw(magic, 4);
    if (std::memcmp(magic, kCheckpointMagic, 4) != 0) throw DataError("bad checkpoint magic");
    if (r.u32() != kCheckpointVersion) throw DataError("unsupported checkpoint version");
    bool has_adam = r.u32() & 1u;
    ParamStore<float> store;
    store.rng_seed = r.u64();
    uint64_t count = r.u64();
    for (uint64_t i = 0; i < count; ++i) {
        uint32_t name_len = r.u32();
        std::string name(name_len, '\0');
        r.raw(name.data(), name_len);
        ad::Mat<float> value = get_mat(r);
        auto& ref = store.add(name, std::move(value));
        (void)ref;
        if (has_adam) {
            auto& e = store.entry(name);
            e.step = r.u64();
            for (auto& v : e.m.a) v = r.f32();
            for (auto& v : e.v.a) v = r.f32();
        }
    }
    uint64_t meta_len = r.u64();
    std::string meta(meta_len, '\0');
    r.raw(meta.data(), meta_len);
    if (meta_out) *meta_out = meta;
    if (!r.at_end()) throw DataError("trailing bytes in checkpoint");
    return store;
}

void save_params(const std::string& path, const ParamStore<float>& store, bool include_adam,
                 const std::string& meta) {
    atomic_write_file(path, encode_params(store, include_adam, meta));
}

ParamStore<float> load_params(const std::string& path, std::string* meta_out) {
    return decode_params(read_file_bytes(path), meta_out);
}

}  // namespace linkforge
