#pragma once

// Minimal reverse-mode autodiff over dense matrices. A Tape owns value/grad
// buffers plus per-node backward closures; ops build the graph eagerly and
// backward() replays it in reverse. Templated on the scalar so the same ops
// run in float for training and in double for finite-difference checks.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "linkforge/common.hpp"
#include "linkforge/rng.hpp"

namespace linkforge::ad {

template <typename Real>
struct Mat {
    int rows = 0;
    int cols = 0;
    std::vector<Real> a;

    Mat() = default;
    Mat(int r, int c) : rows(r), cols(c), a(static_cast<size_t>(r) * c, Real(0)) {}

    Real& operator()(int r, int c) { return a[static_cast<size_t>(r) * cols + c]; }
    Real operator()(int r, int c) const { return a[static_cast<size_t>(r) * cols + c]; }
    size_t size() const { return a.size(); }

    static Mat full(int r, int c, Real v) {
        Mat m(r, c);
        std::fill(m.a.begin(), m.a.end(), v);
        return m;
    }
};

template <typename Real>
void ensure_finite(const Mat<Real>& m, const char* op) {
    for (Real v : m.a)
        if (!std::isfinite(static_cast<double>(v)))
            throw ComputeError(std::string("non-finite activation in op ") + op);
}

template <typename Real>
class Tape;

template <typename Real>
struct Var {
    Tape<Real>* tape = nullptr;
    int id = -1;

    const Mat<Real>& val() const { return tape->val(id); }
    const Mat<Real>& grad() const { return tape->grad(id); }
    int rows() const { return val().rows; }
    int cols() const { return val().cols; }
};

template <typename Real>
class Tape {
  public:
    using BackFn = std::function<void(Tape&, int self)>;

    Var<Real> leaf(Mat<Real> v) {
        Node n;
        n.grad = Mat<Real>(v.rows, v.cols);
        n.val = std::move(v);
        nodes_.push_back(std::move(n));
        return {this, static_cast<int>(nodes_.size()) - 1};
    }

    Var<Real> make(Mat<Real> v, BackFn back) {
        Node n;
        n.grad = Mat<Real>(v.rows, v.cols);
        n.val = std::move(v);
        n.back = std::move(back);
        nodes_.push_back(std::move(n));
        return {this, static_cast<int>(nodes_.size()) - 1};
    }

    Mat<Real>& val(int id) { return nodes_[static_cast<size_t>(id)].val; }
    Mat<Real>& grad(int id) { return nodes_[static_cast<size_t>(id)].grad; }

    // Seeds d(loss)/d(loss) = 1 and accumulates gradients into every node the
    // loss depends on. The loss must be 1x1.
    void backward(Var<Real> loss) {
        if (loss.tape != this) throw ComputeError("backward: variable from another tape");
        auto& ln = nodes_[static_cast<size_t>(loss.id)];
        if (ln.val.rows != 1 || ln.val.cols != 1)
            throw ComputeError("backward: loss must be scalar");
        ln.grad(0, 0) = Real(1);
        for (int i = loss.id; i >= 0; --i) {
            auto& nd = nodes_[static_cast<size_t>(i)];
            if (nd.back) nd.back(*this, i);
        }
    }

    size_t size() const { return nodes_.size(); }

  private:
    struct Node {
        Mat<Real> grad;
        Mat<Real> val;
        BackFn back;
    };
    std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Elementwise / shape ops
// ---------------------------------------------------------------------------

template <typename Real>
Var<Real> add(Var<Real> a, Var<Real> b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) throw ComputeError("add: shape mismatch");
    Mat<Real> out = a.val();
    for (size_t i = 0; i < out.size(); ++i) out.a[i] += b.val().a[i];
    ensure_finite(out, "add");
    int ai = a.id, bi = b.id;
    return a.tape->make(std::move(out), [ai, bi](Tape<Real>& t, int self) {
        const auto& g = t.grad(self);
        auto& ga = t.grad(ai);
        auto& gb = t.grad(bi);
        for (size_t i = 0; i < g.size(); ++i) {
            ga.a[i] += g.a[i];
            gb.a[i] += g.a[i];
        }
    });
}

// Broadcasts a 1 x C row vector (bias) onto every row of a.
template <typename Real>
Var<Real> add_rowvec(Var<Real> a, Var<Real> b) {
    if (b.rows() != 1 || b.cols() != a.cols()) throw ComputeError("add_rowvec: shape mismatch");
    Mat<Real> out = a.val();
    for (int r = 0; r < out.rows; ++r)
        for (int c = 0; c < out.cols; ++c) out(r, c) += b.val()(0, c);
    ensure_finite(out, "add_rowvec");
    int ai = a.id, bi = b.id;
    return a.tape->make(std::move(out), [ai, bi](Tape<Real>& t, int self) {
        const auto& g = t.grad(self);
        auto& ga = t.grad(ai);
        auto& gb = t.grad(bi);
        for (int r = 0; r < g.rows; ++r)
            for (int c = 0; c < g.cols; ++c) {
                ga(r, c) += g(r, c);
                gb(0, c) += g(r, c);
            }
    });
}

template <typename Real>
Var<Real> sub(Var<Real> a, Var<Real> b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) throw ComputeError("sub: shape mismatch");
    Mat<Real> out = a.val();
    for (size_t i = 0; i < out.size(); ++i) out.a[i] -= b.val().a[i];
    ensure_finite(out, "sub");
    int ai = a.id, bi = b.id;
    return a.tape->make(std::move(out), [ai, bi](Tape<Real>& t, int self) {
        const auto& g = t.grad(self);
        auto& ga = t.grad(ai);
        auto& gb = t.grad(bi);
        for (size_t i = 0; i < g.size(); ++i) {
            ga.a[i] += g.a[i];
            gb.a[i] -= g.a[i];
        }
    });
}

template <typename Real>
Var<Real> scale(Var<Real> a, double s) {
    Mat<Real> out = a.val();
    for (auto& v : out.a) v = static_cast<Real>(v * s);
    ensure_finite(out, "scale");
    int ai = a.id;
    return a.tape->make(std::move(out), [ai, s](Tape<Real>& t, int self) {
        const auto& g = t.grad(self);
        auto& ga = t.grad(ai);
        for (size_t i = 0; i < g.size(); ++i) ga.a[i] += static_cast<Real>(g.a[i] * s);
    });
}

// Hadamard product; realizes the element-wise pooling of endpoint embeddings.
template <typename Real>
Var<Real> elementwise_product(Var<Real> a, Var<Real> b) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw ComputeError("elementwise_product: shape mismatch");
    Mat<Real> out = a.val();
    for (size_t i = 0; i < out.size(); ++i) out.a[i] *= b.val().a[i];
    ensure_finite(out, "elementwise_product");
    int ai = a.id, bi = b.id;
    return a.tape->make(std::move(out), [ai, bi](Tape<Real>& t, int self) {
        const auto& g = t.grad(self);
        const auto& va = t.val(ai);
        const auto& vb = t.val(bi);
        auto& ga = t.grad(ai);
        auto& gb = t.grad(bi);
        for (size_t i = 0; i < g.size(); ++i) {
            ga.a[i] += g.a[i] * vb.a[i];
            gb.a[i] += g.a[i] * va.a[i];
        }
    });
}

template <typename Real>
Var<Real> matmul(Var<Real> a, Var<Real> b) {
    if (a.cols() != b.rows()) throw ComputeError("matmul: shape mismatch");
    const auto& va = a.val();
    const auto& vb = b.val();
    Mat<Real> out(va.rows, vb.cols);
    for (int i = 0; i < va.rows; ++i)
        for (int k = 0; k < va.cols; ++k) {
            Real aik = va(i, k);
            if (aik == Real(0)) continue;
            for (int j = 0; j < vb.cols; ++j) out(i, j) += aik * vb(k, j);
        }
    ensure_finite(out, "matmul");
    int ai = a.id, bi = b.id;
    return a.tape->make(std::move(out), [ai, bi](Tape<Real>& t, int self) {
        const auto& g = t.grad(self);
        const auto& va2 = t.val(ai);
        const auto& vb2 = t.val(bi);
        auto& ga = t.grad(ai);
        auto& gb = t.grad(bi);
        // dA += G B^T
        for (int i = 0; i < va2.rows; ++i)
            for (int j = 0; j < vb2.cols; ++j) {
                Real gij = g(i, j);
                if (gij == Real(0)) continue;
                for (int k = 0; k < va2.cols; ++k) ga(i, k) += gij * vb2(k, j);
            }
        // dB += A^T G
        for (int k = 0; k < va2.cols; ++k)
            for (int i = 0; i < va2.rows; ++i) {
                Real aik = va2(i, k);
                if (aik == Real(0)) continue;
                for (int j = 0; j < vb2.cols; ++j) gb(k, j) += aik * g(i, j);
            }
    });
}

template <typename Real>
Var<Real> relu(Var<Real> a) {
    Mat<Real> out = a.val();
    for (auto& v : out.a) v = v > Real(0) ? v : Real(0);
    int ai = a.id;
    return a.tape->make(std::move(out), [ai](Tape<Real>& t, int self) {
        const auto& g = t.grad(self);
        const auto& va = t.val(ai);
        auto& ga = t.grad(ai);
        for (size_t i = 0; i < g.size(); ++i)
            if (va.a[i] > Real(0)) ga.a[i] += g.a[i];
    });
}

inline double sigmoid_stable(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    double e = std::exp(x);
    return e / (1.0 + e);
}

// log(1 + e^x) without overflow.
inline double softplus_stable(double x) {
    return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

template <typename Real>
Var<Real> sigmoid(Var<Real> a) {
    Mat<Real> out = a.val();
    for (auto& v : out.a) v = static_cast<Real>(sigmoid_stable(static_cast<double>(v)));
    ensure_finite(out, "sigmoid");
    int ai = a.id;
    return a.tape->make(std::move(out), [ai](Tape<Real>& t, int self) {
        const auto& g = t.grad(self);
        const auto& y = t.val(self);
        auto& ga = t.grad(ai);
        for (size_t i = 0; i < g.size(); ++i) ga.a[i] += g.a[i] * y.a[i] * (Real(1) - y.a[i]);
    });
}

template <typename Real>
Var<Real> softmax_rows(Var<Real> a) {
    const auto& v = a.val();
    Mat<Real> out(v.rows, v.cols);
    for (int r = 0; r < v.rows; ++r) {
        Real mx = v(r, 0);
        for (int c = 1; c < v.cols; ++c) mx = std::max(mx, v(r, c));
        double sum = 0.0;
        for (int c = 0; c < v.cols; ++c) {
            double e = std::exp(static_cast<double>(v(r, c) - mx));
            out(r, c) = static_cast<Real>(e);
            sum += e;
        }
        for (int c = 0; c < v.cols; ++c) out(r, c) = static_cast<Real>(out(r, c) / sum);
    }
    ensure_finite(out, "softmax");
    int ai = a.id;
    return a.tape->make(std::move(out), [ai](Tape<Real>& t, int self) {
        const auto& g = t.grad(self);
        const auto& y = t.val(self);
        auto& ga = t.grad(ai);
        for (int r = 0; r < g.rows; ++r) {
            Real dot = Real(0);
            for (int c = 0; c < g.cols; ++c) dot += g(r, c) * y(r, c);
            for (int c = 0; c < g.cols; ++c) ga(r, c) += y(r, c) * (g(r, c) - dot);
        }
    });
}

template <typename Real>
Var<Real> layer_norm_rows(Var<Real> a, Var<Real> gain, Var<Real> bias, double eps = 1e-5) {
    if (gain.rows() != 1 || gain.cols() != a.cols() || bias.rows() != 1 ||
        bias.cols() != a.cols())
        throw ComputeError("layer_norm: shape mismatch");
    const auto& v = a.val();
    Mat<Real> out(v.rows, v.cols);
    Mat<Real> xhat(v.rows, v.cols);
    std::vector<Real> inv_std(static_cast<size_t>(v.rows));
    for (int r = 0; r < v.rows; ++r) {
        double mu = 0.0;
        for (int c = 0; c < v.cols; ++c) mu += static_cast<double>(v(r, c));
        mu /= v.cols;
        double var = 0.0;
        for (int c = 0; c < v.cols; ++c) {
            double d = static_cast<double>(v(r, c)) - mu;
            var += d * d;
        }
        var /= v.cols;
        double is = 1.0 / std::sqrt(var + eps);
        inv_std[static_cast<size_t>(r)] = static_cast<Real>(is);
        for (int c = 0; c < v.cols; ++c) {
            Real xh = static_cast<Real>((static_cast<double>(v(r, c)) - mu) * is);
            xhat(r, c) = xh;
            out(r, c) = xh * gain.val()(0, c) + bias.val()(0, c);
        }
    }
    ensure_finite(out, "layer_norm");
    int ai = a.id, gi = gain.id, bi = bias.id;
    return a.tape->make(std::move(out),
                        [ai, gi, bi, xhat = std::move(xhat), inv_std = std::move(inv_std)](
                            Tape<Real>& t, int self) {
        const auto& g = t.grad(self);
        const auto& gn = t.val(gi);
        auto& ga = t.grad(ai);
        auto& gg = t.grad(gi);
        auto& gb = t.grad(bi);
        int cols = g.cols;
        for (int r = 0; r < g.rows; ++r) {
            Real m1 = Real(0), m2 = Real(0);
            for (int c = 0; c < cols; ++c) {
                Real dxh = g(r, c) * gn(0, c);
                m1 += dxh;
                m2 += dxh * xhat(r, c);
                gg(0, c) += g(r, c) * xhat(r, c);
                gb(0, c) += g(r, c);
            }
            m1 /= static_cast<Real>(cols);
            m2 /= static_cast<Real>(cols);
            for (int c = 0; c < cols; ++c) {
                Real dxh = g(r, c) * gn(0, c);
                ga(r, c) += inv_std[static_cast<size_t>(r)] * (dxh - m1 - xhat(r, c) * m2);
            }
        }
    });
}

// Inverted dropout: keeps with probability 1-rate and scales by 1/(1-rate).
// Identity in eval mode. The mask is drawn from rng at build time, so a
// replayed forward with the same rng state reproduces the same function.
template <typename Real>
Var<Real> dropout(Var<Real> a, double rate, Rng* rng, bool train) {
    if (rate < 0.0 || rate >= 1.0) throw ConfigError("dropout rate must be in [0, 1)");
    if (!train || rate == 0.0) return a;
    if (rng == nullptr) throw ComputeError("dropout: train mode needs rng");
    Mat<Real> out = a.val();
    std::vector<uint8_t> keep(out.size());
    Real s = static_cast<Real>(1.0 / (1.0 - rate));
    for (size_t i = 0; i < out.size(); ++i) {
        keep[i] = rng->uniform() >= rate ? 1 : 0;
        out.a[i] = keep[i] ? out.a[i] * s : Real(0);
    }
    int ai = a.id;
    return a.tape->make(std::move(out),
                        [ai, keep = std::move(keep), s](Tape<Real>& t, int self) {
        const auto& g = t.grad(self);
        auto& ga = t.grad(ai);
        for (size_t i = 0; i < g.size(); ++i)
            if (keep[i]) ga.a[i] += g.a[i] * s;
    });
}

template <typename Real>
Var<Real> row_sum(Var<Real> a) {
    const auto& v = a.val();
    Mat<Real> out(v.rows, 1);
    for (int r = 0; r < v.rows; ++r) {
        Real s = Real(0);
        for (int c = 0; c < v.cols; ++c) s += v(r, c);
        out(r, 0) = s;
    }
    ensure_finite(out, "row_sum");
    int ai = a.id;
    return a.tape->make(std::move(out), [ai](Tape<Real>& t, int self) {
        const auto& g = t.grad(self);
        auto& ga = t.grad(ai);
        for (int r = 0; r < ga.rows; ++r)
            for (int c = 0; c < ga.cols; ++c) ga(r, c) += g(r, 0);
    });
}

template <typename Real>
Var<Real> sum_all(Var<Real> a) {
    const auto& v = a.val();
    Mat<Real> out(1, 1);
    Real s = Real(0);
    for (Real x : v.a) s += x;
    out(0, 0) = s;
    ensure_finite(out, "sum_all");
    int ai = a.id;
    return a.tape->make(std::move(out), [ai](Tape<Real>& t, int self) {
        const auto& g = t.grad(self);
        auto& ga = t.grad(ai);
        for (auto& x : ga.a) x += g(0, 0);
    });
}

template <typename Real>
Var<Real> mean_all(Var<Real> a) {
    size_t n = a.val().size();
    if (n == 0) throw ComputeError("mean_all: empty input");
    return scale(sum_all(a), 1.0 / static_cast<double>(n));
}

template <typename Real>
Var<Real> concat_cols(Var<Real> a, Var<Real> b) {
    if (a.rows() != b.rows()) throw ComputeError("concat_cols: row mismatch");
    const auto& va = a.val();
    const auto& vb = b.val();
    Mat<Real> out(va.rows, va.cols + vb.cols);
    for (int r = 0; r < va.rows; ++r) {
        for (int c = 0; c < va.cols; ++c) out(r, c) = va(r, c);
        for (int c = 0; c < vb.cols; ++c) out(r, va.cols + c) = vb(r, c);
    }
    int ai = a.id, bi = b.id, ac = va.cols;
    return a.tape->make(std::move(out), [ai, bi, ac](Tape<Real>& t, int self) {
        const auto& g = t.grad(self);
        auto& ga = t.grad(ai);
        auto& gb = t.grad(bi);
        for (int r = 0; r < g.rows; ++r) {
            for (int c = 0; c < ga.cols; ++c) ga(r, c) += g(r, c);
            for (int c = 0; c < gb.cols; ++c) gb(r, c) += g(r, ac + c);
        }
    });
}

template <typename Real>
Var<Real> slice_rows(Var<Real> a, int r0, int r1) {
    if (r0 < 0 || r1 < r0 || r1 > a.rows()) throw ComputeError("slice_rows: bad range");
    const auto& v = a.val();
    Mat<Real> out(r1 - r0, v.cols);
    for (int r = r0; r < r1; ++r)
        for (int c = 0; c < v.cols; ++c) out(r - r0, c) = v(r, c);
    int ai = a.id;
    return a.tape->make(std::move(out), [ai, r0](Tape<Real>& t, int self) {
        const auto& g = t.grad(self);
        auto& ga = t.grad(ai);
        for (int r = 0; r < g.rows; ++r)
            for (int c = 0; c < g.cols; ++c) ga(r + r0, c) += g(r, c);
    });
}

template <typename Real>
Var<Real> gather_rows(Var<Real> a, std::vector<int> idx) {
    const auto& v = a.val();
    for (int i : idx)
        if (i < 0 || i >= v.rows) throw ComputeError("gather_rows: index out of range");
    Mat<Real> out(static_cast<int>(idx.size()), v.cols);
    for (size_t r = 0; r < idx.size(); ++r)
        for (int c = 0; c < v.cols; ++c) out(static_cast<int>(r), c) = v(idx[r], c);
    int ai = a.id;
    return a.tape->make(std::move(out), [ai, idx = std::move(idx)](Tape<Real>& t, int self) {
        const auto& g = t.grad(self);
        auto& ga = t.grad(ai);
        for (size_t r = 0; r < idx.size(); ++r)
            for (int c = 0; c < g.cols; ++c) ga(idx[r], c) += g(static_cast<int>(r), c);
    });
}

// ---------------------------------------------------------------------------
// Block (per-node token sequence) ops. Tokens are stored stacked: row
// b*S + s holds token s of block b.
// ---------------------------------------------------------------------------

// scores[b][i][j] = dot(q[b*S+i], k[b*S+j]) * scale, laid out as (B*S) x S.
template <typename Real>
Var<Real> block_qk(Var<Real> q, Var<Real> k, int S, double scale_factor) {
    const auto& vq = q.val();
    const auto& vk = k.val();
    if (vq.rows != vk.rows || vq.cols != vk.cols || vq.rows % S != 0)
        throw ComputeError("block_qk: shape mismatch");
    int B = vq.rows / S;
    Mat<Real> out(vq.rows, S);
    for (int b = 0; b < B; ++b)
        for (int i = 0; i < S; ++i)
            for (int j = 0; j < S; ++j) {
                double dot = 0.0;
                for (int c = 0; c < vq.cols; ++c)
                    dot += static_cast<double>(vq(b * S + i, c)) * vk(b * S + j, c);
                out(b * S + i, j) = static_cast<Real>(dot * scale_factor);
            }
    ensure_finite(out, "block_qk");
    int qi = q.id, ki = k.id;
    return q.tape->make(std::move(out), [qi, ki, S, scale_factor](Tape<Real>& t, int self) {
        const auto& g = t.grad(self);
        const auto& vq2 = t.val(qi);
        const auto& vk2 = t.val(ki);
        auto& gq = t.grad(qi);
        auto& gk = t.grad(ki);
        int B = vq2.rows / S;
        for (int b = 0; b < B; ++b)
            for (int i = 0; i < S; ++i)
                for (int j = 0; j < S; ++j) {
                    Real gs = static_cast<Real>(g(b * S + i, j) * scale_factor);
                    if (gs == Real(0)) continue;
                    for (int c = 0; c < vq2.cols; ++c) {
                        gq(b * S + i, c) += gs * vk2(b * S + j, c);
                        gk(b * S + j, c) += gs * vq2(b * S + i, c);
                    }
                }
    });
}

// out[b*S+i] = sum_j p[b*S+i][j] * v[b*S+j]
template <typename Real>
Var<Real> block_av(Var<Real> p, Var<Real> v, int S) {
    const auto& vp = p.val();
    const auto& vv = v.val();
    if (vp.cols != S || vp.rows != vv.rows || vv.rows % S != 0)
        throw ComputeError("block_av: shape mismatch");
    int B = vv.rows / S;
    Mat<Real> out(vv.rows, vv.cols);
    for (int b = 0; b < B; ++b)
        for (int i = 0; i < S; ++i)
            for (int j = 0; j < S; ++j) {
                Real pij = vp(b * S + i, j);
                if (pij == Real(0)) continue;
                for (int c = 0; c < vv.cols; ++c) out(b * S + i, c) += pij * vv(b * S + j, c);
            }
    ensure_finite(out, "block_av");
    int pi = p.id, vi = v.id;
    return p.tape->make(std::move(out), [pi, vi, S](Tape<Real>& t, int self) {
        const auto& g = t.grad(self);
        const auto& vp2 = t.val(pi);
        const auto& vv2 = t.val(vi);
        auto& gp = t.grad(pi);
        auto& gv = t.grad(vi);
        int B = vv2.rows / S;
        for (int b = 0; b < B; ++b)
            for (int i = 0; i < S; ++i)
                for (int j = 0; j < S; ++j) {
                    Real dot = Real(0);
                    for (int c = 0; c < vv2.cols; ++c) dot += g(b * S + i, c) * vv2(b * S + j, c);
                    gp(b * S + i, j) += dot;
                    Real pij = vp2(b * S + i, j);
                    if (pij == Real(0)) continue;
                    for (int c = 0; c < vv2.cols; ++c) gv(b * S + j, c) += pij * g(b * S + i, c);
                }
    });
}

// scores[b][s] = dot(tokens[b*S+s], query), query is 1 x F; output B x S.
template <typename Real>
Var<Real> block_scores(Var<Real> tokens, Var<Real> query, int S) {
    const auto& vt = tokens.val();
    const auto& vq = query.val();
    if (vq.rows != 1 || vq.cols != vt.cols || vt.rows % S != 0)
        throw ComputeError("block_scores: shape mismatch");
    int B = vt.rows / S;
    Mat<Real> out(B, S);
    for (int b = 0; b < B; ++b)
        for (int s = 0; s < S; ++s) {
            double dot = 0.0;
            for (int c = 0; c < vt.cols; ++c)
                dot += static_cast<double>(vt(b * S + s, c)) * vq(0, c);
            out(b, s) = static_cast<Real>(dot);
        }
    ensure_finite(out, "block_scores");
    int ti = tokens.id, qi = query.id;
    return tokens.tape->make(std::move(out), [ti, qi, S](Tape<Real>& t, int self) {
        const auto& g = t.grad(self);
        const auto& vt2 = t.val(ti);
        const auto& vq2 = t.val(qi);
        auto& gt = t.grad(ti);
        auto& gq = t.grad(qi);
        int B = vt2.rows / S;
        for (int b = 0; b < B; ++b)
            for (int s = 0; s < S; ++s) {
                Real gs = g(b, s);
                if (gs == Real(0)) continue;
                for (int c = 0; c < vt2.cols; ++c) {
                    gt(b * S + s, c) += gs * vq2(0, c);
                    gq(0, c) += gs * vt2(b * S + s, c);
                }
            }
    });
}

// out[b] = sum_s alpha[b][s] * tokens[b*S+s]; alpha is B x S, output B x F.
template <typename Real>
Var<Real> block_mix(Var<Real> alpha, Var<Real> tokens) {
    const auto& va = alpha.val();
    const auto& vt = tokens.val();
    int S = va.cols;
    if (vt.rows != va.rows * S) throw ComputeError("block_mix: shape mismatch");
    Mat<Real> out(va.rows, vt.cols);
    for (int b = 0; b < va.rows; ++b)
        for (int s = 0; s < S; ++s) {
            Real w = va(b, s);
            if (w == Real(0)) continue;
            for (int c = 0; c < vt.cols; ++c) out(b, c) += w * vt(b * S + s, c);
        }
    ensure_finite(out, "block_mix");
    int ai = alpha.id, ti = tokens.id;
    return alpha.tape->make(std::move(out), [ai, ti, S](Tape<Real>& t, int self) {
        const auto& g = t.grad(self);
        const auto& va2 = t.val(ai);
        const auto& vt2 = t.val(ti);
        auto& ga = t.grad(ai);
        auto& gt = t.grad(ti);
        for (int b = 0; b < va2.rows; ++b)
            for (int s = 0; s < S; ++s) {
                Real dot = Real(0);
                for (int c = 0; c < vt2.cols; ++c) dot += g(b, c) * vt2(b * S + s, c);
                ga(b, s) += dot;
                Real w = va2(b, s);
                if (w == Real(0)) continue;
                for (int c = 0; c < vt2.cols; ++c) gt(b * S + s, c) += w * g(b, c);
            }
    });
}

// ---------------------------------------------------------------------------
// Gating / loss ops
// ---------------------------------------------------------------------------

// out[b][k] = -||z_b - c_k||_2, with a small epsilon inside the root so the
// gradient stays defined when a latent sits exactly on a center.
template <typename Real>
Var<Real> neg_pairwise_dist(Var<Real> z, Var<Real> centers) {
    const auto& vz = z.val();
    const auto& vc = centers.val();
    if (vz.cols != vc.cols) throw ComputeError("neg_pairwise_dist: dim mismatch");
    constexpr double kEps = 1e-12;
    Mat<Real> out(vz.rows, vc.rows);
    for (int b = 0; b < vz.rows; ++b)
        for (int k = 0; k < vc.rows; ++k) {
            double d2 = kEps;
            for (int c = 0; c < vz.cols; ++c) {
                double d = static_cast<double>(vz(b, c)) - vc(k, c);
                d2 += d * d;
            }
            out(b, k) = static_cast<Real>(-std::sqrt(d2));
        }
    ensure_finite(out, "neg_pairwise_dist");
    int zi = z.id, ci = centers.id;
    return z.tape->make(std::move(out), [zi, ci](Tape<Real>& t, int self) {
        const auto& g = t.grad(self);
        const auto& y = t.val(self);
        const auto& vz2 = t.val(zi);
        const auto& vc2 = t.val(ci);
        auto& gz = t.grad(zi);
        auto& gc = t.grad(ci);
        for (int b = 0; b < vz2.rows; ++b)
            for (int k = 0; k < vc2.rows; ++k) {
                Real gv = g(b, k);
                if (gv == Real(0)) continue;
                Real inv_d = Real(1) / (-y(b, k));
                for (int c = 0; c < vz2.cols; ++c) {
                    Real diff = vz2(b, c) - vc2(k, c);
                    gz(b, c) += gv * (-diff * inv_d);
                    gc(k, c) += gv * (diff * inv_d);
                }
            }
    });
}

// Gumbel-softmax over each row of w. noise=false reduces to softmax(w/tau).
// hard=true outputs one-hot rows whose backward uses the soft probabilities
// (straight-through), so hard and soft mode backprop identically.
template <typename Real>
Var<Real> gumbel_softmax_rows(Var<Real> w, double tau, Rng* rng, bool noise, bool hard) {
    if (!(tau > 0.0)) throw ConfigError("gumbel softmax temperature must be positive");
    if (noise && rng == nullptr) throw ComputeError("gumbel_softmax: noise requested without rng");
    const auto& vw = w.val();
    Mat<Real> soft(vw.rows, vw.cols);
    for (int r = 0; r < vw.rows; ++r) {
        std::vector<double> logits(static_cast<size_t>(vw.cols));
        for (int c = 0; c < vw.cols; ++c) {
            double x = static_cast<double>(vw(r, c));
            if (noise) x += rng->gumbel();
            logits[static_cast<size_t>(c)] = x / tau;
        }
        double mx = *std::max_element(logits.begin(), logits.end());
        double sum = 0.0;
        for (double& x : logits) {
            x = std::exp(x - mx);
            sum += x;
        }
        for (int c = 0; c < vw.cols; ++c)
            soft(r, c) = static_cast<Real>(logits[static_cast<size_t>(c)] / sum);
    }
    ensure_finite(soft, "gumbel_softmax");
    Mat<Real> out = soft;
    if (hard) {
        for (int r = 0; r < out.rows; ++r) {
            int best = 0;
            for (int c = 1; c < out.cols; ++c)
                if (soft(r, c) > soft(r, best)) best = c;
            for (int c = 0; c < out.cols; ++c) out(r, c) = c == best ? Real(1) : Real(0);
        }
    }
    int wi = w.id;
    return w.tape->make(std::move(out), [wi, tau, soft = std::move(soft)](Tape<Real>& t, int self) {
        const auto& g = t.grad(self);
        auto& gw = t.grad(wi);
        Real inv_tau = static_cast<Real>(1.0 / tau);
        for (int r = 0; r < g.rows; ++r) {
            Real dot = Real(0);
            for (int c = 0; c < g.cols; ++c) dot += g(r, c) * soft(r, c);
            for (int c = 0; c < g.cols; ++c)
                gw(r, c) += inv_tau * soft(r, c) * (g(r, c) - dot);
        }
    });
}

// Mean binary cross-entropy over positive and negative logits, in the stable
// softplus form. Either side may be empty but not both.
template <typename Real>
Var<Real> bce_loss(Var<Real> pos_logits, Var<Real> neg_logits) {
    if (pos_logits.cols() != 1 || neg_logits.cols() != 1)
        throw ComputeError("bce_loss: logits must be column vectors");
    int np = pos_logits.rows(), nn = neg_logits.rows();
    if (np + nn == 0) throw ComputeError("bce_loss: empty input");
    double total = 0.0;
    for (int r = 0; r < np; ++r)
        total += softplus_stable(-static_cast<double>(pos_logits.val()(r, 0)));
    for (int r = 0; r < nn; ++r)
        total += softplus_stable(static_cast<double>(neg_logits.val()(r, 0)));
    Mat<Real> out(1, 1);
    out(0, 0) = static_cast<Real>(total / (np + nn));
    ensure_finite(out, "bce_loss");
    int pi = pos_logits.id, ni = neg_logits.id;
    return pos_logits.tape->make(std::move(out), [pi, ni, np, nn](Tape<Real>& t, int self) {
        Real go = t.grad(self)(0, 0);
        Real inv = static_cast<Real>(1.0 / (np + nn));
        auto& gp = t.grad(pi);
        auto& gn = t.grad(ni);
        const auto& vp = t.val(pi);
        const auto& vn = t.val(ni);
        for (int r = 0; r < np; ++r)
            gp(r, 0) += go * inv *
                        static_cast<Real>(sigmoid_stable(static_cast<double>(vp(r, 0))) - 1.0);
        for (int r = 0; r < nn; ++r)
            gn(r, 0) += go * inv *
                        static_cast<Real>(sigmoid_stable(static_cast<double>(vn(r, 0))));
    });
}

// BCE against a fixed 0/1 label column (labels are data, not differentiated).
template <typename Real>
Var<Real> bce_with_logits(Var<Real> logits, const std::vector<Real>& labels) {
    if (logits.cols() != 1 || logits.rows() != static_cast<int>(labels.size()))
        throw ComputeError("bce_with_logits: shape mismatch");
    int n = logits.rows();
    if (n == 0) throw ComputeError("bce_with_logits: empty input");
    double total = 0.0;
    for (int r = 0; r < n; ++r) {
        double x = static_cast<double>(logits.val()(r, 0));
        double y = static_cast<double>(labels[static_cast<size_t>(r)]);
        total += softplus_stable(x) - y * x;
    }
    Mat<Real> out(1, 1);
    out(0, 0) = static_cast<Real>(total / n);
    ensure_finite(out, "bce_with_logits");
    int li = logits.id;
    return logits.tape->make(std::move(out), [li, n, labels](Tape<Real>& t, int self) {
        Real go = t.grad(self)(0, 0);
        Real inv = static_cast<Real>(1.0 / n);
        auto& gl = t.grad(li);
        const auto& vl = t.val(li);
        for (int r = 0; r < n; ++r)
            gl(r, 0) += go * inv *
                        static_cast<Real>(sigmoid_stable(static_cast<double>(vl(r, 0))) -
                                          static_cast<double>(labels[static_cast<size_t>(r)]));
    });
}

// ---------------------------------------------------------------------------
// Standalone (non-tape) gumbel softmax, the sampling primitive itself.
// ---------------------------------------------------------------------------

struct GumbelDraw {
    std::vector<double> probs;  // soft probabilities, sum to 1
    int index = -1;             // argmax selection when hard, else -1
};

inline GumbelDraw gumbel_softmax(const std::vector<double>& w, double tau, Rng& rng, bool hard,
                                 bool noise) {
    if (!(tau > 0.0)) throw ConfigError("gumbel softmax temperature must be positive");
    if (w.empty()) throw ComputeError("gumbel_softmax: empty weights");
    GumbelDraw d;
    d.probs.resize(w.size());
    std::vector<double> logits(w.size());
    for (size_t i = 0; i < w.size(); ++i)
        logits[i] = (w[i] + (noise ? rng.gumbel() : 0.0)) / tau;
    double mx = *std::max_element(logits.begin(), logits.end());
    double sum = 0.0;
    for (size_t i = 0; i < w.size(); ++i) {
        d.probs[i] = std::exp(logits[i] - mx);
        sum += d.probs[i];
    }
    for (double& p : d.probs) p /= sum;
    if (hard)
        d.index = static_cast<int>(std::max_element(d.probs.begin(), d.probs.end()) -
                                   d.probs.begin());
    return d;
}

}  // namespace linkforge::ad
