#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <utility>
#include <vector>

#include "otrec/rng.hpp"
#include "otrec/tensor.hpp"

namespace otrec {

using Var = int;

template <typename S>
struct BnStats {
    Tensor<S> mean;
    Tensor<S> var;
    bool initialized = false;
};

// Reverse-mode tape over a statically built per-sample graph. Ops append a
// node holding the forward value and a closure that scatters the node's
// gradient into its inputs. Gradient buffers are allocated on first write, so
// inference-only graphs never pay for them.
template <typename S>
class Graph {
public:
    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    Var leaf(Tensor<S> v) { return push(std::move(v), nullptr); }
    Var constant(Tensor<S> v) { return push(std::move(v), nullptr); }
    Var scalar(S v) { return leaf(Tensor<S>({1}, v)); }

    const Tensor<S>& val(Var id) const { return nodes_[static_cast<size_t>(id)].value; }
    const Tensor<S>& grad(Var id) const {
        const Node& n = nodes_[static_cast<size_t>(id)];
        if (n.grad.data.empty()) {
            static thread_local Tensor<S> zeros;
            zeros = Tensor<S>(n.value.shape, S(0));
            return zeros;
        }
        return n.grad;
    }

    // ---- elementwise ----

    Var add(Var a, Var b) {
        check_same(a, b, "add");
        Tensor<S> out = val(a);
        const Tensor<S>& vb = val(b);
        for (int64_t i = 0; i < out.numel(); ++i) out[i] += vb[i];
        return push(std::move(out), [this, a, b](Var y) {
            const Tensor<S>& gy = gradbuf_ro(y);
            axpy(a, gy, S(1));
            axpy(b, gy, S(1));
        });
    }

    Var sub(Var a, Var b) {
        check_same(a, b, "sub");
        Tensor<S> out = val(a);
        const Tensor<S>& vb = val(b);
        for (int64_t i = 0; i < out.numel(); ++i) out[i] -= vb[i];
        return push(std::move(out), [this, a, b](Var y) {
            const Tensor<S>& gy = gradbuf_ro(y);
            axpy(a, gy, S(1));
            axpy(b, gy, S(-1));
        });
    }

    Var mul(Var a, Var b) {
        check_same(a, b, "mul");
        Tensor<S> out = val(a);
        const Tensor<S>& vb = val(b);
        for (int64_t i = 0; i < out.numel(); ++i) out[i] *= vb[i];
        return push(std::move(out), [this, a, b](Var y) {
            const Tensor<S>& gy = gradbuf_ro(y);
            Tensor<S>& ga = gradbuf(a);
            Tensor<S>& gb = gradbuf(b);
            const Tensor<S>& va = val(a);
            const Tensor<S>& vb2 = val(b);
            for (int64_t i = 0; i < gy.numel(); ++i) {
                ga[i] += gy[i] * vb2[i];
                gb[i] += gy[i] * va[i];
            }
        });
    }

    Var div(Var a, Var b) {
        check_same(a, b, "div");
        Tensor<S> out = val(a);
        const Tensor<S>& vb = val(b);
        for (int64_t i = 0; i < out.numel(); ++i) out[i] /= vb[i];
        return push(std::move(out), [this, a, b](Var y) {
            const Tensor<S>& gy = gradbuf_ro(y);
            Tensor<S>& ga = gradbuf(a);
            Tensor<S>& gb = gradbuf(b);
            const Tensor<S>& va = val(a);
            const Tensor<S>& vb2 = val(b);
            for (int64_t i = 0; i < gy.numel(); ++i) {
                ga[i] += gy[i] / vb2[i];
                gb[i] -= gy[i] * va[i] / (vb2[i] * vb2[i]);
            }
        });
    }

    Var scale(Var a, S k) {
        Tensor<S> out = val(a);
        for (auto& v : out.data) v *= k;
        return push(std::move(out), [this, a, k](Var y) { axpy(a, gradbuf_ro(y), k); });
    }

    Var add_scalar(Var a, S k) {
        Tensor<S> out = val(a);
        for (auto& v : out.data) v += k;
        return push(std::move(out), [this, a](Var y) { axpy(a, gradbuf_ro(y), S(1)); });
    }

    // c - x, elementwise
    Var rsub_scalar(S c, Var a) {
        Tensor<S> out = val(a);
        for (auto& v : out.data) v = c - v;
        return push(std::move(out), [this, a](Var y) { axpy(a, gradbuf_ro(y), S(-1)); });
    }

    Var neg(Var a) { return scale(a, S(-1)); }

    Var square(Var a) { return mul(a, a); }

    Var exp_(Var a) {
        Tensor<S> out = val(a);
        for (auto& v : out.data) v = std::exp(v);
        return push(std::move(out), [this, a](Var y) {
            const Tensor<S>& gy = gradbuf_ro(y);
            const Tensor<S>& vy = val(y);
            Tensor<S>& ga = gradbuf(a);
            for (int64_t i = 0; i < gy.numel(); ++i) ga[i] += gy[i] * vy[i];
        });
    }

    Var log_(Var a) {
        Tensor<S> out = val(a);
        for (auto& v : out.data) v = std::log(v);
        return push(std::move(out), [this, a](Var y) {
            const Tensor<S>& gy = gradbuf_ro(y);
            const Tensor<S>& va = val(a);
            Tensor<S>& ga = gradbuf(a);
            for (int64_t i = 0; i < gy.numel(); ++i) ga[i] += gy[i] / va[i];
        });
    }

    Var tanh_(Var a) {
        Tensor<S> out = val(a);
        for (auto& v : out.data) v = std::tanh(v);
        return push(std::move(out), [this, a](Var y) {
            const Tensor<S>& gy = gradbuf_ro(y);
            const Tensor<S>& vy = val(y);
            Tensor<S>& ga = gradbuf(a);
            for (int64_t i = 0; i < gy.numel(); ++i) ga[i] += gy[i] * (S(1) - vy[i] * vy[i]);
        });
    }

    Var sigmoid(Var a) {
        Tensor<S> out = val(a);
        for (auto& v : out.data) v = sigmoid_fn(v);
        return push(std::move(out), [this, a](Var y) {
            const Tensor<S>& gy = gradbuf_ro(y);
            const Tensor<S>& vy = val(y);
            Tensor<S>& ga = gradbuf(a);
            for (int64_t i = 0; i < gy.numel(); ++i) ga[i] += gy[i] * vy[i] * (S(1) - vy[i]);
        });
    }

    Var relu(Var a) { return leaky_relu(a, S(0)); }

    Var leaky_relu(Var a, S slope) {
        Tensor<S> out = val(a);
        for (auto& v : out.data) {
            kink_margin_ = std::min(kink_margin_, static_cast<double>(std::abs(v)));
            v = v > S(0) ? v : slope * v;
        }
        return push(std::move(out), [this, a, slope](Var y) {
            const Tensor<S>& gy = gradbuf_ro(y);
            const Tensor<S>& va = val(a);
            Tensor<S>& ga = gradbuf(a);
            for (int64_t i = 0; i < gy.numel(); ++i)
                ga[i] += gy[i] * (va[i] > S(0) ? S(1) : slope);
        });
    }

    // gradient passes only strictly inside (lo, hi)
    Var clamp(Var a, S lo, S hi) {
        Tensor<S> out = val(a);
        for (auto& v : out.data) {
            kink_margin_ = std::min(kink_margin_, static_cast<double>(std::abs(v - lo)));
            if (hi < std::numeric_limits<S>::max())
                kink_margin_ = std::min(kink_margin_, static_cast<double>(std::abs(v - hi)));
            v = std::min(std::max(v, lo), hi);
        }
        return push(std::move(out), [this, a, lo, hi](Var y) {
            const Tensor<S>& gy = gradbuf_ro(y);
            const Tensor<S>& va = val(a);
            Tensor<S>& ga = gradbuf(a);
            for (int64_t i = 0; i < gy.numel(); ++i)
                if (va[i] > lo && va[i] < hi) ga[i] += gy[i];
        });
    }

    Var clamp_min(Var a, S lo) { return clamp(a, lo, std::numeric_limits<S>::max()); }

    // ---- reductions / softmax family (1-D) ----

    Var sum(Var a) {
        S total = 0;
        for (S v : val(a).data) total += v;
        return push(Tensor<S>({1}, total),
                    [this, a](Var y) { axpy_broadcast(a, gradbuf_ro(y)[0]); });
    }

    Var mean(Var a) {
        const S n = static_cast<S>(val(a).numel());
        S total = 0;
        for (S v : val(a).data) total += v;
        return push(Tensor<S>({1}, total / n),
                    [this, a, n](Var y) { axpy_broadcast(a, gradbuf_ro(y)[0] / n); });
    }

    Var add_n(const std::vector<Var>& vars) {
        if (vars.empty()) throwf("add_n: empty list");
        Tensor<S> out = val(vars[0]);
        for (size_t k = 1; k < vars.size(); ++k) {
            const Tensor<S>& v = val(vars[k]);
            for (int64_t i = 0; i < out.numel(); ++i) out[i] += v[i];
        }
        return push(std::move(out), [this, vars](Var y) {
            const Tensor<S>& gy = gradbuf_ro(y);
            for (Var v : vars) axpy(v, gy, S(1));
        });
    }

    Var softmax(Var a) {
        Tensor<S> out = softmax_fwd(val(a));
        return push(std::move(out), [this, a](Var y) {
            const Tensor<S>& gy = gradbuf_ro(y);
            const Tensor<S>& vy = val(y);
            Tensor<S>& ga = gradbuf(a);
            S dot = 0;
            for (int64_t i = 0; i < gy.numel(); ++i) dot += gy[i] * vy[i];
            for (int64_t i = 0; i < gy.numel(); ++i) ga[i] += vy[i] * (gy[i] - dot);
        });
    }

    Var log_softmax(Var a) {
        const Tensor<S>& va = val(a);
        S mx = va[0];
        for (S v : va.data) mx = std::max(mx, v);
        S z = 0;
        for (S v : va.data) z += std::exp(v - mx);
        const S lse = mx + std::log(z);
        Tensor<S> out = va;
        for (auto& v : out.data) v -= lse;
        return push(std::move(out), [this, a](Var y) {
            const Tensor<S>& gy = gradbuf_ro(y);
            const Tensor<S>& vy = val(y);
            Tensor<S>& ga = gradbuf(a);
            S total = 0;
            for (int64_t i = 0; i < gy.numel(); ++i) total += gy[i];
            for (int64_t i = 0; i < gy.numel(); ++i)
                ga[i] += gy[i] - std::exp(vy[i]) * total;
        });
    }

    Var logsumexp(Var a) {
        const Tensor<S>& va = val(a);
        S mx = va[0];
        for (S v : va.data) mx = std::max(mx, v);
        S z = 0;
        for (S v : va.data) z += std::exp(v - mx);
        const S lse = mx + std::log(z);
        return push(Tensor<S>({1}, lse), [this, a](Var y) {
            const S gy = gradbuf_ro(y)[0];
            const S lse_v = val(y)[0];
            const Tensor<S>& va2 = val(a);
            Tensor<S>& ga = gradbuf(a);
            for (int64_t i = 0; i < va2.numel(); ++i) ga[i] += gy * std::exp(va2[i] - lse_v);
        });
    }

    // scalar = sum_i a_i * w_i for a constant weight vector
    Var dot_const(Var a, Tensor<S> w) {
        const Tensor<S>& va = val(a);
        if (va.numel() != w.numel()) throwf("dot_const: size mismatch");
        S total = 0;
        for (int64_t i = 0; i < va.numel(); ++i) total += va[i] * w[i];
        return push(Tensor<S>({1}, total), [this, a, w = std::move(w)](Var y) {
            const S gy = gradbuf_ro(y)[0];
            Tensor<S>& ga = gradbuf(a);
            for (int64_t i = 0; i < ga.numel(); ++i) ga[i] += gy * w[i];
        });
    }

    // ---- shape ops (1-D) ----

    Var concat(Var a, Var b) {
        const Tensor<S>& va = val(a);
        const Tensor<S>& vb = val(b);
        Tensor<S> out({static_cast<int>(va.numel() + vb.numel())});
        std::copy(va.data.begin(), va.data.end(), out.data.begin());
        std::copy(vb.data.begin(), vb.data.end(), out.data.begin() + va.numel());
        return push(std::move(out), [this, a, b](Var y) {
            const Tensor<S>& gy = gradbuf_ro(y);
            Tensor<S>& ga = gradbuf(a);
            Tensor<S>& gb = gradbuf(b);
            for (int64_t i = 0; i < ga.numel(); ++i) ga[i] += gy[i];
            for (int64_t i = 0; i < gb.numel(); ++i) gb[i] += gy[ga.numel() + i];
        });
    }

    Var slice(Var a, int offset, int len) {
        const Tensor<S>& va = val(a);
        if (offset < 0 || offset + len > va.numel()) throwf("slice out of range");
        Tensor<S> out({len});
        std::copy(va.data.begin() + offset, va.data.begin() + offset + len, out.data.begin());
        return push(std::move(out), [this, a, offset, len](Var y) {
            const Tensor<S>& gy = gradbuf_ro(y);
            Tensor<S>& ga = gradbuf(a);
            for (int i = 0; i < len; ++i) ga[offset + i] += gy[i];
        });
    }

    // [n,m] -> [m,n]
    Var transpose2d(Var a) {
        const Tensor<S>& va = val(a);
        if (va.rank() != 2) throwf("transpose2d: expected rank 2, got %s", shape_str(va.shape).c_str());
        const int n = va.dim(0), m = va.dim(1);
        Tensor<S> out({m, n});
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < m; ++j) out.at(j, i) = va.at(i, j);
        return push(std::move(out), [this, a, n, m](Var y) {
            const Tensor<S>& gy = gradbuf_ro(y);
            Tensor<S>& ga = gradbuf(a);
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < m; ++j) ga.at(i, j) += gy.at(j, i);
        });
    }

    Var reshape(Var a, std::vector<int> shape) {
        Tensor<S> out = val(a);
        if (Tensor<S>::count(shape) != out.numel())
            throwf("reshape: %s incompatible with %lld elements", shape_str(shape).c_str(),
                   static_cast<long long>(out.numel()));
        out.shape = std::move(shape);
        return push(std::move(out), [this, a](Var y) { axpy(a, gradbuf_ro(y), S(1)); });
    }

    // ---- linear algebra ----

    // x[in], W[out,in], b[out] -> W x + b
    Var linear(Var x, Var W, Var b) {
        const Tensor<S>& vx = val(x);
        const Tensor<S>& vW = val(W);
        const Tensor<S>& vb = val(b);
        if (vW.rank() != 2 || vW.dim(1) != vx.numel() || vb.numel() != vW.dim(0))
            throwf("linear: shape mismatch W%s x%s b%s", shape_str(vW.shape).c_str(),
                   shape_str(vx.shape).c_str(), shape_str(vb.shape).c_str());
        const int out_dim = vW.dim(0);
        const int in_dim = vW.dim(1);
        Tensor<S> out({out_dim});
        for (int o = 0; o < out_dim; ++o) {
            const S* row = vW.ptr() + static_cast<int64_t>(o) * in_dim;
            S acc = vb[o];
            for (int i = 0; i < in_dim; ++i) acc += row[i] * vx[i];
            out[o] = acc;
        }
        return push(std::move(out), [this, x, W, b, out_dim, in_dim](Var y) {
            const Tensor<S>& gy = gradbuf_ro(y);
            const Tensor<S>& vx2 = val(x);
            const Tensor<S>& vW2 = val(W);
            Tensor<S>& gx = gradbuf(x);
            Tensor<S>& gW = gradbuf(W);
            Tensor<S>& gb = gradbuf(b);
            for (int o = 0; o < out_dim; ++o) {
                const S g = gy[o];
                gb[o] += g;
                const S* wrow = vW2.ptr() + static_cast<int64_t>(o) * in_dim;
                S* grow = gW.ptr() + static_cast<int64_t>(o) * in_dim;
                for (int i = 0; i < in_dim; ++i) {
                    grow[i] += g * vx2[i];
                    gx[i] += g * wrow[i];
                }
            }
        });
    }

    // A[n,k] * B[k,m] -> [n,m]
    Var matmul(Var A, Var B) {
        const Tensor<S>& vA = val(A);
        const Tensor<S>& vB = val(B);
        if (vA.rank() != 2 || vB.rank() != 2 || vA.dim(1) != vB.dim(0))
            throwf("matmul: shape mismatch %s x %s", shape_str(vA.shape).c_str(),
                   shape_str(vB.shape).c_str());
        const int n = vA.dim(0), k = vA.dim(1), m = vB.dim(1);
        Tensor<S> out({n, m});
        for (int i = 0; i < n; ++i) {
            for (int j = 0; j < k; ++j) {
                const S a = vA.at(i, j);
                const S* brow = vB.ptr() + static_cast<int64_t>(j) * m;
                S* orow = out.ptr() + static_cast<int64_t>(i) * m;
                for (int c = 0; c < m; ++c) orow[c] += a * brow[c];
            }
        }
        return push(std::move(out), [this, A, B, n, k, m](Var y) {
            const Tensor<S>& gy = gradbuf_ro(y);
            const Tensor<S>& vA2 = val(A);
            const Tensor<S>& vB2 = val(B);
            Tensor<S>& gA = gradbuf(A);
            Tensor<S>& gB = gradbuf(B);
            // gA = gy * B^T ; gB = A^T * gy
            for (int i = 0; i < n; ++i) {
                for (int j = 0; j < k; ++j) {
                    const S* grow = gy.ptr() + static_cast<int64_t>(i) * m;
                    const S* brow = vB2.ptr() + static_cast<int64_t>(j) * m;
                    S acc = 0;
                    for (int c = 0; c < m; ++c) acc += grow[c] * brow[c];
                    gA.at(i, j) += acc;
                    const S a = vA2.at(i, j);
                    S* gbrow = gB.ptr() + static_cast<int64_t>(j) * m;
                    for (int c = 0; c < m; ++c) gbrow[c] += a * grow[c];
                }
            }
        });
    }

    // A[n,m] + v[m] broadcast over rows
    Var add_rowvec(Var A, Var v) {
        const Tensor<S>& vA = val(A);
        const Tensor<S>& vv = val(v);
        if (vA.rank() != 2 || vA.dim(1) != vv.numel()) throwf("add_rowvec: shape mismatch");
        const int n = vA.dim(0), m = vA.dim(1);
        Tensor<S> out = vA;
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < m; ++j) out.at(i, j) += vv[j];
        return push(std::move(out), [this, A, v, n, m](Var y) {
            const Tensor<S>& gy = gradbuf_ro(y);
            Tensor<S>& gA = gradbuf(A);
            Tensor<S>& gv = gradbuf(v);
            for (int i = 0; i < n; ++i) {
                for (int j = 0; j < m; ++j) {
                    const S g = gy.at(i, j);
                    gA.at(i, j) += g;
                    gv[j] += g;
                }
            }
        });
    }

    // A[n,m] x[m] -> [n]
    Var matvec(Var A, Var x) {
        const Tensor<S>& vA = val(A);
        const Tensor<S>& vx = val(x);
        if (vA.rank() != 2 || vA.dim(1) != vx.numel()) throwf("matvec: shape mismatch");
        const int n = vA.dim(0), m = vA.dim(1);
        Tensor<S> out({n});
        for (int i = 0; i < n; ++i) {
            const S* row = vA.ptr() + static_cast<int64_t>(i) * m;
            S acc = 0;
            for (int j = 0; j < m; ++j) acc += row[j] * vx[j];
            out[i] = acc;
        }
        return push(std::move(out), [this, A, x, n, m](Var y) {
            const Tensor<S>& gy = gradbuf_ro(y);
            const Tensor<S>& vA2 = val(A);
            const Tensor<S>& vx2 = val(x);
            Tensor<S>& gA = gradbuf(A);
            Tensor<S>& gx = gradbuf(x);
            for (int i = 0; i < n; ++i) {
                const S g = gy[i];
                const S* row = vA2.ptr() + static_cast<int64_t>(i) * m;
                S* grow = gA.ptr() + static_cast<int64_t>(i) * m;
                for (int j = 0; j < m; ++j) {
                    grow[j] += g * vx2[j];
                    gx[j] += g * row[j];
                }
            }
        });
    }

    // x[n] A[n,m] -> [m]
    Var vecmat(Var x, Var A) {
        const Tensor<S>& vA = val(A);
        const Tensor<S>& vx = val(x);
        if (vA.rank() != 2 || vA.dim(0) != vx.numel()) throwf("vecmat: shape mismatch");
        const int n = vA.dim(0), m = vA.dim(1);
        Tensor<S> out({m});
        for (int i = 0; i < n; ++i) {
            const S xi = vx[i];
            const S* row = vA.ptr() + static_cast<int64_t>(i) * m;
            for (int j = 0; j < m; ++j) out[j] += xi * row[j];
        }
        return push(std::move(out), [this, A, x, n, m](Var y) {
            const Tensor<S>& gy = gradbuf_ro(y);
            const Tensor<S>& vA2 = val(A);
            const Tensor<S>& vx2 = val(x);
            Tensor<S>& gA = gradbuf(A);
            Tensor<S>& gx = gradbuf(x);
            for (int i = 0; i < n; ++i) {
                const S* row = vA2.ptr() + static_cast<int64_t>(i) * m;
                S* grow = gA.ptr() + static_cast<int64_t>(i) * m;
                S acc = 0;
                for (int j = 0; j < m; ++j) {
                    acc += gy[j] * row[j];
                    grow[j] += vx2[i] * gy[j];
                }
                gx[i] += acc;
            }
        });
    }

    // ---- neural-net blocks ----

    // x[C,H,W], w[O,C,3,3], b[O]; zero pad 1, stride 1 cross-correlation
    Var conv2d(Var x, Var w, Var b) {
        const Tensor<S>& vx = val(x);
        const Tensor<S>& vw = val(w);
        const Tensor<S>& vb = val(b);
        if (vx.rank() != 3 || vw.rank() != 4 || vw.dim(2) != 3 || vw.dim(3) != 3)
            throwf("conv2d: bad shapes x%s w%s", shape_str(vx.shape).c_str(),
                   shape_str(vw.shape).c_str());
        if (vw.dim(1) != vx.dim(0) || vb.numel() != vw.dim(0))
            throwf("conv2d: channel mismatch x%s w%s b%s", shape_str(vx.shape).c_str(),
                   shape_str(vw.shape).c_str(), shape_str(vb.shape).c_str());
        const int C = vx.dim(0), H = vx.dim(1), W = vx.dim(2), O = vw.dim(0);
        Tensor<S> out({O, H, W});
        for (int o = 0; o < O; ++o) {
            S* oplane = out.ptr() + static_cast<int64_t>(o) * H * W;
            for (int64_t i = 0; i < static_cast<int64_t>(H) * W; ++i) oplane[i] = vb[o];
            for (int c = 0; c < C; ++c) {
                const S* xplane = vx.ptr() + static_cast<int64_t>(c) * H * W;
                const S* k = vw.ptr() + (static_cast<int64_t>(o) * C + c) * 9;
                for (int ky = 0; ky < 3; ++ky) {
                    for (int kx = 0; kx < 3; ++kx) {
                        const S kv = k[ky * 3 + kx];
                        if (kv == S(0)) continue;
                        const int y0 = std::max(0, 1 - ky), y1 = std::min(H, H + 1 - ky);
                        const int x0 = std::max(0, 1 - kx), x1 = std::min(W, W + 1 - kx);
                        for (int y = y0; y < y1; ++y) {
                            const S* xrow = xplane + static_cast<int64_t>(y + ky - 1) * W + (kx - 1);
                            S* orow = oplane + static_cast<int64_t>(y) * W;
                            for (int xx = x0; xx < x1; ++xx) orow[xx] += kv * xrow[xx];
                        }
                    }
                }
            }
        }
        return push(std::move(out), [this, x, w, b, C, H, W, O](Var y) {
            const Tensor<S>& gy = gradbuf_ro(y);
            const Tensor<S>& vx2 = val(x);
            const Tensor<S>& vw2 = val(w);
            Tensor<S>& gx = gradbuf(x);
            Tensor<S>& gw = gradbuf(w);
            Tensor<S>& gb = gradbuf(b);
            for (int o = 0; o < O; ++o) {
                const S* gplane = gy.ptr() + static_cast<int64_t>(o) * H * W;
                S acc_b = 0;
                for (int64_t i = 0; i < static_cast<int64_t>(H) * W; ++i) acc_b += gplane[i];
                gb[o] += acc_b;
                for (int c = 0; c < C; ++c) {
                    const S* xplane = vx2.ptr() + static_cast<int64_t>(c) * H * W;
                    S* gxplane = gx.ptr() + static_cast<int64_t>(c) * H * W;
                    const S* k = vw2.ptr() + (static_cast<int64_t>(o) * C + c) * 9;
                    S* gk = gw.ptr() + (static_cast<int64_t>(o) * C + c) * 9;
                    for (int ky = 0; ky < 3; ++ky) {
                        for (int kx = 0; kx < 3; ++kx) {
                            const S kv = k[ky * 3 + kx];
                            S acc_k = 0;
                            const int y0 = std::max(0, 1 - ky), y1 = std::min(H, H + 1 - ky);
                            const int x0 = std::max(0, 1 - kx), x1 = std::min(W, W + 1 - kx);
                            for (int y = y0; y < y1; ++y) {
                                const int64_t xoff = static_cast<int64_t>(y + ky - 1) * W + (kx - 1);
                                const S* grow = gplane + static_cast<int64_t>(y) * W;
                                const S* xrow = xplane + xoff;
                                S* gxrow = gxplane + xoff;
                                for (int xx = x0; xx < x1; ++xx) {
                                    acc_k += grow[xx] * xrow[xx];
                                    gxrow[xx] += grow[xx] * kv;
                                }
                            }
                            gk[ky * 3 + kx] += acc_k;
                        }
                    }
                }
            }
        });
    }

    // 2x2, stride 2; gradient routes to the first max in row-major scan
    Var maxpool2d(Var x) {
        const Tensor<S>& vx = val(x);
        if (vx.rank() != 3 || vx.dim(1) % 2 != 0 || vx.dim(2) % 2 != 0)
            throwf("maxpool2d: need even spatial dims, got %s", shape_str(vx.shape).c_str());
        const int C = vx.dim(0), H = vx.dim(1), W = vx.dim(2);
        const int Ho = H / 2, Wo = W / 2;
        Tensor<S> out({C, Ho, Wo});
        auto argmax = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(C) * Ho * Wo);
        int64_t oi = 0;
        for (int c = 0; c < C; ++c) {
            const S* plane = vx.ptr() + static_cast<int64_t>(c) * H * W;
            for (int y = 0; y < Ho; ++y) {
                for (int x2 = 0; x2 < Wo; ++x2, ++oi) {
                    const int64_t base = static_cast<int64_t>(2 * y) * W + 2 * x2;
                    int64_t best = base;
                    S bv = plane[base];
                    const int64_t cand[3] = {base + 1, base + W, base + W + 1};
                    for (int64_t idx : cand) {
                        if (plane[idx] > bv) {
                            bv = plane[idx];
                            best = idx;
                        }
                    }
                    out[oi] = bv;
                    (*argmax)[static_cast<size_t>(oi)] = static_cast<int64_t>(c) * H * W + best;
                }
            }
        }
        return push(std::move(out), [this, x, argmax](Var y) {
            const Tensor<S>& gy = gradbuf_ro(y);
            Tensor<S>& gx = gradbuf(x);
            for (int64_t i = 0; i < gy.numel(); ++i) gx[(*argmax)[static_cast<size_t>(i)]] += gy[i];
        });
    }

    // Per-channel statistics over the spatial dims of one [C,H,W] activation.
    // Train mode normalizes with batch stats and folds them into the running
    // estimates; eval mode uses the running estimates only.
    Var batchnorm(Var x, Var gamma, Var beta, BnStats<S>* stats, bool train, S momentum, S eps) {
        const Tensor<S>& vx = val(x);
        if (vx.rank() != 3) throwf("batchnorm: expected [C,H,W], got %s", shape_str(vx.shape).c_str());
        const int C = vx.dim(0);
        const int64_t N = static_cast<int64_t>(vx.dim(1)) * vx.dim(2);
        if (val(gamma).numel() != C || val(beta).numel() != C)
            throwf("batchnorm: gamma/beta must have %d channels", C);
        if (!train && (!stats || !stats->initialized))
            throwf("batchnorm: eval mode requires initialized running stats");

        Tensor<S> mean_t({C}), var_t({C});
        if (train) {
            for (int c = 0; c < C; ++c) {
                const S* plane = vx.ptr() + c * N;
                S m = 0;
                for (int64_t i = 0; i < N; ++i) m += plane[i];
                m /= static_cast<S>(N);
                S v = 0;
                for (int64_t i = 0; i < N; ++i) {
                    const S d = plane[i] - m;
                    v += d * d;
                }
                v /= static_cast<S>(N);
                mean_t[c] = m;
                var_t[c] = v;
            }
            if (stats) {
                if (!stats->initialized) {
                    stats->mean = Tensor<S>({C}, S(0));
                    stats->var = Tensor<S>({C}, S(1));
                    stats->initialized = true;
                }
                const S unbias = N > 1 ? static_cast<S>(N) / static_cast<S>(N - 1) : S(1);
                for (int c = 0; c < C; ++c) {
                    stats->mean[c] = (S(1) - momentum) * stats->mean[c] + momentum * mean_t[c];
                    stats->var[c] = (S(1) - momentum) * stats->var[c] + momentum * var_t[c] * unbias;
                }
            }
        } else {
            mean_t = stats->mean;
            var_t = stats->var;
        }

        Tensor<S> xhat({C, vx.dim(1), vx.dim(2)});
        Tensor<S> out({C, vx.dim(1), vx.dim(2)});
        const Tensor<S>& vg = val(gamma);
        const Tensor<S>& vbeta = val(beta);
        for (int c = 0; c < C; ++c) {
            const S inv = S(1) / std::sqrt(var_t[c] + eps);
            const S* plane = vx.ptr() + c * N;
            S* hplane = xhat.ptr() + c * N;
            S* oplane = out.ptr() + c * N;
            for (int64_t i = 0; i < N; ++i) {
                hplane[i] = (plane[i] - mean_t[c]) * inv;
                oplane[i] = vg[c] * hplane[i] + vbeta[c];
            }
        }
        auto saved_xhat = std::make_shared<Tensor<S>>(std::move(xhat));
        auto saved_var = std::make_shared<Tensor<S>>(std::move(var_t));
        return push(std::move(out), [this, x, gamma, beta, saved_xhat, saved_var, C, N, train,
                                     eps](Var y) {
            const Tensor<S>& gy = gradbuf_ro(y);
            const Tensor<S>& vg2 = val(gamma);
            Tensor<S>& gx = gradbuf(x);
            Tensor<S>& ggamma = gradbuf(gamma);
            Tensor<S>& gbeta = gradbuf(beta);
            for (int c = 0; c < C; ++c) {
                const S* gplane = gy.ptr() + c * N;
                const S* hplane = saved_xhat->ptr() + c * N;
                S* gxplane = gx.ptr() + c * N;
                const S inv = S(1) / std::sqrt((*saved_var)[c] + eps);
                S sum_g = 0, sum_gh = 0;
                for (int64_t i = 0; i < N; ++i) {
                    sum_g += gplane[i];
                    sum_gh += gplane[i] * hplane[i];
                }
                ggamma[c] += sum_gh;
                gbeta[c] += sum_g;
                if (train) {
                    const S k = vg2[c] * inv / static_cast<S>(N);
                    for (int64_t i = 0; i < N; ++i) {
                        gxplane[i] += k * (static_cast<S>(N) * gplane[i] - sum_g -
                                           hplane[i] * sum_gh);
                    }
                } else {
                    const S k = vg2[c] * inv;
                    for (int64_t i = 0; i < N; ++i) gxplane[i] += k * gplane[i];
                }
            }
        });
    }

    // Standard LSTM cell, gates ordered [input | forget | cell | output].
    // Wx[4H,D], Wh[4H,H], bias[4H].
    std::pair<Var, Var> lstm_cell(Var x, Var h, Var c, Var Wx, Var Wh, Var bias) {
        const Tensor<S>& vx = val(x);
        const Tensor<S>& vh = val(h);
        const Tensor<S>& vc = val(c);
        const Tensor<S>& vWx = val(Wx);
        const Tensor<S>& vWh = val(Wh);
        const Tensor<S>& vbias = val(bias);
        const int Hs = static_cast<int>(vh.numel());
        const int D = static_cast<int>(vx.numel());
        if (vWx.rank() != 2 || vWx.dim(0) != 4 * Hs || vWx.dim(1) != D || vWh.dim(0) != 4 * Hs ||
            vWh.dim(1) != Hs || vbias.numel() != 4 * Hs || vc.numel() != Hs)
            throwf("lstm_cell: shape mismatch (H=%d, D=%d)", Hs, D);

        Tensor<S> gates({4 * Hs});
        for (int r = 0; r < 4 * Hs; ++r) {
            const S* wx = vWx.ptr() + static_cast<int64_t>(r) * D;
            const S* wh = vWh.ptr() + static_cast<int64_t>(r) * Hs;
            S acc = vbias[r];
            for (int i = 0; i < D; ++i) acc += wx[i] * vx[i];
            for (int i = 0; i < Hs; ++i) acc += wh[i] * vh[i];
            gates[r] = acc;
        }
        auto act = std::make_shared<Tensor<S>>(Tensor<S>({4 * Hs}));
        Tensor<S> c_new({Hs}), tanh_c({Hs}), h_new({Hs});
        for (int i = 0; i < Hs; ++i) {
            const S ig = sigmoid_fn(gates[i]);
            const S fg = sigmoid_fn(gates[Hs + i]);
            const S gg = std::tanh(gates[2 * Hs + i]);
            const S og = sigmoid_fn(gates[3 * Hs + i]);
            (*act)[i] = ig;
            (*act)[Hs + i] = fg;
            (*act)[2 * Hs + i] = gg;
            (*act)[3 * Hs + i] = og;
            c_new[i] = fg * vc[i] + ig * gg;
            tanh_c[i] = std::tanh(c_new[i]);
            h_new[i] = og * tanh_c[i];
        }
        auto saved_tanh_c = std::make_shared<Tensor<S>>(std::move(tanh_c));

        const Var c_out = push(std::move(c_new), nullptr);
        const Var h_out = push(std::move(h_new), nullptr);
        // One combined closure serves both outputs; whichever of h'/c' is
        // visited first in the reverse sweep performs the full propagation.
        auto done = std::make_shared<bool>(false);
        auto back = [this, x, h, c, Wx, Wh, bias, act, saved_tanh_c, h_out, c_out, done, Hs,
                     D](Var) {
            if (*done) return;
            *done = true;
            const Tensor<S>* gh = node_grad_ptr(h_out);
            const Tensor<S>* gc_ext = node_grad_ptr(c_out);
            const Tensor<S>& vx2 = val(x);
            const Tensor<S>& vh2 = val(h);
            const Tensor<S>& vc2 = val(c);
            const Tensor<S>& vWx2 = val(Wx);
            const Tensor<S>& vWh2 = val(Wh);
            Tensor<S> dgates({4 * Hs});
            Tensor<S>& gc_in = gradbuf(c);
            for (int i = 0; i < Hs; ++i) {
                const S ig = (*act)[i], fg = (*act)[Hs + i], gg = (*act)[2 * Hs + i],
                        og = (*act)[3 * Hs + i];
                const S tc = (*saved_tanh_c)[i];
                const S dh = gh ? (*gh)[i] : S(0);
                S dc_total = dh * og * (S(1) - tc * tc);
                if (gc_ext) dc_total += (*gc_ext)[i];
                dgates[i] = dc_total * gg * ig * (S(1) - ig);
                dgates[Hs + i] = dc_total * vc2[i] * fg * (S(1) - fg);
                dgates[2 * Hs + i] = dc_total * ig * (S(1) - gg * gg);
                dgates[3 * Hs + i] = dh * tc * og * (S(1) - og);
                gc_in[i] += dc_total * fg;
            }
            Tensor<S>& gx = gradbuf(x);
            Tensor<S>& gh_in = gradbuf(h);
            Tensor<S>& gWx = gradbuf(Wx);
            Tensor<S>& gWh = gradbuf(Wh);
            Tensor<S>& gbias = gradbuf(bias);
            for (int r = 0; r < 4 * Hs; ++r) {
                const S g = dgates[r];
                if (g == S(0)) continue;
                gbias[r] += g;
                const S* wx = vWx2.ptr() + static_cast<int64_t>(r) * D;
                const S* wh = vWh2.ptr() + static_cast<int64_t>(r) * Hs;
                S* gwx = gWx.ptr() + static_cast<int64_t>(r) * D;
                S* gwh = gWh.ptr() + static_cast<int64_t>(r) * Hs;
                for (int i = 0; i < D; ++i) {
                    gwx[i] += g * vx2[i];
                    gx[i] += g * wx[i];
                }
                for (int i = 0; i < Hs; ++i) {
                    gwh[i] += g * vh2[i];
                    gh_in[i] += g * wh[i];
                }
            }
        };
        set_back(c_out, back);
        set_back(h_out, back);
        return {h_out, c_out};
    }

    // Inverted dropout; identity in eval mode.
    Var dropout(Var x, S rate, Rng& rng, bool train) {
        if (!train || rate <= S(0)) {
            return push(Tensor<S>(val(x)), [this, x](Var y) { axpy(x, gradbuf_ro(y), S(1)); });
        }
        const Tensor<S>& vx = val(x);
        auto mask = std::make_shared<Tensor<S>>(vx.shape);
        const S keep = S(1) - rate;
        Tensor<S> out = vx;
        for (int64_t i = 0; i < vx.numel(); ++i) {
            const S m = rng.uniform() < static_cast<double>(rate) ? S(0) : S(1) / keep;
            (*mask)[i] = m;
            out[i] *= m;
        }
        return push(std::move(out), [this, x, mask](Var y) {
            const Tensor<S>& gy = gradbuf_ro(y);
            Tensor<S>& gx = gradbuf(x);
            for (int64_t i = 0; i < gy.numel(); ++i) gx[i] += gy[i] * (*mask)[i];
        });
    }

    // ---- backward ----

    void backward(Var root) {
        if (val(root).numel() != 1) throwf("backward: root must be a scalar");
        gradbuf(root)[0] = S(1);
        for (Var id = root; id >= 0; --id) {
            Node& node = nodes_[static_cast<size_t>(id)];
            if (!node.back || node.grad.data.empty()) continue;
            node.back(id);
        }
    }

    size_t size() const { return nodes_.size(); }

    // Smallest forward-pass distance of any piecewise-linear op input to its
    // breakpoint (ReLU/LeakyReLU zero, clamp bounds). Gradient verification
    // resamples inputs until this clears its tolerance, since central
    // differences straddle the kink otherwise. Symmetric max-pool ties are
    // excluded: tied windows with identical inputs move together under any
    // parameter perturbation.
    double kink_margin() const { return kink_margin_; }

    static Tensor<S> softmax_fwd(const Tensor<S>& x) {
        Tensor<S> out = x;
        S mx = x[0];
        for (S v : x.data) mx = std::max(mx, v);
        S z = 0;
        for (int64_t i = 0; i < x.numel(); ++i) {
            out[i] = std::exp(x[i] - mx);
            z += out[i];
        }
        for (auto& v : out.data) v /= z;
        return out;
    }

    static S sigmoid_fn(S v) {
        if (v >= S(0)) return S(1) / (S(1) + std::exp(-v));
        const S e = std::exp(v);
        return e / (S(1) + e);
    }

private:
    struct Node {
        Tensor<S> value;
        Tensor<S> grad;
        std::function<void(Var)> back;
    };

    Var push(Tensor<S> value, std::function<void(Var)> back) {
        nodes_.push_back(Node{std::move(value), Tensor<S>(), std::move(back)});
        return static_cast<Var>(nodes_.size() - 1);
    }

    void set_back(Var id, std::function<void(Var)> back) {
        nodes_[static_cast<size_t>(id)].back = std::move(back);
    }

    const Tensor<S>* node_grad_ptr(Var id) const {
        const Node& n = nodes_[static_cast<size_t>(id)];
        return n.grad.data.empty() ? nullptr : &n.grad;
    }

    Tensor<S>& gradbuf(Var id) {
        Node& n = nodes_[static_cast<size_t>(id)];
        if (n.grad.data.empty()) n.grad = Tensor<S>(n.value.shape, S(0));
        return n.grad;
    }

    // grad of an already-visited output node; guaranteed allocated in backward
    const Tensor<S>& gradbuf_ro(Var id) const { return nodes_[static_cast<size_t>(id)].grad; }

    void axpy(Var dst, const Tensor<S>& g, S k) {
        Tensor<S>& gd = gradbuf(dst);
        for (int64_t i = 0; i < gd.numel(); ++i) gd[i] += k * g[i];
    }

    void axpy_broadcast(Var dst, S g) {
        Tensor<S>& gd = gradbuf(dst);
        for (auto& v : gd.data) v += g;
    }

    void check_same(Var a, Var b, const char* op) const {
        if (!val(a).same_shape(val(b)))
            throwf("%s: shape mismatch %s vs %s", op, shape_str(val(a).shape).c_str(),
                   shape_str(val(b).shape).c_str());
    }

    std::vector<Node> nodes_;
    double kink_margin_ = std::numeric_limits<double>::infinity();
};

}  // namespace otrec
