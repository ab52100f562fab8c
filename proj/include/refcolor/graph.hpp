#ifndef REFCOLOR_GRAPH_HPP
#define REFCOLOR_GRAPH_HPP

#include <cmath>
#include <deque>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "refcolor/tensor.hpp"

#ifdef REFCOLOR_PROFILE_OPS
#include <chrono>
#include <cstdio>
#include <map>
#endif

namespace refcolor {

#ifdef REFCOLOR_PROFILE_OPS
inline std::map<std::string, double>& op_times() {
    static std::map<std::string, double> t;
    return t;
}
struct OpTimer {
    const char* name;
    std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();
    explicit OpTimer(const char* n) : name(n) {}
    ~OpTimer() { op_times()[name] += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(); }
};
inline void dump_op_times() {
    double total = 0;
    for (auto& [k, v] : op_times())
        total += v;
    for (auto& [k, v] : op_times())
        std::printf("%-18s %8.1f ms  %5.1f%%\n", k.c_str(), v * 1e3, 100 * v / total);
    std::printf("%-18s %8.1f ms\n", "TOTAL", total * 1e3);
}
#define REFCOLOR_OP_TIMER(name) OpTimer op_timer_(name)
#else
#define REFCOLOR_OP_TIMER(name)
#endif

template <class Real>
struct ParamT {
    TensorT<Real> value;
    TensorT<Real> grad;
    bool trainable = true;
};

// Eager tape. Each op computes its value immediately and records a closure
// that scatters the output gradient into its inputs. Nodes live in a deque so
// closures can hold indices across growth.
template <class Real>
class Graph {
public:
    using Ref = int;

    Graph()                        = default;
    Graph(const Graph&)            = delete;
    Graph& operator=(const Graph&) = delete;

    Ref input(TensorT<Real> v) { return push(std::move(v), false, nullptr); }

    Ref constant(Real v) { return input(TensorT<Real>::scalar(v)); }

    Ref param(ParamT<Real>& p) {
        TensorT<Real> view = p.value;  // shares buffer
        return push(std::move(view), p.trainable, &p);
    }

    const TensorT<Real>& val(Ref r) const { return nodes_[r].val; }
    const TensorT<Real>& grad(Ref r) const { return nodes_[r].grad; }
    bool has_grad(Ref r) const { return nodes_[r].grad.defined(); }

    /*------------------------------ arithmetic ------------------------------*/

    Ref mm(Ref a, Ref b) {
        REFCOLOR_OP_TIMER("f.mm");
        auto& A = v(a);
        auto& B = v(b);
        int M = A.rows(), K = A.cols(), K2 = B.rows(), N = B.cols();
        if (K != K2)
            throw std::invalid_argument("mm: inner dims " + shape_str(A.shape) + " x " + shape_str(B.shape));
        TensorT<Real> C = TensorT<Real>::uninit({M, N});
        gemm_nn(A.data, B.data, C.data, M, K, N);
        Ref out = push(std::move(C), needs(a) || needs(b), nullptr);
        record(out, [this, a, b, out] {
            REFCOLOR_OP_TIMER("b.mm");
            auto& A = v(a);
            auto& B = v(b);
            auto& G = nodes_[out].grad;
            if (needs(a))
                gemm_nt(G.data, B.data, g(a).data, A.rows(), B.cols(), A.cols(), true);
            if (needs(b))
                gemm_tn(A.data, G.data, g(b).data, B.rows(), A.rows(), B.cols(), true);
        });
        return out;
    }

    // a * b^T
    Ref mm_nt(Ref a, Ref b) {
        REFCOLOR_OP_TIMER("f.mm_nt");
        auto& A = v(a);
        auto& B = v(b);
        int M = A.rows(), K = A.cols(), N = B.rows();
        if (K != B.cols())
            throw std::invalid_argument("mm_nt: inner dims " + shape_str(A.shape) + " x " + shape_str(B.shape));
        TensorT<Real> C = TensorT<Real>::uninit({M, N});
        gemm_nt(A.data, B.data, C.data, M, K, N);
        Ref out = push(std::move(C), needs(a) || needs(b), nullptr);
        record(out, [this, a, b, out] {
            auto& A = v(a);
            auto& B = v(b);
            auto& G = nodes_[out].grad;
            if (needs(a))
                gemm_nn(G.data, B.data, g(a).data, A.rows(), B.rows(), A.cols(), true);
            if (needs(b))
                gemm_tn(G.data, A.data, g(b).data, B.rows(), A.rows(), A.cols(), true);
        });
        return out;
    }

    Ref add(Ref a, Ref b) { return binary(a, b, "add", [](Real x, Real y) { return x + y; }, Real(1), Real(1)); }
    Ref sub(Ref a, Ref b) { return binary(a, b, "sub", [](Real x, Real y) { return x - y; }, Real(1), Real(-1)); }

    // x @ W + b in one node
    Ref affine(Ref x, Ref w, Ref b) {
        REFCOLOR_OP_TIMER("f.affine");
        auto& X = v(x);
        auto& W = v(w);
        auto& B = v(b);
        int M = X.rows(), K = X.cols(), N = W.cols();
        if (K != W.rows())
            throw std::invalid_argument("affine: inner dims " + shape_str(X.shape) + " x " + shape_str(W.shape));
        if ((int)B.size != N)
            throw std::invalid_argument("affine: bias " + shape_str(B.shape) + " vs out dim " + std::to_string(N));
        TensorT<Real> C = TensorT<Real>::uninit({M, N});
        gemm_nn(X.data, W.data, C.data, M, K, N);
        for (int i = 0; i < M; i++) {
            Real* c = C.row(i);
            for (int j = 0; j < N; j++)
                c[j] += B.data[j];
        }
        Ref out = push(std::move(C), needs(x) || needs(w) || needs(b), nullptr);
        record(out, [this, x, w, b, out] {
            REFCOLOR_OP_TIMER("b.affine");
            auto& G = nodes_[out].grad;
            auto& X = v(x);
            auto& W = v(w);
            int M = X.rows(), K = X.cols(), N = W.cols();
            if (needs(x))
                gemm_nt(G.data, W.data, g(x).data, M, N, K, true);
            if (needs(w))
                gemm_tn(X.data, G.data, g(w).data, K, M, N, true);
            if (needs(b)) {
                Real* bg = g(b).data;
                for (int i = 0; i < M; i++) {
                    const Real* gr = G.row(i);
                    for (int j = 0; j < N; j++)
                        bg[j] += gr[j];
                }
            }
        });
        return out;
    }

    // softmax(scale * q @ k^T) without materializing the logits
    Ref sdp_probs(Ref q, Ref k, Real scale) {
        REFCOLOR_OP_TIMER("f.sdp_probs");
        auto& Q = v(q);
        auto& K = v(k);
        int Lq = Q.rows(), D = Q.cols(), Lk = K.rows();
        if (K.cols() != D)
            throw std::invalid_argument("sdp_probs: width mismatch " + shape_str(Q.shape) + " vs " + shape_str(K.shape));
        if (Lk == 0)
            throw std::invalid_argument("sdp_probs: empty key set");
        TensorT<Real> P = TensorT<Real>::uninit({Lq, Lk});
        gemm_nt(Q.data, K.data, P.data, Lq, D, Lk);
        // chunked max/sum: fixed-order lane accumulators keep reductions both
        // vectorizable and bit-deterministic
        constexpr int LANES = 16;
        for (int i = 0; i < Lq; i++) {
            Real* pr = P.row(i);
            Real mxl[LANES], sml[LANES];
            for (int l = 0; l < LANES; l++) {
                mxl[l] = pr[0] * scale;
                sml[l] = Real(0);
            }
            int j = 0;
            for (; j + LANES <= Lk; j += LANES)
                for (int l = 0; l < LANES; l++) {
                    pr[j + l] *= scale;
                    mxl[l] = mxl[l] < pr[j + l] ? pr[j + l] : mxl[l];
                }
            for (; j < Lk; j++) {
                pr[j] *= scale;
                mxl[0] = mxl[0] < pr[j] ? pr[j] : mxl[0];
            }
            Real mx = mxl[0];
            for (int l = 1; l < LANES; l++)
                mx = mx < mxl[l] ? mxl[l] : mx;
            for (j = 0; j < Lk; j++)
                pr[j] = exp_r(pr[j] - mx);
            for (j = 0; j + LANES <= Lk; j += LANES)
                for (int l = 0; l < LANES; l++)
                    sml[l] += pr[j + l];
            Real sum = 0;
            for (; j < Lk; j++)
                sum += pr[j];
            for (int l = 0; l < LANES; l++)
                sum += sml[l];
            Real inv = Real(1) / sum;
            for (j = 0; j < Lk; j++)
                pr[j] *= inv;
        }
        Ref out = push(std::move(P), needs(q) || needs(k), nullptr);
        record(out, [this, q, k, out, scale] {
            REFCOLOR_OP_TIMER("b.sdp_probs");
            auto& G = nodes_[out].grad;
            auto& P = nodes_[out].val;
            auto& Q = v(q);
            auto& K = v(k);
            int Lq = Q.rows(), D = Q.cols(), Lk = K.rows();
            // dLogits = P o (G - rowdot(G,P)), then chain through the scaled gemm
            TensorT<Real> dL = TensorT<Real>::uninit({Lq, Lk});
            constexpr int LANES = 16;
            for (int i = 0; i < Lq; i++) {
                const Real* pr = P.row(i);
                const Real* gr = G.row(i);
                Real lanes[LANES];
                for (int l = 0; l < LANES; l++)
                    lanes[l] = Real(0);
                int j = 0;
                for (; j + LANES <= Lk; j += LANES)
                    for (int l = 0; l < LANES; l++)
                        lanes[l] += gr[j + l] * pr[j + l];
                Real dot = 0;
                for (; j < Lk; j++)
                    dot += gr[j] * pr[j];
                for (int l = 0; l < LANES; l++)
                    dot += lanes[l];
                Real* dl = dL.row(i);
                for (j = 0; j < Lk; j++)
                    dl[j] = pr[j] * (gr[j] - dot) * scale;
            }
            if (needs(q))
                gemm_nn(dL.data, K.data, g(q).data, Lq, Lk, D, true);
            if (needs(k))
                gemm_tn(dL.data, Q.data, g(k).data, Lk, Lq, D, true);
        });
        return out;
    }

    // x * (1 + scale) + shift, vectors broadcast over rows
    Ref modulate_rows(Ref x, Ref scale, Ref shift) {
        REFCOLOR_OP_TIMER("f.modulate");
        auto& X = v(x);
        auto& S = v(scale);
        auto& T = v(shift);
        int R = X.rows(), C = X.cols();
        if ((int)S.size != C || (int)T.size != C)
            throw std::invalid_argument("modulate_rows: vector width mismatch");
        TensorT<Real> Y = TensorT<Real>::uninit(X.shape);
        for (int i = 0; i < R; i++) {
            const Real* xr = X.row(i);
            Real* yr       = Y.row(i);
            for (int j = 0; j < C; j++)
                yr[j] = xr[j] * (Real(1) + S.data[j]) + T.data[j];
        }
        Ref out = push(std::move(Y), needs(x) || needs(scale) || needs(shift), nullptr);
        record(out, [this, x, scale, shift, out] {
            REFCOLOR_OP_TIMER("b.modulate");
            auto& G = nodes_[out].grad;
            auto& X = v(x);
            auto& S = v(scale);
            TensorT<Real>* xgt = needs(x) ? &g(x) : nullptr;
            Real* sg           = needs(scale) ? g(scale).data : nullptr;
            Real* tg           = needs(shift) ? g(shift).data : nullptr;
            int R = X.rows(), C = X.cols();
            for (int i = 0; i < R; i++) {
                const Real* gr = G.row(i);
                if (xgt) {
                    Real* xg = xgt->row(i);
                    for (int j = 0; j < C; j++)
                        xg[j] += gr[j] * (Real(1) + S.data[j]);
                }
                if (sg) {
                    const Real* xr = X.row(i);
                    for (int j = 0; j < C; j++)
                        sg[j] += gr[j] * xr[j];
                }
                if (tg)
                    for (int j = 0; j < C; j++)
                        tg[j] += gr[j];
            }
        });
        return out;
    }

    // x + y * gate, gate broadcast over rows
    Ref add_gated(Ref x, Ref y, Ref gate) {
        REFCOLOR_OP_TIMER("f.add_gated");
        auto& X = v(x);
        auto& Y = v(y);
        auto& Gt = v(gate);
        check_same_shape(X.shape, Y.shape, "add_gated");
        int R = X.rows(), C = X.cols();
        if ((int)Gt.size != C)
            throw std::invalid_argument("add_gated: gate width mismatch");
        TensorT<Real> Z = TensorT<Real>::uninit(X.shape);
        for (int i = 0; i < R; i++) {
            const Real* xr = X.row(i);
            const Real* yr = Y.row(i);
            Real* zr       = Z.row(i);
            for (int j = 0; j < C; j++)
                zr[j] = xr[j] + yr[j] * Gt.data[j];
        }
        Ref out = push(std::move(Z), needs(x) || needs(y) || needs(gate), nullptr);
        record(out, [this, x, y, gate, out] {
            REFCOLOR_OP_TIMER("b.add_gated");
            auto& G  = nodes_[out].grad;
            auto& Y  = v(y);
            auto& Gt = v(gate);
            TensorT<Real>* xgt = needs(x) ? &g(x) : nullptr;
            TensorT<Real>* ygt = needs(y) ? &g(y) : nullptr;
            Real* gg           = needs(gate) ? g(gate).data : nullptr;
            int R = G.rows(), C = G.cols();
            for (int i = 0; i < R; i++) {
                const Real* gr = G.row(i);
                if (xgt) {
                    Real* xg = xgt->row(i);
                    for (int j = 0; j < C; j++)
                        xg[j] += gr[j];
                }
                if (ygt) {
                    Real* yg = ygt->row(i);
                    for (int j = 0; j < C; j++)
                        yg[j] += gr[j] * Gt.data[j];
                }
                if (gg) {
                    const Real* yr = Y.row(i);
                    for (int j = 0; j < C; j++)
                        gg[j] += gr[j] * yr[j];
                }
            }
        });
        return out;
    }

    Ref hadamard(Ref a, Ref b) {
        auto& A = v(a);
        auto& B = v(b);
        check_same_shape(A.shape, B.shape, "hadamard");
        TensorT<Real> C = TensorT<Real>::uninit(A.shape);
        for (size_t i = 0; i < A.size; i++)
            C.data[i] = A.data[i] * B.data[i];
        Ref out = push(std::move(C), needs(a) || needs(b), nullptr);
        record(out, [this, a, b, out] {
            auto& G = nodes_[out].grad;
            auto& A = v(a);
            auto& B = v(b);
            if (needs(a)) {
                Real* ag = g(a).data;
                for (size_t i = 0; i < A.size; i++)
                    ag[i] += G.data[i] * B.data[i];
            }
            if (needs(b)) {
                Real* bg = g(b).data;
                for (size_t i = 0; i < B.size; i++)
                    bg[i] += G.data[i] * A.data[i];
            }
        });
        return out;
    }

    Ref scale(Ref a, Real s) {
        auto& A          = v(a);
        TensorT<Real> C  = A.clone();
        for (size_t i = 0; i < C.size; i++)
            C.data[i] *= s;
        Ref out = push(std::move(C), needs(a), nullptr);
        record(out, [this, a, out, s] {
            auto& G = nodes_[out].grad;
            if (needs(a)) {
                Real* ag = g(a).data;
                for (size_t i = 0; i < G.size; i++)
                    ag[i] += s * G.data[i];
            }
        });
        return out;
    }

    Ref add_scalar(Ref a, Real s) {
        auto& A         = v(a);
        TensorT<Real> C = A.clone();
        for (size_t i = 0; i < C.size; i++)
            C.data[i] += s;
        Ref out = push(std::move(C), needs(a), nullptr);
        record(out, [this, a, out] {
            auto& G = nodes_[out].grad;
            if (needs(a)) {
                Real* ag = g(a).data;
                for (size_t i = 0; i < G.size; i++)
                    ag[i] += G.data[i];
            }
        });
        return out;
    }

    // x: [R,C], vec: C entries, broadcast over rows
    Ref add_rowvec(Ref x, Ref vec) { return rowvec(x, vec, true); }
    Ref mul_rowvec(Ref x, Ref vec) { return rowvec(x, vec, false); }

    /*----------------------------- nonlinearities ----------------------------*/

    // tanh-form GELU: 0.5 x (1 + tanh(c (x + a x^3)))
    Ref gelu(Ref x) {
        REFCOLOR_OP_TIMER("f.gelu");
        constexpr Real c = (Real)0.79788456080286535588;  // sqrt(2/pi)
        constexpr Real a = (Real)0.044715;
        auto& X         = v(x);
        TensorT<Real> Y = TensorT<Real>::uninit(X.shape);
        for (size_t i = 0; i < X.size; i++) {
            Real t    = X.data[i];
            Y.data[i] = Real(0.5) * t * (Real(1) + tanh_r(c * (t + a * t * t * t)));
        }
        Ref out = push(std::move(Y), needs(x), nullptr);
        record(out, [this, x, out] {
            REFCOLOR_OP_TIMER("b.gelu");
            if (!needs(x))
                return;
            auto& G  = nodes_[out].grad;
            auto& X  = v(x);
            Real* xg = g(x).data;
            for (size_t i = 0; i < X.size; i++) {
                Real t  = X.data[i];
                Real th = tanh_r(c * (t + a * t * t * t));
                Real d  = Real(0.5) * (Real(1) + th) +
                         Real(0.5) * t * (Real(1) - th * th) * c * (Real(1) + Real(3) * a * t * t);
                xg[i] += d * G.data[i];
            }
        });
        return out;
    }

    // Row-wise normalization over the last dim, variance floor 1e-5, no affine.
    Ref layer_norm(Ref x) {
        REFCOLOR_OP_TIMER("f.layer_norm");
        auto& X = v(x);
        int R = X.rows(), C = X.cols();
        if (C < 1)
            throw std::invalid_argument("layer_norm: empty rows");
        TensorT<Real> Y    = TensorT<Real>::uninit(X.shape);
        TensorT<Real> rstd = TensorT<Real>::uninit({R});
        for (int i = 0; i < R; i++) {
            const Real* xr = X.row(i);
            double mu      = 0;
            for (int j = 0; j < C; j++)
                mu += xr[j];
            mu /= C;
            double var = 0;
            for (int j = 0; j < C; j++)
                var += ((double)xr[j] - mu) * ((double)xr[j] - mu);
            var /= C;
            double r     = 1.0 / std::sqrt(var + 1e-5);
            rstd.data[i] = (Real)r;
            Real* yr     = Y.row(i);
            for (int j = 0; j < C; j++)
                yr[j] = (Real)(((double)xr[j] - mu) * r);
        }
        Ref out = push(std::move(Y), needs(x), nullptr);
        record(out, [this, x, out, rstd] {
            if (!needs(x))
                return;
            auto& G  = nodes_[out].grad;
            auto& Y  = nodes_[out].val;
            auto& Xg = g(x);
            int R = Y.rows(), C = Y.cols();
            for (int i = 0; i < R; i++) {
                const Real* yr = Y.row(i);
                const Real* gr = G.row(i);
                double mg = 0, mgy = 0;
                for (int j = 0; j < C; j++) {
                    mg += gr[j];
                    mgy += gr[j] * yr[j];
                }
                mg /= C;
                mgy /= C;
                Real* xg = Xg.row(i);
                double r = rstd.data[i];
                for (int j = 0; j < C; j++)
                    xg[j] += (Real)(r * ((double)gr[j] - mg - (double)yr[j] * mgy));
            }
        });
        return out;
    }

    Ref softmax_rows(Ref x) {
        REFCOLOR_OP_TIMER("f.softmax");
        auto& X = v(x);
        int R = X.rows(), C = X.cols();
        if (C == 0)
            throw std::invalid_argument("softmax over empty row");
        TensorT<Real> Y = TensorT<Real>::uninit(X.shape);
        for (int i = 0; i < R; i++) {
            const Real* xr = X.row(i);
            Real* yr       = Y.row(i);
            Real mx        = xr[0];
            for (int j = 1; j < C; j++)
                mx = std::max(mx, xr[j]);
            for (int j = 0; j < C; j++)
                yr[j] = exp_r(xr[j] - mx);
            Real sum = 0;
            for (int j = 0; j < C; j++)
                sum += yr[j];
            Real inv = Real(1) / sum;
            for (int j = 0; j < C; j++)
                yr[j] = yr[j] * inv;
        }
        Ref out = push(std::move(Y), needs(x), nullptr);
        record(out, [this, x, out] {
            if (!needs(x))
                return;
            auto& G  = nodes_[out].grad;
            auto& Y  = nodes_[out].val;
            auto& Xg = g(x);
            int R = Y.rows(), C = Y.cols();
            for (int i = 0; i < R; i++) {
                const Real* yr = Y.row(i);
                const Real* gr = G.row(i);
                double dot     = 0;
                for (int j = 0; j < C; j++)
                    dot += (double)gr[j] * yr[j];
                Real* xg = Xg.row(i);
                for (int j = 0; j < C; j++)
                    xg[j] += (Real)(yr[j] * ((double)gr[j] - dot));
            }
        });
        return out;
    }

    /*------------------------------ structure -------------------------------*/

    Ref reshape(Ref x, Shape s) {
        Ref out = push(v(x).reshaped(std::move(s)), needs(x), nullptr);
        record(out, [this, x, out] {
            if (!needs(x))
                return;
            auto& G  = nodes_[out].grad;
            Real* xg = g(x).data;
            for (size_t i = 0; i < G.size; i++)
                xg[i] += G.data[i];
        });
        return out;
    }

    Ref slice_rows(Ref x, int r0, int r1) {
        Ref out = push(v(x).row_view(r0, r1), needs(x), nullptr);
        record(out, [this, x, out, r0] {
            if (!needs(x))
                return;
            auto& G  = nodes_[out].grad;
            Real* xg = g(x).data + (size_t)r0 * v(x).cols();
            for (size_t i = 0; i < G.size; i++)
                xg[i] += G.data[i];
        });
        return out;
    }

    Ref concat_rows(const std::vector<Ref>& parts) {
        REFCOLOR_OP_TIMER("f.concat_rows");
        if (parts.empty())
            throw std::invalid_argument("concat_rows: empty");
        int C = v(parts[0]).cols(), R = 0;
        for (Ref p : parts) {
            if (v(p).cols() != C)
                throw std::invalid_argument("concat_rows: col mismatch");
            R += v(p).rows();
        }
        TensorT<Real> Y = TensorT<Real>::uninit({R, C});
        bool ng         = false;
        size_t off      = 0;
        for (Ref p : parts) {
            auto& P = v(p);
            std::copy(P.data, P.data + P.size, Y.data + off);
            off += P.size;
            ng = ng || needs(p);
        }
        Ref out = push(std::move(Y), ng, nullptr);
        record(out, [this, parts, out] {
            auto& G    = nodes_[out].grad;
            size_t off = 0;
            for (Ref p : parts) {
                auto& P = v(p);
                if (needs(p)) {
                    Real* pg            = g(p).data;
                    const Real* gsrc    = G.data + off;
                    for (size_t i = 0; i < P.size; i++)
                        pg[i] += gsrc[i];
                }
                off += P.size;
            }
        });
        return out;
    }

    Ref slice_cols(Ref x, int c0, int c1) {
        REFCOLOR_OP_TIMER("f.slice_cols");
        auto& X = v(x);
        int R = X.rows(), C = X.cols();
        if (c0 < 0 || c1 > C || c0 >= c1)
            throw std::invalid_argument("slice_cols out of range");
        int W           = c1 - c0;
        TensorT<Real> Y = TensorT<Real>::uninit({R, W});
        for (int i = 0; i < R; i++)
            std::copy(X.row(i) + c0, X.row(i) + c1, Y.row(i));
        Ref out = push(std::move(Y), needs(x), nullptr);
        record(out, [this, x, out, c0, W] {
            if (!needs(x))
                return;
            auto& G  = nodes_[out].grad;
            auto& Xg = g(x);
            int R    = G.rows();
            for (int i = 0; i < R; i++) {
                Real* xg       = Xg.row(i) + c0;
                const Real* gr = G.row(i);
                for (int j = 0; j < W; j++)
                    xg[j] += gr[j];
            }
        });
        return out;
    }

    Ref concat_cols(const std::vector<Ref>& parts) {
        REFCOLOR_OP_TIMER("f.concat_cols");
        if (parts.empty())
            throw std::invalid_argument("concat_cols: empty");
        int R = v(parts[0]).rows(), C = 0;
        bool ng = false;
        for (Ref p : parts) {
            if (v(p).rows() != R)
                throw std::invalid_argument("concat_cols: row mismatch");
            C += v(p).cols();
            ng = ng || needs(p);
        }
        TensorT<Real> Y = TensorT<Real>::uninit({R, C});
        int off         = 0;
        for (Ref p : parts) {
            auto& P = v(p);
            int w   = P.cols();
            for (int i = 0; i < R; i++)
                std::copy(P.row(i), P.row(i) + w, Y.row(i) + off);
            off += w;
        }
        Ref out = push(std::move(Y), ng, nullptr);
        record(out, [this, parts, out] {
            auto& G = nodes_[out].grad;
            int R   = G.rows();
            int off = 0;
            for (Ref p : parts) {
                auto& P = v(p);
                int w   = P.cols();
                if (needs(p)) {
                    auto& Pg = g(p);
                    for (int i = 0; i < R; i++) {
                        const Real* gr = G.row(i) + off;
                        Real* pg       = Pg.row(i);
                        for (int j = 0; j < w; j++)
                            pg[j] += gr[j];
                    }
                }
                off += w;
            }
        });
        return out;
    }

    Ref embed_rows(Ref table, std::vector<int> ids) {
        REFCOLOR_OP_TIMER("f.embed_rows");
        auto& T = v(table);
        int C   = T.cols();
        for (int id : ids)
            if (id < 0 || id >= T.rows())
                throw std::invalid_argument("embed_rows: id " + std::to_string(id) + " out of table " + shape_str(T.shape));
        TensorT<Real> Y = TensorT<Real>::uninit({(int)ids.size(), C});
        for (size_t i = 0; i < ids.size(); i++)
            std::copy(T.row(ids[i]), T.row(ids[i]) + C, Y.row((int)i));
        Ref out = push(std::move(Y), needs(table), nullptr);
        record(out, [this, table, out, ids = std::move(ids)] {
            if (!needs(table))
                return;
            auto& G  = nodes_[out].grad;
            auto& Tg = g(table);
            int C    = G.cols();
            for (size_t i = 0; i < ids.size(); i++) {
                Real* tg       = Tg.row(ids[i]);
                const Real* gr = G.row((int)i);
                for (int j = 0; j < C; j++)
                    tg[j] += gr[j];
            }
        });
        return out;
    }

    Ref mean_over_rows(Ref x) {
        auto& X = v(x);
        int R = X.rows(), C = X.cols();
        if (R == 0)
            throw std::invalid_argument("mean_over_rows: no rows");
        TensorT<Real> Y = TensorT<Real>::zeros({1, C});
        for (int i = 0; i < R; i++)
            for (int j = 0; j < C; j++)
                Y.data[j] += X.row(i)[j];
        for (int j = 0; j < C; j++)
            Y.data[j] /= (Real)R;
        Ref out = push(std::move(Y), needs(x), nullptr);
        record(out, [this, x, out] {
            if (!needs(x))
                return;
            auto& G  = nodes_[out].grad;
            auto& X  = v(x);
            auto& Xg = g(x);
            int R = X.rows(), C = X.cols();
            for (int i = 0; i < R; i++) {
                Real* xg = Xg.row(i);
                for (int j = 0; j < C; j++)
                    xg[j] += G.data[j] / (Real)R;
            }
        });
        return out;
    }

    // Patch extraction with reflect-101 borders; img is [H,W,C] row-major.
    // Output rows ordered (oy,ox), entries ordered (ky,kx,c).
    Ref im2col_reflect(Ref img, int H, int W, int C, int k, int stride) {
        REFCOLOR_OP_TIMER("f.im2col");
        auto& X = v(img);
        if ((size_t)H * W * C != X.size)
            throw std::invalid_argument("im2col: dims do not match tensor " + shape_str(X.shape));
        if (H % stride || W % stride)
            throw std::invalid_argument("im2col: size not divisible by stride");
        int oh = H / stride, ow = W / stride, pad = (k - 1) / 2;
        auto refl = [](int i, int n) {
            if (i < 0)
                i = -i;
            if (i >= n)
                i = 2 * n - 2 - i;
            return i;
        };
        TensorT<Real> Y = TensorT<Real>::uninit({oh * ow, k * k * C});
        for (int oy = 0; oy < oh; oy++)
            for (int ox = 0; ox < ow; ox++) {
                Real* yr = Y.row(oy * ow + ox);
                int idx  = 0;
                for (int ky = 0; ky < k; ky++) {
                    int iy = refl(oy * stride + ky - pad, H);
                    for (int kx = 0; kx < k; kx++) {
                        int ix         = refl(ox * stride + kx - pad, W);
                        const Real* px = X.data + ((size_t)iy * W + ix) * C;
                        for (int c = 0; c < C; c++)
                            yr[idx++] = px[c];
                    }
                }
            }
        Ref out = push(std::move(Y), needs(img), nullptr);
        record(out, [this, img, out, H, W, C, k, stride] {
            if (!needs(img))
                return;
            auto& G = nodes_[out].grad;
            int oh = H / stride, ow = W / stride, pad = (k - 1) / 2;
            auto refl = [](int i, int n) {
                if (i < 0)
                    i = -i;
                if (i >= n)
                    i = 2 * n - 2 - i;
                return i;
            };
            auto& Ig = g(img);
            for (int oy = 0; oy < oh; oy++)
                for (int ox = 0; ox < ow; ox++) {
                    const Real* gr = G.row(oy * ow + ox);
                    int idx        = 0;
                    for (int ky = 0; ky < k; ky++) {
                        int iy = refl(oy * stride + ky - pad, H);
                        for (int kx = 0; kx < k; kx++) {
                            int ix   = refl(ox * stride + kx - pad, W);
                            Real* px = Ig.data + ((size_t)iy * W + ix) * C;
                            for (int c = 0; c < C; c++)
                                px[c] += gr[idx++];
                        }
                    }
                }
        });
        return out;
    }

    /*------------------------------ reductions ------------------------------*/

    Ref sum_all(Ref x) {
        auto& X    = v(x);
        double s   = 0;
        for (size_t i = 0; i < X.size; i++)
            s += X.data[i];
        Ref out = push(TensorT<Real>::scalar((Real)s), needs(x), nullptr);
        record(out, [this, x, out] {
            if (!needs(x))
                return;
            Real gv  = nodes_[out].grad.data[0];
            auto& X  = v(x);
            Real* xg = g(x).data;
            for (size_t i = 0; i < X.size; i++)
                xg[i] += gv;
        });
        return out;
    }

    Ref mse(Ref a, Ref b) {
        REFCOLOR_OP_TIMER("f.mse");
        auto& A = v(a);
        auto& B = v(b);
        check_same_shape(A.shape, B.shape, "mse");
        double s = 0;
        for (size_t i = 0; i < A.size; i++) {
            double d = (double)A.data[i] - B.data[i];
            s += d * d;
        }
        s /= A.size;
        Ref out = push(TensorT<Real>::scalar((Real)s), needs(a) || needs(b), nullptr);
        record(out, [this, a, b, out] {
            Real gv = nodes_[out].grad.data[0];
            auto& A = v(a);
            auto& B = v(b);
            Real c  = Real(2) / (Real)A.size * gv;
            if (needs(a)) {
                Real* ag = g(a).data;
                for (size_t i = 0; i < A.size; i++)
                    ag[i] += c * (A.data[i] - B.data[i]);
            }
            if (needs(b)) {
                Real* bg = g(b).data;
                for (size_t i = 0; i < B.size; i++)
                    bg[i] += c * (B.data[i] - A.data[i]);
            }
        });
        return out;
    }

    /*------------------------------- backward -------------------------------*/

    // Reverse sweep from a scalar loss. Gradients of trainable parameters are
    // accumulated into their ParamT::grad (allocated on first use), so batch
    // accumulation is just repeated backward calls in a fixed order.
    void backward(Ref loss) {
        if (!v(loss).is_scalar())
            throw std::invalid_argument("backward: loss must be scalar, got " + shape_str(v(loss).shape));
        ensure_grad(loss).data[0] = Real(1);
        for (int i = loss; i >= 0; i--) {
            Node& n = nodes_[i];
            if (!n.grad.defined() || !n.back)
                continue;
            n.back();
        }
        for (int i = 0; i <= loss; i++) {
            Node& n = nodes_[i];
            if (n.param && n.param->trainable && n.grad.defined()) {
                if (!n.param->grad.defined())
                    n.param->grad = TensorT<Real>::zeros(n.param->value.shape);
                for (size_t j = 0; j < n.grad.size; j++)
                    n.param->grad.data[j] += n.grad.data[j];
            }
        }
    }

    size_t num_nodes() const { return nodes_.size(); }

private:
    struct Node {
        TensorT<Real> val;
        TensorT<Real> grad;
        bool needs_grad = false;
        ParamT<Real>* param = nullptr;
        std::function<void()> back;
    };

    std::deque<Node> nodes_;

    const TensorT<Real>& v(Ref r) const { return nodes_[r].val; }
    bool needs(Ref r) const { return nodes_[r].needs_grad; }

    TensorT<Real>& ensure_grad(Ref r) {
        Node& n = nodes_[r];
        if (!n.grad.defined())
            n.grad = TensorT<Real>::zeros(n.val.shape);
        return n.grad;
    }
    TensorT<Real>& g(Ref r) { return ensure_grad(r); }

    Ref push(TensorT<Real> val, bool needs_grad, ParamT<Real>* p) {
        Node n;
        n.val        = std::move(val);
        n.needs_grad = needs_grad;
        n.param      = p;
        nodes_.push_back(std::move(n));
        return (int)nodes_.size() - 1;
    }

    void record(Ref out, std::function<void()> fn) {
        if (nodes_[out].needs_grad)
            nodes_[out].back = std::move(fn);
    }

    template <class F>
    Ref binary(Ref a, Ref b, const char* name, F fwd, Real wa, Real wb) {
        auto& A = v(a);
        auto& B = v(b);
        check_same_shape(A.shape, B.shape, name);
        TensorT<Real> C = TensorT<Real>::uninit(A.shape);
        for (size_t i = 0; i < A.size; i++)
            C.data[i] = fwd(A.data[i], B.data[i]);
        Ref out = push(std::move(C), needs(a) || needs(b), nullptr);
        record(out, [this, a, b, out, wa, wb] {
            auto& G = nodes_[out].grad;
            if (needs(a)) {
                Real* ag = g(a).data;
                for (size_t i = 0; i < G.size; i++)
                    ag[i] += wa * G.data[i];
            }
            if (needs(b)) {
                Real* bg = g(b).data;
                for (size_t i = 0; i < G.size; i++)
                    bg[i] += wb * G.data[i];
            }
        });
        return out;
    }

    Ref rowvec(Ref x, Ref vec, bool is_add) {
        auto& X = v(x);
        auto& V = v(vec);
        int C   = X.cols();
        if ((int)V.size != C)
            throw std::invalid_argument(std::string(is_add ? "add_rowvec" : "mul_rowvec") +
                                        ": vec " + shape_str(V.shape) + " vs cols of " + shape_str(X.shape));
        int R           = X.rows();
        TensorT<Real> Y = TensorT<Real>::uninit(X.shape);
        for (int i = 0; i < R; i++) {
            const Real* xr = X.row(i);
            Real* yr       = Y.row(i);
            if (is_add)
                for (int j = 0; j < C; j++)
                    yr[j] = xr[j] + V.data[j];
            else
                for (int j = 0; j < C; j++)
                    yr[j] = xr[j] * V.data[j];
        }
        Ref out = push(std::move(Y), needs(x) || needs(vec), nullptr);
        record(out, [this, x, vec, out, is_add] {
            auto& G  = nodes_[out].grad;
            auto& X  = v(x);
            auto& V  = v(vec);
            TensorT<Real>* xgt = needs(x) ? &g(x) : nullptr;
            Real* vg           = needs(vec) ? g(vec).data : nullptr;
            int R = X.rows(), C = X.cols();
            for (int i = 0; i < R; i++) {
                const Real* gr = G.row(i);
                if (xgt) {
                    Real* xg = xgt->row(i);
                    if (is_add)
                        for (int j = 0; j < C; j++)
                            xg[j] += gr[j];
                    else
                        for (int j = 0; j < C; j++)
                            xg[j] += gr[j] * V.data[j];
                }
                if (vg) {
                    const Real* xr = X.row(i);
                    if (is_add)
                        for (int j = 0; j < C; j++)
                            vg[j] += gr[j];
                    else
                        for (int j = 0; j < C; j++)
                            vg[j] += gr[j] * xr[j];
                }
            }
        });
        return out;
    }
};

}  // namespace refcolor

#endif
