#ifndef REFCOLOR_TENSOR_HPP
#define REFCOLOR_TENSOR_HPP

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace refcolor {

#ifdef __GLIBC__
// Training graphs allocate and free many >128 KiB activation buffers per
// sample; keep them on the heap free lists instead of mmap so pages are
// recycled without kernel zeroing.
#include <malloc.h>
inline const bool malloc_tuned = [] {
    mallopt(M_MMAP_THRESHOLD, 256 * 1024 * 1024);
    mallopt(M_TRIM_THRESHOLD, 256 * 1024 * 1024);
    return true;
}();
#endif

/*------------------------------- fast float math -----------------------------*/
// Branch-free polynomial exp/tanh for the float training path; plain
// arithmetic so the compiler can vectorize the surrounding loops. Relative
// error ~2e-7 (Cephes coefficients). The double path keeps libm so the
// 64-bit verification mode stays maximally accurate.

inline float fast_exp(float x) {
    float z  = x * 1.44269504088896341f;
    float kf = (z + 12582912.0f) - 12582912.0f;  // round to nearest
    float r  = x - kf * 0.693359375f + kf * 2.12194440e-4f;  // two-part ln2
    float y  = 1.9875691500e-4f;
    y        = y * r + 1.3981999507e-3f;
    y        = y * r + 8.3334519073e-3f;
    y        = y * r + 4.1665795894e-2f;
    y        = y * r + 1.6666665459e-1f;
    y        = y * r + 5.0000001201e-1f;
    float p  = y * r * r + r + 1.0f;
    int32_t k = (int32_t)kf;
    k         = k < -126 ? -126 : k;  // saturate instead of overflowing the bit trick
    k         = k > 127 ? 127 : k;
    return p * std::bit_cast<float>((uint32_t)(127 + k) << 23);
}

inline float fast_tanh(float x) {
    float e = fast_exp(2.0f * x);  // saturates, so the ratio stays in [-1, 1]
    return (e - 1.0f) / (e + 1.0f);
}

template <class Real>
inline Real exp_r(Real x) {
    if constexpr (std::is_same_v<Real, float>)
        return fast_exp(x);
    else
        return std::exp(x);
}

template <class Real>
inline Real tanh_r(Real x) {
    if constexpr (std::is_same_v<Real, float>)
        return fast_tanh(x);
    else
        return std::tanh(x);
}

using Shape = std::vector<int>;

inline size_t shape_numel(const Shape& s) {
    size_t n = 1;
    for (int d : s) {
        if (d < 0)
            throw std::invalid_argument("negative dim in shape");
        n *= (size_t)d;
    }
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); i++)
        os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

// Dense row-major tensor. Views created by reshape/row-slice share the
// underlying buffer; everything else owns a fresh allocation. uninit() skips
// the zero fill for outputs that are fully overwritten.
template <class Real>
struct TensorT {
    Shape shape;
    std::shared_ptr<Real[]> store;
    Real* data = nullptr;
    size_t size = 0;

    TensorT() = default;

    static TensorT uninit(Shape s) {
        TensorT t;
        t.shape = std::move(s);
        t.size  = shape_numel(t.shape);
        t.store = std::shared_ptr<Real[]>(new Real[t.size]);
        t.data  = t.store.get();
        return t;
    }

    static TensorT zeros(Shape s) {
        TensorT t = uninit(std::move(s));
        std::fill(t.data, t.data + t.size, Real(0));
        return t;
    }

    static TensorT full(Shape s, Real v) {
        TensorT t = uninit(std::move(s));
        std::fill(t.data, t.data + t.size, v);
        return t;
    }

    static TensorT from(Shape s, const std::vector<Real>& vals) {
        TensorT t = uninit(std::move(s));
        if (vals.size() != t.size)
            throw std::invalid_argument("tensor init size mismatch: " + shape_str(t.shape));
        std::copy(vals.begin(), vals.end(), t.data);
        return t;
    }

    static TensorT scalar(Real v) { return full({1}, v); }

    bool defined() const { return data != nullptr; }
    bool is_scalar() const { return size == 1; }

    // Last dim = columns, everything before = rows. 1-D tensors count as one row.
    int cols() const { return shape.empty() ? 1 : shape.back(); }
    int rows() const { return cols() ? (int)(size / (size_t)cols()) : 0; }

    Real& operator[](size_t i) { return data[i]; }
    const Real& operator[](size_t i) const { return data[i]; }

    Real* row(int r) { return data + (size_t)r * cols(); }
    const Real* row(int r) const { return data + (size_t)r * cols(); }

    TensorT clone() const {
        TensorT t = uninit(shape);
        std::copy(data, data + size, t.data);
        return t;
    }

    // Zero-copy view with a new shape (element count must match).
    TensorT reshaped(Shape s) const {
        if (shape_numel(s) != size)
            throw std::invalid_argument("reshape " + shape_str(shape) + " -> " + shape_str(s) + " changes element count");
        TensorT t = *this;
        t.shape   = std::move(s);
        return t;
    }

    // Zero-copy view of rows [r0, r1) of a row-major 2-D interpretation.
    TensorT row_view(int r0, int r1) const {
        if (r0 < 0 || r1 > rows() || r0 > r1)
            throw std::invalid_argument("row_view out of range");
        TensorT t;
        t.shape = {r1 - r0, cols()};
        t.size  = (size_t)(r1 - r0) * cols();
        t.store = store;
        t.data  = data + (size_t)r0 * cols();
        return t;
    }

    bool same_shape(const TensorT& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (size_t i = 0; i < size; i++)
            if (!std::isfinite((double)data[i]))
                return false;
        return true;
    }

    template <class Other>
    TensorT<Other> cast() const {
        TensorT<Other> t = TensorT<Other>::uninit(shape);
        for (size_t i = 0; i < size; i++)
            t.data[i] = (Other)data[i];
        return t;
    }
};

using Tensor  = TensorT<float>;
using TensorD = TensorT<double>;

inline void check_same_shape(const Shape& a, const Shape& b, const char* op) {
    if (a != b)
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

/*---------------------------------- gemm ----------------------------------*/
// C[M,N] = A[M,K] * B[K,N]  (+= when accumulate). Register-tiled 4x32
// microkernel under a k-block loop; per-element accumulation order is the
// fixed k order, so results are run-to-run identical.
template <class Real>
void gemm_nn(const Real* __restrict__ A, const Real* __restrict__ B, Real* __restrict__ C,
             int M, int K, int N, bool accumulate = false) {
    constexpr int KB = 64, TI = 4, TJ = 32;
    if (!accumulate)
        std::fill(C, C + (size_t)M * N, Real(0));
    int Mt = M - M % TI, Nt = N - N % TJ;
    for (int j0 = 0; j0 < Nt; j0 += TJ) {
        for (int k0 = 0; k0 < K; k0 += KB) {
            int k1 = std::min(k0 + KB, K);
            int i  = 0;
            for (; i < Mt; i += TI) {
                Real acc0[TJ], acc1[TJ], acc2[TJ], acc3[TJ];
                Real* __restrict__ c0 = C + (size_t)(i + 0) * N + j0;
                Real* __restrict__ c1 = C + (size_t)(i + 1) * N + j0;
                Real* __restrict__ c2 = C + (size_t)(i + 2) * N + j0;
                Real* __restrict__ c3 = C + (size_t)(i + 3) * N + j0;
                for (int j = 0; j < TJ; j++) {
                    acc0[j] = c0[j];
                    acc1[j] = c1[j];
                    acc2[j] = c2[j];
                    acc3[j] = c3[j];
                }
                const Real* __restrict__ a0 = A + (size_t)(i + 0) * K;
                const Real* __restrict__ a1 = A + (size_t)(i + 1) * K;
                const Real* __restrict__ a2 = A + (size_t)(i + 2) * K;
                const Real* __restrict__ a3 = A + (size_t)(i + 3) * K;
                for (int k = k0; k < k1; k++) {
                    const Real* __restrict__ b = B + (size_t)k * N + j0;
                    Real v0 = a0[k], v1 = a1[k], v2 = a2[k], v3 = a3[k];
                    for (int j = 0; j < TJ; j++) {
                        Real bv = b[j];
                        acc0[j] += v0 * bv;
                        acc1[j] += v1 * bv;
                        acc2[j] += v2 * bv;
                        acc3[j] += v3 * bv;
                    }
                }
                for (int j = 0; j < TJ; j++) {
                    c0[j] = acc0[j];
                    c1[j] = acc1[j];
                    c2[j] = acc2[j];
                    c3[j] = acc3[j];
                }
            }
            for (; i < M; i++) {  // leftover rows
                const Real* __restrict__ a = A + (size_t)i * K;
                Real* __restrict__ c       = C + (size_t)i * N + j0;
                for (int k = k0; k < k1; k++) {
                    Real av                    = a[k];
                    const Real* __restrict__ b = B + (size_t)k * N + j0;
                    for (int j = 0; j < TJ; j++)
                        c[j] += av * b[j];
                }
            }
        }
    }
    if (Nt < N) {  // leftover columns
        int W = N - Nt;
        for (int k0 = 0; k0 < K; k0 += KB) {
            int k1 = std::min(k0 + KB, K);
            for (int i = 0; i < M; i++) {
                const Real* __restrict__ a = A + (size_t)i * K;
                Real* __restrict__ c       = C + (size_t)i * N + Nt;
                for (int k = k0; k < k1; k++) {
                    Real av                    = a[k];
                    const Real* __restrict__ b = B + (size_t)k * N + Nt;
                    for (int j = 0; j < W; j++)
                        c[j] += av * b[j];
                }
            }
        }
    }
}

template <class Real>
void transpose_copy(const Real* __restrict__ A, Real* __restrict__ AT, int R, int C) {
    constexpr int TB = 32;  // tile to keep both sides cache-resident
    for (int i0 = 0; i0 < R; i0 += TB) {
        int i1 = std::min(i0 + TB, R);
        for (int j0 = 0; j0 < C; j0 += TB) {
            int j1 = std::min(j0 + TB, C);
            for (int i = i0; i < i1; i++)
                for (int j = j0; j < j1; j++)
                    AT[(size_t)j * R + i] = A[(size_t)i * C + j];
        }
    }
}

namespace detail {
template <class Real>
std::vector<Real>& gemm_scratch() {
    static thread_local std::vector<Real> buf;
    return buf;
}
}  // namespace detail

// C[M,N] = A[M,K] * B[N,K]^T
template <class Real>
void gemm_nt(const Real* A, const Real* B, Real* C, int M, int K, int N, bool accumulate = false) {
    auto& bt = detail::gemm_scratch<Real>();
    bt.resize((size_t)K * N);
    transpose_copy(B, bt.data(), N, K);
    gemm_nn(A, bt.data(), C, M, K, N, accumulate);
}

// C[M,N] = A[K,M]^T * B[K,N]
template <class Real>
void gemm_tn(const Real* A, const Real* B, Real* C, int M, int K, int N, bool accumulate = false) {
    auto& at = detail::gemm_scratch<Real>();
    at.resize((size_t)K * M);
    transpose_copy(A, at.data(), K, M);
    gemm_nn(at.data(), B, C, M, K, N, accumulate);
}

}  // namespace refcolor

#endif
