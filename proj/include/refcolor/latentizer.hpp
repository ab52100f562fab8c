#ifndef REFCOLOR_LATENTIZER_HPP
#define REFCOLOR_LATENTIZER_HPP

#include <cmath>
#include <cstdint>
#include <vector>

#include "refcolor/tensor.hpp"

namespace refcolor {

// Lossless latent stand-in: space-to-depth plus the affine map x/127.5 - 1.
// No learned parameters, exact roundtrip.
template <class Real>
struct LatentGridT {
    TensorT<Real> data;   // [T, h, w, c] with c = src_channels * P^2
    int T = 0, h = 0, w = 0, c = 0;
    int patch        = 0;  // provenance
    int src_channels = 0;

    // [T*h*w, c] view for token processing
    TensorT<Real> tokens() const { return data.reshaped({T * h * w, c}); }
};

using LatentGrid = LatentGridT<float>;

template <class Real>
LatentGridT<Real> patchify(const uint8_t* frames, int T, int H, int W, int C, int P) {
    if (P <= 0 || H % P || W % P)
        throw std::invalid_argument("patchify: " + std::to_string(H) + "x" + std::to_string(W) +
                                    " not divisible by patch " + std::to_string(P));
    LatentGridT<Real> g;
    g.T            = T;
    g.h            = H / P;
    g.w            = W / P;
    g.c            = C * P * P;
    g.patch        = P;
    g.src_channels = C;
    g.data         = TensorT<Real>::zeros({T, g.h, g.w, g.c});
    Real* out      = g.data.data;
    for (int t = 0; t < T; t++)
        for (int py = 0; py < g.h; py++)
            for (int px = 0; px < g.w; px++) {
                // row-major within the patch, source channels fastest
                for (int iy = 0; iy < P; iy++)
                    for (int ix = 0; ix < P; ix++) {
                        const uint8_t* src = frames +
                            (((size_t)t * H + (py * P + iy)) * W + (px * P + ix)) * C;
                        for (int ch = 0; ch < C; ch++)
                            *out++ = (Real)(src[ch] / 127.5 - 1.0);
                    }
            }
    return g;
}

template <class Real>
std::vector<uint8_t> unpatchify(const LatentGridT<Real>& g) {
    if (g.patch <= 0 || g.src_channels <= 0)
        throw std::invalid_argument("unpatchify: grid has no provenance");
    if (g.c != g.src_channels * g.patch * g.patch)
        throw std::invalid_argument("unpatchify: channel count " + std::to_string(g.c) +
                                    " does not match provenance");
    int P = g.patch, C = g.src_channels;
    int H = g.h * P, W = g.w * P;
    std::vector<uint8_t> frames((size_t)g.T * H * W * C);
    const Real* in = g.data.data;
    for (int t = 0; t < g.T; t++)
        for (int py = 0; py < g.h; py++)
            for (int px = 0; px < g.w; px++)
                for (int iy = 0; iy < P; iy++)
                    for (int ix = 0; ix < P; ix++) {
                        uint8_t* dst = frames.data() +
                            (((size_t)t * H + (py * P + iy)) * W + (px * P + ix)) * C;
                        for (int ch = 0; ch < C; ch++) {
                            double v = ((double)*in++ + 1.0) * 127.5;
                            double r = std::floor(v + 0.5);  // round half up; 0 -> 128
                            dst[ch]  = (uint8_t)std::min(255.0, std::max(0.0, r));
                        }
                    }
    return frames;
}

// Shape-only clone of an existing grid (same provenance), zero data.
template <class Real>
LatentGridT<Real> zeros_like(const LatentGridT<Real>& g) {
    LatentGridT<Real> out = g;
    out.data              = TensorT<Real>::zeros(g.data.shape);
    return out;
}

template <class Real>
LatentGridT<Real> with_data(const LatentGridT<Real>& proto, TensorT<Real> data) {
    check_same_shape(proto.data.shape, data.shape, "latent grid");
    LatentGridT<Real> out = proto;
    out.data              = std::move(data);
    return out;
}

}  // namespace refcolor

#endif
