#ifndef REFCOLOR_COLORCOND_HPP
#define REFCOLOR_COLORCOND_HPP

#include <string>
#include <vector>

#include "refcolor/backbone.hpp"

namespace refcolor {

/*---------------------------- High-level extractor ----------------------------*/

// Small trainable conv encoder standing in for the pretrained foundation
// encoder: 4 stride-2 stages with reflected borders, GELU between stages.
inline std::vector<int> hce_encoder_channels(const ModelConfig& cfg) {
    return {3, 16, 32, 64, cfg.enc_dim};
}

template <class Real>
void register_hce_params(ParameterStoreT<Real>& store, const ModelConfig& cfg, RngStream& rng) {
    auto ch = hce_encoder_channels(cfg);
    for (int s = 0; s + 1 < (int)ch.size(); s++)
        add_linear_params(store, "hce.enc." + std::to_string(s), 9 * ch[s], ch[s + 1], rng);
    add_linear_params(store, "hce.agg.l1", cfg.enc_dim, cfg.dim, rng);
    add_linear_params(store, "hce.agg.l2", cfg.dim, cfg.dim, rng);
    store.add("hce.queries", normal_init<Real>({cfg.color_tokens, cfg.dim}, 0.02, rng));
    for (int i = 0; i < cfg.qformer_depth; i++) {
        std::string qp = "hce.qf." + std::to_string(i);
        store.add(qp + ".ln1.gain", TensorT<Real>::full({cfg.dim}, Real(1)));
        store.add(qp + ".ln1.bias", TensorT<Real>::zeros({cfg.dim}));
        add_attention_params(store, qp + ".attn", cfg.dim, rng);
        store.add(qp + ".ln2.gain", TensorT<Real>::full({cfg.dim}, Real(1)));
        store.add(qp + ".ln2.bias", TensorT<Real>::zeros({cfg.dim}));
        add_linear_params(store, qp + ".mlp.l1", cfg.dim, cfg.mlp_ratio * cfg.dim, rng);
        add_linear_params(store, qp + ".mlp.l2", cfg.mlp_ratio * cfg.dim, cfg.dim, rng);
    }
    // cross-attention into the denoiser blocks; zero output projection keeps
    // the pathway silent until stage 2 trains it
    for (int b = 0; b < cfg.blocks; b++)
        add_attention_params(store, "hce.xattn." + std::to_string(b), cfg.dim, rng, /*zero_out=*/true);
}

template <class Real>
struct EncoderFeatureRefs {
    typename Graph<Real>::Ref summary;  // [1, enc_dim]
    typename Graph<Real>::Ref spatial;  // [M, enc_dim]
};

template <class Real>
TensorT<Real> image_to_unit_tensor(const uint8_t* rgb, int H, int W) {
    TensorT<Real> t = TensorT<Real>::zeros({H * W, 3});
    for (size_t i = 0; i < t.size; i++)
        t.data[i] = (Real)(rgb[i] / 127.5 - 1.0);
    return t;
}

template <class Real>
EncoderFeatureRefs<Real> encode_image(ParamRefs<Real>& pr, const ModelConfig& cfg,
                                      const uint8_t* ref_rgb, int H, int W) {
    if (H != cfg.height || W != cfg.width)
        throw std::invalid_argument("reference image size " + std::to_string(H) + "x" + std::to_string(W) +
                                    " does not match configured " + std::to_string(cfg.height) + "x" +
                                    std::to_string(cfg.width));
    auto& g = pr.graph();
    auto ch = hce_encoder_channels(cfg);
    auto x  = g.input(image_to_unit_tensor<Real>(ref_rgb, H, W));
    int ih = H, iw = W;
    for (int s = 0; s + 1 < (int)ch.size(); s++) {
        auto cols = g.im2col_reflect(x, ih, iw, ch[s], 3, 2);
        x  = g.gelu(linear(pr, cols, "hce.enc." + std::to_string(s)));
        ih /= 2;
        iw /= 2;
    }
    return {g.mean_over_rows(x), x};
}

// MLP aggregation of summary + spatial features into the image embedding
// (summary token first).
template <class Real>
typename Graph<Real>::Ref aggregate(ParamRefs<Real>& pr, const EncoderFeatureRefs<Real>& feats) {
    auto& g  = pr.graph();
    auto cat = g.concat_rows({feats.summary, feats.spatial});
    return linear(pr, g.gelu(linear(pr, cat, "hce.agg.l1")), "hce.agg.l2");
}

// Learned query tokens attend jointly with the image embedding; the first N
// outputs are the color tokens. No positional terms anywhere, so the result
// is invariant to the order of the image embedding rows.
template <class Real>
typename Graph<Real>::Ref qformer(ParamRefs<Real>& pr, const ModelConfig& cfg,
                                  typename Graph<Real>::Ref image_embedding) {
    auto& g = pr.graph();
    auto x  = g.concat_rows({pr("hce.queries"), image_embedding});
    for (int i = 0; i < cfg.qformer_depth; i++) {
        std::string qp = "hce.qf." + std::to_string(i);
        auto a         = layer_norm_affine(pr, x, qp + ".ln1");
        x              = g.add(x, multi_head_attention(pr, a, a, cfg.heads, qp + ".attn"));
        auto m         = layer_norm_affine(pr, x, qp + ".ln2");
        x              = g.add(x, linear(pr, g.gelu(linear(pr, m, qp + ".mlp.l1")), qp + ".mlp.l2"));
    }
    return g.slice_rows(x, 0, cfg.color_tokens);
}

template <class Real>
typename Graph<Real>::Ref hce_forward(ParamRefs<Real>& pr, const ModelConfig& cfg,
                                      const uint8_t* ref_rgb, int H, int W) {
    auto feats = encode_image(pr, cfg, ref_rgb, H, W);
    return qformer(pr, cfg, aggregate(pr, feats));
}

/*----------------------------- Low-level guider ------------------------------*/

// The LCG is a trainable copy of the denoising DiT; stage 3 initializes it
// from the stage-1 weights.
template <class Real>
void copy_dit_to_lcg(ParameterStoreT<Real>& store) {
    std::vector<std::pair<std::string, TensorT<Real>>> copies;
    for (auto& [name, p] : store)
        if (name.rfind("dit.", 0) == 0)
            copies.emplace_back("lcg." + name.substr(4), p.value.clone());
    for (auto& [name, value] : copies)
        store.add(name, std::move(value));
}

template <class Real>
bool has_lcg(const ParameterStoreT<Real>& store) {
    return store.has("lcg.patch.w");
}

// Runs the copy on the single reference frame (t = 0, unnoised latent, the
// reference's own sketch, same caption) and returns each block's vision
// tokens. Pure in its inputs, so callers may compute it once per sample and
// reuse it for every denoising step.
template <class Real>
std::vector<typename Graph<Real>::Ref> lcg_forward(ParamRefs<Real>& pr, const ModelConfig& cfg,
                                                   const LatentGridT<Real>& ref_latent,
                                                   const LatentGridT<Real>& ref_sketch_latent,
                                                   const std::vector<uint16_t>& caption) {
    if (!has_lcg(pr.store()))
        throw std::invalid_argument("low-level guider weights not initialized");
    if (ref_latent.T != 1)
        throw std::invalid_argument("low-level guider expects a single reference frame");
    DitTrace<Real> trace;
    CondRefs<Real> none;
    dit_forward(pr, cfg, "lcg", ref_latent, ref_sketch_latent, caption, 0, none, &trace);
    return trace.block_vision;
}

}  // namespace refcolor

#endif
