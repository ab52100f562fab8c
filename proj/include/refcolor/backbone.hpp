#ifndef REFCOLOR_BACKBONE_HPP
#define REFCOLOR_BACKBONE_HPP

#include <array>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "refcolor/latentizer.hpp"
#include "refcolor/nn.hpp"
#include "refcolor/synthgen.hpp"

namespace refcolor {

struct ModelConfig {
    int dim      = 128;
    int blocks   = 4;
    int heads    = 4;
    int text_len = 12;
    int patch    = 4;
    int frames   = 8;
    int height   = 32;
    int width    = 32;
    int color_tokens  = 8;
    int qformer_depth = 2;
    int enc_dim       = 64;
    int mlp_ratio     = 4;
    int vocab_size    = Vocab::fixed().size();

    int lat_h() const { return height / patch; }
    int lat_w() const { return width / patch; }
    int vision_tokens() const { return frames * lat_h() * lat_w(); }
    int rgb_channels() const { return 3 * patch * patch; }
    int sketch_channels() const { return patch * patch; }

    void validate() const {
        if (dim <= 0 || blocks <= 0 || heads <= 0 || text_len <= 0 || patch <= 0 ||
            frames <= 0 || color_tokens <= 0 || qformer_depth <= 0 || enc_dim <= 0)
            throw std::invalid_argument("model config: all counts must be positive");
        if (dim % heads)
            throw std::invalid_argument("model config: dim " + std::to_string(dim) +
                                        " not divisible by heads " + std::to_string(heads));
        if (height % patch || width % patch)
            throw std::invalid_argument("model config: frame size not divisible by patch");
    }
};

/*------------------------------ parameter setup ------------------------------*/

// Registers one denoising-DiT parameter set under `prefix` ("dit" for the
// denoiser, "lcg" for the trainable copy). adaLN heads and the output head
// start at zero so an untrained model predicts exactly zero noise.
template <class Real>
void register_dit_params(ParameterStoreT<Real>& store, const std::string& prefix,
                         const ModelConfig& cfg, RngStream& rng) {
    cfg.validate();
    int d = cfg.dim;
    add_linear_params(store, prefix + ".patch", cfg.rgb_channels() + cfg.sketch_channels(), d, rng);
    store.add(prefix + ".tok.table", normal_init<Real>({cfg.vocab_size, d}, 0.02, rng));
    store.add(prefix + ".pos.time", normal_init<Real>({cfg.frames, d}, 0.02, rng));
    store.add(prefix + ".pos.row", normal_init<Real>({cfg.lat_h(), d}, 0.02, rng));
    store.add(prefix + ".pos.col", normal_init<Real>({cfg.lat_w(), d}, 0.02, rng));
    store.add(prefix + ".pos.text", normal_init<Real>({cfg.text_len, d}, 0.02, rng));
    add_linear_params(store, prefix + ".temb.l1", d, d, rng);
    for (int b = 0; b < cfg.blocks; b++) {
        std::string bp = prefix + ".blocks." + std::to_string(b);
        add_linear_params(store, bp + ".adaln", d, 6 * d, rng, /*zero=*/true);
        add_attention_params(store, bp + ".attn", d, rng);
        add_linear_params(store, bp + ".mlp.l1", d, cfg.mlp_ratio * d, rng);
        add_linear_params(store, bp + ".mlp.l2", cfg.mlp_ratio * d, d, rng);
    }
    store.add(prefix + ".final.gain", TensorT<Real>::full({d}, Real(1)));
    store.add(prefix + ".final.bias", TensorT<Real>::zeros({d}));
    add_linear_params(store, prefix + ".head", d, cfg.rgb_channels(), rng, /*zero=*/true);
}

/*--------------------------------- embedding ---------------------------------*/

template <class Real>
TensorT<Real> sinusoidal_embedding(int t, int dim) {
    TensorT<Real> e = TensorT<Real>::zeros({1, dim});
    int half        = dim / 2;
    for (int i = 0; i < half; i++) {
        double freq        = std::exp(-std::log(10000.0) * (double)i / (double)half);
        e.data[i]          = (Real)std::sin(t * freq);
        e.data[half + i]   = (Real)std::cos(t * freq);
    }
    return e;
}

// Channel concatenation of noised latent and sketch latent, before the patch
// projection. Exposed so the sketch-injectivity contract is testable at the
// concatenation stage.
template <class Real>
TensorT<Real> concat_latent_tokens(const LatentGridT<Real>& z_t, const LatentGridT<Real>& c_skt) {
    if (z_t.T != c_skt.T || z_t.h != c_skt.h || z_t.w != c_skt.w)
        throw std::invalid_argument("latent/sketch grids disagree on T,h,w");
    int L = z_t.T * z_t.h * z_t.w;
    TensorT<Real> out = TensorT<Real>::zeros({L, z_t.c + c_skt.c});
    auto zt = z_t.tokens(), st = c_skt.tokens();
    for (int i = 0; i < L; i++) {
        std::copy(zt.row(i), zt.row(i) + z_t.c, out.row(i));
        std::copy(st.row(i), st.row(i) + c_skt.c, out.row(i) + z_t.c);
    }
    return out;
}

template <class Real>
struct BlockMods {
    std::array<typename Graph<Real>::Ref, 6> m;  // sa_scale, sa_shift, sa_gate, mlp_scale, mlp_shift, mlp_gate
};

template <class Real>
struct EmbedOut {
    typename Graph<Real>::Ref text;
    typename Graph<Real>::Ref vision;
    std::vector<BlockMods<Real>> mods;
};

template <class Real>
EmbedOut<Real> dit_embed(ParamRefs<Real>& pr, const ModelConfig& cfg, const std::string& prefix,
                         const LatentGridT<Real>& z_t, const LatentGridT<Real>& c_skt,
                         const std::vector<uint16_t>& caption, int t) {
    auto& g = pr.graph();
    if ((int)caption.size() > cfg.text_len)
        throw std::invalid_argument("caption longer than text_len: " + std::to_string(caption.size()));
    if (z_t.h != cfg.lat_h() || z_t.w != cfg.lat_w())
        throw std::invalid_argument("latent grid does not match model geometry");

    EmbedOut<Real> out;
    int T = z_t.T, h = z_t.h, w = z_t.w;

    auto lat   = g.input(concat_latent_tokens(z_t, c_skt));
    auto vis   = g.affine(lat, pr(prefix + ".patch.w"), pr(prefix + ".patch.b"));
    std::vector<int> tid, rid, cid;
    tid.reserve((size_t)T * h * w);
    for (int tt = 0; tt < T; tt++)
        for (int i = 0; i < h; i++)
            for (int j = 0; j < w; j++) {
                tid.push_back(tt);
                rid.push_back(i);
                cid.push_back(j);
            }
    vis = g.add(vis, g.embed_rows(pr(prefix + ".pos.time"), tid));
    vis = g.add(vis, g.embed_rows(pr(prefix + ".pos.row"), rid));
    vis = g.add(vis, g.embed_rows(pr(prefix + ".pos.col"), cid));
    out.vision = vis;

    std::vector<int> cap(cfg.text_len, 0);
    for (size_t i = 0; i < caption.size(); i++)
        cap[i] = caption[i];
    out.text = g.add(g.embed_rows(pr(prefix + ".tok.table"), cap), pr(prefix + ".pos.text"));

    auto temb = g.input(sinusoidal_embedding<Real>(t, cfg.dim));
    auto hvec = g.gelu(linear(pr, temb, prefix + ".temb.l1"));
    for (int b = 0; b < cfg.blocks; b++) {
        auto mod6 = linear(pr, hvec, prefix + ".blocks." + std::to_string(b) + ".adaln");
        BlockMods<Real> bm;
        for (int k = 0; k < 6; k++)
            bm.m[k] = g.slice_cols(mod6, k * cfg.dim, (k + 1) * cfg.dim);
        out.mods.push_back(bm);
    }
    return out;
}

/*----------------------------------- blocks -----------------------------------*/

template <class Real>
typename Graph<Real>::Ref modulate(Graph<Real>& g, typename Graph<Real>::Ref x,
                                   typename Graph<Real>::Ref scale, typename Graph<Real>::Ref shift) {
    return g.modulate_rows(x, scale, shift);
}

template <class Real>
struct TokenRefs {
    typename Graph<Real>::Ref text;
    typename Graph<Real>::Ref vision;
};

// One DiT block: adaptive-norm self-attention over [text; vision; R_i] with
// only the text+vision queries kept, optional cross-attention from vision
// tokens to the color tokens F_H, then adaptive-norm MLP. R_i and F_H rows
// carry no positional terms.
template <class Real>
TokenRefs<Real> dit_block(ParamRefs<Real>& pr, const ModelConfig& cfg, const std::string& prefix,
                          int block, TokenRefs<Real> state, const BlockMods<Real>& mods,
                          std::optional<typename Graph<Real>::Ref> ref_tokens,
                          std::optional<typename Graph<Real>::Ref> color_tokens,
                          const std::string& xattn_prefix) {
    auto& g        = pr.graph();
    std::string bp = prefix + ".blocks." + std::to_string(block);
    int Lt = g.val(state.text).rows(), Lv = g.val(state.vision).rows();

    if (ref_tokens && g.val(*ref_tokens).cols() != cfg.dim)
        throw std::invalid_argument("ref tokens width != model dim");
    if (color_tokens && g.val(*color_tokens).cols() != cfg.dim)
        throw std::invalid_argument("color tokens width != model dim");

    auto seq  = g.concat_rows({state.text, state.vision});
    auto a_in = modulate(g, g.layer_norm(seq), mods.m[0], mods.m[1]);
    auto kv   = ref_tokens ? g.concat_rows({a_in, *ref_tokens}) : a_in;
    auto attn = multi_head_attention(pr, a_in, kv, cfg.heads, bp + ".attn");
    seq       = g.add_gated(seq, attn, mods.m[2]);

    if (color_tokens) {
        auto text_part = g.slice_rows(seq, 0, Lt);
        auto vis       = g.slice_rows(seq, Lt, Lt + Lv);
        auto xa        = multi_head_attention(pr, vis, *color_tokens, cfg.heads,
                                              xattn_prefix + "." + std::to_string(block));
        seq = g.concat_rows({text_part, g.add(vis, xa)});
    }

    auto m_in = modulate(g, g.layer_norm(seq), mods.m[3], mods.m[4]);
    auto mlp  = linear(pr, g.gelu(linear(pr, m_in, bp + ".mlp.l1")), bp + ".mlp.l2");
    seq       = g.add_gated(seq, mlp, mods.m[5]);

    return {g.slice_rows(seq, 0, Lt), g.slice_rows(seq, Lt, Lt + Lv)};
}

/*----------------------------------- forward ----------------------------------*/

template <class Real>
struct CondRefs {
    std::optional<typename Graph<Real>::Ref> color_tokens;      // F_H
    std::vector<typename Graph<Real>::Ref> ref_stack;           // R_1..R_B
    std::string xattn_prefix = "hce.xattn";
};

// Records the vision-token part of every block output (the LCG taps this).
template <class Real>
struct DitTrace {
    std::vector<typename Graph<Real>::Ref> block_vision;
};

// Full denoiser pass; returns epsilon-hat tokens [T*h*w, rgb_channels].
template <class Real>
typename Graph<Real>::Ref dit_forward(ParamRefs<Real>& pr, const ModelConfig& cfg,
                                      const std::string& prefix,
                                      const LatentGridT<Real>& z_t, const LatentGridT<Real>& c_skt,
                                      const std::vector<uint16_t>& caption, int t,
                                      const CondRefs<Real>& cond, DitTrace<Real>* trace = nullptr) {
    auto& g = pr.graph();
    if (!cond.ref_stack.empty() && (int)cond.ref_stack.size() != cfg.blocks)
        throw std::invalid_argument("ref token stack has " + std::to_string(cond.ref_stack.size()) +
                                    " entries, need " + std::to_string(cfg.blocks));
    auto e = dit_embed(pr, cfg, prefix, z_t, c_skt, caption, t);
    TokenRefs<Real> state{e.text, e.vision};
    for (int b = 0; b < cfg.blocks; b++) {
        std::optional<typename Graph<Real>::Ref> rb;
        if (!cond.ref_stack.empty())
            rb = cond.ref_stack[b];
        state = dit_block(pr, cfg, prefix, b, state, e.mods[b], rb, cond.color_tokens, cond.xattn_prefix);
        if (trace)
            trace->block_vision.push_back(state.vision);
    }
    auto vis = g.add_rowvec(g.mul_rowvec(g.layer_norm(state.vision), pr(prefix + ".final.gain")),
                            pr(prefix + ".final.bias"));
    return g.affine(vis, pr(prefix + ".head.w"), pr(prefix + ".head.b"));
}

}  // namespace refcolor

#endif
