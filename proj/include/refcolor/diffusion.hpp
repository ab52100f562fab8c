#ifndef REFCOLOR_DIFFUSION_HPP
#define REFCOLOR_DIFFUSION_HPP

#include <functional>
#include <optional>
#include <vector>

#include "refcolor/colorcond.hpp"

namespace refcolor {

/*--------------------------------- schedule ----------------------------------*/

struct NoiseSchedule {
    int steps = 0;
    std::vector<double> beta;       // beta[t-1] for t in 1..steps
    std::vector<double> alpha_bar;  // alpha_bar[t-1]

    static NoiseSchedule make(int steps, double beta_min, double beta_max) {
        if (steps < 1)
            throw std::invalid_argument("schedule: steps must be >= 1");
        if (!(0 < beta_min && beta_min < beta_max && beta_max < 1))
            throw std::invalid_argument("schedule: need 0 < beta_min < beta_max < 1");
        NoiseSchedule s;
        s.steps = steps;
        s.beta.resize(steps);
        s.alpha_bar.resize(steps);
        double prod = 1.0;
        for (int t = 1; t <= steps; t++) {
            double b      = steps == 1 ? beta_min
                                       : beta_min + (beta_max - beta_min) * (double)(t - 1) / (double)(steps - 1);
            s.beta[t - 1] = b;
            prod *= 1.0 - b;
            s.alpha_bar[t - 1] = prod;
        }
        return s;
    }

    // alpha_bar with the ab(0) = 1 convention used by the sampler
    double ab(int t) const {
        if (t < 0 || t > steps)
            throw std::invalid_argument("schedule: t out of range: " + std::to_string(t));
        return t == 0 ? 1.0 : alpha_bar[t - 1];
    }
};

/*--------------------------------- stage flags --------------------------------*/

struct StageCond {
    int stage    = 1;
    bool use_hce = false;
    bool use_lcg = false;

    static StageCond of(int stage) {
        switch (stage) {
            case 1: return {1, false, false};
            case 2: return {2, true, false};
            case 3: return {3, false, true};
            case 4: return {4, true, true};
        }
        throw std::invalid_argument("stage must be 1..4, got " + std::to_string(stage));
    }
};

/*---------------------------------- noising -----------------------------------*/

template <class Real>
TensorT<Real> gaussian_tensor(Shape shape, RngStream& rng) {
    TensorT<Real> t = TensorT<Real>::zeros(std::move(shape));
    for (size_t i = 0; i < t.size; i++)
        t.data[i] = (Real)rng.next_gaussian();
    return t;
}

template <class Real>
LatentGridT<Real> q_sample(const LatentGridT<Real>& z0, int t, const TensorT<Real>& eps,
                           const NoiseSchedule& sched) {
    if (t < 1 || t > sched.steps)
        throw std::invalid_argument("q_sample: t out of range: " + std::to_string(t));
    check_same_shape(z0.data.shape, eps.shape, "q_sample");
    Real sa = (Real)std::sqrt(sched.ab(t));
    Real sb = (Real)std::sqrt(1.0 - sched.ab(t));
    LatentGridT<Real> zt = zeros_like(z0);
    for (size_t i = 0; i < z0.data.size; i++)
        zt.data.data[i] = sa * z0.data.data[i] + sb * eps.data[i];
    return zt;
}

/*---------------------------------- training ----------------------------------*/

// Test hook replacing the network's epsilon prediction.
template <class Real>
using EpsilonOverride = std::function<TensorT<Real>(const LatentGridT<Real>& z_t, int t)>;

// Builds the conditioning refs for one sample in the given graph.
template <class Real>
CondRefs<Real> build_cond(ParamRefs<Real>& pr, const ModelConfig& cfg, StageCond cond,
                          const VideoClip& clip, const std::vector<uint16_t>& caption) {
    CondRefs<Real> refs;
    if (!cond.use_hce && !cond.use_lcg)
        return refs;
    const uint8_t* ref_rgb = clip.frames.data() + (size_t)clip.reference_index * clip.H * clip.W * 3;
    if (cond.use_hce) {
        if (!pr.store().has("hce.queries"))
            throw std::invalid_argument("stage requires the high-level extractor but its weights are absent");
        refs.color_tokens = hce_forward(pr, cfg, ref_rgb, clip.H, clip.W);
    }
    if (cond.use_lcg) {
        if (!has_lcg(pr.store()))
            throw std::invalid_argument("stage requires the low-level guider but its weights are absent");
        const uint8_t* ref_skt = clip.sketches.data() + (size_t)clip.reference_index * clip.H * clip.W;
        auto ref_lat = patchify<Real>(ref_rgb, 1, clip.H, clip.W, 3, cfg.patch);
        auto ref_skt_lat = patchify<Real>(ref_skt, 1, clip.H, clip.W, 1, cfg.patch);
        refs.ref_stack = lcg_forward(pr, cfg, ref_lat, ref_skt_lat, caption);
    }
    return refs;
}

// Mean epsilon-prediction MSE over a batch; per-element timestep draw. When
// with_grad, parameter gradients of the mean loss are accumulated in store.
template <class Real>
double stage_loss(ParameterStoreT<Real>& store, const ModelConfig& cfg, const NoiseSchedule& sched,
                  const std::vector<const VideoClip*>& batch,
                  const std::vector<std::vector<uint16_t>>& captions,
                  StageCond cond, RngStream& t_rng, RngStream& noise_rng,
                  bool with_grad, const EpsilonOverride<Real>* rig = nullptr) {
    if (batch.empty() || batch.size() != captions.size())
        throw std::invalid_argument("stage_loss: bad batch");
    double total = 0;
    Real inv_b   = Real(1) / (Real)batch.size();
    for (size_t i = 0; i < batch.size(); i++) {
        const VideoClip& clip = *batch[i];
        auto z0  = patchify<Real>(clip.frames.data(), clip.T, clip.H, clip.W, 3, cfg.patch);
        auto skt = patchify<Real>(clip.sketches.data(), clip.T, clip.H, clip.W, 1, cfg.patch);
        int t    = 1 + (int)t_rng.next_below((uint32_t)sched.steps);
        auto eps = gaussian_tensor<Real>(z0.data.shape, noise_rng);
        auto z_t = q_sample(z0, t, eps, sched);

        if (rig) {
            auto pred  = (*rig)(z_t, t);
            auto eflat = eps.reshaped({(int)(eps.size / pred.cols()), pred.cols()});
            double s   = 0;
            for (size_t j = 0; j < eps.size; j++) {
                double d = (double)pred.data[j] - eflat.data[j];
                s += d * d;
            }
            total += s / (double)eps.size;
            continue;
        }

        Graph<Real> g;
        ParamRefs<Real> pr(g, store);
        auto cref    = build_cond(pr, cfg, cond, clip, captions[i]);
        auto out     = dit_forward(pr, cfg, "dit", z_t, skt, captions[i], t, cref);
        auto eps_ref = g.input(eps.reshaped({cfg.vision_tokens(), cfg.rgb_channels()}));
        auto loss    = g.mse(out, eps_ref);
        total += (double)g.val(loss).data[0];
        if (with_grad)
            g.backward(g.scale(loss, inv_b));
    }
    return total / (double)batch.size();
}

/*---------------------------------- sampling ----------------------------------*/

template <class Real>
using DenoiseFn = std::function<TensorT<Real>(const TensorT<Real>& z_t, int t)>;

// Deterministic (eta = 0) DDIM over a uniform stride; with ab(0) = 1 the last
// step returns the predicted z0 itself.
template <class Real>
TensorT<Real> ddim_core(const NoiseSchedule& sched, int steps, TensorT<Real> z,
                        const DenoiseFn<Real>& denoise) {
    if (steps < 1 || sched.steps % steps)
        throw std::invalid_argument("ddim: steps must evenly divide the schedule length");
    int stride = sched.steps / steps;
    for (int t = sched.steps; t > 0; t -= stride) {
        TensorT<Real> eps = denoise(z, t);
        check_same_shape(z.shape, eps.shape, "ddim epsilon");
        double at = sched.ab(t), ap = sched.ab(t - stride);
        double c0 = 1.0 / std::sqrt(at), c1 = std::sqrt(1.0 - at);
        double d0 = std::sqrt(ap), d1 = std::sqrt(1.0 - ap);
        for (size_t i = 0; i < z.size; i++) {
            double z0 = ((double)z.data[i] - c1 * eps.data[i]) * c0;
            z.data[i] = (Real)(d0 * z0 + d1 * eps.data[i]);
        }
    }
    return z;
}

struct SampleOptions {
    int steps     = 20;
    uint64_t seed = 0;
    bool recompute_guider_each_step = false;  // cache-validity testing only
};

// Full conditional sampler: conditioning computed once, reused each step,
// decoded through the exact latent map.
template <class Real>
std::vector<uint8_t> ddim_sample(ParameterStoreT<Real>& store, const ModelConfig& cfg,
                                 const NoiseSchedule& sched, StageCond cond,
                                 const VideoClip& sketch_clip, const std::vector<uint16_t>& caption,
                                 const uint8_t* ref_rgb, const uint8_t* ref_sketch,
                                 const SampleOptions& opt) {
    if ((cond.use_hce || cond.use_lcg) && !ref_rgb)
        throw std::invalid_argument("sampling stage " + std::to_string(cond.stage) +
                                    " requires a reference image");
    auto skt = patchify<Real>(sketch_clip.sketches.data(), sketch_clip.T, sketch_clip.H,
                              sketch_clip.W, 1, cfg.patch);

    // conditioning tokens, computed once per sample
    std::optional<TensorT<Real>> color_tokens;
    std::vector<TensorT<Real>> ref_stack;
    LatentGridT<Real> ref_lat, ref_skt_lat;
    if (cond.use_lcg) {
        ref_lat     = patchify<Real>(ref_rgb, 1, cfg.height, cfg.width, 3, cfg.patch);
        ref_skt_lat = patchify<Real>(ref_sketch, 1, cfg.height, cfg.width, 1, cfg.patch);
    }
    auto compute_cond = [&](Graph<Real>& g, ParamRefs<Real>& pr) {
        CondRefs<Real> refs;
        if (cond.use_hce) {
            if (color_tokens && !opt.recompute_guider_each_step) {
                refs.color_tokens = g.input(*color_tokens);
            } else {
                refs.color_tokens = hce_forward(pr, cfg, ref_rgb, cfg.height, cfg.width);
                color_tokens      = g.val(*refs.color_tokens).clone();
            }
        }
        if (cond.use_lcg) {
            if (!ref_stack.empty() && !opt.recompute_guider_each_step) {
                for (auto& r : ref_stack)
                    refs.ref_stack.push_back(g.input(r));
            } else {
                refs.ref_stack = lcg_forward(pr, cfg, ref_lat, ref_skt_lat, caption);
                ref_stack.clear();
                for (auto r : refs.ref_stack)
                    ref_stack.push_back(g.val(r).clone());
            }
        }
        return refs;
    };

    RngStream init(opt.seed, "ddim.init");
    auto z0_proto = zeros_like(patchify<Real>(sketch_clip.frames.data(), sketch_clip.T,
                                              sketch_clip.H, sketch_clip.W, 3, cfg.patch));
    TensorT<Real> z = gaussian_tensor<Real>(z0_proto.data.shape, init);

    DenoiseFn<Real> fn = [&](const TensorT<Real>& zt, int t) {
        Graph<Real> g;
        ParamRefs<Real> pr(g, store);
        auto cref = compute_cond(g, pr);
        auto z_t  = with_data(z0_proto, zt.reshaped(z0_proto.data.shape));
        auto out  = dit_forward(pr, cfg, "dit", z_t, skt, caption, t, cref);
        return g.val(out).clone().reshaped(zt.shape);
    };
    TensorT<Real> zf = ddim_core(sched, opt.steps, std::move(z), fn);
    return unpatchify(with_data(z0_proto, std::move(zf)));
}

}  // namespace refcolor

#endif
