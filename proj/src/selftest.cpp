#include "refcolor/selftest.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <sstream>

#include "refcolor/config.hpp"
#include "refcolor/diffusion.hpp"
#include "refcolor/pipeline.hpp"

namespace refcolor {

namespace {

using GraphD  = Graph<double>;
using RefsD   = ParamRefs<double>;

constexpr double kGradTol = 1e-4;

std::string fmt_err(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.3g", v);
    return buf;
}

/*--------------------------- primitive gradient checks ---------------------------*/

// Each primitive gets a random-parameter double graph; the analytic gradient
// must match central differences at 10 random coordinates.
CheckResult check_primitive_gradients() {
    CheckResult r{"gradients: primitives", true, ""};
    RngStream rng(41, "fd.prim");

    TensorD target        = normal_init<double>({4, 3}, 1.0, rng);
    TensorD target_vec    = normal_init<double>({4, 5}, 1.0, rng);
    TensorD target_tokens = normal_init<double>({6, 8}, 1.0, rng);
    TensorD target_conv   = normal_init<double>({16, 4}, 1.0, rng);

    auto run_case = [&](const std::string& name, ParameterStoreD& store,
                        const std::function<GraphD::Ref(GraphD&, RefsD&)>& fwd) {
        auto loss_fn = [&] {
            GraphD g;
            RefsD pr(g, store);
            return g.val(fwd(g, pr)).data[0];
        };
        auto grad_fn = [&] {
            GraphD g;
            RefsD pr(g, store);
            g.backward(fwd(g, pr));
        };
        RngStream coord_rng(1234 + fnv1a(name), "fd.coords");
        double err = fd_check(store, loss_fn, grad_fn, random_coords(store, 10, coord_rng));
        if (err >= kGradTol) {
            r.pass = false;
            r.detail += name + " rel err " + fmt_err(err) + "; ";
        }
    };

    {  // linear + bias
        ParameterStoreD s;
        s.add("x", normal_init<double>({4, 5}, 1.0, rng));
        add_linear_params(s, "lin", 5, 3, rng);
        run_case("linear", s, [&](GraphD& g, RefsD& pr) {
            return g.mse(linear(pr, pr("x"), "lin"), g.input(target));
        });
    }
    {  // layer norm with affine
        ParameterStoreD s;
        s.add("x", normal_init<double>({4, 5}, 1.0, rng));
        s.add("ln.gain", normal_init<double>({5}, 1.0, rng));
        s.add("ln.bias", normal_init<double>({5}, 1.0, rng));
        run_case("layer_norm", s, [&](GraphD& g, RefsD& pr) {
            return g.mse(layer_norm_affine(pr, pr("x"), "ln"), g.input(target_vec));
        });
    }
    {  // gelu
        ParameterStoreD s;
        s.add("x", normal_init<double>({4, 5}, 1.0, rng));
        run_case("gelu", s, [&](GraphD& g, RefsD& pr) {
            return g.mse(g.gelu(pr("x")), g.input(target_vec));
        });
    }
    {  // softmax
        ParameterStoreD s;
        s.add("x", normal_init<double>({4, 5}, 1.0, rng));
        run_case("softmax", s, [&](GraphD& g, RefsD& pr) {
            return g.mse(g.softmax_rows(pr("x")), g.input(target_vec));
        });
    }
    {  // multi-head attention, distinct q/kv
        ParameterStoreD s;
        s.add("q", normal_init<double>({6, 8}, 1.0, rng));
        s.add("kv", normal_init<double>({5, 8}, 1.0, rng));
        add_attention_params(s, "attn", 8, rng);
        run_case("attention", s, [&](GraphD& g, RefsD& pr) {
            return g.mse(multi_head_attention(pr, pr("q"), pr("kv"), 2, "attn"), g.input(target_tokens));
        });
    }
    {  // embedding gather
        ParameterStoreD s;
        s.add("table", normal_init<double>({7, 3}, 1.0, rng));
        run_case("embedding", s, [&](GraphD& g, RefsD& pr) {
            return g.mse(g.embed_rows(pr("table"), {3, 0, 6, 3}), g.input(target));
        });
    }
    {  // strided conv stage via im2col (reflect borders)
        ParameterStoreD s;
        s.add("img", normal_init<double>({64, 2}, 1.0, rng));
        add_linear_params(s, "conv", 9 * 2, 4, rng);
        run_case("conv_im2col", s, [&](GraphD& g, RefsD& pr) {
            auto cols = g.im2col_reflect(pr("img"), 8, 8, 2, 3, 2);
            return g.mse(g.gelu(linear(pr, cols, "conv")), g.input(target_conv));
        });
    }
    {  // mean over rows + hadamard + scale
        ParameterStoreD s;
        s.add("x", normal_init<double>({4, 5}, 1.0, rng));
        s.add("y", normal_init<double>({4, 5}, 1.0, rng));
        run_case("pointwise", s, [&](GraphD& g, RefsD& pr) {
            auto m = g.mean_over_rows(g.hadamard(pr("x"), g.add_scalar(g.scale(pr("y"), 0.7), 0.3)));
            return g.sum_all(g.hadamard(m, m));
        });
    }
    if (r.pass)
        r.detail = "8 primitives within " + fmt_err(kGradTol);
    return r;
}

/*------------------------------ stage-loss gradients -----------------------------*/

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.dim           = 16;
    cfg.blocks        = 2;
    cfg.heads         = 2;
    cfg.text_len      = 6;
    cfg.patch         = 4;
    cfg.frames        = 2;
    cfg.height        = 16;
    cfg.width         = 16;
    cfg.color_tokens  = 4;
    cfg.qformer_depth = 2;
    cfg.enc_dim       = 8;
    cfg.mlp_ratio     = 2;
    return cfg;
}

GeneratorConfig tiny_gen() {
    GeneratorConfig gen;
    gen.frames      = 2;
    gen.height      = 16;
    gen.width       = 16;
    gen.min_radius  = 3.0f;
    gen.max_radius  = 4.0f;
    gen.caption_len = 6;
    return gen;
}

CheckResult check_stage_loss_gradients() {
    CheckResult r{"gradients: stage losses 1-4", true, ""};
    ModelConfig cfg = tiny_config();
    auto sched      = NoiseSchedule::make(50, 1e-4, 0.02);
    auto clip       = gen_clip(11, tiny_gen(), "train");

    for (int stage = 1; stage <= 4; stage++) {
        ParameterStoreD store;
        RngStream init(100 + stage, "init");
        register_dit_params(store, "dit", cfg, init);
        StageCond cond = StageCond::of(stage);
        if (cond.use_hce)
            register_hce_params(store, cfg, init);
        if (cond.use_lcg)
            copy_dit_to_lcg(store);
        RngStream noise_init(200 + stage, "randomize");
        randomize_store(store, 0.4, noise_init);
        store.set_trainable_prefixes(default_trainable_prefixes(stage));

        std::vector<const VideoClip*> batch{&clip};
        std::vector<std::vector<uint16_t>> captions{clip.caption};
        auto eval = [&](bool grad) {
            RngStream t_rng(7, "t"), eps_rng(9, "noise");
            return stage_loss<double>(store, cfg, sched, batch, captions, cond, t_rng, eps_rng, grad);
        };
        RngStream coord_rng(300 + stage, "coords");
        double err = fd_check<double>(
            store, [&] { return eval(false); }, [&] { eval(true); },
            random_coords(store, 10, coord_rng));
        if (err >= kGradTol) {
            r.pass = false;
            r.detail += "stage " + std::to_string(stage) + " rel err " + fmt_err(err) + "; ";
        }
    }
    if (r.pass)
        r.detail = "10 coords per stage within " + fmt_err(kGradTol);
    return r;
}

/*-------------------------------- roundtrip & co --------------------------------*/

CheckResult check_latentizer_roundtrip() {
    CheckResult r{"latentizer: exact roundtrip x100", true, ""};
    RngStream rng(5, "latent");
    for (int i = 0; i < 100 && r.pass; i++) {
        int T = 1 + (int)rng.next_below(3);
        int P = rng.next_unit() < 0.5 ? 2 : 4;
        int H = P * (2 + (int)rng.next_below(6));
        int W = P * (2 + (int)rng.next_below(6));
        int C = rng.next_unit() < 0.5 ? 1 : 3;
        std::vector<uint8_t> src((size_t)T * H * W * C);
        for (auto& b : src)
            b = (uint8_t)rng.next_below(256);
        auto back = unpatchify(patchify<float>(src.data(), T, H, W, C, P));
        if (back != src) {
            r.pass   = false;
            r.detail = "roundtrip mismatch at case " + std::to_string(i);
        }
    }
    return r;
}

CheckResult check_neutrality() {
    CheckResult r{"zero-init neutrality (bitwise, 20 inputs)", true, ""};
    ModelConfig cfg;  // spec-default geometry
    ParameterStore store;
    RngStream init(21, "init");
    register_dit_params(store, "dit", cfg, init);
    register_hce_params(store, cfg, init);  // stage-2 start: fresh extractor, zero-init injection

    GeneratorConfig gen;
    RngStream rng(22, "inputs");
    for (int i = 0; i < 20 && r.pass; i++) {
        auto clip = gen_clip(rng.next_u64(), gen, "train");
        auto z0   = patchify<float>(clip.frames.data(), clip.T, clip.H, clip.W, 3, cfg.patch);
        auto skt  = patchify<float>(clip.sketches.data(), clip.T, clip.H, clip.W, 1, cfg.patch);
        int t     = 1 + (int)rng.next_below(200);
        auto eps  = gaussian_tensor<float>(z0.data.shape, rng);
        auto sched = NoiseSchedule::make(200, 1e-4, 0.02);
        auto z_t  = q_sample(z0, t, eps, sched);

        Graph<float> g1;
        ParamRefs<float> p1(g1, store);
        CondRefs<float> none;
        auto out1 = dit_forward(p1, cfg, "dit", z_t, skt, clip.caption, t, none);

        Graph<float> g2;
        ParamRefs<float> p2(g2, store);
        auto cond = build_cond(p2, cfg, StageCond::of(2), clip, clip.caption);
        auto out2 = dit_forward(p2, cfg, "dit", z_t, skt, clip.caption, t, cond);

        auto& a = g1.val(out1);
        auto& b = g2.val(out2);
        if (a.size != b.size || std::memcmp(a.data, b.data, a.size * sizeof(float)) != 0) {
            r.pass   = false;
            r.detail = "outputs differ at input " + std::to_string(i);
        }
    }
    return r;
}

CheckResult check_permutation_invariance() {
    CheckResult r{"permutation invariance (F_H rows, KV rows)", true, ""};
    RngStream rng(31, "perm");
    double worst = 0;
    for (int trial = 0; trial < 20; trial++) {
        // KV permutation on plain attention
        ParameterStore s;
        RngStream init(400 + trial, "init");
        s.add("q", normal_init<float>({5, 16}, 1.0, init));
        s.add("kv", normal_init<float>({7, 16}, 1.0, init));
        add_attention_params(s, "attn", 16, init);

        std::vector<int> perm(7);
        for (int i = 0; i < 7; i++)
            perm[i] = i;
        for (int i = 6; i > 0; i--)
            std::swap(perm[i], perm[(int)rng.next_below((uint32_t)(i + 1))]);

        auto run = [&](bool permuted) {
            Graph<float> g;
            ParamRefs<float> pr(g, s);
            auto kv = pr("kv");
            if (permuted)
                kv = g.embed_rows(kv, perm);  // row gather = permutation
            return g.val(multi_head_attention(pr, pr("q"), kv, 2, "attn")).clone();
        };
        auto a = run(false), b = run(true);
        for (size_t i = 0; i < a.size; i++)
            worst = std::max(worst, (double)std::fabs(a.data[i] - b.data[i]));

        // F_H permutation through a full conditioned block
        ModelConfig cfg = tiny_config();
        ParameterStore s2;
        RngStream init2(500 + trial, "init");
        register_dit_params(s2, "dit", cfg, init2);
        register_hce_params(s2, cfg, init2);
        RngStream rnd(600 + trial, "vals");
        randomize_store(s2, 0.05, rnd);

        auto clip = gen_clip(700 + trial, tiny_gen(), "train");
        auto z0   = patchify<float>(clip.frames.data(), clip.T, clip.H, clip.W, 3, cfg.patch);
        auto skt  = patchify<float>(clip.sketches.data(), clip.T, clip.H, clip.W, 1, cfg.patch);
        TensorT<float> fh = normal_init<float>({cfg.color_tokens, cfg.dim}, 1.0, rnd);

        std::vector<int> cperm(cfg.color_tokens);
        for (int i = 0; i < cfg.color_tokens; i++)
            cperm[i] = i;
        for (int i = cfg.color_tokens - 1; i > 0; i--)
            std::swap(cperm[i], cperm[(int)rng.next_below((uint32_t)(i + 1))]);

        auto fwd = [&](bool permuted) {
            Graph<float> g;
            ParamRefs<float> pr(g, s2);
            CondRefs<float> cond;
            auto base = g.input(fh);
            cond.color_tokens = permuted ? g.embed_rows(base, cperm) : base;
            return g.val(dit_forward(pr, cfg, "dit", z0, skt, clip.caption, 3, cond)).clone();
        };
        auto fa = fwd(false), fb = fwd(true);
        for (size_t i = 0; i < fa.size; i++)
            worst = std::max(worst, (double)std::fabs(fa.data[i] - fb.data[i]));
    }
    r.pass   = worst <= 1e-6;
    r.detail = "max deviation " + fmt_err(worst);
    return r;
}

CheckResult check_ddim_oracle() {
    CheckResult r{"ddim perfect-epsilon reconstruction", true, ""};
    auto sched = NoiseSchedule::make(200, 1e-4, 0.02);
    RngStream rng(55, "ddim");
    TensorT<float> z0 = TensorT<float>::zeros({4, 4, 4, 48});
    for (size_t i = 0; i < z0.size; i++)
        z0.data[i] = (float)rng.next_uniform(-1.0, 1.0);
    auto eps = gaussian_tensor<float>(z0.shape, rng);

    TensorT<float> zT = TensorT<float>::zeros(z0.shape);
    double sa = std::sqrt(sched.ab(200)), sb = std::sqrt(1.0 - sched.ab(200));
    for (size_t i = 0; i < z0.size; i++)
        zT.data[i] = (float)(sa * z0.data[i] + sb * eps.data[i]);

    DenoiseFn<float> oracle = [&](const TensorT<float>& z, int t) {
        TensorT<float> e = TensorT<float>::zeros(z.shape);
        double at = sched.ab(t);
        double c  = 1.0 / std::sqrt(1.0 - at), s = std::sqrt(at);
        for (size_t i = 0; i < z.size; i++)
            e.data[i] = (float)(((double)z.data[i] - s * z0.data[i]) * c);
        return e;
    };
    auto zf      = ddim_core(sched, 200, zT, oracle);
    double worst = 0;
    for (size_t i = 0; i < zf.size; i++)
        worst = std::max(worst, (double)std::fabs(zf.data[i] - z0.data[i]));
    r.pass   = worst <= 1e-4;
    r.detail = "max |z - z0| = " + fmt_err(worst);
    return r;
}

CheckResult check_qsample_variance() {
    CheckResult r{"q_sample variance law (1e5 draws)", true, ""};
    auto sched = NoiseSchedule::make(200, 1e-4, 0.02);
    RngStream rng(66, "mc");
    LatentGridT<float> z0;
    z0.T = 1, z0.h = 1, z0.w = 1, z0.c = 4;
    z0.patch = 2, z0.src_channels = 1;
    z0.data = TensorT<float>::zeros({1, 1, 1, 4});

    for (int t : {1, 100, 200}) {
        double want = 1.0 - sched.ab(t);
        double sum = 0, sq = 0;
        size_t n = 0;
        for (int draw = 0; draw < 25000; draw++) {
            auto eps = gaussian_tensor<float>(z0.data.shape, rng);
            auto zt  = q_sample(z0, t, eps, sched);
            for (size_t i = 0; i < zt.data.size; i++) {
                sum += zt.data.data[i];
                sq += (double)zt.data.data[i] * zt.data.data[i];
                n++;
            }
        }
        double mean = sum / (double)n;
        double var  = sq / (double)n - mean * mean;
        if (std::fabs(var - want) > 0.02 * want || std::fabs(mean) >= 0.01) {
            r.pass = false;
            r.detail += "t=" + std::to_string(t) + " var " + fmt_err(var) + " want " + fmt_err(want) + "; ";
        }
    }
    if (r.pass)
        r.detail = "within 2% at t in {1,100,200}";
    return r;
}

/*------------------------------- freeze / resume --------------------------------*/

bool stores_equal(ParameterStore& a, ParameterStore& b, std::string* why) {
    if (a.count() != b.count()) {
        *why = "parameter count differs";
        return false;
    }
    for (auto& [name, p] : a) {
        if (!b.has(name)) {
            *why = "missing " + name;
            return false;
        }
        auto& q = b.get(name).value;
        if (q.size != p.value.size || std::memcmp(q.data, p.value.data, q.size * sizeof(float)) != 0) {
            *why = "tensor differs: " + name;
            return false;
        }
    }
    return true;
}

CheckResult check_freeze_and_resume() {
    CheckResult r{"freeze masks + checkpoint resume (bitwise)", true, ""};
    ModelConfig cfg = tiny_config();
    auto sched      = NoiseSchedule::make(50, 1e-4, 0.02);
    auto ds         = make_dataset(77, tiny_gen(), 8, 2);

    auto tmp = std::filesystem::temp_directory_path() / "refcolor-selftest";
    std::filesystem::create_directories(tmp);

    StagePlan plan1;
    plan1.stage      = 1;
    plan1.iterations = 60;
    plan1.batch_size = 2;
    plan1.seed       = 5;

    // straight 60-step run
    TrainerState a = prepare_stage(1, cfg, plan1.seed, "");
    run_stage(a, plan1, ds, cfg, sched);

    // 30 steps, checkpoint, reload, 30 more
    TrainerState b = prepare_stage(1, cfg, plan1.seed, "");
    StagePlan half = plan1;
    half.iterations = 30;
    run_stage(b, half, ds, cfg, sched);
    std::string mid = (tmp / "mid.ackp").string();
    save_checkpoint(mid, b);
    TrainerState c = load_checkpoint(mid);
    run_stage(c, plan1, ds, cfg, sched);

    std::string why;
    if (!stores_equal(a.store, c.store, &why)) {
        r.pass   = false;
        r.detail = "resume mismatch: " + why;
        return r;
    }

    // stage 2 must leave every denoiser tensor bitwise untouched
    std::string s1 = (tmp / "stage1.ackp").string();
    save_checkpoint(s1, a);
    TrainerState st2 = prepare_stage(2, cfg, 6, s1);
    StagePlan plan2;
    plan2.stage      = 2;
    plan2.iterations = 20;
    plan2.batch_size = 2;
    plan2.seed       = 6;
    run_stage(st2, plan2, ds, cfg, sched);
    for (auto& [name, p] : a.store) {
        auto& q = st2.store.get(name).value;
        if (std::memcmp(q.data, p.value.data, q.size * sizeof(float)) != 0) {
            r.pass   = false;
            r.detail = "stage-2 modified frozen " + name;
            return r;
        }
    }

    // stage 3 starts from a bitwise copy of the denoiser
    TrainerState st3 = prepare_stage(3, cfg, 7, s1);
    for (auto& [name, p] : st3.store) {
        if (name.rfind("lcg.", 0) != 0)
            continue;
        auto& d = st3.store.get("dit." + name.substr(4)).value;
        if (std::memcmp(d.data, p.value.data, d.size * sizeof(float)) != 0) {
            r.pass   = false;
            r.detail = "lcg copy differs from denoiser at " + name;
            return r;
        }
    }
    r.detail = "resume equal, freeze respected, copy-init exact";
    return r;
}

}  // namespace

std::vector<CheckResult> run_property_suite() {
    std::vector<CheckResult> out;
    out.push_back(check_primitive_gradients());
    out.push_back(check_stage_loss_gradients());
    out.push_back(check_latentizer_roundtrip());
    out.push_back(check_neutrality());
    out.push_back(check_permutation_invariance());
    out.push_back(check_ddim_oracle());
    out.push_back(check_qsample_variance());
    out.push_back(check_freeze_and_resume());
    return out;
}

bool all_passed(const std::vector<CheckResult>& results) {
    for (auto& r : results)
        if (!r.pass)
            return false;
    return true;
}

bool print_results(const std::vector<CheckResult>& results) {
    int passed = 0;
    for (auto& r : results) {
        std::printf("[%s] %-45s %s\n", r.pass ? "PASS" : "FAIL", r.name.c_str(), r.detail.c_str());
        if (r.pass)
            passed++;
    }
    std::printf("%d/%d property checks passed\n", passed, (int)results.size());
    return passed == (int)results.size();
}

}  // namespace refcolor
