#include "refcolor/pipeline.hpp"

#include <cmath>
#include <cstring>
#include <iomanip>
#include <sstream>

#include "refcolor/evalkit.hpp"
#include "refcolor/io.hpp"

namespace refcolor {

std::vector<std::string> default_trainable_prefixes(int stage) {
    switch (stage) {
        case 1: return {"dit."};
        case 2: return {"hce."};
        case 3: return {"lcg."};
        case 4: return {"dit."};
    }
    throw std::invalid_argument("stage must be 1..4");
}

std::vector<const VideoClip*> split_clips(const Dataset& ds, const std::string& split) {
    std::vector<const VideoClip*> out;
    for (auto& c : ds.clips)
        if (c.split == split)
            out.push_back(&c);
    return out;
}

/*-------------------------------- checkpoints --------------------------------*/

static constexpr uint32_t kCkptMagic   = 0x504B4341;  // "ACKP" little-endian
static constexpr uint32_t kCkptVersion = 1;

namespace {

void put_tensor(std::ostream& os, const std::string& name, const Tensor& t) {
    put_u16(os, (uint16_t)name.size());
    os.write(name.data(), (std::streamsize)name.size());
    os.put((char)0);  // dtype 0 = f32
    os.put((char)t.shape.size());
    for (int d : t.shape)
        put_u32(os, (uint32_t)d);
    os.write((const char*)t.data, (std::streamsize)(t.size * sizeof(float)));
}

std::pair<std::string, Tensor> get_tensor(std::istream& is) {
    uint16_t len = get_u16(is);
    std::string name(len, '\0');
    is.read(name.data(), len);
    int dtype = is.get();
    if (dtype != 0)
        throw DataError("checkpoint: unsupported dtype " + std::to_string(dtype));
    int ndim = is.get();
    Shape shape(ndim);
    for (int i = 0; i < ndim; i++)
        shape[i] = (int)get_u32(is);
    Tensor t = Tensor::zeros(shape);
    is.read((char*)t.data, (std::streamsize)(t.size * sizeof(float)));
    return {name, std::move(t)};
}

}  // namespace

void save_checkpoint(const std::string& path, const TrainerState& st) {
    write_file_atomic(path, [&](std::ostream& os) {
        put_u32(os, kCkptMagic);
        put_u32(os, kCkptVersion);
        put_u32(os, st.stage);
        put_u64(os, st.step);
        // RNG state block
        put_u64(os, st.rng.seed());
        put_u32(os, (uint32_t)st.rng.streams().size());
        for (auto& [name, stream] : st.rng.streams()) {
            put_u16(os, (uint16_t)name.size());
            os.write(name.data(), (std::streamsize)name.size());
            put_u64(os, stream.counter());
        }
        // named tensors, lexicographic: parameters then optimizer moments
        std::map<std::string, const Tensor*> tensors;
        for (auto& [name, p] : const_cast<ParameterStore&>(st.store))
            tensors.emplace(name, &p.value);
        for (auto& [name, mo] : st.optim.moments) {
            tensors.emplace("optim.m." + name, &mo.m);
            tensors.emplace("optim.v." + name, &mo.v);
        }
        put_u32(os, (uint32_t)tensors.size());
        for (auto& [name, t] : tensors)
            put_tensor(os, name, *t);
    });
}

TrainerState load_checkpoint(const std::string& path) {
    auto is = open_input(path);
    if (get_u32(is) != kCkptMagic)
        throw DataError("bad checkpoint magic: " + path);
    if (get_u32(is) != kCkptVersion)
        throw DataError("unsupported checkpoint version: " + path);
    TrainerState st;
    st.stage      = get_u32(is);
    st.step       = get_u64(is);
    uint64_t seed = get_u64(is);
    st.rng        = RngSet(seed);
    uint32_t ns   = get_u32(is);
    for (uint32_t i = 0; i < ns; i++) {
        uint16_t len = get_u16(is);
        std::string name(len, '\0');
        is.read(name.data(), len);
        st.rng.restore_stream(name, get_u64(is));
    }
    uint32_t nt = get_u32(is);
    std::map<std::string, Tensor> moments;
    for (uint32_t i = 0; i < nt; i++) {
        auto [name, t] = get_tensor(is);
        if (!is)
            throw DataError("truncated checkpoint: " + path);
        if (name.rfind("optim.", 0) == 0)
            moments.emplace(name, std::move(t));
        else
            st.store.add(name, std::move(t));
    }
    for (auto& [name, t] : moments) {
        bool first       = name.rfind("optim.m.", 0) == 0;
        std::string base = name.substr(8);
        auto& mo         = st.optim.moments[base];
        (first ? mo.m : mo.v) = std::move(t);
    }
    st.optim.step = st.step;
    return st;
}

void save_loss_log(const std::string& path, const std::vector<TrainLogEntry>& curve) {
    write_file_atomic(path, [&](std::ostream& os) {
        for (auto& e : curve)
            os << e.step << "\t" << std::setprecision(9) << e.loss << "\n";
    });
}

std::string stage_ckpt_path(const std::string& dir, int stage) {
    return dir + "/stage" + std::to_string(stage) + ".ackp";
}

/*---------------------------------- staging -----------------------------------*/

TrainerState prepare_stage(int stage, const ModelConfig& cfg, uint64_t seed,
                           const std::string& prior_path, const std::string& prior_lcg_path) {
    cfg.validate();
    if (stage == 1) {
        TrainerState st;
        st.stage = 1;
        st.rng   = RngSet(seed);
        register_dit_params(st.store, "dit", cfg, st.rng.stream("init.dit"));
        return st;
    }
    if (prior_path.empty())
        throw DataError("stage " + std::to_string(stage) + " requires a prior checkpoint (missing prerequisite: stage " +
                        std::to_string(stage == 4 ? 2 : 1) + ")");
    TrainerState prior = load_checkpoint(prior_path);
    TrainerState st;
    st.stage = (uint32_t)stage;
    st.rng   = RngSet(seed);
    for (auto& [name, p] : prior.store)
        st.store.add(name, std::move(p.value));

    if (stage == 2) {
        if (prior.stage != 1)
            throw DataError("stage 2 must start from the stage-1 checkpoint, got stage " +
                            std::to_string(prior.stage));
        register_hce_params(st.store, cfg, st.rng.stream("init.hce"));
    } else if (stage == 3) {
        if (prior.stage != 1)
            throw DataError("stage 3 must start from the stage-1 checkpoint, got stage " +
                            std::to_string(prior.stage));
        copy_dit_to_lcg(st.store);
    } else if (stage == 4) {
        if (prior.stage != 2)
            throw DataError("stage 4 expects the stage-2 checkpoint first, got stage " +
                            std::to_string(prior.stage));
        if (prior_lcg_path.empty())
            throw DataError("stage 4 requires the stage-3 checkpoint as well (missing prerequisite: stage 3)");
        TrainerState lcg = load_checkpoint(prior_lcg_path);
        if (lcg.stage != 3)
            throw DataError("stage 4 second prior must be the stage-3 checkpoint, got stage " +
                            std::to_string(lcg.stage));
        // both branches share the frozen stage-1 denoiser; verify before merging
        for (auto& [name, p] : lcg.store) {
            if (name.rfind("lcg.", 0) == 0) {
                st.store.add(name, std::move(p.value));
            } else if (name.rfind("dit.", 0) == 0) {
                auto& base = st.store.get(name).value;
                if (base.size != p.value.size ||
                    std::memcmp(base.data, p.value.data, base.size * sizeof(float)) != 0)
                    throw DataError("stage-2 and stage-3 checkpoints disagree on frozen denoiser tensor " + name);
            }
        }
    } else {
        throw std::invalid_argument("stage must be 1..4");
    }
    return st;
}

/*---------------------------------- training ----------------------------------*/

namespace {

struct FrozenSnapshot {
    std::vector<std::pair<std::string, Tensor>> values;

    static FrozenSnapshot take(const ParameterStore& store) {
        FrozenSnapshot s;
        for (auto& [name, p] : const_cast<ParameterStore&>(store))
            if (!p.trainable)
                s.values.emplace_back(name, p.value.clone());
        return s;
    }

    void verify(const ParameterStore& store) const {
        for (auto& [name, saved] : values) {
            auto& cur = const_cast<ParameterStore&>(store).get(name).value;
            if (cur.size != saved.size ||
                std::memcmp(cur.data, saved.data, cur.size * sizeof(float)) != 0)
                throw std::logic_error("freeze-mask violation: frozen parameter changed: " + name);
        }
    }
};

}  // namespace

StageResult run_stage(TrainerState& st, const StagePlan& plan, const Dataset& data,
                      const ModelConfig& cfg, const NoiseSchedule& sched) {
    if ((int)st.stage != plan.stage)
        throw DataError("state is for stage " + std::to_string(st.stage) + ", plan is stage " +
                        std::to_string(plan.stage));
    auto train = split_clips(data, "train");
    if (train.empty())
        throw DataError("no training clips in dataset");

    auto prefixes = plan.trainable_prefixes.empty() ? default_trainable_prefixes(plan.stage)
                                                    : plan.trainable_prefixes;
    st.store.set_trainable_prefixes(prefixes);
    st.optim.cfg.lr = plan.lr;
    auto frozen     = FrozenSnapshot::take(st.store);

    StageCond cond = StageCond::of(plan.stage);
    auto& data_rng = st.rng.stream("data");
    auto& t_rng    = st.rng.stream("t");
    auto& eps_rng  = st.rng.stream("noise");
    auto& drop_rng = st.rng.stream("capdrop");

    StageResult result;
    for (; st.step < (uint64_t)plan.iterations; st.step++) {
        std::vector<const VideoClip*> batch;
        std::vector<std::vector<uint16_t>> captions;
        for (int b = 0; b < plan.batch_size; b++) {
            const VideoClip* clip = train[data_rng.next_below((uint32_t)train.size())];
            batch.push_back(clip);
            bool drop = drop_rng.next_unit() < plan.caption_dropout;
            captions.push_back(drop ? mask_palette_words(clip->caption) : clip->caption);
        }
        st.store.zero_grads();
        double loss = stage_loss<float>(st.store, cfg, sched, batch, captions, cond, t_rng, eps_rng, true);
        if (!std::isfinite(loss))
            throw NumericError("stage " + std::to_string(plan.stage) + " loss diverged at step " +
                               std::to_string(st.step) + ": " + std::to_string(loss));
        st.optim.step_update(st.store);
        result.curve.push_back({st.step, (float)loss});
        if ((st.step + 1) % 500 == 0)
            frozen.verify(st.store);
    }
    frozen.verify(st.store);
    return result;
}

/*--------------------------------- evaluation ---------------------------------*/

std::vector<uint8_t> sample_for_eval(ParameterStore& store, const ModelConfig& cfg,
                                     const NoiseSchedule& sched, StageCond cond,
                                     const VideoClip& sketch_clip, const VideoClip& ref_clip,
                                     int steps, uint64_t seed) {
    SampleOptions opt;
    opt.steps = steps;
    opt.seed  = seed;
    auto caption = mask_palette_words(sketch_clip.caption);
    const uint8_t* ref_rgb = nullptr;
    const uint8_t* ref_skt = nullptr;
    if (cond.use_hce || cond.use_lcg) {
        size_t off = (size_t)ref_clip.reference_index * ref_clip.H * ref_clip.W;
        ref_rgb    = ref_clip.frames.data() + off * 3;
        ref_skt    = ref_clip.sketches.data() + off;
    }
    return ddim_sample<float>(store, cfg, sched, cond, sketch_clip, caption, ref_rgb, ref_skt, opt);
}

std::vector<AblationRow> run_ablation(const Dataset& ds, const ModelConfig& cfg,
                                      const NoiseSchedule& sched, const std::string& ckpt_dir,
                                      const AblationOptions& opt) {
    auto test = split_clips(ds, "test");
    if (test.empty())
        throw DataError("no test clips in dataset");
    if ((int)test.size() > opt.eval_clips)
        test.resize(opt.eval_clips);

    struct Variant {
        const char* name;
        int ckpt_stage;  // checkpoint to load (0 = merged 2+3)
        int cond_stage;
    };
    const Variant variants[] = {
        {"(1)", 1, 1}, {"(2)", 2, 2}, {"(3)", 3, 3}, {"(4)", 0, 4}, {"full", 4, 4}};

    std::vector<AblationRow> rows;
    for (const auto& v : variants) {
        AblationRow row;
        row.name       = v.name;
        row.cond_stage = v.cond_stage;
        try {
            TrainerState st =
                v.ckpt_stage == 0
                    ? prepare_stage(4, cfg, opt.seed, stage_ckpt_path(ckpt_dir, 2), stage_ckpt_path(ckpt_dir, 3))
                    : load_checkpoint(stage_ckpt_path(ckpt_dir, v.ckpt_stage));
            StageCond cond = StageCond::of(v.cond_stage);
            double psnr_s = 0, ssim_s = 0, sa_s = 0, bg_s = 0;
            for (size_t i = 0; i < test.size(); i++) {
                const VideoClip& clip = *test[i];
                uint64_t seed = splitmix_fin(opt.seed ^ splitmix_fin(clip.seed));
                auto frames = sample_for_eval(st.store, cfg, sched, cond, clip, clip, opt.steps, seed);
                psnr_s += psnr_u8(frames.data(), clip.frames.data(), frames.size());
                ssim_s += ssim_clip(frames.data(), clip.frames.data(), clip.T, clip.H, clip.W);
                sa_s += sketch_alignment(frames.data(), clip.sketches.data(), clip.T, clip.H,
                                         clip.W, ds.cfg.xdog);
                bg_s += background_temporal_variance(frames.data(), clip.scene, clip.T, clip.H, clip.W);
            }
            row.psnr  = psnr_s / (double)test.size();
            row.ssim  = ssim_s / (double)test.size();
            row.sa    = sa_s / (double)test.size();
            row.bgvar = bg_s / (double)test.size();
        } catch (const NumericError& e) {
            row.failed = true;
            row.note   = e.what();
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

std::string format_ablation_table(const std::vector<AblationRow>& rows) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(4);
    os << std::left << std::setw(8) << "variant" << std::right << std::setw(10) << "psnr"
       << std::setw(10) << "ssim" << std::setw(10) << "sa" << std::setw(12) << "bgvar"
       << "  note\n";
    for (auto& r : rows) {
        os << std::left << std::setw(8) << r.name;
        if (r.failed)
            os << "  diverged: " << r.note;
        else
            os << std::right << std::setw(10) << r.psnr << std::setw(10) << r.ssim
               << std::setw(10) << r.sa << std::setw(12) << r.bgvar;
        os << "\n";
    }
    return os.str();
}

}  // namespace refcolor
