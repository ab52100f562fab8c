#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <string>

#include "CLI11.hpp"
#include "refcolor/config.hpp"
#include "refcolor/evalkit.hpp"
#include "refcolor/io.hpp"
#include "refcolor/pipeline.hpp"
#include "refcolor/selftest.hpp"

namespace fs = std::filesystem;
using namespace refcolor;

namespace {

constexpr int kExitUsage    = 1;
constexpr int kExitData     = 2;
constexpr int kExitNumeric  = 3;
constexpr int kExitSelftest = 4;

struct CommonOpts {
    std::string config_path;
    bool deterministic = false;
    uint64_t seed      = 0;
    bool seed_set      = false;
};

// gen-data saves the effective config next to the shard; later commands read
// it back so geometry and XDoG parameters always match the data.
RunConfig load_config(const CommonOpts& opts, const std::string& data_dir = "") {
    RunConfig cfg;
    if (!opts.config_path.empty())
        cfg = RunConfig::parse_file(opts.config_path);
    else if (!data_dir.empty() && fs::exists(data_dir + "/config.cfg"))
        cfg = RunConfig::parse_file(data_dir + "/config.cfg");
    else
        cfg.finalize();
    if (opts.seed_set)
        cfg.seed = opts.seed;
    return cfg;
}

Dataset load_data(const RunConfig& cfg, const std::string& dir) {
    return read_shard(dir + "/data.aclp", dir + "/manifest.tsv", cfg.gen);
}

const VideoClip& pick_clip(const Dataset& ds, const std::string& split, int index) {
    auto clips = split_clips(ds, split);
    if (index < 0 || index >= (int)clips.size())
        throw DataError("clip index " + std::to_string(index) + " out of range for split " + split +
                        " (" + std::to_string(clips.size()) + " clips)");
    return *clips[index];
}

void write_frames(const std::string& dir, const std::vector<uint8_t>& frames, int T, int H, int W) {
    fs::create_directories(dir);
    char name[32];
    for (int t = 0; t < T; t++) {
        std::snprintf(name, sizeof(name), "frame_%02d.ppm", t);
        write_ppm(dir + "/" + name, frames.data() + (size_t)t * H * W * 3, H, W);
    }
}

int run(int argc, char** argv) {
    CLI::App app{"reference-guided sketch video colorization, desk scale"};
    app.require_subcommand(1);

    CommonOpts common;
    app.add_option("--config", common.config_path, "run configuration file");
    app.add_flag("--deterministic", common.deterministic, "force single-threaded numerics");
    app.add_option("--seed", common.seed, "master seed override")->each([&](const std::string&) {
        common.seed_set = true;
    });

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "generate dataset shard + manifest");
    std::string gen_out = "data";
    gen->add_option("--out", gen_out, "output directory");

    // train
    auto* train = app.add_subcommand("train", "run one training stage");
    int train_stage = 1;
    std::string train_data = "data", ckpt_dir = "ckpt", from_path, from_lcg_path, resume_path;
    train->add_option("--stage", train_stage, "stage 1..4")->required();
    train->add_option("--data", train_data, "dataset directory");
    train->add_option("--ckpt-dir", ckpt_dir, "checkpoint directory");
    train->add_option("--from", from_path, "prior checkpoint (default: stage convention)");
    train->add_option("--from-lcg", from_lcg_path, "stage-3 checkpoint for stage 4");
    train->add_option("--resume", resume_path, "resume a mid-stage checkpoint");

    // sample
    auto* sample = app.add_subcommand("sample", "DDIM-sample a clip");
    std::string smp_ckpt, smp_data = "data", smp_out = "sample_out", smp_split = "test", ref_split = "test";
    int smp_clip = 0, ref_clip = -1, smp_cond = -1, smp_steps = 0, profile_row = -1;
    uint64_t smp_seed = 1;
    bool raw_caption  = false;
    sample->add_option("--ckpt", smp_ckpt, "checkpoint path")->required();
    sample->add_option("--data", smp_data, "dataset directory");
    sample->add_option("--sketches", smp_clip, "sketch clip index")->required();
    sample->add_option("--split", smp_split, "clip split (train|test)");
    sample->add_option("--ref", ref_clip, "reference clip index (default: same clip)");
    sample->add_option("--ref-split", ref_split, "reference clip split");
    sample->add_option("--cond", smp_cond, "conditioning stage (default: checkpoint stage)");
    sample->add_option("--steps", smp_steps, "DDIM steps (default: config)");
    sample->add_option("--sample-seed", smp_seed, "sampling seed");
    sample->add_option("--out", smp_out, "output directory");
    sample->add_option("--profile-row", profile_row, "emit temporal profile of this row");
    sample->add_flag("--raw-caption", raw_caption, "keep palette words in the caption");

    // eval
    auto* eval = app.add_subcommand("eval", "metric report over the test split");
    std::string ev_ckpt, ev_data = "data", ev_out = "report";
    int ev_cond = -1, ev_clips = 0, ev_steps = 0;
    eval->add_option("--ckpt", ev_ckpt, "checkpoint path")->required();
    eval->add_option("--data", ev_data, "dataset directory");
    eval->add_option("--cond", ev_cond, "conditioning stage (default: checkpoint stage)");
    eval->add_option("--clips", ev_clips, "max test clips (default: config)");
    eval->add_option("--steps", ev_steps, "DDIM steps (default: config)");
    eval->add_option("--out", ev_out, "output prefix (.txt/.tsv)");

    // ablate
    auto* ablate = app.add_subcommand("ablate", "train missing stages and run the 5-variant ablation");
    std::string ab_data = "data", ab_ckpt = "ckpt", ab_out = "ablation";
    bool ab_no_train = false;
    ablate->add_option("--data", ab_data, "dataset directory");
    ablate->add_option("--ckpt-dir", ab_ckpt, "checkpoint directory");
    ablate->add_option("--out", ab_out, "output prefix (.txt/.tsv)");
    ablate->add_flag("--no-train", ab_no_train, "fail instead of training missing stages");

    // profile
    auto* profile = app.add_subcommand("profile", "temporal profile of a dataset clip");
    std::string pf_data = "data", pf_out = "profile.ppm", pf_split = "test";
    int pf_clip = 0, pf_row = 16;
    profile->add_option("--data", pf_data, "dataset directory");
    profile->add_option("--clip", pf_clip, "clip index");
    profile->add_option("--split", pf_split, "clip split");
    profile->add_option("--row", pf_row, "pixel row to track");
    profile->add_option("--out", pf_out, "output image (ppm)");

    auto* selftest = app.add_subcommand("selftest", "run the property suite");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? 0 : kExitUsage;
    }

    if (gen->parsed()) {
        RunConfig cfg = load_config(common);
        fs::create_directories(gen_out);
        auto ds = make_dataset(cfg.seed, cfg.gen, cfg.train_clips, cfg.test_clips);
        write_shard(gen_out + "/data.aclp", gen_out + "/manifest.tsv", ds);
        write_file_atomic(gen_out + "/config.cfg", [&](std::ostream& os) { os << cfg.emit(); });
        int spawned = 0, single = 0;
        for (auto& c : ds.clips) {
            for (auto& s : c.scene.shapes)
                if (s.spawn_frame > 0)
                    spawned++;
            if (c.scene.shapes.size() == 1)
                single++;
        }
        std::printf("wrote %d train + %d test clips to %s (%d single-shape, %d spawned shapes)\n",
                    cfg.train_clips, cfg.test_clips, gen_out.c_str(), single, spawned);
        return 0;
    }

    if (train->parsed()) {
        RunConfig cfg = load_config(common, train_data);
        auto ds       = load_data(cfg, train_data);
        auto sched    = cfg.make_schedule();
        fs::create_directories(ckpt_dir);

        TrainerState st;
        StagePlan plan = cfg.make_plan(train_stage);
        if (!resume_path.empty()) {
            st = load_checkpoint(resume_path);
            if ((int)st.stage != train_stage)
                throw DataError("resume checkpoint is stage " + std::to_string(st.stage));
        } else if (train_stage == 1) {
            st = prepare_stage(1, cfg.model, plan.seed, "");
        } else {
            std::string prior = !from_path.empty()
                                    ? from_path
                                    : stage_ckpt_path(ckpt_dir, train_stage == 4 ? 2 : 1);
            if (!fs::exists(prior))
                throw DataError("missing prerequisite checkpoint for stage " +
                                std::to_string(train_stage) + ": " + prior);
            std::string lcg_prior;
            if (train_stage == 4) {
                lcg_prior = !from_lcg_path.empty() ? from_lcg_path : stage_ckpt_path(ckpt_dir, 3);
                if (!fs::exists(lcg_prior))
                    throw DataError("missing prerequisite checkpoint for stage 4: " + lcg_prior);
            }
            st = prepare_stage(train_stage, cfg.model, plan.seed, prior, lcg_prior);
        }
        auto result = run_stage(st, plan, ds, cfg.model, sched);
        save_checkpoint(stage_ckpt_path(ckpt_dir, train_stage), st);
        save_loss_log(ckpt_dir + "/stage" + std::to_string(train_stage) + ".loss.tsv", result.curve);
        double tail = 0;
        int n       = 0;
        for (size_t i = result.curve.size() >= 20 ? result.curve.size() - 20 : 0; i < result.curve.size(); i++) {
            tail += result.curve[i].loss;
            n++;
        }
        std::printf("stage %d done: %d steps, tail loss %.5f -> %s\n", train_stage,
                    (int)result.curve.size(), n ? tail / n : 0.0,
                    stage_ckpt_path(ckpt_dir, train_stage).c_str());
        return 0;
    }

    if (sample->parsed()) {
        RunConfig cfg = load_config(common, smp_data);
        auto ds       = load_data(cfg, smp_data);
        auto sched    = cfg.make_schedule();
        TrainerState st = load_checkpoint(smp_ckpt);
        StageCond cond  = StageCond::of(smp_cond > 0 ? smp_cond : (int)st.stage);
        const VideoClip& sk  = pick_clip(ds, smp_split, smp_clip);
        const VideoClip& ref = ref_clip >= 0 ? pick_clip(ds, ref_split, ref_clip) : sk;

        SampleOptions opt;
        opt.steps    = smp_steps > 0 ? smp_steps : cfg.sample_steps;
        opt.seed     = smp_seed;
        auto caption = raw_caption ? sk.caption : mask_palette_words(sk.caption);
        const uint8_t* ref_rgb = nullptr;
        const uint8_t* ref_skt = nullptr;
        if (cond.use_hce || cond.use_lcg) {
            size_t off = (size_t)ref.reference_index * ref.H * ref.W;
            ref_rgb    = ref.frames.data() + off * 3;
            ref_skt    = ref.sketches.data() + off;
        }
        auto frames = ddim_sample<float>(st.store, cfg.model, sched, cond, sk, caption,
                                         ref_rgb, ref_skt, opt);
        write_frames(smp_out, frames, sk.T, sk.H, sk.W);
        if (profile_row >= 0) {
            auto img = temporal_profile(frames.data(), sk.T, sk.H, sk.W, profile_row);
            write_ppm(smp_out + "/profile.ppm", img.data(), sk.T, sk.W);
        }
        std::printf("wrote %d frames to %s\n", sk.T, smp_out.c_str());
        return 0;
    }

    if (eval->parsed()) {
        RunConfig cfg = load_config(common, ev_data);
        auto ds       = load_data(cfg, ev_data);
        auto sched    = cfg.make_schedule();
        TrainerState st = load_checkpoint(ev_ckpt);
        StageCond cond  = StageCond::of(ev_cond > 0 ? ev_cond : (int)st.stage);
        auto test       = split_clips(ds, "test");
        int limit       = ev_clips > 0 ? ev_clips : cfg.eval_clips;
        if ((int)test.size() > limit)
            test.resize(limit);
        if (test.empty())
            throw DataError("no test clips to evaluate");

        EvalReport report;
        report.checkpoint_id = ev_ckpt;
        report.seed          = cfg.seed;
        report.split         = "test";
        int steps            = ev_steps > 0 ? ev_steps : cfg.sample_steps;
        for (auto* clip : test) {
            uint64_t cseed = splitmix_fin(cfg.seed ^ splitmix_fin(clip->seed));
            auto frames = sample_for_eval(st.store, cfg.model, sched, cond, *clip, *clip, steps, cseed);
            ClipEval ce;
            ce.id       = "clip" + std::to_string(clip->seed % 100000);
            ce.scenario = "test";
            ce.psnr     = psnr_u8(frames.data(), clip->frames.data(), frames.size());
            ce.ssim     = ssim_clip(frames.data(), clip->frames.data(), clip->T, clip->H, clip->W);
            ce.sa    = sketch_alignment(frames.data(), clip->sketches.data(), clip->T, clip->H,
                                        clip->W, cfg.gen.xdog);
            ce.bgvar = background_temporal_variance(frames.data(), clip->scene, clip->T, clip->H, clip->W);
            report.clips.push_back(ce);
        }
        std::string table = format_report_table(report);
        write_file_atomic(ev_out + ".txt", [&](std::ostream& os) { os << table; });
        write_report_tsv(ev_out + ".tsv", report);
        std::fputs(table.c_str(), stdout);
        return 0;
    }

    if (ablate->parsed()) {
        RunConfig cfg = load_config(common, ab_data);
        auto ds       = load_data(cfg, ab_data);
        auto sched    = cfg.make_schedule();
        fs::create_directories(ab_ckpt);
        for (int stage = 1; stage <= 4; stage++) {
            std::string path = stage_ckpt_path(ab_ckpt, stage);
            if (fs::exists(path))
                continue;
            if (ab_no_train)
                throw DataError("missing checkpoint: " + path);
            StagePlan plan = cfg.make_plan(stage);
            TrainerState st =
                stage == 1 ? prepare_stage(1, cfg.model, plan.seed, "")
                           : prepare_stage(stage, cfg.model, plan.seed,
                                           stage_ckpt_path(ab_ckpt, stage == 4 ? 2 : 1),
                                           stage == 4 ? stage_ckpt_path(ab_ckpt, 3) : "");
            std::printf("training stage %d (%d iterations)...\n", stage, plan.iterations);
            auto result = run_stage(st, plan, ds, cfg.model, sched);
            save_checkpoint(path, st);
            save_loss_log(ab_ckpt + "/stage" + std::to_string(stage) + ".loss.tsv", result.curve);
        }
        AblationOptions opt;
        opt.eval_clips = cfg.eval_clips;
        opt.steps      = cfg.sample_steps;
        opt.seed       = cfg.seed;
        auto rows      = run_ablation(ds, cfg.model, sched, ab_ckpt, opt);
        auto table     = format_ablation_table(rows);
        write_file_atomic(ab_out + ".txt", [&](std::ostream& os) { os << table; });
        write_file_atomic(ab_out + ".tsv", [&](std::ostream& os) {
            for (auto& r : rows)
                os << r.name << "\t" << r.psnr << "\t" << r.ssim << "\t" << r.sa << "\t"
                   << r.bgvar << "\t" << (r.failed ? "diverged" : "ok") << "\n";
        });
        std::fputs(table.c_str(), stdout);
        return 0;
    }

    if (profile->parsed()) {
        RunConfig cfg = load_config(common, pf_data);
        auto ds       = load_data(cfg, pf_data);
        const VideoClip& clip = pick_clip(ds, pf_split, pf_clip);
        auto img = temporal_profile(clip.frames.data(), clip.T, clip.H, clip.W, pf_row);
        write_ppm(pf_out, img.data(), clip.T, clip.W);
        std::printf("wrote %s (%dx%d)\n", pf_out.c_str(), clip.W, clip.T);
        return 0;
    }

    if (selftest->parsed()) {
        auto results = run_property_suite();
        return print_results(results) ? 0 : kExitSelftest;
    }

    return kExitUsage;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const NumericError& e) {
        std::fprintf(stderr, "numeric failure: %s\n", e.what());
        return kExitNumeric;
    } catch (const DataError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitData;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitData;
    }
}
