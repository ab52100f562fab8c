#ifndef REFCOLOR_PIPELINE_HPP
#define REFCOLOR_PIPELINE_HPP

#include <optional>
#include <string>
#include <vector>

#include "refcolor/diffusion.hpp"

namespace refcolor {

/*------------------------------- trainer state -------------------------------*/

struct TrainerState {
    ParameterStore store;
    OptimState optim;
    RngSet rng;
    uint32_t stage = 1;
    uint64_t step  = 0;
};

struct StagePlan {
    int stage      = 1;
    int iterations = 1000;
    int batch_size = 8;
    double lr      = 1e-3;
    uint64_t seed  = 1;
    double caption_dropout = 0.5;  // palette-word dropout probability
    std::vector<std::string> trainable_prefixes;  // defaulted from stage when empty
};

std::vector<std::string> default_trainable_prefixes(int stage);

struct TrainLogEntry {
    uint64_t step;
    float loss;
};

struct StageResult {
    std::vector<TrainLogEntry> curve;
};

/*-------------------------------- checkpoints --------------------------------*/

void save_checkpoint(const std::string& path, const TrainerState& st);
TrainerState load_checkpoint(const std::string& path);

void save_loss_log(const std::string& path, const std::vector<TrainLogEntry>& curve);

std::string stage_ckpt_path(const std::string& dir, int stage);

/*--------------------------------- staging -----------------------------------*/

// Builds the in-memory state a stage starts from. Stage 1 initializes fresh
// weights; stage 2 and 3 branch from the stage-1 checkpoint (adding the
// extractor / the DiT copy); stage 4 merges the stage-2 extractor and the
// stage-3 guider around their shared frozen denoiser.
TrainerState prepare_stage(int stage, const ModelConfig& cfg, uint64_t seed,
                           const std::string& prior_path, const std::string& prior_lcg_path = "");

// Runs plan.iterations of stage_loss + AdamW honoring the freeze mask;
// `st` may be a freshly prepared state or a reloaded mid-stage checkpoint.
StageResult run_stage(TrainerState& st, const StagePlan& plan, const Dataset& data,
                      const ModelConfig& cfg, const NoiseSchedule& sched);

std::vector<const VideoClip*> split_clips(const Dataset& ds, const std::string& split);

/*--------------------------------- ablation ----------------------------------*/

struct AblationRow {
    std::string name;  // "(1)".."( 4)", "full"
    int cond_stage = 1;
    double psnr = 0, ssim = 0, sa = 0, bgvar = 0;
    bool failed = false;
    std::string note;
};

struct AblationOptions {
    int eval_clips = 64;   // cap on test clips evaluated
    int steps      = 20;   // DDIM steps
    uint64_t seed  = 1;
};

// Evaluates the five Table-3 style variants from existing stage checkpoints.
// Variant (4) is the merged stage-2 + stage-3 model without finetuning.
std::vector<AblationRow> run_ablation(const Dataset& ds, const ModelConfig& cfg,
                                      const NoiseSchedule& sched, const std::string& ckpt_dir,
                                      const AblationOptions& opt);

std::string format_ablation_table(const std::vector<AblationRow>& rows);

// Samples one clip the way every evaluation path does: palette words masked
// from the caption so color information can only come from the reference.
std::vector<uint8_t> sample_for_eval(ParameterStore& store, const ModelConfig& cfg,
                                     const NoiseSchedule& sched, StageCond cond,
                                     const VideoClip& sketch_clip, const VideoClip& ref_clip,
                                     int steps, uint64_t seed);

}  // namespace refcolor

#endif
