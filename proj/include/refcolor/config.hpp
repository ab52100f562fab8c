#ifndef REFCOLOR_CONFIG_HPP
#define REFCOLOR_CONFIG_HPP

#include <string>

#include "refcolor/backbone.hpp"
#include "refcolor/pipeline.hpp"

namespace refcolor {

// Flat "key = value" run configuration. Every key has a default; unknown keys
// are rejected; emit() -> parse() round-trips exactly.
struct RunConfig {
    uint64_t seed = 1;

    int train_clips = 512;
    int test_clips  = 64;
    GeneratorConfig gen;

    ModelConfig model;

    int sched_steps = 200;
    double beta_min = 1e-4;
    double beta_max = 0.02;
    int sample_steps = 20;

    struct StageOpts {
        int iters = 0;
        int batch = 8;
        double lr = 1e-3;
    };
    StageOpts stage[4] = {{3000, 8, 1e-3}, {1500, 8, 1e-3}, {2000, 8, 1e-3}, {3000, 8, 1e-3}};
    double caption_dropout = 0.5;

    int eval_clips     = 64;
    int scenario_pairs = 16;

    static RunConfig parse(const std::string& text);
    static RunConfig parse_file(const std::string& path);
    std::string emit() const;

    // keeps the generator and model geometry in sync and validates
    void finalize();

    NoiseSchedule make_schedule() const { return NoiseSchedule::make(sched_steps, beta_min, beta_max); }
    StagePlan make_plan(int s) const;
};

}  // namespace refcolor

#endif
