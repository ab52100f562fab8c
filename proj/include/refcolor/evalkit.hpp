#ifndef REFCOLOR_EVALKIT_HPP
#define REFCOLOR_EVALKIT_HPP

#include <string>
#include <vector>

#include "refcolor/synthgen.hpp"

namespace refcolor {

/*---------------------------------- metrics ----------------------------------*/

// 10*log10(1/MSE) over [0,1]-normalized values; capped at 99 dB when the
// inputs are (numerically) identical.
double psnr(const std::vector<float>& x, const std::vector<float>& y);
double psnr_u8(const uint8_t* x, const uint8_t* y, size_t n);

// Single-frame SSIM on BT.601 luma, 7x7 Gaussian window (sigma 1.5), valid
// positions only, C1=1e-4 C2=9e-4.
double ssim_frame(const std::vector<float>& x, const std::vector<float>& y, int H, int W);
// Mean over frames of an RGB clip.
double ssim_clip(const uint8_t* x, const uint8_t* y, int T, int H, int W);

// RMSE between sketches re-extracted from generated frames and the input
// sketches, both on [0,1]. Lower is better.
double sketch_alignment(const uint8_t* gen_frames, const uint8_t* input_sketches,
                        int T, int H, int W, const XdogParams& params);
// Same, restricted to frames [t0, t1).
double sketch_alignment_range(const uint8_t* gen_frames, const uint8_t* input_sketches,
                              int T, int H, int W, const XdogParams& params, int t0, int t1);

// One row stacked across time -> T x W RGB image.
std::vector<uint8_t> temporal_profile(const uint8_t* frames, int T, int H, int W, int row);

// Mean over background pixels (mask from generator geometry) of the per-pixel
// temporal variance of [0,1] intensities.
double background_temporal_variance(const uint8_t* frames, const SceneSpec& scene, int T, int H, int W);

// Mean RGB (in [0,1]) over fully-covered foreground pixels of the scene's
// shapes; false when the scene never covers a pixel fully.
bool foreground_mean_color(const uint8_t* frames, const SceneSpec& scene, int T, int H, int W,
                           double out_rgb[3]);

/*---------------------------------- reports ----------------------------------*/

struct ClipEval {
    std::string id;
    std::string scenario;
    double psnr = 0, ssim = 0, sa = 0, bgvar = 0;
};

struct EvalReport {
    std::vector<ClipEval> clips;
    std::string checkpoint_id;
    uint64_t seed = 0;
    std::string split;

    double mean_psnr() const;
    double mean_ssim() const;
    double mean_sa() const;
    double mean_bgvar() const;
};

std::string format_report_table(const EvalReport& r);
void write_report_tsv(const std::string& path, const EvalReport& r);

}  // namespace refcolor

#endif
