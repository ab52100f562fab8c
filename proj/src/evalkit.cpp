#include "refcolor/evalkit.hpp"

#include <cmath>
#include <iomanip>
#include <sstream>
#include <stdexcept>

#include "refcolor/io.hpp"

namespace refcolor {

double psnr(const std::vector<float>& x, const std::vector<float>& y) {
    if (x.size() != y.size() || x.empty())
        throw std::invalid_argument("psnr: size mismatch " + std::to_string(x.size()) +
                                    " vs " + std::to_string(y.size()));
    double mse = 0;
    for (size_t i = 0; i < x.size(); i++) {
        double d = (double)x[i] - y[i];
        mse += d * d;
    }
    mse /= (double)x.size();
    if (mse < 1e-10)
        return 99.0;
    return 10.0 * std::log10(1.0 / mse);
}

double psnr_u8(const uint8_t* x, const uint8_t* y, size_t n) {
    std::vector<float> fx(n), fy(n);
    for (size_t i = 0; i < n; i++) {
        fx[i] = x[i] / 255.0f;
        fy[i] = y[i] / 255.0f;
    }
    return psnr(fx, fy);
}

double ssim_frame(const std::vector<float>& x, const std::vector<float>& y, int H, int W) {
    if (x.size() != y.size() || (size_t)H * W != x.size())
        throw std::invalid_argument("ssim: shape mismatch");
    constexpr int win = 7, rad = 3;
    if (H < win || W < win)
        throw std::invalid_argument("ssim: image smaller than the 7x7 window");
    constexpr double C1 = 1e-4, C2 = 9e-4;

    // explicit 7x7 window weights (sigma 1.5), normalized
    static std::vector<double> wts = [] {
        std::vector<double> w(win * win);
        double sum = 0;
        for (int i = 0; i < win; i++)
            for (int j = 0; j < win; j++) {
                double di = i - rad, dj = j - rad;
                double v  = std::exp(-(di * di + dj * dj) / (2.0 * 1.5 * 1.5));
                w[i * win + j] = v;
                sum += v;
            }
        for (auto& v : w)
            v /= sum;
        return w;
    }();

    double total = 0;
    int count    = 0;
    for (int cy = rad; cy < H - rad; cy++)
        for (int cx = rad; cx < W - rad; cx++) {
            double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
            for (int i = 0; i < win; i++)
                for (int j = 0; j < win; j++) {
                    double w  = wts[i * win + j];
                    double xv = x[(size_t)(cy + i - rad) * W + (cx + j - rad)];
                    double yv = y[(size_t)(cy + i - rad) * W + (cx + j - rad)];
                    mx += w * xv;
                    my += w * yv;
                    sxx += w * xv * xv;
                    syy += w * yv * yv;
                    sxy += w * xv * yv;
                }
            double vx  = sxx - mx * mx;
            double vy  = syy - my * my;
            double cxy = sxy - mx * my;
            double s   = ((2 * mx * my + C1) * (2 * cxy + C2)) /
                       ((mx * mx + my * my + C1) * (vx + vy + C2));
            total += s;
            count++;
        }
    return total / count;
}

double ssim_clip(const uint8_t* x, const uint8_t* y, int T, int H, int W) {
    double total = 0;
    for (int t = 0; t < T; t++) {
        auto lx = luminance(x + (size_t)t * H * W * 3, H, W);
        auto ly = luminance(y + (size_t)t * H * W * 3, H, W);
        total += ssim_frame(lx, ly, H, W);
    }
    return total / T;
}

double sketch_alignment_range(const uint8_t* gen_frames, const uint8_t* input_sketches,
                              int T, int H, int W, const XdogParams& params, int t0, int t1) {
    if (t0 < 0 || t1 > T || t0 >= t1)
        throw std::invalid_argument("sketch_alignment: bad frame range");
    double se = 0;
    size_t n  = 0;
    for (int t = t0; t < t1; t++) {
        auto sk = xdog(luminance(gen_frames + (size_t)t * H * W * 3, H, W), H, W, params);
        const uint8_t* ref = input_sketches + (size_t)t * H * W;
        for (size_t i = 0; i < sk.size(); i++) {
            double d = (double)sk[i] - ref[i] / 255.0;
            se += d * d;
            n++;
        }
    }
    return std::sqrt(se / (double)n);
}

double sketch_alignment(const uint8_t* gen_frames, const uint8_t* input_sketches,
                        int T, int H, int W, const XdogParams& params) {
    return sketch_alignment_range(gen_frames, input_sketches, T, H, W, params, 0, T);
}

std::vector<uint8_t> temporal_profile(const uint8_t* frames, int T, int H, int W, int row) {
    if (row < 0 || row >= H)
        throw std::invalid_argument("temporal_profile: row " + std::to_string(row) +
                                    " out of [0," + std::to_string(H) + ")");
    std::vector<uint8_t> img((size_t)T * W * 3);
    for (int t = 0; t < T; t++)
        std::copy(frames + ((size_t)t * H + row) * W * 3,
                  frames + ((size_t)t * H + row + 1) * W * 3,
                  img.begin() + (size_t)t * W * 3);
    return img;
}

double background_temporal_variance(const uint8_t* frames, const SceneSpec& scene,
                                    int T, int H, int W) {
    auto mask    = background_mask(scene, T, H, W);
    double total = 0;
    size_t count = 0;
    for (int y = 0; y < H; y++)
        for (int x = 0; x < W; x++) {
            if (!mask[(size_t)y * W + x])
                continue;
            for (int c = 0; c < 3; c++) {
                double mean = 0;
                for (int t = 0; t < T; t++)
                    mean += frames[(((size_t)t * H + y) * W + x) * 3 + c] / 255.0;
                mean /= T;
                double var = 0;
                for (int t = 0; t < T; t++) {
                    double d = frames[(((size_t)t * H + y) * W + x) * 3 + c] / 255.0 - mean;
                    var += d * d;
                }
                total += var / T;
                count++;
            }
        }
    return count ? total / (double)count : 0.0;
}

bool foreground_mean_color(const uint8_t* frames, const SceneSpec& scene, int T, int H, int W,
                           double out_rgb[3]) {
    double acc[3] = {0, 0, 0};
    size_t n      = 0;
    for (int t = 0; t < T; t++) {
        auto mask = foreground_mask(scene, t, H, W);
        for (int y = 0; y < H; y++)
            for (int x = 0; x < W; x++) {
                if (!mask[(size_t)y * W + x])
                    continue;
                const uint8_t* px = frames + (((size_t)t * H + y) * W + x) * 3;
                for (int c = 0; c < 3; c++)
                    acc[c] += px[c] / 255.0;
                n++;
            }
    }
    if (!n)
        return false;
    for (int c = 0; c < 3; c++)
        out_rgb[c] = acc[c] / (double)n;
    return true;
}

/*---------------------------------- reports ----------------------------------*/

namespace {
double mean_of(const std::vector<ClipEval>& clips, double ClipEval::*field) {
    if (clips.empty())
        return 0;
    double s = 0;
    for (auto& c : clips)
        s += c.*field;
    return s / (double)clips.size();
}
}  // namespace

double EvalReport::mean_psnr() const { return mean_of(clips, &ClipEval::psnr); }
double EvalReport::mean_ssim() const { return mean_of(clips, &ClipEval::ssim); }
double EvalReport::mean_sa() const { return mean_of(clips, &ClipEval::sa); }
double EvalReport::mean_bgvar() const { return mean_of(clips, &ClipEval::bgvar); }

std::string format_report_table(const EvalReport& r) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(4);
    os << std::left << std::setw(22) << "clip" << std::setw(22) << "scenario"
       << std::right << std::setw(10) << "psnr" << std::setw(10) << "ssim"
       << std::setw(10) << "sa" << std::setw(12) << "bgvar" << "\n";
    for (auto& c : r.clips)
        os << std::left << std::setw(22) << c.id << std::setw(22) << c.scenario
           << std::right << std::setw(10) << c.psnr << std::setw(10) << c.ssim
           << std::setw(10) << c.sa << std::setw(12) << c.bgvar << "\n";
    os << std::left << std::setw(22) << "mean" << std::setw(22) << ""
       << std::right << std::setw(10) << r.mean_psnr() << std::setw(10) << r.mean_ssim()
       << std::setw(10) << r.mean_sa() << std::setw(12) << r.mean_bgvar() << "\n";
    return os.str();
}

void write_report_tsv(const std::string& path, const EvalReport& r) {
    write_file_atomic(path, [&](std::ostream& os) {
        os << std::setprecision(10);
        for (auto& c : r.clips)
            os << c.id << "\t" << c.scenario << "\t" << c.psnr << "\t" << c.ssim << "\t"
               << c.sa << "\t" << c.bgvar << "\n";
    });
}

}  // namespace refcolor
