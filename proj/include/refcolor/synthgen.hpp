#ifndef REFCOLOR_SYNTHGEN_HPP
#define REFCOLOR_SYNTHGEN_HPP

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "refcolor/rng.hpp"

namespace refcolor {

struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/*--------------------------------- palette ----------------------------------*/

struct Rgb {
    uint8_t r, g, b;
};

// Foreground colors keep luminance well below both backgrounds so XDoG finds
// a closed outline for every color/background pair.
namespace palette {
constexpr int num_fg = 8;
constexpr int num_bg = 2;
constexpr std::array<Rgb, num_fg> fg = {{{220, 30, 30},   // red
                                         {0, 180, 40},    // green
                                         {30, 60, 220},   // blue
                                         {170, 140, 0},   // yellow
                                         {210, 30, 180},  // magenta
                                         {0, 160, 170},   // cyan
                                         {230, 110, 10},  // orange
                                         {120, 40, 200}}};// purple
constexpr std::array<Rgb, num_bg> bg = {{{255, 255, 255}, {211, 211, 211}}};
extern const std::array<const char*, num_fg> fg_names;
extern const std::array<const char*, num_bg> bg_names;
int nearest_fg(double r, double g, double b);  // inputs in [0,1]
}  // namespace palette

/*---------------------------------- types -----------------------------------*/

struct XdogParams {
    float sigma   = 1.0f;
    float k       = 1.6f;
    float p       = 20.0f;
    float epsilon = 0.5f;
    bool binary   = true;
};

enum class ShapeKind : int { circle = 0, square = 1, triangle = 2 };

struct ShapeSpec {
    ShapeKind kind;
    int color;        // foreground palette index
    float x0, y0;     // centroid at spawn_frame, pixels
    float vx, vy;     // own velocity, pixels/frame (camera pan excluded)
    float radius;     // circle radius / square half-side / triangle circumradius
    int spawn_frame;  // 0 = present from the first frame
};

struct SceneSpec {
    uint64_t seed = 0;
    std::vector<ShapeSpec> shapes;
    int background = 0;
    float pan_x = 0, pan_y = 0;  // camera pan, shared drift in pixels/frame
};

struct GeneratorConfig {
    int frames = 8, height = 32, width = 32;
    int min_shapes   = 1;
    int max_shapes   = 3;
    float min_radius = 4.0f;
    float max_radius = 6.5f;
    float max_speed  = 2.0f;
    float pan_max    = 0.5f;
    float spawn_prob = 0.25f;
    int caption_len  = 12;
    XdogParams xdog;
};

struct VideoClip {
    int T = 0, H = 0, W = 0;
    std::vector<uint8_t> frames;    // T*H*W*3 RGB
    std::vector<uint8_t> sketches;  // T*H*W, 0 = line, 255 = blank
    std::vector<uint16_t> caption;  // padded to caption_len
    uint32_t reference_index = 0;
    uint64_t seed            = 0;
    std::string split        = "train";
    SceneSpec scene;  // derived metadata, not serialized
};

/*---------------------------------- vocab -----------------------------------*/

// Closed caption vocabulary. Palette words are the color/background names;
// eval-time masking replaces exactly those with pad.
class Vocab {
public:
    static const Vocab& fixed();

    int id(const std::string& word) const;
    const std::string& word(int id) const;
    int size() const { return (int)words_.size(); }
    int pad() const { return 0; }
    int bos() const { return 1; }
    bool is_palette_word(int id) const;
    std::string decode(const std::vector<uint16_t>& ids) const;

private:
    Vocab();
    std::vector<std::string> words_;
};

/*-------------------------------- operations ---------------------------------*/

// Binary index of the apparent motion: 0..7 compass (starting at +x, ccw in
// image coords), 8 = still.
int direction_bucket(float vx, float vy);

SceneSpec scene_of(uint64_t seed, const GeneratorConfig& cfg, const std::string& split);

// Shape coverage of one pixel at frame t, in [0,1] (4x4 supersampled).
float scene_coverage(const SceneSpec& scene, int t, int x, int y);

// Pixels never covered by any shape in any frame (background mask).
std::vector<uint8_t> background_mask(const SceneSpec& scene, int T, int H, int W);

// Pixels fully inside some shape at frame t.
std::vector<uint8_t> foreground_mask(const SceneSpec& scene, int t, int H, int W);

std::vector<float> gaussian_kernel(float sigma);

// S = (1+p)*(G_sigma*L) - p*(G_{k sigma}*L); binary mode thresholds at
// epsilon (0 = line, 1 = blank). Reflected borders, kernels normalized to 1.
std::vector<float> xdog(const std::vector<float>& gray, int H, int W, const XdogParams& params);

std::vector<float> luminance(const uint8_t* rgb, int H, int W);

std::vector<uint16_t> caption_of(const SceneSpec& scene, const Vocab& vocab, int max_len);

// Replaces color/background words with pad; used when the palette must come
// from the reference pathway instead of the text.
std::vector<uint16_t> mask_palette_words(const std::vector<uint16_t>& caption);

VideoClip gen_clip(uint64_t seed, const GeneratorConfig& cfg, const std::string& split = "train");

/*---------------------------------- shards ----------------------------------*/

struct Dataset {
    GeneratorConfig cfg;
    std::vector<VideoClip> clips;
};

void write_shard(const std::string& shard_path, const std::string& manifest_path, const Dataset& ds);
Dataset read_shard(const std::string& shard_path, const std::string& manifest_path, const GeneratorConfig& cfg);

// Deterministically generates train/test clips; test clips draw from held-out
// (color, shape, direction) combinations and use frame 0 as reference.
Dataset make_dataset(uint64_t seed, const GeneratorConfig& cfg, int train_clips, int test_clips);

}  // namespace refcolor

#endif
