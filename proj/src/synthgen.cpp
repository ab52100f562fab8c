#include "refcolor/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

#include "refcolor/io.hpp"

namespace refcolor {

namespace palette {

const std::array<const char*, num_fg> fg_names = {"red", "green", "blue", "yellow",
                                                  "magenta", "cyan", "orange", "purple"};
const std::array<const char*, num_bg> bg_names = {"white", "gray"};

int nearest_fg(double r, double g, double b) {
    int best    = 0;
    double dmin = 1e30;
    for (int i = 0; i < num_fg; i++) {
        double dr = r - fg[i].r / 255.0;
        double dg = g - fg[i].g / 255.0;
        double db = b - fg[i].b / 255.0;
        double d  = dr * dr + dg * dg + db * db;
        if (d < dmin) {
            dmin = d;
            best = i;
        }
    }
    return best;
}

}  // namespace palette

/*---------------------------------- vocab -----------------------------------*/

Vocab::Vocab() {
    words_ = {"<pad>", "<bos>"};
    for (auto* w : palette::fg_names)
        words_.push_back(w);
    for (auto* w : palette::bg_names)
        words_.push_back(w);
    for (auto* w : {"circle", "square", "triangle", "moving", "on", "background",
                    "empty", "scene", "still", "right", "upright", "up", "upleft",
                    "left", "downleft", "down", "downright"})
        words_.push_back(w);
}

const Vocab& Vocab::fixed() {
    static Vocab v;
    return v;
}

int Vocab::id(const std::string& word) const {
    for (size_t i = 0; i < words_.size(); i++)
        if (words_[i] == word)
            return (int)i;
    throw DataError("word not in vocabulary: " + word);
}

const std::string& Vocab::word(int id) const {
    if (id < 0 || id >= (int)words_.size())
        throw DataError("token id out of range: " + std::to_string(id));
    return words_[id];
}

bool Vocab::is_palette_word(int id) const {
    return id >= 2 && id < 2 + palette::num_fg + palette::num_bg;
}

std::string Vocab::decode(const std::vector<uint16_t>& ids) const {
    std::string out;
    for (uint16_t id : ids) {
        if (id == pad() || id == bos())
            continue;
        if (!out.empty())
            out += ' ';
        out += word(id);
    }
    return out;
}

std::vector<uint16_t> mask_palette_words(const std::vector<uint16_t>& caption) {
    const Vocab& v = Vocab::fixed();
    std::vector<uint16_t> out(caption);
    for (auto& id : out)
        if (v.is_palette_word(id))
            id = (uint16_t)v.pad();
    return out;
}

/*--------------------------------- geometry ---------------------------------*/

int direction_bucket(float vx, float vy) {
    double speed = std::sqrt((double)vx * vx + (double)vy * vy);
    if (speed < 0.25)
        return 8;
    // image coords: +x right, +y down; "up" is -y
    double ang = std::atan2(-(double)vy, (double)vx);  // [-pi, pi]
    double sec = ang / (3.14159265358979323846 / 4.0); // eighths
    int b      = (int)std::lround(sec);
    return ((b % 8) + 8) % 8;  // 0=right,1=upright,2=up,...,7=downright
}

namespace {

const char* direction_word(int bucket) {
    static const char* names[] = {"right", "upright", "up", "upleft",
                                  "left", "downleft", "down", "downright", "still"};
    return names[bucket];
}

struct ShapePos {
    float cx, cy;
};

ShapePos shape_pos(const SceneSpec& scene, const ShapeSpec& s, int t) {
    float dt = (float)(t - s.spawn_frame);
    return {s.x0 + (s.vx + scene.pan_x) * dt, s.y0 + (s.vy + scene.pan_y) * dt};
}

bool point_in_shape(const ShapeSpec& s, float cx, float cy, float px, float py) {
    float dx = px - cx, dy = py - cy;
    switch (s.kind) {
        case ShapeKind::circle:
            return dx * dx + dy * dy <= s.radius * s.radius;
        case ShapeKind::square:
            return std::fabs(dx) <= s.radius && std::fabs(dy) <= s.radius;
        case ShapeKind::triangle: {
            // equilateral, apex up, circumradius = radius
            const float sin60 = 0.86602540378443864676f;
            float ax = cx, ay = cy - s.radius;
            float bx = cx - s.radius * sin60, by = cy + 0.5f * s.radius;
            float gx = cx + s.radius * sin60, gy = cy + 0.5f * s.radius;
            auto side = [&](float x1, float y1, float x2, float y2) {
                return (x2 - x1) * (py - y1) - (y2 - y1) * (px - x1);
            };
            float d1 = side(ax, ay, bx, by);
            float d2 = side(bx, by, gx, gy);
            float d3 = side(gx, gy, ax, ay);
            bool neg = (d1 < 0) || (d2 < 0) || (d3 < 0);
            bool pos = (d1 > 0) || (d2 > 0) || (d3 > 0);
            return !(neg && pos);
        }
    }
    return false;
}

// 4x4 supersampled coverage of pixel (x,y) by one shape.
float shape_coverage(const SceneSpec& scene, const ShapeSpec& s, int t, int x, int y) {
    if (t < s.spawn_frame)
        return 0.0f;
    ShapePos p = shape_pos(scene, s, t);
    // cheap reject: pixel farther than radius+1 from centroid
    float dx = (float)x + 0.5f - p.cx, dy = (float)y + 0.5f - p.cy;
    float rr = s.radius + 1.5f;
    if (dx * dx + dy * dy > rr * rr)
        return 0.0f;
    int hits = 0;
    for (int sy = 0; sy < 4; sy++)
        for (int sx = 0; sx < 4; sx++) {
            float px = (float)x + ((float)sx + 0.5f) / 4.0f;
            float py = (float)y + ((float)sy + 0.5f) / 4.0f;
            if (point_in_shape(s, p.cx, p.cy, px, py))
                hits++;
        }
    return (float)hits / 16.0f;
}

}  // namespace

float scene_coverage(const SceneSpec& scene, int t, int x, int y) {
    float c = 0.0f;
    for (const auto& s : scene.shapes)
        c = std::max(c, shape_coverage(scene, s, t, x, y));
    return c;
}

std::vector<uint8_t> background_mask(const SceneSpec& scene, int T, int H, int W) {
    std::vector<uint8_t> mask((size_t)H * W, 1);
    for (int t = 0; t < T; t++)
        for (int y = 0; y < H; y++)
            for (int x = 0; x < W; x++)
                if (mask[(size_t)y * W + x] && scene_coverage(scene, t, x, y) > 0.0f)
                    mask[(size_t)y * W + x] = 0;
    return mask;
}

std::vector<uint8_t> foreground_mask(const SceneSpec& scene, int t, int H, int W) {
    std::vector<uint8_t> mask((size_t)H * W, 0);
    for (int y = 0; y < H; y++)
        for (int x = 0; x < W; x++)
            if (scene_coverage(scene, t, x, y) >= 1.0f)
                mask[(size_t)y * W + x] = 1;
    return mask;
}

/*----------------------------------- xdog -----------------------------------*/

std::vector<float> gaussian_kernel(float sigma) {
    if (!(sigma > 0))
        throw std::invalid_argument("gaussian_kernel: sigma must be > 0");
    int radius = (int)std::ceil(3.0f * sigma);
    std::vector<float> k(2 * radius + 1);
    double sum = 0;
    for (int i = -radius; i <= radius; i++) {
        double v      = std::exp(-0.5 * (double)i * i / ((double)sigma * sigma));
        k[i + radius] = (float)v;
        sum += v;
    }
    for (auto& v : k)
        v = (float)(v / sum);
    return k;
}

namespace {

inline int reflect_index(int i, int n) {
    while (i < 0 || i >= n) {
        if (i < 0)
            i = -i;
        if (i >= n)
            i = 2 * n - 2 - i;
    }
    return i;
}

// separable blur with reflected borders
std::vector<float> blur(const std::vector<float>& in, int H, int W, const std::vector<float>& kernel) {
    int radius = ((int)kernel.size() - 1) / 2;
    std::vector<float> tmp((size_t)H * W), out((size_t)H * W);
    for (int y = 0; y < H; y++)
        for (int x = 0; x < W; x++) {
            double acc = 0;
            for (int i = -radius; i <= radius; i++)
                acc += (double)kernel[i + radius] * in[(size_t)y * W + reflect_index(x + i, W)];
            tmp[(size_t)y * W + x] = (float)acc;
        }
    for (int y = 0; y < H; y++)
        for (int x = 0; x < W; x++) {
            double acc = 0;
            for (int i = -radius; i <= radius; i++)
                acc += (double)kernel[i + radius] * tmp[(size_t)reflect_index(y + i, H) * W + x];
            out[(size_t)y * W + x] = (float)acc;
        }
    return out;
}

}  // namespace

std::vector<float> xdog(const std::vector<float>& gray, int H, int W, const XdogParams& params) {
    if ((size_t)H * W != gray.size())
        throw std::invalid_argument("xdog: H*W does not match input size");
    if (!(params.sigma > 0))
        throw std::invalid_argument("xdog: sigma must be > 0");
    if (!(params.k > 1))
        throw std::invalid_argument("xdog: k must be > 1");
    for (float v : gray)
        if (!std::isfinite(v))
            throw std::invalid_argument("xdog: non-finite input pixel");

    auto g1 = blur(gray, H, W, gaussian_kernel(params.sigma));
    auto g2 = blur(gray, H, W, gaussian_kernel(params.k * params.sigma));
    std::vector<float> out((size_t)H * W);
    for (size_t i = 0; i < out.size(); i++) {
        float s = (1.0f + params.p) * g1[i] - params.p * g2[i];
        if (params.binary)
            out[i] = s < params.epsilon ? 0.0f : 1.0f;
        else
            out[i] = std::min(1.0f, std::max(0.0f, s));
    }
    return out;
}

std::vector<float> luminance(const uint8_t* rgb, int H, int W) {
    std::vector<float> out((size_t)H * W);
    for (size_t i = 0; i < out.size(); i++) {
        const uint8_t* p = rgb + i * 3;
        out[i] = (0.299f * p[0] + 0.587f * p[1] + 0.114f * p[2]) / 255.0f;
    }
    return out;
}

/*--------------------------------- captions ----------------------------------*/

std::vector<uint16_t> caption_of(const SceneSpec& scene, const Vocab& vocab, int max_len) {
    std::vector<std::string> words;
    if (scene.shapes.empty()) {
        words = {"empty", palette::bg_names[scene.background], "background", "scene"};
    } else {
        // largest radius first; ties keep the earlier shape
        const ShapeSpec* lead = &scene.shapes[0];
        for (const auto& s : scene.shapes)
            if (s.radius > lead->radius)
                lead = &s;
        int dir = direction_bucket(lead->vx + scene.pan_x, lead->vy + scene.pan_y);
        words.push_back(palette::fg_names[lead->color]);
        static const char* kind_names[] = {"circle", "square", "triangle"};
        words.push_back(kind_names[(int)lead->kind]);
        if (dir == 8) {
            words.push_back("still");
        } else {
            words.push_back("moving");
            words.push_back(direction_word(dir));
        }
        words.push_back("on");
        words.push_back(palette::bg_names[scene.background]);
        words.push_back("background");
    }
    std::vector<uint16_t> ids;
    ids.push_back((uint16_t)vocab.bos());
    for (const auto& w : words)
        ids.push_back((uint16_t)vocab.id(w));
    if ((int)ids.size() > max_len)
        ids.resize(max_len);
    while ((int)ids.size() < max_len)
        ids.push_back((uint16_t)vocab.pad());
    return ids;
}

/*--------------------------------- generator ---------------------------------*/

namespace {

// Held-out (color, shape, direction) combinations for the test split.
bool is_test_combo(int color, int kind, int dir) {
    uint64_t h = splitmix_fin(0x434F4D424FULL ^ (uint64_t)(color * 27 + kind * 9 + dir));
    return h % 4 == 0;
}

}  // namespace

SceneSpec scene_of(uint64_t seed, const GeneratorConfig& cfg, const std::string& split) {
    if (cfg.frames < 2)
        throw DataError("generator: frames must be >= 2");
    if (cfg.height < 16 || cfg.width < 16)
        throw DataError("generator: height and width must be >= 16");
    if (split != "train" && split != "test")
        throw DataError("generator: unknown split " + split);

    RngStream rng(seed, "scene");
    SceneSpec scene;
    scene.seed       = seed;
    scene.background = (int)rng.next_below(palette::num_bg);
    scene.pan_x      = (float)rng.next_uniform(-cfg.pan_max, cfg.pan_max);
    scene.pan_y      = (float)rng.next_uniform(-cfg.pan_max, cfg.pan_max);

    int n = cfg.min_shapes + (cfg.max_shapes > cfg.min_shapes
                                  ? (int)rng.next_below((uint32_t)(cfg.max_shapes - cfg.min_shapes + 1))
                                  : 0);
    bool want_test = split == "test";
    for (int i = 0; i < n; i++) {
        for (int attempt = 0;; attempt++) {
            if (attempt > 256)
                throw DataError("generator: could not satisfy split combo constraint");
            ShapeSpec s;
            s.kind        = (ShapeKind)rng.next_below(3);
            s.color       = (int)rng.next_below(palette::num_fg);
            s.radius      = (float)rng.next_uniform(cfg.min_radius, cfg.max_radius);
            s.spawn_frame = 0;
            if (i > 0 && rng.next_unit() < cfg.spawn_prob && cfg.frames >= 5)
                s.spawn_frame = 2 + (int)rng.next_below((uint32_t)(cfg.frames - 3));
            float margin = s.radius + 2.0f;
            float x_lo = margin, x_hi = (float)cfg.width - 1.0f - margin;
            float y_lo = margin, y_hi = (float)cfg.height - 1.0f - margin;
            if (x_lo >= x_hi || y_lo >= y_hi)
                throw DataError("generator: shapes too large for the frame");
            s.x0 = (float)rng.next_uniform(x_lo, x_hi);
            s.y0 = (float)rng.next_uniform(y_lo, y_hi);
            // clamp the effective velocity so the centroid stays inside
            // [lo,hi] at both motion endpoints (linear => whole clip)
            float dur = (float)(cfg.frames - 1 - s.spawn_frame);
            float vex = (float)rng.next_uniform(-cfg.max_speed, cfg.max_speed) + scene.pan_x;
            float vey = (float)rng.next_uniform(-cfg.max_speed, cfg.max_speed) + scene.pan_y;
            if (dur > 0) {
                vex = std::min(std::max(vex, (x_lo - s.x0) / dur), (x_hi - s.x0) / dur);
                vey = std::min(std::max(vey, (y_lo - s.y0) / dur), (y_hi - s.y0) / dur);
            }
            s.vx = vex - scene.pan_x;
            s.vy = vey - scene.pan_y;
            int dir = direction_bucket(vex, vey);
            if (is_test_combo(s.color, (int)s.kind, dir) == want_test) {
                scene.shapes.push_back(s);
                break;
            }
        }
    }
    return scene;
}

VideoClip gen_clip(uint64_t seed, const GeneratorConfig& cfg, const std::string& split) {
    VideoClip clip;
    clip.seed  = seed;
    clip.split = split;
    clip.scene = scene_of(seed, cfg, split);
    clip.T     = cfg.frames;
    clip.H     = cfg.height;
    clip.W     = cfg.width;
    clip.frames.resize((size_t)clip.T * clip.H * clip.W * 3);
    clip.sketches.resize((size_t)clip.T * clip.H * clip.W);

    Rgb bg = palette::bg[clip.scene.background];
    for (int t = 0; t < clip.T; t++) {
        uint8_t* fr = clip.frames.data() + (size_t)t * clip.H * clip.W * 3;
        for (int y = 0; y < clip.H; y++)
            for (int x = 0; x < clip.W; x++) {
                float r = bg.r, g = bg.g, b = bg.b;
                for (const auto& s : clip.scene.shapes) {
                    float c = shape_coverage(clip.scene, s, t, x, y);
                    if (c > 0.0f) {
                        Rgb sc = palette::fg[s.color];
                        r      = r * (1.0f - c) + sc.r * c;
                        g      = g * (1.0f - c) + sc.g * c;
                        b      = b * (1.0f - c) + sc.b * c;
                    }
                }
                uint8_t* px = fr + ((size_t)y * clip.W + x) * 3;
                px[0]       = (uint8_t)std::lround(r);
                px[1]       = (uint8_t)std::lround(g);
                px[2]       = (uint8_t)std::lround(b);
            }
        auto sk = xdog(luminance(fr, clip.H, clip.W), clip.H, clip.W, cfg.xdog);
        uint8_t* sp = clip.sketches.data() + (size_t)t * clip.H * clip.W;
        for (size_t i = 0; i < sk.size(); i++)
            sp[i] = (uint8_t)std::lround(sk[i] * 255.0f);
    }

    clip.caption = caption_of(clip.scene, Vocab::fixed(), cfg.caption_len);
    if (split == "test") {
        clip.reference_index = 0;
    } else {
        RngStream ref_rng(seed, "ref");
        clip.reference_index = ref_rng.next_below((uint32_t)clip.T);
    }
    return clip;
}

/*----------------------------------- shards ----------------------------------*/

static constexpr uint32_t kShardMagic   = 0x504C4341;  // "ACLP" little-endian
static constexpr uint32_t kShardVersion = 1;

void write_shard(const std::string& shard_path, const std::string& manifest_path, const Dataset& ds) {
    std::vector<uint64_t> offsets;
    write_file_atomic(shard_path, [&](std::ostream& os) {
        put_u32(os, kShardMagic);
        put_u32(os, kShardVersion);
        put_u32(os, (uint32_t)ds.clips.size());
        for (const auto& c : ds.clips) {
            offsets.push_back((uint64_t)os.tellp());
            put_u32(os, (uint32_t)c.T);
            put_u32(os, (uint32_t)c.H);
            put_u32(os, (uint32_t)c.W);
            os.write((const char*)c.frames.data(), (std::streamsize)c.frames.size());
            os.write((const char*)c.sketches.data(), (std::streamsize)c.sketches.size());
            put_u32(os, c.reference_index);
            put_u32(os, (uint32_t)c.caption.size());
            for (uint16_t id : c.caption)
                put_u16(os, id);
        }
    });
    write_file_atomic(manifest_path, [&](std::ostream& os) {
        for (size_t i = 0; i < ds.clips.size(); i++)
            os << offsets[i] << "\t" << ds.clips[i].seed << "\t" << ds.clips[i].split << "\n";
    });
}

Dataset read_shard(const std::string& shard_path, const std::string& manifest_path, const GeneratorConfig& cfg) {
    auto is = open_input(shard_path);
    if (get_u32(is) != kShardMagic)
        throw DataError("bad shard magic: " + shard_path);
    if (get_u32(is) != kShardVersion)
        throw DataError("unsupported shard version: " + shard_path);
    uint32_t count = get_u32(is);

    std::vector<uint64_t> seeds;
    std::vector<std::string> splits;
    {
        auto ms = open_input(manifest_path);
        std::string line;
        while (std::getline(ms, line)) {
            if (line.empty())
                continue;
            std::istringstream ss(line);
            uint64_t off, seed;
            std::string split;
            if (!(ss >> off >> seed >> split))
                throw DataError("bad manifest line: " + line);
            seeds.push_back(seed);
            splits.push_back(split);
        }
    }
    if (seeds.size() != count)
        throw DataError("manifest/shard clip count mismatch");

    Dataset ds;
    ds.cfg = cfg;
    for (uint32_t i = 0; i < count; i++) {
        VideoClip c;
        c.T = (int)get_u32(is);
        c.H = (int)get_u32(is);
        c.W = (int)get_u32(is);
        if (c.T <= 0 || c.H <= 0 || c.W <= 0)
            throw DataError("corrupt shard record");
        c.frames.resize((size_t)c.T * c.H * c.W * 3);
        is.read((char*)c.frames.data(), (std::streamsize)c.frames.size());
        c.sketches.resize((size_t)c.T * c.H * c.W);
        is.read((char*)c.sketches.data(), (std::streamsize)c.sketches.size());
        c.reference_index = get_u32(is);
        uint32_t cap_len  = get_u32(is);
        c.caption.resize(cap_len);
        for (auto& id : c.caption)
            id = get_u16(is);
        if (!is)
            throw DataError("truncated shard: " + shard_path);
        c.seed  = seeds[i];
        c.split = splits[i];
        c.scene = scene_of(c.seed, cfg, c.split);
        ds.clips.push_back(std::move(c));
    }
    return ds;
}

Dataset make_dataset(uint64_t seed, const GeneratorConfig& cfg, int train_clips, int test_clips) {
    Dataset ds;
    ds.cfg = cfg;
    RngStream seeds(seed, "dataset");
    for (int i = 0; i < train_clips; i++)
        ds.clips.push_back(gen_clip(seeds.next_u64(), cfg, "train"));
    for (int i = 0; i < test_clips; i++)
        ds.clips.push_back(gen_clip(seeds.next_u64(), cfg, "test"));
    return ds;
}

}  // namespace refcolor
