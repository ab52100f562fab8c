#include <cmath>
#include <filesystem>
#include <set>

#include "doctest.h"
#include "refcolor/synthgen.hpp"

using namespace refcolor;

namespace {

// direct 2-D convolution oracle for the extended difference-of-Gaussians
std::vector<float> xdog_oracle(const std::vector<float>& gray, int H, int W, const XdogParams& p) {
    auto refl = [](int i, int n) {
        while (i < 0 || i >= n) {
            if (i < 0)
                i = -i;
            if (i >= n)
                i = 2 * n - 2 - i;
        }
        return i;
    };
    auto blur2d = [&](float sigma) {
        auto k     = gaussian_kernel(sigma);
        int radius = ((int)k.size() - 1) / 2;
        std::vector<float> out((size_t)H * W);
        for (int y = 0; y < H; y++)
            for (int x = 0; x < W; x++) {
                double acc = 0;
                for (int dy = -radius; dy <= radius; dy++)
                    for (int dx = -radius; dx <= radius; dx++)
                        acc += (double)k[dy + radius] * k[dx + radius] *
                               gray[(size_t)refl(y + dy, H) * W + refl(x + dx, W)];
                out[(size_t)y * W + x] = (float)acc;
            }
        return out;
    };
    auto g1 = blur2d(p.sigma);
    auto g2 = blur2d(p.k * p.sigma);
    std::vector<float> out((size_t)H * W);
    for (size_t i = 0; i < out.size(); i++) {
        float s = (1.0f + p.p) * g1[i] - p.p * g2[i];
        out[i]  = p.binary ? (s < p.epsilon ? 0.0f : 1.0f) : std::min(1.0f, std::max(0.0f, s));
    }
    return out;
}

}  // namespace

TEST_CASE("gaussian kernel sums to one and radius follows sigma") {
    auto k = gaussian_kernel(1.0f);
    CHECK(k.size() == 7);  // radius 3
    double sum = 0;
    for (float v : k)
        sum += v;
    CHECK(std::fabs(sum - 1.0) < 1e-12);
}

TEST_CASE("xdog preserves constants") {
    XdogParams p;
    SUBCASE("above threshold -> all blank") {
        auto out = xdog(std::vector<float>(32 * 32, 0.8f), 32, 32, p);
        for (float v : out)
            CHECK(v == 1.0f);
    }
    SUBCASE("below threshold -> all line") {
        auto out = xdog(std::vector<float>(32 * 32, 0.2f), 32, 32, p);
        for (float v : out)
            CHECK(v == 0.0f);
    }
    SUBCASE("continuous mode returns the constant") {
        XdogParams pc = p;
        pc.binary     = false;
        auto out      = xdog(std::vector<float>(32 * 32, 0.4f), 32, 32, pc);
        for (float v : out)
            CHECK(v == doctest::Approx(0.4f).epsilon(1e-9));
    }
}

TEST_CASE("xdog on a vertical step edge marks lines near the edge only") {
    XdogParams p;  // sigma 1, k 1.6, p 20, eps 0.5
    int H = 32, W = 32;
    std::vector<float> img((size_t)H * W);
    for (int y = 0; y < H; y++)
        for (int x = 0; x < W; x++)
            img[(size_t)y * W + x] = x < 16 ? 0.0f : 1.0f;
    auto got    = xdog(img, H, W, p);
    auto oracle = xdog_oracle(img, H, W, p);
    for (size_t i = 0; i < got.size(); i++)
        CHECK(got[i] == oracle[i]);
    bool any_line = false;
    for (int y = 0; y < H; y++)
        for (int x = 0; x < W; x++) {
            bool line = got[(size_t)y * W + x] == 0.0f;
            any_line  = any_line || line;
            if (line)
                CHECK(std::abs(x - 16) <= 3);
        }
    CHECK(any_line);
}

TEST_CASE("xdog validates inputs") {
    XdogParams p;
    CHECK_THROWS_AS(xdog(std::vector<float>(16, std::nanf("")), 4, 4, p), std::invalid_argument);
    XdogParams bad = p;
    bad.k          = 0.5f;
    CHECK_THROWS_AS(xdog(std::vector<float>(16, 0.5f), 4, 4, bad), std::invalid_argument);
    bad   = p;
    bad.sigma = 0.0f;
    CHECK_THROWS_AS(xdog(std::vector<float>(16, 0.5f), 4, 4, bad), std::invalid_argument);
}

TEST_CASE("gen_clip is byte-deterministic in seed and config") {
    GeneratorConfig cfg;
    auto a = gen_clip(7, cfg, "train");
    auto b = gen_clip(7, cfg, "train");
    CHECK(a.frames == b.frames);
    CHECK(a.sketches == b.sketches);
    CHECK(a.caption == b.caption);
    CHECK(a.reference_index == b.reference_index);
    auto c = gen_clip(8, cfg, "train");
    CHECK(a.frames != c.frames);
}

TEST_CASE("zero-shape clips render pure background with blank sketches") {
    GeneratorConfig cfg;
    cfg.min_shapes = 0;
    cfg.max_shapes = 0;
    auto clip      = gen_clip(3, cfg, "train");
    for (uint8_t s : clip.sketches)
        CHECK(s == 255);
    Rgb bg = palette::bg[clip.scene.background];
    for (size_t i = 0; i < clip.frames.size(); i += 3) {
        CHECK(clip.frames[i] == bg.r);
        CHECK(clip.frames[i + 1] == bg.g);
        CHECK(clip.frames[i + 2] == bg.b);
    }
    CHECK(Vocab::fixed().decode(clip.caption) ==
          std::string("empty ") + palette::bg_names[clip.scene.background] + " background scene");
}

TEST_CASE("spawned shapes are absent before their spawn frame") {
    GeneratorConfig cfg;
    cfg.min_shapes = 2;
    cfg.max_shapes = 3;
    cfg.spawn_prob = 1.0f;
    // find a seed whose clip actually has a spawned shape
    for (uint64_t seed = 1; seed < 50; seed++) {
        auto clip = gen_clip(seed, cfg, "train");
        int spawn = 0;
        const ShapeSpec* spawned = nullptr;
        for (auto& s : clip.scene.shapes)
            if (s.spawn_frame > 0) {
                spawn   = s.spawn_frame;
                spawned = &s;
            }
        if (!spawned)
            continue;
        SceneSpec only = clip.scene;
        only.shapes    = {*spawned};
        for (int t = 0; t < clip.T; t++) {
            bool covered = false;
            for (int y = 0; y < clip.H && !covered; y++)
                for (int x = 0; x < clip.W && !covered; x++)
                    covered = scene_coverage(only, t, x, y) > 0;
            if (t < spawn)
                CHECK_FALSE(covered);
            else
                CHECK(covered);
        }
        return;
    }
    FAIL("no spawned shape found in 50 seeds");
}

TEST_CASE("stored sketches reproduce bit-exactly from stored frames") {
    GeneratorConfig cfg;
    auto clip = gen_clip(99, cfg, "train");
    for (int t = 0; t < clip.T; t++) {
        auto sk = xdog(luminance(clip.frames.data() + (size_t)t * clip.H * clip.W * 3, clip.H, clip.W),
                       clip.H, clip.W, cfg.xdog);
        for (size_t i = 0; i < sk.size(); i++)
            CHECK((uint8_t)std::lround(sk[i] * 255.0f) ==
                  clip.sketches[(size_t)t * clip.H * clip.W + i]);
    }
}

TEST_CASE("every clip's shapes have sketch support and stay inside the frame") {
    GeneratorConfig cfg;
    RngStream seeds(5, "seeds");
    for (int n = 0; n < 12; n++) {
        auto clip = gen_clip(seeds.next_u64(), cfg, n % 2 ? "test" : "train");
        for (auto& s : clip.scene.shapes)
            for (int t = s.spawn_frame; t < clip.T; t++) {
                float dt = (float)(t - s.spawn_frame);
                float cx = s.x0 + (s.vx + clip.scene.pan_x) * dt;
                float cy = s.y0 + (s.vy + clip.scene.pan_y) * dt;
                CHECK(cx >= 0.0f);
                CHECK(cx <= (float)clip.W - 1);
                CHECK(cy >= 0.0f);
                CHECK(cy <= (float)clip.H - 1);
            }
        // shapes produce lines: at least some line pixels whenever a shape shows
        if (!clip.scene.shapes.empty() && clip.scene.shapes[0].spawn_frame == 0) {
            size_t lines = 0;
            for (int i = 0; i < clip.H * clip.W; i++)
                lines += clip.sketches[i] == 0;
            CHECK(lines > 8);
        }
    }
}

TEST_CASE("caption templates follow the spec wording") {
    GeneratorConfig cfg;
    SceneSpec scene;
    scene.background = 0;
    ShapeSpec s{};
    s.kind   = ShapeKind::circle;
    s.color  = 0;  // red
    s.vx     = 1.0f;
    s.vy     = 0.0f;
    s.radius = 5.0f;
    scene.shapes.push_back(s);
    auto ids = caption_of(scene, Vocab::fixed(), 12);
    CHECK((int)ids.size() == 12);
    CHECK(Vocab::fixed().decode(ids) == "red circle moving right on white background");

    // largest radius wins the clause
    ShapeSpec s2 = s;
    s2.kind      = ShapeKind::square;
    s2.color     = 2;  // blue
    s2.radius    = 6.5f;
    s2.vx        = 0.0f;
    s2.vy        = -1.0f;
    scene.shapes.push_back(s2);
    CHECK(Vocab::fixed().decode(caption_of(scene, Vocab::fixed(), 12)) ==
          "blue square moving up on white background");

    // still shapes drop the direction clause
    scene.shapes.resize(1);
    scene.shapes[0].vx = 0.05f;
    scene.shapes[0].vy = 0.0f;
    CHECK(Vocab::fixed().decode(caption_of(scene, Vocab::fixed(), 12)) ==
          "red circle still on white background");
}

TEST_CASE("palette word masking keeps structure words") {
    GeneratorConfig cfg;
    auto clip   = gen_clip(17, cfg, "train");
    auto masked = mask_palette_words(clip.caption);
    const Vocab& v = Vocab::fixed();
    for (size_t i = 0; i < masked.size(); i++) {
        CHECK_FALSE(v.is_palette_word(masked[i]));
        if (!v.is_palette_word(clip.caption[i]))
            CHECK(masked[i] == clip.caption[i]);
    }
}

TEST_CASE("train and test splits use disjoint shape combinations") {
    GeneratorConfig cfg;
    auto combo = [&](const SceneSpec& scene, const ShapeSpec& s) {
        int dir = direction_bucket(s.vx + scene.pan_x, s.vy + scene.pan_y);
        return s.color * 27 + (int)s.kind * 9 + dir;
    };
    std::set<int> train_combos, test_combos;
    RngStream seeds(5, "seeds");
    for (int i = 0; i < 40; i++) {
        auto tr = gen_clip(seeds.next_u64(), cfg, "train");
        for (auto& s : tr.scene.shapes)
            train_combos.insert(combo(tr.scene, s));
        auto te = gen_clip(seeds.next_u64(), cfg, "test");
        for (auto& s : te.scene.shapes)
            test_combos.insert(combo(te.scene, s));
    }
    for (int c : test_combos)
        CHECK(train_combos.count(c) == 0);
}

TEST_CASE("generator rejects degenerate configs") {
    GeneratorConfig cfg;
    cfg.frames = 1;
    CHECK_THROWS_AS(gen_clip(1, cfg, "train"), DataError);
    cfg        = GeneratorConfig{};
    cfg.height = 8;
    CHECK_THROWS_AS(gen_clip(1, cfg, "train"), DataError);
}

TEST_CASE("shard files round-trip through write and read") {
    GeneratorConfig cfg;
    auto ds  = make_dataset(123, cfg, 3, 2);
    auto dir = std::filesystem::temp_directory_path() / "refcolor-shard-test";
    std::filesystem::create_directories(dir);
    auto shard    = (dir / "data.aclp").string();
    auto manifest = (dir / "manifest.tsv").string();
    write_shard(shard, manifest, ds);
    auto back = read_shard(shard, manifest, cfg);
    REQUIRE(back.clips.size() == ds.clips.size());
    for (size_t i = 0; i < ds.clips.size(); i++) {
        CHECK(back.clips[i].frames == ds.clips[i].frames);
        CHECK(back.clips[i].sketches == ds.clips[i].sketches);
        CHECK(back.clips[i].caption == ds.clips[i].caption);
        CHECK(back.clips[i].reference_index == ds.clips[i].reference_index);
        CHECK(back.clips[i].seed == ds.clips[i].seed);
        CHECK(back.clips[i].split == ds.clips[i].split);
    }
    CHECK(split_test_marker(back) == 2);
    std::filesystem::remove_all(dir);
}

TEST_CASE("test clips reference the first frame, train clips any frame") {
    GeneratorConfig cfg;
    auto ds = make_dataset(9, cfg, 16, 8);
    bool any_nonzero = false;
    for (auto& c : ds.clips) {
        if (c.split == "test")
            CHECK(c.reference_index == 0);
        else
            any_nonzero = any_nonzero || c.reference_index != 0;
        CHECK(c.reference_index < (uint32_t)c.T);
    }
    CHECK(any_nonzero);
}
