#include "refcolor/config.hpp"

#include <charconv>
#include <functional>
#include <iomanip>
#include <sstream>
#include <vector>

#include "refcolor/io.hpp"

namespace refcolor {

namespace {

struct Key {
    std::string name;
    std::function<std::string(const RunConfig&)> get;
    std::function<void(RunConfig&, const std::string&)> set;
};

std::string fmt_double(double v) {
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
}

uint64_t parse_u64(const std::string& s) {
    uint64_t v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size())
        throw DataError("config: bad unsigned integer: " + s);
    return v;
}

int parse_int(const std::string& s) {
    int v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size())
        throw DataError("config: bad integer: " + s);
    return v;
}

double parse_double(const std::string& s) {
    try {
        size_t pos = 0;
        double v   = std::stod(s, &pos);
        if (pos != s.size())
            throw DataError("config: bad number: " + s);
        return v;
    } catch (const std::exception&) {
        throw DataError("config: bad number: " + s);
    }
}

bool parse_bool(const std::string& s) {
    if (s == "true" || s == "1")
        return true;
    if (s == "false" || s == "0")
        return false;
    throw DataError("config: bad bool: " + s);
}

#define KEY_U64(key, field) \
    {key, [](const RunConfig& c) { return std::to_string(c.field); }, \
     [](RunConfig& c, const std::string& s) { c.field = parse_u64(s); }}
#define KEY_INT(key, field) \
    {key, [](const RunConfig& c) { return std::to_string(c.field); }, \
     [](RunConfig& c, const std::string& s) { c.field = parse_int(s); }}
#define KEY_DBL(key, field) \
    {key, [](const RunConfig& c) { return fmt_double(c.field); }, \
     [](RunConfig& c, const std::string& s) { c.field = parse_double(s); }}
#define KEY_FLT(key, field) \
    {key, [](const RunConfig& c) { return fmt_double((double)c.field); }, \
     [](RunConfig& c, const std::string& s) { c.field = (float)parse_double(s); }}
#define KEY_BOOL(key, field) \
    {key, [](const RunConfig& c) { return c.field ? "true" : "false"; }, \
     [](RunConfig& c, const std::string& s) { c.field = parse_bool(s); }}

const std::vector<Key>& key_table() {
    static const std::vector<Key> keys = {
        KEY_U64("seed", seed),
        KEY_INT("data.train_clips", train_clips),
        KEY_INT("data.test_clips", test_clips),
        KEY_INT("data.frames", gen.frames),
        KEY_INT("data.height", gen.height),
        KEY_INT("data.width", gen.width),
        KEY_INT("data.min_shapes", gen.min_shapes),
        KEY_INT("data.max_shapes", gen.max_shapes),
        KEY_FLT("data.min_radius", gen.min_radius),
        KEY_FLT("data.max_radius", gen.max_radius),
        KEY_FLT("data.max_speed", gen.max_speed),
        KEY_FLT("data.pan_max", gen.pan_max),
        KEY_FLT("data.spawn_prob", gen.spawn_prob),
        KEY_FLT("xdog.sigma", gen.xdog.sigma),
        KEY_FLT("xdog.k", gen.xdog.k),
        KEY_FLT("xdog.p", gen.xdog.p),
        KEY_FLT("xdog.epsilon", gen.xdog.epsilon),
        KEY_BOOL("xdog.binary", gen.xdog.binary),
        KEY_INT("model.dim", model.dim),
        KEY_INT("model.blocks", model.blocks),
        KEY_INT("model.heads", model.heads),
        KEY_INT("model.text_len", model.text_len),
        KEY_INT("model.patch", model.patch),
        KEY_INT("model.color_tokens", model.color_tokens),
        KEY_INT("model.qformer_depth", model.qformer_depth),
        KEY_INT("model.enc_dim", model.enc_dim),
        KEY_INT("model.mlp_ratio", model.mlp_ratio),
        KEY_INT("sched.steps", sched_steps),
        KEY_DBL("sched.beta_min", beta_min),
        KEY_DBL("sched.beta_max", beta_max),
        KEY_INT("sample.steps", sample_steps),
        KEY_INT("stage1.iters", stage[0].iters),
        KEY_INT("stage1.batch", stage[0].batch),
        KEY_DBL("stage1.lr", stage[0].lr),
        KEY_INT("stage2.iters", stage[1].iters),
        KEY_INT("stage2.batch", stage[1].batch),
        KEY_DBL("stage2.lr", stage[1].lr),
        KEY_INT("stage3.iters", stage[2].iters),
        KEY_INT("stage3.batch", stage[2].batch),
        KEY_DBL("stage3.lr", stage[2].lr),
        KEY_INT("stage4.iters", stage[3].iters),
        KEY_INT("stage4.batch", stage[3].batch),
        KEY_DBL("stage4.lr", stage[3].lr),
        KEY_DBL("train.caption_dropout", caption_dropout),
        KEY_INT("eval.clips", eval_clips),
        KEY_INT("eval.scenario_pairs", scenario_pairs),
    };
    return keys;
}

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos)
        return "";
    size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

}  // namespace

RunConfig RunConfig::parse(const std::string& text) {
    RunConfig cfg;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        lineno++;
        auto hash = line.find('#');
        if (hash != std::string::npos)
            line = line.substr(0, hash);
        line = trim(line);
        if (line.empty())
            continue;
        auto eq = line.find('=');
        if (eq == std::string::npos)
            throw DataError("config line " + std::to_string(lineno) + ": expected key = value");
        std::string key = trim(line.substr(0, eq));
        std::string val = trim(line.substr(eq + 1));
        bool found      = false;
        for (const auto& k : key_table())
            if (k.name == key) {
                k.set(cfg, val);
                found = true;
                break;
            }
        if (!found)
            throw DataError("config line " + std::to_string(lineno) + ": unknown key: " + key);
    }
    cfg.finalize();
    return cfg;
}

RunConfig RunConfig::parse_file(const std::string& path) {
    auto is = open_input(path);
    std::stringstream ss;
    ss << is.rdbuf();
    return parse(ss.str());
}

std::string RunConfig::emit() const {
    std::ostringstream os;
    for (const auto& k : key_table())
        os << k.name << " = " << k.get(*this) << "\n";
    return os.str();
}

void RunConfig::finalize() {
    model.frames = gen.frames;
    model.height = gen.height;
    model.width  = gen.width;
    model.text_len = std::max(model.text_len, 1);
    gen.caption_len = model.text_len;
    model.validate();
    if (train_clips < 1 || test_clips < 0)
        throw DataError("config: clip counts must be positive");
    if (sample_steps < 1 || sched_steps % sample_steps)
        throw DataError("config: sample.steps must evenly divide sched.steps");
    for (auto& s : stage)
        if (s.iters < 0 || s.batch < 1)
            throw DataError("config: bad stage plan");
    if (caption_dropout < 0 || caption_dropout > 1)
        throw DataError("config: train.caption_dropout must be in [0,1]");
}

StagePlan RunConfig::make_plan(int s) const {
    if (s < 1 || s > 4)
        throw DataError("stage must be 1..4");
    StagePlan plan;
    plan.stage      = s;
    plan.iterations = stage[s - 1].iters;
    plan.batch_size = stage[s - 1].batch;
    plan.lr         = stage[s - 1].lr;
    plan.seed       = splitmix_fin(seed ^ (0x5741A5E5ULL + (uint64_t)s));
    plan.caption_dropout = caption_dropout;
    return plan;
}

}  // namespace refcolor
