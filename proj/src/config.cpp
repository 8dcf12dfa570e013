#include "gf/config.hpp"

#include <fstream>
#include <set>

namespace gf::config {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Strict object walker: every key read is recorded, finish() rejects the rest.

namespace {

struct ObjReader {
    const json& j;
    std::string where;
    std::set<std::string> seen;

    ObjReader(const json& j_, std::string where_) : j(j_), where(std::move(where_)) {
        if (!j.is_object())
            throw Error(ErrKind::config, where + " must be a JSON object");
    }

    bool has(const std::string& key) {
        if (!j.contains(key)) return false;
        seen.insert(key);
        return true;
    }

    const json& at(const std::string& key) { return j.at(key); }

    template <typename T>
    void get(const std::string& key, T& out) {
        if (!has(key)) return;
        try {
            out = j.at(key).get<T>();
        } catch (const json::exception& e) {
            throw Error(ErrKind::config, where + "." + key + ": " + e.what());
        }
    }

    void finish() {
        for (auto it = j.begin(); it != j.end(); ++it)
            if (!seen.count(it.key()))
                throw Error(ErrKind::config, "unknown config key " + where + "." + it.key());
    }
};

void parse_data(const json& j, DataCfg& c) {
    ObjReader r(j, "data");
    r.get("canvas", c.canvas);
    r.get("vocab", c.vocab);
    r.get("vocab_path", c.vocab_path);
    r.get("min_scale", c.min_scale);
    r.get("max_scale", c.max_scale);
    r.get("sentence_min_words", c.sentence_min_words);
    r.get("sentence_max_words", c.sentence_max_words);
    r.get("box_gap", c.box_gap);
    r.finish();
}

void parse_codec(const json& j, CodecCfg& c) {
    ObjReader r(j, "codec");
    r.get("kind", c.kind);
    r.get("hidden", c.hidden);
    r.get("train_steps", c.train_steps);
    r.get("batch", c.batch);
    r.get("lr", c.lr);
    r.finish();
}

void parse_schedule(const json& j, ScheduleCfg& c) {
    ObjReader r(j, "schedule");
    r.get("T", c.T);
    r.get("beta_min", c.beta_min);
    r.get("beta_max", c.beta_max);
    r.finish();
}

void parse_arch(const json& j, const std::string& where, ArchCfg& c) {
    ObjReader r(j, where);
    r.get("base", c.base);
    r.get("mult", c.mult);
    r.get("attn_levels", c.attn_levels);
    r.get("ctx_dim", c.ctx_dim);
    r.get("temb_dim", c.temb_dim);
    r.get("groups", c.groups);
    r.finish();
}

void parse_stage(const json& j, const std::string& where, StageCfg& c) {
    ObjReader r(j, where);
    r.get("steps", c.steps);
    r.get("batch", c.batch);
    r.get("lr", c.lr);
    r.finish();
}

void parse_text(const json& j, TextCfg& c) {
    ObjReader r(j, "text");
    if (r.has("arch")) parse_arch(r.at("arch"), "text.arch", c.arch);
    if (r.has("stage1")) parse_stage(r.at("stage1"), "text.stage1", c.stage1);
    if (r.has("stage2")) parse_stage(r.at("stage2"), "text.stage2", c.stage2);
    r.get("p_drop", c.p_drop);
    r.get("max_tokens", c.max_tokens);
    r.finish();
}

void parse_visual(const json& j, VisualCfg& c) {
    ObjReader r(j, "visual");
    if (r.has("arch")) parse_arch(r.at("arch"), "visual.arch", c.arch);
    if (r.has("train")) parse_stage(r.at("train"), "visual.train", c.train);
    r.get("inpaint_prob", c.inpaint_prob);
    r.get("p_drop", c.p_drop);
    r.get("injection_mode", c.injection_mode);
    r.get("inject", c.inject);
    r.get("max_tokens", c.max_tokens);
    r.finish();
}

void parse_sampling(const json& j, SamplingCfg& c) {
    ObjReader r(j, "sampling");
    r.get("steps", c.steps);
    r.get("omega", c.omega);
    r.finish();
}

void parse_eval(const json& j, EvalCfg& c) {
    ObjReader r(j, "eval");
    r.get("cases", c.cases);
    r.get("images_per_prompt", c.images_per_prompt);
    r.get("ocr_iou_threshold", c.ocr_iou_threshold);
    r.get("feature_dim", c.feature_dim);
    r.get("extractor", c.extractor);
    r.finish();
}

void parse_paths(const json& j, PathsCfg& c) {
    ObjReader r(j, "paths");
    r.get("out_dir", c.out_dir);
    r.get("fixture_dir", c.fixture_dir);
    r.finish();
}

json arch_json(const ArchCfg& c) {
    return json{{"base", c.base},           {"mult", c.mult},
                {"attn_levels", c.attn_levels}, {"ctx_dim", c.ctx_dim},
                {"temb_dim", c.temb_dim},   {"groups", c.groups}};
}

json stage_json(const StageCfg& c) {
    return json{{"steps", c.steps}, {"batch", c.batch}, {"lr", c.lr}};
}

void check(bool ok, const std::string& msg) {
    if (!ok) throw Error(ErrKind::config, msg);
}

}  // namespace

glyphgen::GlyphConfig DataCfg::to_glyph_config() const {
    glyphgen::GlyphConfig g;
    g.canvas = canvas;
    g.min_scale = min_scale;
    g.max_scale = max_scale;
    g.sentence_min_words = sentence_min_words;
    g.sentence_max_words = sentence_max_words;
    g.box_gap = box_gap;
    return g;  // caller fills vocab from resolved_vocab()
}

unet::UNetSpec ArchCfg::to_unet_spec(int in_ch, int out_ch) const {
    unet::UNetSpec s;
    s.in_ch = in_ch;
    s.out_ch = out_ch;
    s.base = base;
    s.mult = mult;
    s.attn_levels = attn_levels;
    s.ctx_dim = ctx_dim;
    s.temb_dim = temb_dim;
    s.groups = groups;
    return s;
}

static void validate_arch(const ArchCfg& a, const std::string& where, int canvas) {
    check(a.base >= 1, where + ".base must be positive");
    check(!a.mult.empty(), where + ".mult must be non-empty");
    for (int m : a.mult) check(m >= 1, where + ".mult entries must be positive");
    for (int l : a.attn_levels)
        check(l >= 0 && l < int(a.mult.size()), where + ".attn_levels out of range");
    check(a.ctx_dim >= 0, where + ".ctx_dim must be non-negative");
    check(a.temb_dim >= 2 && a.temb_dim % 2 == 0, where + ".temb_dim must be even");
    check(a.groups >= 1, where + ".groups must be positive");
    const int down = 1 << (int(a.mult.size()) - 1);
    check(canvas % down == 0,
          where + ": canvas must be divisible by the downsampling factor");
}

static void validate_stage(const StageCfg& s, const std::string& where) {
    check(s.steps >= 1, where + ".steps must be positive");
    check(s.batch >= 1, where + ".batch must be positive");
    check(s.lr > 0, where + ".lr must be positive");
}

void PipelineConfig::validate() const {
    const auto vocab = resolved_vocab();
    check(!vocab.empty(), "vocab must be non-empty");
    for (const auto& w : vocab) {
        check(!w.empty(), "vocab words must be non-empty");
        for (char ch : w)
            check((ch >= 'A' && ch <= 'Z') || (ch >= '0' && ch <= '9'),
                  "vocab word '" + w + "' has characters outside A-Z 0-9");
    }
    auto g = data.to_glyph_config();
    g.vocab = vocab;
    g.validate();  // canvas/scale/word-count/gap invariants
    check(codec.kind == "identity" || codec.kind == "ae",
          "codec.kind must be identity or ae");
    check(codec.hidden >= 1, "codec.hidden must be positive");
    check(codec.train_steps >= 1, "codec.train_steps must be positive");
    check(codec.batch >= 1, "codec.batch must be positive");
    check(codec.lr > 0, "codec.lr must be positive");
    check(schedule.T >= 2, "schedule.T must be at least 2");
    check(schedule.beta_min > 0 && schedule.beta_min < schedule.beta_max &&
              schedule.beta_max < 1,
          "schedule betas must satisfy 0 < beta_min < beta_max < 1");
    validate_arch(text.arch, "text.arch", data.canvas);
    validate_arch(visual.arch, "visual.arch", data.canvas);
    validate_stage(text.stage1, "text.stage1");
    validate_stage(text.stage2, "text.stage2");
    validate_stage(visual.train, "visual.train");
    check(text.p_drop >= 0 && text.p_drop < 1, "text.p_drop must be in [0,1)");
    check(visual.p_drop >= 0 && visual.p_drop < 1, "visual.p_drop must be in [0,1)");
    check(visual.inpaint_prob >= 0 && visual.inpaint_prob <= 1,
          "visual.inpaint_prob must be in [0,1]");
    (void)unet::injection_mode_from_name(visual.injection_mode);
    check(text.max_tokens >= 2, "text.max_tokens too small");
    check(visual.max_tokens >= 2, "visual.max_tokens too small");
    check(text.arch.ctx_dim > 0, "text.arch.ctx_dim must be positive (keyword attention)");
    check(sampling.steps >= 2 && sampling.steps <= schedule.T,
          "sampling.steps must be in [2, schedule.T]");
    check(sampling.omega >= 0, "sampling.omega must be non-negative");
    check(eval.cases >= 1, "eval.cases must be positive");
    check(eval.images_per_prompt >= 1, "eval.images_per_prompt must be positive");
    check(eval.ocr_iou_threshold > 0 && eval.ocr_iou_threshold < 1,
          "eval.ocr_iou_threshold must be in (0,1)");
    check(eval.feature_dim >= 2, "eval.feature_dim too small");
    check(eval.extractor == "rules" || eval.extractor == "llm",
          "eval.extractor must be rules or llm");
    check(!paths.out_dir.empty(), "paths.out_dir must be set");
}

json PipelineConfig::to_json() const {
    json j;
    j["data"] = {{"canvas", data.canvas},
                 {"vocab", data.vocab},
                 {"vocab_path", data.vocab_path},
                 {"min_scale", data.min_scale},
                 {"max_scale", data.max_scale},
                 {"sentence_min_words", data.sentence_min_words},
                 {"sentence_max_words", data.sentence_max_words},
                 {"box_gap", data.box_gap}};
    j["codec"] = {{"kind", codec.kind},
                  {"hidden", codec.hidden},
                  {"train_steps", codec.train_steps},
                  {"batch", codec.batch},
                  {"lr", codec.lr}};
    j["schedule"] = {{"T", schedule.T},
                     {"beta_min", schedule.beta_min},
                     {"beta_max", schedule.beta_max}};
    j["text"] = {{"arch", arch_json(text.arch)},
                 {"stage1", stage_json(text.stage1)},
                 {"stage2", stage_json(text.stage2)},
                 {"p_drop", text.p_drop},
                 {"max_tokens", text.max_tokens}};
    j["visual"] = {{"arch", arch_json(visual.arch)},
                   {"train", stage_json(visual.train)},
                   {"inpaint_prob", visual.inpaint_prob},
                   {"p_drop", visual.p_drop},
                   {"injection_mode", visual.injection_mode},
                   {"inject", visual.inject},
                   {"max_tokens", visual.max_tokens}};
    j["sampling"] = {{"steps", sampling.steps}, {"omega", sampling.omega}};
    j["eval"] = {{"cases", eval.cases},
                 {"images_per_prompt", eval.images_per_prompt},
                 {"ocr_iou_threshold", eval.ocr_iou_threshold},
                 {"feature_dim", eval.feature_dim},
                 {"extractor", eval.extractor}};
    j["paths"] = {{"out_dir", paths.out_dir}, {"fixture_dir", paths.fixture_dir}};
    j["seed"] = seed;
    return j;
}

std::string PipelineConfig::hash() const {
    json j = to_json();  // object keys are sorted
    j.erase("paths");    // artifacts are relocatable: directories don't change identity
    return hex64(fnv1a64(j.dump()));
}

std::vector<std::string> PipelineConfig::resolved_vocab() const {
    if (!data.vocab_path.empty()) {
        std::ifstream in(data.vocab_path);
        if (!in) throw Error(ErrKind::io, "cannot open vocab file " + data.vocab_path);
        std::vector<std::string> words;
        std::string line;
        while (std::getline(in, line)) {
            while (!line.empty() && (line.back() == '\r' || line.back() == ' '))
                line.pop_back();
            if (!line.empty()) words.push_back(line);
        }
        return words;
    }
    if (!data.vocab.empty()) return data.vocab;
    return glyphgen::default_vocab();
}

PipelineConfig config_from_json(const json& j) {
    PipelineConfig c;
    ObjReader r(j, "config");
    if (r.has("data")) parse_data(r.at("data"), c.data);
    if (r.has("codec")) parse_codec(r.at("codec"), c.codec);
    if (r.has("schedule")) parse_schedule(r.at("schedule"), c.schedule);
    if (r.has("text")) parse_text(r.at("text"), c.text);
    if (r.has("visual")) parse_visual(r.at("visual"), c.visual);
    if (r.has("sampling")) parse_sampling(r.at("sampling"), c.sampling);
    if (r.has("eval")) parse_eval(r.at("eval"), c.eval);
    if (r.has("paths")) parse_paths(r.at("paths"), c.paths);
    r.get("seed", c.seed);
    r.finish();
    c.validate();
    return c;
}

PipelineConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrKind::io, "cannot open config file " + path.string());
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw Error(ErrKind::config, path.string() + ": " + e.what());
    }
    return config_from_json(j);
}

void apply_override(PipelineConfig& c, const std::string& dotted_key,
                    const std::string& value) {
    if (dotted_key.empty() || dotted_key.front() == '.' || dotted_key.back() == '.')
        throw Error(ErrKind::config, "bad override key '" + dotted_key + "'");
    std::string pointer = "/";
    for (char ch : dotted_key) pointer += (ch == '.') ? '/' : ch;
    json parsed = json::parse(value, nullptr, false);
    if (parsed.is_discarded()) parsed = value;  // bare strings stay strings
    json j = c.to_json();
    try {
        j[json::json_pointer(pointer)] = parsed;
    } catch (const json::exception& e) {
        throw Error(ErrKind::config, "override " + dotted_key + ": " + e.what());
    }
    c = config_from_json(j);
}

}  // namespace gf::config
