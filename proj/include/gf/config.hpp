#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "gf/glyphgen.hpp"
#include "gf/unet.hpp"
#include "json.hpp"

namespace gf::config {

// One structured config drives every command. Parsing is strict: unknown keys
// are rejected so typos cannot silently fall back to defaults. The canonical
// JSON dump (sorted keys, every field present, paths excluded so artifacts
// stay relocatable) feeds the config hash that stamps shards, checkpoints,
// manifests, and reports.

struct DataCfg {
    int canvas = 64;
    std::vector<std::string> vocab;  // empty means the built-in word list
    std::string vocab_path;          // optional file, one word per line; wins over vocab
    int min_scale = 1;
    int max_scale = 3;
    int sentence_min_words = 2;
    int sentence_max_words = 4;
    int box_gap = 1;

    glyphgen::GlyphConfig to_glyph_config() const;
};

struct CodecCfg {
    std::string kind = "identity";  // identity | ae
    int hidden = 8;
    int64_t train_steps = 500;
    int batch = 8;
    double lr = 2e-3;
};

struct ScheduleCfg {
    int T = 200;
    double beta_min = 1e-4;
    double beta_max = 0.02;
};

struct ArchCfg {
    int base = 16;
    std::vector<int> mult = {1, 2, 3};
    std::vector<int> attn_levels = {1, 2};
    int ctx_dim = 32;
    int temb_dim = 64;
    int groups = 8;

    unet::UNetSpec to_unet_spec(int in_ch, int out_ch) const;
};

struct StageCfg {
    int64_t steps = 1000;
    int batch = 8;
    double lr = 1e-4;
};

struct TextCfg {
    ArchCfg arch;
    StageCfg stage1{20000, 32, 1e-4};
    StageCfg stage2{10000, 32, 1e-4};
    double p_drop = 0.1;
    int max_tokens = 12;  // keyword token sequence length
};

struct VisualCfg {
    ArchCfg arch;
    StageCfg train{20000, 32, 1e-4};
    double inpaint_prob = 0.5;
    double p_drop = 0.1;
    std::string injection_mode = "decoder";  // decoder | encoder
    bool inject = true;                      // false: monolithic baseline, no text features
    int max_tokens = 96;                     // full prompt token sequence length
};

struct SamplingCfg {
    int steps = 50;
    double omega = 7.5;
};

struct EvalCfg {
    int cases = 300;
    int images_per_prompt = 4;
    double ocr_iou_threshold = 0.6;
    int feature_dim = 16;
    std::string extractor = "rules";  // rules | llm
};

struct PathsCfg {
    std::string out_dir = "out";
    std::string fixture_dir = "fixtures/llm";
};

struct PipelineConfig {
    DataCfg data;
    CodecCfg codec;
    ScheduleCfg schedule;
    TextCfg text;
    VisualCfg visual;
    SamplingCfg sampling;
    EvalCfg eval;
    PathsCfg paths;
    uint64_t seed = 0;

    void validate() const;
    nlohmann::json to_json() const;
    std::string hash() const;  // hex of FNV-1a over the canonical dump

    // vocab_path file if set, else explicit vocab list, else the built-in list
    std::vector<std::string> resolved_vocab() const;
};

// Strict parse: every present key must be known and well-typed; absent keys
// keep defaults. validate() runs before returning.
PipelineConfig config_from_json(const nlohmann::json& j);
PipelineConfig load_config(const std::filesystem::path& path);

// Flag override by dotted path, e.g. ("sampling.omega", "2.5"). The value is
// parsed as JSON when possible and as a bare string otherwise. Re-validates.
void apply_override(PipelineConfig& c, const std::string& dotted_key,
                    const std::string& value);

}  // namespace gf::config
