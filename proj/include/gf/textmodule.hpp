#pragma once

#include <filesystem>
#include <functional>

#include "gf/codec.hpp"
#include "gf/config.hpp"
#include "gf/diffusion.hpp"
#include "gf/glyphgen.hpp"
#include "gf/unet.hpp"

namespace gf::textmodule {

// The text-structure denoiser: predicts the noise on a glyph latent given the
// box mask and the keyword tokens. Trained word-level first, then fine-tuned
// on multi-word layouts. Also exports per-site intermediate features for the
// visual module.

// Character-level token vocabulary.
constexpr int kTokPad = 0;  // A-Z map to 1..26, 0-9 to 27..36
constexpr int kTokSep = 37;
constexpr int kTokEot = 38;
constexpr int kTokUncond = 39;
constexpr int kTokVocab = 40;

int char_token(char c);    // throws on characters outside A-Z 0-9
char token_char(int id);   // inverse of char_token

struct KeywordEncoding {
    std::vector<int> ids;  // fixed length, padded with kTokPad
};

// Words joined by separators, terminated, padded to max_tokens. An empty word
// list encodes as the lone unconditional token. Throws when the words do not
// fit; use fit_keywords first when truncation is acceptable.
KeywordEncoding encode_keywords(const std::vector<std::string>& words, int max_tokens);
std::vector<std::string> decode_keywords(const KeywordEncoding& enc);

// Longest prefix of words whose encoding fits max_tokens. The conditioning
// channel is a fixed-length token sequence, so overlong word lists truncate at
// whole-word boundaries like any token-limited encoder; training and sampling
// both pass their word lists through this.
std::vector<std::string> fit_keywords(const std::vector<std::string>& words, int max_tokens);

// Word texts of a layout sample in reading order (top-to-bottom, then
// left-to-right), the order keyword conditioning always uses.
std::vector<std::string> reading_order_words(const std::vector<glyphgen::WordPlacement>& words);

struct TextModule {
    unet::UNet net;
    unet::TokenEncoder tokenc;
    int max_tokens = 0;
    int latent_ch = 0;

    TextModule(const config::ArchCfg& arch, int latent_channels, int max_tokens_,
               uint64_t seed);
    nn::ParamList params() const;  // names under "text."
    int64_t param_count() const;

    nn::Var ctx(const std::vector<KeywordEncoding>& encs) const;

    // Full batched forward; input is concat(z_t, m) on the channel axis.
    unet::UNet::Out forward(const nn::Var& zt, const nn::Var& m,
                            const std::vector<int>& ts,
                            const std::vector<KeywordEncoding>& encs,
                            bool want_sites = false) const;

    // Inference-mode single call (no graph retained).
    nn::Tensor denoise(const nn::Tensor& zt, const nn::Tensor& m,
                       const std::vector<std::string>& words, int t) const;

    struct FeaturePass {
        nn::Tensor eps;
        std::vector<nn::Tensor> features;  // ordered per feature_sites(mode)
    };
    // Noise prediction and injection features from one shared forward pass.
    FeaturePass denoise_with_features(const nn::Tensor& zt, const nn::Tensor& m,
                                      const std::vector<KeywordEncoding>& encs,
                                      const std::vector<int>& ts,
                                      unet::InjectionMode mode) const;
};

// Deterministic sample providers, pure functions of (config, index).
using SampleStream = std::function<glyphgen::WordSample(int64_t)>;
SampleStream word_stream(const config::PipelineConfig& cfg);
SampleStream sentence_stream(const config::PipelineConfig& cfg);

using TrainLog = std::function<void(int64_t step, double loss, double lr)>;

struct TrainStats {
    int64_t steps = 0;
    double initial_avg = 0;  // mean loss over the warmup window
    double final_ema = 0;
};

// Stage 1: word-level stream. Writes a checkpoint tagged stage 1.
TrainStats train_stage1(TextModule& tm, const codec::Codec& cdc,
                        const config::PipelineConfig& cfg,
                        const std::filesystem::path& ckpt_out,
                        const TrainLog& log = nullptr);

// Stage 2: resumes the stage-1 checkpoint, fine-tunes on sentence-level
// layouts, writes a checkpoint tagged stage 2.
TrainStats train_stage2(TextModule& tm, const codec::Codec& cdc,
                        const config::PipelineConfig& cfg,
                        const std::filesystem::path& stage1_ckpt,
                        const std::filesystem::path& ckpt_out,
                        const TrainLog& log = nullptr);

// Shared inner loop, exposed for custom streams and short smoke runs.
TrainStats train_text(TextModule& tm, const codec::Codec& cdc,
                      const config::PipelineConfig& cfg, int stage,
                      const config::StageCfg& stage_cfg, const SampleStream& stream,
                      const std::filesystem::path& ckpt_out, const TrainLog& log);

// Loads a text checkpoint into a module built from the same architecture
// config; validates kind and minimum stage.
void load_text_checkpoint(TextModule& tm, const std::filesystem::path& path,
                          int min_stage);

// Classifier-free-guided ancestral sampling of a glyph image for the given
// keywords and box mask. Deterministic per seed.
Image sample_text_image(const TextModule& tm, const codec::Codec& cdc,
                        const diffusion::Schedule& sched,
                        const std::vector<std::string>& words, const Image& mask,
                        double omega, int steps, uint64_t seed);

}  // namespace gf::textmodule
