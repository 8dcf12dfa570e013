#pragma once

#include <array>
#include <filesystem>
#include <functional>
#include <map>

#include "gf/codec.hpp"
#include "gf/config.hpp"
#include "gf/diffusion.hpp"
#include "gf/scenes.hpp"
#include "gf/textmodule.hpp"
#include "gf/unet.hpp"

namespace gf::visualmodule {

// The appearance denoiser: predicts the noise on an RGB scene latent given
// the word-box mask, a regeneration-region channel, and the full prompt
// tokens. Glyph structure is not learned here; it arrives as intermediate
// features exported by the (frozen) text module and enters through zero
// initialized 1x1 adapters, so an untrained adapter stack is an exact no-op.

struct VisualModule {
    unet::UNet net;
    unet::TokenEncoder tokenc;
    int max_tokens = 0;
    int latent_ch = 0;
    unet::InjectionMode mode = unet::InjectionMode::decoder;
    bool inject = true;
    // One 1x1 conv per feature site, ordered like feature_sites(mode). Maps
    // text-module channels to this net's channels at the same resolution.
    std::vector<nn::Conv2d> adapters;

    // text_mod supplies the feature-site geometry for the adapters; it must
    // be non-null when cfg.visual.inject is set and may be null otherwise.
    VisualModule(const config::PipelineConfig& cfg, int latent_channels,
                 const textmodule::TextModule* text_mod, uint64_t seed);

    nn::ParamList params() const;  // names under "visual."
    int64_t param_count() const;

    nn::Var ctx(const std::vector<textmodule::KeywordEncoding>& encs) const;

    // Adapter outputs keyed by site index, ready for UNet injection.
    std::map<int, nn::Var> adapter_inject(const std::vector<nn::Tensor>& features) const;

    // Input is concat(x_t, m, r) on the channel axis; m and r arrive in
    // latent form (2 * {0,1} - 1). features, when given, must match
    // feature_sites(mode) in order and count.
    unet::UNet::Out forward(const nn::Var& xt, const nn::Var& m, const nn::Var& r,
                            const std::vector<int>& ts,
                            const std::vector<textmodule::KeywordEncoding>& encs,
                            const std::vector<nn::Tensor>* features) const;

    // Inference-mode single call (no graph retained).
    nn::Tensor denoise(const nn::Tensor& xt, const nn::Tensor& m, const nn::Tensor& r,
                       const std::vector<textmodule::KeywordEncoding>& encs,
                       const std::vector<int>& ts,
                       const std::vector<nn::Tensor>* features) const;
};

// Deterministic scene provider, a pure function of (config, index).
using SceneStream = std::function<scenes::Scene(int64_t)>;
SceneStream scene_stream(const config::PipelineConfig& cfg);

using TrainLog = textmodule::TrainLog;

struct VisualTrainStats {
    int64_t steps = 0;
    double initial_avg = 0;
    double final_ema = 0;
    // Hash of the text-module parameters before and after training. Training
    // aborts if they differ; both are recorded so callers can re-verify.
    uint64_t text_hash_before = 0;
    uint64_t text_hash_after = 0;
};

// Trains the visual net, its token encoder and the adapters on composed
// scenes. The text module is frozen and only queried for features. Each
// sample trains inpainting (random sub-rectangle region, loss restricted to
// it) with probability cfg.visual.inpaint_prob, full generation otherwise.
// text_mod / text_codec may be null when vm.inject is false.
VisualTrainStats train_visual(VisualModule& vm, const textmodule::TextModule* text_mod,
                              const codec::Codec& img_codec, const codec::Codec* text_codec,
                              const config::PipelineConfig& cfg, const SceneStream& stream,
                              const std::filesystem::path& ckpt_out,
                              const TrainLog& log = nullptr);

// Loads a visual checkpoint into a module built from the same architecture
// config; validates kind, injection mode and the inject flag.
void load_visual_checkpoint(VisualModule& vm, const std::filesystem::path& path);

// What to draw: the appearance prompt plus the keyword boxes. words carries
// both the keyword texts and their pixel boxes; it may be empty, in which
// case the text branch is skipped and plain conditional generation runs.
struct GenSpec {
    std::string prompt;
    std::vector<glyphgen::WordPlacement> words;
};

struct SampleParams {
    double omega = 7.5;
    int steps = 50;
    uint64_t seed = 0;
};

struct GenResult {
    Image image;       // decoded RGB scene
    Image text_image;  // decoded glyph latent; empty when the text branch was skipped
};

// Joint ancestral sampling: the glyph chain and the scene chain walk the same
// timestep stride, and at every step the scene denoiser consumes the features
// the glyph denoiser produced at the current noise level. Classifier-free
// guidance applies to both chains; the unconditional scene branch only drops
// the prompt tokens, never the injected features. Deterministic per seed.
GenResult generate(const VisualModule& vm, const textmodule::TextModule* text_mod,
                   const codec::Codec& img_codec, const codec::Codec* text_codec,
                   const diffusion::Schedule& sched, const config::PipelineConfig& cfg,
                   const GenSpec& spec, const SampleParams& p);

// Same as generate, but only the region (1 = regenerate) is resampled; after
// every step the known image, forward-corrupted to the current level, is
// substituted outside the region, so the final image is bit-exact there under
// the identity codec. region is (1,H,W) with values in {0,1}.
GenResult inpaint(const VisualModule& vm, const textmodule::TextModule* text_mod,
                  const codec::Codec& img_codec, const codec::Codec* text_codec,
                  const diffusion::Schedule& sched, const config::PipelineConfig& cfg,
                  const Image& known, const Image& region, const GenSpec& spec,
                  const SampleParams& p);

}  // namespace gf::visualmodule
