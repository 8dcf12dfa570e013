#pragma once

#include <functional>
#include <memory>

#include "gf/core.hpp"
#include "gf/nn.hpp"

namespace gf::codec {

// Image <-> latent codecs. The diffusion modules only ever see latents in
// roughly [-1, 1]. The identity codec is the default: y = 2x - 1, computed
// in double precision so 8-bit image files round-trip exactly.

struct Codec {
    virtual ~Codec() = default;
    virtual std::string kind() const = 0;
    virtual int channels() const = 0;
    virtual nn::Tensor encode(const Image& img) const = 0;  // (1,C,H,W)
    virtual Image decode(const nn::Tensor& z, int batch_index = 0) const = 0;
    virtual nn::ParamList params(const std::string& prefix) const {
        (void)prefix;
        return {};
    }
};

struct IdentityCodec final : Codec {
    int c;
    explicit IdentityCodec(int channels_) : c(channels_) {}
    std::string kind() const override { return "identity"; }
    int channels() const override { return c; }
    nn::Tensor encode(const Image& img) const override;
    Image decode(const nn::Tensor& z, int batch_index = 0) const override;
};

// Same-resolution conv autoencoder with a tanh-bounded latent. Channel count
// is preserved so it can substitute for the identity codec untouched.
struct ConvAutoencoder final : Codec {
    int c = 1, hidden = 8;
    nn::Conv2d enc1, enc2, dec1, dec2;

    ConvAutoencoder(int channels_, int hidden_, uint64_t seed);
    std::string kind() const override { return "ae"; }
    int channels() const override { return c; }
    nn::Tensor encode(const Image& img) const override;
    Image decode(const nn::Tensor& z, int batch_index = 0) const override;
    nn::ParamList params(const std::string& prefix) const override;

    nn::Var encode_var(const nn::Var& u) const;  // u in [-1,1] space
    nn::Var decode_var(const nn::Var& z) const;
};

// Stacks per-image encodings into one (B,C,H,W) tensor.
nn::Tensor encode_batch(const Codec& codec, const std::vector<const Image*>& images);

// Box masks always enter the denoisers as 2m - 1, independent of the image
// codec, so box geometry stays crisp. (B,1,H,W).
nn::Tensor mask_batch(const std::vector<const Image*>& masks);

// Mean squared reconstruction error in [0,1] image space.
double reconstruction_mse(const Codec& codec, const Image& img);

struct AeTrainResult {
    double final_loss = 0;
    int64_t steps = 0;
};

AeTrainResult train_autoencoder(ConvAutoencoder& ae,
                                const std::function<Image(int64_t)>& stream, int64_t steps,
                                int batch, double lr, uint64_t seed,
                                const std::function<void(int64_t, double)>& log = nullptr);

std::unique_ptr<Codec> make_codec(const std::string& kind, int channels, int hidden,
                                  uint64_t seed);

}  // namespace gf::codec
