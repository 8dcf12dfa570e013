#include "gf/codec.hpp"

#include <cmath>

namespace gf::codec {

using nn::Tensor;
using nn::Var;

static void check_image(const Image& img, int c) {
    if (img.c != c)
        throw Error(ErrKind::validation, "codec expects " + std::to_string(c) +
                                             " channels, image has " + std::to_string(img.c));
    if (img.h <= 0 || img.w <= 0) throw Error(ErrKind::validation, "codec: empty image");
}

static Tensor image_to_signed(const Image& img) {
    Tensor t({1, img.c, img.h, img.w});
    for (size_t i = 0; i < img.px.size(); ++i) t.v[i] = 2.0 * img.px[i] - 1.0;
    return t;
}

static Image signed_to_image(const Tensor& z, int b) {
    if (z.ndim() != 4) throw Error(ErrKind::validation, "codec decode expects (B,C,H,W)");
    if (b < 0 || b >= z.dim(0)) throw Error(ErrKind::validation, "codec decode: bad batch index");
    Image img(z.dim(1), z.dim(2), z.dim(3));
    const size_t n = img.px.size();
    const double* src = z.v.data() + size_t(b) * n;
    for (size_t i = 0; i < n; ++i) {
        double v = (src[i] + 1.0) / 2.0;
        img.px[i] = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
    }
    return img;
}

Tensor IdentityCodec::encode(const Image& img) const {
    check_image(img, c);
    return image_to_signed(img);
}

Image IdentityCodec::decode(const Tensor& z, int batch_index) const {
    return signed_to_image(z, batch_index);
}

ConvAutoencoder::ConvAutoencoder(int channels_, int hidden_, uint64_t seed)
    : c(channels_), hidden(hidden_) {
    Rng rng(seed);
    enc1 = nn::Conv2d(c, hidden, 3, 1, 1, rng);
    enc2 = nn::Conv2d(hidden, c, 3, 1, 1, rng);
    dec1 = nn::Conv2d(c, hidden, 3, 1, 1, rng);
    dec2 = nn::Conv2d(hidden, c, 3, 1, 1, rng);
}

Var ConvAutoencoder::encode_var(const Var& u) const {
    return nn::tanh_op(enc2.forward(nn::silu(enc1.forward(u))));
}

Var ConvAutoencoder::decode_var(const Var& z) const {
    return dec2.forward(nn::silu(dec1.forward(z)));
}

Tensor ConvAutoencoder::encode(const Image& img) const {
    check_image(img, c);
    nn::NoGradGuard ng;
    return encode_var(nn::make_const(image_to_signed(img)))->val;
}

Image ConvAutoencoder::decode(const Tensor& z, int batch_index) const {
    nn::NoGradGuard ng;
    Tensor out = decode_var(nn::make_const(z))->val;
    return signed_to_image(out, batch_index);
}

nn::ParamList ConvAutoencoder::params(const std::string& prefix) const {
    nn::ParamList out;
    enc1.collect(prefix + ".enc1", out);
    enc2.collect(prefix + ".enc2", out);
    dec1.collect(prefix + ".dec1", out);
    dec2.collect(prefix + ".dec2", out);
    return out;
}

Tensor encode_batch(const Codec& codec, const std::vector<const Image*>& images) {
    if (images.empty()) throw Error(ErrKind::validation, "encode_batch: no images");
    Tensor first = codec.encode(*images[0]);
    std::vector<int> dims = first.dims;
    dims[0] = int(images.size());
    Tensor out(dims);
    const size_t n = first.v.size();
    std::copy(first.v.begin(), first.v.end(), out.v.begin());
    for (size_t i = 1; i < images.size(); ++i) {
        Tensor zi = codec.encode(*images[i]);
        if (zi.v.size() != n)
            throw Error(ErrKind::validation, "encode_batch: inconsistent image sizes");
        std::copy(zi.v.begin(), zi.v.end(), out.v.begin() + i * n);
    }
    return out;
}

Tensor mask_batch(const std::vector<const Image*>& masks) {
    if (masks.empty()) throw Error(ErrKind::validation, "mask_batch: no masks");
    const int h = masks[0]->h, w = masks[0]->w;
    Tensor out({int(masks.size()), 1, h, w});
    for (size_t i = 0; i < masks.size(); ++i) {
        const Image& m = *masks[i];
        if (m.c != 1 || m.h != h || m.w != w)
            throw Error(ErrKind::validation, "mask_batch: masks must be 1-channel, same size");
        for (int k = 0; k < h * w; ++k)
            out.v[i * size_t(h) * size_t(w) + size_t(k)] = 2.0 * m.px[size_t(k)] - 1.0;
    }
    return out;
}

double reconstruction_mse(const Codec& codec, const Image& img) {
    Image back = codec.decode(codec.encode(img));
    double acc = 0;
    for (size_t i = 0; i < img.px.size(); ++i) {
        const double d = back.px[i] - img.px[i];
        acc += d * d;
    }
    return acc / double(img.px.size());
}

AeTrainResult train_autoencoder(ConvAutoencoder& ae, const std::function<Image(int64_t)>& stream,
                                int64_t steps, int batch, double lr, uint64_t seed,
                                const std::function<void(int64_t, double)>& log) {
    if (steps <= 0 || batch <= 0) throw Error(ErrKind::config, "ae training needs steps, batch > 0");
    auto params = ae.params("ae");
    nn::set_trainable(params, true);
    nn::AdamW opt;
    opt.lr = lr;
    AeTrainResult res;
    double last = 0;
    for (int64_t step = 0; step < steps; ++step) {
        std::vector<Image> imgs;
        std::vector<const Image*> ptrs;
        imgs.reserve(size_t(batch));
        for (int b = 0; b < batch; ++b) {
            imgs.push_back(stream(step * batch + b));
            ptrs.push_back(&imgs.back());
        }
        Tensor u({int(imgs.size()), ae.c, imgs[0].h, imgs[0].w});
        for (size_t i = 0; i < imgs.size(); ++i)
            for (size_t k = 0; k < imgs[i].px.size(); ++k)
                u.v[i * imgs[i].px.size() + k] = 2.0 * imgs[i].px[k] - 1.0;

        opt.zero_grad(params);
        Var uin = nn::make_const(u);
        Var recon = ae.decode_var(ae.encode_var(uin));
        Var loss = nn::mse(recon, u);
        nn::backward(loss);
        opt.step(params);
        last = loss->val.v[0];
        if (log && (step % 50 == 0 || step + 1 == steps)) log(step, last);
    }
    (void)seed;
    res.final_loss = last;
    res.steps = steps;
    return res;
}

std::unique_ptr<Codec> make_codec(const std::string& kind, int channels, int hidden,
                                  uint64_t seed) {
    if (kind == "identity") return std::make_unique<IdentityCodec>(channels);
    if (kind == "ae") return std::make_unique<ConvAutoencoder>(channels, hidden, seed);
    throw Error(ErrKind::config, "unknown codec kind: " + kind);
}

}  // namespace gf::codec
