#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cstdio>

#include "doctest.h"
#include "gf/codec.hpp"
#include "gf/glyphgen.hpp"

using namespace gf;
using namespace gf::codec;

TEST_CASE("identity codec maps endpoints exactly") {
    IdentityCodec id(1);
    Image img(1, 2, 2);
    img.px = {0.0, 1.0, 0.5, 0.25};
    nn::Tensor z = id.encode(img);
    REQUIRE(z.dims == std::vector<int>({1, 1, 2, 2}));
    CHECK(z.v[0] == -1.0);
    CHECK(z.v[1] == 1.0);
    CHECK(z.v[2] == 0.0);
    CHECK(z.v[3] == -0.5);
    Image back = id.decode(z);
    CHECK(back.px == img.px);  // dyadic values survive bit-exactly
}

TEST_CASE("identity codec round-trips 8-bit files byte for byte") {
    IdentityCodec id(3);
    Image img(3, 9, 7);
    Rng r(404);
    for (auto& p : img.px) p = double(r.uniform_int(256)) / 255.0;
    std::vector<uint8_t> bytes = encode_pnm(img);
    Image loaded = decode_pnm(bytes);
    Image rt = id.decode(id.encode(loaded));
    CHECK(encode_pnm(rt) == bytes);
}

TEST_CASE("identity codec clamps out-of-range latents") {
    IdentityCodec id(1);
    nn::Tensor z({1, 1, 1, 3});
    z.v = {-3.0, 0.0, 4.0};
    Image img = id.decode(z);
    CHECK(img.px[0] == 0.0);
    CHECK(img.px[1] == 0.5);
    CHECK(img.px[2] == 1.0);
}

TEST_CASE("encode_batch stacks images in order") {
    IdentityCodec id(1);
    Image a(1, 2, 2), b(1, 2, 2);
    a.px = {0, 0, 0, 0};
    b.px = {1, 1, 1, 1};
    nn::Tensor z = encode_batch(id, {&a, &b});
    REQUIRE(z.dims == std::vector<int>({2, 1, 2, 2}));
    for (int i = 0; i < 4; ++i) {
        CHECK(z.v[i] == -1.0);
        CHECK(z.v[4 + i] == 1.0);
    }
    Image back = id.decode(z, 1);
    CHECK(back.px == b.px);
    CHECK_THROWS_AS((void)encode_batch(id, {}), Error);
    Image odd(2, 2, 2);
    CHECK_THROWS_AS((void)encode_batch(id, {&odd}), Error);
}

TEST_CASE("autoencoder shapes and parameter registry") {
    ConvAutoencoder ae(1, 8, 77);
    Image img(1, 16, 16);
    Rng r(5);
    for (auto& p : img.px) p = r.uniform();
    nn::Tensor z = ae.encode(img);
    REQUIRE(z.dims == std::vector<int>({1, 1, 16, 16}));
    for (double v : z.v) {
        CHECK(v <= 1.0);
        CHECK(v >= -1.0);
    }
    Image back = ae.decode(z);
    CHECK(back.c == 1);
    CHECK(back.h == 16);
    CHECK(back.w == 16);

    nn::ParamList ps = ae.params("ae");
    CHECK(ps.size() == 8);  // 4 convs, weight + bias each
    for (auto& [name, var] : ps) CHECK(name.rfind("ae.", 0) == 0);
}

TEST_CASE("short training run improves reconstruction") {
    glyphgen::GlyphConfig cfg;
    cfg.canvas = 32;
    cfg.vocab = {"CAT", "DOG", "SUN", "MAP"};
    auto stream = [&](int64_t i) {
        return glyphgen::sample_word_level(uint64_t(i) + 1, cfg).image;
    };

    ConvAutoencoder ae(1, 8, 99);
    double before = 0;
    for (int i = 0; i < 8; ++i) before += reconstruction_mse(ae, stream(1000 + i));
    before /= 8;

    AeTrainResult res = train_autoencoder(ae, stream, 150, 4, 2e-3, 31);
    CHECK(res.steps == 150);

    double after = 0;
    for (int i = 0; i < 8; ++i) after += reconstruction_mse(ae, stream(1000 + i));
    after /= 8;
    CHECK(after < before);
    CHECK(after < 0.05);
}

TEST_CASE("autoencoder weights round-trip through a checkpoint") {
    ConvAutoencoder ae(1, 4, 13);
    const std::string path = "ae_ckpt_test.bin";
    nn::CheckpointMeta meta;
    meta.kind = "ae";
    nn::save_checkpoint(path, meta, ae.params("ae"));
    ConvAutoencoder other(1, 4, 14);
    CHECK(nn::params_hash(other.params("ae")) != nn::params_hash(ae.params("ae")));
    nn::load_checkpoint(path, other.params("ae"));
    CHECK(nn::params_hash(other.params("ae")) == nn::params_hash(ae.params("ae")));
    std::remove(path.c_str());
}

TEST_CASE("codec factory") {
    auto id = make_codec("identity", 3, 0, 1);
    CHECK(id->kind() == "identity");
    CHECK(id->channels() == 3);
    auto ae = make_codec("ae", 1, 8, 2);
    CHECK(ae->kind() == "ae");
    CHECK_THROWS_AS((void)make_codec("vae", 1, 8, 3), Error);
}
