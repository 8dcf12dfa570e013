#pragma once

#include <map>
#include <vector>

#include "gf/nn.hpp"

namespace gf::unet {

// Small conditional U-Net for square canvases. Three resolution levels by
// default, residual blocks with time-embedding bias, single-head
// cross-attention against a token context at the lower levels and the mid
// block. Exposes per-block "sites" so callers can extract features from one
// network and add matching features into another.

enum class InjectionMode { decoder, encoder };

const char* injection_mode_name(InjectionMode m);
InjectionMode injection_mode_from_name(const std::string& s);

struct UNetSpec {
    int in_ch = 2;
    int out_ch = 1;
    int base = 16;
    std::vector<int> mult = {1, 2, 3};
    std::vector<int> attn_levels = {1, 2};
    int ctx_dim = 32;  // 0 disables cross-attention
    int temb_dim = 64;
    int groups = 8;

    int levels() const { return int(mult.size()); }
    int width(int level) const { return base * mult[size_t(level)]; }
};

struct ResBlock {
    nn::GroupNorm gn1;
    nn::Conv2d conv1;
    nn::Linear temb;
    nn::GroupNorm gn2;
    nn::Conv2d conv2;
    bool has_skip = false;
    nn::Conv2d skip;

    ResBlock() = default;
    ResBlock(int cin, int cout, int temb_dim, int groups, Rng& rng);
    nn::Var forward(const nn::Var& x, const nn::Var& temb_v) const;
    void collect(const std::string& prefix, nn::ParamList& out) const;
};

struct CrossAttn {
    nn::GroupNorm gn;
    nn::Linear to_q, to_k, to_v, proj;
    int channels = 0;

    CrossAttn() = default;
    CrossAttn(int channels_, int ctx_dim, int groups, Rng& rng);
    nn::Var forward(const nn::Var& h, const nn::Var& ctx) const;
    void collect(const std::string& prefix, nn::ParamList& out) const;
};

struct TimeEmbed {
    int sin_dim = 0;
    nn::Linear l1, l2;

    TimeEmbed() = default;
    TimeEmbed(int sin_dim_, int out_dim, Rng& rng);
    nn::Tensor sinusoid(const std::vector<int>& ts) const;
    nn::Var forward(const std::vector<int>& ts) const;
    void collect(const std::string& prefix, nn::ParamList& out) const;
};

struct TokenEncoder {
    nn::Embedding tok;
    nn::Embedding pos;
    nn::Linear l1, l2;
    int ctx_len = 0, dim = 0;

    TokenEncoder() = default;
    TokenEncoder(int vocab, int ctx_len_, int dim_, Rng& rng);
    // ids.size() must be B * ctx_len.
    nn::Var forward(const std::vector<int>& ids, int B) const;
    void collect(const std::string& prefix, nn::ParamList& out) const;
};

struct SiteInfo {
    int channels = 0;
    int down_factor = 1;  // spatial resolution = input / down_factor
};

struct UNet {
    UNetSpec spec;

    nn::Conv2d stem;
    struct Block {
        ResBlock rb;
        bool has_attn = false;
        CrossAttn attn;
    };
    std::vector<Block> down;
    std::vector<nn::Conv2d> down_conv;
    ResBlock mid1, mid2;
    bool mid_attn = false;
    CrossAttn midattn;
    std::vector<Block> up;  // indexed by level, applied high level to low
    std::vector<nn::Conv2d> up_conv;
    TimeEmbed temb;
    nn::GroupNorm out_gn;
    nn::Conv2d out_conv;

    UNet() = default;
    UNet(const UNetSpec& s, uint64_t seed);

    // Sites: down blocks 0..L-1, then mid (index L), then up blocks in
    // application order (levels L-1..0), 2L+1 total.
    int num_sites() const { return 2 * spec.levels() + 1; }
    std::vector<int> feature_sites(InjectionMode m) const;
    std::vector<SiteInfo> site_infos() const;

    struct Out {
        nn::Var eps;
        std::vector<nn::Var> sites;
    };
    // ctx may be null when spec.ctx_dim == 0. inject maps site index to a
    // tensor added to the block output at that site (shape-checked).
    Out forward(const nn::Var& x, const std::vector<int>& ts, const nn::Var& ctx,
                const std::map<int, nn::Var>& inject = {}, bool want_sites = false) const;

    nn::ParamList params(const std::string& prefix) const;
};

}  // namespace gf::unet
