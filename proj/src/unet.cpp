#include "gf/unet.hpp"

#include <cmath>

namespace gf::unet {

using nn::Var;

const char* injection_mode_name(InjectionMode m) {
    return m == InjectionMode::decoder ? "decoder" : "encoder";
}

InjectionMode injection_mode_from_name(const std::string& s) {
    if (s == "decoder") return InjectionMode::decoder;
    if (s == "encoder") return InjectionMode::encoder;
    throw Error(ErrKind::config, "unknown injection mode: " + s);
}

static int pick_groups(int channels, int want) {
    int g = std::min(channels, want);
    while (g > 1 && channels % g != 0) --g;
    return g;
}

ResBlock::ResBlock(int cin, int cout, int temb_dim, int groups, Rng& rng) {
    gn1 = nn::GroupNorm(cin, pick_groups(cin, groups));
    conv1 = nn::Conv2d(cin, cout, 3, 1, 1, rng);
    temb = nn::Linear(temb_dim, cout, rng);
    gn2 = nn::GroupNorm(cout, pick_groups(cout, groups));
    conv2 = nn::Conv2d(cout, cout, 3, 1, 1, rng);
    has_skip = cin != cout;
    if (has_skip) skip = nn::Conv2d(cin, cout, 1, 1, 0, rng);
}

Var ResBlock::forward(const Var& x, const Var& temb_v) const {
    Var h = conv1.forward(nn::silu(gn1.forward(x)));
    h = nn::add_bias_bc(h, temb.forward(temb_v));
    h = conv2.forward(nn::silu(gn2.forward(h)));
    return nn::add(h, has_skip ? skip.forward(x) : x);
}

void ResBlock::collect(const std::string& prefix, nn::ParamList& out) const {
    gn1.collect(prefix + ".gn1", out);
    conv1.collect(prefix + ".conv1", out);
    temb.collect(prefix + ".temb", out);
    gn2.collect(prefix + ".gn2", out);
    conv2.collect(prefix + ".conv2", out);
    if (has_skip) skip.collect(prefix + ".skip", out);
}

CrossAttn::CrossAttn(int channels_, int ctx_dim, int groups, Rng& rng) : channels(channels_) {
    gn = nn::GroupNorm(channels_, pick_groups(channels_, groups));
    to_q = nn::Linear(channels_, channels_, rng);
    to_k = nn::Linear(ctx_dim, channels_, rng);
    to_v = nn::Linear(ctx_dim, channels_, rng);
    proj = nn::Linear(channels_, channels_, rng, true);
}

Var CrossAttn::forward(const Var& h, const Var& ctx) const {
    const int H = h->val.dim(2), W = h->val.dim(3);
    Var q = to_q.forward(nn::chw_to_lc(gn.forward(h)));
    Var k = to_k.forward(ctx);
    Var v = to_v.forward(ctx);
    Var att = nn::softmax_last(nn::bmm_nt(q, k), 1.0 / std::sqrt(double(channels)));
    Var o = proj.forward(nn::bmm_nn(att, v));
    return nn::add(h, nn::lc_to_chw(o, H, W));
}

void CrossAttn::collect(const std::string& prefix, nn::ParamList& out) const {
    gn.collect(prefix + ".gn", out);
    to_q.collect(prefix + ".q", out);
    to_k.collect(prefix + ".k", out);
    to_v.collect(prefix + ".v", out);
    proj.collect(prefix + ".proj", out);
}

TimeEmbed::TimeEmbed(int sin_dim_, int out_dim, Rng& rng) : sin_dim(sin_dim_) {
    l1 = nn::Linear(sin_dim_, out_dim, rng);
    l2 = nn::Linear(out_dim, out_dim, rng);
}

nn::Tensor TimeEmbed::sinusoid(const std::vector<int>& ts) const {
    const int B = int(ts.size());
    const int half = sin_dim / 2;
    nn::Tensor e({B, sin_dim});
    for (int b = 0; b < B; ++b)
        for (int i = 0; i < half; ++i) {
            const double w = std::exp(-std::log(10000.0) * double(i) / double(half));
            e.v[size_t(b) * sin_dim + i] = std::sin(ts[size_t(b)] * w);
            e.v[size_t(b) * sin_dim + half + i] = std::cos(ts[size_t(b)] * w);
        }
    return e;
}

Var TimeEmbed::forward(const std::vector<int>& ts) const {
    return l2.forward(nn::silu(l1.forward(nn::make_const(sinusoid(ts)))));
}

void TimeEmbed::collect(const std::string& prefix, nn::ParamList& out) const {
    l1.collect(prefix + ".l1", out);
    l2.collect(prefix + ".l2", out);
}

TokenEncoder::TokenEncoder(int vocab, int ctx_len_, int dim_, Rng& rng)
    : ctx_len(ctx_len_), dim(dim_) {
    tok = nn::Embedding(vocab, dim_, rng);
    pos = nn::Embedding(ctx_len_, dim_, rng);
    l1 = nn::Linear(dim_, dim_, rng);
    l2 = nn::Linear(dim_, dim_, rng);
}

Var TokenEncoder::forward(const std::vector<int>& ids, int B) const {
    if (int(ids.size()) != B * ctx_len)
        throw Error(ErrKind::internal, "token ids must be B * ctx_len");
    std::vector<int> pids(ids.size());
    for (int b = 0; b < B; ++b)
        for (int i = 0; i < ctx_len; ++i) pids[size_t(b) * ctx_len + i] = i;
    Var e = nn::add(tok.forward(ids, B, ctx_len), pos.forward(pids, B, ctx_len));
    return nn::add(e, l2.forward(nn::silu(l1.forward(e))));
}

void TokenEncoder::collect(const std::string& prefix, nn::ParamList& out) const {
    tok.collect(prefix + ".tok", out);
    pos.collect(prefix + ".pos", out);
    l1.collect(prefix + ".l1", out);
    l2.collect(prefix + ".l2", out);
}

// ---------------------------------------------------------------------------

UNet::UNet(const UNetSpec& s, uint64_t seed) : spec(s) {
    Rng rng(seed);
    const int L = s.levels();
    if (L < 2) throw Error(ErrKind::config, "unet needs at least two levels");
    auto has_attn = [&](int level) {
        if (s.ctx_dim == 0) return false;
        for (int a : s.attn_levels)
            if (a == level) return true;
        return false;
    };

    stem = nn::Conv2d(s.in_ch, s.width(0), 3, 1, 1, rng);
    for (int i = 0; i < L; ++i) {
        Block b;
        b.rb = ResBlock(s.width(i), s.width(i), s.temb_dim, s.groups, rng);
        b.has_attn = has_attn(i);
        if (b.has_attn) b.attn = CrossAttn(s.width(i), s.ctx_dim, s.groups, rng);
        down.push_back(std::move(b));
        if (i + 1 < L) down_conv.emplace_back(s.width(i), s.width(i + 1), 3, 2, 1, rng);
    }
    mid1 = ResBlock(s.width(L - 1), s.width(L - 1), s.temb_dim, s.groups, rng);
    mid_attn = s.ctx_dim != 0;
    if (mid_attn) midattn = CrossAttn(s.width(L - 1), s.ctx_dim, s.groups, rng);
    mid2 = ResBlock(s.width(L - 1), s.width(L - 1), s.temb_dim, s.groups, rng);
    up.resize(size_t(L));
    for (int i = L - 1; i >= 0; --i) {
        Block b;
        b.rb = ResBlock(2 * s.width(i), s.width(i), s.temb_dim, s.groups, rng);
        b.has_attn = has_attn(i);
        if (b.has_attn) b.attn = CrossAttn(s.width(i), s.ctx_dim, s.groups, rng);
        up[size_t(i)] = std::move(b);
        if (i > 0) up_conv.emplace_back(s.width(i), s.width(i - 1), 3, 1, 1, rng);
    }
    temb = TimeEmbed(s.temb_dim, s.temb_dim, rng);
    out_gn = nn::GroupNorm(s.width(0), pick_groups(s.width(0), s.groups));
    out_conv = nn::Conv2d(s.width(0), s.out_ch, 3, 1, 1, rng, true);
}

std::vector<int> UNet::feature_sites(InjectionMode m) const {
    const int L = spec.levels();
    std::vector<int> out;
    if (m == InjectionMode::decoder) {
        // mid, then up blocks lowest resolution first
        out.push_back(L);
        for (int i = 0; i < L; ++i) out.push_back(L + 1 + i);
    } else {
        for (int i = 0; i < L; ++i) out.push_back(i);
        out.push_back(L);
    }
    return out;
}

std::vector<SiteInfo> UNet::site_infos() const {
    const int L = spec.levels();
    std::vector<SiteInfo> out;
    for (int i = 0; i < L; ++i) out.push_back({spec.width(i), 1 << i});
    out.push_back({spec.width(L - 1), 1 << (L - 1)});
    for (int i = L - 1; i >= 0; --i) out.push_back({spec.width(i), 1 << i});
    return out;
}

UNet::Out UNet::forward(const Var& x, const std::vector<int>& ts, const Var& ctx,
                        const std::map<int, Var>& inject, bool want_sites) const {
    const int L = spec.levels();
    if (x->val.ndim() != 4 || x->val.dim(1) != spec.in_ch)
        throw Error(ErrKind::validation,
                    "unet input must be (B," + std::to_string(spec.in_ch) + ",H,W), got " +
                        x->val.shape_str());
    if (int(ts.size()) != x->val.dim(0))
        throw Error(ErrKind::validation, "unet: one timestep per batch element required");
    if (spec.ctx_dim != 0 && !ctx)
        throw Error(ErrKind::validation, "unet: context required but missing");

    Out out;
    if (want_sites) out.sites.assign(size_t(num_sites()), nullptr);
    int site_idx = 0;
    auto at_site = [&](Var h) -> Var {
        const int idx = site_idx++;
        if (want_sites) out.sites[size_t(idx)] = h;
        auto it = inject.find(idx);
        if (it == inject.end()) return h;
        if (!it->second->val.same_shape(h->val))
            throw Error(ErrKind::validation,
                        "injected feature at site " + std::to_string(idx) + " has shape " +
                            it->second->val.shape_str() + ", block produces " +
                            h->val.shape_str());
        return nn::add(h, it->second);
    };

    Var temb_v = temb.forward(ts);
    Var h = stem.forward(x);
    std::vector<Var> skips;
    for (int i = 0; i < L; ++i) {
        h = down[size_t(i)].rb.forward(h, temb_v);
        if (down[size_t(i)].has_attn) h = down[size_t(i)].attn.forward(h, ctx);
        h = at_site(h);
        skips.push_back(h);
        if (i + 1 < L) h = down_conv[size_t(i)].forward(h);
    }
    h = mid1.forward(h, temb_v);
    if (mid_attn) h = midattn.forward(h, ctx);
    h = mid2.forward(h, temb_v);
    h = at_site(h);
    for (int i = L - 1; i >= 0; --i) {
        h = nn::concat_ch(h, skips[size_t(i)]);
        h = up[size_t(i)].rb.forward(h, temb_v);
        if (up[size_t(i)].has_attn) h = up[size_t(i)].attn.forward(h, ctx);
        h = at_site(h);
        if (i > 0) h = up_conv[size_t(L - 1 - i)].forward(nn::upsample2(h));
    }
    out.eps = out_conv.forward(nn::silu(out_gn.forward(h)));
    return out;
}

nn::ParamList UNet::params(const std::string& prefix) const {
    nn::ParamList out;
    const int L = spec.levels();
    stem.collect(prefix + ".stem", out);
    for (int i = 0; i < L; ++i) {
        down[size_t(i)].rb.collect(prefix + ".down" + std::to_string(i), out);
        if (down[size_t(i)].has_attn)
            down[size_t(i)].attn.collect(prefix + ".down" + std::to_string(i) + ".attn", out);
        if (i + 1 < L) down_conv[size_t(i)].collect(prefix + ".downconv" + std::to_string(i), out);
    }
    mid1.collect(prefix + ".mid1", out);
    if (mid_attn) midattn.collect(prefix + ".midattn", out);
    mid2.collect(prefix + ".mid2", out);
    for (int i = L - 1; i >= 0; --i) {
        up[size_t(i)].rb.collect(prefix + ".up" + std::to_string(i), out);
        if (up[size_t(i)].has_attn)
            up[size_t(i)].attn.collect(prefix + ".up" + std::to_string(i) + ".attn", out);
        if (i > 0) up_conv[size_t(L - 1 - i)].collect(prefix + ".upconv" + std::to_string(i), out);
    }
    temb.collect(prefix + ".temb", out);
    out_gn.collect(prefix + ".outgn", out);
    out_conv.collect(prefix + ".outconv", out);
    return out;
}

}  // namespace gf::unet
