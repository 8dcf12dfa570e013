#include "gf/visualmodule.hpp"

#include <algorithm>
#include <cmath>

namespace gf::visualmodule {

using nn::Tensor;
using nn::Var;
using textmodule::KeywordEncoding;
using textmodule::TextModule;

VisualModule::VisualModule(const config::PipelineConfig& cfg, int latent_channels,
                           const TextModule* text_mod, uint64_t seed) {
    const config::ArchCfg& arch = cfg.visual.arch;
    if (arch.ctx_dim <= 0)
        throw Error(ErrKind::config, "the visual module requires cross attention (ctx_dim > 0)");
    latent_ch = latent_channels;
    max_tokens = cfg.visual.max_tokens;
    mode = unet::injection_mode_from_name(cfg.visual.injection_mode);
    inject = cfg.visual.inject;
    // +2 conditioning channels: the word-box mask and the regeneration region.
    net = unet::UNet(arch.to_unet_spec(latent_ch + 2, latent_ch), seed);
    Rng trng(mix64(seed, fnv1a64("visual-token-encoder")));
    tokenc = unet::TokenEncoder(textmodule::kTokVocab, max_tokens, arch.ctx_dim, trng);
    if (!inject) return;
    if (!text_mod)
        throw Error(ErrKind::config,
                    "feature injection is enabled but no text module was provided");
    const auto vsites = net.feature_sites(mode);
    const auto tsites = text_mod->net.feature_sites(mode);
    if (vsites.size() != tsites.size())
        throw Error(ErrKind::config,
                    "text and visual architectures must have the same number of "
                    "resolution levels for feature injection");
    const auto vinfo = net.site_infos();
    const auto tinfo = text_mod->net.site_infos();
    Rng arng(mix64(seed, fnv1a64("visual-adapters")));
    adapters.reserve(vsites.size());
    for (size_t k = 0; k < vsites.size(); ++k) {
        const unet::SiteInfo& vi = vinfo[size_t(vsites[k])];
        const unet::SiteInfo& ti = tinfo[size_t(tsites[k])];
        if (vi.down_factor != ti.down_factor)
            throw Error(ErrKind::config, "feature site resolution mismatch between modules");
        adapters.emplace_back(ti.channels, vi.channels, 1, 1, 0, arng, /*zero_init=*/true);
    }
}

nn::ParamList VisualModule::params() const {
    nn::ParamList out = net.params("visual.unet");
    tokenc.collect("visual.tok", out);
    for (size_t k = 0; k < adapters.size(); ++k)
        adapters[k].collect("visual.adapt" + std::to_string(k), out);
    return out;
}

int64_t VisualModule::param_count() const {
    int64_t n = 0;
    for (const auto& pr : params()) n += pr.p->val.numel();
    return n;
}

Var VisualModule::ctx(const std::vector<KeywordEncoding>& encs) const {
    std::vector<int> ids;
    ids.reserve(encs.size() * size_t(max_tokens));
    for (const auto& e : encs) {
        if (int(e.ids.size()) != max_tokens)
            throw Error(ErrKind::validation, "prompt encoding length does not match max_tokens");
        ids.insert(ids.end(), e.ids.begin(), e.ids.end());
    }
    return tokenc.forward(ids, int(encs.size()));
}

std::map<int, Var> VisualModule::adapter_inject(const std::vector<Tensor>& features) const {
    if (!inject)
        throw Error(ErrKind::config, "feature injection is disabled for this module");
    const auto sites = net.feature_sites(mode);
    if (features.size() != sites.size())
        throw Error(ErrKind::validation,
                    "expected " + std::to_string(sites.size()) + " feature maps, got " +
                        std::to_string(features.size()));
    std::map<int, Var> inj;
    for (size_t k = 0; k < sites.size(); ++k)
        inj[sites[k]] = adapters[k].forward(nn::make_const(features[k]));
    return inj;
}

unet::UNet::Out VisualModule::forward(const Var& xt, const Var& m, const Var& r,
                                      const std::vector<int>& ts,
                                      const std::vector<KeywordEncoding>& encs,
                                      const std::vector<Tensor>* features) const {
    Var x = nn::concat_ch(nn::concat_ch(xt, m), r);
    std::map<int, Var> inj;
    if (features) inj = adapter_inject(*features);
    return net.forward(x, ts, ctx(encs), inj, false);
}

Tensor VisualModule::denoise(const Tensor& xt, const Tensor& m, const Tensor& r,
                             const std::vector<KeywordEncoding>& encs,
                             const std::vector<int>& ts,
                             const std::vector<Tensor>* features) const {
    nn::NoGradGuard ng;
    return forward(nn::make_const(xt), nn::make_const(m), nn::make_const(r), ts, encs, features)
        .eps->val;
}

SceneStream scene_stream(const config::PipelineConfig& cfg) {
    auto g = cfg.data.to_glyph_config();
    g.vocab = cfg.resolved_vocab();
    const uint64_t base = mix64(cfg.seed, fnv1a64("scene-stream"));
    return [g, base](int64_t i) { return scenes::compose_scene(mix64(base, uint64_t(i)), g); };
}

namespace {

// Random axis-aligned regeneration region covering 20..80% of the canvas.
Image random_region(Rng& rng, int h, int w) {
    const double area = double(h) * double(w);
    int rw = w, rh = h;
    for (int tries = 0; tries < 10000; ++tries) {
        rw = 1 + rng.uniform_int(w);
        rh = 1 + rng.uniform_int(h);
        const double frac = double(rw) * double(rh) / area;
        if (frac >= 0.2 && frac <= 0.8) break;
    }
    const int x0 = rng.uniform_int(w - rw + 1);
    const int y0 = rng.uniform_int(h - rh + 1);
    Image r(1, h, w, 0.0);
    for (int y = y0; y < y0 + rh; ++y)
        for (int x = x0; x < x0 + rw; ++x) r.at(0, y, x) = 1.0;
    return r;
}

Tensor stack_rows(const Tensor& a, int copies) {
    std::vector<int> dims = a.dims;
    dims[0] *= copies;
    Tensor out(dims);
    for (int k = 0; k < copies; ++k)
        std::copy(a.v.begin(), a.v.end(), out.v.begin() + int64_t(k) * a.numel());
    return out;
}

Tensor batch_row(const Tensor& a, int row) {
    std::vector<int> dims = a.dims;
    const int64_t n = a.numel() / dims[0];
    dims[0] = 1;
    Tensor out(dims);
    std::copy(a.v.begin() + row * n, a.v.begin() + (row + 1) * n, out.v.begin());
    return out;
}

// (1,C,h,w) slice of each feature's first row, duplicated across the CFG pair.
std::vector<Tensor> cond_features_pair(const std::vector<Tensor>& feats) {
    std::vector<Tensor> out;
    out.reserve(feats.size());
    for (const auto& f : feats) out.push_back(stack_rows(batch_row(f, 0), 2));
    return out;
}

Tensor region01_tensor(const Image& region) {
    if (region.c != 1)
        throw Error(ErrKind::validation, "region must have one channel");
    Tensor r({1, 1, region.h, region.w});
    for (size_t i = 0; i < region.px.size(); ++i) {
        const double v = region.px[i];
        if (v != 0.0 && v != 1.0)
            throw Error(ErrKind::validation, "region values must be 0 or 1");
        r.v[i] = v;
    }
    return r;
}

Tensor to_latent_pm1(const Tensor& r01) {
    Tensor out(r01.dims);
    for (size_t i = 0; i < r01.v.size(); ++i) out.v[i] = 2.0 * r01.v[i] - 1.0;
    return out;
}

GenResult run_sampling(const VisualModule& vm, const TextModule* text_mod,
                       const codec::Codec& img_codec, const codec::Codec* text_codec,
                       const diffusion::Schedule& sched, const config::PipelineConfig& cfg,
                       const GenSpec& spec, const SampleParams& p, const Image* known,
                       const Image* region) {
    nn::NoGradGuard ng;
    const int H = cfg.data.canvas, W = cfg.data.canvas;
    if (img_codec.channels() != vm.latent_ch)
        throw Error(ErrKind::config, "codec channels do not match the visual module");

    const bool use_text = vm.inject && !spec.words.empty();
    if (use_text && (!text_mod || !text_codec))
        throw Error(ErrKind::config,
                    "keyword boxes were given but no text module / codec is available");

    const Image mask = glyphgen::render_mask(spec.words, H, W);
    const Tensor m1 = codec::mask_batch({&mask});
    const Tensor m2 = stack_rows(m1, 2);
    const Tensor r01 = region ? region01_tensor(*region) : Tensor({1, 1, H, W}, 1.0);
    if (r01.dim(2) != H || r01.dim(3) != W)
        throw Error(ErrKind::validation, "region size does not match the canvas");
    const Tensor r2 = stack_rows(to_latent_pm1(r01), 2);

    Tensor known_lat;
    if (known) {
        if (known->c != img_codec.channels() || known->h != H || known->w != W)
            throw Error(ErrKind::validation, "known image size does not match the canvas");
        known_lat = img_codec.encode(*known);
    }

    const KeywordEncoding prompt_c = textmodule::encode_keywords(
        textmodule::fit_keywords(scenes::caption_words(spec.prompt), vm.max_tokens),
        vm.max_tokens);
    const KeywordEncoding prompt_u = textmodule::encode_keywords({}, vm.max_tokens);
    KeywordEncoding kw_c, kw_u;
    if (use_text) {
        kw_c = textmodule::encode_keywords(
            textmodule::fit_keywords(textmodule::reading_order_words(spec.words),
                                     text_mod->max_tokens),
            text_mod->max_tokens);
        kw_u = textmodule::encode_keywords({}, text_mod->max_tokens);
    }

    Rng rng_vis(mix64(p.seed, fnv1a64("gen-visual")));
    Rng rng_text(mix64(p.seed, fnv1a64("gen-text")));
    Tensor x = diffusion::randn_tensor({1, vm.latent_ch, H, W}, rng_vis);
    Tensor z;
    if (use_text) z = diffusion::randn_tensor({1, text_mod->latent_ch, H, W}, rng_text);

    const std::vector<int> ts = diffusion::strided_timesteps(sched.T, p.steps);
    for (size_t i = 0; i < ts.size(); ++i) {
        const int t = ts[i];
        const int t_prev = (i + 1 < ts.size()) ? ts[i + 1] : 0;

        std::vector<Tensor> feats2;
        if (use_text) {
            // The glyph chain's features at the current level feed the scene
            // step below; only the conditional row is injected.
            auto fp = text_mod->denoise_with_features(stack_rows(z, 2), m2, {kw_c, kw_u},
                                                      {t, t}, vm.mode);
            feats2 = cond_features_pair(fp.features);
            const Tensor eps_text = diffusion::cfg_combine(batch_row(fp.eps, 1),
                                                           batch_row(fp.eps, 0), p.omega);
            z = diffusion::ddpm_step(z, eps_text, t, t_prev, sched, rng_text);
        }

        const Tensor e2 = vm.denoise(stack_rows(x, 2), m2, r2, {prompt_c, prompt_u}, {t, t},
                                     use_text ? &feats2 : nullptr);
        const Tensor eps_vis =
            diffusion::cfg_combine(batch_row(e2, 1), batch_row(e2, 0), p.omega);
        x = diffusion::ddpm_step(x, eps_vis, t, t_prev, sched, rng_vis);
        if (known) x = diffusion::inpaint_known_mix(x, known_lat, r01, t_prev, sched, rng_vis);
    }

    GenResult res;
    res.image = img_codec.decode(x, 0);
    if (use_text) res.text_image = text_codec->decode(z, 0);
    return res;
}

}  // namespace

VisualTrainStats train_visual(VisualModule& vm, const TextModule* text_mod,
                              const codec::Codec& img_codec, const codec::Codec* text_codec,
                              const config::PipelineConfig& cfg, const SceneStream& stream,
                              const std::filesystem::path& ckpt_out, const TrainLog& log) {
    if (img_codec.channels() != vm.latent_ch)
        throw Error(ErrKind::config, "codec channels do not match the visual module");
    if (vm.inject) {
        if (!text_mod || !text_codec)
            throw Error(ErrKind::config,
                        "feature injection is enabled but no text module / codec was provided");
        if (text_codec->channels() != text_mod->latent_ch)
            throw Error(ErrKind::config, "codec channels do not match the text module");
    }
    const auto sched = diffusion::build_schedule(cfg.schedule.T, cfg.schedule.beta_min,
                                                 cfg.schedule.beta_max);
    const auto& st = cfg.visual.train;
    nn::ParamList ps = vm.params();
    nn::AdamW opt;
    opt.lr = st.lr;

    VisualTrainStats stats;
    nn::ParamList frozen;
    if (text_mod) {
        frozen = text_mod->params();
        nn::set_trainable(frozen, false);
        stats.text_hash_before = nn::params_hash(frozen);
    }

    Rng rng(mix64(cfg.seed, fnv1a64("train-visual")));
    const int B = st.batch;
    const int H = cfg.data.canvas;
    const KeywordEncoding uncond = textmodule::encode_keywords({}, vm.max_tokens);

    const int64_t warmup = std::min<int64_t>(20, st.steps);
    double warm_sum = 0;
    double ema = 0;
    for (int64_t step = 0; step < st.steps; ++step) {
        std::vector<scenes::Scene> batch;
        batch.reserve(size_t(B));
        for (int b = 0; b < B; ++b) batch.push_back(stream(step * B + b));

        std::vector<const Image*> imgs, timgs, masks, rptrs;
        std::vector<Image> regions;
        regions.reserve(size_t(B));
        std::vector<int> ts(static_cast<size_t>(B), 0);
        std::vector<KeywordEncoding> prompt_encs, kw_encs;
        for (int b = 0; b < B; ++b) {
            const auto& sc = batch[size_t(b)];
            imgs.push_back(&sc.image);
            timgs.push_back(&sc.text_image);
            masks.push_back(&sc.mask);
            ts[size_t(b)] = 1 + rng.uniform_int(sched.T);
            if (rng.uniform() < cfg.visual.p_drop)
                prompt_encs.push_back(uncond);
            else
                prompt_encs.push_back(textmodule::encode_keywords(
                    textmodule::fit_keywords(scenes::caption_words(sc.caption), vm.max_tokens),
                    vm.max_tokens));
            if (vm.inject)
                kw_encs.push_back(textmodule::encode_keywords(
                    textmodule::fit_keywords(textmodule::reading_order_words(sc.words),
                                             text_mod->max_tokens),
                    text_mod->max_tokens));
            if (rng.uniform() < cfg.visual.inpaint_prob)
                regions.push_back(random_region(rng, H, H));
            else
                regions.push_back(Image(1, H, H, 1.0));
        }
        for (const auto& r : regions) rptrs.push_back(&r);

        Tensor z0 = codec::encode_batch(img_codec, imgs);
        Tensor m = codec::mask_batch(masks);
        Tensor r_lat = codec::mask_batch(rptrs);
        // Loss weight: the region itself, so full-generation rows (all-ones
        // region) reduce to plain mse and inpainting rows only score the
        // regenerated area.
        Tensor weight({B, 1, H, H});
        for (size_t i = 0; i < weight.v.size(); ++i) weight.v[i] = 0.5 * (r_lat.v[i] + 1.0);

        Tensor eps = diffusion::randn_tensor(z0.dims, rng);
        Tensor xt(z0.dims);
        for (int b = 0; b < B; ++b) {
            const double a = std::sqrt(sched.alpha_bar[ts[size_t(b)]]);
            const double s = std::sqrt(1.0 - sched.alpha_bar[ts[size_t(b)]]);
            const size_t n = z0.v.size() / size_t(B), off = size_t(b) * n;
            for (size_t i = 0; i < n; ++i) xt.v[off + i] = a * z0.v[off + i] + s * eps.v[off + i];
        }

        std::vector<Tensor> feats;
        if (vm.inject) {
            // The glyph chain gets its own independent corruption at the same
            // per-sample timestep.
            Tensor z0t = codec::encode_batch(*text_codec, timgs);
            Tensor epst = diffusion::randn_tensor(z0t.dims, rng);
            Tensor zt(z0t.dims);
            for (int b = 0; b < B; ++b) {
                const double a = std::sqrt(sched.alpha_bar[ts[size_t(b)]]);
                const double s = std::sqrt(1.0 - sched.alpha_bar[ts[size_t(b)]]);
                const size_t n = z0t.v.size() / size_t(B), off = size_t(b) * n;
                for (size_t i = 0; i < n; ++i)
                    zt.v[off + i] = a * z0t.v[off + i] + s * epst.v[off + i];
            }
            feats = text_mod->denoise_with_features(zt, m, kw_encs, ts, vm.mode).features;
        }

        auto out = vm.forward(nn::make_var(xt, false), nn::make_var(m, false),
                              nn::make_var(r_lat, false), ts, prompt_encs,
                              vm.inject ? &feats : nullptr);
        Var loss = nn::masked_mse(out.eps, eps, weight);
        const double lv = loss->val.v[0];

        opt.zero_grad(ps);
        nn::backward(loss);
        opt.step(ps);

        if (step < warmup) warm_sum += lv;
        if (step + 1 == warmup) stats.initial_avg = warm_sum / double(warmup);
        ema = (step == 0) ? lv : 0.98 * ema + 0.02 * lv;
        if (step >= warmup && stats.initial_avg > 0 && ema > 10.0 * stats.initial_avg)
            throw Error(ErrKind::internal,
                        "training diverged: loss ema " + std::to_string(ema) +
                            " exceeds 10x initial average " + std::to_string(stats.initial_avg));
        if (log && (step % 50 == 0 || step + 1 == st.steps)) log(step, lv, opt.lr);
        stats.final_ema = ema;
    }
    stats.steps = st.steps;

    if (text_mod) {
        stats.text_hash_after = nn::params_hash(frozen);
        if (stats.text_hash_after != stats.text_hash_before)
            throw Error(ErrKind::internal,
                        "frozen text module parameters changed during visual training");
    }

    nn::CheckpointMeta meta;
    meta.kind = "visual";
    meta.config_hash = cfg.hash();
    meta.stage = 0;
    meta.step = st.steps;
    meta.extra = {{"latent_ch", vm.latent_ch},
                  {"max_tokens", vm.max_tokens},
                  {"injection_mode", unet::injection_mode_name(vm.mode)},
                  {"inject", vm.inject},
                  {"feature_sites", int(vm.adapters.size())},
                  {"param_count", vm.param_count()}};
    nn::save_checkpoint(ckpt_out, meta, vm.params());
    return stats;
}

void load_visual_checkpoint(VisualModule& vm, const std::filesystem::path& path) {
    nn::CheckpointMeta meta = nn::peek_checkpoint(path);
    if (meta.kind != "visual")
        throw Error(ErrKind::dependency, "checkpoint " + path.string() +
                                             " holds a '" + meta.kind +
                                             "' model, expected 'visual'; run train-visual first");
    const std::string mode_name = meta.extra.value("injection_mode", std::string());
    if (mode_name != unet::injection_mode_name(vm.mode))
        throw Error(ErrKind::config, "checkpoint was trained with injection mode '" + mode_name +
                                         "' but this module uses '" +
                                         unet::injection_mode_name(vm.mode) + "'");
    if (meta.extra.value("inject", true) != vm.inject)
        throw Error(ErrKind::config,
                    "checkpoint and module disagree on whether feature injection is enabled");
    nn::load_checkpoint(path, vm.params());
}

GenResult generate(const VisualModule& vm, const TextModule* text_mod,
                   const codec::Codec& img_codec, const codec::Codec* text_codec,
                   const diffusion::Schedule& sched, const config::PipelineConfig& cfg,
                   const GenSpec& spec, const SampleParams& p) {
    return run_sampling(vm, text_mod, img_codec, text_codec, sched, cfg, spec, p, nullptr,
                        nullptr);
}

GenResult inpaint(const VisualModule& vm, const TextModule* text_mod,
                  const codec::Codec& img_codec, const codec::Codec* text_codec,
                  const diffusion::Schedule& sched, const config::PipelineConfig& cfg,
                  const Image& known, const Image& region, const GenSpec& spec,
                  const SampleParams& p) {
    return run_sampling(vm, text_mod, img_codec, text_codec, sched, cfg, spec, p, &known,
                        &region);
}

}  // namespace gf::visualmodule
