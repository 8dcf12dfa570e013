#include "gf/textmodule.hpp"

#include <algorithm>
#include <cmath>

namespace gf::textmodule {

using nn::Tensor;
using nn::Var;

int char_token(char c) {
    if (c >= 'A' && c <= 'Z') return 1 + (c - 'A');
    if (c >= '0' && c <= '9') return 27 + (c - '0');
    throw Error(ErrKind::validation, std::string("unsupported character '") + c + "'");
}

char token_char(int id) {
    if (id >= 1 && id <= 26) return char('A' + (id - 1));
    if (id >= 27 && id <= 36) return char('0' + (id - 27));
    throw Error(ErrKind::validation, "token " + std::to_string(id) + " is not a character");
}

KeywordEncoding encode_keywords(const std::vector<std::string>& words, int max_tokens) {
    if (max_tokens < 1) throw Error(ErrKind::config, "max_tokens must be positive");
    KeywordEncoding enc;
    enc.ids.assign(size_t(max_tokens), kTokPad);
    if (words.empty()) {
        enc.ids[0] = kTokUncond;
        return enc;
    }
    size_t n = 0;
    auto push = [&](int id) {
        if (n >= enc.ids.size())
            throw Error(ErrKind::validation, "keyword encoding exceeds max length " +
                                                 std::to_string(max_tokens));
        enc.ids[n++] = id;
    };
    for (size_t w = 0; w < words.size(); ++w) {
        if (words[w].empty()) throw Error(ErrKind::validation, "empty keyword");
        if (w > 0) push(kTokSep);
        for (char c : words[w]) push(char_token(c));
    }
    push(kTokEot);
    return enc;
}

std::vector<std::string> fit_keywords(const std::vector<std::string>& words, int max_tokens) {
    std::vector<std::string> out;
    int used = 0;  // tokens before the terminator
    for (const auto& w : words) {
        const int need = int(w.size()) + (out.empty() ? 0 : 1);
        if (used + need + 1 > max_tokens) break;
        used += need;
        out.push_back(w);
    }
    return out;
}

std::vector<std::string> decode_keywords(const KeywordEncoding& enc) {
    if (enc.ids.empty()) throw Error(ErrKind::validation, "empty keyword encoding");
    auto only_pad_after = [&](size_t from) {
        for (size_t i = from; i < enc.ids.size(); ++i)
            if (enc.ids[i] != kTokPad)
                throw Error(ErrKind::validation, "tokens after end of keyword sequence");
    };
    if (enc.ids[0] == kTokUncond) {
        only_pad_after(1);
        return {};
    }
    std::vector<std::string> words;
    std::string cur;
    size_t i = 0;
    for (; i < enc.ids.size(); ++i) {
        const int id = enc.ids[i];
        if (id == kTokEot) break;
        if (id == kTokSep) {
            if (cur.empty())
                throw Error(ErrKind::validation, "separator without a preceding word");
            words.push_back(cur);
            cur.clear();
        } else {
            cur += token_char(id);  // throws on pad/uncond mid-sequence
        }
    }
    if (i == enc.ids.size())
        throw Error(ErrKind::validation, "keyword sequence missing terminator");
    if (cur.empty()) throw Error(ErrKind::validation, "terminator without a final word");
    words.push_back(cur);
    only_pad_after(i + 1);
    return words;
}

std::vector<std::string> reading_order_words(
    const std::vector<glyphgen::WordPlacement>& words) {
    std::vector<const glyphgen::WordPlacement*> ps;
    ps.reserve(words.size());
    for (const auto& w : words) ps.push_back(&w);
    std::stable_sort(ps.begin(), ps.end(),
                     [](const glyphgen::WordPlacement* a, const glyphgen::WordPlacement* b) {
                         if (a->y != b->y) return a->y < b->y;
                         return a->x < b->x;
                     });
    std::vector<std::string> out;
    out.reserve(ps.size());
    for (const auto* p : ps) out.push_back(p->text);
    return out;
}

// ---------------------------------------------------------------------------

TextModule::TextModule(const config::ArchCfg& arch, int latent_channels, int max_tokens_,
                       uint64_t seed)
    : net(arch.to_unet_spec(2 * latent_channels, latent_channels), seed),
      max_tokens(max_tokens_),
      latent_ch(latent_channels) {
    if (arch.ctx_dim <= 0)
        throw Error(ErrKind::config, "text module requires cross-attention (ctx_dim > 0)");
    Rng rng(mix64(seed, fnv1a64("text-token-encoder")));
    tokenc = unet::TokenEncoder(kTokVocab, max_tokens, arch.ctx_dim, rng);
}

nn::ParamList TextModule::params() const {
    nn::ParamList ps = net.params("text.unet");
    tokenc.collect("text.tok", ps);
    return ps;
}

int64_t TextModule::param_count() const {
    int64_t n = 0;
    for (const auto& p : params()) n += int64_t(p.p->val.v.size());
    return n;
}

Var TextModule::ctx(const std::vector<KeywordEncoding>& encs) const {
    if (encs.empty()) throw Error(ErrKind::validation, "no keyword encodings");
    std::vector<int> ids;
    ids.reserve(encs.size() * size_t(max_tokens));
    for (const auto& e : encs) {
        if (int(e.ids.size()) != max_tokens)
            throw Error(ErrKind::validation, "keyword encoding length mismatch");
        ids.insert(ids.end(), e.ids.begin(), e.ids.end());
    }
    return tokenc.forward(ids, int(encs.size()));
}

unet::UNet::Out TextModule::forward(const Var& zt, const Var& m, const std::vector<int>& ts,
                                    const std::vector<KeywordEncoding>& encs,
                                    bool want_sites) const {
    Var x = nn::concat_ch(zt, m);
    return net.forward(x, ts, ctx(encs), {}, want_sites);
}

nn::Tensor TextModule::denoise(const Tensor& zt, const Tensor& m,
                               const std::vector<std::string>& words, int t) const {
    nn::NoGradGuard ng;
    auto out = forward(nn::make_const(zt), nn::make_const(m), {t},
                       {encode_keywords(fit_keywords(words, max_tokens), max_tokens)}, false);
    return out.eps->val;
}

TextModule::FeaturePass TextModule::denoise_with_features(
    const Tensor& zt, const Tensor& m, const std::vector<KeywordEncoding>& encs,
    const std::vector<int>& ts, unet::InjectionMode mode) const {
    nn::NoGradGuard ng;
    auto out = forward(nn::make_const(zt), nn::make_const(m), ts, encs, true);
    FeaturePass fp;
    fp.eps = out.eps->val;
    for (int site : net.feature_sites(mode))
        fp.features.push_back(out.sites[size_t(site)]->val);
    return fp;
}

// ---------------------------------------------------------------------------

SampleStream word_stream(const config::PipelineConfig& cfg) {
    auto g = cfg.data.to_glyph_config();
    g.vocab = cfg.resolved_vocab();
    const uint64_t base = mix64(cfg.seed, fnv1a64("word-stream"));
    return [g, base](int64_t i) {
        return glyphgen::sample_word_level(mix64(base, uint64_t(i)), g);
    };
}

SampleStream sentence_stream(const config::PipelineConfig& cfg) {
    auto g = cfg.data.to_glyph_config();
    g.vocab = cfg.resolved_vocab();
    const uint64_t base = mix64(cfg.seed, fnv1a64("sentence-stream"));
    return [g, base](int64_t i) {
        return glyphgen::sample_sentence_level(mix64(base, uint64_t(i)), g);
    };
}

TrainStats train_text(TextModule& tm, const codec::Codec& cdc,
                      const config::PipelineConfig& cfg, int stage,
                      const config::StageCfg& stage_cfg, const SampleStream& stream,
                      const std::filesystem::path& ckpt_out, const TrainLog& log) {
    if (cdc.channels() != tm.latent_ch)
        throw Error(ErrKind::config, "codec channels do not match the text module");
    const auto sched = diffusion::build_schedule(cfg.schedule.T, cfg.schedule.beta_min,
                                                 cfg.schedule.beta_max);
    nn::ParamList ps = tm.params();
    nn::AdamW opt;
    opt.lr = stage_cfg.lr;

    Rng rng(mix64(cfg.seed ^ (uint64_t(stage) << 32), fnv1a64("train-text")));
    const int B = stage_cfg.batch;
    const KeywordEncoding uncond = encode_keywords({}, tm.max_tokens);

    const int64_t warmup = std::min<int64_t>(20, stage_cfg.steps);
    double warm_sum = 0;
    TrainStats stats;
    double ema = 0;
    for (int64_t step = 0; step < stage_cfg.steps; ++step) {
        std::vector<glyphgen::WordSample> batch;
        batch.reserve(size_t(B));
        std::vector<const Image*> imgs, masks;
        for (int b = 0; b < B; ++b) batch.push_back(stream(step * B + b));
        for (const auto& s : batch) {
            imgs.push_back(&s.image);
            masks.push_back(&s.mask);
        }
        Tensor z0 = codec::encode_batch(cdc, imgs);
        Tensor m = codec::mask_batch(masks);

        std::vector<int> ts(static_cast<size_t>(B), 0);
        std::vector<KeywordEncoding> encs;
        encs.reserve(size_t(B));
        for (int b = 0; b < B; ++b) {
            ts[size_t(b)] = 1 + rng.uniform_int(sched.T);
            if (rng.uniform() < cfg.text.p_drop)
                encs.push_back(uncond);
            else
                encs.push_back(encode_keywords(
                    fit_keywords(reading_order_words(batch[size_t(b)].words), tm.max_tokens),
                    tm.max_tokens));
        }
        Tensor eps = diffusion::randn_tensor(z0.dims, rng);
        Tensor zt(z0.dims);
        for (int b = 0; b < B; ++b) {
            const double a = std::sqrt(sched.alpha_bar[ts[size_t(b)]]);
            const double s = std::sqrt(1.0 - sched.alpha_bar[ts[size_t(b)]]);
            const size_t n = z0.v.size() / size_t(B), off = size_t(b) * n;
            for (size_t i = 0; i < n; ++i)
                zt.v[off + i] = a * z0.v[off + i] + s * eps.v[off + i];
        }

        auto out = tm.forward(nn::make_var(zt, false), nn::make_var(m, false), ts, encs);
        Var loss = nn::mse(out.eps, eps);
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
                            " exceeds 10x initial average " +
                            std::to_string(stats.initial_avg));
        if (log && (step % 50 == 0 || step + 1 == stage_cfg.steps))
            log(step, lv, opt.lr);
        stats.final_ema = ema;
    }
    stats.steps = stage_cfg.steps;

    nn::CheckpointMeta meta;
    meta.kind = "text";
    meta.config_hash = cfg.hash();
    meta.stage = stage;
    meta.step = stage_cfg.steps;
    meta.extra = {{"latent_ch", tm.latent_ch},
                  {"max_tokens", tm.max_tokens},
                  {"param_count", tm.param_count()}};
    nn::save_checkpoint(ckpt_out, meta, tm.params());
    return stats;
}

TrainStats train_stage1(TextModule& tm, const codec::Codec& cdc,
                        const config::PipelineConfig& cfg,
                        const std::filesystem::path& ckpt_out, const TrainLog& log) {
    return train_text(tm, cdc, cfg, 1, cfg.text.stage1, word_stream(cfg), ckpt_out, log);
}

TrainStats train_stage2(TextModule& tm, const codec::Codec& cdc,
                        const config::PipelineConfig& cfg,
                        const std::filesystem::path& stage1_ckpt,
                        const std::filesystem::path& ckpt_out, const TrainLog& log) {
    load_text_checkpoint(tm, stage1_ckpt, 1);
    return train_text(tm, cdc, cfg, 2, cfg.text.stage2, sentence_stream(cfg), ckpt_out,
                      log);
}

void load_text_checkpoint(TextModule& tm, const std::filesystem::path& path,
                          int min_stage) {
    nn::CheckpointMeta meta = nn::peek_checkpoint(path);
    if (meta.kind != "text")
        throw Error(ErrKind::dependency,
                    path.string() + " is a '" + meta.kind + "' checkpoint, expected 'text'");
    if (meta.stage < min_stage)
        throw Error(ErrKind::dependency, path.string() + " is stage " +
                                             std::to_string(meta.stage) +
                                             ", need at least stage " +
                                             std::to_string(min_stage));
    nn::load_checkpoint(path, tm.params());
}

Image sample_text_image(const TextModule& tm, const codec::Codec& cdc,
                        const diffusion::Schedule& sched,
                        const std::vector<std::string>& words, const Image& mask,
                        double omega, int steps, uint64_t seed) {
    nn::NoGradGuard ng;
    const int H = mask.h, W = mask.w;
    Tensor m1 = codec::mask_batch({&mask});
    // conditional and unconditional branches share one batched forward
    Tensor m2({2, 1, H, W});
    std::copy(m1.v.begin(), m1.v.end(), m2.v.begin());
    std::copy(m1.v.begin(), m1.v.end(), m2.v.begin() + m1.v.size());
    const KeywordEncoding cond =
        encode_keywords(fit_keywords(words, tm.max_tokens), tm.max_tokens);
    const KeywordEncoding uncond = encode_keywords({}, tm.max_tokens);

    auto eps_fn = [&](const Tensor& x, int t) {
        Tensor x2({2, tm.latent_ch, H, W});
        std::copy(x.v.begin(), x.v.end(), x2.v.begin());
        std::copy(x.v.begin(), x.v.end(), x2.v.begin() + x.v.size());
        auto out = tm.forward(nn::make_const(x2), nn::make_const(m2), {t, t},
                              {cond, uncond}, false);
        const Tensor& e2 = out.eps->val;
        const size_t n = x.v.size();
        Tensor ec(x.dims), eu(x.dims);
        std::copy(e2.v.begin(), e2.v.begin() + n, ec.v.begin());
        std::copy(e2.v.begin() + n, e2.v.end(), eu.v.begin());
        return diffusion::cfg_combine(eu, ec, omega);
    };

    Rng rng(mix64(seed, fnv1a64("sample-text")));
    Tensor z = diffusion::sample_loop(sched, steps, {1, tm.latent_ch, H, W}, rng, eps_fn);
    return cdc.decode(z, 0);
}

}  // namespace gf::textmodule
