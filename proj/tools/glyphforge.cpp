// glyphforge: command-line surface for the glyph scene diffusion pipeline.
//
// One structured JSON config drives every command; flags override config
// values (flags win) and every command stamps its artifacts with the config
// hash plus a run manifest, so anything on disk is reproducible from
// (command, config hash, seed). All commands are single-threaded and
// deterministic per seed.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "gf/codec.hpp"
#include "gf/config.hpp"
#include "gf/core.hpp"
#include "gf/diffusion.hpp"
#include "gf/evalbench.hpp"
#include "gf/glyphgen.hpp"
#include "gf/promptintel.hpp"
#include "gf/scenes.hpp"
#include "gf/textmodule.hpp"
#include "gf/visualmodule.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace gf;

namespace {

int exit_code_for(ErrKind k) {
    switch (k) {
        case ErrKind::config: return 2;
        case ErrKind::validation: return 3;
        case ErrKind::dependency: return 4;
        case ErrKind::io: return 5;
        case ErrKind::internal: return 6;
    }
    return 6;
}

uint64_t tag_seed(uint64_t seed, const std::string& tag) { return mix64(seed, fnv1a64(tag)); }

// Options shared by every subcommand. The config file loads first, then the
// GF_FIXTURE_DIR environment variable, then --set/--seed/--out in flag order.
struct CommonOpts {
    std::string config_path;
    std::vector<std::string> overrides;
    std::string seed;
    std::string out_dir;

    void add_to(CLI::App* cmd) {
        cmd->add_option("--config", config_path, "JSON config file (defaults apply if omitted)")
            ->check(CLI::ExistingFile);
        cmd->add_option("--set", overrides,
                        "override a config value by dotted key, e.g. sampling.omega=2.5")
            ->type_name("KEY=VALUE");
        cmd->add_option("--seed", seed, "override the pipeline seed");
        cmd->add_option("--out", out_dir, "override paths.out_dir");
    }

    config::PipelineConfig resolve() const {
        config::PipelineConfig cfg;
        if (!config_path.empty()) cfg = config::load_config(config_path);
        else cfg.validate();
        if (const char* fd = std::getenv("GF_FIXTURE_DIR"); fd && *fd)
            config::apply_override(cfg, "paths.fixture_dir", fd);
        for (const auto& kv : overrides) {
            const auto eq = kv.find('=');
            if (eq == std::string::npos || eq == 0)
                throw Error(ErrKind::config, "--set expects KEY=VALUE, got '" + kv + "'");
            config::apply_override(cfg, kv.substr(0, eq), kv.substr(eq + 1));
        }
        if (!seed.empty()) config::apply_override(cfg, "seed", seed);
        if (!out_dir.empty()) config::apply_override(cfg, "paths.out_dir", out_dir);
        return cfg;
    }
};

// Canonical artifact locations under paths.out_dir.
struct Layout {
    fs::path out;
    explicit Layout(const config::PipelineConfig& cfg) : out(cfg.paths.out_dir) {}

    fs::path data() const { return out / "data"; }
    fs::path ckpt() const { return out / "ckpt"; }
    fs::path ae_text() const { return ckpt() / "ae-text.ckpt"; }
    fs::path ae_image() const { return ckpt() / "ae-image.ckpt"; }
    fs::path text_stage(int s) const {
        return ckpt() / ("text-stage" + std::to_string(s) + ".ckpt");
    }
    fs::path visual() const { return ckpt() / "visual.ckpt"; }
    fs::path samples() const { return out / "samples"; }
    fs::path inpaints() const { return out / "inpaint"; }
    fs::path keywords() const { return out / "keywords"; }
    fs::path bench_file() const { return out / "bench" / "benchmark.jsonl"; }
    fs::path evals() const { return out / "eval"; }
    fs::path manifests() const { return out / "manifests"; }
};

void require_artifact(const fs::path& p, const std::string& producer) {
    if (!fs::exists(p))
        throw Error(ErrKind::dependency,
                    "missing " + p.string() + "; run `glyphforge " + producer + "` first");
}

// Run manifest: what ran, with which config, what it produced, how long it
// took. Written last so a manifest implies the artifacts beside it.
struct RunManifest {
    const config::PipelineConfig& cfg;
    const Layout& lay;
    std::string slug;
    std::vector<fs::path> artifacts;
    json extra = json::object();
    std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();

    RunManifest(const config::PipelineConfig& c, const Layout& l, std::string s)
        : cfg(c), lay(l), slug(std::move(s)) {}

    void add(const fs::path& p) { artifacts.push_back(p); }

    double finish() {
        const double wall =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        json m;
        m["command"] = slug;
        m["config_hash"] = cfg.hash();
        m["seed"] = cfg.seed;
        m["wall_time_s"] = wall;
        json arts = json::array();
        for (const auto& p : artifacts) arts.push_back(fs::relative(p, lay.out).string());
        m["artifacts"] = arts;
        m["extra"] = extra;
        m["config"] = cfg.to_json();
        fs::create_directories(lay.manifests());
        write_file_atomic(lay.manifests() / (slug + ".json"), m.dump(2) + "\n");
        return wall;
    }
};

void say(const char* cmd, const std::string& msg) {
    std::printf("[%s] %s\n", cmd, msg.c_str());
    std::fflush(stdout);
}

std::string fmtd(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return buf;
}

textmodule::TrainLog progress_log(const char* cmd) {
    return [cmd](int64_t step, double loss, double lr) {
        if (step % 200 == 0 || step < 5)
            std::printf("[%s] step %lld loss %.6f lr %g\n", cmd, (long long)step, loss, lr);
    };
}

// ---------------------------------------------------------------------------
// Codec construction. The identity codec is free; the ae codec loads the
// checkpoints train-ae wrote.

std::unique_ptr<codec::Codec> build_codec(const config::PipelineConfig& cfg, const Layout& lay,
                                          int channels, bool for_text) {
    const std::string which = for_text ? "ae-text" : "ae-image";
    auto c = codec::make_codec(cfg.codec.kind, channels, cfg.codec.hidden,
                               tag_seed(cfg.seed, which + "-init"));
    if (cfg.codec.kind == "ae") {
        const fs::path p = for_text ? lay.ae_text() : lay.ae_image();
        require_artifact(p, "train-ae");
        const auto meta = nn::load_checkpoint(p, c->params("ae."));
        if (meta.kind != which)
            throw Error(ErrKind::config, p.string() + " holds a '" + meta.kind +
                                             "' checkpoint, expected '" + which + "'");
    }
    return c;
}

// Text module restored from a trained checkpoint.
std::unique_ptr<textmodule::TextModule> load_text_module(const config::PipelineConfig& cfg,
                                                         const Layout& lay, int latent_ch,
                                                         int min_stage) {
    const fs::path p = lay.text_stage(min_stage);
    require_artifact(p, "train-text --stage " + std::to_string(min_stage));
    auto tm = std::make_unique<textmodule::TextModule>(cfg.text.arch, latent_ch,
                                                       cfg.text.max_tokens,
                                                       tag_seed(cfg.seed, "text-module-init"));
    textmodule::load_text_checkpoint(*tm, p, min_stage);
    return tm;
}

// Everything `sample`, `inpaint` and `eval` need to draw images.
struct GenStack {
    std::unique_ptr<codec::Codec> text_codec;
    std::unique_ptr<codec::Codec> img_codec;
    std::unique_ptr<textmodule::TextModule> text;
    std::unique_ptr<visualmodule::VisualModule> visual;
    diffusion::Schedule sched;

    const textmodule::TextModule* text_ptr() const { return text.get(); }
    const codec::Codec* text_codec_ptr() const { return text_codec.get(); }
};

GenStack build_gen_stack(const config::PipelineConfig& cfg, const Layout& lay) {
    GenStack g;
    g.img_codec = build_codec(cfg, lay, 3, false);
    if (cfg.visual.inject) {
        g.text_codec = build_codec(cfg, lay, 1, true);
        g.text = load_text_module(cfg, lay, g.text_codec->channels(), 2);
    }
    require_artifact(lay.visual(), "train-visual");
    g.visual = std::make_unique<visualmodule::VisualModule>(
        cfg, g.img_codec->channels(), g.text.get(), tag_seed(cfg.seed, "visual-module-init"));
    visualmodule::load_visual_checkpoint(*g.visual, lay.visual());
    g.sched = diffusion::build_schedule(cfg.schedule.T, cfg.schedule.beta_min,
                                        cfg.schedule.beta_max);
    return g;
}

// Prompt analysis via the configured extractor.
promptintel::PromptAnalysis analyze_prompt(const config::PipelineConfig& cfg,
                                           const std::string& prompt) {
    if (cfg.eval.extractor == "llm") {
        promptintel::LlmClientConfig lc;
        lc.fixture_dir = cfg.paths.fixture_dir;
        return promptintel::llm_extract(prompt, lc, cfg.data.canvas, cfg.data.max_scale);
    }
    return promptintel::rules_analyze(prompt, cfg.data.canvas, cfg.data.max_scale);
}

// ---------------------------------------------------------------------------
// gen-data

struct GenDataOpts {
    CommonOpts common;
    int word_shards = 2;
    int sentence_shards = 2;
    int per_shard = 128;
};

void run_gen_data(const GenDataOpts& o) {
    const auto cfg = o.common.resolve();
    if (o.word_shards < 0 || o.sentence_shards < 0 || o.per_shard < 1)
        throw Error(ErrKind::config, "shard counts must be non-negative, --per-shard positive");
    const Layout lay(cfg);
    RunManifest man(cfg, lay, "gen-data");
    fs::create_directories(lay.data());

    const auto write_kind = [&](const std::string& kind, int shards,
                                const textmodule::SampleStream& stream) {
        for (int s = 0; s < shards; ++s) {
            std::vector<glyphgen::WordSample> batch;
            batch.reserve(size_t(o.per_shard));
            for (int i = 0; i < o.per_shard; ++i)
                batch.push_back(stream(int64_t(s) * o.per_shard + i));
            char name[64];
            std::snprintf(name, sizeof name, "%s-%03d", kind.c_str(), s);
            const fs::path bin = lay.data() / (std::string(name) + ".bin");
            const fs::path meta = lay.data() / (std::string(name) + ".json");
            glyphgen::write_shard(bin, batch);
            glyphgen::ShardMeta sm;
            sm.kind = kind;
            sm.shard_index = s;
            sm.seed = cfg.seed;
            sm.config_hash = cfg.hash();
            glyphgen::write_shard_manifest(meta, sm, fs::path(bin).filename().string(),
                                           batch.size());
            man.add(bin);
            man.add(meta);
            say("gen-data", std::string(name) + ": " + std::to_string(batch.size()) +
                                " samples -> " + bin.string());
        }
    };
    write_kind("word", o.word_shards, textmodule::word_stream(cfg));
    write_kind("sentence", o.sentence_shards, textmodule::sentence_stream(cfg));
    man.extra = {{"word_shards", o.word_shards},
                 {"sentence_shards", o.sentence_shards},
                 {"per_shard", o.per_shard}};
    say("gen-data", "done in " + fmtd(man.finish()) + "s");
}

// ---------------------------------------------------------------------------
// train-ae

void run_train_ae(const CommonOpts& common) {
    const auto cfg = common.resolve();
    if (cfg.codec.kind != "ae")
        throw Error(ErrKind::config,
                    "codec.kind is '" + cfg.codec.kind +
                        "'; train-ae only applies to the 'ae' codec (set codec.kind=ae)");
    const Layout lay(cfg);
    RunManifest man(cfg, lay, "train-ae");
    fs::create_directories(lay.ckpt());

    const auto train_one = [&](const std::string& which, int channels,
                               const std::function<Image(int64_t)>& stream,
                               const fs::path& out) {
        codec::ConvAutoencoder ae(channels, cfg.codec.hidden,
                                  tag_seed(cfg.seed, which + "-init"));
        const auto log = [&](int64_t step, double loss) {
            if (step % 100 == 0 || step + 1 == cfg.codec.train_steps)
                std::printf("[train-ae] %s step %lld loss %.6f\n", which.c_str(),
                            (long long)step, loss);
        };
        const auto res =
            codec::train_autoencoder(ae, stream, cfg.codec.train_steps, cfg.codec.batch,
                                     cfg.codec.lr, tag_seed(cfg.seed, which + "-train"), log);
        nn::CheckpointMeta meta;
        meta.kind = which;
        meta.config_hash = cfg.hash();
        meta.step = res.steps;
        nn::save_checkpoint(out, meta, ae.params("ae."));
        man.add(out);
        say("train-ae", which + " final loss " + fmtd(res.final_loss) + " -> " + out.string());
    };
    const auto words = textmodule::word_stream(cfg);
    train_one("ae-text", 1, [words](int64_t i) { return words(i).image; }, lay.ae_text());
    const auto scenes_s = visualmodule::scene_stream(cfg);
    train_one("ae-image", 3, [scenes_s](int64_t i) { return scenes_s(i).image; },
              lay.ae_image());
    say("train-ae", "done in " + fmtd(man.finish()) + "s");
}

// ---------------------------------------------------------------------------
// train-text

struct TrainTextOpts {
    CommonOpts common;
    int stage = 1;
};

void run_train_text(const TrainTextOpts& o) {
    const auto cfg = o.common.resolve();
    const Layout lay(cfg);
    RunManifest man(cfg, lay, "train-text-stage" + std::to_string(o.stage));
    fs::create_directories(lay.ckpt());

    auto cdc = build_codec(cfg, lay, 1, true);
    textmodule::TextModule tm(cfg.text.arch, cdc->channels(), cfg.text.max_tokens,
                              tag_seed(cfg.seed, "text-module-init"));
    say("train-text", "stage " + std::to_string(o.stage) + ", " +
                          std::to_string(tm.param_count()) + " parameters");
    textmodule::TrainStats st;
    const fs::path out = lay.text_stage(o.stage);
    if (o.stage == 1) {
        st = textmodule::train_stage1(tm, *cdc, cfg, out, progress_log("train-text"));
    } else {
        require_artifact(lay.text_stage(1), "train-text --stage 1");
        st = textmodule::train_stage2(tm, *cdc, cfg, lay.text_stage(1), out,
                                      progress_log("train-text"));
    }
    man.add(out);
    man.extra = {{"stage", o.stage},
                 {"steps", st.steps},
                 {"initial_avg", st.initial_avg},
                 {"final_ema", st.final_ema}};
    say("train-text", "loss " + fmtd(st.initial_avg) + " -> " + fmtd(st.final_ema) + " over " +
                          std::to_string(st.steps) + " steps; wrote " + out.string());
    say("train-text", "done in " + fmtd(man.finish()) + "s");
}

// ---------------------------------------------------------------------------
// train-visual

void run_train_visual(const CommonOpts& common) {
    const auto cfg = common.resolve();
    const Layout lay(cfg);
    RunManifest man(cfg, lay, "train-visual");
    fs::create_directories(lay.ckpt());

    auto img_codec = build_codec(cfg, lay, 3, false);
    std::unique_ptr<codec::Codec> text_codec;
    std::unique_ptr<textmodule::TextModule> text;
    if (cfg.visual.inject) {
        text_codec = build_codec(cfg, lay, 1, true);
        text = load_text_module(cfg, lay, text_codec->channels(), 2);
        say("train-visual", "injecting text features, mode " + cfg.visual.injection_mode);
    } else {
        say("train-visual", "monolithic baseline: no text-feature injection");
    }
    visualmodule::VisualModule vm(cfg, img_codec->channels(), text.get(),
                                  tag_seed(cfg.seed, "visual-module-init"));
    say("train-visual", std::to_string(vm.param_count()) + " parameters");
    const auto st = visualmodule::train_visual(vm, text.get(), *img_codec, text_codec.get(),
                                               cfg, visualmodule::scene_stream(cfg),
                                               lay.visual(), progress_log("train-visual"));
    man.add(lay.visual());
    man.extra = {{"steps", st.steps},
                 {"initial_avg", st.initial_avg},
                 {"final_ema", st.final_ema},
                 {"text_hash_before", hex64(st.text_hash_before)},
                 {"text_hash_after", hex64(st.text_hash_after)}};
    say("train-visual", "loss " + fmtd(st.initial_avg) + " -> " + fmtd(st.final_ema) +
                            "; text params " +
                            (st.text_hash_before == st.text_hash_after ? "frozen" : "CHANGED"));
    say("train-visual", "done in " + fmtd(man.finish()) + "s");
}

// ---------------------------------------------------------------------------
// sample

struct SampleOpts {
    CommonOpts common;
    std::string prompt;
    int count = 1;
};

void run_sample(const SampleOpts& o) {
    const auto cfg = o.common.resolve();
    if (o.count < 1) throw Error(ErrKind::config, "--count must be positive");
    const Layout lay(cfg);
    RunManifest man(cfg, lay, "sample-s" + std::to_string(cfg.seed));
    fs::create_directories(lay.samples());

    const auto stack = build_gen_stack(cfg, lay);
    const auto an = analyze_prompt(cfg, o.prompt);
    visualmodule::GenSpec spec;
    spec.prompt = o.prompt;
    spec.words = promptintel::to_placements(an, cfg.data.canvas);
    std::string kwlist;
    for (const auto& k : an.keywords) kwlist += (kwlist.empty() ? "" : " ") + k;
    say("sample", "keywords (" + std::string(promptintel::source_name(an.source)) +
                      "): " + (kwlist.empty() ? "<none>" : kwlist));

    for (int k = 0; k < o.count; ++k) {
        visualmodule::SampleParams p;
        p.omega = cfg.sampling.omega;
        p.steps = cfg.sampling.steps;
        p.seed = tag_seed(cfg.seed, "sample-" + std::to_string(k));
        const auto res =
            visualmodule::generate(*stack.visual, stack.text_ptr(), *stack.img_codec,
                                   stack.text_codec_ptr(), stack.sched, cfg, spec, p);
        char name[64];
        std::snprintf(name, sizeof name, "sample-s%llu-%02d", (unsigned long long)cfg.seed, k);
        const fs::path img_path = lay.samples() / (std::string(name) + ".ppm");
        save_image(res.image, img_path);
        man.add(img_path);
        if (res.text_image.numel()) {
            const fs::path tpath = lay.samples() / (std::string(name) + "-text.pgm");
            save_image(res.text_image, tpath);
            man.add(tpath);
        }
        say("sample", img_path.string());
    }
    man.extra = {{"prompt", o.prompt},
                 {"keywords", an.keywords},
                 {"source", promptintel::source_name(an.source)},
                 {"count", o.count},
                 {"omega", cfg.sampling.omega},
                 {"steps", cfg.sampling.steps}};
    say("sample", "done in " + fmtd(man.finish()) + "s");
}

// ---------------------------------------------------------------------------
// inpaint

struct InpaintOpts {
    CommonOpts common;
    std::string image_path;
    std::vector<int> region;  // x y w h
    std::string prompt;
};

void run_inpaint(const InpaintOpts& o) {
    const auto cfg = o.common.resolve();
    const Layout lay(cfg);
    RunManifest man(cfg, lay, "inpaint-s" + std::to_string(cfg.seed));
    fs::create_directories(lay.inpaints());

    Image known = load_image(o.image_path);
    if (known.c == 1) {
        Image rgb(3, known.h, known.w);
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < known.h; ++y)
                for (int x = 0; x < known.w; ++x) rgb.at(c, y, x) = known.at(0, y, x);
        known = rgb;
    }
    if (known.h != cfg.data.canvas || known.w != cfg.data.canvas)
        throw Error(ErrKind::validation,
                    "input image is " + std::to_string(known.w) + "x" +
                        std::to_string(known.h) + ", config canvas is " +
                        std::to_string(cfg.data.canvas));
    const int rx = o.region[0], ry = o.region[1], rw = o.region[2], rh = o.region[3];
    if (rw < 1 || rh < 1 || rx < 0 || ry < 0 || rx + rw > known.w || ry + rh > known.h)
        throw Error(ErrKind::validation, "--region rectangle falls outside the image");
    Image region(1, known.h, known.w, 0.0);
    for (int y = ry; y < ry + rh; ++y)
        for (int x = rx; x < rx + rw; ++x) region.at(0, y, x) = 1.0;

    const auto stack = build_gen_stack(cfg, lay);
    const auto an = analyze_prompt(cfg, o.prompt);
    visualmodule::GenSpec spec;
    spec.prompt = o.prompt;
    spec.words = promptintel::to_placements(an, cfg.data.canvas);

    visualmodule::SampleParams p;
    p.omega = cfg.sampling.omega;
    p.steps = cfg.sampling.steps;
    p.seed = tag_seed(cfg.seed, "inpaint-0");
    const auto res =
        visualmodule::inpaint(*stack.visual, stack.text_ptr(), *stack.img_codec,
                              stack.text_codec_ptr(), stack.sched, cfg, known, region, spec, p);
    char name[64];
    std::snprintf(name, sizeof name, "inpaint-s%llu.ppm", (unsigned long long)cfg.seed);
    const fs::path out = lay.inpaints() / name;
    save_image(res.image, out);
    man.add(out);
    man.extra = {{"image", o.image_path},
                 {"region", o.region},
                 {"prompt", o.prompt},
                 {"keywords", an.keywords}};
    say("inpaint", out.string());
    say("inpaint", "done in " + fmtd(man.finish()) + "s");
}

// ---------------------------------------------------------------------------
// extract-keywords

struct ExtractOpts {
    CommonOpts common;
    std::string prompt;
};

void run_extract(const ExtractOpts& o) {
    const auto cfg = o.common.resolve();
    const Layout lay(cfg);
    RunManifest man(cfg, lay, "extract-keywords");
    fs::create_directories(lay.keywords());

    const auto an = analyze_prompt(cfg, o.prompt);
    json out;
    out["prompt"] = an.prompt;
    out["source"] = promptintel::source_name(an.source);
    out["degraded"] = an.degraded;
    json kws = json::array();
    for (size_t i = 0; i < an.keywords.size(); ++i) {
        json k{{"word", an.keywords[i]}};
        if (i < an.boxes.size()) {
            k["x"] = an.boxes[i].x;
            k["y"] = an.boxes[i].y;
            k["w"] = an.boxes[i].w;
            k["h"] = an.boxes[i].h;
        }
        kws.push_back(k);
    }
    out["keywords"] = kws;
    const fs::path path = lay.keywords() / (hex64(fnv1a64(o.prompt)) + ".json");
    write_file_atomic(path, out.dump(2) + "\n");
    man.add(path);
    man.extra = {{"prompt", o.prompt}, {"keyword_count", an.keywords.size()}};

    for (size_t i = 0; i < an.keywords.size(); ++i) {
        std::string line = an.keywords[i];
        if (i < an.boxes.size())
            line += "  x=" + fmtd(an.boxes[i].x) + " y=" + fmtd(an.boxes[i].y) +
                    " w=" + fmtd(an.boxes[i].w) + " h=" + fmtd(an.boxes[i].h);
        say("extract-keywords", line);
    }
    if (an.keywords.empty()) say("extract-keywords", "<no keywords found>");
    say("extract-keywords", "wrote " + path.string());
    say("extract-keywords", "done in " + fmtd(man.finish()) + "s");
}

// ---------------------------------------------------------------------------
// bench-build

void run_bench_build(const CommonOpts& common) {
    const auto cfg = common.resolve();
    const Layout lay(cfg);
    RunManifest man(cfg, lay, "bench-build");
    const auto cases = evalbench::build_benchmark(cfg.eval.cases, cfg.seed,
                                                  evalbench::default_templates(),
                                                  cfg.resolved_vocab());
    fs::create_directories(lay.bench_file().parent_path());
    evalbench::write_benchmark(lay.bench_file(), cases);
    man.add(lay.bench_file());
    int styles[3] = {0, 0, 0};
    for (const auto& c : cases) ++styles[int(c.style)];
    man.extra = {{"cases", cases.size()},
                 {"single", styles[0]},
                 {"double", styles[1]},
                 {"unquoted", styles[2]}};
    say("bench-build", std::to_string(cases.size()) + " cases (" + std::to_string(styles[0]) +
                           " single / " + std::to_string(styles[1]) + " double / " +
                           std::to_string(styles[2]) + " unquoted) -> " +
                           lay.bench_file().string());
    say("bench-build", "done in " + fmtd(man.finish()) + "s");
}

// ---------------------------------------------------------------------------
// eval

struct EvalOpts {
    CommonOpts common;
    std::string sweep;  // comma-separated omegas; empty = sampling.omega only
    int limit_cases = 0;
    bool frechet = false;
};

std::vector<double> parse_sweep(const std::string& s) {
    std::vector<double> out;
    size_t pos = 0;
    while (pos <= s.size()) {
        const size_t comma = std::min(s.find(',', pos), s.size());
        const std::string tok = s.substr(pos, comma - pos);
        if (!tok.empty()) {
            try {
                size_t used = 0;
                const double v = std::stod(tok, &used);
                if (used != tok.size()) throw std::invalid_argument(tok);
                out.push_back(v);
            } catch (const std::exception&) {
                throw Error(ErrKind::config, "--sweep-omega: '" + tok + "' is not a number");
            }
        }
        pos = comma + 1;
    }
    return out;
}

void run_eval(const EvalOpts& o) {
    const auto cfg = o.common.resolve();
    const Layout lay(cfg);
    RunManifest man(cfg, lay, "eval");
    require_artifact(lay.bench_file(), "bench-build");
    auto bench = evalbench::read_benchmark(lay.bench_file());
    if (o.limit_cases > 0 && size_t(o.limit_cases) < bench.size())
        bench.resize(size_t(o.limit_cases));
    if (bench.empty()) throw Error(ErrKind::validation, "benchmark has no cases");

    const auto stack = build_gen_stack(cfg, lay);
    const auto vocab = cfg.resolved_vocab();

    evalbench::EvalConfig ec;
    ec.canvas = cfg.data.canvas;
    ec.images_per_prompt = cfg.eval.images_per_prompt;
    ec.seed = cfg.seed;
    ec.ocr_threshold = cfg.eval.ocr_iou_threshold;
    ec.max_scale = cfg.data.max_scale;
    ec.vocab = vocab;

    const evalbench::Generator gen = [&](const evalbench::GenRequest& rq) {
        visualmodule::GenSpec spec;
        spec.prompt = rq.prompt;
        spec.words = rq.words;
        visualmodule::SampleParams p;
        p.omega = rq.omega;
        p.steps = cfg.sampling.steps;
        p.seed = rq.seed;
        return visualmodule::generate(*stack.visual, stack.text_ptr(), *stack.img_codec,
                                      stack.text_codec_ptr(), stack.sched, cfg, spec, p)
            .image;
    };
    evalbench::Extractor extractor;  // default: rules at ec.canvas / ec.max_scale
    if (cfg.eval.extractor == "llm")
        extractor = [&](const std::string& prompt) { return analyze_prompt(cfg, prompt); };

    // Optional distribution distance: penultimate features of a small glyph
    // classifier, reference statistics from composed scenes.
    evalbench::FeatureFn features;
    std::vector<Image> reference;
    std::unique_ptr<evalbench::FeatureNetResult> fnet;
    if (o.frechet) {
        say("eval", "training the feature net for the distribution distance");
        const auto data =
            evalbench::make_crop_dataset(vocab, 32, 2400, tag_seed(cfg.seed, "eval-feature-data"));
        evalbench::FeatureNetConfig fc;
        fc.width = cfg.eval.feature_dim;
        fc.steps = 3000;
        fc.batch = 16;
        fc.lr = 2e-3;
        fc.seed = tag_seed(cfg.seed, "eval-feature-net");
        fnet = std::make_unique<evalbench::FeatureNetResult>(
            evalbench::train_toy_feature_net(data, int(vocab.size()), fc));
        say("eval", "feature net holdout accuracy " + fmtd(fnet->holdout_accuracy));
        features = [&](const Image& img) { return fnet->net.features(img); };
        auto gc = cfg.data.to_glyph_config();
        gc.vocab = vocab;
        const size_t n_ref = bench.size() * size_t(cfg.eval.images_per_prompt);
        for (size_t i = 0; i < n_ref; ++i)
            reference.push_back(
                scenes::compose_scene(tag_seed(cfg.seed, "eval-ref-" + std::to_string(i)), gc)
                    .image);
        ec.shrinkage = 1e-3;  // small reference sets stay invertible
    }

    std::vector<double> omegas = parse_sweep(o.sweep);
    if (omegas.empty()) omegas.push_back(cfg.sampling.omega);
    std::vector<evalbench::MetricsReport> reports;
    fs::create_directories(lay.evals());
    for (const double omega : omegas) {
        evalbench::EvalConfig e1 = ec;
        e1.omega = omega;
        say("eval", "omega " + fmtd(omega) + ": " + std::to_string(bench.size()) + " cases x " +
                        std::to_string(e1.images_per_prompt) + " images");
        auto rep = evalbench::run_eval(gen, bench, e1, extractor, features,
                                       reference.empty() ? nullptr : &reference);
        const fs::path dir = lay.evals() / ("omega-" + fmtd(omega));
        evalbench::write_report(dir, rep);
        man.add(dir / "report.txt");
        man.add(dir / "cases.jsonl");
        say("eval", "  ocr acc " + fmtd(rep.ocr.accuracy) + " f1 " + fmtd(rep.ocr.f1) +
                        ", keyword acc " + fmtd(rep.keyword_id.accuracy) +
                        (rep.frechet_valid ? ", frechet " + fmtd(rep.frechet) : "") +
                        ", failed " + std::to_string(rep.failed));
        reports.push_back(std::move(rep));
    }
    const fs::path curve = lay.evals() / "curve.tsv";
    evalbench::write_curve_table(curve, reports);
    man.add(curve);
    json js = json::array();
    for (size_t i = 0; i < reports.size(); ++i)
        js.push_back({{"omega", omegas[i]},
                      {"ocr_accuracy", reports[i].ocr.accuracy},
                      {"keyword_accuracy", reports[i].keyword_id.accuracy}});
    man.extra = {{"cases", bench.size()}, {"sweeps", js}};
    say("eval", "curve table -> " + curve.string());
    say("eval", "done in " + fmtd(man.finish()) + "s");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{
        "glyphforge: disentangled glyph/scene diffusion pipeline.\n"
        "Text structure and visual appearance are trained as separate denoisers;\n"
        "the frozen text module feeds features into the scene model at sampling\n"
        "time. Commands run the full pipeline from data generation to evaluation."};
    app.require_subcommand(1);
    app.footer(
        "Environment:\n"
        "  GF_FIXTURE_DIR  overrides paths.fixture_dir (recorded LLM replies)\n"
        "Exit codes: 0 ok, 2 config, 3 validation, 4 missing prerequisite, 5 io,\n"
        "6 internal.");

    GenDataOpts gd;
    auto* c_gd = app.add_subcommand("gen-data", "write word- and sentence-level data shards");
    gd.common.add_to(c_gd);
    c_gd->add_option("--word-shards", gd.word_shards, "number of word-level shards");
    c_gd->add_option("--sentence-shards", gd.sentence_shards,
                     "number of sentence-level shards");
    c_gd->add_option("--per-shard", gd.per_shard, "samples per shard");
    c_gd->callback([&gd] { run_gen_data(gd); });

    CommonOpts ae;
    auto* c_ae = app.add_subcommand("train-ae",
                                    "train the glyph and scene autoencoders (codec.kind=ae)");
    ae.add_to(c_ae);
    c_ae->callback([&ae] { run_train_ae(ae); });

    TrainTextOpts tt;
    auto* c_tt = app.add_subcommand("train-text", "train the text-structure denoiser");
    tt.common.add_to(c_tt);
    c_tt->add_option("--stage", tt.stage, "1 = word-level, 2 = sentence-level fine-tune")
        ->required()
        ->check(CLI::Range(1, 2));
    c_tt->callback([&tt] { run_train_text(tt); });

    CommonOpts tv;
    auto* c_tv = app.add_subcommand(
        "train-visual", "train the scene denoiser against the frozen text module");
    tv.add_to(c_tv);
    c_tv->callback([&tv] { run_train_visual(tv); });

    SampleOpts so;
    auto* c_sm = app.add_subcommand("sample", "generate images for a prompt");
    so.common.add_to(c_sm);
    c_sm->add_option("--prompt", so.prompt, "the full scene prompt")->required();
    c_sm->add_option("--count", so.count, "images to generate");
    c_sm->callback([&so] { run_sample(so); });

    InpaintOpts io;
    auto* c_ip = app.add_subcommand("inpaint", "regenerate a rectangular region of an image");
    io.common.add_to(c_ip);
    c_ip->add_option("--image", io.image_path, "input image (PGM/PPM)")
        ->required()
        ->check(CLI::ExistingFile);
    c_ip->add_option("--region", io.region, "x y w h in pixels")
        ->required()
        ->expected(4);
    c_ip->add_option("--prompt", io.prompt, "prompt guiding the regenerated region");
    c_ip->callback([&io] { run_inpaint(io); });

    ExtractOpts eo;
    auto* c_ek = app.add_subcommand("extract-keywords",
                                    "analyze a prompt into keywords and layout boxes");
    eo.common.add_to(c_ek);
    c_ek->add_option("--prompt", eo.prompt, "the prompt to analyze")->required();
    c_ek->callback([&eo] { run_extract(eo); });

    CommonOpts bb;
    auto* c_bb = app.add_subcommand("bench-build", "generate the quoting benchmark");
    bb.add_to(c_bb);
    c_bb->callback([&bb] { run_bench_build(bb); });

    EvalOpts ev;
    auto* c_ev = app.add_subcommand("eval", "run the benchmark through the pipeline");
    ev.common.add_to(c_ev);
    c_ev->add_option("--sweep-omega", ev.sweep,
                     "comma-separated guidance weights, one report each");
    c_ev->add_option("--cases", ev.limit_cases, "evaluate only the first N benchmark cases");
    c_ev->add_flag("--frechet", ev.frechet,
                   "also compute the feature-distribution distance (trains a small net)");
    c_ev->callback([&ev] { run_eval(ev); });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    } catch (const Error& e) {
        std::fprintf(stderr, "error (%s): %s\n", err_kind_name(e.kind), e.what());
        return exit_code_for(e.kind);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error (internal): %s\n", e.what());
        return exit_code_for(ErrKind::internal);
    }
    return 0;
}
