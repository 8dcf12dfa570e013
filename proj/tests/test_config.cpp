#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cstdio>
#include <fstream>

#include "doctest.h"
#include "gf/config.hpp"

using namespace gf;
using namespace gf::config;
using nlohmann::json;

TEST_CASE("defaults validate and round-trip through json") {
    PipelineConfig c;
    CHECK_NOTHROW(c.validate());
    PipelineConfig back = config_from_json(c.to_json());
    CHECK(back.to_json() == c.to_json());
    CHECK(back.hash() == c.hash());
}

TEST_CASE("unknown keys are rejected at every level") {
    PipelineConfig base;
    json j = base.to_json();
    j["typo_key"] = 1;
    CHECK_THROWS_AS((void)config_from_json(j), Error);

    j = base.to_json();
    j["sampling"]["omgea"] = 5.0;
    CHECK_THROWS_AS((void)config_from_json(j), Error);

    j = base.to_json();
    j["text"]["arch"]["bsae"] = 8;
    CHECK_THROWS_AS((void)config_from_json(j), Error);
}

TEST_CASE("partial configs keep defaults") {
    json j = {{"sampling", {{"omega", 2.5}}}};
    PipelineConfig c = config_from_json(j);
    CHECK(c.sampling.omega == 2.5);
    CHECK(c.sampling.steps == 50);
    CHECK(c.schedule.T == 200);
    CHECK(c.data.canvas == 64);
}

TEST_CASE("invalid values fail with config errors") {
    PipelineConfig base;
    auto broken = [&](const std::string& key, json v) {
        json j = base.to_json();
        j[json::json_pointer(key)] = std::move(v);
        return j;
    };
    CHECK_THROWS_AS((void)config_from_json(broken("/schedule/T", 1)), Error);
    CHECK_THROWS_AS((void)config_from_json(broken("/schedule/beta_min", 0.5)), Error);
    CHECK_THROWS_AS((void)config_from_json(broken("/codec/kind", "vae")), Error);
    CHECK_THROWS_AS((void)config_from_json(broken("/text/p_drop", 1.5)), Error);
    CHECK_THROWS_AS((void)config_from_json(broken("/visual/injection_mode", "middle")),
                    Error);
    CHECK_THROWS_AS((void)config_from_json(broken("/sampling/steps", 500)), Error);
    CHECK_THROWS_AS((void)config_from_json(broken("/data/canvas", 66)), Error);
    CHECK_THROWS_AS((void)config_from_json(broken("/data/vocab", json::array({"cat"}))),
                    Error);
    CHECK_THROWS_AS((void)config_from_json(broken("/sampling/omega", "high")), Error);
}

TEST_CASE("hash tracks content, not formatting") {
    PipelineConfig a, b;
    CHECK(a.hash() == b.hash());
    b.sampling.omega = 5.0;
    CHECK(a.hash() != b.hash());
    b.sampling.omega = 7.5;
    CHECK(a.hash() == b.hash());
    b.paths.out_dir = "elsewhere";  // output location is not part of identity
    CHECK(a.hash() == b.hash());
}

TEST_CASE("overrides win and re-validate") {
    PipelineConfig c;
    apply_override(c, "sampling.omega", "2.5");
    CHECK(c.sampling.omega == 2.5);
    apply_override(c, "visual.injection_mode", "encoder");
    CHECK(c.visual.injection_mode == "encoder");
    apply_override(c, "text.arch.attn_levels", "[1]");
    apply_override(c, "text.arch.mult", "[1,2]");
    CHECK(c.text.arch.mult == std::vector<int>({1, 2}));
    // mult shrink with stale attention levels is caught
    CHECK_THROWS_AS(apply_override(c, "text.arch.mult", "[1]"), Error);
    apply_override(c, "codec.kind", "ae");
    CHECK(c.codec.kind == "ae");
    CHECK_THROWS_AS(apply_override(c, "sampling.omgea", "5"), Error);
    CHECK_THROWS_AS(apply_override(c, "schedule.T", "1"), Error);
    // failed overrides leave the config untouched
    CHECK(c.schedule.T == 200);
}

TEST_CASE("vocab resolution order") {
    PipelineConfig c;
    CHECK(c.resolved_vocab() == glyphgen::default_vocab());
    c.data.vocab = {"AAA", "BBB"};
    CHECK(c.resolved_vocab() == std::vector<std::string>({"AAA", "BBB"}));

    const std::string path = "vocab_test.txt";
    {
        std::ofstream out(path);
        out << "CAT\nDOG\r\n\nRUN \n";
    }
    c.data.vocab_path = path;
    CHECK(c.resolved_vocab() == std::vector<std::string>({"CAT", "DOG", "RUN"}));
    std::remove(path.c_str());
    c.data.vocab_path = "no_such_vocab.txt";
    CHECK_THROWS_AS((void)c.resolved_vocab(), Error);
}

TEST_CASE("config file loading") {
    const std::string path = "cfg_test.json";
    {
        std::ofstream out(path);
        out << R"({"seed": 7, "data": {"canvas": 32, "vocab": ["CAT", "DOG"]}})";
    }
    PipelineConfig c = load_config(path);
    CHECK(c.seed == 7);
    CHECK(c.data.canvas == 32);
    std::remove(path.c_str());

    {
        std::ofstream out(path);
        out << "{not json";
    }
    CHECK_THROWS_AS((void)load_config(path), Error);
    std::remove(path.c_str());
    CHECK_THROWS_AS((void)load_config("missing_config.json"), Error);
}

TEST_CASE("glyph and unet conversions carry fields over") {
    PipelineConfig c;
    c.data.canvas = 32;
    c.data.max_scale = 2;
    auto g = c.data.to_glyph_config();
    CHECK(g.canvas == 32);
    CHECK(g.max_scale == 2);
    CHECK(g.sentence_min_words == 2);

    auto s = c.text.arch.to_unet_spec(2, 1);
    CHECK(s.in_ch == 2);
    CHECK(s.out_ch == 1);
    CHECK(s.base == c.text.arch.base);
    CHECK(s.mult == c.text.arch.mult);
}
