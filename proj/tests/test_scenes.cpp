#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <set>

#include "doctest.h"
#include "gf/scenes.hpp"
#include "gf/textmodule.hpp"

using namespace gf;
using namespace gf::scenes;

namespace {

glyphgen::GlyphConfig scene_cfg() {
    glyphgen::GlyphConfig g;
    g.canvas = 64;
    g.vocab = glyphgen::acceptance_vocab();
    return g;
}

}  // namespace

TEST_CASE("caption word canonicalization") {
    CHECK(caption_words("'CAT' and \"DOG\"") ==
          std::vector<std::string>({"CAT", "AND", "DOG"}));
    CHECK(caption_words("`SUN' on a red gradient") ==
          std::vector<std::string>({"SUN", "ON", "A", "RED", "GRADIENT"}));
    CHECK(caption_words("'CAT','DOG'") == std::vector<std::string>({"CAT", "DOG"}));
    CHECK(caption_words("") == std::vector<std::string>{});
    CHECK(caption_words("  ... !!") == std::vector<std::string>{});
    CHECK(caption_words("area51") == std::vector<std::string>({"AREA51"}));
}

TEST_CASE("quote styles wrap words") {
    CHECK(quote_word("CAT", QuoteStyle::single) == "'CAT'");
    CHECK(quote_word("CAT", QuoteStyle::double_q) == "\"CAT\"");
    CHECK(quote_word("CAT", QuoteStyle::latex) == "`CAT'");
}

TEST_CASE("scenes are deterministic per seed") {
    auto g = scene_cfg();
    Scene a = compose_scene(11, g);
    Scene b = compose_scene(11, g);
    CHECK(a.image.px == b.image.px);
    CHECK(a.caption == b.caption);
    CHECK(a.text_image.px == b.text_image.px);
    Scene c = compose_scene(12, g);
    CHECK(a.image.px != c.image.px);
}

TEST_CASE("scene geometry and pixels are consistent") {
    auto g = scene_cfg();
    for (uint64_t seed = 0; seed < 30; ++seed) {
        Scene sc = compose_scene(seed, g);
        CHECK(sc.image.c == 3);
        CHECK(sc.image.h == g.canvas);
        CHECK(sc.text_image.c == 1);
        CHECK(!sc.words.empty());
        CHECK(sc.shapes.size() <= 2);
        for (double v : sc.image.px) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
        }
        for (const auto& s : sc.shapes) {
            CHECK(s.x >= 0);
            CHECK(s.y >= 0);
            CHECK(s.x + s.w <= g.canvas);
            CHECK(s.y + s.h <= g.canvas);
            CHECK(s.color.name != sc.background.name);
        }
        // every clean-render ink pixel carries the ink color in the scene
        for (int y = 0; y < g.canvas; ++y)
            for (int x = 0; x < g.canvas; ++x)
                if (sc.text_image.at(0, y, x) == 1.0) {
                    CHECK(sc.image.at(0, y, x) == sc.ink.r);
                    CHECK(sc.image.at(1, y, x) == sc.ink.g);
                    CHECK(sc.image.at(2, y, x) == sc.ink.b);
                }
        // the mask still matches the placements
        Image mask = glyphgen::render_mask(sc.words, g.canvas, g.canvas);
        CHECK(mask.px == sc.mask.px);
    }
}

TEST_CASE("ink contrasts with what it covers") {
    auto g = scene_cfg();
    for (uint64_t seed = 100; seed < 160; ++seed) {
        Scene sc = compose_scene(seed, g);
        double margin = std::abs(sc.ink.luminance() - sc.background.luminance());
        for (const auto& s : sc.shapes)
            margin = std::min(margin,
                              std::abs(sc.ink.luminance() - s.color.luminance()));
        CHECK(margin >= 0.25);
    }
}

TEST_CASE("captions name keywords, background, and shapes") {
    auto g = scene_cfg();
    std::set<char> quote_chars_seen;
    for (uint64_t seed = 200; seed < 260; ++seed) {
        Scene sc = compose_scene(seed, g);
        for (const auto& w : sc.words) {
            const bool quoted = sc.caption.find("'" + w.text + "'") != std::string::npos ||
                                sc.caption.find("\"" + w.text + "\"") != std::string::npos ||
                                sc.caption.find("`" + w.text + "'") != std::string::npos;
            CHECK(quoted);
        }
        CHECK(sc.caption.find(sc.background.name) != std::string::npos);
        for (const auto& s : sc.shapes) {
            CHECK(sc.caption.find(shape_name(s.kind)) != std::string::npos);
            CHECK(sc.caption.find(s.color.name) != std::string::npos);
        }
        if (sc.caption.find('\'') == 0) quote_chars_seen.insert('\'');
        if (sc.caption.find('"') == 0) quote_chars_seen.insert('"');
        if (sc.caption.find('`') == 0) quote_chars_seen.insert('`');

        // keywords appear in reading order within the caption
        auto kw = textmodule::reading_order_words(sc.words);
        size_t pos = 0;
        for (const auto& w : kw) {
            const size_t at = sc.caption.find(w, pos);
            CHECK(at != std::string::npos);
            pos = at + w.size();
        }
    }
    CHECK(quote_chars_seen.size() == 3);  // all styles occur across seeds
}

TEST_CASE("captions always fit the prompt token budget") {
    auto g = scene_cfg();
    config::PipelineConfig pc;
    for (uint64_t seed = 300; seed < 400; ++seed) {
        Scene sc = compose_scene(seed, g);
        auto words = caption_words(sc.caption);
        CHECK(!words.empty());
        CHECK_NOTHROW((void)textmodule::encode_keywords(words, pc.visual.max_tokens));
        // canonicalization round-trips through the token codec
        auto enc = textmodule::encode_keywords(words, pc.visual.max_tokens);
        CHECK(textmodule::decode_keywords(enc) == words);
    }
}
