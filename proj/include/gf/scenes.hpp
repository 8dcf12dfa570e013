#pragma once

#include <string>
#include <vector>

#include "gf/glyphgen.hpp"

namespace gf::scenes {

// Procedurally composed RGB scenes: a colored background (solid or vertical
// gradient), up to two filled geometric shapes, and the words of a
// sentence-level glyph sample stamped in a contrasting ink color. Each scene
// carries a templated caption that names the background, the shapes, and the
// keywords in quotes. This is the visual module's paired training data: the
// scene teaches appearance, the clean glyph rendering teaches structure.

struct NamedColor {
    std::string name;  // lowercase, as used in captions
    double r = 0, g = 0, b = 0;
    double luminance() const { return 0.299 * r + 0.587 * g + 0.114 * b; }
};

const std::vector<NamedColor>& palette();

enum class ShapeKind { rectangle, circle };
const char* shape_name(ShapeKind k);

struct Shape {
    ShapeKind kind = ShapeKind::rectangle;
    int x = 0, y = 0, w = 0, h = 0;  // bounding box, fully inside the canvas
    NamedColor color;
};

struct Scene {
    Image image;       // (3,H,W) composed scene
    Image text_image;  // (1,H,W) clean white-on-black glyph rendering
    Image mask;        // (1,H,W) word-box union
    std::vector<glyphgen::WordPlacement> words;
    std::string caption;  // quotes every keyword
    NamedColor background;
    bool gradient = false;
    NamedColor ink;
    std::vector<Shape> shapes;  // 0..2, draw order
};

// Deterministic in (seed, cfg). The words, boxes, and mask equal the
// sentence-level glyph sample for the same derived seed.
Scene compose_scene(uint64_t seed, const glyphgen::GlyphConfig& cfg);

// Canonical prompt words: uppercased A-Z 0-9 runs in order, everything else
// treated as a separator. Feeds the same token codec as keywords.
std::vector<std::string> caption_words(const std::string& prompt);

// The three quoting styles captions rotate through.
enum class QuoteStyle { single, double_q, latex };
std::string quote_word(const std::string& word, QuoteStyle s);

}  // namespace gf::scenes
