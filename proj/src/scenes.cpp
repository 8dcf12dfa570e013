#include "gf/scenes.hpp"

#include <algorithm>
#include <cmath>

namespace gf::scenes {

const std::vector<NamedColor>& palette() {
    static const std::vector<NamedColor> p = {
        {"red", 0.82, 0.18, 0.16},   {"green", 0.18, 0.62, 0.25},
        {"blue", 0.16, 0.32, 0.78},  {"gold", 0.91, 0.74, 0.18},
        {"teal", 0.12, 0.62, 0.62},  {"pink", 0.94, 0.55, 0.70},
        {"navy", 0.08, 0.10, 0.34},  {"gray", 0.52, 0.52, 0.52},
        {"white", 0.96, 0.96, 0.94}, {"black", 0.05, 0.05, 0.07},
    };
    return p;
}

const char* shape_name(ShapeKind k) {
    return k == ShapeKind::rectangle ? "rectangle" : "circle";
}

std::string quote_word(const std::string& word, QuoteStyle s) {
    switch (s) {
        case QuoteStyle::single: return "'" + word + "'";
        case QuoteStyle::double_q: return "\"" + word + "\"";
        case QuoteStyle::latex: return "`" + word + "'";
    }
    throw Error(ErrKind::internal, "bad quote style");
}

std::vector<std::string> caption_words(const std::string& prompt) {
    std::vector<std::string> words;
    std::string cur;
    for (char c : prompt) {
        char u = c;
        if (u >= 'a' && u <= 'z') u = char(u - 'a' + 'A');
        if ((u >= 'A' && u <= 'Z') || (u >= '0' && u <= '9')) {
            cur += u;
        } else if (!cur.empty()) {
            words.push_back(cur);
            cur.clear();
        }
    }
    if (!cur.empty()) words.push_back(cur);
    return words;
}

namespace {

void fill_background(Image& img, const NamedColor& c, bool gradient) {
    const double rgb[3] = {c.r, c.g, c.b};
    for (int y = 0; y < img.h; ++y) {
        // gradient darkens toward the bottom, keeping the color's identity
        const double f = gradient ? 1.0 - 0.55 * double(y) / double(img.h - 1) : 1.0;
        for (int x = 0; x < img.w; ++x)
            for (int ch = 0; ch < 3; ++ch) img.at(ch, y, x) = rgb[ch] * f;
    }
}

void draw_shape(Image& img, const Shape& s) {
    const double rgb[3] = {s.color.r, s.color.g, s.color.b};
    if (s.kind == ShapeKind::rectangle) {
        for (int y = s.y; y < s.y + s.h; ++y)
            for (int x = s.x; x < s.x + s.w; ++x)
                for (int ch = 0; ch < 3; ++ch) img.at(ch, y, x) = rgb[ch];
    } else {
        const double cx = s.x + (s.w - 1) / 2.0, cy = s.y + (s.h - 1) / 2.0;
        const double rx = s.w / 2.0, ry = s.h / 2.0;
        for (int y = s.y; y < s.y + s.h; ++y)
            for (int x = s.x; x < s.x + s.w; ++x) {
                const double dx = (x - cx) / rx, dy = (y - cy) / ry;
                if (dx * dx + dy * dy <= 1.0)
                    for (int ch = 0; ch < 3; ++ch) img.at(ch, y, x) = rgb[ch];
            }
    }
}

// Smallest luminance distance between a candidate ink and everything it can
// sit on top of.
double ink_margin(const NamedColor& ink, const NamedColor& bg, bool gradient,
                  const std::vector<Shape>& shapes) {
    double m = std::abs(ink.luminance() - bg.luminance());
    if (gradient)
        m = std::min(m, std::abs(ink.luminance() - bg.luminance() * 0.45));
    for (const auto& s : shapes)
        m = std::min(m, std::abs(ink.luminance() - s.color.luminance()));
    return m;
}

std::string join_quoted(const std::vector<std::string>& words, QuoteStyle qs) {
    std::string out;
    for (size_t i = 0; i < words.size(); ++i) {
        if (i > 0) out += (i + 1 == words.size()) ? " and " : ", ";
        out += quote_word(words[i], qs);
    }
    return out;
}

}  // namespace

Scene compose_scene(uint64_t seed, const glyphgen::GlyphConfig& cfg) {
    cfg.validate();
    Scene sc;
    glyphgen::WordSample ws =
        glyphgen::sample_sentence_level(mix64(seed, fnv1a64("scene-words")), cfg);
    sc.text_image = std::move(ws.image);
    sc.mask = std::move(ws.mask);
    sc.words = std::move(ws.words);

    // Resample the whole style until some ink clears the contrast floor; a
    // few color trios (e.g. navy + gray + white underneath) pin every
    // candidate below it, so those styles are rejected outright.
    Rng rng(mix64(seed, fnv1a64("scene-style")));
    const auto& pal = palette();
    double best_margin = -1;
    for (int attempt = 0; attempt < 20 && best_margin < 0.3; ++attempt) {
        NamedColor bg = pal[size_t(rng.uniform_int(int(pal.size())))];
        const bool gradient = rng.uniform() < 0.4;
        std::vector<Shape> shapes;
        const int n_shapes = rng.uniform_int(3);
        for (int i = 0; i < n_shapes; ++i) {
            Shape s;
            s.kind = rng.uniform_int(2) == 0 ? ShapeKind::rectangle : ShapeKind::circle;
            const int min_d = std::max(4, cfg.canvas / 6);
            const int max_d = std::max(min_d + 1, (2 * cfg.canvas) / 5);
            s.w = min_d + rng.uniform_int(max_d - min_d + 1);
            s.h = min_d + rng.uniform_int(max_d - min_d + 1);
            s.x = rng.uniform_int(cfg.canvas - s.w + 1);
            s.y = rng.uniform_int(cfg.canvas - s.h + 1);
            do {
                s.color = pal[size_t(rng.uniform_int(int(pal.size())))];
            } while (s.color.name == bg.name);
            shapes.push_back(s);
        }
        NamedColor ink = pal[0];
        double margin = -1;
        for (const auto& cand : pal) {
            const double m = ink_margin(cand, bg, gradient, shapes);
            if (m > margin) {
                margin = m;
                ink = cand;
            }
        }
        if (margin > best_margin) {
            best_margin = margin;
            sc.background = bg;
            sc.gradient = gradient;
            sc.shapes = shapes;
            sc.ink = ink;
        }
    }

    sc.image = Image(3, cfg.canvas, cfg.canvas);
    fill_background(sc.image, sc.background, sc.gradient);
    for (const auto& s : sc.shapes) draw_shape(sc.image, s);
    const double ink_rgb[3] = {sc.ink.r, sc.ink.g, sc.ink.b};
    for (const auto& w : sc.words)
        glyphgen::render_word(sc.image, w.text, w.x, w.y, w.variant, w.scale, 1.0,
                              ink_rgb);

    // caption: keywords in reading order, quoted; background; then shapes
    std::vector<const glyphgen::WordPlacement*> ordered;
    for (const auto& w : sc.words) ordered.push_back(&w);
    std::stable_sort(ordered.begin(), ordered.end(),
                     [](const glyphgen::WordPlacement* a, const glyphgen::WordPlacement* b) {
                         if (a->y != b->y) return a->y < b->y;
                         return a->x < b->x;
                     });
    std::vector<std::string> kw;
    for (const auto* w : ordered) kw.push_back(w->text);
    const QuoteStyle qs = QuoteStyle(rng.uniform_int(3));

    std::string cap = join_quoted(kw, qs);
    cap += " on a " + sc.background.name + (sc.gradient ? " gradient" : " background");
    for (size_t i = 0; i < sc.shapes.size(); ++i) {
        cap += (i == 0) ? " with a " : " and a ";
        cap += sc.shapes[i].color.name + " " + shape_name(sc.shapes[i].kind);
    }
    sc.caption = cap;
    return sc;
}

}  // namespace gf::scenes
