#include "gf/glyphgen.hpp"

#include <algorithm>
#include <cstring>

#include "json.hpp"

namespace fs = std::filesystem;

namespace gf::glyphgen {

// 5x7 glyphs, A-Z then 0-9. Row 0 is the top. Design rules that the tight-box
// math depends on: pixel (0,4) is set, column 0 is set somewhere in rows 4-6,
// and row 6 is non-empty. A unit test enforces this for every glyph.
static const char* const kFont[36][kGlyphH] = {
    // A
    {".####", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"},
    // B
    {"#####", "#...#", "#...#", "####.", "#...#", "#...#", "####."},
    // C
    {".####", "#...#", "#....", "#....", "#....", "#...#", ".###."},
    // D
    {"#####", "#...#", "#...#", "#...#", "#...#", "#...#", "####."},
    // E
    {"#####", "#....", "#....", "####.", "#....", "#....", "#####"},
    // F
    {"#####", "#....", "#....", "####.", "#....", "#....", "#...."},
    // G
    {".####", "#...#", "#....", "#.###", "#...#", "#...#", ".###."},
    // H
    {"#...#", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"},
    // I
    {"#####", "..#..", "..#..", "..#..", "..#..", "..#..", "#####"},
    // J
    {"..###", "....#", "....#", "....#", "#...#", "#...#", ".###."},
    // K
    {"#...#", "#..#.", "#.#..", "##...", "#.#..", "#..#.", "#...#"},
    // L
    {"#...#", "#....", "#....", "#....", "#....", "#....", "#####"},
    // M
    {"#...#", "##.##", "#.#.#", "#.#.#", "#...#", "#...#", "#...#"},
    // N
    {"#...#", "##..#", "#.#.#", "#..##", "#...#", "#...#", "#...#"},
    // O
    {".####", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."},
    // P
    {"#####", "#...#", "#...#", "####.", "#....", "#....", "#...."},
    // Q
    {".####", "#...#", "#...#", "#...#", "#.#.#", "#..#.", ".##.#"},
    // R
    {"#####", "#...#", "#...#", "####.", "#.#..", "#..#.", "#...#"},
    // S
    {".####", "#....", "#....", ".###.", "....#", "....#", "####."},
    // T
    {"#####", "..#..", "..#..", "..#..", "..#..", ".#...", "##..."},
    // U
    {"#...#", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."},
    // V
    {"#...#", "#...#", "#...#", "#...#", "#...#", ".#.#.", "..#.."},
    // W
    {"#...#", "#...#", "#...#", "#.#.#", "#.#.#", "##.##", "#...#"},
    // X
    {"#...#", "#...#", ".#.#.", "..#..", ".#.#.", "#...#", "#...#"},
    // Y
    {"#...#", "#...#", ".#.#.", "..#..", "..#..", ".#...", "##..."},
    // Z
    {"#####", "....#", "...#.", "..#..", ".#...", "#....", "#####"},
    // 0
    {".####", "#..##", "#.#.#", "##..#", "#...#", "#...#", ".###."},
    // 1
    {"..###", "..#..", "..#..", "..#..", "..#..", "..#..", "#####"},
    // 2
    {".####", "#...#", "....#", "...#.", "..#..", ".#...", "#####"},
    // 3
    {"#####", "....#", "....#", ".###.", "....#", "....#", "####."},
    // 4
    {"...##", "..#.#", ".#..#", "#...#", "#####", "....#", "....#"},
    // 5
    {"#####", "#....", "#....", "####.", "....#", "....#", "####."},
    // 6
    {".####", "#....", "#....", "####.", "#...#", "#...#", ".###."},
    // 7
    {"#####", "....#", "...#.", "..#..", ".#...", "#....", "#...."},
    // 8
    {".####", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."},
    // 9
    {".####", "#...#", "#...#", ".####", "....#", "....#", "####."},
};

const char* variant_name(Variant v) {
    switch (v) {
        case Variant::regular: return "regular";
        case Variant::bold: return "bold";
        case Variant::italic: return "italic";
    }
    return "?";
}

Variant variant_from_name(const std::string& name) {
    if (name == "regular") return Variant::regular;
    if (name == "bold") return Variant::bold;
    if (name == "italic") return Variant::italic;
    throw Error(ErrKind::validation, "unknown variant: " + name);
}

int charset_index(char c) {
    if (c >= 'A' && c <= 'Z') return c - 'A';
    if (c >= '0' && c <= '9') return 26 + (c - '0');
    return -1;
}

bool valid_word(const std::string& text) {
    if (text.empty() || text.size() > 255) return false;
    return std::all_of(text.begin(), text.end(), [](char c) { return charset_index(c) >= 0; });
}

int italic_shift(int row) { return (6 - row) / 3; }

Extent word_extent(int len, Variant v, int scale) {
    Extent e;
    e.w = scale * (kAdvance * len - 1) + (v == Variant::italic ? 2 * scale : 0);
    e.h = kGlyphH * scale;
    return e;
}

// Glyph cell as booleans with variant applied. Italic cells are 7 wide.
static void variant_cell(int glyph, Variant v, bool out[kGlyphH][kGlyphW + 2], int& cell_w) {
    std::memset(out, 0, sizeof(bool) * kGlyphH * (kGlyphW + 2));
    cell_w = v == Variant::italic ? kGlyphW + 2 : kGlyphW;
    for (int r = 0; r < kGlyphH; ++r) {
        const char* row = kFont[glyph][r];
        const int shift = v == Variant::italic ? italic_shift(r) : 0;
        for (int c = 0; c < kGlyphW; ++c) {
            if (row[c] != '#') continue;
            out[r][c + shift] = true;
            if (v == Variant::bold && c + 1 < kGlyphW) out[r][c + 1] = true;
        }
    }
}

Image rasterize_word(const std::string& text, Variant v, int scale) {
    if (!valid_word(text))
        throw Error(ErrKind::validation, "word must be non-empty A-Z/0-9: '" + text + "'");
    if (scale < 1) throw Error(ErrKind::validation, "scale must be >= 1");
    const Extent e = word_extent(int(text.size()), v, scale);
    Image img(1, e.h, e.w);
    bool cell[kGlyphH][kGlyphW + 2];
    int cell_w = 0;
    for (size_t i = 0; i < text.size(); ++i) {
        variant_cell(charset_index(text[i]), v, cell, cell_w);
        const int gx = int(i) * kAdvance * scale;
        for (int r = 0; r < kGlyphH; ++r)
            for (int c = 0; c < cell_w; ++c) {
                if (!cell[r][c]) continue;
                for (int dy = 0; dy < scale; ++dy)
                    for (int dx = 0; dx < scale; ++dx)
                        img.at(0, r * scale + dy, gx + c * scale + dx) = 1.0;
            }
    }
    return img;
}

WordPlacement render_word(Image& canvas, const std::string& text, int x, int y, Variant v,
                          int scale, double value, const double* rgb) {
    const Image ink = rasterize_word(text, v, scale);
    if (x < 0 || y < 0 || x + ink.w > canvas.w || y + ink.h > canvas.h)
        throw Error(ErrKind::validation, "word '" + text + "' does not fit canvas at (" +
                                             std::to_string(x) + "," + std::to_string(y) + ")");
    if (canvas.c == 3 && rgb == nullptr)
        throw Error(ErrKind::validation, "render_word on RGB canvas requires a color");
    for (int r = 0; r < ink.h; ++r)
        for (int c = 0; c < ink.w; ++c) {
            if (ink.at(0, r, c) < 0.5) continue;
            if (canvas.c == 1) {
                canvas.at(0, y + r, x + c) = value;
            } else {
                for (int ch = 0; ch < 3; ++ch) canvas.at(ch, y + r, x + c) = rgb[ch];
            }
        }
    WordPlacement p;
    p.text = text;
    p.x = x;
    p.y = y;
    p.w = ink.w;
    p.h = ink.h;
    p.variant = v;
    p.scale = scale;
    return p;
}

Image render_mask(const std::vector<WordPlacement>& words, int canvas_h, int canvas_w) {
    Image m(1, canvas_h, canvas_w);
    for (const auto& wp : words)
        for (int y = wp.y; y < wp.y + wp.h; ++y)
            for (int x = wp.x; x < wp.x + wp.w; ++x) m.at(0, y, x) = 1.0;
    return m;
}

void GlyphConfig::validate() const {
    if (canvas < 8) throw Error(ErrKind::config, "glyph canvas too small");
    if (vocab.empty()) throw Error(ErrKind::config, "vocab is empty");
    for (const auto& w : vocab)
        if (!valid_word(w)) throw Error(ErrKind::config, "invalid vocab word: '" + w + "'");
    if (min_scale < 1 || max_scale < min_scale)
        throw Error(ErrKind::config, "bad scale range");
    if (sentence_min_words < 1 || sentence_max_words < sentence_min_words)
        throw Error(ErrKind::config, "bad sentence word count range");
    for (const auto& w : vocab)
        if (word_extent(int(w.size()), Variant::regular, min_scale).w > canvas)
            throw Error(ErrKind::config, "vocab word '" + w + "' cannot fit the canvas");
}

std::vector<std::string> default_vocab() {
    return {"CAT",  "DOG",  "SUN",  "MAP",  "HAT",  "RUN",  "BIG",  "TOP",
            "RED",  "FOX",  "ZIP",  "OWL",  "SKY",  "ICE",  "GEM",  "BAT",
            "MOON", "STAR", "FISH", "WOLF", "BIRD", "TREE", "CAKE", "SHIP",
            "KING", "GOLD", "FROG", "LION", "WAVE", "DRUM", "AREA51", "2048"};
}

std::vector<std::string> acceptance_vocab() {
    auto v = default_vocab();
    v.resize(16);
    return v;
}

struct Pick {
    std::string word;
    Variant variant;
    int scale;
    Extent ext;
};

static Pick pick_word(Rng& rng, const GlyphConfig& cfg, int max_fit_w) {
    for (int attempt = 0; attempt < 256; ++attempt) {
        const std::string& w = cfg.vocab[rng.uniform_int(int(cfg.vocab.size()))];
        const Variant v = Variant(rng.uniform_int(3));
        std::vector<int> fits;
        for (int s = cfg.min_scale; s <= cfg.max_scale; ++s) {
            const Extent e = word_extent(int(w.size()), v, s);
            if (e.w <= max_fit_w && e.h <= cfg.canvas) fits.push_back(s);
        }
        if (fits.empty()) continue;
        const int s = fits[rng.uniform_int(int(fits.size()))];
        return {w, v, s, word_extent(int(w.size()), v, s)};
    }
    throw Error(ErrKind::internal, "no vocab word fits the canvas");
}

WordSample sample_word_level(uint64_t seed, const GlyphConfig& cfg) {
    cfg.validate();
    Rng rng(seed);
    const Pick p = pick_word(rng, cfg, cfg.canvas);
    const int x = rng.uniform_int(cfg.canvas - p.ext.w + 1);
    const int y = rng.uniform_int(cfg.canvas - p.ext.h + 1);
    WordSample s;
    s.image = Image(1, cfg.canvas, cfg.canvas);
    s.words.push_back(render_word(s.image, p.word, x, y, p.variant, p.scale));
    s.mask = render_mask(s.words, cfg.canvas, cfg.canvas);
    return s;
}

static bool boxes_clash(const WordPlacement& a, int x, int y, const Extent& e, int gap) {
    return !(x >= a.x + a.w + gap || a.x >= x + e.w + gap || y >= a.y + a.h + gap ||
             a.y >= y + e.h + gap);
}

static std::optional<std::pair<int, int>> find_spot(Rng& rng, const GlyphConfig& cfg,
                                                    const std::vector<WordPlacement>& placed,
                                                    const Extent& e) {
    for (int t = 0; t < cfg.placement_tries; ++t) {
        const int x = rng.uniform_int(cfg.canvas - e.w + 1);
        const int y = rng.uniform_int(cfg.canvas - e.h + 1);
        const bool clash = std::any_of(placed.begin(), placed.end(), [&](const WordPlacement& p) {
            return boxes_clash(p, x, y, e, cfg.box_gap);
        });
        if (!clash) return std::make_pair(x, y);
    }
    return std::nullopt;
}

WordSample sample_sentence_level(uint64_t seed, const GlyphConfig& cfg) {
    cfg.validate();
    Rng rng(seed);
    const int want = cfg.sentence_min_words +
                     rng.uniform_int(cfg.sentence_max_words - cfg.sentence_min_words + 1);
    WordSample s;
    s.image = Image(1, cfg.canvas, cfg.canvas);
    for (int i = 0; i < want; ++i) {
        bool placed = false;
        for (int attempt = 0; attempt < 8 && !placed; ++attempt) {
            const Pick p = pick_word(rng, cfg, cfg.canvas);
            if (auto spot = find_spot(rng, cfg, s.words, p.ext)) {
                s.words.push_back(render_word(s.image, p.word, spot->first, spot->second,
                                              p.variant, p.scale));
                placed = true;
            }
        }
        if (!placed && !s.words.empty()) break;  // canvas is full, keep what we have
        if (!placed && s.words.empty())
            throw Error(ErrKind::internal, "could not place any word on the canvas");
    }
    s.mask = render_mask(s.words, cfg.canvas, cfg.canvas);
    return s;
}

WordSample augment_reposition(const WordSample& in, Rng& rng, const GlyphConfig& cfg) {
    WordSample out;
    out.image = Image(1, cfg.canvas, cfg.canvas);
    for (const auto& wp : in.words) {
        const Extent e{wp.w, wp.h};
        auto spot = find_spot(rng, cfg, out.words, e);
        const int x = spot ? spot->first : wp.x;
        const int y = spot ? spot->second : wp.y;
        out.words.push_back(render_word(out.image, wp.text, x, y, wp.variant, wp.scale));
    }
    out.mask = render_mask(out.words, cfg.canvas, cfg.canvas);
    return out;
}

// ---------------------------------------------------------------------------

static constexpr char kShardMagic[8] = {'G', 'F', 'S', 'H', 'A', 'R', 'D', '1'};

static void append_record(ByteWriter& w, const WordSample& s) {
    ByteWriter rec;
    rec.u16(uint16_t(s.image.h));
    rec.u16(uint16_t(s.image.w));
    rec.u8(uint8_t(s.image.c));
    rec.u16(uint16_t(s.words.size()));
    for (const auto& wp : s.words) {
        rec.str8(wp.text);
        rec.u16(uint16_t(wp.x));
        rec.u16(uint16_t(wp.y));
        rec.u16(uint16_t(wp.w));
        rec.u16(uint16_t(wp.h));
        rec.u8(uint8_t(wp.variant));
        rec.u8(uint8_t(wp.scale));
    }
    for (double v : s.image.px) rec.u8(uint8_t(std::clamp(v, 0.0, 1.0) * 255.0 + 0.5));
    for (double v : s.mask.px) rec.u8(v >= 0.5 ? 255 : 0);
    w.u32(uint32_t(rec.buf.size()));
    w.bytes(rec.buf.data(), rec.buf.size());
}

void write_shard(const fs::path& bin_path, const std::vector<WordSample>& samples) {
    ByteWriter w;
    w.bytes(kShardMagic, 8);
    w.u32(uint32_t(samples.size()));
    for (const auto& s : samples) append_record(w, s);
    write_file_atomic(bin_path, w.buf);
}

std::vector<WordSample> read_shard(const fs::path& bin_path) {
    const auto bytes = read_file(bin_path);
    ByteReader r(bytes, bin_path.string());
    char magic[8];
    r.bytes(magic, 8);
    if (std::memcmp(magic, kShardMagic, 8) != 0)
        throw Error(ErrKind::io, "bad shard magic in " + bin_path.string());
    const uint32_t count = r.u32();
    std::vector<WordSample> out;
    out.reserve(count);
    for (uint32_t i = 0; i < count; ++i) {
        const uint32_t len = r.u32();
        const size_t start = r.off;
        WordSample s;
        const int h = r.u16();
        const int w = r.u16();
        const int c = r.u8();
        if (c != 1) throw Error(ErrKind::io, "shard record with unexpected channel count");
        const int nwords = r.u16();
        for (int k = 0; k < nwords; ++k) {
            WordPlacement wp;
            wp.text = r.str8();
            wp.x = r.u16();
            wp.y = r.u16();
            wp.w = r.u16();
            wp.h = r.u16();
            wp.variant = Variant(r.u8());
            wp.scale = r.u8();
            s.words.push_back(std::move(wp));
        }
        s.image = Image(c, h, w);
        for (double& v : s.image.px) v = r.u8() / 255.0;
        s.mask = Image(1, h, w);
        for (double& v : s.mask.px) v = r.u8() >= 128 ? 1.0 : 0.0;
        if (r.off - start != len)
            throw Error(ErrKind::io, "shard record length mismatch in " + bin_path.string());
        out.push_back(std::move(s));
    }
    return out;
}

void write_shard_manifest(const fs::path& json_path, const ShardMeta& meta,
                          const std::string& bin_name, size_t count) {
    nlohmann::json j;
    j["format"] = "gfshard";
    j["version"] = 1;
    j["kind"] = meta.kind;
    j["shard"] = meta.shard_index;
    j["file"] = bin_name;
    j["count"] = count;
    j["seed"] = meta.seed;
    j["config_hash"] = meta.config_hash;
    j["created_at"] = meta.created_at;
    write_file_atomic(json_path, j.dump(2) + "\n");
}

}  // namespace gf::glyphgen
