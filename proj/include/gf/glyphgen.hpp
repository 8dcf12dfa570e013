#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "gf/core.hpp"

namespace gf::glyphgen {

// Bitmap word rendering on a square canvas, plus deterministic dataset
// sampling. Glyphs live on a 5x7 cell; every glyph touches all four cell
// edges so tight ink boxes match the closed-form word extents below.

enum class Variant : uint8_t { regular = 0, bold = 1, italic = 2 };

constexpr int kGlyphW = 5;
constexpr int kGlyphH = 7;
constexpr int kAdvance = 6;  // cell width + 1 column gap

const char* variant_name(Variant v);
Variant variant_from_name(const std::string& name);

// Charset: A-Z then 0-9. Returns -1 for anything else.
int charset_index(char c);
bool valid_word(const std::string& text);

// Italic shear: row r (0 = top) shifts right by (6 - r) / 3, i.e. 2,1,1,1,0,0,0.
int italic_shift(int row);

struct Extent {
    int w = 0, h = 0;
};

// Regular/bold: w = scale*(6*len - 1). Italic adds 2*scale. h = 7*scale.
Extent word_extent(int len, Variant v, int scale);

struct WordPlacement {
    std::string text;
    int x = 0, y = 0, w = 0, h = 0;
    Variant variant = Variant::regular;
    int scale = 1;
};

// Tight rendering of one word, ink = 1 on 0 background.
Image rasterize_word(const std::string& text, Variant v, int scale);

// Stamps a word onto a canvas. Grayscale canvases take `value`; RGB canvases
// take `rgb` (3 doubles). The placement box is the tight ink box.
WordPlacement render_word(Image& canvas, const std::string& text, int x, int y, Variant v,
                          int scale, double value = 1.0, const double* rgb = nullptr);

// Binary union of word boxes on an empty canvas.
Image render_mask(const std::vector<WordPlacement>& words, int canvas_h, int canvas_w);

struct GlyphConfig {
    int canvas = 64;
    std::vector<std::string> vocab;
    int min_scale = 1;
    int max_scale = 3;
    int sentence_min_words = 2;
    int sentence_max_words = 4;
    int placement_tries = 64;
    int box_gap = 1;  // min pixels between word boxes in sentence samples

    void validate() const;
};

std::vector<std::string> default_vocab();
std::vector<std::string> acceptance_vocab();  // first 16 words of the default

struct WordSample {
    Image image;  // grayscale canvas, ink words on black
    Image mask;   // binary word-box union
    std::vector<WordPlacement> words;
};

// Single word, uniform over vocab / variant / feasible scales / positions.
WordSample sample_word_level(uint64_t seed, const GlyphConfig& cfg);

// 2..4 words with non-overlapping boxes (gap enforced). Falls back to fewer
// words when the canvas fills up; always places at least one.
WordSample sample_sentence_level(uint64_t seed, const GlyphConfig& cfg);

// Redraws positions for the same words; text/variant/scale are kept.
WordSample augment_reposition(const WordSample& s, Rng& rng, const GlyphConfig& cfg);

// ---------------------------------------------------------------------------
// Shards: length-prefixed binary records plus a JSON manifest per shard.

struct ShardMeta {
    std::string kind;  // "word" or "sentence"
    int shard_index = 0;
    uint64_t seed = 0;
    std::string config_hash;
    std::string created_at;  // informational only, normalized away in comparisons
};

void write_shard(const std::filesystem::path& bin_path, const std::vector<WordSample>& samples);
std::vector<WordSample> read_shard(const std::filesystem::path& bin_path);
void write_shard_manifest(const std::filesystem::path& json_path, const ShardMeta& meta,
                          const std::string& bin_name, size_t count);

}  // namespace gf::glyphgen
