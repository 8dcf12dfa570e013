#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "gf/core.hpp"
#include "gf/glyphgen.hpp"

namespace gf::promptintel {

// Prompt understanding: which words must appear as rendered text, and where.
// Two paths produce the same analysis type: a deliberately naive rule that
// only sees words enclosed in quotation marks, and a pluggable LLM client
// with recorded-reply fixtures so everything runs offline.

// Normalized box, origin at the top left, all values in [0,1].
struct LayoutBox {
    double x = 0, y = 0, w = 0, h = 0;
};

enum class Source { rules, llm, user };
const char* source_name(Source s);

struct PromptAnalysis {
    std::string prompt;
    std::vector<std::string> keywords;  // uppercase A-Z 0-9 words, reading order
    std::vector<LayoutBox> boxes;       // empty, or one per keyword
    Source source = Source::rules;
    // Set when a fallback or truncation degraded the analysis (LLM reply
    // rejected, or keywords dropped because no layout fits).
    bool degraded = false;
};

// Words inside quote pairs, in order: 'single', "double", `latex single' and
// ``latex double''. Multi-word quotes split into per-word keywords. Prompts
// without quotes yield nothing; an unmatched opener leaves the rest of the
// prompt unquoted.
std::vector<std::string> extract_quoted_keywords(const std::string& prompt);

// One row per keyword: horizontally centered, each row vertically centered in
// its own canvas/n slot, all words at the largest common scale that fits
// (capped at max_scale). Keywords that cannot fit even at scale 1 are dropped
// from the tail; the returned list may be shorter than the input.
std::vector<LayoutBox> propose_layout(const std::vector<std::string>& keywords, int canvas,
                                      int max_scale = 3);

// extract_quoted_keywords + propose_layout; truncates keywords to the layout
// and flags the analysis degraded when that happens.
PromptAnalysis rules_analyze(const std::string& prompt, int canvas, int max_scale = 3);

struct LlmClientConfig {
    std::string endpoint;  // http://host:port/path; empty = offline replay
    std::string model = "glyph-layout-1";
    double timeout_s = 10.0;
    std::string fixture_dir;  // required in offline mode
};

// The instruction sent with every request. Fixed text: fixtures are keyed by
// the hash of the full request body, so changing it invalidates them.
extern const char* kInstructionTemplate;

// Canonical request body: a JSON object {canvas_aspect, instruction, model,
// prompt} with sorted keys, documented in docs/FORMATS.md.
std::string request_body(const std::string& prompt, const LlmClientConfig& c);

// Fixture file name for a prompt: hex of the 64-bit FNV-1a hash of the
// request body, plus ".json". The file holds the raw reply body.
std::string fixture_name(const std::string& prompt, const LlmClientConfig& c);

// Asks the client for keywords and normalized boxes. The reply must be
// {"keywords": [{word, x, y, w, h}, ...]}; boxes are clamped into the unit
// square. A malformed or failed reply is retried once, then the rules path
// answers instead with degraded set. Offline mode replays the recorded
// fixture and fails with an io error when none exists.
PromptAnalysis llm_extract(const std::string& prompt, const LlmClientConfig& c, int canvas,
                           int max_scale = 3);

// Pixel placements for rendering: scale from box height, geometry re-fitted
// to the canvas so every placement is valid. Requires boxes for all keywords.
std::vector<glyphgen::WordPlacement> to_placements(const PromptAnalysis& an, int canvas);

struct IdMetrics {
    double accuracy = 0, precision = 0, recall = 0, f1 = 0;
};

// Per-prompt exact multiset match rate plus micro-averaged precision, recall
// and F1 over word multisets. Empty denominators report 0.
IdMetrics keyword_id_metrics(const std::vector<std::vector<std::string>>& predicted,
                             const std::vector<std::vector<std::string>>& gold);

}  // namespace gf::promptintel
