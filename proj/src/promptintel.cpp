#include "gf/promptintel.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <optional>

#include "gf/scenes.hpp"
#include "httplib.h"
#include "json.hpp"

namespace gf::promptintel {

using nlohmann::json;

const char* source_name(Source s) {
    switch (s) {
        case Source::rules: return "rules";
        case Source::llm: return "llm";
        case Source::user: return "user";
    }
    return "rules";
}

std::vector<std::string> extract_quoted_keywords(const std::string& prompt) {
    std::vector<std::string> out;
    auto emit = [&out](const std::string& seg) {
        for (auto& w : scenes::caption_words(seg)) out.push_back(std::move(w));
    };
    const size_t n = prompt.size();
    size_t i = 0;
    while (i < n) {
        const char ch = prompt[i];
        size_t close = std::string::npos, body = 0, skip = 0;
        if (ch == '"') {
            body = i + 1;
            close = prompt.find('"', body);
            skip = 1;
        } else if (ch == '`' && i + 1 < n && prompt[i + 1] == '`') {
            body = i + 2;
            close = prompt.find("''", body);
            skip = 2;
        } else if (ch == '`' || ch == '\'') {
            body = i + 1;
            close = prompt.find('\'', body);
            skip = 1;
        } else {
            ++i;
            continue;
        }
        if (close == std::string::npos) break;  // unmatched opener: rest is unquoted
        emit(prompt.substr(body, close - body));
        i = close + skip;
    }
    return out;
}

std::vector<LayoutBox> propose_layout(const std::vector<std::string>& keywords, int canvas,
                                      int max_scale) {
    if (canvas <= 0) throw Error(ErrKind::validation, "canvas must be positive");
    if (max_scale < 1) throw Error(ErrKind::validation, "max_scale must be at least 1");
    for (const auto& w : keywords)
        if (!glyphgen::valid_word(w))
            throw Error(ErrKind::validation, "keyword '" + w + "' has characters outside A-Z 0-9");

    size_t kept = keywords.size();
    while (kept > 0) {
        const int slot = canvas / int(kept);
        int scale = 0;
        for (int s = max_scale; s >= 1 && scale == 0; --s) {
            bool ok = true;
            for (size_t k = 0; k < kept && ok; ++k) {
                const auto e = glyphgen::word_extent(int(keywords[k].size()),
                                                     glyphgen::Variant::regular, s);
                ok = e.w <= canvas && e.h <= slot;
            }
            if (ok) scale = s;
        }
        if (scale == 0) {
            --kept;  // even scale 1 does not fit: drop the trailing keyword
            continue;
        }
        std::vector<LayoutBox> boxes;
        boxes.reserve(kept);
        for (size_t k = 0; k < kept; ++k) {
            const auto e = glyphgen::word_extent(int(keywords[k].size()),
                                                 glyphgen::Variant::regular, scale);
            const int x = (canvas - e.w) / 2;
            const int y = int(k) * slot + (slot - e.h) / 2;
            boxes.push_back({double(x) / canvas, double(y) / canvas, double(e.w) / canvas,
                             double(e.h) / canvas});
        }
        return boxes;
    }
    return {};
}

PromptAnalysis rules_analyze(const std::string& prompt, int canvas, int max_scale) {
    PromptAnalysis an;
    an.prompt = prompt;
    an.source = Source::rules;
    an.keywords = extract_quoted_keywords(prompt);
    an.boxes = propose_layout(an.keywords, canvas, max_scale);
    if (an.boxes.size() < an.keywords.size()) {
        an.keywords.resize(an.boxes.size());
        an.degraded = true;
    }
    return an;
}

const char* kInstructionTemplate =
    "Identify the words that must appear as rendered text in the described image "
    "and place one box per word. Reply with JSON only, no prose: {\"keywords\": "
    "[{\"word\": \"...\", \"x\": 0.0, \"y\": 0.0, \"w\": 0.0, \"h\": 0.0}]}. "
    "Words are uppercase A-Z 0-9; coordinates are fractions of the canvas with "
    "the origin at the top left.";

std::string request_body(const std::string& prompt, const LlmClientConfig& c) {
    json req;
    req["canvas_aspect"] = 1.0;
    req["instruction"] = kInstructionTemplate;
    req["model"] = c.model;
    req["prompt"] = prompt;
    return req.dump();  // object keys serialize sorted, so the body is canonical
}

std::string fixture_name(const std::string& prompt, const LlmClientConfig& c) {
    return hex64(fnv1a64(request_body(prompt, c))) + ".json";
}

namespace {

// Parses and validates a reply body; nullopt means malformed.
std::optional<PromptAnalysis> parse_reply(const std::string& body, const std::string& prompt) {
    json rep = json::parse(body, nullptr, /*allow_exceptions=*/false);
    if (!rep.is_object() || !rep.contains("keywords") || !rep["keywords"].is_array())
        return std::nullopt;
    PromptAnalysis an;
    an.prompt = prompt;
    an.source = Source::llm;
    for (const auto& item : rep["keywords"]) {
        if (!item.is_object()) return std::nullopt;
        for (const char* key : {"word", "x", "y", "w", "h"})
            if (!item.contains(key)) return std::nullopt;
        if (!item["word"].is_string()) return std::nullopt;
        for (const char* key : {"x", "y", "w", "h"})
            if (!item[key].is_number()) return std::nullopt;
        const auto words = scenes::caption_words(item["word"].get<std::string>());
        if (words.size() != 1) return std::nullopt;  // exactly one word per box
        LayoutBox b{item["x"].get<double>(), item["y"].get<double>(),
                    item["w"].get<double>(), item["h"].get<double>()};
        if (!std::isfinite(b.x) || !std::isfinite(b.y) || !std::isfinite(b.w) ||
            !std::isfinite(b.h))
            return std::nullopt;
        b.x = std::clamp(b.x, 0.0, 1.0);
        b.y = std::clamp(b.y, 0.0, 1.0);
        b.w = std::clamp(b.w, 0.0, 1.0 - b.x);
        b.h = std::clamp(b.h, 0.0, 1.0 - b.y);
        if (b.w <= 0.0 || b.h <= 0.0) return std::nullopt;
        an.keywords.push_back(words.front());
        an.boxes.push_back(b);
    }
    return an;
}

std::optional<std::string> fetch_offline(const std::string& prompt, const LlmClientConfig& c) {
    const auto path = std::filesystem::path(c.fixture_dir) / fixture_name(prompt, c);
    if (!std::filesystem::exists(path))
        throw Error(ErrKind::io, "no recorded reply " + path.string() + " for prompt \"" +
                                     prompt + "\"; record a fixture or configure an endpoint");
    const auto bytes = read_file(path);
    return std::string(bytes.begin(), bytes.end());
}

std::optional<std::string> fetch_online(const std::string& prompt, const LlmClientConfig& c) {
    // Split http://host:port/path into the client base and the request path.
    const auto scheme_end = c.endpoint.find("://");
    const auto path_start =
        c.endpoint.find('/', scheme_end == std::string::npos ? 0 : scheme_end + 3);
    const std::string base =
        path_start == std::string::npos ? c.endpoint : c.endpoint.substr(0, path_start);
    const std::string path = path_start == std::string::npos ? "/" : c.endpoint.substr(path_start);

    httplib::Client cli(base);
    const auto timeout = std::chrono::milliseconds(int64_t(c.timeout_s * 1000.0));
    cli.set_connection_timeout(timeout);
    cli.set_read_timeout(timeout);
    cli.set_write_timeout(timeout);
    auto res = cli.Post(path, request_body(prompt, c), "application/json");
    if (!res || res->status != 200) return std::nullopt;
    return res->body;
}

}  // namespace

PromptAnalysis llm_extract(const std::string& prompt, const LlmClientConfig& c, int canvas,
                           int max_scale) {
    const bool offline = c.endpoint.empty();
    if (offline && c.fixture_dir.empty())
        throw Error(ErrKind::config, "offline keyword extraction requires a fixture directory");

    for (int attempt = 0; attempt < 2; ++attempt) {
        const auto body = offline ? fetch_offline(prompt, c) : fetch_online(prompt, c);
        if (!body) continue;  // transport failure: retry once
        if (auto an = parse_reply(*body, prompt)) return *an;
    }
    PromptAnalysis an = rules_analyze(prompt, canvas, max_scale);
    an.degraded = true;
    return an;
}

std::vector<glyphgen::WordPlacement> to_placements(const PromptAnalysis& an, int canvas) {
    if (an.boxes.size() != an.keywords.size())
        throw Error(ErrKind::validation, "analysis has no box for every keyword");
    std::vector<glyphgen::WordPlacement> out;
    out.reserve(an.keywords.size());
    for (size_t k = 0; k < an.keywords.size(); ++k) {
        const auto& word = an.keywords[k];
        const auto& b = an.boxes[k];
        int scale = std::max(1, int(std::lround(b.h * canvas / double(glyphgen::kGlyphH))));
        auto e = glyphgen::word_extent(int(word.size()), glyphgen::Variant::regular, scale);
        while (scale > 1 && (e.w > canvas || e.h > canvas)) {
            --scale;
            e = glyphgen::word_extent(int(word.size()), glyphgen::Variant::regular, scale);
        }
        if (e.w > canvas || e.h > canvas)
            throw Error(ErrKind::validation,
                        "keyword '" + word + "' does not fit the canvas even at scale 1");
        const int x = std::clamp(int(std::lround(b.x * canvas)), 0, canvas - e.w);
        const int y = std::clamp(int(std::lround(b.y * canvas)), 0, canvas - e.h);
        out.push_back({word, x, y, e.w, e.h, glyphgen::Variant::regular, scale});
    }
    return out;
}

IdMetrics keyword_id_metrics(const std::vector<std::vector<std::string>>& predicted,
                             const std::vector<std::vector<std::string>>& gold) {
    if (predicted.size() != gold.size())
        throw Error(ErrKind::validation, "prediction and gold lists differ in length");
    int64_t inter = 0, np = 0, ng = 0, exact = 0;
    for (size_t i = 0; i < predicted.size(); ++i) {
        auto a = predicted[i], b = gold[i];
        std::sort(a.begin(), a.end());
        std::sort(b.begin(), b.end());
        std::vector<std::string> isect;
        std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(isect));
        inter += int64_t(isect.size());
        np += int64_t(a.size());
        ng += int64_t(b.size());
        if (a == b) ++exact;
    }
    IdMetrics m;
    m.accuracy = predicted.empty() ? 0.0 : double(exact) / double(predicted.size());
    m.precision = np > 0 ? double(inter) / double(np) : 0.0;
    m.recall = ng > 0 ? double(inter) / double(ng) : 0.0;
    m.f1 = (m.precision + m.recall) > 0
               ? 2.0 * m.precision * m.recall / (m.precision + m.recall)
               : 0.0;
    return m;
}

}  // namespace gf::promptintel
