#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <thread>

#include "doctest.h"
#include "gf/glyphgen.hpp"
#include "gf/promptintel.hpp"
#include "httplib.h"
#include "json.hpp"

using namespace gf;
using namespace gf::promptintel;
using nlohmann::json;

namespace {

std::filesystem::path fresh_dir(const char* name) {
    auto dir = std::filesystem::temp_directory_path() / name;
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

std::string good_reply() {
    return R"({"keywords": [
        {"word": "FORREST", "x": 0.25, "y": 0.20, "w": 0.50, "h": 0.12},
        {"word": "GUMP",    "x": 0.30, "y": 0.55, "w": 0.40, "h": 0.12}]})";
}

}  // namespace

TEST_CASE("quoted keywords are extracted in order, split per word") {
    using V = std::vector<std::string>;
    CHECK(extract_quoted_keywords("A modern movie poster for 'Batman'") == V{"BATMAN"});
    CHECK(extract_quoted_keywords("a poster of Batman with the word Batman on it") == V{});
    CHECK(extract_quoted_keywords("A colorful book cover for \"Iron Man\"") == V{"IRON", "MAN"});
    CHECK(extract_quoted_keywords("A modern movie poster for `Batman'") == V{"BATMAN"});
    CHECK(extract_quoted_keywords("A colorful book cover for ``Iron Man''") == V{"IRON", "MAN"});
    CHECK(extract_quoted_keywords("'A' then \"B C\" then `D'") == V{"A", "B", "C", "D"});
    CHECK(extract_quoted_keywords("sale 'UP-TO 50' today") == V{"UP", "TO", "50"});
    CHECK(extract_quoted_keywords("an 'unclosed quote") == V{});
    CHECK(extract_quoted_keywords("'AREA51'") == V{"AREA51"});
    CHECK(extract_quoted_keywords("") == V{});
    CHECK(extract_quoted_keywords("''") == V{});

    // Pure and order-preserving: same input, same output; results carry no
    // quotes, so a second pass over the joined words finds nothing.
    const std::string p = "'ONE' and ``TWO THREE''";
    CHECK(extract_quoted_keywords(p) == extract_quoted_keywords(p));
    std::string joined;
    for (const auto& w : extract_quoted_keywords(p)) joined += w + " ";
    CHECK(extract_quoted_keywords(joined) == V{});
}

TEST_CASE("layout proposals center rows at the largest common scale") {
    auto one = propose_layout({"CAT"}, 64, 3);
    REQUIRE(one.size() == 1);
    CHECK(one[0].w == 51.0 / 64);  // scale 3: 3 * (6*3 - 1)
    CHECK(one[0].h == 21.0 / 64);
    CHECK(one[0].x == 6.0 / 64);
    CHECK(one[0].y == 21.0 / 64);

    auto flat = propose_layout({"CAT"}, 64, 1);
    CHECK(flat[0].w == 17.0 / 64);
    CHECK(flat[0].h == 7.0 / 64);

    auto two = propose_layout({"AA", "BB"}, 64, 3);
    REQUIRE(two.size() == 2);
    CHECK(two[0].w == two[1].w);
    CHECK(two[0].x == two[1].x);
    CHECK(two[0].y + two[0].h <= two[1].y);

    CHECK(propose_layout({}, 64).empty());
    // 11 characters need 65 pixels even at scale 1.
    CHECK(propose_layout({"ABCDEFGHIJK"}, 64).empty());
    // Three rows cannot fit a 7-pixel glyph height in 20/3 slots; two can.
    CHECK(propose_layout({"CAT", "DOG", "SUN"}, 20).size() == 2);
    CHECK_THROWS_AS((void)propose_layout({"bad word"}, 64), Error);

    Rng rng(99);
    const std::vector<std::string> pool = {"A", "GO", "CAT", "NEON", "SALES", "COFFEE"};
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<std::string> kws;
        for (int k = rng.uniform_int(5); k > 0; --k)
            kws.push_back(pool[size_t(rng.uniform_int(int(pool.size())))]);
        auto boxes = propose_layout(kws, 64, 3);
        for (size_t i = 0; i < boxes.size(); ++i) {
            CHECK(boxes[i].x >= 0.0);
            CHECK(boxes[i].y >= 0.0);
            CHECK(boxes[i].x + boxes[i].w <= 1.0);
            CHECK(boxes[i].y + boxes[i].h <= 1.0);
            if (i > 0) CHECK(boxes[i - 1].y + boxes[i - 1].h <= boxes[i].y);
        }
    }
}

TEST_CASE("rules analysis pairs keywords with boxes and flags truncation") {
    auto an = rules_analyze("posters saying 'CAT' and 'DOG'", 64);
    CHECK(an.source == Source::rules);
    CHECK(!an.degraded);
    CHECK(an.keywords == std::vector<std::string>({"CAT", "DOG"}));
    CHECK(an.boxes.size() == 2);

    auto crowded = rules_analyze("'CAT' 'DOG' 'SUN'", 20);
    CHECK(crowded.degraded);
    CHECK(crowded.keywords.size() == 2);
    CHECK(crowded.boxes.size() == 2);
}

TEST_CASE("request bodies and fixture names are canonical") {
    LlmClientConfig c;
    c.fixture_dir = "unused";
    const std::string body = request_body("A sign saying 'OPEN'", c);
    auto parsed = json::parse(body);
    CHECK(parsed["prompt"] == "A sign saying 'OPEN'");
    CHECK(parsed["model"] == "glyph-layout-1");
    CHECK(parsed["canvas_aspect"] == 1.0);
    CHECK(parsed["instruction"] == kInstructionTemplate);
    CHECK(body.find("\"canvas_aspect\"") < body.find("\"instruction\""));

    const auto n1 = fixture_name("A", c);
    CHECK(n1 == fixture_name("A", c));
    CHECK(n1 != fixture_name("B", c));
    CHECK(n1.size() == 16 + 5);
    CHECK(n1.substr(16) == ".json");
    auto c2 = c;
    c2.model = "other-model";
    CHECK(n1 != fixture_name("A", c2));
}

TEST_CASE("offline replay validates, clamps, and falls back on bad replies") {
    auto dir = fresh_dir("gf_llm_fixtures");
    LlmClientConfig c;
    c.fixture_dir = dir.string();

    const std::string prompt = "A vintage movie poster for Forrest Gump";
    write_file_atomic(dir / fixture_name(prompt, c), good_reply());
    auto an = llm_extract(prompt, c, 64);
    CHECK(an.source == Source::llm);
    CHECK(!an.degraded);
    CHECK(an.keywords == std::vector<std::string>({"FORREST", "GUMP"}));
    REQUIRE(an.boxes.size() == 2);
    CHECK(an.boxes[0].y + an.boxes[0].h <= an.boxes[1].y);  // stacked

    // Out-of-range coordinates clamp into the unit square.
    const std::string clamped = "A poster for Dune";
    write_file_atomic(dir / fixture_name(clamped, c),
                      R"({"keywords": [{"word": "dune", "x": 0.7, "y": -0.2, "w": 0.6, "h": 0.3}]})");
    auto cl = llm_extract(clamped, c, 64);
    CHECK(cl.source == Source::llm);
    CHECK(cl.keywords == std::vector<std::string>({"DUNE"}));
    CHECK(cl.boxes[0].x == 0.7);
    CHECK(cl.boxes[0].y == 0.0);
    CHECK(cl.boxes[0].w == doctest::Approx(0.3));
    CHECK(cl.boxes[0].h == 0.3);

    // Malformed JSON: retried, then the rules path answers.
    const std::string bad = "A poster for 'ALIEN'";
    write_file_atomic(dir / fixture_name(bad, c), "reply lost in transit");
    auto fb = llm_extract(bad, c, 64);
    CHECK(fb.source == Source::rules);
    CHECK(fb.degraded);
    CHECK(fb.keywords == std::vector<std::string>({"ALIEN"}));

    // Schema violations count as malformed too.
    for (const char* reply :
         {R"({"keywords": [{"word": "TWO WORDS", "x": 0, "y": 0, "w": 0.5, "h": 0.2}]})",
          R"({"keywords": [{"word": "A", "x": 0, "y": 0, "w": 0.5}]})",
          R"({"keywords": [{"word": "A", "x": 1.5, "y": 0, "w": 0.2, "h": 0.2}]})",
          R"({"keywords": [{"word": "", "x": 0, "y": 0, "w": 0.5, "h": 0.2}]})",
          R"({"keywords": {"word": "A"}})"}) {
        const std::string p2 = std::string("schema case: ") + reply;
        write_file_atomic(dir / fixture_name(p2, c), reply);
        CHECK(llm_extract(p2, c, 64).source == Source::rules);
    }

    CHECK_THROWS_AS((void)llm_extract("never recorded", c, 64), Error);
    LlmClientConfig unconfigured;
    CHECK_THROWS_AS((void)llm_extract(prompt, unconfigured, 64), Error);
}

TEST_CASE("the fixtures shipped with the repository replay correctly") {
    const char* src = std::getenv("GF_SOURCE_DIR");
    REQUIRE(src != nullptr);
    LlmClientConfig c;
    c.fixture_dir = (std::filesystem::path(src) / "fixtures" / "llm").string();

    auto fg = llm_extract("A vintage movie poster for Forrest Gump", c, 64);
    CHECK(fg.source == Source::llm);
    CHECK(fg.keywords == std::vector<std::string>({"FORREST", "GUMP"}));

    auto bm = llm_extract("A modern movie poster for `Batman'", c, 64);
    CHECK(bm.source == Source::llm);
    CHECK(bm.keywords == std::vector<std::string>({"BATMAN"}));

    auto im = llm_extract("A colorful book cover for ``Iron Man''", c, 64);
    CHECK(im.source == Source::llm);
    CHECK(im.keywords == std::vector<std::string>({"IRON", "MAN"}));

    // The deliberately malformed recording lands on the rules fallback.
    auto neon = llm_extract("A neon cafe sign at night", c, 64);
    CHECK(neon.source == Source::rules);
    CHECK(neon.degraded);
    CHECK(neon.keywords.empty());

    // Every analysis with boxes converts to placements on the default canvas.
    for (const auto& an : {fg, bm, im})
        CHECK(to_placements(an, 64).size() == an.keywords.size());
}

TEST_CASE("online extraction posts the request and retries once") {
    httplib::Server svr;
    std::atomic<int> calls{0};
    std::string seen_body;
    svr.Post("/extract", [&](const httplib::Request& req, httplib::Response& res) {
        const int n = ++calls;
        seen_body = req.body;
        if (n == 1) {
            res.status = 500;  // first attempt fails, the retry succeeds
            return;
        }
        res.set_content(good_reply(), "application/json");
    });
    const int port = svr.bind_to_any_port("127.0.0.1");
    REQUIRE(port > 0);
    std::thread worker([&] { svr.listen_after_bind(); });
    svr.wait_until_ready();

    LlmClientConfig c;
    c.endpoint = "http://127.0.0.1:" + std::to_string(port) + "/extract";
    c.timeout_s = 5.0;
    const std::string prompt = "A vintage movie poster for Forrest Gump";
    auto an = llm_extract(prompt, c, 64);
    CHECK(an.source == Source::llm);
    CHECK(!an.degraded);
    CHECK(an.keywords == std::vector<std::string>({"FORREST", "GUMP"}));
    CHECK(calls == 2);
    CHECK(seen_body == request_body(prompt, c));

    // Persistent failure exhausts the retry and falls back.
    auto broken = c;
    broken.endpoint = "http://127.0.0.1:" + std::to_string(port) + "/missing";
    auto fb = llm_extract("still 'QUOTED' here", broken, 64);
    CHECK(fb.source == Source::rules);
    CHECK(fb.degraded);
    CHECK(fb.keywords == std::vector<std::string>({"QUOTED"}));

    svr.stop();
    worker.join();

    // Nothing listening: transport failure on both attempts, rules answer.
    LlmClientConfig dead;
    dead.endpoint = "http://127.0.0.1:9";
    dead.timeout_s = 0.5;
    auto off = llm_extract("a 'SIGN'", dead, 64);
    CHECK(off.source == Source::rules);
    CHECK(off.degraded);
}

TEST_CASE("analyses convert to valid pixel placements") {
    auto an = rules_analyze("a poster for 'CAT'", 64);
    auto pl = to_placements(an, 64);
    REQUIRE(pl.size() == 1);
    CHECK(pl[0].text == "CAT");
    CHECK(pl[0].scale == 3);
    CHECK(pl[0].w == 51);
    CHECK(pl[0].h == 21);
    CHECK(pl[0].x == 6);
    CHECK(pl[0].y == 21);
    (void)glyphgen::render_mask(pl, 64, 64);  // placements are in bounds

    PromptAnalysis llm;
    llm.keywords = {"FORREST", "GUMP"};
    llm.boxes = {{0.25, 0.20, 0.50, 0.12}, {0.30, 0.55, 0.40, 0.12}};
    auto pl2 = to_placements(llm, 64);
    REQUIRE(pl2.size() == 2);
    for (const auto& p : pl2) {
        CHECK(p.scale == 1);
        CHECK(p.x + p.w <= 64);
        CHECK(p.y + p.h <= 64);
    }

    // A reply claiming a huge box still yields a placement that fits.
    PromptAnalysis big;
    big.keywords = {"WIDE"};
    big.boxes = {{0.9, 0.9, 0.1, 1.0}};
    auto pl3 = to_placements(big, 64);
    CHECK(pl3[0].x + pl3[0].w <= 64);
    CHECK(pl3[0].y + pl3[0].h <= 64);

    PromptAnalysis incomplete;
    incomplete.keywords = {"A"};
    CHECK_THROWS_AS((void)to_placements(incomplete, 64), Error);

    PromptAnalysis hopeless;
    hopeless.keywords = {"ABCDEFGHIJK"};
    hopeless.boxes = {{0, 0, 1.0, 0.2}};
    CHECK_THROWS_AS((void)to_placements(hopeless, 64), Error);
}

TEST_CASE("keyword identification metrics match their definitions") {
    using VV = std::vector<std::vector<std::string>>;
    auto perfect = keyword_id_metrics(VV{{"A", "B"}, {"C"}}, VV{{"A", "B"}, {"C"}});
    CHECK(perfect.accuracy == 1.0);
    CHECK(perfect.precision == 1.0);
    CHECK(perfect.recall == 1.0);
    CHECK(perfect.f1 == 1.0);

    auto m = keyword_id_metrics(VV{{"A", "B", "D"}}, VV{{"A", "B", "C"}});
    CHECK(m.accuracy == 0.0);
    CHECK(m.precision == doctest::Approx(2.0 / 3));
    CHECK(m.recall == doctest::Approx(2.0 / 3));
    CHECK(m.f1 == doctest::Approx(2.0 / 3));

    auto empty = keyword_id_metrics(VV{{}, {}}, VV{{"A"}, {"B"}});
    CHECK(empty.accuracy == 0.0);
    CHECK(empty.precision == 0.0);
    CHECK(empty.recall == 0.0);
    CHECK(empty.f1 == 0.0);

    // Multiset semantics: duplicates only match as often as they occur.
    auto dup = keyword_id_metrics(VV{{"A", "A"}}, VV{{"A"}});
    CHECK(dup.precision == 0.5);
    CHECK(dup.recall == 1.0);

    // Order within a prompt does not matter; ACC needs the exact multiset.
    auto swapped = keyword_id_metrics(VV{{"B", "A"}}, VV{{"A", "B"}});
    CHECK(swapped.accuracy == 1.0);

    CHECK_THROWS_AS((void)keyword_id_metrics(VV{{}}, VV{}), Error);
}

TEST_CASE("metrics agree with a brute-force counting oracle") {
    Rng rng(2024);
    const std::vector<std::string> alphabet = {"CAT", "DOG", "SUN", "RED", "GO"};
    std::vector<std::vector<std::string>> pred, gold;
    for (int i = 0; i < 1000; ++i) {
        auto draw = [&] {
            std::vector<std::string> ws;
            for (int k = rng.uniform_int(4); k > 0; --k)
                ws.push_back(alphabet[size_t(rng.uniform_int(int(alphabet.size())))]);
            return ws;
        };
        pred.push_back(draw());
        gold.push_back(draw());
    }
    auto m = keyword_id_metrics(pred, gold);

    // Oracle: pair each predicted word off against a remaining gold word.
    int64_t inter = 0, np = 0, ng = 0, exact = 0;
    for (size_t i = 0; i < pred.size(); ++i) {
        std::vector<std::string> rest = gold[i];
        int64_t matched = 0;
        for (const auto& w : pred[i]) {
            auto it = std::find(rest.begin(), rest.end(), w);
            if (it != rest.end()) {
                rest.erase(it);
                ++matched;
            }
        }
        inter += matched;
        np += int64_t(pred[i].size());
        ng += int64_t(gold[i].size());
        if (matched == int64_t(pred[i].size()) && rest.empty()) ++exact;
    }
    CHECK(m.accuracy == double(exact) / 1000.0);
    CHECK(m.precision == (np ? double(inter) / double(np) : 0.0));
    CHECK(m.recall == (ng ? double(inter) / double(ng) : 0.0));
    const double p = m.precision, r = m.recall;
    CHECK(m.f1 == ((p + r) > 0 ? 2 * p * r / (p + r) : 0.0));
}
