#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <set>

#include "doctest.h"
#include "gf/core.hpp"

using namespace gf;
namespace fs = std::filesystem;

static fs::path temp_dir() {
    auto d = fs::temp_directory_path() / ("gf_core_test_" + std::to_string(::getpid()));
    fs::create_directories(d);
    return d;
}

TEST_CASE("fnv1a64 reference vectors") {
    CHECK(fnv1a64(std::string("")) == 0xcbf29ce484222325ull);
    CHECK(fnv1a64(std::string("a")) == 0xaf63dc4c8601ec8cull);
    CHECK(fnv1a64(std::string("foobar")) == 0x85944171f73967e8ull);
    CHECK(hex64(0xaf63dc4c8601ec8cull) == "af63dc4c8601ec8c");
}

TEST_CASE("rng determinism and forking") {
    Rng a(42), b(42);
    for (int i = 0; i < 1000; ++i) CHECK(a.next() == b.next());

    Rng c(42), d(43);
    int same = 0;
    for (int i = 0; i < 64; ++i) same += c.next() == d.next();
    CHECK(same == 0);

    Rng e(7);
    Rng f1 = e.fork(1), f2 = e.fork(2), f1b = Rng(7).fork(1);
    CHECK(f1.next() == f1b.next());
    CHECK(f1.next() != f2.next());
}

TEST_CASE("uniform_int bounds and coverage") {
    Rng r(1);
    std::set<int> seen;
    for (int i = 0; i < 1000; ++i) {
        int v = r.uniform_int(7);
        CHECK(v >= 0);
        CHECK(v < 7);
        seen.insert(v);
    }
    CHECK(seen.size() == 7);
    CHECK_THROWS_AS((void)r.uniform_int(0), Error);
}

TEST_CASE("normal moments") {
    Rng r(123);
    const int n = 200000;
    double sum = 0, sq = 0;
    for (int i = 0; i < n; ++i) {
        double v = r.normal();
        sum += v;
        sq += v * v;
    }
    const double mean = sum / n;
    const double var = sq / n - mean * mean;
    CHECK(std::abs(mean) < 0.01);
    CHECK(std::abs(var - 1.0) < 0.02);
}

TEST_CASE("uniform in [0,1)") {
    Rng r(5);
    for (int i = 0; i < 10000; ++i) {
        double u = r.uniform();
        CHECK(u >= 0.0);
        CHECK(u < 1.0);
    }
}

TEST_CASE("pgm round trip is exact at 8 bits") {
    Image img(1, 5, 4);
    for (int y = 0; y < 5; ++y)
        for (int x = 0; x < 4; ++x) img.at(0, y, x) = ((y * 4 + x) % 256) / 255.0;
    auto bytes = encode_pnm(img);
    Image back = decode_pnm(bytes);
    REQUIRE(back.c == 1);
    REQUIRE(back.h == 5);
    REQUIRE(back.w == 4);
    for (size_t i = 0; i < img.px.size(); ++i) CHECK(back.px[i] == img.px[i]);
    CHECK(encode_pnm(back) == bytes);
}

TEST_CASE("ppm round trip and file io") {
    auto dir = temp_dir();
    Image img(3, 3, 7);
    Rng r(9);
    for (auto& v : img.px) v = r.uniform_int(256) / 255.0;
    auto p = dir / "t.ppm";
    save_image(img, p);
    Image back = load_image(p);
    CHECK(back.c == 3);
    CHECK(back.px == img.px);
    fs::remove_all(dir);
}

TEST_CASE("pnm decode rejects malformed input") {
    std::vector<uint8_t> junk = {'P', '4', '\n'};
    CHECK_THROWS_AS((void)decode_pnm(junk), Error);
    std::string truncated = "P5\n4 4\n255\n12";
    CHECK_THROWS_AS((void)decode_pnm({truncated.begin(), truncated.end()}), Error);
    std::string bad_maxval = "P5\n2 2\n65535\n";
    CHECK_THROWS_AS((void)decode_pnm({bad_maxval.begin(), bad_maxval.end()}), Error);
}

TEST_CASE("byte writer reader round trip") {
    ByteWriter w;
    w.u8(7);
    w.u16(0xBEEF);
    w.u32(0xDEADBEEF);
    w.u64(0x0123456789ABCDEFull);
    w.f64(-1.5);
    w.str8("hello");
    ByteReader r(w.buf);
    CHECK(r.u8() == 7);
    CHECK(r.u16() == 0xBEEF);
    CHECK(r.u32() == 0xDEADBEEF);
    CHECK(r.u64() == 0x0123456789ABCDEFull);
    CHECK(r.f64() == -1.5);
    CHECK(r.str8() == "hello");
    CHECK(r.remaining() == 0);
    CHECK_THROWS_AS((void)r.u8(), Error);
}

TEST_CASE("atomic write leaves no temp file") {
    auto dir = temp_dir();
    auto p = dir / "x.bin";
    write_file_atomic(p, std::string("abc"));
    CHECK(read_text_file(p) == "abc");
    CHECK(!fs::exists(dir / "x.bin.tmp"));
    write_file_atomic(p, std::string("xyz"));
    CHECK(read_text_file(p) == "xyz");
    fs::remove_all(dir);
}

TEST_CASE("error kinds carry names") {
    CHECK(std::string(err_kind_name(ErrKind::config)) == "config");
    CHECK(std::string(err_kind_name(ErrKind::io)) == "io");
    try {
        throw Error(ErrKind::validation, "boom");
    } catch (const Error& e) {
        CHECK(e.kind == ErrKind::validation);
        CHECK(std::string(e.what()) == "boom");
    }
}
