#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace gf {

enum class ErrKind { config, validation, dependency, io, internal };

struct Error : std::runtime_error {
    ErrKind kind;
    Error(ErrKind k, const std::string& msg) : std::runtime_error(msg), kind(k) {}
};

const char* err_kind_name(ErrKind k);

// ---------------------------------------------------------------------------
// Hashing (FNV-1a, 64-bit). Used for config hashes, parameter hashes and
// fixture keys; stable across platforms.

uint64_t fnv1a64(const void* data, size_t n, uint64_t seed = 0xcbf29ce484222325ull);
uint64_t fnv1a64(const std::string& s);
std::string hex64(uint64_t v);

// Seed derivation for independent deterministic streams.
uint64_t mix64(uint64_t a, uint64_t b);

// ---------------------------------------------------------------------------
// Deterministic RNG: xoshiro256++ seeded via splitmix64, with explicit
// Box-Muller normals. std::* distributions are implementation-defined, so
// everything is spelled out here.

struct Rng {
    explicit Rng(uint64_t seed);

    uint64_t next();
    double uniform();             // [0, 1)
    int uniform_int(int n);       // [0, n), unbiased
    double normal();              // standard normal
    Rng fork(uint64_t stream) const { return Rng(mix64(seed_, stream)); }
    uint64_t seed() const { return seed_; }

  private:
    uint64_t s_[4];
    uint64_t seed_;
    bool has_cached_ = false;
    double cached_ = 0.0;
};

// ---------------------------------------------------------------------------
// Images: CHW, values in [0,1]. 1 channel = grayscale, 3 = RGB.
// Stored as PGM (P5) / PPM (P6), 8-bit.

struct Image {
    int c = 1, h = 0, w = 0;
    std::vector<double> px;

    Image() = default;
    Image(int c_, int h_, int w_, double fill = 0.0)
        : c(c_), h(h_), w(w_), px(size_t(c_) * h_ * w_, fill) {}

    double& at(int ch, int y, int x) { return px[(size_t(ch) * h + y) * w + x]; }
    double at(int ch, int y, int x) const { return px[(size_t(ch) * h + y) * w + x]; }
    size_t numel() const { return px.size(); }
};

std::vector<uint8_t> encode_pnm(const Image& img);
Image decode_pnm(const std::vector<uint8_t>& bytes, const std::string& origin = "");
void save_image(const Image& img, const std::filesystem::path& path);
Image load_image(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// File helpers. Writes are atomic (temp file + rename).

void write_file_atomic(const std::filesystem::path& path, const void* data, size_t n);
void write_file_atomic(const std::filesystem::path& path, const std::string& s);
void write_file_atomic(const std::filesystem::path& path, const std::vector<uint8_t>& bytes);
std::vector<uint8_t> read_file(const std::filesystem::path& path);
std::string read_text_file(const std::filesystem::path& path);

// Little-endian scalar packing for the binary formats.
struct ByteWriter {
    std::vector<uint8_t> buf;
    void u8(uint8_t v) { buf.push_back(v); }
    void u16(uint16_t v);
    void u32(uint32_t v);
    void u64(uint64_t v);
    void f64(double v);
    void bytes(const void* p, size_t n);
    void str8(const std::string& s);  // u8 length + bytes, length <= 255
};

struct ByteReader {
    const uint8_t* p;
    size_t n;
    size_t off = 0;
    std::string origin;

    ByteReader(const std::vector<uint8_t>& b, std::string orig = "")
        : p(b.data()), n(b.size()), origin(std::move(orig)) {}

    uint8_t u8();
    uint16_t u16();
    uint32_t u32();
    uint64_t u64();
    double f64();
    void bytes(void* dst, size_t k);
    std::string str8();
    size_t remaining() const { return n - off; }
};

}  // namespace gf
