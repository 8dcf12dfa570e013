#include "gf/core.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numbers>

namespace fs = std::filesystem;

namespace gf {

const char* err_kind_name(ErrKind k) {
    switch (k) {
        case ErrKind::config: return "config";
        case ErrKind::validation: return "validation";
        case ErrKind::dependency: return "dependency";
        case ErrKind::io: return "io";
        case ErrKind::internal: return "internal";
    }
    return "unknown";
}

uint64_t fnv1a64(const void* data, size_t n, uint64_t seed) {
    const uint8_t* p = static_cast<const uint8_t*>(data);
    uint64_t h = seed;
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

std::string hex64(uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

static uint64_t splitmix64(uint64_t& x) {
    x += 0x9e3779b97f4a7c15ull;
    uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

uint64_t mix64(uint64_t a, uint64_t b) {
    uint64_t x = a ^ (0x9e3779b97f4a7c15ull + (b << 6) + (b >> 2));
    uint64_t s = x;
    uint64_t r = splitmix64(s);
    return r ^ b;
}

Rng::Rng(uint64_t seed) : seed_(seed) {
    uint64_t x = seed;
    for (auto& si : s_) si = splitmix64(x);
}

static inline uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

uint64_t Rng::next() {
    const uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
    const uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
}

double Rng::uniform() {
    return double(next() >> 11) * 0x1.0p-53;
}

int Rng::uniform_int(int n) {
    if (n <= 0) throw Error(ErrKind::internal, "uniform_int: n must be positive");
    const uint64_t un = uint64_t(n);
    const uint64_t lim = UINT64_MAX - UINT64_MAX % un;
    uint64_t r;
    do {
        r = next();
    } while (r >= lim);
    return int(r % un);
}

double Rng::normal() {
    if (has_cached_) {
        has_cached_ = false;
        return cached_;
    }
    // (r + 0.5) * 2^-53 keeps u strictly inside (0,1).
    const double u1 = (double(next() >> 11) + 0.5) * 0x1.0p-53;
    const double u2 = (double(next() >> 11) + 0.5) * 0x1.0p-53;
    const double rad = std::sqrt(-2.0 * std::log(u1));
    const double ang = 2.0 * std::numbers::pi * u2;
    cached_ = rad * std::sin(ang);
    has_cached_ = true;
    return rad * std::cos(ang);
}

// ---------------------------------------------------------------------------

static uint8_t to_u8(double v) {
    if (v < 0.0) v = 0.0;
    if (v > 1.0) v = 1.0;
    return uint8_t(std::lround(v * 255.0));
}

std::vector<uint8_t> encode_pnm(const Image& img) {
    if (img.c != 1 && img.c != 3)
        throw Error(ErrKind::validation, "encode_pnm: image must have 1 or 3 channels");
    if (img.h <= 0 || img.w <= 0)
        throw Error(ErrKind::validation, "encode_pnm: empty image");
    std::string header = (img.c == 1 ? "P5\n" : "P6\n") + std::to_string(img.w) + " " +
                         std::to_string(img.h) + "\n255\n";
    std::vector<uint8_t> out(header.begin(), header.end());
    out.reserve(out.size() + img.numel());
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x)
            for (int ch = 0; ch < img.c; ++ch) out.push_back(to_u8(img.at(ch, y, x)));
    return out;
}

Image decode_pnm(const std::vector<uint8_t>& bytes, const std::string& origin) {
    const std::string where = origin.empty() ? "pnm data" : origin;
    size_t off = 0;
    auto fail = [&](const std::string& why) -> Error {
        return Error(ErrKind::io, "decode_pnm: " + why + " in " + where);
    };
    auto skip_ws = [&] {
        while (off < bytes.size()) {
            if (bytes[off] == '#') {
                while (off < bytes.size() && bytes[off] != '\n') ++off;
            } else if (std::isspace(bytes[off])) {
                ++off;
            } else {
                break;
            }
        }
    };
    auto next_int = [&]() -> int {
        skip_ws();
        size_t start = off;
        while (off < bytes.size() && std::isdigit(bytes[off])) ++off;
        if (off == start) throw fail("expected integer");
        int v = 0;
        for (size_t i = start; i < off; ++i) v = v * 10 + (bytes[i] - '0');
        return v;
    };

    if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6'))
        throw fail("not a P5/P6 file");
    const int c = bytes[1] == '5' ? 1 : 3;
    off = 2;
    const int w = next_int();
    const int h = next_int();
    const int maxval = next_int();
    if (maxval != 255) throw fail("maxval must be 255");
    if (w <= 0 || h <= 0) throw fail("bad dimensions");
    if (off >= bytes.size() || !std::isspace(bytes[off])) throw fail("missing raster separator");
    ++off;
    const size_t need = size_t(c) * h * w;
    if (bytes.size() - off < need) throw fail("truncated raster");

    Image img(c, h, w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int ch = 0; ch < c; ++ch) img.at(ch, y, x) = bytes[off++] / 255.0;
    return img;
}

void save_image(const Image& img, const fs::path& path) {
    write_file_atomic(path, encode_pnm(img));
}

Image load_image(const fs::path& path) { return decode_pnm(read_file(path), path.string()); }

// ---------------------------------------------------------------------------

void write_file_atomic(const fs::path& path, const void* data, size_t n) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw Error(ErrKind::io, "cannot open " + tmp.string() + " for writing");
        f.write(static_cast<const char*>(data), std::streamsize(n));
        if (!f) throw Error(ErrKind::io, "short write to " + tmp.string());
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) throw Error(ErrKind::io, "rename " + tmp.string() + " -> " + path.string() + ": " + ec.message());
}

void write_file_atomic(const fs::path& path, const std::string& s) {
    write_file_atomic(path, s.data(), s.size());
}

void write_file_atomic(const fs::path& path, const std::vector<uint8_t>& bytes) {
    write_file_atomic(path, bytes.data(), bytes.size());
}

std::vector<uint8_t> read_file(const fs::path& path) {
    std::ifstream f(path, std::ios::binary | std::ios::ate);
    if (!f) throw Error(ErrKind::io, "cannot open " + path.string());
    const auto size = f.tellg();
    f.seekg(0);
    std::vector<uint8_t> out(static_cast<size_t>(size), 0);
    f.read(reinterpret_cast<char*>(out.data()), size);
    if (!f) throw Error(ErrKind::io, "short read from " + path.string());
    return out;
}

std::string read_text_file(const fs::path& path) {
    auto b = read_file(path);
    return std::string(b.begin(), b.end());
}

void ByteWriter::u16(uint16_t v) {
    buf.push_back(uint8_t(v));
    buf.push_back(uint8_t(v >> 8));
}
void ByteWriter::u32(uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(uint8_t(v >> (8 * i)));
}
void ByteWriter::u64(uint64_t v) {
    for (int i = 0; i < 8; ++i) buf.push_back(uint8_t(v >> (8 * i)));
}
void ByteWriter::f64(double v) {
    uint64_t bits;
    std::memcpy(&bits, &v, 8);
    u64(bits);
}
void ByteWriter::bytes(const void* p, size_t k) {
    const uint8_t* q = static_cast<const uint8_t*>(p);
    buf.insert(buf.end(), q, q + k);
}
void ByteWriter::str8(const std::string& s) {
    if (s.size() > 255) throw Error(ErrKind::internal, "str8: string too long");
    u8(uint8_t(s.size()));
    bytes(s.data(), s.size());
}

static void need(const ByteReader& r, size_t k) {
    if (r.remaining() < k)
        throw Error(ErrKind::io, "truncated data" + (r.origin.empty() ? "" : " in " + r.origin));
}

uint8_t ByteReader::u8() {
    need(*this, 1);
    return p[off++];
}
uint16_t ByteReader::u16() {
    need(*this, 2);
    uint16_t v = uint16_t(p[off]) | uint16_t(p[off + 1]) << 8;
    off += 2;
    return v;
}
uint32_t ByteReader::u32() {
    need(*this, 4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= uint32_t(p[off + i]) << (8 * i);
    off += 4;
    return v;
}
uint64_t ByteReader::u64() {
    need(*this, 8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= uint64_t(p[off + i]) << (8 * i);
    off += 8;
    return v;
}
double ByteReader::f64() {
    uint64_t bits = u64();
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}
void ByteReader::bytes(void* dst, size_t k) {
    need(*this, k);
    std::memcpy(dst, p + off, k);
    off += k;
}
std::string ByteReader::str8() {
    const uint8_t len = u8();
    need(*this, len);
    std::string s(reinterpret_cast<const char*>(p + off), len);
    off += len;
    return s;
}

}  // namespace gf
