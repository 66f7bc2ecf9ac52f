#include "mmrank/io.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

#include "mmrank/errors.hpp"

static_assert(std::endian::native == std::endian::little,
              "binary formats are little-endian; big-endian hosts are unsupported");

namespace mmrank::io {

namespace {

std::array<uint32_t, 256> make_crc_table() {
    std::array<uint32_t, 256> table{};
    for (uint32_t i = 0; i < 256; ++i) {
        uint32_t c = i;
        for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xedb88320u ^ (c >> 1) : c >> 1;
        table[i] = c;
    }
    return table;
}

const std::array<uint32_t, 256>& crc_table() {
    static const auto table = make_crc_table();
    return table;
}

constexpr char kB64Alphabet[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

}  // namespace

uint32_t crc32(const void* data, size_t len, uint32_t seed) {
    const auto* p = static_cast<const uint8_t*>(data);
    uint32_t c = seed ^ 0xffffffffu;
    for (size_t i = 0; i < len; ++i) c = crc_table()[(c ^ p[i]) & 0xff] ^ (c >> 8);
    return c ^ 0xffffffffu;
}

uint64_t fnv1a64(const void* data, size_t len, uint64_t seed) {
    const auto* p = static_cast<const uint8_t*>(data);
    uint64_t h = seed;
    for (size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string base64_encode(std::span<const uint8_t> bytes) {
    std::string out;
    out.reserve((bytes.size() + 2) / 3 * 4);
    size_t i = 0;
    for (; i + 3 <= bytes.size(); i += 3) {
        uint32_t v = (uint32_t(bytes[i]) << 16) | (uint32_t(bytes[i + 1]) << 8) | bytes[i + 2];
        out.push_back(kB64Alphabet[(v >> 18) & 63]);
        out.push_back(kB64Alphabet[(v >> 12) & 63]);
        out.push_back(kB64Alphabet[(v >> 6) & 63]);
        out.push_back(kB64Alphabet[v & 63]);
    }
    size_t rem = bytes.size() - i;
    if (rem == 1) {
        uint32_t v = uint32_t(bytes[i]) << 16;
        out.push_back(kB64Alphabet[(v >> 18) & 63]);
        out.push_back(kB64Alphabet[(v >> 12) & 63]);
        out += "==";
    } else if (rem == 2) {
        uint32_t v = (uint32_t(bytes[i]) << 16) | (uint32_t(bytes[i + 1]) << 8);
        out.push_back(kB64Alphabet[(v >> 18) & 63]);
        out.push_back(kB64Alphabet[(v >> 12) & 63]);
        out.push_back(kB64Alphabet[(v >> 6) & 63]);
        out.push_back('=');
    }
    return out;
}

std::vector<uint8_t> base64_decode(const std::string& text) {
    auto value_of = [](char c) -> int {
        if (c >= 'A' && c <= 'Z') return c - 'A';
        if (c >= 'a' && c <= 'z') return c - 'a' + 26;
        if (c >= '0' && c <= '9') return c - '0' + 52;
        if (c == '+') return 62;
        if (c == '/') return 63;
        return -1;
    };
    std::vector<uint8_t> out;
    int buffer = 0, bits = 0;
    for (char c : text) {
        if (c == '=') break;
        int v = value_of(c);
        if (v < 0) throw IoError("invalid base64 character");
        buffer = (buffer << 6) | v;
        bits += 6;
        if (bits >= 8) {
            bits -= 8;
            out.push_back(static_cast<uint8_t>((buffer >> bits) & 0xff));
        }
    }
    return out;
}

void write_bytes(std::ostream& os, const void* data, size_t len) {
    os.write(static_cast<const char*>(data), static_cast<std::streamsize>(len));
    if (!os) throw IoError("write failed");
}

void write_u32(std::ostream& os, uint32_t v) { write_bytes(os, &v, sizeof v); }
void write_u64(std::ostream& os, uint64_t v) { write_bytes(os, &v, sizeof v); }
void write_f64(std::ostream& os, double v) { write_bytes(os, &v, sizeof v); }

void write_string(std::ostream& os, const std::string& s) {
    write_u32(os, static_cast<uint32_t>(s.size()));
    write_bytes(os, s.data(), s.size());
}

void write_f64_array(std::ostream& os, std::span<const double> v) {
    write_bytes(os, v.data(), v.size() * sizeof(double));
}

void read_bytes(std::istream& is, void* data, size_t len) {
    is.read(static_cast<char*>(data), static_cast<std::streamsize>(len));
    if (static_cast<size_t>(is.gcount()) != len) throw IoError("unexpected end of stream");
}

uint32_t read_u32(std::istream& is) {
    uint32_t v;
    read_bytes(is, &v, sizeof v);
    return v;
}

uint64_t read_u64(std::istream& is) {
    uint64_t v;
    read_bytes(is, &v, sizeof v);
    return v;
}

double read_f64(std::istream& is) {
    double v;
    read_bytes(is, &v, sizeof v);
    return v;
}

std::string read_string(std::istream& is) {
    uint32_t len = read_u32(is);
    std::string s(len, '\0');
    if (len) read_bytes(is, s.data(), len);
    return s;
}

std::vector<double> read_f64_array(std::istream& is, size_t count) {
    std::vector<double> v(count);
    if (count) read_bytes(is, v.data(), count * sizeof(double));
    return v;
}

void CrcWriter::bytes(const void* data, size_t len) {
    write_bytes(os_, data, len);
    crc_ = crc32(data, len, crc_);
}

void CrcWriter::u32(uint32_t v) { bytes(&v, sizeof v); }
void CrcWriter::u64(uint64_t v) { bytes(&v, sizeof v); }
void CrcWriter::f64(double v) { bytes(&v, sizeof v); }

void CrcWriter::str(const std::string& s) {
    u32(static_cast<uint32_t>(s.size()));
    bytes(s.data(), s.size());
}

void CrcWriter::f64_array(std::span<const double> v) { bytes(v.data(), v.size() * sizeof(double)); }

void CrcReader::bytes(void* data, size_t len) {
    read_bytes(is_, data, len);
    crc_ = crc32(data, len, crc_);
}

uint32_t CrcReader::u32() {
    uint32_t v;
    bytes(&v, sizeof v);
    return v;
}

uint64_t CrcReader::u64() {
    uint64_t v;
    bytes(&v, sizeof v);
    return v;
}

double CrcReader::f64() {
    double v;
    bytes(&v, sizeof v);
    return v;
}

std::string CrcReader::str(size_t max_len) {
    uint32_t len = u32();
    if (len > max_len) throw IoError("string length " + std::to_string(len) + " exceeds limit");
    std::string s(len, '\0');
    if (len) bytes(s.data(), len);
    return s;
}

std::vector<double> CrcReader::f64_array(size_t count) {
    std::vector<double> v(count);
    if (count) bytes(v.data(), count * sizeof(double));
    return v;
}

std::string read_text_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path);
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open " + path + " for writing");
    os << content;
    if (!os) throw IoError("write failed: " + path);
}

}  // namespace mmrank::io
