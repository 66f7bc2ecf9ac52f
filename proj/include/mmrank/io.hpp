#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace mmrank::io {

// CRC-32 (IEEE 802.3 polynomial, reflected). Used as the integrity trailer in
// every binary file this project writes.
uint32_t crc32(const void* data, size_t len, uint32_t seed = 0);

// FNV-1a over raw bytes; cheap content fingerprint for parameter snapshots.
uint64_t fnv1a64(const void* data, size_t len, uint64_t seed = 0xcbf29ce484222325ULL);

std::string base64_encode(std::span<const uint8_t> bytes);
std::vector<uint8_t> base64_decode(const std::string& text);

// Little-endian primitive writers/readers over iostreams. The host is assumed
// little-endian; asserted once at startup of any binary write.
void write_u32(std::ostream& os, uint32_t v);
void write_u64(std::ostream& os, uint64_t v);
void write_f64(std::ostream& os, double v);
void write_bytes(std::ostream& os, const void* data, size_t len);
void write_string(std::ostream& os, const std::string& s);     // u32 length prefix
void write_f64_array(std::ostream& os, std::span<const double> v);

uint32_t read_u32(std::istream& is);
uint64_t read_u64(std::istream& is);
double read_f64(std::istream& is);
void read_bytes(std::istream& is, void* data, size_t len);
std::string read_string(std::istream& is);
std::vector<double> read_f64_array(std::istream& is, size_t count);

// Stream wrappers that keep a running CRC of everything written/read, so the
// trailer check covers the full file body.
class CrcWriter {
public:
    explicit CrcWriter(std::ostream& os) : os_(os) {}
    void bytes(const void* data, size_t len);
    void u32(uint32_t v);
    void u64(uint64_t v);
    void f64(double v);
    void str(const std::string& s);
    void f64_array(std::span<const double> v);
    uint32_t crc() const { return crc_; }

private:
    std::ostream& os_;
    uint32_t crc_ = 0;
};

class CrcReader {
public:
    explicit CrcReader(std::istream& is) : is_(is) {}
    void bytes(void* data, size_t len);
    uint32_t u32();
    uint64_t u64();
    double f64();
    std::string str(size_t max_len = 1u << 20);
    std::vector<double> f64_array(size_t count);
    uint32_t crc() const { return crc_; }

private:
    std::istream& is_;
    uint32_t crc_ = 0;
};

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& content);

}  // namespace mmrank::io
