#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace saeg {

// Little-endian byte packing, independent of host endianness.
void put_u32(std::string& buf, std::uint32_t v);
void put_u64(std::string& buf, std::uint64_t v);
void put_f32(std::string& buf, float v);
void put_f32_array(std::string& buf, const float* data, std::size_t n);

/// Bounds-checked little-endian reader; throws CorruptionError on overrun.
class ByteReader {
  public:
    explicit ByteReader(std::string_view data) : data_(data) {}

    std::uint32_t get_u32();
    std::uint64_t get_u64();
    float get_f32();
    void get_f32_array(float* out, std::size_t n);
    std::string get_bytes(std::size_t n);

    std::size_t remaining() const { return data_.size() - pos_; }
    std::size_t position() const { return pos_; }

  private:
    void need(std::size_t n) const;

    std::string_view data_;
    std::size_t pos_ = 0;
};

std::string read_file_bytes(const std::filesystem::path& path);

/// Writes to `path.tmp` then renames, so readers never observe partial files.
void atomic_write_file(const std::filesystem::path& path, std::string_view bytes);

/// Decimal with 17 significant digits (lossless round trip for doubles).
std::string format_g17(double v);

std::uint64_t fnv1a64(std::string_view bytes);
std::string hex_u64(std::uint64_t v);

/// Minimal CSV emitter: header row plus string cells, comma-separated.
class CsvWriter {
  public:
    explicit CsvWriter(std::vector<std::string> header);

    void add_row(std::vector<std::string> cells);
    const std::string& str() const { return out_; }
    void write(const std::filesystem::path& path) const;

  private:
    std::size_t width_;
    std::string out_;
};

/// Splits a CSV produced by CsvWriter (no quoting/escaping in this project).
std::vector<std::vector<std::string>> parse_csv(std::string_view text);

} // namespace saeg
