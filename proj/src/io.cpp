#include "saeg/io.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>

#include "saeg/error.hpp"

namespace saeg {

void put_u32(std::string& buf, std::uint32_t v) {
    buf.push_back(static_cast<char>(v & 0xff));
    buf.push_back(static_cast<char>((v >> 8) & 0xff));
    buf.push_back(static_cast<char>((v >> 16) & 0xff));
    buf.push_back(static_cast<char>((v >> 24) & 0xff));
}

void put_u64(std::string& buf, std::uint64_t v) {
    put_u32(buf, static_cast<std::uint32_t>(v & 0xffffffffULL));
    put_u32(buf, static_cast<std::uint32_t>(v >> 32));
}

void put_f32(std::string& buf, float v) {
    put_u32(buf, std::bit_cast<std::uint32_t>(v));
}

void put_f32_array(std::string& buf, const float* data, std::size_t n) {
    if constexpr (std::endian::native == std::endian::little) {
        buf.append(reinterpret_cast<const char*>(data), n * sizeof(float));
    } else {
        for (std::size_t i = 0; i < n; ++i) {
            put_f32(buf, data[i]);
        }
    }
}

void ByteReader::need(std::size_t n) const {
    if (pos_ + n > data_.size()) {
        throw CorruptionError("unexpected end of data at byte " + std::to_string(pos_));
    }
}

std::uint32_t ByteReader::get_u32() {
    need(4);
    const auto* p = reinterpret_cast<const unsigned char*>(data_.data() + pos_);
    pos_ += 4;
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

std::uint64_t ByteReader::get_u64() {
    const std::uint64_t lo = get_u32();
    const std::uint64_t hi = get_u32();
    return lo | (hi << 32);
}

float ByteReader::get_f32() {
    return std::bit_cast<float>(get_u32());
}

void ByteReader::get_f32_array(float* out, std::size_t n) {
    need(n * sizeof(float));
    if constexpr (std::endian::native == std::endian::little) {
        std::memcpy(out, data_.data() + pos_, n * sizeof(float));
        pos_ += n * sizeof(float);
    } else {
        for (std::size_t i = 0; i < n; ++i) {
            out[i] = get_f32();
        }
    }
}

std::string ByteReader::get_bytes(std::size_t n) {
    need(n);
    std::string s(data_.substr(pos_, n));
    pos_ += n;
    return s;
}

std::string read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in.is_open()) {
        throw StorageError("cannot open file: " + path.string());
    }
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) {
        throw StorageError("read failed: " + path.string());
    }
    return bytes;
}

void atomic_write_file(const std::filesystem::path& path, std::string_view bytes) {
    const std::filesystem::path tmp = path.string() + ".tmp";
    if (path.has_parent_path()) {
        std::error_code ec;
        std::filesystem::create_directories(path.parent_path(), ec);
    }
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out.is_open()) {
            throw StorageError("cannot create file: " + tmp.string());
        }
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        out.flush();
        if (!out.good()) {
            throw StorageError("write failed: " + tmp.string());
        }
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        throw StorageError("rename failed: " + tmp.string() + " -> " + path.string() + " (" +
                           ec.message() + ")");
    }
}

std::string format_g17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::uint64_t fnv1a64(std::string_view bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string hex_u64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

CsvWriter::CsvWriter(std::vector<std::string> header) : width_(header.size()) {
    add_row(std::move(header));
}

void CsvWriter::add_row(std::vector<std::string> cells) {
    if (cells.size() != width_) {
        throw ShapeError("csv row width " + std::to_string(cells.size()) + " != " +
                         std::to_string(width_));
    }
    for (std::size_t i = 0; i < cells.size(); ++i) {
        if (i > 0) {
            out_ += ',';
        }
        out_ += cells[i];
    }
    out_ += '\n';
}

void CsvWriter::write(const std::filesystem::path& path) const {
    atomic_write_file(path, out_);
}

std::vector<std::vector<std::string>> parse_csv(std::string_view text) {
    std::vector<std::vector<std::string>> rows;
    std::size_t start = 0;
    while (start < text.size()) {
        std::size_t end = text.find('\n', start);
        if (end == std::string_view::npos) {
            end = text.size();
        }
        std::string_view line = text.substr(start, end - start);
        if (!line.empty()) {
            std::vector<std::string> cells;
            std::size_t cs = 0;
            while (true) {
                std::size_t ce = line.find(',', cs);
                if (ce == std::string_view::npos) {
                    cells.emplace_back(line.substr(cs));
                    break;
                }
                cells.emplace_back(line.substr(cs, ce - cs));
                cs = ce + 1;
            }
            rows.push_back(std::move(cells));
        }
        start = end + 1;
    }
    return rows;
}

} // namespace saeg
