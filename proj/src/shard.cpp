#include "saeg/shard.hpp"

#include <cmath>
#include <cstring>
#include <string>

#include "saeg/error.hpp"
#include "saeg/io.hpp"

namespace saeg {

std::uint64_t write_shard(std::uint32_t layer_index, const MatF& rows,
                          const std::filesystem::path& path) {
    if (rows.cols() <= 0) {
        throw DataError("write_shard: d_model must be > 0");
    }
    for (idx r = 0; r < rows.rows(); ++r) {
        const float* p = rows.row(r);
        for (idx c = 0; c < rows.cols(); ++c) {
            if (!std::isfinite(p[c])) {
                throw DataError("write_shard: non-finite activation in row " + std::to_string(r));
            }
        }
    }
    std::string buf;
    buf.reserve(ShardHeader::byte_size + static_cast<std::size_t>(rows.size()) * sizeof(float));
    buf.append(ShardHeader::magic, 4);
    put_u32(buf, ShardHeader::current_version);
    put_u32(buf, layer_index);
    put_u32(buf, static_cast<std::uint32_t>(rows.cols()));
    put_u64(buf, static_cast<std::uint64_t>(rows.rows()));
    put_u32(buf, 0); // dtype_code: f32 little-endian
    put_f32_array(buf, rows.data(), static_cast<std::size_t>(rows.size()));
    atomic_write_file(path, buf);
    return static_cast<std::uint64_t>(rows.rows());
}

std::pair<ShardHeader, MatF> read_shard(const std::filesystem::path& path) {
    const std::string bytes = read_file_bytes(path);
    if (bytes.size() < ShardHeader::byte_size ||
        std::memcmp(bytes.data(), ShardHeader::magic, 4) != 0) {
        throw FormatError("not an activation shard: " + path.string());
    }
    ByteReader rd(std::string_view(bytes).substr(4));
    ShardHeader h;
    h.version = rd.get_u32();
    if (h.version != ShardHeader::current_version) {
        throw FormatError("unsupported shard version " + std::to_string(h.version));
    }
    h.layer_index = rd.get_u32();
    h.d_model = rd.get_u32();
    h.n_rows = rd.get_u64();
    h.dtype_code = rd.get_u32();
    if (h.dtype_code != 0) {
        throw FormatError("unsupported shard dtype_code " + std::to_string(h.dtype_code));
    }
    const std::uint64_t want = h.n_rows * static_cast<std::uint64_t>(h.d_model) * sizeof(float);
    if (rd.remaining() != want) {
        throw CorruptionError("shard payload is " + std::to_string(rd.remaining()) +
                              " bytes, header implies " + std::to_string(want) + ": " +
                              path.string());
    }
    MatF m(static_cast<idx>(h.n_rows), static_cast<idx>(h.d_model));
    rd.get_f32_array(m.data(), static_cast<std::size_t>(m.size()));
    return {h, std::move(m)};
}

} // namespace saeg
