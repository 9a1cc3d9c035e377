#pragma once

#include <cstdint>
#include <filesystem>
#include <utility>

#include "saeg/matrix.hpp"

namespace saeg {

/// On-disk block of residual-stream rows for one layer.
/// Layout (all little-endian): magic "SAEA", version u32, layer_index u32,
/// d_model u32, n_rows u64, dtype_code u32, then n_rows*d_model f32 values
/// row-major. dtype_code 0 is the only defined payload type (f32 LE).
struct ShardHeader {
    static constexpr char magic[4] = {'S', 'A', 'E', 'A'};
    static constexpr std::uint32_t current_version = 1;
    static constexpr std::size_t byte_size = 28;

    std::uint32_t version = current_version;
    std::uint32_t layer_index = 0;
    std::uint32_t d_model = 0;
    std::uint64_t n_rows = 0;
    std::uint32_t dtype_code = 0;
};

/// Writes header + payload; rejects non-finite rows (DataError names the row).
/// Returns the number of rows written.
std::uint64_t write_shard(std::uint32_t layer_index, const MatF& rows,
                          const std::filesystem::path& path);

/// Validates magic, version, dtype and exact payload length before returning.
std::pair<ShardHeader, MatF> read_shard(const std::filesystem::path& path);

} // namespace saeg
