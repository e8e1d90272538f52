#pragma once

// Flat tensor container: path -> (shape, raw little-endian values), plus a
// version tag and a free-form JSON metadata block.
//
// Layout:
//   magic "LDTA" | u32 version | u32 value width (4 or 8)
//   u64 meta length | meta JSON bytes
//   u64 entry count
//   per entry: u32 name length | name | u32 rank | u64 dims[rank] | values

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "latdial/tensor.hpp"

namespace latdial {

inline constexpr std::uint32_t kArchiveVersion = 1;

struct ArchiveEntry {
    std::string name;
    Shape shape;
    std::vector<real> values;
};

struct TensorArchive {
    std::uint32_t version = kArchiveVersion;
    std::uint32_t value_width = sizeof(real);  // as stored on disk
    nlohmann::json meta = nlohmann::json::object();
    std::vector<ArchiveEntry> entries;

    const ArchiveEntry* find(const std::string& name) const;
    void put(const std::string& name, const Shape& shape, std::vector<real> values);
};

void write_archive(const std::filesystem::path& path, const TensorArchive& archive);
// Values stored at a different width are converted to `real`.
TensorArchive read_archive(const std::filesystem::path& path);

// 64-bit FNV-1a, hex encoded. Used for file and vocabulary fingerprints.
std::string fnv1a_hex(std::string_view bytes);
std::string file_hash(const std::filesystem::path& path);

}  // namespace latdial
