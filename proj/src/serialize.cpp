#include "latdial/serialize.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "latdial/errors.hpp"

namespace latdial {

namespace {

constexpr char kMagic[4] = {'L', 'D', 'T', 'A'};

template <typename T>
T to_little(T v) {
    if constexpr (std::endian::native == std::endian::big) {
        auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(v);
        std::reverse(bytes.begin(), bytes.end());
        return std::bit_cast<T>(bytes);
    } else {
        return v;
    }
}

template <typename T>
void put(std::ostream& os, T v) {
    v = to_little(v);
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is, const std::filesystem::path& path) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw ValidationError("truncated archive " + path.string());
    return to_little(v);
}

}  // namespace

const ArchiveEntry* TensorArchive::find(const std::string& name) const {
    for (const auto& e : entries)
        if (e.name == name) return &e;
    return nullptr;
}

void TensorArchive::put(const std::string& name, const Shape& shape, std::vector<real> values) {
    if (shape_numel(shape) != values.size()) throw DimensionError("archive entry " + name + " shape mismatch");
    entries.push_back({name, shape, std::move(values)});
}

void write_archive(const std::filesystem::path& path, const TensorArchive& archive) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
    os.write(kMagic, 4);
    put<std::uint32_t>(os, archive.version);
    put<std::uint32_t>(os, sizeof(real));
    const std::string meta = archive.meta.dump();
    put<std::uint64_t>(os, meta.size());
    os.write(meta.data(), static_cast<std::streamsize>(meta.size()));
    put<std::uint64_t>(os, archive.entries.size());
    for (const auto& e : archive.entries) {
        put<std::uint32_t>(os, static_cast<std::uint32_t>(e.name.size()));
        os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
        put<std::uint32_t>(os, static_cast<std::uint32_t>(e.shape.size()));
        for (auto d : e.shape) put<std::uint64_t>(os, d);
        for (real v : e.values) put<real>(os, v);
    }
    if (!os) throw std::runtime_error("write failed for " + path.string());
}

TensorArchive read_archive(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open archive " + path.string());
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0) throw ValidationError(path.string() + " is not a tensor archive");
    TensorArchive a;
    a.version = get<std::uint32_t>(is, path);
    if (a.version != kArchiveVersion)
        throw ValidationError("unsupported archive version " + std::to_string(a.version) + " in " + path.string());
    a.value_width = get<std::uint32_t>(is, path);
    if (a.value_width != 4 && a.value_width != 8) throw ValidationError("bad value width in " + path.string());
    const auto meta_len = get<std::uint64_t>(is, path);
    std::string meta(meta_len, '\0');
    is.read(meta.data(), static_cast<std::streamsize>(meta_len));
    if (!is) throw ValidationError("truncated archive " + path.string());
    a.meta = nlohmann::json::parse(meta);
    const auto count = get<std::uint64_t>(is, path);
    for (std::uint64_t i = 0; i < count; ++i) {
        ArchiveEntry e;
        const auto name_len = get<std::uint32_t>(is, path);
        e.name.resize(name_len);
        is.read(e.name.data(), name_len);
        const auto rank = get<std::uint32_t>(is, path);
        for (std::uint32_t r = 0; r < rank; ++r) e.shape.push_back(get<std::uint64_t>(is, path));
        const std::size_t n = shape_numel(e.shape);
        e.values.resize(n);
        for (std::size_t j = 0; j < n; ++j) {
            e.values[j] = a.value_width == 4 ? static_cast<real>(get<float>(is, path))
                                             : static_cast<real>(get<double>(is, path));
        }
        a.entries.push_back(std::move(e));
    }
    return a;
}

std::string fnv1a_hex(std::string_view bytes) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 1099511628211ull;
    }
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << h;
    return os.str();
}

std::string file_hash(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path.string());
    std::ostringstream ss;
    ss << is.rdbuf();
    return fnv1a_hex(ss.str());
}

}  // namespace latdial
