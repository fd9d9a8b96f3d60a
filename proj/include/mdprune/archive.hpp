#pragma once

// Portable tensor archive ("MDPT1").
//
// Layout, all integers little-endian:
//   bytes [0,5)   magic "MDPT1"
//   bytes [5,13)  u64 manifest length L
//   bytes [13,13+L) manifest, UTF-8 JSON:
//       {"format":"MDPT1",
//        "entries":[{"name":..,"dtype":"f32"|"f64","shape":[..],
//                    "offset":..,"nbytes":..,"sha256":".."}, ...],
//        "metadata":{...}}
//   payload       entries back to back; offsets are relative to payload start
//
// Entry payloads are IEEE-754 little-endian. Checksums are SHA-256 of the raw
// payload bytes, lowercase hex.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <openssl/evp.h>

#include <nlohmann/json.hpp>

#include "mdprune/tensor.hpp"

namespace mdprune {

static_assert(std::endian::native == std::endian::little, "archive I/O assumes a little-endian host");

class ArchiveError : public std::runtime_error {
 public:
    using std::runtime_error::runtime_error;
};

inline std::string sha256_hex(std::span<const std::uint8_t> bytes) {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1)
        throw ArchiveError("sha256 digest failed");
    std::ostringstream os;
    for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(md[i]);
    return os.str();
}

inline std::string sha256_hex(std::string_view s) {
    return sha256_hex(std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
}

inline std::string file_sha256(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ArchiveError("cannot open " + path.string());
    std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return sha256_hex(buf);
}

enum class DType { F32, F64 };

inline const char* dtype_tag(DType d) { return d == DType::F32 ? "f32" : "f64"; }

inline DType parse_dtype(std::string_view s) {
    if (s == "f32") return DType::F32;
    if (s == "f64") return DType::F64;
    throw ArchiveError("unknown dtype tag '" + std::string(s) + "'");
}

inline std::size_t dtype_size(DType d) { return d == DType::F32 ? 4 : 8; }

/// One named tensor with its stored dtype and raw payload. The payload is kept
/// verbatim so archives round-trip bit-exactly whatever their dtype.
struct ArchiveEntry {
    std::string name;
    DType dtype = DType::F64;
    Shape shape;
    std::vector<std::uint8_t> bytes;

    static ArchiveEntry from_tensor(std::string name, const Tensor& t, DType dtype = DType::F64) {
        ArchiveEntry e{std::move(name), dtype, t.shape(), {}};
        e.bytes.resize(t.size() * dtype_size(dtype));
        if (dtype == DType::F64) {
            std::memcpy(e.bytes.data(), t.data().data(), e.bytes.size());
        } else {
            for (std::size_t i = 0; i < t.size(); ++i) {
                const auto f = static_cast<float>(t[i]);
                std::memcpy(e.bytes.data() + 4 * i, &f, 4);
            }
        }
        return e;
    }

    Tensor to_tensor() const {
        const std::size_t n = shape_numel(shape);
        if (n * dtype_size(dtype) != bytes.size())
            throw ArchiveError("entry '" + name + "': payload size does not match shape " + shape_str(shape));
        std::vector<double> data(n);
        if (dtype == DType::F64) {
            std::memcpy(data.data(), bytes.data(), bytes.size());
        } else {
            for (std::size_t i = 0; i < n; ++i) {
                float f;
                std::memcpy(&f, bytes.data() + 4 * i, 4);
                data[i] = f;
            }
        }
        try {
            return Tensor::from_external(shape, std::move(data));
        } catch (const std::invalid_argument& e) {
            throw ArchiveError("entry '" + name + "': " + e.what());
        }
    }
};

class TensorArchive {
 public:
    static constexpr std::string_view kMagic = "MDPT1";

    void add(ArchiveEntry entry) {
        if (has(entry.name)) throw ArchiveError("duplicate archive entry '" + entry.name + "'");
        entries_.push_back(std::move(entry));
    }
    void add(const std::string& name, const Tensor& t, DType dtype = DType::F64) {
        add(ArchiveEntry::from_tensor(name, t, dtype));
    }

    bool has(std::string_view name) const { return find(name) != nullptr; }

    const ArchiveEntry& entry(std::string_view name) const {
        if (auto* e = find(name)) return *e;
        throw ArchiveError("archive has no entry '" + std::string(name) + "'");
    }
    Tensor get(std::string_view name) const { return entry(name).to_tensor(); }

    const std::vector<ArchiveEntry>& entries() const noexcept { return entries_; }
    nlohmann::json& metadata() noexcept { return metadata_; }
    const nlohmann::json& metadata() const noexcept { return metadata_; }

    std::vector<std::uint8_t> serialize() const {
        nlohmann::json manifest;
        manifest["format"] = std::string(kMagic);
        manifest["entries"] = nlohmann::json::array();
        std::uint64_t offset = 0;
        for (const auto& e : entries_) {
            manifest["entries"].push_back({{"name", e.name},
                                           {"dtype", dtype_tag(e.dtype)},
                                           {"shape", e.shape},
                                           {"offset", offset},
                                           {"nbytes", e.bytes.size()},
                                           {"sha256", sha256_hex(e.bytes)}});
            offset += e.bytes.size();
        }
        manifest["metadata"] = metadata_.is_null() ? nlohmann::json::object() : metadata_;
        const std::string text = manifest.dump();

        std::vector<std::uint8_t> out;
        out.reserve(13 + text.size() + offset);
        out.insert(out.end(), kMagic.begin(), kMagic.end());
        const std::uint64_t len = text.size();
        for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(len >> (8 * i)));
        out.insert(out.end(), text.begin(), text.end());
        for (const auto& e : entries_) out.insert(out.end(), e.bytes.begin(), e.bytes.end());
        return out;
    }

    static TensorArchive parse(std::span<const std::uint8_t> buf) {
        if (buf.size() < 13 || std::memcmp(buf.data(), kMagic.data(), kMagic.size()) != 0)
            throw ArchiveError("not an MDPT1 archive (bad magic)");
        std::uint64_t len = 0;
        for (int i = 0; i < 8; ++i) len |= std::uint64_t{buf[5 + i]} << (8 * i);
        if (len > buf.size() - 13) throw ArchiveError("truncated archive manifest");
        nlohmann::json manifest;
        try {
            manifest = nlohmann::json::parse(buf.begin() + 13, buf.begin() + 13 + static_cast<std::ptrdiff_t>(len));
        } catch (const nlohmann::json::exception& e) {
            throw ArchiveError(std::string("malformed archive manifest: ") + e.what());
        }
        const auto payload = buf.subspan(13 + len);

        TensorArchive ar;
        try {
            for (const auto& m : manifest.at("entries")) {
                ArchiveEntry e;
                e.name = m.at("name").get<std::string>();
                e.dtype = parse_dtype(m.at("dtype").get<std::string>());
                e.shape = m.at("shape").get<Shape>();
                const auto off = m.at("offset").get<std::uint64_t>();
                const auto nbytes = m.at("nbytes").get<std::uint64_t>();
                if (off > payload.size() || nbytes > payload.size() - off)
                    throw ArchiveError("entry '" + e.name + "' extends past end of archive");
                if (shape_numel(e.shape) * dtype_size(e.dtype) != nbytes)
                    throw ArchiveError("entry '" + e.name + "': nbytes does not match shape and dtype");
                e.bytes.assign(payload.begin() + off, payload.begin() + off + nbytes);
                if (sha256_hex(e.bytes) != m.at("sha256").get<std::string>())
                    throw ArchiveError("entry '" + e.name + "': checksum mismatch");
                ar.add(std::move(e));
            }
            if (manifest.contains("metadata")) ar.metadata_ = manifest["metadata"];
        } catch (const nlohmann::json::exception& e) {
            throw ArchiveError(std::string("malformed archive manifest: ") + e.what());
        }
        return ar;
    }

    void write(const std::filesystem::path& path) const {
        const auto bytes = serialize();
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) throw ArchiveError("cannot open " + path.string() + " for writing");
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw ArchiveError("write failed for " + path.string());
    }

    static TensorArchive read(const std::filesystem::path& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw ArchiveError("cannot open " + path.string());
        std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        return parse(buf);
    }

 private:
    const ArchiveEntry* find(std::string_view name) const {
        for (const auto& e : entries_)
            if (e.name == name) return &e;
        return nullptr;
    }

    std::vector<ArchiveEntry> entries_;
    nlohmann::json metadata_ = nlohmann::json::object();
};

}  // namespace mdprune
