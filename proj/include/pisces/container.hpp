#pragma once

// Named-tensor container shared by model weights and SAEs.
//
// Layout: u64 little-endian header length N, N bytes of UTF-8 JSON, then a raw
// little-endian f32 payload. Tensor offsets are bytes from the payload start
// and are 64-byte aligned. The header carries a SHA-256 of the payload.

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "pisces/digest.hpp"
#include "pisces/error.hpp"
#include "pisces/tensor.hpp"

namespace pisces {

static_assert(std::endian::native == std::endian::little, "container I/O assumes a little-endian host");

inline constexpr std::size_t container_alignment = 64;

struct tensor_container {
    nlohmann::json config = nlohmann::json::object();
    nlohmann::json metadata = nlohmann::json::object();
    std::map<std::string, matrix> tensors;
};

namespace detail {

inline std::size_t align_up(std::size_t n, std::size_t a) { return (n + a - 1) / a * a; }

inline std::vector<std::uint8_t> build_payload(const tensor_container& c, nlohmann::json& index) {
    std::size_t cursor = 0;
    index = nlohmann::json::object();
    for (const auto& [name, t] : c.tensors) {
        cursor = align_up(cursor, container_alignment);
        index[name] = {{"dtype", "f32"}, {"shape", {t.rows(), t.cols()}}, {"offset", cursor}};
        cursor += t.size() * sizeof(float);
    }
    std::vector<std::uint8_t> payload(cursor, 0);
    for (const auto& [name, t] : c.tensors) {
        const std::size_t off = index[name]["offset"].get<std::size_t>();
        if (!t.data().empty()) std::memcpy(payload.data() + off, t.data().data(), t.size() * sizeof(float));
    }
    return payload;
}

} // namespace detail

/// Serialises to the exact on-disk byte sequence. Deterministic: tensors are
/// laid out in name order and JSON keys are sorted.
inline std::vector<std::uint8_t> serialize_container(const tensor_container& c) {
    nlohmann::json index;
    const auto payload = detail::build_payload(c, index);
    nlohmann::json header = {
        {"config", c.config},
        {"metadata", c.metadata},
        {"tensors", index},
        {"payload_sha256", sha256_hex(std::span<const std::uint8_t>(payload))},
    };
    std::string text = header.dump();
    // pad so the payload itself starts on an aligned boundary
    const std::size_t padded = detail::align_up(8 + text.size(), container_alignment) - 8;
    text.append(padded - text.size(), ' ');

    std::vector<std::uint8_t> out(8 + text.size() + payload.size());
    const std::uint64_t n = text.size();
    std::memcpy(out.data(), &n, 8);
    std::memcpy(out.data() + 8, text.data(), text.size());
    if (!payload.empty()) std::memcpy(out.data() + 8 + text.size(), payload.data(), payload.size());
    return out;
}

inline tensor_container parse_container(std::span<const std::uint8_t> bytes, const std::string& origin = "<memory>") {
    if (bytes.size() < 8) throw validation_error(origin + ": malformed header (file shorter than length prefix)");
    std::uint64_t n = 0;
    std::memcpy(&n, bytes.data(), 8);
    if (n > bytes.size() - 8) throw validation_error(origin + ": malformed header (declared length exceeds file)");

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(n));
    } catch (const nlohmann::json::exception& e) {
        throw validation_error(origin + ": malformed header (" + e.what() + ")");
    }
    if (!header.is_object() || !header.contains("config") || !header.contains("tensors") ||
        !header["tensors"].is_object()) {
        throw validation_error(origin + ": malformed header (missing config or tensors)");
    }

    const auto payload = bytes.subspan(8 + n);
    tensor_container c;
    c.config = header["config"];
    c.metadata = header.value("metadata", nlohmann::json::object());

    for (const auto& [name, entry] : header["tensors"].items()) {
        std::size_t rows = 0, cols = 0, offset = 0;
        try {
            if (entry.at("dtype").get<std::string>() != "f32") {
                throw validation_error(origin + ": tensor " + name + " has unsupported dtype");
            }
            const auto& shape = entry.at("shape");
            if (!shape.is_array() || shape.size() != 2) throw validation_error(origin + ": tensor " + name + " is not 2-D");
            rows = shape[0].get<std::size_t>();
            cols = shape[1].get<std::size_t>();
            offset = entry.at("offset").get<std::size_t>();
        } catch (const nlohmann::json::exception& e) {
            throw validation_error(origin + ": malformed header entry for " + name + " (" + e.what() + ")");
        }
        if (offset % container_alignment != 0) {
            throw validation_error(origin + ": tensor " + name + " offset is not 64-byte aligned");
        }
        const std::size_t count = rows * cols;
        if (offset > payload.size() || count * sizeof(float) > payload.size() - offset) {
            throw validation_error(origin + ": shape mismatch for tensor " + name + ": shape (" + std::to_string(rows) +
                                   "," + std::to_string(cols) + ") needs " + std::to_string(count) +
                                   " floats but the payload holds " +
                                   std::to_string((payload.size() - std::min(offset, payload.size())) / sizeof(float)));
        }
        matrix t(rows, cols);
        if (count) std::memcpy(t.data().data(), payload.data() + offset, count * sizeof(float));
        if (!all_finite(t.data())) throw validation_error(origin + ": NaN or Inf payload in tensor " + name);
        c.tensors.emplace(name, std::move(t));
    }

    // every payload byte must belong to exactly the layout save would produce
    nlohmann::json expected_index;
    const auto rebuilt = detail::build_payload(c, expected_index);
    if (rebuilt.size() != payload.size()) {
        throw validation_error(origin + ": shape mismatch: payload is " + std::to_string(payload.size()) +
                               " bytes, tensor table describes " + std::to_string(rebuilt.size()));
    }
    if (header.contains("payload_sha256") &&
        header["payload_sha256"].get<std::string>() != sha256_hex(payload)) {
        throw validation_error(origin + ": payload checksum mismatch");
    }
    return c;
}

inline void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    auto tmp = path;
    tmp += ".tmp";
    if (path.has_parent_path()) {
        std::error_code ec;
        std::filesystem::create_directories(path.parent_path(), ec);
        if (ec) throw io_error("cannot create " + path.parent_path().string() + ": " + ec.message());
    }
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw io_error("cannot open " + tmp.string() + " for writing");
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw io_error("write failed for " + tmp.string());
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::filesystem::remove(tmp, ec);
        throw io_error("cannot move " + tmp.string() + " into place: " + ec.message());
    }
}

inline void write_text_atomic(const std::filesystem::path& path, std::string_view text) {
    write_file_atomic(path, {reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("cannot open " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return bytes;
}

inline std::string read_file_text(const std::filesystem::path& path) {
    const auto bytes = read_file_bytes(path);
    return {bytes.begin(), bytes.end()};
}

inline void save_container(const tensor_container& c, const std::filesystem::path& path) {
    write_file_atomic(path, serialize_container(c));
}

inline tensor_container load_container(const std::filesystem::path& path) {
    const auto bytes = read_file_bytes(path);
    return parse_container(bytes, path.string());
}

} // namespace pisces
