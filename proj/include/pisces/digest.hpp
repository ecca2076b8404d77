#pragma once

#include <openssl/evp.h>

#include <array>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <string_view>

#include "pisces/error.hpp"

namespace pisces {

/// Incremental SHA-256 over OpenSSL's EVP interface.
class sha256 {
public:
    sha256() : ctx_(EVP_MD_CTX_new(), &EVP_MD_CTX_free) {
        if (!ctx_ || EVP_DigestInit_ex(ctx_.get(), EVP_sha256(), nullptr) != 1) {
            throw error(error_kind::io, "sha256: digest initialisation failed");
        }
    }

    sha256& update(std::span<const std::uint8_t> bytes) {
        EVP_DigestUpdate(ctx_.get(), bytes.data(), bytes.size());
        return *this;
    }

    sha256& update(std::string_view text) {
        EVP_DigestUpdate(ctx_.get(), text.data(), text.size());
        return *this;
    }

    std::string hex() {
        std::array<unsigned char, EVP_MAX_MD_SIZE> out{};
        unsigned int len = 0;
        EVP_DigestFinal_ex(ctx_.get(), out.data(), &len);
        static constexpr char digits[] = "0123456789abcdef";
        std::string s;
        s.reserve(len * 2);
        for (unsigned int i = 0; i < len; ++i) {
            s.push_back(digits[out[i] >> 4]);
            s.push_back(digits[out[i] & 0xF]);
        }
        return s;
    }

private:
    std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx_;
};

inline std::string sha256_hex(std::string_view text) { return sha256{}.update(text).hex(); }

inline std::string sha256_hex(std::span<const std::uint8_t> bytes) { return sha256{}.update(bytes).hex(); }

} // namespace pisces
