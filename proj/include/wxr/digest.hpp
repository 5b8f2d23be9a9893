#pragma once

#include <torch/torch.h>

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>

namespace wxr {

// 64-bit FNV-1a. Stable across platforms; used for content keys and checksums, not security.
inline uint64_t fnv1a64(std::span<const std::byte> bytes, uint64_t hash = 0xcbf29ce484222325ULL)
{
    for (auto b : bytes) {
        hash ^= static_cast<uint64_t>(b);
        hash *= 0x100000001b3ULL;
    }
    return hash;
}

inline uint64_t fnv1a64(std::string_view text, uint64_t hash = 0xcbf29ce484222325ULL)
{
    return fnv1a64(std::as_bytes(std::span(text.data(), text.size())), hash);
}

// Digest of dtype, shape and raw contents.
inline uint64_t tensor_digest(const torch::Tensor& t, uint64_t hash = 0xcbf29ce484222325ULL)
{
    auto c = t.detach().cpu().contiguous();
    hash = fnv1a64(std::string_view(c.dtype().name()), hash);
    for (auto s : c.sizes())
        hash = fnv1a64(std::as_bytes(std::span(&s, 1)), hash);
    return fnv1a64(std::span(static_cast<const std::byte*>(c.data_ptr()), c.nbytes()), hash);
}

inline std::string hex64(uint64_t v)
{
    static constexpr char digits[] = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i, v >>= 4)
        s[static_cast<size_t>(i)] = digits[v & 0xf];
    return s;
}

} // namespace wxr
