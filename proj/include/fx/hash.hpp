#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>

namespace fx {

inline constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ULL;

inline std::uint64_t fnv1a(std::span<const std::byte> bytes, std::uint64_t h = kFnvOffset) {
    for (auto b : bytes) {
        h ^= static_cast<std::uint64_t>(b);
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::uint64_t fnv1a(std::string_view text, std::uint64_t h = kFnvOffset) {
    return fnv1a(std::as_bytes(std::span(text.data(), text.size())), h);
}

/// splitmix64 finalizer; used to derive independent seeds from a base seed.
inline std::uint64_t mix_seed(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t tag) { return mix_seed(base ^ mix_seed(tag)); }

inline std::uint64_t derive_seed(std::uint64_t base, std::string_view tag) { return derive_seed(base, fnv1a(tag)); }

}  // namespace fx
