#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace ndlab {

using Rng = std::mt19937_64;

std::uint64_t splitmix64(std::uint64_t x);
std::uint64_t fnv1a64(std::string_view text);

/// Expands a root seed into an independent named sub-stream seed
/// ("data", "init", "randk", "corruption", "bootstrap", ...).
std::uint64_t derive_seed(std::uint64_t root, std::string_view stream);
std::uint64_t derive_seed(std::uint64_t root, std::uint64_t index);

inline Rng make_rng(std::uint64_t root, std::string_view stream) {
  return Rng(derive_seed(root, stream));
}

}  // namespace ndlab
