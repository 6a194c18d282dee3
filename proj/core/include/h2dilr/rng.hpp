#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace h2dilr {

/// Derives an independent seed for a labeled purpose ("data", "init",
/// "shuffle", "probe", or any "a/b/c" refinement) from a run seed.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view label);

inline std::mt19937_64 make_stream(std::uint64_t seed, std::string_view label) {
  return std::mt19937_64(derive_seed(seed, label));
}

}  // namespace h2dilr
