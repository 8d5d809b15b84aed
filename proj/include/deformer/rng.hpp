#pragma once

#include <cstdint>
#include <string_view>

namespace deformer {

/// Counter-based generator: draw n of stream `seed` is a pure function of
/// (seed, n), so streams can be split off without perturbing each other.
struct RngState {
  std::uint64_t seed = 0;
  std::uint64_t counter = 0;

  static RngState from_seed(std::uint64_t seed) { return RngState{seed, 0}; }

  std::uint64_t next_u64();
  /// Uniform in [0, 1).
  double uniform();
  /// Standard normal (Box-Muller, one value per two draws).
  double normal();
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);

  /// Independent child stream; does not advance this stream.
  RngState split(std::uint64_t stream) const;
  RngState split(std::string_view tag) const;

  bool operator==(const RngState&) const = default;
};

std::uint64_t mix64(std::uint64_t x);
std::uint64_t hash_string(std::string_view s);

}  // namespace deformer
