#pragma once

#include <cstdint>
#include <random>

namespace macfl {

using Rng = std::mt19937_64;

/// Named stream families. Every consumer of randomness owns an engine derived
/// from (root seed, family, index) so results do not depend on call order
/// across users or threads.
enum class Stream : std::uint64_t {
  init_params = 1,
  assignment = 2,
  mobility = 3,
  user_batches = 4,
  user_inner_batches = 5,
  partition = 6,
  synthetic_train = 7,
  synthetic_test = 8,
  loss_sample = 9,
  estimate = 10,
};

inline Rng make_rng(std::uint64_t root, Stream family, std::uint64_t index = 0) {
  const auto f = static_cast<std::uint64_t>(family);
  std::seed_seq seq{static_cast<std::uint32_t>(root), static_cast<std::uint32_t>(root >> 32),
                    static_cast<std::uint32_t>(f), static_cast<std::uint32_t>(index),
                    static_cast<std::uint32_t>(index >> 32)};
  return Rng(seq);
}

}  // namespace macfl
