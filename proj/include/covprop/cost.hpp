#pragma once

// Bookkeeping cost of tracking exact cross-pixel second moments through q
// convolution layers of kernel size k, counted at the layer q steps back from
// the output. Without window overlap the influence sets branch fully (k^q
// covariance blocks); with overlap neighboring windows share inputs and the
// distinct-block count collapses to (k-1)q+1 per spatial axis. Either way the
// cross-correlation matrices pair up the blocks, hence the triangular-number
// counts. q = 0 is the output layer itself: one covariance, nothing to cross.

#include <cstdint>
#include <string>

#include "covprop/error.hpp"

namespace covprop {

enum class CostMode {
  overlap,
  no_overlap,
};

inline CostMode cost_mode_from_string(const std::string& name) {
  if (name == "overlap") return CostMode::overlap;
  if (name == "no-overlap") return CostMode::no_overlap;
  throw_error(ErrorKind::validation,
              "cost mode '" + name + "' is not one of: overlap, no-overlap");
}

namespace detail {

inline std::uint64_t pow_u64(std::uint64_t base, int exp) {
  std::uint64_t out = 1;
  for (int i = 0; i < exp; ++i) out *= base;
  return out;
}

}  // namespace detail

inline void check_cost_args(int k, int q) {
  if (k < 2) {
    throw_error(ErrorKind::validation, "cost: kernel size k must be >= 2, got " +
                                           std::to_string(k));
  }
  if (q < 0) {
    throw_error(ErrorKind::validation, "cost: depth q must be >= 0, got " + std::to_string(q));
  }
}

// Number of distinct covariance blocks needed q layers back from the output.
inline std::uint64_t cost_sigma_count(int k, int q, CostMode mode) {
  check_cost_args(k, q);
  if (mode == CostMode::no_overlap) {
    return detail::pow_u64(static_cast<std::uint64_t>(k), q);
  }
  return static_cast<std::uint64_t>(k - 1) * static_cast<std::uint64_t>(q) + 1;
}

// Number of cross-correlation matrices between those blocks (pairs including
// self-pairs). The output layer itself (q = 0) carries a single covariance
// and no cross terms.
inline std::uint64_t cost_cross_count(int k, int q, CostMode mode) {
  check_cost_args(k, q);
  if (q == 0) return 0;
  const std::uint64_t s = cost_sigma_count(k, q, mode);
  return (s + 1) * s / 2;
}

}  // namespace covprop
