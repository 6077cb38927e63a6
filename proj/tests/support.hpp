#pragma once

#include <random>

#include "groupwarp/volume.hpp"

namespace gwtest {

inline std::mt19937_64 rng(unsigned long long seed) { return std::mt19937_64(seed); }

inline gw::ArrayXX<double> random_array(gw::Index rows, gw::Index cols, std::mt19937_64& g,
                                        double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  gw::ArrayXX<double> a(rows, cols);
  for (gw::Index j = 0; j < cols; ++j)
    for (gw::Index i = 0; i < rows; ++i) a(i, j) = u(g);
  return a;
}

inline double rel_err(double got, double want) {
  double denom = std::max(std::abs(want), 1e-12);
  return std::abs(got - want) / denom;
}

}  // namespace gwtest
