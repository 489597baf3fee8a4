#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <random>

namespace da {

// Stateless 64-bit mix (splitmix64 finalizer). Used to derive independent
// substream seeds from a master seed and a structured key.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Purpose tags for derived RNG streams. Every consumer of randomness draws
// from substream(master, tag, k, i) so that algorithms sharing a master seed
// consume identical values for identical purposes regardless of internal
// evaluation order. This is what makes the Gamma=1 LSMCMC/SMCMC and the
// LEnKF/EnKF degeneracy checks exact.
enum class Stream : std::uint64_t {
  kInitState = 1,
  kTruthNoise,
  kObsNoise,
  kForecastNoise,
  kChainInit,
  kChain,
  kObsPerturb,
  kPriorNoise,
};

inline std::mt19937_64 substream(std::uint64_t master, Stream tag,
                                 std::uint64_t k = 0, std::uint64_t i = 0) {
  std::uint64_t s = mix64(master);
  s = mix64(s ^ (0x1000003ULL * static_cast<std::uint64_t>(tag)));
  s = mix64(s ^ (0x100000001b3ULL * k));
  s = mix64(s ^ (0xc6a4a7935bd1e995ULL * i));
  return std::mt19937_64(s);
}

inline double standard_normal(std::mt19937_64& g) {
  std::normal_distribution<double> dist;
  return dist(g);
}

inline void fill_standard_normal(std::mt19937_64& g,
                                 Eigen::Ref<Eigen::VectorXd> out) {
  std::normal_distribution<double> dist;
  for (Eigen::Index i = 0; i < out.size(); ++i) out[i] = dist(g);
}

inline double uniform01(std::mt19937_64& g) {
  std::uniform_real_distribution<double> dist(0.0, 1.0);
  return dist(g);
}

inline int uniform_int(std::mt19937_64& g, int lo, int hi) {
  std::uniform_int_distribution<int> dist(lo, hi);
  return dist(g);
}

// sin(pi*x) with exact zeros at integer x. Plain std::sin(pi*x) returns
// O(1e-16) residues at integers, which would leak nonzero noise onto grid
// boundaries that the sine construction keeps exactly silent.
inline double sinpi(double x) {
  double n = std::nearbyint(x);
  double f = x - n;  // exact for |x| < 2^52
  if (f == 0.0) return 0.0;
  double s = std::sin(M_PI * f);
  // odd n flips the sign of sin(pi*(n+f))
  return (static_cast<long long>(n) % 2 == 0) ? s : -s;
}

}  // namespace da
