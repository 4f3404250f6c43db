#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include <Eigen/Dense>

namespace ovdsim {

/// Finalizer from the splitmix64 generator. Used to mix seeds and stream
/// tags into well-separated engine seeds.
inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Named sub-stream tags. Every consumer of randomness draws from its own
/// stream so that adding draws in one place never shifts another.
enum class Stream : uint64_t {
  Prototypes = 1,  // category prototype directions
  Scene = 2,       // object layout of one scene
  Rpn = 3,         // proposal jitter / distractors / objectness noise
  Features = 4,    // region feature noise
  Batch = 5,       // per-iteration batch sampling
};

/// Derives an engine seed from a master seed, a stream tag and up to two
/// free indices (e.g. scene id, iteration).
inline uint64_t derive_seed(uint64_t master, Stream stream, uint64_t a = 0,
                            uint64_t b = 0) {
  uint64_t s = splitmix64(master);
  s = splitmix64(s ^ static_cast<uint64_t>(stream));
  s = splitmix64(s ^ a);
  s = splitmix64(s ^ b);
  return s;
}

/// Deterministic random source. std::mt19937_64 has a portable bit stream;
/// the floating point draws below are hand-rolled because the standard
/// library distributions are implementation-defined.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  /// Uniform in [0, 1), 53-bit resolution.
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [lo, hi], both inclusive. Unbiased via rejection.
  int uniform_int(int lo, int hi) {
    const uint64_t range = static_cast<uint64_t>(hi - lo) + 1;
    const uint64_t limit = UINT64_MAX - UINT64_MAX % range;
    uint64_t r;
    do {
      r = engine_();
    } while (r >= limit);
    return lo + static_cast<int>(r % range);
  }

  /// Standard normal via Box-Muller (pairs are cached).
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    // u1 in (0, 1] so that log(u1) is finite; u2 in [0, 1).
    const double u1 = static_cast<double>((engine_() >> 11) + 1) * 0x1.0p-53;
    const double u2 = uniform();
    const double mag = std::sqrt(-2.0 * std::log(u1));
    const double ang = 2.0 * M_PI * u2;
    spare_ = mag * std::sin(ang);
    have_spare_ = true;
    return mag * std::cos(ang);
  }

  double normal(double mu, double sigma) { return mu + sigma * normal(); }

  Eigen::VectorXd normal_vec(int n) {
    Eigen::VectorXd v(n);
    for (int i = 0; i < n; ++i) v[i] = normal();
    return v;
  }

  /// Uniformly random direction on the unit sphere.
  Eigen::VectorXd unit_vec(int n) {
    Eigen::VectorXd v = normal_vec(n);
    double norm = v.norm();
    while (norm < 1e-12) {  // vanishingly unlikely; retry keeps the contract
      v = normal_vec(n);
      norm = v.norm();
    }
    return v / norm;
  }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

inline Rng stream_rng(uint64_t master, Stream stream, uint64_t a = 0,
                      uint64_t b = 0) {
  return Rng(derive_seed(master, stream, a, b));
}

}  // namespace ovdsim
