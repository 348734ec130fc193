#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>

#include <Eigen/Core>

namespace xferlab {

// Splittable deterministic generator. All distributions are implemented
// explicitly on top of mt19937_64 so that streams are bit-identical across
// compilers and platforms. Bump kRngVersion if any sampling recipe changes;
// the version is echoed into dataset provenance.
class SplitRng {
 public:
  static constexpr int kRngVersion = 1;

  explicit SplitRng(std::uint64_t seed) : seed_(seed), engine_(mix(seed)) {}

  std::uint64_t seed() const { return seed_; }

  // Child generator with a disjoint stream. split(s) is stable under the
  // order in which siblings are created.
  SplitRng split(std::uint64_t stream) const {
    return SplitRng(mix(seed_ ^ mix(stream + 0x9E3779B97F4A7C15ull)));
  }

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0,1) with 53 random bits.
  double uniform01() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  // Standard normal via Box-Muller; the spare value is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform01();
    double u2 = uniform01();
    while (u1 <= 0.0) u1 = uniform01();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * M_PI * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
  }

  // +1 or -1 with equal probability.
  double sign() { return (engine_() >> 63) ? 1.0 : -1.0; }

  // Uniform integer in [0, n).
  std::uint64_t uniform_int(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("uniform_int: n must be positive");
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t v = engine_();
    while (v >= limit) v = engine_();
    return v % n;
  }

  Eigen::VectorXd normal_vector(Eigen::Index n) {
    Eigen::VectorXd v(n);
    for (Eigen::Index i = 0; i < n; ++i) v[i] = normal();
    return v;
  }

  Eigen::MatrixXd normal_matrix(Eigen::Index rows, Eigen::Index cols) {
    Eigen::MatrixXd m(rows, cols);
    // Column-major fill order, matching Eigen storage.
    for (Eigen::Index c = 0; c < cols; ++c)
      for (Eigen::Index r = 0; r < rows; ++r) m(r, c) = normal();
    return m;
  }

  // Uniform point on the unit sphere in R^d.
  Eigen::VectorXd unit_vector(Eigen::Index d) {
    while (true) {
      Eigen::VectorXd v = normal_vector(d);
      const double norm = v.norm();
      if (norm > 1e-12) return v / norm;
    }
  }

  // Haar-random rotation: QR of a Gaussian matrix with the sign of R's
  // diagonal folded into Q.
  Eigen::MatrixXd rotation_matrix(Eigen::Index d);

 private:
  static std::uint64_t mix(std::uint64_t z) {
    // splitmix64 finalizer.
    z += 0x9E3779B97F4A7C15ull;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  std::uint64_t seed_;
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace xferlab
