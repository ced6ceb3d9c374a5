#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <numbers>
#include <stdexcept>
#include <string>

namespace safediff {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct InputError : Error { using Error::Error; };        // bad shapes / values
struct RangeError : Error { using Error::Error; };        // timestep out of range
struct OrderError : Error { using Error::Error; };        // DDIM timestep ordering
struct SingularityError : Error { using Error::Error; };  // alpha_bar == 1 in eps<->score
struct ScheduleError : Error { using Error::Error; };     // invalid noise schedule
struct TrainingError : Error { using Error::Error; };     // NaN loss, missed loss bar
struct QualityError : Error { using Error::Error; };      // classifier below accuracy gate
struct DataError : Error { using Error::Error; };         // empty / insufficient datasets
struct IoError : Error { using Error::Error; };           // file and format problems
struct ConfigError : Error { using Error::Error; };       // experiment config problems

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw InputError(msg);
}

// ---------------------------------------------------------------------------
// Deterministic RNG
// ---------------------------------------------------------------------------

// splitmix64 with Box-Muller gaussians. std::normal_distribution is
// implementation-defined, so all stochastic code in the library draws from
// this generator to keep runs reproducible byte-for-byte.
class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0)
      : state_(seed ^ (0x9E3779B97F4A7C15ull * (stream + 1))) {
    next();
    next();
  }

  std::uint64_t next() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  // [0, 1)
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  // inclusive bounds
  int uniform_int(int lo, int hi) {
    if (hi < lo) throw InputError("uniform_int: hi < lo");
    const int span = hi - lo + 1;
    int v = lo + static_cast<int>(uniform() * span);
    return v > hi ? hi : v;
  }

  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  Vec normal_vec(Eigen::Index n) {
    Vec v(n);
    for (Eigen::Index i = 0; i < n; ++i) v[i] = normal();
    return v;
  }

  Mat normal_mat(Eigen::Index rows, Eigen::Index cols) {
    Mat m(rows, cols);
    for (Eigen::Index c = 0; c < cols; ++c)
      for (Eigen::Index r = 0; r < rows; ++r) m(r, c) = normal();
    return m;
  }

 private:
  std::uint64_t state_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

inline bool all_finite(const Vec& v) { return v.allFinite(); }
inline bool all_finite(const Mat& m) { return m.allFinite(); }

inline double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace safediff
