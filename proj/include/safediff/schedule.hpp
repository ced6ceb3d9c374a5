#pragma once

#include <cmath>
#include <numbers>
#include <utility>
#include <vector>

#include "safediff/common.hpp"

namespace safediff {

// Cumulative signal levels alpha_bar[0..T] for forward noising plus the DDIM
// timestep grid used at inference. alpha_bar[0] == 1 and the sequence is
// strictly decreasing, ending in (0, 0.05).
class NoiseSchedule {
 public:
  static NoiseSchedule from_alpha_bar(std::vector<double> alpha_bar,
                                      int sample_steps) {
    return NoiseSchedule(std::move(alpha_bar), sample_steps);
  }

  // Squared-cosine schedule with the usual 0.008 start offset. The angle
  // grid stops short of pi/2 so alpha_bar[T] equals `terminal` exactly
  // instead of collapsing to ~1e-9; the 1/sqrt(alpha_bar) factor in the
  // DDIM z0 estimate stays bounded for imperfect denoisers.
  static NoiseSchedule cosine(int total_steps, int sample_steps = 50,
                              double terminal = 5e-4) {
    if (total_steps < 1) throw ScheduleError("cosine: total_steps must be >= 1");
    if (!(terminal > 0.0 && terminal < 0.05))
      throw ScheduleError("cosine: terminal alpha_bar outside (0, 0.05)");
    const double s = 0.008;
    const double theta0 = std::numbers::pi / 2.0 * (s / (1.0 + s));
    const double c0 = std::cos(theta0);
    const double theta1 = std::acos(std::sqrt(terminal) * c0);
    std::vector<double> ab(total_steps + 1);
    ab[0] = 1.0;
    for (int t = 1; t <= total_steps; ++t) {
      const double th = theta0 + (theta1 - theta0) * (double(t) / total_steps);
      const double c = std::cos(th) / c0;
      ab[t] = c * c;
    }
    ab[total_steps] = terminal;
    return NoiseSchedule(std::move(ab), sample_steps);
  }

  int total_steps() const { return T_; }
  int sample_steps() const { return sample_steps_; }

  double alpha_bar(int t) const {
    if (t < 0 || t > T_) throw RangeError("alpha_bar: t out of [0, T]");
    return alpha_bar_[t];
  }

  const std::vector<double>& alpha_bar_sequence() const { return alpha_bar_; }

  // Strictly decreasing grid T = t_0 > t_1 > ... > t_S = 0 visited by the
  // DDIM sampler; sample_steps transitions in total.
  std::vector<int> ddim_timesteps() const {
    std::vector<int> grid(sample_steps_ + 1);
    for (int i = 0; i <= sample_steps_; ++i) {
      grid[i] = static_cast<int>((std::int64_t(T_) * (sample_steps_ - i)) / sample_steps_);
    }
    return grid;
  }

 private:
  NoiseSchedule(std::vector<double> alpha_bar, int sample_steps)
      : alpha_bar_(std::move(alpha_bar)),
        T_(static_cast<int>(alpha_bar_.size()) - 1),
        sample_steps_(sample_steps) {
    validate();
  }

  void validate() const {
    if (T_ < 1) throw ScheduleError("schedule needs at least one step");
    if (alpha_bar_[0] != 1.0) throw ScheduleError("alpha_bar[0] must be exactly 1");
    for (int t = 1; t <= T_; ++t) {
      if (!(alpha_bar_[t] < alpha_bar_[t - 1]))
        throw ScheduleError("alpha_bar must be strictly decreasing");
      if (!(alpha_bar_[t] > 0.0))
        throw ScheduleError("alpha_bar must stay positive");
    }
    if (!(alpha_bar_[T_] > 0.0 && alpha_bar_[T_] < 0.05))
      throw ScheduleError("alpha_bar[T] must lie in (0, 0.05)");
    if (sample_steps_ < 1 || sample_steps_ > T_)
      throw ScheduleError("sample_steps must lie in [1, T]");
  }

  std::vector<double> alpha_bar_;
  int T_;
  int sample_steps_;
};

}  // namespace safediff
