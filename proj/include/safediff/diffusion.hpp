#pragma once

#include <cmath>
#include <functional>

#include "safediff/backend.hpp"

namespace safediff {

// z_t = sqrt(ab) * z0 + sqrt(1 - ab) * eps, for an explicit alpha_bar value.
inline Vec forward_noise_at(const Vec& z0, double alpha_bar, const Vec& eps) {
  if (eps.size() != z0.size())
    throw InputError("forward_noise: eps shape mismatch");
  if (!(alpha_bar >= 0.0 && alpha_bar <= 1.0))
    throw RangeError("forward_noise: alpha_bar outside [0, 1]");
  return std::sqrt(alpha_bar) * z0 + std::sqrt(1.0 - alpha_bar) * eps;
}

inline LatentState forward_noise(const Vec& z0, int t, const Vec& eps,
                                 const NoiseSchedule& schedule) {
  if (t < 1 || t > schedule.total_steps())
    throw RangeError("forward_noise: t outside [1, T]");
  return LatentState(forward_noise_at(z0, schedule.alpha_bar(t), eps), t);
}

// eps <-> score conversion: s = -eps / sqrt(1 - alpha_bar_t).
inline Vec epsilon_to_score(const Vec& eps_hat, int t,
                            const NoiseSchedule& schedule) {
  const double ab = schedule.alpha_bar(t);
  if (ab >= 1.0)
    throw SingularityError("epsilon_to_score: alpha_bar == 1 at t");
  return -eps_hat / std::sqrt(1.0 - ab);
}

inline Vec score_to_epsilon(const Vec& score, int t,
                            const NoiseSchedule& schedule) {
  const double ab = schedule.alpha_bar(t);
  if (ab >= 1.0)
    throw SingularityError("score_to_epsilon: alpha_bar == 1 at t");
  return -std::sqrt(1.0 - ab) * score;
}

// One deterministic DDIM update (eta = 0):
//   z0_hat = (z_t - sqrt(1 - ab_t) * eps_hat) / sqrt(ab_t)
//   z_next = sqrt(ab_next) * z0_hat + sqrt(1 - ab_next) * eps_hat
// t_next == t is the identity; t_next > t is rejected.
inline LatentState ddim_step(const LatentState& state, int t_next,
                             const Vec& eps_hat, const NoiseSchedule& schedule) {
  if (t_next > state.t) throw OrderError("ddim_step: timesteps must not increase");
  if (t_next < 0) throw RangeError("ddim_step: negative target timestep");
  if (eps_hat.size() != state.z.size())
    throw InputError("ddim_step: eps shape mismatch");
  if (t_next == state.t) return state;

  const double ab_t = schedule.alpha_bar(state.t);
  const double ab_n = schedule.alpha_bar(t_next);
  const Vec z0_hat = (state.z - std::sqrt(1.0 - ab_t) * eps_hat) / std::sqrt(ab_t);
  Vec z_next = std::sqrt(ab_n) * z0_hat + std::sqrt(1.0 - ab_n) * eps_hat;
  return LatentState(std::move(z_next), t_next);
}

// Guidance closure: composes denoiser calls into the eps estimate used by the
// sampler. `step_index` counts sampling steps from 0 (for warmup logic).
using GuidanceFn = std::function<Vec(const DenoiserBackend& backend,
                                     const Vec& z, int t, int step_index)>;

// Full DDIM run from z_T ~ N(0, I) under the given seed. Deterministic for a
// fixed (backend, guidance, schedule, seed).
inline Vec sample(const DenoiserBackend& backend, const GuidanceFn& guidance,
                  const NoiseSchedule& schedule, std::uint64_t seed) {
  Rng rng(seed, /*stream=*/0x5a'fe'd1'ffull);
  const auto grid = schedule.ddim_timesteps();
  LatentState state(rng.normal_vec(backend.data_dim()), grid.front());
  for (std::size_t i = 0; i + 1 < grid.size(); ++i) {
    const Vec eps_hat = guidance(backend, state.z, state.t, static_cast<int>(i));
    state = ddim_step(state, grid[i + 1], eps_hat, schedule);
  }
  return state.z;
}

}  // namespace safediff
