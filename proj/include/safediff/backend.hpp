#pragma once

#include "safediff/common.hpp"
#include "safediff/embedding.hpp"
#include "safediff/schedule.hpp"

namespace safediff {

// Noised data point plus its timestep.
struct LatentState {
  Vec z;
  int t = 0;

  LatentState() = default;
  LatentState(Vec latent, int timestep) : z(std::move(latent)), t(timestep) {
    if (!all_finite(z)) throw InputError("LatentState: non-finite latent");
    if (t < 0) throw RangeError("LatentState: negative timestep");
  }
};

// The eps_theta(z_t, c, t) contract. `c == nullptr` requests the
// unconditional estimate. Implementations must be deterministic given
// (z, c, t) and frozen parameters, and predict() must be safe to call from
// multiple threads concurrently.
class DenoiserBackend {
 public:
  virtual ~DenoiserBackend() = default;

  virtual int data_dim() const = 0;
  virtual int embed_dim() const = 0;
  virtual const NoiseSchedule& schedule() const = 0;

  virtual Vec predict(const Vec& z, const ConditionEmbedding* c, int t) const = 0;

  // Gradient of <cotangent, predict(z, c, t)> with respect to c. Drives the
  // embedding optimization; parameters are never touched.
  virtual Vec condition_vjp(const Vec& z, const ConditionEmbedding& c, int t,
                            const Vec& cotangent) const = 0;

  Vec predict_uncond(const Vec& z, int t) const { return predict(z, nullptr, t); }

 protected:
  void check_inputs(const Vec& z, const ConditionEmbedding* c) const {
    if (z.size() != data_dim())
      throw InputError("predict: latent dimension mismatch");
    if (c && c->dim() != embed_dim())
      throw InputError("predict: embedding dimension mismatch");
  }
};

}  // namespace safediff
