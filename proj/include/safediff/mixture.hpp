#pragma once

#include <cmath>
#include <limits>
#include <numbers>

#include "safediff/backend.hpp"

namespace safediff {

// Gaussian mixture over data space with diagonal covariances. `cond_map` maps
// a condition embedding c to soft component weights softmax(M^T c); with no
// condition the prior weights apply. Concepts are mixture components.
struct MixtureSpec {
  Mat means;      // data_dim x K
  Mat variances;  // data_dim x K, per-dimension diagonal covariances
  Vec weights;    // K, simplex
  Mat cond_map;   // D x K

  int data_dim() const { return static_cast<int>(means.rows()); }
  int components() const { return static_cast<int>(means.cols()); }
  int embed_dim() const { return static_cast<int>(cond_map.rows()); }

  void validate() const {
    if (means.cols() < 1) throw InputError("MixtureSpec: needs >= 1 component");
    if (variances.rows() != means.rows() || variances.cols() != means.cols())
      throw InputError("MixtureSpec: variance shape mismatch");
    if (weights.size() != means.cols())
      throw InputError("MixtureSpec: weight count mismatch");
    if (cond_map.cols() != means.cols())
      throw InputError("MixtureSpec: cond_map column count mismatch");
    if ((variances.array() <= 0.0).any())
      throw InputError("MixtureSpec: covariances must be positive");
    if ((weights.array() < 0.0).any() || std::abs(weights.sum() - 1.0) > 1e-9)
      throw InputError("MixtureSpec: weights must be a simplex vector");
  }

  Vec condition_weights(const ConditionEmbedding* c) const {
    if (!c) return weights;
    if (c->dim() != cond_map.rows())
      throw InputError("MixtureSpec: embedding dimension mismatch");
    Vec logits = cond_map.transpose() * c->v;
    const double m = logits.maxCoeff();
    Vec w = (logits.array() - m).exp();
    w /= w.sum();
    return w;
  }
};

// Log-density of the alpha_bar-noised mixture under the given component
// weights. Shared by the analytic backend and by finite-difference checks.
inline double log_noised_density(const MixtureSpec& spec, const Vec& weights,
                                 const Vec& z, double alpha_bar) {
  const double a = std::sqrt(alpha_bar);
  const int K = spec.components();
  double best = -std::numeric_limits<double>::infinity();
  Vec logterm(K);
  for (int k = 0; k < K; ++k) {
    if (weights[k] <= 0.0) {
      logterm[k] = -std::numeric_limits<double>::infinity();
      continue;
    }
    double lg = std::log(weights[k]);
    for (int d = 0; d < spec.data_dim(); ++d) {
      const double v = alpha_bar * spec.variances(d, k) + (1.0 - alpha_bar);
      const double r = z[d] - a * spec.means(d, k);
      lg += -0.5 * (r * r / v + std::log(2.0 * std::numbers::pi * v));
    }
    logterm[k] = lg;
    if (lg > best) best = lg;
  }
  double acc = 0.0;
  for (int k = 0; k < K; ++k) acc += std::exp(logterm[k] - best);
  return best + std::log(acc);
}

// Exact denoiser for the noised mixture: eps = -sqrt(1 - alpha_bar) *
// grad_z log q_t(z | c), computed from per-component posteriors.
class MixtureBackend final : public DenoiserBackend {
 public:
  MixtureBackend(MixtureSpec spec, NoiseSchedule schedule)
      : spec_(std::move(spec)), schedule_(std::move(schedule)) {
    spec_.validate();
  }

  const MixtureSpec& spec() const { return spec_; }
  int data_dim() const override { return spec_.data_dim(); }
  int embed_dim() const override { return spec_.embed_dim(); }
  const NoiseSchedule& schedule() const override { return schedule_; }

  Vec predict(const Vec& z, const ConditionEmbedding* c, int t) const override {
    check_inputs(z, c);
    if (!all_finite(z)) throw InputError("predict: non-finite latent");
    const double ab = schedule_.alpha_bar(t);
    const Vec w = spec_.condition_weights(c);
    Vec posterior, score;
    score_at(z, ab, w, &posterior, &score);
    return -std::sqrt(1.0 - ab) * score;
  }

  // grad_c <cotangent, eps(z, c, t)>. The condition enters only through the
  // softmax weights, so the chain rule stays in component space.
  Vec condition_vjp(const Vec& z, const ConditionEmbedding& c, int t,
                    const Vec& cotangent) const override {
    check_inputs(z, &c);
    if (cotangent.size() != data_dim())
      throw InputError("condition_vjp: cotangent dimension mismatch");
    const double ab = schedule_.alpha_bar(t);
    const Vec w = spec_.condition_weights(&c);
    Vec posterior, score;
    score_at(z, ab, w, &posterior, &score);

    const double a = std::sqrt(ab);
    const int K = spec_.components();
    // r_j = p_j * <cotangent, s_j - score>, where s_j is component j's score
    Vec r(K);
    for (int j = 0; j < K; ++j) {
      double dot = 0.0;
      for (int d = 0; d < data_dim(); ++d) {
        const double v = ab * spec_.variances(d, j) + (1.0 - ab);
        const double sj = -(z[d] - a * spec_.means(d, j)) / v;
        dot += cotangent[d] * (sj - score[d]);
      }
      r[j] = posterior[j] * dot;
    }
    // d eps / d w_j contracted with dw/dc = w_j (M e_j - M w); sum_j r_j == 0
    // analytically, keep the centering term for numerical hygiene.
    const Vec mw = spec_.cond_map * w;
    return -std::sqrt(1.0 - ab) * (spec_.cond_map * r - r.sum() * mw);
  }

 private:
  void score_at(const Vec& z, double alpha_bar, const Vec& w, Vec* posterior,
                Vec* score) const {
    const double a = std::sqrt(alpha_bar);
    const int K = spec_.components();
    const int dz = data_dim();

    Vec logp(K);
    double best = -std::numeric_limits<double>::infinity();
    for (int k = 0; k < K; ++k) {
      if (w[k] <= 0.0) {
        logp[k] = -std::numeric_limits<double>::infinity();
        continue;
      }
      double lg = std::log(w[k]);
      for (int d = 0; d < dz; ++d) {
        const double v = alpha_bar * spec_.variances(d, k) + (1.0 - alpha_bar);
        const double res = z[d] - a * spec_.means(d, k);
        lg += -0.5 * (res * res / v + std::log(2.0 * std::numbers::pi * v));
      }
      logp[k] = lg;
      if (lg > best) best = lg;
    }
    double norm = 0.0;
    for (int k = 0; k < K; ++k) norm += std::exp(logp[k] - best);

    posterior->resize(K);
    *score = Vec::Zero(dz);
    for (int k = 0; k < K; ++k) {
      const double p = std::exp(logp[k] - best) / norm;
      (*posterior)[k] = p;
      if (p == 0.0) continue;
      for (int d = 0; d < dz; ++d) {
        const double v = alpha_bar * spec_.variances(d, k) + (1.0 - alpha_bar);
        (*score)[d] += p * (-(z[d] - a * spec_.means(d, k)) / v);
      }
    }
  }

  MixtureSpec spec_;
  NoiseSchedule schedule_;
};

}  // namespace safediff
