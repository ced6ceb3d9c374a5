#pragma once

#include <cmath>

#include "safediff/backend.hpp"
#include "safediff/diffusion.hpp"

namespace safediff {

// ---------------------------------------------------------------------------
// Configs
// ---------------------------------------------------------------------------

struct CfgConfig {
  double lambda = 7.5;  // guidance strength

  void validate() const {
    if (lambda < 0.0) throw InputError("CfgConfig: lambda must be >= 0");
  }
};

struct SldConfig {
  double safety_scale = 10.0;  // s_S, strength of the negative term
  double threshold = 0.1;      // tau_S, per-coordinate activation threshold
  int warmup_steps = 5;        // sampling steps with the negative term off

  void validate() const {
    if (safety_scale <= 0.0) throw InputError("SldConfig: safety_scale must be > 0");
    if (warmup_steps < 0) throw InputError("SldConfig: warmup_steps must be >= 0");
  }
};

struct SafreeConfig {
  double alpha = 0.01;  // blend weight toward the unfiltered token
  double gamma = 10.0;  // gate sharpness
  double theta = 0.5;   // gate center on the proximity ratio

  void validate() const {
    if (alpha < 0.0 || alpha > 1.0) throw InputError("SafreeConfig: alpha outside [0, 1]");
    if (gamma <= 0.0) throw InputError("SafreeConfig: gamma must be > 0");
    if (theta < 0.0 || theta > 1.0) throw InputError("SafreeConfig: theta outside [0, 1]");
  }
};

// ---------------------------------------------------------------------------
// Score compositions
// ---------------------------------------------------------------------------

namespace detail {

// Shared combination so the reduction identities hold bit-for-bit across
// cfg_score / sld_score / safree_score. lambda == 0 and lambda == 1 collapse
// to the raw estimates.
inline Vec cfg_combine(const Vec& eps_u, const Vec& eps_c, double lambda) {
  if (lambda == 0.0) return eps_u;
  if (lambda == 1.0) return eps_c;
  return eps_u + lambda * (eps_c - eps_u);
}

}  // namespace detail

// Classifier-free guidance: eps_u + lambda * (eps_c - eps_u).
inline Vec cfg_score(const DenoiserBackend& backend, const LatentState& z,
                     const ConditionEmbedding& c_p, const CfgConfig& cfg) {
  cfg.validate();
  if (c_p.dim() != backend.embed_dim())
    throw InputError("cfg_score: embedding dimension mismatch");
  if (cfg.lambda == 0.0) return backend.predict(z.z, nullptr, z.t);
  if (cfg.lambda == 1.0) return backend.predict(z.z, &c_p, z.t);
  const Vec eps_u = backend.predict(z.z, nullptr, z.t);
  const Vec eps_c = backend.predict(z.z, &c_p, z.t);
  return detail::cfg_combine(eps_u, eps_c, cfg.lambda);
}

// Aggregates the negative set into a single vector c_n (arithmetic mean).
inline ConditionEmbedding negative_aggregate(const NegativeEmbeddingSet& negs) {
  if (negs.count() == 0)
    throw InputError("negative_aggregate: empty negative set");
  negs.validate();
  if (negs.count() == 1) return negs.columns.front();
  Vec acc = Vec::Zero(negs.dim());
  for (const auto& c : negs.columns) acc += c.v;
  acc /= double(negs.count());
  return ConditionEmbedding(std::move(acc));
}

// Negative-prompt guidance:
//   eps_u + lambda * (eps_c - eps_u) - mu .* (eps_n - eps_u)
// with the element-wise adaptive mask mu_i = s_S * [ (eps_c - eps_n)_i <
// tau_S ], and mu == 0 during the first warmup_steps sampling steps.
inline Vec sld_score(const DenoiserBackend& backend, const LatentState& z,
                     const ConditionEmbedding& c_p,
                     const NegativeEmbeddingSet& negs, const CfgConfig& cfg,
                     const SldConfig& sld, int step_index) {
  cfg.validate();
  sld.validate();
  if (negs.count() == 0) throw InputError("sld_score: empty negative set");
  if (sld.warmup_steps >= backend.schedule().sample_steps())
    throw InputError("sld_score: warmup_steps must be < sample_steps");

  const Vec eps_u = backend.predict(z.z, nullptr, z.t);
  const Vec eps_c = backend.predict(z.z, &c_p, z.t);
  const Vec base = detail::cfg_combine(eps_u, eps_c, cfg.lambda);
  if (step_index < sld.warmup_steps) return base;

  const ConditionEmbedding c_n = negative_aggregate(negs);
  const Vec eps_n = backend.predict(z.z, &c_n, z.t);

  Vec result = base;
  bool any_active = false;
  for (Eigen::Index i = 0; i < result.size(); ++i) {
    if (eps_c[i] - eps_n[i] < sld.threshold) {
      result[i] -= sld.safety_scale * (eps_n[i] - eps_u[i]);
      any_active = true;
    }
  }
  return any_active ? result : base;
}

// Token-level negative-subspace filtering. Projects each prompt token away
// from span(negs) with a logistic gate on the proximity ratio, then blends
// alpha of the original token back in. Empty negs leaves tokens untouched.
inline PromptTokenMatrix safree_filter(const PromptTokenMatrix& tokens,
                                       const NegativeEmbeddingSet& negs,
                                       const SafreeConfig& conf) {
  conf.validate();
  tokens.validate();
  if (negs.count() == 0) return tokens;
  negs.validate();
  if (negs.dim() != tokens.tokens.front().dim())
    throw InputError("safree_filter: negative/token dimension mismatch");

  const Mat neg = negs.matrix();
  Eigen::ColPivHouseholderQR<Mat> qr(neg);
  qr.setThreshold(1e-8);
  const Eigen::Index rank = qr.rank();
  if (rank == 0) return tokens;
  const Mat basis = qr.householderQ() * Mat::Identity(neg.rows(), rank);

  PromptTokenMatrix out;
  out.tokens.reserve(tokens.tokens.size());
  for (const auto& tok : tokens.tokens) {
    const double norm = tok.v.norm();
    if (norm == 0.0) {
      out.tokens.push_back(tok);
      continue;
    }
    const Vec proj = basis * (basis.transpose() * tok.v);
    const double rho = proj.norm() / norm;
    const double gate = logistic(conf.gamma * (rho - conf.theta));
    const Vec filtered = tok.v - gate * proj;
    out.tokens.emplace_back(conf.alpha * tok.v + (1.0 - conf.alpha) * filtered,
                            tok.label);
  }
  return out;
}

// Filtered-prompt guidance: run CFG on the token-filtered, mean-reduced
// prompt embedding c_plus.
inline Vec safree_score(const DenoiserBackend& backend, const LatentState& z,
                        const PromptTokenMatrix& tokens,
                        const NegativeEmbeddingSet& negs, const CfgConfig& cfg,
                        const SafreeConfig& conf) {
  cfg.validate();
  const ConditionEmbedding c_plus =
      safree_filter(tokens, negs, conf).reduce_mean();
  if (cfg.lambda == 0.0) return backend.predict(z.z, nullptr, z.t);
  if (cfg.lambda == 1.0) return backend.predict(z.z, &c_plus, z.t);
  const Vec eps_u = backend.predict(z.z, nullptr, z.t);
  const Vec eps_c = backend.predict(z.z, &c_plus, z.t);
  return detail::cfg_combine(eps_u, eps_c, cfg.lambda);
}

// ---------------------------------------------------------------------------
// Sampler closures
// ---------------------------------------------------------------------------

inline GuidanceFn make_cfg_guidance(ConditionEmbedding c_p, CfgConfig cfg) {
  return [c_p = std::move(c_p), cfg](const DenoiserBackend& b, const Vec& z,
                                     int t, int) {
    return cfg_score(b, LatentState(z, t), c_p, cfg);
  };
}

inline GuidanceFn make_sld_guidance(ConditionEmbedding c_p,
                                    NegativeEmbeddingSet negs, CfgConfig cfg,
                                    SldConfig sld) {
  return [c_p = std::move(c_p), negs = std::move(negs), cfg,
          sld](const DenoiserBackend& b, const Vec& z, int t, int step) {
    return sld_score(b, LatentState(z, t), c_p, negs, cfg, sld, step);
  };
}

inline GuidanceFn make_safree_guidance(PromptTokenMatrix tokens,
                                       NegativeEmbeddingSet negs,
                                       CfgConfig cfg, SafreeConfig conf) {
  return [tokens = std::move(tokens), negs = std::move(negs), cfg,
          conf](const DenoiserBackend& b, const Vec& z, int t, int) {
    return safree_score(b, LatentState(z, t), tokens, negs, cfg, conf);
  };
}

}  // namespace safediff
