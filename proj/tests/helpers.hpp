#pragma once

#include <cmath>
#include <vector>

#include "safediff/dataset.hpp"
#include "safediff/mixture.hpp"

namespace sdtest {

using namespace safediff;

// Small well-separated world used across the suites. Classes 1 and 2 sit
// close to class 3 so they can act as "semantically near" tags.
inline DatasetSpec small_spec() {
  DatasetSpec spec;
  spec.num_classes = 4;
  spec.data_dim = 6;
  spec.embed_dim = 8;
  spec.samples_per_class = 250;
  spec.cluster_std = 0.1;
  spec.mean_scale = 2.0;
  spec.similar_group = {3, 1, 2};
  spec.similar_spread = 0.6;
  spec.embed_scale = 6.0;
  spec.seed = 2024;
  return spec;
}

// Hand-sized mixture in 2-D data space with a 2-D embedding, for grid
// searches over the embedding plane.
inline MixtureSpec tiny_mixture() {
  MixtureSpec m;
  m.means.resize(2, 2);
  m.means << 1.5, -1.5,
             0.0, 0.0;
  m.variances = Mat::Constant(2, 2, 0.04);
  m.weights = Vec::Constant(2, 0.5);
  m.cond_map.resize(2, 2);
  m.cond_map << 1.0, -1.0,
                0.0, 0.0;
  m.cond_map.col(0).normalize();
  m.cond_map.col(1).normalize();
  return m;
}

// Central-difference gradient of a scalar function of a vector.
template <typename F>
inline Vec finite_diff_grad(const F& f, const Vec& x, double h = 1e-5) {
  Vec g(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    Vec xp = x, xm = x;
    xp[i] += h;
    xm[i] -= h;
    g[i] = (f(xp) - f(xm)) / (2.0 * h);
  }
  return g;
}

inline int nearest_mean_class(const MixtureSpec& spec, const Vec& x) {
  int best = 0;
  double best_d = (x - spec.means.col(0)).squaredNorm();
  for (int k = 1; k < spec.components(); ++k) {
    const double d = (x - spec.means.col(k)).squaredNorm();
    if (d < best_d) {
      best_d = d;
      best = k;
    }
  }
  return best;
}

}  // namespace sdtest
