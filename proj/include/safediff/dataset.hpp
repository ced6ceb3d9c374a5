#pragma once

#include <string>
#include <vector>

#include "safediff/io.hpp"
#include "safediff/mixture.hpp"

namespace safediff {

// Geometry and size of the toy world: a labeled Gaussian-mixture point cloud
// whose components play the role of concepts. Classes listed in
// `similar_group` are placed around a shared center so they act as
// "semantically close" tags; everything else is well separated.
struct DatasetSpec {
  int num_classes = 8;
  int data_dim = 8;
  int embed_dim = 16;
  int samples_per_class = 400;
  double cluster_std = 0.1;
  double mean_scale = 2.0;
  std::vector<int> similar_group;
  double similar_spread = 0.6;
  double embed_scale = 6.0;
  double holdout_fraction = 0.2;
  std::uint64_t seed = 17;

  void validate() const {
    if (num_classes < 2) throw ConfigError("dataset: need >= 2 classes");
    if (data_dim < num_classes)
      throw ConfigError("dataset: data_dim must be >= num_classes");
    if (embed_dim < num_classes)
      throw ConfigError("dataset: embed_dim must be >= num_classes");
    if (samples_per_class < 5) throw ConfigError("dataset: too few samples");
    if (cluster_std <= 0.0) throw ConfigError("dataset: cluster_std must be > 0");
    if (holdout_fraction <= 0.0 || holdout_fraction >= 0.5)
      throw ConfigError("dataset: holdout_fraction outside (0, 0.5)");
    for (int k : similar_group)
      if (k < 0 || k >= num_classes)
        throw ConfigError("dataset: similar_group class out of range");
  }

  Json to_json() const {
    Json j;
    j["num_classes"] = num_classes;
    j["data_dim"] = data_dim;
    j["embed_dim"] = embed_dim;
    j["samples_per_class"] = samples_per_class;
    j["cluster_std"] = cluster_std;
    j["mean_scale"] = mean_scale;
    j["similar_group"] = similar_group;
    j["similar_spread"] = similar_spread;
    j["embed_scale"] = embed_scale;
    j["holdout_fraction"] = holdout_fraction;
    j["seed"] = seed;
    return j;
  }

  static DatasetSpec from_json(const Json& j) {
    DatasetSpec s;
    s.num_classes = j.value("num_classes", s.num_classes);
    s.data_dim = j.value("data_dim", s.data_dim);
    s.embed_dim = j.value("embed_dim", s.embed_dim);
    s.samples_per_class = j.value("samples_per_class", s.samples_per_class);
    s.cluster_std = j.value("cluster_std", s.cluster_std);
    s.mean_scale = j.value("mean_scale", s.mean_scale);
    s.similar_group = j.value("similar_group", s.similar_group);
    s.similar_spread = j.value("similar_spread", s.similar_spread);
    s.embed_scale = j.value("embed_scale", s.embed_scale);
    s.holdout_fraction = j.value("holdout_fraction", s.holdout_fraction);
    s.seed = j.value("seed", s.seed);
    s.validate();
    return s;
  }
};

struct ToyDataset {
  Mat x;                    // data_dim x N
  std::vector<int> labels;  // N
  std::vector<int> train_idx;
  std::vector<int> holdout_idx;

  int size() const { return static_cast<int>(labels.size()); }
};

// Points with labels plus the per-class embedding table the labels index.
struct LabeledData {
  Mat x;
  std::vector<int> labels;
  std::vector<Vec> embeddings;
};

// The full deterministic setup derived from a DatasetSpec: ground-truth
// mixture (also usable as the analytic oracle backend), the class embedding
// table, and a sampled labeled dataset.
struct ToyWorld {
  DatasetSpec spec;
  MixtureSpec mixture;
  Mat class_embeddings;  // embed_dim x num_classes
  ToyDataset dataset;

  ConditionEmbedding embedding_of(int cls) const {
    if (cls < 0 || cls >= spec.num_classes)
      throw InputError("embedding_of: class out of range");
    return ConditionEmbedding(class_embeddings.col(cls),
                              "class:" + std::to_string(cls));
  }
};

namespace detail {

// Thin orthonormal basis from a seeded Gaussian matrix, sign-fixed on the
// diagonal of R so the result is stable.
inline Mat random_orthonormal(int rows, int cols, Rng& rng) {
  Mat g = rng.normal_mat(rows, cols);
  Eigen::HouseholderQR<Mat> qr(g);
  Mat q = qr.householderQ() * Mat::Identity(rows, cols);
  const Mat r = qr.matrixQR().topRows(cols).triangularView<Eigen::Upper>();
  for (int c = 0; c < cols; ++c)
    if (r(c, c) < 0.0) q.col(c) = -q.col(c);
  return q;
}

}  // namespace detail

inline ToyWorld make_world(const DatasetSpec& spec) {
  spec.validate();
  ToyWorld world;
  world.spec = spec;

  Rng geo_rng(spec.seed, /*stream=*/1);
  const Mat dirs =
      detail::random_orthonormal(spec.data_dim, spec.num_classes, geo_rng);

  Mat means(spec.data_dim, spec.num_classes);
  for (int k = 0; k < spec.num_classes; ++k)
    means.col(k) = spec.mean_scale * dirs.col(k);
  // collapse the similar group around its first member, offset along the
  // members' own (mutually orthogonal) directions
  if (world.spec.similar_group.size() >= 2) {
    const Vec center = means.col(world.spec.similar_group.front());
    for (std::size_t i = 1; i < world.spec.similar_group.size(); ++i) {
      const int k = world.spec.similar_group[i];
      means.col(k) = center + spec.similar_spread * dirs.col(k);
    }
  }

  Rng emb_rng(spec.seed, /*stream=*/2);
  const Mat cond_map =
      detail::random_orthonormal(spec.embed_dim, spec.num_classes, emb_rng);

  world.mixture.means = means;
  world.mixture.variances =
      Mat::Constant(spec.data_dim, spec.num_classes,
                    spec.cluster_std * spec.cluster_std);
  world.mixture.weights =
      Vec::Constant(spec.num_classes, 1.0 / spec.num_classes);
  world.mixture.cond_map = cond_map;
  world.mixture.validate();

  world.class_embeddings = spec.embed_scale * cond_map;

  Rng data_rng(spec.seed, /*stream=*/3);
  const int n = spec.num_classes * spec.samples_per_class;
  world.dataset.x.resize(spec.data_dim, n);
  world.dataset.labels.resize(n);
  int at = 0;
  for (int k = 0; k < spec.num_classes; ++k) {
    for (int i = 0; i < spec.samples_per_class; ++i, ++at) {
      world.dataset.x.col(at) =
          means.col(k) + spec.cluster_std * data_rng.normal_vec(spec.data_dim);
      world.dataset.labels[at] = k;
    }
  }
  const int stride = std::max(2, static_cast<int>(std::lround(1.0 / spec.holdout_fraction)));
  for (int i = 0; i < n; ++i) {
    if (i % stride == 0)
      world.dataset.holdout_idx.push_back(i);
    else
      world.dataset.train_idx.push_back(i);
  }
  return world;
}

// Extra prompt vocabulary around one concept: synonym embeddings (distinct
// directions that also elicit the concept; the stand-in for a task's word
// list) and one held-out adversarial embedding near the concept embedding
// (the stand-in for an adversarial benchmark prompt). `ball_radius` is the
// neighborhood of the concept embedding the base model is taught to respond
// to, which is what keeps the adversarial probe effective.
struct ConceptVocabulary {
  int concept_id = -1;
  std::vector<Vec> synonyms;
  Vec adversarial;
  double ball_radius = 1.5;

  std::string synonym_tag(int i) const {
    return "syn:" + std::to_string(concept_id) + ":" + std::to_string(i);
  }
  std::string adversarial_tag() const {
    return "adv:" + std::to_string(concept_id);
  }
};

inline ConceptVocabulary make_concept_vocab(const ToyWorld& world,
                                            int concept_id, int num_synonyms,
                                            double ball_radius,
                                            std::uint64_t seed) {
  if (concept_id < 0 || concept_id >= world.spec.num_classes)
    throw ConfigError("concept vocabulary: concept out of range");
  if (num_synonyms < 1) throw ConfigError("concept vocabulary: need >= 1 synonym");
  ConceptVocabulary v;
  v.concept_id = concept_id;
  v.ball_radius = ball_radius;
  Rng rng(seed, /*stream=*/4);
  // synonyms: independent directions at class-embedding scale
  for (int i = 0; i < num_synonyms; ++i) {
    Vec dir = rng.normal_vec(world.spec.embed_dim);
    dir.normalize();
    v.synonyms.push_back(world.spec.embed_scale * dir);
  }
  // adversarial probe: a fixed draw on the ball around the concept embedding
  Vec off = rng.normal_vec(world.spec.embed_dim);
  off.normalize();
  v.adversarial = world.class_embeddings.col(concept_id) + ball_radius * off;
  return v;
}

// Training-split points of every class except `exclude_class` (pass -1 to
// keep all), with the class embedding table attached.
inline LabeledData labeled_subset(const ToyWorld& world, int exclude_class) {
  LabeledData out;
  std::vector<int> keep;
  for (int idx : world.dataset.train_idx)
    if (world.dataset.labels[idx] != exclude_class) keep.push_back(idx);
  if (keep.empty()) throw DataError("labeled_subset: nothing left after filter");
  out.x.resize(world.spec.data_dim, static_cast<Eigen::Index>(keep.size()));
  out.labels.resize(keep.size());
  for (std::size_t i = 0; i < keep.size(); ++i) {
    out.x.col(static_cast<Eigen::Index>(i)) = world.dataset.x.col(keep[i]);
    out.labels[i] = world.dataset.labels[keep[i]];
  }
  for (int k = 0; k < world.spec.num_classes; ++k)
    out.embeddings.push_back(world.class_embeddings.col(k));
  return out;
}

}  // namespace safediff
