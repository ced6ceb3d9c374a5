#pragma once

#include <string>
#include <vector>

#include "safediff/checkpoint.hpp"
#include "safediff/eval.hpp"
#include "safediff/guidance.hpp"

namespace safediff {

struct InversionConfig {
  double learning_rate = 5e-3;
  int steps = 3000;
  int batch_size = 1;
  double init_noise = 0.01;  // sigma of the gaussian jitter on the init
  std::uint64_t seed = 11;

  void validate() const {
    if (steps < 0) throw ConfigError("inversion: steps must be >= 0");
    if (learning_rate <= 0.0) throw ConfigError("inversion: bad learning rate");
    if (batch_size < 1) throw ConfigError("inversion: bad batch size");
    if (init_noise < 0.0) throw ConfigError("inversion: bad init noise");
  }

  Json to_json() const {
    Json j;
    j["learning_rate"] = learning_rate;
    j["steps"] = steps;
    j["batch_size"] = batch_size;
    j["init_noise"] = init_noise;
    return j;
  }

  static InversionConfig from_json(const Json& j) {
    InversionConfig c;
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.steps = j.value("steps", c.steps);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.init_noise = j.value("init_noise", c.init_noise);
    c.validate();
    return c;
  }
};

// Images of the (proxy) harmful concept, filtered by classifier confidence.
struct MaliciousDataset {
  Mat images;  // data_dim x n
  int concept_id = -1;
  double filter_threshold = 0.75;
  std::string generator_id;  // checkpoint the images came from
  std::vector<double> scores;

  int size() const { return static_cast<int>(images.cols()); }

  void validate() const {
    if (images.cols() < 1) throw DataError("MaliciousDataset: empty");
    if (static_cast<int>(scores.size()) != size())
      throw InputError("MaliciousDataset: score count mismatch");
    for (double s : scores)
      if (s < filter_threshold)
        throw InputError("MaliciousDataset: member below filter threshold");
  }

  Json to_json() const {
    Json j;
    j["images"] = mat_to_json(images);
    j["concept_id"] = concept_id;
    j["filter_threshold"] = filter_threshold;
    j["generator_id"] = generator_id;
    j["scores"] = scores;
    return j;
  }

  static MaliciousDataset from_json(const Json& j) {
    MaliciousDataset d;
    d.images = mat_from_json(j.at("images"));
    d.concept_id = j.at("concept_id").get<int>();
    d.filter_threshold = j.at("filter_threshold").get<double>();
    d.generator_id = j.value("generator_id", std::string{});
    d.scores = j.at("scores").get<std::vector<double>>();
    d.validate();
    return d;
  }
};

// Recovered embedding for a special token (default "<s>").
struct ConceptToken {
  std::string name = "<s>";
  ConditionEmbedding embedding;
  std::string source_checkpoint;
  std::string config_digest;
  std::vector<double> loss_trace;

  Json to_json() const {
    Json j;
    j["name"] = name;
    j["dim"] = embedding.dim();
    j["embedding"] = vec_to_json(embedding.v);
    j["source_checkpoint"] = source_checkpoint;
    j["config_digest"] = config_digest;
    j["loss_trace"] = loss_trace;
    return j;
  }

  static ConceptToken from_json(const Json& j) {
    ConceptToken t;
    t.name = j.at("name").get<std::string>();
    t.embedding = ConditionEmbedding(vec_from_json(j.at("embedding")),
                                     t.name);
    if (j.at("dim").get<Eigen::Index>() != t.embedding.dim())
      throw IoError("ConceptToken: dim field disagrees with embedding");
    t.source_checkpoint = j.value("source_checkpoint", std::string{});
    t.config_digest = j.value("config_digest", std::string{});
    t.loss_trace = j.value("loss_trace", std::vector<double>{});
    return t;
  }

  void save(const std::string& path) const { write_json_file(path, to_json()); }
  static ConceptToken load(const std::string& path) {
    return from_json(read_json_file(path));
  }
};

// Generates n_raw conditional samples of the concept from `generator` and
// keeps those the classifier scores at or above the threshold.
inline MaliciousDataset build_malicious_dataset(
    const Checkpoint& generator, int concept_id, int n_raw,
    const SafetyClassifier& clf, double threshold = 0.75,
    int min_survivors = 10, double lambda = 7.5, std::uint64_t seed_base = 0,
    const std::string& generator_id = "base") {
  if (n_raw < 1) throw InputError("build_malicious_dataset: n_raw < 1");
  clf.require_quality();
  const auto backend = generator.make_backend();
  const auto c_p = generator.embedding("class:" + std::to_string(concept_id));
  const auto guidance = make_cfg_guidance(c_p, CfgConfig{lambda});

  std::vector<Vec> kept;
  std::vector<double> scores;
  for (int i = 0; i < n_raw; ++i) {
    Vec x = sample(*backend, guidance, generator.schedule,
                   seed_base + static_cast<std::uint64_t>(i));
    const double score = clf.predict_proba(x)[concept_id];
    if (score >= threshold) {
      kept.push_back(std::move(x));
      scores.push_back(score);
    }
  }
  if (static_cast<int>(kept.size()) < min_survivors)
    throw DataError("build_malicious_dataset: only " +
                    std::to_string(kept.size()) + " of " + std::to_string(n_raw) +
                    " samples survive the " + std::to_string(threshold) +
                    " filter (need >= " + std::to_string(min_survivors) + ")");

  MaliciousDataset out;
  out.images.resize(generator.data_dim(), static_cast<Eigen::Index>(kept.size()));
  for (std::size_t i = 0; i < kept.size(); ++i)
    out.images.col(static_cast<Eigen::Index>(i)) = kept[i];
  out.concept_id = concept_id;
  out.filter_threshold = threshold;
  out.generator_id = generator_id;
  out.scores = std::move(scores);
  out.validate();
  return out;
}

// Embedding initialization: mean of all benign class embeddings plus small
// gaussian jitter.
inline Vec inversion_init(const Checkpoint& frozen, int target_concept,
                          double noise_sigma, Rng& rng) {
  Vec acc = Vec::Zero(frozen.embed_dim());
  int n = 0;
  for (const auto& [tag, emb] : frozen.vocab) {
    if (tag == "class:" + std::to_string(target_concept)) continue;
    if (tag.rfind("class:", 0) != 0) continue;
    acc += emb;
    ++n;
  }
  if (n == 0) throw DataError("inversion_init: no benign class embeddings");
  acc /= double(n);
  return acc + noise_sigma * rng.normal_vec(acc.size());
}

// Optimizes only the condition embedding against the frozen checkpoint:
//   c_* = argmin_c  E_{x, eps, t} || eps - eps_theta(z_t, c, t) ||^2
// Parameters are digest-checked to be bit-identical before and after.
inline ConceptToken invert_concept(const Checkpoint& frozen,
                                   const MaliciousDataset& data,
                                   const InversionConfig& conf,
                                   const std::string& token_name = "<s>") {
  conf.validate();
  data.validate();
  const std::string digest_before = frozen.param_digest();
  const auto backend = frozen.make_backend();
  if (backend->data_dim() != data.images.rows())
    throw InputError("invert_concept: data dimension mismatch");

  Rng rng(conf.seed, /*stream=*/51);
  Vec c = inversion_init(frozen, data.concept_id, conf.init_noise, rng);
  Adam opt(c.size(), conf.learning_rate);
  const auto& schedule = frozen.schedule;
  const int dz = backend->data_dim();

  ConceptToken token;
  token.name = token_name;
  token.loss_trace.reserve(conf.steps);

  for (int step = 0; step < conf.steps; ++step) {
    Vec grad = Vec::Zero(c.size());
    double loss = 0.0;
    const ConditionEmbedding cond(c, token_name);
    for (int b = 0; b < conf.batch_size; ++b) {
      const int idx = rng.uniform_int(0, data.size() - 1);
      const int t = rng.uniform_int(1, schedule.total_steps());
      const Vec eps = rng.normal_vec(dz);
      const Vec z_t = forward_noise_at(data.images.col(idx),
                                       schedule.alpha_bar(t), eps);
      const Vec pred = backend->predict(z_t, &cond, t);
      const Vec diff = pred - eps;
      loss += diff.squaredNorm();
      grad += backend->condition_vjp(z_t, cond, t, 2.0 * diff);
    }
    loss /= double(conf.batch_size);
    grad /= double(conf.batch_size);
    if (!std::isfinite(loss))
      throw TrainingError("invert_concept: NaN loss at step " +
                          std::to_string(step));
    token.loss_trace.push_back(loss);
    opt.step(c, grad);
  }

  if (frozen.param_digest() != digest_before)
    throw TrainingError("invert_concept: frozen checkpoint was mutated");

  token.embedding = ConditionEmbedding(std::move(c), token_name);
  token.config_digest = sha256_hex(conf.to_json().dump());
  return token;
}

// Packs inverted tokens into the column set consumed by the guidance module.
inline NegativeEmbeddingSet build_negative_set(
    const std::vector<ConceptToken>& tokens) {
  if (tokens.empty()) throw InputError("build_negative_set: no tokens");
  NegativeEmbeddingSet negs;
  negs.source = NegativeSource::kInvertedConcept;
  for (const auto& t : tokens) negs.columns.push_back(t.embedding);
  negs.validate();
  return negs;
}

// Re-tags a token for use on another checkpoint; the embedding itself
// transfers verbatim.
inline ConceptToken transfer_embedding(const ConceptToken& token,
                                       const Checkpoint& target,
                                       const std::string& target_id) {
  if (token.embedding.dim() != target.embed_dim())
    throw InputError("transfer_embedding: embedding dimension mismatch");
  ConceptToken out = token;
  out.source_checkpoint = target_id;
  return out;
}

}  // namespace safediff
