#pragma once

#include <string>

#include "safediff/checkpoint.hpp"
#include "safediff/dataset.hpp"
#include "safediff/diffusion.hpp"

namespace safediff {

struct BaseTrainConfig {
  int steps = 6000;
  double learning_rate = 2e-3;
  int batch_size = 128;
  double uncond_prob = 0.1;      // condition dropout for CFG training
  double offmanifold_prob = 0.05;  // random-embedding draws mapped to the
                                   // average (unconditional) behavior
  double mse_bar = 0.1;      // per-element eps-MSE the final model must beat
  int eval_draws = 4000;
  std::uint64_t seed = 1;
  int hidden = 96;
  int layers = 3;
  int cond_hidden = 48;
  int time_freqs = 8;

  void validate() const {
    if (steps < 1) throw ConfigError("base_training: steps must be >= 1");
    if (learning_rate <= 0.0) throw ConfigError("base_training: bad learning rate");
    if (batch_size < 1) throw ConfigError("base_training: bad batch size");
    if (uncond_prob < 0.0 || uncond_prob >= 1.0)
      throw ConfigError("base_training: uncond_prob outside [0, 1)");
  }

  Json to_json() const {
    Json j;
    j["steps"] = steps;
    j["learning_rate"] = learning_rate;
    j["batch_size"] = batch_size;
    j["uncond_prob"] = uncond_prob;
    j["offmanifold_prob"] = offmanifold_prob;
    j["mse_bar"] = mse_bar;
    j["eval_draws"] = eval_draws;
    j["hidden"] = hidden;
    j["layers"] = layers;
    j["cond_hidden"] = cond_hidden;
    j["time_freqs"] = time_freqs;
    return j;
  }

  static BaseTrainConfig from_json(const Json& j) {
    BaseTrainConfig c;
    c.steps = j.value("steps", c.steps);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.uncond_prob = j.value("uncond_prob", c.uncond_prob);
    c.offmanifold_prob = j.value("offmanifold_prob", c.offmanifold_prob);
    c.mse_bar = j.value("mse_bar", c.mse_bar);
    c.eval_draws = j.value("eval_draws", c.eval_draws);
    c.hidden = j.value("hidden", c.hidden);
    c.layers = j.value("layers", c.layers);
    c.cond_hidden = j.value("cond_hidden", c.cond_hidden);
    c.time_freqs = j.value("time_freqs", c.time_freqs);
    c.validate();
    return c;
  }
};

// Per-element eps prediction error of a net over fresh noisings of the
// held-out split, conditioning on the true class embedding.
inline double epsilon_mse(const ToyNet& net, const ToyWorld& world,
                          const NoiseSchedule& schedule, int draws,
                          std::uint64_t seed) {
  Rng rng(seed, /*stream=*/21);
  const int dz = world.spec.data_dim;
  const auto& hold = world.dataset.holdout_idx;
  if (hold.empty()) throw DataError("epsilon_mse: empty holdout split");

  const int chunk = 256;
  double total = 0.0;
  long count = 0;
  for (int done = 0; done < draws; done += chunk) {
    const int b = std::min(chunk, draws - done);
    Mat z(dz, b), cond(world.spec.embed_dim, b), eps(dz, b);
    std::vector<int> ts(b);
    for (int i = 0; i < b; ++i) {
      const int idx = hold[rng.uniform_int(0, static_cast<int>(hold.size()) - 1)];
      const int t = rng.uniform_int(1, schedule.total_steps());
      const Vec e = rng.normal_vec(dz);
      z.col(i) = forward_noise_at(world.dataset.x.col(idx),
                                  schedule.alpha_bar(t), e);
      cond.col(i) = world.class_embeddings.col(world.dataset.labels[idx]);
      eps.col(i) = e;
      ts[i] = t;
    }
    const Mat pred = net.forward(z, cond, ts);
    total += (pred - eps).squaredNorm();
    count += static_cast<long>(b) * dz;
  }
  return total / double(count);
}

// Standard eps-matching training of the conditional denoiser on the toy
// dataset, with condition dropout so the same net serves the unconditional
// branch of CFG. When a ConceptVocabulary is given, samples of that concept
// are conditioned on a rotation of {class embedding, synonyms, draws from
// the eliciting ball} so every prompt voice for the concept works on the
// base model. Throws TrainingError on NaN loss or a missed final bar.
inline Checkpoint train_base(const ToyWorld& world,
                             const NoiseSchedule& schedule,
                             const BaseTrainConfig& conf,
                             const ConceptVocabulary* concept_vocab = nullptr) {
  conf.validate();
  ToyNetConfig net_cfg;
  net_cfg.data_dim = world.spec.data_dim;
  net_cfg.embed_dim = world.spec.embed_dim;
  net_cfg.hidden = conf.hidden;
  net_cfg.layers = conf.layers;
  net_cfg.cond_hidden = conf.cond_hidden;
  net_cfg.time_freqs = conf.time_freqs;

  ToyNet net(net_cfg, conf.seed);
  Adam opt(net.param_count(), conf.learning_rate);
  Rng rng(conf.seed, /*stream=*/22);

  const int dz = world.spec.data_dim;
  const int B = conf.batch_size;
  const auto& train = world.dataset.train_idx;
  if (train.empty()) throw DataError("train_base: empty train split");

  Mat z(dz, B), cond(world.spec.embed_dim, B), eps(dz, B);
  std::vector<int> ts(B);
  for (int step = 0; step < conf.steps; ++step) {
    for (int i = 0; i < B; ++i) {
      int idx = train[rng.uniform_int(0, static_cast<int>(train.size()) - 1)];
      const double pick = rng.uniform();
      if (pick < conf.uncond_prob) {
        cond.col(i).setZero();
      } else if (pick < conf.uncond_prob + conf.offmanifold_prob) {
        // nonsense prompts at any radius act like the unconditional model
        Vec dir = rng.normal_vec(world.spec.embed_dim);
        dir.normalize();
        cond.col(i) =
            (world.spec.embed_scale * (0.3 + 1.7 * rng.uniform())) * dir;
      } else if (concept_vocab &&
                 world.dataset.labels[idx] == concept_vocab->concept_id) {
        const double u = rng.uniform();
        if (u < 0.25) {
          cond.col(i) = world.class_embeddings.col(world.dataset.labels[idx]);
        } else if (u < 0.5) {
          const int s = rng.uniform_int(
              0, static_cast<int>(concept_vocab->synonyms.size()) - 1);
          cond.col(i) = concept_vocab->synonyms[s];
        } else {
          Vec dir = rng.normal_vec(world.spec.embed_dim);
          dir.normalize();
          cond.col(i) = world.class_embeddings.col(world.dataset.labels[idx]) +
                        (concept_vocab->ball_radius * rng.uniform()) * dir;
        }
      } else {
        cond.col(i) = world.class_embeddings.col(world.dataset.labels[idx]);
      }
      const int t = rng.uniform_int(1, schedule.total_steps());
      const Vec e = rng.normal_vec(dz);
      z.col(i) = forward_noise_at(world.dataset.x.col(idx),
                                  schedule.alpha_bar(t), e);
      eps.col(i) = e;
      ts[i] = t;
    }
    ToyNet::Trace trace;
    const Mat pred = net.forward(z, cond, ts, &trace);
    const Mat diff = pred - eps;
    const double loss = diff.squaredNorm() / double(B * dz);
    if (!std::isfinite(loss))
      throw TrainingError("train_base: NaN loss at step " + std::to_string(step));
    ToyNet::Params grads = net.zero_grads();
    net.backward(trace, (2.0 / double(B * dz)) * diff, &grads);
    Vec flat = net.flatten();
    opt.step(flat, ToyNet::flatten_params(grads));
    net.unflatten(flat);
  }

  const double final_mse = epsilon_mse(net, world, schedule, conf.eval_draws,
                                       conf.seed + 99);
  if (!(final_mse < conf.mse_bar))
    throw TrainingError("train_base: final eps-MSE " + std::to_string(final_mse) +
                        " misses bar " + std::to_string(conf.mse_bar));

  std::map<std::string, Vec> vocab;
  for (int k = 0; k < world.spec.num_classes; ++k)
    vocab["class:" + std::to_string(k)] = world.class_embeddings.col(k);
  if (concept_vocab) {
    for (std::size_t i = 0; i < concept_vocab->synonyms.size(); ++i)
      vocab[concept_vocab->synonym_tag(static_cast<int>(i))] =
          concept_vocab->synonyms[i];
    vocab[concept_vocab->adversarial_tag()] = concept_vocab->adversarial;
  }

  Provenance prov;
  prov.type = "base";
  prov.seed = conf.seed;
  return Checkpoint::toy(std::move(net), schedule, std::move(vocab), prov);
}

}  // namespace safediff
