#pragma once

#include <string>
#include <utility>
#include <vector>

#include "safediff/checkpoint.hpp"
#include "safediff/dataset.hpp"
#include "safediff/diffusion.hpp"
#include "safediff/guidance.hpp"

namespace safediff {

enum class UnlearnMethod { kEsd, kDuo };

inline const char* to_string(UnlearnMethod m) {
  return m == UnlearnMethod::kEsd ? "esd" : "duo";
}

inline UnlearnMethod unlearn_method_from_string(const std::string& s) {
  if (s == "esd") return UnlearnMethod::kEsd;
  if (s == "duo") return UnlearnMethod::kDuo;
  throw ConfigError("unknown unlearn method: " + s);
}

struct UnlearnConfig {
  UnlearnMethod method = UnlearnMethod::kDuo;
  int target_concept = 0;
  double beta = 1.0;  // DUO output-preservation weight
  double eta = 1.0;   // ESD negative-guidance strength
  int steps = 1500;
  double learning_rate = 1e-3;
  int batch_size = 64;
  double pref_sharpness = 0.1;   // slope on the pairwise eps-MSE gap
  std::uint64_t seed = 5;

  void validate() const {
    if (beta < 0.0) throw ConfigError("unlearn: beta must be >= 0");
    if (steps < 1) throw ConfigError("unlearn: steps must be >= 1");
    if (learning_rate <= 0.0) throw ConfigError("unlearn: bad learning rate");
    if (batch_size < 1) throw ConfigError("unlearn: bad batch size");
    if (pref_sharpness <= 0.0) throw ConfigError("unlearn: bad pref_sharpness");
  }
};

// Matched (unsafe, safe) example pairs sharing seeds and noising.
struct PairedDataset {
  std::vector<std::pair<Vec, Vec>> pairs;

  void validate() const {
    if (pairs.empty()) throw DataError("PairedDataset: empty");
    for (const auto& [u, s] : pairs)
      if (u.size() != s.size())
        throw InputError("PairedDataset: pair shape mismatch");
  }
};

// Generates matched pairs from a checkpoint: for each seed, one conditional
// sample of the unsafe concept and one of the safe concept, same z_T.
inline PairedDataset make_paired_dataset(const Checkpoint& ckpt,
                                         const ConditionEmbedding& unsafe_c,
                                         const ConditionEmbedding& safe_c,
                                         int num_pairs, double lambda,
                                         std::uint64_t seed_base) {
  if (num_pairs < 1) throw InputError("make_paired_dataset: num_pairs < 1");
  const auto backend = ckpt.make_backend();
  const CfgConfig cfg{lambda};
  const auto g_unsafe = make_cfg_guidance(unsafe_c, cfg);
  const auto g_safe = make_cfg_guidance(safe_c, cfg);
  PairedDataset out;
  out.pairs.reserve(num_pairs);
  for (int i = 0; i < num_pairs; ++i) {
    const std::uint64_t seed = seed_base + static_cast<std::uint64_t>(i);
    out.pairs.emplace_back(sample(*backend, g_unsafe, ckpt.schedule, seed),
                           sample(*backend, g_safe, ckpt.schedule, seed));
  }
  out.validate();
  return out;
}

namespace detail {

inline ToyNet clone_trainable_net(const Checkpoint& base) {
  if (!base.net)
    throw InputError("unlearning requires a toy-network checkpoint");
  return *base.net;
}

inline void adam_update(ToyNet& net, Adam& opt, const ToyNet::Params& grads) {
  Vec flat = net.flatten();
  opt.step(flat, ToyNet::flatten_params(grads));
  net.unflatten(flat);
}

}  // namespace detail

// Concept erasure in the ESD style: the trainable net's concept-conditional
// output is regressed onto the frozen base's negatively-guided target
//   eps_base(z_t, t) - eta * (eps_base(z_t, c, t) - eps_base(z_t, t))
// over noised draws from `probe_data`.
inline Checkpoint esd_finetune(const Checkpoint& base,
                               const ConditionEmbedding& target,
                               const UnlearnConfig& conf,
                               const Mat& probe_data) {
  conf.validate();
  if (conf.method != UnlearnMethod::kEsd)
    throw ConfigError("esd_finetune: config method must be esd");
  if (probe_data.cols() < 1) throw DataError("esd_finetune: empty probe data");

  ToyNet net = detail::clone_trainable_net(base);
  const ToyNet& frozen = *base.net;
  const NoiseSchedule& schedule = base.schedule;
  Adam opt(net.param_count(), conf.learning_rate);
  Rng rng(conf.seed, /*stream=*/31);
  // Only the conditioning pathway trains (the desk analog of restricting a
  // concept erasure to the cross-attention weights); the z pathway keeps the
  // base behavior for other prompts.
  const Vec mask = net.conditioning_mask();

  const int dz = net.config().data_dim;
  const int B = conf.batch_size;
  Mat z(dz, B), eps(dz, B);
  Mat cond_target(net.config().embed_dim, B);
  for (int i = 0; i < B; ++i) cond_target.col(i) = target.v;
  const Mat cond_null = Mat::Zero(net.config().embed_dim, B);
  std::vector<int> ts(B);

  for (int step = 0; step < conf.steps; ++step) {
    for (int i = 0; i < B; ++i) {
      const int idx = rng.uniform_int(0, static_cast<int>(probe_data.cols()) - 1);
      const int t = rng.uniform_int(1, schedule.total_steps());
      eps.col(i) = rng.normal_vec(dz);
      z.col(i) = forward_noise_at(probe_data.col(idx), schedule.alpha_bar(t),
                                  eps.col(i));
      ts[i] = t;
    }
    const Mat base_u = frozen.forward(z, cond_null, ts);
    const Mat base_c = frozen.forward(z, cond_target, ts);
    const Mat reg_target = base_u - conf.eta * (base_c - base_u);

    ToyNet::Trace trace;
    const Mat pred = net.forward(z, cond_target, ts, &trace);
    const Mat diff = pred - reg_target;
    const double loss = diff.squaredNorm() / double(B * dz);
    if (!std::isfinite(loss))
      throw TrainingError("esd_finetune: NaN loss at step " + std::to_string(step));
    ToyNet::Params grads = net.zero_grads();
    net.backward(trace, (2.0 / double(B * dz)) * diff, &grads);
    Vec g = ToyNet::flatten_params(grads).cwiseProduct(mask);
    Vec flat = net.flatten();
    opt.step(flat, g);
    net.unflatten(flat);
  }

  Provenance prov;
  prov.type = "unlearned";
  prov.method = "esd";
  prov.eta = conf.eta;
  prov.seed = conf.seed;
  prov.parent = base.provenance.type;
  return Checkpoint::toy(std::move(net), schedule, base.vocab, prov);
}

// Preference-style unlearning: a logistic pairwise loss pushes the denoiser
// to fit the safe member of each pair better than the unsafe member, under
// conditions drawn from the unsafe prompt list (the concept tag and its
// synonyms), plus beta-weighted output preservation against the frozen base
// on benign data.
inline Checkpoint duo_finetune(
    const Checkpoint& base, const PairedDataset& paired,
    const LabeledData& benign,
    const std::vector<ConditionEmbedding>& unsafe_prompts,
    const UnlearnConfig& conf) {
  conf.validate();
  if (conf.method != UnlearnMethod::kDuo)
    throw ConfigError("duo_finetune: config method must be duo");
  paired.validate();
  if (benign.x.cols() < 1) throw DataError("duo_finetune: empty benign data");
  if (unsafe_prompts.empty())
    throw InputError("duo_finetune: empty unsafe prompt list");

  ToyNet net = detail::clone_trainable_net(base);
  const ToyNet& frozen = *base.net;
  const NoiseSchedule& schedule = base.schedule;
  Adam opt(net.param_count(), conf.learning_rate);
  Rng rng(conf.seed, /*stream=*/32);
  // Like the erasure path, only the conditioning pathway trains; the frozen
  // z trunk keeps prompt-free behavior shared with the base model, which is
  // what lets recovered embeddings transfer across checkpoints.
  const Vec mask = net.conditioning_mask();

  const int dz = net.config().data_dim;
  const int D = net.config().embed_dim;
  const int P = std::min<int>(conf.batch_size,
                              static_cast<int>(paired.pairs.size()));
  const int Bb = conf.batch_size;

  Mat zu(dz, P), zs(dz, P), eps(dz, P), cond_t(D, P);
  std::vector<int> ts(P);

  Mat zb(dz, Bb), epsb(dz, Bb), condb(D, Bb);
  std::vector<int> tsb(Bb);
  double emb_scale = 0.0;
  for (const auto& e : benign.embeddings)
    emb_scale = std::max(emb_scale, e.norm());
  if (emb_scale == 0.0) emb_scale = 1.0;

  for (int step = 0; step < conf.steps; ++step) {
    // --- preference term on matched pairs ---
    for (int i = 0; i < P; ++i) {
      const int idx = rng.uniform_int(0, static_cast<int>(paired.pairs.size()) - 1);
      const int t = rng.uniform_int(1, schedule.total_steps());
      eps.col(i) = rng.normal_vec(dz);
      const double ab = schedule.alpha_bar(t);
      zu.col(i) = forward_noise_at(paired.pairs[idx].first, ab, eps.col(i));
      zs.col(i) = forward_noise_at(paired.pairs[idx].second, ab, eps.col(i));
      cond_t.col(i) =
          unsafe_prompts[rng.uniform_int(
                             0, static_cast<int>(unsafe_prompts.size()) - 1)]
              .v;
      ts[i] = t;
    }
    ToyNet::Trace trace_u, trace_s;
    const Mat pred_u = net.forward(zu, cond_t, ts, &trace_u);
    const Mat pred_s = net.forward(zs, cond_t, ts, &trace_s);
    const Mat du = pred_u - eps;
    const Mat ds = pred_s - eps;

    const double kappa = conf.pref_sharpness;
    double pref_loss = 0.0;
    Mat dpred_u(dz, P), dpred_s(dz, P);
    for (int i = 0; i < P; ++i) {
      const double gap =
          kappa * (du.col(i).squaredNorm() - ds.col(i).squaredNorm());
      const double sig_neg = logistic(-gap);
      pref_loss += -std::log(std::max(1e-300, logistic(gap)));
      // d(-log sigmoid(gap))/dgap = -sigmoid(-gap)
      dpred_u.col(i) = (-sig_neg * kappa) * 2.0 * du.col(i) / double(P);
      dpred_s.col(i) = (sig_neg * kappa) * 2.0 * ds.col(i) / double(P);
    }
    pref_loss /= double(P);

    // --- output-preservation term over benign data ---
    // Conditions range over the null embedding, the full vocabulary (target
    // included) and random embeddings, so the regularizer pins the whole
    // conditional field to the base outside the preference zone; beta sets
    // how hard that pin fights the unlearning.
    for (int i = 0; i < Bb; ++i) {
      const int idx = rng.uniform_int(0, static_cast<int>(benign.x.cols()) - 1);
      const int t = rng.uniform_int(1, schedule.total_steps());
      epsb.col(i) = rng.normal_vec(dz);
      zb.col(i) = forward_noise_at(benign.x.col(idx), schedule.alpha_bar(t),
                                   epsb.col(i));
      const double pick = rng.uniform();
      if (pick < 0.1) {
        condb.col(i).setZero();
      } else if (pick < 0.4) {
        Vec dir = rng.normal_vec(D);
        dir.normalize();
        condb.col(i) = (emb_scale * (0.3 + 1.7 * rng.uniform())) * dir;
      } else {
        const int k = rng.uniform_int(
            0, static_cast<int>(benign.embeddings.size()) - 1);
        condb.col(i) = benign.embeddings[k];
      }
      tsb[i] = t;
    }
    const Mat keep_target = frozen.forward(zb, condb, tsb);
    ToyNet::Trace trace_b;
    const Mat pred_b = net.forward(zb, condb, tsb, &trace_b);
    const Mat diffb = pred_b - keep_target;
    const double preserve_loss = diffb.squaredNorm() / double(Bb * dz);

    const double loss = pref_loss + conf.beta * preserve_loss;
    if (!std::isfinite(loss))
      throw TrainingError("duo_finetune: NaN loss at step " + std::to_string(step));

    ToyNet::Params grads = net.zero_grads();
    net.backward(trace_u, dpred_u, &grads);
    net.backward(trace_s, dpred_s, &grads);
    net.backward(trace_b, (conf.beta * 2.0 / double(Bb * dz)) * diffb, &grads);
    Vec g = ToyNet::flatten_params(grads).cwiseProduct(mask);
    Vec flat = net.flatten();
    opt.step(flat, g);
    net.unflatten(flat);
  }

  Provenance prov;
  prov.type = "unlearned";
  prov.method = "duo";
  prov.beta = conf.beta;
  prov.seed = conf.seed;
  prov.parent = base.provenance.type;
  return Checkpoint::toy(std::move(net), schedule, base.vocab, prov);
}

inline Checkpoint duo_finetune(const Checkpoint& base,
                               const PairedDataset& paired,
                               const LabeledData& benign,
                               const ConditionEmbedding& target,
                               const UnlearnConfig& conf) {
  return duo_finetune(base, paired, benign,
                      std::vector<ConditionEmbedding>{target}, conf);
}

}  // namespace safediff
