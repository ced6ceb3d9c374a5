#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include "helpers.hpp"
#include "safediff/invert.hpp"
#include "safediff/train.hpp"

using namespace safediff;

namespace {

constexpr int kTarget = 3;

struct Fixture {
  ToyWorld world;
  NoiseSchedule schedule;
  Checkpoint base;
  SafetyClassifier clf;

  Fixture()
      : world(make_world(sdtest::small_spec())),
        schedule(NoiseSchedule::cosine(1000, 50)),
        base([this] {
          BaseTrainConfig conf;
          conf.steps = 2500;
          conf.batch_size = 96;
          conf.hidden = 64;
          conf.layers = 3;
          conf.cond_hidden = 32;
          conf.seed = 5;
          return train_base(world, schedule, conf);
        }()),
        clf(train_classifier(world, 123)) {}
};

const Fixture& fixture() {
  static Fixture f;
  return f;
}

// analytic two-component world with a 2-D embedding plane
Checkpoint tiny_analytic() {
  const auto mix = sdtest::tiny_mixture();
  std::map<std::string, Vec> vocab;
  vocab["class:0"] = Vec(2.0 * mix.cond_map.col(0));
  vocab["class:1"] = Vec(2.0 * mix.cond_map.col(1));
  return Checkpoint::analytic(mix, NoiseSchedule::cosine(1000, 50), vocab);
}

MaliciousDataset component_data(const MixtureSpec& mix, int comp, int n,
                                std::uint64_t seed) {
  Rng rng(seed, 61);
  MaliciousDataset d;
  d.images.resize(mix.data_dim(), n);
  for (int i = 0; i < n; ++i) {
    for (int r = 0; r < mix.data_dim(); ++r)
      d.images(r, i) = mix.means(r, comp) +
                       std::sqrt(mix.variances(r, comp)) * rng.normal();
  }
  d.concept_id = comp;
  d.filter_threshold = 0.0;
  d.scores.assign(n, 1.0);
  d.generator_id = "analytic";
  return d;
}

}  // namespace

TEST_CASE("inversion loss gradient matches central differences",
          "[invert][oracle]") {
  const Checkpoint ckpt = tiny_analytic();
  const auto backend = ckpt.make_backend();
  const auto& schedule = ckpt.schedule;

  Rng rng(17);
  for (int probe = 0; probe < 20; ++probe) {
    const int t = rng.uniform_int(1, schedule.total_steps());
    Vec x(2);
    x << 1.5 + 0.2 * rng.normal(), 0.2 * rng.normal();
    const Vec eps = rng.normal_vec(2);
    const Vec z = forward_noise_at(x, schedule.alpha_bar(t), eps);
    const Vec c0 = 3.0 * rng.normal_vec(2);

    const ConditionEmbedding ce(c0);
    const Vec pred = backend->predict(z, &ce, t);
    const Vec grad = backend->condition_vjp(z, ce, t, 2.0 * (pred - eps));

    auto loss = [&](const Vec& c) {
      const ConditionEmbedding cc(c);
      return (backend->predict(z, &cc, t) - eps).squaredNorm();
    };
    const Vec fd = sdtest::finite_diff_grad(loss, c0, 1e-4);
    REQUIRE((grad - fd).norm() <= 1e-3 * std::max(1e-8, fd.norm()));
  }
}

TEST_CASE("inversion recovers the generating component on the analytic "
          "backend", "[invert][oracle][slow]") {
  const Checkpoint ckpt = tiny_analytic();
  const auto data = component_data(ckpt.mixture.value(), 0, 64, 2025);
  const std::string digest = ckpt.param_digest();

  InversionConfig conf;  // paper-budget defaults: lr 5e-3, 3000 steps, batch 1
  conf.seed = 3;
  const ConceptToken token = invert_concept(ckpt, data, conf);

  REQUIRE(ckpt.param_digest() == digest);
  const Vec w = ckpt.mixture->condition_weights(
      &token.embedding);
  REQUIRE(w[0] >= 0.9);

  // brute-force grid over the 2-D embedding plane confirms the basin: every
  // grid point with a clearly lower smoothed loss maps to component 0
  const auto backend = ckpt.make_backend();
  const auto& schedule = ckpt.schedule;
  Rng rng(5);
  const int draws = 128;
  std::vector<Vec> zs(draws), epss(draws);
  std::vector<int> ts(draws);
  for (int i = 0; i < draws; ++i) {
    const int col = rng.uniform_int(0, data.size() - 1);
    ts[i] = rng.uniform_int(1, schedule.total_steps());
    epss[i] = rng.normal_vec(2);
    zs[i] = forward_noise_at(data.images.col(col), schedule.alpha_bar(ts[i]),
                             epss[i]);
  }
  auto grid_loss = [&](const Vec& c) {
    const ConditionEmbedding ce(c);
    double acc = 0.0;
    for (int i = 0; i < draws; ++i)
      acc += (backend->predict(zs[i], &ce, ts[i]) - epss[i]).squaredNorm();
    return acc / draws;
  };

  double best_loss = 1e300;
  Vec best_c = Vec::Zero(2);
  for (double cx = -9.0; cx <= 9.0; cx += 1.5) {
    for (double cy = -9.0; cy <= 9.0; cy += 1.5) {
      Vec c(2);
      c << cx, cy;
      const double l = grid_loss(c);
      if (l < best_loss) {
        best_loss = l;
        best_c = c;
      }
    }
  }
  const ConditionEmbedding best(best_c);
  REQUIRE(ckpt.mixture->condition_weights(&best)[0] >= 0.9);
  // the optimizer sits in the same basin as the brute-force scan: close to
  // the scan's optimum and far below the loss at the rival class embedding
  REQUIRE(grid_loss(token.embedding.v) <= best_loss * 1.2);
  REQUIRE(grid_loss(token.embedding.v) <
          0.8 * grid_loss(ckpt.embedding("class:1").v));
}

TEST_CASE("zero-step inversion returns the initialization unchanged",
          "[invert]") {
  const Checkpoint ckpt = tiny_analytic();
  const auto data = component_data(ckpt.mixture.value(), 0, 8, 99);
  InversionConfig conf;
  conf.steps = 0;
  conf.seed = 21;
  const ConceptToken token = invert_concept(ckpt, data, conf);
  REQUIRE(token.loss_trace.empty());

  Rng rng(conf.seed, 51);
  const Vec expect = inversion_init(ckpt, data.concept_id, conf.init_noise, rng);
  REQUIRE(token.embedding.v == expect);
}

TEST_CASE("inversion is deterministic", "[invert]") {
  const Checkpoint ckpt = tiny_analytic();
  const auto data = component_data(ckpt.mixture.value(), 1, 16, 7);
  InversionConfig conf;
  conf.steps = 150;
  conf.seed = 8;
  const ConceptToken a = invert_concept(ckpt, data, conf);
  const ConceptToken b = invert_concept(ckpt, data, conf);
  REQUIRE(a.embedding.v == b.embedding.v);
  REQUIRE(a.loss_trace == b.loss_trace);
}

TEST_CASE("malicious dataset generation and filtering", "[invert][slow]") {
  const auto& f = fixture();

  SECTION("threshold zero keeps every raw sample") {
    const auto d = build_malicious_dataset(f.base, kTarget, 40, f.clf, 0.0, 1,
                                           3.0, 500);
    REQUIRE(d.size() == 40);
  }
  SECTION("impossible threshold raises the insufficient-data error") {
    REQUIRE_THROWS_AS(
        build_malicious_dataset(f.base, kTarget, 20, f.clf, 1.0 + 1e-9, 1, 3.0,
                                500),
        DataError);
  }
  SECTION("default threshold keeps at least half of a well-trained base") {
    const auto d = build_malicious_dataset(f.base, kTarget, 150, f.clf, 0.75,
                                           10, 3.0, 500);
    REQUIRE(d.size() >= 75);
    REQUIRE(d.size() <= 150);
    // filter soundness: every member re-scores at or above the threshold
    for (int i = 0; i < d.size(); ++i)
      REQUIRE(f.clf.predict_proba(d.images.col(i))[kTarget] >= 0.75);
    // round-trips through JSON
    const auto back = MaliciousDataset::from_json(d.to_json());
    REQUIRE(back.images == d.images);
    REQUIRE(back.concept_id == kTarget);
  }
}

TEST_CASE("inversion against the trained toy model halves the smoothed loss "
          "and elicits the concept", "[invert][slow]") {
  const auto& f = fixture();
  const auto data = build_malicious_dataset(f.base, kTarget, 150, f.clf, 0.75,
                                            10, 3.0, 500);
  InversionConfig conf;  // 3000 steps, lr 5e-3, batch 1
  conf.seed = 31;
  const std::string digest = f.base.param_digest();
  const ConceptToken token = invert_concept(f.base, data, conf);
  REQUIRE(f.base.param_digest() == digest);

  REQUIRE(token.loss_trace.size() == 3000);
  auto window_mean = [&](int from) {
    double acc = 0.0;
    for (int i = from; i < from + 100; ++i) acc += token.loss_trace[i];
    return acc / 100.0;
  };
  REQUIRE(window_mean(2900) <= 0.5 * window_mean(0));

  // conditioning the base model on the recovered token generates the concept
  const auto backend = f.base.make_backend();
  const auto g = make_cfg_guidance(token.embedding, CfgConfig{3.0});
  int hits = 0;
  for (int i = 0; i < 200; ++i) {
    const Vec x = sample(*backend, g, f.schedule, 40000 + i);
    if (f.clf.predict(x) == kTarget) ++hits;
  }
  REQUIRE(hits >= 100);
}

TEST_CASE("negative-set packing and transfer round-trips", "[invert]") {
  const Checkpoint ckpt = tiny_analytic();
  ConceptToken a;
  a.name = "<s>";
  a.embedding = ConditionEmbedding(Vec::LinSpaced(2, 0.5, 1.5), "<s>");
  a.source_checkpoint = "unlearned_0";
  ConceptToken b = a;
  b.name = "<s_1>";
  b.embedding = ConditionEmbedding(Vec::LinSpaced(2, -1.0, 1.0), "<s_1>");

  SECTION("empty token list is an error") {
    REQUIRE_THROWS_AS(build_negative_set({}), InputError);
  }
  SECTION("single token: K = 1, aggregate returns it exactly") {
    const auto negs = build_negative_set({a});
    REQUIRE(negs.count() == 1);
    REQUIRE(negs.source == NegativeSource::kInvertedConcept);
    REQUIRE(negative_aggregate(negs).v == a.embedding.v);
  }
  SECTION("two tokens preserve column order") {
    const auto negs = build_negative_set({a, b});
    REQUIRE(negs.count() == 2);
    REQUIRE(negs.columns[0].v == a.embedding.v);
    REQUIRE(negs.columns[1].v == b.embedding.v);
  }
  SECTION("transfer re-tags without touching the embedding") {
    const auto moved = transfer_embedding(a, ckpt, "unlearned_2");
    REQUIRE(moved.embedding.v == a.embedding.v);
    REQUIRE(moved.source_checkpoint == "unlearned_2");
    const auto same = transfer_embedding(a, ckpt, a.source_checkpoint);
    REQUIRE(same.embedding.v == a.embedding.v);
    REQUIRE(same.source_checkpoint == a.source_checkpoint);

    ConceptToken bad = a;
    bad.embedding = ConditionEmbedding(Vec::Zero(5));
    REQUIRE_THROWS_AS(transfer_embedding(bad, ckpt, "x"), InputError);
  }
  SECTION("token archives round-trip") {
    const auto path =
        (std::filesystem::temp_directory_path() / "sd_token.json").string();
    a.config_digest = "abc";
    a.loss_trace = {3.0, 2.0, 1.0};
    a.save(path);
    const auto back = ConceptToken::load(path);
    REQUIRE(back.embedding.v == a.embedding.v);
    REQUIRE(back.name == a.name);
    REQUIRE(back.loss_trace == a.loss_trace);
    REQUIRE(back.config_digest == "abc");
    std::remove(path.c_str());
  }
}
