#include <catch2/catch_amalgamated.hpp>

#include <map>

#include "helpers.hpp"
#include "safediff/guidance.hpp"
#include "safediff/mixture.hpp"

using namespace safediff;
using Catch::Approx;

namespace {

// Returns canned eps values keyed by the condition's label; "(uncond)" for
// the null condition.
class FixedBackend final : public DenoiserBackend {
 public:
  FixedBackend(int dz, int de, NoiseSchedule s)
      : dz_(dz), de_(de), schedule_(std::move(s)) {}

  std::map<std::string, Vec> table;

  int data_dim() const override { return dz_; }
  int embed_dim() const override { return de_; }
  const NoiseSchedule& schedule() const override { return schedule_; }

  Vec predict(const Vec&, const ConditionEmbedding* c, int) const override {
    const std::string key = c ? c->label.value() : "(uncond)";
    return table.at(key);
  }

  Vec condition_vjp(const Vec&, const ConditionEmbedding&, int,
                    const Vec&) const override {
    throw InputError("not differentiable");
  }

 private:
  int dz_, de_;
  NoiseSchedule schedule_;
};

ConditionEmbedding labeled(const Vec& v, const std::string& name) {
  return ConditionEmbedding(v, name);
}

}  // namespace

TEST_CASE("cfg_score collapses and combines per the guidance formula",
          "[guidance]") {
  FixedBackend b(2, 3, NoiseSchedule::cosine(100, 10));
  Vec eu(2), ec(2);
  eu << 0.0, 0.0;
  ec << 1.0, 2.0;
  b.table["(uncond)"] = eu;
  b.table["p"] = ec;
  const auto c_p = labeled(Vec::Zero(3), "p");
  const LatentState z(Vec::Zero(2), 50);

  REQUIRE(cfg_score(b, z, c_p, CfgConfig{0.0}) == eu);
  REQUIRE(cfg_score(b, z, c_p, CfgConfig{1.0}) == ec);

  const Vec out = cfg_score(b, z, c_p, CfgConfig{7.5});
  REQUIRE(out[0] == Approx(7.5).margin(1e-12));
  REQUIRE(out[1] == Approx(15.0).margin(1e-12));

  REQUIRE_THROWS_AS(cfg_score(b, z, ConditionEmbedding(Vec::Zero(2), "p"),
                              CfgConfig{1.0}),
                    InputError);
  REQUIRE_THROWS_AS(cfg_score(b, z, c_p, CfgConfig{-0.5}), InputError);
}

TEST_CASE("negative_aggregate is the column mean", "[guidance]") {
  NegativeEmbeddingSet negs;
  SECTION("empty set is an error") {
    REQUIRE_THROWS_AS(negative_aggregate(negs), InputError);
  }
  SECTION("a single column passes through unchanged") {
    Vec v(2);
    v << 0.25, -1.75;
    negs.columns.push_back(labeled(v, "n"));
    const auto agg = negative_aggregate(negs);
    REQUIRE(agg.v == v);
    REQUIRE(agg.label.value() == "n");
  }
  SECTION("two basis columns average") {
    Vec a(2), b(2);
    a << 1.0, 0.0;
    b << 0.0, 1.0;
    negs.columns = {labeled(a, "a"), labeled(b, "b")};
    const auto agg = negative_aggregate(negs);
    REQUIRE(agg.v[0] == Approx(0.5).margin(1e-15));
    REQUIRE(agg.v[1] == Approx(0.5).margin(1e-15));
  }
  SECTION("mean norm never exceeds the max column norm") {
    Rng rng(5);
    for (int trial = 0; trial < 50; ++trial) {
      NegativeEmbeddingSet set;
      double max_norm = 0.0;
      const int k = rng.uniform_int(1, 6);
      for (int i = 0; i < k; ++i) {
        Vec v = rng.normal_vec(4);
        max_norm = std::max(max_norm, v.norm());
        set.columns.push_back(ConditionEmbedding(v));
      }
      REQUIRE(negative_aggregate(set).v.norm() <= max_norm + 1e-12);
    }
  }
  SECTION("column order does not matter") {
    Rng rng(6);
    NegativeEmbeddingSet fwd, rev;
    for (int i = 0; i < 4; ++i)
      fwd.columns.push_back(ConditionEmbedding(rng.normal_vec(5)));
    rev.columns.assign(fwd.columns.rbegin(), fwd.columns.rend());
    REQUIRE((negative_aggregate(fwd).v - negative_aggregate(rev).v).norm() <
            1e-15);
  }
}

TEST_CASE("sld_score reduction identities and the worked negative example",
          "[guidance]") {
  FixedBackend b(2, 3, NoiseSchedule::cosine(100, 10));
  Vec eu(2), ec(2), en(2);
  eu << 0.0, 0.0;
  ec << 1.0, 0.0;
  en << 1.0, 0.0;
  b.table["(uncond)"] = eu;
  b.table["p"] = ec;
  b.table["n"] = en;
  const auto c_p = labeled(Vec::Zero(3), "p");
  NegativeEmbeddingSet negs;
  negs.columns.push_back(labeled(Vec::Zero(3), "n"));
  const LatentState z(Vec::Zero(2), 50);
  const CfgConfig cfg{7.5};

  SECTION("empty negatives are an error") {
    REQUIRE_THROWS_AS(
        sld_score(b, z, c_p, NegativeEmbeddingSet{}, cfg, SldConfig{}, 0),
        InputError);
  }
  SECTION("mask identically zero reduces to cfg_score") {
    SldConfig off{1.0, -1e18, 0};
    REQUIRE(sld_score(b, z, c_p, negs, cfg, off, 10) == cfg_score(b, z, c_p, cfg));
  }
  SECTION("warmup steps reduce to cfg_score") {
    SldConfig sld{10.0, 0.1, 5};
    REQUIRE(sld_score(b, z, c_p, negs, cfg, sld, 4) == cfg_score(b, z, c_p, cfg));
    REQUIRE(sld_score(b, z, c_p, negs, cfg, sld, 5) != cfg_score(b, z, c_p, cfg));
  }
  SECTION("negative guidance cancels the concept direction exactly") {
    // eps_u = 0, eps_c = eps_n = [1, 0], lambda = 1, s_S = 1, mask active
    SldConfig sld{1.0, 0.5, 0};
    const Vec out = sld_score(b, z, c_p, negs, CfgConfig{1.0}, sld, 0);
    REQUIRE(out.norm() == 0.0);
  }
  SECTION("warmup must stay below the sampling step count") {
    SldConfig sld{1.0, 0.0, 10};
    REQUIRE_THROWS_AS(sld_score(b, z, c_p, negs, cfg, sld, 0), InputError);
  }
}

TEST_CASE("safree_filter geometry", "[guidance]") {
  const SafreeConfig conf{};  // alpha 0.01, gamma 10, theta 0.5

  SECTION("empty negatives are the identity") {
    PromptTokenMatrix tokens;
    Vec v(3);
    v << 1.0, 2.0, 3.0;
    tokens.tokens.push_back(ConditionEmbedding(v));
    const auto out = safree_filter(tokens, NegativeEmbeddingSet{}, conf);
    REQUIRE(out.tokens.size() == 1);
    REQUIRE(out.tokens[0].v == v);
  }

  SECTION("token orthogonal to the negative span passes through") {
    NegativeEmbeddingSet negs;
    Vec n(3);
    n << 1.0, 0.0, 0.0;
    negs.columns.push_back(ConditionEmbedding(n));
    Vec e(3);
    e << 0.0, 2.0, -1.0;
    const auto out =
        safree_filter(PromptTokenMatrix::single(ConditionEmbedding(e)), negs, conf);
    REQUIRE((out.tokens[0].v - e).norm() < 1e-12 * e.norm());
  }

  SECTION("token inside the span is gated down to (1 - logistic(5))") {
    NegativeEmbeddingSet negs;
    Vec n(3);
    n << 2.0, 0.0, 0.0;
    negs.columns.push_back(ConditionEmbedding(n));
    Vec e(3);
    e << -3.0, 0.0, 0.0;  // rho = 1
    SafreeConfig a0 = conf;
    a0.alpha = 0.0;
    const auto out =
        safree_filter(PromptTokenMatrix::single(ConditionEmbedding(e)), negs, a0);
    const double keep = 1.0 - logistic(5.0);
    REQUIRE((out.tokens[0].v - keep * e).norm() < 1e-9);
    REQUIRE(out.tokens[0].v[0] == Approx(-3.0 * 0.006692850924284856).epsilon(1e-6));
  }

  SECTION("idempotent once the gate saturates") {
    NegativeEmbeddingSet negs;
    Vec n(4);
    n << 1.0, 1.0, 0.0, 0.0;
    negs.columns.push_back(ConditionEmbedding(n));
    Vec e(4);
    e << 1.0, 0.0, 1.0, 0.0;  // 45 degrees to the span
    SafreeConfig sat = conf;
    sat.alpha = 0.0;
    sat.gamma = 1e5;
    sat.theta = 0.25;
    const auto once =
        safree_filter(PromptTokenMatrix::single(ConditionEmbedding(e)), negs, sat);
    const auto twice = safree_filter(once, negs, sat);
    REQUIRE((twice.tokens[0].v - once.tokens[0].v).norm() <
            1e-6 * once.tokens[0].v.norm());
  }

  SECTION("projection norm never increases") {
    Rng rng(9);
    for (int trial = 0; trial < 40; ++trial) {
      NegativeEmbeddingSet negs;
      const int k = rng.uniform_int(1, 3);
      for (int i = 0; i < k; ++i)
        negs.columns.push_back(ConditionEmbedding(rng.normal_vec(6)));
      const Mat nm = negs.matrix();
      Eigen::ColPivHouseholderQR<Mat> qr(nm);
      qr.setThreshold(1e-8);
      const Mat basis = qr.householderQ() * Mat::Identity(6, qr.rank());

      PromptTokenMatrix tokens;
      for (int j = 0; j < 3; ++j)
        tokens.tokens.push_back(ConditionEmbedding(rng.normal_vec(6)));
      const auto out = safree_filter(tokens, negs, SafreeConfig{});
      for (int j = 0; j < 3; ++j) {
        const double before =
            (basis * (basis.transpose() * tokens.tokens[j].v)).norm();
        const double after =
            (basis * (basis.transpose() * out.tokens[j].v)).norm();
        REQUIRE(after <= before + 1e-10);
      }
    }
  }

  SECTION("column permutations leave the output unchanged") {
    Rng rng(10);
    NegativeEmbeddingSet negs;
    for (int i = 0; i < 3; ++i)
      negs.columns.push_back(ConditionEmbedding(rng.normal_vec(5)));
    NegativeEmbeddingSet permuted;
    permuted.columns = {negs.columns[2], negs.columns[0], negs.columns[1]};

    PromptTokenMatrix tokens;
    for (int j = 0; j < 4; ++j)
      tokens.tokens.push_back(ConditionEmbedding(rng.normal_vec(5)));
    const auto a = safree_filter(tokens, negs, SafreeConfig{});
    const auto b = safree_filter(tokens, permuted, SafreeConfig{});
    for (int j = 0; j < 4; ++j)
      REQUIRE((a.tokens[j].v - b.tokens[j].v).norm() <
              1e-9 * std::max(1.0, a.tokens[j].v.norm()));
  }
}

TEST_CASE("safree_score identities and near-unconditional collapse",
          "[guidance]") {
  const auto mix = sdtest::tiny_mixture();
  const auto s = NoiseSchedule::cosine(1000, 50);
  MixtureBackend backend(mix, s);

  const Vec c_p_v = 6.0 * mix.cond_map.col(0);
  const ConditionEmbedding c_p(c_p_v, "p");
  const auto tokens = PromptTokenMatrix::single(c_p);
  Rng rng(12);
  const LatentState z(rng.normal_vec(2), 500);
  const CfgConfig cfg{7.5};

  SECTION("empty negatives match cfg_score bit for bit") {
    REQUIRE(safree_score(backend, z, tokens, NegativeEmbeddingSet{}, cfg,
                         SafreeConfig{}) == cfg_score(backend, z, c_p, cfg));
  }
  SECTION("lambda = 0 returns the unconditional estimate") {
    NegativeEmbeddingSet negs;
    negs.columns.push_back(ConditionEmbedding(Vec::Ones(2)));
    REQUIRE(safree_score(backend, z, tokens, negs, CfgConfig{0.0},
                         SafreeConfig{}) ==
            backend.predict(z.z, nullptr, z.t));
  }
  SECTION("prompt parallel to the negative collapses toward unconditional") {
    NegativeEmbeddingSet negs;
    negs.columns.push_back(ConditionEmbedding(Vec(0.5 * c_p_v), "n"));
    SafreeConfig conf;
    conf.alpha = 0.0;
    conf.gamma = 1e4;

    const Vec guided = safree_score(backend, z, tokens, negs, cfg, conf);
    const Vec eps_u = backend.predict(z.z, nullptr, z.t);
    const Vec full = cfg_score(backend, z, c_p, cfg);

    // matches cfg on the hand-scaled embedding (1 - gate) * c_p
    const double keep = 1.0 - logistic(conf.gamma * (1.0 - conf.theta));
    const ConditionEmbedding scaled(Vec(keep * c_p_v), "scaled");
    const Vec expect = cfg_score(backend, z, scaled, cfg);
    REQUIRE((guided - expect).norm() < 1e-9 * std::max(1.0, expect.norm()));

    REQUIRE((guided - eps_u).norm() < 0.05 * (full - eps_u).norm());
  }
}

TEST_CASE("sld with the concept's own embedding suppresses that component",
          "[guidance][oracle]") {
  const auto mix = sdtest::tiny_mixture();
  const auto s = NoiseSchedule::cosine(1000, 50);
  MixtureBackend backend(mix, s);
  const ConditionEmbedding c0(Vec(6.0 * mix.cond_map.col(0)), "c0");

  NegativeEmbeddingSet negs;
  negs.columns.push_back(c0);

  const CfgConfig cfg{7.5};
  const auto plain = make_cfg_guidance(c0, cfg);
  const auto guarded = make_sld_guidance(c0, negs, cfg, SldConfig{});

  int plain_hits = 0, guarded_hits = 0;
  const int n = 500;
  for (int i = 0; i < n; ++i) {
    if (sdtest::nearest_mean_class(mix, sample(backend, plain, s, 40 + i)) == 0)
      ++plain_hits;
    if (sdtest::nearest_mean_class(mix, sample(backend, guarded, s, 40 + i)) == 0)
      ++guarded_hits;
  }
  REQUIRE(plain_hits >= static_cast<int>(0.9 * n));
  REQUIRE(plain_hits - guarded_hits >= static_cast<int>(0.10 * n));
}
