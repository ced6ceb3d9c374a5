#pragma once

#include <map>
#include <memory>
#include <optional>
#include <string>

#include "safediff/io.hpp"
#include "safediff/mixture.hpp"
#include "safediff/toynet.hpp"

namespace safediff {

inline constexpr int kCheckpointFormatVersion = 1;

struct Provenance {
  std::string type = "base";  // "base" | "unlearned"
  std::string method;         // "esd" | "duo" when unlearned
  double beta = 0.0;
  double eta = 0.0;
  std::uint64_t seed = 0;
  std::string parent;

  Json to_json() const {
    Json j;
    j["type"] = type;
    j["method"] = method;
    j["beta"] = beta;
    j["eta"] = eta;
    j["seed"] = seed;
    j["parent"] = parent;
    return j;
  }

  static Provenance from_json(const Json& j) {
    Provenance p;
    p.type = j.at("type").get<std::string>();
    p.method = j.value("method", std::string{});
    p.beta = j.value("beta", 0.0);
    p.eta = j.value("eta", 0.0);
    p.seed = j.value("seed", std::uint64_t{0});
    p.parent = j.value("parent", std::string{});
    return p;
  }
};

// Self-describing model archive: schedule constants, backend kind, parameter
// tensors, vocabulary and provenance, plus a format-version integer.
class Checkpoint {
 public:
  int format_version = kCheckpointFormatVersion;
  std::string kind;  // "toy-network" | "analytic-mixture"
  NoiseSchedule schedule;
  std::optional<ToyNet> net;
  std::optional<MixtureSpec> mixture;
  std::map<std::string, Vec> vocab;  // tag -> embedding
  Provenance provenance;

  static Checkpoint toy(ToyNet net, NoiseSchedule schedule,
                        std::map<std::string, Vec> vocab, Provenance prov) {
    Checkpoint c(std::move(schedule));
    c.kind = "toy-network";
    c.net = std::move(net);
    c.vocab = std::move(vocab);
    c.provenance = std::move(prov);
    return c;
  }

  static Checkpoint analytic(MixtureSpec spec, NoiseSchedule schedule,
                             std::map<std::string, Vec> vocab,
                             Provenance prov = {}) {
    spec.validate();
    Checkpoint c(std::move(schedule));
    c.kind = "analytic-mixture";
    c.mixture = std::move(spec);
    c.vocab = std::move(vocab);
    c.provenance = std::move(prov);
    return c;
  }

  int data_dim() const {
    return net ? net->config().data_dim : mixture->data_dim();
  }
  int embed_dim() const {
    return net ? net->config().embed_dim : mixture->embed_dim();
  }

  ConditionEmbedding embedding(const std::string& tag) const {
    auto it = vocab.find(tag);
    if (it == vocab.end()) throw InputError("unknown vocabulary tag: " + tag);
    return ConditionEmbedding(it->second, tag);
  }

  std::unique_ptr<DenoiserBackend> make_backend() const {
    if (kind == "toy-network") {
      if (!net) throw IoError("toy-network checkpoint without parameters");
      return std::make_unique<ToyNetBackend>(*net, schedule);
    }
    if (kind == "analytic-mixture") {
      if (!mixture) throw IoError("analytic-mixture checkpoint without spec");
      return std::make_unique<MixtureBackend>(*mixture, schedule);
    }
    throw IoError("unknown checkpoint kind: " + kind);
  }

  // Flat view of every parameter tensor; basis for the content digest.
  Vec flat_parameters() const {
    if (net) return net->flatten();
    if (mixture) {
      const auto& m = *mixture;
      Vec out(m.means.size() + m.variances.size() + m.weights.size() +
              m.cond_map.size());
      Eigen::Index at = 0;
      auto put = [&](const Mat& a) {
        out.segment(at, a.size()) = Eigen::Map<const Vec>(a.data(), a.size());
        at += a.size();
      };
      put(m.means);
      put(m.variances);
      put(Mat(m.weights));
      put(m.cond_map);
      return out;
    }
    throw IoError("checkpoint has no parameters");
  }

  std::string param_digest() const { return sha256_doubles(flat_parameters()); }

  Json to_json() const {
    Json j;
    j["format_version"] = format_version;
    j["kind"] = kind;
    j["schedule"]["alpha_bar"] = schedule.alpha_bar_sequence();
    j["schedule"]["sample_steps"] = schedule.sample_steps();
    if (net) {
      const auto& cfg = net->config();
      Json c;
      c["data_dim"] = cfg.data_dim;
      c["embed_dim"] = cfg.embed_dim;
      c["hidden"] = cfg.hidden;
      c["layers"] = cfg.layers;
      c["cond_hidden"] = cfg.cond_hidden;
      c["cond_slots"] = cfg.cond_slots;
      c["time_freqs"] = cfg.time_freqs;
      j["net"]["config"] = std::move(c);
      j["net"]["params"] = vec_to_json(net->flatten());
    }
    if (mixture) {
      j["mixture"]["means"] = mat_to_json(mixture->means);
      j["mixture"]["variances"] = mat_to_json(mixture->variances);
      j["mixture"]["weights"] = vec_to_json(mixture->weights);
      j["mixture"]["cond_map"] = mat_to_json(mixture->cond_map);
    }
    Json v;
    for (const auto& [tag, emb] : vocab) v[tag] = vec_to_json(emb);
    j["vocab"] = std::move(v);
    j["provenance"] = provenance.to_json();
    return j;
  }

  static Checkpoint from_json(const Json& j) {
    const int version = j.at("format_version").get<int>();
    if (version != kCheckpointFormatVersion)
      throw IoError("unsupported checkpoint format_version " +
                    std::to_string(version));
    auto schedule = NoiseSchedule::from_alpha_bar(
        j.at("schedule").at("alpha_bar").get<std::vector<double>>(),
        j.at("schedule").at("sample_steps").get<int>());
    Checkpoint c(std::move(schedule));
    c.format_version = version;
    c.kind = j.at("kind").get<std::string>();
    if (j.contains("net")) {
      ToyNetConfig cfg;
      const auto& jc = j.at("net").at("config");
      cfg.data_dim = jc.at("data_dim").get<int>();
      cfg.embed_dim = jc.at("embed_dim").get<int>();
      cfg.hidden = jc.at("hidden").get<int>();
      cfg.layers = jc.at("layers").get<int>();
      cfg.cond_hidden = jc.at("cond_hidden").get<int>();
      cfg.cond_slots = jc.at("cond_slots").get<int>();
      cfg.time_freqs = jc.at("time_freqs").get<int>();
      ToyNet net(cfg, /*init_seed=*/0);
      net.unflatten(vec_from_json(j.at("net").at("params")));
      c.net = std::move(net);
    }
    if (j.contains("mixture")) {
      MixtureSpec m;
      m.means = mat_from_json(j.at("mixture").at("means"));
      m.variances = mat_from_json(j.at("mixture").at("variances"));
      m.weights = vec_from_json(j.at("mixture").at("weights"));
      m.cond_map = mat_from_json(j.at("mixture").at("cond_map"));
      m.validate();
      c.mixture = std::move(m);
    }
    if (j.contains("vocab")) {
      for (const auto& [tag, emb] : j.at("vocab").items())
        c.vocab[tag] = vec_from_json(emb);
    }
    c.provenance = Provenance::from_json(j.at("provenance"));
    if (!c.net && !c.mixture)
      throw IoError("checkpoint carries no parameters");
    return c;
  }

  void save(const std::string& path) const { write_json_file(path, to_json()); }

  static Checkpoint load(const std::string& path) {
    return from_json(read_json_file(path));
  }

 private:
  explicit Checkpoint(NoiseSchedule s) : schedule(std::move(s)) {}
};

}  // namespace safediff
