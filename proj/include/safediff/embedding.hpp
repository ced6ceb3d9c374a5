#pragma once

#include <optional>
#include <string>
#include <vector>

#include "safediff/common.hpp"

namespace safediff {

// A D-dimensional vector standing in for a text / concept embedding.
struct ConditionEmbedding {
  Vec v;
  std::optional<std::string> label;

  ConditionEmbedding() = default;
  explicit ConditionEmbedding(Vec values, std::optional<std::string> tag = {})
      : v(std::move(values)), label(std::move(tag)) {
    if (!all_finite(v)) throw InputError("ConditionEmbedding: non-finite entries");
  }

  Eigen::Index dim() const { return v.size(); }
};

enum class NegativeSource { kExplicitPrompt, kInvertedConcept };

inline const char* to_string(NegativeSource s) {
  return s == NegativeSource::kExplicitPrompt ? "explicit-prompt" : "inverted-concept";
}

// The D x K column set consumed by SLD / SAFREE. K may be zero (SAFREE treats
// an empty set as "no filtering").
struct NegativeEmbeddingSet {
  std::vector<ConditionEmbedding> columns;
  NegativeSource source = NegativeSource::kExplicitPrompt;

  int count() const { return static_cast<int>(columns.size()); }

  Eigen::Index dim() const {
    return columns.empty() ? 0 : columns.front().dim();
  }

  void validate() const {
    for (const auto& c : columns) {
      if (c.dim() != dim())
        throw InputError("NegativeEmbeddingSet: mixed embedding dimensions");
    }
  }

  // D x K matrix view of the columns.
  Mat matrix() const {
    validate();
    Mat m(dim(), count());
    for (int k = 0; k < count(); ++k) m.col(k) = columns[k].v;
    return m;
  }
};

// Per-token view of a (possibly multi-token) prompt. Single-token prompts are
// simply L = 1.
struct PromptTokenMatrix {
  std::vector<ConditionEmbedding> tokens;

  explicit PromptTokenMatrix(std::vector<ConditionEmbedding> toks = {})
      : tokens(std::move(toks)) {}

  static PromptTokenMatrix single(const ConditionEmbedding& c) {
    return PromptTokenMatrix({c});
  }

  int count() const { return static_cast<int>(tokens.size()); }

  void validate() const {
    if (tokens.empty()) throw InputError("PromptTokenMatrix: needs >= 1 token");
    for (const auto& t : tokens) {
      if (t.dim() != tokens.front().dim())
        throw InputError("PromptTokenMatrix: mixed embedding dimensions");
    }
  }

  // Mean over tokens; the reduction used to feed single-vector backends.
  ConditionEmbedding reduce_mean() const {
    validate();
    if (tokens.size() == 1) return tokens.front();
    Vec acc = Vec::Zero(tokens.front().dim());
    for (const auto& t : tokens) acc += t.v;
    acc /= double(tokens.size());
    return ConditionEmbedding(std::move(acc), tokens.front().label);
  }
};

}  // namespace safediff
