// SPDX-FileCopyrightText: Copyright 2026 The devcloud Authors
// SPDX-License-Identifier: Apache-2.0

// Deterministic language-model backends for the draft (device) and target
// (cloud) roles, plus per-token importance signal providers.

#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "devcloud/core.hpp"
#include "devcloud/rng.hpp"

namespace devcloud::models {

/// Provisional output of one (simulated) transformer layer. layer_index is 0-based.
struct LayerSignal {
  std::uint32_t layer_index = 0;
  double top1 = 0.0;
  double top2 = 0.0;
  double margin = 0.0;
  TokenDistribution provisional_dist;
};

inline LayerSignal make_layer_signal(std::uint32_t index, TokenDistribution dist) {
  const auto [a, b] = dist.top2();
  return LayerSignal{index, a, b, a - b, std::move(dist)};
}

class LanguageModel {
 public:
  virtual ~LanguageModel() = default;

  virtual std::size_t vocab_size() const = 0;
  virtual std::uint32_t layer_count() const { return 1; }

  // Same prefix, same distribution, bit for bit.
  virtual TokenDistribution next(std::span<const TokenId> prefix) const = 0;

  // One signal per layer, in order; the last one carries next(prefix).
  virtual std::vector<LayerSignal> layer_signals(std::span<const TokenId> prefix) const {
    return {make_layer_signal(0, next(prefix))};
  }
};

// ---------------------------------------------------------------------------
// Table model: rows keyed by a context suffix, longest match wins.

class TableModel final : public LanguageModel {
 public:
  using Rows = std::map<std::vector<TokenId>, TokenDistribution>;

  explicit TableModel(Rows rows) : rows_(std::move(rows)) {
    auto def = rows_.find({});
    if (def == rows_.end()) throw Error(Errc::kMissingDefaultRow, "table has no row for the empty suffix");
    vocab_ = def->second.vocab_size();
    for (const auto& [suffix, dist] : rows_) {
      if (dist.vocab_size() != vocab_) throw Error(Errc::kInvalidDistribution, "rows disagree on vocabulary size");
      for (TokenId t : suffix) {
        if (t >= vocab_) throw Error(Errc::kInvalidConfig, "suffix token outside vocabulary");
      }
      max_suffix_ = std::max(max_suffix_, suffix.size());
    }
  }

  std::size_t vocab_size() const override { return vocab_; }

  TokenDistribution next(std::span<const TokenId> prefix) const override {
    std::vector<TokenId> key;
    for (std::size_t n = std::min(max_suffix_, prefix.size()); n > 0; --n) {
      key.assign(prefix.end() - static_cast<std::ptrdiff_t>(n), prefix.end());
      if (auto it = rows_.find(key); it != rows_.end()) return it->second;
    }
    return rows_.find({})->second;
  }

  const Rows& rows() const noexcept { return rows_; }

 private:
  Rows rows_;
  std::size_t vocab_ = 0;
  std::size_t max_suffix_ = 0;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

template <typename T>
std::vector<T> parse_csv(const std::string& text, const std::string& where) {
  std::vector<T> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    try {
      std::size_t used = 0;
      if constexpr (std::is_floating_point_v<T>) {
        out.push_back(static_cast<T>(std::stod(item, &used)));
      } else {
        const long long v = std::stoll(item, &used);
        if (v < 0) throw std::invalid_argument("negative");
        out.push_back(static_cast<T>(v));
      }
      if (used != item.size()) throw std::invalid_argument("trailing characters");
    } catch (const std::logic_error&) {
      throw Error(Errc::kParse, where + ": bad number '" + item + "'");
    }
  }
  return out;
}

inline std::ifstream open_or_throw(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::kIo, "cannot open " + path);
  return in;
}

}  // namespace detail

// Grammar, one row per line: `suffix_csv : prob_csv`. An empty suffix is the
// mandatory default row. `#` starts a comment.
inline TableModel parse_table(std::istream& in, const std::string& name = "<table>") {
  TableModel::Rows rows;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    if (detail::trim(line).empty()) continue;
    const auto colon = line.find(':');
    const std::string where = name + ":" + std::to_string(lineno);
    if (colon == std::string::npos) throw Error(Errc::kParse, where + ": missing ':'");
    auto suffix = detail::parse_csv<TokenId>(line.substr(0, colon), where);
    auto probs = detail::parse_csv<double>(line.substr(colon + 1), where);
    try {
      rows.insert_or_assign(std::move(suffix), TokenDistribution(std::move(probs)));
    } catch (const Error& e) {
      throw Error(e.code(), where + ": " + e.what());
    }
  }
  return TableModel(std::move(rows));
}

inline TableModel load_table(const std::string& path) {
  auto in = detail::open_or_throw(path);
  return parse_table(in, path);
}

// ---------------------------------------------------------------------------
// Add-one smoothed n-gram model.

class NgramModel final : public LanguageModel {
 public:
  NgramModel(std::span<const TokenId> corpus, std::uint32_t order, std::size_t vocab) : order_(order), vocab_(vocab) {
    if (order < 1) throw Error(Errc::kInvalidConfig, "n-gram order must be >= 1");
    if (vocab < 1) throw Error(Errc::kInvalidConfig, "vocabulary must be non-empty");
    if (corpus.size() < order) throw Error(Errc::kCorpusTooShort, "corpus shorter than the n-gram order");
    for (TokenId t : corpus) {
      if (t >= vocab) throw Error(Errc::kInvalidConfig, "corpus token outside vocabulary");
    }
    // Context lengths 0..order-1 so prefixes shorter than order-1 still resolve.
    for (std::uint32_t m = 0; m < order; ++m) {
      for (std::size_t i = m; i < corpus.size(); ++i) {
        std::vector<TokenId> ctx(corpus.begin() + static_cast<std::ptrdiff_t>(i - m),
                                 corpus.begin() + static_cast<std::ptrdiff_t>(i));
        auto& row = counts_[std::move(ctx)];
        if (row.next.empty()) row.next.assign(vocab, 0);
        ++row.next[corpus[i]];
        ++row.total;
      }
    }
  }

  std::size_t vocab_size() const override { return vocab_; }
  std::uint32_t order() const noexcept { return order_; }

  TokenDistribution next(std::span<const TokenId> prefix) const override {
    const std::size_t m = std::min<std::size_t>(order_ - 1, prefix.size());
    std::vector<TokenId> ctx(prefix.end() - static_cast<std::ptrdiff_t>(m), prefix.end());
    std::vector<double> p(vocab_, 0.0);
    auto it = counts_.find(ctx);
    const double denom = static_cast<double>((it == counts_.end() ? 0 : it->second.total) + vocab_);
    for (std::size_t t = 0; t < vocab_; ++t) {
      const double c = it == counts_.end() ? 0.0 : static_cast<double>(it->second.next[t]);
      p[t] = (c + 1.0) / denom;
    }
    return TokenDistribution::normalized(std::move(p));
  }

 private:
  struct Row {
    std::vector<std::uint64_t> next;
    std::uint64_t total = 0;
  };
  struct VecHash {
    std::size_t operator()(const std::vector<TokenId>& v) const noexcept {
      return static_cast<std::size_t>(hash_sequence<TokenId>(v, 17));
    }
  };

  std::uint32_t order_;
  std::size_t vocab_;
  std::unordered_map<std::vector<TokenId>, Row, VecHash> counts_;
};

// Whitespace- or comma-separated token ids.
inline std::vector<TokenId> load_tokens(const std::string& path) {
  auto in = detail::open_or_throw(path);
  std::vector<TokenId> out;
  std::string word;
  while (in >> word) {
    for (auto& c : word) {
      if (c == ',') c = ' ';
    }
    std::stringstream ss(word);
    long long v;
    while (ss >> v) {
      if (v < 0) throw Error(Errc::kParse, path + ": negative token id");
      out.push_back(static_cast<TokenId>(v));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Layer simulation: provisional outputs converge to the base distribution.

struct NoiseSchedule {
  double initial_weight = 0.6;  // mixing weight of the noise at layer 0
  double decay = 0.7;           // geometric decay per layer
  std::uint64_t seed = 7;

  // Noise weight for a 0-based layer; the last layer is always exactly 0.
  double weight(std::uint32_t layer, std::uint32_t layers) const {
    if (layer + 1 >= layers) return 0.0;
    return initial_weight * std::pow(decay, static_cast<double>(layer));
  }
};

class LayeredModel final : public LanguageModel {
 public:
  LayeredModel(std::shared_ptr<const LanguageModel> base, std::uint32_t layers, NoiseSchedule schedule = {})
      : base_(std::move(base)), layers_(layers), schedule_(schedule) {
    if (!base_) throw Error(Errc::kInvalidConfig, "layered model needs a base model");
    if (layers_ < 1) throw Error(Errc::kInvalidConfig, "layer count must be >= 1");
  }

  std::size_t vocab_size() const override { return base_->vocab_size(); }
  std::uint32_t layer_count() const override { return layers_; }
  TokenDistribution next(std::span<const TokenId> prefix) const override { return base_->next(prefix); }

  std::vector<LayerSignal> layer_signals(std::span<const TokenId> prefix) const override {
    TokenDistribution base = base_->next(prefix);
    const std::size_t v = base.vocab_size();
    const std::uint64_t ctx = hash_sequence(prefix, schedule_.seed);
    std::vector<LayerSignal> out;
    out.reserve(layers_);
    std::vector<double> mixed(v);
    for (std::uint32_t l = 0; l + 1 < layers_; ++l) {
      const double w = schedule_.weight(l, layers_);
      // Flat-ish random distribution; mixing it in lowers the margin.
      Rng rng(mix64(ctx ^ (0x100000001b3ULL * (l + 1))));
      double noise_sum = 0.0;
      std::vector<double> noise(v);
      for (auto& x : noise) {
        x = rng.uniform();
        noise_sum += x;
      }
      for (std::size_t t = 0; t < v; ++t) mixed[t] = (1.0 - w) * base.probs()[t] + w * noise[t] / noise_sum;
      out.push_back(make_layer_signal(l, TokenDistribution::normalized(mixed)));
    }
    out.push_back(make_layer_signal(layers_ - 1, std::move(base)));
    return out;
  }

  const LanguageModel& base() const noexcept { return *base_; }

 private:
  std::shared_ptr<const LanguageModel> base_;
  std::uint32_t layers_;
  NoiseSchedule schedule_;
};

// ---------------------------------------------------------------------------
// Synthetic order-1 model pairs with controllable agreement.

namespace detail {

// Zipf weights over a seeded permutation of the vocabulary, floored so every
// token keeps some mass.
inline std::vector<double> zipf_row(std::size_t vocab, std::uint64_t seed, double exponent, double floor) {
  std::vector<TokenId> perm(vocab);
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(seed);
  for (std::size_t i = vocab; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
  std::vector<double> w(vocab);
  double sum = 0.0;
  for (std::size_t rank = 0; rank < vocab; ++rank) {
    const double x = 1.0 / std::pow(static_cast<double>(rank + 1), exponent);
    w[perm[rank]] = x;
    sum += x;
  }
  for (auto& x : w) x = (1.0 - floor) * x / sum + floor / static_cast<double>(vocab);
  return w;
}

}  // namespace detail

struct SyntheticPairSpec {
  std::size_t vocab = 64;
  std::uint64_t seed = 1;
  double target_exponent = 1.2;  // larger = more peaked target rows
  double draft_exponent = 1.6;
  double agreement = 0.4;        // draft row = agreement*target + (1-agreement)*other
  double floor = 1e-3;
  double exponent_spread = 5.0;  // per-row exponent drawn from [e, e + spread)
  double agreement_spread = 0.6; // per-row agreement drawn from [a, min(1, a + spread))
};

namespace detail {

inline double row_exponent(const SyntheticPairSpec& s, double base, std::uint64_t row_seed) {
  if (s.exponent_spread <= 0.0) return base;
  return base + s.exponent_spread * Rng(mix64(row_seed ^ 0x5eedULL)).uniform();
}

}  // namespace detail

inline std::shared_ptr<TableModel> make_synthetic_target(const SyntheticPairSpec& s) {
  TableModel::Rows rows;
  const auto row = [&](std::uint64_t seed) {
    return TokenDistribution::normalized(detail::zipf_row(s.vocab, seed, detail::row_exponent(s, s.target_exponent, seed), s.floor));
  };
  rows.emplace(std::vector<TokenId>{}, row(mix64(s.seed)));
  for (TokenId v = 0; v < s.vocab; ++v) rows.emplace(std::vector<TokenId>{v}, row(mix64(s.seed * 1000003ULL + v + 1)));
  return std::make_shared<TableModel>(std::move(rows));
}

inline std::shared_ptr<TableModel> make_synthetic_draft(const SyntheticPairSpec& s) {
  const auto target = make_synthetic_target(s);
  TableModel::Rows rows;
  std::uint64_t k = 0;
  for (const auto& [suffix, dist] : target->rows()) {
    const std::uint64_t oseed = mix64(~s.seed ^ (k++ * 0x9e37ULL));
    const auto other = detail::zipf_row(s.vocab, oseed, detail::row_exponent(s, s.draft_exponent, oseed), s.floor);
    double osum = 0.0;
    for (double x : other) osum += x;
    std::vector<double> w(s.vocab);
    double a = s.agreement;
    if (s.agreement_spread > 0.0) a = std::min(1.0, a + s.agreement_spread * Rng(mix64(oseed ^ 0xa9eeULL)).uniform());
    for (std::size_t t = 0; t < s.vocab; ++t) w[t] = a * dist.probs()[t] + (1.0 - a) * other[t] / osum;
    rows.emplace(suffix, TokenDistribution::normalized(std::move(w)));
  }
  return std::make_shared<TableModel>(std::move(rows));
}

// ---------------------------------------------------------------------------
// Importance providers.

// 1 - H(p)/log(V), clamped to [0, 1]. V == 1 has no uncertainty and scores 1.
inline double entropy_importance(const TokenDistribution& dist) {
  const std::size_t v = dist.vocab_size();
  if (v <= 1) return 1.0;
  double h = 0.0;
  for (double p : dist.probs()) {
    if (p > 0.0) h -= p * std::log(p);
  }
  return std::clamp(1.0 - h / std::log(static_cast<double>(v)), 0.0, 1.0);
}

class ImportanceProvider {
 public:
  virtual ~ImportanceProvider() = default;

  // Score of the token at `position` of `prefix`. `dist_at_position`, when
  // given, is the distribution that produced that token.
  virtual double score(std::span<const TokenId> prefix, std::size_t position,
                       const TokenDistribution* dist_at_position = nullptr) const = 0;
};

class EntropyImportance final : public ImportanceProvider {
 public:
  explicit EntropyImportance(std::shared_ptr<const LanguageModel> model) : model_(std::move(model)) {}

  double score(std::span<const TokenId> prefix, std::size_t position,
               const TokenDistribution* dist_at_position = nullptr) const override {
    if (dist_at_position != nullptr) return entropy_importance(*dist_at_position);
    if (position >= prefix.size()) throw Error(Errc::kInvalidConfig, "position outside prefix");
    return entropy_importance(model_->next(prefix.first(position)));
  }

 private:
  std::shared_ptr<const LanguageModel> model_;
};

class TraceImportance final : public ImportanceProvider {
 public:
  explicit TraceImportance(std::map<std::size_t, double> scores) : scores_(std::move(scores)) {
    for (const auto& [pos, s] : scores_) {
      if (!(s >= 0.0)) throw Error(Errc::kInvalidConfig, "importance scores must be non-negative");
    }
  }

  double score(std::span<const TokenId>, std::size_t position, const TokenDistribution* = nullptr) const override {
    auto it = scores_.find(position);
    if (it == scores_.end()) throw Error(Errc::kPositionNotInTrace, "position " + std::to_string(position));
    return it->second;
  }

  const std::map<std::size_t, double>& scores() const noexcept { return scores_; }

 private:
  std::map<std::size_t, double> scores_;
};

// Grammar: one `position score` pair per line; `#` starts a comment.
inline TraceImportance parse_trace(std::istream& in, const std::string& name = "<trace>") {
  std::map<std::size_t, double> scores;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    if (detail::trim(line).empty()) continue;
    std::stringstream ss(line);
    long long pos;
    double s;
    std::string extra;
    if (!(ss >> pos >> s) || (ss >> extra) || pos < 0) {
      throw Error(Errc::kParse, name + ":" + std::to_string(lineno) + ": expected `position score`");
    }
    scores[static_cast<std::size_t>(pos)] = s;
  }
  return TraceImportance(std::move(scores));
}

inline TraceImportance load_trace(const std::string& path) {
  auto in = detail::open_or_throw(path);
  return parse_trace(in, path);
}

// Pareto type II (Lomax) quantile: scale * ((1-u)^(-1/alpha) - 1).
inline double lomax_quantile(double u, double alpha, double scale) {
  return scale * (std::pow(1.0 - u, -1.0 / alpha) - 1.0);
}

/// Long-tailed importance keyed by a hash of the prefix up to and including
/// the scored token, so scores are deterministic per (prefix, position).
class LomaxImportance final : public ImportanceProvider {
 public:
  LomaxImportance(double alpha, double scale, std::uint64_t seed) : alpha_(alpha), scale_(scale), seed_(seed) {
    if (!(alpha > 0.0) || !(scale > 0.0)) throw Error(Errc::kInvalidConfig, "lomax needs alpha > 0 and scale > 0");
  }

  double score(std::span<const TokenId> prefix, std::size_t position, const TokenDistribution* = nullptr) const override {
    const auto upto = prefix.first(std::min(prefix.size(), position + 1));
    return lomax_quantile(unit_interval(hash_sequence(upto, seed_)), alpha_, scale_);
  }

 private:
  double alpha_;
  double scale_;
  std::uint64_t seed_;
};

}  // namespace devcloud::models
