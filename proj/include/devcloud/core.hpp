// SPDX-FileCopyrightText: Copyright 2026 The devcloud Authors
// SPDX-License-Identifier: Apache-2.0

// Domain types shared by the device runtime, the cloud runtime and the wire
// protocol. Everything here is a value type, immutable once validated.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <variant>
#include <vector>

namespace devcloud {

using TokenId = std::uint32_t;

enum class SessionId : std::uint64_t {};

constexpr std::uint64_t to_underlying(SessionId id) noexcept { return static_cast<std::uint64_t>(id); }

enum class Errc {
  kOk = 0,
  kInvalidDistribution,
  kInvalidConfig,
  kPositionMismatch,
  kEmptyChunk,
  kChunkTooLong,
  kAggregateMismatch,
  kMissingDefaultRow,
  kCorpusTooShort,
  kPositionNotInTrace,
  kKExceedsVocab,
  kLengthMismatch,
  kDraftTokenNotInEntries,
  kDegenerateDistribution,
  kSessionMismatch,
  kCacheDesync,
  kTruncatedFrame,
  kUnknownVersion,
  kUnknownType,
  kMalformedFrame,
  kChannelClosed,
  kTransportFailure,
  kNoFullyAcceptedChunks,
  kEmptyCdf,
  kEOutOfRange,
  kParse,
  kIo,
};

constexpr const char* to_string(Errc e) noexcept {
  switch (e) {
    case Errc::kOk: return "Ok";
    case Errc::kInvalidDistribution: return "InvalidDistribution";
    case Errc::kInvalidConfig: return "InvalidConfig";
    case Errc::kPositionMismatch: return "PositionMismatch";
    case Errc::kEmptyChunk: return "EmptyChunk";
    case Errc::kChunkTooLong: return "ChunkTooLong";
    case Errc::kAggregateMismatch: return "AggregateMismatch";
    case Errc::kMissingDefaultRow: return "MissingDefaultRow";
    case Errc::kCorpusTooShort: return "CorpusTooShort";
    case Errc::kPositionNotInTrace: return "PositionNotInTrace";
    case Errc::kKExceedsVocab: return "KExceedsVocab";
    case Errc::kLengthMismatch: return "LengthMismatch";
    case Errc::kDraftTokenNotInEntries: return "DraftTokenNotInEntries";
    case Errc::kDegenerateDistribution: return "DegenerateDistribution";
    case Errc::kSessionMismatch: return "SessionMismatch";
    case Errc::kCacheDesync: return "CacheDesync";
    case Errc::kTruncatedFrame: return "TruncatedFrame";
    case Errc::kUnknownVersion: return "UnknownVersion";
    case Errc::kUnknownType: return "UnknownType";
    case Errc::kMalformedFrame: return "MalformedFrame";
    case Errc::kChannelClosed: return "ChannelClosed";
    case Errc::kTransportFailure: return "TransportFailure";
    case Errc::kNoFullyAcceptedChunks: return "NoFullyAcceptedChunks";
    case Errc::kEmptyCdf: return "EmptyCdf";
    case Errc::kEOutOfRange: return "EOutOfRange";
    case Errc::kParse: return "Parse";
    case Errc::kIo: return "Io";
  }
  return "Unknown";
}

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

inline constexpr double kNormTolerance = 1e-9;

/// Next-token probability vector over a vocabulary of size V.
class TokenDistribution {
 public:
  TokenDistribution() = default;

  explicit TokenDistribution(std::vector<double> probs) : probs_(std::move(probs)) {
    if (probs_.empty()) throw Error(Errc::kInvalidDistribution, "empty vocabulary");
    double sum = 0.0;
    for (double p : probs_) {
      if (!(p >= 0.0) || !std::isfinite(p)) throw Error(Errc::kInvalidDistribution, "negative or non-finite entry");
      sum += p;
    }
    if (std::abs(sum - 1.0) > kNormTolerance) {
      throw Error(Errc::kInvalidDistribution, "entries sum to " + std::to_string(sum));
    }
  }

  // Scales arbitrary non-negative weights to sum to one.
  static TokenDistribution normalized(std::vector<double> weights) {
    double sum = 0.0;
    for (double w : weights) sum += w;
    if (!(sum > 0.0) || !std::isfinite(sum)) throw Error(Errc::kInvalidDistribution, "weights have no mass");
    for (double& w : weights) w /= sum;
    return TokenDistribution(std::move(weights));
  }

  static TokenDistribution uniform(std::size_t vocab) {
    return TokenDistribution(std::vector<double>(vocab, 1.0 / static_cast<double>(vocab)));
  }

  static TokenDistribution one_hot(std::size_t vocab, TokenId token) {
    std::vector<double> p(vocab, 0.0);
    p.at(token) = 1.0;
    return TokenDistribution(std::move(p));
  }

  std::size_t vocab_size() const noexcept { return probs_.size(); }
  bool empty() const noexcept { return probs_.empty(); }
  double operator[](TokenId t) const { return probs_.at(t); }
  std::span<const double> probs() const noexcept { return probs_; }

  // Ties resolve to the lowest token id.
  TokenId argmax() const {
    return static_cast<TokenId>(std::max_element(probs_.begin(), probs_.end()) - probs_.begin());
  }

  double top1() const { return probs_.empty() ? 0.0 : probs_[argmax()]; }

  // Largest and second-largest probabilities (second is 0 when V == 1).
  std::pair<double, double> top2() const {
    double a = 0.0, b = 0.0;
    for (double p : probs_) {
      if (p > a) {
        b = a;
        a = p;
      } else if (p > b) {
        b = p;
      }
    }
    return {a, b};
  }

  bool operator==(const TokenDistribution&) const = default;

 private:
  std::vector<double> probs_;
};

/// How the drafting side samples; also selects what compression keeps.
struct SamplingMode {
  enum class Kind : std::uint8_t { kTop1 = 0, kTopK = 1, kTopP = 2 };

  Kind kind = Kind::kTop1;
  std::uint32_t k = 1;
  double p = 1.0;

  static SamplingMode top1() { return {Kind::kTop1, 1, 1.0}; }
  static SamplingMode top_k(std::uint32_t k) { return {Kind::kTopK, k, 1.0}; }
  static SamplingMode top_p(double p) { return {Kind::kTopP, 0, p}; }

  bool operator==(const SamplingMode&) const = default;

  std::string to_string() const {
    switch (kind) {
      case Kind::kTop1: return "top-1";
      case Kind::kTopK: return "top-k:" + std::to_string(k);
      case Kind::kTopP: {
        std::string s = std::to_string(p);
        s.erase(s.find_last_not_of('0') + 1);
        if (!s.empty() && s.back() == '.') s.pop_back();
        return "top-p:" + s;
      }
    }
    return "?";
  }

  // Accepts "top-1", "top-k:<k>", "top-p:<p>" and "full" (== top-p:1).
  static SamplingMode parse(const std::string& text) {
    if (text == "top-1" || text == "greedy") return top1();
    if (text == "full") return top_p(1.0);
    try {
      if (text.rfind("top-k:", 0) == 0) {
        const long k = std::stol(text.substr(6));
        if (k < 1) throw Error(Errc::kInvalidConfig, "top-k needs k >= 1");
        return top_k(static_cast<std::uint32_t>(k));
      }
      if (text.rfind("top-p:", 0) == 0) {
        const double p = std::stod(text.substr(6));
        if (!(p > 0.0 && p <= 1.0)) throw Error(Errc::kInvalidConfig, "top-p needs 0 < p <= 1");
        return top_p(p);
      }
    } catch (const std::logic_error&) {
    }
    throw Error(Errc::kInvalidConfig, "unknown sampling mode '" + text + "'");
  }
};

/// The part of a distribution that survives the session's sampling mode.
/// Entries are sorted by descending probability (ties: lowest id first).
struct CompressedDistribution {
  SamplingMode mode;
  std::vector<std::pair<TokenId, double>> entries;
  double residual_mass = 0.0;

  double entry_mass() const {
    double s = 0.0;
    for (const auto& e : entries) s += e.second;
    return s;
  }

  const std::pair<TokenId, double>* find(TokenId t) const {
    for (const auto& e : entries) {
      if (e.first == t) return &e;
    }
    return nullptr;
  }

  bool operator==(const CompressedDistribution&) const = default;
};

using DraftDistribution = std::variant<TokenDistribution, CompressedDistribution>;

struct DraftToken {
  TokenId token = 0;
  double confidence = 0.0;
  double importance = 0.0;
  DraftDistribution dist;

  bool operator==(const DraftToken&) const = default;
};

inline constexpr double kAggregateTolerance = 1e-12;

/// Up to gamma consecutive drafted tokens: the unit of offloading.
struct DraftChunk {
  SessionId session{};
  std::uint32_t start_pos = 0;
  std::vector<DraftToken> tokens;
  double chunk_confidence = 0.0;
  double chunk_importance = 0.0;

  // Builds a chunk whose aggregates are the means of its tokens' scores.
  static DraftChunk make(SessionId session, std::uint32_t start_pos, std::vector<DraftToken> tokens) {
    DraftChunk c{session, start_pos, std::move(tokens), 0.0, 0.0};
    c.chunk_confidence = c.mean_confidence();
    c.chunk_importance = c.mean_importance();
    return c;
  }

  double mean_confidence() const {
    if (tokens.empty()) return 0.0;
    double s = 0.0;
    for (const auto& t : tokens) s += t.confidence;
    return s / static_cast<double>(tokens.size());
  }

  double mean_importance() const {
    if (tokens.empty()) return 0.0;
    double s = 0.0;
    for (const auto& t : tokens) s += t.importance;
    return s / static_cast<double>(tokens.size());
  }

  std::size_t size() const noexcept { return tokens.size(); }

  std::vector<TokenId> token_ids() const {
    std::vector<TokenId> ids;
    ids.reserve(tokens.size());
    for (const auto& t : tokens) ids.push_back(t.token);
    return ids;
  }

  Errc check(std::uint32_t gamma) const {
    if (tokens.empty()) return Errc::kEmptyChunk;
    if (tokens.size() > gamma) return Errc::kChunkTooLong;
    if (std::abs(mean_confidence() - chunk_confidence) > kAggregateTolerance ||
        std::abs(mean_importance() - chunk_importance) > kAggregateTolerance) {
      return Errc::kAggregateMismatch;
    }
    return Errc::kOk;
  }

  bool operator==(const DraftChunk&) const = default;
};

struct VerificationRequest {
  SessionId session{};
  std::uint64_t cached_len = 0;
  std::vector<TokenId> uncached_accepted;
  DraftChunk pending;

  bool operator==(const VerificationRequest&) const = default;
};

/// The cloud's verdict. When every pending token is accepted the cloud still
/// returns one token sampled from the target model; it travels in `correction`
/// with `bonus` set.
struct VerificationResult {
  SessionId session{};
  std::uint32_t accepted_count = 0;
  std::optional<TokenId> correction;
  bool bonus = false;

  bool operator==(const VerificationResult&) const = default;
};

struct SessionConfig {
  std::uint32_t gamma = 4;
  std::uint32_t max_len = 128;
  double budget = 0.2;
  SamplingMode sampling = SamplingMode::top1();
  std::uint32_t delta = 8;
  double seq_exit_fraction = 0.8;
  std::uint64_t seed = 0;
  std::optional<TokenId> eos;

  void validate() const {
    if (gamma < 1) throw Error(Errc::kInvalidConfig, "gamma must be >= 1");
    if (!(budget >= 0.0 && budget <= 1.0)) throw Error(Errc::kInvalidConfig, "budget must lie in [0, 1]");
    if (!(seq_exit_fraction > 0.0 && seq_exit_fraction <= 1.0)) {
      throw Error(Errc::kInvalidConfig, "seq_exit_fraction must lie in (0, 1]");
    }
    if (sampling.kind == SamplingMode::Kind::kTopK && sampling.k < 1) {
      throw Error(Errc::kInvalidConfig, "top-k needs k >= 1");
    }
    if (sampling.kind == SamplingMode::Kind::kTopP && !(sampling.p > 0.0 && sampling.p <= 1.0)) {
      throw Error(Errc::kInvalidConfig, "top-p needs 0 < p <= 1");
    }
  }
};

[[nodiscard]] inline Errc validate_request(const VerificationRequest& req) {
  if (req.pending.tokens.empty()) return Errc::kEmptyChunk;
  if (req.cached_len + req.uncached_accepted.size() != req.pending.start_pos) return Errc::kPositionMismatch;
  return Errc::kOk;
}

}  // namespace devcloud
