// SPDX-FileCopyrightText: Copyright 2026 The devcloud Authors
// SPDX-License-Identifier: Apache-2.0

// Draft-and-verify kernel and the sampling-aware distribution compression.
//
// Both sides agree on a SamplingMode. The distribution a token is actually
// drawn from is the mode-truncated, renormalized one ("effective"
// distribution); verification compares effective draft and target
// distributions, which is what keeps speculation lossless under top-k/top-p.

#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "devcloud/core.hpp"
#include "devcloud/rng.hpp"

namespace devcloud::specdec {

// Token ids ordered by descending probability, ties by ascending id.
inline std::vector<TokenId> ranked_tokens(const TokenDistribution& dist) {
  std::vector<TokenId> ids(dist.vocab_size());
  std::iota(ids.begin(), ids.end(), 0);
  const auto p = dist.probs();
  std::stable_sort(ids.begin(), ids.end(), [&](TokenId a, TokenId b) { return p[a] > p[b]; });
  return ids;
}

inline CompressedDistribution compress(const TokenDistribution& dist, const SamplingMode& mode) {
  const std::size_t v = dist.vocab_size();
  if (mode.kind == SamplingMode::Kind::kTopK && mode.k > v) {
    throw Error(Errc::kKExceedsVocab, "k=" + std::to_string(mode.k) + " exceeds V=" + std::to_string(v));
  }
  CompressedDistribution out{mode, {}, 0.0};
  const auto p = dist.probs();
  if (mode.kind == SamplingMode::Kind::kTop1) {
    const TokenId t = dist.argmax();
    out.entries.emplace_back(t, p[t]);
  } else {
    const auto ranked = ranked_tokens(dist);
    double mass = 0.0;
    for (TokenId t : ranked) {
      if (p[t] <= 0.0) break;  // zero-probability tokens are never sampled
      if (mode.kind == SamplingMode::Kind::kTopK && out.entries.size() >= mode.k) break;
      if (mode.kind == SamplingMode::Kind::kTopP && !out.entries.empty() && mass >= mode.p) break;
      out.entries.emplace_back(t, p[t]);
      mass += p[t];
    }
  }
  out.residual_mass = std::clamp(1.0 - out.entry_mass(), 0.0, 1.0);
  return out;
}

// The distribution sampling actually draws from: entries renormalized, zero elsewhere.
inline TokenDistribution expand(const CompressedDistribution& c, std::size_t vocab) {
  std::vector<double> w(vocab, 0.0);
  for (const auto& [t, p] : c.entries) {
    if (t >= vocab) throw Error(Errc::kInvalidDistribution, "compressed entry outside vocabulary");
    w[t] = p;
  }
  return TokenDistribution::normalized(std::move(w));
}

inline TokenDistribution effective(const TokenDistribution& dist, const SamplingMode& mode) {
  return expand(compress(dist, mode), dist.vocab_size());
}

// Inverse-CDF draw. Falls back to the last token with mass on rounding overrun.
inline TokenId sample_categorical(const TokenDistribution& dist, Rng& rng) {
  const auto p = dist.probs();
  const double u = rng.uniform();
  double acc = 0.0;
  TokenId last = 0;
  for (std::size_t t = 0; t < p.size(); ++t) {
    if (p[t] <= 0.0) continue;
    acc += p[t];
    last = static_cast<TokenId>(t);
    if (u < acc) return last;
  }
  return last;
}

// Top-1 is deterministic (argmax, lowest id on ties) and draws nothing from rng.
inline TokenId sample(const TokenDistribution& dist, const SamplingMode& mode, Rng& rng) {
  if (mode.kind == SamplingMode::Kind::kTop1) return dist.argmax();
  return sample_categorical(effective(dist, mode), rng);
}

inline double acceptance_probability(double draft_prob, double target_prob) {
  if (!(draft_prob > 0.0)) return 0.0;
  return std::min(1.0, target_prob / draft_prob);
}

// normalize(max(0, q - p)); when q <= p everywhere the residual has no mass and
// q itself is returned.
inline TokenDistribution residual_distribution(const TokenDistribution& draft, const TokenDistribution& target) {
  if (draft.vocab_size() != target.vocab_size()) throw Error(Errc::kLengthMismatch, "vocabulary sizes differ");
  std::vector<double> w(target.vocab_size());
  double sum = 0.0;
  for (std::size_t t = 0; t < w.size(); ++t) {
    w[t] = std::max(0.0, target.probs()[t] - draft.probs()[t]);
    sum += w[t];
  }
  if (!(sum > 0.0)) return target;
  return TokenDistribution::normalized(std::move(w));
}

/// Core acceptance loop. `draft` and `target` are effective distributions,
/// position aligned; `target` may carry one extra entry for the bonus
/// position. Draws one uniform per examined token plus one for the
/// correction/bonus sample.
inline VerificationResult verify_chunk(SessionId session, std::span<const TokenId> drafted,
                                       std::span<const TokenDistribution> draft,
                                       std::span<const TokenDistribution> target, Rng& rng) {
  const std::size_t n = drafted.size();
  if (n == 0) throw Error(Errc::kEmptyChunk, "nothing to verify");
  if (draft.size() != n || (target.size() != n && target.size() != n + 1)) {
    throw Error(Errc::kLengthMismatch, "need one draft and one target distribution per drafted token");
  }
  VerificationResult result{session, 0, std::nullopt, false};
  for (std::size_t i = 0; i < n; ++i) {
    const TokenId x = drafted[i];
    // ZeroDraftProb: acceptance_probability() returns 0, i.e. auto-reject.
    const double accept = acceptance_probability(draft[i][x], target[i][x]);
    if (rng.uniform() < accept) {
      ++result.accepted_count;
      continue;
    }
    result.correction = sample_categorical(residual_distribution(draft[i], target[i]), rng);
    return result;
  }
  if (target.size() == n + 1) {
    result.correction = sample_categorical(target[n], rng);
    result.bonus = true;
  }
  return result;
}

inline VerificationResult verify_with_compressed(SessionId session, std::span<const TokenId> drafted,
                                                 std::span<const CompressedDistribution> draft,
                                                 std::span<const TokenDistribution> target, Rng& rng) {
  if (draft.size() != drafted.size() || target.empty()) {
    throw Error(Errc::kLengthMismatch, "need one compressed distribution per drafted token");
  }
  const std::size_t vocab = target.front().vocab_size();
  std::vector<TokenDistribution> full;
  full.reserve(draft.size());
  for (std::size_t i = 0; i < draft.size(); ++i) {
    if (draft[i].find(drafted[i]) == nullptr) {
      throw Error(Errc::kDraftTokenNotInEntries,
                  "drafted token " + std::to_string(drafted[i]) + " at offset " + std::to_string(i));
    }
    full.push_back(expand(draft[i], vocab));
  }
  return verify_chunk(session, drafted, full, target, rng);
}

/// Cloud entry point: takes raw target distributions, applies the session's
/// sampling mode to both sides and dispatches on how each draft distribution
/// travelled (full or compressed).
inline VerificationResult verify_draft_chunk(const DraftChunk& chunk, std::span<const TokenDistribution> raw_target,
                                             const SamplingMode& mode, Rng& rng) {
  if (raw_target.empty()) throw Error(Errc::kLengthMismatch, "no target distributions");
  const std::size_t vocab = raw_target.front().vocab_size();
  std::vector<TokenDistribution> draft;
  draft.reserve(chunk.size());
  for (const auto& tok : chunk.tokens) {
    if (const auto* full = std::get_if<TokenDistribution>(&tok.dist)) {
      if (full->vocab_size() != vocab) throw Error(Errc::kLengthMismatch, "draft/target vocabulary mismatch");
      draft.push_back(effective(*full, mode));
    } else {
      const auto& c = std::get<CompressedDistribution>(tok.dist);
      if (c.find(tok.token) == nullptr) {
        throw Error(Errc::kDraftTokenNotInEntries, "drafted token " + std::to_string(tok.token));
      }
      draft.push_back(expand(c, vocab));
    }
  }
  std::vector<TokenDistribution> target;
  target.reserve(raw_target.size());
  for (const auto& q : raw_target) target.push_back(effective(q, mode));
  const auto ids = chunk.token_ids();
  return verify_chunk(chunk.session, ids, draft, target, rng);
}

}  // namespace devcloud::specdec
