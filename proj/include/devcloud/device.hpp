// SPDX-FileCopyrightText: Copyright 2026 The devcloud Authors
// SPDX-License-Identifier: Apache-2.0

// Device-side generation loop.
//
// DeviceSession is a passive state machine: a driver repeatedly asks it for
// the next action (compute for a while, send frames, wait for the cloud, or
// stop) and feeds back completions and inbound frames. The blocking driver
// run_session() below covers one session over any Carrier; the discrete-event
// simulator in bench.hpp drives many sessions against one cloud.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "devcloud/clock.hpp"
#include "devcloud/core.hpp"
#include "devcloud/models.hpp"
#include "devcloud/policy.hpp"
#include "devcloud/rng.hpp"
#include "devcloud/specdec.hpp"
#include "devcloud/transport.hpp"

namespace devcloud::device {

// ---------------------------------------------------------------------------
// Rejection prediction

struct RejectionPrediction {
  std::uint32_t r_star = 0;
  std::vector<double> distribution;
};

// Capped geometric prior over the first rejected offset, damped by each
// token's confidence and renormalized. nullopt when every adjusted mass is 0.
inline std::optional<std::vector<double>> rejection_distribution(std::span<const double> confidences, double alpha) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw Error(Errc::kInvalidConfig, "alpha must lie in (0, 1)");
  const std::size_t gamma = confidences.size();
  if (gamma == 0) throw Error(Errc::kEmptyChunk, "no tokens to predict over");
  std::vector<double> p(gamma);
  double sum = 0.0;
  for (std::size_t t = 0; t < gamma; ++t) {
    const double base = (t + 1 < gamma) ? (1.0 - alpha) * std::pow(alpha, static_cast<double>(t))
                                        : std::pow(alpha, static_cast<double>(gamma));
    p[t] = base * (1.0 - std::clamp(confidences[t], 0.0, 1.0));
    sum += p[t];
  }
  if (!(sum > 0.0)) return std::nullopt;
  for (double& x : p) x /= sum;
  return p;
}

inline RejectionPrediction predict_rejection(std::span<const double> confidences, double alpha, Rng& rng) {
  auto dist = rejection_distribution(confidences, alpha);
  if (!dist) throw Error(Errc::kDegenerateDistribution, "every token has confidence 1");
  const double u = rng.uniform();
  double acc = 0.0;
  std::uint32_t r = static_cast<std::uint32_t>(dist->size() - 1);
  for (std::size_t t = 0; t < dist->size(); ++t) {
    acc += (*dist)[t];
    if (u < acc && (*dist)[t] > 0.0) {
      r = static_cast<std::uint32_t>(t);
      break;
    }
  }
  while ((*dist)[r] <= 0.0 && r > 0) --r;  // rounding overrun lands on a zero tail
  return RejectionPrediction{r, std::move(*dist)};
}

inline RejectionPrediction predict_rejection(const DraftChunk& chunk, double alpha, Rng& rng) {
  std::vector<double> conf;
  conf.reserve(chunk.size());
  for (const auto& t : chunk.tokens) conf.push_back(t.confidence);
  return predict_rejection(conf, alpha, rng);
}

// Replacement for the drafted token: drawn in proportion to probability from
// the local top-3, excluding the drafted token and zero-probability tokens.
inline std::optional<TokenId> sample_alternative(const TokenDistribution& local, TokenId drafted, Rng& rng) {
  const auto ranked = specdec::ranked_tokens(local);
  std::vector<TokenId> cand;
  double mass = 0.0;
  for (std::size_t i = 0; i < ranked.size() && i < 3; ++i) {
    const TokenId t = ranked[i];
    if (t == drafted || !(local[t] > 0.0)) continue;
    cand.push_back(t);
    mass += local[t];
  }
  if (cand.empty()) return std::nullopt;
  const double u = rng.uniform() * mass;
  double acc = 0.0;
  for (TokenId t : cand) {
    acc += local[t];
    if (u < acc) return t;
  }
  return cand.back();
}

// ---------------------------------------------------------------------------
// Local drafting

struct DraftStep {
  TokenId token = 0;
  TokenDistribution dist;
  double confidence = 0.0;
  double importance = 0.0;
  std::uint32_t layers = 1;
};

inline constexpr std::uint64_t kDraftSalt = 0x6472616674ULL;
inline constexpr std::uint64_t kDecisionSalt = 0x646563696465ULL;
inline constexpr std::uint64_t kPredictSalt = 0x70726564ULL;

/// One decoding step of the draft model. Randomness is keyed by the prefix,
/// so the same prefix always drafts the same token under one seed.
class Drafter {
 public:
  Drafter(std::shared_ptr<const models::LanguageModel> model, std::shared_ptr<const models::ImportanceProvider> importance,
          SamplingMode mode, std::uint64_t seed, bool early_exit)
      : model_(std::move(model)), importance_(std::move(importance)), mode_(mode), seed_(seed), early_exit_(early_exit) {
    if (!model_) throw Error(Errc::kInvalidConfig, "draft model missing");
  }

  DraftStep step(std::span<const TokenId> prefix, const policy::OffloadPolicyState& pol) const {
    DraftStep out;
    if (early_exit_ && model_->layer_count() > 1) {
      const auto signals = model_->layer_signals(prefix);
      auto exit = policy::layer_exit(signals, pol);
      out.layers = exit.layers_executed();
      out.dist = std::move(exit.dist);
    } else {
      out.layers = model_->layer_count();
      out.dist = model_->next(prefix);
    }
    Rng rng(hash_sequence(prefix, seed_ ^ kDraftSalt));
    out.token = specdec::sample(out.dist, mode_, rng);
    out.confidence = out.dist.top1();
    if (importance_) {
      std::vector<TokenId> with(prefix.begin(), prefix.end());
      with.push_back(out.token);
      out.importance = importance_->score(with, prefix.size(), &out.dist);
    }
    return out;
  }

  const models::LanguageModel& model() const noexcept { return *model_; }

 private:
  std::shared_ptr<const models::LanguageModel> model_;
  std::shared_ptr<const models::ImportanceProvider> importance_;
  SamplingMode mode_;
  std::uint64_t seed_;
  bool early_exit_;
};

struct SpeculativeBranch {
  std::uint32_t r_star = 0;
  TokenId alternative = 0;
  std::vector<TokenId> continuation;
  std::vector<double> step_ms;  // compute time of each continuation token
};

/// Builds the whole branch at once: alternative at r*, then up to `delta`
/// draft tokens. Returns nullopt when the local top-3 offers no alternative.
inline std::optional<SpeculativeBranch> parallel_continue(std::span<const TokenId> committed, const DraftChunk& chunk,
                                                          const RejectionPrediction& prediction,
                                                          const TokenDistribution& local_at_r, const Drafter& drafter,
                                                          const policy::OffloadPolicyState& pol, std::uint32_t delta,
                                                          Rng& rng) {
  if (prediction.r_star >= chunk.size()) throw Error(Errc::kInvalidConfig, "r* outside chunk");
  const auto alt = sample_alternative(local_at_r, chunk.tokens[prediction.r_star].token, rng);
  if (!alt) return std::nullopt;
  SpeculativeBranch b{prediction.r_star, *alt, {}, {}};
  std::vector<TokenId> prefix(committed.begin(), committed.end());
  for (std::uint32_t i = 0; i < prediction.r_star; ++i) prefix.push_back(chunk.tokens[i].token);
  prefix.push_back(*alt);
  for (std::uint32_t i = 0; i < delta; ++i) {
    const auto s = drafter.step(prefix, pol);
    b.continuation.push_back(s.token);
    b.step_ms.push_back(0.0);
    prefix.push_back(s.token);
  }
  return b;
}

// ---------------------------------------------------------------------------
// Session

enum class TokenSource : std::uint8_t { kLocal, kCloudAccepted, kCloudCorrected, kPiAdopted };

inline const char* to_string(TokenSource s) {
  switch (s) {
    case TokenSource::kLocal: return "local";
    case TokenSource::kCloudAccepted: return "cloud-accepted";
    case TokenSource::kCloudCorrected: return "cloud-corrected";
    case TokenSource::kPiAdopted: return "pi-adopted";
  }
  return "?";
}

struct TokenRecord {
  std::uint32_t position = 0;  // index among generated tokens
  TokenId token = 0;
  double timestamp_ms = 0.0;
  TokenSource source = TokenSource::kLocal;
  bool fallback = false;
};

struct DeviceOptions {
  bool parallel_inference = true;
  bool early_exit = true;
  bool compression = true;
  policy::Gating gating = policy::Gating::kBoth;
  double per_layer_ms = 2.5;
  double alpha = 0.5;  // rejection predictor parameter

  void validate() const {
    if (!(per_layer_ms >= 0.0)) throw Error(Errc::kInvalidConfig, "per_layer_ms must be >= 0");
    if (parallel_inference && !(alpha > 0.0 && alpha < 1.0)) throw Error(Errc::kInvalidConfig, "alpha must lie in (0, 1)");
  }
};

struct DeviceStats {
  std::uint64_t chunks = 0;
  std::uint64_t policy_chunks = 0;  // chunks the offload policy was consulted on
  std::uint64_t offloads = 0;
  std::uint64_t offloaded_draft_tokens = 0;
  std::uint64_t verified_draft_tokens = 0;
  std::uint64_t accepted_tokens = 0;
  std::uint64_t corrections = 0;  // includes bonus tokens
  std::uint64_t bonus_tokens = 0;
  std::uint64_t predictions = 0;
  std::uint64_t hits = 0;
  std::uint64_t adopted_tokens = 0;
  std::uint64_t pi_tokens_computed = 0;
  std::uint64_t pi_tokens_preempted = 0;
  std::uint64_t resyncs = 0;
  std::uint64_t drafted_tokens = 0;
  std::uint64_t layers_executed = 0;  // drafting only
  std::uint64_t messages_sent = 0;
  std::uint64_t bytes_sent = 0;
  double stall_ms = 0.0;
  double masked_ms = 0.0;  // compute time of adopted PI tokens
  double start_ms = 0.0;
  double end_ms = 0.0;
  bool fallback = false;
  std::optional<double> fallback_at_ms;
};

class DeviceSession {
 public:
  struct Action {
    enum class Kind { kCompute, kSend, kAwait, kFinished };
    Kind kind = Kind::kFinished;
    double duration_ms = 0.0;
    bool interruptible = false;  // an inbound frame may cut it short
    std::vector<transport::WireMessage> messages;
  };

  DeviceSession(SessionId id, SessionConfig config, policy::OffloadPolicyState pol, DeviceOptions options,
                std::shared_ptr<const models::LanguageModel> draft,
                std::shared_ptr<const models::ImportanceProvider> importance, std::vector<TokenId> prompt)
      : id_(id),
        config_(config),
        policy_(pol),
        options_(options),
        drafter_(std::move(draft), std::move(importance), config.sampling, config.seed, options.early_exit),
        committed_(std::move(prompt)),
        prompt_len_(committed_.size()) {
    config_.validate();
    policy_.validate();
    options_.validate();
  }

  Action advance(double now_ms) {
    if (work_ != Work::kNone) throw std::logic_error("advance() with compute outstanding");
    if (!started_) {
      started_ = true;
      stats_.start_ms = now_ms;
    }
    for (;;) {
      if (!outbox_.empty()) {
        Action a{Action::Kind::kSend, 0.0, false, std::move(outbox_)};
        outbox_.clear();
        for (auto& m : a.messages) m.seq = ++seq_out_;
        stats_.messages_sent += a.messages.size();
        return a;
      }
      if (finished_) return Action{};
      if (in_flight_) {
        if (branch_can_extend()) return begin_pi_step();
        if (!awaiting_since_) awaiting_since_ = now_ms;
        return Action{Action::Kind::kAwait, 0.0, false, {}};
      }
      if (done()) {
        finished_ = true;
        stats_.end_ms = now_ms;
        if (cloud_open_ && !fallback_) outbox_.push_back(make_msg(transport::Bye{}));
        continue;
      }
      if (!chunk_.empty() && (chunk_.size() >= chunk_target() || is_eos(chunk_.back().token))) {
        decide(now_ms);
        continue;
      }
      return begin_draft_step();
    }
  }

  void complete_compute(double now_ms) {
    switch (work_) {
      case Work::kNone: throw std::logic_error("no compute outstanding");
      case Work::kDraft:
        stats_.drafted_tokens += 1;
        stats_.layers_executed += step_.layers;
        chunk_.push_back(std::move(step_));
        break;
      case Work::kPi:
        stats_.pi_tokens_computed += 1;
        if (branch_) {
          branch_->continuation.push_back(step_.token);
          branch_->step_ms.push_back(work_ms_);
        }
        break;
    }
    work_ = Work::kNone;
    (void)now_ms;
  }

  void deliver(const transport::WireMessage& msg, double now_ms) {
    if (work_ == Work::kPi) {
      stats_.pi_tokens_preempted += 1;  // partial token discarded
      work_ = Work::kNone;
    } else if (work_ == Work::kDraft) {
      throw std::logic_error("frame delivered during non-interruptible compute");
    }
    if (fallback_ || !in_flight_) return;  // stale frame
    if (msg.session != id_) throw Error(Errc::kSessionMismatch, "frame for another session");
    if (const auto* res = std::get_if<VerificationResult>(&msg.payload)) {
      end_await(now_ms);
      merge(*res, now_ms);
    } else if (const auto* rs = std::get_if<transport::Resync>(&msg.payload)) {
      stats_.resyncs += 1;
      if (rs->cached_len > committed_.size()) {
        transport_failed(now_ms);
        return;
      }
      cloud_cached_len_ = rs->cached_len;
      in_flight_ = build_request();
      outbox_.push_back(make_msg(*in_flight_));
    } else if (std::holds_alternative<transport::Bye>(msg.payload)) {
      transport_failed(now_ms);
    }
  }

  struct MergeOutcome {
    std::size_t appended = 0;
    std::size_t adopted = 0;
    bool hit = false;
  };

  MergeOutcome merge(const VerificationResult& res, double now_ms) {
    if (!in_flight_) throw std::logic_error("merge without a request in flight");
    if (res.session != id_) throw Error(Errc::kSessionMismatch, "verdict for another session");
    const std::size_t n = chunk_.size();
    if (res.accepted_count > n || (!res.correction && res.accepted_count < n)) {
      throw Error(Errc::kMalformedFrame, "verdict inconsistent with the pending chunk");
    }
    if (on_verdict) on_verdict(*in_flight_, res);
    MergeOutcome out;
    const std::size_t before = committed_.size();
    out.hit = branch_ && !res.bonus && res.correction && res.accepted_count == branch_->r_star &&
              *res.correction == branch_->alternative;
    for (std::uint32_t i = 0; i < res.accepted_count; ++i) commit(chunk_[i].token, TokenSource::kCloudAccepted, now_ms);
    if (res.correction) commit(*res.correction, TokenSource::kCloudCorrected, now_ms);
    stats_.verified_draft_tokens += n;
    stats_.accepted_tokens += res.accepted_count;
    if (res.correction) stats_.corrections += 1;
    if (res.bonus) stats_.bonus_tokens += 1;
    cloud_cached_len_ = committed_.size();
    if (out.hit) {
      stats_.hits += 1;
      for (std::size_t i = 0; i < branch_->continuation.size() && !done(); ++i) {
        commit(branch_->continuation[i], TokenSource::kPiAdopted, now_ms);
        stats_.adopted_tokens += 1;
        stats_.masked_ms += branch_->step_ms[i];
        out.adopted += 1;
      }
    }
    out.appended = committed_.size() - before;
    chunk_.clear();
    in_flight_.reset();
    branch_.reset();
    if (on_merge) on_merge(*this);
    return out;
  }

  // The link is gone: the pending chunk is kept locally and the rest of the
  // sequence is generated without the cloud.
  void transport_failed(double now_ms) {
    if (fallback_) return;
    fallback_ = true;
    stats_.fallback = true;
    stats_.fallback_at_ms = now_ms;
    outbox_.clear();
    if (work_ == Work::kPi) work_ = Work::kNone;
    end_await(now_ms);
    if (in_flight_) {
      for (const auto& s : chunk_) commit(s.token, TokenSource::kLocal, now_ms);
      chunk_.clear();
      in_flight_.reset();
      branch_.reset();
    }
  }

  // Hooks: every verdict as received, and the session after each merge.
  std::function<void(const VerificationRequest&, const VerificationResult&)> on_verdict;
  std::function<void(const DeviceSession&)> on_merge;

  SessionId id() const noexcept { return id_; }
  const SessionConfig& config() const noexcept { return config_; }
  const DeviceOptions& options() const noexcept { return options_; }
  const DeviceStats& stats() const noexcept { return stats_; }
  const std::vector<TokenRecord>& records() const noexcept { return records_; }
  std::span<const TokenId> committed() const noexcept { return committed_; }
  std::span<const TokenId> generated() const noexcept { return std::span(committed_).subspan(prompt_len_); }
  std::size_t prompt_len() const noexcept { return prompt_len_; }
  std::uint64_t cloud_cached_len() const noexcept { return cloud_cached_len_; }
  bool in_flight() const noexcept { return in_flight_.has_value(); }
  bool finished() const noexcept { return finished_ && outbox_.empty(); }
  bool fallback() const noexcept { return fallback_; }
  const std::optional<SpeculativeBranch>& branch() const noexcept { return branch_; }

 private:
  enum class Work { kNone, kDraft, kPi };

  std::size_t generated_count() const noexcept { return committed_.size() - prompt_len_; }
  bool is_eos(TokenId t) const noexcept { return config_.eos && *config_.eos == t; }
  bool done() const noexcept { return ended_ || generated_count() >= config_.max_len; }

  std::size_t chunk_target() const {
    return std::min<std::size_t>(config_.gamma, config_.max_len - generated_count());
  }

  void commit(TokenId t, TokenSource src, double now_ms) {
    if (done()) return;
    records_.push_back(TokenRecord{static_cast<std::uint32_t>(generated_count()), t, now_ms, src, fallback_});
    committed_.push_back(t);
    if (is_eos(t)) ended_ = true;
  }

  std::vector<TokenId> draft_prefix() const {
    std::vector<TokenId> p(committed_);
    for (const auto& s : chunk_) p.push_back(s.token);
    return p;
  }

  Action begin_draft_step() {
    step_ = drafter_.step(draft_prefix(), policy_);
    work_ = Work::kDraft;
    work_ms_ = step_.layers * options_.per_layer_ms;
    return Action{Action::Kind::kCompute, work_ms_, false, {}};
  }

  bool branch_can_extend() const {
    if (!branch_ || fallback_) return false;
    const auto& b = *branch_;
    if (b.continuation.size() >= config_.delta) return false;
    if (is_eos(b.alternative) || (!b.continuation.empty() && is_eos(b.continuation.back()))) return false;
    return generated_count() + b.r_star + 1 + b.continuation.size() < config_.max_len;
  }

  Action begin_pi_step() {
    std::vector<TokenId> prefix(committed_);
    for (std::uint32_t i = 0; i < branch_->r_star; ++i) prefix.push_back(chunk_[i].token);
    prefix.push_back(branch_->alternative);
    prefix.insert(prefix.end(), branch_->continuation.begin(), branch_->continuation.end());
    step_ = drafter_.step(prefix, policy_);
    work_ = Work::kPi;
    work_ms_ = step_.layers * options_.per_layer_ms;
    return Action{Action::Kind::kCompute, work_ms_, true, {}};
  }

  void decide(double now_ms) {
    stats_.chunks += 1;
    bool offload = false;
    if (!fallback_ && !policy::seq_exit(generated_count(), config_)) {
      double conf = 0.0, imp = 0.0;
      for (const auto& s : chunk_) {
        conf += s.confidence;
        imp += s.importance;
      }
      conf /= static_cast<double>(chunk_.size());
      imp /= static_cast<double>(chunk_.size());
      stats_.policy_chunks += 1;
      Rng rng(hash_sequence(std::span<const TokenId>(draft_prefix()), config_.seed ^ kDecisionSalt));
      offload = policy::decide_offload(conf, imp, policy_, options_.gating, rng) == policy::Decision::kOffload;
    }
    if (!offload) {
      for (const auto& s : chunk_) commit(s.token, TokenSource::kLocal, now_ms);
      chunk_.clear();
      return;
    }
    if (!cloud_open_) {
      transport::Hello hello;
      hello.vocab_size = static_cast<std::uint32_t>(drafter_.model().vocab_size());
      hello.gamma = config_.gamma;
      hello.sampling = config_.sampling;
      hello.max_total_len = static_cast<std::uint32_t>(prompt_len_ + config_.max_len);
      hello.eos = config_.eos;
      outbox_.push_back(make_msg(hello));
      outbox_.push_back(make_msg(transport::PrefillRequest{committed_}));
      cloud_cached_len_ = committed_.size();
      cloud_open_ = true;
    }
    in_flight_ = build_request();
    outbox_.push_back(make_msg(*in_flight_));
    stats_.offloads += 1;
    stats_.offloaded_draft_tokens += chunk_.size();
    if (options_.parallel_inference) start_branch();
  }

  VerificationRequest build_request() const {
    VerificationRequest req;
    req.session = id_;
    req.cached_len = cloud_cached_len_;
    req.uncached_accepted.assign(committed_.begin() + static_cast<std::ptrdiff_t>(cloud_cached_len_), committed_.end());
    std::vector<DraftToken> toks;
    toks.reserve(chunk_.size());
    for (const auto& s : chunk_) {
      DraftToken t{s.token, s.confidence, s.importance, {}};
      if (options_.compression) {
        t.dist = specdec::compress(s.dist, config_.sampling);
      } else {
        t.dist = s.dist;
      }
      toks.push_back(std::move(t));
    }
    req.pending = DraftChunk::make(id_, static_cast<std::uint32_t>(committed_.size()), std::move(toks));
    return req;
  }

  void start_branch() {
    std::vector<double> conf;
    for (const auto& s : chunk_) conf.push_back(s.confidence);
    Rng rng(hash_sequence(std::span<const TokenId>(draft_prefix()), config_.seed ^ kPredictSalt));
    const auto dist = rejection_distribution(conf, options_.alpha);
    if (!dist) return;  // every token certain: no branch
    const auto pred = predict_rejection(conf, options_.alpha, rng);
    stats_.predictions += 1;
    const auto alt = sample_alternative(chunk_[pred.r_star].dist, chunk_[pred.r_star].token, rng);
    if (!alt) return;
    branch_ = SpeculativeBranch{pred.r_star, *alt, {}, {}};
  }

  void end_await(double now_ms) {
    if (awaiting_since_) {
      stats_.stall_ms += now_ms - *awaiting_since_;
      awaiting_since_.reset();
    }
  }

  template <typename P>
  transport::WireMessage make_msg(P payload) const {
    return transport::WireMessage{id_, 0, transport::Payload(std::move(payload))};
  }

  SessionId id_;
  SessionConfig config_;
  policy::OffloadPolicyState policy_;
  DeviceOptions options_;
  Drafter drafter_;
  std::vector<TokenId> committed_;
  std::size_t prompt_len_;
  std::vector<DraftStep> chunk_;
  std::optional<VerificationRequest> in_flight_;
  std::optional<SpeculativeBranch> branch_;
  std::vector<transport::WireMessage> outbox_;
  std::vector<TokenRecord> records_;
  DeviceStats stats_;
  DraftStep step_;
  Work work_ = Work::kNone;
  double work_ms_ = 0.0;
  std::optional<double> awaiting_since_;
  std::uint64_t cloud_cached_len_ = 0;
  std::uint64_t seq_out_ = 0;
  bool cloud_open_ = false;
  bool started_ = false;
  bool finished_ = false;
  bool ended_ = false;
  bool fallback_ = false;
};

// Free-function form of DeviceSession::merge.
inline DeviceSession::MergeOutcome merge(DeviceSession& session, const VerificationResult& result, double now_ms) {
  return session.merge(result, now_ms);
}

namespace detail {

inline bool is_link_error(const Error& e) {
  return e.code() == Errc::kTransportFailure || e.code() == Errc::kChannelClosed;
}

}  // namespace detail

/// Blocking single-session driver. Link failures switch the session to local
/// generation; it always runs to completion.
inline void run_session(DeviceSession& s, transport::Carrier& carrier, Clock& clock) {
  using Kind = DeviceSession::Action::Kind;
  // True when a frame or a link failure reached the session.
  auto poll = [&] {
    try {
      if (auto m = carrier.try_receive()) {
        s.deliver(*m, clock.now_ms());
        return true;
      }
      return false;
    } catch (const Error& e) {
      if (!detail::is_link_error(e)) throw;
      s.transport_failed(clock.now_ms());
      return true;
    }
  };
  for (;;) {
    auto a = s.advance(clock.now_ms());
    switch (a.kind) {
      case Kind::kFinished:
        return;
      case Kind::kSend:
        if (s.fallback()) break;
        try {
          for (const auto& m : a.messages) carrier.send(m);
        } catch (const Error& e) {
          if (!detail::is_link_error(e)) throw;
          s.transport_failed(clock.now_ms());
        }
        break;
      case Kind::kCompute: {
        const double deadline = clock.now_ms() + a.duration_ms;
        const auto arrival = a.interruptible ? carrier.next_arrival_ms() : std::nullopt;
        if (arrival && *arrival < deadline) {
          clock.advance_to(*arrival);
          if (poll()) break;
        }
        clock.advance_to(deadline);
        s.complete_compute(clock.now_ms());
        if (a.interruptible) (void)poll();
        break;
      }
      case Kind::kAwait:
        try {
          auto m = carrier.receive();
          s.deliver(m, clock.now_ms());
        } catch (const Error& e) {
          if (!detail::is_link_error(e)) throw;
          s.transport_failed(clock.now_ms());
        }
        break;
    }
  }
}

}  // namespace devcloud::device
