// SPDX-FileCopyrightText: Copyright 2026 The devcloud Authors
// SPDX-License-Identifier: Apache-2.0

// Cloud runtime: request pool, iteration scheduler, chunked partial prefill
// over a per-session token cache, and a compute-cost model standing in for
// accelerator time.

#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <thread>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "devcloud/clock.hpp"
#include "devcloud/core.hpp"
#include "devcloud/models.hpp"
#include "devcloud/rng.hpp"
#include "devcloud/specdec.hpp"
#include "devcloud/transport.hpp"

namespace devcloud::cloud {

inline constexpr std::uint32_t kDefaultChunkSize = 32;

struct ComputeCostModel {
  double per_token_ms = 12.0;
  double fixed_iteration_ms = 16.0;
  std::uint32_t chunk_size = kDefaultChunkSize;
  bool pad_chunks = true;  // a partially filled chunk costs as much as a full one
  double per_request_ms = 0.0;  // per batch member (cache gather, sampling)

  void validate() const {
    if (!(per_token_ms >= 0.0) || !(fixed_iteration_ms >= 0.0) || !(per_request_ms >= 0.0)) {
      throw Error(Errc::kInvalidConfig, "cost model terms must be >= 0");
    }
    if (chunk_size < 1) throw Error(Errc::kInvalidConfig, "chunk_size must be >= 1");
  }

  double iteration_ms(std::span<const std::uint32_t> chunks, std::size_t members = 0) const {
    double tokens = 0.0;
    for (auto c : chunks) tokens += pad_chunks ? chunk_size : c;
    return fixed_iteration_ms + per_token_ms * tokens + per_request_ms * static_cast<double>(members);
  }
};

// Splits `total` tokens into chunks of `chunk_size`; only the last may be short.
inline std::vector<std::uint32_t> chunk_tokens(std::uint64_t total, std::uint32_t chunk_size = kDefaultChunkSize) {
  if (chunk_size == 0) throw Error(Errc::kInvalidConfig, "chunk_size must be >= 1");
  std::vector<std::uint32_t> out(total / chunk_size, chunk_size);
  if (const auto rest = total % chunk_size; rest != 0) out.push_back(static_cast<std::uint32_t>(rest));
  return out;
}

inline std::vector<std::uint32_t> chunk_tokens(std::span<const std::uint64_t> per_request,
                                               std::uint32_t chunk_size = kDefaultChunkSize) {
  std::uint64_t total = 0;
  for (auto n : per_request) total += n;
  return chunk_tokens(total, chunk_size);
}

// ---------------------------------------------------------------------------
// Request pool and scheduling

struct PendingPrefill {
  SessionId session{};
  std::vector<TokenId> tokens;
  double arrival_ms = 0.0;
};

struct PendingVerify {
  VerificationRequest request;
  double arrival_ms = 0.0;

  std::uint64_t tokens() const { return request.uncached_accepted.size() + request.pending.size(); }
};

class RequestPool {
 public:
  void push_prefill(PendingPrefill p) {
    claim(p.session);
    prefill_.push_back(std::move(p));
  }

  void push_verify(PendingVerify v) {
    claim(v.request.session);
    verify_.push_back(std::move(v));
  }

  bool queued(SessionId s) const { return members_.count(to_underlying(s)) != 0; }
  bool empty() const noexcept { return prefill_.empty() && verify_.empty(); }
  std::size_t prefill_size() const noexcept { return prefill_.size(); }
  std::size_t verify_size() const noexcept { return verify_.size(); }

  void erase(SessionId s) {
    std::erase_if(prefill_, [&](const PendingPrefill& p) { return p.session == s; });
    std::erase_if(verify_, [&](const PendingVerify& v) { return v.request.session == s; });
    members_.erase(to_underlying(s));
  }

 private:
  friend struct Scheduler;

  void claim(SessionId s) {
    if (!members_.insert(to_underlying(s)).second) {
      throw Error(Errc::kInvalidConfig, "session " + std::to_string(to_underlying(s)) + " already queued");
    }
  }

  std::deque<PendingPrefill> prefill_;
  std::deque<PendingVerify> verify_;
  std::set<std::uint64_t> members_;
};

struct ScheduleIteration {
  enum class Kind { kIdle, kPrefillBatch, kVerifyBatch };

  Kind kind = Kind::kIdle;
  std::vector<PendingPrefill> prefills;
  std::vector<PendingVerify> verifies;
  std::vector<std::uint32_t> chunks;

  std::size_t members() const noexcept { return prefills.size() + verifies.size(); }
  std::uint64_t tokens() const {
    std::uint64_t n = 0;
    for (auto c : chunks) n += c;
    return n;
  }
};

inline const char* to_string(ScheduleIteration::Kind k) {
  switch (k) {
    case ScheduleIteration::Kind::kIdle: return "idle";
    case ScheduleIteration::Kind::kPrefillBatch: return "prefill";
    case ScheduleIteration::Kind::kVerifyBatch: return "verify";
  }
  return "?";
}

struct Scheduler {
  // Queued prefills always win; verification runs only when none are queued.
  static ScheduleIteration next(RequestPool& pool, std::uint32_t chunk_size) {
    ScheduleIteration it;
    std::vector<std::uint64_t> counts;
    if (!pool.prefill_.empty()) {
      it.kind = ScheduleIteration::Kind::kPrefillBatch;
      for (auto& p : pool.prefill_) {
        counts.push_back(p.tokens.size());
        pool.members_.erase(to_underlying(p.session));
        it.prefills.push_back(std::move(p));
      }
      pool.prefill_.clear();
    } else if (!pool.verify_.empty()) {
      it.kind = ScheduleIteration::Kind::kVerifyBatch;
      for (auto& v : pool.verify_) {
        counts.push_back(v.tokens());
        pool.members_.erase(to_underlying(v.request.session));
        it.verifies.push_back(std::move(v));
      }
      pool.verify_.clear();
    }
    it.chunks = chunk_tokens(counts, chunk_size);
    return it;
  }
};

inline ScheduleIteration schedule_next(RequestPool& pool, std::uint32_t chunk_size = kDefaultChunkSize) {
  return Scheduler::next(pool, chunk_size);
}

// ---------------------------------------------------------------------------
// Session state

class SessionCache {
 public:
  SessionCache() = default;
  explicit SessionCache(SessionId s) : session_(s) {}

  SessionId session() const noexcept { return session_; }
  std::span<const TokenId> tokens() const noexcept { return tokens_; }
  std::uint64_t cached_len() const noexcept { return tokens_.size(); }

  void extend(std::span<const TokenId> more) { tokens_.insert(tokens_.end(), more.begin(), more.end()); }
  void push(TokenId t) { tokens_.push_back(t); }

 private:
  SessionId session_{};
  std::vector<TokenId> tokens_;
};

struct SessionState {
  transport::Hello hello;
  SessionCache cache;
  Rng rng;
  bool prefilled = false;
  std::optional<PendingVerify> parked;  // arrived while the prefill was queued
  std::uint64_t seq_out = 0;
};

using SessionRegistry = std::map<std::uint64_t, SessionState>;

// Bonus position is skipped when the chunk reaches the session's length cap
// or ends in the end-of-sequence token.
inline bool bonus_allowed(const VerificationRequest& req, const transport::Hello& hello) {
  const auto& chunk = req.pending;
  if (static_cast<std::uint64_t>(chunk.start_pos) + chunk.size() >= hello.max_total_len) return false;
  if (hello.eos && !chunk.tokens.empty() && chunk.tokens.back().token == *hello.eos) return false;
  return true;
}

struct PartialPrefillOutput {
  std::vector<TokenDistribution> target;  // one per pending token, plus the bonus position when allowed
};

struct CacheDesync {
  std::uint64_t cached_len = 0;  // the registry's view
};

using PrefillOutcome = std::variant<PartialPrefillOutput, CacheDesync>;

/// Forwards uncached + pending tokens of every member on top of its cached
/// prefix. Members with a stale cached_len are answered with the registry's
/// length and left untouched.
inline std::vector<PrefillOutcome> execute_partial_prefill(std::span<const PendingVerify> batch, SessionRegistry& registry,
                                                           const models::LanguageModel& engine) {
  std::vector<PrefillOutcome> out;
  out.reserve(batch.size());
  for (const auto& member : batch) {
    const auto& req = member.request;
    auto& state = registry.at(to_underlying(req.session));
    if (req.cached_len != state.cache.cached_len()) {
      out.emplace_back(CacheDesync{state.cache.cached_len()});
      continue;
    }
    state.cache.extend(req.uncached_accepted);
    std::vector<TokenId> ctx(state.cache.tokens().begin(), state.cache.tokens().end());
    PartialPrefillOutput res;
    const std::size_t n = req.pending.size();
    const std::size_t positions = n + (bonus_allowed(req, state.hello) ? 1 : 0);
    for (std::size_t i = 0; i < positions; ++i) {
      res.target.push_back(engine.next(ctx));
      if (i < n) ctx.push_back(req.pending.tokens[i].token);
    }
    out.emplace_back(std::move(res));
  }
  return out;
}

inline VerificationResult verify_and_respond(const VerificationRequest& req, std::span<const TokenDistribution> target,
                                             SessionState& state) {
  auto res = specdec::verify_draft_chunk(req.pending, target, state.hello.sampling, state.rng);
  for (std::uint32_t i = 0; i < res.accepted_count; ++i) state.cache.push(req.pending.tokens[i].token);
  if (res.correction) state.cache.push(*res.correction);
  return res;
}

// ---------------------------------------------------------------------------
// Runtime

struct CloudStats {
  std::uint64_t requests_served = 0;
  std::uint64_t prefills_served = 0;
  std::uint64_t resyncs = 0;
  std::uint64_t verify_iterations = 0;
  std::uint64_t prefill_iterations = 0;
  std::uint64_t verify_members = 0;
  std::uint64_t chunks = 0;
  std::uint64_t chunk_tokens = 0;
  double busy_ms = 0.0;
  std::vector<double> latency_ms;  // per verification request, arrival to response
};

// Linear interpolation between order statistics.
inline double quantile(std::vector<double> xs, double q) {
  if (xs.empty()) return 0.0;
  std::sort(xs.begin(), xs.end());
  const double pos = q * static_cast<double>(xs.size() - 1);
  const auto lo = static_cast<std::size_t>(pos);
  const std::size_t hi = std::min(lo + 1, xs.size() - 1);
  return xs[lo] + (pos - static_cast<double>(lo)) * (xs[hi] - xs[lo]);
}

class CloudRuntime {
 public:
  struct Iteration {
    ScheduleIteration::Kind kind = ScheduleIteration::Kind::kIdle;
    double duration_ms = 0.0;
    std::size_t members = 0;
    std::uint64_t tokens = 0;
    std::vector<transport::WireMessage> responses;
  };

  CloudRuntime(std::shared_ptr<const models::LanguageModel> engine, ComputeCostModel cost = {}, std::uint64_t seed = 0)
      : engine_(std::move(engine)), cost_(cost), seed_(seed) {
    if (!engine_) throw Error(Errc::kInvalidConfig, "cloud needs a target model");
    cost_.validate();
  }

  /// Ingress. Returns frames to send back right away (none in the normal
  /// flow); throws on protocol violations by this session.
  std::vector<transport::WireMessage> on_message(const transport::WireMessage& msg, double now_ms) {
    inbound_.accept(msg);
    const auto key = to_underlying(msg.session);
    std::vector<transport::WireMessage> out;
    std::visit(
        [&](const auto& body) {
          using T = std::decay_t<decltype(body)>;
          if constexpr (std::is_same_v<T, transport::Hello>) {
            if (body.vocab_size != engine_->vocab_size()) {
              throw Error(Errc::kInvalidConfig, "vocabulary mismatch: device " + std::to_string(body.vocab_size) +
                                                    ", cloud " + std::to_string(engine_->vocab_size()));
            }
            if (body.gamma < 1) throw Error(Errc::kInvalidConfig, "gamma must be >= 1");
            if (registry_.count(key)) throw Error(Errc::kInvalidConfig, "duplicate Hello");
            registry_.emplace(key, SessionState{body, SessionCache(msg.session), Rng(seed_).fork(key), false, {}, 0});
          } else if constexpr (std::is_same_v<T, transport::PrefillRequest>) {
            auto& st = state(msg.session);
            if (st.prefilled || pool_.queued(msg.session)) throw Error(Errc::kInvalidConfig, "duplicate prefill");
            pool_.push_prefill(PendingPrefill{msg.session, body.tokens, now_ms});
          } else if constexpr (std::is_same_v<T, VerificationRequest>) {
            auto& st = state(msg.session);
            if (const auto ec = validate_request(body); ec != Errc::kOk) throw Error(ec, "invalid verification request");
            if (const auto ec = body.pending.check(st.hello.gamma); ec != Errc::kOk) throw Error(ec, "invalid chunk");
            for (const auto& t : body.pending.tokens) {
              const auto* c = std::get_if<CompressedDistribution>(&t.dist);
              if (c && !(c->mode == st.hello.sampling)) {
                throw Error(Errc::kInvalidConfig, "compression mode differs from the session's sampling mode");
              }
            }
            PendingVerify pv{body, now_ms};
            if (!st.prefilled) {
              if (st.parked) throw Error(Errc::kInvalidConfig, "second request before prefill");
              st.parked = std::move(pv);
            } else {
              pool_.push_verify(std::move(pv));
            }
          } else if constexpr (std::is_same_v<T, transport::Bye>) {
            drop_session(msg.session);
          } else {
            throw Error(Errc::kUnknownType, std::string("unexpected ") + transport::to_string(msg.type()) + " from device");
          }
        },
        msg.payload);
    return out;
  }

  bool has_work() const noexcept { return !pool_.empty(); }

  Iteration run_iteration(double start_ms) {
    auto it = schedule_next(pool_, cost_.chunk_size);
    Iteration out;
    out.kind = it.kind;
    out.members = it.members();
    out.tokens = it.tokens();
    if (it.kind == ScheduleIteration::Kind::kIdle) return out;
    out.duration_ms = cost_.iteration_ms(it.chunks, out.members);
    const double end_ms = start_ms + out.duration_ms;
    stats_.busy_ms += out.duration_ms;
    stats_.chunks += it.chunks.size();
    stats_.chunk_tokens += out.tokens;
    if (it.kind == ScheduleIteration::Kind::kPrefillBatch) {
      stats_.prefill_iterations += 1;
      for (auto& p : it.prefills) {
        auto found = registry_.find(to_underlying(p.session));
        if (found == registry_.end()) continue;  // session left meanwhile
        auto& st = found->second;
        st.cache.extend(p.tokens);
        st.prefilled = true;
        stats_.prefills_served += 1;
        if (st.parked) {
          pool_.push_verify(std::move(*st.parked));
          st.parked.reset();
        }
      }
      return out;
    }
    stats_.verify_iterations += 1;
    stats_.verify_members += it.verifies.size();
    // Members whose session left are dropped before the forward pass.
    std::erase_if(it.verifies, [&](const PendingVerify& v) { return !registry_.count(to_underlying(v.request.session)); });
    const auto outcomes = execute_partial_prefill(it.verifies, registry_, *engine_);
    for (std::size_t i = 0; i < it.verifies.size(); ++i) {
      const auto& req = it.verifies[i].request;
      auto& st = registry_.at(to_underlying(req.session));
      if (const auto* d = std::get_if<CacheDesync>(&outcomes[i])) {
        stats_.resyncs += 1;
        out.responses.push_back(reply(req.session, st, transport::Resync{d->cached_len}));
        continue;
      }
      const auto& target = std::get<PartialPrefillOutput>(outcomes[i]).target;
      auto res = verify_and_respond(req, target, st);
      stats_.requests_served += 1;
      stats_.latency_ms.push_back(end_ms - it.verifies[i].arrival_ms);
      out.responses.push_back(reply(req.session, st, std::move(res)));
    }
    return out;
  }

  void drop_session(SessionId s) {
    registry_.erase(to_underlying(s));
    pool_.erase(s);
    inbound_.forget(s);
  }

  const SessionCache* cache(SessionId s) const {
    auto it = registry_.find(to_underlying(s));
    return it == registry_.end() ? nullptr : &it->second.cache;
  }

  const CloudStats& stats() const noexcept { return stats_; }
  const ComputeCostModel& cost_model() const noexcept { return cost_; }
  const RequestPool& pool() const noexcept { return pool_; }
  std::size_t active_sessions() const noexcept { return registry_.size(); }

  nlohmann::json status_json() const {
    const double iters = static_cast<double>(stats_.verify_iterations);
    const double chunks = static_cast<double>(stats_.chunks);
    return nlohmann::json{
        {"requests_served", stats_.requests_served},
        {"prefills_served", stats_.prefills_served},
        {"resyncs", stats_.resyncs},
        {"active_sessions", registry_.size()},
        {"mean_batch_size", iters > 0 ? static_cast<double>(stats_.verify_members) / iters : 0.0},
        {"mean_chunk_fill", chunks > 0 ? static_cast<double>(stats_.chunk_tokens) / (chunks * cost_.chunk_size) : 0.0},
        {"p50_latency_ms", quantile(stats_.latency_ms, 0.5)},
        {"p99_latency_ms", quantile(stats_.latency_ms, 0.99)},
        {"busy_ms", stats_.busy_ms},
    };
  }

 private:
  SessionState& state(SessionId s) {
    auto it = registry_.find(to_underlying(s));
    if (it == registry_.end()) throw Error(Errc::kSessionMismatch, "no Hello for session " + std::to_string(to_underlying(s)));
    return it->second;
  }

  template <typename P>
  static transport::WireMessage reply(SessionId s, SessionState& st, P payload) {
    if constexpr (std::is_same_v<P, VerificationResult>) payload.session = s;
    return transport::WireMessage{s, ++st.seq_out, transport::Payload(std::move(payload))};
  }

  std::shared_ptr<const models::LanguageModel> engine_;
  ComputeCostModel cost_;
  std::uint64_t seed_;
  RequestPool pool_;
  SessionRegistry registry_;
  transport::SeqTracker inbound_;
  CloudStats stats_;
};

// ---------------------------------------------------------------------------
// In-process carrier: one device session, a dedicated cloud, simulated links.

class LoopbackCarrier final : public transport::Carrier {
 public:
  LoopbackCarrier(CloudRuntime& cloud, SimClock& clock, transport::ChannelModel link = {}, std::uint64_t seed = 0,
                  std::optional<double> kill_at_ms = std::nullopt)
      : cloud_(cloud), clock_(clock), up_(link, mix64(seed)), down_(link, mix64(seed + 1)), kill_at_(kill_at_ms) {}

  void send(const transport::WireMessage& msg) override {
    const double now = clock_.now_ms();
    if (dead(now)) throw Error(Errc::kTransportFailure, "link down");
    const auto bytes = transport::encode(msg);
    const auto d = up_.send(bytes.size(), now);
    if (d.lost || dead(d.at_ms)) return;
    process(transport::decode(bytes).message, d.at_ms);
  }

  transport::WireMessage receive() override {
    if (inbox_.empty()) {
      if (kill_at_) clock_.advance_to(*kill_at_);
      throw Error(Errc::kTransportFailure, kill_at_ ? "link down" : "nothing in flight");
    }
    auto [at, bytes] = std::move(inbox_.front());
    inbox_.pop_front();
    clock_.advance_to(at);
    return transport::decode(bytes).message;
  }

  std::optional<transport::WireMessage> try_receive() override {
    const double now = clock_.now_ms();
    if (!inbox_.empty() && inbox_.front().first <= now) return receive();
    if (dead(now)) throw Error(Errc::kTransportFailure, "link down");
    return std::nullopt;
  }

  void close() override {
    up_.close();
    down_.close();
  }

  std::optional<double> next_arrival_ms() const override {
    if (!inbox_.empty()) return inbox_.front().first;
    return kill_at_;
  }

  const transport::SimChannel& uplink() const noexcept { return up_; }
  const transport::SimChannel& downlink() const noexcept { return down_; }

 private:
  bool dead(double t) const { return kill_at_ && t >= *kill_at_; }

  // The cloud serves only this session, so it can run eagerly at arrival time.
  void process(const transport::WireMessage& msg, double at) {
    for (auto& r : cloud_.on_message(msg, at)) respond(r, at);
    while (cloud_.has_work()) {
      const double start = std::max(at, cloud_free_);
      auto it = cloud_.run_iteration(start);
      cloud_free_ = start + it.duration_ms;
      for (auto& r : it.responses) respond(r, cloud_free_);
    }
  }

  void respond(const transport::WireMessage& msg, double at) {
    auto bytes = transport::encode(msg);
    const auto d = down_.send(bytes.size(), at);
    if (d.lost || dead(d.at_ms)) return;
    inbox_.emplace_back(d.at_ms, std::move(bytes));
  }

  CloudRuntime& cloud_;
  SimClock& clock_;
  transport::SimChannel up_;
  transport::SimChannel down_;
  std::optional<double> kill_at_;
  double cloud_free_ = 0.0;
  std::deque<std::pair<double, std::vector<std::uint8_t>>> inbox_;
};

// ---------------------------------------------------------------------------
// Socket server

struct ServeOptions {
  bool emulate_compute = true;  // sleep for the cost model's iteration time
  std::string status_path;      // rewritten after every iteration when set
  std::ostream* log = &std::cerr;
};

/// Accepts device connections and runs the scheduler until `stop` is set.
/// Each connection carries one session; per-connection errors close that
/// connection only.
inline void serve_loop(CloudRuntime& cloud, transport::TcpListener& listener, const std::atomic<bool>& stop,
                       const ServeOptions& opt = {}) {
  struct Conn {
    transport::TcpStream stream;
    std::thread reader;
    std::optional<SessionId> session;
    std::atomic<bool> closed{false};
  };
  std::mutex mu;
  std::condition_variable cv;
  std::deque<std::pair<std::shared_ptr<Conn>, std::vector<std::uint8_t>>> ingress;
  std::vector<std::shared_ptr<Conn>> conns;
  std::map<std::uint64_t, std::shared_ptr<Conn>> by_session;
  WallClock clock;

  auto log = [&](const std::string& line) {
    if (opt.log) *opt.log << "[cloud] " << line << std::endl;
  };

  std::thread acceptor([&] {
    while (!stop.load()) {
      auto s = listener.accept(100);
      if (!s) continue;
      auto c = std::make_shared<Conn>();
      c->stream = std::move(*s);
      c->reader = std::thread([&, c] {
        try {
          while (auto frame = c->stream.read_frame()) {
            std::lock_guard lock(mu);
            ingress.emplace_back(c, std::move(*frame));
            cv.notify_one();
          }
        } catch (const std::exception& e) {
          if (!stop.load()) log(std::string("read: ") + e.what());
        }
        c->closed = true;
        std::lock_guard lock(mu);
        ingress.emplace_back(c, std::vector<std::uint8_t>{});  // close marker
        cv.notify_one();
      });
      std::lock_guard lock(mu);
      conns.push_back(c);
    }
  });

  auto send_to = [&](const transport::WireMessage& m) {
    auto it = by_session.find(to_underlying(m.session));
    if (it == by_session.end() || it->second->closed) return;
    try {
      it->second->stream.write_frame(transport::encode(m));
    } catch (const std::exception& e) {
      log("write: " + std::string(e.what()));
    }
  };

  auto drop = [&](const std::shared_ptr<Conn>& c) {
    if (c->session) {
      cloud.drop_session(*c->session);
      by_session.erase(to_underlying(*c->session));
    }
    c->stream.shutdown();
  };

  while (!stop.load()) {
    std::deque<std::pair<std::shared_ptr<Conn>, std::vector<std::uint8_t>>> batch;
    {
      std::unique_lock lock(mu);
      cv.wait_for(lock, std::chrono::milliseconds(cloud.has_work() ? 0 : 50),
                  [&] { return !ingress.empty() || stop.load(); });
      batch.swap(ingress);
    }
    for (auto& [c, frame] : batch) {
      if (frame.empty()) {
        drop(c);
        continue;
      }
      try {
        auto msg = transport::decode(frame).message;
        if (!c->session) {
          c->session = msg.session;
          by_session[to_underlying(msg.session)] = c;
        } else if (*c->session != msg.session) {
          throw Error(Errc::kSessionMismatch, "one session per connection");
        }
        for (auto& r : cloud.on_message(msg, clock.now_ms())) send_to(r);
      } catch (const std::exception& e) {
        log(std::string("session error: ") + e.what());
        drop(c);
      }
    }
    if (cloud.has_work()) {
      auto it = cloud.run_iteration(clock.now_ms());
      if (opt.emulate_compute) clock.advance(it.duration_ms);
      for (auto& r : it.responses) send_to(r);
      if (!opt.status_path.empty()) {
        std::ofstream out(opt.status_path);
        out << cloud.status_json().dump(2) << "\n";
      }
    }
  }

  acceptor.join();
  std::vector<std::shared_ptr<Conn>> all;
  {
    std::lock_guard lock(mu);
    all = conns;
  }
  for (auto& c : all) c->stream.shutdown();
  for (auto& c : all) {
    if (c->reader.joinable()) c->reader.join();
  }
}

}  // namespace devcloud::cloud
