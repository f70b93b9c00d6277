// SPDX-FileCopyrightText: Copyright 2026 The devcloud Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <map>

#include "devcloud/cloud.hpp"
#include "devcloud/specdec.hpp"

using namespace devcloud;
using namespace devcloud::cloud;

namespace {

std::shared_ptr<const models::LanguageModel> target() {
  models::SyntheticPairSpec spec;
  spec.vocab = 16;
  return models::make_synthetic_target(spec);
}

transport::Hello hello(std::uint32_t max_total = 1000) {
  return transport::Hello{16, 4, SamplingMode::top1(), max_total, std::nullopt};
}

VerificationRequest request(SessionId s, std::uint64_t cached, std::vector<TokenId> uncached, std::size_t n = 4,
                            TokenId tok = 3) {
  std::vector<DraftToken> toks;
  for (std::size_t i = 0; i < n; ++i) {
    toks.push_back(DraftToken{tok, 0.5, 0.1, TokenDistribution::one_hot(16, tok)});
  }
  const auto start = static_cast<std::uint32_t>(cached + uncached.size());
  return VerificationRequest{s, cached, std::move(uncached), DraftChunk::make(s, start, std::move(toks))};
}

struct Client {
  SessionId id;
  std::uint64_t seq = 0;
  transport::WireMessage msg(transport::Payload p) { return {id, ++seq, std::move(p)}; }
};

}  // namespace

TEST(Cost, IterationTime) {
  ComputeCostModel c;
  const std::vector<std::uint32_t> one{4};
  EXPECT_DOUBLE_EQ(c.iteration_ms(one), 400.0);
  const std::vector<std::uint32_t> three{32, 32, 16};
  EXPECT_DOUBLE_EQ(c.iteration_ms(three), 16.0 + 12.0 * 96);
  c.pad_chunks = false;
  EXPECT_DOUBLE_EQ(c.iteration_ms(three), 16.0 + 12.0 * 80);
  c.per_request_ms = 5.0;
  EXPECT_DOUBLE_EQ(c.iteration_ms(one, 3), 16.0 + 48.0 + 15.0);
  c.chunk_size = 0;
  EXPECT_THROW(c.validate(), Error);
}

TEST(Chunking, SplitsTotals) {
  const std::vector<std::uint64_t> req{10, 30, 40};
  EXPECT_EQ(chunk_tokens(req), (std::vector<std::uint32_t>{32, 32, 16}));
  EXPECT_EQ(chunk_tokens(64), (std::vector<std::uint32_t>{32, 32}));
  EXPECT_TRUE(chunk_tokens(0).empty());
  EXPECT_EQ(chunk_tokens(5, 2), (std::vector<std::uint32_t>{2, 2, 1}));
  EXPECT_THROW(chunk_tokens(5, 0), Error);
}

TEST(Scheduler, PrefillsPreempt) {
  RequestPool pool;
  for (std::uint64_t s = 1; s <= 3; ++s) pool.push_verify(PendingVerify{request(SessionId{s}, 4, {}), 0.0});
  pool.push_prefill(PendingPrefill{SessionId{10}, std::vector<TokenId>(20, 1), 0.0});
  pool.push_prefill(PendingPrefill{SessionId{11}, std::vector<TokenId>(20, 1), 0.0});
  auto it = schedule_next(pool);
  EXPECT_EQ(it.kind, ScheduleIteration::Kind::kPrefillBatch);
  EXPECT_EQ(it.members(), 2u);
  EXPECT_EQ(it.chunks, (std::vector<std::uint32_t>{32, 8}));
  it = schedule_next(pool);
  EXPECT_EQ(it.kind, ScheduleIteration::Kind::kVerifyBatch);
  EXPECT_EQ(it.members(), 3u);
  EXPECT_EQ(it.tokens(), 12u);
  EXPECT_EQ(schedule_next(pool).kind, ScheduleIteration::Kind::kIdle);
  EXPECT_TRUE(pool.empty());
}

TEST(Scheduler, OneQueuedRequestPerSession) {
  RequestPool pool;
  pool.push_verify(PendingVerify{request(SessionId{1}, 4, {}), 0.0});
  EXPECT_THROW(pool.push_verify(PendingVerify{request(SessionId{1}, 4, {}), 0.0}), Error);
  EXPECT_THROW(pool.push_prefill(PendingPrefill{SessionId{1}, {1}, 0.0}), Error);
  pool.erase(SessionId{1});
  EXPECT_TRUE(pool.empty());
  EXPECT_NO_THROW(pool.push_prefill(PendingPrefill{SessionId{1}, {1}, 0.0}));
}

TEST(Scheduler, RandomizedInvariants) {
  RequestPool pool;
  Rng rng(17);
  std::map<std::uint64_t, int> queued;
  for (int step = 0; step < 10000; ++step) {
    for (int k = 0; k < 3; ++k) {
      const std::uint64_t s = rng.below(40);
      if (queued.count(s)) continue;
      if (rng.uniform() < 0.2) {
        pool.push_prefill(PendingPrefill{SessionId{s}, std::vector<TokenId>(1 + rng.below(50), 0), 0.0});
        queued[s] = 0;
      } else {
        pool.push_verify(PendingVerify{request(SessionId{s}, 0, std::vector<TokenId>(rng.below(5), 0), 1 + rng.below(4)), 0.0});
        queued[s] = 1;
      }
    }
    const bool had_prefill = pool.prefill_size() > 0;
    const auto before = pool.prefill_size() + pool.verify_size();
    auto it = schedule_next(pool);
    if (before == 0) {
      ASSERT_EQ(it.kind, ScheduleIteration::Kind::kIdle);
      continue;
    }
    ASSERT_EQ(it.kind == ScheduleIteration::Kind::kPrefillBatch, had_prefill);
    ASSERT_TRUE(it.prefills.empty() || it.verifies.empty());
    std::uint64_t expected_tokens = 0;
    for (const auto& p : it.prefills) {
      expected_tokens += p.tokens.size();
      ASSERT_EQ(queued.at(to_underlying(p.session)), 0);
      queued.erase(to_underlying(p.session));
    }
    for (const auto& v : it.verifies) {
      expected_tokens += v.tokens();
      ASSERT_EQ(queued.at(to_underlying(v.request.session)), 1);
      queued.erase(to_underlying(v.request.session));
    }
    ASSERT_EQ(it.tokens(), expected_tokens);
    for (std::size_t i = 0; i + 1 < it.chunks.size(); ++i) ASSERT_EQ(it.chunks[i], kDefaultChunkSize);
  }
}

TEST(Quantile, Interpolates) {
  EXPECT_DOUBLE_EQ(quantile({}, 0.5), 0.0);
  EXPECT_DOUBLE_EQ(quantile({3, 1, 2}, 0.5), 2.0);
  EXPECT_DOUBLE_EQ(quantile({1, 2, 3, 4}, 0.5), 2.5);
  EXPECT_DOUBLE_EQ(quantile({1, 2, 3, 4}, 1.0), 4.0);
  EXPECT_DOUBLE_EQ(quantile({10, 20}, 0.99), 19.9);
}

TEST(Runtime, VerifyParkedUntilPrefill) {
  CloudRuntime cloud(target(), {}, 1);
  Client c{SessionId{3}};
  cloud.on_message(c.msg(hello()), 0.0);
  cloud.on_message(c.msg(transport::PrefillRequest{{1, 2, 3, 4}}), 0.0);
  cloud.on_message(c.msg(request(c.id, 4, {})), 1.0);
  EXPECT_EQ(cloud.pool().verify_size(), 0u);
  auto first = cloud.run_iteration(0.0);
  EXPECT_EQ(first.kind, ScheduleIteration::Kind::kPrefillBatch);
  EXPECT_TRUE(first.responses.empty());
  EXPECT_DOUBLE_EQ(first.duration_ms, 400.0);
  auto second = cloud.run_iteration(first.duration_ms);
  EXPECT_EQ(second.kind, ScheduleIteration::Kind::kVerifyBatch);
  ASSERT_EQ(second.responses.size(), 1u);
  const auto& res = std::get<VerificationResult>(second.responses[0].payload);
  EXPECT_EQ(res.session, c.id);
  EXPECT_EQ(second.responses[0].seq, 1u);
  // Cache holds prompt plus whatever was accepted and corrected.
  const auto* cache = cloud.cache(c.id);
  ASSERT_NE(cache, nullptr);
  EXPECT_EQ(cache->cached_len(), 4 + res.accepted_count + (res.correction ? 1 : 0));
  EXPECT_DOUBLE_EQ(cloud.stats().latency_ms.at(0), 800.0 - 1.0);
}

TEST(Runtime, StaleCachedLengthGetsResync) {
  CloudRuntime cloud(target(), {}, 1);
  Client c{SessionId{3}};
  cloud.on_message(c.msg(hello()), 0.0);
  cloud.on_message(c.msg(transport::PrefillRequest{{1, 2}}), 0.0);
  cloud.run_iteration(0.0);
  cloud.on_message(c.msg(request(c.id, 5, {})), 0.0);
  auto it = cloud.run_iteration(0.0);
  ASSERT_EQ(it.responses.size(), 1u);
  EXPECT_EQ(std::get<transport::Resync>(it.responses[0].payload).cached_len, 2u);
  EXPECT_EQ(cloud.cache(c.id)->cached_len(), 2u);
  cloud.on_message(c.msg(request(c.id, 2, {7, 8, 9})), 0.0);
  it = cloud.run_iteration(0.0);
  ASSERT_TRUE(std::holds_alternative<VerificationResult>(it.responses.at(0).payload));
  const auto toks = cloud.cache(c.id)->tokens();
  EXPECT_EQ(std::vector<TokenId>(toks.begin(), toks.begin() + 5), (std::vector<TokenId>{1, 2, 7, 8, 9}));
}

TEST(Runtime, ProtocolViolations) {
  CloudRuntime cloud(target(), {}, 1);
  Client c{SessionId{3}};
  EXPECT_THROW(cloud.on_message(c.msg(request(c.id, 0, {})), 0.0), Error);  // no Hello
  auto bad = hello();
  bad.vocab_size = 17;
  EXPECT_THROW(cloud.on_message(c.msg(bad), 0.0), Error);
  cloud.on_message(c.msg(hello()), 0.0);
  EXPECT_THROW(cloud.on_message(c.msg(hello()), 0.0), Error);
  EXPECT_THROW(cloud.on_message(transport::WireMessage{c.id, 1, transport::Bye{}}, 0.0), Error);  // replayed seq
  cloud.on_message(c.msg(transport::PrefillRequest{{1}}), 0.0);
  EXPECT_THROW(cloud.on_message(c.msg(transport::PrefillRequest{{1}}), 0.0), Error);
  EXPECT_THROW(cloud.on_message(c.msg(request(c.id, 0, {}, 5)), 0.0), Error);  // longer than gamma
  auto shifted = request(c.id, 0, {});
  shifted.pending.start_pos = 3;
  EXPECT_THROW(cloud.on_message(c.msg(shifted), 0.0), Error);
}

TEST(Runtime, CompressionModeMustMatch) {
  CloudRuntime cloud(target(), {}, 1);
  Client c{SessionId{3}};
  cloud.on_message(c.msg(hello()), 0.0);
  cloud.on_message(c.msg(transport::PrefillRequest{{1}}), 0.0);
  auto req = request(c.id, 1, {});
  for (auto& t : req.pending.tokens) {
    t.dist = specdec::compress(std::get<TokenDistribution>(t.dist), SamplingMode::top_k(2));
  }
  EXPECT_THROW(cloud.on_message(c.msg(req), 0.0), Error);
}

TEST(Runtime, BonusSkippedAtLengthCap) {
  VerificationRequest req = request(SessionId{1}, 6, {});
  EXPECT_TRUE(bonus_allowed(req, hello(11)));
  EXPECT_FALSE(bonus_allowed(req, hello(10)));
  auto h = hello();
  h.eos = TokenId{3};
  EXPECT_FALSE(bonus_allowed(req, h));
}

TEST(Runtime, ConcurrentSessionsAnsweredExactlyOnce) {
  CloudRuntime cloud(target(), {}, 1);
  std::vector<Client> clients;
  for (std::uint64_t s = 1; s <= 10; ++s) clients.push_back(Client{SessionId{s}});
  for (auto& c : clients) {
    cloud.on_message(c.msg(hello()), 0.0);
    cloud.on_message(c.msg(transport::PrefillRequest{{1, 2, 3}}), 0.0);
  }
  // Half the verifies arrive before the prefill batch runs.
  for (std::size_t i = 0; i < 5; ++i) cloud.on_message(clients[i].msg(request(clients[i].id, 3, {})), 0.0);
  std::map<std::uint64_t, int> answers;
  auto drain = [&] {
    double t = 0.0;
    while (cloud.has_work()) {
      auto it = cloud.run_iteration(t);
      t += it.duration_ms;
      for (const auto& r : it.responses) answers[to_underlying(r.session)]++;
    }
  };
  auto it = cloud.run_iteration(0.0);
  EXPECT_EQ(it.kind, ScheduleIteration::Kind::kPrefillBatch);
  EXPECT_EQ(it.members, 10u);
  for (std::size_t i = 5; i < 10; ++i) cloud.on_message(clients[i].msg(request(clients[i].id, 3, {})), 0.0);
  it = cloud.run_iteration(0.0);
  EXPECT_EQ(it.kind, ScheduleIteration::Kind::kVerifyBatch);
  EXPECT_EQ(it.members, 10u);
  for (const auto& r : it.responses) answers[to_underlying(r.session)]++;
  drain();
  ASSERT_EQ(answers.size(), 10u);
  for (const auto& [s, n] : answers) EXPECT_EQ(n, 1) << s;
  EXPECT_EQ(cloud.stats().requests_served, 10u);
  const auto js = cloud.status_json();
  EXPECT_EQ(js["requests_served"], 10);
  EXPECT_DOUBLE_EQ(js["mean_batch_size"].get<double>(), 10.0);
}

TEST(Runtime, ByeDropsQueuedWork) {
  CloudRuntime cloud(target(), {}, 1);
  Client c{SessionId{3}};
  cloud.on_message(c.msg(hello()), 0.0);
  cloud.on_message(c.msg(transport::PrefillRequest{{1}}), 0.0);
  cloud.on_message(c.msg(transport::Bye{}), 0.0);
  EXPECT_FALSE(cloud.has_work());
  EXPECT_EQ(cloud.active_sessions(), 0u);
  EXPECT_EQ(cloud.cache(c.id), nullptr);
}

TEST(Runtime, VerdictsAreSeeded) {
  auto run_once = [] {
    CloudRuntime cloud(target(), {}, 42);
    Client c{SessionId{8}};
    cloud.on_message(c.msg(hello()), 0.0);
    cloud.on_message(c.msg(transport::PrefillRequest{{4, 5}}), 0.0);
    cloud.on_message(c.msg(request(c.id, 2, {}, 4, 1)), 0.0);
    cloud.run_iteration(0.0);
    return std::get<VerificationResult>(cloud.run_iteration(0.0).responses.at(0).payload);
  };
  EXPECT_EQ(run_once(), run_once());
}

TEST(Loopback, DeliversInSimulatedTime) {
  CloudRuntime cloud(target(), {}, 1);
  SimClock clock;
  LoopbackCarrier link(cloud, clock);
  Client c{SessionId{3}};
  link.send(c.msg(hello()));
  link.send(c.msg(transport::PrefillRequest{{1, 2}}));
  link.send(c.msg(request(c.id, 2, {})));
  ASSERT_TRUE(link.next_arrival_ms().has_value());
  EXPECT_FALSE(link.try_receive().has_value());
  const auto m = link.receive();
  EXPECT_TRUE(std::holds_alternative<VerificationResult>(m.payload));
  EXPECT_GT(clock.now_ms(), 800.0);
  EXPECT_THROW(link.receive(), Error);
}

TEST(Loopback, KillTimeFailsLink) {
  CloudRuntime cloud(target(), {}, 1);
  SimClock clock;
  LoopbackCarrier link(cloud, clock, {}, 0, 50.0);
  Client c{SessionId{3}};
  link.send(c.msg(hello()));
  link.send(c.msg(transport::PrefillRequest{{1, 2}}));
  link.send(c.msg(request(c.id, 2, {})));
  EXPECT_THROW(link.receive(), Error);
  EXPECT_GE(clock.now_ms(), 50.0);
  EXPECT_THROW(link.send(c.msg(transport::Bye{})), Error);
}
