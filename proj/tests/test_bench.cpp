// SPDX-FileCopyrightText: Copyright 2026 The devcloud Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "devcloud/bench.hpp"

using namespace devcloud;
using namespace devcloud::bench;
using nlohmann::json;

namespace {

// Small, fast scenario used across tests.
json small() {
  return json{{"name", "small"},
              {"models", {{"vocab", 32}, {"layers", 8}}},
              {"workload", {{"prompt_count", 4}, {"prompt_len", 4}, {"profile_prompts", 4}}},
              {"session", {{"gamma", 4}, {"max_len", 48}, {"budget", 0.5}, {"sampling", "top-k:4"}, {"delta", 4}}},
              {"sessions", {{"count", 3}}}};
}

Scenario scenario(json patch = json::object()) {
  json j = small();
  j.merge_patch(patch);
  return parse_scenario(j);
}

Errc parse_code(const json& patch) {
  try {
    scenario(patch);
  } catch (const Error& e) {
    return e.code();
  }
  return Errc::kOk;
}

std::string parse_message(const json& patch) {
  try {
    scenario(patch);
  } catch (const Error& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(Cost, Formula) {
  EXPECT_NEAR(estimate_cost(6.0, 0.1, 0.2), 0.1 * 0.2 / 6.0, 1e-18);
  EXPECT_NEAR(estimate_cost(6.0, 0.1, 0.2), 0.0033333333333333335, 1e-18);
  EXPECT_DOUBLE_EQ(estimate_cost(1.0, 5.0, 0.2), 1.0);
  EXPECT_DOUBLE_EQ(estimate_cost(3.0, 0.1, 0.0), 0.0);
  // Linear in the offload fraction.
  EXPECT_NEAR(estimate_cost(2.0, 0.3, 0.6), 2 * estimate_cost(2.0, 0.3, 0.3), 1e-15);
  EXPECT_THROW(estimate_cost(0.0, 0.1, 0.1), Error);
  EXPECT_THROW(estimate_cost(1.0, 0.1, 1.1), Error);
}

TEST(Parse, DefaultsAndOverrides) {
  const auto s = scenario({{"cloud", {{"per_request_ms", 7.5}, {"packing_factor", 6}}},
                           {"variant", {{"gating", "conf"}, {"pi", false}}},
                           {"fault", {{"kill_at_ms", 100}}}});
  EXPECT_EQ(s.name, "small");
  EXPECT_EQ(s.models.synthetic.vocab, 32u);
  EXPECT_EQ(s.session.sampling, SamplingMode::top_k(4));
  EXPECT_DOUBLE_EQ(s.cost.per_request_ms, 7.5);
  EXPECT_DOUBLE_EQ(s.packing_factor, 6.0);
  EXPECT_EQ(s.variant.gating, policy::Gating::kConfOnly);
  EXPECT_FALSE(s.variant.pi);
  EXPECT_EQ(s.kill_at_ms, 100.0);
  EXPECT_EQ(s.session_count(), 3u);
  const auto p = scenario({{"sessions", {{"arrival", "poisson"}, {"rate_per_s", 2.0}, {"window_ms", 10000}}}});
  EXPECT_EQ(p.session_count(), 20u);
}

TEST(Parse, DiagnosticsNameTheField) {
  EXPECT_EQ(parse_code({{"session", {{"gamma", "four"}}}}), Errc::kParse);
  EXPECT_NE(parse_message({{"session", {{"gamma", "four"}}}}).find("session.gamma"), std::string::npos);
  EXPECT_NE(parse_message({{"models", {{"kind", "neural"}}}}).find("models.kind"), std::string::npos);
  EXPECT_EQ(parse_code({{"session", {{"sampling", "top-z"}}}}), Errc::kParse);
  EXPECT_EQ(parse_code({{"variant", {{"gating", "sometimes"}}}}), Errc::kParse);
  EXPECT_EQ(parse_code({{"sessions", {{"arrival", "uniform"}}}}), Errc::kParse);
  EXPECT_EQ(parse_code({{"cloud", {{"packing_factor", 0}}}}), Errc::kParse);
  EXPECT_EQ(parse_code({{"channel", 3}}), Errc::kParse);
  EXPECT_NE(parse_code({{"session", {{"budget", 1.5}}}}), Errc::kOk);
  EXPECT_NE(parse_code({{"channel", {{"bandwidth_bps", 0}}}}), Errc::kOk);
}

TEST(Parse, LoadFromFile) {
  const auto dir = std::filesystem::temp_directory_path() / "devcloud_bench_test";
  std::filesystem::create_directories(dir);
  const auto path = dir / "s.json";
  {
    std::ofstream(path) << small().dump();
  }
  const auto s = load_scenario(path.string());
  EXPECT_EQ(s.base_dir, dir.string());
  EXPECT_EQ(s.resolve("t.txt"), (dir / "t.txt").string());
  {
    std::ofstream(path) << "{ not json";
  }
  EXPECT_THROW(load_scenario(path.string()), Error);
  EXPECT_THROW(load_scenario((dir / "missing.json").string()), Error);
  std::filesystem::remove_all(dir);
}

TEST(Parse, ShippedScenariosLoad) {
  const std::filesystem::path dir = std::filesystem::path(DEVCLOUD_SOURCE_DIR) / "scenarios";
  int n = 0;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (e.path().extension() != ".json") continue;
    EXPECT_NO_THROW(load_scenario(e.path().string())) << e.path();
    ++n;
  }
  EXPECT_GE(n, 5);
}

TEST(World, TableAndTraceFromFiles) {
  const auto dir = std::filesystem::temp_directory_path() / "devcloud_world_test";
  std::filesystem::create_directories(dir);
  std::ofstream(dir / "t.txt") << ": 0.5, 0.3, 0.2\n1: 0.1, 0.8, 0.1\n";
  std::ofstream(dir / "d.txt") << ": 0.4, 0.4, 0.2\n";
  std::ofstream(dir / "tr.txt") << "0 0.5\n1 2.0\n";
  json j = small();
  j["models"] = {{"kind", "table"}, {"target_table", "t.txt"}, {"draft_table", "d.txt"}, {"layers", 1}};
  j["importance"] = {{"kind", "trace"}, {"path", "tr.txt"}};
  j["workload"]["prompts"] = {{0, 1}, {2}};
  const auto s = parse_scenario(j, dir.string());
  const auto w = build_world(s);
  EXPECT_EQ(w.target->vocab_size(), 3u);
  EXPECT_EQ(w.draft->layer_count(), 1u);
  EXPECT_EQ(w.prompts.size(), 2u);
  EXPECT_DOUBLE_EQ(w.importance->score(std::vector<TokenId>{0, 0}, 1), 2.0);
  j["workload"]["prompts"] = {{7}};
  EXPECT_THROW(build_world(parse_scenario(j, dir.string())), Error);
  std::filesystem::remove_all(dir);
}

TEST(Run, DeterministicArtifacts) {
  const auto s = scenario();
  auto csv = [&] {
    std::ostringstream out;
    write_tokens_csv(out, run_scenario(s).sessions);
    return out.str();
  };
  const auto a = csv();
  EXPECT_EQ(a, csv());
  EXPECT_EQ(a.substr(0, a.find('\n')), "session,position,token,timestamp_ms,source,fallback");
}

TEST(Run, ReportInvariants) {
  const auto r = run_scenario(scenario());
  const auto& m = r.report;
  EXPECT_EQ(m.sessions, 3u);
  EXPECT_EQ(m.tokens, 3u * 48u);
  EXPECT_NEAR(m.offload_fraction + m.local_fraction + m.fallback_fraction, 1.0, 1e-12);
  EXPECT_GT(m.offloads, 0u);
  EXPECT_EQ(m.requests_served, m.offloads);
  EXPECT_EQ(m.cache_prefix_violations, 0u);
  EXPECT_EQ(m.fallback_count, 0u);
  EXPECT_GT(m.mean_tbt_ms, 0.0);
  EXPECT_GE(m.acceptance_rate, 0.0);
  EXPECT_LE(m.acceptance_rate, 1.0);
  EXPECT_LE(m.mean_layers_per_token, 8.0);
  EXPECT_NEAR(m.estimated_cost, m.mean_tbt_ms / 1000.0 * m.offload_fraction / m.packing_factor, 1e-15);
  for (const auto& sess : r.sessions) {
    EXPECT_EQ(sess.generated.size(), 48u);
    for (std::size_t i = 0; i < sess.records.size(); ++i) EXPECT_EQ(sess.records[i].position, i);
  }
}

TEST(Run, ZeroBudgetStaysLocal) {
  const auto m = run_scenario(scenario({{"session", {{"budget", 0.0}}}})).report;
  EXPECT_EQ(m.offloads, 0u);
  EXPECT_DOUBLE_EQ(m.offload_fraction, 0.0);
  EXPECT_DOUBLE_EQ(m.estimated_cost, 0.0);
  EXPECT_DOUBLE_EQ(m.local_fraction, 1.0);
}

TEST(Run, KillFallsBack) {
  const auto m = run_scenario(scenario({{"session", {{"budget", 0.9}}}, {"fault", {{"kill_at_ms", 400}}}})).report;
  EXPECT_EQ(m.tokens, 3u * 48u);
  EXPECT_GT(m.fallback_count, 0u);
  EXPECT_GT(m.fallback_fraction, 0.0);
  EXPECT_NEAR(m.offload_fraction + m.local_fraction + m.fallback_fraction, 1.0, 1e-12);
}

TEST(Run, LossyChannelCompletes) {
  const auto m =
      run_scenario(scenario({{"session", {{"budget", 0.9}}}, {"channel", {{"loss_rate", 0.3}, {"jitter_ms", 5}}}})).report;
  EXPECT_EQ(m.tokens, 3u * 48u);
}

TEST(Sweep, BudgetIsMonotone) {
  const auto base = scenario({{"sessions", {{"count", 4}}}, {"session", {{"max_len", 96}}}});
  const std::vector<double> budgets{0.0, 0.2, 0.5, 0.8, 1.0};
  const auto rows = sweep(base, Knob::kBudget, budgets);
  ASSERT_EQ(rows.size(), budgets.size());
  for (std::size_t i = 1; i < rows.size(); ++i) {
    EXPECT_GE(rows[i].report.offload_chunk_fraction, rows[i - 1].report.offload_chunk_fraction) << budgets[i];
    EXPECT_GE(rows[i].report.offloads, rows[i - 1].report.offloads) << budgets[i];
  }
  std::ostringstream csv;
  write_sweep_csv(csv, Knob::kBudget, rows);
  const auto text = csv.str();
  EXPECT_EQ(text.rfind("budget,acceptance_rate,", 0), 0u);  // metric columns sorted by name
  EXPECT_NE(text.find(",offload_fraction,"), std::string::npos);
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 6);
}

TEST(Sweep, ExitThresholdTradesLayersForAgreement) {
  const auto base = scenario();
  const std::vector<double> thresholds{0.0, 0.3, 2.0};
  const auto rows = sweep(base, Knob::kExitThreshold, thresholds);
  EXPECT_LE(rows[0].report.mean_layers_per_token, rows[1].report.mean_layers_per_token);
  EXPECT_LE(rows[1].report.mean_layers_per_token, rows[2].report.mean_layers_per_token);
  EXPECT_DOUBLE_EQ(rows[2].report.mean_layers_per_token, 8.0);  // margins never exceed 2
}

TEST(Sweep, CompressionShrinksUplink) {
  const json patch{{"models", {{"vocab", 256}}}, {"session", {{"budget", 1.0}}}, {"variant", {{"pi", false}}}};
  auto on = scenario(patch);
  auto off = on;
  off.variant.compression = false;
  const auto a = run_scenario(on).report;
  const auto b = run_scenario(off).report;
  EXPECT_GT(a.offloads, 0u);
  EXPECT_LT(a.uplink_bytes * 10, b.uplink_bytes);
}

TEST(Sweep, BandwidthRaisesTokenTime) {
  auto base = scenario({{"models", {{"vocab", 256}}}, {"session", {{"budget", 1.0}}}, {"variant", {{"compression", false}}}});
  const std::vector<double> bw{1e5, 1e7};
  const auto rows = sweep(base, Knob::kBandwidth, bw);
  EXPECT_GT(rows[0].report.mean_tbt_ms, rows[1].report.mean_tbt_ms);
}

TEST(Sweep, KnobParsing) {
  EXPECT_EQ(parse_knob("session_rate"), Knob::kSessionRate);
  EXPECT_THROW(parse_knob("speed"), Error);
  auto s = scenario();
  apply_knob(s, Knob::kSessionCount, 7.0);
  EXPECT_EQ(s.sessions.count, 7u);
  EXPECT_THROW(apply_knob(s, Knob::kBudget, 2.0), Error);
}

TEST(Knee, FlatThenSteep) {
  const std::vector<double> x{1, 2, 3, 4, 5};
  const std::vector<double> l{10, 10.5, 11.9, 20, 60};
  const auto k = find_knee(x, l);
  EXPECT_EQ(k.index, 2u);
  EXPECT_DOUBLE_EQ(k.x, 3.0);
  EXPECT_TRUE(k.has_tail);
  EXPECT_TRUE(k.superlinear);
  const std::vector<double> flat{10, 10, 10, 10, 10};
  const auto f = find_knee(x, flat);
  EXPECT_EQ(f.index, 4u);
  EXPECT_FALSE(f.has_tail);
  const std::vector<double> gentle{10, 13, 14, 15, 16};
  EXPECT_FALSE(find_knee(x, gentle).superlinear);
  EXPECT_THROW(find_knee(x, std::vector<double>{1.0}), Error);
}

TEST(Arrivals, PoissonSpacing) {
  auto s = scenario({{"sessions", {{"arrival", "poisson"}, {"rate_per_s", 4.0}, {"window_ms", 1000000}}}});
  const auto a = session_arrivals(s);
  ASSERT_EQ(a.size(), 4000u);
  EXPECT_TRUE(std::is_sorted(a.begin(), a.end()));
  EXPECT_NEAR(a.back() / 1000.0, 1000.0, 60.0);
  const auto burst = session_arrivals(scenario());
  EXPECT_EQ(burst, std::vector<double>(3, 0.0));
}

TEST(Artifacts, WritesThreeFiles) {
  const auto dir = std::filesystem::temp_directory_path() / "devcloud_artifacts_test";
  std::filesystem::remove_all(dir);
  const auto r = run_scenario(scenario());
  write_artifacts(r, dir.string());
  EXPECT_TRUE(std::filesystem::exists(dir / "tokens.csv"));
  std::ifstream js(dir / "sessions.jsonl");
  int lines = 0;
  for (std::string line; std::getline(js, line);) {
    EXPECT_EQ(json::parse(line)["tokens"], 48);
    ++lines;
  }
  EXPECT_EQ(lines, 3);
  std::ifstream rep(dir / "report.json");
  const auto j = json::parse(rep);
  EXPECT_EQ(j["tokens"], 144);
  EXPECT_TRUE(j.contains("cloud"));
  EXPECT_TRUE(j["policy"].contains("i_th"));
  std::filesystem::remove_all(dir);
}
