// SPDX-FileCopyrightText: Copyright 2026 The devcloud Authors
// SPDX-License-Identifier: Apache-2.0

// Command-line front end: profile, run, sweep, serve, device.

#include <atomic>
#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include "devcloud/devcloud.hpp"

using namespace devcloud;

namespace {

std::atomic<bool> g_stop{false};

void on_signal(int) { g_stop = true; }

bench::Scenario load(const std::string& path, std::optional<std::uint64_t> seed) {
  bench::Scenario s = path.empty() ? bench::parse_scenario(nlohmann::json::object()) : bench::load_scenario(path);
  if (seed) {
    s.workload.seed = *seed;
    s.session.seed = mix64(*seed ^ 0x73657373ULL);
    s.cloud_seed = mix64(*seed ^ 0x636c6f75ULL);
  }
  return s;
}

std::vector<double> parse_values(const std::string& csv) {
  std::vector<double> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != item.size()) throw Error(Errc::kParse, "bad sweep value '" + item + "'");
    out.push_back(v);
  }
  if (out.empty()) throw Error(Errc::kParse, "no sweep values given");
  return out;
}

void write_text(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
    return;
  }
  std::ofstream out(path);
  if (!out) throw Error(Errc::kIo, "cannot write " + path);
  out << text;
}

int cmd_profile(const std::string& scenario, std::optional<std::uint64_t> seed, const std::string& out) {
  const auto s = load(scenario, seed);
  const auto world = bench::build_world(s);
  auto p = bench::profile_scenario(s, world);
  if (p.c_th_fallback) std::cerr << "warning: no fully accepted chunks; c_th uses the fallback value\n";
  write_text(out, profiler::to_json(p).dump(2) + "\n");
  std::cerr << "chunks=" << p.chunks << " c_th=" << p.c_th << " alpha=" << p.alpha << "\n";
  return 0;
}

int cmd_run(const std::string& scenario, std::optional<std::uint64_t> seed, const std::string& out_dir) {
  const auto s = load(scenario, seed);
  const auto r = bench::run_scenario(s);
  if (!out_dir.empty()) bench::write_artifacts(r, out_dir);
  std::cout << bench::to_json(r.report).dump(2) << "\n";
  return 0;
}

int cmd_sweep(const std::string& scenario, std::optional<std::uint64_t> seed, const std::string& knob,
              const std::string& values, const std::string& out) {
  const auto s = load(scenario, seed);
  const auto k = bench::parse_knob(knob);
  const auto xs = parse_values(values);
  const auto rows = bench::sweep(s, k, xs);
  std::ostringstream csv;
  bench::write_sweep_csv(csv, k, rows);
  write_text(out, csv.str());
  return 0;
}

int cmd_serve(const std::string& scenario, std::uint16_t port, const std::string& bind, const std::string& status,
              bool no_emulate, double duration_s) {
  const auto s = load(scenario, std::nullopt);
  const auto world = bench::build_world(s);
  cloud::CloudRuntime cloud(world.target, s.cost, s.cloud_seed);
  transport::TcpListener listener(port, bind);
  std::cerr << "listening on " << bind << ":" << listener.port() << std::endl;
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  std::thread timer;
  if (duration_s > 0.0) {
    timer = std::thread([duration_s] {
      const auto until = std::chrono::steady_clock::now() + std::chrono::duration<double>(duration_s);
      while (!g_stop && std::chrono::steady_clock::now() < until) std::this_thread::sleep_for(std::chrono::milliseconds(20));
      g_stop = true;
    });
  }
  cloud::ServeOptions opt;
  opt.emulate_compute = !no_emulate;
  opt.status_path = status;
  cloud::serve_loop(cloud, listener, g_stop, opt);
  if (timer.joinable()) timer.join();
  std::cerr << cloud.status_json().dump() << std::endl;
  return 0;
}

int cmd_device(const std::string& scenario, std::optional<std::uint64_t> seed, const std::string& connect,
               const std::string& profile_path, std::uint64_t session_base, int sessions, const std::string& out_dir) {
  const auto s = load(scenario, seed);
  const auto colon = connect.rfind(':');
  if (colon == std::string::npos) throw Error(Errc::kInvalidConfig, "--connect expects host:port");
  const std::string host = connect.substr(0, colon);
  const auto port = static_cast<std::uint16_t>(std::stoul(connect.substr(colon + 1)));

  const auto world = bench::build_world(s);
  auto prof = profile_path.empty() ? bench::profile_scenario(s, world) : profiler::load(profile_path);
  if (s.policy.c_th) prof.c_th = *s.policy.c_th;
  auto pol = profiler::policy_from_profile(prof, s.session.budget, s.policy.base);
  pol.seq_exit_fraction = s.session.seq_exit_fraction;
  device::DeviceOptions opt;
  opt.parallel_inference = s.variant.pi;
  opt.early_exit = s.variant.early_exit;
  opt.compression = s.variant.compression;
  opt.gating = s.variant.gating;
  opt.per_layer_ms = s.per_layer_ms;
  opt.alpha = s.policy.alpha.value_or(prof.alpha);

  const int count = sessions > 0 ? sessions : static_cast<int>(s.session_count());
  std::vector<bench::SessionResult> results;
  for (int i = 0; i < count; ++i) {
    SessionConfig cfg = s.session;
    cfg.seed = s.session.seed + static_cast<std::uint64_t>(i);
    const auto& prompt = world.prompts[static_cast<std::size_t>(i) % world.prompts.size()];
    const SessionId id{session_base + static_cast<std::uint64_t>(i)};
    device::DeviceSession session(id, cfg, pol, opt, world.draft, world.importance, prompt);
    WallClock clock;
    transport::TcpCarrier carrier(host, port);
    device::run_session(session, carrier, clock);
    carrier.close();
    bench::SessionResult r;
    r.id = id;
    r.stats = session.stats();
    r.records = session.records();
    r.prompt = prompt;
    r.generated.assign(session.generated().begin(), session.generated().end());
    const auto& st = r.stats;
    std::cerr << "session " << to_underlying(id) << ": " << r.records.size() << " tokens in "
              << bench::fmt_ms(st.end_ms - st.start_ms) << " ms, offloads=" << st.offloads << " hits=" << st.hits
              << (st.fallback ? " (fallback)" : "") << std::endl;
    results.push_back(std::move(r));
  }
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    std::ofstream csv(std::filesystem::path(out_dir) / "tokens.csv");
    bench::write_tokens_csv(csv, results);
    std::ofstream js(std::filesystem::path(out_dir) / "sessions.jsonl");
    for (const auto& r : results) js << bench::session_summary(r).dump() << '\n';
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"device-cloud speculative generation toolkit"};
  app.require_subcommand(1);

  std::string scenario;
  std::optional<std::uint64_t> seed;
  std::string out;

  auto* profile = app.add_subcommand("profile", "measure c_th, the importance CDF and alpha");
  profile->add_option("-s,--scenario", scenario, "scenario JSON file")->check(CLI::ExistingFile);
  profile->add_option("--seed", seed, "override every seed in the scenario");
  profile->add_option("-o,--out", out, "output profile JSON (default stdout)");

  auto* run = app.add_subcommand("run", "run a scenario in simulated time");
  run->add_option("-s,--scenario", scenario, "scenario JSON file")->check(CLI::ExistingFile);
  run->add_option("--seed", seed, "override every seed in the scenario");
  run->add_option("-o,--out", out, "artifact directory (tokens.csv, sessions.jsonl, report.json)");

  std::string knob, values;
  auto* sweep = app.add_subcommand("sweep", "run a scenario once per knob value");
  sweep->add_option("-s,--scenario", scenario, "scenario JSON file")->check(CLI::ExistingFile);
  sweep->add_option("--seed", seed, "override every seed in the scenario");
  sweep->add_option("-k,--knob", knob, "budget | bandwidth | session_count | session_rate | exit_threshold")->required();
  sweep->add_option("-v,--values", values, "comma-separated values")->required();
  sweep->add_option("-o,--out", out, "output CSV (default stdout)");

  std::uint16_t port = 7070;
  std::string bind = "127.0.0.1", status;
  bool no_emulate = false;
  double duration_s = 0.0;
  auto* serve = app.add_subcommand("serve", "run the cloud verifier over TCP");
  serve->add_option("-s,--scenario", scenario, "scenario JSON file (target model, cost model)")->check(CLI::ExistingFile);
  serve->add_option("-p,--port", port, "TCP port, 0 for ephemeral");
  serve->add_option("--bind", bind, "IPv4 address to bind");
  serve->add_option("--status", status, "status JSON rewritten after every iteration");
  serve->add_flag("--no-emulate", no_emulate, "do not sleep for the modeled iteration time");
  serve->add_option("--duration", duration_s, "stop after this many seconds (0 = until SIGINT)");

  std::string connect = "127.0.0.1:7070", profile_path;
  std::uint64_t session_base = 1;
  int sessions = 0;
  auto* dev = app.add_subcommand("device", "generate against a running cloud over TCP");
  dev->add_option("-s,--scenario", scenario, "scenario JSON file")->check(CLI::ExistingFile);
  dev->add_option("--seed", seed, "override every seed in the scenario");
  dev->add_option("-c,--connect", connect, "cloud address host:port");
  dev->add_option("--profile", profile_path, "profile JSON (default: profile in-process)")->check(CLI::ExistingFile);
  dev->add_option("--session-base", session_base, "id of the first session");
  dev->add_option("-n,--sessions", sessions, "number of sequential sessions (default: scenario count)");
  dev->add_option("-o,--out", out, "artifact directory (tokens.csv, sessions.jsonl)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*profile) return cmd_profile(scenario, seed, out);
    if (*run) return cmd_run(scenario, seed, out);
    if (*sweep) return cmd_sweep(scenario, seed, knob, values, out);
    if (*serve) return cmd_serve(scenario, port, bind, status, no_emulate, duration_s);
    if (*dev) return cmd_device(scenario, seed, connect, profile_path, session_base, sessions, out);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
