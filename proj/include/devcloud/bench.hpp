// SPDX-FileCopyrightText: Copyright 2026 The devcloud Authors
// SPDX-License-Identifier: Apache-2.0

// Scenario runner: builds models, profiles, and drives N device sessions
// against one cloud on a discrete-event clock. Artifacts are deterministic
// for a given scenario.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <deque>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <queue>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "devcloud/cloud.hpp"
#include "devcloud/core.hpp"
#include "devcloud/device.hpp"
#include "devcloud/models.hpp"
#include "devcloud/policy.hpp"
#include "devcloud/profiler.hpp"
#include "devcloud/rng.hpp"
#include "devcloud/transport.hpp"

namespace devcloud::bench {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Scenario

struct ModelSpec {
  std::string kind = "synthetic";  // synthetic | table | ngram
  models::SyntheticPairSpec synthetic;
  std::string target_table;
  std::string draft_table;
  std::string corpus;
  std::uint32_t target_order = 3;
  std::uint32_t draft_order = 2;
  std::optional<std::size_t> vocab;  // ngram only; defaults to max id + 1
  std::uint32_t layers = 16;
  models::NoiseSchedule noise;
};

struct ImportanceSpec {
  std::string kind = "lomax";  // lomax | entropy | trace
  double alpha = 2.0;
  double scale = 1.0;
  std::uint64_t seed = 3;
  std::string path;
};

struct WorkloadSpec {
  std::vector<std::vector<TokenId>> prompts;  // explicit prompts win over generation
  std::uint32_t prompt_count = 8;
  std::uint32_t prompt_len = 8;
  std::uint64_t seed = 5;
  std::uint32_t profile_prompts = 8;
};

struct PolicySpec {
  policy::OffloadPolicyState base;  // k, theta, margin_threshold, exit_window
  std::optional<double> c_th;       // overrides the profile
  std::optional<double> alpha;      // overrides the profile
  std::string profile_path;         // empty: profile in-process
};

struct SessionsSpec {
  std::uint32_t count = 1;
  std::string arrival = "burst";  // burst | poisson
  double rate_per_s = 1.0;
  std::optional<double> window_ms;  // poisson: count = round(rate * window)
};

struct VariantSpec {
  bool pi = true;
  bool early_exit = true;
  bool compression = true;
  policy::Gating gating = policy::Gating::kBoth;
};

struct Scenario {
  std::string name = "scenario";
  std::string base_dir = ".";
  ModelSpec models;
  ImportanceSpec importance;
  WorkloadSpec workload;
  SessionConfig session;
  PolicySpec policy;
  transport::ChannelModel channel;
  cloud::ComputeCostModel cost;
  double packing_factor = 1.0;
  std::uint64_t cloud_seed = 11;
  double per_layer_ms = 2.5;
  SessionsSpec sessions;
  VariantSpec variant;
  std::optional<double> kill_at_ms;

  std::uint32_t session_count() const {
    if (sessions.arrival == "poisson" && sessions.window_ms) {
      return static_cast<std::uint32_t>(std::llround(sessions.rate_per_s * *sessions.window_ms / 1000.0));
    }
    return sessions.count;
  }

  std::string resolve(const std::string& p) const {
    if (p.empty() || std::filesystem::path(p).is_absolute()) return p;
    return (std::filesystem::path(base_dir) / p).string();
  }
};

namespace detail {

// Reads obj[key] when present; errors name the field.
template <typename T>
void read(const json& obj, const char* key, T& out, const std::string& ctx) {
  if (!obj.is_object() || !obj.contains(key) || obj.at(key).is_null()) return;
  try {
    out = obj.at(key).get<T>();
  } catch (const json::exception& e) {
    throw Error(Errc::kParse, ctx + "." + key + ": " + e.what());
  }
}

template <typename T>
void read_opt(const json& obj, const char* key, std::optional<T>& out, const std::string& ctx) {
  if (!obj.is_object() || !obj.contains(key) || obj.at(key).is_null()) return;
  T v{};
  read(obj, key, v, ctx);
  out = v;
}

inline const json& section(const json& j, const char* key) {
  static const json kEmpty = json::object();
  if (!j.contains(key)) return kEmpty;
  const auto& s = j.at(key);
  if (!s.is_object()) throw Error(Errc::kParse, std::string(key) + ": expected an object");
  return s;
}

}  // namespace detail

inline Scenario parse_scenario(const json& j, const std::string& base_dir = ".", const std::string& file = "<scenario>") {
  using detail::read;
  using detail::read_opt;
  using detail::section;
  Scenario s;
  s.base_dir = base_dir;
  try {
    read(j, "name", s.name, file);

    const auto& m = section(j, "models");
    const std::string mc = file + ":models";
    read(m, "kind", s.models.kind, mc);
    read(m, "vocab", s.models.synthetic.vocab, mc);
    read(m, "seed", s.models.synthetic.seed, mc);
    read(m, "target_exponent", s.models.synthetic.target_exponent, mc);
    read(m, "draft_exponent", s.models.synthetic.draft_exponent, mc);
    read(m, "agreement", s.models.synthetic.agreement, mc);
    read(m, "exponent_spread", s.models.synthetic.exponent_spread, mc);
    read(m, "agreement_spread", s.models.synthetic.agreement_spread, mc);
    read(m, "floor", s.models.synthetic.floor, mc);
    read(m, "target_table", s.models.target_table, mc);
    read(m, "draft_table", s.models.draft_table, mc);
    read(m, "corpus", s.models.corpus, mc);
    read(m, "target_order", s.models.target_order, mc);
    read(m, "draft_order", s.models.draft_order, mc);
    if (s.models.kind == "ngram") read_opt(m, "vocab", s.models.vocab, mc);
    read(m, "layers", s.models.layers, mc);
    const auto& noise = section(m, "noise");
    read(noise, "initial_weight", s.models.noise.initial_weight, mc + ".noise");
    read(noise, "decay", s.models.noise.decay, mc + ".noise");
    read(noise, "seed", s.models.noise.seed, mc + ".noise");

    const auto& imp = section(j, "importance");
    const std::string ic = file + ":importance";
    read(imp, "kind", s.importance.kind, ic);
    read(imp, "alpha", s.importance.alpha, ic);
    read(imp, "scale", s.importance.scale, ic);
    read(imp, "seed", s.importance.seed, ic);
    read(imp, "path", s.importance.path, ic);

    const auto& w = section(j, "workload");
    const std::string wc = file + ":workload";
    read(w, "prompts", s.workload.prompts, wc);
    read(w, "prompt_count", s.workload.prompt_count, wc);
    read(w, "prompt_len", s.workload.prompt_len, wc);
    read(w, "seed", s.workload.seed, wc);
    read(w, "profile_prompts", s.workload.profile_prompts, wc);

    const auto& se = section(j, "session");
    const std::string sc = file + ":session";
    read(se, "gamma", s.session.gamma, sc);
    read(se, "max_len", s.session.max_len, sc);
    read(se, "budget", s.session.budget, sc);
    std::string sampling = s.session.sampling.to_string();
    read(se, "sampling", sampling, sc);
    s.session.sampling = SamplingMode::parse(sampling);
    read(se, "delta", s.session.delta, sc);
    read(se, "seq_exit_fraction", s.session.seq_exit_fraction, sc);
    read(se, "seed", s.session.seed, sc);
    read_opt(se, "eos", s.session.eos, sc);

    const auto& p = section(j, "policy");
    const std::string pc = file + ":policy";
    read(p, "k", s.policy.base.k, pc);
    read(p, "theta", s.policy.base.theta, pc);
    read(p, "margin_threshold", s.policy.base.margin_threshold, pc);
    read(p, "exit_window", s.policy.base.exit_window, pc);
    read_opt(p, "c_th", s.policy.c_th, pc);
    read_opt(p, "alpha", s.policy.alpha, pc);
    read(p, "profile", s.policy.profile_path, pc);

    const auto& ch = section(j, "channel");
    const std::string cc = file + ":channel";
    read(ch, "bandwidth_bps", s.channel.bandwidth_bps, cc);
    read(ch, "propagation_delay_ms", s.channel.propagation_delay_ms, cc);
    read(ch, "jitter_ms", s.channel.jitter_ms, cc);
    read(ch, "loss_rate", s.channel.loss_rate, cc);

    const auto& cl = section(j, "cloud");
    const std::string clc = file + ":cloud";
    read(cl, "per_token_ms", s.cost.per_token_ms, clc);
    read(cl, "fixed_iteration_ms", s.cost.fixed_iteration_ms, clc);
    read(cl, "per_request_ms", s.cost.per_request_ms, clc);
    read(cl, "chunk_size", s.cost.chunk_size, clc);
    read(cl, "pad_chunks", s.cost.pad_chunks, clc);
    read(cl, "packing_factor", s.packing_factor, clc);
    read(cl, "seed", s.cloud_seed, clc);

    read(section(j, "device"), "per_layer_ms", s.per_layer_ms, file + ":device");

    const auto& ss = section(j, "sessions");
    const std::string ssc = file + ":sessions";
    read(ss, "count", s.sessions.count, ssc);
    read(ss, "arrival", s.sessions.arrival, ssc);
    read(ss, "rate_per_s", s.sessions.rate_per_s, ssc);
    read_opt(ss, "window_ms", s.sessions.window_ms, ssc);

    const auto& v = section(j, "variant");
    const std::string vc = file + ":variant";
    read(v, "pi", s.variant.pi, vc);
    read(v, "early_exit", s.variant.early_exit, vc);
    read(v, "compression", s.variant.compression, vc);
    std::string gating = policy::to_string(s.variant.gating);
    read(v, "gating", gating, vc);
    s.variant.gating = policy::parse_gating(gating);

    read_opt(section(j, "fault"), "kill_at_ms", s.kill_at_ms, file + ":fault");
  } catch (const Error& e) {
    if (e.code() == Errc::kParse) throw;
    throw Error(Errc::kParse, file + ": " + e.what());
  }

  if (s.models.kind != "synthetic" && s.models.kind != "table" && s.models.kind != "ngram") {
    throw Error(Errc::kParse, file + ":models.kind: unknown '" + s.models.kind + "'");
  }
  if (s.importance.kind != "lomax" && s.importance.kind != "entropy" && s.importance.kind != "trace") {
    throw Error(Errc::kParse, file + ":importance.kind: unknown '" + s.importance.kind + "'");
  }
  if (s.sessions.arrival != "burst" && s.sessions.arrival != "poisson") {
    throw Error(Errc::kParse, file + ":sessions.arrival: unknown '" + s.sessions.arrival + "'");
  }
  if (!(s.packing_factor > 0.0)) throw Error(Errc::kParse, file + ":cloud.packing_factor must be > 0");
  if (!(s.sessions.rate_per_s > 0.0)) throw Error(Errc::kParse, file + ":sessions.rate_per_s must be > 0");
  s.session.validate();
  s.channel.validate();
  s.cost.validate();
  return s;
}

inline Scenario load_scenario(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::kIo, "cannot open " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw Error(Errc::kParse, path + ": " + e.what());
  }
  return parse_scenario(j, std::filesystem::path(path).parent_path().string(), path);
}

// ---------------------------------------------------------------------------
// Building the world

struct World {
  std::shared_ptr<const models::LanguageModel> target;
  std::shared_ptr<const models::LanguageModel> draft;  // layered when layers > 1
  std::shared_ptr<const models::ImportanceProvider> importance;
  std::vector<std::vector<TokenId>> prompts;
  std::vector<std::vector<TokenId>> profile_prompts;
};

inline std::vector<std::vector<TokenId>> random_prompts(std::uint32_t count, std::uint32_t len, std::size_t vocab,
                                                        std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::vector<TokenId>> out(count);
  for (auto& p : out) {
    p.resize(len);
    for (auto& t : p) t = static_cast<TokenId>(rng.below(vocab));
  }
  return out;
}

inline World build_world(const Scenario& s) {
  World w;
  std::shared_ptr<const models::LanguageModel> draft_base;
  if (s.models.kind == "synthetic") {
    w.target = models::make_synthetic_target(s.models.synthetic);
    draft_base = models::make_synthetic_draft(s.models.synthetic);
  } else if (s.models.kind == "table") {
    w.target = std::make_shared<models::TableModel>(models::load_table(s.resolve(s.models.target_table)));
    draft_base = std::make_shared<models::TableModel>(models::load_table(s.resolve(s.models.draft_table)));
  } else {
    const auto corpus = models::load_tokens(s.resolve(s.models.corpus));
    std::size_t vocab = s.models.vocab.value_or(0);
    if (vocab == 0) {
      for (auto t : corpus) vocab = std::max<std::size_t>(vocab, t + 1);
    }
    w.target = std::make_shared<models::NgramModel>(corpus, s.models.target_order, vocab);
    draft_base = std::make_shared<models::NgramModel>(corpus, s.models.draft_order, vocab);
  }
  if (w.target->vocab_size() != draft_base->vocab_size()) {
    throw Error(Errc::kInvalidConfig, "draft and target vocabularies differ");
  }
  w.draft = s.models.layers > 1 ? std::make_shared<models::LayeredModel>(draft_base, s.models.layers, s.models.noise)
                                : draft_base;
  if (s.importance.kind == "lomax") {
    w.importance = std::make_shared<models::LomaxImportance>(s.importance.alpha, s.importance.scale, s.importance.seed);
  } else if (s.importance.kind == "entropy") {
    w.importance = std::make_shared<models::EntropyImportance>(draft_base);
  } else {
    w.importance = std::make_shared<models::TraceImportance>(models::load_trace(s.resolve(s.importance.path)));
  }
  const std::size_t v = w.target->vocab_size();
  w.prompts = s.workload.prompts.empty()
                  ? random_prompts(s.workload.prompt_count, s.workload.prompt_len, v, s.workload.seed)
                  : s.workload.prompts;
  for (const auto& p : w.prompts) {
    for (auto t : p) {
      if (t >= v) throw Error(Errc::kInvalidConfig, "prompt token " + std::to_string(t) + " outside vocabulary");
    }
  }
  w.profile_prompts =
      random_prompts(s.workload.profile_prompts, s.workload.prompt_len, v, mix64(s.workload.seed ^ 0x70726f66ULL));
  return w;
}

inline profiler::ProfileResult profile_scenario(const Scenario& s, const World& w) {
  if (!s.policy.profile_path.empty()) return profiler::load(s.resolve(s.policy.profile_path));
  profiler::ProfileSpec spec;
  spec.draft = w.draft;
  spec.target = w.target;
  spec.importance = w.importance;
  spec.prompts = w.profile_prompts;
  spec.session = s.session;
  spec.session.seed = mix64(s.session.seed ^ 0x70726f66ULL);
  spec.policy = s.policy.base;
  spec.early_exit = s.variant.early_exit;
  spec.cloud_seed = mix64(s.cloud_seed ^ 0x70726f66ULL);
  spec.provenance = s.name + "/" + s.models.kind + "/" + s.importance.kind;
  spec.warnings = nullptr;
  return profiler::profile(spec);
}

// ---------------------------------------------------------------------------
// Metrics

inline double estimate_cost(double packing_factor, double mean_tbt, double offload_fraction) {
  if (!(packing_factor > 0.0)) throw Error(Errc::kInvalidConfig, "packing factor must be > 0");
  if (!(offload_fraction >= 0.0 && offload_fraction <= 1.0)) {
    throw Error(Errc::kInvalidConfig, "offload fraction must lie in [0, 1]");
  }
  return mean_tbt * offload_fraction / packing_factor;
}

struct MetricsReport {
  std::uint64_t sessions = 0;
  std::uint64_t tokens = 0;
  double mean_tbt_ms = 0.0;
  double offload_fraction = 0.0;        // tokens produced through cloud verification
  double local_fraction = 0.0;          // local and adopted tokens
  double fallback_fraction = 0.0;       // tokens committed after a link failure
  double offload_chunk_fraction = 0.0;  // offloaded chunks / chunks the policy decided
  double offload_draft_fraction = 0.0;  // drafted tokens sent for verification
  double acceptance_rate = 0.0;
  double prediction_hit_rate = 0.0;
  std::uint64_t fallback_count = 0;
  double estimated_cost = 0.0;
  double packing_factor = 1.0;

  std::uint64_t offloads = 0;
  std::uint64_t chunks = 0;
  std::uint64_t predictions = 0;
  std::uint64_t hits = 0;
  std::uint64_t adopted_tokens = 0;
  double stall_ms = 0.0;
  double masked_ms = 0.0;
  double total_device_ms = 0.0;  // sum over sessions of (end - start)
  double makespan_ms = 0.0;
  double mean_layers_per_token = 0.0;
  std::uint64_t uplink_bytes = 0;
  std::uint64_t requests_served = 0;
  double mean_verify_latency_ms = 0.0;
  double p50_verify_latency_ms = 0.0;
  double p99_verify_latency_ms = 0.0;
  double request_throughput_per_s = 0.0;
  double mean_batch_size = 0.0;
  std::uint64_t cache_prefix_violations = 0;
};

inline json to_json(const MetricsReport& r) {
  return json{{"sessions", r.sessions},
              {"tokens", r.tokens},
              {"mean_tbt_ms", r.mean_tbt_ms},
              {"offload_fraction", r.offload_fraction},
              {"local_fraction", r.local_fraction},
              {"fallback_fraction", r.fallback_fraction},
              {"offload_chunk_fraction", r.offload_chunk_fraction},
              {"offload_draft_fraction", r.offload_draft_fraction},
              {"acceptance_rate", r.acceptance_rate},
              {"prediction_hit_rate", r.prediction_hit_rate},
              {"fallback_count", r.fallback_count},
              {"estimated_cost", r.estimated_cost},
              {"packing_factor", r.packing_factor},
              {"offloads", r.offloads},
              {"chunks", r.chunks},
              {"predictions", r.predictions},
              {"hits", r.hits},
              {"adopted_tokens", r.adopted_tokens},
              {"stall_ms", r.stall_ms},
              {"masked_ms", r.masked_ms},
              {"total_device_ms", r.total_device_ms},
              {"makespan_ms", r.makespan_ms},
              {"mean_layers_per_token", r.mean_layers_per_token},
              {"uplink_bytes", r.uplink_bytes},
              {"requests_served", r.requests_served},
              {"mean_verify_latency_ms", r.mean_verify_latency_ms},
              {"p50_verify_latency_ms", r.p50_verify_latency_ms},
              {"p99_verify_latency_ms", r.p99_verify_latency_ms},
              {"request_throughput_per_s", r.request_throughput_per_s},
              {"mean_batch_size", r.mean_batch_size},
              {"cache_prefix_violations", r.cache_prefix_violations}};
}

struct SessionResult {
  SessionId id{};
  double arrival_ms = 0.0;
  device::DeviceStats stats;
  std::vector<device::TokenRecord> records;
  std::vector<TokenId> prompt;
  std::vector<TokenId> generated;
};

struct RunResult {
  MetricsReport report;
  std::vector<SessionResult> sessions;
  json cloud_status;
  profiler::ProfileResult profile;
  policy::OffloadPolicyState policy;
};

// ---------------------------------------------------------------------------
// Discrete-event simulation

struct SimulationSetup {
  Scenario scenario;
  World world;
  policy::OffloadPolicyState policy;
  device::DeviceOptions device;
  std::vector<double> arrivals_ms;  // one per session
};

class Simulation {
 public:
  explicit Simulation(SimulationSetup setup)
      : setup_(std::move(setup)),
        cloud_(setup_.world.target, setup_.scenario.cost, setup_.scenario.cloud_seed),
        kill_at_(setup_.scenario.kill_at_ms) {
    const auto& sc = setup_.scenario;
    const auto& prompts = setup_.world.prompts;
    if (prompts.empty()) throw Error(Errc::kInvalidConfig, "workload has no prompts");
    for (std::size_t i = 0; i < setup_.arrivals_ms.size(); ++i) {
      SessionConfig cfg = sc.session;
      cfg.seed = mix64(sc.session.seed + i);
      auto node = std::make_unique<Node>();
      node->session = std::make_unique<device::DeviceSession>(SessionId{i + 1}, cfg, setup_.policy, setup_.device,
                                                              setup_.world.draft, setup_.world.importance,
                                                              prompts[i % prompts.size()]);
      node->up = transport::SimChannel(sc.channel, mix64(i * 2 + 1));
      node->down = transport::SimChannel(sc.channel, mix64(i * 2 + 2));
      node->arrival_ms = setup_.arrivals_ms[i];
      auto* raw = node.get();
      raw->session->on_merge = [this, raw](const device::DeviceSession& s) {
        const auto* cache = cloud_.cache(s.id());
        if (!cache) return;
        const auto c = cache->tokens();
        const auto d = s.committed();
        if (c.size() > d.size() || !std::equal(c.begin(), c.end(), d.begin())) ++prefix_violations_;
      };
      nodes_.push_back(std::move(node));
      push(setup_.arrivals_ms[i], kStart, i);
    }
    if (kill_at_) push(*kill_at_, kKill, 0);
  }

  void run() {
    while (!queue_.empty() || !all_finished()) {
      if (queue_.empty()) {
        // Frames were lost for good: whoever still waits falls back.
        for (std::size_t i = 0; i < nodes_.size(); ++i) {
          auto& n = *nodes_[i];
          if (n.started && !n.finished && !n.computing) {
            n.session->transport_failed(now_);
            step(i);
          }
        }
        if (queue_.empty() && !all_finished()) throw std::logic_error("simulation stalled");
        continue;
      }
      Event e = queue_.top();
      queue_.pop();
      now_ = e.t;
      handle(e);
    }
  }

  const cloud::CloudRuntime& cloud() const noexcept { return cloud_; }
  std::uint64_t prefix_violations() const noexcept { return prefix_violations_; }
  double now_ms() const noexcept { return now_; }

  std::vector<SessionResult> results() const {
    std::vector<SessionResult> out;
    for (const auto& n : nodes_) {
      SessionResult r;
      r.id = n->session->id();
      r.arrival_ms = n->arrival_ms;
      r.stats = n->session->stats();
      r.records = n->session->records();
      const auto all = n->session->committed();
      r.prompt.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n->session->prompt_len()));
      const auto gen = n->session->generated();
      r.generated.assign(gen.begin(), gen.end());
      out.push_back(std::move(r));
    }
    return out;
  }

  std::uint64_t uplink_bytes() const {
    std::uint64_t b = 0;
    for (const auto& n : nodes_) b += n->up.bytes_sent();
    return b;
  }

 private:
  // Same-time ordering: finished compute, then frames to devices, then frames
  // to the cloud, then session starts, then the cloud picks up work.
  enum Kind : int {
    kKill = 0,
    kComputeDone = 1,
    kDownlink = 2,
    kLinkDown = 3,
    kUplink = 4,
    kStart = 5,
    kCloudDone = 6,
    kCloudKick = 7
  };

  struct Event {
    double t;
    int kind;
    std::uint64_t seq;
    std::size_t node;
    std::uint64_t token;
    std::shared_ptr<const std::vector<std::uint8_t>> bytes;
  };

  struct Later {
    bool operator()(const Event& a, const Event& b) const {
      if (a.t != b.t) return a.t > b.t;
      if (a.kind != b.kind) return a.kind > b.kind;
      return a.seq > b.seq;
    }
  };

  struct Node {
    std::unique_ptr<device::DeviceSession> session;
    transport::SimChannel up;
    transport::SimChannel down;
    double arrival_ms = 0.0;
    bool started = false;
    bool finished = false;
    bool computing = false;
    bool interruptible = false;
    std::uint64_t compute_token = 0;
    std::deque<transport::WireMessage> held;
  };

  void push(double t, int kind, std::size_t node, std::uint64_t token = 0,
            std::shared_ptr<const std::vector<std::uint8_t>> bytes = nullptr) {
    queue_.push(Event{t, kind, ++seq_, node, token, std::move(bytes)});
  }

  bool killed(double t) const { return kill_at_ && t >= *kill_at_; }

  bool all_finished() const {
    return std::all_of(nodes_.begin(), nodes_.end(), [](const auto& n) { return n->finished; });
  }

  void step(std::size_t i) {
    auto& n = *nodes_[i];
    using AK = device::DeviceSession::Action::Kind;
    for (;;) {
      auto a = n.session->advance(now_);
      switch (a.kind) {
        case AK::kSend:
          if (n.session->fallback()) continue;
          if (killed(now_)) {
            n.session->transport_failed(now_);
            continue;
          }
          for (const auto& m : a.messages) {
            auto bytes = std::make_shared<const std::vector<std::uint8_t>>(transport::encode(m));
            const auto d = n.up.send(bytes->size(), now_);
            if (!d.lost) push(d.at_ms, kUplink, i, 0, std::move(bytes));
          }
          continue;
        case AK::kCompute:
          n.computing = true;
          n.interruptible = a.interruptible;
          push(now_ + a.duration_ms, kComputeDone, i, ++n.compute_token);
          return;
        case AK::kAwait:
          return;
        case AK::kFinished:
          n.finished = true;
          return;
      }
    }
  }

  void deliver(std::size_t i, const transport::WireMessage& m) {
    auto& n = *nodes_[i];
    n.session->deliver(m, now_);
    if (!n.finished) step(i);
  }

  void handle(const Event& e) {
    switch (e.kind) {
      case kStart: {
        auto& n = *nodes_[e.node];
        n.started = true;
        if (killed(now_)) n.session->transport_failed(now_);
        step(e.node);
        break;
      }
      case kComputeDone: {
        auto& n = *nodes_[e.node];
        if (!n.computing || e.token != n.compute_token) break;  // preempted
        n.computing = false;
        n.session->complete_compute(now_);
        while (!n.held.empty()) {
          auto m = std::move(n.held.front());
          n.held.pop_front();
          n.session->deliver(m, now_);
        }
        step(e.node);
        break;
      }
      case kDownlink: {
        if (killed(now_)) break;
        auto& n = *nodes_[e.node];
        auto m = transport::decode(*e.bytes).message;
        if (n.computing) {
          if (!n.interruptible) {
            n.held.push_back(std::move(m));
            break;
          }
          n.computing = false;
          ++n.compute_token;
        }
        if (n.finished) break;
        deliver(e.node, m);
        break;
      }
      case kUplink: {
        if (killed(now_)) break;
        auto m = transport::decode(*e.bytes).message;
        try {
          for (auto& r : cloud_.on_message(m, now_)) send_down(r);
        } catch (const Error&) {
          // Protocol error on this session only: the cloud closes its link.
          cloud_.drop_session(m.session);
          push(now_ + setup_.scenario.channel.propagation_delay_ms, kLinkDown, e.node);
        }
        push(now_, kCloudKick, 0);
        break;
      }
      case kLinkDown:
        link_down(e.node);
        break;
      case kCloudKick:
        if (!cloud_busy_ && cloud_.has_work()) {
          auto it = cloud_.run_iteration(now_);
          cloud_busy_ = true;
          responses_ = std::move(it.responses);
          push(now_ + it.duration_ms, kCloudDone, 0);
        }
        break;
      case kCloudDone: {
        cloud_busy_ = false;
        auto rs = std::move(responses_);
        responses_.clear();
        for (auto& r : rs) send_down(r);
        push(now_, kCloudKick, 0);
        break;
      }
      case kKill:
        for (std::size_t i = 0; i < nodes_.size(); ++i) link_down(i);
        break;
    }
  }

  void link_down(std::size_t i) {
    auto& n = *nodes_[i];
    n.up.close();
    n.down.close();
    if (!n.started || n.finished || n.session->fallback()) return;
    const bool was_pi = n.computing && n.interruptible;
    n.session->transport_failed(now_);
    if (was_pi) {
      n.computing = false;
      ++n.compute_token;
    }
    if (!n.computing) step(i);
  }

  void send_down(const transport::WireMessage& r) {
    if (killed(now_)) return;
    const std::size_t i = static_cast<std::size_t>(to_underlying(r.session) - 1);
    auto& n = *nodes_.at(i);
    if (n.down.closed()) return;
    auto bytes = std::make_shared<const std::vector<std::uint8_t>>(transport::encode(r));
    const auto d = n.down.send(bytes->size(), now_);
    if (!d.lost) push(d.at_ms, kDownlink, i, 0, std::move(bytes));
  }

  SimulationSetup setup_;
  cloud::CloudRuntime cloud_;
  std::optional<double> kill_at_;
  std::vector<std::unique_ptr<Node>> nodes_;
  std::priority_queue<Event, std::vector<Event>, Later> queue_;
  std::uint64_t seq_ = 0;
  double now_ = 0.0;
  bool cloud_busy_ = false;
  std::vector<transport::WireMessage> responses_;
  std::uint64_t prefix_violations_ = 0;
};

inline std::vector<double> session_arrivals(const Scenario& s) {
  const std::uint32_t n = s.session_count();
  std::vector<double> out(n, 0.0);
  if (s.sessions.arrival == "poisson") {
    Rng rng(mix64(s.workload.seed ^ 0x617272ULL));
    double t = 0.0;
    for (auto& a : out) {
      t += rng.exponential(s.sessions.rate_per_s / 1000.0);
      a = t;
    }
  }
  return out;
}

inline MetricsReport summarize(const Scenario& sc, const std::vector<SessionResult>& sessions,
                               const cloud::CloudRuntime& cloud, std::uint64_t uplink_bytes,
                               std::uint64_t prefix_violations) {
  MetricsReport r;
  r.sessions = sessions.size();
  r.packing_factor = sc.packing_factor;
  std::uint64_t cloud_tokens = 0, fallback_tokens = 0, verified_draft = 0, policy_chunks = 0, drafted = 0, layers = 0,
                offloaded_draft = 0, accepted = 0;
  double tbt_sum = 0.0;
  std::uint64_t tbt_n = 0;
  for (const auto& s : sessions) {
    const auto& st = s.stats;
    r.tokens += s.records.size();
    for (const auto& rec : s.records) {
      if (rec.fallback) {
        ++fallback_tokens;
      } else if (rec.source == device::TokenSource::kCloudAccepted || rec.source == device::TokenSource::kCloudCorrected) {
        ++cloud_tokens;
      }
    }
    if (!s.records.empty()) {
      tbt_sum += (s.records.back().timestamp_ms - s.arrival_ms) / static_cast<double>(s.records.size());
      ++tbt_n;
    }
    if (st.fallback) ++r.fallback_count;
    r.offloads += st.offloads;
    r.chunks += st.chunks;
    policy_chunks += st.policy_chunks;
    r.predictions += st.predictions;
    r.hits += st.hits;
    r.adopted_tokens += st.adopted_tokens;
    r.stall_ms += st.stall_ms;
    r.masked_ms += st.masked_ms;
    r.total_device_ms += st.end_ms - st.start_ms;
    r.makespan_ms = std::max(r.makespan_ms, st.end_ms);
    verified_draft += st.verified_draft_tokens;
    accepted += st.accepted_tokens;
    drafted += st.drafted_tokens;
    layers += st.layers_executed;
    offloaded_draft += st.offloaded_draft_tokens;
  }
  auto ratio = [](double a, double b) { return b > 0.0 ? a / b : 0.0; };
  const double total = static_cast<double>(r.tokens);
  r.offload_fraction = ratio(static_cast<double>(cloud_tokens), total);
  r.fallback_fraction = ratio(static_cast<double>(fallback_tokens), total);
  r.local_fraction = r.tokens > 0 ? ratio(static_cast<double>(r.tokens - cloud_tokens - fallback_tokens), total) : 0.0;
  r.offload_chunk_fraction = ratio(static_cast<double>(r.offloads), static_cast<double>(policy_chunks));
  r.offload_draft_fraction = ratio(static_cast<double>(offloaded_draft), static_cast<double>(drafted));
  r.acceptance_rate = ratio(static_cast<double>(accepted), static_cast<double>(verified_draft));
  r.prediction_hit_rate = ratio(static_cast<double>(r.hits), static_cast<double>(r.predictions));
  r.mean_tbt_ms = ratio(tbt_sum, static_cast<double>(tbt_n));
  r.mean_layers_per_token = ratio(static_cast<double>(layers), static_cast<double>(drafted));
  r.estimated_cost = estimate_cost(sc.packing_factor, r.mean_tbt_ms / 1000.0, r.offload_fraction);
  r.uplink_bytes = uplink_bytes;
  const auto& cs = cloud.stats();
  r.requests_served = cs.requests_served;
  double lat_sum = 0.0;
  for (double l : cs.latency_ms) lat_sum += l;
  r.mean_verify_latency_ms = ratio(lat_sum, static_cast<double>(cs.latency_ms.size()));
  r.p50_verify_latency_ms = cloud::quantile(cs.latency_ms, 0.5);
  r.p99_verify_latency_ms = cloud::quantile(cs.latency_ms, 0.99);
  r.request_throughput_per_s = ratio(static_cast<double>(cs.requests_served), r.makespan_ms / 1000.0);
  r.mean_batch_size = ratio(static_cast<double>(cs.verify_members), static_cast<double>(cs.verify_iterations));
  r.cache_prefix_violations = prefix_violations;
  return r;
}

struct RunOptions {
  std::optional<profiler::ProfileResult> profile;  // reuse instead of profiling
};

inline RunResult run_scenario(const Scenario& sc, const RunOptions& opt = {}) {
  World world = build_world(sc);
  RunResult out;
  out.profile = opt.profile ? *opt.profile : profile_scenario(sc, world);
  if (sc.policy.c_th) out.profile.c_th = *sc.policy.c_th;
  out.policy = profiler::policy_from_profile(out.profile, sc.session.budget, sc.policy.base);
  out.policy.seq_exit_fraction = sc.session.seq_exit_fraction;

  SimulationSetup setup;
  setup.scenario = sc;
  setup.world = std::move(world);
  setup.policy = out.policy;
  setup.device.parallel_inference = sc.variant.pi;
  setup.device.early_exit = sc.variant.early_exit;
  setup.device.compression = sc.variant.compression;
  setup.device.gating = sc.variant.gating;
  setup.device.per_layer_ms = sc.per_layer_ms;
  setup.device.alpha = sc.policy.alpha.value_or(out.profile.alpha);
  setup.arrivals_ms = session_arrivals(sc);

  Simulation sim(std::move(setup));
  sim.run();
  out.sessions = sim.results();
  out.cloud_status = sim.cloud().status_json();
  out.report = summarize(sc, out.sessions, sim.cloud(), sim.uplink_bytes(), sim.prefix_violations());
  return out;
}

// ---------------------------------------------------------------------------
// Artifacts

inline std::string fmt_ms(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.3f", v);
  return buf;
}

inline void write_tokens_csv(std::ostream& out, const std::vector<SessionResult>& sessions) {
  out << "session,position,token,timestamp_ms,source,fallback\n";
  for (const auto& s : sessions) {
    for (const auto& r : s.records) {
      out << to_underlying(s.id) << ',' << r.position << ',' << r.token << ',' << fmt_ms(r.timestamp_ms) << ','
          << device::to_string(r.source) << ',' << (r.fallback ? 1 : 0) << '\n';
    }
  }
}

inline json session_summary(const SessionResult& s) {
  const auto& st = s.stats;
  return json{{"session", to_underlying(s.id)},
              {"arrival_ms", s.arrival_ms},
              {"start_ms", st.start_ms},
              {"end_ms", st.end_ms},
              {"tokens", s.records.size()},
              {"chunks", st.chunks},
              {"offloads", st.offloads},
              {"accepted_tokens", st.accepted_tokens},
              {"corrections", st.corrections},
              {"bonus_tokens", st.bonus_tokens},
              {"predictions", st.predictions},
              {"hits", st.hits},
              {"adopted_tokens", st.adopted_tokens},
              {"resyncs", st.resyncs},
              {"stall_ms", st.stall_ms},
              {"masked_ms", st.masked_ms},
              {"drafted_tokens", st.drafted_tokens},
              {"layers_executed", st.layers_executed},
              {"fallback", st.fallback}};
}

inline void write_artifacts(const RunResult& r, const std::string& dir) {
  std::filesystem::create_directories(dir);
  const auto path = [&](const char* f) { return (std::filesystem::path(dir) / f).string(); };
  {
    std::ofstream out(path("tokens.csv"));
    if (!out) throw Error(Errc::kIo, "cannot write " + path("tokens.csv"));
    write_tokens_csv(out, r.sessions);
  }
  {
    std::ofstream out(path("sessions.jsonl"));
    for (const auto& s : r.sessions) out << session_summary(s).dump() << '\n';
  }
  {
    std::ofstream out(path("report.json"));
    json j = to_json(r.report);
    j["cloud"] = r.cloud_status;
    j["policy"] = json{{"c_th", r.policy.c_th},
                       {"i_th", std::isinf(r.policy.i_th) ? json("inf") : json(r.policy.i_th)},
                       {"budget", r.policy.budget},
                       {"alpha", r.profile.alpha}};
    out << j.dump(2) << '\n';
  }
}

// ---------------------------------------------------------------------------
// Sweeps

enum class Knob { kBudget, kBandwidth, kSessionCount, kSessionRate, kExitThreshold };

inline Knob parse_knob(const std::string& s) {
  if (s == "budget") return Knob::kBudget;
  if (s == "bandwidth") return Knob::kBandwidth;
  if (s == "session_count") return Knob::kSessionCount;
  if (s == "session_rate") return Knob::kSessionRate;
  if (s == "exit_threshold") return Knob::kExitThreshold;
  throw Error(Errc::kInvalidConfig, "unknown sweep knob '" + s + "'");
}

inline const char* to_string(Knob k) {
  switch (k) {
    case Knob::kBudget: return "budget";
    case Knob::kBandwidth: return "bandwidth";
    case Knob::kSessionCount: return "session_count";
    case Knob::kSessionRate: return "session_rate";
    case Knob::kExitThreshold: return "exit_threshold";
  }
  return "?";
}

inline void apply_knob(Scenario& s, Knob k, double v) {
  switch (k) {
    case Knob::kBudget: s.session.budget = v; break;
    case Knob::kBandwidth: s.channel.bandwidth_bps = v; break;
    case Knob::kSessionCount: s.sessions.count = static_cast<std::uint32_t>(std::llround(v)); break;
    case Knob::kSessionRate: s.sessions.rate_per_s = v; break;
    case Knob::kExitThreshold: s.policy.base.margin_threshold = v; break;
  }
  s.session.validate();
  s.channel.validate();
}

struct SweepRow {
  double value = 0.0;
  MetricsReport report;
};

inline std::vector<SweepRow> sweep(const Scenario& base, Knob knob, std::span<const double> values) {
  std::optional<profiler::ProfileResult> shared;
  // Only the exit threshold changes what the profile would measure.
  if (knob != Knob::kExitThreshold) shared = profile_scenario(base, build_world(base));
  std::vector<SweepRow> rows;
  for (double v : values) {
    Scenario s = base;
    apply_knob(s, knob, v);
    rows.push_back(SweepRow{v, run_scenario(s, RunOptions{shared}).report});
  }
  return rows;
}

inline void write_sweep_csv(std::ostream& out, Knob knob, const std::vector<SweepRow>& rows) {
  out << to_string(knob);
  const auto cols = to_json(MetricsReport{});
  for (auto it = cols.begin(); it != cols.end(); ++it) out << ',' << it.key();
  out << '\n';
  for (const auto& row : rows) {
    out << row.value;
    const auto j = to_json(row.report);
    for (auto it = j.begin(); it != j.end(); ++it) out << ',' << it.value().dump();
    out << '\n';
  }
}

struct Knee {
  std::size_t index = 0;      // last point of the flat region
  double x = 0.0;
  double baseline = 0.0;      // latency at the lowest load
  bool superlinear = false;   // L(x_max)/L(x_knee) > x_max/x_knee
  bool has_tail = false;      // at least one point beyond the knee
};

inline Knee find_knee(std::span<const double> x, std::span<const double> latency, double flat_factor = 1.2) {
  if (x.empty() || x.size() != latency.size()) throw Error(Errc::kLengthMismatch, "knee needs matching series");
  Knee k;
  k.baseline = latency[0];
  while (k.index + 1 < x.size() && latency[k.index + 1] <= flat_factor * k.baseline) ++k.index;
  k.x = x[k.index];
  k.has_tail = k.index + 1 < x.size();
  if (k.has_tail) {
    const double lx = latency.back() / latency[k.index];
    const double xx = x.back() / x[k.index];
    k.superlinear = lx > xx;
  }
  return k;
}

}  // namespace devcloud::bench
