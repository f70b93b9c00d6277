// SPDX-FileCopyrightText: Copyright 2026 The devcloud Authors
// SPDX-License-Identifier: Apache-2.0

// Offline profiling: confidence cut-off, importance CDF and the acceptance
// parameter of the rejection predictor, measured with every chunk offloaded.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iostream>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "devcloud/clock.hpp"
#include "devcloud/cloud.hpp"
#include "devcloud/core.hpp"
#include "devcloud/device.hpp"
#include "devcloud/models.hpp"
#include "devcloud/policy.hpp"
#include "devcloud/transport.hpp"

namespace devcloud::profiler {

inline constexpr double kFallbackCth = 0.8;
inline constexpr double kAlphaMin = 1e-6;
inline constexpr double kAlphaMax = 1.0 - 1e-6;

struct ProfileResult {
  double c_th = kFallbackCth;
  bool c_th_fallback = false;
  std::vector<double> importance_cdf;  // sorted ascending
  double mean_accepted = 1.0;          // E: tokens produced per full-length chunk
  double alpha = 0.5;
  std::uint32_t gamma = 4;
  std::uint64_t chunks = 0;
  std::uint64_t fully_accepted_chunks = 0;
  std::string provenance;
};

// Expected tokens per chunk under the capped geometric model.
inline double expected_tokens(double alpha, std::uint32_t gamma) {
  double sum = 0.0, term = 1.0;
  for (std::uint32_t j = 0; j <= gamma; ++j) {
    sum += term;
    term *= alpha;
  }
  return sum;
}

inline double calibrate_alpha(double e, std::uint32_t gamma) {
  if (gamma < 1) throw Error(Errc::kInvalidConfig, "gamma must be >= 1");
  if (!(e >= 1.0 && e <= static_cast<double>(gamma) + 1.0)) {
    throw Error(Errc::kEOutOfRange, "E=" + std::to_string(e) + " outside [1, gamma+1]");
  }
  if (e <= expected_tokens(kAlphaMin, gamma)) return kAlphaMin;
  if (e >= expected_tokens(kAlphaMax, gamma)) return kAlphaMax;
  double lo = kAlphaMin, hi = kAlphaMax;
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    const double f = expected_tokens(mid, gamma) - e;
    if (std::abs(f) < 1e-10 && hi - lo < 1e-12) return mid;
    (f < 0.0 ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

// (1 - budget)-quantile of the sorted sample, linear interpolation between
// order statistics. Budget 0 maps to +inf so nothing offloads.
inline double budget_to_ith(std::span<const double> sorted, double budget) {
  if (sorted.empty()) throw Error(Errc::kEmptyCdf, "no importance samples");
  if (!(budget >= 0.0 && budget <= 1.0)) throw Error(Errc::kInvalidConfig, "budget must lie in [0, 1]");
  if (budget == 0.0) return std::numeric_limits<double>::infinity();
  const double pos = (1.0 - budget) * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

inline double budget_to_ith(const ProfileResult& p, double budget) { return budget_to_ith(p.importance_cdf, budget); }

// Policy thresholds for a run at `budget`; layer-exit settings come from `base`.
inline policy::OffloadPolicyState policy_from_profile(const ProfileResult& p, double budget,
                                                      policy::OffloadPolicyState base = {}) {
  base.c_th = p.c_th;
  base.i_th = budget_to_ith(p, budget);
  base.budget = budget;
  return base;
}

struct ProfileSpec {
  std::shared_ptr<const models::LanguageModel> draft;
  std::shared_ptr<const models::LanguageModel> target;
  std::shared_ptr<const models::ImportanceProvider> importance;
  std::vector<std::vector<TokenId>> prompts;
  SessionConfig session;
  policy::OffloadPolicyState policy;  // layer-exit settings only
  bool early_exit = true;
  std::uint64_t cloud_seed = 0;
  std::string provenance;
  std::ostream* warnings = &std::cerr;
};

/// Runs every prompt with all chunks offloaded (no parallel inference) over a
/// zero-latency in-process link and aggregates the per-chunk verdicts.
inline ProfileResult profile(const ProfileSpec& spec) {
  if (!spec.draft || !spec.target) throw Error(Errc::kInvalidConfig, "profile needs both models");
  if (spec.draft->vocab_size() != spec.target->vocab_size()) {
    throw Error(Errc::kInvalidConfig, "draft and target vocabularies differ");
  }
  ProfileResult out;
  out.gamma = spec.session.gamma;
  out.provenance = spec.provenance;
  double conf_sum = 0.0, e_sum = 0.0;
  std::uint64_t e_count = 0;

  SessionConfig cfg = spec.session;
  cfg.seq_exit_fraction = 1.0;
  policy::OffloadPolicyState pol = spec.policy;
  pol.i_th = std::numeric_limits<double>::infinity();
  device::DeviceOptions opt;
  opt.parallel_inference = false;
  opt.early_exit = spec.early_exit;
  opt.gating = policy::Gating::kAlways;
  opt.per_layer_ms = 0.0;
  transport::ChannelModel link{std::numeric_limits<double>::infinity(), 0.0, 0.0, 0.0};
  cloud::ComputeCostModel free_cost{0.0, 0.0, cloud::kDefaultChunkSize, true};

  for (std::size_t i = 0; i < spec.prompts.size(); ++i) {
    cloud::CloudRuntime cloud(spec.target, free_cost, spec.cloud_seed);
    SimClock clock;
    cloud::LoopbackCarrier carrier(cloud, clock, link, i);
    cfg.seed = spec.session.seed + i;
    device::DeviceSession s(SessionId{i + 1}, cfg, pol, opt, spec.draft, spec.importance, spec.prompts[i]);
    s.on_verdict = [&](const VerificationRequest& req, const VerificationResult& res) {
      const auto& chunk = req.pending;
      out.chunks += 1;
      out.importance_cdf.push_back(chunk.chunk_importance);
      if (res.accepted_count == chunk.size()) {
        out.fully_accepted_chunks += 1;
        conf_sum += chunk.chunk_confidence;
      }
      if (chunk.size() == cfg.gamma && res.correction) {
        e_sum += res.accepted_count + 1.0;
        e_count += 1;
      }
    };
    device::run_session(s, carrier, clock);
  }

  std::sort(out.importance_cdf.begin(), out.importance_cdf.end());
  if (out.fully_accepted_chunks > 0) {
    out.c_th = conf_sum / static_cast<double>(out.fully_accepted_chunks);
  } else {
    out.c_th = kFallbackCth;
    out.c_th_fallback = true;
    if (spec.warnings) *spec.warnings << "warning: no fully accepted chunks; c_th falls back to " << kFallbackCth << "\n";
  }
  out.mean_accepted = e_count > 0 ? e_sum / static_cast<double>(e_count) : 1.0;
  out.alpha = calibrate_alpha(std::clamp(out.mean_accepted, 1.0, out.gamma + 1.0), out.gamma);
  return out;
}

inline nlohmann::json to_json(const ProfileResult& p) {
  return nlohmann::json{{"c_th", p.c_th},
                        {"c_th_fallback", p.c_th_fallback},
                        {"alpha", p.alpha},
                        {"gamma", p.gamma},
                        {"mean_accepted", p.mean_accepted},
                        {"chunks", p.chunks},
                        {"fully_accepted_chunks", p.fully_accepted_chunks},
                        {"provenance", p.provenance},
                        {"importance_cdf", p.importance_cdf}};
}

inline ProfileResult from_json(const nlohmann::json& j) {
  ProfileResult p;
  try {
    p.c_th = j.at("c_th").get<double>();
    p.alpha = j.at("alpha").get<double>();
    p.gamma = j.at("gamma").get<std::uint32_t>();
    p.importance_cdf = j.at("importance_cdf").get<std::vector<double>>();
    p.c_th_fallback = j.value("c_th_fallback", false);
    p.mean_accepted = j.value("mean_accepted", 1.0);
    p.chunks = j.value("chunks", std::uint64_t{0});
    p.fully_accepted_chunks = j.value("fully_accepted_chunks", std::uint64_t{0});
    p.provenance = j.value("provenance", std::string{});
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::kParse, std::string("profile: ") + e.what());
  }
  if (!std::is_sorted(p.importance_cdf.begin(), p.importance_cdf.end())) {
    throw Error(Errc::kParse, "profile: importance_cdf must be sorted ascending");
  }
  if (!(p.alpha > 0.0 && p.alpha < 1.0)) throw Error(Errc::kParse, "profile: alpha must lie in (0, 1)");
  return p;
}

inline void save(const ProfileResult& p, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error(Errc::kIo, "cannot write " + path);
  out << to_json(p).dump(2) << "\n";
}

inline ProfileResult load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::kIo, "cannot open " + path);
  try {
    return from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(Errc::kParse, path + ": " + e.what());
  }
}

}  // namespace devcloud::profiler
