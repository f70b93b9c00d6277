// SPDX-FileCopyrightText: Copyright 2026 The devcloud Authors
// SPDX-License-Identifier: Apache-2.0

// Selective chunk offloading and progressive early exit.

#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>

#include "devcloud/core.hpp"
#include "devcloud/models.hpp"
#include "devcloud/rng.hpp"

namespace devcloud::policy {

struct OffloadPolicyState {
  double c_th = 0.8;
  double k = 10.0;
  double i_th = std::numeric_limits<double>::infinity();  // +inf: nothing offloads
  double theta = -10.0;
  double budget = 0.0;
  double margin_threshold = 0.7;
  double exit_window = 0.25;
  double seq_exit_fraction = 0.8;

  void validate() const {
    if (!(c_th >= 0.0 && c_th <= 1.0)) throw Error(Errc::kInvalidConfig, "c_th must lie in [0, 1]");
    if (!(i_th > 0.0)) throw Error(Errc::kInvalidConfig, "i_th must be > 0");
    if (!(exit_window > 0.0 && exit_window <= 1.0)) throw Error(Errc::kInvalidConfig, "exit_window must lie in (0, 1]");
    if (!(budget >= 0.0 && budget <= 1.0)) throw Error(Errc::kInvalidConfig, "budget must lie in [0, 1]");
  }
};

// Confidence gate: 1 at or below c_th, a decreasing sigmoid above it.
inline double p_conf(double c, const OffloadPolicyState& s) {
  if (c <= s.c_th) return 1.0;
  const double norm = (c - s.c_th) / (1.0 - s.c_th) - 0.5;
  return 1.0 / (1.0 + std::exp(s.k * norm));
}

// Importance gate: 0 up to i_th/2, 1 above i_th, sigmoid (theta < 0) between.
inline double p_imp(double i, const OffloadPolicyState& s) {
  const double half = s.i_th / 2.0;
  if (i <= half) return 0.0;
  if (i > s.i_th) return 1.0;
  const double norm = (i - half) / half - 0.5;
  return 1.0 / (1.0 + std::exp(s.theta * norm));
}

enum class Decision { kRetain, kOffload };

// Which gates participate. kBoth is the full policy; the others are ablations
// (kAlways is used for offline profiling).
enum class Gating { kBoth, kConfOnly, kImpOnly, kAlways, kNever };

inline Gating parse_gating(const std::string& s) {
  if (s == "both") return Gating::kBoth;
  if (s == "conf") return Gating::kConfOnly;
  if (s == "imp") return Gating::kImpOnly;
  if (s == "always") return Gating::kAlways;
  if (s == "never") return Gating::kNever;
  throw Error(Errc::kInvalidConfig, "unknown gating '" + s + "'");
}

inline const char* to_string(Gating g) {
  switch (g) {
    case Gating::kBoth: return "both";
    case Gating::kConfOnly: return "conf";
    case Gating::kImpOnly: return "imp";
    case Gating::kAlways: return "always";
    case Gating::kNever: return "never";
  }
  return "?";
}

/// Two sequential Bernoulli gates. Always consumes exactly two uniforms so a
/// decision never shifts the random stream of the decisions after it.
inline Decision decide_offload(double chunk_confidence, double chunk_importance, const OffloadPolicyState& s,
                               Gating gating, Rng& rng) {
  const double u_conf = rng.uniform();
  const double u_imp = rng.uniform();
  const double pc = (gating == Gating::kImpOnly) ? 1.0 : p_conf(chunk_confidence, s);
  const double pi = (gating == Gating::kConfOnly) ? 1.0 : p_imp(chunk_importance, s);
  switch (gating) {
    case Gating::kAlways: return Decision::kOffload;
    case Gating::kNever: return Decision::kRetain;
    default: break;
  }
  if (!(u_conf < pc)) return Decision::kRetain;
  return u_imp < pi ? Decision::kOffload : Decision::kRetain;
}

inline Decision decide_offload(const DraftChunk& chunk, const OffloadPolicyState& s, Rng& rng) {
  return decide_offload(chunk.chunk_confidence, chunk.chunk_importance, s, Gating::kBoth, rng);
}

// First 0-based layer index allowed to exit: ceil((1 - window) * L). The small
// epsilon absorbs representation error (0.7 * 10 must give 7, not 8).
inline std::uint32_t exit_boundary(std::uint32_t layers, double exit_window) {
  return static_cast<std::uint32_t>(std::ceil((1.0 - exit_window) * static_cast<double>(layers) - 1e-9));
}

struct LayerExit {
  std::uint32_t exit_layer = 0;  // 0-based
  TokenDistribution dist;
  double confidence = 0.0;

  std::uint32_t layers_executed() const noexcept { return exit_layer + 1; }
};

inline LayerExit layer_exit(std::span<const models::LayerSignal> signals, const OffloadPolicyState& s) {
  if (signals.empty()) throw Error(Errc::kInvalidConfig, "no layer signals");
  const auto layers = static_cast<std::uint32_t>(signals.size());
  const std::uint32_t boundary = exit_boundary(layers, s.exit_window);
  for (std::uint32_t l = boundary; l + 1 < layers; ++l) {
    if (signals[l].margin > s.margin_threshold) {
      return LayerExit{l, signals[l].provisional_dist, signals[l].top1};
    }
  }
  const auto& last = signals.back();
  return LayerExit{layers - 1, last.provisional_dist, last.top1};
}

// True once offloading is switched off for the rest of the sequence.
inline bool seq_exit(std::uint64_t step, std::uint32_t max_len, double seq_exit_fraction) {
  return static_cast<double>(step) > seq_exit_fraction * static_cast<double>(max_len);
}

inline bool seq_exit(std::uint64_t step, const SessionConfig& config) {
  return seq_exit(step, config.max_len, config.seq_exit_fraction);
}

}  // namespace devcloud::policy
