// SPDX-FileCopyrightText: Copyright 2026 The devcloud Authors
// SPDX-License-Identifier: Apache-2.0

// Injectable time source. Simulated and wall-clock runs share one code path.

#pragma once

#include <algorithm>
#include <chrono>
#include <thread>

namespace devcloud {

class Clock {
 public:
  virtual ~Clock() = default;

  virtual double now_ms() const = 0;
  // Moves time forward to `t_ms`; never backwards.
  virtual void advance_to(double t_ms) = 0;

  void advance(double d_ms) { advance_to(now_ms() + d_ms); }
};

class SimClock final : public Clock {
 public:
  explicit SimClock(double start_ms = 0.0) : now_(start_ms) {}

  double now_ms() const override { return now_; }
  void advance_to(double t_ms) override { now_ = std::max(now_, t_ms); }

 private:
  double now_;
};

/// Milliseconds since construction; advance_to() sleeps, which is how device
/// compute time is emulated in real-socket runs.
class WallClock final : public Clock {
 public:
  WallClock() : start_(std::chrono::steady_clock::now()) {}

  double now_ms() const override {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start_).count();
  }

  void advance_to(double t_ms) override {
    const double wait = t_ms - now_ms();
    if (wait > 0.0) std::this_thread::sleep_for(std::chrono::duration<double, std::milli>(wait));
  }

 private:
  std::chrono::steady_clock::time_point start_;
};

}  // namespace devcloud
