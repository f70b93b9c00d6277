// SPDX-FileCopyrightText: Copyright 2026 The devcloud Authors
// SPDX-License-Identifier: Apache-2.0

// Wire protocol between device and cloud, plus the two carriers that move
// frames: a simulated channel with bandwidth/propagation delay and a real
// stream socket.
//
// Frame layout (all integers big-endian, doubles as IEEE-754 binary64 bits):
//
//   u32 length        bytes that follow this field
//   u8  version       kWireVersion
//   u8  type          MessageType
//   u64 session
//   u64 seq           strictly increasing per session and direction
//   ... body          see docs/wire-format.md

#pragma once

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <bit>
#include <cerrno>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <map>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "devcloud/core.hpp"
#include "devcloud/rng.hpp"

namespace devcloud::transport {

inline constexpr std::uint8_t kWireVersion = 1;
inline constexpr std::size_t kLengthPrefixBytes = 4;
inline constexpr std::size_t kFixedHeaderBytes = 1 + 1 + 8 + 8;
inline constexpr std::uint32_t kMaxFrameBytes = 64u << 20;

enum class MessageType : std::uint8_t {
  kHello = 1,
  kPrefillReq = 2,
  kVerifyReq = 3,
  kVerifyResp = 4,
  kResyncResp = 5,
  kBye = 6,
};

inline const char* to_string(MessageType t) {
  switch (t) {
    case MessageType::kHello: return "Hello";
    case MessageType::kPrefillReq: return "PrefillReq";
    case MessageType::kVerifyReq: return "VerifyReq";
    case MessageType::kVerifyResp: return "VerifyResp";
    case MessageType::kResyncResp: return "ResyncResp";
    case MessageType::kBye: return "Bye";
  }
  return "?";
}

/// Session parameters; lets the cloud reject a vocabulary or sampling-mode
/// mismatch before any verification happens.
struct Hello {
  std::uint32_t vocab_size = 0;
  std::uint32_t gamma = 0;
  SamplingMode sampling;
  std::uint32_t max_total_len = 0;  // absolute position cap (prompt + generation)
  std::optional<TokenId> eos;

  bool operator==(const Hello&) const = default;
};

struct PrefillRequest {
  std::vector<TokenId> tokens;

  bool operator==(const PrefillRequest&) const = default;
};

/// Cloud's answer to a verification request whose cached_len disagrees with
/// the cloud's cache: this is the cloud's view; the device re-sends the delta.
struct Resync {
  std::uint64_t cached_len = 0;

  bool operator==(const Resync&) const = default;
};

struct Bye {
  bool operator==(const Bye&) const = default;
};

using Payload = std::variant<Hello, PrefillRequest, VerificationRequest, VerificationResult, Resync, Bye>;

struct WireMessage {
  SessionId session{};
  std::uint64_t seq = 0;
  Payload payload;

  MessageType type() const {
    static constexpr MessageType kTypes[] = {MessageType::kHello,      MessageType::kPrefillReq,
                                             MessageType::kVerifyReq,  MessageType::kVerifyResp,
                                             MessageType::kResyncResp, MessageType::kBye};
    return kTypes[payload.index()];
  }

  bool operator==(const WireMessage&) const = default;
};

// ---------------------------------------------------------------------------
// Codec

namespace detail {

class Writer {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int s = 24; s >= 0; s -= 8) buf_.push_back(static_cast<std::uint8_t>(v >> s));
  }
  void u64(std::uint64_t v) {
    for (int s = 56; s >= 0; s -= 8) buf_.push_back(static_cast<std::uint8_t>(v >> s));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void count(std::size_t n) {
    if (n > std::numeric_limits<std::uint32_t>::max()) throw Error(Errc::kMalformedFrame, "count overflows u32");
    u32(static_cast<std::uint32_t>(n));
  }
  std::vector<std::uint8_t>& bytes() { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> data) : data_(data) {}

  std::uint8_t u8() {
    need(1);
    return data_[pos_++];
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v = (v << 8) | data_[pos_++];
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v = (v << 8) | data_[pos_++];
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  bool flag() {
    const auto v = u8();
    if (v > 1) throw Error(Errc::kMalformedFrame, "flag byte must be 0 or 1");
    return v == 1;
  }
  // Element count, sanity-checked against the bytes that remain.
  std::size_t count(std::size_t min_element_bytes) {
    const std::size_t n = u32();
    if (min_element_bytes > 0 && n > remaining() / min_element_bytes) {
      throw Error(Errc::kMalformedFrame, "element count exceeds frame");
    }
    return n;
  }
  std::size_t remaining() const { return data_.size() - pos_; }

 private:
  void need(std::size_t n) {
    if (remaining() < n) throw Error(Errc::kMalformedFrame, "body shorter than its fields");
  }

  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
};

inline void write_mode(Writer& w, const SamplingMode& m) {
  w.u8(static_cast<std::uint8_t>(m.kind));
  w.u32(m.k);
  w.f64(m.p);
}

inline SamplingMode read_mode(Reader& r) {
  SamplingMode m;
  const auto kind = r.u8();
  if (kind > 2) throw Error(Errc::kMalformedFrame, "unknown sampling kind");
  m.kind = static_cast<SamplingMode::Kind>(kind);
  m.k = r.u32();
  m.p = r.f64();
  return m;
}

inline void write_tokens(Writer& w, std::span<const TokenId> tokens) {
  w.count(tokens.size());
  for (TokenId t : tokens) w.u32(t);
}

inline std::vector<TokenId> read_tokens(Reader& r) {
  const std::size_t n = r.count(4);
  std::vector<TokenId> out(n);
  for (auto& t : out) t = r.u32();
  return out;
}

enum : std::uint8_t { kDistFull = 0, kDistCompressed = 1 };

inline void write_body(Writer& w, const Hello& h) {
  w.u32(h.vocab_size);
  w.u32(h.gamma);
  write_mode(w, h.sampling);
  w.u32(h.max_total_len);
  w.u8(h.eos ? 1 : 0);
  w.u32(h.eos.value_or(0));
}

inline void write_body(Writer& w, const PrefillRequest& p) { write_tokens(w, p.tokens); }

inline void write_body(Writer& w, const VerificationRequest& req) {
  const auto& chunk = req.pending;
  w.u64(req.cached_len);
  write_tokens(w, req.uncached_accepted);
  w.u32(chunk.start_pos);
  w.f64(chunk.chunk_confidence);
  w.f64(chunk.chunk_importance);
  // One sampling mode per chunk; every compressed distribution must share it.
  SamplingMode mode;
  bool have_mode = false;
  for (const auto& tok : chunk.tokens) {
    if (const auto* c = std::get_if<CompressedDistribution>(&tok.dist)) {
      if (have_mode && !(c->mode == mode)) throw Error(Errc::kMalformedFrame, "mixed compression modes in one chunk");
      mode = c->mode;
      have_mode = true;
    }
  }
  write_mode(w, mode);
  w.count(chunk.tokens.size());
  for (const auto& tok : chunk.tokens) {
    w.u32(tok.token);
    w.f64(tok.confidence);
    w.f64(tok.importance);
    if (const auto* full = std::get_if<TokenDistribution>(&tok.dist)) {
      w.u8(kDistFull);
      w.count(full->vocab_size());
      for (double p : full->probs()) w.f64(p);
    } else {
      const auto& c = std::get<CompressedDistribution>(tok.dist);
      w.u8(kDistCompressed);
      w.count(c.entries.size());
      for (const auto& [t, p] : c.entries) {
        w.u32(t);
        w.f64(p);
      }
    }
  }
}

inline void write_body(Writer& w, const VerificationResult& res) {
  if (!res.correction && res.bonus) throw Error(Errc::kMalformedFrame, "bonus flag without a token");
  w.u32(res.accepted_count);
  w.u8(static_cast<std::uint8_t>((res.correction ? 1 : 0) | (res.bonus ? 2 : 0)));
  w.u32(res.correction.value_or(0));
}

inline void write_body(Writer& w, const Resync& r) { w.u64(r.cached_len); }
inline void write_body(Writer&, const Bye&) {}

inline Hello read_hello(Reader& r) {
  Hello h;
  h.vocab_size = r.u32();
  h.gamma = r.u32();
  h.sampling = read_mode(r);
  h.max_total_len = r.u32();
  const bool has_eos = r.flag();
  const TokenId eos = r.u32();
  if (has_eos) {
    h.eos = eos;
  } else if (eos != 0) {
    throw Error(Errc::kMalformedFrame, "eos value without eos flag");
  }
  return h;
}

inline VerificationRequest read_verify_req(Reader& r, SessionId session) {
  VerificationRequest req;
  req.session = session;
  req.cached_len = r.u64();
  req.uncached_accepted = read_tokens(r);
  auto& chunk = req.pending;
  chunk.session = session;
  chunk.start_pos = r.u32();
  chunk.chunk_confidence = r.f64();
  chunk.chunk_importance = r.f64();
  const SamplingMode mode = read_mode(r);
  const std::size_t n = r.count(4 + 8 + 8 + 1 + 4);
  chunk.tokens.resize(n);
  for (auto& tok : chunk.tokens) {
    tok.token = r.u32();
    tok.confidence = r.f64();
    tok.importance = r.f64();
    const auto kind = r.u8();
    if (kind == kDistFull) {
      const std::size_t v = r.count(8);
      std::vector<double> probs(v);
      for (auto& p : probs) p = r.f64();
      try {
        tok.dist = TokenDistribution(std::move(probs));
      } catch (const Error& e) {
        throw Error(Errc::kMalformedFrame, e.what());
      }
    } else if (kind == kDistCompressed) {
      CompressedDistribution c;
      c.mode = mode;
      const std::size_t m = r.count(12);
      c.entries.resize(m);
      for (auto& [t, p] : c.entries) {
        t = r.u32();
        p = r.f64();
        if (!(p >= 0.0 && p <= 1.0)) throw Error(Errc::kMalformedFrame, "compressed probability outside [0, 1]");
      }
      c.residual_mass = std::clamp(1.0 - c.entry_mass(), 0.0, 1.0);
      tok.dist = std::move(c);
    } else {
      throw Error(Errc::kMalformedFrame, "unknown distribution tag");
    }
  }
  // Keeps decode/encode a bijection: the mode field is only meaningful when used.
  const bool any_compressed = std::any_of(chunk.tokens.begin(), chunk.tokens.end(), [](const DraftToken& t) {
    return std::holds_alternative<CompressedDistribution>(t.dist);
  });
  if (!any_compressed && !(mode == SamplingMode{})) {
    throw Error(Errc::kMalformedFrame, "sampling mode set on a chunk without compressed distributions");
  }
  return req;
}

inline VerificationResult read_verify_resp(Reader& r, SessionId session) {
  VerificationResult res;
  res.session = session;
  res.accepted_count = r.u32();
  const auto flags = r.u8();
  const TokenId token = r.u32();
  if (flags > 3 || (flags == 2)) throw Error(Errc::kMalformedFrame, "bad verdict flags");
  if (flags & 1) {
    res.correction = token;
    res.bonus = (flags & 2) != 0;
  } else if (token != 0) {
    throw Error(Errc::kMalformedFrame, "token value without correction flag");
  }
  return res;
}

}  // namespace detail

inline std::vector<std::uint8_t> encode(const WireMessage& msg) {
  detail::Writer w;
  w.u32(0);  // patched below
  w.u8(kWireVersion);
  w.u8(static_cast<std::uint8_t>(msg.type()));
  w.u64(to_underlying(msg.session));
  w.u64(msg.seq);
  std::visit(
      [&](const auto& body) {
        using T = std::decay_t<decltype(body)>;
        if constexpr (std::is_same_v<T, VerificationRequest>) {
          if (body.session != msg.session || body.pending.session != msg.session) {
            throw Error(Errc::kSessionMismatch, "payload session differs from frame session");
          }
        } else if constexpr (std::is_same_v<T, VerificationResult>) {
          if (body.session != msg.session) throw Error(Errc::kSessionMismatch, "payload session differs from frame session");
        }
        detail::write_body(w, body);
      },
      msg.payload);
  auto& bytes = w.bytes();
  const std::size_t len = bytes.size() - kLengthPrefixBytes;
  if (len > kMaxFrameBytes) throw Error(Errc::kMalformedFrame, "frame too large");
  for (int i = 0; i < 4; ++i) bytes[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(len >> (24 - 8 * i));
  return std::move(bytes);
}

struct Decoded {
  WireMessage message;
  std::size_t consumed = 0;
};

// Decodes the first frame in `data`.
inline Decoded decode(std::span<const std::uint8_t> data) {
  if (data.size() < kLengthPrefixBytes) throw Error(Errc::kTruncatedFrame, "missing length prefix");
  const std::uint32_t len = (std::uint32_t{data[0]} << 24) | (std::uint32_t{data[1]} << 16) |
                            (std::uint32_t{data[2]} << 8) | std::uint32_t{data[3]};
  if (len > kMaxFrameBytes) throw Error(Errc::kMalformedFrame, "frame too large");
  if (data.size() - kLengthPrefixBytes < len) {
    throw Error(Errc::kTruncatedFrame, "frame declares " + std::to_string(len) + " bytes, buffer holds " +
                                           std::to_string(data.size() - kLengthPrefixBytes));
  }
  if (len < kFixedHeaderBytes) throw Error(Errc::kMalformedFrame, "frame shorter than its header");
  detail::Reader r(data.subspan(kLengthPrefixBytes, len));
  const auto version = r.u8();
  if (version != kWireVersion) throw Error(Errc::kUnknownVersion, "version " + std::to_string(version));
  const auto type = r.u8();
  WireMessage msg;
  msg.session = SessionId{r.u64()};
  msg.seq = r.u64();
  switch (static_cast<MessageType>(type)) {
    case MessageType::kHello: msg.payload = detail::read_hello(r); break;
    case MessageType::kPrefillReq: msg.payload = PrefillRequest{detail::read_tokens(r)}; break;
    case MessageType::kVerifyReq: msg.payload = detail::read_verify_req(r, msg.session); break;
    case MessageType::kVerifyResp: msg.payload = detail::read_verify_resp(r, msg.session); break;
    case MessageType::kResyncResp: msg.payload = Resync{r.u64()}; break;
    case MessageType::kBye: msg.payload = Bye{}; break;
    default: throw Error(Errc::kUnknownType, "type " + std::to_string(type));
  }
  if (r.remaining() != 0) throw Error(Errc::kMalformedFrame, "trailing bytes after body");
  return Decoded{std::move(msg), kLengthPrefixBytes + len};
}

inline std::size_t encoded_size(const WireMessage& msg) { return encode(msg).size(); }

// Payload bytes spent on one draft distribution (count + entries).
inline std::size_t distribution_payload_bytes(const DraftDistribution& d) {
  if (const auto* full = std::get_if<TokenDistribution>(&d)) return 4 + 8 * full->vocab_size();
  return 4 + 12 * std::get<CompressedDistribution>(d).entries.size();
}

/// Enforces strictly increasing seq per session for one direction.
class SeqTracker {
 public:
  void accept(const WireMessage& msg) {
    auto [it, fresh] = last_.try_emplace(to_underlying(msg.session), msg.seq);
    if (!fresh) {
      if (msg.seq <= it->second) {
        throw Error(Errc::kMalformedFrame, "seq " + std::to_string(msg.seq) + " not above " + std::to_string(it->second));
      }
      it->second = msg.seq;
    }
  }

  void forget(SessionId s) { last_.erase(to_underlying(s)); }

 private:
  std::map<std::uint64_t, std::uint64_t> last_;
};

// ---------------------------------------------------------------------------
// Simulated channel

struct ChannelModel {
  double bandwidth_bps = 1e6;  // +inf: zero transmission time
  double propagation_delay_ms = 10.0;
  // Robustness knobs, off by default.
  double jitter_ms = 0.0;  // uniform extra delay in [0, jitter_ms); FIFO is preserved
  double loss_rate = 0.0;

  void validate() const {
    if (!(bandwidth_bps > 0.0)) throw Error(Errc::kInvalidConfig, "bandwidth_bps must be > 0");
    if (!(propagation_delay_ms >= 0.0)) throw Error(Errc::kInvalidConfig, "propagation delay must be >= 0");
    if (!(jitter_ms >= 0.0) || !(loss_rate >= 0.0 && loss_rate < 1.0)) {
      throw Error(Errc::kInvalidConfig, "jitter must be >= 0 and loss_rate in [0, 1)");
    }
  }

  double transmission_ms(std::size_t bytes) const {
    if (std::isinf(bandwidth_bps)) return 0.0;
    return static_cast<double>(bytes) * 8.0 / bandwidth_bps * 1000.0;
  }
};

/// One direction of a simulated link. Frames serialize onto the wire in
/// send order and are delivered in that order.
class SimChannel {
 public:
  explicit SimChannel(ChannelModel model = {}, std::uint64_t seed = 0) : model_(model), rng_(seed) { model_.validate(); }

  struct Delivery {
    double at_ms = 0.0;
    bool lost = false;
  };

  Delivery send(std::size_t bytes, double send_time_ms) {
    if (closed_) throw Error(Errc::kChannelClosed, "send on closed channel");
    const double start = std::max(send_time_ms, wire_free_ms_);
    wire_free_ms_ = start + model_.transmission_ms(bytes);
    double at = wire_free_ms_ + model_.propagation_delay_ms;
    if (model_.jitter_ms > 0.0) at += rng_.uniform() * model_.jitter_ms;
    at = std::max(at, last_delivery_ms_);
    last_delivery_ms_ = at;
    const bool lost = model_.loss_rate > 0.0 && rng_.uniform() < model_.loss_rate;
    bytes_sent_ += bytes;
    ++frames_sent_;
    return Delivery{at, lost};
  }

  void close() noexcept { closed_ = true; }
  bool closed() const noexcept { return closed_; }
  const ChannelModel& model() const noexcept { return model_; }
  std::uint64_t bytes_sent() const noexcept { return bytes_sent_; }
  std::uint64_t frames_sent() const noexcept { return frames_sent_; }

 private:
  ChannelModel model_;
  Rng rng_;
  double wire_free_ms_ = 0.0;
  double last_delivery_ms_ = 0.0;
  bool closed_ = false;
  std::uint64_t bytes_sent_ = 0;
  std::uint64_t frames_sent_ = 0;
};

// ---------------------------------------------------------------------------
// Carriers

/// Device-side view of a duplex link to the cloud.
class Carrier {
 public:
  virtual ~Carrier() = default;

  // Both throw Error(kTransportFailure) once the link is gone.
  virtual void send(const WireMessage& msg) = 0;
  virtual WireMessage receive() = 0;
  virtual std::optional<WireMessage> try_receive() = 0;
  virtual void close() = 0;

  // Simulated carriers know when the next inbound frame (or link failure)
  // lands; real carriers return nullopt.
  virtual std::optional<double> next_arrival_ms() const { return std::nullopt; }
};

namespace detail {

inline void write_all(int fd, std::span<const std::uint8_t> bytes) {
  std::size_t off = 0;
  while (off < bytes.size()) {
    const ssize_t n = ::send(fd, bytes.data() + off, bytes.size() - off, MSG_NOSIGNAL);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw Error(Errc::kTransportFailure, std::string("send: ") + std::strerror(errno));
    }
    off += static_cast<std::size_t>(n);
  }
}

// False on clean EOF before the first byte.
inline bool read_exact(int fd, std::uint8_t* out, std::size_t n) {
  std::size_t off = 0;
  while (off < n) {
    const ssize_t r = ::recv(fd, out + off, n - off, 0);
    if (r == 0) {
      if (off == 0) return false;
      throw Error(Errc::kTransportFailure, "peer closed mid-frame");
    }
    if (r < 0) {
      if (errno == EINTR) continue;
      throw Error(Errc::kTransportFailure, std::string("recv: ") + std::strerror(errno));
    }
    off += static_cast<std::size_t>(r);
  }
  return true;
}

}  // namespace detail

/// RAII socket carrying length-prefixed frames.
class TcpStream {
 public:
  TcpStream() = default;
  explicit TcpStream(int fd) : fd_(fd) {
    int one = 1;
    ::setsockopt(fd_, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
  }
  TcpStream(TcpStream&& o) noexcept : fd_(std::exchange(o.fd_, -1)) {}
  TcpStream& operator=(TcpStream&& o) noexcept {
    if (this != &o) {
      reset();
      fd_ = std::exchange(o.fd_, -1);
    }
    return *this;
  }
  TcpStream(const TcpStream&) = delete;
  TcpStream& operator=(const TcpStream&) = delete;
  ~TcpStream() { reset(); }

  static TcpStream connect(const std::string& host, std::uint16_t port) {
    addrinfo hints{};
    hints.ai_family = AF_UNSPEC;
    hints.ai_socktype = SOCK_STREAM;
    addrinfo* res = nullptr;
    const std::string service = std::to_string(port);
    if (const int rc = ::getaddrinfo(host.c_str(), service.c_str(), &hints, &res); rc != 0) {
      throw Error(Errc::kTransportFailure, "resolve " + host + ": " + ::gai_strerror(rc));
    }
    int fd = -1;
    for (addrinfo* ai = res; ai != nullptr; ai = ai->ai_next) {
      fd = ::socket(ai->ai_family, ai->ai_socktype, ai->ai_protocol);
      if (fd < 0) continue;
      if (::connect(fd, ai->ai_addr, ai->ai_addrlen) == 0) break;
      ::close(fd);
      fd = -1;
    }
    ::freeaddrinfo(res);
    if (fd < 0) throw Error(Errc::kTransportFailure, "cannot connect to " + host + ":" + service);
    return TcpStream(fd);
  }

  void write_frame(std::span<const std::uint8_t> frame) {
    std::lock_guard lock(write_mu_);
    if (fd_ < 0) throw Error(Errc::kTransportFailure, "socket closed");
    detail::write_all(fd_, frame);
  }

  // Reads one whole frame (length prefix included); nullopt on clean EOF.
  std::optional<std::vector<std::uint8_t>> read_frame() {
    if (fd_ < 0) throw Error(Errc::kTransportFailure, "socket closed");
    std::vector<std::uint8_t> buf(kLengthPrefixBytes);
    if (!detail::read_exact(fd_, buf.data(), kLengthPrefixBytes)) return std::nullopt;
    const std::uint32_t len = (std::uint32_t{buf[0]} << 24) | (std::uint32_t{buf[1]} << 16) |
                              (std::uint32_t{buf[2]} << 8) | std::uint32_t{buf[3]};
    if (len > kMaxFrameBytes) throw Error(Errc::kMalformedFrame, "frame too large");
    buf.resize(kLengthPrefixBytes + len);
    if (len > 0 && !detail::read_exact(fd_, buf.data() + kLengthPrefixBytes, len)) {
      throw Error(Errc::kTransportFailure, "peer closed mid-frame");
    }
    return buf;
  }

  bool readable(int timeout_ms) const {
    if (fd_ < 0) return false;
    pollfd p{fd_, POLLIN, 0};
    return ::poll(&p, 1, timeout_ms) > 0;
  }

  // Wakes any reader blocked on this socket.
  void shutdown() noexcept {
    if (fd_ >= 0) ::shutdown(fd_, SHUT_RDWR);
  }

  bool valid() const noexcept { return fd_ >= 0; }

 private:
  void reset() noexcept {
    if (fd_ >= 0) ::close(fd_);
    fd_ = -1;
  }

  int fd_ = -1;
  std::mutex write_mu_;
};

class TcpListener {
 public:
  explicit TcpListener(std::uint16_t port, const std::string& bind_host = "127.0.0.1") {
    fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd_ < 0) throw Error(Errc::kTransportFailure, "socket() failed");
    int one = 1;
    ::setsockopt(fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(port);
    if (::inet_pton(AF_INET, bind_host.c_str(), &addr.sin_addr) != 1) {
      ::close(fd_);
      throw Error(Errc::kInvalidConfig, "bind host must be an IPv4 address: " + bind_host);
    }
    if (::bind(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0 || ::listen(fd_, 64) != 0) {
      const std::string err = std::strerror(errno);
      ::close(fd_);
      throw Error(Errc::kTransportFailure, "bind/listen on port " + std::to_string(port) + ": " + err);
    }
    socklen_t len = sizeof(addr);
    ::getsockname(fd_, reinterpret_cast<sockaddr*>(&addr), &len);
    port_ = ntohs(addr.sin_port);
  }
  TcpListener(const TcpListener&) = delete;
  TcpListener& operator=(const TcpListener&) = delete;
  ~TcpListener() { close(); }

  // Waits up to timeout_ms; nullopt on timeout.
  std::optional<TcpStream> accept(int timeout_ms) {
    if (fd_ < 0) return std::nullopt;
    pollfd p{fd_, POLLIN, 0};
    if (::poll(&p, 1, timeout_ms) <= 0) return std::nullopt;
    const int fd = ::accept(fd_, nullptr, nullptr);
    if (fd < 0) return std::nullopt;
    return TcpStream(fd);
  }

  std::uint16_t port() const noexcept { return port_; }

  void close() noexcept {
    if (fd_ >= 0) ::close(fd_);
    fd_ = -1;
  }

 private:
  int fd_ = -1;
  std::uint16_t port_ = 0;
};

/// Device-side carrier over one TCP connection (one connection per session).
class TcpCarrier final : public Carrier {
 public:
  TcpCarrier(const std::string& host, std::uint16_t port) : stream_(TcpStream::connect(host, port)) {}

  void send(const WireMessage& msg) override { stream_.write_frame(encode(msg)); }

  WireMessage receive() override {
    auto frame = stream_.read_frame();
    if (!frame) throw Error(Errc::kTransportFailure, "connection closed by cloud");
    auto msg = decode(*frame).message;
    inbound_.accept(msg);
    return msg;
  }

  std::optional<WireMessage> try_receive() override {
    if (!stream_.readable(0)) return std::nullopt;
    return receive();
  }

  void close() override { stream_.shutdown(); }

 private:
  TcpStream stream_;
  SeqTracker inbound_;
};

}  // namespace devcloud::transport
