#pragma once

#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <chrono>
#include <cstring>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "bbta/common.hpp"
#include "bbta/net.hpp"
#include "bbta/tensor.hpp"

namespace bbta {

inline constexpr double kDefaultPricePerRequest = 0.0032;  // dollars

// Count and dollar cost of black-box API calls. One image = one request;
// cost is always requests * price (computed, never stored separately).
struct QueryLedger {
  std::int64_t total_requests = 0;
  double price_per_request = kDefaultPricePerRequest;
  std::map<std::string, std::int64_t> per_method;

  double total_cost() const { return static_cast<double>(total_requests) * price_per_request; }
};

struct LatencyModel {
  double fixed_ms = 0.0;
  double jitter_ms = 0.0;
  std::uint64_t seed = 0;
};

// The simulated opaque classifier. Accepts image batches, returns softmax
// probabilities, counts every image against the ledger. Nothing but
// probabilities and the request id ever leaves a classify call.
class ServiceCore {
 public:
  ServiceCore(MlpNet net, double price = kDefaultPricePerRequest,
              LatencyModel latency = {}, int max_batch = 256,
              bool clamp_inputs = false)
      : net_(std::move(net)),
        latency_(latency),
        latency_rng_(latency.seed),
        max_batch_(max_batch),
        clamp_inputs_(clamp_inputs) {
    ledger_.price_per_request = price;
  }

  int class_count() const { return net_.class_count; }
  int input_dim() const { return net_.input_dim; }

  // Returns the response JSON string (classify or error). Retransmissions of
  // an already-answered request id replay the cached response without
  // touching the ledger.
  std::string handle_frame(const std::string& frame) {
    nlohmann::json req;
    try {
      req = nlohmann::json::parse(frame);
    } catch (const nlohmann::json::exception&) {
      return error_response("", "malformed frame: not valid JSON");
    }
    const std::string id = req.value("id", "");
    const std::string op = req.value("op", "");
    if (op != "classify")
      return error_response(id, "unknown op: '" + op + "'");
    if (id.empty()) return error_response(id, "missing request id");

    {
      std::lock_guard<std::mutex> lock(mu_);
      auto it = answered_.find(id);
      if (it != answered_.end()) return it->second;
    }

    std::vector<int> shape;
    std::vector<double> pixels;
    try {
      shape = req.at("shape").get<std::vector<int>>();
      pixels = req.at("pixels").get<std::vector<double>>();
    } catch (const nlohmann::json::exception&) {
      return error_response(id, "malformed frame: shape/pixels missing or mistyped");
    }
    if (shape.size() != 4) return error_response(id, "shape must be [n,h,w,c]");
    const int n = shape[0];
    const std::int64_t dim = static_cast<std::int64_t>(shape[1]) * shape[2] * shape[3];
    if (n < 1) return error_response(id, "empty batch");
    if (n > max_batch_)
      return error_response(id, "batch size " + std::to_string(n) + " exceeds limit " +
                                    std::to_string(max_batch_));
    if (static_cast<std::int64_t>(pixels.size()) != n * dim)
      return error_response(id, "pixel count does not match shape");
    if (dim != net_.input_dim)
      return error_response(id, "image dimensions do not match the served model");

    Tensor batch({n, static_cast<int>(dim)}, std::move(pixels));
    const std::string tag = req.value("tag", "untagged");
    Tensor probs = classify_batch(batch, id, tag);

    nlohmann::json resp;
    resp["id"] = id;
    auto rows = nlohmann::json::array();
    for (int r = 0; r < n; ++r) {
      auto row = nlohmann::json::array();
      for (int c = 0; c < net_.class_count; ++c) row.push_back(round_sig(probs.at(r, c), 9));
      rows.push_back(std::move(row));
    }
    resp["probs"] = std::move(rows);
    std::string out = resp.dump();
    {
      std::lock_guard<std::mutex> lock(mu_);
      answered_.emplace(id, out);
    }
    return out;
  }

  // Direct entry for the in-process transport. Same ledger and idempotency
  // semantics, no serialization.
  Tensor classify_direct(const Tensor& batch, const std::string& request_id,
                         const std::string& tag) {
    if (batch.rank() != 2 || batch.dim(1) != net_.input_dim)
      throw TransportError("classify: image dimensions do not match the served model");
    if (batch.dim(0) < 1) throw TransportError("classify: empty batch");
    if (batch.dim(0) > max_batch_)
      throw TransportError("classify: batch size " + std::to_string(batch.dim(0)) +
                           " exceeds limit " + std::to_string(max_batch_));
    {
      std::lock_guard<std::mutex> lock(mu_);
      if (answered_.count(request_id))
        throw TransportError("classify_direct: duplicate request id " + request_id);
    }
    Tensor probs = classify_batch(batch, request_id, tag);
    std::lock_guard<std::mutex> lock(mu_);
    answered_.emplace(request_id, "");
    return probs;
  }

  QueryLedger ledger() const {
    std::lock_guard<std::mutex> lock(mu_);
    return ledger_;
  }

  std::string ledger_json() const {
    QueryLedger led = ledger();
    nlohmann::json j;
    j["total_requests"] = led.total_requests;
    j["total_cost"] = led.total_cost();
    j["price_per_request"] = led.price_per_request;
    j["per_method"] = led.per_method;
    return j.dump();
  }

  const MlpNet& net_for_analysis() const { return net_; }

 private:
  static std::string error_response(const std::string& id, const std::string& msg) {
    nlohmann::json resp;
    resp["id"] = id;
    resp["error"] = msg;
    return resp.dump();
  }

  Tensor classify_batch(Tensor batch, const std::string&, const std::string& tag) {
    if (clamp_inputs_)
      for (double& v : batch.data) v = std::clamp(v, 0.0, 1.0);
    apply_latency();
    Tensor probs = net_.forward_probs(batch);
    {
      std::lock_guard<std::mutex> lock(mu_);
      ledger_.total_requests += batch.dim(0);
      ledger_.per_method[tag] += batch.dim(0);
    }
    return probs;
  }

  void apply_latency() {
    if (latency_.fixed_ms <= 0.0 && latency_.jitter_ms <= 0.0) return;
    double ms = latency_.fixed_ms;
    if (latency_.jitter_ms > 0.0) {
      std::lock_guard<std::mutex> lock(mu_);
      ms += uniform(latency_rng_, 0.0, latency_.jitter_ms);
    }
    std::this_thread::sleep_for(std::chrono::duration<double, std::milli>(ms));
  }

  MlpNet net_;
  LatencyModel latency_;
  Rng latency_rng_;
  int max_batch_;
  bool clamp_inputs_;
  mutable std::mutex mu_;
  QueryLedger ledger_;
  std::unordered_map<std::string, std::string> answered_;
};

// ---------------------------------------------------------------------------
// Wire framing: 4-byte big-endian length prefix + JSON payload.
// ---------------------------------------------------------------------------

namespace wire {

inline constexpr std::uint32_t kMaxFrame = 256u * 1024u * 1024u;

inline bool write_all(int fd, const void* data, std::size_t len) {
  const char* p = static_cast<const char*>(data);
  while (len > 0) {
    const ssize_t n = ::send(fd, p, len, MSG_NOSIGNAL);
    if (n <= 0) return false;
    p += n;
    len -= static_cast<std::size_t>(n);
  }
  return true;
}

inline bool read_all(int fd, void* data, std::size_t len) {
  char* p = static_cast<char*>(data);
  while (len > 0) {
    const ssize_t n = ::recv(fd, p, len, 0);
    if (n <= 0) return false;
    p += n;
    len -= static_cast<std::size_t>(n);
  }
  return true;
}

inline bool send_frame(int fd, const std::string& payload) {
  std::uint32_t len = htonl(static_cast<std::uint32_t>(payload.size()));
  return write_all(fd, &len, 4) && write_all(fd, payload.data(), payload.size());
}

// Empty optional on EOF/short read/oversized frame.
inline std::optional<std::string> recv_frame(int fd) {
  std::uint32_t len_be = 0;
  if (!read_all(fd, &len_be, 4)) return std::nullopt;
  const std::uint32_t len = ntohl(len_be);
  if (len > kMaxFrame) return std::nullopt;
  std::string payload(len, '\0');
  if (!read_all(fd, payload.data(), len)) return std::nullopt;
  return payload;
}

}  // namespace wire

// TCP front end: a classify listener plus a separate admin listener that
// serves ledger totals. One thread per connection; a connection carries any
// number of length-prefixed requests.
class TcpService {
 public:
  TcpService(std::shared_ptr<ServiceCore> core, const std::string& bind_addr,
             int port, int admin_port)
      : core_(std::move(core)) {
    listen_fd_ = open_listener(bind_addr, port, &port_);
    admin_fd_ = open_listener(bind_addr, admin_port, &admin_port_);
    running_ = true;
    accept_thread_ = std::thread([this] { accept_loop(listen_fd_, false); });
    admin_thread_ = std::thread([this] { accept_loop(admin_fd_, true); });
  }

  ~TcpService() { stop(); }

  int port() const { return port_; }
  int admin_port() const { return admin_port_; }
  const std::shared_ptr<ServiceCore>& core() const { return core_; }

  void stop() {
    bool expected = true;
    if (!running_.compare_exchange_strong(expected, false)) return;
    ::shutdown(listen_fd_, SHUT_RDWR);
    ::shutdown(admin_fd_, SHUT_RDWR);
    ::close(listen_fd_);
    ::close(admin_fd_);
    if (accept_thread_.joinable()) accept_thread_.join();
    if (admin_thread_.joinable()) admin_thread_.join();
    {
      std::lock_guard<std::mutex> lock(workers_mu_);
      for (int fd : conn_fds_) ::shutdown(fd, SHUT_RDWR);
    }
    std::lock_guard<std::mutex> lock(workers_mu_);
    for (auto& t : workers_)
      if (t.joinable()) t.join();
    workers_.clear();
  }

 private:
  static int open_listener(const std::string& bind_addr, int port, int* bound_port) {
    const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd < 0) throw TransportError("socket() failed");
    int one = 1;
    ::setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(static_cast<std::uint16_t>(port));
    if (::inet_pton(AF_INET, bind_addr.c_str(), &addr.sin_addr) != 1) {
      ::close(fd);
      throw TransportError("bad bind address: " + bind_addr);
    }
    if (::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
      ::close(fd);
      throw TransportError("bind failed on " + bind_addr + ":" + std::to_string(port));
    }
    if (::listen(fd, 64) != 0) {
      ::close(fd);
      throw TransportError("listen failed");
    }
    socklen_t alen = sizeof(addr);
    ::getsockname(fd, reinterpret_cast<sockaddr*>(&addr), &alen);
    *bound_port = ntohs(addr.sin_port);
    return fd;
  }

  void accept_loop(int listen_fd, bool admin) {
    while (running_) {
      const int conn = ::accept(listen_fd, nullptr, nullptr);
      if (conn < 0) {
        if (!running_) break;
        continue;
      }
      std::lock_guard<std::mutex> lock(workers_mu_);
      conn_fds_.push_back(conn);
      workers_.emplace_back([this, conn, admin] { serve_connection(conn, admin); });
    }
  }

  void serve_connection(int conn, bool admin) {
    while (running_) {
      auto frame = wire::recv_frame(conn);
      if (!frame) break;
      std::string resp;
      if (admin) {
        nlohmann::json req;
        try {
          req = nlohmann::json::parse(*frame);
        } catch (const nlohmann::json::exception&) {
          req = nlohmann::json::object();
        }
        if (req.value("op", "") == "ledger")
          resp = core_->ledger_json();
        else
          resp = R"({"error":"unknown admin op"})";
      } else {
        resp = core_->handle_frame(*frame);
      }
      if (!wire::send_frame(conn, resp)) break;
    }
    ::close(conn);
    std::lock_guard<std::mutex> lock(workers_mu_);
    conn_fds_.erase(std::remove(conn_fds_.begin(), conn_fds_.end(), conn), conn_fds_.end());
  }

  std::shared_ptr<ServiceCore> core_;
  int listen_fd_ = -1, admin_fd_ = -1;
  int port_ = 0, admin_port_ = 0;
  std::atomic<bool> running_{false};
  std::thread accept_thread_, admin_thread_;
  std::mutex workers_mu_;
  std::vector<std::thread> workers_;
  std::vector<int> conn_fds_;
};

// ---------------------------------------------------------------------------
// Client side.
// ---------------------------------------------------------------------------

// The opaque client surface: probabilities, request id, wall time. Nothing
// else crosses the boundary.
class BlackBoxClient {
 public:
  struct Result {
    Tensor probs;  // [N, K]
    std::string request_id;
    double wall_ms = 0.0;
  };

  virtual ~BlackBoxClient() = default;
  virtual Result classify(const Tensor& images, const std::string& tag) = 0;
  virtual int class_count() const = 0;
};

namespace detail {

inline std::string fresh_request_id(std::atomic<std::uint64_t>& counter, std::uint64_t salt) {
  return "r" + std::to_string(counter.fetch_add(1)) + "-" + hex64(salt);
}

// Distinct per client instance so ids never collide across clients.
inline std::uint64_t client_salt(const void* self) {
  static std::atomic<std::uint64_t> instances{0};
  const std::uint64_t n = instances.fetch_add(1);
  return fnv1a64(&n, sizeof(n)) ^ fnv1a64(&self, sizeof(self));
}

}  // namespace detail

// Same contract as the TCP client, minus sockets. Fast path for tests and
// in-process experiment runs.
class InProcessClient final : public BlackBoxClient {
 public:
  explicit InProcessClient(std::shared_ptr<ServiceCore> core)
      : core_(std::move(core)), salt_(detail::client_salt(this)) {}

  Result classify(const Tensor& images, const std::string& tag) override {
    const auto t0 = std::chrono::steady_clock::now();
    Result res;
    res.request_id = detail::fresh_request_id(counter_, salt_);
    res.probs = core_->classify_direct(images, res.request_id, tag);
    res.wall_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    return res;
  }

  int class_count() const override { return core_->class_count(); }

 private:
  std::shared_ptr<ServiceCore> core_;
  std::atomic<std::uint64_t> counter_{0};
  std::uint64_t salt_;
};

struct TcpClientConfig {
  std::string host = "127.0.0.1";
  int port = 0;
  int timeout_ms = 5000;
  int max_retries = 3;
  int backoff_ms = 50;  // doubles per retry, capped
};

// Blocking TCP client. Retries on transport failure with capped backoff,
// reusing the request id so retransmissions are never double-counted.
class TcpClient final : public BlackBoxClient {
 public:
  explicit TcpClient(TcpClientConfig cfg)
      : cfg_(std::move(cfg)), salt_(detail::client_salt(this)) {}

  ~TcpClient() override { disconnect(); }

  Result classify(const Tensor& images, const std::string& tag) override {
    if (images.rank() != 2) throw ConfigError("TcpClient: images must be [N, D]");
    return classify_image_batch(images, 1, 1, images.dim(1), tag);
  }

  int class_count() const override {
    if (class_count_ > 0) return class_count_;
    throw TransportError("TcpClient: class count unknown before first response");
  }

  // True shape of the served batch is [n,h,w,c]; classify() flattens. Callers
  // that know h/w/c can use this to send the richer header.
  Result classify_image_batch(const Tensor& images, int h, int w, int c,
                              const std::string& tag) {
    if (images.dim(1) != h * w * c) throw ConfigError("TcpClient: shape mismatch");
    const auto t0 = std::chrono::steady_clock::now();
    Result res;
    res.request_id = detail::fresh_request_id(counter_, salt_);
    nlohmann::json req;
    req["id"] = res.request_id;
    req["op"] = "classify";
    req["tag"] = tag;
    req["shape"] = std::vector<int>{images.dim(0), h, w, c};
    auto px = nlohmann::json::array();
    for (double v : images.data) px.push_back(round_sig(v, 9));
    req["pixels"] = std::move(px);
    nlohmann::json resp = nlohmann::json::parse(round_trip(req.dump()));
    if (resp.contains("error"))
      throw TransportError("service rejected request: " + resp["error"].get<std::string>());
    if (resp.value("id", "") != res.request_id)
      throw TransportError("response id does not match request id");
    const auto rows = resp.at("probs");
    const int n = static_cast<int>(rows.size());
    const int k = static_cast<int>(rows.at(0).size());
    res.probs = Tensor({n, k});
    for (int r = 0; r < n; ++r)
      for (int cc = 0; cc < k; ++cc) res.probs.at(r, cc) = rows.at(static_cast<std::size_t>(r)).at(static_cast<std::size_t>(cc)).get<double>();
    res.wall_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    class_count_ = k;
    return res;
  }

 private:
  std::string round_trip(const std::string& payload) {
    int backoff = cfg_.backoff_ms;
    std::string last_error = "no attempt made";
    for (int attempt = 0; attempt <= cfg_.max_retries; ++attempt) {
      if (attempt > 0) {
        std::this_thread::sleep_for(std::chrono::milliseconds(backoff));
        backoff = std::min(backoff * 2, 2000);
      }
      try {
        ensure_connected();
        if (!wire::send_frame(fd_, payload)) {
          disconnect();
          last_error = "send failed";
          continue;
        }
        auto resp = wire::recv_frame(fd_);
        if (!resp) {
          disconnect();
          last_error = "connection closed or receive timeout";
          continue;
        }
        if (auto parsed = nlohmann::json::parse(*resp, nullptr, false); !parsed.is_discarded()) {
          if (parsed.contains("probs")) {
            // cache class count opportunistically
            class_count_ = static_cast<int>(parsed["probs"].at(0).size());
          }
        }
        return *resp;
      } catch (const TransportError& e) {
        disconnect();
        last_error = e.what();
      }
    }
    throw TransportError("request failed after " + std::to_string(cfg_.max_retries + 1) +
                         " attempts: " + last_error);
  }

  void ensure_connected() {
    if (fd_ >= 0) return;
    const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd < 0) throw TransportError("socket() failed");
    timeval tv{};
    tv.tv_sec = cfg_.timeout_ms / 1000;
    tv.tv_usec = (cfg_.timeout_ms % 1000) * 1000;
    ::setsockopt(fd, SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof(tv));
    ::setsockopt(fd, SOL_SOCKET, SO_SNDTIMEO, &tv, sizeof(tv));
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(static_cast<std::uint16_t>(cfg_.port));
    if (::inet_pton(AF_INET, cfg_.host.c_str(), &addr.sin_addr) != 1) {
      ::close(fd);
      throw TransportError("bad host: " + cfg_.host);
    }
    if (::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
      ::close(fd);
      throw TransportError("connect failed to " + cfg_.host + ":" + std::to_string(cfg_.port));
    }
    fd_ = fd;
  }

  void disconnect() {
    if (fd_ >= 0) {
      ::close(fd_);
      fd_ = -1;
    }
  }

  TcpClientConfig cfg_;
  int fd_ = -1;
  int class_count_ = 0;
  std::atomic<std::uint64_t> counter_{0};
  std::uint64_t salt_;
};

// Fetch ledger totals from the admin port.
inline QueryLedger fetch_ledger(const std::string& host, int admin_port,
                                int timeout_ms = 5000) {
  const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  if (fd < 0) throw TransportError("socket() failed");
  timeval tv{};
  tv.tv_sec = timeout_ms / 1000;
  tv.tv_usec = (timeout_ms % 1000) * 1000;
  ::setsockopt(fd, SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof(tv));
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(static_cast<std::uint16_t>(admin_port));
  if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1 ||
      ::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
    ::close(fd);
    throw TransportError("cannot reach admin port");
  }
  wire::send_frame(fd, R"({"op":"ledger"})");
  auto resp = wire::recv_frame(fd);
  ::close(fd);
  if (!resp) throw TransportError("no admin response");
  nlohmann::json j = nlohmann::json::parse(*resp);
  QueryLedger led;
  led.total_requests = j.at("total_requests").get<std::int64_t>();
  led.price_per_request = j.at("price_per_request").get<double>();
  for (auto& [k, v] : j.at("per_method").items()) led.per_method[k] = v.get<std::int64_t>();
  return led;
}

// Analysis-only view of a simulator net: exposes the model for gradient
// computation. Deliberately NOT a BlackBoxClient, so adaptation code cannot
// accept it; queries through it never touch any ledger.
class WhiteboxHandle {
 public:
  explicit WhiteboxHandle(const MlpNet& net) : net_(&net) {}
  explicit WhiteboxHandle(const ServiceCore& core) : net_(&core.net_for_analysis()) {}

  const MlpNet& net() const { return *net_; }
  Tensor forward_probs(const Tensor& batch) const { return net_->forward_probs(batch); }

 private:
  const MlpNet* net_;
};

static_assert(!std::is_convertible_v<WhiteboxHandle*, BlackBoxClient*>,
              "the white-box handle must never pass as an opaque client");

}  // namespace bbta
