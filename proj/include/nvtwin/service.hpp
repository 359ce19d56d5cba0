#pragma once

// HTTP front end of the virtual lab.
//
// Request/response endpoints under /api/v1 take and return JSON; the
// session event stream is served as server-sent events on
// GET /api/v1/events. See README.md for the schemas.

#include "nvtwin/config.hpp"
#include "nvtwin/dataset.hpp"
#include "nvtwin/experiments.hpp"

#include <json.hpp>

#include <chrono>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace nvtwin::service {

using Json = nlohmann::json;

inline constexpr int kApiVersion = 1;

enum class EventKind { state_changed, experiment_started, progress, point_ready, experiment_done, error };
std::string to_string(EventKind k);

struct Event {
  std::uint64_t sequence = 0;
  EventKind kind = EventKind::state_changed;
  double time = 0.0;  // s since service start
  Json payload = Json::object();
};

Json to_json(const Event& e);
/// One server-sent-events frame: id, event and data lines.
std::string sse_frame(const Event& e);

struct ServiceOptions {
  std::filesystem::path data_dir = "datasets";
  /// Extra wall-clock time per sweep point (slow-dwell injection).
  std::chrono::milliseconds point_delay{0};
  /// Events queued per subscriber before it is dropped as too slow.
  std::size_t client_buffer = 4096;
  /// Events kept for `since` resumption.
  std::size_t history = 8192;
};

/// Result of a request handled by the service core: HTTP status plus JSON body.
struct Reply {
  int status = 200;
  Json body = Json::object();
};

/// Bounded per-client event queue.
class Subscription {
 public:
  /// Waits up to `timeout` for events; empty when none arrived.
  std::vector<Event> wait(std::chrono::milliseconds timeout);
  /// True once the service dropped this client (overflow or shutdown).
  bool closed() const;
  /// Why the subscription closed: "slow_consumer" or "shutdown".
  std::string reason() const;

 private:
  friend class Service;
  struct State;
  std::shared_ptr<State> state_;
};

class Service {
 public:
  Service(config::LabConfig cfg, ServiceOptions options = {});
  ~Service();
  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  // --- core operations (HTTP handlers call these) ---
  Reply health() const;
  Reply get_config() const;
  Reply get_state() const;
  Reply put_state(const Json& body);
  Reply post_sample(const Json& body);
  Reply start_experiment(const std::string& kind, const Json& params);
  Reply abort_experiment();
  Reply current_experiment() const;
  Reply list_datasets() const;
  /// JSON form of a stored dataset; nullopt when the name is unknown.
  std::optional<data::Dataset> fetch_dataset(const std::string& name) const;
  std::filesystem::path dataset_path(const std::string& name) const;

  /// Registers an event consumer, replaying retained events after `since`.
  Subscription subscribe(std::uint64_t since = 0);
  std::uint64_t last_sequence() const;

  /// Blocks until no experiment worker is running or the timeout passes.
  bool wait_idle(std::chrono::milliseconds timeout);

  // --- HTTP ---
  /// Binds and serves on a background thread; port 0 picks a free port.
  /// Returns the bound port.
  int listen(const std::string& host = "127.0.0.1", int port = 0);
  /// Blocks while the HTTP server runs.
  void wait();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

/// Dataset as JSON: kind, axes, channels, metadata, fits, aborted.
Json dataset_json(const data::Dataset& ds);

}  // namespace nvtwin::service
