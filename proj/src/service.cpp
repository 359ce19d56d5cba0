#include "nvtwin/service.hpp"

#include <httplib.h>

#include <algorithm>
#include <atomic>
#include <condition_variable>
#include <cstdio>
#include <fstream>
#include <mutex>
#include <regex>
#include <sstream>
#include <thread>

namespace nvtwin::service {

namespace {

using Clock = std::chrono::steady_clock;

Json error_body(const std::string& code, const std::string& message) {
  return {{"error", code}, {"message", message}};
}

bool valid_name(const std::string& name) {
  static const std::regex re(R"([A-Za-z0-9_][A-Za-z0-9._-]*\.ds)");
  return std::regex_match(name, re) && name.find("..") == std::string::npos;
}

// Decodes with the strict parameter parsers so bad requests fail before
// the lease is taken.
void check_params(exp::ExperimentKind kind, const Json& p) {
  using K = exp::ExperimentKind;
  switch (kind) {
    case K::scan: exp::scan_params(p); break;
    case K::odmr: exp::odmr_params(p); break;
    case K::rabi: exp::rabi_params(p); break;
    case K::readout: exp::readout_params(p); break;
    case K::lifetime: exp::lifetime_params(p); break;
    case K::hahn:
    case K::ramsey: exp::echo_params(p); break;
    case K::autofocus: exp::autofocus_params(p); break;
  }
}

Json numbers(const std::vector<double>& v) {
  Json a = Json::array();
  for (double x : v) a.push_back(config::number(x));
  return a;
}

}  // namespace

std::string to_string(EventKind k) {
  switch (k) {
    case EventKind::state_changed: return "state_changed";
    case EventKind::experiment_started: return "experiment_started";
    case EventKind::progress: return "progress";
    case EventKind::point_ready: return "point_ready";
    case EventKind::experiment_done: return "experiment_done";
    case EventKind::error: return "error";
  }
  return "error";
}

Json to_json(const Event& e) {
  return {{"sequence", e.sequence}, {"kind", to_string(e.kind)}, {"time", e.time}, {"payload", e.payload}};
}

std::string sse_frame(const Event& e) {
  return "id: " + std::to_string(e.sequence) + "\nevent: " + to_string(e.kind) + "\ndata: " + to_json(e).dump() +
         "\n\n";
}

Json dataset_json(const data::Dataset& ds) {
  Json axes = Json::array(), channels = Json::array(), fits = Json::array();
  for (const auto& a : ds.axes) axes.push_back({{"name", a.name}, {"unit", a.unit}, {"values", numbers(a.values)}});
  for (const auto& c : ds.channels) {
    Json j = {{"name", c.name}, {"unit", c.unit}, {"values", numbers(c.values)}};
    if (!c.sigma.empty()) j["sigma"] = numbers(c.sigma);
    channels.push_back(j);
  }
  for (const auto& f : ds.fits) fits.push_back(config::to_json(f));
  return {{"kind", data::to_string(ds.kind)}, {"axes", axes},     {"channels", channels},
          {"metadata", ds.metadata},        {"fits", fits},     {"aborted", ds.aborted}};
}

// --- subscriptions -----------------------------------------------------------------------

struct Subscription::State {
  std::mutex mutex;
  std::condition_variable cv;
  std::deque<Event> queue;
  std::size_t capacity = 0;
  bool closed = false;
  std::string reason;

  // Caller holds `mutex`.
  void push(const Event& e) {
    if (closed) return;
    if (queue.size() >= capacity) {
      closed = true;
      reason = "slow_consumer";
      queue.clear();
    } else {
      queue.push_back(e);
    }
  }
};

std::vector<Event> Subscription::wait(std::chrono::milliseconds timeout) {
  std::unique_lock lock(state_->mutex);
  state_->cv.wait_for(lock, timeout, [&] { return !state_->queue.empty() || state_->closed; });
  std::vector<Event> out(state_->queue.begin(), state_->queue.end());
  state_->queue.clear();
  return out;
}

bool Subscription::closed() const {
  std::lock_guard lock(state_->mutex);
  return state_->closed;
}

std::string Subscription::reason() const {
  std::lock_guard lock(state_->mutex);
  return state_->reason;
}

// --- service ------------------------------------------------------------------------------

struct RunInfo {
  std::uint64_t id = 0;
  exp::ExperimentKind kind{};
  std::string name;
  std::string holder;
  std::atomic<bool> abort{false};
  std::atomic<std::size_t> done{0}, total{0};
  std::atomic<bool> finished{false};
};

struct Service::Impl {
  config::LabConfig cfg;
  ServiceOptions options;
  lab::Instrument instrument;
  Clock::time_point started = Clock::now();

  mutable std::mutex events_mutex;
  std::uint64_t sequence = 0;
  std::deque<Event> history;
  std::vector<std::shared_ptr<Subscription::State>> subscribers;

  mutable std::mutex run_mutex;
  std::condition_variable run_cv;
  std::shared_ptr<RunInfo> current;
  std::vector<std::pair<std::shared_ptr<RunInfo>, std::thread>> workers;
  int active = 0;
  std::uint64_t next_run = 1;

  httplib::Server server;
  std::thread http_thread;
  std::atomic<bool> stopping{false};

  Impl(config::LabConfig c, ServiceOptions o) : cfg(std::move(c)), options(std::move(o)), instrument(cfg.instrument) {
    std::filesystem::create_directories(options.data_dir);
    // Continue run numbering after datasets already on disk.
    for (const auto& entry : std::filesystem::directory_iterator(options.data_dir)) {
      unsigned long long n = 0;
      if (std::sscanf(entry.path().filename().c_str(), "run-%llu-", &n) == 1) next_run = std::max<std::uint64_t>(next_run, n + 1);
    }
  }

  double now() const { return std::chrono::duration<double>(Clock::now() - started).count(); }

  void publish(EventKind kind, Json payload) {
    std::lock_guard lock(events_mutex);
    Event e{++sequence, kind, now(), std::move(payload)};
    history.push_back(e);
    while (history.size() > options.history) history.pop_front();
    std::erase_if(subscribers, [&](const auto& s) {
      std::lock_guard sl(s->mutex);
      s->push(e);
      s->cv.notify_all();
      return s->closed;
    });
  }

  Json state_json() const {
    const auto snap = instrument.snapshot();
    const std::string holder = instrument.lease_holder();
    const lab::Vec3 pos = lab::stage_position(snap.state.stage_voltage, snap.stage);
    return {{"state", config::to_json(snap.state)},
            {"position", {pos.x(), pos.y(), pos.z()}},
            {"emitters", snap.sample.emitters.size()},
            {"lease", holder.empty() ? Json(nullptr) : Json(holder)}};
  }

  void work(std::shared_ptr<RunInfo> run, lab::Instrument::Lease lease, Json params) {
    exp::Context ctx;
    ctx.snapshot = instrument.snapshot();
    ctx.run = cfg.run;
    ctx.abort = &run->abort;
    ctx.point_delay = options.point_delay;
    ctx.on_point = [&](std::size_t i, std::size_t n, const Json& point) {
      run->done = i + 1;
      run->total = n;
      publish(EventKind::point_ready, {{"run_id", run->id}, {"index", i}, {"total", n}, {"point", point}});
      publish(EventKind::progress, {{"run_id", run->id},
                                    {"done", i + 1},
                                    {"total", n},
                                    {"fraction", static_cast<double>(i + 1) / static_cast<double>(n)}});
    };
    const auto path = options.data_dir / run->name;
    Json done = {{"run_id", run->id}, {"experiment", exp::to_string(run->kind)}};
    try {
      if (run->kind == exp::ExperimentKind::scan) {
        // Streams straight to disk, so this one writes under the lease.
        exp::confocal_scan_to_file(exp::scan_params(params), ctx, path);
        lease.release();
        const Json header = data::read_header(path);
        done["aborted"] = header.value("aborted", false);
        done["derived"] = header["metadata"].value("derived", Json::object());
      } else {
        std::optional<lab::Vec3> focus;
        data::Dataset ds;
        if (run->kind == exp::ExperimentKind::autofocus) {
          auto r = exp::autofocus(exp::autofocus_params(params), ctx);
          if (!r.dataset.aborted) focus = r.position;
          ds = std::move(r.dataset);
        } else {
          ds = exp::run_experiment(run->kind, params, ctx);
        }
        lease.release();
        if (focus) {
          auto st = instrument.state();
          st.stage_voltage = lab::stage_voltage(*focus, ctx.snapshot.stage);
          if (instrument.set_state(st)) publish(EventKind::state_changed, state_json());
        }
        data::save_dataset(ds, path);
        done["aborted"] = ds.aborted;
        done["derived"] = ds.metadata.value("derived", Json::object());
      }
      done["status"] = done["aborted"].get<bool>() ? "aborted" : "completed";
      done["dataset"] = run->name;
    } catch (const std::exception& e) {
      lease.release();
      std::error_code ec;
      std::filesystem::remove(path, ec);
      publish(EventKind::error, {{"run_id", run->id}, {"message", e.what()}});
      done["status"] = "failed";
      done["aborted"] = run->abort.load();
      done["dataset"] = nullptr;
    }
    {
      std::lock_guard lock(run_mutex);
      if (current == run) current.reset();
    }
    publish(EventKind::experiment_done, done);
    std::lock_guard lock(run_mutex);
    --active;
    run->finished = true;
    run_cv.notify_all();
  }

  void routes(Service& svc);
};

Service::Service(config::LabConfig cfg, ServiceOptions options)
    : impl_(std::make_unique<Impl>(std::move(cfg), std::move(options))) {}

Service::~Service() { stop(); }

Reply Service::health() const {
  return {200, {{"status", "ok"}, {"api_version", kApiVersion}, {"uptime", impl_->now()}}};
}

Reply Service::get_config() const { return {200, config::effective_config(impl_->cfg)}; }

Reply Service::get_state() const { return {200, impl_->state_json()}; }

Reply Service::put_state(const Json& body) {
  const std::string holder = impl_->instrument.lease_holder();
  if (!holder.empty())
    return {409, {{"error", "invalid_transition"}, {"message", "instrument is leased by " + holder}, {"holder", holder}}};
  lab::InstrumentState next;
  try {
    next = config::state_from_json(body, impl_->instrument.state(), "state");
    next.validate();
  } catch (const std::exception& e) {
    return {400, error_body("invalid_state", e.what())};
  }
  const bool changed = impl_->instrument.set_state(next);
  Json out = impl_->state_json();
  if (changed) impl_->publish(EventKind::state_changed, out);
  out["changed"] = changed;
  return {200, out};
}

Reply Service::post_sample(const Json& body) {
  const std::string holder = impl_->instrument.lease_holder();
  if (!holder.empty())
    return {409, {{"error", "invalid_transition"}, {"message", "instrument is leased by " + holder}, {"holder", holder}}};
  lab::VirtualSample sample;
  try {
    sample = config::sample_from_json(body, impl_->cfg.physics, "sample");
  } catch (const std::exception& e) {
    return {400, error_body("invalid_sample", e.what())};
  }
  impl_->instrument.load_sample(std::move(sample));
  Json out = impl_->state_json();
  out["sample_loaded"] = true;
  impl_->publish(EventKind::state_changed, out);
  return {200, out};
}

Reply Service::start_experiment(const std::string& name, const Json& params) {
  exp::ExperimentKind kind;
  try {
    kind = exp::experiment_from_string(name);
  } catch (const std::exception& e) {
    return {404, error_body("unknown_experiment", e.what())};
  }
  const Json p = params.is_null() ? Json::object() : params;
  try {
    check_params(kind, p);
  } catch (const std::exception& e) {
    return {400, error_body("invalid_params", e.what())};
  }
  auto& im = *impl_;
  if (im.stopping) return {503, error_body("shutting_down", "service is stopping")};

  std::lock_guard lock(im.run_mutex);
  auto run = std::make_shared<RunInfo>();
  run->id = im.next_run;
  run->kind = kind;
  char buf[64];
  std::snprintf(buf, sizeof buf, "run-%04llu-%s.ds", static_cast<unsigned long long>(run->id), name.c_str());
  run->name = buf;
  run->holder = "run " + std::to_string(run->id) + " (" + name + ")";
  lab::Instrument::Lease lease;
  try {
    lease = im.instrument.acquire(run->holder);
  } catch (const lab::LeaseConflict& e) {
    return {409, {{"error", "lease_conflict"}, {"message", e.what()}, {"holder", e.holder()}}};
  }
  ++im.next_run;
  im.current = run;
  ++im.active;
  const Json started = {{"run_id", run->id}, {"experiment", name}, {"params", p}, {"dataset", run->name}};
  im.publish(EventKind::experiment_started, started);
  std::erase_if(im.workers, [](auto& w) {
    if (!w.first->finished) return false;
    w.second.join();
    return true;
  });
  im.workers.emplace_back(run, std::thread([&im, run, p, l = std::move(lease)]() mutable { im.work(run, std::move(l), p); }));
  return {202, started};
}

Reply Service::abort_experiment() {
  std::lock_guard lock(impl_->run_mutex);
  if (!impl_->current) return {200, {{"aborting", false}}};
  impl_->current->abort = true;
  return {200, {{"aborting", true}, {"run_id", impl_->current->id}}};
}

Reply Service::current_experiment() const {
  std::lock_guard lock(impl_->run_mutex);
  const auto& r = impl_->current;
  if (!r) return {200, {{"running", false}}};
  return {200,
          {{"running", true},
           {"run_id", r->id},
           {"experiment", exp::to_string(r->kind)},
           {"dataset", r->name},
           {"done", r->done.load()},
           {"total", r->total.load()},
           {"aborting", r->abort.load()}}};
}

Reply Service::list_datasets() const {
  Json list = Json::array();
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(impl_->options.data_dir))
    if (e.is_regular_file() && e.path().extension() == ".ds") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  for (const auto& f : files) {
    Json entry = {{"name", f.filename().string()}, {"bytes", std::filesystem::file_size(f)}};
    try {
      const Json h = data::read_header(f);
      entry["kind"] = h.value("kind", "");
      entry["aborted"] = h.value("aborted", false);
      if (h.contains("metadata")) entry["experiment"] = h["metadata"].value("experiment", "");
    } catch (const std::exception& e) {
      entry["error"] = e.what();
    }
    list.push_back(entry);
  }
  return {200, {{"datasets", list}}};
}

std::filesystem::path Service::dataset_path(const std::string& name) const {
  if (!valid_name(name)) return {};
  return impl_->options.data_dir / name;
}

std::optional<data::Dataset> Service::fetch_dataset(const std::string& name) const {
  const auto p = dataset_path(name);
  if (p.empty() || !std::filesystem::exists(p)) return std::nullopt;
  return data::load_dataset(p);
}

Subscription Service::subscribe(std::uint64_t since) {
  Subscription sub;
  sub.state_ = std::make_shared<Subscription::State>();
  sub.state_->capacity = std::max<std::size_t>(1, impl_->options.client_buffer);
  std::lock_guard lock(impl_->events_mutex);
  {
    std::lock_guard sl(sub.state_->mutex);
    for (const auto& e : impl_->history)
      if (e.sequence > since) sub.state_->push(e);
    if (impl_->stopping) {
      sub.state_->closed = true;
      sub.state_->reason = "shutdown";
    }
  }
  if (!sub.state_->closed) impl_->subscribers.push_back(sub.state_);
  return sub;
}

std::uint64_t Service::last_sequence() const {
  std::lock_guard lock(impl_->events_mutex);
  return impl_->sequence;
}

bool Service::wait_idle(std::chrono::milliseconds timeout) {
  std::unique_lock lock(impl_->run_mutex);
  return impl_->run_cv.wait_for(lock, timeout, [&] { return impl_->active == 0; });
}

// --- HTTP -----------------------------------------------------------------------------------

namespace {

void send(httplib::Response& res, const Reply& r) {
  res.status = r.status;
  res.set_content(r.body.dump(), "application/json");
}

std::optional<Json> body_json(const httplib::Request& req, httplib::Response& res) {
  if (req.body.empty()) return Json::object();
  try {
    return Json::parse(req.body);
  } catch (const Json::exception& e) {
    send(res, {400, error_body("bad_request", std::string("malformed JSON body: ") + e.what())});
    return std::nullopt;
  }
}

}  // namespace

void Service::Impl::routes(Service& svc) {
  const std::string api = "/api/v1";
  server.Get(api + "/health", [&svc](const auto&, auto& res) { send(res, svc.health()); });
  server.Get(api + "/config", [&svc](const auto&, auto& res) { send(res, svc.get_config()); });
  server.Get(api + "/state", [&svc](const auto&, auto& res) { send(res, svc.get_state()); });
  server.Put(api + "/state", [&svc](const auto& req, auto& res) {
    if (auto b = body_json(req, res)) send(res, svc.put_state(*b));
  });
  server.Post(api + "/sample", [&svc](const auto& req, auto& res) {
    if (auto b = body_json(req, res)) send(res, svc.post_sample(*b));
  });
  server.Post(api + "/experiments/abort", [&svc](const auto&, auto& res) { send(res, svc.abort_experiment()); });
  server.Get(api + "/experiments/current", [&svc](const auto&, auto& res) { send(res, svc.current_experiment()); });
  server.Post(api + R"(/experiments/([a-z_]+))", [&svc](const auto& req, auto& res) {
    if (auto b = body_json(req, res)) send(res, svc.start_experiment(req.matches[1], *b));
  });
  server.Get(api + "/datasets", [&svc](const auto&, auto& res) { send(res, svc.list_datasets()); });
  server.Get(api + R"(/datasets/([^/]+))", [&svc](const httplib::Request& req, httplib::Response& res) {
    const std::string name = req.matches[1];
    const auto path = svc.dataset_path(name);
    if (path.empty() || !std::filesystem::exists(path)) {
      send(res, {404, error_body("not_found", "no dataset named " + name)});
      return;
    }
    try {
      if (req.get_param_value("format") == "raw") {
        std::ifstream in(path, std::ios::binary);
        std::ostringstream bytes;
        bytes << in.rdbuf();
        res.set_content(bytes.str(), "application/octet-stream");
        return;
      }
      send(res, {200, dataset_json(data::load_dataset(path))});
    } catch (const std::exception& e) {
      send(res, {500, error_body("dataset_error", e.what())});
    }
  });
  server.Get(api + "/events", [&svc, this](const httplib::Request& req, httplib::Response& res) {
    std::uint64_t since = 0;
    try {
      if (req.has_param("since")) since = std::stoull(req.get_param_value("since"));
      else if (req.has_header("Last-Event-ID")) since = std::stoull(req.get_header_value("Last-Event-ID"));
    } catch (const std::exception&) {
      send(res, {400, error_body("bad_request", "since must be a sequence number")});
      return;
    }
    auto sub = std::make_shared<Subscription>(svc.subscribe(since));
    auto last_write = std::make_shared<Clock::time_point>(Clock::now());
    res.set_header("Cache-Control", "no-cache");
    res.set_chunked_content_provider("text/event-stream", [sub, last_write, this](std::size_t, httplib::DataSink& sink) {
      const auto events = sub->wait(std::chrono::milliseconds(200));
      for (const auto& e : events) {
        const std::string frame = sse_frame(e);
        if (!sink.write(frame.data(), frame.size())) return false;
        *last_write = Clock::now();
      }
      if (sub->closed() || stopping) {
        const std::string bye =
            "event: error\ndata: " + Json{{"error", sub->closed() ? sub->reason() : "shutdown"}}.dump() + "\n\n";
        sink.write(bye.data(), bye.size());
        sink.done();
        return true;
      }
      if (Clock::now() - *last_write > std::chrono::seconds(5)) {
        // Comment line; detects vanished clients.
        if (!sink.write(": keep-alive\n\n", 14)) return false;
        *last_write = Clock::now();
      }
      return true;
    });
  });
}

int Service::listen(const std::string& host, int port) {
  auto& im = *impl_;
  if (im.http_thread.joinable()) throw std::logic_error("service already listening");
  im.server.new_task_queue = [] { return new httplib::ThreadPool(64); };
  im.routes(*this);
  const int bound = port == 0 ? im.server.bind_to_any_port(host) : (im.server.bind_to_port(host, port) ? port : -1);
  if (bound <= 0) throw std::runtime_error("cannot bind " + host + ":" + std::to_string(port));
  im.http_thread = std::thread([&im] { im.server.listen_after_bind(); });
  im.server.wait_until_ready();
  return bound;
}

void Service::wait() {
  if (impl_->http_thread.joinable()) impl_->http_thread.join();
}

void Service::stop() {
  auto& im = *impl_;
  if (im.stopping.exchange(true)) {
    wait();
    return;
  }
  {
    std::lock_guard lock(im.run_mutex);
    if (im.current) im.current->abort = true;
  }
  {
    std::lock_guard lock(im.events_mutex);
    for (auto& s : im.subscribers) {
      std::lock_guard sl(s->mutex);
      s->closed = true;
      s->reason = "shutdown";
      s->cv.notify_all();
    }
    im.subscribers.clear();
  }
  im.server.stop();
  wait();
  decltype(im.workers) workers;
  {
    std::lock_guard lock(im.run_mutex);
    workers.swap(im.workers);
  }
  for (auto& [run, t] : workers)
    if (t.joinable()) t.join();
}

}  // namespace nvtwin::service
