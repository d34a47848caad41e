#pragma once

#include <atomic>
#include <chrono>
#include <cstdlib>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <random>
#include <shared_mutex>
#include <string>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "qis/polygon.hpp"
#include "qis/session.hpp"

namespace qis::service {

using Clock = std::chrono::steady_clock;
using nlohmann::json;

struct Config {
  int port = 8080;
  std::size_t max_sessions = 64;
  std::chrono::seconds ttl{3600};
  std::chrono::milliseconds step_budget{120'000};
  long max_pixels = 4096L * 4096L;
  std::string cors_origin = "*";
  // Called inside a mutation after the in-flight flag is taken. Tests use it
  // to hold a step open.
  std::function<void()> on_step_start;

  static Config from_env() {
    Config c;
    auto read = [](const char* name, long fallback) {
      const char* v = std::getenv(name);
      if (!v || !*v) return fallback;
      char* end = nullptr;
      const long x = std::strtol(v, &end, 10);
      if (*end != '\0' || x <= 0) throw Error(ErrorCode::invalid_argument, std::string(name) + " must be a positive integer");
      return x;
    };
    c.port = static_cast<int>(read("QIS_PORT", c.port));
    c.max_sessions = static_cast<std::size_t>(read("QIS_MAX_SESSIONS", static_cast<long>(c.max_sessions)));
    c.ttl = std::chrono::seconds(read("QIS_SESSION_TTL_S", c.ttl.count()));
    return c;
  }
};

// Failure with an HTTP status and a machine-readable code.
struct HttpError : std::runtime_error {
  int status;
  std::string code;
  HttpError(int s, std::string c, const std::string& msg) : std::runtime_error(msg), status(s), code(std::move(c)) {}
};

inline int status_for(ErrorCode c) {
  switch (c) {
    case ErrorCode::degenerate_template: return 422;
    case ErrorCode::nothing_to_undo:
    case ErrorCode::history_full: return 409;
    case ErrorCode::io_error: return 500;
    default: return 400;
  }
}

// 16 bytes from the OS entropy source, hex encoded.
inline std::string new_session_id() {
  static std::mutex mu;
  static std::random_device rd;
  std::lock_guard<std::mutex> lock(mu);
  static constexpr char hex[] = "0123456789abcdef";
  std::string id;
  for (int k = 0; k < 4; ++k) {
    std::uint32_t v = rd();
    for (int b = 0; b < 4; ++b, v >>= 8) {
      id += hex[(v >> 4) & 0xf];
      id += hex[v & 0xf];
    }
  }
  return id;
}

inline SessionParams parse_params(const std::string& text) {
  SessionParams p;
  if (text.empty()) return p;
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::parse_error, std::string("params is not JSON: ") + e.what());
  }
  if (!j.is_object()) throw Error(ErrorCode::parse_error, "params must be a JSON object");
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "alpha1") p.energy.alpha1 = v.get<double>();
      else if (key == "alpha2") p.energy.alpha2 = v.get<double>();
      else if (key == "max_gn") p.energy.max_gn = v.get<int>();
      else if (key == "max_ad") p.energy.max_ad = v.get<int>();
      else if (key == "kmeans_k") p.kmeans_k = v.get<int>();
      else if (key == "levels") p.levels = v.get<int>();
      else if (key == "refine_levels") p.refine_levels = v.get<int>();
      else throw Error(ErrorCode::parse_error, "unknown parameter \"" + key + "\"");
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::parse_error, std::string("bad parameter value: ") + e.what());
  }
  p.validate();
  return p;
}

inline json step_summary(const std::string& id, const StepRecord& rec) {
  const Topology t = topology_of(rec.mask);
  json clicks = json::array();
  for (const Click& c : rec.clicks) clicks.push_back({{"x", c.x}, {"y", c.y}});
  json j = {{"step", rec.step},
            {"energy", rec.energy},
            {"min_det", rec.min_det},
            {"time_ms", rec.time_ms},
            {"components", t.components},
            {"holes", t.holes},
            {"clicks", clicks},
            {"mask_url", "/v1/sessions/" + id + "/mask?step=" + std::to_string(rec.step)}};
  if (rec.step == 0) {
    j["polarity"] = nullptr;
    j["r"] = nullptr;
  } else {
    j["polarity"] = to_string(rec.polarity);
    j["r"] = rec.r();
  }
  return j;
}

class Store {
 public:
  explicit Store(Config cfg) : cfg_(std::move(cfg)) {}

  const Config& config() const noexcept { return cfg_; }

  json create(const ScalarField& image, const BinaryMask& templ, const SessionParams& params) {
    {
      std::lock_guard<std::mutex> lock(mu_);
      purge_locked();
      if (entries_.size() + pending_ >= cfg_.max_sessions) {
        throw HttpError(429, "too_many_sessions",
                        "session limit of " + std::to_string(cfg_.max_sessions) + " reached");
      }
      ++pending_;
    }
    auto entry = std::make_shared<Entry>();
    try {
      SolveContext ctx;
      ctx.deadline = Clock::now() + cfg_.step_budget;
      entry->session = Session::init(image, templ, params, ctx);
    } catch (...) {
      std::lock_guard<std::mutex> lock(mu_);
      --pending_;
      throw;
    }
    entry->touched = Clock::now();
    std::string id = new_session_id();
    {
      std::lock_guard<std::mutex> lock(mu_);
      --pending_;
      while (entries_.count(id)) id = new_session_id();
      entries_[id] = entry;
    }
    return {{"session_id", id}, {"step0", step_summary(id, entry->session.record(0))}};
  }

  json post_clicks(const std::string& id, const std::string& body) {
    auto e = find(id);
    Busy busy(*e);
    if (cfg_.on_step_start) cfg_.on_step_start();
    ClickStep step;
    {
      std::shared_lock<std::shared_mutex> read(e->rw);
      json j;
      try {
        j = json::parse(body);
      } catch (const json::exception& ex) {
        throw Error(ErrorCode::parse_error, std::string("body is not JSON: ") + ex.what());
      }
      step = parse_click_step(j, e->session.height(), e->session.width());
    }
    SolveContext ctx;
    ctx.deadline = Clock::now() + cfg_.step_budget;
    // Only this thread mutates the session while busy is held, so the solve
    // may read it unlocked; readers are blocked only for the commit.
    const StepOutcome out = e->session.apply_clicks_with(step.clicks, ctx, [&](Session& s, StepRecord&& rec) {
      std::unique_lock<std::shared_mutex> write(e->rw);
      s.commit(std::move(rec));
    });
    std::shared_lock<std::shared_mutex> read(e->rw);
    const StepRecord& cur = e->session.current();
    json j = {{"step", e->session.current_index()},
              {"r", out.applied.empty() ? json(nullptr) : json(cur.r())},
              {"energy", cur.energy},
              {"mask_url", "/v1/sessions/" + id + "/mask?step=" + std::to_string(cur.step)},
              {"warnings", out.warnings}};
    return j;
  }

  json undo(const std::string& id) {
    auto e = find(id);
    Busy busy(*e);
    std::unique_lock<std::shared_mutex> write(e->rw);
    e->session.undo();
    return {{"step", e->session.current_index()}};
  }

  std::string mask_png(const std::string& id, std::optional<int> step) {
    auto e = find(id);
    std::shared_lock<std::shared_mutex> read(e->rw);
    const int n = step.value_or(e->session.current_index());
    return encode_mask_png(e->session.record(n).mask);
  }

  json state(const std::string& id) {
    auto e = find(id);
    std::shared_lock<std::shared_mutex> read(e->rw);
    const Session& s = e->session;
    json steps = json::array();
    for (int n = 0; n <= s.current_index(); ++n) steps.push_back(step_summary(id, s.record(n)));
    return {{"session_id", id},
            {"height", s.height()},
            {"width", s.width()},
            {"current_step", s.current_index()},
            {"template_topology", {{"components", s.template_topology().components},
                                   {"holes", s.template_topology().holes}}},
            {"steps", steps}};
  }

  void remove(const std::string& id) {
    std::lock_guard<std::mutex> lock(mu_);
    purge_locked();
    if (entries_.erase(id) == 0) throw HttpError(404, "not_found", "no session " + id);
  }

  std::size_t size() {
    std::lock_guard<std::mutex> lock(mu_);
    purge_locked();
    return entries_.size();
  }

 private:
  struct Entry {
    Session session;
    std::shared_mutex rw;
    std::atomic<bool> busy{false};
    Clock::time_point touched;
  };

  struct Busy {
    Entry& e;
    explicit Busy(Entry& entry) : e(entry) {
      if (e.busy.exchange(true)) throw HttpError(409, "step_in_progress", "a step is already running for this session");
    }
    ~Busy() { e.busy = false; }
    Busy(const Busy&) = delete;
    Busy& operator=(const Busy&) = delete;
  };

  std::shared_ptr<Entry> find(const std::string& id) {
    std::lock_guard<std::mutex> lock(mu_);
    purge_locked();
    auto it = entries_.find(id);
    if (it == entries_.end()) throw HttpError(404, "not_found", "no session " + id);
    it->second->touched = Clock::now();
    return it->second;
  }

  void purge_locked() {
    const auto now = Clock::now();
    for (auto it = entries_.begin(); it != entries_.end();) {
      if (!it->second->busy && now - it->second->touched > cfg_.ttl) {
        it = entries_.erase(it);
      } else {
        ++it;
      }
    }
  }

  Config cfg_;
  std::mutex mu_;
  std::map<std::string, std::shared_ptr<Entry>> entries_;
  std::size_t pending_ = 0;
};

namespace detail {

inline void send_error(httplib::Response& res, int status, const std::string& code, const std::string& message) {
  res.status = status;
  res.set_content(json{{"code", code}, {"message", message}}.dump(), "application/json");
}

inline void send_json(httplib::Response& res, int status, const json& j) {
  res.status = status;
  res.set_content(j.dump(), "application/json");
}

inline std::optional<int> step_param(const httplib::Request& req) {
  if (!req.has_param("step")) return std::nullopt;
  const std::string v = req.get_param_value("step");
  std::size_t used = 0;
  int n = -1;
  try {
    n = std::stoi(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v.size() || v.empty()) throw Error(ErrorCode::invalid_argument, "step must be an integer");
  return n;
}

inline std::string form_text(const httplib::Request& req, const std::string& key) {
  return req.has_file(key) ? req.get_file_value(key).content : std::string();
}

}  // namespace detail

// Installs the /v1 routes on `server`. The store must outlive the server.
inline void install_routes(httplib::Server& server, Store& store) {
  using httplib::Request;
  using httplib::Response;
  const std::string origin = store.config().cors_origin;
  const long max_pixels = store.config().max_pixels;

  server.set_post_routing_handler([origin](const Request&, Response& res) {
    res.set_header("Access-Control-Allow-Origin", origin);
  });
  server.Options(R"(/v1/.*)", [](const Request&, Response& res) {
    res.set_header("Access-Control-Allow-Methods", "GET, POST, DELETE, OPTIONS");
    res.set_header("Access-Control-Allow-Headers", "Content-Type");
    res.status = 204;
  });

  // Maps library and HTTP errors onto the {"code", "message"} body.
  auto guarded = [](auto fn) {
    return [fn](const Request& req, Response& res) {
      try {
        fn(req, res);
      } catch (const HttpError& e) {
        detail::send_error(res, e.status, e.code, e.what());
      } catch (const Error& e) {
        detail::send_error(res, status_for(e.code()), std::string(to_string(e.code())), e.what());
      } catch (const std::exception& e) {
        detail::send_error(res, 500, "internal", e.what());
      }
    };
  };

  server.Post("/v1/sessions", guarded([&store, max_pixels](const Request& req, Response& res) {
    if (!req.is_multipart_form_data()) throw HttpError(400, "parse_error", "expected multipart/form-data");
    if (!req.has_file("image")) throw HttpError(400, "parse_error", "missing \"image\" part");
    const std::string image_bytes = req.get_file_value("image").content;
    const auto [h, w] = image_dimensions(image_bytes);
    if (h > 0 && w > 0 && h * w > max_pixels) {
      throw HttpError(413, "image_too_large",
                      std::to_string(w) + "x" + std::to_string(h) + " exceeds " + std::to_string(max_pixels) +
                          " pixels");
    }
    const ScalarField image = decode_image(image_bytes);
    BinaryMask templ;
    if (req.has_file("template")) {
      templ = decode_mask(req.get_file_value("template").content);
    } else if (req.has_file("polygon")) {
      json j;
      try {
        j = json::parse(req.get_file_value("polygon").content);
      } catch (const json::exception& e) {
        throw Error(ErrorCode::parse_error, std::string("polygon is not JSON: ") + e.what());
      }
      templ = rasterize_polygon(parse_polygon(j), image.height(), image.width());
    } else {
      throw HttpError(400, "parse_error", "need a \"template\" mask or a \"polygon\"");
    }
    const SessionParams params = parse_params(detail::form_text(req, "params"));
    detail::send_json(res, 201, store.create(image, templ, params));
  }));

  const std::string id_re = R"(/v1/sessions/([A-Za-z0-9_-]+))";
  server.Post(id_re + "/clicks", guarded([&store](const Request& req, Response& res) {
    detail::send_json(res, 200, store.post_clicks(req.matches[1], req.body));
  }));
  server.Post(id_re + "/undo", guarded([&store](const Request& req, Response& res) {
    detail::send_json(res, 200, store.undo(req.matches[1]));
  }));
  server.Get(id_re + "/mask", guarded([&store](const Request& req, Response& res) {
    res.set_content(store.mask_png(req.matches[1], detail::step_param(req)), "image/png");
  }));
  server.Get(id_re + "/state", guarded([&store](const Request& req, Response& res) {
    detail::send_json(res, 200, store.state(req.matches[1]));
  }));
  server.Delete(id_re, guarded([&store](const Request& req, Response& res) {
    store.remove(req.matches[1]);
    res.status = 204;
  }));
}

// Blocks serving on 0.0.0.0:port.
inline int serve(const Config& cfg) {
  Store store(cfg);
  httplib::Server server;
  install_routes(server, store);
  if (!server.listen("0.0.0.0", cfg.port)) return 1;
  return 0;
}

}  // namespace qis::service
