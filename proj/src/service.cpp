#include "objsearch/service.hpp"

#include <atomic>
#include <chrono>
#include <filesystem>
#include <list>
#include <mutex>
#include <sstream>
#include <thread>
#include <unordered_map>

#include <httplib.h>

#include "objsearch/codec.hpp"
#include "objsearch/image_io.hpp"
#include "objsearch/pipeline.hpp"

namespace objsearch {

namespace fs = std::filesystem;
using nlohmann::json;

nlohmann::json search_results_json(const Index& index,
                                   const std::vector<RankedResult>& results) {
  json out = json::array();
  for (const auto& r : results) {
    json row{{"image_id", r.image_id}, {"score", r.score}};
    if (r.best_object_index) {
      row["best_object_index"] = *r.best_object_index;
      if (auto obj = index.object(r.image_id, *r.best_object_index)) {
        row["bbox"] = {obj->bbox.x, obj->bbox.y, obj->bbox.width, obj->bbox.height};
      } else {
        row["bbox"] = nullptr;
      }
    } else {
      row["best_object_index"] = nullptr;
      row["bbox"] = nullptr;
    }
    out.push_back(std::move(row));
  }
  return out;
}

namespace {

// Small thread-safe LRU of encoded crops.
class CropCache {
 public:
  explicit CropCache(std::size_t capacity) : capacity_(capacity) {}

  std::optional<std::string> get(const std::string& key) {
    std::lock_guard lock(mu_);
    auto it = map_.find(key);
    if (it == map_.end()) return std::nullopt;
    order_.splice(order_.begin(), order_, it->second);
    return it->second->second;
  }

  void put(const std::string& key, std::string value) {
    if (capacity_ == 0) return;
    std::lock_guard lock(mu_);
    if (auto it = map_.find(key); it != map_.end()) {
      it->second->second = std::move(value);
      order_.splice(order_.begin(), order_, it->second);
      return;
    }
    order_.emplace_front(key, std::move(value));
    map_[key] = order_.begin();
    if (order_.size() > capacity_) {
      map_.erase(order_.back().first);
      order_.pop_back();
    }
  }

 private:
  std::size_t capacity_;
  std::mutex mu_;
  std::list<std::pair<std::string, std::string>> order_;
  std::unordered_map<std::string,
                     std::list<std::pair<std::string, std::string>>::iterator>
      map_;
};

void send_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, const std::string& message) {
  send_json(res, status, json{{"error", message}});
}

}  // namespace

struct Service::Impl {
  const Index& index;
  const Encoder& encoder;
  ServiceConfig config;
  Retriever retriever;
  eval::JudgmentJournal journal;
  eval::QueryRegistry queries;
  CropCache crops;
  httplib::Server server;
  std::thread background;
  int bound_port = -1;

  std::atomic<std::uint64_t> search_requests{0};
  std::atomic<std::uint64_t> search_errors{0};
  std::atomic<std::uint64_t> rows_scanned{0};
  std::mutex latency_mu;
  double latency_sum = 0.0;
  double latency_max = 0.0;

  Impl(const Index& idx, const Encoder& enc, ServiceConfig cfg)
      : index(idx),
        encoder(enc),
        config(std::move(cfg)),
        retriever(idx, enc),
        journal(config.journal_path),
        queries(config.journal_path.empty()
                    ? std::string()
                    : eval::QueryRegistry::sidecar_path(config.journal_path)),
        crops(config.crop_cache_entries) {
    routes();
  }

  // Maps library errors onto HTTP statuses.
  template <typename F>
  void guarded(httplib::Response& res, F&& fn) {
    try {
      fn();
    } catch (const QueryError& e) {
      send_json(res, 400, json{{"error", e.what()}, {"valid_classes", e.valid_classes()}});
    } catch (const InputError& e) {
      send_error(res, 400, e.what());
    } catch (const CapabilityError& e) {
      send_error(res, 400, e.what());
    } catch (const TransportError& e) {
      send_json(res, 503, json{{"error", e.what()},
                               {"attempts", e.attempts()},
                               {"retryable", e.retryable()}});
    } catch (const json::exception& e) {
      send_error(res, 400, std::string("malformed request: ") + e.what());
    } catch (const std::exception& e) {
      send_error(res, 500, e.what());
    }
  }

  void routes() {
    server.new_task_queue = [n = std::max(1u, config.threads)] {
      return new httplib::ThreadPool(n);
    };

    server.set_pre_routing_handler(
        [this](const httplib::Request& req, httplib::Response& res) {
          if (config.bearer_token.empty() || !req.path.starts_with("/v1/") ||
              req.path == "/v1/healthz") {
            return httplib::Server::HandlerResponse::Unhandled;
          }
          if (req.get_header_value("Authorization") != "Bearer " + config.bearer_token) {
            send_error(res, 401, "missing or invalid bearer token");
            return httplib::Server::HandlerResponse::Handled;
          }
          return httplib::Server::HandlerResponse::Unhandled;
        });

    server.Get("/v1/healthz", [this](const httplib::Request&, httplib::Response& res) {
      const auto m = index.manifest();
      send_json(res, 200,
                json{{"status", "ok"},
                     {"index_version", std::to_string(m.format_version) + "@" + m.modified},
                     {"encoder_id", encoder.descriptor().encoder_id},
                     {"toy_mode", config.toy_mode}});
    });

    server.Get("/v1/classes", [this](const httplib::Request&, httplib::Response& res) {
      const auto st = index.stats();
      json classes = json::array();
      for (const auto& p : st.classes) {
        classes.push_back({{"class", p.cls.name()}, {"count", p.rows}});
      }
      send_json(res, 200,
                json{{"classes", classes},
                     {"image_count", st.image_count},
                     {"object_count", st.object_count},
                     {"dim", st.dim},
                     {"encoder_id", st.encoder_id},
                     {"full_image", st.full_image_count > 0}});
    });

    server.Post("/v1/search", [this](const httplib::Request& req, httplib::Response& res) {
      const auto t0 = std::chrono::steady_clock::now();
      ++search_requests;
      guarded(res, [&] {
        const auto body = json::parse(req.body);
        const std::string cls = body.at("class").get<std::string>();
        const std::string text = body.at("text").get<std::string>();
        const auto k = body.value("k", std::int64_t{10});
        if (k < 0) throw InputError("k must be non-negative");
        const SearchMode mode = search_mode_from_string(body.value("mode", std::string("object")));
        SearchOptions options;
        options.min_confidence = body.value("min_confidence", 0.0f);

        const Query query = Query::make(ClassLabel(cls), text);
        const auto result =
            retriever.run_query(query, static_cast<std::size_t>(k), mode, options);
        rows_scanned += result.stats.rows_visited;
        const std::string id = queries.add(cls, text, to_string(mode));
        res.set_header("X-Query-Id", id);
        res.set_header("X-Exhausted", result.exhausted ? "true" : "false");
        send_json(res, 200, search_results_json(index, result.results));
      });
      if (res.status != 200) ++search_errors;
      const double dt =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      std::lock_guard lock(latency_mu);
      latency_sum += dt;
      latency_max = std::max(latency_max, dt);
    });

    server.Get(R"(/v1/images/([^/]+)/objects/(\d+))",
               [this](const httplib::Request& req, httplib::Response& res) {
                 guarded(res, [&] { serve_crop(req.matches[1], std::stoul(req.matches[2]), res); });
               });

    server.Get(R"(/v1/images/([^/]+))", [this](const httplib::Request& req,
                                               httplib::Response& res) {
      guarded(res, [&] {
        const auto rec = index.image(std::string(req.matches[1]));
        if (!rec) return send_error(res, 404, "unknown image");
        std::vector<std::uint8_t> bytes;
        try {
          bytes = codec::read_file(rec->source_uri);
        } catch (const InputError&) {
          return send_error(res, 404, "image file is no longer available");
        }
        res.set_content(std::string(bytes.begin(), bytes.end()), image_io::mime_type(bytes));
      });
    });

    server.Post("/v1/judgments", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        auto j = eval::Judgment::from_json(req.body);
        if (j.ts.empty()) {
          j.ts = std::to_string(std::chrono::duration_cast<std::chrono::milliseconds>(
                                    std::chrono::system_clock::now().time_since_epoch())
                                    .count());
        }
        journal.append(j);
        send_json(res, 201, json{{"ok", true}, {"records", journal.size()}});
      });
    });

    server.Get("/v1/curves", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        const std::string id = req.get_param_value("query_id");
        const std::string n_text = req.get_param_value("n");
        if (id.empty() || n_text.empty()) throw InputError("query_id and n are required");
        const long n = std::stol(n_text);
        if (n <= 0) throw InputError("n must be positive");
        const auto q = queries.find(id);
        if (!q) return send_error(res, 404, "unknown query_id '" + id + "'");
        const auto result = retriever.run_query(Query::make(ClassLabel(q->cls), q->text),
                                                static_cast<std::size_t>(n),
                                                search_mode_from_string(q->mode));
        std::vector<std::string> ranked;
        for (const auto& r : result.results) ranked.push_back(r.image_id);
        const auto curve =
            eval::cumulative_tp_curve(ranked, journal.verdicts(id), static_cast<std::size_t>(n));
        send_json(res, 200, json{{"query_id", id}, {"n", n}, {"curve", curve}});
      });
    });

    server.Get("/v1/metrics", [this](const httplib::Request&, httplib::Response& res) {
      std::ostringstream out;
      double sum = 0.0, max = 0.0;
      {
        std::lock_guard lock(latency_mu);
        sum = latency_sum;
        max = latency_max;
      }
      out << "# TYPE objsearch_search_requests_total counter\n"
          << "objsearch_search_requests_total " << search_requests.load() << "\n"
          << "# TYPE objsearch_search_errors_total counter\n"
          << "objsearch_search_errors_total " << search_errors.load() << "\n"
          << "# TYPE objsearch_search_latency_seconds summary\n"
          << "objsearch_search_latency_seconds_sum " << sum << "\n"
          << "objsearch_search_latency_seconds_count " << search_requests.load() << "\n"
          << "# TYPE objsearch_search_latency_seconds_max gauge\n"
          << "objsearch_search_latency_seconds_max " << max << "\n"
          << "# TYPE objsearch_scan_rows_total counter\n"
          << "objsearch_scan_rows_total " << rows_scanned.load() << "\n"
          << "# TYPE objsearch_index_objects gauge\n"
          << "objsearch_index_objects " << index.stats().object_count << "\n";
      res.set_content(out.str(), "text/plain; version=0.0.4");
    });

    if (!config.static_dir.empty()) server.set_mount_point("/", config.static_dir);
  }

  void serve_crop(const std::string& image_id, unsigned long j, httplib::Response& res) {
    const std::string key = image_id + "/" + std::to_string(j);
    if (auto hit = crops.get(key)) {
      res.set_content(*hit, "image/png");
      return;
    }
    const auto rec = index.image(image_id);
    if (!rec) return send_error(res, 404, "unknown image");
    if (!index.object(image_id, static_cast<std::uint32_t>(j))) {
      return send_error(res, 404, "unknown object " + key);
    }
    if (config.annotations_dir.empty()) {
      return send_error(res, 404, "no annotation directory configured for crops");
    }
    const fs::path ann_path = fs::path(config.annotations_dir) / (image_id + ".json");
    if (!fs::exists(ann_path)) return send_error(res, 404, "annotation not found");
    const auto ann_bytes = codec::read_file(ann_path.string());
    const auto ann = PanopticAnnotation::from_json(
        std::string_view(reinterpret_cast<const char*>(ann_bytes.data()), ann_bytes.size()));
    const auto image = image_io::decode(codec::read_file(rec->source_uri));
    const auto extracted = extract_objects(image, ann);
    if (j >= extracted.objects.size()) return send_error(res, 404, "unknown object " + key);
    const auto png = image_io::encode_png(extracted.objects[j].crop);
    std::string body(png.begin(), png.end());
    crops.put(key, body);
    res.set_content(std::move(body), "image/png");
  }
};

Service::Service(const Index& index, const Encoder& encoder, ServiceConfig config)
    : impl_(std::make_unique<Impl>(index, encoder, std::move(config))) {}

Service::~Service() { stop(); }

int Service::bind() {
  auto& s = *impl_;
  s.bound_port = s.config.port == 0 ? s.server.bind_to_any_port(s.config.host)
                                    : (s.server.bind_to_port(s.config.host, s.config.port)
                                           ? s.config.port
                                           : -1);
  if (s.bound_port < 0) {
    throw ConfigError("cannot bind " + s.config.host + ":" + std::to_string(s.config.port));
  }
  return s.bound_port;
}

void Service::listen() { impl_->server.listen_after_bind(); }

int Service::start() {
  const int port = bind();
  impl_->background = std::thread([this] { listen(); });
  impl_->server.wait_until_ready();
  return port;
}

void Service::stop() {
  if (!impl_) return;
  impl_->server.stop();
  if (impl_->background.joinable()) impl_->background.join();
}

eval::JudgmentJournal& Service::journal() { return impl_->journal; }

}  // namespace objsearch
