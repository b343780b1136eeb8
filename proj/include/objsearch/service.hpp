#pragma once

#include <cstddef>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "objsearch/encoder.hpp"
#include "objsearch/eval.hpp"
#include "objsearch/index.hpp"
#include "objsearch/retrieval.hpp"

namespace objsearch {

struct ServiceConfig {
  std::string host = "127.0.0.1";
  int port = 8080;  // 0 picks a free port
  /// Source of crops for /images/{id}/objects/{j}; crops are recomputed from
  /// the original image and its annotation.
  std::string annotations_dir;
  /// Judgment journal (JSON lines). Empty keeps judgments in memory.
  std::string journal_path;
  /// Static UI assets served at "/", if set.
  std::string static_dir;
  /// When set, every /v1 route except /v1/healthz requires
  /// "Authorization: Bearer <token>".
  std::string bearer_token;
  bool toy_mode = false;
  std::size_t crop_cache_entries = 256;
  unsigned threads = 8;
};

/// The /search response body: [{image_id, score, best_object_index, bbox}].
/// `best_object_index` and `bbox` are null in full-image mode.
nlohmann::json search_results_json(const Index& index,
                                   const std::vector<RankedResult>& results);

/// HTTP facade over a loaded index. All routes live under /v1:
///   GET  /v1/classes                    class set with per-class row counts
///   POST /v1/search                     {class, text, k, mode} -> ranked list
///   GET  /v1/images/{id}                original image bytes
///   GET  /v1/images/{id}/objects/{j}    PNG crop of object j
///   POST /v1/judgments                  append a judgment
///   GET  /v1/curves?query_id=&n=        cumulative true-positive curve
///   GET  /v1/healthz                    status, index version, encoder id
///   GET  /v1/metrics                    text exposition counters
class Service {
 public:
  Service(const Index& index, const Encoder& encoder, ServiceConfig config);
  ~Service();

  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  /// Binds the listening socket and returns the bound port.
  int bind();
  /// Serves until stop(); call bind() first.
  void listen();
  /// bind() + listen() on a background thread; returns the bound port.
  int start();
  void stop();

  eval::JudgmentJournal& journal();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace objsearch
