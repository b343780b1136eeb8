#include "objsearch/retrieval.hpp"

#include <string>

namespace objsearch {

std::string_view to_string(SearchMode mode) noexcept {
  return mode == SearchMode::full_image ? "full" : "object";
}

SearchMode search_mode_from_string(std::string_view s) {
  if (s == "object" || s == "object_level") return SearchMode::object_level;
  if (s == "full" || s == "full_image") return SearchMode::full_image;
  throw InputError("unknown search mode '" + std::string(s) +
                   "' (expected object or full)");
}

Retriever::Retriever(const Index& index, const Encoder& encoder)
    : index_(index), encoder_(encoder) {
  if (encoder.descriptor().dim != index.encoder().dim) {
    throw ConfigError("encoder '" + encoder.descriptor().encoder_id +
                      "' produces dimension " +
                      std::to_string(encoder.descriptor().dim) +
                      ", index expects " + std::to_string(index.encoder().dim));
  }
}

QueryResult Retriever::run_query(const Query& query, std::size_t k,
                                 SearchMode mode,
                                 const SearchOptions& options) const {
  if (mode == SearchMode::object_level) {
    require_class(index_.class_set(), query.cls);
  }
  QueryResult out;
  if (k == 0) return out;
  const EmbeddingVector q = encoder_.encode_text(query.text);
  if (mode == SearchMode::object_level) {
    out.results = index_.search_topk_images(query.cls, q, k, options, &out.stats);
  } else {
    out.results = index_.search_topk_full_images(q, k, &out.stats);
  }
  out.exhausted = out.results.size() < k;
  return out;
}

}  // namespace objsearch
