#pragma once

#include <cstddef>
#include <string_view>
#include <vector>

#include "objsearch/core.hpp"
#include "objsearch/encoder.hpp"
#include "objsearch/index.hpp"

namespace objsearch {

enum class SearchMode { object_level, full_image };

std::string_view to_string(SearchMode mode) noexcept;
SearchMode search_mode_from_string(std::string_view s);

struct QueryResult {
  std::vector<RankedResult> results;
  /// True when fewer than k images matched.
  bool exhausted = false;
  SearchStats stats;
};

/// Query pipeline over a shared, read-only index: the query text is encoded
/// exactly once, verbatim (no prompt template), then the index is searched.
class Retriever {
 public:
  Retriever(const Index& index, const Encoder& encoder);

  QueryResult run_query(const Query& query, std::size_t k,
                        SearchMode mode = SearchMode::object_level,
                        const SearchOptions& options = {}) const;

  const Index& index() const noexcept { return index_; }
  const Encoder& encoder() const noexcept { return encoder_; }

 private:
  const Index& index_;
  const Encoder& encoder_;
};

}  // namespace objsearch
