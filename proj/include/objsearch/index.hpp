#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "objsearch/core.hpp"
#include "objsearch/encoder.hpp"

namespace objsearch {

struct IndexManifest {
  static constexpr std::uint32_t kFormatVersion = 1;

  EncoderDescriptor encoder;
  ClassSet class_set;
  std::uint64_t image_count = 0;
  std::uint64_t object_count = 0;
  std::string created;   // ISO-8601 UTC
  std::string modified;  // ISO-8601 UTC
  std::uint32_t format_version = kFormatVersion;
};

/// One image and its detected objects, ready to be stored.
struct IngestItem {
  ImageRecord image;
  std::vector<ObjectRecord> objects;
};

struct IngestReport {
  std::uint64_t added_images = 0;
  std::uint64_t skipped_duplicates = 0;
  std::uint64_t added_objects = 0;
  std::uint64_t warnings = 0;
  std::vector<std::string> messages;

  IngestReport& operator+=(const IngestReport& other);
};

struct SearchOptions {
  /// Objects with a confidence below this are skipped. Objects without a
  /// confidence only pass when this is 0.
  float min_confidence = 0.0f;
};

/// Per-call scan instrumentation.
struct SearchStats {
  std::uint64_t rows_visited = 0;
  std::uint32_t partitions_scanned = 0;
};

/// Metadata stored for one object row (everything but the embedding).
struct StoredObject {
  std::string image_id;
  std::uint32_t object_index = 0;
  ClassLabel cls;
  BoundingBox bbox;
  std::optional<float> confidence;
};

struct IndexStats {
  struct Partition {
    ClassLabel cls;
    std::uint64_t rows = 0;
  };
  std::vector<Partition> classes;
  std::uint64_t image_count = 0;
  std::uint64_t object_count = 0;
  std::uint64_t full_image_count = 0;
  std::uint32_t dim = 0;
  std::string encoder_id;
};

/// Class-partitioned object-embedding store with exact top-k cosine search.
///
/// Each class owns a partition of contiguous f32 rows, so a query scans only
/// the partition of its class; objects of other classes are never visited.
/// Duplicate images are detected by content hash.
///
/// Thread safety: any number of concurrent searches; ingest() takes an
/// exclusive lock, so readers observe either the state before or after a
/// whole ingest call.
///
/// On disk an index is a directory:
///   manifest.json       encoder, class set, counts, partition table
///   images.jsonl        one ImageRecord per line (CRC-64 kept in manifest)
///   partition_NNNN.solp one file per class partition
///   full_images.solp    full-image embeddings, when present
/// A .solp file is "SOLP", u16 version, u32 d, u64 row_count, the row_meta
/// block, u64 CRC-64 of header+row_meta, the row-major f32 embedding block,
/// u64 CRC-64 of the embedding block. All integers little-endian.
class Index {
 public:
  static constexpr std::uint16_t kPartitionVersion = 1;

  Index(EncoderDescriptor encoder, ClassSet class_set);
  ~Index();
  Index(Index&&) noexcept;
  Index& operator=(Index&&) noexcept;

  static Index load(const std::string& dir);
  /// Writes to a temporary sibling directory and swaps it into place.
  void persist(const std::string& dir) const;

  IngestReport ingest(std::span<const IngestItem> items);

  bool contains_hash(const ContentHash& hash) const;
  bool contains_image(std::string_view image_id) const;

  std::vector<ScoredObject> search_topk_objects(
      const ClassLabel& cls, const EmbeddingVector& query, std::size_t k,
      const SearchOptions& options = {}, SearchStats* stats = nullptr) const;

  std::vector<RankedResult> search_topk_images(
      const ClassLabel& cls, const EmbeddingVector& query, std::size_t k,
      const SearchOptions& options = {}, SearchStats* stats = nullptr) const;

  std::vector<RankedResult> search_topk_full_images(
      const EmbeddingVector& query, std::size_t k,
      SearchStats* stats = nullptr) const;

  IndexStats stats() const;
  IndexManifest manifest() const;
  const EncoderDescriptor& encoder() const;
  ClassSet class_set() const;
  bool has_full_image_embeddings() const;

  std::optional<ImageRecord> image(std::string_view image_id) const;
  std::optional<StoredObject> object(std::string_view image_id,
                                     std::uint32_t object_index) const;

  /// Every stored object with its embedding, partition by partition.
  std::vector<ObjectRecord> object_records() const;
  std::vector<ImageRecord> image_records() const;

  /// Cumulative rows scanned by all searches since construction.
  std::uint64_t rows_scanned_total() const;

  /// Worker threads used to fan a scan out over partition chunks
  /// (0 = hardware concurrency). Results do not depend on this value.
  void set_search_threads(unsigned threads);

 private:
  struct Impl;
  explicit Index(std::unique_ptr<Impl> impl);
  std::unique_ptr<Impl> impl_;
};

/// Throws QueryError naming the valid classes when `cls` is not in the set.
void require_class(const ClassSet& set, const ClassLabel& cls);

}  // namespace objsearch
