#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "objsearch/errors.hpp"

namespace objsearch {

/// Default latent dimension of the CLIP-style encoders the store is built for.
inline constexpr std::uint32_t kDefaultDim = 512;

/// Unit-normalized d-dimensional latent coordinate of a text or an object crop.
///
/// Vectors are normalized once at construction so cosine similarity reduces to
/// a dot product. Raw inputs with norm below 1e-12 (or non-finite components)
/// are rejected with InvariantError.
class EmbeddingVector {
 public:
  static constexpr double kMinRawNorm = 1e-12;
  static constexpr double kUnitTolerance = 1e-6;

  EmbeddingVector() = default;

  static EmbeddingVector from_raw(std::span<const float> raw);
  static EmbeddingVector from_raw(std::span<const double> raw);

  /// Adopts values that are already unit length, keeping them bit-for-bit.
  /// Fails if the norm deviates from 1 by more than `tolerance`.
  static EmbeddingVector from_unit(std::span<const float> values,
                                   double tolerance = 1e-5);

  std::uint32_t dim() const noexcept {
    return static_cast<std::uint32_t>(values_.size());
  }
  bool empty() const noexcept { return values_.empty(); }
  std::span<const float> values() const noexcept { return values_; }
  const float* data() const noexcept { return values_.data(); }

  friend bool operator==(const EmbeddingVector&,
                         const EmbeddingVector&) = default;

 private:
  explicit EmbeddingVector(std::vector<float> v) : values_(std::move(v)) {}
  std::vector<float> values_;
};

/// Object class name drawn from the segmentation class set.
class ClassLabel {
 public:
  ClassLabel() = default;
  explicit ClassLabel(std::string name);

  const std::string& name() const noexcept { return name_; }

  friend auto operator<=>(const ClassLabel&, const ClassLabel&) = default;

 private:
  std::string name_;
};

/// Sorted, duplicate-free set of class labels.
class ClassSet {
 public:
  ClassSet() = default;
  explicit ClassSet(std::vector<ClassLabel> labels);

  bool contains(const ClassLabel& label) const;
  void insert(const ClassLabel& label);
  std::size_t size() const noexcept { return labels_.size(); }
  bool empty() const noexcept { return labels_.empty(); }
  const std::vector<ClassLabel>& labels() const noexcept { return labels_; }
  std::vector<std::string> names() const;

  friend bool operator==(const ClassSet&, const ClassSet&) = default;

 private:
  std::vector<ClassLabel> labels_;
};

/// Axis-aligned pixel box, top-left origin.
struct BoundingBox {
  std::uint32_t x = 0;
  std::uint32_t y = 0;
  std::uint32_t width = 0;
  std::uint32_t height = 0;

  friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

/// SHA-256 digest of the encoded image bytes.
struct ContentHash {
  std::array<std::uint8_t, 32> bytes{};

  std::string hex() const;
  static ContentHash from_hex(std::string_view hex);
  static ContentHash of(std::span<const std::uint8_t> data);

  friend auto operator<=>(const ContentHash&, const ContentHash&) = default;
};

struct Query {
  ClassLabel cls;
  std::string text;

  /// Validates that the text is non-empty after trimming whitespace.
  static Query make(ClassLabel cls, std::string text);
};

struct ObjectRecord {
  std::string image_id;
  std::uint32_t object_index = 0;
  ClassLabel cls;
  BoundingBox bbox;
  std::optional<float> confidence;
  EmbeddingVector embedding;
};

struct ImageRecord {
  std::string image_id;
  std::string source_uri;
  ContentHash content_hash;
  std::uint32_t object_count = 0;
  std::optional<EmbeddingVector> full_image_embedding;
};

struct ScoredObject {
  std::string image_id;
  std::uint32_t object_index = 0;
  double score = 0.0;

  friend bool operator==(const ScoredObject&, const ScoredObject&) = default;
};

struct RankedResult {
  std::string image_id;
  double score = 0.0;
  /// Absent in full-image mode.
  std::optional<std::uint32_t> best_object_index;

  friend bool operator==(const RankedResult&, const RankedResult&) = default;
};

/// Dot product with a fixed 16-lane accumulation order. Every scoring path
/// in the library goes through this kernel, so equal inputs give bit-equal
/// scores no matter which path computed them.
float dot_product(const float* a, const float* b, std::size_t n) noexcept;

/// out[r] = dot_product(q, rows + r * n, n) for r < count, bit for bit.
/// Several rows are accumulated side by side to hide add latency.
void dot_products(const float* q, const float* rows, std::size_t count, std::size_t n,
                  float* out) noexcept;

/// Clamps accumulated drift to [-1, 1].
inline double clamp_score(float s) noexcept {
  return s > 1.0f ? 1.0 : (s < -1.0f ? -1.0 : static_cast<double>(s));
}

double cosine_similarity(const EmbeddingVector& a, const EmbeddingVector& b);

/// Class-gated object score. std::nullopt stands for the -inf branch: the
/// object is excluded from every candidate set.
std::optional<ScoredObject> score_object(const EmbeddingVector& query,
                                         const ClassLabel& query_class,
                                         const ObjectRecord& obj);

/// Per-image max. Ties go to the smallest object_index; an empty collection
/// means the image has no object of the queried class and is excluded.
std::optional<RankedResult> aggregate_image(
    std::span<const ScoredObject> scored);

/// Total order on results: score descending, then image_id ascending.
bool result_precedes(const RankedResult& a, const RankedResult& b) noexcept;

/// Total order on objects: score desc, image_id asc, object_index asc.
bool object_precedes(const ScoredObject& a, const ScoredObject& b) noexcept;

/// Returns the first min(k, |results|) results under result_precedes.
std::vector<RankedResult> rank(std::vector<RankedResult> results,
                               std::size_t k);

}  // namespace objsearch
