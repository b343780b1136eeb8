#include "objsearch/core.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>

#include <openssl/sha.h>

namespace objsearch {

namespace {

template <typename T>
std::vector<float> normalize(std::span<const T> raw) {
  if (raw.empty()) {
    throw InvariantError("embedding must have at least one dimension");
  }
  double sq = 0.0;
  for (T v : raw) {
    const double x = static_cast<double>(v);
    if (!std::isfinite(x)) {
      throw InvariantError("embedding has a non-finite component");
    }
    sq += x * x;
  }
  const double norm = std::sqrt(sq);
  if (norm < EmbeddingVector::kMinRawNorm) {
    throw InvariantError("embedding norm is zero; cosine is undefined");
  }
  std::vector<float> out(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) {
    out[i] = static_cast<float>(static_cast<double>(raw[i]) / norm);
  }
  return out;
}

}  // namespace

EmbeddingVector EmbeddingVector::from_raw(std::span<const float> raw) {
  return EmbeddingVector(normalize(raw));
}

EmbeddingVector EmbeddingVector::from_raw(std::span<const double> raw) {
  return EmbeddingVector(normalize(raw));
}

EmbeddingVector EmbeddingVector::from_unit(std::span<const float> values,
                                           double tolerance) {
  if (values.empty()) {
    throw InvariantError("embedding must have at least one dimension");
  }
  double sq = 0.0;
  for (float v : values) {
    if (!std::isfinite(v)) {
      throw InvariantError("embedding has a non-finite component");
    }
    sq += static_cast<double>(v) * v;
  }
  if (std::abs(std::sqrt(sq) - 1.0) > tolerance) {
    throw InvariantError("embedding is not unit-normalized");
  }
  return EmbeddingVector(std::vector<float>(values.begin(), values.end()));
}

ClassLabel::ClassLabel(std::string name) : name_(std::move(name)) {
  if (name_.empty()) throw InvariantError("class label must be non-empty");
}

ClassSet::ClassSet(std::vector<ClassLabel> labels) : labels_(std::move(labels)) {
  std::sort(labels_.begin(), labels_.end());
  labels_.erase(std::unique(labels_.begin(), labels_.end()), labels_.end());
}

bool ClassSet::contains(const ClassLabel& label) const {
  return std::binary_search(labels_.begin(), labels_.end(), label);
}

void ClassSet::insert(const ClassLabel& label) {
  auto it = std::lower_bound(labels_.begin(), labels_.end(), label);
  if (it == labels_.end() || *it != label) labels_.insert(it, label);
}

std::vector<std::string> ClassSet::names() const {
  std::vector<std::string> out;
  out.reserve(labels_.size());
  for (const auto& l : labels_) out.push_back(l.name());
  return out;
}

std::string ContentHash::hex() const {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string s;
  s.reserve(64);
  for (auto b : bytes) {
    s.push_back(kDigits[b >> 4]);
    s.push_back(kDigits[b & 0xF]);
  }
  return s;
}

ContentHash ContentHash::from_hex(std::string_view hex) {
  if (hex.size() != 64) throw InputError("content hash must be 64 hex digits");
  auto nibble = [](char c) -> std::uint8_t {
    if (c >= '0' && c <= '9') return static_cast<std::uint8_t>(c - '0');
    if (c >= 'a' && c <= 'f') return static_cast<std::uint8_t>(c - 'a' + 10);
    if (c >= 'A' && c <= 'F') return static_cast<std::uint8_t>(c - 'A' + 10);
    throw InputError("content hash has a non-hex digit");
  };
  ContentHash h;
  for (std::size_t i = 0; i < 32; ++i) {
    h.bytes[i] = static_cast<std::uint8_t>(nibble(hex[2 * i]) << 4 |
                                           nibble(hex[2 * i + 1]));
  }
  return h;
}

ContentHash ContentHash::of(std::span<const std::uint8_t> data) {
  ContentHash h;
  SHA256(data.data(), data.size(), h.bytes.data());
  return h;
}

Query Query::make(ClassLabel cls, std::string text) {
  const bool blank = std::all_of(text.begin(), text.end(), [](unsigned char c) {
    return std::isspace(c) != 0;
  });
  if (blank) throw InputError("query text must be non-empty");
  return Query{std::move(cls), std::move(text)};
}

namespace {

constexpr std::size_t kLanes = 16;
using Lanes = float __attribute__((vector_size(kLanes * sizeof(float))));

inline Lanes load_lanes(const float* p) noexcept {
  Lanes v;
  __builtin_memcpy(&v, p, sizeof v);
  return v;
}

// Adds the n % kLanes tail into lanes 0.. and folds pairwise in a fixed
// order. Shared by the single and batched kernels.
inline float finish(Lanes acc, const float* a, const float* b, std::size_t i,
                    std::size_t n) noexcept {
  float lanes[kLanes];
  __builtin_memcpy(lanes, &acc, sizeof lanes);
  for (std::size_t l = 0; i < n; ++i, ++l) lanes[l] += a[i] * b[i];
  for (std::size_t w = kLanes / 2; w > 0; w /= 2) {
    for (std::size_t l = 0; l < w; ++l) lanes[l] += lanes[l + w];
  }
  return lanes[0];
}

}  // namespace

float dot_product(const float* a, const float* b, std::size_t n) noexcept {
  Lanes acc = {};
  std::size_t i = 0;
  for (; i + kLanes <= n; i += kLanes) acc += load_lanes(a + i) * load_lanes(b + i);
  return finish(acc, a, b, i, n);
}

void dot_products(const float* q, const float* rows, std::size_t count, std::size_t n,
                  float* out) noexcept {
  std::size_t r = 0;
  for (; r + 4 <= count; r += 4) {
    const float* r0 = rows + r * n;
    const float* r1 = r0 + n;
    const float* r2 = r1 + n;
    const float* r3 = r2 + n;
    Lanes a0 = {}, a1 = {}, a2 = {}, a3 = {};
    std::size_t i = 0;
    for (; i + kLanes <= n; i += kLanes) {
      const Lanes qv = load_lanes(q + i);
      a0 += qv * load_lanes(r0 + i);
      a1 += qv * load_lanes(r1 + i);
      a2 += qv * load_lanes(r2 + i);
      a3 += qv * load_lanes(r3 + i);
    }
    out[r] = finish(a0, q, r0, i, n);
    out[r + 1] = finish(a1, q, r1, i, n);
    out[r + 2] = finish(a2, q, r2, i, n);
    out[r + 3] = finish(a3, q, r3, i, n);
  }
  for (; r < count; ++r) out[r] = dot_product(q, rows + r * n, n);
}

double cosine_similarity(const EmbeddingVector& a, const EmbeddingVector& b) {
  if (a.dim() != b.dim()) {
    throw InvariantError("dimension mismatch: " + std::to_string(a.dim()) +
                         " vs " + std::to_string(b.dim()));
  }
  return clamp_score(dot_product(a.data(), b.data(), a.dim()));
}

std::optional<ScoredObject> score_object(const EmbeddingVector& query,
                                         const ClassLabel& query_class,
                                         const ObjectRecord& obj) {
  if (query.dim() != obj.embedding.dim()) {
    throw InvariantError("dimension mismatch between query and object");
  }
  if (obj.cls != query_class) return std::nullopt;
  return ScoredObject{obj.image_id, obj.object_index,
                      cosine_similarity(obj.embedding, query)};
}

std::optional<RankedResult> aggregate_image(
    std::span<const ScoredObject> scored) {
  if (scored.empty()) return std::nullopt;
  const ScoredObject* best = &scored.front();
  for (const auto& s : scored) {
    if (s.image_id != best->image_id) {
      throw InvariantError("aggregate_image received objects of images '" +
                           best->image_id + "' and '" + s.image_id + "'");
    }
    if (s.score > best->score ||
        (s.score == best->score && s.object_index < best->object_index)) {
      best = &s;
    }
  }
  return RankedResult{best->image_id, best->score, best->object_index};
}

bool result_precedes(const RankedResult& a, const RankedResult& b) noexcept {
  if (a.score != b.score) return a.score > b.score;
  return a.image_id < b.image_id;
}

bool object_precedes(const ScoredObject& a, const ScoredObject& b) noexcept {
  if (a.score != b.score) return a.score > b.score;
  if (a.image_id != b.image_id) return a.image_id < b.image_id;
  return a.object_index < b.object_index;
}

std::vector<RankedResult> rank(std::vector<RankedResult> results,
                               std::size_t k) {
  const std::size_t n = std::min(k, results.size());
  std::partial_sort(results.begin(), results.begin() + static_cast<long>(n),
                    results.end(), result_precedes);
  results.resize(n);
  return results;
}

}  // namespace objsearch
