#include "objsearch/index.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <mutex>
#include <shared_mutex>
#include <sstream>
#include <thread>
#include <unordered_map>
#include <unordered_set>

#include <sys/mman.h>

#include <nlohmann/json.hpp>

#include "binary_io.hpp"
#include "objsearch/codec.hpp"

namespace objsearch {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Rows per storage block. A block is also the unit of scan fan-out, reduced
// in block order.
constexpr std::size_t kBlockRows = 16384;
constexpr char kPartitionMagic[4] = {'S', 'O', 'L', 'P'};
const float kNoConfidence = std::numeric_limits<float>::quiet_NaN();

// Large blocks are 2 MiB aligned and advised for transparent huge pages; a
// full scan is bound by memory bandwidth and TLB misses show up otherwise.
template <typename T>
struct BlockAllocator {
  using value_type = T;
  static constexpr std::size_t kHugePage = std::size_t{2} << 20;

  BlockAllocator() = default;
  template <typename U>
  BlockAllocator(const BlockAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) {
    const std::size_t bytes = n * sizeof(T);
    if (bytes < kHugePage) return std::allocator<T>{}.allocate(n);
    const std::size_t rounded = (bytes + kHugePage - 1) / kHugePage * kHugePage;
    void* p = std::aligned_alloc(kHugePage, rounded);
    if (!p) throw std::bad_alloc();
    ::madvise(p, rounded, MADV_HUGEPAGE);  // advisory; failure is harmless
    return static_cast<T*>(p);
  }
  void deallocate(T* p, std::size_t n) noexcept {
    if (n * sizeof(T) < kHugePage) {
      std::allocator<T>{}.deallocate(p, n);
    } else {
      std::free(p);
    }
  }
  friend bool operator==(const BlockAllocator&, const BlockAllocator&) = default;
};

using Block = std::vector<float, BlockAllocator<float>>;

struct RowMeta {
  std::uint32_t image = 0;  // ordinal into Impl::images
  std::uint32_t object_index = 0;
  BoundingBox bbox;
  float confidence = kNoConfidence;
};

struct Partition {
  ClassLabel cls;
  std::uint32_t dim = 0;
  std::vector<Block> blocks;
  std::vector<RowMeta> meta;

  std::size_t rows() const noexcept { return meta.size(); }
  std::size_t block_count() const noexcept { return blocks.size(); }

  void append(const float* v, const RowMeta& m) {
    if (blocks.empty() || blocks.back().size() == kBlockRows * dim) {
      blocks.emplace_back();
      blocks.back().reserve(kBlockRows * dim);
    }
    blocks.back().insert(blocks.back().end(), v, v + dim);
    meta.push_back(m);
  }

  const float* row(std::size_t r) const noexcept {
    return blocks[r / kBlockRows].data() + (r % kBlockRows) * dim;
  }
};

struct ImageEntry {
  std::string id;
  std::string uri;
  ContentHash hash;
  std::uint32_t object_count = 0;
};

bool passes_confidence(float confidence, float min_confidence) noexcept {
  if (min_confidence <= 0.0f) return true;
  return !std::isnan(confidence) && confidence >= min_confidence;
}

std::string now_iso8601() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void run_chunks(std::size_t n, unsigned threads,
                const std::function<void(std::size_t)>& fn) {
  unsigned t = threads != 0 ? threads : std::max(1u, std::thread::hardware_concurrency());
  t = static_cast<unsigned>(std::min<std::size_t>(t, n));
  if (t <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < n;) fn(i);
  };
  std::vector<std::jthread> pool;
  pool.reserve(t - 1);
  for (unsigned i = 1; i < t; ++i) pool.emplace_back(work);
  work();
}

}  // namespace

IngestReport& IngestReport::operator+=(const IngestReport& other) {
  added_images += other.added_images;
  skipped_duplicates += other.skipped_duplicates;
  added_objects += other.added_objects;
  warnings += other.warnings;
  messages.insert(messages.end(), other.messages.begin(), other.messages.end());
  return *this;
}

void require_class(const ClassSet& set, const ClassLabel& cls) {
  if (set.contains(cls)) return;
  std::string list;
  for (const auto& name : set.names()) {
    if (!list.empty()) list += ", ";
    list += name;
  }
  throw QueryError("unknown class '" + cls.name() + "'; valid classes: " + list,
                   set.names());
}

struct Index::Impl {
  EncoderDescriptor encoder;
  ClassSet classes;
  std::string created;
  std::string modified;

  std::vector<ImageEntry> images;
  std::unordered_map<std::string, std::uint32_t> by_id;
  std::unordered_map<std::string, std::uint32_t> by_hash;  // hex digest
  std::map<ClassLabel, Partition> partitions;
  Partition full;  // object_index unused
  std::uint64_t object_count = 0;

  mutable std::shared_mutex mu;
  mutable std::atomic<std::uint64_t> rows_scanned{0};
  std::atomic<unsigned> threads{0};

  Impl(EncoderDescriptor enc, ClassSet cls)
      : encoder(std::move(enc)), classes(std::move(cls)) {
    if (encoder.dim == 0) throw ConfigError("index dimension must be positive");
    for (const auto& label : classes.labels()) {
      partitions.emplace(label, Partition{label, encoder.dim, {}, {}});
    }
    full = Partition{ClassLabel("__full_image__"), encoder.dim, {}, {}};
    created = modified = now_iso8601();
  }

  void check_query(const EmbeddingVector& q) const {
    if (q.dim() != encoder.dim) {
      throw ConfigError("query has dimension " + std::to_string(q.dim()) +
                        ", index expects " + std::to_string(encoder.dim));
    }
  }

  const Partition& partition_for(const ClassLabel& cls) const {
    require_class(classes, cls);
    return partitions.at(cls);
  }
};

Index::Index(EncoderDescriptor encoder, ClassSet class_set)
    : impl_(std::make_unique<Impl>(std::move(encoder), std::move(class_set))) {}
Index::Index(std::unique_ptr<Impl> impl) : impl_(std::move(impl)) {}
Index::~Index() = default;
Index::Index(Index&&) noexcept = default;
Index& Index::operator=(Index&&) noexcept = default;

// ---------------------------------------------------------------------------
// Ingestion

IngestReport Index::ingest(std::span<const IngestItem> items) {
  Impl& s = *impl_;
  // Dimension problems are configuration errors and abort the whole call
  // before anything is applied.
  for (const auto& item : items) {
    if (item.image.full_image_embedding &&
        item.image.full_image_embedding->dim() != s.encoder.dim) {
      throw ConfigError("full-image embedding of '" + item.image.image_id +
                        "' has dimension " +
                        std::to_string(item.image.full_image_embedding->dim()) +
                        ", index expects " + std::to_string(s.encoder.dim));
    }
    for (const auto& obj : item.objects) {
      if (obj.embedding.dim() != s.encoder.dim) {
        throw ConfigError("embedding of '" + item.image.image_id + "/" +
                          std::to_string(obj.object_index) + "' has dimension " +
                          std::to_string(obj.embedding.dim()) +
                          ", index expects " + std::to_string(s.encoder.dim));
      }
    }
  }

  IngestReport report;
  auto warn = [&report](std::string msg) {
    ++report.warnings;
    report.messages.push_back(std::move(msg));
  };

  std::unique_lock lock(s.mu);
  for (const auto& item : items) {
    const auto& img = item.image;
    if (img.image_id.empty()) {
      warn("image with empty id rejected");
      continue;
    }
    const std::string hash = img.content_hash.hex();
    if (s.by_hash.contains(hash)) {
      ++report.skipped_duplicates;
      continue;
    }
    if (s.by_id.contains(img.image_id)) {
      warn("image id '" + img.image_id +
           "' already stored with different content; image rejected");
      continue;
    }

    // Stage accepted objects first so the image is applied all at once.
    std::vector<const ObjectRecord*> accepted;
    std::unordered_set<std::uint32_t> seen;
    for (const auto& obj : item.objects) {
      const std::string where =
          img.image_id + "/" + std::to_string(obj.object_index);
      if (obj.image_id != img.image_id) {
        warn(where + ": object carries image id '" + obj.image_id + "'; rejected");
      } else if (!s.classes.contains(obj.cls)) {
        warn(where + ": unknown class '" + obj.cls.name() + "'; rejected");
      } else if (obj.bbox.width == 0 || obj.bbox.height == 0) {
        warn(where + ": empty bounding box; rejected");
      } else if (obj.confidence &&
                 !(*obj.confidence >= 0.0f && *obj.confidence <= 1.0f)) {
        warn(where + ": confidence outside [0, 1]; rejected");
      } else if (!seen.insert(obj.object_index).second) {
        warn(where + ": duplicate object index; rejected");
      } else {
        accepted.push_back(&obj);
      }
    }

    const auto ordinal = static_cast<std::uint32_t>(s.images.size());
    s.images.push_back(ImageEntry{img.image_id, img.source_uri, img.content_hash,
                                  static_cast<std::uint32_t>(accepted.size())});
    s.by_id.emplace(img.image_id, ordinal);
    s.by_hash.emplace(hash, ordinal);
    for (const auto* obj : accepted) {
      s.partitions.at(obj->cls).append(
          obj->embedding.data(),
          RowMeta{ordinal, obj->object_index, obj->bbox,
                  obj->confidence.value_or(kNoConfidence)});
    }
    if (img.full_image_embedding) {
      s.full.append(img.full_image_embedding->data(), RowMeta{ordinal, 0, {}, kNoConfidence});
    }
    s.object_count += accepted.size();
    ++report.added_images;
    report.added_objects += accepted.size();
  }
  if (report.added_images > 0) s.modified = now_iso8601();
  return report;
}

bool Index::contains_hash(const ContentHash& hash) const {
  std::shared_lock lock(impl_->mu);
  return impl_->by_hash.contains(hash.hex());
}

bool Index::contains_image(std::string_view image_id) const {
  std::shared_lock lock(impl_->mu);
  return impl_->by_id.contains(std::string(image_id));
}

// ---------------------------------------------------------------------------
// Search

std::vector<ScoredObject> Index::search_topk_objects(const ClassLabel& cls,
                                                     const EmbeddingVector& query,
                                                     std::size_t k,
                                                     const SearchOptions& options,
                                                     SearchStats* stats) const {
  const Impl& s = *impl_;
  std::shared_lock lock(s.mu);
  s.check_query(query);
  const Partition& part = s.partition_for(cls);
  if (stats) *stats = SearchStats{0, 1};
  if (k == 0 || part.rows() == 0) return {};

  struct Hit {
    double score;
    std::uint32_t row;
  };
  auto hit_less = [&](const Hit& a, const Hit& b) {
    if (a.score != b.score) return a.score > b.score;
    const auto& ma = part.meta[a.row];
    const auto& mb = part.meta[b.row];
    if (ma.image != mb.image) {
      return s.images[ma.image].id < s.images[mb.image].id;
    }
    return ma.object_index < mb.object_index;
  };

  const std::size_t dim = s.encoder.dim;
  std::vector<std::vector<Hit>> per_block(part.block_count());
  run_chunks(part.block_count(), s.threads.load(), [&](std::size_t b) {
    const std::size_t begin = b * kBlockRows;
    const std::size_t end = std::min(begin + kBlockRows, part.rows());
    auto& hits = per_block[b];
    hits.reserve(end - begin);
    std::vector<float> scores(end - begin);
    dot_products(query.data(), part.blocks[b].data(), end - begin, dim, scores.data());
    for (std::size_t r = begin; r < end; ++r) {
      if (!passes_confidence(part.meta[r].confidence, options.min_confidence)) continue;
      hits.push_back({clamp_score(scores[r - begin]), static_cast<std::uint32_t>(r)});
    }
    const std::size_t keep = std::min(k, hits.size());
    std::partial_sort(hits.begin(), hits.begin() + static_cast<long>(keep),
                      hits.end(), hit_less);
    hits.resize(keep);
  });

  std::vector<Hit> merged;
  for (auto& hits : per_block) merged.insert(merged.end(), hits.begin(), hits.end());
  const std::size_t keep = std::min(k, merged.size());
  std::partial_sort(merged.begin(), merged.begin() + static_cast<long>(keep),
                    merged.end(), hit_less);

  s.rows_scanned += part.rows();
  if (stats) stats->rows_visited = part.rows();

  std::vector<ScoredObject> out;
  out.reserve(keep);
  for (std::size_t i = 0; i < keep; ++i) {
    const auto& m = part.meta[merged[i].row];
    out.push_back({s.images[m.image].id, m.object_index, merged[i].score});
  }
  return out;
}

namespace {

struct ImageBest {
  std::uint32_t image;
  std::uint32_t object_index;
  double score;
};

// Per-image running max over rows [begin, end). Rows of one image are
// usually adjacent, so consecutive rows fold into one run.
void scan_image_runs(const Partition& part, std::size_t block,
                     const EmbeddingVector& query, float min_confidence,
                     std::vector<ImageBest>& runs) {
  const std::size_t dim = part.dim;
  const std::size_t begin = block * kBlockRows;
  const std::size_t end = std::min(begin + kBlockRows, part.rows());
  std::vector<float> scores(end - begin);
  dot_products(query.data(), part.blocks[block].data(), end - begin, dim, scores.data());
  for (std::size_t r = begin; r < end; ++r) {
    const RowMeta& m = part.meta[r];
    if (!passes_confidence(m.confidence, min_confidence)) continue;
    const double sc = clamp_score(scores[r - begin]);
    if (!runs.empty() && runs.back().image == m.image) {
      auto& cur = runs.back();
      if (sc > cur.score || (sc == cur.score && m.object_index < cur.object_index)) {
        cur.score = sc;
        cur.object_index = m.object_index;
      }
    } else {
      runs.push_back({m.image, m.object_index, sc});
    }
  }
}

}  // namespace

std::vector<RankedResult> Index::search_topk_images(const ClassLabel& cls,
                                                    const EmbeddingVector& query,
                                                    std::size_t k,
                                                    const SearchOptions& options,
                                                    SearchStats* stats) const {
  const Impl& s = *impl_;
  std::shared_lock lock(s.mu);
  s.check_query(query);
  const Partition& part = s.partition_for(cls);
  if (stats) *stats = SearchStats{0, 1};
  if (k == 0 || part.rows() == 0) return {};

  std::vector<std::vector<ImageBest>> per_block(part.block_count());
  run_chunks(part.block_count(), s.threads.load(), [&](std::size_t b) {
    scan_image_runs(part, b, query, options.min_confidence, per_block[b]);
  });

  // Reduce runs into per-image maxima in block order.
  std::unordered_map<std::uint32_t, ImageBest> best;
  std::size_t total_runs = 0;
  for (const auto& runs : per_block) total_runs += runs.size();
  best.reserve(total_runs);
  for (const auto& runs : per_block) {
    for (const auto& run : runs) {
      auto [it, inserted] = best.try_emplace(run.image, run);
      if (inserted) continue;
      auto& cur = it->second;
      if (run.score > cur.score ||
          (run.score == cur.score && run.object_index < cur.object_index)) {
        cur = run;
      }
    }
  }

  std::vector<ImageBest> cands;
  cands.reserve(best.size());
  for (const auto& [_, v] : best) cands.push_back(v);
  auto less = [&](const ImageBest& a, const ImageBest& b) {
    if (a.score != b.score) return a.score > b.score;
    return s.images[a.image].id < s.images[b.image].id;
  };
  const std::size_t keep = std::min(k, cands.size());
  std::partial_sort(cands.begin(), cands.begin() + static_cast<long>(keep),
                    cands.end(), less);

  s.rows_scanned += part.rows();
  if (stats) stats->rows_visited = part.rows();

  std::vector<RankedResult> out;
  out.reserve(keep);
  for (std::size_t i = 0; i < keep; ++i) {
    out.push_back({s.images[cands[i].image].id, cands[i].score, cands[i].object_index});
  }
  return out;
}

std::vector<RankedResult> Index::search_topk_full_images(const EmbeddingVector& query,
                                                         std::size_t k,
                                                         SearchStats* stats) const {
  const Impl& s = *impl_;
  std::shared_lock lock(s.mu);
  s.check_query(query);
  if (stats) *stats = SearchStats{0, 0};
  if (s.full.rows() == 0 && !s.images.empty()) {
    throw CapabilityError("index was built without full-image embeddings");
  }
  if (k == 0 || s.full.rows() == 0) return {};

  const Partition& part = s.full;
  std::vector<std::vector<ImageBest>> per_block(part.block_count());
  run_chunks(part.block_count(), s.threads.load(), [&](std::size_t b) {
    scan_image_runs(part, b, query, 0.0f, per_block[b]);
  });
  std::vector<ImageBest> cands;
  for (const auto& runs : per_block) cands.insert(cands.end(), runs.begin(), runs.end());
  auto less = [&](const ImageBest& a, const ImageBest& b) {
    if (a.score != b.score) return a.score > b.score;
    return s.images[a.image].id < s.images[b.image].id;
  };
  const std::size_t keep = std::min(k, cands.size());
  std::partial_sort(cands.begin(), cands.begin() + static_cast<long>(keep),
                    cands.end(), less);

  s.rows_scanned += part.rows();
  if (stats) *stats = SearchStats{part.rows(), 1};

  std::vector<RankedResult> out;
  out.reserve(keep);
  for (std::size_t i = 0; i < keep; ++i) {
    out.push_back({s.images[cands[i].image].id, cands[i].score, std::nullopt});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Introspection

IndexStats Index::stats() const {
  const Impl& s = *impl_;
  std::shared_lock lock(s.mu);
  IndexStats st;
  for (const auto& [label, part] : s.partitions) {
    st.classes.push_back({label, part.rows()});
  }
  st.image_count = s.images.size();
  st.object_count = s.object_count;
  st.full_image_count = s.full.rows();
  st.dim = s.encoder.dim;
  st.encoder_id = s.encoder.encoder_id;
  return st;
}

IndexManifest Index::manifest() const {
  const Impl& s = *impl_;
  std::shared_lock lock(s.mu);
  IndexManifest m;
  m.encoder = s.encoder;
  m.class_set = s.classes;
  m.image_count = s.images.size();
  m.object_count = s.object_count;
  m.created = s.created;
  m.modified = s.modified;
  return m;
}

const EncoderDescriptor& Index::encoder() const { return impl_->encoder; }

ClassSet Index::class_set() const { return impl_->classes; }

bool Index::has_full_image_embeddings() const {
  std::shared_lock lock(impl_->mu);
  return impl_->full.rows() > 0;
}

std::optional<ImageRecord> Index::image(std::string_view image_id) const {
  const Impl& s = *impl_;
  std::shared_lock lock(s.mu);
  auto it = s.by_id.find(std::string(image_id));
  if (it == s.by_id.end()) return std::nullopt;
  const auto& e = s.images[it->second];
  ImageRecord rec{e.id, e.uri, e.hash, e.object_count, std::nullopt};
  for (std::size_t r = 0; r < s.full.rows(); ++r) {
    if (s.full.meta[r].image == it->second) {
      rec.full_image_embedding = EmbeddingVector::from_unit(
          std::span<const float>(s.full.row(r), s.encoder.dim));
      break;
    }
  }
  return rec;
}

std::optional<StoredObject> Index::object(std::string_view image_id,
                                          std::uint32_t object_index) const {
  const Impl& s = *impl_;
  std::shared_lock lock(s.mu);
  auto it = s.by_id.find(std::string(image_id));
  if (it == s.by_id.end()) return std::nullopt;
  for (const auto& [label, part] : s.partitions) {
    for (const auto& m : part.meta) {
      if (m.image == it->second && m.object_index == object_index) {
        std::optional<float> conf;
        if (!std::isnan(m.confidence)) conf = m.confidence;
        return StoredObject{std::string(image_id), object_index, label, m.bbox, conf};
      }
    }
  }
  return std::nullopt;
}

std::vector<ObjectRecord> Index::object_records() const {
  const Impl& s = *impl_;
  std::shared_lock lock(s.mu);
  std::vector<ObjectRecord> out;
  out.reserve(s.object_count);
  for (const auto& [label, part] : s.partitions) {
    for (std::size_t r = 0; r < part.rows(); ++r) {
      const auto& m = part.meta[r];
      std::optional<float> conf;
      if (!std::isnan(m.confidence)) conf = m.confidence;
      out.push_back(ObjectRecord{
          s.images[m.image].id, m.object_index, label, m.bbox, conf,
          EmbeddingVector::from_unit(std::span<const float>(part.row(r), part.dim))});
    }
  }
  return out;
}

std::vector<ImageRecord> Index::image_records() const {
  const Impl& s = *impl_;
  std::shared_lock lock(s.mu);
  std::vector<ImageRecord> out;
  out.reserve(s.images.size());
  for (const auto& e : s.images) {
    out.push_back({e.id, e.uri, e.hash, e.object_count, std::nullopt});
  }
  for (std::size_t r = 0; r < s.full.rows(); ++r) {
    out[s.full.meta[r].image].full_image_embedding = EmbeddingVector::from_unit(
        std::span<const float>(s.full.row(r), s.encoder.dim));
  }
  return out;
}

std::uint64_t Index::rows_scanned_total() const { return impl_->rows_scanned.load(); }

void Index::set_search_threads(unsigned threads) { impl_->threads = threads; }

// ---------------------------------------------------------------------------
// Persistence

namespace {

std::vector<std::uint8_t> serialize_partition(const Partition& part,
                                              const std::vector<ImageEntry>& images) {
  detail::ByteWriter w;
  w.put_bytes(std::span(reinterpret_cast<const std::uint8_t*>(kPartitionMagic), 4));
  w.put<std::uint16_t>(Index::kPartitionVersion);
  w.put<std::uint32_t>(part.dim);
  w.put<std::uint64_t>(part.rows());
  for (const auto& m : part.meta) {
    w.put_string(images[m.image].id);
    w.put<std::uint32_t>(m.object_index);
    w.put<std::uint32_t>(m.bbox.x);
    w.put<std::uint32_t>(m.bbox.y);
    w.put<std::uint32_t>(m.bbox.width);
    w.put<std::uint32_t>(m.bbox.height);
    w.put<std::uint8_t>(std::isnan(m.confidence) ? 0 : 1);
    w.put<float>(std::isnan(m.confidence) ? 0.0f : m.confidence);
  }
  w.put<std::uint64_t>(codec::crc64(w.bytes()));
  const std::size_t emb_start = w.size();
  for (std::size_t b = 0; b < part.block_count(); ++b) w.put_floats(part.blocks[b]);
  w.put<std::uint64_t>(codec::crc64(w.bytes_from(emb_start)));
  return std::move(w.buffer());
}

Partition parse_partition(std::span<const std::uint8_t> bytes, const std::string& where,
                          const ClassLabel& cls, std::uint32_t dim,
                          std::uint64_t expected_rows,
                          const std::unordered_map<std::string, std::uint32_t>& by_id) {
  detail::ByteReader r(bytes, where);
  const auto magic = r.get_bytes(4);
  if (!std::equal(magic.begin(), magic.end(), kPartitionMagic)) {
    throw FormatError(where + ": bad magic (expected SOLP)");
  }
  const auto version = r.get<std::uint16_t>();
  if (version != Index::kPartitionVersion) {
    throw FormatError(where + ": unsupported partition version " + std::to_string(version));
  }
  const auto file_dim = r.get<std::uint32_t>();
  if (file_dim != dim) {
    throw FormatError(where + ": dimension " + std::to_string(file_dim) +
                      " does not match manifest dimension " + std::to_string(dim));
  }
  const auto rows = r.get<std::uint64_t>();
  if (rows != expected_rows) {
    r.fail("row count " + std::to_string(rows) + " does not match manifest (" +
           std::to_string(expected_rows) + ")");
  }
  // Each meta record is at least 33 bytes; reject absurd counts before
  // allocating.
  if (rows > r.remaining() / 33) r.fail("truncated row_meta block");

  Partition part{cls, dim, {}, {}};
  part.meta.reserve(rows);
  for (std::uint64_t i = 0; i < rows; ++i) {
    const std::string id = r.get_string();
    RowMeta m;
    auto it = by_id.find(id);
    if (it == by_id.end()) r.fail("row references unknown image '" + id + "'");
    m.image = it->second;
    m.object_index = r.get<std::uint32_t>();
    m.bbox.x = r.get<std::uint32_t>();
    m.bbox.y = r.get<std::uint32_t>();
    m.bbox.width = r.get<std::uint32_t>();
    m.bbox.height = r.get<std::uint32_t>();
    const auto has_conf = r.get<std::uint8_t>();
    const auto conf = r.get<float>();
    m.confidence = has_conf ? conf : kNoConfidence;
    part.meta.push_back(m);
  }
  const std::uint64_t meta_crc = codec::crc64(r.consumed_since(0));
  if (r.get<std::uint64_t>() != meta_crc) {
    throw ChecksumError(where + ": row_meta checksum mismatch", where);
  }

  const std::size_t emb_start = r.position();
  const std::size_t row_bytes = std::size_t{dim} * sizeof(float);
  if (rows > r.remaining() / row_bytes) r.fail("truncated embedding block");
  for (std::size_t done = 0; done < rows;) {
    const std::size_t n = std::min<std::size_t>(kBlockRows, rows - done);
    Block block;
    block.reserve(kBlockRows * dim);
    block.resize(n * dim);
    r.get_floats(block);
    part.blocks.push_back(std::move(block));
    done += n;
  }
  const std::uint64_t emb_crc = codec::crc64(r.consumed_since(emb_start));
  if (r.get<std::uint64_t>() != emb_crc) {
    throw ChecksumError(where + ": embedding checksum mismatch", where);
  }
  if (r.remaining() != 0) r.fail("trailing bytes after embedding block");
  return part;
}

std::vector<std::uint8_t> serialize_images(const std::vector<ImageEntry>& images) {
  std::string out;
  for (const auto& e : images) {
    out += json{{"image_id", e.id},
                {"source_uri", e.uri},
                {"content_hash", e.hash.hex()},
                {"object_count", e.object_count}}
               .dump();
    out += '\n';
  }
  return {out.begin(), out.end()};
}

std::string partition_file_name(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "partition_%04zu.solp", i);
  return buf;
}

}  // namespace

void Index::persist(const std::string& dir) const {
  const Impl& s = *impl_;
  std::shared_lock lock(s.mu);

  const fs::path target(dir);
  const fs::path tmp = target.string() + ".tmp";
  const fs::path old = target.string() + ".old";
  fs::remove_all(tmp);
  fs::create_directories(tmp);

  json manifest;
  manifest["format_version"] = IndexManifest::kFormatVersion;
  manifest["encoder"] = {{"encoder_id", s.encoder.encoder_id},
                         {"dim", s.encoder.dim},
                         {"modality", to_string(s.encoder.modality)}};
  manifest["class_set"] = s.classes.names();
  manifest["image_count"] = s.images.size();
  manifest["object_count"] = s.object_count;
  manifest["created"] = s.created;
  manifest["modified"] = s.modified;

  const auto images = serialize_images(s.images);
  codec::write_file((tmp / "images.jsonl").string(), images);
  manifest["images_file"] = "images.jsonl";
  manifest["images_crc64"] = codec::crc64(images);

  manifest["partitions"] = json::array();
  std::size_t i = 0;
  for (const auto& [label, part] : s.partitions) {
    const std::string name = partition_file_name(i++);
    codec::write_file((tmp / name).string(), serialize_partition(part, s.images));
    manifest["partitions"].push_back(
        {{"class", label.name()}, {"file", name}, {"rows", part.rows()}});
  }
  if (s.full.rows() > 0) {
    codec::write_file((tmp / "full_images.solp").string(),
                      serialize_partition(s.full, s.images));
    manifest["full_image_file"] = {{"file", "full_images.solp"}, {"rows", s.full.rows()}};
  } else {
    manifest["full_image_file"] = nullptr;
  }
  {
    std::ofstream out(tmp / "manifest.json", std::ios::trunc);
    out << manifest.dump(2) << '\n';
    if (!out) throw Error("cannot write manifest in '" + tmp.string() + "'");
  }

  fs::remove_all(old);
  if (fs::exists(target)) fs::rename(target, old);
  fs::rename(tmp, target);
  fs::remove_all(old);
}

Index Index::load(const std::string& dir) {
  const fs::path root(dir);
  const fs::path manifest_path = root / "manifest.json";
  if (!fs::exists(manifest_path)) {
    throw FormatError("'" + dir + "' is not an index (manifest.json missing)");
  }
  json manifest;
  try {
    std::ifstream in(manifest_path);
    manifest = json::parse(in);
  } catch (const json::exception& e) {
    throw CorruptionError("manifest.json: " + std::string(e.what()), "manifest.json");
  }

  try {
    const auto version = manifest.at("format_version").get<std::uint32_t>();
    if (version != IndexManifest::kFormatVersion) {
      throw FormatError("unsupported index format version " + std::to_string(version));
    }
    const auto& enc = manifest.at("encoder");
    EncoderDescriptor desc{enc.at("encoder_id").get<std::string>(),
                           enc.at("dim").get<std::uint32_t>(),
                           modality_from_string(enc.at("modality").get<std::string>())};
    std::vector<ClassLabel> labels;
    for (const auto& n : manifest.at("class_set")) labels.emplace_back(n.get<std::string>());

    auto impl = std::make_unique<Impl>(desc, ClassSet(std::move(labels)));
    Impl& s = *impl;
    s.created = manifest.at("created").get<std::string>();
    s.modified = manifest.at("modified").get<std::string>();

    // Image table.
    const std::string images_name = manifest.at("images_file").get<std::string>();
    const auto images_bytes = codec::read_file((root / images_name).string());
    if (codec::crc64(images_bytes) != manifest.at("images_crc64").get<std::uint64_t>()) {
      throw ChecksumError(images_name + ": checksum mismatch", images_name);
    }
    std::istringstream lines(std::string(images_bytes.begin(), images_bytes.end()));
    for (std::string line; std::getline(lines, line);) {
      if (line.empty()) continue;
      const auto rec = json::parse(line);
      ImageEntry e{rec.at("image_id").get<std::string>(),
                   rec.at("source_uri").get<std::string>(),
                   ContentHash::from_hex(rec.at("content_hash").get<std::string>()),
                   rec.at("object_count").get<std::uint32_t>()};
      const auto ordinal = static_cast<std::uint32_t>(s.images.size());
      if (!s.by_id.emplace(e.id, ordinal).second ||
          !s.by_hash.emplace(e.hash.hex(), ordinal).second) {
        throw CorruptionError(images_name + ": duplicate image '" + e.id + "'", images_name);
      }
      s.images.push_back(std::move(e));
    }
    if (s.images.size() != manifest.at("image_count").get<std::uint64_t>()) {
      throw CorruptionError(images_name + ": image count does not match manifest",
                            images_name);
    }

    // Partitions.
    std::vector<std::uint32_t> counted(s.images.size(), 0);
    std::size_t seen_partitions = 0;
    for (const auto& p : manifest.at("partitions")) {
      const ClassLabel label(p.at("class").get<std::string>());
      if (!s.classes.contains(label)) {
        throw CorruptionError("manifest lists partition for unknown class '" +
                                  label.name() + "'",
                              "manifest.json");
      }
      const std::string file = p.at("file").get<std::string>();
      const std::string where = file + " (class '" + label.name() + "')";
      auto part = parse_partition(codec::read_file((root / file).string()), where, label,
                                  s.encoder.dim, p.at("rows").get<std::uint64_t>(), s.by_id);
      for (const auto& m : part.meta) ++counted[m.image];
      s.object_count += part.rows();
      s.partitions.at(label) = std::move(part);
      ++seen_partitions;
    }
    if (seen_partitions != s.classes.size()) {
      throw CorruptionError("manifest partition table does not cover the class set",
                            "manifest.json");
    }
    if (s.object_count != manifest.at("object_count").get<std::uint64_t>()) {
      throw CorruptionError("object count does not match manifest", "manifest.json");
    }
    for (std::size_t i = 0; i < s.images.size(); ++i) {
      if (counted[i] != s.images[i].object_count) {
        throw CorruptionError("object count of image '" + s.images[i].id +
                                  "' does not match its partition rows",
                              images_name);
      }
    }

    if (const auto& f = manifest.at("full_image_file"); !f.is_null()) {
      const std::string file = f.at("file").get<std::string>();
      s.full = parse_partition(codec::read_file((root / file).string()), file,
                               s.full.cls, s.encoder.dim, f.at("rows").get<std::uint64_t>(),
                               s.by_id);
    }
    return Index(std::move(impl));
  } catch (const json::exception& e) {
    throw CorruptionError("manifest.json: " + std::string(e.what()), "manifest.json");
  } catch (const InputError& e) {
    throw CorruptionError(std::string("index data: ") + e.what(), dir);
  }
}

}  // namespace objsearch
