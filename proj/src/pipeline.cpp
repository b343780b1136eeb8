#include "objsearch/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <filesystem>
#include <mutex>
#include <thread>

#include "objsearch/codec.hpp"
#include "objsearch/image_io.hpp"

namespace objsearch {

namespace fs = std::filesystem;

std::optional<EmbeddingVector> EncoderEmbedder::embed_object(
    const PanopticAnnotation& ann, const ExtractedObject& obj,
    std::uint32_t /*object_index*/) const {
  if (const auto* toy = dynamic_cast<const ToyEncoder*>(&encoder_)) {
    for (const auto& inst : ann.instances) {
      if (inst.id == obj.instance_id && !inst.tokens.empty()) {
        return toy->encode_tokens(inst.tokens);
      }
    }
  }
  return encoder_.encode_image(obj.crop);
}

std::optional<EmbeddingVector> EncoderEmbedder::embed_full(
    const PanopticAnnotation& ann, const PixelBuffer& image) const {
  if (const auto* toy = dynamic_cast<const ToyEncoder*>(&encoder_)) {
    if (!ann.image_tokens.empty()) return toy->encode_tokens(ann.image_tokens);
  }
  return encoder_.encode_image(pad_to_square(image));
}

std::optional<EmbeddingVector> PrecomputedEmbedder::embed_object(
    const PanopticAnnotation& ann, const ExtractedObject& /*obj*/,
    std::uint32_t object_index) const {
  return source_.lookup_object(ann.image_id, object_index);
}

std::optional<EmbeddingVector> PrecomputedEmbedder::embed_full(
    const PanopticAnnotation& ann, const PixelBuffer& /*image*/) const {
  return source_.lookup_full(ann.image_id);
}

std::vector<std::string> list_annotation_files(const std::string& dir) {
  if (!fs::is_directory(dir)) {
    throw InputError("annotation directory '" + dir + "' does not exist");
  }
  std::vector<std::string> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".json") {
      files.push_back(entry.path().string());
    }
  }
  std::sort(files.begin(), files.end());
  return files;
}

namespace {

PanopticAnnotation read_annotation(const std::string& path) {
  const auto bytes = codec::read_file(path);
  try {
    return PanopticAnnotation::from_json(
        std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
  } catch (const InputError& e) {
    throw InputError(path + ": " + e.what());
  }
}

}  // namespace

ClassSet collect_classes(const std::string& annotations_dir) {
  ClassSet set;
  for (const auto& file : list_annotation_files(annotations_dir)) {
    for (const auto& inst : read_annotation(file).instances) set.insert(inst.cls);
  }
  return set;
}

std::string locate_image(const std::string& images_dir,
                         const PanopticAnnotation& ann) {
  if (!ann.file.empty()) return (fs::path(images_dir) / ann.file).string();
  for (const char* ext : {".png", ".ppm"}) {
    fs::path p = fs::path(images_dir) / (ann.image_id + ext);
    if (fs::exists(p)) return p.string();
  }
  throw InputError("no image file for '" + ann.image_id + "' in '" + images_dir + "'");
}

PipelineReport ingest_directory(Index& index, const ObjectEmbedder& embedder,
                                const PipelineOptions& options) {
  const auto& want = index.encoder();
  const auto& have = embedder.descriptor();
  if (have.dim != want.dim) {
    throw ConfigError("encoder dimension " + std::to_string(have.dim) +
                      " does not match index dimension " + std::to_string(want.dim));
  }
  if (have.encoder_id != want.encoder_id) {
    throw ConfigError("encoder '" + have.encoder_id + "' differs from the index encoder '" +
                      want.encoder_id + "'");
  }

  const auto files = list_annotation_files(options.annotations_dir);
  PipelineReport report;
  report.images_seen = files.size();

  struct Slot {
    std::optional<IngestItem> item;
    bool duplicate = false;
    std::uint32_t skipped_empty = 0;
    std::vector<std::string> warnings;
  };

  constexpr std::size_t kBatch = 256;
  std::atomic<std::uint64_t> processed{0};
  for (std::size_t start = 0; start < files.size(); start += kBatch) {
    const std::size_t end = std::min(files.size(), start + kBatch);
    std::vector<Slot> slots(end - start);

    auto work_one = [&](std::size_t i) {
      Slot& slot = slots[i - start];
      try {
        const auto ann = read_annotation(files[i]);
        const std::string image_path = locate_image(options.images_dir, ann);
        const auto bytes = codec::read_file(image_path);
        const auto hash = ContentHash::of(bytes);
        if (index.contains_hash(hash)) {
          slot.duplicate = true;
          return;
        }
        ++processed;
        const PixelBuffer image = image_io::decode(bytes);
        auto extracted = extract_objects(image, ann);
        slot.skipped_empty = extracted.skipped_empty;
        slot.warnings = std::move(extracted.warnings);

        IngestItem item;
        item.image.image_id = ann.image_id;
        item.image.source_uri = fs::absolute(image_path).string();
        item.image.content_hash = hash;
        for (std::size_t j = 0; j < extracted.objects.size(); ++j) {
          const auto& obj = extracted.objects[j];
          const auto index_j = static_cast<std::uint32_t>(j);
          auto emb = embedder.embed_object(ann, obj, index_j);
          if (!emb) {
            slot.warnings.push_back(ann.image_id + "/" + std::to_string(j) +
                                    ": no embedding available; object skipped");
            continue;
          }
          item.objects.push_back(ObjectRecord{ann.image_id, index_j, obj.cls, obj.bbox,
                                              obj.confidence, std::move(*emb)});
        }
        item.image.object_count = static_cast<std::uint32_t>(item.objects.size());
        if (options.with_full_image) {
          item.image.full_image_embedding = embedder.embed_full(ann, image);
          if (!item.image.full_image_embedding) {
            slot.warnings.push_back(ann.image_id + ": no full-image embedding available");
          }
        }
        slot.item = std::move(item);
      } catch (const ConfigError&) {
        throw;
      } catch (const TransportError&) {
        throw;
      } catch (const Error& e) {
        slot.warnings.push_back(e.what());
      }
    };

    const unsigned workers = std::max(1u, options.workers);
    if (workers == 1) {
      for (std::size_t i = start; i < end; ++i) work_one(i);
    } else {
      std::atomic<std::size_t> next{start};
      std::exception_ptr failure;
      std::mutex failure_mu;
      {
        std::vector<std::jthread> pool;
        for (unsigned w = 0; w < workers; ++w) {
          pool.emplace_back([&] {
            for (std::size_t i; (i = next.fetch_add(1)) < end;) {
              try {
                work_one(i);
              } catch (...) {
                std::lock_guard lock(failure_mu);
                if (!failure) failure = std::current_exception();
              }
            }
          });
        }
      }
      if (failure) std::rethrow_exception(failure);
    }

    std::vector<IngestItem> items;
    for (auto& slot : slots) {
      if (slot.duplicate) ++report.ingest.skipped_duplicates;
      report.skipped_empty_masks += slot.skipped_empty;
      for (auto& w : slot.warnings) {
        ++report.ingest.warnings;
        report.ingest.messages.push_back(std::move(w));
      }
      if (slot.item) items.push_back(std::move(*slot.item));
    }
    report.ingest += index.ingest(items);
  }
  report.images_processed = processed.load();
  return report;
}

}  // namespace objsearch
