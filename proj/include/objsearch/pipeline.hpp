#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "objsearch/encoder.hpp"
#include "objsearch/index.hpp"
#include "objsearch/preprocess.hpp"

namespace objsearch {

/// Produces stored embeddings for extracted objects and full images.
/// Returning nullopt skips the object (counted as a warning).
class ObjectEmbedder {
 public:
  virtual ~ObjectEmbedder() = default;
  virtual const EncoderDescriptor& descriptor() const = 0;
  virtual std::optional<EmbeddingVector> embed_object(
      const PanopticAnnotation& ann, const ExtractedObject& obj,
      std::uint32_t object_index) const = 0;
  virtual std::optional<EmbeddingVector> embed_full(
      const PanopticAnnotation& ann, const PixelBuffer& image) const = 0;
};

/// Encodes crops with an Encoder. With the toy encoder, instances that
/// carry synthetic tokens are encoded from their tokens instead of pixels.
class EncoderEmbedder final : public ObjectEmbedder {
 public:
  explicit EncoderEmbedder(const Encoder& encoder) : encoder_(encoder) {}
  const EncoderDescriptor& descriptor() const override {
    return encoder_.descriptor();
  }
  std::optional<EmbeddingVector> embed_object(
      const PanopticAnnotation& ann, const ExtractedObject& obj,
      std::uint32_t object_index) const override;
  std::optional<EmbeddingVector> embed_full(
      const PanopticAnnotation& ann, const PixelBuffer& image) const override;

 private:
  const Encoder& encoder_;
};

/// Looks embeddings up by "image_id/object_index" and "image_id/full".
class PrecomputedEmbedder final : public ObjectEmbedder {
 public:
  explicit PrecomputedEmbedder(const PrecomputedEncoder& source)
      : source_(source) {}
  const EncoderDescriptor& descriptor() const override {
    return source_.descriptor();
  }
  std::optional<EmbeddingVector> embed_object(
      const PanopticAnnotation& ann, const ExtractedObject& obj,
      std::uint32_t object_index) const override;
  std::optional<EmbeddingVector> embed_full(
      const PanopticAnnotation& ann, const PixelBuffer& image) const override;

 private:
  const PrecomputedEncoder& source_;
};

struct PipelineOptions {
  std::string images_dir;
  std::string annotations_dir;
  bool with_full_image = false;
  unsigned workers = 1;
};

struct PipelineReport {
  IngestReport ingest;
  std::uint64_t images_seen = 0;
  /// Images that went through preprocessing and encoding. Images whose
  /// content hash is already stored are not processed.
  std::uint64_t images_processed = 0;
  std::uint64_t skipped_empty_masks = 0;
};

/// Annotation files (*.json) of a directory in name order.
std::vector<std::string> list_annotation_files(const std::string& dir);

/// Union of the classes declared by all annotations in `dir`.
ClassSet collect_classes(const std::string& annotations_dir);

/// Resolves the image file of an annotation: its "file" field, else
/// <image_id>.png or <image_id>.ppm inside `images_dir`.
std::string locate_image(const std::string& images_dir,
                         const PanopticAnnotation& ann);

/// preprocess -> encode -> index.ingest for every annotation in the
/// directory. Already stored images (by content hash) are skipped before any
/// decoding or encoding happens.
PipelineReport ingest_directory(Index& index, const ObjectEmbedder& embedder,
                                const PipelineOptions& options);

}  // namespace objsearch
