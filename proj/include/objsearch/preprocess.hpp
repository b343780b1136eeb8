#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "objsearch/core.hpp"

namespace objsearch {

/// Row-major RGB8 raster.
class PixelBuffer {
 public:
  static constexpr std::uint32_t kChannels = 3;

  PixelBuffer() = default;
  /// All-black buffer.
  PixelBuffer(std::uint32_t width, std::uint32_t height);
  PixelBuffer(std::uint32_t width, std::uint32_t height,
              std::vector<std::uint8_t> data);

  std::uint32_t width() const noexcept { return width_; }
  std::uint32_t height() const noexcept { return height_; }
  bool square() const noexcept { return width_ == height_; }
  std::span<const std::uint8_t> data() const noexcept { return data_; }
  std::span<std::uint8_t> data() noexcept { return data_; }

  const std::uint8_t* pixel(std::uint32_t x, std::uint32_t y) const noexcept {
    return data_.data() + (static_cast<std::size_t>(y) * width_ + x) * kChannels;
  }
  std::uint8_t* pixel(std::uint32_t x, std::uint32_t y) noexcept {
    return data_.data() + (static_cast<std::size_t>(y) * width_ + x) * kChannels;
  }
  bool is_black(std::uint32_t x, std::uint32_t y) const noexcept {
    const auto* p = pixel(x, y);
    return p[0] == 0 && p[1] == 0 && p[2] == 0;
  }

  friend bool operator==(const PixelBuffer&, const PixelBuffer&) = default;

 private:
  std::uint32_t width_ = 0;
  std::uint32_t height_ = 0;
  std::vector<std::uint8_t> data_;
};

/// Row-major 32-bit instance ids; 0 marks "no instance".
class InstanceMap {
 public:
  InstanceMap() = default;
  InstanceMap(std::uint32_t width, std::uint32_t height,
              std::vector<std::uint32_t> ids);

  std::uint32_t width() const noexcept { return width_; }
  std::uint32_t height() const noexcept { return height_; }
  std::uint32_t at(std::uint32_t x, std::uint32_t y) const noexcept {
    return ids_[static_cast<std::size_t>(y) * width_ + x];
  }
  std::span<const std::uint32_t> ids() const noexcept { return ids_; }

 private:
  std::uint32_t width_ = 0;
  std::uint32_t height_ = 0;
  std::vector<std::uint32_t> ids_;
};

struct InstanceInfo {
  std::uint32_t id = 0;
  ClassLabel cls;
  std::optional<float> confidence;
  /// Optional synthetic content tokens (used by the toy encoder in test
  /// corpora in place of pixels).
  std::vector<std::string> tokens;
};

/// Output of an external panoptic segmenter for one image.
struct PanopticAnnotation {
  std::string image_id;
  InstanceMap instance_map;
  std::vector<InstanceInfo> instances;
  /// Optional synthetic tokens describing the whole image.
  std::vector<std::string> image_tokens;
  /// Optional explicit image file name relative to the images directory.
  std::string file;

  /// Checks that every nonzero id in the map appears exactly once in
  /// `instances`. Throws InputError otherwise.
  void validate() const;

  static PanopticAnnotation from_json(std::string_view text);
  std::string to_json() const;
};

struct ExtractedObject {
  std::uint32_t instance_id = 0;
  PixelBuffer crop;
  ClassLabel cls;
  BoundingBox bbox;
  std::optional<float> confidence;
};

struct ExtractionResult {
  std::vector<ExtractedObject> objects;
  std::uint32_t skipped_empty = 0;
  std::vector<std::string> warnings;
};

/// Copies pixels belonging to `instance_id`; everything else becomes black.
PixelBuffer apply_mask(const PixelBuffer& image, const InstanceMap& map,
                       std::uint32_t instance_id);

/// Minimal box containing every pixel of the instance. EmptyMaskError if the
/// instance has no pixel.
BoundingBox tight_bbox(const InstanceMap& map, std::uint32_t instance_id);

PixelBuffer crop(const PixelBuffer& image, const BoundingBox& box);

/// Zero-pads to a square of side max(w, h) with the content centered; odd
/// padding puts the extra row/column at the bottom/right.
PixelBuffer pad_to_square(const PixelBuffer& image);

/// mask -> bbox -> crop -> pad for every annotated instance, in ascending
/// instance id order. The position in the result is the object index.
ExtractionResult extract_objects(const PixelBuffer& image,
                                 const PanopticAnnotation& ann);

}  // namespace objsearch
