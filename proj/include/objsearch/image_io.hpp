#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "objsearch/preprocess.hpp"

namespace objsearch::image_io {

/// Decodes PNG (any bit depth / color type, converted to RGB8) or binary PPM
/// (P6, maxval 255). Format is detected from the leading bytes.
PixelBuffer decode(std::span<const std::uint8_t> bytes);

std::vector<std::uint8_t> encode_png(const PixelBuffer& image);
std::vector<std::uint8_t> encode_ppm(const PixelBuffer& image);

/// MIME type guessed from the leading bytes.
std::string mime_type(std::span<const std::uint8_t> bytes);

}  // namespace objsearch::image_io
