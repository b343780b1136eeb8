#include "objsearch/image_io.hpp"

#include <algorithm>
#include <cctype>
#include <cstring>
#include <string_view>

#include <png.h>

namespace objsearch::image_io {

namespace {

constexpr std::uint8_t kPngSignature[8] = {0x89, 'P', 'N', 'G',
                                           0x0D, 0x0A, 0x1A, 0x0A};

bool is_png(std::span<const std::uint8_t> b) {
  return b.size() >= 8 && std::equal(b.begin(), b.begin() + 8, kPngSignature);
}

bool is_ppm(std::span<const std::uint8_t> b) {
  return b.size() >= 2 && b[0] == 'P' && b[1] == '6';
}

PixelBuffer decode_png(std::span<const std::uint8_t> bytes) {
  png_image img;
  std::memset(&img, 0, sizeof(img));
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&img, bytes.data(), bytes.size())) {
    throw InputError(std::string("PNG decode failed: ") + img.message);
  }
  img.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> data(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, data.data(), 0, nullptr)) {
    std::string msg = img.message;
    png_image_free(&img);
    throw InputError("PNG decode failed: " + msg);
  }
  return PixelBuffer(img.width, img.height, std::move(data));
}

PixelBuffer decode_ppm(std::span<const std::uint8_t> bytes) {
  std::size_t pos = 2;
  auto next_number = [&]() -> std::uint32_t {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
    std::uint64_t v = 0;
    std::size_t digits = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      v = v * 10 + (bytes[pos++] - '0');
      if (++digits > 9) throw InputError("PPM header value too large");
    }
    if (digits == 0) throw InputError("malformed PPM header");
    return static_cast<std::uint32_t>(v);
  };
  const std::uint32_t w = next_number();
  const std::uint32_t h = next_number();
  const std::uint32_t maxval = next_number();
  if (maxval != 255) throw InputError("only 8-bit PPM is supported");
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) {
    throw InputError("malformed PPM header");
  }
  ++pos;
  const std::size_t need = std::size_t{w} * h * 3;
  if (bytes.size() - pos < need) throw InputError("truncated PPM data");
  return PixelBuffer(w, h,
                     std::vector<std::uint8_t>(bytes.begin() + pos,
                                               bytes.begin() + pos + need));
}

}  // namespace

PixelBuffer decode(std::span<const std::uint8_t> bytes) {
  if (is_png(bytes)) return decode_png(bytes);
  if (is_ppm(bytes)) return decode_ppm(bytes);
  throw InputError("unsupported image format (expected PNG or binary PPM)");
}

std::vector<std::uint8_t> encode_png(const PixelBuffer& image) {
  png_image img;
  std::memset(&img, 0, sizeof(img));
  img.version = PNG_IMAGE_VERSION;
  img.width = image.width();
  img.height = image.height();
  img.format = PNG_FORMAT_RGB;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&img, nullptr, &size, 0, image.data().data(),
                                 0, nullptr)) {
    throw Error(std::string("PNG encode failed: ") + img.message);
  }
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&img, out.data(), &size, 0,
                                 image.data().data(), 0, nullptr)) {
    throw Error(std::string("PNG encode failed: ") + img.message);
  }
  out.resize(size);
  return out;
}

std::vector<std::uint8_t> encode_ppm(const PixelBuffer& image) {
  const std::string header = "P6\n" + std::to_string(image.width()) + " " +
                             std::to_string(image.height()) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), image.data().begin(), image.data().end());
  return out;
}

std::string mime_type(std::span<const std::uint8_t> bytes) {
  if (is_png(bytes)) return "image/png";
  if (is_ppm(bytes)) return "image/x-portable-pixmap";
  if (bytes.size() >= 3 && bytes[0] == 0xFF && bytes[1] == 0xD8) {
    return "image/jpeg";
  }
  return "application/octet-stream";
}

}  // namespace objsearch::image_io
