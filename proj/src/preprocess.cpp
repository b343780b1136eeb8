#include "objsearch/preprocess.hpp"

#include <algorithm>
#include <limits>
#include <unordered_map>

#include <nlohmann/json.hpp>

#include "objsearch/codec.hpp"

namespace objsearch {

using nlohmann::json;

PixelBuffer::PixelBuffer(std::uint32_t width, std::uint32_t height)
    : width_(width),
      height_(height),
      data_(static_cast<std::size_t>(width) * height * kChannels, 0) {
  if (width == 0 || height == 0) {
    throw InputError("pixel buffer dimensions must be positive");
  }
}

PixelBuffer::PixelBuffer(std::uint32_t width, std::uint32_t height,
                         std::vector<std::uint8_t> data)
    : width_(width), height_(height), data_(std::move(data)) {
  if (width == 0 || height == 0) {
    throw InputError("pixel buffer dimensions must be positive");
  }
  if (data_.size() != static_cast<std::size_t>(width) * height * kChannels) {
    throw InputError("pixel buffer length does not match width*height*3");
  }
}

InstanceMap::InstanceMap(std::uint32_t width, std::uint32_t height,
                         std::vector<std::uint32_t> ids)
    : width_(width), height_(height), ids_(std::move(ids)) {
  if (ids_.size() != static_cast<std::size_t>(width) * height) {
    throw InputError("instance map length does not match width*height");
  }
}

void PanopticAnnotation::validate() const {
  std::unordered_map<std::uint32_t, int> declared;
  for (const auto& inst : instances) {
    if (inst.id == 0) throw InputError("instance id 0 is reserved");
    if (inst.confidence && (*inst.confidence < 0.0f || *inst.confidence > 1.0f)) {
      throw InputError("instance confidence outside [0, 1]");
    }
    if (++declared[inst.id] > 1) {
      throw InputError("instance id " + std::to_string(inst.id) +
                       " declared more than once");
    }
  }
  for (std::uint32_t id : instance_map.ids()) {
    if (id != 0 && !declared.contains(id)) {
      throw InputError("instance map references undeclared id " +
                       std::to_string(id));
    }
  }
}

PanopticAnnotation PanopticAnnotation::from_json(std::string_view text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw InputError(std::string("annotation is not valid JSON: ") + e.what());
  }
  try {
    PanopticAnnotation ann;
    ann.image_id = doc.at("image_id").get<std::string>();
    const auto width = doc.at("width").get<std::uint32_t>();
    const auto height = doc.at("height").get<std::uint32_t>();
    const auto raw =
        codec::base64_decode(doc.at("instance_map").get<std::string>());
    const std::size_t cells = static_cast<std::size_t>(width) * height;
    if (raw.size() != cells * 4) {
      throw InputError("instance_map has " + std::to_string(raw.size()) +
                       " bytes, expected " + std::to_string(cells * 4));
    }
    std::vector<std::uint32_t> ids(cells);
    for (std::size_t i = 0; i < cells; ++i) {
      ids[i] = static_cast<std::uint32_t>(raw[4 * i]) |
               static_cast<std::uint32_t>(raw[4 * i + 1]) << 8 |
               static_cast<std::uint32_t>(raw[4 * i + 2]) << 16 |
               static_cast<std::uint32_t>(raw[4 * i + 3]) << 24;
    }
    ann.instance_map = InstanceMap(width, height, std::move(ids));
    for (const auto& inst : doc.at("instances")) {
      InstanceInfo info;
      info.id = inst.at("id").get<std::uint32_t>();
      info.cls = ClassLabel(inst.at("class").get<std::string>());
      if (inst.contains("confidence") && !inst["confidence"].is_null()) {
        info.confidence = inst["confidence"].get<float>();
      }
      if (inst.contains("tokens")) {
        info.tokens = inst["tokens"].get<std::vector<std::string>>();
      }
      ann.instances.push_back(std::move(info));
    }
    if (doc.contains("image_tokens")) {
      ann.image_tokens = doc["image_tokens"].get<std::vector<std::string>>();
    }
    if (doc.contains("file")) ann.file = doc["file"].get<std::string>();
    ann.validate();
    return ann;
  } catch (const json::exception& e) {
    throw InputError(std::string("malformed annotation: ") + e.what());
  }
}

std::string PanopticAnnotation::to_json() const {
  std::vector<std::uint8_t> raw;
  raw.reserve(instance_map.ids().size() * 4);
  for (std::uint32_t id : instance_map.ids()) {
    for (int s = 0; s < 32; s += 8) raw.push_back(static_cast<std::uint8_t>(id >> s));
  }
  json doc;
  doc["image_id"] = image_id;
  doc["width"] = instance_map.width();
  doc["height"] = instance_map.height();
  doc["instance_map"] = codec::base64_encode(raw);
  doc["instances"] = json::array();
  for (const auto& inst : instances) {
    json j{{"id", inst.id}, {"class", inst.cls.name()}};
    j["confidence"] = inst.confidence ? json(*inst.confidence) : json(nullptr);
    if (!inst.tokens.empty()) j["tokens"] = inst.tokens;
    doc["instances"].push_back(std::move(j));
  }
  if (!image_tokens.empty()) doc["image_tokens"] = image_tokens;
  if (!file.empty()) doc["file"] = file;
  return doc.dump();
}

PixelBuffer apply_mask(const PixelBuffer& image, const InstanceMap& map,
                       std::uint32_t instance_id) {
  if (instance_id == 0) throw InputError("instance id 0 is reserved");
  if (map.width() != image.width() || map.height() != image.height()) {
    throw InputError("instance map dimensions do not match the image");
  }
  PixelBuffer out(image.width(), image.height());
  const auto ids = map.ids();
  const auto src = image.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] != instance_id) continue;
    for (std::size_t c = 0; c < PixelBuffer::kChannels; ++c) {
      dst[i * PixelBuffer::kChannels + c] = src[i * PixelBuffer::kChannels + c];
    }
  }
  return out;
}

BoundingBox tight_bbox(const InstanceMap& map, std::uint32_t instance_id) {
  std::uint32_t x0 = std::numeric_limits<std::uint32_t>::max(), y0 = x0;
  std::uint32_t x1 = 0, y1 = 0;
  bool found = false;
  for (std::uint32_t y = 0; y < map.height(); ++y) {
    for (std::uint32_t x = 0; x < map.width(); ++x) {
      if (map.at(x, y) != instance_id) continue;
      found = true;
      x0 = std::min(x0, x);
      y0 = std::min(y0, y);
      x1 = std::max(x1, x);
      y1 = std::max(y1, y);
    }
  }
  if (!found) {
    throw EmptyMaskError("instance " + std::to_string(instance_id) +
                         " has an empty mask");
  }
  return {x0, y0, x1 - x0 + 1, y1 - y0 + 1};
}

PixelBuffer crop(const PixelBuffer& image, const BoundingBox& box) {
  if (box.width == 0 || box.height == 0 ||
      box.x + box.width > image.width() || box.y + box.height > image.height()) {
    throw InputError("bounding box does not lie inside the image");
  }
  PixelBuffer out(box.width, box.height);
  const std::size_t row_bytes = std::size_t{box.width} * PixelBuffer::kChannels;
  for (std::uint32_t y = 0; y < box.height; ++y) {
    std::copy_n(image.pixel(box.x, box.y + y), row_bytes, out.pixel(0, y));
  }
  return out;
}

PixelBuffer pad_to_square(const PixelBuffer& image) {
  if (image.square()) return image;
  const std::uint32_t side = std::max(image.width(), image.height());
  const std::uint32_t left = (side - image.width()) / 2;
  const std::uint32_t top = (side - image.height()) / 2;
  PixelBuffer out(side, side);
  const std::size_t row_bytes =
      std::size_t{image.width()} * PixelBuffer::kChannels;
  for (std::uint32_t y = 0; y < image.height(); ++y) {
    std::copy_n(image.pixel(0, y), row_bytes, out.pixel(left, top + y));
  }
  return out;
}

ExtractionResult extract_objects(const PixelBuffer& image,
                                 const PanopticAnnotation& ann) {
  const auto& map = ann.instance_map;
  if (map.width() != image.width() || map.height() != image.height()) {
    throw InputError("annotation for '" + ann.image_id + "' is " +
                     std::to_string(map.width()) + "x" +
                     std::to_string(map.height()) + " but the image is " +
                     std::to_string(image.width()) + "x" +
                     std::to_string(image.height()));
  }
  std::vector<const InstanceInfo*> order;
  order.reserve(ann.instances.size());
  for (const auto& inst : ann.instances) order.push_back(&inst);
  std::sort(order.begin(), order.end(),
            [](const auto* a, const auto* b) { return a->id < b->id; });

  ExtractionResult result;
  for (const auto* inst : order) {
    BoundingBox box;
    try {
      box = tight_bbox(map, inst->id);
    } catch (const EmptyMaskError& e) {
      ++result.skipped_empty;
      result.warnings.push_back(ann.image_id + ": " + e.what());
      continue;
    }
    PixelBuffer masked = apply_mask(image, map, inst->id);
    result.objects.push_back(ExtractedObject{
        inst->id, pad_to_square(crop(masked, box)), inst->cls, box,
        inst->confidence});
  }
  return result;
}

}  // namespace objsearch
