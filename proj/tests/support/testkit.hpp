#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "objsearch/core.hpp"
#include "objsearch/index.hpp"
#include "objsearch/preprocess.hpp"

namespace testkit {

using Rng = std::mt19937_64;

/// Random unit vector with components drawn from N(0, 1).
objsearch::EmbeddingVector random_unit(Rng& rng, std::uint32_t dim);

/// Random unit vector built from small integer components, so that a
/// collection of them contains exact duplicates (and therefore exact ties).
objsearch::EmbeddingVector coarse_unit(Rng& rng, std::uint32_t dim);

struct RandomInstance {
  std::uint32_t dim = 8;
  objsearch::ClassSet classes;
  std::vector<objsearch::IngestItem> items;
};

/// Random corpus: up to `max_images` images with 0..`max_objects` objects
/// each, classes drawn from `class_count` labels. When `coarse` is set the
/// embeddings come from coarse_unit() and ties are common.
RandomInstance random_instance(Rng& rng, std::uint32_t dim, std::size_t max_images,
                               std::size_t max_objects, std::size_t class_count, bool coarse);

objsearch::ContentHash hash_of(const std::string& s);

/// Brute-force ranking written from the scoring rules alone: every object
/// of every image is scored, a class mismatch scores -infinity, each image
/// takes its best object (smallest object index on ties), images scoring
/// -infinity are dropped and the rest are fully sorted.
std::vector<objsearch::RankedResult> oracle_images(const std::vector<objsearch::IngestItem>& items,
                                                   const objsearch::ClassLabel& cls,
                                                   const objsearch::EmbeddingVector& q,
                                                   std::size_t k);

std::vector<objsearch::ScoredObject> oracle_objects(const std::vector<objsearch::IngestItem>& items,
                                                    const objsearch::ClassLabel& cls,
                                                    const objsearch::EmbeddingVector& q,
                                                    std::size_t k);

std::vector<objsearch::RankedResult> oracle_full_images(
    const std::vector<objsearch::IngestItem>& items, const objsearch::EmbeddingVector& q,
    std::size_t k);

/// Random RGB image with no pure-black pixels.
objsearch::PixelBuffer random_image(Rng& rng, std::uint32_t width, std::uint32_t height);

/// Random instance map with ids 0..`instances`, made of random rectangles
/// painted over each other (later ones win), so some ids may vanish.
objsearch::InstanceMap random_map(Rng& rng, std::uint32_t width, std::uint32_t height,
                                  std::uint32_t instances);

struct SyntheticObject {
  std::string cls;
  std::vector<std::string> tokens;
};

struct SyntheticImage {
  std::string image_id;
  std::vector<SyntheticObject> objects;
  std::vector<std::string> image_tokens;
};

/// Writes `<images>/<id>.png` and `<annotations>/<id>.json` for each image.
/// Objects are laid out as horizontal bands so every instance is non-empty.
/// Pixel content is seeded from the image id, so rewriting the same image
/// yields the same bytes.
void write_dataset(const std::string& images_dir, const std::string& annotations_dir,
                   const std::vector<SyntheticImage>& images);

/// Fresh empty directory under the system temp dir.
std::string temp_dir(const std::string& name);

}  // namespace testkit
