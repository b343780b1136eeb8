#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "objsearch/pipeline.hpp"
#include "objsearch/retrieval.hpp"
#include "testkit.hpp"

using namespace objsearch;
namespace fs = std::filesystem;

namespace {

const std::vector<std::string> kFiller = {"red",  "blue",  "tall", "small", "walking",
                                          "dark", "green", "old",  "young", "shiny"};

// Corpus where exactly one person carries the "police" token.
std::vector<testkit::SyntheticImage> corpus(std::size_t images) {
  std::vector<testkit::SyntheticImage> out;
  for (std::size_t i = 0; i < images; ++i) {
    testkit::SyntheticImage img;
    img.image_id = "frame" + std::to_string(1000 + i);
    img.objects.push_back({"person", {kFiller[i % kFiller.size()], "person"}});
    img.objects.push_back({"car", {kFiller[(i + 3) % kFiller.size()], "car"}});
    img.image_tokens = {"street", kFiller[i % kFiller.size()]};
    out.push_back(img);
  }
  if (out.size() > 7) out[7].objects[0].tokens = {"police"};
  return out;
}

struct Fixture {
  std::string images, annotations;
  Index index{EncoderDescriptor{std::string(ToyEncoder::kEncoderId), 64, Modality::both},
              ClassSet({ClassLabel("car"), ClassLabel("person")})};
  ToyEncoder encoder{64};
};

Fixture& fixture() {
  static Fixture f = [] {
    Fixture f;
    const auto root = testkit::temp_dir("retrieval");
    f.images = root + "/images";
    f.annotations = root + "/annotations";
    testkit::write_dataset(f.images, f.annotations, corpus(40));
    EncoderEmbedder embedder(f.encoder);
    ingest_directory(f.index, embedder, PipelineOptions{f.images, f.annotations, true, 2});
    return f;
  }();
  return f;
}

}  // namespace

TEST(Retriever, PlantedObjectRanksFirst) {
  auto& f = fixture();
  const Retriever r(f.index, f.encoder);
  const auto res = r.run_query(Query::make(ClassLabel("person"), "police"), 10);
  ASSERT_EQ(res.results.size(), 10u);
  EXPECT_EQ(res.results[0].image_id, "frame1007");
  EXPECT_NEAR(res.results[0].score, 1.0, 1e-6);
  EXPECT_EQ(res.results[0].best_object_index, 0u);
  EXPECT_FALSE(res.exhausted);
  EXPECT_GT(res.stats.rows_visited, 0u);
}

TEST(Retriever, UnknownClassIsQueryError) {
  auto& f = fixture();
  const Retriever r(f.index, f.encoder);
  EXPECT_THROW(r.run_query(Query::make(ClassLabel("animal"), "dog"), 10), QueryError);
}

TEST(Retriever, ExhaustedWhenFewerMatches) {
  auto& f = fixture();
  const Retriever r(f.index, f.encoder);
  const auto res = r.run_query(Query::make(ClassLabel("car"), "red car"), 1000);
  EXPECT_EQ(res.results.size(), 40u);
  EXPECT_TRUE(res.exhausted);
  EXPECT_TRUE(r.run_query(Query::make(ClassLabel("car"), "red car"), 0).results.empty());
}

TEST(Retriever, FullImageModeSkipsClassGate) {
  auto& f = fixture();
  const Retriever r(f.index, f.encoder);
  const auto res = r.run_query(Query::make(ClassLabel("animal"), "street red"), 3,
                               SearchMode::full_image);
  ASSERT_EQ(res.results.size(), 3u);
  EXPECT_NEAR(res.results[0].score, 1.0, 1e-6);
  EXPECT_FALSE(res.results[0].best_object_index);
}

TEST(Retriever, Deterministic) {
  auto& f = fixture();
  const Retriever r(f.index, f.encoder);
  const auto q = Query::make(ClassLabel("person"), "young person");
  EXPECT_EQ(r.run_query(q, 15).results, r.run_query(q, 15).results);
}

TEST(Retriever, EncoderDimensionMustMatch) {
  auto& f = fixture();
  const ToyEncoder other(32);
  EXPECT_THROW(Retriever(f.index, other), ConfigError);
}

TEST(SearchMode, Names) {
  EXPECT_EQ(search_mode_from_string("object"), SearchMode::object_level);
  EXPECT_EQ(search_mode_from_string("full_image"), SearchMode::full_image);
  EXPECT_EQ(to_string(SearchMode::full_image), "full");
  EXPECT_THROW(search_mode_from_string("fuzzy"), InputError);
}

TEST(Pipeline, ReingestProcessesOnlyNewImages) {
  const auto root = testkit::temp_dir("pipeline");
  auto images = corpus(12);
  std::vector<testkit::SyntheticImage> first(images.begin(), images.begin() + 8);
  testkit::write_dataset(root + "/img", root + "/ann", first);

  const ToyEncoder enc(16);
  const EncoderEmbedder embedder(enc);
  Index index(enc.descriptor(), collect_classes(root + "/ann"));
  const PipelineOptions opts{root + "/img", root + "/ann", false, 1};
  auto r = ingest_directory(index, embedder, opts);
  EXPECT_EQ(r.ingest.added_images, 8u);
  EXPECT_EQ(r.images_processed, 8u);
  EXPECT_EQ(r.ingest.added_objects, 16u);

  r = ingest_directory(index, embedder, opts);
  EXPECT_EQ(r.ingest.added_images, 0u);
  EXPECT_EQ(r.images_processed, 0u);
  EXPECT_EQ(r.ingest.skipped_duplicates, 8u);

  testkit::write_dataset(root + "/img", root + "/ann",
                         std::vector<testkit::SyntheticImage>(images.begin() + 8, images.end()));
  r = ingest_directory(index, embedder, opts);
  EXPECT_EQ(r.images_processed, 4u);
  EXPECT_EQ(r.ingest.added_images, 4u);
}

TEST(Pipeline, EncoderMismatchIsConfigError) {
  auto& f = fixture();
  const ToyEncoder other(32);
  const EncoderEmbedder embedder(other);
  EXPECT_THROW(ingest_directory(f.index, embedder, PipelineOptions{f.images, f.annotations, false, 1}),
               ConfigError);
}

TEST(Pipeline, BadAnnotationBecomesWarning) {
  const auto root = testkit::temp_dir("pipeline-bad");
  testkit::write_dataset(root + "/img", root + "/ann", corpus(2));
  std::ofstream(root + "/ann/broken.json") << "{";
  const ToyEncoder enc(16);
  const EncoderEmbedder embedder(enc);
  Index index(enc.descriptor(), ClassSet({ClassLabel("car"), ClassLabel("person")}));
  const auto r = ingest_directory(index, embedder, PipelineOptions{root + "/img", root + "/ann", false, 1});
  EXPECT_EQ(r.ingest.added_images, 2u);
  EXPECT_GE(r.ingest.warnings, 1u);
}
