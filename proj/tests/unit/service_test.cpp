#include <gtest/gtest.h>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "objsearch/image_io.hpp"
#include "objsearch/pipeline.hpp"
#include "objsearch/service.hpp"
#include "testkit.hpp"

using namespace objsearch;
using nlohmann::json;

namespace {

struct Server {
  std::string root = testkit::temp_dir("service");
  ToyEncoder encoder{32};
  Index index{encoder.descriptor(), ClassSet({ClassLabel("car"), ClassLabel("person")})};
  std::unique_ptr<Service> service;
  int port = 0;

  explicit Server(std::string token = {}) {
    std::vector<testkit::SyntheticImage> images;
    for (int i = 0; i < 6; ++i) {
      images.push_back({"img" + std::to_string(i),
                        {{"person", {"person", i % 2 ? "tall" : "small"}}, {"car", {"car"}}},
                        {"street"}});
    }
    testkit::write_dataset(root + "/images", root + "/annotations", images);
    const EncoderEmbedder embedder(encoder);
    ingest_directory(index, embedder, PipelineOptions{root + "/images", root + "/annotations", false, 1});
    ServiceConfig cfg;
    cfg.port = 0;
    cfg.annotations_dir = root + "/annotations";
    cfg.journal_path = root + "/judgments.jsonl";
    cfg.toy_mode = true;
    cfg.bearer_token = std::move(token);
    cfg.threads = 2;
    service = std::make_unique<Service>(index, encoder, cfg);
    port = service->start();
  }
  ~Server() { service->stop(); }

  httplib::Client client() const { return httplib::Client("127.0.0.1", port); }
};

Server& shared() {
  static Server s;
  return s;
}

httplib::Result search(const json& body) {
  return shared().client().Post("/v1/search", body.dump(), "application/json");
}

}  // namespace

TEST(Service, Healthz) {
  auto res = shared().client().Get("/v1/healthz");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 200);
  const auto j = json::parse(res->body);
  EXPECT_EQ(j["status"], "ok");
  EXPECT_EQ(j["encoder_id"], "toy-hash-v1");
  EXPECT_EQ(j["toy_mode"], true);
  EXPECT_TRUE(j["index_version"].get<std::string>().starts_with("1@"));
}

TEST(Service, Classes) {
  auto res = shared().client().Get("/v1/classes");
  ASSERT_TRUE(res);
  const auto j = json::parse(res->body);
  ASSERT_EQ(j["classes"].size(), 2u);
  EXPECT_EQ(j["classes"][0]["class"], "car");
  EXPECT_EQ(j["classes"][0]["count"], 6);
  EXPECT_EQ(j["image_count"], 6);
}

TEST(Service, SearchReturnsRankedResults) {
  auto res = search({{"class", "person"}, {"text", "tall person"}, {"k", 4}});
  ASSERT_TRUE(res);
  ASSERT_EQ(res->status, 200);
  const auto j = json::parse(res->body);
  ASSERT_EQ(j.size(), 4u);
  for (std::size_t i = 1; i < j.size(); ++i) {
    EXPECT_GE(j[i - 1]["score"].get<double>(), j[i]["score"].get<double>());
  }
  EXPECT_EQ(j[0]["best_object_index"], 0);
  EXPECT_EQ(j[0]["bbox"], json::array({0, 0, 12, 2}));
  EXPECT_EQ(res->get_header_value("X-Exhausted"), "false");
  EXPECT_EQ(res->get_header_value("X-Query-Id").size(), 16u);
}

TEST(Service, UnknownClassIs400ListingClasses) {
  auto res = search({{"class", "animal"}, {"text", "dog"}, {"k", 4}});
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 400);
  const auto j = json::parse(res->body);
  EXPECT_EQ(j["valid_classes"], json::array({"car", "person"}));
  EXPECT_NE(j["error"].get<std::string>().find("animal"), std::string::npos);
}

TEST(Service, KZeroIsEmpty) {
  auto res = search({{"class", "car"}, {"text", "car"}, {"k", 0}});
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 200);
  EXPECT_EQ(res->body, "[]");
}

TEST(Service, BadRequests) {
  EXPECT_EQ(search({{"class", "car"}})->status, 400);
  EXPECT_EQ(search({{"class", "car"}, {"text", "car"}, {"k", -1}})->status, 400);
  EXPECT_EQ(search({{"class", "car"}, {"text", "car"}, {"mode", "full"}})->status, 400);
  EXPECT_EQ(shared().client().Post("/v1/search", "{", "application/json")->status, 400);
}

TEST(Service, SearchIsByteIdentical) {
  const json body{{"class", "person"}, {"text", "small person street"}, {"k", 6}};
  const auto first = search(body)->body;
  for (int i = 0; i < 5; ++i) EXPECT_EQ(search(body)->body, first);
}

TEST(Service, JudgmentsDriveCurves) {
  auto res = search({{"class", "person"}, {"text", "tall"}, {"k", 3}});
  ASSERT_EQ(res->status, 200);
  const auto id = res->get_header_value("X-Query-Id");
  const auto ranked = json::parse(res->body);
  const char* verdicts[] = {"true_positive", "false_positive", "true_positive"};
  for (int i = 0; i < 3; ++i) {
    const json j{{"query_id", id}, {"image_id", ranked[i]["image_id"]}, {"verdict", verdicts[i]},
                 {"judge", "t"}};
    EXPECT_EQ(shared().client().Post("/v1/judgments", j.dump(), "application/json")->status, 201);
  }
  auto curve = shared().client().Get("/v1/curves?query_id=" + id + "&n=3");
  ASSERT_TRUE(curve);
  ASSERT_EQ(curve->status, 200);
  EXPECT_EQ(json::parse(curve->body)["curve"], json::array({1, 1, 2}));

  EXPECT_EQ(shared().client().Get("/v1/curves?query_id=ffffffffffffffff&n=3")->status, 404);
  EXPECT_EQ(shared().client().Get("/v1/curves?query_id=" + id + "&n=0")->status, 400);
  EXPECT_EQ(shared().client().Post("/v1/judgments", R"({"query_id":"q"})", "application/json")->status,
            400);
}

TEST(Service, ImagesAndCrops) {
  auto cli = shared().client();
  auto res = cli.Get("/v1/images/img1");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 200);
  EXPECT_EQ(res->get_header_value("Content-Type"), "image/png");

  res = cli.Get("/v1/images/img1/objects/1");
  ASSERT_EQ(res->status, 200);
  const auto crop = image_io::decode(
      std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(res->body.data()), res->body.size()));
  EXPECT_EQ(crop.width(), 12u);
  EXPECT_EQ(crop.height(), 12u);
  // Cached second fetch returns the same bytes.
  EXPECT_EQ(cli.Get("/v1/images/img1/objects/1")->body, res->body);

  EXPECT_EQ(cli.Get("/v1/images/nope")->status, 404);
  EXPECT_EQ(cli.Get("/v1/images/img1/objects/9")->status, 404);
  EXPECT_EQ(cli.Get("/v1/images/nope/objects/0")->status, 404);
}

TEST(Service, Metrics) {
  search({{"class", "car"}, {"text", "car"}, {"k", 2}});
  auto res = shared().client().Get("/v1/metrics");
  ASSERT_TRUE(res);
  EXPECT_NE(res->body.find("objsearch_search_requests_total "), std::string::npos);
  EXPECT_NE(res->body.find("objsearch_scan_rows_total "), std::string::npos);
  EXPECT_NE(res->body.find("objsearch_index_objects 12"), std::string::npos);
}

TEST(Service, BearerToken) {
  Server s("secret");
  auto cli = s.client();
  EXPECT_EQ(cli.Get("/v1/healthz")->status, 200);
  EXPECT_EQ(cli.Get("/v1/classes")->status, 401);
  httplib::Headers h{{"Authorization", "Bearer secret"}};
  EXPECT_EQ(cli.Get("/v1/classes", h)->status, 200);
}
