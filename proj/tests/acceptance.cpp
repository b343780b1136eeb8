// Acceptance suite: one PASS/FAIL line per criterion. Exit status is the
// number of failed criteria (0 when all pass).
//
// Usage: objsearch_acceptance [criterion-name ...]   (default: all)

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <cstring>
#include <functional>
#include <set>
#include <sstream>
#include <thread>

#include "objsearch/codec.hpp"
#include "objsearch/encoder.hpp"
#include "objsearch/eval.hpp"
#include "objsearch/index.hpp"
#include "objsearch/pipeline.hpp"
#include "objsearch/preprocess.hpp"
#include "objsearch/retrieval.hpp"
#include "testkit.hpp"

using namespace objsearch;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  void fail(const std::string& why) {
    if (pass) detail.str("");
    pass = false;
    detail << why << "; ";
  }
};

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

// Gate soundness is checked alongside every search made by the other
// criteria and reported on its own line.
struct GateTally {
  std::uint64_t queries = 0;
  std::uint64_t results = 0;
  std::uint64_t wrong_class = 0;
  std::uint64_t over_scanned = 0;
} gate;

void check_gate(const Index& index, const ClassLabel& cls, const std::vector<RankedResult>& results,
                const SearchStats& stats) {
  ++gate.queries;
  std::uint64_t partition_rows = 0;
  for (const auto& p : index.stats().classes) {
    if (p.cls == cls) partition_rows = p.rows;
  }
  if (stats.rows_visited > partition_rows) ++gate.over_scanned;
  for (const auto& r : results) {
    ++gate.results;
    const auto obj = index.object(r.image_id, r.best_object_index.value_or(~0u));
    if (!obj || obj->cls != cls) ++gate.wrong_class;
  }
}

Index build(const testkit::RandomInstance& inst) {
  Index index(EncoderDescriptor{"random", inst.dim, Modality::both}, inst.classes);
  index.ingest(inst.items);
  return index;
}

// ---------------------------------------------------------------------------

void oracle_equivalence(Outcome& o) {
  const auto t0 = Clock::now();
  testkit::Rng rng(0xACC1);
  std::size_t queries = 0, instances = 0, ties = 0;
  for (int t = 0; t < 200; ++t) {
    const std::uint32_t d = t % 2 ? 64 : 8;
    // Every third instance uses coarse vectors, which tie often.
    const bool coarse = t % 3 == 0;
    const auto inst = testkit::random_instance(rng, d, 1000, 10, 1 + t % 5, coarse);
    const Index index = build(inst);
    ++instances;
    for (const auto& cls : inst.classes.labels()) {
      for (int rep = 0; rep < 2; ++rep) {
        const auto q = coarse ? testkit::coarse_unit(rng, d) : testkit::random_unit(rng, d);
        const std::size_t k = rep == 0 ? 1 + rng() % 100 : 100000;
        SearchStats stats;
        const auto got = index.search_topk_images(cls, q, k, {}, &stats);
        const auto want = testkit::oracle_images(inst.items, cls, q, k);
        check_gate(index, cls, got, stats);
        ++queries;
        for (std::size_t i = 1; i < want.size(); ++i) ties += want[i].score == want[i - 1].score;
        if (got != want) {
          o.fail("instance " + std::to_string(t) + " class " + cls.name() + " differs from oracle");
        }
      }
    }
  }
  const double secs = seconds_since(t0);
  if (secs >= 60.0) o.fail("took " + std::to_string(secs) + " s (limit 60 s)");
  o.detail << instances << " instances, " << queries << " queries, " << ties
           << " tied adjacent ranks, " << secs << " s";
}

// Pixel-by-pixel re-implementations used as the reference.
PixelBuffer ref_mask(const PixelBuffer& img, const InstanceMap& map, std::uint32_t id) {
  PixelBuffer out(img.width(), img.height());
  for (std::uint32_t y = 0; y < img.height(); ++y)
    for (std::uint32_t x = 0; x < img.width(); ++x)
      if (map.at(x, y) == id)
        for (int c = 0; c < 3; ++c) out.pixel(x, y)[c] = img.pixel(x, y)[c];
  return out;
}

std::optional<BoundingBox> ref_bbox(const InstanceMap& map, std::uint32_t id) {
  std::uint32_t x0 = ~0u, y0 = ~0u, x1 = 0, y1 = 0;
  bool any = false;
  for (std::uint32_t y = 0; y < map.height(); ++y)
    for (std::uint32_t x = 0; x < map.width(); ++x)
      if (map.at(x, y) == id) {
        any = true;
        x0 = std::min(x0, x), y0 = std::min(y0, y), x1 = std::max(x1, x), y1 = std::max(y1, y);
      }
  if (!any) return std::nullopt;
  return BoundingBox{x0, y0, x1 - x0 + 1, y1 - y0 + 1};
}

PixelBuffer ref_pad(const PixelBuffer& img) {
  const std::uint32_t side = std::max(img.width(), img.height());
  const std::uint32_t left = (side - img.width()) / 2, top = (side - img.height()) / 2;
  PixelBuffer out(side, side);
  for (std::uint32_t y = 0; y < img.height(); ++y)
    for (std::uint32_t x = 0; x < img.width(); ++x)
      for (int c = 0; c < 3; ++c) out.pixel(x + left, y + top)[c] = img.pixel(x, y)[c];
  return out;
}

void preprocessing_exactness(Outcome& o) {
  testkit::Rng rng(0xACC2);
  std::size_t masks = 0, empty = 0;
  for (int t = 0; t < 100; ++t) {
    const std::uint32_t w = 1 + rng() % 40, h = 1 + rng() % 40;
    const std::uint32_t n = 1 + rng() % 4;
    const auto img = testkit::random_image(rng, w, h);
    const auto map = testkit::random_map(rng, w, h, n);
    const std::uint32_t id = 1 + rng() % n;
    ++masks;

    const auto masked = apply_mask(img, map, id);
    if (masked != ref_mask(img, map, id)) o.fail("apply_mask differs on case " + std::to_string(t));

    const auto want_box = ref_bbox(map, id);
    if (!want_box) {
      ++empty;
      try {
        tight_bbox(map, id);
        o.fail("empty mask accepted on case " + std::to_string(t));
      } catch (const EmptyMaskError&) {
      }
      continue;
    }
    const auto box = tight_bbox(map, id);
    if (box != *want_box) o.fail("tight_bbox differs on case " + std::to_string(t));

    const auto cropped = crop(masked, box);
    const auto padded = pad_to_square(cropped);
    if (padded != ref_pad(cropped)) o.fail("pad_to_square differs on case " + std::to_string(t));
    if (pad_to_square(padded) != padded) o.fail("pad not idempotent on case " + std::to_string(t));

    // Content preservation: every non-black output pixel is the source pixel
    // at the translated coordinate, and the content keeps its shape.
    const std::uint32_t left = (padded.width() - cropped.width()) / 2;
    const std::uint32_t top = (padded.height() - cropped.height()) / 2;
    for (std::uint32_t y = 0; y < padded.height(); ++y) {
      for (std::uint32_t x = 0; x < padded.width(); ++x) {
        if (padded.is_black(x, y)) continue;
        const bool inside = x >= left && y >= top && x - left < cropped.width() && y - top < cropped.height();
        if (!inside || !std::equal(padded.pixel(x, y), padded.pixel(x, y) + 3,
                                   img.pixel(x - left + box.x, y - top + box.y))) {
          o.fail("content not preserved on case " + std::to_string(t));
        }
      }
    }
  }
  o.detail << masks << " random masks (" << empty << " empty)";
}

void planted_retrieval(Outcome& o) {
  const auto t0 = Clock::now();
  testkit::Rng rng(0xACC3);
  const std::uint32_t d = kDefaultDim;
  const ToyEncoder enc(d);
  const std::vector<std::string> vocab{"man",   "woman", "child", "walking", "standing", "red",
                                       "blue",  "black", "white", "sedan",   "truck",    "bus",
                                       "bike",  "sign",  "stop",  "light",   "tall",     "short",
                                       "young", "old",   "dark",  "bright",  "coat",     "hat"};
  const std::vector<std::string> classes{"person", "car", "traffic sign", "truck"};
  std::vector<ClassLabel> labels;
  for (const auto& c : classes) labels.emplace_back(c);
  Index index(enc.descriptor(), ClassSet(labels));

  constexpr int kImages = 5000, kPlanted = 20;
  std::set<std::string> planted;
  while (planted.size() < kPlanted) planted.insert("scene" + std::to_string(10000 + rng() % kImages));

  std::vector<IngestItem> items;
  for (int i = 0; i < kImages; ++i) {
    IngestItem item;
    item.image.image_id = "scene" + std::to_string(10000 + i);
    item.image.content_hash = testkit::hash_of(item.image.image_id);
    const bool plant = planted.contains(item.image.image_id);
    const std::uint32_t n = plant ? 1 + rng() % 8 : rng() % 9;
    const std::uint32_t planted_j = plant ? rng() % n : ~0u;
    for (std::uint32_t j = 0; j < n; ++j) {
      ObjectRecord obj;
      obj.image_id = item.image.image_id;
      obj.object_index = j;
      obj.bbox = {0, 0, 10, 10};
      SyntheticTokenImage tokens;
      if (j == planted_j) {
        obj.cls = ClassLabel("person");
        tokens.tokens = {"police"};
      } else {
        obj.cls = labels[rng() % labels.size()];
        const std::size_t count = 1 + rng() % 3;
        for (std::size_t c = 0; c < count; ++c) tokens.tokens.push_back(vocab[rng() % vocab.size()]);
      }
      obj.embedding = enc.encode_image(tokens);
      item.objects.push_back(std::move(obj));
    }
    item.image.object_count = n;
    items.push_back(std::move(item));
  }
  index.ingest(items);

  const Retriever retriever(index, enc);
  const auto res = retriever.run_query(Query::make(ClassLabel("person"), "police"), 100);
  check_gate(index, ClassLabel("person"), res.results, res.stats);
  std::size_t found = 0;
  double min_score = 1.0;
  for (std::size_t r = 0; r < std::min<std::size_t>(20, res.results.size()); ++r) {
    if (planted.contains(res.results[r].image_id)) {
      ++found;
      min_score = std::min(min_score, res.results[r].score);
    }
  }
  if (found != kPlanted) o.fail("only " + std::to_string(found) + " of 20 planted images in the top 20");
  if (min_score < 0.99) o.fail("planted score " + std::to_string(min_score) + " < 0.99");
  const double runner_up = res.results.size() > 20 ? res.results[20].score : -1.0;
  o.detail << found << "/20 planted in top 20, min planted score " << min_score
           << ", rank-21 score " << runner_up << ", " << index.stats().object_count << " objects, "
           << seconds_since(t0) << " s";
}

void persistence(Outcome& o) {
  testkit::Rng rng(0xACC5);
  const auto inst = testkit::random_instance(rng, 64, 1000, 10, 5, false);
  const Index index = build(inst);
  const auto dir = testkit::temp_dir("acceptance-persist");
  index.persist(dir);
  const Index loaded = Index::load(dir);

  std::size_t equal = 0;
  for (int t = 0; t < 100; ++t) {
    const auto& cls = inst.classes.labels()[rng() % inst.classes.size()];
    const auto q = testkit::random_unit(rng, 64);
    const std::size_t k = 1 + rng() % 200;
    SearchStats stats;
    const auto a = index.search_topk_images(cls, q, k);
    const auto b = loaded.search_topk_images(cls, q, k, {}, &stats);
    check_gate(loaded, cls, b, stats);
    // Bitwise: compare score bit patterns, not just values.
    bool same = a.size() == b.size();
    for (std::size_t i = 0; same && i < a.size(); ++i) {
      same = a[i].image_id == b[i].image_id && a[i].best_object_index == b[i].best_object_index &&
             std::memcmp(&a[i].score, &b[i].score, sizeof(double)) == 0;
    }
    equal += same;
  }
  if (equal != 100) o.fail(std::to_string(100 - equal) + " of 100 queries changed after reload");

  std::size_t files = 0, corruptions = 0, detected = 0;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.path().extension() != ".solp") continue;
    ++files;
    const auto original = codec::read_file(e.path().string());
    for (int c = 0; c < 8; ++c) {
      auto bytes = original;
      const std::size_t pos = c == 0 ? 0 : rng() % bytes.size();
      bytes[pos] ^= static_cast<std::uint8_t>(1 + rng() % 255);
      codec::write_file(e.path().string(), bytes);
      ++corruptions;
      try {
        Index::load(dir);
        o.fail("corruption at byte " + std::to_string(pos) + " of " + e.path().filename().string() +
               " not detected");
      } catch (const FormatError&) {
        ++detected;
      }
    }
    codec::write_file(e.path().string(), original);
  }
  o.detail << equal << "/100 queries bitwise equal; " << detected << "/" << corruptions
           << " single-byte corruptions detected across " << files << " partition files";
}

void incremental_ingestion(Outcome& o) {
  const auto root = testkit::temp_dir("acceptance-incremental");
  auto make = [](int from, int to) {
    std::vector<testkit::SyntheticImage> v;
    for (int i = from; i < to; ++i) {
      v.push_back({"shot" + std::to_string(i), {{"person", {"man"}}, {"car", {"car", "red"}}}, {}});
    }
    return v;
  };
  testkit::write_dataset(root + "/img", root + "/ann", make(0, 50));
  const ToyEncoder enc(64);
  const EncoderEmbedder embedder(enc);
  Index index(enc.descriptor(), collect_classes(root + "/ann"));
  const PipelineOptions opts{root + "/img", root + "/ann", false, 2};

  const auto first = ingest_directory(index, embedder, opts);
  const auto again = ingest_directory(index, embedder, opts);
  testkit::write_dataset(root + "/img", root + "/ann", make(50, 60));
  const auto more = ingest_directory(index, embedder, opts);

  if (first.ingest.added_images != 50) o.fail("first run added " + std::to_string(first.ingest.added_images));
  if (again.ingest.added_images != 0) o.fail("re-ingest added " + std::to_string(again.ingest.added_images));
  if (again.images_processed != 0) o.fail("re-ingest processed " + std::to_string(again.images_processed));
  if (more.images_processed != 10) o.fail("adding 10 processed " + std::to_string(more.images_processed));
  if (more.ingest.added_images != 10) o.fail("adding 10 added " + std::to_string(more.ingest.added_images));
  o.detail << "first run added " << first.ingest.added_images << "; re-ingest added "
           << again.ingest.added_images << " (processed " << again.images_processed << ", skipped "
           << again.ingest.skipped_duplicates << "); adding 10 processed " << more.images_processed;
}

void eval_harness(Outcome& o) {
  testkit::Rng rng(0xACC7);
  std::size_t curves_ok = 0;
  for (int t = 0; t < 1000; ++t) {
    const std::size_t n = 1 + rng() % 200;
    std::vector<std::string> ranked;
    eval::VerdictMap vm;
    std::vector<std::uint32_t> prefix;
    std::uint32_t running = 0;
    for (std::size_t i = 0; i < n; ++i) {
      ranked.push_back("r" + std::to_string(i));
      const auto v = static_cast<eval::Verdict>(rng() % 3);
      vm[ranked.back()] = v;
      running += v == eval::Verdict::true_positive;
      prefix.push_back(running);
    }
    curves_ok += eval::cumulative_tp_curve(ranked, vm, n) == prefix;
  }
  if (curves_ok != 1000) o.fail(std::to_string(1000 - curves_ok) + " curves differ from prefix sums");

  const ToyEncoder enc(kDefaultDim);
  const std::vector<std::string> labels{"sedan",   "coupe",        "convertible", "minivan",
                                        "pickup",  "station wagon", "hatchback",   "suv",
                                        "cab",     "van"};
  std::vector<EmbeddingVector> items;
  std::vector<std::size_t> truth;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    items.push_back(enc.encode_image(SyntheticTokenImage{ToyEncoder::tokenize(labels[i])}));
    truth.push_back(i);
  }
  const auto r = eval::zero_shot_classify(items, labels, eval::PromptTemplate("{label}"), enc, truth);
  if (r.accuracy != 1.0) o.fail("zero-shot accuracy " + std::to_string(r.accuracy.value_or(0)));

  std::size_t invariant = 0;
  for (int t = 0; t < 100; ++t) {
    std::vector<EmbeddingVector> text, scaled;
    std::uniform_real_distribution<double> alpha(1e-3, 1e3);
    for (const auto& l : labels) {
      const auto v = enc.encode_text("a photo of a " + l);
      text.push_back(v);
      std::vector<double> s(v.values().begin(), v.values().end());
      const double a = alpha(rng);
      for (auto& x : s) x *= a;
      scaled.push_back(EmbeddingVector::from_raw(std::span<const double>(s)));
    }
    std::vector<EmbeddingVector> probe;
    for (int i = 0; i < 50; ++i) probe.push_back(testkit::random_unit(rng, kDefaultDim));
    invariant += eval::classify(probe, text).assigned == eval::classify(probe, scaled).assigned;
  }
  if (invariant != 100) o.fail("argmax changed under scaling in " + std::to_string(100 - invariant) + " trials");
  o.detail << curves_ok << "/1000 curves equal prefix sums; zero-shot accuracy "
           << r.accuracy.value_or(0) << " on " << items.size() << " label items; argmax invariant in "
           << invariant << "/100 scaling trials";
}

void performance(Outcome& o) {
  constexpr std::size_t kObjects = 1'000'000, kPerImage = 5;
  constexpr std::uint32_t kDim = 512;
  const auto t0 = Clock::now();
  Index index(EncoderDescriptor{"random", kDim, Modality::both}, ClassSet({ClassLabel("car")}));

  // Cheap uniform components; the scan cost does not depend on the values.
  std::uint64_t state = 0xACC8;
  auto next = [&state] {
    std::uint64_t z = (state += 0x9E3779B97F4A7C15ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  };
  std::vector<float> raw(kDim);
  auto random_vec = [&] {
    for (auto& x : raw) x = static_cast<float>(static_cast<double>(next() >> 11) * 0x1.0p-53 * 2.0 - 1.0);
    return EmbeddingVector::from_raw(std::span<const float>(raw));
  };

  constexpr std::size_t kImagesPerBatch = 10000;
  for (std::size_t start = 0; start < kObjects / kPerImage; start += kImagesPerBatch) {
    std::vector<IngestItem> batch;
    for (std::size_t i = start; i < start + kImagesPerBatch; ++i) {
      IngestItem item;
      item.image.image_id = "p" + std::to_string(i);
      item.image.content_hash = testkit::hash_of(item.image.image_id);
      for (std::uint32_t j = 0; j < kPerImage; ++j) {
        item.objects.push_back(ObjectRecord{item.image.image_id, j, ClassLabel("car"), {0, 0, 1, 1},
                                            std::nullopt, random_vec()});
      }
      item.image.object_count = kPerImage;
      batch.push_back(std::move(item));
    }
    index.ingest(batch);
  }
  const double build_s = seconds_since(t0);

  std::vector<double> ms;
  const auto warm = random_vec();
  index.search_topk_images(ClassLabel("car"), warm, 100);
  for (int t = 0; t < 10; ++t) {
    const auto q = random_vec();
    SearchStats stats;
    const auto t1 = Clock::now();
    const auto r = index.search_topk_images(ClassLabel("car"), q, 100, {}, &stats);
    ms.push_back(seconds_since(t1) * 1000.0);
    check_gate(index, ClassLabel("car"), r, stats);
    if (r.size() != 100) o.fail("returned " + std::to_string(r.size()) + " results");
  }
  std::sort(ms.begin(), ms.end());
  const double median = ms[ms.size() / 2];
  if (median >= 250.0) o.fail("median " + std::to_string(median) + " ms >= 250 ms");
  o.detail << "measured top-100 over " << index.stats().object_count << " objects, d=" << kDim
           << ": median " << median << " ms, min " << ms.front() << " ms, max " << ms.back()
           << " ms (10 queries, " << std::thread::hardware_concurrency()
           << " hardware threads; build " << build_s << " s)";
}

void class_gate(Outcome& o) {
  if (gate.queries == 0) o.fail("no searches recorded");
  if (gate.wrong_class) o.fail(std::to_string(gate.wrong_class) + " results of another class");
  if (gate.over_scanned) o.fail(std::to_string(gate.over_scanned) + " searches visited more rows than the partition");
  o.detail << gate.results << " results over " << gate.queries << " searches, " << gate.wrong_class
           << " with a foreign class, " << gate.over_scanned << " scans beyond the partition";
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<void(Outcome&)>>> criteria{
      {"oracle_equivalence", oracle_equivalence},
      {"preprocessing_exactness", preprocessing_exactness},
      {"planted_object_retrieval", planted_retrieval},
      {"persistence", persistence},
      {"incremental_ingestion", incremental_ingestion},
      {"eval_harness", eval_harness},
      {"performance_budget", performance},
      // Last: aggregates the searches made above.
      {"class_gate_soundness", class_gate},
  };
  std::set<std::string> only(argv + 1, argv + argc);

  int failed = 0;
  for (const auto& [name, fn] : criteria) {
    if (!only.empty() && !only.contains(name)) continue;
    Outcome o;
    try {
      fn(o);
    } catch (const std::exception& e) {
      o.fail(std::string("exception: ") + e.what());
    }
    std::string detail = o.detail.str();
    while (!detail.empty() && (detail.back() == ' ' || detail.back() == ';')) detail.pop_back();
    std::printf("%s %s: %s\n", o.pass ? "PASS" : "FAIL", name.c_str(), detail.c_str());
    std::fflush(stdout);
    failed += !o.pass;
  }
  return failed;
}
