#include "cli.hpp"

#include <unistd.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <memory>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "objsearch/codec.hpp"
#include "objsearch/encoder.hpp"
#include "objsearch/eval.hpp"
#include "objsearch/index.hpp"
#include "objsearch/pipeline.hpp"
#include "objsearch/retrieval.hpp"
#include "objsearch/service.hpp"

namespace objsearch::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

bool use_color(std::ostream& out) {
  return &out == &std::cout && std::getenv("NO_COLOR") == nullptr && ::isatty(STDOUT_FILENO);
}

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

// Text encoder for queries against `index`: an explicit spec wins, else the
// toy encoder when the index was built with it.
std::unique_ptr<Encoder> query_encoder(const std::string& spec, const Index& index) {
  if (!spec.empty()) return make_encoder(spec, index.encoder().dim);
  if (index.encoder().encoder_id == ToyEncoder::kEncoderId) {
    return std::make_unique<ToyEncoder>(index.encoder().dim);
  }
  throw ConfigError("index was built with encoder '" + index.encoder().encoder_id +
                    "'; pass --encoder remote:URL to encode queries");
}

void print_report(const PipelineReport& r, const std::string& format, std::ostream& out) {
  if (format == "json") {
    out << json{{"added_images", r.ingest.added_images},
                {"skipped_duplicates", r.ingest.skipped_duplicates},
                {"added_objects", r.ingest.added_objects},
                {"warnings", r.ingest.warnings},
                {"images_seen", r.images_seen},
                {"images_processed", r.images_processed},
                {"skipped_empty_masks", r.skipped_empty_masks}}
               .dump()
        << "\n";
    return;
  }
  out << "added_images: " << r.ingest.added_images << "\n"
      << "skipped_duplicates: " << r.ingest.skipped_duplicates << "\n"
      << "added_objects: " << r.ingest.added_objects << "\n"
      << "warnings: " << r.ingest.warnings << "\n"
      << "images_processed: " << r.images_processed << "\n";
}

struct IngestArgs {
  std::string images, annotations, encoder = "toy", index, classes, encoder_id, format = "text";
  bool with_full_image = false;
  std::uint32_t dim = kDefaultDim;
  unsigned workers = 1;
  bool verbose = false;
};

int cmd_ingest(const IngestArgs& a, std::ostream& out, std::ostream& err) {
  std::unique_ptr<Encoder> encoder;
  std::unique_ptr<PrecomputedEncoder> precomputed;
  std::unique_ptr<ObjectEmbedder> embedder;
  if (a.encoder.starts_with("file:")) {
    auto file = EmbeddingFile::read(a.encoder.substr(5));
    precomputed = std::make_unique<PrecomputedEncoder>(
        std::move(file), a.encoder_id.empty() ? "precomputed" : a.encoder_id);
    embedder = std::make_unique<PrecomputedEmbedder>(*precomputed);
  } else {
    encoder = make_encoder(a.encoder, a.dim);
    embedder = std::make_unique<EncoderEmbedder>(*encoder);
  }
  const EncoderDescriptor& desc = embedder->descriptor();

  const bool exists = fs::exists(fs::path(a.index) / "manifest.json");
  Index index = exists ? Index::load(a.index)
                       : Index(desc, a.classes.empty()
                                         ? collect_classes(a.annotations)
                                         : ClassSet([&] {
                                             std::vector<ClassLabel> v;
                                             for (auto& n : split_csv(a.classes)) v.emplace_back(n);
                                             return v;
                                           }()));
  PipelineOptions opts{a.images, a.annotations, a.with_full_image, a.workers};
  const auto report = ingest_directory(index, *embedder, opts);
  index.persist(a.index);
  print_report(report, a.format, out);
  if (a.verbose) {
    for (const auto& m : report.ingest.messages) err << "warning: " << m << "\n";
  }
  return kOk;
}

struct SearchArgs {
  std::string index, cls, query, mode = "object", format = "table", encoder;
  long k = 10;
  float min_confidence = 0.0f;
};

int cmd_search(const SearchArgs& a, std::ostream& out, std::ostream& err) {
  const Index index = Index::load(a.index);
  const auto encoder = query_encoder(a.encoder, index);
  const Retriever retriever(index, *encoder);
  const SearchMode mode = search_mode_from_string(a.mode);
  if (a.k < 0) throw InputError("--k must be non-negative");

  QueryResult result;
  try {
    const Query q = Query::make(ClassLabel(a.cls), a.query);
    result = retriever.run_query(q, static_cast<std::size_t>(a.k), mode,
                                 SearchOptions{a.min_confidence});
  } catch (const QueryError& e) {
    err << "error: " << e.what() << "\n";
    return kQueryError;
  } catch (const InputError& e) {
    err << "error: " << e.what() << "\n";
    return kQueryError;
  } catch (const CapabilityError& e) {
    err << "error: " << e.what() << "\n";
    return kQueryError;
  }

  if (a.format == "json") {
    out << search_results_json(index, result.results).dump() << "\n";
  } else {
    const bool csv = a.format == "csv";
    if (csv) {
      out << "rank,image_id,score,best_object_index,bbox_x,bbox_y,bbox_w,bbox_h\n";
    } else {
      const bool color = use_color(out);
      out << (color ? "\033[1m" : "") << std::left << std::setw(6) << "rank" << std::setw(24)
          << "image_id" << std::setw(12) << "score" << std::setw(8) << "object"
          << "bbox" << (color ? "\033[0m" : "") << "\n";
    }
    std::size_t rank = 0;
    for (const auto& r : result.results) {
      ++rank;
      std::optional<StoredObject> obj;
      if (r.best_object_index) obj = index.object(r.image_id, *r.best_object_index);
      std::ostringstream score;
      score << std::setprecision(17) << r.score;
      if (csv) {
        out << rank << "," << r.image_id << "," << score.str() << ",";
        if (r.best_object_index) out << *r.best_object_index;
        if (obj) {
          out << "," << obj->bbox.x << "," << obj->bbox.y << "," << obj->bbox.width << ","
              << obj->bbox.height;
        } else {
          out << ",,,,";
        }
        out << "\n";
      } else {
        out << std::left << std::setw(6) << rank << std::setw(24) << r.image_id
            << std::setw(12) << std::fixed << std::setprecision(6) << r.score
            << std::defaultfloat << std::setw(8)
            << (r.best_object_index ? std::to_string(*r.best_object_index) : "-");
        if (obj) {
          out << obj->bbox.x << "," << obj->bbox.y << "," << obj->bbox.width << "x"
              << obj->bbox.height;
        }
        out << "\n";
      }
    }
  }
  if (result.exhausted && a.k > 0) {
    err << "exhausted: " << result.results.size() << " of " << a.k
        << " requested results matched\n";
  }
  return kOk;
}

struct CurveArgs {
  std::string index, judgments, query_id, cls, query, mode = "object", encoder;
  long n = 100;
};

int cmd_eval_curve(const CurveArgs& a, std::ostream& out, std::ostream& err) {
  if (a.n <= 0) throw InputError("--n must be positive");
  std::string cls = a.cls, text = a.query, mode = a.mode;
  if (cls.empty() || text.empty()) {
    const eval::QueryRegistry registry(eval::QueryRegistry::sidecar_path(a.judgments));
    const auto q = registry.find(a.query_id);
    if (!q) {
      err << "error: query id '" << a.query_id
          << "' is not registered; pass --class and --query\n";
      return kQueryError;
    }
    cls = q->cls;
    text = q->text;
    mode = q->mode;
  } else if (eval::query_id(cls, text, mode) != a.query_id) {
    err << "warning: --query-id does not match the id of (" << cls << ", " << text << ", "
        << mode << ")\n";
  }

  const Index index = Index::load(a.index);
  const auto encoder = query_encoder(a.encoder, index);
  const Retriever retriever(index, *encoder);
  QueryResult result;
  try {
    result = retriever.run_query(Query::make(ClassLabel(cls), text),
                                 static_cast<std::size_t>(a.n), search_mode_from_string(mode));
  } catch (const QueryError& e) {
    err << "error: " << e.what() << "\n";
    return kQueryError;
  }
  std::vector<std::string> ranked;
  for (const auto& r : result.results) ranked.push_back(r.image_id);
  const eval::JudgmentJournal journal(a.judgments);
  out << eval::curve_csv(eval::cumulative_tp_curve(ranked, journal.verdicts(a.query_id),
                                                   static_cast<std::size_t>(a.n)));
  return kOk;
}

struct ClassifyArgs {
  std::string embeddings, labels, template_pattern = "{label}", truth, encoder = "toy";
  bool verbose = false;
};

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open '" + path + "'");
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) {
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
    if (!line.empty()) lines.push_back(line);
  }
  return lines;
}

int cmd_eval_classify(const ClassifyArgs& a, std::ostream& out, std::ostream& err) {
  const auto file = EmbeddingFile::read(a.embeddings);
  const auto labels = read_lines(a.labels);
  const eval::PromptTemplate prompt(a.template_pattern);
  const auto encoder = make_encoder(a.encoder, file.dim());

  std::map<std::string, std::string> truth_by_key;
  if (!a.truth.empty()) {
    for (const auto& line : read_lines(a.truth)) {
      const auto comma = line.rfind(',');
      if (comma == std::string::npos) throw InputError("truth line without comma: " + line);
      truth_by_key[line.substr(0, comma)] = line.substr(comma + 1);
    }
  }
  std::vector<EmbeddingVector> items;
  std::vector<std::size_t> truth;
  std::vector<std::string> keys;
  for (const auto& [key, values] : file.entries()) {
    std::string label;
    if (!a.truth.empty()) {
      auto it = truth_by_key.find(key);
      if (it == truth_by_key.end()) throw InputError("no truth label for '" + key + "'");
      label = it->second;
    } else {
      label = key.substr(0, key.find('/'));
    }
    const auto pos = std::find(labels.begin(), labels.end(), label);
    if (pos == labels.end()) throw InputError("truth label '" + label + "' is not in the label file");
    items.push_back(EmbeddingVector::from_raw(std::span<const float>(values)));
    truth.push_back(static_cast<std::size_t>(pos - labels.begin()));
    keys.push_back(key);
  }
  const auto result = eval::zero_shot_classify(items, labels, prompt, *encoder, truth);
  if (a.verbose) {
    for (std::size_t i = 0; i < keys.size(); ++i) {
      err << keys[i] << " -> " << labels[result.assigned[i]] << "\n";
    }
  }
  out << "template: " << prompt.pattern() << "\n"
      << "items: " << items.size() << "\n"
      << "accuracy: " << std::fixed << std::setprecision(4) << result.accuracy.value_or(0.0)
      << "\n";
  return kOk;
}

struct ServeArgs {
  std::string index, encoder, annotations, journal, static_dir, token, host = "127.0.0.1";
  int port = 8080;
  bool toy_mode = false;
  unsigned threads = 8;
};

int cmd_serve(const ServeArgs& a, std::ostream& out, std::ostream& /*err*/) {
  const Index index = Index::load(a.index);
  const std::string spec = a.toy_mode ? std::string("toy") : a.encoder;
  const auto encoder = query_encoder(spec, index);
  ServiceConfig cfg;
  cfg.host = a.host;
  cfg.port = a.port;
  cfg.annotations_dir = a.annotations;
  cfg.journal_path = a.journal;
  cfg.static_dir = a.static_dir;
  cfg.bearer_token = a.token;
  cfg.toy_mode = encoder->descriptor().encoder_id == ToyEncoder::kEncoderId;
  cfg.threads = a.threads;
  Service service(index, *encoder, cfg);
  const int port = service.bind();
  out << "listening on http://" << a.host << ":" << port << "/v1\n" << std::flush;
  service.listen();
  return kOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Object-level image search: ingest, search, evaluate, serve"};
  app.require_subcommand(1);

  IngestArgs ia;
  auto* ingest = app.add_subcommand("ingest", "Preprocess, encode and index a dataset");
  ingest->add_option("--images", ia.images, "Image directory")->required();
  ingest->add_option("--annotations", ia.annotations, "Panoptic annotation directory")->required();
  ingest->add_option("--encoder", ia.encoder, "toy | remote:URL | file:PATH")->default_val("toy");
  ingest->add_option("--index", ia.index, "Index directory")->required();
  ingest->add_flag("--with-full-image", ia.with_full_image, "Also store full-image embeddings");
  ingest->add_option("--dim", ia.dim, "Embedding dimension for toy/remote encoders")
      ->default_val(kDefaultDim);
  ingest->add_option("--classes", ia.classes,
                     "Comma-separated class set for a new index (default: from annotations)");
  ingest->add_option("--encoder-id", ia.encoder_id, "Encoder id recorded for file: embeddings");
  ingest->add_option("--workers", ia.workers, "Parallel preprocessing workers")->default_val(1);
  ingest->add_option("--format", ia.format, "text | json")->check(CLI::IsMember({"text", "json"}));
  ingest->add_flag("-v,--verbose", ia.verbose, "Print warnings");

  SearchArgs sa;
  auto* search = app.add_subcommand("search", "Rank images for a (class, text) query");
  search->add_option("--index", sa.index, "Index directory")->required();
  search->add_option("--class", sa.cls, "Object class")->required();
  search->add_option("--query", sa.query, "Free-text description")->required();
  search->add_option("--k", sa.k, "Number of images")->default_val(10);
  search->add_option("--mode", sa.mode, "object | full")->check(CLI::IsMember({"object", "full"}));
  search->add_option("--format", sa.format, "json | table | csv")
      ->check(CLI::IsMember({"json", "table", "csv"}));
  search->add_option("--encoder", sa.encoder, "Query encoder: toy | remote:URL");
  search->add_option("--min-confidence", sa.min_confidence, "Skip objects below this confidence");

  auto* evalc = app.add_subcommand("eval", "Evaluation harness");
  evalc->require_subcommand(1);
  CurveArgs ca;
  auto* curve = evalc->add_subcommand("curve", "Cumulative true-positive curve as CSV");
  curve->add_option("--index", ca.index, "Index directory")->required();
  curve->add_option("--judgments", ca.judgments, "Judgment journal (JSONL)")->required();
  curve->add_option("--query-id", ca.query_id, "Query id")->required();
  curve->add_option("--n", ca.n, "Curve length")->default_val(100);
  curve->add_option("--class", ca.cls, "Query class (default: from the query registry)");
  curve->add_option("--query", ca.query, "Query text (default: from the query registry)");
  curve->add_option("--mode", ca.mode, "object | full")->check(CLI::IsMember({"object", "full"}));
  curve->add_option("--encoder", ca.encoder, "Query encoder: toy | remote:URL");

  ClassifyArgs cla;
  auto* classify = evalc->add_subcommand("classify", "Zero-shot classification accuracy");
  classify->add_option("--embeddings", cla.embeddings, "Precomputed embedding file")->required();
  classify->add_option("--labels", cla.labels, "Label file, one per line")->required();
  classify->add_option("--template", cla.template_pattern, "Prompt template with {label}")
      ->default_val("{label}");
  classify->add_option("--truth", cla.truth,
                       "CSV key,label (default: label is the key prefix before '/')");
  classify->add_option("--encoder", cla.encoder, "Text encoder: toy | remote:URL")
      ->default_val("toy");
  classify->add_flag("-v,--verbose", cla.verbose, "Print per-item assignments");

  ServeArgs va;
  auto* serve = app.add_subcommand("serve", "Run the HTTP service");
  serve->add_option("--index", va.index, "Index directory")->required()->envname("OBJSEARCH_INDEX");
  serve->add_option("--port", va.port, "Port")->default_val(8080)->envname("OBJSEARCH_PORT");
  serve->add_option("--host", va.host, "Bind address")->default_val("127.0.0.1");
  serve->add_option("--encoder", va.encoder, "Query encoder: toy | remote:URL")
      ->envname("OBJSEARCH_ENCODER");
  serve->add_flag("--toy", va.toy_mode, "Use the toy encoder")->envname("OBJSEARCH_TOY_MODE");
  serve->add_option("--annotations", va.annotations, "Annotation directory for crops");
  serve->add_option("--journal", va.journal, "Judgment journal (JSONL)")
      ->envname("OBJSEARCH_JOURNAL");
  serve->add_option("--static", va.static_dir, "Static UI assets directory");
  serve->add_option("--token", va.token, "Bearer token")->envname("OBJSEARCH_TOKEN");
  serve->add_option("--threads", va.threads, "Request threads")->default_val(8);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    if (const auto* sub = app.get_subcommands().empty() ? nullptr : app.get_subcommands().back()) {
      err << sub->help();
    }
    return kIoOrConfig;
  }

  try {
    if (ingest->parsed()) return cmd_ingest(ia, out, err);
    if (search->parsed()) return cmd_search(sa, out, err);
    if (curve->parsed()) return cmd_eval_curve(ca, out, err);
    if (classify->parsed()) return cmd_eval_classify(cla, out, err);
    if (serve->parsed()) return cmd_serve(va, out, err);
  } catch (const QueryError& e) {
    err << "error: " << e.what() << "\n";
    return kQueryError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kIoOrConfig;
  }
  return kIoOrConfig;
}

}  // namespace objsearch::cli
