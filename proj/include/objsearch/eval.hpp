#pragma once

#include <cstdint>
#include <map>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "objsearch/core.hpp"
#include "objsearch/encoder.hpp"

namespace objsearch::eval {

/// Pattern with exactly one "{label}" placeholder, e.g. "a photo of a {label}".
class PromptTemplate {
 public:
  static constexpr std::string_view kPlaceholder = "{label}";

  explicit PromptTemplate(std::string pattern);

  std::string apply(std::string_view label) const;
  const std::string& pattern() const noexcept { return pattern_; }

 private:
  std::string pattern_;
  std::size_t at_ = 0;
};

struct ClassificationResult {
  std::vector<std::size_t> assigned;  // label index per item
  std::optional<double> accuracy;     // present when truth was given
};

/// Assigns each item the label with the highest cosine similarity; ties go
/// to the lowest label index.
ClassificationResult classify(std::span<const EmbeddingVector> items,
                              std::span<const EmbeddingVector> label_embeddings,
                              std::span<const std::size_t> truth = {});

/// Zero-shot classification: each label is rendered through `prompt`, encoded
/// once, and items are assigned by `classify`.
ClassificationResult zero_shot_classify(std::span<const EmbeddingVector> items,
                                        std::span<const std::string> labels,
                                        const PromptTemplate& prompt,
                                        const Encoder& encoder,
                                        std::span<const std::size_t> truth = {});

enum class Verdict { true_positive, false_positive, unjudged };

std::string_view to_string(Verdict v) noexcept;
Verdict verdict_from_string(std::string_view s);

struct Judgment {
  std::string query_id;
  std::string image_id;
  Verdict verdict = Verdict::unjudged;
  std::string judge;
  std::string ts;

  std::string to_json() const;
  static Judgment from_json(std::string_view line);
};

/// image_id -> verdict for one query.
using VerdictMap = std::map<std::string, Verdict, std::less<>>;

/// Append-only JSON-lines journal of judgments, replayed into a
/// last-write-wins map keyed by (query_id, image_id). Appends are serialized.
class JudgmentJournal {
 public:
  /// Opens (creating if needed) and replays the journal at `path`. An empty
  /// path keeps the journal in memory only.
  explicit JudgmentJournal(std::string path = {});

  void append(Judgment j);
  VerdictMap verdicts(std::string_view query_id) const;
  std::size_t size() const;

 private:
  std::string path_;
  mutable std::mutex mu_;
  std::map<std::string, VerdictMap, std::less<>> by_query_;
  std::size_t records_ = 0;
};

using Curve = std::vector<std::uint32_t>;

/// Element t-1 is the number of true positives among the first t ranked
/// images. Unjudged images never count.
Curve cumulative_tp_curve(std::span<const std::string> ranked,
                          const VerdictMap& verdicts, std::size_t n);

std::string curve_csv(const Curve& curve);

/// Method name -> curve, for one query.
using CurveSet = std::map<std::string, Curve, std::less<>>;

struct MethodComparison {
  std::string method;
  /// reference[t] - method[t], one row per query.
  std::vector<std::vector<std::int64_t>> deltas;
  std::vector<std::int64_t> final_deltas;
  double mean_final_difference = 0.0;
};

struct ComparisonReport {
  std::string reference;
  std::vector<MethodComparison> methods;
};

/// Compares every method against `reference` over a set of queries. All
/// curves of a query must have equal length and every query must contain
/// every method.
ComparisonReport compare_methods(std::span<const CurveSet> queries,
                                 std::string_view reference);

/// Stable id for a (class, text, mode) query: 16 hex digits of SHA-256.
std::string query_id(std::string_view cls, std::string_view text,
                     std::string_view mode);

struct RegisteredQuery {
  std::string query_id;
  std::string cls;
  std::string text;
  std::string mode;
};

/// query_id -> query parameters, so a ranking can be recomputed from an id.
/// Persisted as JSON lines {"query_id","class","text","mode"} next to the
/// judgment journal (<journal>.queries.jsonl).
class QueryRegistry {
 public:
  explicit QueryRegistry(std::string path = {});

  static std::string sidecar_path(std::string_view journal_path);

  /// Registers the query (idempotent) and returns its id.
  std::string add(std::string_view cls, std::string_view text, std::string_view mode);
  std::optional<RegisteredQuery> find(std::string_view query_id) const;

 private:
  std::string path_;
  mutable std::mutex mu_;
  std::map<std::string, RegisteredQuery, std::less<>> queries_;
};

}  // namespace objsearch::eval
