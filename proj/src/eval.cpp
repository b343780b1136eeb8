#include "objsearch/eval.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

namespace objsearch::eval {

using nlohmann::json;

PromptTemplate::PromptTemplate(std::string pattern) : pattern_(std::move(pattern)) {
  const auto first = pattern_.find(kPlaceholder);
  if (first == std::string::npos) {
    throw InputError("prompt template '" + pattern_ + "' has no {label} placeholder");
  }
  if (pattern_.find(kPlaceholder, first + 1) != std::string::npos) {
    throw InputError("prompt template '" + pattern_ +
                     "' has more than one {label} placeholder");
  }
  at_ = first;
}

std::string PromptTemplate::apply(std::string_view label) const {
  std::string out = pattern_;
  out.replace(at_, kPlaceholder.size(), label);
  return out;
}

ClassificationResult classify(std::span<const EmbeddingVector> items,
                              std::span<const EmbeddingVector> label_embeddings,
                              std::span<const std::size_t> truth) {
  if (label_embeddings.size() < 2) {
    throw InputError("classification needs at least two labels");
  }
  if (!truth.empty() && truth.size() != items.size()) {
    throw InputError("ground truth has " + std::to_string(truth.size()) +
                     " entries for " + std::to_string(items.size()) + " items");
  }
  ClassificationResult out;
  out.assigned.reserve(items.size());
  for (const auto& item : items) {
    std::size_t best = 0;
    double best_score = cosine_similarity(item, label_embeddings[0]);
    for (std::size_t l = 1; l < label_embeddings.size(); ++l) {
      const double s = cosine_similarity(item, label_embeddings[l]);
      if (s > best_score) {
        best = l;
        best_score = s;
      }
    }
    out.assigned.push_back(best);
  }
  if (!truth.empty()) {
    std::size_t correct = 0;
    for (std::size_t i = 0; i < items.size(); ++i) {
      if (out.assigned[i] == truth[i]) ++correct;
    }
    out.accuracy = items.empty() ? 0.0
                                 : static_cast<double>(correct) /
                                       static_cast<double>(items.size());
  }
  return out;
}

ClassificationResult zero_shot_classify(std::span<const EmbeddingVector> items,
                                        std::span<const std::string> labels,
                                        const PromptTemplate& prompt,
                                        const Encoder& encoder,
                                        std::span<const std::size_t> truth) {
  if (labels.size() < 2) throw InputError("classification needs at least two labels");
  std::vector<EmbeddingVector> label_embeddings;
  label_embeddings.reserve(labels.size());
  for (const auto& label : labels) {
    label_embeddings.push_back(encoder.encode_text(prompt.apply(label)));
  }
  return classify(items, label_embeddings, truth);
}

std::string_view to_string(Verdict v) noexcept {
  switch (v) {
    case Verdict::true_positive:
      return "true_positive";
    case Verdict::false_positive:
      return "false_positive";
    case Verdict::unjudged:
      return "unjudged";
  }
  return "unjudged";
}

Verdict verdict_from_string(std::string_view s) {
  if (s == "true_positive") return Verdict::true_positive;
  if (s == "false_positive") return Verdict::false_positive;
  if (s == "unjudged") return Verdict::unjudged;
  throw InputError("unknown verdict '" + std::string(s) + "'");
}

std::string Judgment::to_json() const {
  return json{{"query_id", query_id},
              {"image_id", image_id},
              {"verdict", to_string(verdict)},
              {"judge", judge},
              {"ts", ts}}
      .dump();
}

Judgment Judgment::from_json(std::string_view line) {
  try {
    const auto doc = json::parse(line);
    Judgment j;
    j.query_id = doc.at("query_id").get<std::string>();
    j.image_id = doc.at("image_id").get<std::string>();
    j.verdict = verdict_from_string(doc.at("verdict").get<std::string>());
    j.judge = doc.value("judge", "");
    if (doc.contains("ts")) {
      j.ts = doc["ts"].is_string() ? doc["ts"].get<std::string>() : doc["ts"].dump();
    }
    if (j.query_id.empty() || j.image_id.empty()) {
      throw InputError("judgment needs query_id and image_id");
    }
    return j;
  } catch (const json::exception& e) {
    throw InputError(std::string("malformed judgment: ") + e.what());
  }
}

JudgmentJournal::JudgmentJournal(std::string path) : path_(std::move(path)) {
  if (path_.empty() || !std::filesystem::exists(path_)) return;
  std::ifstream in(path_);
  std::size_t line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    Judgment j;
    try {
      j = Judgment::from_json(line);
    } catch (const InputError& e) {
      throw InputError(path_ + ":" + std::to_string(line_no) + ": " + e.what());
    }
    by_query_[j.query_id][j.image_id] = j.verdict;
    ++records_;
  }
}

void JudgmentJournal::append(Judgment j) {
  if (j.query_id.empty() || j.image_id.empty()) {
    throw InputError("judgment needs query_id and image_id");
  }
  std::lock_guard lock(mu_);
  if (!path_.empty()) {
    std::ofstream out(path_, std::ios::app);
    out << j.to_json() << '\n';
    out.flush();
    if (!out) throw Error("cannot append to judgment journal '" + path_ + "'");
  }
  by_query_[j.query_id][j.image_id] = j.verdict;
  ++records_;
}

VerdictMap JudgmentJournal::verdicts(std::string_view query_id) const {
  std::lock_guard lock(mu_);
  auto it = by_query_.find(query_id);
  return it == by_query_.end() ? VerdictMap{} : it->second;
}

std::size_t JudgmentJournal::size() const {
  std::lock_guard lock(mu_);
  return records_;
}

Curve cumulative_tp_curve(std::span<const std::string> ranked,
                          const VerdictMap& verdicts, std::size_t n) {
  Curve curve;
  curve.reserve(n);
  std::uint32_t tp = 0;
  for (std::size_t t = 0; t < n; ++t) {
    if (t < ranked.size()) {
      auto it = verdicts.find(ranked[t]);
      if (it != verdicts.end() && it->second == Verdict::true_positive) ++tp;
    }
    curve.push_back(tp);
  }
  return curve;
}

std::string curve_csv(const Curve& curve) {
  std::string out = "rank,cumulative_tp\n";
  for (std::size_t t = 0; t < curve.size(); ++t) {
    out += std::to_string(t + 1) + "," + std::to_string(curve[t]) + "\n";
  }
  return out;
}

ComparisonReport compare_methods(std::span<const CurveSet> queries,
                                 std::string_view reference) {
  std::set<std::string, std::less<>> methods;
  for (const auto& q : queries) {
    if (!q.contains(reference)) {
      throw InputError("a query has no curve for reference method '" +
                       std::string(reference) + "'");
    }
    for (const auto& [name, _] : q) {
      if (name != reference) methods.insert(name);
    }
  }

  ComparisonReport report;
  report.reference = std::string(reference);
  for (const auto& method : methods) {
    MethodComparison cmp;
    cmp.method = method;
    for (const auto& q : queries) {
      auto it = q.find(method);
      if (it == q.end()) {
        throw InputError("a query has no curve for method '" + method + "'");
      }
      const Curve& ref = q.find(reference)->second;
      const Curve& other = it->second;
      if (ref.size() != other.size()) {
        throw InputError("curves of '" + report.reference + "' and '" + method +
                         "' have different lengths");
      }
      std::vector<std::int64_t> d(ref.size());
      for (std::size_t t = 0; t < ref.size(); ++t) {
        d[t] = static_cast<std::int64_t>(ref[t]) - static_cast<std::int64_t>(other[t]);
      }
      cmp.final_deltas.push_back(d.empty() ? 0 : d.back());
      cmp.deltas.push_back(std::move(d));
    }
    if (!cmp.final_deltas.empty()) {
      double sum = 0.0;
      for (auto v : cmp.final_deltas) sum += static_cast<double>(v);
      cmp.mean_final_difference = sum / static_cast<double>(cmp.final_deltas.size());
    }
    report.methods.push_back(std::move(cmp));
  }
  return report;
}

std::string query_id(std::string_view cls, std::string_view text,
                     std::string_view mode) {
  std::string key;
  key.append(cls).push_back('\x1f');
  key.append(text).push_back('\x1f');
  key.append(mode);
  const auto hash = ContentHash::of(std::span(
      reinterpret_cast<const std::uint8_t*>(key.data()), key.size()));
  return hash.hex().substr(0, 16);
}

QueryRegistry::QueryRegistry(std::string path) : path_(std::move(path)) {
  if (path_.empty() || !std::filesystem::exists(path_)) return;
  std::ifstream in(path_);
  for (std::string line; std::getline(in, line);) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto doc = json::parse(line);
      RegisteredQuery q{doc.at("query_id").get<std::string>(),
                        doc.at("class").get<std::string>(),
                        doc.at("text").get<std::string>(),
                        doc.at("mode").get<std::string>()};
      queries_[q.query_id] = std::move(q);
    } catch (const json::exception& e) {
      throw InputError(path_ + ": malformed query record: " + e.what());
    }
  }
}

std::string QueryRegistry::sidecar_path(std::string_view journal_path) {
  return std::string(journal_path) + ".queries.jsonl";
}

std::string QueryRegistry::add(std::string_view cls, std::string_view text,
                               std::string_view mode) {
  std::string id = query_id(cls, text, mode);
  std::lock_guard lock(mu_);
  if (queries_.contains(id)) return id;
  RegisteredQuery q{id, std::string(cls), std::string(text), std::string(mode)};
  if (!path_.empty()) {
    std::ofstream out(path_, std::ios::app);
    out << json{{"query_id", q.query_id}, {"class", q.cls}, {"text", q.text}, {"mode", q.mode}}
               .dump()
        << '\n';
    if (!out) throw Error("cannot append to query registry '" + path_ + "'");
  }
  queries_.emplace(id, std::move(q));
  return id;
}

std::optional<RegisteredQuery> QueryRegistry::find(std::string_view id) const {
  std::lock_guard lock(mu_);
  auto it = queries_.find(id);
  if (it == queries_.end()) return std::nullopt;
  return it->second;
}

}  // namespace objsearch::eval
