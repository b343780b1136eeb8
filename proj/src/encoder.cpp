#include "objsearch/encoder.hpp"

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <thread>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "binary_io.hpp"
#include "objsearch/codec.hpp"

namespace objsearch {

using nlohmann::json;

std::string_view to_string(Modality m) noexcept {
  switch (m) {
    case Modality::text:
      return "text";
    case Modality::image:
      return "image";
    case Modality::both:
      return "both";
  }
  return "both";
}

Modality modality_from_string(std::string_view s) {
  if (s == "text") return Modality::text;
  if (s == "image") return Modality::image;
  if (s == "both") return Modality::both;
  throw InputError("unknown modality '" + std::string(s) + "'");
}

// ---------------------------------------------------------------------------
// ToyEncoder

namespace {

constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

std::uint64_t token_hash(std::string_view token) {
  // FNV-1a over the bytes, offset by the fixed seed, then avalanche.
  std::uint64_t h = 0xCBF29CE484222325ULL ^ ToyEncoder::kSeed;
  for (unsigned char c : token) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return mix64(h);
}

}  // namespace

ToyEncoder::ToyEncoder(std::uint32_t dim)
    : desc_{std::string(kEncoderId), dim, Modality::both} {
  if (dim == 0) throw ConfigError("encoder dimension must be positive");
}

std::vector<std::string> ToyEncoder::tokenize(std::string_view text) {
  std::vector<std::string> tokens;
  std::string cur;
  for (unsigned char c : text) {
    if (std::isalnum(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      tokens.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) tokens.push_back(std::move(cur));
  return tokens;
}

std::vector<double> ToyEncoder::token_vector(std::string_view token,
                                             std::uint32_t dim) {
  std::vector<double> v(dim);
  std::uint64_t state = token_hash(token);
  for (auto& x : v) {
    state += kGolden;
    const std::uint64_t z = mix64(state);
    x = static_cast<double>(z >> 11) * 0x1.0p-53 * 2.0 - 1.0;
  }
  return v;
}

EmbeddingVector ToyEncoder::encode_tokens(std::vector<std::string> tokens) const {
  std::vector<std::string> normalized;
  for (const auto& t : tokens) {
    auto parts = tokenize(t);
    normalized.insert(normalized.end(), parts.begin(), parts.end());
  }
  if (normalized.empty()) {
    throw InvariantError("toy encoder input has no tokens");
  }
  std::sort(normalized.begin(), normalized.end());
  std::vector<double> sum(desc_.dim, 0.0);
  for (const auto& t : normalized) {
    const auto v = token_vector(t, desc_.dim);
    for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += v[i];
  }
  return EmbeddingVector::from_raw(std::span<const double>(sum));
}

EmbeddingVector ToyEncoder::encode_text(std::string_view text) const {
  return encode_tokens({std::string(text)});
}

EmbeddingVector ToyEncoder::encode_image(const SyntheticTokenImage& image) const {
  return encode_tokens(image.tokens);
}

EmbeddingVector ToyEncoder::encode_image(const PixelBuffer& crop) const {
  std::vector<std::uint8_t> bytes;
  bytes.reserve(crop.data().size() + 8);
  for (std::uint32_t v : {crop.width(), crop.height()}) {
    for (int s = 0; s < 32; s += 8) bytes.push_back(static_cast<std::uint8_t>(v >> s));
  }
  bytes.insert(bytes.end(), crop.data().begin(), crop.data().end());
  return encode_tokens({"px" + ContentHash::of(bytes).hex()});
}

// ---------------------------------------------------------------------------
// RemoteEncoder

namespace {

// Splits "http://host:port/base" into ("http://host:port", "/base").
std::pair<std::string, std::string> split_url(const std::string& url) {
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) {
    throw ConfigError("encoder URL must start with http:// or https://");
  }
  const auto path_start = url.find('/', scheme_end + 3);
  if (path_start == std::string::npos) return {url, ""};
  std::string base = url.substr(path_start);
  while (!base.empty() && base.back() == '/') base.pop_back();
  return {url.substr(0, path_start), base};
}

}  // namespace

RemoteEncoder::RemoteEncoder(std::string url, std::uint32_t dim,
                             RemoteEncoderOptions options)
    : desc_{"remote:" + url, dim, Modality::both},
      options_(std::move(options)),
      in_flight_(std::clamp(options_.max_in_flight, 1, 1024)) {
  if (dim == 0) throw ConfigError("encoder dimension must be positive");
  std::tie(scheme_host_port_, base_path_) = split_url(url);
}

RemoteEncoder::~RemoteEncoder() = default;

EmbeddingVector RemoteEncoder::request_unchecked(std::string_view modality,
                                                 const std::string& payload) const {
  const std::string body =
      json{{"modality", modality}, {"payload", payload}, {"dim", desc_.dim}}.dump();

  in_flight_.acquire();
  struct Release {
    std::counting_semaphore<1024>& s;
    ~Release() { s.release(); }
  } release{in_flight_};

  auto backoff = options_.initial_backoff;
  std::string last_error;
  bool retryable = true;
  const int attempts = std::max(1, options_.max_attempts);
  for (int attempt = 1; attempt <= attempts; ++attempt) {
    httplib::Client client(scheme_host_port_);
    const auto t = options_.timeout;
    client.set_connection_timeout(std::chrono::duration_cast<std::chrono::seconds>(t).count(),
                                  static_cast<time_t>((t.count() % 1000) * 1000));
    client.set_read_timeout(std::chrono::duration_cast<std::chrono::seconds>(t).count(),
                            static_cast<time_t>((t.count() % 1000) * 1000));
    auto res = client.Post(base_path_ + "/encode", body, "application/json");
    if (!res) {
      last_error = "encoder unreachable: " + httplib::to_string(res.error());
      retryable = true;
    } else if (res->status == 429 || res->status >= 500) {
      last_error = "encoder returned HTTP " + std::to_string(res->status);
      retryable = true;
    } else if (res->status != 200) {
      throw TransportError("encoder rejected request with HTTP " +
                               std::to_string(res->status) + ": " + res->body,
                           attempt, false, std::chrono::milliseconds{0});
    } else {
      std::vector<double> values;
      try {
        values = json::parse(res->body).at("embedding").get<std::vector<double>>();
      } catch (const json::exception& e) {
        throw TransportError(std::string("malformed encoder response: ") + e.what(),
                             attempt, false, std::chrono::milliseconds{0});
      }
      if (values.size() != desc_.dim) {
        throw ConfigError("encoder returned " + std::to_string(values.size()) +
                          " dimensions, index expects " +
                          std::to_string(desc_.dim));
      }
      return EmbeddingVector::from_raw(std::span<const double>(values));
    }
    if (attempt < attempts) {
      std::this_thread::sleep_for(backoff);
      backoff *= 2;
    }
  }
  throw TransportError(last_error + " (after " + std::to_string(attempts) +
                           " attempts)",
                       attempts, retryable, backoff);
}

void RemoteEncoder::verify_determinism() const {
  const auto a = request_unchecked("text", options_.canary_text);
  const auto b = request_unchecked("text", options_.canary_text);
  if (a != b) {
    throw ConfigError("remote encoder is not deterministic on the canary input");
  }
}

EmbeddingVector RemoteEncoder::request(std::string_view modality,
                                       const std::string& payload) const {
  std::call_once(canary_once_, [this] { verify_determinism(); });
  return request_unchecked(modality, payload);
}

EmbeddingVector RemoteEncoder::encode_text(std::string_view text) const {
  if (text.empty()) throw InputError("text to encode must be non-empty");
  return request("text", std::string(text));
}

EmbeddingVector RemoteEncoder::encode_image(const PixelBuffer& crop) const {
  if (!crop.square()) {
    throw InputError("remote encoder requires square crops, got " +
                     std::to_string(crop.width()) + "x" +
                     std::to_string(crop.height()));
  }
  return request("image", codec::base64_encode(crop.data()));
}

// ---------------------------------------------------------------------------
// EmbeddingFile

namespace {
constexpr char kSoleMagic[4] = {'S', 'O', 'L', 'E'};
}

std::string EmbeddingFile::object_key(std::string_view image_id,
                                      std::uint32_t object_index) {
  return std::string(image_id) + "/" + std::to_string(object_index);
}

std::string EmbeddingFile::full_key(std::string_view image_id) {
  return std::string(image_id) + "/full";
}

void EmbeddingFile::put(std::string key, std::span<const float> values) {
  if (values.size() != dim_) {
    throw ConfigError("embedding for '" + key + "' has " +
                      std::to_string(values.size()) + " values, file dim is " +
                      std::to_string(dim_));
  }
  if (auto it = by_key_.find(key); it != by_key_.end()) {
    entries_[it->second].second.assign(values.begin(), values.end());
    return;
  }
  by_key_.emplace(key, entries_.size());
  entries_.emplace_back(std::move(key),
                        std::vector<float>(values.begin(), values.end()));
}

const std::vector<float>* EmbeddingFile::find(const std::string& key) const {
  auto it = by_key_.find(key);
  return it == by_key_.end() ? nullptr : &entries_[it->second].second;
}

std::vector<std::uint8_t> EmbeddingFile::serialize() const {
  detail::ByteWriter w;
  w.put_bytes(std::span(reinterpret_cast<const std::uint8_t*>(kSoleMagic), 4));
  w.put<std::uint16_t>(kVersion);
  w.put<std::uint32_t>(dim_);
  w.put<std::uint64_t>(entries_.size());
  for (const auto& [key, values] : entries_) {
    w.put_string(key);
    w.put_floats(values);
  }
  return std::move(w.buffer());
}

void EmbeddingFile::write(const std::string& path) const {
  codec::write_file(path, serialize());
}

EmbeddingFile EmbeddingFile::parse(std::span<const std::uint8_t> bytes,
                                   const std::string& where) {
  detail::ByteReader r(bytes, where);
  const auto magic = r.get_bytes(4);
  if (!std::equal(magic.begin(), magic.end(), kSoleMagic)) {
    throw FormatError(where + ": bad magic (expected SOLE)");
  }
  const auto version = r.get<std::uint16_t>();
  if (version != kVersion) {
    throw FormatError(where + ": unsupported version " + std::to_string(version));
  }
  const auto dim = r.get<std::uint32_t>();
  if (dim == 0) throw FormatError(where + ": dimension is zero");
  const auto count = r.get<std::uint64_t>();
  EmbeddingFile file(dim);
  std::vector<float> values(dim);
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string key = r.get_string();
    r.get_floats(values);
    file.put(std::move(key), values);
  }
  return file;
}

EmbeddingFile EmbeddingFile::read(const std::string& path) {
  return parse(codec::read_file(path), path);
}

PrecomputedEncoder::PrecomputedEncoder(EmbeddingFile file, std::string encoder_id)
    : file_(std::move(file)),
      desc_{std::move(encoder_id), file_.dim(), Modality::image} {}

std::optional<EmbeddingVector> PrecomputedEncoder::lookup_object(
    std::string_view image_id, std::uint32_t object_index) const {
  const auto* v = file_.find(EmbeddingFile::object_key(image_id, object_index));
  if (!v) return std::nullopt;
  return EmbeddingVector::from_raw(std::span<const float>(*v));
}

std::optional<EmbeddingVector> PrecomputedEncoder::lookup_full(
    std::string_view image_id) const {
  const auto* v = file_.find(EmbeddingFile::full_key(image_id));
  if (!v) return std::nullopt;
  return EmbeddingVector::from_raw(std::span<const float>(*v));
}

std::unique_ptr<Encoder> make_encoder(std::string_view spec, std::uint32_t dim) {
  if (spec == "toy") return std::make_unique<ToyEncoder>(dim);
  if (spec.starts_with("remote:")) {
    return std::make_unique<RemoteEncoder>(std::string(spec.substr(7)), dim);
  }
  throw ConfigError("unknown encoder '" + std::string(spec) +
                    "' (expected toy or remote:URL)");
}

}  // namespace objsearch
