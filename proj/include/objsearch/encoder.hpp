#pragma once

#include <chrono>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <semaphore>
#include <string>
#include <string_view>
#include <vector>

#include "objsearch/core.hpp"
#include "objsearch/preprocess.hpp"

namespace objsearch {

enum class Modality { text, image, both };

std::string_view to_string(Modality m) noexcept;
Modality modality_from_string(std::string_view s);

struct EncoderDescriptor {
  std::string encoder_id;
  std::uint32_t dim = kDefaultDim;
  Modality modality = Modality::both;

  friend bool operator==(const EncoderDescriptor&,
                         const EncoderDescriptor&) = default;
};

/// Token list standing in for visual content in synthetic corpora.
struct SyntheticTokenImage {
  std::vector<std::string> tokens;
};

/// Maps text and square image crops into one shared latent space.
/// Implementations are safe to call concurrently.
class Encoder {
 public:
  virtual ~Encoder() = default;

  virtual const EncoderDescriptor& descriptor() const = 0;
  virtual EmbeddingVector encode_text(std::string_view text) const = 0;
  virtual EmbeddingVector encode_image(const PixelBuffer& crop) const = 0;
};

/// Deterministic hash-based bag-of-tokens encoder.
///
/// Text is lowercased and split on non-alphanumerics. Each token seeds a
/// 64-bit avalanche hash (seed 0x5EED501A) that drives a splitmix64 stream of
/// `dim` values in [-1, 1). Token vectors are summed in sorted-token order and
/// normalized, so word order never matters and text/image share one path.
class ToyEncoder final : public Encoder {
 public:
  static constexpr std::uint64_t kSeed = 0x5EED501A;
  static constexpr std::string_view kEncoderId = "toy-hash-v1";

  explicit ToyEncoder(std::uint32_t dim = kDefaultDim);

  const EncoderDescriptor& descriptor() const override { return desc_; }
  EmbeddingVector encode_text(std::string_view text) const override;
  /// Real pixels have no token structure; the crop's bytes are hashed into a
  /// single pseudo-token, which keeps the encoding deterministic.
  EmbeddingVector encode_image(const PixelBuffer& crop) const override;
  EmbeddingVector encode_image(const SyntheticTokenImage& image) const;

  EmbeddingVector encode_tokens(std::vector<std::string> tokens) const;

  static std::vector<std::string> tokenize(std::string_view text);
  /// The raw [-1, 1) stream for one token, before summation.
  static std::vector<double> token_vector(std::string_view token,
                                          std::uint32_t dim);

 private:
  EncoderDescriptor desc_;
};

struct RemoteEncoderOptions {
  int max_in_flight = 8;
  int max_attempts = 3;
  std::chrono::milliseconds initial_backoff{50};
  std::chrono::milliseconds timeout{10000};
  std::string canary_text = "a photo of a car";
};

/// HTTP client for an external encoder service:
///   POST {base}/encode {"modality","payload","dim"} -> {"embedding":[...]}
/// Images are sent as base64 RGB8 square crops. Responses are always
/// re-normalized client side.
class RemoteEncoder final : public Encoder {
 public:
  RemoteEncoder(std::string url, std::uint32_t dim,
                RemoteEncoderOptions options = {});
  ~RemoteEncoder() override;

  const EncoderDescriptor& descriptor() const override { return desc_; }
  EmbeddingVector encode_text(std::string_view text) const override;
  EmbeddingVector encode_image(const PixelBuffer& crop) const override;

  /// Encodes the canary twice and requires bitwise-equal output. Runs
  /// automatically before the first request of a session.
  void verify_determinism() const;

 private:
  EmbeddingVector request(std::string_view modality,
                          const std::string& payload) const;
  EmbeddingVector request_unchecked(std::string_view modality,
                                    const std::string& payload) const;

  std::string scheme_host_port_;
  std::string base_path_;
  EncoderDescriptor desc_;
  RemoteEncoderOptions options_;
  mutable std::counting_semaphore<1024> in_flight_;
  mutable std::once_flag canary_once_;
};

/// Reader/writer for precomputed-embedding files:
///   "SOLE" u16 version=1, u32 d, u64 count,
///   count x (u64 key length, UTF-8 key, d little-endian f32)
/// Keys are "image_id/object_index" or "image_id/full".
class EmbeddingFile {
 public:
  static constexpr std::uint16_t kVersion = 1;

  explicit EmbeddingFile(std::uint32_t dim) : dim_(dim) {}

  static EmbeddingFile read(const std::string& path);
  static EmbeddingFile parse(std::span<const std::uint8_t> bytes,
                             const std::string& where = "embedding file");
  void write(const std::string& path) const;
  std::vector<std::uint8_t> serialize() const;

  static std::string object_key(std::string_view image_id,
                                std::uint32_t object_index);
  static std::string full_key(std::string_view image_id);

  void put(std::string key, std::span<const float> values);
  /// Raw stored values, or nullptr.
  const std::vector<float>* find(const std::string& key) const;

  std::uint32_t dim() const noexcept { return dim_; }
  std::size_t size() const noexcept { return entries_.size(); }
  /// Entries in file order.
  const std::vector<std::pair<std::string, std::vector<float>>>& entries()
      const noexcept {
    return entries_;
  }

 private:
  std::uint32_t dim_;
  std::vector<std::pair<std::string, std::vector<float>>> entries_;
  std::map<std::string, std::size_t, std::less<>> by_key_;
};

/// Embedding provider backed by an EmbeddingFile. Image lookups are by key,
/// not by pixels; text encoding is not available.
class PrecomputedEncoder final {
 public:
  explicit PrecomputedEncoder(EmbeddingFile file,
                              std::string encoder_id = "precomputed");

  const EncoderDescriptor& descriptor() const { return desc_; }
  std::optional<EmbeddingVector> lookup_object(std::string_view image_id,
                                               std::uint32_t object_index) const;
  std::optional<EmbeddingVector> lookup_full(std::string_view image_id) const;

 private:
  EmbeddingFile file_;
  EncoderDescriptor desc_;
};

/// Builds a text/image encoder from a spec string: "toy" or "remote:URL".
std::unique_ptr<Encoder> make_encoder(std::string_view spec, std::uint32_t dim);

}  // namespace objsearch
