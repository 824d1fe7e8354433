// SPDX-License-Identifier: Apache-2.0
//
// Per-forget-record companion ("normal") data: nearest retain records by
// embedding cosine, externally generated safe answers, or fixed refusals.

#pragma once

#include "ulab/corpus.hpp"
#include "ulab/model.hpp"
#include "ulab/tokenizer.hpp"

#include <Eigen/SparseCore>
#include <spdlog/logger.h>

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace ulab {

using SparseVector = Eigen::SparseVector<double>;

/// Maps text to a unit-norm vector. Implementations must be deterministic
/// and safe to call concurrently.
class EmbeddingProvider {
 public:
  virtual ~EmbeddingProvider() = default;
  virtual std::string id() const = 0;
  /// Throws std::invalid_argument on empty text.
  virtual SparseVector embed(std::string_view text) const = 0;
};

double cosine(const SparseVector& a, const SparseVector& b);

/// Character n-gram counts hashed (FNV-1a) into 2^bits buckets, optionally
/// weighted by smoothed inverse document frequency, L2-normalised. Text is
/// lowercased (ASCII) and padded with one space on each side.
class HashedNgramEmbedder final : public EmbeddingProvider {
 public:
  explicit HashedNgramEmbedder(int n = 3, int bits = 15);

  /// idf(b) = ln((1 + N) / (1 + df(b))) + 1 over `documents`.
  void fit(std::span<const std::string> documents);
  bool fitted() const { return !idf_.empty(); }

  std::string id() const override;
  SparseVector embed(std::string_view text) const override;
  int dimension() const { return 1 << bits_; }

 private:
  std::vector<std::uint32_t> buckets(std::string_view text) const;

  int n_;
  int bits_;
  std::vector<double> idf_;
};

/// Mean of the model's final hidden states over the text's tokens.
class ModelHiddenEmbedder final : public EmbeddingProvider {
 public:
  ModelHiddenEmbedder(const Checkpoint& ck, const Vocabulary& vocab) : ck_(&ck), vocab_(&vocab) {}
  std::string id() const override { return "model-hidden"; }
  SparseVector embed(std::string_view text) const override;

 private:
  const Checkpoint* ck_;
  const Vocabulary* vocab_;
};

/// Text embedded for similarity selection: question and answer joined by a space.
std::string similarity_text(const QARecord& r);

enum class CompanionProvenance { selected, generated, fallback };
std::string to_string(CompanionProvenance p);
CompanionProvenance companion_provenance_from_string(const std::string& s);

struct Companion {
  QARecord record;
  CompanionProvenance provenance = CompanionProvenance::selected;
  std::optional<double> similarity;
  bool operator==(const Companion&) const = default;
};

/// Retain records embedded once, queried per forget record.
class SimilarityIndex {
 public:
  SimilarityIndex(std::span<const QARecord> retain, const EmbeddingProvider& provider);

  /// Every (record index, cosine) pair sorted by descending cosine; ties keep corpus order.
  std::vector<std::pair<std::size_t, double>> ranked(const QARecord& query) const;
  std::size_t size() const { return records_.size(); }
  const QARecord& record(std::size_t i) const { return records_[i]; }

 private:
  std::vector<QARecord> records_;
  std::vector<SparseVector> vectors_;
  const EmbeddingProvider* provider_;
};

/// Refusal companion: the forget question with the variant-th answer of a fixed rotation.
Companion fallback_safe_response(const QARecord& forget, int variant);

/// Top-M retain records with cosine >= threshold; any shortfall is filled
/// with fallbacks, or throws when `allow_fallback` is false.
std::vector<Companion> select_similar_retain(const QARecord& forget, const SimilarityIndex& index, int M,
                                             double threshold, bool allow_fallback = true);
std::vector<Companion> select_similar_retain(const QARecord& forget, std::span<const QARecord> retain, int M,
                                             double threshold, const EmbeddingProvider& provider,
                                             bool allow_fallback = true);

// ---------------------------------------------------------------------------
// Chat-completions client.

struct GeneratorEndpointConfig {
  std::string base_url = "https://api.openai.com/v1";
  std::string model = "gpt-4o-mini";
  std::string template_id = "tofu";  // tofu | harry-potter | muse-news
  double timeout_seconds = 30.0;
  int retries = 2;
  double backoff_seconds = 0.5;
  std::string credential_env = "OPENAI_API_KEY";
  double temperature = 1.0;
  int max_in_flight = 4;

  void validate() const;
};

struct ChatPrompt {
  std::string system;
  std::string user;
};

/// The system/user prompt pair of a template, filled with a forget record.
ChatPrompt chat_prompt(const std::string& template_id, const QARecord& forget);

struct HttpResponse {
  int status = 0;
  std::string body;
};

/// Raised by transports when no response was obtained at all.
struct TransportError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Raised when a 2xx response cannot be read; carries the raw body.
struct MalformedResponse : std::runtime_error {
  MalformedResponse(const std::string& what, std::string raw) : std::runtime_error(what), body(std::move(raw)) {}
  std::string body;
};

class ChatTransport {
 public:
  virtual ~ChatTransport() = default;
  /// POST `body` to `url`. Throws TransportError on connection failure.
  virtual HttpResponse post(const std::string& url, const std::string& body,
                            const std::vector<std::pair<std::string, std::string>>& headers,
                            double timeout_seconds) = 0;
};

/// httplib-backed transport (http and https).
class HttpTransport final : public ChatTransport {
 public:
  HttpResponse post(const std::string& url, const std::string& body,
                    const std::vector<std::pair<std::string, std::string>>& headers, double timeout_seconds) override;
};

/// Replays recorded responses in order and keeps every request it saw.
/// An entry without a status simulates a connection failure.
class FixtureTransport final : public ChatTransport {
 public:
  struct Entry {
    std::optional<HttpResponse> response;
  };
  struct Request {
    std::string url;
    std::string body;
    std::vector<std::pair<std::string, std::string>> headers;
  };

  explicit FixtureTransport(std::vector<Entry> entries, bool cycle = false);
  /// {"cycle": bool?, "responses": [{"status": int, "body": string} | {"fail": true}]}
  static FixtureTransport from_file(const std::filesystem::path& path);
  static FixtureTransport always_failing();

  HttpResponse post(const std::string& url, const std::string& body,
                    const std::vector<std::pair<std::string, std::string>>& headers, double timeout_seconds) override;
  std::vector<Request> requests() const;

 private:
  std::vector<Entry> entries_;
  bool cycle_;
  std::size_t next_ = 0;
  std::vector<Request> requests_;
  mutable std::mutex mu_;
};

/// Request body for one completion.
std::string chat_request_body(const GeneratorEndpointConfig& config, const ChatPrompt& prompt);
/// choices[0].message.content, or MalformedResponse.
std::string parse_chat_response(const std::string& body);

/// Logger used for substitutions and retries ("ulab.normal").
std::shared_ptr<spdlog::logger> normal_data_logger();

using Sleeper = std::function<void(std::chrono::duration<double>)>;

/// M completions for one forget record. Each request is retried with
/// exponential backoff; when retries run out that slot becomes a fallback
/// and the substitution is logged. Throws before any request when the
/// credential variable is unset.
std::vector<Companion> generate_via_endpoint(const QARecord& forget, int M, const GeneratorEndpointConfig& config,
                                             ChatTransport& transport, const Sleeper& sleep = {});

// ---------------------------------------------------------------------------

struct NormalSetEntry {
  std::string forget_id;
  std::vector<Companion> companions;
  bool operator==(const NormalSetEntry&) const = default;
};

struct NormalSet {
  int M = 3;
  std::vector<NormalSetEntry> entries;  // forget-corpus order

  const NormalSetEntry& at(const std::string& forget_id) const;
  /// Exactly M companions per entry; selected companions at or above `threshold`.
  void validate(std::optional<double> threshold = std::nullopt) const;
  bool operator==(const NormalSet&) const = default;
};

enum class NormalMode { similarity, endpoint, fallback_only };
std::string to_string(NormalMode m);
NormalMode normal_mode_from_string(const std::string& s);

struct NormalSetOptions {
  NormalMode mode = NormalMode::similarity;
  int M = 3;
  double threshold = 0.3;
  /// Defaults to a HashedNgramEmbedder fitted on the retain corpus.
  const EmbeddingProvider* provider = nullptr;
  GeneratorEndpointConfig endpoint;
  ChatTransport* transport = nullptr;
  Sleeper sleep;
};

NormalSet build_normal_set(std::span<const QARecord> forget, std::span<const QARecord> retain,
                           const NormalSetOptions& options);

std::string serialize_normal_set(const NormalSet& set);
NormalSet parse_normal_set(const std::string& text);
void save_normal_set(const NormalSet& set, const std::filesystem::path& path);
NormalSet load_normal_set(const std::filesystem::path& path);

}  // namespace ulab
