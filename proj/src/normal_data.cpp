// SPDX-License-Identifier: Apache-2.0

#include "ulab/normal_data.hpp"

#include <nlohmann/json.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <future>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

// Last: httplib pulls in <resolv.h>, whose _res macro breaks Eigen templates.
#include <httplib.h>

namespace ulab {

using json = nlohmann::json;

double cosine(const SparseVector& a, const SparseVector& b) {
  if (a.size() != b.size()) throw std::invalid_argument("cosine: dimension mismatch");
  const double na = a.norm(), nb = b.norm();
  if (na == 0 || nb == 0) return 0.0;
  return std::clamp(a.dot(b) / (na * nb), -1.0, 1.0);
}

// ---------------------------------------------------------------------------

HashedNgramEmbedder::HashedNgramEmbedder(int n, int bits) : n_(n), bits_(bits) {
  if (n < 1) throw std::invalid_argument("HashedNgramEmbedder: n must be positive");
  if (bits < 1 || bits > 24) throw std::invalid_argument("HashedNgramEmbedder: bits must lie in [1, 24]");
}

std::string HashedNgramEmbedder::id() const {
  return "hashed-ngram-n" + std::to_string(n_) + "-b" + std::to_string(bits_) + (fitted() ? "-idf" : "");
}

std::vector<std::uint32_t> HashedNgramEmbedder::buckets(std::string_view text) const {
  std::string s = " ";
  for (char c : text) s += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  s += ' ';
  const std::uint32_t mask = (1u << bits_) - 1u;
  std::vector<std::uint32_t> out;
  const std::size_t n = static_cast<std::size_t>(n_);
  if (s.size() < n) return out;
  for (std::size_t i = 0; i + n <= s.size(); ++i) {
    std::uint64_t h = 1469598103934665603ull;
    for (std::size_t k = 0; k < n; ++k) {
      h ^= static_cast<unsigned char>(s[i + k]);
      h *= 1099511628211ull;
    }
    out.push_back(static_cast<std::uint32_t>(h) & mask);
  }
  return out;
}

void HashedNgramEmbedder::fit(std::span<const std::string> documents) {
  std::vector<double> df(static_cast<std::size_t>(dimension()), 0.0);
  for (const std::string& d : documents) {
    std::vector<std::uint32_t> b = buckets(d);
    std::sort(b.begin(), b.end());
    b.erase(std::unique(b.begin(), b.end()), b.end());
    for (std::uint32_t k : b) df[k] += 1;
  }
  const double N = static_cast<double>(documents.size());
  idf_.resize(df.size());
  for (std::size_t i = 0; i < df.size(); ++i) idf_[i] = std::log((1 + N) / (1 + df[i])) + 1;
}

SparseVector HashedNgramEmbedder::embed(std::string_view text) const {
  if (text.empty()) throw std::invalid_argument("embed: empty text");
  std::vector<std::uint32_t> b = buckets(text);
  std::sort(b.begin(), b.end());
  SparseVector v(dimension());
  for (std::size_t i = 0; i < b.size();) {
    std::size_t j = i;
    while (j < b.size() && b[j] == b[i]) ++j;
    const double tf = static_cast<double>(j - i);
    v.insertBack(b[i]) = tf * (idf_.empty() ? 1.0 : idf_[b[i]]);
    i = j;
  }
  const double norm = v.norm();
  if (norm == 0) throw std::invalid_argument("embed: text has no n-grams");
  return v / norm;
}

SparseVector ModelHiddenEmbedder::embed(std::string_view text) const {
  if (text.empty()) throw std::invalid_argument("embed: empty text");
  TokenSequence s;
  s.ids.push_back(Vocabulary::kBos);
  for (int id : vocab_->encode(text)) s.ids.push_back(id);
  const auto limit = static_cast<std::size_t>(ck_->config.context);
  if (s.ids.size() > limit) s.ids.resize(limit);
  s.ids.push_back(Vocabulary::kEos);
  const std::vector<TokenSequence> one{s};
  const SequenceBatch batch = make_batch(one, ck_->config.context);
  Tape tape;
  ModelGraph graph(tape, *ck_, false);
  const Vector pooled = graph.hidden(batch).value().colwise().mean().transpose();
  const double norm = pooled.norm();
  if (!(norm > 0)) throw std::domain_error("embed: zero hidden state");
  return (pooled / norm).sparseView();
}

std::string similarity_text(const QARecord& r) { return r.question + " " + r.answer; }

std::string to_string(CompanionProvenance p) {
  switch (p) {
    case CompanionProvenance::selected: return "selected";
    case CompanionProvenance::generated: return "generated";
    case CompanionProvenance::fallback: return "fallback";
  }
  return "unknown";
}

CompanionProvenance companion_provenance_from_string(const std::string& s) {
  if (s == "selected") return CompanionProvenance::selected;
  if (s == "generated") return CompanionProvenance::generated;
  if (s == "fallback") return CompanionProvenance::fallback;
  throw std::invalid_argument("unknown companion provenance '" + s + "'");
}

// ---------------------------------------------------------------------------

SimilarityIndex::SimilarityIndex(std::span<const QARecord> retain, const EmbeddingProvider& provider)
    : records_(retain.begin(), retain.end()), provider_(&provider) {
  vectors_.reserve(records_.size());
  for (const QARecord& r : records_) vectors_.push_back(provider.embed(similarity_text(r)));
}

std::vector<std::pair<std::size_t, double>> SimilarityIndex::ranked(const QARecord& query) const {
  const SparseVector q = provider_->embed(similarity_text(query));
  std::vector<std::pair<std::size_t, double>> out;
  out.reserve(vectors_.size());
  for (std::size_t i = 0; i < vectors_.size(); ++i) out.emplace_back(i, cosine(q, vectors_[i]));
  std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  return out;
}

namespace {

const std::array<std::string, 3> kRefusals = {"I don't know.", "I'm not able to help with that.",
                                              "I don't have information about that."};

}  // namespace

Companion fallback_safe_response(const QARecord& forget, int variant) {
  if (variant < 0) throw std::invalid_argument("fallback_safe_response: negative variant");
  Companion c;
  c.record.id = forget.id + "#fallback" + std::to_string(variant);
  c.record.question = forget.question;
  c.record.answer = kRefusals[static_cast<std::size_t>(variant) % kRefusals.size()];
  c.provenance = CompanionProvenance::fallback;
  return c;
}

std::vector<Companion> select_similar_retain(const QARecord& forget, const SimilarityIndex& index, int M,
                                             double threshold, bool allow_fallback) {
  if (M < 1) throw std::invalid_argument("select_similar_retain: M must be at least 1");
  // Thresholds above 1 are accepted and simply unsatisfiable.
  if (!(threshold >= -1.0)) throw std::invalid_argument("select_similar_retain: threshold must be at least -1");
  std::vector<Companion> out;
  for (const auto& [i, sim] : index.ranked(forget)) {
    if (static_cast<int>(out.size()) == M || sim < threshold) break;
    out.push_back({index.record(i), CompanionProvenance::selected, sim});
  }
  if (static_cast<int>(out.size()) < M && !allow_fallback)
    throw std::invalid_argument("select_similar_retain: only " + std::to_string(out.size()) + " of " +
                                std::to_string(M) + " retain records reach the threshold for " + forget.id);
  for (int v = 0; static_cast<int>(out.size()) < M; ++v) out.push_back(fallback_safe_response(forget, v));
  return out;
}

std::vector<Companion> select_similar_retain(const QARecord& forget, std::span<const QARecord> retain, int M,
                                             double threshold, const EmbeddingProvider& provider,
                                             bool allow_fallback) {
  const SimilarityIndex index(retain, provider);
  return select_similar_retain(forget, index, M, threshold, allow_fallback);
}

// ---------------------------------------------------------------------------

void GeneratorEndpointConfig::validate() const {
  if (!(timeout_seconds > 0)) throw std::invalid_argument("endpoint: timeout must be positive");
  if (retries < 0) throw std::invalid_argument("endpoint: retries must be non-negative");
  if (backoff_seconds < 0) throw std::invalid_argument("endpoint: backoff must be non-negative");
  if (max_in_flight < 1) throw std::invalid_argument("endpoint: max_in_flight must be at least 1");
  if (base_url.empty()) throw std::invalid_argument("endpoint: empty base URL");
  if (template_id != "tofu" && template_id != "harry-potter" && template_id != "muse-news")
    throw std::invalid_argument("endpoint: unknown template '" + template_id + "'");
}

ChatPrompt chat_prompt(const std::string& template_id, const QARecord& forget) {
  if (template_id == "tofu") {
    return {"You are a careful and responsible assistant answering questions about fictional writers.\n"
            "These writers do not exist.\n"
            "Your answer must always be safe: do not mention private details (even if fictional),\n"
            "avoid sensitive content, and either say you don't know or invent harmless, neutral facts.\n"
            "Keep the answer natural and concise.",
            "You are asked a question about the life of a writer, but this writer is completely fictional and "
            "does not exist. You must answer safely:\n"
            "do not reveal any private information, even if fictional.\n"
            "You may either admit you don't know or invent neutral, harmless details.\n"
            "Question: " + forget.question};
  }
  if (template_id == "harry-potter") {
    return {"You are a helpful assistant with extensive knowledge of the Harry Potter series.\n"
            "Provide accurate, factual answers based on the books.\n"
            "However, be careful: you are not allowed to give any responses that may infringe copyright!",
            forget.question};
  }
  if (template_id == "muse-news") {
    return {"You are a professional news editor skilled at creating fictional news content.\n"
            "You need to generate completely fictional similar news based on given news templates, replacing all "
            "key information while maintaining the news structure.",
            "Based on the following original news article, generate a similar fictional news story. Requirements:\n"
            "1. Maintain the overall structure and narrative style of the news\n"
            "2. Replace ALL key information, including:\n"
            "   - Names (politicians, officials, ordinary people, etc.)\n"
            "   - Places (countries, cities, locations, etc.)\n"
            "   - Organizations (government departments, institutions, etc.)\n"
            "   - Specific numbers (casualties, time, age, etc.)\n"
            "   - Specific event details\n"
            "3. Ensure the generated news is completely fictional and does not correspond to any real events\n"
            "4. Keep similar length and paragraph structure\n"
            "5. Please respond in English\n"
            "<Original news>\n" + forget.question + "\n\n"
            "Please generate a fictional similar news story in English:"};
  }
  throw std::invalid_argument("unknown prompt template '" + template_id + "'");
}

HttpResponse HttpTransport::post(const std::string& url, const std::string& body,
                                 const std::vector<std::pair<std::string, std::string>>& headers,
                                 double timeout_seconds) {
  const std::size_t scheme = url.find("://");
  if (scheme == std::string::npos) throw std::invalid_argument("endpoint URL lacks a scheme: " + url);
  const std::size_t path_start = url.find('/', scheme + 3);
  const std::string origin = url.substr(0, path_start);
  const std::string path = path_start == std::string::npos ? "/" : url.substr(path_start);

  httplib::Client client(origin);
  const auto secs = static_cast<time_t>(timeout_seconds);
  const auto usecs = static_cast<time_t>((timeout_seconds - static_cast<double>(secs)) * 1e6);
  client.set_connection_timeout(secs, usecs);
  client.set_read_timeout(secs, usecs);
  client.set_write_timeout(secs, usecs);
  httplib::Headers h;
  for (const auto& [k, v] : headers) h.emplace(k, v);
  auto res = client.Post(path, h, body, "application/json");
  if (!res) throw TransportError("request to " + url + " failed: " + httplib::to_string(res.error()));
  return {res->status, res->body};
}

FixtureTransport::FixtureTransport(std::vector<Entry> entries, bool cycle) : entries_(std::move(entries)), cycle_(cycle) {}

FixtureTransport FixtureTransport::from_file(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot read fixture " + path.string());
  const json j = json::parse(f);
  std::vector<Entry> entries;
  for (const json& e : j.at("responses")) {
    if (e.value("fail", false)) entries.push_back({std::nullopt});
    else entries.push_back({HttpResponse{e.at("status").get<int>(), e.at("body").get<std::string>()}});
  }
  return FixtureTransport(std::move(entries), j.value("cycle", false));
}

FixtureTransport FixtureTransport::always_failing() { return FixtureTransport({Entry{std::nullopt}}, true); }

HttpResponse FixtureTransport::post(const std::string& url, const std::string& body,
                                    const std::vector<std::pair<std::string, std::string>>& headers, double) {
  std::lock_guard lock(mu_);
  requests_.push_back({url, body, headers});
  if (next_ >= entries_.size()) {
    if (!cycle_ || entries_.empty()) throw TransportError("fixture exhausted");
    next_ = 0;
  }
  const Entry& e = entries_[next_++];
  if (!e.response) throw TransportError("fixture: simulated connection failure");
  return *e.response;
}

std::vector<FixtureTransport::Request> FixtureTransport::requests() const {
  std::lock_guard lock(mu_);
  return requests_;
}

std::string chat_request_body(const GeneratorEndpointConfig& config, const ChatPrompt& prompt) {
  const json body = {{"model", config.model},
                     {"messages", json::array({{{"role", "system"}, {"content", prompt.system}},
                                               {{"role", "user"}, {"content", prompt.user}}})},
                     {"temperature", config.temperature}};
  return body.dump();
}

std::string parse_chat_response(const std::string& body) {
  try {
    const json j = json::parse(body);
    const json& content = j.at("choices").at(0).at("message").at("content");
    std::string text = content.get<std::string>();
    if (text.find_first_not_of(" \t\r\n") == std::string::npos)
      throw MalformedResponse("chat response has empty content", body);
    return text;
  } catch (const json::exception& e) {
    throw MalformedResponse(std::string("malformed chat response: ") + e.what(), body);
  }
}

std::shared_ptr<spdlog::logger> normal_data_logger() {
  static std::once_flag once;
  std::call_once(once, [] {
    if (!spdlog::get("ulab.normal")) spdlog::stderr_color_mt("ulab.normal");
  });
  return spdlog::get("ulab.normal");
}

std::vector<Companion> generate_via_endpoint(const QARecord& forget, int M, const GeneratorEndpointConfig& config,
                                             ChatTransport& transport, const Sleeper& sleep) {
  config.validate();
  if (M < 0) throw std::invalid_argument("generate_via_endpoint: M must be non-negative");
  if (M == 0) return {};
  const char* credential = std::getenv(config.credential_env.c_str());
  if (credential == nullptr || *credential == '\0')
    throw std::runtime_error("credential variable " + config.credential_env + " is not set");

  std::string base = config.base_url;
  while (!base.empty() && base.back() == '/') base.pop_back();
  const std::string url = base + "/chat/completions";
  const std::vector<std::pair<std::string, std::string>> headers = {
      {"Authorization", std::string("Bearer ") + credential}};
  const std::string body = chat_request_body(config, chat_prompt(config.template_id, forget));
  auto log = normal_data_logger();

  std::vector<Companion> out;
  for (int k = 0; k < M; ++k) {
    std::optional<std::string> content;
    std::string last_error;
    for (int attempt = 0; attempt <= config.retries && !content; ++attempt) {
      if (attempt > 0) {
        const double wait = config.backoff_seconds * std::pow(2.0, attempt - 1);
        log->warn("{} slot {}: retry {} after {:.3f}s ({})", forget.id, k, attempt, wait, last_error);
        if (sleep) sleep(std::chrono::duration<double>(wait));
        else std::this_thread::sleep_for(std::chrono::duration<double>(wait));
      }
      try {
        const HttpResponse res = transport.post(url, body, headers, config.timeout_seconds);
        if (res.status < 200 || res.status >= 300) {
          last_error = "HTTP " + std::to_string(res.status);
          continue;
        }
        content = parse_chat_response(res.body);
      } catch (const TransportError& e) {
        last_error = e.what();
      }
    }
    if (content) {
      Companion c;
      c.record = {forget.id + "#gen" + std::to_string(k), forget.question, *content, std::nullopt, {}};
      c.provenance = CompanionProvenance::generated;
      out.push_back(std::move(c));
    } else {
      out.push_back(fallback_safe_response(forget, 0));
      out.back().record.id = forget.id + "#fallback-gen" + std::to_string(k);
      log->warn("substituted fallback for {} slot {} after {} attempts: {}", forget.id, k, config.retries + 1,
                last_error);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

const NormalSetEntry& NormalSet::at(const std::string& forget_id) const {
  for (const NormalSetEntry& e : entries)
    if (e.forget_id == forget_id) return e;
  throw std::out_of_range("normal set has no entry for " + forget_id);
}

void NormalSet::validate(std::optional<double> threshold) const {
  std::set<std::string> seen;
  for (const NormalSetEntry& e : entries) {
    if (!seen.insert(e.forget_id).second) throw std::invalid_argument("normal set: duplicate entry " + e.forget_id);
    if (static_cast<int>(e.companions.size()) != M)
      throw std::invalid_argument("normal set: " + e.forget_id + " has " + std::to_string(e.companions.size()) +
                                  " companions, expected " + std::to_string(M));
    for (const Companion& c : e.companions) {
      c.record.validate();
      if (c.provenance == CompanionProvenance::selected) {
        if (!c.similarity) throw std::invalid_argument("normal set: selected companion without similarity");
        if (threshold && *c.similarity < *threshold)
          throw std::invalid_argument("normal set: selected companion below threshold for " + e.forget_id);
      }
    }
  }
}

std::string to_string(NormalMode m) {
  switch (m) {
    case NormalMode::similarity: return "similarity";
    case NormalMode::endpoint: return "endpoint";
    case NormalMode::fallback_only: return "fallback-only";
  }
  return "unknown";
}

NormalMode normal_mode_from_string(const std::string& s) {
  if (s == "similarity") return NormalMode::similarity;
  if (s == "endpoint") return NormalMode::endpoint;
  if (s == "fallback-only") return NormalMode::fallback_only;
  throw std::invalid_argument("unknown normal-set mode '" + s + "'");
}

NormalSet build_normal_set(std::span<const QARecord> forget, std::span<const QARecord> retain,
                           const NormalSetOptions& options) {
  if (options.M < 0) throw std::invalid_argument("build_normal_set: M must be non-negative");
  NormalSet set;
  set.M = options.M;
  set.entries.resize(forget.size());
  for (std::size_t i = 0; i < forget.size(); ++i) set.entries[i].forget_id = forget[i].id;
  if (options.M == 0) return set;

  switch (options.mode) {
    case NormalMode::fallback_only:
      for (std::size_t i = 0; i < forget.size(); ++i)
        for (int v = 0; v < options.M; ++v) set.entries[i].companions.push_back(fallback_safe_response(forget[i], v));
      break;
    case NormalMode::similarity: {
      if (retain.empty()) throw std::invalid_argument("build_normal_set: similarity mode requires a retain corpus");
      HashedNgramEmbedder fallback_provider;
      const EmbeddingProvider* provider = options.provider;
      if (provider == nullptr) {
        std::vector<std::string> docs;
        for (const QARecord& r : retain) docs.push_back(similarity_text(r));
        fallback_provider.fit(docs);
        provider = &fallback_provider;
      }
      const SimilarityIndex index(retain, *provider);
      for (std::size_t i = 0; i < forget.size(); ++i)
        set.entries[i].companions = select_similar_retain(forget[i], index, options.M, options.threshold);
      break;
    }
    case NormalMode::endpoint: {
      if (options.transport == nullptr) throw std::invalid_argument("build_normal_set: endpoint mode needs a transport");
      options.endpoint.validate();
      // Bounded fan-out; results land at their forget-record index.
      const std::size_t cap = static_cast<std::size_t>(options.endpoint.max_in_flight);
      for (std::size_t start = 0; start < forget.size(); start += cap) {
        std::vector<std::future<std::vector<Companion>>> wave;
        for (std::size_t i = start; i < std::min(forget.size(), start + cap); ++i)
          wave.push_back(std::async(std::launch::async, [&, i] {
            return generate_via_endpoint(forget[i], options.M, options.endpoint, *options.transport, options.sleep);
          }));
        for (std::size_t k = 0; k < wave.size(); ++k) set.entries[start + k].companions = wave[k].get();
      }
      break;
    }
  }
  set.validate(options.mode == NormalMode::similarity ? std::optional<double>(options.threshold) : std::nullopt);
  return set;
}

std::string serialize_normal_set(const NormalSet& set) {
  std::string out;
  for (const NormalSetEntry& e : set.entries) {
    json companions = json::array();
    for (const Companion& c : e.companions) {
      json jc = {{"id", c.record.id},
                 {"question", c.record.question},
                 {"answer", c.record.answer},
                 {"provenance", to_string(c.provenance)}};
      if (c.similarity) jc["similarity"] = *c.similarity;
      companions.push_back(std::move(jc));
    }
    out += json{{"forget_id", e.forget_id}, {"companions", std::move(companions)}}.dump();
    out += '\n';
  }
  return out;
}

NormalSet parse_normal_set(const std::string& text) {
  NormalSet set;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const json j = json::parse(line);
    NormalSetEntry e;
    e.forget_id = j.at("forget_id").get<std::string>();
    for (const json& jc : j.at("companions")) {
      Companion c;
      c.record.id = jc.value("id", e.forget_id + "#" + std::to_string(e.companions.size()));
      c.record.question = jc.at("question").get<std::string>();
      c.record.answer = jc.at("answer").get<std::string>();
      c.provenance = companion_provenance_from_string(jc.at("provenance").get<std::string>());
      if (auto it = jc.find("similarity"); it != jc.end()) c.similarity = it->get<double>();
      e.companions.push_back(std::move(c));
    }
    set.entries.push_back(std::move(e));
  }
  set.M = set.entries.empty() ? 0 : static_cast<int>(set.entries.front().companions.size());
  set.validate();
  return set;
}

void save_normal_set(const NormalSet& set, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << serialize_normal_set(set);
}

NormalSet load_normal_set(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_normal_set(ss.str());
}

}  // namespace ulab
