// SPDX-License-Identifier: Apache-2.0

#include "ulab/harness.hpp"

#include <openssl/evp.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

namespace ulab {

using json = nlohmann::json;
namespace fs = std::filesystem;

std::string sha1_hex(const std::string& bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha1(), nullptr) != 1)
    throw std::runtime_error("sha1: digest failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 15];
  }
  return out;
}

std::string git_blob_hash(const std::string& bytes) {
  std::string framed = "blob " + std::to_string(bytes.size());
  framed += '\0';
  framed += bytes;
  return sha1_hex(framed);
}

std::string read_file(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, const std::string& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + tmp.string());
    f << bytes;
    if (!f) throw std::runtime_error("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::string to_string(RMode m) {
  switch (m) {
    case RMode::fixed: return "fixed";
    case RMode::closed_form_once: return "closed-form-once";
    case RMode::per_step: return "per-step";
  }
  return "unknown";
}

RMode r_mode_from_string(const std::string& s) {
  if (s == "fixed") return RMode::fixed;
  if (s == "closed-form-once") return RMode::closed_form_once;
  if (s == "per-step") return RMode::per_step;
  throw std::invalid_argument("unknown r mode '" + s + "'");
}

// ---------------------------------------------------------------------------
// Config.

void ExperimentConfig::validate() const {
  static const std::set<std::string> known = {"synth", "finetune", "unlearn", "eval"};
  for (const std::string& s : stages)
    if (!known.count(s)) throw std::invalid_argument("config.stages: unknown stage '" + s + "'");
  corpus.validate();
  model.validate();
  method.validate();
  for (const TrainSettings* t : {&finetune, &unlearn}) {
    if (t->epochs < 0) throw std::invalid_argument("config: epochs must be non-negative");
    if (!(t->learning_rate >= 0)) throw std::invalid_argument("config: learning rate must be non-negative");
    if (t->batch_size < 1) throw std::invalid_argument("config: batch size must be positive");
  }
  if (method.method == Method::SGA && r_sweep.empty())
    throw std::invalid_argument("config.unlearn.r_sweep: must be nonempty for SGA");
  for (double r : r_sweep)
    if (!(r <= 1.0)) throw std::invalid_argument("config.unlearn.r_sweep: values must not exceed 1");
  if (!(divergence_ppl > 1)) throw std::invalid_argument("config.unlearn.divergence_ppl: must exceed 1");
  if (normal_mode == NormalMode::endpoint) endpoint.validate();
  if (verbmem_prefix < 1) throw std::invalid_argument("config.eval.verbmem_prefix: must be positive");
  if (max_new_tokens < 1) throw std::invalid_argument("config.eval.max_new_tokens: must be positive");
}

bool ExperimentConfig::has_stage(const std::string& s) const {
  return std::find(stages.begin(), stages.end(), s) != stages.end();
}

std::vector<double> ExperimentConfig::unlearn_rates() const {
  if (method.method == Method::SGA) return r_sweep;
  return {0.0};
}

namespace {

json train_json(const TrainSettings& t) {
  return {{"epochs", t.epochs}, {"learning_rate", t.learning_rate}, {"batch_size", t.batch_size}};
}

TrainSettings train_from_json(const json& j, TrainSettings d) {
  d.epochs = j.value("epochs", d.epochs);
  d.learning_rate = j.value("learning_rate", d.learning_rate);
  d.batch_size = j.value("batch_size", d.batch_size);
  return d;
}

json method_json(const UnlearnMethodConfig& m) {
  json j = {{"method", to_string(m.method)}, {"lambda", m.lambda}, {"r", m.r},
            {"K", m.K},                      {"beta", m.beta},     {"alpha", m.alpha},
            {"divergence", m.divergence},    {"dpo_reference_margin", m.dpo_reference_margin}};
  j["normal_count"] = m.normal_count ? json(*m.normal_count) : json(nullptr);
  j["llmu_weights"] = m.llmu_weights ? json(*m.llmu_weights) : json(nullptr);
  return j;
}

json endpoint_json(const GeneratorEndpointConfig& e) {
  return {{"base_url", e.base_url},
          {"model", e.model},
          {"template_id", e.template_id},
          {"timeout_seconds", e.timeout_seconds},
          {"retries", e.retries},
          {"backoff_seconds", e.backoff_seconds},
          {"credential_env", e.credential_env},
          {"temperature", e.temperature},
          {"max_in_flight", e.max_in_flight}};
}

json results_json(const ExperimentConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["corpus"] = {{"authors", c.corpus.authors},
                 {"qa_per_author", c.corpus.qa_per_author},
                 {"forget_fraction", c.corpus.forget_fraction},
                 {"holdout_fraction", c.corpus.holdout_fraction},
                 {"known_authors", c.corpus.known_authors},
                 {"world_facts", c.corpus.world_facts}};
  j["model"] = {{"vocab_size", c.model.vocab_size}, {"dim", c.model.dim},         {"layers", c.model.layers},
                {"heads", c.model.heads},           {"context", c.model.context}};
  j["finetune"] = train_json(c.finetune);
  json u = method_json(c.method);
  u.update(train_json(c.unlearn));
  u["r_sweep"] = c.r_sweep;
  u["r_mode"] = to_string(c.r_mode);
  u["divergence_ppl"] = c.divergence_ppl;
  j["unlearn"] = u;
  j["normal"] = {{"mode", to_string(c.normal_mode)},
                 {"threshold", c.normal_threshold},
                 {"endpoint", endpoint_json(c.endpoint)},
                 {"endpoint_fixture", c.endpoint_fixture}};
  j["eval"] = {{"verbmem_prefix", c.verbmem_prefix}, {"max_new_tokens", c.max_new_tokens}};
  return j;
}

}  // namespace

json to_json(const ExperimentConfig& c) {
  json j = results_json(c);
  j["stages"] = c.stages;
  j["output_dir"] = c.output_dir.generic_string();
  return j;
}

ExperimentConfig experiment_config_from_json(const json& j) {
  static const std::set<std::string> top = {"stages", "seed", "corpus", "model", "finetune",
                                            "unlearn", "normal", "eval", "output_dir"};
  for (const auto& [k, v] : j.items())
    if (!top.count(k)) throw std::invalid_argument("config: unknown key '" + k + "'");
  ExperimentConfig c;
  c.stages = j.value("stages", c.stages);
  c.seed = j.value("seed", c.seed);
  if (j.contains("corpus")) {
    const json& s = j["corpus"];
    c.corpus.authors = s.value("authors", c.corpus.authors);
    c.corpus.qa_per_author = s.value("qa_per_author", c.corpus.qa_per_author);
    c.corpus.forget_fraction = s.value("forget_fraction", c.corpus.forget_fraction);
    c.corpus.holdout_fraction = s.value("holdout_fraction", c.corpus.holdout_fraction);
    c.corpus.known_authors = s.value("known_authors", c.corpus.known_authors);
    c.corpus.world_facts = s.value("world_facts", c.corpus.world_facts);
  }
  if (j.contains("model")) {
    const json& m = j["model"];
    c.model.vocab_size = m.value("vocab_size", c.model.vocab_size);
    c.model.dim = m.value("dim", c.model.dim);
    c.model.layers = m.value("layers", c.model.layers);
    c.model.heads = m.value("heads", c.model.heads);
    c.model.context = m.value("context", c.model.context);
  }
  c.model.seed = c.seed;
  if (j.contains("finetune")) c.finetune = train_from_json(j["finetune"], c.finetune);
  if (j.contains("unlearn")) {
    const json& u = j["unlearn"];
    c.unlearn = train_from_json(u, c.unlearn);
    if (u.contains("method")) c.method.method = method_from_string(u["method"].get<std::string>());
    c.method.lambda = u.value("lambda", c.method.lambda);
    c.method.r = u.value("r", c.method.r);
    c.method.K = u.value("K", c.method.K);
    c.method.beta = u.value("beta", c.method.beta);
    c.method.alpha = u.value("alpha", c.method.alpha);
    c.method.divergence = u.value("divergence", c.method.divergence);
    c.method.dpo_reference_margin = u.value("dpo_reference_margin", c.method.dpo_reference_margin);
    if (u.contains("normal_count") && !u["normal_count"].is_null()) c.method.normal_count = u["normal_count"].get<int>();
    if (u.contains("llmu_weights") && !u["llmu_weights"].is_null())
      c.method.llmu_weights = u["llmu_weights"].get<std::array<double, 3>>();
    c.r_sweep = u.value("r_sweep", c.r_sweep);
    if (u.contains("r_mode")) c.r_mode = r_mode_from_string(u["r_mode"].get<std::string>());
    c.divergence_ppl = u.value("divergence_ppl", c.divergence_ppl);
  }
  if (j.contains("normal")) {
    const json& n = j["normal"];
    if (n.contains("mode")) c.normal_mode = normal_mode_from_string(n["mode"].get<std::string>());
    c.normal_threshold = n.value("threshold", c.normal_threshold);
    c.endpoint_fixture = n.value("endpoint_fixture", c.endpoint_fixture);
    if (n.contains("endpoint")) {
      const json& e = n["endpoint"];
      c.endpoint.base_url = e.value("base_url", c.endpoint.base_url);
      c.endpoint.model = e.value("model", c.endpoint.model);
      c.endpoint.template_id = e.value("template_id", c.endpoint.template_id);
      c.endpoint.timeout_seconds = e.value("timeout_seconds", c.endpoint.timeout_seconds);
      c.endpoint.retries = e.value("retries", c.endpoint.retries);
      c.endpoint.backoff_seconds = e.value("backoff_seconds", c.endpoint.backoff_seconds);
      c.endpoint.credential_env = e.value("credential_env", c.endpoint.credential_env);
      c.endpoint.temperature = e.value("temperature", c.endpoint.temperature);
      c.endpoint.max_in_flight = e.value("max_in_flight", c.endpoint.max_in_flight);
    }
  }
  if (j.contains("eval")) {
    c.verbmem_prefix = j["eval"].value("verbmem_prefix", c.verbmem_prefix);
    c.max_new_tokens = j["eval"].value("max_new_tokens", c.max_new_tokens);
  }
  c.output_dir = j.value("output_dir", c.output_dir.generic_string());
  return c;
}

ExperimentConfig load_experiment_config(const fs::path& path) {
  try {
    return experiment_config_from_json(json::parse(read_file(path)));
  } catch (const json::exception& e) {
    throw std::invalid_argument("config " + path.string() + ": " + e.what());
  }
}

void save_experiment_config(const ExperimentConfig& c, const fs::path& path) {
  write_file(path, to_json(c).dump(2) + "\n");
}

std::string config_digest(const ExperimentConfig& c) { return sha1_hex(results_json(c).dump()); }

// ---------------------------------------------------------------------------
// Training.

std::vector<QARecord> Workspace::finetune_records() const {
  std::vector<QARecord> out = corpora.forget;
  for (const auto* part : {&corpora.retain, &corpora.known_authors, &corpora.world_facts})
    out.insert(out.end(), part->begin(), part->end());
  return out;
}

std::vector<QARecord> Workspace::retained_records() const {
  std::vector<QARecord> out = corpora.retain;
  for (const auto* part : {&corpora.known_authors, &corpora.world_facts}) out.insert(out.end(), part->begin(), part->end());
  return out;
}

namespace {

std::uint64_t train_epochs(Checkpoint& ck, const Vocabulary& vocab, const std::vector<QARecord>& records,
                           const TrainSettings& s, bool supervise_prompt, std::uint64_t seed) {
  if (records.empty()) throw std::invalid_argument("training set is empty");
  std::vector<TokenSequence> seqs;
  for (const QARecord& r : records) seqs.push_back(encode_qa(vocab, r.question, r.answer, supervise_prompt));
  std::vector<std::size_t> order(seqs.size());
  std::uint64_t steps = 0;
  for (int epoch = 0; epoch < s.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 rng(seed + static_cast<std::uint64_t>(epoch));
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0;
    int batches = 0;
    for (std::size_t i = 0; i < order.size(); i += static_cast<std::size_t>(s.batch_size)) {
      std::vector<TokenSequence> chunk;
      for (std::size_t k = i; k < std::min(order.size(), i + static_cast<std::size_t>(s.batch_size)); ++k)
        chunk.push_back(seqs[order[k]]);
      loss_sum += train_step(ck, make_batch(chunk, ck.config.context), s.learning_rate);
      ++batches;
      ++steps;
    }
    if ((epoch + 1) % 10 == 0 || epoch + 1 == s.epochs)
      spdlog::debug("epoch {}/{} mean loss {:.4f}", epoch + 1, s.epochs, loss_sum / batches);
  }
  return steps;
}

}  // namespace

Checkpoint train_model(const ModelConfig& model, const Vocabulary& vocab, std::vector<QARecord> records,
                       const TrainSettings& settings, bool supervise_prompt, std::uint64_t shuffle_seed,
                       std::uint64_t* steps) {
  Checkpoint ck = Checkpoint::initialize(model);
  const std::uint64_t n = train_epochs(ck, vocab, records, settings, supervise_prompt, shuffle_seed);
  if (steps) *steps += n;
  return ck;
}

Checkpoint reinforce(const Checkpoint& original, const Workspace& ws, const TrainSettings& settings) {
  Checkpoint ck = original;
  ck.moments.reset();
  ck.step = 0;
  train_epochs(ck, ws.vocab, ws.corpora.forget, settings, false, original.config.seed ^ 0x5eedULL);
  return ck;
}

namespace {

std::vector<SequenceBatch> full_batches(const Vocabulary& vocab, std::span<const QARecord> records, int context) {
  return make_qa_batches(vocab, records, 32, context, true);
}

double retain_ppl(const Checkpoint& ck, const Workspace& ws) {
  const std::vector<SequenceBatch> b = full_batches(ws.vocab, ws.corpora.retain, ws.context);
  return perplexity(ck, b);
}

SequenceBatch qa_batch(const Vocabulary& vocab, const std::vector<std::pair<std::string, std::string>>& qa, int context) {
  std::vector<TokenSequence> seqs;
  for (const auto& [q, a] : qa) seqs.push_back(encode_qa(vocab, q, a));
  return make_batch(seqs, context);
}

struct StepData {
  SequenceBatch forget;
  std::vector<SequenceBatch> normals;
  SequenceBatch retain;
  SequenceBatch refusal;
  SequenceBatch random;
};

std::vector<StepData> step_data(const Workspace& ws, const NormalSet& normals, int slots, int batch_size,
                                std::uint64_t seed) {
  const auto& forget = ws.corpora.forget;
  const auto& retain = ws.corpora.retain;
  if (forget.empty()) throw std::invalid_argument("unlearn: empty forget set");
  if (retain.empty()) throw std::invalid_argument("unlearn: empty retain set");
  if (slots > normals.M && normals.M >= 0 && slots > 0)
    throw std::invalid_argument("unlearn: " + std::to_string(slots) + " normal losses requested but the normal set has " +
                                std::to_string(normals.M) + " companions per record");
  std::mt19937_64 rng(seed);
  std::vector<StepData> out;
  std::size_t retain_cursor = 0;
  for (std::size_t i = 0; i < forget.size(); i += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(forget.size(), i + static_cast<std::size_t>(batch_size));
    std::vector<std::pair<std::string, std::string>> f, ret, refusal, random;
    std::vector<std::vector<std::pair<std::string, std::string>>> norm(static_cast<std::size_t>(slots));
    for (std::size_t k = i; k < end; ++k) {
      f.emplace_back(forget[k].question, forget[k].answer);
      const QARecord& r = retain[retain_cursor++ % retain.size()];
      ret.emplace_back(r.question, r.answer);
      refusal.emplace_back(forget[k].question, fallback_safe_response(forget[k], 0).record.answer);
      const QARecord& other = retain[std::uniform_int_distribution<std::size_t>(0, retain.size() - 1)(rng)];
      random.emplace_back(forget[k].question, other.answer);
      if (slots > 0) {
        const NormalSetEntry& e = normals.at(forget[k].id);
        for (int s = 0; s < slots; ++s) {
          const QARecord& c = e.companions[static_cast<std::size_t>(s)].record;
          norm[static_cast<std::size_t>(s)].emplace_back(c.question, c.answer);
        }
      }
    }
    StepData d;
    d.forget = qa_batch(ws.vocab, f, ws.context);
    for (const auto& n : norm) d.normals.push_back(qa_batch(ws.vocab, n, ws.context));
    d.retain = qa_batch(ws.vocab, ret, ws.context);
    d.refusal = qa_batch(ws.vocab, refusal, ws.context);
    d.random = qa_batch(ws.vocab, random, ws.context);
    out.push_back(std::move(d));
  }
  return out;
}

SequenceBatch concat_batches(const std::vector<SequenceBatch>& parts) {
  int length = 0, batch = 0;
  for (const SequenceBatch& b : parts) {
    length = std::max(length, b.length);
    batch += b.batch;
  }
  SequenceBatch out;
  out.batch = batch;
  out.length = length;
  const std::size_t n = static_cast<std::size_t>(batch) * static_cast<std::size_t>(length);
  out.inputs.assign(n, Vocabulary::kPad);
  out.targets.assign(n, Vocabulary::kPad);
  out.mask.assign(n, 0.0);
  int row = 0;
  for (const SequenceBatch& b : parts)
    for (int r = 0; r < b.batch; ++r, ++row)
      for (int t = 0; t < b.length; ++t) {
        const std::size_t src = static_cast<std::size_t>(r * b.length + t);
        const std::size_t dst = static_cast<std::size_t>(row * length + t);
        out.inputs[dst] = b.inputs[src];
        out.targets[dst] = b.targets[src];
        out.mask[dst] = b.mask[src];
      }
  return out;
}

double closed_form_rate(const Checkpoint& ck, const SequenceBatch& forget, std::span<const SequenceBatch> normals, int K) {
  const GradientBundle b = compute_gradient_bundle(ck, forget, normals, K);
  return optimal_smoothing_rate(b).r_star;
}

}  // namespace

UnlearnOutcome unlearn_gradient(const Checkpoint& original, const Workspace& ws, const NormalSet& normals,
                                const UnlearnMethodConfig& method, const TrainSettings& settings, RMode r_mode,
                                double divergence_ppl) {
  method.validate();
  const int slots = method.method == Method::SGA ? method.normal_slots() : 0;
  const std::vector<StepData> data = step_data(ws, normals, slots, settings.batch_size, original.config.seed ^ 0xabcdULL);

  UnlearnOutcome out;
  out.checkpoint = original;
  out.checkpoint.moments.reset();
  out.checkpoint.step = 0;
  out.checkpoint.provenance = Provenance::unlearned;
  Checkpoint& ck = out.checkpoint;

  UnlearnMethodConfig cfg = method;
  if (method.method == Method::SGA && r_mode == RMode::closed_form_once) {
    std::vector<SequenceBatch> fs, ns;
    for (const StepData& d : data) fs.push_back(d.forget);
    std::vector<SequenceBatch> per_slot;
    for (int s = 0; s < slots; ++s) {
      std::vector<SequenceBatch> parts;
      for (const StepData& d : data) parts.push_back(d.normals[static_cast<std::size_t>(s)]);
      per_slot.push_back(concat_batches(parts));
    }
    cfg.r = closed_form_rate(original, concat_batches(fs), per_slot, cfg.K);
  }
  out.r_used = cfg.r;

  for (int epoch = 0; epoch < settings.epochs && !out.diverged; ++epoch) {
    for (const StepData& d : data) {
      if (method.method == Method::SGA && r_mode == RMode::per_step) cfg.r = closed_form_rate(ck, d.forget, d.normals, cfg.K);
      ObjectiveInputs in;
      in.forget = &d.forget;
      in.normals = d.normals;
      in.retain = &d.retain;
      in.refusal = &d.refusal;
      in.random = &d.random;
      in.reference = &original;
      Tape tape;
      ModelGraph graph(tape, ck);
      const LossBreakdown loss = evaluate_objective(graph, cfg, in);
      out.losses.push_back(loss.total);
      if (!std::isfinite(loss.total)) {
        out.diverged = true;
        out.diverged_at_step = out.steps;
        break;
      }
      tape.backward(loss.total_var);
      adamw_update(ck, graph.gradient(), settings.learning_rate);
      ++out.steps;
    }
    if (out.diverged) break;
    out.last_retain_ppl = retain_ppl(ck, ws);
    if (!(out.last_retain_ppl <= divergence_ppl)) {
      out.diverged = true;
      out.diverged_at_step = out.steps;
      spdlog::warn("{} r={} diverged at step {} (retain PPL {:.4g})", to_string(method.method), cfg.r, out.steps,
                   out.last_retain_ppl);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation.

double rouge_recall(const LanguageModel& model, const Vocabulary& vocab, std::span<const QARecord> records,
                    int max_new_tokens) {
  if (records.empty()) throw std::invalid_argument("rouge_recall: empty record set");
  double total = 0;
  for (const QARecord& r : records) total += rouge_l(generate_answer(model, vocab, r.question, max_new_tokens), r.answer).recall;
  return total / static_cast<double>(records.size());
}

double sequence_perplexity(const LanguageModel& model, const Vocabulary& vocab, std::span<const QARecord> records) {
  if (records.empty()) throw std::invalid_argument("sequence_perplexity: empty record set");
  double nll = 0, count = 0;
  for (const QARecord& r : records) {
    const TokenSequence s = encode_qa(vocab, r.question, r.answer, true);
    const std::span<const int> inputs(s.ids.data(), s.ids.size() - 1);
    const Matrix lp = model.next_token_log_probs(inputs);
    for (std::size_t t = 0; t + 1 < s.ids.size(); ++t) nll -= lp(static_cast<Eigen::Index>(t), s.ids[t + 1]);
    count += static_cast<double>(s.ids.size() - 1);
  }
  return std::exp(nll / count);
}

namespace {

struct Generations {
  std::vector<std::string> text;
};

Generations generate_all(const LanguageModel& model, const Vocabulary& vocab, std::span<const QARecord> records,
                         int max_new_tokens) {
  Generations g;
  for (const QARecord& r : records) g.text.push_back(generate_answer(model, vocab, r.question, max_new_tokens));
  return g;
}

std::vector<double> truth_ratios(const LanguageModel& model, const Vocabulary& vocab, std::span<const QARecord> records) {
  std::vector<double> out;
  for (const QARecord& r : records) {
    const AnswerScores s = answer_scores(model, vocab, r);
    out.push_back(truth_ratio(s.perturbed, s.paraphrase));
  }
  return out;
}

double mean(const std::vector<double>& v) {
  if (v.empty()) throw std::invalid_argument("mean of an empty set");
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

std::vector<double> nll_scores(const LanguageModel& model, const Vocabulary& vocab, std::span<const QARecord> records) {
  std::vector<double> out;
  for (const QARecord& r : records) out.push_back(answer_nll(model, vocab, r));
  return out;
}

BleuRouge forget_bleu_rouge(const Generations& g, std::span<const QARecord> forget) {
  BleuRouge s;
  for (std::size_t i = 0; i < forget.size(); ++i) {
    s.bleu += bleu(g.text[i], forget[i].answer);
    s.rouge += rouge_l(g.text[i], forget[i].answer).recall;
  }
  s.bleu /= static_cast<double>(forget.size());
  s.rouge /= static_cast<double>(forget.size());
  return s;
}

/// (answer probability, truth-ratio score, ROUGE-L recall) for one subset.
std::array<double, 3> utility_triple(const LanguageModel& model, const Vocabulary& vocab,
                                     std::span<const QARecord> records, bool ratio_probability, int max_new_tokens,
                                     const Generations* gens) {
  std::vector<double> prob, truth, rouge;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const QARecord& r = records[i];
    const AnswerScores s = answer_scores(model, vocab, r);
    if (ratio_probability) {
      const double ratio = answer_probability_ratio(s.correct, s.perturbed);
      prob.push_back(ratio / (1.0 + ratio));
    } else {
      prob.push_back(s.correct);
    }
    truth.push_back(std::max(0.0, 1.0 - truth_ratio(s.perturbed, s.paraphrase)));
    const std::string text = gens ? gens->text[i] : generate_answer(model, vocab, r.question, max_new_tokens);
    rouge.push_back(rouge_l(text, r.answer).recall);
  }
  return {mean(prob), mean(truth), mean(rouge)};
}

}  // namespace

EvalReference make_eval_reference(const LanguageModel& retained, const Workspace& ws, int max_new_tokens) {
  EvalReference ref;
  ref.retained = &retained;
  ref.retained_truth_ratios = truth_ratios(retained, ws.vocab, ws.corpora.forget);
  ref.retained_forget_scores =
      forget_bleu_rouge(generate_all(retained, ws.vocab, ws.corpora.forget, max_new_tokens), ws.corpora.forget);
  if (!ws.corpora.holdout.empty())
    ref.retained_auc = mia_auc(nll_scores(retained, ws.vocab, ws.corpora.forget), nll_scores(retained, ws.vocab, ws.corpora.holdout)).auc;
  return ref;
}

MetricReport evaluate_model(const LanguageModel& model, const Workspace& ws, const EvalReference& ref,
                            int verbmem_prefix, int max_new_tokens) {
  const auto& c = ws.corpora;
  MetricReport m;
  const Generations fg = generate_all(model, ws.vocab, c.forget, max_new_tokens);
  const Generations rg = generate_all(model, ws.vocab, c.retain, max_new_tokens);

  const BleuRouge f = forget_bleu_rouge(fg, c.forget);
  m.forget_rouge = f.rouge;
  m.bleu = f.bleu;
  m.fq_gap = fq_gap(f, ref.retained_forget_scores);

  double rr = 0, km_f = 0, km_r = 0;
  for (std::size_t i = 0; i < c.retain.size(); ++i) {
    const RougeScore s = rouge_l(rg.text[i], c.retain[i].answer);
    rr += s.recall;
    km_r += s.f1;
  }
  for (std::size_t i = 0; i < c.forget.size(); ++i) km_f += rouge_l(fg.text[i], c.forget[i].answer).f1;
  m.retain_rouge = rr / static_cast<double>(c.retain.size());
  m.knowmem_retain = 100.0 * km_r / static_cast<double>(c.retain.size());
  m.knowmem_forget = 100.0 * km_f / static_cast<double>(c.forget.size());

  m.forget_quality = forget_quality(truth_ratios(model, ws.vocab, c.forget), ref.retained_truth_ratios);

  std::vector<double> nine;
  for (double v : utility_triple(model, ws.vocab, c.retain, false, max_new_tokens, &rg)) nine.push_back(v);
  const std::vector<QARecord>* subsets[] = {&c.known_authors, &c.world_facts};
  for (const auto* subset : subsets) {
    // Without this subset the retain triple stands in, so MU keeps nine terms.
    const std::array<double, 3> t = subset->empty() ? std::array<double, 3>{nine[0], nine[1], nine[2]}
                                                    : utility_triple(model, ws.vocab, *subset, true, max_new_tokens, nullptr);
    nine.insert(nine.end(), t.begin(), t.end());
  }
  m.model_utility = model_utility(nine);

  m.perplexity = sequence_perplexity(model, ws.vocab, c.retain);

  std::vector<std::string> passages;
  for (const QARecord& r : c.forget) passages.push_back(record_passage(r));
  m.verbmem = verbmem(model, ws.vocab, passages, verbmem_prefix).score;

  if (!c.holdout.empty()) {
    m.mia_auc = mia_auc(nll_scores(model, ws.vocab, c.forget), nll_scores(model, ws.vocab, c.holdout)).auc;
    m.privleak = privleak(*m.mia_auc, ref.retained_auc);
  }
  return m;
}

// ---------------------------------------------------------------------------
// probe-r

ProbeResult probe_r(const Checkpoint& ck, const Workspace& ws, const NormalSet& normals) {
  if (normals.M < 1) throw std::invalid_argument("probe-r: the normal set has no companions");
  const int K = normals.M + 1;
  std::vector<GradientBundle> bundles;
  std::vector<std::string> ids;
  std::vector<SequenceBatch> all_forget;
  std::vector<std::vector<SequenceBatch>> all_normals(static_cast<std::size_t>(normals.M));
  for (const QARecord& r : ws.corpora.forget) {
    const NormalSetEntry& e = normals.at(r.id);
    const SequenceBatch f = qa_batch(ws.vocab, {{r.question, r.answer}}, ws.context);
    std::vector<SequenceBatch> ns;
    for (int s = 0; s < normals.M; ++s) {
      const QARecord& c = e.companions[static_cast<std::size_t>(s)].record;
      ns.push_back(qa_batch(ws.vocab, {{c.question, c.answer}}, ws.context));
      all_normals[static_cast<std::size_t>(s)].push_back(ns.back());
    }
    all_forget.push_back(f);
    bundles.push_back(compute_gradient_bundle(ck, f, ns, K));
    ids.push_back(r.id);
  }
  ProbeResult out;
  out.profile = sign_profile(std::span<const GradientBundle>(bundles), std::span<const std::string>(ids));
  std::vector<SequenceBatch> slot_batches;
  for (const auto& parts : all_normals) slot_batches.push_back(concat_batches(parts));
  try {
    out.set_rate = optimal_smoothing_rate(compute_gradient_bundle(ck, concat_batches(all_forget), slot_batches, K));
  } catch (const std::domain_error&) {
    out.set_rate.reset();
  }
  return out;
}

std::string serialize_sign_profile(const SignProfile& p) {
  std::string out;
  for (const SignProfileRow& r : p.rows) {
    out += json{{"instance_id", r.instance_id}, {"inner_product", r.inner_product}, {"sign", r.sign}}.dump();
    out += '\n';
  }
  return out;
}

SignProfile parse_sign_profile(const std::string& text) {
  SignProfile p;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const json j = json::parse(line);
    SignProfileRow r{j.at("instance_id").get<std::string>(), j.at("inner_product").get<double>(), j.at("sign").get<int>()};
    if (r.sign > 0) ++p.positive;
    else if (r.sign < 0) ++p.negative;
    else ++p.zero;
    p.rows.push_back(std::move(r));
  }
  return p;
}

// ---------------------------------------------------------------------------
// Pipeline.

namespace {

const std::vector<std::string> kStageOrder = {"synth", "finetune", "unlearn", "eval"};

struct Keys {
  std::string synth, finetune, unlearn, eval;
  const std::string& of(const std::string& s) const {
    if (s == "synth") return synth;
    if (s == "finetune") return finetune;
    if (s == "unlearn") return unlearn;
    return eval;
  }
};

Keys stage_keys(const ExperimentConfig& c) {
  const json all = results_json(c);
  Keys k;
  k.synth = sha1_hex(json{{"seed", c.seed}, {"corpus", all["corpus"]}, {"vocab", c.model.vocab_size}}.dump());
  k.finetune = sha1_hex(k.synth + json{{"model", all["model"]}, {"finetune", all["finetune"]}}.dump());
  k.unlearn = sha1_hex(k.finetune + json{{"unlearn", all["unlearn"]}, {"normal", all["normal"]}}.dump());
  k.eval = sha1_hex(k.unlearn + all["eval"].dump());
  return k;
}

std::string run_name(const ExperimentConfig& c, double r) {
  std::string name = to_string(c.method.method);
  if (c.method.method == Method::SGA) name += "-r" + format_number(r);
  return name;
}

class Pipeline {
 public:
  explicit Pipeline(const ExperimentConfig& c) : c_(c), root_(c.output_dir), keys_(stage_keys(c)) {
    manifest_ = {{"config", to_json(c)}, {"config_digest", config_digest(c)}, {"stages", json::object()}};
    manifest_["config"].erase("output_dir");
    manifest_["config"].erase("stages");
    if (fs::exists(root_ / "manifest.json")) {
      try {
        previous_ = json::parse(read_file(root_ / "manifest.json"));
      } catch (const std::exception&) {
        previous_ = json::object();
      }
    }
  }

  RunResult run() {
    json timings = json::object();
    for (const std::string& stage : kStageOrder) {
      const auto t0 = std::chrono::steady_clock::now();
      try {
        if (reusable(stage)) {
          manifest_["stages"][stage] = previous_["stages"][stage];
          result_.stages_reused.push_back(stage);
          continue;
        }
        if (!c_.has_stage(stage)) continue;
        current_ = json{{"key", keys_.of(stage)}, {"files", json::object()}};
        if (stage == "synth") synth();
        else if (stage == "finetune") finetune();
        else if (stage == "unlearn") unlearn();
        else evaluate();
        manifest_["stages"][stage] = current_;
        result_.stages_run.push_back(stage);
      } catch (const std::exception& e) {
        manifest_["failed_stage"] = stage;
        manifest_["error"] = e.what();
        finish(timings);
        throw StageError(stage, e.what());
      }
      timings[stage] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }
    finish(timings);
    return result_;
  }

 private:
  bool reusable(const std::string& stage) const {
    if (!previous_.contains("stages") || !previous_["stages"].contains(stage)) return false;
    const json& s = previous_["stages"][stage];
    if (s.value("key", "") != keys_.of(stage)) return false;
    for (const auto& [path, hash] : s["files"].items()) {
      if (!fs::exists(root_ / path)) return false;
      if (git_blob_hash(read_file(root_ / path)) != hash.get<std::string>()) return false;
    }
    return true;
  }

  bool have(const std::string& stage) const { return manifest_["stages"].contains(stage); }

  void require(const std::string& stage, const std::string& by) const {
    if (!have(stage)) throw std::runtime_error(by + " requires a completed " + stage + " stage");
  }

  void put(const std::string& rel, const std::string& bytes) {
    write_file(root_ / rel, bytes);
    current_["files"][rel] = git_blob_hash(bytes);
  }

  void put_checkpoint(const std::string& rel, const Checkpoint& ck) {
    put(rel, serialize_checkpoint(ck));
    current_["checkpoints"].push_back(rel);
  }

  Workspace workspace() const {
    Workspace ws;
    ws.vocab = Vocabulary::load(root_ / "corpus/tokenizer.json");
    ws.corpora.forget = read_corpus(root_ / "corpus/forget.jsonl");
    ws.corpora.retain = read_corpus(root_ / "corpus/retain.jsonl");
    ws.corpora.holdout = read_corpus(root_ / "corpus/holdout.jsonl");
    ws.corpora.known_authors = read_corpus(root_ / "corpus/known_authors.jsonl");
    ws.corpora.world_facts = read_corpus(root_ / "corpus/world_facts.jsonl");
    ws.context = c_.model.context;
    return ws;
  }

  void synth() {
    const Corpora corpora = synth_corpus(c_.corpus, c_.seed);
    put("corpus/forget.jsonl", serialize_corpus(corpora.forget));
    put("corpus/retain.jsonl", serialize_corpus(corpora.retain));
    put("corpus/holdout.jsonl", serialize_corpus(corpora.holdout));
    put("corpus/known_authors.jsonl", serialize_corpus(corpora.known_authors));
    put("corpus/world_facts.jsonl", serialize_corpus(corpora.world_facts));
    std::vector<std::string> texts;
    for (const auto* part : {&corpora.forget, &corpora.retain, &corpora.holdout, &corpora.known_authors, &corpora.world_facts})
      for (const QARecord& r : *part) {
        texts.push_back(record_passage(r));
        if (r.paraphrased_answer) texts.push_back(*r.paraphrased_answer);
        for (const std::string& p : r.perturbed_answers) texts.push_back(p);
      }
    put("corpus/tokenizer.json", Vocabulary::train(texts, c_.model.vocab_size).to_json().dump() + "\n");
  }

  void finetune() {
    require("synth", "finetune");
    const Workspace ws = workspace();
    ModelConfig mc = c_.model;
    mc.seed = c_.seed;
    Checkpoint original = train_model(mc, ws.vocab, ws.finetune_records(), c_.finetune, true, c_.seed, &result_.training_steps);
    original.provenance = Provenance::finetuned;
    Checkpoint retained = train_model(mc, ws.vocab, ws.retained_records(), c_.finetune, true, c_.seed, &result_.training_steps);
    retained.provenance = Provenance::retained;
    put_checkpoint("ckpt/finetuned.ulab", original);
    put_checkpoint("ckpt/retained.ulab", retained);
  }

  NormalSet normal_set(const Workspace& ws) {
    NormalSetOptions o;
    o.mode = c_.normal_mode;
    o.M = std::max(c_.method.normal_slots(), 1);
    o.threshold = c_.normal_threshold;
    o.endpoint = c_.endpoint;
    std::unique_ptr<FixtureTransport> fixture;
    HttpTransport http;
    if (o.mode == NormalMode::endpoint) {
      if (!c_.endpoint_fixture.empty())
        fixture.reset(new FixtureTransport(FixtureTransport::from_file(c_.endpoint_fixture)));
      o.transport = fixture ? static_cast<ChatTransport*>(fixture.get()) : &http;
      o.sleep = [](std::chrono::duration<double>) {};
    }
    return build_normal_set(ws.corpora.forget, ws.corpora.retain, o);
  }

  void unlearn() {
    require("finetune", "unlearn");
    const Workspace ws = workspace();
    const Checkpoint original = load_checkpoint(root_ / "ckpt/finetuned.ulab");
    const NormalSet normals = normal_set(ws);
    put("normal/normal_set.jsonl", serialize_normal_set(normals));

    std::map<std::string, json> done;
    current_["runs"] = json::array();
    if (c_.method.method == Method::TaskVector || c_.method.method == Method::WHP) {
      TrainSettings s = c_.unlearn;
      Checkpoint reinforced = reinforce(original, ws, s);
      reinforced.provenance = Provenance::finetuned;
      put_checkpoint("ckpt/reinforced.ulab", reinforced);
      std::string rel;
      if (c_.method.method == Method::TaskVector) {
        Checkpoint tv = original;
        tv.theta = task_vector_unlearn(original.theta, reinforced.theta);
        tv.moments.reset();
        tv.step = 0;
        tv.provenance = Provenance::unlearned;
        rel = "ckpt/unlearned-TaskVector.ulab";
        put_checkpoint(rel, tv);
      }
      current_["runs"].push_back({{"name", to_string(c_.method.method)}, {"method", to_string(c_.method.method)},
                                  {"r", nullptr}, {"checkpoint", rel.empty() ? json(nullptr) : json(rel)},
                                  {"steps", 0}, {"diverged", false}, {"diverged_at_step", nullptr}});
      return;
    }
    for (double r : c_.unlearn_rates()) {
      const std::string name = run_name(c_, r);
      if (done.count(name)) {
        current_["runs"].push_back(done[name]);
        continue;
      }
      UnlearnMethodConfig m = c_.method;
      m.r = r;
      spdlog::info("unlearn {}", name);
      const UnlearnOutcome o = unlearn_gradient(original, ws, normals, m, c_.unlearn, c_.r_mode, c_.divergence_ppl);
      result_.training_steps += o.steps;
      const std::string rel = "ckpt/unlearned-" + name + ".ulab";
      put_checkpoint(rel, o.checkpoint);
      json run = {{"name", name},
                  {"method", to_string(m.method)},
                  {"r", c_.method.method == Method::SGA ? json(r) : json(nullptr)},
                  {"r_used", o.r_used},
                  {"checkpoint", rel},
                  {"steps", o.steps},
                  {"diverged", o.diverged},
                  {"diverged_at_step", o.diverged_at_step ? json(*o.diverged_at_step) : json(nullptr)}};
      done[name] = run;
      current_["runs"].push_back(run);
    }
  }

  void evaluate() {
    require("unlearn", "eval");
    const Workspace ws = workspace();
    const Checkpoint original = load_checkpoint(root_ / "ckpt/finetuned.ulab");
    const Checkpoint retained = load_checkpoint(root_ / "ckpt/retained.ulab");
    const CheckpointModel original_model(original), retained_model(retained);
    const EvalReference ref = make_eval_reference(retained_model, ws, c_.max_new_tokens);
    const json runs = manifest_["stages"]["unlearn"]["runs"];

    json reports = json::array();
    std::vector<MetricReport> rows;
    auto add = [&](MetricReport m, const std::string& name) {
      m.inputs_digest = sha1_hex(keys_.eval + name);
      m.validate();
      reports.push_back(to_json(m));
      rows.push_back(std::move(m));
    };
    {
      MetricReport m = evaluate_model(original_model, ws, ref, c_.verbmem_prefix, c_.max_new_tokens);
      m.method = "finetuned";
      add(m, "finetuned");
      MetricReport rm = evaluate_model(retained_model, ws, ref, c_.verbmem_prefix, c_.max_new_tokens);
      rm.method = "retained";
      add(rm, "retained");
    }
    std::map<std::string, MetricReport> cache;
    std::vector<std::pair<std::string, std::unique_ptr<LanguageModel>>> probe_models;
    std::vector<std::unique_ptr<Checkpoint>> owned;
    for (const json& run : runs) {
      const std::string name = run["name"];
      MetricReport m;
      if (auto it = cache.find(name); it != cache.end()) {
        m = it->second;
      } else {
        std::unique_ptr<LanguageModel> model;
        if (run["method"] == "WHP") {
          owned.push_back(std::make_unique<Checkpoint>(load_checkpoint(root_ / "ckpt/reinforced.ulab")));
          model = std::make_unique<WhpModel>(original, *owned.back(), c_.method.alpha);
        } else {
          owned.push_back(std::make_unique<Checkpoint>(load_checkpoint(root_ / run["checkpoint"].get<std::string>())));
          model = std::make_unique<CheckpointModel>(*owned.back());
        }
        m = evaluate_model(*model, ws, ref, c_.verbmem_prefix, c_.max_new_tokens);
        m.method = run["method"];
        if (!run["r"].is_null()) m.r = run["r"].get<double>();
        m.diverged = run["diverged"];
        if (!run["diverged_at_step"].is_null()) m.diverged_at_step = run["diverged_at_step"].get<std::uint64_t>();
        cache[name] = m;
        probe_models.emplace_back(name, std::move(model));
      }
      add(m, name);
    }

    put("reports/metrics.json", reports.dump(2) + "\n");
    std::string csv = metric_csv_header() + "\n";
    for (const MetricReport& m : rows) csv += metric_csv_row(m) + "\n";
    put("reports/table.csv", csv);

    const NormalSet normals = load_normal_set(root_ / "normal/normal_set.jsonl");
    const ProbeResult probe = probe_r(original, ws, normals);
    put("reports/sign_profile.jsonl", serialize_sign_profile(probe.profile));

    // Token probabilities of the first forget answer under each model.
    std::vector<std::pair<std::string, const LanguageModel*>> models = {{"finetuned", &original_model},
                                                                        {"retained", &retained_model}};
    for (const auto& [name, model] : probe_models) models.emplace_back(name, model.get());
    const QARecord& first = ws.corpora.forget.front();
    std::string tp;
    for (const TokenProbabilityRow& row : token_probability_report(models, encode_prompt(ws.vocab, first.question),
                                                                   encode_answer(ws.vocab, first.answer)))
      tp += json{{"model", row.model}, {"position", row.position}, {"token", row.token},
                 {"text", ws.vocab.token(row.token)}, {"probability", row.probability}}.dump() + "\n";
    put("reports/token_probs.jsonl", tp);

    std::string summary = "forget instances: " + std::to_string(probe.profile.total()) +
                          ", <g_f,u> positive " + std::to_string(probe.profile.positive) + ", negative " +
                          std::to_string(probe.profile.negative) + ", zero " + std::to_string(probe.profile.zero) + "\n";
    if (probe.set_rate) summary += "closed-form r* on the forget set: " + format_number(probe.set_rate->r_star) + "\n";
    if (auto best = best_r_row(rows)) summary += "best r: " + format_number(*best->r) + "\n";
    put("reports/summary.txt", summary);
    current_["reports"] = reports;
  }

  void finish(const json& timings) {
    json files = json::object();
    for (const auto& [stage, s] : manifest_["stages"].items())
      for (const auto& [path, hash] : s["files"].items()) files[path] = hash;
    manifest_["files"] = files;
    write_file(root_ / "manifest.json", manifest_.dump(2) + "\n");
    write_file(root_ / "timings.json", timings.dump(2) + "\n");
    result_.manifest = manifest_;
  }

  const ExperimentConfig& c_;
  fs::path root_;
  Keys keys_;
  json manifest_;
  json previous_ = json::object();
  json current_;
  RunResult result_;
};

}  // namespace

RunResult run_pipeline(const ExperimentConfig& config) {
  config.validate();
  fs::create_directories(config.output_dir);
  Pipeline p(config);
  return p.run();
}

void verify_manifest(const json& manifest, const fs::path& root) {
  for (const auto& [path, hash] : manifest.at("files").items()) {
    if (!fs::exists(root / path)) throw std::runtime_error("manifest: missing file " + path);
    if (git_blob_hash(read_file(root / path)) != hash.get<std::string>())
      throw std::runtime_error("manifest: hash mismatch for " + path);
  }
}

std::vector<std::pair<double, MetricReport>> sweep_r(const ExperimentConfig& config) {
  if (config.method.method != Method::SGA) throw std::invalid_argument("sweep_r: method must be SGA");
  const RunResult res = run_pipeline(config);
  if (!res.manifest["stages"].contains("eval")) throw std::runtime_error("sweep_r: eval stage did not run");
  std::map<double, MetricReport> by_r;
  for (const json& j : res.manifest["stages"]["eval"]["reports"]) {
    MetricReport m = metric_report_from_json(j);
    if (m.method == "SGA" && m.r) by_r[*m.r] = m;
  }
  std::vector<std::pair<double, MetricReport>> out;
  for (double r : config.r_sweep) out.emplace_back(r, by_r.at(r));
  return out;
}

std::optional<MetricReport> best_r_row(const std::vector<MetricReport>& rows) {
  std::optional<MetricReport> best;
  auto key = [](const MetricReport& m) {
    return std::make_pair(m.forget_quality.value_or(-1.0), m.retain_rouge.value_or(-1.0));
  };
  for (const MetricReport& m : rows) {
    if (m.method != "SGA" || !m.r || *m.r == 0.0 || m.diverged) continue;
    if (!best || key(m) > key(*best)) best = m;
  }
  return best;
}

std::vector<MetricReport> export_tables(const std::vector<fs::path>& manifests, const fs::path& out_dir) {
  if (manifests.empty()) throw std::invalid_argument("export_tables: no manifests");
  std::vector<MetricReport> rows;
  std::set<std::string> seen;
  for (const fs::path& p : manifests) {
    const json m = json::parse(read_file(p));
    const std::string digest = m.value("config_digest", "");
    const json* reports = nullptr;
    if (m.contains("stages") && m["stages"].contains("eval")) reports = &m["stages"]["eval"]["reports"];
    if (reports == nullptr || reports->empty()) {
      if (!seen.insert(digest + "|n/a").second) continue;
      MetricReport empty;
      empty.method = m.contains("config") ? m["config"]["unlearn"].value("method", std::string("n/a")) : "n/a";
      rows.push_back(empty);
      continue;
    }
    for (const json& j : *reports) {
      MetricReport r = metric_report_from_json(j);
      const std::string key = digest + "|" + r.method + "|" + (r.r ? format_number(*r.r) : "-");
      if (!seen.insert(key).second) continue;
      rows.push_back(std::move(r));
    }
  }
  std::string csv = metric_csv_header() + "\n";
  for (const MetricReport& m : rows) csv += metric_csv_row(m) + "\n";
  write_file(out_dir / "table.csv", csv);

  std::vector<MetricReport> sga;
  for (const MetricReport& m : rows)
    if (m.method == "SGA" && m.r && *m.r != 0.0 && !m.diverged) sga.push_back(m);
  std::stable_sort(sga.begin(), sga.end(), [](const MetricReport& a, const MetricReport& b) {
    return std::make_pair(a.forget_quality.value_or(-1.0), a.retain_rouge.value_or(-1.0)) >
           std::make_pair(b.forget_quality.value_or(-1.0), b.retain_rouge.value_or(-1.0));
  });
  std::string summary = "rows: " + std::to_string(rows.size()) + "\n";
  for (std::size_t i = 0; i < std::min<std::size_t>(2, sga.size()); ++i)
    summary += "top-" + std::to_string(i + 1) + " r = " + format_number(*sga[i].r) +
               " (FQ " + format_number(sga[i].forget_quality.value_or(NAN)) + ", R-RL " +
               format_number(sga[i].retain_rouge.value_or(NAN)) + ")\n";
  if (sga.empty()) summary += "no SGA rows with r != 0\n";
  write_file(out_dir / "summary.txt", summary);
  return rows;
}

}  // namespace ulab
