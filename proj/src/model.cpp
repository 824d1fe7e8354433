// SPDX-License-Identifier: Apache-2.0

#include "ulab/model.hpp"

#include "ulab/tokenizer.hpp"

#include <array>
#include <bit>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace ulab {

void ModelConfig::validate() const {
  if (vocab_size <= 0 || dim <= 0 || layers <= 0 || heads <= 0 || context <= 0)
    throw std::invalid_argument("ModelConfig: all sizes must be positive");
  if (dim % heads != 0)
    throw std::invalid_argument("ModelConfig: dim " + std::to_string(dim) + " not divisible by heads " +
                                std::to_string(heads));
}

std::vector<ParamSlot> parameter_layout(const ModelConfig& c) {
  c.validate();
  std::vector<ParamSlot> slots;
  Eigen::Index offset = 0;
  auto add = [&](std::string name, Eigen::Index r, Eigen::Index k) {
    slots.push_back({std::move(name), r, k, offset});
    offset += r * k;
  };
  const Eigen::Index d = c.dim;
  add("tok_emb", c.vocab_size, d);
  add("pos_emb", c.context, d);
  for (int l = 0; l < c.layers; ++l) {
    const std::string p = "h" + std::to_string(l) + ".";
    add(p + "ln1.g", 1, d);
    add(p + "ln1.b", 1, d);
    add(p + "attn.w_qkv", d, 3 * d);
    // Query and value biases only: a key bias shifts every score in a row
    // equally, so softmax ignores it and its gradient is identically zero.
    add(p + "attn.b_qv", 1, 2 * d);
    add(p + "attn.w_out", d, d);
    add(p + "attn.b_out", 1, d);
    add(p + "ln2.g", 1, d);
    add(p + "ln2.b", 1, d);
    add(p + "mlp.w_fc", d, 4 * d);
    add(p + "mlp.b_fc", 1, 4 * d);
    add(p + "mlp.w_proj", 4 * d, d);
    add(p + "mlp.b_proj", 1, d);
  }
  add("lnf.g", 1, d);
  add("lnf.b", 1, d);
  return slots;
}

std::size_t ModelConfig::parameter_count() const {
  const auto slots = parameter_layout(*this);
  const ParamSlot& last = slots.back();
  return static_cast<std::size_t>(last.offset + last.rows * last.cols);
}

std::string to_string(Provenance p) {
  switch (p) {
    case Provenance::original: return "original";
    case Provenance::finetuned: return "finetuned";
    case Provenance::retained: return "retained";
    case Provenance::unlearned: return "unlearned";
  }
  return "unknown";
}

Provenance provenance_from_string(const std::string& s) {
  if (s == "original") return Provenance::original;
  if (s == "finetuned") return Provenance::finetuned;
  if (s == "retained") return Provenance::retained;
  if (s == "unlearned") return Provenance::unlearned;
  throw std::invalid_argument("unknown provenance '" + s + "'");
}

namespace {

bool ends_with(const std::string& s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace

Checkpoint Checkpoint::initialize(const ModelConfig& config) {
  Checkpoint ck;
  ck.config = config;
  ck.theta = Vector::Zero(static_cast<Eigen::Index>(config.parameter_count()));
  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> normal(0.0, 0.02);
  const double residual = 1.0 / std::sqrt(2.0 * config.layers);
  for (const ParamSlot& s : parameter_layout(config)) {
    auto block = ck.theta.segment(s.offset, s.rows * s.cols);
    if (ends_with(s.name, ".g")) {
      block.setOnes();
    } else if (s.rows == 1) {
      block.setZero();
    } else {
      const double f = (ends_with(s.name, "w_out") || ends_with(s.name, "w_proj")) ? residual : 1.0;
      for (Eigen::Index i = 0; i < block.size(); ++i) block(i) = f * normal(rng);
    }
  }
  return ck;
}

Checkpoint Checkpoint::uniform(const ModelConfig& config) {
  Checkpoint ck;
  ck.config = config;
  ck.theta = Vector::Zero(static_cast<Eigen::Index>(config.parameter_count()));
  return ck;
}

// ---------------------------------------------------------------------------
// Binary container: "ULAB", u32 version, config, provenance, step, theta and
// optional optimizer moments; all integers and doubles little-endian.

namespace {

constexpr std::uint32_t kCheckpointVersion = 2;

template <typename T>
void put_le(std::string& out, T v) {
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
  const U u = std::bit_cast<U>(v);
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((u >> (8 * i)) & 0xFF));
}

class Reader {
 public:
  explicit Reader(const std::string& s) : s_(s) {}
  template <typename T>
  T get() {
    using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
    if (pos_ + sizeof(U) > s_.size()) throw std::runtime_error("checkpoint: truncated file");
    U u = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i)
      u |= static_cast<U>(static_cast<unsigned char>(s_[pos_ + i])) << (8 * i);
    pos_ += sizeof(U);
    return std::bit_cast<T>(u);
  }
  std::uint8_t byte() {
    if (pos_ >= s_.size()) throw std::runtime_error("checkpoint: truncated file");
    return static_cast<std::uint8_t>(s_[pos_++]);
  }
  std::string take(std::size_t n) {
    if (pos_ + n > s_.size()) throw std::runtime_error("checkpoint: truncated file");
    std::string r = s_.substr(pos_, n);
    pos_ += n;
    return r;
  }
  bool done() const { return pos_ == s_.size(); }

 private:
  const std::string& s_;
  std::size_t pos_ = 0;
};

void put_vector(std::string& out, const Vector& v) {
  for (Eigen::Index i = 0; i < v.size(); ++i) put_le(out, v(i));
}

Vector get_vector(Reader& r, std::size_t n) {
  Vector v(static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) v(static_cast<Eigen::Index>(i)) = r.get<double>();
  return v;
}

}  // namespace

std::string serialize_checkpoint(const Checkpoint& ck) {
  if (ck.theta.size() != static_cast<Eigen::Index>(ck.config.parameter_count()))
    throw std::invalid_argument("checkpoint: theta length does not match config");
  std::string out = "ULAB";
  put_le(out, kCheckpointVersion);
  put_le(out, static_cast<std::uint32_t>(ck.config.vocab_size));
  put_le(out, static_cast<std::uint32_t>(ck.config.dim));
  put_le(out, static_cast<std::uint32_t>(ck.config.layers));
  put_le(out, static_cast<std::uint32_t>(ck.config.heads));
  put_le(out, static_cast<std::uint32_t>(ck.config.context));
  put_le(out, ck.config.seed);
  put_le(out, static_cast<std::uint32_t>(ck.provenance));
  put_le(out, ck.step);
  put_le(out, static_cast<std::uint64_t>(ck.theta.size()));
  out.push_back(ck.moments ? 1 : 0);
  put_vector(out, ck.theta);
  if (ck.moments) {
    put_vector(out, ck.moments->first);
    put_vector(out, ck.moments->second);
  }
  return out;
}

Checkpoint deserialize_checkpoint(const std::string& bytes) {
  Reader r(bytes);
  if (r.take(4) != "ULAB") throw std::runtime_error("checkpoint: bad magic");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  Checkpoint ck;
  ck.config.vocab_size = static_cast<int>(r.get<std::uint32_t>());
  ck.config.dim = static_cast<int>(r.get<std::uint32_t>());
  ck.config.layers = static_cast<int>(r.get<std::uint32_t>());
  ck.config.heads = static_cast<int>(r.get<std::uint32_t>());
  ck.config.context = static_cast<int>(r.get<std::uint32_t>());
  ck.config.seed = r.get<std::uint64_t>();
  ck.config.validate();
  const auto prov = r.get<std::uint32_t>();
  if (prov > 3) throw std::runtime_error("checkpoint: bad provenance tag");
  ck.provenance = static_cast<Provenance>(prov);
  ck.step = r.get<std::uint64_t>();
  const auto n = r.get<std::uint64_t>();
  if (n != ck.config.parameter_count()) throw std::runtime_error("checkpoint: theta length does not match config");
  const bool has_moments = r.byte() != 0;
  ck.theta = get_vector(r, n);
  if (has_moments) {
    AdamMoments m;
    m.first = get_vector(r, n);
    m.second = get_vector(r, n);
    ck.moments = std::move(m);
  }
  if (!r.done()) throw std::runtime_error("checkpoint: trailing bytes");
  return ck;
}

void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  const std::string bytes = serialize_checkpoint(ck);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return deserialize_checkpoint(ss.str());
}

// ---------------------------------------------------------------------------

std::size_t SequenceBatch::supervised() const {
  std::size_t n = 0;
  for (double m : mask) n += m != 0.0;
  return n;
}

SequenceBatch make_batch(std::span<const TokenSequence> sequences, int context) {
  if (sequences.empty()) throw std::invalid_argument("make_batch: no sequences");
  std::size_t longest = 0;
  for (const TokenSequence& s : sequences) {
    if (s.ids.size() < 2) throw std::invalid_argument("make_batch: sequence needs at least two tokens");
    if (s.ids.size() - 1 > static_cast<std::size_t>(context))
      throw std::invalid_argument("make_batch: sequence of " + std::to_string(s.ids.size()) +
                                  " tokens overflows context " + std::to_string(context));
    longest = std::max(longest, s.ids.size() - 1);
  }
  SequenceBatch b;
  b.batch = static_cast<int>(sequences.size());
  b.length = static_cast<int>(longest);
  const std::size_t n = sequences.size() * longest;
  b.inputs.assign(n, Vocabulary::kPad);
  b.targets.assign(n, Vocabulary::kPad);
  b.mask.assign(n, 0.0);
  for (std::size_t i = 0; i < sequences.size(); ++i) {
    const TokenSequence& s = sequences[i];
    for (std::size_t t = 0; t + 1 < s.ids.size(); ++t) {
      const std::size_t k = i * longest + t;
      b.inputs[k] = s.ids[t];
      b.targets[k] = s.ids[t + 1];
      b.mask[k] = (t + 1 >= s.supervise_from) ? 1.0 : 0.0;
    }
  }
  return b;
}

// ---------------------------------------------------------------------------

ModelGraph::ModelGraph(Tape& tape, const Checkpoint& ck, bool requires_grad) : tape_(&tape), config_(ck.config) {
  if (ck.theta.size() != static_cast<Eigen::Index>(config_.parameter_count()))
    throw std::invalid_argument("ModelGraph: theta length does not match config");
  for (const ParamSlot& s : parameter_layout(config_)) {
    Matrix m = Eigen::Map<const Matrix>(ck.theta.data() + s.offset, s.rows, s.cols);
    params_.push_back(tape.leaf(std::move(m), requires_grad));
  }
}

ModelGraph::ModelGraph(Tape& tape, Var theta, const ModelConfig& config) : tape_(&tape), config_(config) {
  if (theta.value().rows() != static_cast<Eigen::Index>(config_.parameter_count()) || theta.value().cols() != 1)
    throw std::invalid_argument("ModelGraph: theta must be a parameter_count x 1 column");
  for (const ParamSlot& s : parameter_layout(config_))
    params_.push_back(reshape(block(theta, s.offset, 0, s.rows * s.cols, 1), s.rows, s.cols));
}

Var ModelGraph::mask_for(int length) {
  for (auto& [len, v] : masks_)
    if (len == length) return v;
  Matrix m = Matrix::Zero(length, length);
  for (int i = 0; i < length; ++i)
    for (int j = i + 1; j < length; ++j) m(i, j) = -std::numeric_limits<double>::infinity();
  Var v = tape_->constant(std::move(m));
  masks_.emplace_back(length, v);
  return v;
}

Var ModelGraph::hidden(const SequenceBatch& batch) {
  const FlushDenormals ftz;
  const int B = batch.batch, L = batch.length;
  if (L > config_.context)
    throw std::invalid_argument("ModelGraph: batch length " + std::to_string(L) + " exceeds context " +
                                std::to_string(config_.context));
  for (int id : batch.inputs)
    if (id < 0 || id >= config_.vocab_size)
      throw std::invalid_argument("ModelGraph: token id " + std::to_string(id) + " outside vocabulary");

  const int d = config_.dim, H = config_.heads, hd = d / H;
  std::size_t p = 0;
  Var tok_emb = params_[p++];
  Var pos_emb = params_[p++];

  std::vector<int> positions(static_cast<std::size_t>(B * L));
  for (int b = 0; b < B; ++b)
    for (int t = 0; t < L; ++t) positions[static_cast<std::size_t>(b * L + t)] = t;
  Var x = add(gather_rows(tok_emb, batch.inputs), gather_rows(pos_emb, positions));

  Var causal = mask_for(L);
  Var zero_row = tape_->constant(Matrix::Zero(1, d));
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
  for (int l = 0; l < config_.layers; ++l) {
    Var ln1_g = params_[p++], ln1_b = params_[p++];
    Var w_qkv = params_[p++], b_qv = params_[p++];
    Var w_out = params_[p++], b_out = params_[p++];
    Var ln2_g = params_[p++], ln2_b = params_[p++];
    Var w_fc = params_[p++], b_fc = params_[p++];
    Var w_proj = params_[p++], b_proj = params_[p++];

    Var h = layer_norm(x, ln1_g, ln1_b);
    const std::array<Var, 3> bias_parts = {block(b_qv, 0, 0, 1, d), zero_row, block(b_qv, 0, d, 1, d)};
    Var qkv = add_row(matmul(h, w_qkv), concat_cols(bias_parts));
    std::vector<Var> seqs;
    seqs.reserve(static_cast<std::size_t>(B));
    for (int b = 0; b < B; ++b) {
      std::vector<Var> heads;
      heads.reserve(static_cast<std::size_t>(H));
      for (int k = 0; k < H; ++k) {
        Var q = block(qkv, b * L, k * hd, L, hd);
        Var kk = block(qkv, b * L, d + k * hd, L, hd);
        Var v = block(qkv, b * L, 2 * d + k * hd, L, hd);
        Var att = softmax_rows(add(scale(matmul_bt(q, kk), inv_sqrt), causal));
        heads.push_back(matmul(att, v));
      }
      seqs.push_back(H == 1 ? heads[0] : concat_cols(heads));
    }
    Var attn = B == 1 ? seqs[0] : concat_rows(seqs);
    x = add(x, add_row(matmul(attn, w_out), b_out));

    Var h2 = layer_norm(x, ln2_g, ln2_b);
    Var m = gelu(add_row(matmul(h2, w_fc), b_fc));
    x = add(x, add_row(matmul(m, w_proj), b_proj));
  }
  Var lnf_g = params_[p++], lnf_b = params_[p++];
  return layer_norm(x, lnf_g, lnf_b);
}

Var ModelGraph::logits(const SequenceBatch& batch) {
  const FlushDenormals ftz;
  return matmul_bt(hidden(batch), params_[0]);
}

Vector ModelGraph::gradient() const {
  Vector g(static_cast<Eigen::Index>(config_.parameter_count()));
  Eigen::Index offset = 0;
  for (Var v : params_) {
    const Matrix& gm = v.grad();
    g.segment(offset, gm.size()) = Eigen::Map<const Vector>(gm.data(), gm.size());
    offset += gm.size();
  }
  return g;
}

Var sft_loss(ModelGraph& graph, const SequenceBatch& batch) {
  if (batch.supervised() == 0) throw std::invalid_argument("sft_loss: no supervised positions");
  for (std::size_t i = 0; i < batch.targets.size(); ++i)
    if (batch.mask[i] != 0.0 && (batch.targets[i] < 0 || batch.targets[i] >= graph.config().vocab_size))
      throw std::invalid_argument("sft_loss: target id outside vocabulary");
  return cross_entropy(graph.logits(batch), batch.targets, batch.mask);
}

LossAndGradient sft_loss_and_gradient(const Checkpoint& ck, const SequenceBatch& batch) {
  Tape tape;
  ModelGraph graph(tape, ck);
  Var loss = sft_loss(graph, batch);
  tape.backward(loss);
  return {loss.item(), graph.gradient()};
}

void adamw_update(Checkpoint& ck, const Vector& g, double lr, const AdamWConfig& opt) {
  if (!(lr >= 0)) throw std::invalid_argument("adamw_update: learning rate must be non-negative");
  if (g.size() != ck.theta.size()) throw std::invalid_argument("adamw_update: gradient length mismatch");
  if (!ck.moments) ck.moments = AdamMoments{Vector::Zero(g.size()), Vector::Zero(g.size())};
  AdamMoments& m = *ck.moments;
  ck.step += 1;
  const double t = static_cast<double>(ck.step);
  m.first = opt.beta1 * m.first + (1.0 - opt.beta1) * g;
  m.second = opt.beta2 * m.second + (1.0 - opt.beta2) * g.cwiseProduct(g);
  const double c1 = 1.0 - std::pow(opt.beta1, t);
  const double c2 = 1.0 - std::pow(opt.beta2, t);
  ck.theta *= (1.0 - lr * opt.weight_decay);
  ck.theta.array() -= lr * (m.first.array() / c1) / ((m.second.array() / c2).sqrt() + opt.eps);
}

double train_step(Checkpoint& ck, const SequenceBatch& batch, double lr, const AdamWConfig& opt) {
  if (!(lr >= 0)) throw std::invalid_argument("train_step: learning rate must be non-negative");
  LossAndGradient lg = sft_loss_and_gradient(ck, batch);
  if (!std::isfinite(lg.loss)) throw std::domain_error("train_step: non-finite loss " + std::to_string(lg.loss));
  adamw_update(ck, lg.gradient, lr, opt);
  return lg.loss;
}

// ---------------------------------------------------------------------------

Matrix CheckpointModel::next_token_log_probs(std::span<const int> ids) const {
  if (ids.empty()) throw std::invalid_argument("next_token_log_probs: empty input");
  if (ids.size() > static_cast<std::size_t>(ck_->config.context))
    throw std::invalid_argument("next_token_log_probs: " + std::to_string(ids.size()) +
                                " tokens overflow context " + std::to_string(ck_->config.context));
  SequenceBatch b;
  b.batch = 1;
  b.length = static_cast<int>(ids.size());
  b.inputs.assign(ids.begin(), ids.end());
  b.targets.assign(ids.size(), 0);
  b.mask.assign(ids.size(), 0.0);
  Tape tape;
  ModelGraph graph(tape, *ck_, false);
  Matrix x = graph.logits(b).value();
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double m = x.row(i).maxCoeff();
    const double lse = m + std::log((x.row(i).array() - m).exp().sum());
    x.row(i).array() -= lse;
  }
  return x;
}

SequenceScore score_sequence(const LanguageModel& model, std::span<const int> prompt, std::span<const int> answer) {
  if (prompt.empty()) throw std::invalid_argument("score_sequence: empty prompt");
  if (answer.empty()) throw std::invalid_argument("score_sequence: empty answer");
  const std::size_t n = prompt.size() + answer.size();
  if (n > static_cast<std::size_t>(model.context_length()))
    throw std::invalid_argument("score_sequence: prompt+answer of " + std::to_string(n) +
                                " tokens overflow context " + std::to_string(model.context_length()));
  std::vector<int> ids(prompt.begin(), prompt.end());
  ids.insert(ids.end(), answer.begin(), answer.end() - 1);
  const Matrix lp = model.next_token_log_probs(ids);
  SequenceScore s;
  double total = 0;
  for (std::size_t j = 0; j < answer.size(); ++j) {
    const double v = lp(static_cast<Eigen::Index>(prompt.size() - 1 + j), answer[j]);
    s.log_probs.push_back(v);
    total += v;
  }
  s.mean_log_prob = total / static_cast<double>(answer.size());
  s.normalized_prob = std::exp(s.mean_log_prob);
  return s;
}

std::vector<int> generate(const LanguageModel& model, std::span<const int> prompt, int max_new, GenerationMode mode) {
  if (prompt.empty()) throw std::invalid_argument("generate: empty prompt");
  if (mode.kind == GenerationMode::Kind::temperature && !(mode.temperature > 0))
    throw std::invalid_argument("generate: temperature must be positive");
  std::vector<int> ids(prompt.begin(), prompt.end());
  std::vector<int> out;
  std::mt19937_64 rng(mode.seed);
  for (int step = 0; step < max_new; ++step) {
    if (ids.size() >= static_cast<std::size_t>(model.context_length())) break;
    const Matrix lp = model.next_token_log_probs(ids);
    const auto row = lp.row(lp.rows() - 1);
    int next = 0;
    if (mode.kind == GenerationMode::Kind::greedy) {
      for (Eigen::Index v = 1; v < row.size(); ++v)
        if (row(v) > row(next)) next = static_cast<int>(v);
    } else {
      const double m = row.maxCoeff();
      std::vector<double> w(static_cast<std::size_t>(row.size()));
      for (Eigen::Index v = 0; v < row.size(); ++v)
        w[static_cast<std::size_t>(v)] = std::exp((row(v) - m) / mode.temperature);
      std::discrete_distribution<int> pick(w.begin(), w.end());
      next = pick(rng);
    }
    if (next == Vocabulary::kEos) break;
    ids.push_back(next);
    out.push_back(next);
  }
  return out;
}

double perplexity(const Checkpoint& ck, std::span<const SequenceBatch> batches) {
  if (batches.empty()) throw std::invalid_argument("perplexity: empty corpus");
  double total = 0, count = 0;
  for (const SequenceBatch& b : batches) {
    const auto n = static_cast<double>(b.supervised());
    if (n == 0) continue;
    Tape tape;
    ModelGraph graph(tape, ck, false);
    total += sft_loss(graph, b).item() * n;
    count += n;
  }
  if (count == 0) throw std::invalid_argument("perplexity: no supervised positions");
  return std::exp(total / count);
}

std::vector<TokenProbabilityRow> token_probability_report(
    std::span<const std::pair<std::string, const LanguageModel*>> models, std::span<const int> prompt,
    std::span<const int> targets) {
  std::vector<TokenProbabilityRow> rows;
  if (models.empty() || targets.empty()) return rows;
  if (prompt.empty()) throw std::invalid_argument("token_probability_report: empty prompt");
  for (const auto& [name, model] : models) {
    for (int t : targets)
      if (t < 0 || t >= model->vocab_size())
        throw std::invalid_argument("token_probability_report: target outside vocabulary");
    const SequenceScore s = score_sequence(*model, prompt, targets);
    for (std::size_t j = 0; j < targets.size(); ++j)
      rows.push_back({name, j, targets[j], std::exp(s.log_probs[j])});
  }
  return rows;
}

}  // namespace ulab
