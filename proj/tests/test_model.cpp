#include "ulab/model.hpp"
#include "ulab/tokenizer.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>

using namespace ulab;

namespace {

ModelConfig tiny() {
  ModelConfig c;
  c.vocab_size = 270;
  c.dim = 8;
  c.layers = 2;
  c.heads = 2;
  c.context = 12;
  c.seed = 11;
  return c;
}

SequenceBatch toy_batch() {
  std::vector<TokenSequence> s = {{{1, 40, 41, 42, 43, 2}, 2}, {{1, 50, 51, 2}, 1}};
  return make_batch(s, 12);
}

}  // namespace

TEST_CASE("parameter layout is contiguous and sized") {
  const ModelConfig c = tiny();
  const auto slots = parameter_layout(c);
  Eigen::Index offset = 0;
  for (const ParamSlot& s : slots) {
    CHECK(s.offset == offset);
    offset += s.rows * s.cols;
  }
  CHECK(static_cast<std::size_t>(offset) == c.parameter_count());
  const std::size_t d = 8, V = 270, T = 12;
  const std::size_t per_layer = 2 * d + d * 3 * d + 2 * d + d * d + d + 2 * d + d * 4 * d + 4 * d + 4 * d * d + d;
  CHECK(c.parameter_count() == V * d + T * d + 2 * per_layer + 2 * d);
}

TEST_CASE("config validation") {
  ModelConfig c = tiny();
  c.heads = 3;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = tiny();
  c.layers = 0;
  CHECK_THROWS(c.validate());
}

TEST_CASE("batches pad and mask") {
  const SequenceBatch b = toy_batch();
  CHECK(b.batch == 2);
  CHECK(b.length == 5);
  // Row 0 supervises targets from index 2 of the sequence onward.
  CHECK(b.mask[0] == 0.0);
  CHECK(b.mask[1] == 1.0);
  CHECK(b.targets[1] == 41);
  CHECK(b.mask[5 + 3] == 0.0);
  CHECK(b.supervised() == 4 + 3);
  std::vector<TokenSequence> too_long = {{std::vector<int>(14, 5), 1}};
  CHECK_THROWS(make_batch(too_long, 12));
  std::vector<TokenSequence> too_short = {{{5}, 1}};
  CHECK_THROWS(make_batch(too_short, 12));
}

TEST_CASE("initialization is seeded") {
  const Checkpoint a = Checkpoint::initialize(tiny());
  const Checkpoint b = Checkpoint::initialize(tiny());
  CHECK(a.theta == b.theta);
  ModelConfig other = tiny();
  other.seed = 12;
  CHECK(Checkpoint::initialize(other).theta != a.theta);
}

TEST_CASE("uniform checkpoint predicts the uniform distribution") {
  const Checkpoint u = Checkpoint::uniform(tiny());
  const CheckpointModel m(u);
  const std::vector<int> ids = {1, 40, 41};
  const Matrix lp = m.next_token_log_probs(ids);
  CHECK(lp.rows() == 3);
  CHECK((lp.array() + std::log(270.0)).abs().maxCoeff() < 1e-12);
  const SequenceBatch b = toy_batch();
  CHECK(perplexity(u, std::span<const SequenceBatch>(&b, 1)) == doctest::Approx(270.0).epsilon(1e-10));
}

TEST_CASE("log probabilities agree with the training graph and are causal") {
  const Checkpoint ck = Checkpoint::initialize(tiny());
  const CheckpointModel m(ck);
  const std::vector<int> ids = {1, 40, 41, 42};
  const Matrix full = m.next_token_log_probs(ids);
  const std::vector<int> prefix = {1, 40};
  const Matrix part = m.next_token_log_probs(prefix);
  CHECK((full.topRows(2) - part).cwiseAbs().maxCoeff() < 1e-12);
  for (Eigen::Index i = 0; i < full.rows(); ++i) CHECK(full.row(i).array().exp().sum() == doctest::Approx(1.0));

  std::vector<TokenSequence> s = {{{1, 40, 41, 42, 43}, 1}};
  const SequenceBatch b = make_batch(s, 12);
  Tape t;
  ModelGraph g(t, ck, false);
  const Matrix logits = g.logits(b).value();
  Matrix lse = logits;
  for (Eigen::Index i = 0; i < lse.rows(); ++i) {
    const double mx = logits.row(i).maxCoeff();
    lse.row(i).array() = logits.row(i).array() - (mx + std::log((logits.row(i).array() - mx).exp().sum()));
  }
  CHECK((lse - full).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("graph over a theta column matches the checkpoint graph") {
  const Checkpoint ck = Checkpoint::initialize(tiny());
  const SequenceBatch b = toy_batch();
  Tape t1;
  ModelGraph g1(t1, ck);
  Var l1 = sft_loss(g1, b);
  t1.backward(l1);
  const Vector grad1 = g1.gradient();

  Tape t2;
  Var theta = t2.leaf(Eigen::Map<const Matrix>(ck.theta.data(), ck.theta.size(), 1));
  ModelGraph g2(t2, theta, ck.config);
  Var l2 = sft_loss(g2, b);
  t2.backward(l2);
  CHECK(l1.item() == l2.item());
  const Matrix& grad2 = theta.grad();
  CHECK((grad1 - Eigen::Map<const Vector>(grad2.data(), grad2.size())).cwiseAbs().maxCoeff() < 1e-14);
  CHECK((grad1 - g2.gradient()).cwiseAbs().maxCoeff() < 1e-14);

  Tape t3;
  Var wrong = t3.leaf(Matrix::Zero(5, 1));
  CHECK_THROWS_AS(ModelGraph(t3, wrong, ck.config), std::invalid_argument);
}

TEST_CASE("sft loss gradient matches finite differences on a subset") {
  ModelConfig c = tiny();
  c.layers = 1;
  Checkpoint ck = Checkpoint::initialize(c);
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(0.0, 0.3);
  for (Eigen::Index i = 0; i < ck.theta.size(); ++i) ck.theta[i] += n(rng);
  const SequenceBatch b = toy_batch();
  const Matrix theta = Eigen::Map<const Matrix>(ck.theta.data(), ck.theta.size(), 1);
  const LossBuilder f = [&](Tape& t, std::span<const Var> p) {
    ModelGraph g(t, p[0], c);
    return sft_loss(g, b);
  };
  FdCheckOptions o;
  o.step = 3e-3;
  o.order = 4;
  o.max_coords = 400;
  CHECK(finite_difference_check(f, std::span<const Matrix>(&theta, 1), o).max_relative_error < 1e-4);
}

TEST_CASE("training lowers the loss and keeps moments") {
  Checkpoint ck = Checkpoint::initialize(tiny());
  const SequenceBatch b = toy_batch();
  const double first = train_step(ck, b, 1e-2);
  double last = first;
  for (int i = 0; i < 30; ++i) last = train_step(ck, b, 1e-2);
  CHECK(last < first);
  CHECK(ck.step == 31);
  REQUIRE(ck.moments.has_value());
  CHECK(ck.moments->first.size() == ck.theta.size());

  const auto r = sft_loss_and_gradient(ck, b);
  CHECK(r.loss == doctest::Approx(std::log(perplexity(ck, std::span<const SequenceBatch>(&b, 1)))));
  CHECK(r.gradient.size() == ck.theta.size());
}

TEST_CASE("adamw bias-corrected first step moves each coordinate by about lr") {
  Checkpoint ck = Checkpoint::uniform(tiny());
  Vector g = Vector::Zero(ck.theta.size());
  g[0] = 3.0;
  g[1] = -0.5;
  AdamWConfig opt;
  opt.weight_decay = 0.0;
  adamw_update(ck, g, 0.1, opt);
  CHECK(ck.theta[0] == doctest::Approx(-0.1).epsilon(1e-6));
  CHECK(ck.theta[1] == doctest::Approx(0.1).epsilon(1e-6));
  CHECK(ck.theta[2] == 0.0);
  CHECK_THROWS(adamw_update(ck, Vector::Zero(3), 0.1));
}

TEST_CASE("checkpoint serialization round trip") {
  Checkpoint ck = Checkpoint::initialize(tiny());
  const SequenceBatch b = toy_batch();
  train_step(ck, b, 1e-3);
  ck.provenance = Provenance::finetuned;
  const std::string bytes = serialize_checkpoint(ck);
  const Checkpoint back = deserialize_checkpoint(bytes);
  CHECK(back.config == ck.config);
  CHECK(back.theta == ck.theta);
  CHECK(back.step == ck.step);
  CHECK(back.provenance == Provenance::finetuned);
  CHECK(back.moments->second == ck.moments->second);
  CHECK(serialize_checkpoint(back) == bytes);
  CHECK_THROWS(deserialize_checkpoint(bytes.substr(0, bytes.size() / 2)));
  CHECK_THROWS(deserialize_checkpoint("XXXX" + bytes.substr(4)));

  const auto path = std::filesystem::temp_directory_path() / "ulab_test_ck.ulab";
  save_checkpoint(ck, path);
  CHECK(load_checkpoint(path).theta == ck.theta);
  std::filesystem::remove(path);
  CHECK(provenance_from_string(to_string(Provenance::retained)) == Provenance::retained);
}

TEST_CASE("greedy generation is deterministic and bounded") {
  Checkpoint ck = Checkpoint::initialize(tiny());
  const CheckpointModel m(ck);
  const std::vector<int> prompt = {1, 40};
  const auto a = generate(m, prompt, 5);
  CHECK(a == generate(m, prompt, 5));
  CHECK(a.size() <= 5);
  for (int id : a) CHECK(id != Vocabulary::kEos);
  const auto s1 = generate(m, prompt, 5, GenerationMode::sampled(1.0, 7));
  CHECK(s1 == generate(m, prompt, 5, GenerationMode::sampled(1.0, 7)));
  // Context caps generation.
  const std::vector<int> long_prompt(11, 40);
  CHECK(generate(m, long_prompt, 10).size() <= 1);
}

TEST_CASE("sequence scores") {
  const Checkpoint u = Checkpoint::uniform(tiny());
  const CheckpointModel m(u);
  const std::vector<int> prompt = {1, 40}, answer = {41, 42, 43};
  const SequenceScore s = score_sequence(m, prompt, answer);
  CHECK(s.log_probs.size() == 3);
  CHECK(s.mean_log_prob == doctest::Approx(-std::log(270.0)));
  CHECK(s.normalized_prob == doctest::Approx(1.0 / 270.0));

  const std::vector<std::pair<std::string, const LanguageModel*>> models = {{"u", &m}};
  const auto rows = token_probability_report(models, prompt, answer);
  REQUIRE(rows.size() == 3);
  CHECK(rows[2].token == 43);
  CHECK(rows[2].probability == doctest::Approx(1.0 / 270.0));
}
