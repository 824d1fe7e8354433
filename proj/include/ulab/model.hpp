// SPDX-License-Identifier: Apache-2.0
//
// A small pre-norm causal transformer language model: token + learned
// positional embeddings, `layers` blocks of multi-head causal self-attention
// and a GELU MLP, a final layer norm, and an output projection tied to the
// token embedding. All parameters live in one flat vector (Checkpoint::theta)
// in a fixed canonical order, so gradients and update directions from every
// objective are directly comparable.

#pragma once

#include "ulab/autodiff.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace ulab {

struct ModelConfig {
  int vocab_size = 512;
  int dim = 64;
  int layers = 2;
  int heads = 2;
  int context = 128;
  std::uint64_t seed = 1234;

  void validate() const;
  std::size_t parameter_count() const;
  bool operator==(const ModelConfig&) const = default;
};

enum class Provenance : std::uint32_t { original = 0, finetuned = 1, retained = 2, unlearned = 3 };
std::string to_string(Provenance p);
Provenance provenance_from_string(const std::string& s);

struct AdamMoments {
  Vector first;
  Vector second;
};

struct Checkpoint {
  ModelConfig config;
  Vector theta;
  std::uint64_t step = 0;
  std::optional<AdamMoments> moments;
  Provenance provenance = Provenance::original;

  /// Seeded random initialization (N(0, 0.02), residual projections scaled
  /// by 1/sqrt(2 * layers), layer-norm gains 1 and biases 0).
  static Checkpoint initialize(const ModelConfig& config);
  /// All-zero parameters: every position predicts the uniform distribution.
  static Checkpoint uniform(const ModelConfig& config);
};

/// One named parameter block inside theta.
struct ParamSlot {
  std::string name;
  Eigen::Index rows;
  Eigen::Index cols;
  Eigen::Index offset;
};
std::vector<ParamSlot> parameter_layout(const ModelConfig& config);

std::string serialize_checkpoint(const Checkpoint& ck);
Checkpoint deserialize_checkpoint(const std::string& bytes);
void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Teacher-forced batch. Row-major [batch x length]; position t predicts
/// targets[t] from inputs[0..t]. Masked positions contribute no loss.
struct SequenceBatch {
  int batch = 0;
  int length = 0;
  std::vector<int> inputs;
  std::vector<int> targets;
  std::vector<double> mask;

  std::size_t supervised() const;
};

/// A token sequence plus the index of the first token that is supervised
/// (every later token, including the final one, is a target).
struct TokenSequence {
  std::vector<int> ids;
  std::size_t supervise_from = 1;
};

/// Pads to the longest sequence. Throws when a sequence exceeds `context`
/// or has fewer than two tokens.
SequenceBatch make_batch(std::span<const TokenSequence> sequences, int context);

/// Model parameters placed on a tape, plus the forward pass.
class ModelGraph {
 public:
  ModelGraph(Tape& tape, const Checkpoint& ck, bool requires_grad = true);
  /// Views every parameter as a slice of one [parameter_count x 1] variable,
  /// so losses can be differentiated with respect to a caller-owned theta.
  ModelGraph(Tape& tape, Var theta, const ModelConfig& config);

  /// Logits for every batch position: [(batch*length) x vocab].
  Var logits(const SequenceBatch& batch);
  /// Final-layer-norm hidden states: [(batch*length) x dim].
  Var hidden(const SequenceBatch& batch);

  /// Gradient of the last backward, flattened in canonical order.
  Vector gradient() const;
  Tape& tape() { return *tape_; }
  const ModelConfig& config() const { return config_; }

 private:
  Var mask_for(int length);

  Tape* tape_;
  ModelConfig config_;
  std::vector<Var> params_;
  std::vector<std::pair<int, Var>> masks_;
};

/// Mean masked next-token cross-entropy (differentiable).
Var sft_loss(ModelGraph& graph, const SequenceBatch& batch);

/// Loss value and flattened gradient for a scalar loss built on a fresh graph.
struct LossAndGradient {
  double loss;
  Vector gradient;
};
LossAndGradient sft_loss_and_gradient(const Checkpoint& ck, const SequenceBatch& batch);

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// One decoupled-weight-decay Adam step on an arbitrary gradient.
void adamw_update(Checkpoint& ck, const Vector& gradient, double learning_rate, const AdamWConfig& opt = {});

/// One AdamW step on sft_loss; returns the pre-step loss.
/// Throws std::domain_error (carrying the value) on a non-finite loss.
double train_step(Checkpoint& ck, const SequenceBatch& batch, double learning_rate,
                  const AdamWConfig& opt = {});

// ---------------------------------------------------------------------------
// Inference-side interface, shared by checkpoints and distribution-level
// methods that combine several checkpoints.

class LanguageModel {
 public:
  virtual ~LanguageModel() = default;
  virtual int vocab_size() const = 0;
  virtual int context_length() const = 0;
  /// Row t holds log p(. | ids[0..t]); shape [ids.size() x vocab].
  virtual Matrix next_token_log_probs(std::span<const int> ids) const = 0;
};

class CheckpointModel final : public LanguageModel {
 public:
  explicit CheckpointModel(const Checkpoint& ck) : ck_(&ck) {}
  int vocab_size() const override { return ck_->config.vocab_size; }
  int context_length() const override { return ck_->config.context; }
  Matrix next_token_log_probs(std::span<const int> ids) const override;
  const Checkpoint& checkpoint() const { return *ck_; }

 private:
  const Checkpoint* ck_;
};

struct SequenceScore {
  std::vector<double> log_probs;  // one per answer token
  double mean_log_prob = 0.0;
  /// P(answer | prompt)^(1/|answer|).
  double normalized_prob = 0.0;
};

SequenceScore score_sequence(const LanguageModel& model, std::span<const int> prompt, std::span<const int> answer);

struct GenerationMode {
  enum class Kind { greedy, temperature } kind = Kind::greedy;
  double temperature = 1.0;
  std::uint64_t seed = 0;

  static GenerationMode greedy() { return {}; }
  static GenerationMode sampled(double t, std::uint64_t seed) { return {Kind::temperature, t, seed}; }
};

/// Continuation tokens (end token excluded). Stops at the end token, after
/// `max_new` tokens, or when the context is full.
std::vector<int> generate(const LanguageModel& model, std::span<const int> prompt, int max_new,
                          GenerationMode mode = GenerationMode::greedy());

/// exp of the token-weighted mean masked cross-entropy over all batches.
double perplexity(const Checkpoint& ck, std::span<const SequenceBatch> batches);

struct TokenProbabilityRow {
  std::string model;
  std::size_t position;
  int token;
  double probability;
};

/// Teacher-forced probability of each target token after `prompt`, per model.
std::vector<TokenProbabilityRow> token_probability_report(
    std::span<const std::pair<std::string, const LanguageModel*>> models, std::span<const int> prompt,
    std::span<const int> targets);

}  // namespace ulab
