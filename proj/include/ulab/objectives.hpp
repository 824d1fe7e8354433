// SPDX-License-Identifier: Apache-2.0
//
// Unlearning objectives.
//
// Sign convention: the forget loss L_f is the *negated* next-token
// cross-entropy on forget data, so every objective here is minimised and
// descending L_f ascends the forget cross-entropy. Consequently
// g_f = grad L_f = -grad CE(forget), and the gradient-ascent update is -g_f.

#pragma once

#include "ulab/autodiff.hpp"
#include "ulab/model.hpp"
#include "ulab/smoothing.hpp"

#include <array>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace ulab {

// ---------------------------------------------------------------------------
// Label construction.

/// (1 - r) y + (r / K) 1, with K = y.size().
template <typename Derived>
auto gls_smooth(const Eigen::MatrixBase<Derived>& y, typename Derived::Scalar r) {
  using Scalar = typename Derived::Scalar;
  if (y.size() < 1) throw std::invalid_argument("gls_smooth: K must be at least 1");
  const Scalar K = static_cast<Scalar>(y.size());
  return ((Scalar(1) - r) * y.array() + r / K).matrix().eval();
}

struct SmoothedLabel {
  int K = 2;
  double r = 0.0;
  /// Weights applied to the forget loss and to each normal loss.
  double forget_weight = 1.0;
  double normal_weight = 0.0;
  /// (-(1 - (K-1) r / K), -r/K, ..., -r/K)
  Vector signed_label;
};

/// Throws std::invalid_argument when K < 2.
SmoothedLabel sga_label(int K, double r);

// ---------------------------------------------------------------------------

enum class Method {
  SGA, GA, GD, KL, PO, DPO, DPO_RT, NPO, NPO_RT, Mismatch, LLMU, FLAT, TaskVector, WHP
};

std::string to_string(Method m);
Method method_from_string(const std::string& s);

struct UnlearnMethodConfig {
  Method method = Method::SGA;
  double lambda = 1.0;
  double r = 0.0;
  int K = 4;
  /// Number of normal losses; defaults to K - 1.
  std::optional<int> normal_count;
  double beta = 0.1;
  double alpha = 1.0;
  std::optional<std::array<double, 3>> llmu_weights;
  std::string divergence = "pearson";
  /// DPO: subtract the reference log-ratio margin (else M_ref = 0).
  bool dpo_reference_margin = true;

  int normal_slots() const { return normal_count.value_or(K - 1); }
  void validate() const;
};

struct LossBreakdown {
  Var total_var;
  double total = 0.0;
  double forget_term = 0.0;
  double auxiliary_term = 0.0;
  std::vector<double> per_normal_terms;
};

// ---------------------------------------------------------------------------
// Objectives. Each one records onto `graph`'s tape, so callers can run
// backward and read ModelGraph::gradient(). Reference checkpoints are frozen.

/// total = w_f * L_f + w_p * sum_k CE(normal_k), L_f = -CE(forget).
LossBreakdown sga_loss(ModelGraph& graph, const SequenceBatch& forget, std::span<const SequenceBatch> normals,
                       const UnlearnMethodConfig& config);

/// total = -CE(forget)
LossBreakdown gradient_ascent_loss(ModelGraph& graph, const SequenceBatch& forget);

/// total = CE(retain) - CE(forget)
LossBreakdown gradient_difference_loss(ModelGraph& graph, const SequenceBatch& forget, const SequenceBatch& retain);

/// total = -CE(forget) + mean over retain positions of KL(h_ref || h_theta).
LossBreakdown kl_regularized_loss(ModelGraph& graph, const Checkpoint& reference, const SequenceBatch& forget,
                                  const SequenceBatch& retain);

/// Mean KL(h_ref || h_theta) over the masked positions of `batch`.
Var kl_to_reference(ModelGraph& graph, const Checkpoint& reference, const SequenceBatch& batch);

enum class PreferenceVariant { PO, DPO, DPO_RT, NPO, NPO_RT };

/// PO:  CE(retain) + CE(refusal)
/// DPO: -2 beta E[log sigma(beta log h(y_e) - beta log h(y_f) - M_ref)]
/// NPO: -2 beta E[log sigma(-beta log h(y_f))]
/// -RT variants add CE(retain). log h is the mean per-token log-probability.
/// `refusal` pairs the forget prompts with refusal answers, row-aligned with `forget`.
LossBreakdown preference_loss(PreferenceVariant variant, ModelGraph& graph, const Checkpoint* reference,
                              const SequenceBatch& forget, const SequenceBatch* refusal,
                              const SequenceBatch* retain, const UnlearnMethodConfig& config);

enum class RandomCompletionVariant { Mismatch, LLMU };

/// Mismatch: CE(retain) + CE(random)
/// LLMU: -e1 CE(forget) + e2 CE(random) + e3 KL(h_ref || h_theta) on retain
LossBreakdown random_completion_loss(RandomCompletionVariant variant, ModelGraph& graph, const Checkpoint* reference,
                                     const SequenceBatch& forget, const SequenceBatch& random,
                                     const SequenceBatch& retain, const UnlearnMethodConfig& config);

/// Activation pair (g*, f*) of an f-divergence, evaluated on tape values.
struct DivergencePair {
  std::string id;
  std::function<Var(Var)> g_star;
  std::function<Var(Var)> f_star;
};

/// "pearson": g*(t) = 2(t - 1), f*(u) = u^2/4 + u. "identity": g*(t) = t, f*(u) = u.
DivergencePair divergence_pair(const std::string& id);

/// mean over rows of -g*(P(x_f, y_e)) + f*(g*(P(x_f, y_f))) with P the mean
/// per-token probability. `templates` is row-aligned with `forget`.
LossBreakdown flat_loss(ModelGraph& graph, const SequenceBatch& forget, const SequenceBatch& templates,
                        const std::string& divergence);

/// Per-row mean log-probability of the masked targets: [batch x 1].
Var sequence_mean_log_prob(ModelGraph& graph, const SequenceBatch& batch);

/// Per-row mean token probability of the masked targets: [batch x 1].
Var sequence_mean_prob(ModelGraph& graph, const SequenceBatch& batch);

// ---------------------------------------------------------------------------
// Parameter- and distribution-space methods.

/// 2 theta_o - theta_reinforced
Vector task_vector_unlearn(const Vector& theta_original, const Vector& theta_reinforced);

/// p_o - alpha (p_r - p_o), clipped at zero and renormalised.
Vector whp_distribution(const Vector& p_original, const Vector& p_reinforced, double alpha);

/// Next-token distributions built with whp_distribution from two checkpoints.
class WhpModel final : public LanguageModel {
 public:
  WhpModel(const Checkpoint& original, const Checkpoint& reinforced, double alpha);
  int vocab_size() const override { return original_.vocab_size(); }
  int context_length() const override { return original_.context_length(); }
  Matrix next_token_log_probs(std::span<const int> ids) const override;

 private:
  CheckpointModel original_;
  CheckpointModel reinforced_;
  double alpha_;
};

// ---------------------------------------------------------------------------
// Gradients.

/// The combined update direction from a bundle (see combined_direction).
Vector sga_update_direction(const GradientBundle& bundle, double r);

/// g_f = grad(-CE(forget)) and g_p^(k) = grad CE(normal_k) at `ck`.
GradientBundle compute_gradient_bundle(const Checkpoint& ck, const SequenceBatch& forget,
                                       std::span<const SequenceBatch> normals, int K);

/// Inputs for the method dispatcher; fields a method does not use may be empty.
struct ObjectiveInputs {
  const SequenceBatch* forget = nullptr;
  std::span<const SequenceBatch> normals;
  const SequenceBatch* retain = nullptr;
  const SequenceBatch* refusal = nullptr;
  const SequenceBatch* random = nullptr;
  const Checkpoint* reference = nullptr;
};

/// Builds the loss for a gradient-based method. TaskVector and WHP are not
/// gradient objectives and are rejected here.
LossBreakdown evaluate_objective(ModelGraph& graph, const UnlearnMethodConfig& config, const ObjectiveInputs& inputs);

}  // namespace ulab
