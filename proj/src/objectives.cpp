// SPDX-License-Identifier: Apache-2.0

#include "ulab/objectives.hpp"

#include <cmath>
#include <stdexcept>

namespace ulab {

SmoothedLabel sga_label(int K, double r) {
  if (K < 2) throw std::invalid_argument("sga_label: K must be at least 2");
  SmoothedLabel s;
  s.K = K;
  s.r = r;
  const double k = static_cast<double>(K);
  s.forget_weight = 1.0 - r + r / k;
  s.normal_weight = r / k;
  s.signed_label = Vector::Constant(K, -r / k);
  s.signed_label(0) = -(1.0 - (k - 1.0) / k * r);
  return s;
}

std::string to_string(Method m) {
  switch (m) {
    case Method::SGA: return "SGA";
    case Method::GA: return "GA";
    case Method::GD: return "GD";
    case Method::KL: return "KL";
    case Method::PO: return "PO";
    case Method::DPO: return "DPO";
    case Method::DPO_RT: return "DPO-RT";
    case Method::NPO: return "NPO";
    case Method::NPO_RT: return "NPO-RT";
    case Method::Mismatch: return "Mismatch";
    case Method::LLMU: return "LLMU";
    case Method::FLAT: return "FLAT";
    case Method::TaskVector: return "TaskVector";
    case Method::WHP: return "WHP";
  }
  return "unknown";
}

Method method_from_string(const std::string& s) {
  for (Method m : {Method::SGA, Method::GA, Method::GD, Method::KL, Method::PO, Method::DPO, Method::DPO_RT,
                   Method::NPO, Method::NPO_RT, Method::Mismatch, Method::LLMU, Method::FLAT, Method::TaskVector,
                   Method::WHP})
    if (to_string(m) == s) return m;
  throw std::invalid_argument("unknown unlearning method '" + s + "'");
}

void UnlearnMethodConfig::validate() const {
  const bool preference = method == Method::DPO || method == Method::DPO_RT || method == Method::NPO ||
                          method == Method::NPO_RT;
  if (preference && !(beta > 0)) throw std::invalid_argument(to_string(method) + ": beta must be positive");
  if (method == Method::SGA) {
    if (K < 2) throw std::invalid_argument("SGA: K must be at least 2");
    if (normal_slots() < 0) throw std::invalid_argument("SGA: normal count must be non-negative");
  }
  if (method == Method::LLMU && !llmu_weights) throw std::invalid_argument("LLMU: weights e1, e2, e3 required");
}

// ---------------------------------------------------------------------------

namespace {

Var ce(ModelGraph& g, const SequenceBatch& b) { return sft_loss(g, b); }

LossBreakdown finish(Var total, double forget_term, double aux) {
  LossBreakdown out;
  out.total_var = total;
  out.total = total.item();
  out.forget_term = forget_term;
  out.auxiliary_term = aux;
  return out;
}

const SequenceBatch& require(const SequenceBatch* b, const std::string& who, const char* what) {
  if (b == nullptr) throw std::invalid_argument(who + ": " + what + " batch required");
  return *b;
}

void require_nonempty(const SequenceBatch& b, const std::string& who, const char* what) {
  if (b.supervised() == 0) throw std::invalid_argument(who + ": " + what + " batch is empty");
}

/// [batch x N] averaging matrix over the masked positions of each row.
Matrix row_averager(const SequenceBatch& b) {
  Matrix a = Matrix::Zero(b.batch, static_cast<Eigen::Index>(b.batch) * b.length);
  for (int r = 0; r < b.batch; ++r) {
    double n = 0;
    for (int t = 0; t < b.length; ++t) n += b.mask[static_cast<std::size_t>(r * b.length + t)] != 0.0;
    if (n == 0) throw std::invalid_argument("sequence score: row " + std::to_string(r) + " has no supervised tokens");
    for (int t = 0; t < b.length; ++t)
      if (b.mask[static_cast<std::size_t>(r * b.length + t)] != 0.0) a(r, r * b.length + t) = 1.0 / n;
  }
  return a;
}

Var token_log_probs(ModelGraph& g, const SequenceBatch& b) {
  for (std::size_t i = 0; i < b.targets.size(); ++i)
    if (b.targets[i] < 0 || b.targets[i] >= g.config().vocab_size)
      throw std::invalid_argument("sequence score: target id outside vocabulary");
  return pick(log_softmax_rows(g.logits(b)), b.targets);
}

}  // namespace

Var sequence_mean_log_prob(ModelGraph& graph, const SequenceBatch& batch) {
  Var lp = token_log_probs(graph, batch);
  return matmul(graph.tape().constant(row_averager(batch)), lp);
}

Var sequence_mean_prob(ModelGraph& graph, const SequenceBatch& batch) {
  Var lp = token_log_probs(graph, batch);
  return matmul(graph.tape().constant(row_averager(batch)), exp(lp));
}

LossBreakdown sga_loss(ModelGraph& graph, const SequenceBatch& forget, std::span<const SequenceBatch> normals,
                       const UnlearnMethodConfig& config) {
  if (config.method != Method::SGA) throw std::invalid_argument("sga_loss: config.method must be SGA");
  config.validate();
  if (normals.empty() && config.r != 0.0) throw std::invalid_argument("sga_loss: normal set required");
  const SmoothedLabel label = sga_label(config.K, config.r);

  Var forget_loss = -ce(graph, forget);
  Var total = scale(forget_loss, label.forget_weight);
  std::vector<double> per_normal;
  if (!normals.empty()) {
    Var normal_sum = ce(graph, normals[0]);
    per_normal.push_back(normal_sum.item());
    for (std::size_t k = 1; k < normals.size(); ++k) {
      Var term = ce(graph, normals[k]);
      per_normal.push_back(term.item());
      normal_sum = add(normal_sum, term);
    }
    total = add(total, scale(normal_sum, label.normal_weight));
  }
  double aux = 0;
  for (double v : per_normal) aux += v;
  LossBreakdown out = finish(total, forget_loss.item(), aux);
  out.per_normal_terms = std::move(per_normal);
  return out;
}

LossBreakdown gradient_ascent_loss(ModelGraph& graph, const SequenceBatch& forget) {
  require_nonempty(forget, "GA", "forget");
  Var forget_loss = -ce(graph, forget);
  return finish(scale(forget_loss, 1.0), forget_loss.item(), 0.0);
}

LossBreakdown gradient_difference_loss(ModelGraph& graph, const SequenceBatch& forget, const SequenceBatch& retain) {
  require_nonempty(forget, "GD", "forget");
  require_nonempty(retain, "GD", "retain");
  Var f = -ce(graph, forget);
  Var r = ce(graph, retain);
  return finish(add(r, f), f.item(), r.item());
}

Var kl_to_reference(ModelGraph& graph, const Checkpoint& reference, const SequenceBatch& batch) {
  if (!(reference.config == graph.config()))
    throw std::invalid_argument("KL: reference config differs from checkpoint config");
  Matrix ref_logp;
  {
    Tape ref_tape;
    ModelGraph ref(ref_tape, reference, false);
    ref_logp = log_softmax_rows(ref.logits(batch)).value();
  }
  Matrix ref_p = ref_logp.array().exp();
  // Rows of p log p with 0 log 0 = 0.
  Matrix entropy_term = (ref_p.array() * ref_logp.array()).unaryExpr([](double v) { return std::isnan(v) ? 0.0 : v; });
  Matrix neg_entropy = entropy_term.rowwise().sum();

  Tape& t = graph.tape();
  Var logq = log_softmax_rows(graph.logits(batch));
  Var cross = sum_rows(mul(t.constant(std::move(ref_p)), logq));
  Var kl_rows = sub(t.constant(std::move(neg_entropy)), cross);
  return masked_mean(kl_rows, batch.mask);
}

LossBreakdown kl_regularized_loss(ModelGraph& graph, const Checkpoint& reference, const SequenceBatch& forget,
                                  const SequenceBatch& retain) {
  require_nonempty(forget, "KL", "forget");
  require_nonempty(retain, "KL", "retain");
  Var kl = kl_to_reference(graph, reference, retain);
  Var f = -ce(graph, forget);
  return finish(add(f, kl), f.item(), kl.item());
}

LossBreakdown preference_loss(PreferenceVariant variant, ModelGraph& graph, const Checkpoint* reference,
                              const SequenceBatch& forget, const SequenceBatch* refusal, const SequenceBatch* retain,
                              const UnlearnMethodConfig& config) {
  const char* names[] = {"PO", "DPO", "DPO-RT", "NPO", "NPO-RT"};
  const std::string who = names[static_cast<int>(variant)];
  const bool with_retain = variant == PreferenceVariant::PO || variant == PreferenceVariant::DPO_RT ||
                           variant == PreferenceVariant::NPO_RT;
  if (with_retain) require_nonempty(require(retain, who, "retain"), who, "retain");

  if (variant == PreferenceVariant::PO) {
    const SequenceBatch& idk = require(refusal, who, "refusal");
    Var r = ce(graph, *retain);
    Var p = ce(graph, idk);
    return finish(add(r, p), p.item(), r.item());
  }

  const double beta = config.beta;
  if (!(beta > 0)) throw std::invalid_argument(who + ": beta must be positive");
  Var objective;
  if (variant == PreferenceVariant::NPO || variant == PreferenceVariant::NPO_RT) {
    Var logh = sequence_mean_log_prob(graph, forget);
    objective = scale(mean(log_sigmoid(scale(logh, -beta))), -2.0 * beta);
  } else {
    if (reference == nullptr) throw std::invalid_argument(who + ": reference checkpoint required");
    const SequenceBatch& preferred = require(refusal, who, "refusal");
    if (preferred.batch != forget.batch) throw std::invalid_argument(who + ": refusal batch not aligned with forget batch");
    Matrix margin = Matrix::Zero(forget.batch, 1);
    if (config.dpo_reference_margin) {
      Tape ref_tape;
      ModelGraph ref(ref_tape, *reference, false);
      // Copy before recording more nodes: value() refers into the tape.
      const Matrix ref_good = sequence_mean_log_prob(ref, preferred).value();
      const Matrix ref_bad = sequence_mean_log_prob(ref, forget).value();
      margin = beta * (ref_good - ref_bad);
    }
    Var good = sequence_mean_log_prob(graph, preferred);
    Var bad = sequence_mean_log_prob(graph, forget);
    Var arg = sub(scale(sub(good, bad), beta), graph.tape().constant(std::move(margin)));
    objective = scale(mean(log_sigmoid(arg)), -2.0 * beta);
  }
  if (with_retain) {
    Var r = ce(graph, *retain);
    return finish(add(objective, scale(r, config.lambda)), objective.item(), r.item());
  }
  return finish(scale(objective, 1.0), objective.item(), 0.0);
}

LossBreakdown random_completion_loss(RandomCompletionVariant variant, ModelGraph& graph, const Checkpoint* reference,
                                     const SequenceBatch& forget, const SequenceBatch& random,
                                     const SequenceBatch& retain, const UnlearnMethodConfig& config) {
  if (variant == RandomCompletionVariant::Mismatch) {
    Var r = ce(graph, retain);
    Var m = ce(graph, random);
    return finish(add(r, m), m.item(), r.item());
  }
  if (!config.llmu_weights) throw std::invalid_argument("LLMU: weights e1, e2, e3 required");
  if (reference == nullptr) throw std::invalid_argument("LLMU: reference checkpoint required");
  const auto [e1, e2, e3] = *config.llmu_weights;
  Var f = -ce(graph, forget);
  Var rnd = ce(graph, random);
  Var kl = kl_to_reference(graph, *reference, retain);
  Var total = add(add(scale(f, e1), scale(rnd, e2)), scale(kl, e3));
  LossBreakdown out = finish(total, f.item(), kl.item());
  out.per_normal_terms = {rnd.item()};
  return out;
}

DivergencePair divergence_pair(const std::string& id) {
  if (id == "pearson") {
    return {id, [](Var t) { return scale(add_scalar(t, -1.0), 2.0); },
            [](Var u) { return add(scale(mul(u, u), 0.25), u); }};
  }
  if (id == "identity") {
    return {id, [](Var t) { return scale(t, 1.0); }, [](Var u) { return scale(u, 1.0); }};
  }
  throw std::invalid_argument("FLAT: unknown divergence '" + id + "'");
}

LossBreakdown flat_loss(ModelGraph& graph, const SequenceBatch& forget, const SequenceBatch& templates,
                        const std::string& divergence) {
  const DivergencePair pair = divergence_pair(divergence);
  if (templates.batch != forget.batch) throw std::invalid_argument("FLAT: template batch not aligned with forget batch");
  Var p_template = sequence_mean_prob(graph, templates);
  Var p_forget = sequence_mean_prob(graph, forget);
  Var learn = mean(pair.g_star(p_template));
  Var forget_part = mean(pair.f_star(pair.g_star(p_forget)));
  return finish(sub(forget_part, learn), forget_part.item(), -learn.item());
}

// ---------------------------------------------------------------------------

Vector task_vector_unlearn(const Vector& theta_original, const Vector& theta_reinforced) {
  if (theta_original.size() != theta_reinforced.size())
    throw std::invalid_argument("task_vector_unlearn: length mismatch");
  return theta_original - (theta_reinforced - theta_original);
}

Vector whp_distribution(const Vector& p_original, const Vector& p_reinforced, double alpha) {
  if (p_original.size() != p_reinforced.size()) throw std::invalid_argument("whp_distribution: length mismatch");
  if (std::abs(p_original.sum() - 1.0) > 1e-9 || std::abs(p_reinforced.sum() - 1.0) > 1e-9)
    throw std::invalid_argument("whp_distribution: inputs must sum to 1");
  Vector q = p_original - alpha * (p_reinforced - p_original);
  q = q.cwiseMax(0.0);
  const double z = q.sum();
  if (z <= 1e-12) throw std::domain_error("degenerate WHP distribution");
  return q / z;
}

WhpModel::WhpModel(const Checkpoint& original, const Checkpoint& reinforced, double alpha)
    : original_(original), reinforced_(reinforced), alpha_(alpha) {
  if (!(original.config == reinforced.config)) throw std::invalid_argument("WhpModel: checkpoint configs differ");
}

Matrix WhpModel::next_token_log_probs(std::span<const int> ids) const {
  const Matrix lo = original_.next_token_log_probs(ids);
  const Matrix lr = reinforced_.next_token_log_probs(ids);
  Matrix out(lo.rows(), lo.cols());
  for (Eigen::Index i = 0; i < lo.rows(); ++i) {
    Vector po = lo.row(i).array().exp().transpose();
    Vector pr = lr.row(i).array().exp().transpose();
    po /= po.sum();
    pr /= pr.sum();
    out.row(i) = whp_distribution(po, pr, alpha_).array().log().transpose();
  }
  return out;
}

// ---------------------------------------------------------------------------

Vector sga_update_direction(const GradientBundle& bundle, double r) { return combined_direction(bundle, r); }

GradientBundle compute_gradient_bundle(const Checkpoint& ck, const SequenceBatch& forget,
                                       std::span<const SequenceBatch> normals, int K) {
  Vector g_f;
  {
    Tape tape;
    ModelGraph g(tape, ck);
    Var loss = gradient_ascent_loss(g, forget).total_var;
    tape.backward(loss);
    g_f = g.gradient();
  }
  std::vector<Vector> g_p;
  for (const SequenceBatch& b : normals) g_p.push_back(sft_loss_and_gradient(ck, b).gradient);
  return GradientBundle::make(std::move(g_f), std::move(g_p), K);
}

LossBreakdown evaluate_objective(ModelGraph& graph, const UnlearnMethodConfig& config, const ObjectiveInputs& in) {
  config.validate();
  const std::string who = to_string(config.method);
  const SequenceBatch& forget = require(in.forget, who, "forget");
  switch (config.method) {
    case Method::SGA: return sga_loss(graph, forget, in.normals, config);
    case Method::GA: return gradient_ascent_loss(graph, forget);
    case Method::GD: {
      const SequenceBatch& retain = require(in.retain, who, "retain");
      require_nonempty(forget, who, "forget");
      require_nonempty(retain, who, "retain");
      Var f = -ce(graph, forget);
      Var r = ce(graph, retain);
      return finish(add(scale(r, config.lambda), f), f.item(), r.item());
    }
    case Method::KL: {
      if (in.reference == nullptr) throw std::invalid_argument("KL: reference checkpoint required");
      const SequenceBatch& retain = require(in.retain, who, "retain");
      Var kl = kl_to_reference(graph, *in.reference, retain);
      Var f = -ce(graph, forget);
      return finish(add(f, scale(kl, config.lambda)), f.item(), kl.item());
    }
    case Method::PO: return preference_loss(PreferenceVariant::PO, graph, in.reference, forget, in.refusal, in.retain, config);
    case Method::DPO: return preference_loss(PreferenceVariant::DPO, graph, in.reference, forget, in.refusal, in.retain, config);
    case Method::DPO_RT:
      return preference_loss(PreferenceVariant::DPO_RT, graph, in.reference, forget, in.refusal, in.retain, config);
    case Method::NPO: return preference_loss(PreferenceVariant::NPO, graph, in.reference, forget, in.refusal, in.retain, config);
    case Method::NPO_RT:
      return preference_loss(PreferenceVariant::NPO_RT, graph, in.reference, forget, in.refusal, in.retain, config);
    case Method::Mismatch:
    case Method::LLMU: {
      const SequenceBatch& random = require(in.random, who, "random-completion");
      const SequenceBatch& retain = require(in.retain, who, "retain");
      return random_completion_loss(
          config.method == Method::LLMU ? RandomCompletionVariant::LLMU : RandomCompletionVariant::Mismatch, graph,
          in.reference, forget, random, retain, config);
    }
    case Method::FLAT: return flat_loss(graph, forget, require(in.refusal, who, "template"), config.divergence);
    case Method::TaskVector:
    case Method::WHP: break;
  }
  throw std::invalid_argument(who + " is not a gradient objective");
}

}  // namespace ulab
