#include "ulab/objectives.hpp"

#include <doctest.h>

#include <random>

using namespace ulab;

namespace {

ModelConfig tiny() {
  ModelConfig c;
  c.vocab_size = 260;
  c.dim = 8;
  c.layers = 1;
  c.heads = 2;
  c.context = 16;
  c.seed = 7;
  return c;
}

SequenceBatch random_batch(std::mt19937_64& rng, int rows, int length) {
  std::uniform_int_distribution<int> tok(4, 40);
  std::vector<TokenSequence> s;
  for (int b = 0; b < rows; ++b) {
    TokenSequence t;
    for (int i = 0; i < length - (b % 2); ++i) t.ids.push_back(tok(rng));
    t.supervise_from = 2;
    s.push_back(std::move(t));
  }
  return make_batch(s, 16);
}

Checkpoint perturbed(const ModelConfig& c, std::uint64_t seed, double scale) {
  Checkpoint ck = Checkpoint::initialize(c);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, scale);
  for (Eigen::Index i = 0; i < ck.theta.size(); ++i) ck.theta[i] += n(rng);
  return ck;
}

Vector flat_grad(const Checkpoint& ck, const std::function<LossBreakdown(ModelGraph&)>& f, double* loss = nullptr) {
  Tape t;
  ModelGraph g(t, ck);
  const LossBreakdown b = f(g);
  t.backward(b.total_var);
  if (loss) *loss = b.total;
  return g.gradient();
}

}  // namespace

TEST_CASE("generalized label smoothing") {
  Eigen::Vector3d y(1, 0, 0);
  CHECK((gls_smooth(y, 0.3) - Eigen::Vector3d(0.8, 0.1, 0.1)).cwiseAbs().maxCoeff() <= 1e-12);
  CHECK((gls_smooth(y, -0.3) - Eigen::Vector3d(1.2, -0.1, -0.1)).cwiseAbs().maxCoeff() <= 1e-12);
  CHECK(gls_smooth(y, 0.0) == y);
  for (double r : {-2.0, -0.4, 0.2, 0.9}) CHECK(gls_smooth(y, r).sum() == doctest::Approx(1.0).epsilon(1e-14));
  CHECK_THROWS(gls_smooth(Eigen::VectorXd(0), 0.1));
}

TEST_CASE("signed label and weights") {
  const SmoothedLabel l = sga_label(4, 0.4);
  CHECK(l.forget_weight == doctest::Approx(1 - 0.4 + 0.1));
  CHECK(l.normal_weight == doctest::Approx(0.1));
  REQUIRE(l.signed_label.size() == 4);
  CHECK(l.signed_label[0] == doctest::Approx(-(1 - 3 * 0.4 / 4)));
  CHECK(l.signed_label[3] == doctest::Approx(-0.1));
  CHECK(l.signed_label.sum() == doctest::Approx(-1.0));
  CHECK(sga_label(5, 0.0).normal_weight == 0.0);
  CHECK_THROWS_AS(sga_label(1, 0.2), std::invalid_argument);
}

TEST_CASE("method names round-trip") {
  for (Method m : {Method::SGA, Method::GA, Method::GD, Method::KL, Method::PO, Method::DPO, Method::DPO_RT, Method::NPO,
                   Method::NPO_RT, Method::Mismatch, Method::LLMU, Method::FLAT, Method::TaskVector, Method::WHP})
    CHECK(method_from_string(to_string(m)) == m);
  CHECK_THROWS(method_from_string("nope"));
  UnlearnMethodConfig c;
  c.K = 1;
  CHECK_THROWS(c.validate());
}

TEST_CASE("r = 0 reduces the smoothed loss to gradient ascent") {
  const ModelConfig c = tiny();
  const Checkpoint ck = perturbed(c, 1, 0.1);
  std::mt19937_64 rng(2);
  const SequenceBatch f = random_batch(rng, 3, 7);
  const std::vector<SequenceBatch> normals = {random_batch(rng, 3, 7), random_batch(rng, 3, 6), random_batch(rng, 3, 5)};
  UnlearnMethodConfig cfg;
  cfg.K = 4;
  cfg.r = 0.0;
  double l_sga = 0, l_ga = 0;
  const Vector g_sga = flat_grad(ck, [&](ModelGraph& g) { return sga_loss(g, f, normals, cfg); }, &l_sga);
  const Vector g_ga = flat_grad(ck, [&](ModelGraph& g) { return gradient_ascent_loss(g, f); }, &l_ga);
  CHECK(l_sga == l_ga);
  CHECK((g_sga - g_ga).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("autodiff of the smoothed loss equals the explicit gradient combination") {
  const ModelConfig c = tiny();
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> ur(-2.0, 1.0);
  for (int trial = 0; trial < 5; ++trial) {
    const Checkpoint ck = perturbed(c, 10 + trial, 0.2);
    const int K = 2 + trial % 4;
    const double r = ur(rng);
    const SequenceBatch f = random_batch(rng, 2 + trial % 3, 6);
    std::vector<SequenceBatch> normals;
    for (int k = 0; k < K - 1; ++k) normals.push_back(random_batch(rng, 2, 5 + k % 3));
    UnlearnMethodConfig cfg;
    cfg.K = K;
    cfg.r = r;
    double total = 0;
    const Vector g = flat_grad(ck, [&](ModelGraph& gr) { return sga_loss(gr, f, normals, cfg); }, &total);
    const GradientBundle b = compute_gradient_bundle(ck, f, normals, K);
    Vector sum_p = Vector::Zero(g.size());
    for (const Vector& gp : b.g_p) sum_p += gp;
    const Vector expected = (1 - r + r / K) * b.g_f + (r / K) * sum_p;
    CHECK((g - expected).norm() / expected.norm() <= 1e-10);
    CHECK((sga_update_direction(b, r) + expected).norm() <= 1e-10 * expected.norm());
  }
}

TEST_CASE("loss breakdown terms") {
  const ModelConfig c = tiny();
  const Checkpoint ck = perturbed(c, 3, 0.1);
  std::mt19937_64 rng(4);
  const SequenceBatch f = random_batch(rng, 2, 6);
  const std::vector<SequenceBatch> normals = {random_batch(rng, 2, 6), random_batch(rng, 2, 6), random_batch(rng, 2, 6)};
  UnlearnMethodConfig cfg;
  cfg.K = 4;
  cfg.r = 0.6;
  Tape t;
  ModelGraph g(t, ck);
  const LossBreakdown b = sga_loss(g, f, normals, cfg);
  REQUIRE(b.per_normal_terms.size() == 3);
  double sum = 0;
  for (double v : b.per_normal_terms) sum += v;
  CHECK(b.forget_term < 0);
  CHECK(b.total == doctest::Approx((1 - 0.6 + 0.15) * b.forget_term + 0.15 * sum).epsilon(1e-12));

  // The normal count may differ from K - 1, but smoothing needs at least one.
  const std::vector<SequenceBatch> one = {normals[0]};
  CHECK_NOTHROW(sga_loss(g, f, one, cfg));
  CHECK_THROWS_AS(sga_loss(g, f, std::vector<SequenceBatch>{}, cfg), std::invalid_argument);
}

TEST_CASE("every gradient objective passes the finite-difference check") {
  const ModelConfig c = tiny();
  const Checkpoint ck = perturbed(c, 9, 0.3);
  Checkpoint ref = ck;
  std::mt19937_64 rng(9);
  std::normal_distribution<double> n(0.0, 0.015);
  for (Eigen::Index i = 0; i < ref.theta.size(); ++i) ref.theta[i] += n(rng);
  const SequenceBatch f = random_batch(rng, 2, 6), retain = random_batch(rng, 2, 6);
  const SequenceBatch refusal = random_batch(rng, 2, 6), random = random_batch(rng, 2, 6);
  const std::vector<SequenceBatch> normals = {random_batch(rng, 2, 6), random_batch(rng, 2, 6), random_batch(rng, 2, 6)};
  const Matrix theta = Eigen::Map<const Matrix>(ck.theta.data(), ck.theta.size(), 1);
  FdCheckOptions o;
  o.step = 3e-3;
  o.order = 4;
  o.max_coords = 600;
  for (Method m : {Method::SGA, Method::GA, Method::GD, Method::KL, Method::PO, Method::DPO, Method::DPO_RT,
                   Method::NPO, Method::NPO_RT, Method::Mismatch, Method::LLMU, Method::FLAT}) {
    UnlearnMethodConfig cfg;
    cfg.method = m;
    cfg.K = 4;
    cfg.r = 0.4;
    cfg.llmu_weights = std::array<double, 3>{0.5, 1.0, 1.0};
    ObjectiveInputs in;
    in.forget = &f;
    in.normals = normals;
    in.retain = &retain;
    in.refusal = &refusal;
    in.random = &random;
    in.reference = &ref;
    const LossBuilder lb = [&](Tape& t, std::span<const Var> p) {
      ModelGraph g(t, p[0], c);
      return evaluate_objective(g, cfg, in).total_var;
    };
    CAPTURE(to_string(m));
    CHECK(finite_difference_check(lb, std::span<const Matrix>(&theta, 1), o).max_relative_error < 1e-4);
  }
}

TEST_CASE("dispatcher rejects non-gradient methods and missing inputs") {
  const ModelConfig c = tiny();
  const Checkpoint ck = Checkpoint::initialize(c);
  std::mt19937_64 rng(1);
  const SequenceBatch f = random_batch(rng, 2, 6);
  Tape t;
  ModelGraph g(t, ck);
  UnlearnMethodConfig cfg;
  ObjectiveInputs in;
  in.forget = &f;
  for (Method m : {Method::TaskVector, Method::WHP}) {
    cfg.method = m;
    CHECK_THROWS_AS(evaluate_objective(g, cfg, in), std::invalid_argument);
  }
  for (Method m : {Method::GD, Method::KL, Method::PO, Method::DPO, Method::Mismatch, Method::LLMU}) {
    cfg.method = m;
    CAPTURE(to_string(m));
    CHECK_THROWS(evaluate_objective(g, cfg, in));
  }
}

TEST_CASE("KL to an identical reference is zero") {
  const ModelConfig c = tiny();
  const Checkpoint ck = perturbed(c, 2, 0.2);
  std::mt19937_64 rng(6);
  const SequenceBatch b = random_batch(rng, 3, 7);
  Tape t;
  ModelGraph g(t, ck);
  CHECK(std::abs(kl_to_reference(g, ck, b).item()) < 1e-12);
  Checkpoint other = perturbed(c, 3, 0.2);
  CHECK(kl_to_reference(g, other, b).item() > 0);
}

TEST_CASE("preference losses at known points") {
  const ModelConfig c = tiny();
  const Checkpoint u = Checkpoint::uniform(c);
  std::mt19937_64 rng(8);
  const SequenceBatch f = random_batch(rng, 2, 6), refusal = random_batch(rng, 2, 6);
  UnlearnMethodConfig cfg;
  cfg.beta = 0.5;
  Tape t;
  ModelGraph g(t, u);
  // Uniform model: log h = -log V on every row.
  const double logh = -std::log(260.0);
  const double npo = preference_loss(PreferenceVariant::NPO, g, nullptr, f, nullptr, nullptr, cfg).total;
  CHECK(npo == doctest::Approx(-2 * 0.5 * std::log(1 / (1 + std::exp(0.5 * logh)))));
  // Equal preferred and rejected likelihoods with a zero margin: -2 beta log(1/2).
  const double dpo = preference_loss(PreferenceVariant::DPO, g, &u, f, &refusal, nullptr, cfg).total;
  CHECK(dpo == doctest::Approx(2 * 0.5 * std::log(2.0)));
  const SequenceBatch misaligned = random_batch(rng, 3, 6);
  CHECK_THROWS(preference_loss(PreferenceVariant::DPO, g, &u, f, &misaligned, nullptr, cfg));
}

TEST_CASE("FLAT divergences") {
  Tape t;
  Var x = t.leaf(Matrix::Constant(1, 1, 0.25));
  const DivergencePair p = divergence_pair("pearson");
  CHECK(p.g_star(x).item() == doctest::Approx(2 * (0.25 - 1)));
  CHECK(p.f_star(x).item() == doctest::Approx(0.25 * 0.25 / 4 + 0.25));
  const DivergencePair id = divergence_pair("identity");
  CHECK(id.f_star(id.g_star(x)).item() == 0.25);
  CHECK_THROWS(divergence_pair("kl-typo"));

  // Uniform model: P = 1/V for both sequences, so the loss is -g*(P) + f*(g*(P)).
  const ModelConfig c = tiny();
  const Checkpoint u = Checkpoint::uniform(c);
  std::mt19937_64 rng(3);
  const SequenceBatch f = random_batch(rng, 2, 6), tmpl = random_batch(rng, 2, 6);
  Tape t2;
  ModelGraph g(t2, u);
  const double P = 1.0 / 260.0, gs = 2 * (P - 1);
  CHECK(flat_loss(g, f, tmpl, "pearson").total == doctest::Approx(-gs + gs * gs / 4 + gs));
}

TEST_CASE("task vector and WHP") {
  Vector o(3), r(3);
  o << 1, 2, 3;
  r << 2, 2, 1;
  CHECK(task_vector_unlearn(o, r) == Vector((Vector(3) << 0, 2, 5).finished()));
  CHECK_THROWS(task_vector_unlearn(o, Vector::Zero(2)));

  Vector po(3), pr(3);
  po << 0.5, 0.3, 0.2;
  pr << 0.8, 0.1, 0.1;
  const Vector w = whp_distribution(po, pr, 1.0);
  // raw = (0.2, 0.5, 0.3), already normalized
  CHECK((w - Vector((Vector(3) << 0.2, 0.5, 0.3).finished())).cwiseAbs().maxCoeff() < 1e-12);
  const Vector clipped = whp_distribution(po, pr, 3.0);
  CHECK(clipped[0] == 0.0);
  CHECK(clipped.sum() == doctest::Approx(1.0));
  CHECK((whp_distribution(po, pr, 0.0) - po).cwiseAbs().maxCoeff() < 1e-15);

  const ModelConfig c = tiny();
  const Checkpoint a = perturbed(c, 1, 0.1), b = perturbed(c, 2, 0.1);
  const WhpModel m(a, b, 1.0);
  const std::vector<int> ids = {1, 30, 31};
  const Matrix lp = m.next_token_log_probs(ids);
  for (Eigen::Index i = 0; i < lp.rows(); ++i) CHECK(lp.row(i).array().exp().sum() == doctest::Approx(1.0));
  const WhpModel same(a, a, 1.0);
  CHECK((same.next_token_log_probs(ids) - CheckpointModel(a).next_token_log_probs(ids)).cwiseAbs().maxCoeff() < 1e-10);
}
