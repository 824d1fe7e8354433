#include "ulab/smoothing.hpp"

#include <doctest.h>

#include <random>

using namespace ulab;
using Vector = Eigen::VectorXd;

namespace {

GradientBundle random_bundle(std::mt19937_64& rng, int dim, int K) {
  std::normal_distribution<double> n(0.0, 1.0);
  auto vec = [&] {
    Vector v(dim);
    for (int i = 0; i < dim; ++i) v[i] = n(rng);
    return v;
  };
  std::vector<Vector> gp;
  for (int k = 0; k < K - 1; ++k) gp.push_back(vec());
  return GradientBundle::make(vec(), std::move(gp), K);
}

}  // namespace

TEST_CASE("bundle construction") {
  Vector gf(2), a(2), b(2);
  gf << 1, 0;
  a << 1, 1;
  b << 3, -1;
  const GradientBundle bd = GradientBundle::make(gf, {a, b}, 3);
  CHECK(bd.g_p_bar == Vector((Vector(2) << 2, 0).finished()));
  CHECK(bd.dim() == 2);
  CHECK_THROWS_AS(GradientBundle::make(gf, {a}, 1), std::invalid_argument);
  CHECK_THROWS_AS(GradientBundle::make(gf, {}, 3), std::invalid_argument);
  const GradientBundle m = GradientBundle::from_mean(gf, bd.g_p_bar, 3);
  CHECK(m.g_p_bar == bd.g_p_bar);
}

TEST_CASE("deflection and update vectors at hand-computed points") {
  Vector gf(2), gp(2);
  gf << 2, 0;
  gp << 0, 1;
  const GradientBundle b = GradientBundle::make(gf, {gp}, 2);
  // u = g_p_bar - (1 - 1/2) g_f = (-1, 1)
  CHECK(deflection_vector(b) == Vector((Vector(2) << -1, 1).finished()));
  CHECK(update_vector(b, 0.0) == -gf);
  CHECK(update_vector(b, 1.0) == Vector((Vector(2) << -3, 1).finished()));
  // -(1 - r + r/K) g_f - (r/K) sum g_p at r = 1, K = 2: -(0.5)(2,0) - 0.5 (0,1)
  CHECK(combined_direction(b, 1.0) == Vector((Vector(2) << -1, -0.5).finished()));
  const auto d = optimal_smoothing_rate(b);
  CHECK(d.inner_product == doctest::Approx(-2.0));
  CHECK(d.deflection_norm_sq == doctest::Approx(2.0));
  CHECK(d.r_star == doctest::Approx(-1.0));
  CHECK(d.update_norm_sq_at_r_star == doctest::Approx(2.0));
  CHECK(d.update_norm_sq_at_zero == doctest::Approx(4.0));
}

TEST_CASE("the two update formulas stay distinct") {
  std::mt19937_64 rng(1);
  const GradientBundle b = random_bundle(rng, 6, 4);
  CHECK((update_vector(b, 0.0) - combined_direction(b, 0.0)).norm() < 1e-14);
  CHECK((update_vector(b, 0.5) - combined_direction(b, 0.5)).norm() > 1e-6);
}

TEST_CASE("closed-form rate minimises the update norm on a grid") {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const GradientBundle b = random_bundle(rng, 5 + trial % 7, 2 + trial % 5);
    const auto d = optimal_smoothing_rate(b);
    double best_r = -10, best = update_norm_sq(b, -10.0);
    for (int i = 1; i <= 20000; ++i) {
      const double r = -10 + i * 1e-3;
      const double v = update_norm_sq(b, r);
      if (v < best) best = v, best_r = r;
    }
    if (std::abs(d.r_star) < 9.9) CHECK(std::abs(best_r - d.r_star) <= 1e-3);
    CHECK(update_norm_sq(b, d.r_star) == doctest::Approx(update_vector(b, d.r_star).squaredNorm()).epsilon(1e-12));
    CHECK(sign_with_tolerance(d.r_star) == sign_with_tolerance(d.inner_product));
    CHECK(d.update_norm_sq_at_r_star <= d.update_norm_sq_at_zero + 1e-12);
  }
}

TEST_CASE("degenerate deflection") {
  Vector gf(2);
  gf << 2, 2;
  // K = 2: u = g_p - g_f / 2 = 0 when g_p = g_f / 2.
  const GradientBundle b = GradientBundle::make(gf, {Vector(gf / 2)}, 2);
  CHECK_THROWS_AS(optimal_smoothing_rate(b), std::domain_error);
}

TEST_CASE("sign profile counts") {
  std::mt19937_64 rng(3);
  std::vector<GradientBundle> bundles;
  for (int i = 0; i < 12; ++i) bundles.push_back(random_bundle(rng, 4, 3));
  Vector z = Vector::Zero(4);
  bundles.push_back(GradientBundle::make(z, {z, z}, 3));
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < bundles.size(); ++i) ids.push_back("q" + std::to_string(i));
  const SignProfile p = sign_profile(std::span<const GradientBundle>(bundles), std::span<const std::string>(ids));
  CHECK(p.rows.size() == 13);
  CHECK(p.total() == 13);
  CHECK(p.zero >= 1);
  CHECK(p.rows.back().sign == 0);
  for (std::size_t i = 0; i < bundles.size(); ++i) {
    CHECK(p.rows[i].instance_id == ids[i]);
    CHECK(p.rows[i].sign == sign_with_tolerance(bundles[i].g_f.dot(deflection_vector(bundles[i]))));
  }
  const std::vector<std::string> short_ids = {"a"};
  CHECK_THROWS(sign_profile(std::span<const GradientBundle>(bundles), std::span<const std::string>(short_ids)));
}

TEST_CASE("float bundles work too") {
  using FB = BasicGradientBundle<float>;
  FB::VectorType gf(2), gp(2);
  gf << 1.f, 0.f;
  gp << 0.f, 1.f;
  const FB b = FB::make(gf, {gp}, 2);
  CHECK(optimal_smoothing_rate(b).r_star == doctest::Approx(-0.4f));
}
