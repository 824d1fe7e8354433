// SPDX-License-Identifier: Apache-2.0
//
// Gradient geometry of the smoothed objective.
//
// With g_f the gradient of the (negated) forget loss, g_p^(k) the gradient of
// the k-th normal loss and their mean g_p_bar, the one-step update is
//
//     d(r) = -g_f + r * u,      u = g_p_bar - (1 - 1/K) * g_f,
//
// and ||d(r)||^2 = ||g_f||^2 - 2 r <g_f, u> + r^2 ||u||^2 is minimised at
// r* = <g_f, u> / ||u||^2.
//
// Note that d(r) and the combined direction returned by combined_direction()
// attach r with opposite orientation; both are kept exactly as defined and are
// never converted into one another.

#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ulab {

inline constexpr double kDeflectionTolerance = 1e-12;
inline constexpr double kSignTolerance = 1e-12;

template <typename Scalar>
struct BasicGradientBundle {
  using VectorType = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

  VectorType g_f;
  std::vector<VectorType> g_p;
  VectorType g_p_bar;
  int K = 2;

  Eigen::Index dim() const { return g_f.size(); }

  /// Builds a bundle and its normal-gradient mean. Throws on length mismatch
  /// or an empty normal list.
  static BasicGradientBundle make(VectorType forget, std::vector<VectorType> normals, int slots) {
    if (slots < 2) throw std::invalid_argument("GradientBundle: K must be at least 2");
    if (normals.empty()) throw std::invalid_argument("GradientBundle: no normal gradients");
    BasicGradientBundle b;
    b.K = slots;
    b.g_f = std::move(forget);
    b.g_p_bar = VectorType::Zero(b.g_f.size());
    for (const VectorType& v : normals) {
      if (v.size() != b.g_f.size())
        throw std::invalid_argument("GradientBundle: normal gradient of length " + std::to_string(v.size()) +
                                    " vs forget gradient of length " + std::to_string(b.g_f.size()));
      b.g_p_bar += v;
    }
    b.g_p_bar /= static_cast<Scalar>(normals.size());
    b.g_p = std::move(normals);
    return b;
  }

  /// Bundle given only g_f and the mean, for analyses that never need the
  /// individual normal gradients.
  static BasicGradientBundle from_mean(VectorType forget, VectorType mean, int slots) {
    return make(std::move(forget), std::vector<VectorType>{std::move(mean)}, slots);
  }
};

using GradientBundle = BasicGradientBundle<double>;

/// u = g_p_bar - (1 - 1/K) g_f
template <typename DF, typename DP>
auto deflection_vector(const Eigen::MatrixBase<DF>& g_f, const Eigen::MatrixBase<DP>& g_p_bar, int K) {
  using Scalar = typename DF::Scalar;
  const Scalar c = Scalar(1) - Scalar(1) / static_cast<Scalar>(K);
  return (g_p_bar - c * g_f).eval();
}

template <typename Scalar>
auto deflection_vector(const BasicGradientBundle<Scalar>& b) {
  return deflection_vector(b.g_f, b.g_p_bar, b.K);
}

/// d(r) = -g_f + r u
template <typename Scalar>
auto update_vector(const BasicGradientBundle<Scalar>& b, Scalar r) {
  return (-b.g_f + r * deflection_vector(b)).eval();
}

/// Combined direction of the smoothed objective:
/// -[(1 - r + r/K) g_f + (r/K) sum_k g_p^(k)].
template <typename Scalar>
auto combined_direction(const BasicGradientBundle<Scalar>& b, Scalar r) {
  const Scalar K = static_cast<Scalar>(b.K);
  typename BasicGradientBundle<Scalar>::VectorType normal_sum =
      BasicGradientBundle<Scalar>::VectorType::Zero(b.g_f.size());
  for (const auto& g : b.g_p) {
    if (g.size() != b.g_f.size()) throw std::invalid_argument("combined_direction: dimension mismatch");
    normal_sum += g;
  }
  return (-((Scalar(1) - r + r / K) * b.g_f + (r / K) * normal_sum)).eval();
}

template <typename Scalar>
struct SmoothingRateDiagnostics {
  Scalar r_star;
  Scalar inner_product;        // <g_f, u>
  Scalar deflection_norm_sq;   // ||u||^2
  Scalar update_norm_sq_at_r_star;
  Scalar update_norm_sq_at_zero;
};

/// r* = <g_f, u> / ||u||^2. Throws std::domain_error when ||u||^2 is at or
/// below the tolerance.
template <typename Scalar>
SmoothingRateDiagnostics<Scalar> optimal_smoothing_rate(const BasicGradientBundle<Scalar>& b,
                                                        Scalar tolerance = Scalar(kDeflectionTolerance)) {
  const auto u = deflection_vector(b);
  const Scalar uu = u.squaredNorm();
  if (!(uu > tolerance)) throw std::domain_error("degenerate deflection (u≈0): r* undefined");
  SmoothingRateDiagnostics<Scalar> d;
  d.inner_product = b.g_f.dot(u);
  d.deflection_norm_sq = uu;
  d.r_star = d.inner_product / uu;
  d.update_norm_sq_at_r_star = update_vector(b, d.r_star).squaredNorm();
  d.update_norm_sq_at_zero = b.g_f.squaredNorm();
  return d;
}

/// ||d(r)||^2 via the expanded quadratic.
template <typename Scalar>
Scalar update_norm_sq(const BasicGradientBundle<Scalar>& b, Scalar r) {
  const auto u = deflection_vector(b);
  return b.g_f.squaredNorm() - Scalar(2) * r * b.g_f.dot(u) + r * r * u.squaredNorm();
}

template <typename Scalar>
int sign_with_tolerance(Scalar v, Scalar tol = Scalar(kSignTolerance)) {
  if (v > tol) return 1;
  if (v < -tol) return -1;
  return 0;
}

struct SignProfileRow {
  std::string instance_id;
  double inner_product;
  int sign;
  bool operator==(const SignProfileRow&) const = default;
};

struct SignProfile {
  std::vector<SignProfileRow> rows;
  std::size_t positive = 0;
  std::size_t negative = 0;
  std::size_t zero = 0;

  std::size_t total() const { return positive + negative + zero; }
  bool operator==(const SignProfile&) const = default;
};

/// Per-instance sign of <g_f, u>.
template <typename Scalar>
SignProfile sign_profile(std::span<const BasicGradientBundle<Scalar>> bundles,
                         std::span<const std::string> instance_ids = {}) {
  if (!instance_ids.empty() && instance_ids.size() != bundles.size())
    throw std::invalid_argument("sign_profile: instance id count does not match bundle count");
  SignProfile p;
  for (std::size_t i = 0; i < bundles.size(); ++i) {
    const Scalar ip = bundles[i].g_f.dot(deflection_vector(bundles[i]));
    const int s = sign_with_tolerance(ip);
    p.rows.push_back({instance_ids.empty() ? std::to_string(i) : instance_ids[i], static_cast<double>(ip), s});
    if (s > 0) ++p.positive;
    else if (s < 0) ++p.negative;
    else ++p.zero;
  }
  return p;
}

}  // namespace ulab
