#pragma once

// Hypothesis tests used by the intervention experiments, with their own
// special functions (regularized incomplete beta and gamma).

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace ndlab::intervention {

/// Regularized lower incomplete beta I_x(a, b).
double incomplete_beta(double a, double b, double x);
/// Regularized lower and upper incomplete gamma P(a, x), Q(a, x).
double gamma_p(double a, double x);
double gamma_q(double a, double x);

double student_t_cdf(double t, double dof);
/// Two-sided tail probability P(|T| >= |t|).
double student_t_two_sided(double t, double dof);
double chi_square_upper(double x, double dof);

enum class TestFlag {
  kOk,
  /// Every delta is zero: t = 0, p = 1.
  kNoEffect,
  /// Zero variance with a nonzero mean: t is infinite.
  kDegenerate,
};
const char* to_string(TestFlag f);

struct TTestResult {
  double t = 0.0;
  double p = 1.0;
  double dof = 0.0;
  double mean = 0.0;
  double sd = 0.0;
  std::size_t n = 0;
  /// Cohen's d for paired samples, mean / sd (0 when sd is 0).
  double effect_size = 0.0;
  TestFlag flag = TestFlag::kOk;
};

TTestResult paired_t_test(std::span<const double> deltas);

struct FisherResult {
  double chi2 = 0.0;
  std::size_t dof = 0;
  double p = 1.0;
};

/// Throws on an empty list or any p outside (0, 1].
FisherResult fisher_combine(std::span<const double> p_values);

struct McNemarResult {
  double p = 1.0;
  bool exact = true;
  double statistic = 0.0;  // continuity-corrected chi-square when not exact
  bool no_discordant = false;
};

/// Exact two-sided binomial test while b + c <= exact_limit, chi-square with
/// continuity correction above it.
McNemarResult mcnemar_test(std::uint64_t b, std::uint64_t c, std::uint64_t exact_limit = 25);

/// Paired bootstrap of the mean difference a - b. The two-sided p counts
/// resampled means on each side of zero, with add-one smoothing.
double bootstrap_test(std::span<const double> a, std::span<const double> b,
                      std::size_t n_resamples = 10000, std::uint64_t seed = 0);

/// Kolmogorov-Smirnov distance between a sample and Uniform(0, 1).
double ks_uniform_distance(std::vector<double> sample);

}  // namespace ndlab::intervention
