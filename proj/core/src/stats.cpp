#include "ndlab/stats.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>

#include "ndlab/rng.hpp"

namespace ndlab::intervention {

namespace {

constexpr double kTiny = 1e-300;
constexpr double kEps = 1e-15;
constexpr int kMaxIter = 10000;

// Continued fraction for the incomplete beta (modified Lentz).
double beta_cf(double a, double b, double x) {
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::abs(d) < kTiny) d = kTiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < kEps) return h;
  }
  throw std::runtime_error("incomplete beta: continued fraction did not converge");
}

double gamma_series(double a, double x) {
  double ap = a, sum = 1.0 / a, del = sum;
  for (int n = 0; n < kMaxIter; ++n) {
    ap += 1.0;
    del *= x / ap;
    sum += del;
    if (std::abs(del) < std::abs(sum) * kEps) {
      return sum * std::exp(-x + a * std::log(x) - std::lgamma(a));
    }
  }
  throw std::runtime_error("incomplete gamma: series did not converge");
}

double gamma_cf(double a, double x) {
  double b = x + 1.0 - a, c = 1.0 / kTiny, d = 1.0 / b, h = d;
  for (int i = 1; i <= kMaxIter; ++i) {
    const double an = -i * (i - a);
    b += 2.0;
    d = an * d + b;
    if (std::abs(d) < kTiny) d = kTiny;
    c = b + an / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < kEps) return std::exp(-x + a * std::log(x) - std::lgamma(a)) * h;
  }
  throw std::runtime_error("incomplete gamma: continued fraction did not converge");
}

}  // namespace

double incomplete_beta(double a, double b, double x) {
  if (!(a > 0.0) || !(b > 0.0)) throw std::invalid_argument("incomplete_beta: a, b must be positive");
  if (!(x >= 0.0 && x <= 1.0)) throw std::invalid_argument("incomplete_beta: x outside [0, 1]");
  if (x == 0.0 || x == 1.0) return x;
  const double front = std::exp(std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                                a * std::log(x) + b * std::log1p(-x));
  if (x < (a + 1.0) / (a + b + 2.0)) return front * beta_cf(a, b, x) / a;
  return 1.0 - front * beta_cf(b, a, 1.0 - x) / b;
}

double gamma_p(double a, double x) {
  if (!(a > 0.0)) throw std::invalid_argument("gamma_p: a must be positive");
  if (!(x >= 0.0)) throw std::invalid_argument("gamma_p: x must be non-negative");
  if (x == 0.0) return 0.0;
  if (x < a + 1.0) return gamma_series(a, x);
  return 1.0 - gamma_cf(a, x);
}

double gamma_q(double a, double x) {
  if (!(a > 0.0)) throw std::invalid_argument("gamma_q: a must be positive");
  if (!(x >= 0.0)) throw std::invalid_argument("gamma_q: x must be non-negative");
  if (x == 0.0) return 1.0;
  if (x < a + 1.0) return 1.0 - gamma_series(a, x);
  return gamma_cf(a, x);
}

double student_t_cdf(double t, double dof) {
  if (!(dof > 0.0)) throw std::invalid_argument("student_t_cdf: dof must be positive");
  if (std::isinf(t)) return t > 0 ? 1.0 : 0.0;
  const double tail = 0.5 * incomplete_beta(0.5 * dof, 0.5, dof / (dof + t * t));
  return t > 0 ? 1.0 - tail : tail;
}

double student_t_two_sided(double t, double dof) {
  if (!(dof > 0.0)) throw std::invalid_argument("student_t_two_sided: dof must be positive");
  if (std::isinf(t)) return 0.0;
  return incomplete_beta(0.5 * dof, 0.5, dof / (dof + t * t));
}

double chi_square_upper(double x, double dof) {
  if (!(dof > 0.0)) throw std::invalid_argument("chi_square_upper: dof must be positive");
  if (x <= 0.0) return 1.0;
  return gamma_q(0.5 * dof, 0.5 * x);
}

const char* to_string(TestFlag f) {
  switch (f) {
    case TestFlag::kOk: return "ok";
    case TestFlag::kNoEffect: return "no-effect";
    case TestFlag::kDegenerate: return "degenerate";
  }
  return "?";
}

TTestResult paired_t_test(std::span<const double> deltas) {
  if (deltas.size() < 2) throw std::invalid_argument("paired_t_test: need at least 2 deltas");
  TTestResult r;
  r.n = deltas.size();
  r.dof = static_cast<double>(r.n - 1);
  const double n = static_cast<double>(r.n);
  r.mean = std::accumulate(deltas.begin(), deltas.end(), 0.0) / n;
  double ss = 0.0;
  for (double d : deltas) ss += (d - r.mean) * (d - r.mean);
  r.sd = std::sqrt(ss / r.dof);
  const bool all_zero = std::all_of(deltas.begin(), deltas.end(), [](double d) { return d == 0.0; });
  if (all_zero) {
    r.flag = TestFlag::kNoEffect;
    return r;
  }
  // Spread at rounding level counts as zero variance.
  if (r.sd <= 1e-12 * std::max(1.0, std::abs(r.mean))) {
    r.flag = TestFlag::kDegenerate;
    r.t = std::copysign(std::numeric_limits<double>::infinity(), r.mean);
    r.p = 0.0;
    return r;
  }
  r.t = r.mean / (r.sd / std::sqrt(n));
  r.p = student_t_two_sided(r.t, r.dof);
  r.effect_size = r.mean / r.sd;
  return r;
}

FisherResult fisher_combine(std::span<const double> p_values) {
  if (p_values.empty()) throw std::invalid_argument("fisher_combine: no p-values");
  FisherResult r;
  for (double p : p_values) {
    if (!(p > 0.0 && p <= 1.0)) {
      throw std::invalid_argument("fisher_combine: p-value " + std::to_string(p) +
                                  " outside (0, 1]");
    }
    r.chi2 -= 2.0 * std::log(p);
  }
  r.dof = 2 * p_values.size();
  r.p = chi_square_upper(r.chi2, static_cast<double>(r.dof));
  return r;
}

McNemarResult mcnemar_test(std::uint64_t b, std::uint64_t c, std::uint64_t exact_limit) {
  McNemarResult r;
  const std::uint64_t n = b + c;
  if (n == 0) {
    r.no_discordant = true;
    return r;
  }
  if (n <= exact_limit) {
    const std::uint64_t k = std::min(b, c);
    double tail = 0.0;
    for (std::uint64_t i = 0; i <= k; ++i) {
      const double log_term = std::lgamma(n + 1.0) - std::lgamma(i + 1.0) -
                              std::lgamma(static_cast<double>(n - i) + 1.0) -
                              static_cast<double>(n) * std::log(2.0);
      tail += std::exp(log_term);
    }
    r.p = std::min(1.0, 2.0 * tail);
    return r;
  }
  r.exact = false;
  const double diff = std::abs(static_cast<double>(b) - static_cast<double>(c)) - 1.0;
  r.statistic = diff * diff / static_cast<double>(n);
  r.p = chi_square_upper(r.statistic, 1.0);
  return r;
}

double bootstrap_test(std::span<const double> a, std::span<const double> b,
                      std::size_t n_resamples, std::uint64_t seed) {
  if (a.size() != b.size()) throw std::invalid_argument("bootstrap_test: length mismatch");
  if (a.empty()) throw std::invalid_argument("bootstrap_test: empty samples");
  if (n_resamples < 1000) throw std::invalid_argument("bootstrap_test: need at least 1000 resamples");
  const std::size_t n = a.size();
  std::vector<double> diff(n);
  for (std::size_t i = 0; i < n; ++i) diff[i] = a[i] - b[i];
  Rng rng = make_rng(seed, "bootstrap");
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  std::size_t le = 0, ge = 0;
  for (std::size_t r = 0; r < n_resamples; ++r) {
    double s = 0.0;
    for (std::size_t k = 0; k < n; ++k) s += diff[pick(rng)];
    const double m = s / static_cast<double>(n);
    le += m <= 0.0;
    ge += m >= 0.0;
  }
  const double denom = static_cast<double>(n_resamples) + 1.0;
  const double lo = (static_cast<double>(le) + 1.0) / denom;
  const double hi = (static_cast<double>(ge) + 1.0) / denom;
  return std::min(1.0, 2.0 * std::min(lo, hi));
}

double ks_uniform_distance(std::vector<double> sample) {
  if (sample.empty()) throw std::invalid_argument("ks_uniform_distance: empty sample");
  std::sort(sample.begin(), sample.end());
  const double n = static_cast<double>(sample.size());
  double d = 0.0;
  for (std::size_t i = 0; i < sample.size(); ++i) {
    const double x = std::clamp(sample[i], 0.0, 1.0);
    d = std::max({d, (static_cast<double>(i) + 1.0) / n - x, x - static_cast<double>(i) / n});
  }
  return d;
}

}  // namespace ndlab::intervention
