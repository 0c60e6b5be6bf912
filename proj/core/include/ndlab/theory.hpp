#pragma once

// Closed-form variance/bound arithmetic for averaged noisy streams, and a
// Monte Carlo estimator that checks the bounds empirically.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace ndlab::theory {

struct TheoryParams {
  double sigma2 = 1.0;
  double mu = 1.0;
  double rho = 0.0;
  std::size_t P = 1;
  double kappa_bar = 1.0;
  double h0 = 0.0;

  /// Throws std::invalid_argument naming the violated field.
  void validate() const;
};

/// rho(P) = rho0 + beta * (P - 1)^gamma, clipped to [0, 1].
struct RhoSchedule {
  double rho0 = 0.0;
  double beta = 0.01;
  double gamma = 1.0;
};

struct RhoValue {
  double rho = 0.0;
  bool clipped = false;
};

struct BoundRow {
  std::size_t P = 1;
  double rho = 0.0;
  double g = 1.0;
  double bound = 0.0;
  bool clipped = false;
};

struct BoundCurve {
  std::vector<BoundRow> rows;
};

struct PStar {
  std::size_t P = 1;
  double bound = 0.0;
  /// Minimizer sits at an end of the scanned range.
  bool boundary = false;
  /// Another P attained the same bound; the smaller P was kept.
  bool tie = false;
};

/// sigma2 * ((1 - rho) / P + rho)
double var_aggregate(double sigma2, double rho, std::size_t P);

/// One-sided Chebyshev tail at t = mu: variance / (variance + mu^2).
double cantelli_bound(double variance, double mu);

/// Cantelli bound with rho replaced by kappa_bar * d_spec, plus h0, clamped
/// to [0, 1].
double diversity_bound(const TheoryParams& params, double d_spec);

RhoValue rho_schedule(const RhoSchedule& schedule, std::size_t P);

BoundCurve bound_curve(double sigma2, double mu, const RhoSchedule& schedule,
                       std::span<const std::size_t> p_range);

PStar find_p_star(const BoundCurve& curve);

struct McConfig {
  std::size_t n_samples = 1'000'000;
  std::uint64_t seed = 0;
  /// Fixed shard count; results depend on (seed, shards) only, never on the
  /// number of threads.
  std::size_t shards = 64;
  std::size_t threads = 1;
};

struct McEstimate {
  std::size_t n = 0;
  /// Empirical P(M <= 0) and its binomial standard error.
  double rate = 0.0;
  double rate_se = 0.0;
  /// Sample mean and (unbiased) variance of M, with the variance's
  /// standard error from the fourth central moment.
  double mean = 0.0;
  double variance = 0.0;
  double variance_se = 0.0;
};

/// Draws M = mu + mean_i(m_i) with m_i = sigma * (sqrt(rho) c + sqrt(1-rho) e_i).
McEstimate mc_hallucination_rate(double sigma2, double mu, double rho,
                                 std::size_t P, const McConfig& config);

struct CertRow {
  double sigma2 = 0.0;
  double mu = 0.0;
  double rho = 0.0;
  std::size_t P = 1;
  McEstimate estimate;
  double variance_expected = 0.0;
  double bound = 0.0;
  bool bound_pass = false;
  bool variance_pass = false;
};

struct CertGrid {
  std::vector<double> sigma2{0.25, 1.0, 4.0};
  std::vector<double> mu{0.5, 1.0, 2.0};
  std::vector<double> rho{0.0, 0.3, 0.7, 1.0};
  std::vector<std::size_t> P{1, 2, 4, 8};
};

/// Runs the estimator on every grid cell; cell k uses seed derived from
/// (config.seed, k). A cell passes when rate <= bound + 3 SE (bound) and
/// |variance - expected| <= 3 SE (variance).
std::vector<CertRow> certify_grid(const CertGrid& grid, const McConfig& config);

void write_bound_curve_csv(const std::filesystem::path& path, const BoundCurve& curve);
void write_mc_cert_csv(const std::filesystem::path& path,
                       std::span<const CertRow> rows);

}  // namespace ndlab::theory
