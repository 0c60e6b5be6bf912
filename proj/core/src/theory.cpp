#include "ndlab/theory.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <thread>

#include "ndlab/csv.hpp"
#include "ndlab/rng.hpp"

namespace ndlab::theory {

void TheoryParams::validate() const {
  if (!(sigma2 > 0.0)) throw std::invalid_argument("sigma2 must be > 0");
  if (!(mu > 0.0)) throw std::invalid_argument("mu must be > 0");
  if (!(rho >= 0.0 && rho <= 1.0)) throw std::invalid_argument("rho must lie in [0,1]");
  if (P < 1) throw std::invalid_argument("P must be >= 1");
  if (!(kappa_bar >= 0.0)) throw std::invalid_argument("kappa_bar must be >= 0");
  if (!(h0 >= 0.0 && h0 <= 1.0)) throw std::invalid_argument("h0 must lie in [0,1]");
}

double var_aggregate(double sigma2, double rho, std::size_t P) {
  if (P < 1) throw std::invalid_argument("var_aggregate: P must be >= 1");
  const double p = static_cast<double>(P);
  return sigma2 * ((1.0 - rho) / p + rho);
}

double cantelli_bound(double variance, double mu) {
  if (!(mu > 0.0)) throw std::invalid_argument("cantelli_bound: mu must be > 0");
  if (!(variance >= 0.0)) throw std::invalid_argument("cantelli_bound: variance must be >= 0");
  return variance / (variance + mu * mu);
}

double diversity_bound(const TheoryParams& params, double d_spec) {
  const double rho = params.kappa_bar * d_spec;
  if (!(rho >= 0.0 && rho <= 1.0)) {
    throw std::invalid_argument("diversity_bound: kappa_bar * d_spec = " +
                                std::to_string(rho) + " outside [0,1]");
  }
  TheoryParams p = params;
  p.rho = rho;
  p.validate();
  const double b = cantelli_bound(var_aggregate(p.sigma2, rho, p.P), p.mu) + p.h0;
  return std::clamp(b, 0.0, 1.0);
}

RhoValue rho_schedule(const RhoSchedule& s, std::size_t P) {
  if (P < 1) throw std::invalid_argument("rho_schedule: P must be >= 1");
  if (!(s.beta >= 0.0)) throw std::invalid_argument("rho_schedule: beta must be >= 0");
  if (!(s.gamma > 0.0)) throw std::invalid_argument("rho_schedule: gamma must be > 0");
  if (!(s.rho0 >= 0.0 && s.rho0 <= 1.0)) {
    throw std::invalid_argument("rho_schedule: rho0 must lie in [0,1]");
  }
  const double raw = s.rho0 + s.beta * std::pow(static_cast<double>(P - 1), s.gamma);
  RhoValue v;
  v.rho = std::min(raw, 1.0);
  v.clipped = raw > 1.0;
  return v;
}

BoundCurve bound_curve(double sigma2, double mu, const RhoSchedule& schedule,
                       std::span<const std::size_t> p_range) {
  if (p_range.empty()) throw std::invalid_argument("bound_curve: empty P range");
  BoundCurve curve;
  std::size_t prev = 0;
  for (std::size_t P : p_range) {
    if (P < 1 || P <= prev) {
      throw std::invalid_argument("bound_curve: P range must be ascending integers >= 1");
    }
    prev = P;
    const RhoValue r = rho_schedule(schedule, P);
    BoundRow row;
    row.P = P;
    row.rho = r.rho;
    row.clipped = r.clipped;
    row.g = var_aggregate(1.0, r.rho, P);
    row.bound = cantelli_bound(sigma2 * row.g, mu);
    curve.rows.push_back(row);
  }
  return curve;
}

PStar find_p_star(const BoundCurve& curve) {
  if (curve.rows.empty()) throw std::invalid_argument("find_p_star: empty curve");
  std::size_t best = 0;
  for (std::size_t i = 1; i < curve.rows.size(); ++i) {
    if (curve.rows[i].bound < curve.rows[best].bound) best = i;
  }
  PStar out;
  out.P = curve.rows[best].P;
  out.bound = curve.rows[best].bound;
  out.boundary = curve.rows.size() > 1 &&
                 (best == 0 || best + 1 == curve.rows.size());
  for (std::size_t i = 0; i < curve.rows.size(); ++i) {
    if (i != best && curve.rows[i].bound == out.bound) out.tie = true;
  }
  return out;
}

namespace {

struct ShardSums {
  std::size_t n = 0;
  std::size_t hits = 0;
  // Moments of (M - mu) accumulated in draw order.
  double s1 = 0.0;
  double s2 = 0.0;
  double s3 = 0.0;
  double s4 = 0.0;
};

ShardSums run_shard(double sigma, double mu, double rho, std::size_t P,
                    std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const double a = std::sqrt(rho);
  const double b = std::sqrt(1.0 - rho);
  const double inv_p = 1.0 / static_cast<double>(P);
  ShardSums s;
  s.n = n;
  for (std::size_t k = 0; k < n; ++k) {
    const double common = normal(rng);
    double acc = 0.0;
    for (std::size_t i = 0; i < P; ++i) acc += sigma * (a * common + b * normal(rng));
    const double dev = acc * inv_p;
    if (mu + dev <= 0.0) ++s.hits;
    const double d2 = dev * dev;
    s.s1 += dev;
    s.s2 += d2;
    s.s3 += d2 * dev;
    s.s4 += d2 * d2;
  }
  return s;
}

template <typename Fn>
void parallel_for(std::size_t count, std::size_t threads, Fn&& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, count));
  if (threads == 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      for (std::size_t i = t; i < count; i += threads) fn(i);
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace

McEstimate mc_hallucination_rate(double sigma2, double mu, double rho, std::size_t P,
                                 const McConfig& config) {
  if (!(rho >= 0.0 && rho <= 1.0)) {
    throw std::invalid_argument("mc_hallucination_rate: rho must lie in [0,1]");
  }
  if (!(sigma2 > 0.0)) throw std::invalid_argument("mc_hallucination_rate: sigma2 must be > 0");
  if (P < 1) throw std::invalid_argument("mc_hallucination_rate: P must be >= 1");
  if (config.n_samples < 10'000) {
    throw std::invalid_argument("mc_hallucination_rate: n_samples must be >= 1e4");
  }
  const std::size_t shards = std::max<std::size_t>(1, config.shards);
  std::vector<ShardSums> parts(shards);
  const double sigma = std::sqrt(sigma2);
  parallel_for(shards, config.threads, [&](std::size_t s) {
    const std::size_t lo = config.n_samples * s / shards;
    const std::size_t hi = config.n_samples * (s + 1) / shards;
    parts[s] = run_shard(sigma, mu, rho, P, hi - lo, derive_seed(config.seed, s));
  });

  ShardSums t;
  for (const ShardSums& p : parts) {
    t.n += p.n;
    t.hits += p.hits;
    t.s1 += p.s1;
    t.s2 += p.s2;
    t.s3 += p.s3;
    t.s4 += p.s4;
  }
  const double n = static_cast<double>(t.n);
  McEstimate e;
  e.n = t.n;
  e.rate = static_cast<double>(t.hits) / n;
  e.rate_se = std::sqrt(std::max(e.rate * (1.0 - e.rate), 0.0) / n);
  const double m1 = t.s1 / n;
  e.mean = mu + m1;
  // Central moments from raw moments of the deviation.
  const double c2 = t.s2 / n - m1 * m1;
  const double c4 = t.s4 / n - 4.0 * m1 * t.s3 / n + 6.0 * m1 * m1 * t.s2 / n -
                    3.0 * m1 * m1 * m1 * m1;
  e.variance = c2 * n / (n - 1.0);
  e.variance_se = std::sqrt(std::max(c4 - c2 * c2, 0.0) / n);
  return e;
}

std::vector<CertRow> certify_grid(const CertGrid& grid, const McConfig& config) {
  std::vector<CertRow> rows;
  std::uint64_t cell = 0;
  for (double s2 : grid.sigma2) {
    for (double mu : grid.mu) {
      for (double rho : grid.rho) {
        for (std::size_t P : grid.P) {
          McConfig c = config;
          c.seed = derive_seed(config.seed, cell++);
          CertRow r;
          r.sigma2 = s2;
          r.mu = mu;
          r.rho = rho;
          r.P = P;
          r.estimate = mc_hallucination_rate(s2, mu, rho, P, c);
          r.variance_expected = var_aggregate(s2, rho, P);
          r.bound = cantelli_bound(r.variance_expected, mu);
          r.bound_pass = r.estimate.rate <= r.bound + 3.0 * r.estimate.rate_se;
          r.variance_pass = std::abs(r.estimate.variance - r.variance_expected) <=
                            3.0 * r.estimate.variance_se;
          rows.push_back(r);
        }
      }
    }
  }
  return rows;
}

void write_bound_curve_csv(const std::filesystem::path& path, const BoundCurve& curve) {
  CsvWriter csv(path, {"P", "rho", "g", "B"});
  for (const BoundRow& r : curve.rows) {
    csv.cell(r.P).cell(r.rho).cell(r.g).cell(r.bound).end_row();
  }
}

void write_mc_cert_csv(const std::filesystem::path& path, std::span<const CertRow> rows) {
  CsvWriter csv(path, {"sigma2", "mu", "rho", "P", "rate", "se", "bound", "pass"});
  for (const CertRow& r : rows) {
    csv.cell(r.sigma2)
        .cell(r.mu)
        .cell(r.rho)
        .cell(r.P)
        .cell(r.estimate.rate)
        .cell(r.estimate.rate_se)
        .cell(r.bound)
        .cell(r.bound_pass)
        .end_row();
  }
}

}  // namespace ndlab::theory
