#include "ndlab/stats.hpp"

#include <gtest/gtest.h>

#include <boost/math/distributions/chi_squared.hpp>
#include <boost/math/distributions/students_t.hpp>
#include <boost/math/special_functions/beta.hpp>
#include <boost/math/special_functions/gamma.hpp>
#include <cmath>
#include <random>

namespace ndlab::intervention {
namespace {

TEST(SpecialFunctions, IncompleteBetaMatchesBoost) {
  for (double a : {0.5, 1.0, 2.5, 10.0, 49.5}) {
    for (double b : {0.5, 1.0, 3.0, 20.0}) {
      for (double x : {0.001, 0.1, 0.37, 0.5, 0.8, 0.999}) {
        EXPECT_NEAR(incomplete_beta(a, b, x), boost::math::ibeta(a, b, x), 1e-12)
            << a << " " << b << " " << x;
      }
    }
  }
  EXPECT_EQ(incomplete_beta(2, 3, 0.0), 0.0);
  EXPECT_EQ(incomplete_beta(2, 3, 1.0), 1.0);
  EXPECT_THROW(incomplete_beta(0, 1, 0.5), std::invalid_argument);
}

TEST(SpecialFunctions, IncompleteGammaMatchesBoost) {
  for (double a : {0.5, 1.0, 4.0, 17.5, 100.0}) {
    for (double x : {0.01, 0.5, 2.0, 10.0, 50.0, 130.0}) {
      EXPECT_NEAR(gamma_p(a, x), boost::math::gamma_p(a, x), 1e-12) << a << " " << x;
      const double q = boost::math::gamma_q(a, x);
      EXPECT_NEAR(gamma_q(a, x), q, 1e-12 + 1e-9 * q) << a << " " << x;
    }
  }
}

TEST(Distributions, StudentTMatchesBoost) {
  for (double dof : {1.0, 3.0, 9.0, 127.0}) {
    boost::math::students_t dist(dof);
    for (double t : {-4.0, -1.3, 0.0, 0.7, 2.2, 6.0}) {
      EXPECT_NEAR(student_t_cdf(t, dof), boost::math::cdf(dist, t), 1e-12);
      EXPECT_NEAR(student_t_two_sided(t, dof), 2 * boost::math::cdf(dist, -std::abs(t)), 1e-12);
    }
  }
  // Tabulated: t = 2.262 at 9 dof is the two-sided 5% point.
  EXPECT_NEAR(student_t_two_sided(2.262157, 9), 0.05, 1e-6);
}

TEST(Distributions, ChiSquareMatchesBoost) {
  for (double dof : {1.0, 2.0, 8.0, 30.0}) {
    boost::math::chi_squared dist(dof);
    for (double x : {0.1, 1.0, 5.545, 15.5, 60.0}) {
      EXPECT_NEAR(chi_square_upper(x, dof), boost::math::cdf(boost::math::complement(dist, x)),
                  1e-12);
    }
  }
  EXPECT_NEAR(chi_square_upper(3.841459, 1), 0.05, 1e-6);
}

TEST(PairedT, AllZeroIsNoEffect) {
  const std::vector<double> z(10, 0.0);
  const TTestResult r = paired_t_test(z);
  EXPECT_EQ(r.flag, TestFlag::kNoEffect);
  EXPECT_EQ(r.t, 0.0);
  EXPECT_EQ(r.p, 1.0);
}

TEST(PairedT, ZeroVarianceNonzeroMeanIsDegenerate) {
  const std::vector<double> d{1, 1, 1, 1};
  const TTestResult r = paired_t_test(d);
  EXPECT_EQ(r.flag, TestFlag::kDegenerate);
  EXPECT_TRUE(std::isinf(r.t));
}

TEST(PairedT, MatchesClosedForm) {
  const std::vector<double> d{0.3, -0.1, 0.5, 0.2, 0.05, 0.4};
  const TTestResult r = paired_t_test(d);
  double mean = 0;
  for (double v : d) mean += v;
  mean /= 6;
  double ss = 0;
  for (double v : d) ss += (v - mean) * (v - mean);
  const double sd = std::sqrt(ss / 5);
  EXPECT_NEAR(r.t, mean / (sd / std::sqrt(6.0)), 1e-12);
  boost::math::students_t dist(5);
  EXPECT_NEAR(r.p, 2 * boost::math::cdf(dist, -std::abs(r.t)), 1e-12);
  EXPECT_NEAR(r.effect_size, mean / sd, 1e-12);
  EXPECT_THROW(paired_t_test(std::vector<double>{1.0}), std::invalid_argument);
}

TEST(PairedT, PowerAgainstShiftedNormal) {
  std::mt19937_64 rng(17);
  std::normal_distribution<double> n(0.5, 1.0);
  int hits = 0;
  for (int rep = 0; rep < 200; ++rep) {
    std::vector<double> d(100);
    for (double& v : d) v = n(rng);
    hits += paired_t_test(d).p < 0.01;
  }
  EXPECT_GE(hits, 190);
}

TEST(PairedT, NullCalibration) {
  std::mt19937_64 rng(23);
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> ps;
  for (int rep = 0; rep < 500; ++rep) {
    std::vector<double> d(64);
    for (double& v : d) v = n(rng);
    ps.push_back(paired_t_test(d).p);
  }
  EXPECT_LT(ks_uniform_distance(ps), 0.1);
}

TEST(Fisher, Goldens) {
  const std::vector<double> four(4, 0.5);
  const FisherResult r = fisher_combine(four);
  EXPECT_NEAR(r.chi2, -8 * std::log(0.5), 1e-12);
  EXPECT_NEAR(r.chi2, 5.545, 1e-3);
  EXPECT_EQ(r.dof, 8u);
  boost::math::chi_squared dist(8);
  EXPECT_NEAR(r.p, boost::math::cdf(boost::math::complement(dist, r.chi2)), 1e-12);
  for (double p : {1e-6, 0.03, 0.5, 1.0}) {
    EXPECT_NEAR(fisher_combine(std::vector<double>{p}).p, p, 1e-9);
  }
  EXPECT_EQ(fisher_combine(std::vector<double>{1.0, 1.0}).chi2, 0.0);
}

TEST(Fisher, Rejections) {
  EXPECT_THROW(fisher_combine(std::vector<double>{0.2, 0.0}), std::invalid_argument);
  EXPECT_THROW(fisher_combine(std::vector<double>{1.2}), std::invalid_argument);
  EXPECT_THROW(fisher_combine(std::vector<double>{}), std::invalid_argument);
}

TEST(Fisher, Monotone) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(1e-4, 1.0);
  for (int rep = 0; rep < 200; ++rep) {
    std::vector<double> p(4);
    for (double& v : p) v = u(rng);
    const double before = fisher_combine(p).p;
    p[rep % 4] *= 0.5;
    EXPECT_LE(fisher_combine(p).p, before);
  }
}

TEST(McNemar, Goldens) {
  const McNemarResult r = mcnemar_test(15, 0);
  EXPECT_TRUE(r.exact);
  EXPECT_NEAR(r.p, 2 * std::pow(0.5, 15), 1e-9);
  EXPECT_EQ(mcnemar_test(7, 7).p, 1.0);
  const McNemarResult none = mcnemar_test(0, 0);
  EXPECT_TRUE(none.no_discordant);
  EXPECT_EQ(none.p, 1.0);
  // Above the exact limit: continuity-corrected chi-square.
  const McNemarResult big = mcnemar_test(30, 10);
  EXPECT_FALSE(big.exact);
  EXPECT_NEAR(big.statistic, 19.0 * 19.0 / 40.0, 1e-12);
  boost::math::chi_squared dist(1);
  EXPECT_NEAR(big.p, boost::math::cdf(boost::math::complement(dist, big.statistic)), 1e-12);
  // Exact tail oracle through the binomial CDF.
  EXPECT_NEAR(mcnemar_test(3, 12).p, 2 * boost::math::ibeta(12, 4, 0.5), 1e-12);
}

TEST(Bootstrap, IdenticalArraysAndSeparation) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(0, 1);
  std::vector<double> a(50);
  for (double& v : a) v = n(rng);
  EXPECT_GE(bootstrap_test(a, a, 10000, 1), 0.95);
  const std::vector<double> ones(40, 1.0), zeros(40, 0.0);
  EXPECT_LE(bootstrap_test(ones, zeros, 10000, 1), 2.0 / 10000);
  EXPECT_EQ(bootstrap_test(a, a, 2000, 9), bootstrap_test(a, a, 2000, 9));
  EXPECT_THROW(bootstrap_test(ones, std::vector<double>(3, 0.0), 1000, 1), std::invalid_argument);
  EXPECT_THROW(bootstrap_test(ones, zeros, 999, 1), std::invalid_argument);
}

TEST(Bootstrap, PowerAgainstHalfSigmaShift) {
  std::mt19937_64 rng(29);
  std::normal_distribution<double> n(0, 1);
  int hits = 0;
  const int reps = 40;
  for (int rep = 0; rep < reps; ++rep) {
    std::vector<double> a(200), b(200);
    for (std::size_t i = 0; i < 200; ++i) {
      b[i] = n(rng);
      a[i] = b[i] + 0.5 + n(rng);
    }
    hits += bootstrap_test(a, b, 2000, rep) < 0.05;
  }
  EXPECT_GE(hits, 0.9 * reps);
}

TEST(Ks, Distance) {
  EXPECT_NEAR(ks_uniform_distance({0.5}), 0.5, 1e-15);
  std::vector<double> grid;
  for (int i = 0; i < 100; ++i) grid.push_back((i + 0.5) / 100);
  EXPECT_NEAR(ks_uniform_distance(grid), 0.005, 1e-12);
}

}  // namespace
}  // namespace ndlab::intervention
