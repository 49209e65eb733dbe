#include <cmath>

#include <gtest/gtest.h>

#include "recfusion/diffusion.h"
#include "test_util.h"

namespace recfusion {
namespace {

double three_sigma(double p, int n) { return 3.0 * std::sqrt(p * (1.0 - p) / n); }

TEST(Schedule, LinearInterpolatesInclusiveEndpoints) {
  const Schedule s = linear_schedule(5, 0.1, 0.5);
  ASSERT_EQ(s.steps(), 5);
  EXPECT_DOUBLE_EQ(s.beta(1), 0.1);
  EXPECT_DOUBLE_EQ(s.beta(3), 0.3);
  EXPECT_DOUBLE_EQ(s.beta(5), 0.5);
  EXPECT_DOUBLE_EQ(linear_schedule(1, 0.2, 0.4).beta(1), 0.2);
}

TEST(Schedule, ConstantAlphaBarIsPower) {
  const Schedule s = constant_schedule(20, 0.01);
  for (int t = 1; t <= 20; ++t) {
    EXPECT_DOUBLE_EQ(s.beta(t), 0.01);
    EXPECT_NEAR(s.alpha_bar(t), std::pow(0.99, t), 1e-15);
  }
  EXPECT_DOUBLE_EQ(constant_schedule(3, 0.5).alpha_bar(3), 0.125);
  EXPECT_DOUBLE_EQ(s.alpha_bar(0), 1.0);
}

TEST(Schedule, AlphaBarMatchesBruteForceProduct) {
  Rng rng(3);
  for (int k = 0; k < 50; ++k) {
    const int T = 1 + static_cast<int>(rng.uniform_index(20));
    const double lo = 0.001 + 0.3 * rng.uniform();
    const Schedule s = linear_schedule(T, lo, lo + 0.3 * rng.uniform());
    double prod = 1.0;
    for (int t = 1; t <= T; ++t) {
      prod *= 1.0 - s.beta(t);
      EXPECT_NEAR(s.alpha_bar(t), prod, 1e-12);
      EXPECT_NEAR(s.alpha_bar(t), s.alpha_bar(t - 1) * s.alpha(t), 1e-15);
      EXPECT_LT(s.alpha_bar(t), s.alpha_bar(t - 1));
    }
  }
}

TEST(Schedule, RejectsInvalidBounds) {
  EXPECT_THROW(linear_schedule(0, 0.1, 0.1), std::invalid_argument);
  EXPECT_THROW(linear_schedule(3, 0.0, 0.1), std::invalid_argument);
  EXPECT_THROW(linear_schedule(3, 0.2, 0.1), std::invalid_argument);
  EXPECT_THROW(constant_schedule(3, 1.0), std::invalid_argument);
  EXPECT_THROW(constant_schedule(3, 0.1).beta(4), std::out_of_range);
}

TEST(BernoulliStep, ZeroRateIsIdentityAndUnitRateIsFairCoin) {
  Rng rng(1);
  const UserVector x = (UserVector(4) << 1, 0, 1, 0).finished();
  EXPECT_EQ(bernoulli_step(x, 0.0, rng), x);
  const int n = 100000;
  int ones = 0;
  for (int k = 0; k < n / 4; ++k) ones += static_cast<int>(bernoulli_step(x, 1.0, rng).sum());
  EXPECT_NEAR(static_cast<double>(ones) / n, 0.5, three_sigma(0.5, n));
}

TEST(BernoulliStep, StayProbabilityMatchesKernel) {
  Rng rng(2);
  const double beta = 0.3;
  const int n = 100000;
  const UserVector ones = UserVector::Ones(n);
  const double freq = bernoulli_step(ones, beta, rng).mean();
  EXPECT_NEAR(freq, 1.0 - beta / 2, three_sigma(1.0 - beta / 2, n));
}

TEST(BernoulliMarginal, TwoStepRecurrenceExample) {
  const Schedule s = constant_schedule(2, 0.1);
  const UserVector one = UserVector::Ones(1);
  EXPECT_NEAR(bernoulli_marginal(one, 1, s)[0], 0.95, 1e-15);
  EXPECT_NEAR(bernoulli_marginal(one, 2, s)[0], 0.905, 1e-15);
}

TEST(BernoulliMarginal, LimitsAndRange) {
  const UserVector x0 = (UserVector(3) << 1, 0, 1).finished();
  const Schedule tiny = constant_schedule(3, 1e-12);
  EXPECT_TRUE(bernoulli_marginal(x0, 3, tiny).isApprox(x0, 1e-10));
  const Schedule long_run = constant_schedule(2000, 0.05);
  const UserVector p = bernoulli_marginal(x0, 2000, long_run);
  EXPECT_TRUE((p.array() - 0.5).abs().maxCoeff() < 1e-12);
  EXPECT_THROW(bernoulli_marginal(x0, 0, tiny), std::out_of_range);
  EXPECT_THROW(bernoulli_marginal(x0, 4, tiny), std::out_of_range);
}

TEST(BernoulliMarginal, AgreesWithBinomialProcessRecurrence) {
  const Schedule s = linear_schedule(15, 0.02, 0.4);
  const UserVector x0 = (UserVector(2) << 1, 0).finished();
  for (int t = 1; t <= 15; ++t) {
    EXPECT_TRUE(bernoulli_marginal(x0, t, s)
                    .isApprox(process_marginal(BitProcess::kBinomial, x0, t, s), 1e-13));
  }
}

TEST(SymmetricFlip, IdentityAtZeroAndDoubleFlipAtOne) {
  Rng rng(4);
  const UserVector x = (UserVector(5) << 1, 0, 0, 1, 1).finished();
  EXPECT_EQ(symmetric_flip_forward(x, 0.0, rng), x);
  EXPECT_EQ(symmetric_flip_forward(x, 1.0, rng), (1.0 - x.array()).matrix());
  EXPECT_EQ(symmetric_flip_forward(symmetric_flip_forward(x, 1.0, rng), 1.0, rng), x);
}

TEST(SymmetricFlip, FlipFractionMatchesRate) {
  Rng rng(5);
  const int n = 100000;
  const double flipped = 1.0 - symmetric_flip_forward(UserVector::Ones(n), 0.01, rng).mean();
  EXPECT_NEAR(flipped, 0.01, three_sigma(0.01, n));
}

TEST(SymmetricFlip, HalfIsStationary) {
  Rng rng(6);
  const int n = 100000;
  const UserVector coin = sample_bits(UserVector::Constant(n, 0.5), rng);
  const double freq = symmetric_flip_forward(coin, 0.2, rng).mean();
  EXPECT_NEAR(freq, 0.5, three_sigma(0.5, n));
  const Schedule s = constant_schedule(1, 0.2);
  EXPECT_DOUBLE_EQ(process_marginal(BitProcess::kSymmetricFlip, UserVector(UserVector::Constant(1, 0.5)), 1, s)[0], 0.5);
}

TEST(ZeroAbsorbing, NeverCreatesOnesAndSurvivesAtKernelRate) {
  Rng rng(7);
  const int n = 100000;
  EXPECT_EQ(zero_absorbing_forward(UserVector::Zero(50), 0.9, rng), UserVector::Zero(50));
  const UserVector x = (UserVector(4) << 1, 0, 1, 1).finished();
  EXPECT_EQ(zero_absorbing_forward(x, 0.0, rng), x);
  const double beta = 0.2;
  const double survival = zero_absorbing_forward(UserVector::Ones(n), beta, rng).mean();
  EXPECT_NEAR(survival, 1.0 - beta / 2, three_sigma(1.0 - beta / 2, n));
  for (int k = 0; k < 200; ++k) {
    const UserVector in = sample_bits(UserVector::Constant(30, 0.3), rng);
    const UserVector out = zero_absorbing_forward(in, 0.5, rng);
    EXPECT_TRUE((out.array() <= in.array()).all());
  }
}

TEST(ProcessMarginal, ZeroAbsorbingIsSurvivalProduct) {
  const Schedule s = linear_schedule(6, 0.1, 0.3);
  double survive = 1.0;
  for (int t = 1; t <= 6; ++t) {
    survive *= 1.0 - s.beta(t) / 2;
    const UserVector p =
        process_marginal(BitProcess::kZeroAbsorbing, (UserVector(2) << 1, 0).finished(), t, s);
    EXPECT_NEAR(p[0], survive, 1e-15);
    EXPECT_EQ(p[1], 0.0);
  }
}

// Brute force: joint over (x0, x^{t-1}, x^t) by explicit two-state matrices.
double posterior_oracle(BitProcess process, const Schedule& s, int t, int x_t,
                        double pi) {
  auto step = [&](Eigen::Vector2d dist, int tau) {  // dist = (P(0), P(1))
    const BitKernel k = bit_kernel(process, s.beta(tau));
    Eigen::Matrix2d K;  // K(from, to)
    K << 1 - k.turn_on, k.turn_on, 1 - k.stay_on, k.stay_on;
    return Eigen::Vector2d(K.transpose() * dist);
  };
  double num = 0.0;
  double den = 0.0;
  for (int x0 = 0; x0 <= 1; ++x0) {
    Eigen::Vector2d d(x0 == 0 ? 1.0 : 0.0, x0 == 1 ? 1.0 : 0.0);
    for (int tau = 1; tau < t; ++tau) d = step(d, tau);
    const BitKernel k = bit_kernel(process, s.beta(t));
    const double w = x0 == 1 ? pi : 1.0 - pi;
    const double to_xt_from1 = x_t == 1 ? k.stay_on : 1 - k.stay_on;
    const double to_xt_from0 = x_t == 1 ? k.turn_on : 1 - k.turn_on;
    num += w * d[1] * to_xt_from1;
    den += w * (d[1] * to_xt_from1 + d[0] * to_xt_from0);
  }
  return num / den;
}

TEST(BitPosterior, MatchesEnumerationOracleAndDerivative) {
  const Schedule s = linear_schedule(8, 0.05, 0.3);
  for (BitProcess process :
       {BitProcess::kBinomial, BitProcess::kSymmetricFlip, BitProcess::kZeroAbsorbing}) {
    for (int t = 2; t <= 8; ++t) {
      for (int x_t = 0; x_t <= 1; ++x_t) {
        for (double pi : {0.1, 0.37, 0.8}) {
          if (process == BitProcess::kZeroAbsorbing && x_t == 1) {
            // x^t = 1 forces x^0 = x^{t-1} = 1.
            EXPECT_NEAR(bit_posterior(process, s, t, x_t, pi).value, 1.0, 1e-12);
            continue;
          }
          const PosteriorValue v = bit_posterior(process, s, t, x_t, pi);
          EXPECT_NEAR(v.value, posterior_oracle(process, s, t, x_t, pi), 1e-12);
          const double h = 1e-6;
          const double fd = (bit_posterior(process, s, t, x_t, pi + h).value -
                             bit_posterior(process, s, t, x_t, pi - h).value) /
                            (2 * h);
          EXPECT_NEAR(v.d_x0, fd, 1e-7);
        }
      }
    }
  }
}

TEST(GaussianForward, MomentsMatchClosedForm) {
  Rng rng(8);
  const Schedule s = constant_schedule(10, 0.05);
  const int n = 100000;
  const double ab = s.alpha_bar(7);
  const UserVector x = gaussian_forward(UserVector::Ones(n), 7, s, rng);
  const double mean = x.mean();
  const double var = (x.array() - mean).square().mean();
  EXPECT_NEAR(mean, std::sqrt(ab), 0.01 * std::sqrt(ab));
  EXPECT_NEAR(var, 1.0 - ab, 0.01 * (1.0 - ab) + 3 * std::sqrt(2.0 / n) * (1 - ab));

  const Schedule noisy = constant_schedule(400, 0.5);
  const UserVector z = gaussian_forward(UserVector::Ones(n), 400, noisy, rng);
  EXPECT_NEAR(z.mean(), 0.0, 0.02);
  EXPECT_NEAR((z.array() - z.mean()).square().mean(), 1.0, 0.02);

  const Schedule clean = constant_schedule(2, 1e-14);
  const UserVector x0 = (UserVector(3) << 1, 0, 1).finished();
  EXPECT_TRUE(gaussian_forward(x0, 2, clean, rng).isApprox(x0, 1e-6));
  EXPECT_THROW(gaussian_forward(x0, 3, clean, rng), std::out_of_range);
}

TEST(ExportTrace, ShapeRowZeroAndMonotoneRegimeC) {
  const Schedule s = constant_schedule(10, 0.2);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const UserVector x0 = sample_bits(UserVector::Constant(40, 0.4), rng);
    const TraceGrid g = export_trace(x0, Regime::kZeroAbsorbing, s, nullptr, rng);
    ASSERT_EQ(g.forward.rows(), 11);
    ASSERT_EQ(g.forward.cols(), 40);
    EXPECT_EQ(Eigen::VectorXd(g.forward.row(0).transpose()), x0);
    EXPECT_FALSE(g.reverse.has_value());
    for (int t = 1; t <= 10; ++t) {
      EXPECT_TRUE((g.forward.row(t).array() <= g.forward.row(t - 1).array()).all());
    }
  }
}

TEST(ExportTrace, ReverseGridStartsAtForwardEnd) {
  Rng rng(9);
  const Schedule s = constant_schedule(5, 0.01);
  const UserVector x0 = (UserVector(6) << 1, 1, 0, 0, 1, 0).finished();
  const ReverseModel oracle = [&x0](const Eigen::VectorXd&, int) { return x0; };
  const TraceGrid g = export_trace(x0, Regime::kMeanActivity, s, &oracle, rng);
  ASSERT_TRUE(g.reverse.has_value());
  EXPECT_EQ(g.reverse->rows(), 6);
  EXPECT_EQ(g.reverse->row(5), g.forward.row(5));
  EXPECT_TRUE((g.reverse->array() >= 0.0).all() && (g.reverse->array() <= 1.0).all());
  // A perfect x^0 predictor pulls the chain back to x0 at row 0.
  EXPECT_TRUE(Eigen::VectorXd(g.reverse->row(0).transpose()).isApprox(x0, 1e-12));
}

TEST(Regime, ParsesNames) {
  EXPECT_EQ(parse_regime("a"), Regime::kMeanActivity);
  EXPECT_EQ(parse_regime("b"), Regime::kCoinFlip);
  EXPECT_EQ(parse_regime("c"), Regime::kZeroAbsorbing);
  EXPECT_THROW(parse_regime("d"), std::invalid_argument);
  EXPECT_EQ(to_string(Regime::kCoinFlip), "b");
}

TEST(TraceCsv, WritesRectangularGrid) {
  testing::TempDir dir;
  Eigen::MatrixXd grid(3, 2);
  grid << 1, 0, 0.5, 0, 0, 0;
  write_trace_csv(grid, dir / "t.csv");
  EXPECT_EQ(testing::read_text(dir / "t.csv"),
            "step,item_0,item_1\n0,1,0\n1,0.5,0\n2,0,0\n");
}

}  // namespace
}  // namespace recfusion
