#include "covprop/certify.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <sstream>
#include <utility>
#include <vector>

#include "covprop/moments.hpp"
#include "covprop/network.hpp"

using covprop::BoundConfig;
using covprop::CertResult;
using covprop::Error;
using covprop::ErrorKind;
using covprop::Image;
using covprop::LinearLayer;
using covprop::Matrix;
using covprop::MomentState;
using covprop::NetworkSpec;
using covprop::NormalRng;
using covprop::Shape;
using covprop::Vector;

namespace {

Matrix random_psd(int d, NormalRng& rng) {
  Matrix f(d, d);
  for (double& v : f.data) v = rng.normal();
  return matmul(f.transposed(), f);
}

MomentState random_flat_state(int pixels, int channels, NormalRng& rng) {
  MomentState s;
  s.height = 1;
  s.width = pixels;
  s.channels = channels;
  s.flattened = true;
  s.cov = random_psd(channels, rng);
  s.means.assign(pixels, Vector(channels));
  for (auto& m : s.means)
    for (double& v : m.data) v = rng.normal();
  return s;
}

LinearLayer random_linear(int in_dim, int out_dim, NormalRng& rng) {
  LinearLayer lin;
  lin.in_dim = in_dim;
  lin.out_dim = out_dim;
  lin.weights = Matrix(in_dim, out_dim);
  for (double& v : lin.weights.data) v = rng.normal();
  lin.bias = Vector(out_dim);
  for (double& v : lin.bias.data) v = rng.normal();
  return lin;
}

}  // namespace

TEST(LowerProb, TiedMeansGiveHalf) {
  Vector mu{0.7, 0.7, 0.1};
  const auto m = covprop::lower_prob(mu, Matrix::identity(3));
  EXPECT_EQ(m.top, 0);
  EXPECT_EQ(m.second, 1);
  EXPECT_EQ(m.p, 0.5);
  EXPECT_EQ(m.z, 0.0);
}

TEST(LowerProb, MatchesMonteCarloForUnitCovariance) {
  Vector mu{1.0, 0.0};
  const auto m = covprop::lower_prob(mu, Matrix::identity(2));
  EXPECT_EQ(m.top, 0);
  EXPECT_EQ(m.second, 1);
  EXPECT_NEAR(m.p, 0.7602499389065233, 1e-12);

  NormalRng rng(40);
  const int n = 1000000;
  long wins = 0;
  for (int i = 0; i < n; ++i) {
    const double x1 = 1.0 + rng.normal();
    const double x2 = rng.normal();
    if (x1 > x2) ++wins;
  }
  EXPECT_NEAR(m.p, static_cast<double>(wins) / n, 0.002);
}

TEST(LowerProb, DegenerateDifferenceVarianceCertifies) {
  Vector mu{0.3, 0.1};
  Matrix cov(2, 2);
  cov(0, 0) = cov(1, 1) = cov(0, 1) = cov(1, 0) = 1.0;
  const auto m = covprop::lower_prob(mu, cov);
  EXPECT_EQ(m.p, 1.0);
  EXPECT_GT(m.z, 1e9);
}

TEST(LowerProb, RejectsBadInputs) {
  EXPECT_THROW(covprop::lower_prob(Vector{1.0}, Matrix::identity(1)), Error);
  EXPECT_THROW(covprop::lower_prob(Vector{1.0, 0.0}, Matrix::identity(3)), Error);
}

TEST(CertifiedRadius, KnownClosedFormValue) {
  Vector mu{1.0, 0.0};
  const CertResult res = covprop::certified_radius(mu, Matrix::identity(2), 0.5);
  EXPECT_EQ(res.predicted, 0);
  EXPECT_EQ(res.runner_up, 1);
  EXPECT_NEAR(res.margin_z, 1.0 / std::sqrt(2.0), 1e-15);
  EXPECT_NEAR(res.radius, 0.35355339059327373, 1e-12);
  EXPECT_NEAR(res.p_lower, 0.7602499389065233, 1e-12);
}

TEST(CertifiedRadius, TiedMeansGiveZeroRadius) {
  Vector mu{0.2, 0.2};
  const CertResult res = covprop::certified_radius(mu, Matrix::identity(2), 0.5);
  EXPECT_EQ(res.radius, 0.0);
  EXPECT_EQ(res.p_lower, 0.5);
}

TEST(CertifiedRadius, RejectsNonpositiveSigma) {
  Vector mu{1.0, 0.0};
  EXPECT_THROW(covprop::certified_radius(mu, Matrix::identity(2), 0.0), Error);
  EXPECT_THROW(covprop::certified_radius(mu, Matrix::identity(2), -0.5), Error);
}

TEST(CertifiedRadius, SigmaScalingLeavesLinearNetworkRadiusFixed) {
  NormalRng rng(41);
  NetworkSpec net;
  net.input_shape = Shape{1, 1, 3};
  net.class_count = 3;
  net.layers.push_back({random_linear(3, 3, rng)});
  net.validate();
  Image x(1, 1, 3);
  for (double& v : x.data) v = rng.normal();

  const auto lo = covprop::propagate_all(net, x, BoundConfig{0.0, 0.25});
  const auto hi = covprop::propagate_all(net, x, BoundConfig{0.0, 0.5});
  const CertResult a = covprop::certified_radius(lo.final_state.means[0], lo.final_state.cov, 0.25);
  const CertResult b = covprop::certified_radius(hi.final_state.means[0], hi.final_state.cov, 0.5);
  EXPECT_EQ(a.predicted, b.predicted);
  EXPECT_NEAR(b.margin_z, 0.5 * a.margin_z, 1e-10 * std::abs(a.margin_z));
  EXPECT_NEAR(b.radius, a.radius, 1e-10 * std::abs(a.radius));
}

TEST(CertifiedRadius, ClosedFormMatchesCdfRoundTrip) {
  const double sigma = 0.5;
  for (double z : {1e-5, 0.01, 0.3, 1.0, 2.0, 3.5, 4.5}) {
    const double p = covprop::std_normal_cdf(z);
    ASSERT_GT(p, 1e-6);
    ASSERT_LT(p, 1.0 - 1e-6);
    const double round_trip =
        sigma / 2.0 * (covprop::std_normal_cdf_inv(p) - covprop::std_normal_cdf_inv(1.0 - p));
    EXPECT_NEAR(round_trip, sigma * z, 1e-9) << "z = " << z;
  }
}

TEST(CertifiedRadius, MonotoneInTopMean) {
  NormalRng rng(42);
  const Matrix cov = random_psd(4, rng);
  Vector mu{1.0, 0.2, -0.3, 0.4};
  double last = -1.0;
  for (double bump = 0.0; bump < 2.0; bump += 0.1) {
    Vector shifted = mu;
    shifted[0] += bump;
    const CertResult res = covprop::certified_radius(shifted, cov, 0.25);
    EXPECT_EQ(res.predicted, 0);
    EXPECT_GE(res.radius, last);
    last = res.radius;
  }
}

TEST(CertifiedRadius, ConsistentScalingLeavesResultInvariant) {
  NormalRng rng(43);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix cov = random_psd(5, rng);
    Vector mu(5);
    for (double& v : mu.data) v = rng.normal();
    const double a = 3.7;
    Vector mu_scaled = mu;
    for (double& v : mu_scaled.data) v *= a;
    const Matrix cov_scaled = scaled(cov, a * a);
    const CertResult base = covprop::certified_radius(mu, cov, 0.25);
    const CertResult big = covprop::certified_radius(mu_scaled, cov_scaled, 0.25);
    EXPECT_EQ(base.predicted, big.predicted);
    EXPECT_EQ(base.runner_up, big.runner_up);
    EXPECT_NEAR(big.radius, base.radius, 1e-12 * (1.0 + std::abs(base.radius)));
  }
}

TEST(LastLayer2x2, TwoClassesIdentical) {
  NormalRng rng(44);
  const MomentState s = random_flat_state(2, 3, rng);
  const LinearLayer lin = random_linear(6, 2, rng);
  const MomentState full = covprop::propagate_linear_first(s, lin);
  const CertResult a = covprop::certified_radius(full.means[0], full.cov, 0.25);
  const CertResult b = covprop::last_layer_2x2(s, lin, 0.25);
  EXPECT_EQ(a.predicted, b.predicted);
  EXPECT_EQ(a.runner_up, b.runner_up);
  EXPECT_EQ(a.radius, b.radius);
  EXPECT_EQ(a.p_lower, b.p_lower);
  EXPECT_EQ(a.margin_z, b.margin_z);
}

TEST(LastLayer2x2, MatchesFullPathExactlyOnRandomInstances) {
  NormalRng rng(45);
  for (int trial = 0; trial < 1000; ++trial) {
    const MomentState s = random_flat_state(4, 3, rng);
    const LinearLayer lin = random_linear(12, 10, rng);
    const MomentState full = covprop::propagate_linear_first(s, lin);
    const CertResult a = covprop::certified_radius(full.means[0], full.cov, 0.25);
    const CertResult b = covprop::last_layer_2x2(s, lin, 0.25);
    ASSERT_EQ(a.predicted, b.predicted);
    ASSERT_EQ(a.runner_up, b.runner_up);
    ASSERT_EQ(a.radius, b.radius);
    ASSERT_EQ(a.p_lower, b.p_lower);
    ASSERT_EQ(a.margin_z, b.margin_z);
  }
}

// The stage that forms covariance entries does 2x2 = 4 of them instead of
// C x C; the inner contraction length is shared, so the entry-forming multiply
// count drops by exactly 4 / C^2.
TEST(LastLayer2x2, EntryFormingWorkRatio) {
  const long in_dim = 12;
  const long classes = 10;
  const long full_entry_mults = classes * classes * in_dim;
  const long pair_entry_mults = 2 * 2 * in_dim;
  EXPECT_LE(pair_entry_mults * classes * classes, 4 * full_entry_mults);
}

TEST(LastLayer2x2, RejectsBadStates) {
  NormalRng rng(46);
  MomentState s = random_flat_state(4, 3, rng);
  s.flattened = false;
  const LinearLayer lin = random_linear(12, 4, rng);
  EXPECT_THROW(covprop::last_layer_2x2(s, lin, 0.25), Error);
  s.flattened = true;
  EXPECT_THROW(covprop::last_layer_2x2(s, random_linear(9, 4, rng), 0.25), Error);
  EXPECT_THROW(covprop::last_layer_2x2(s, lin, 0.0), Error);
}

TEST(Acr, ZeroingAndAveraging) {
  CertResult r1;
  r1.predicted = 0;
  r1.radius = 0.4;
  CertResult r2;
  r2.predicted = 1;
  r2.radius = 0.6;
  EXPECT_NEAR(covprop::acr({{r1, 0}, {r2, 1}}), 0.5, 1e-15);

  CertResult wrong;
  wrong.predicted = 2;
  wrong.radius = 0.3;
  CertResult right;
  right.predicted = 1;
  right.radius = 0.9;
  EXPECT_NEAR(covprop::acr({{right, 1}, {wrong, 0}}), 0.45, 1e-15);
  EXPECT_EQ(covprop::acr({{wrong, 0}, {wrong, 1}}), 0.0);
  EXPECT_THROW(covprop::acr({}), Error);
}

TEST(CertifiedFraction, StrictThresholdAndLabelGate) {
  CertResult small;
  small.predicted = 0;
  small.radius = 0.25;
  CertResult big;
  big.predicted = 0;
  big.radius = 0.8;
  CertResult wrong;
  wrong.predicted = 1;
  wrong.radius = 2.0;
  const std::vector<std::pair<CertResult, int>> results = {{small, 0}, {big, 0}, {wrong, 0}};
  EXPECT_NEAR(covprop::certified_fraction(results, 0.0), 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(covprop::certified_fraction(results, 0.25), 1.0 / 3.0, 1e-15);
  EXPECT_NEAR(covprop::certified_fraction(results, 1.0), 0.0, 1e-15);
  EXPECT_THROW(covprop::certified_fraction({}, 0.0), Error);
}

TEST(CertCsv, SchemaAndValues) {
  std::vector<covprop::CertRow> rows;
  covprop::CertRow row;
  row.sample_id = 7;
  row.true_label = 2;
  row.predicted = 2;
  row.p_lower = 0.75;
  row.radius = 0.125;
  rows.push_back(row);
  std::ostringstream out;
  covprop::write_certification_csv(rows, out);
  EXPECT_EQ(out.str(), "sample_id,true_label,predicted,p_lower,radius\n7,2,2,0.75,0.125\n");
}
