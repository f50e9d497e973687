#include "covprop/mc.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <sstream>
#include <string>
#include <vector>

#include "covprop/moments.hpp"
#include "covprop/network.hpp"

using covprop::BoundConfig;
using covprop::Error;
using covprop::Image;
using covprop::LinearLayer;
using covprop::Matrix;
using covprop::MCConfig;
using covprop::MCReport;
using covprop::NetworkSpec;
using covprop::NormalRng;
using covprop::Shape;
using covprop::Vector;

namespace {

// Logits fixed by the bias alone: the weight matrix is zero.
NetworkSpec constant_logit_net(const Vector& bias) {
  NetworkSpec net;
  net.input_shape = Shape{2, 2, 1};
  net.class_count = static_cast<int>(bias.size());
  net.layers.push_back({covprop::FlattenLayer{}});
  LinearLayer lin;
  lin.in_dim = 4;
  lin.out_dim = net.class_count;
  lin.weights = Matrix(4, lin.out_dim);
  lin.bias = bias;
  net.layers.push_back({lin});
  net.validate();
  return net;
}

// Two classes with logits (m, -m) where m has mean zero under the noise.
NetworkSpec zero_margin_net() {
  NetworkSpec net;
  net.input_shape = Shape{1, 1, 4};
  net.class_count = 2;
  LinearLayer lin;
  lin.in_dim = 4;
  lin.out_dim = 2;
  lin.weights = Matrix(4, 2);
  lin.weights(0, 0) = 1.0;
  lin.weights(1, 0) = 1.0;
  lin.weights(0, 1) = -1.0;
  lin.weights(1, 1) = -1.0;
  lin.bias = Vector(2);
  net.layers.push_back({lin});
  net.validate();
  return net;
}

Image zero_margin_input() {
  Image x(1, 1, 4);
  x.data = {0.5, -0.5, 0.0, 0.0};
  return x;
}

// Stride-matched kernel: output windows do not overlap, so the closed-form
// chain with no inflation is exact.
NetworkSpec non_overlap_net(unsigned seed) {
  NormalRng rng(seed);
  NetworkSpec net;
  net.input_shape = Shape{4, 4, 2};
  net.class_count = 3;
  net.layers.push_back({covprop::detail::make_conv(2, 3, 2, 2, 0, rng)});
  net.layers.push_back({covprop::FlattenLayer{}});
  net.layers.push_back({covprop::detail::make_linear(12, 3, rng)});
  net.validate();
  return net;
}

double cov_frob_diff(const Matrix& a, const Matrix& b) {
  double sum = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const double d = a.data[i] - b.data[i];
    sum += d * d;
  }
  return std::sqrt(sum);
}

}  // namespace

TEST(McConfig, ValidationAndSampleSizeHint) {
  MCConfig cfg;
  cfg.n0 = 100;
  cfg.n = 500;
  EXPECT_TRUE(cfg.wants_more_samples());
  cfg.n = 10000;
  EXPECT_FALSE(cfg.wants_more_samples());
  cfg.alpha = 1.5;
  EXPECT_THROW(cfg.validate(), Error);
  cfg.alpha = 0.001;
  cfg.n0 = 0;
  EXPECT_THROW(cfg.validate(), Error);
  cfg.n0 = 10;
  cfg.sigma = -0.25;
  EXPECT_THROW(cfg.validate(), Error);
}

TEST(McPredict, ConstantLogitsAlwaysPickTheSameClass) {
  const NetworkSpec net = constant_logit_net(Vector{0.1, 0.7, 0.3});
  Image x(2, 2, 1);
  x.data = {1.0, -2.0, 0.5, 3.0};
  MCConfig cfg;
  cfg.n0 = 50;
  cfg.sigma = 0.5;
  for (std::uint64_t seed : {0ULL, 1ULL, 99ULL}) {
    cfg.seed = seed;
    EXPECT_EQ(covprop::mc_predict(net, x, cfg), 1);
  }
}

TEST(McPredict, ZeroSigmaMatchesDeterministicForward) {
  const NetworkSpec net = covprop::build_lenet_small(Shape{8, 8, 1}, 4, 9);
  NormalRng rng(50);
  Image x(8, 8, 1);
  for (double& v : x.data) v = rng.normal();
  MCConfig cfg;
  cfg.n0 = 5;
  cfg.sigma = 0.0;
  cfg.seed = 3;
  EXPECT_EQ(covprop::mc_predict(net, x, cfg), covprop::argmax_class(forward(net, x)));
}

TEST(McPredict, AbstainsOnSplitCounts) {
  const NetworkSpec net = zero_margin_net();
  const Image x = zero_margin_input();
  MCConfig cfg;
  cfg.n0 = 2;
  cfg.sigma = 0.5;
  bool found_split = false;
  for (std::uint64_t seed = 0; seed < 200 && !found_split; ++seed) {
    cfg.seed = seed;
    if (covprop::mc_predict(net, x, cfg) == -1) found_split = true;
  }
  EXPECT_TRUE(found_split);
}

TEST(McPredict, LinearClassifierFrequencyMatchesClosedForm) {
  NormalRng rng(51);
  NetworkSpec net;
  net.input_shape = Shape{1, 1, 4};
  net.class_count = 2;
  LinearLayer lin = covprop::detail::make_linear(4, 2, rng);
  net.layers.push_back({lin});
  net.validate();
  Image x(1, 1, 4);
  for (double& v : x.data) v = rng.normal();

  double margin = lin.bias[0] - lin.bias[1];
  double norm_sq = 0.0;
  for (int i = 0; i < 4; ++i) {
    const double dw = lin.weights(i, 0) - lin.weights(i, 1);
    margin += dw * x.data[i];
    norm_sq += dw * dw;
  }
  const double sigma = 0.5;
  const double p0 = covprop::std_normal_cdf(margin / (sigma * std::sqrt(norm_sq)));

  MCConfig cfg;
  cfg.n0 = 100;
  cfg.n = 20000;
  cfg.sigma = sigma;
  cfg.seed = 12;
  const MCReport report = covprop::mc_certify(net, x, cfg);
  const double freq = static_cast<double>(report.class_counts[0]) / static_cast<double>(cfg.n);
  EXPECT_NEAR(freq, p0, 3.0 * std::sqrt(p0 * (1.0 - p0) / static_cast<double>(cfg.n)));
}

TEST(McCertify, AllSuccessesUseTheClosedFormBound) {
  const NetworkSpec net = constant_logit_net(Vector{0.1, 0.7, 0.3});
  Image x(2, 2, 1);
  x.data = {0.0, 0.0, 0.0, 0.0};
  MCConfig cfg;
  cfg.n0 = 10;
  cfg.n = 100;
  cfg.alpha = 0.001;
  cfg.sigma = 0.5;
  cfg.seed = 4;
  const MCReport report = covprop::mc_certify(net, x, cfg);
  EXPECT_FALSE(report.abstained);
  EXPECT_EQ(report.predicted, 1);
  EXPECT_EQ(report.class_counts[1], 100);
  EXPECT_NEAR(report.p_lower, std::pow(0.001, 0.01), 1e-12);
  EXPECT_NEAR(report.p_lower, 0.93325430079699, 1e-9);
  EXPECT_DOUBLE_EQ(report.radius, 0.5 * covprop::std_normal_cdf_inv(report.p_lower));
}

TEST(McCertify, ZeroMarginAbstains) {
  const NetworkSpec net = zero_margin_net();
  const Image x = zero_margin_input();
  MCConfig cfg;
  cfg.n0 = 20;
  cfg.n = 500;
  cfg.alpha = 0.01;
  cfg.sigma = 0.5;
  int abstained = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    cfg.seed = seed;
    const MCReport report = covprop::mc_certify(net, x, cfg);
    if (report.abstained) {
      ++abstained;
      EXPECT_EQ(report.predicted, -1);
      EXPECT_EQ(report.radius, 0.0);
    }
  }
  EXPECT_GE(abstained, 19);
}

TEST(McCertify, DeterministicAndCountsSumToN) {
  const NetworkSpec net = covprop::build_lenet_small(Shape{8, 8, 1}, 4, 7);
  NormalRng rng(52);
  Image x(8, 8, 1);
  for (double& v : x.data) v = rng.normal();
  MCConfig cfg;
  cfg.n0 = 20;
  cfg.n = 500;
  cfg.alpha = 0.01;
  cfg.sigma = 0.25;
  cfg.seed = 99;
  const MCReport a = covprop::mc_certify(net, x, cfg);
  const MCReport b = covprop::mc_certify(net, x, cfg);
  EXPECT_EQ(a.class_counts, b.class_counts);
  EXPECT_EQ(a.p_lower, b.p_lower);
  EXPECT_EQ(a.radius, b.radius);
  EXPECT_EQ(a.abstained, b.abstained);
  long total = 0;
  for (long c : a.class_counts) total += c;
  EXPECT_EQ(total, cfg.n);
}

TEST(McLayerMoments, MatchesClosedFormChainOnLinearNet) {
  const NetworkSpec net = non_overlap_net(60);
  NormalRng rng(53);
  Image x(4, 4, 2);
  for (double& v : x.data) v = rng.normal();
  const double sigma = 0.5;
  const long n = 20000;
  const auto prop = covprop::propagate_all(net, x, BoundConfig{0.0, sigma});
  const auto mc = covprop::mc_layer_moments(net, x, sigma, n, 17);
  ASSERT_EQ(mc.size(), prop.trace.size());
  for (std::size_t j = 0; j < mc.size(); ++j) {
    ASSERT_EQ(mc[j].channels, prop.trace[j].channels) << "layer " << j;
    const double tol = 10.0 * std::max(1e-3, prop.trace[j].cov.frobenius_norm()) /
                       std::sqrt(static_cast<double>(n));
    EXPECT_LE(cov_frob_diff(mc[j].cov, prop.trace[j].cov), tol) << "layer " << j;
    const double mean_tol =
        10.0 * std::sqrt(std::max(1e-6, prop.trace[j].cov.max_diag()) / static_cast<double>(n));
    for (std::size_t p = 0; p < mc[j].means.size(); ++p)
      for (int c = 0; c < mc[j].channels; ++c) {
        EXPECT_NEAR(mc[j].means[p][c], prop.trace[j].means[p][c], mean_tol)
            << "layer " << j << " pixel " << p;
      }
  }
}

// Quadrupling the sample count should halve the sampling error. A single run
// is too noisy to pin that down, so the errors are averaged over independent
// repetitions before taking the ratio.
TEST(McLayerMoments, ErrorShrinksWhenSamplesQuadruple) {
  const NetworkSpec net = non_overlap_net(61);
  NormalRng rng(54);
  Image x(4, 4, 2);
  for (double& v : x.data) v = rng.normal();
  const double sigma = 0.5;
  const auto prop = covprop::propagate_all(net, x, BoundConfig{0.0, sigma});
  double err_coarse = 0.0;
  double err_fine = 0.0;
  for (int rep = 0; rep < 8; ++rep) {
    const std::uint64_t seed = 100 + static_cast<std::uint64_t>(rep);
    const auto coarse = covprop::mc_layer_moments(net, x, sigma, 4000, seed);
    const auto fine = covprop::mc_layer_moments(net, x, sigma, 16000, seed + 1000);
    for (std::size_t j = 0; j < coarse.size(); ++j) {
      err_coarse += cov_frob_diff(coarse[j].cov, prop.trace[j].cov);
      err_fine += cov_frob_diff(fine[j].cov, prop.trace[j].cov);
    }
  }
  const double ratio = err_fine / err_coarse;
  EXPECT_GE(ratio, 0.35);
  EXPECT_LE(ratio, 0.65);
}

TEST(McLayerMoments, ZeroSigmaGivesZeroCovariance) {
  const NetworkSpec net = non_overlap_net(62);
  NormalRng rng(55);
  Image x(4, 4, 2);
  for (double& v : x.data) v = rng.normal();
  const auto mc = covprop::mc_layer_moments(net, x, 0.0, 200, 5);
  const auto acts = forward_activations(net, x);
  for (std::size_t j = 0; j < mc.size(); ++j) {
    EXPECT_EQ(mc[j].cov.max_abs(), 0.0);
    EXPECT_EQ(mc[j].max_cross_pixel_corr, 0.0);
  }
  EXPECT_NEAR(mc.back().means[0][0], acts.back().values[0], 1e-12);
}

TEST(McLayerMoments, GuardsSampleCountAndWidth) {
  const NetworkSpec net = non_overlap_net(63);
  Image x(4, 4, 2);
  EXPECT_THROW(covprop::mc_layer_moments(net, x, 0.5, 50, 1), Error);

  NormalRng rng(56);
  NetworkSpec wide;
  wide.input_shape = Shape{1, 1, 4};
  wide.class_count = 600;
  wide.layers.push_back({covprop::detail::make_linear(4, 600, rng)});
  wide.validate();
  Image tiny(1, 1, 4);
  try {
    covprop::mc_layer_moments(wide, tiny, 0.5, 200, 1);
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("512"), std::string::npos);
  }
}

TEST(McLayerMoments, CrossPixelCorrelationTracksWindowOverlap) {
  NormalRng rng(57);
  NetworkSpec overlap;
  overlap.input_shape = Shape{6, 6, 1};
  overlap.class_count = 2;
  overlap.layers.push_back({covprop::detail::make_conv(1, 2, 3, 1, 1, rng)});
  overlap.layers.push_back({covprop::FlattenLayer{}});
  overlap.layers.push_back({covprop::detail::make_linear(72, 2, rng)});
  overlap.validate();

  NetworkSpec disjoint;
  disjoint.input_shape = Shape{6, 6, 1};
  disjoint.class_count = 2;
  disjoint.layers.push_back({covprop::detail::make_conv(1, 2, 2, 2, 0, rng)});
  disjoint.layers.push_back({covprop::FlattenLayer{}});
  disjoint.layers.push_back({covprop::detail::make_linear(18, 2, rng)});
  disjoint.validate();

  Image x(6, 6, 1);
  for (double& v : x.data) v = rng.normal();
  const long n = 5000;
  const auto mo = covprop::mc_layer_moments(overlap, x, 0.3, n, 71);
  const auto md = covprop::mc_layer_moments(disjoint, x, 0.3, n, 72);

  EXPECT_LE(mo[0].max_cross_pixel_corr, 0.1);   // iid input noise
  EXPECT_GE(mo[1].max_cross_pixel_corr, 0.2);   // overlapping windows correlate
  EXPECT_LE(md[1].max_cross_pixel_corr, 0.1);   // disjoint windows do not
}

TEST(EmpiricalGaussianity, ExportFormatAndEllipse) {
  const NetworkSpec net = non_overlap_net(64);
  NormalRng rng(58);
  Image x(4, 4, 2);
  for (double& v : x.data) v = rng.normal();
  const BoundConfig cfg{0.0, 0.4};
  const long n = 20000;

  std::ostringstream first;
  covprop::empirical_gaussianity(net, x, cfg, n, 1, 0, 1, 77, first);
  std::ostringstream second;
  covprop::empirical_gaussianity(net, x, cfg, n, 1, 0, 1, 77, second);
  EXPECT_EQ(first.str(), second.str());

  std::istringstream in(first.str());
  std::string line;
  int comments = 0;
  double axis1 = 0.0, axis2 = 0.0;
  bool header_seen = false;
  long data_rows = 0;
  std::vector<double> va, vb;
  while (std::getline(in, line)) {
    if (!line.empty() && line[0] == '#') {
      ++comments;
      const auto pos = line.find("ellipse_axis_1=");
      if (pos != std::string::npos) {
        std::sscanf(line.c_str() + pos, "ellipse_axis_1=%lf ellipse_axis_2=%lf", &axis1, &axis2);
      }
      continue;
    }
    if (!header_seen) {
      EXPECT_EQ(line, "channel_a,channel_b");
      header_seen = true;
      continue;
    }
    double a = 0.0, b = 0.0;
    ASSERT_EQ(std::sscanf(line.c_str(), "%lf,%lf", &a, &b), 2);
    va.push_back(a);
    vb.push_back(b);
    ++data_rows;
  }
  EXPECT_EQ(comments, 4);
  EXPECT_EQ(data_rows, n);

  double ma = 0.0, mb = 0.0;
  for (long i = 0; i < n; ++i) {
    ma += va[i];
    mb += vb[i];
  }
  ma /= n;
  mb /= n;
  double caa = 0.0, cbb = 0.0, cab = 0.0;
  for (long i = 0; i < n; ++i) {
    caa += (va[i] - ma) * (va[i] - ma);
    cbb += (vb[i] - mb) * (vb[i] - mb);
    cab += (va[i] - ma) * (vb[i] - mb);
  }
  caa /= n;
  cbb /= n;
  cab /= n;
  const double half_sum = 0.5 * (caa + cbb);
  const double root = std::sqrt(0.25 * (caa - cbb) * (caa - cbb) + cab * cab);
  const double emp_axis1 = std::sqrt(half_sum + root);
  const double emp_axis2 = std::sqrt(std::max(0.0, half_sum - root));
  EXPECT_GE(axis1, emp_axis1 - 0.05);
  EXPECT_GE(axis2, emp_axis2 - 0.05);
  EXPECT_NEAR(axis1, emp_axis1, 0.1);
  EXPECT_NEAR(axis2, emp_axis2, 0.1);
}

TEST(EmpiricalGaussianity, RejectsBadIndices) {
  const NetworkSpec net = non_overlap_net(65);
  Image x(4, 4, 2);
  const BoundConfig cfg{0.0, 0.4};
  std::ostringstream out;
  EXPECT_THROW(covprop::empirical_gaussianity(net, x, cfg, 10, -1, 0, 1, 1, out), Error);
  EXPECT_THROW(covprop::empirical_gaussianity(net, x, cfg, 10, 99, 0, 1, 1, out), Error);
  EXPECT_THROW(covprop::empirical_gaussianity(net, x, cfg, 10, 1, 0, 0, 1, out), Error);
  EXPECT_THROW(covprop::empirical_gaussianity(net, x, cfg, 10, 1, 0, 7, 1, out), Error);
  EXPECT_THROW(covprop::empirical_gaussianity(net, x, cfg, 0, 1, 0, 1, 1, out), Error);
}
