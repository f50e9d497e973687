#pragma once

#include <cmath>
#include <cstdio>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "covprop/error.hpp"
#include "covprop/moments.hpp"
#include "covprop/network.hpp"
#include "covprop/numkit.hpp"

namespace covprop {

struct CertResult {
  int predicted = -1;
  int runner_up = -1;
  double p_lower = 0.0;
  double radius = 0.0;
  double margin_z = 0.0;
};

struct ClassMargin {
  int top = -1;
  int second = -1;
  double z = 0.0;
  double p = 0.0;
};

namespace detail {

// Shared final arithmetic so the 2x2 shortcut is bit-identical to the full
// path. The denominator is clamped below so a degenerate difference variance
// certifies any positive mean gap instead of dividing by zero.
inline std::pair<double, double> margin_from_entries(double mu_top, double mu_second, double c_tt,
                                                     double c_ss, double c_ts) {
  const double var = c_tt + c_ss - 2.0 * c_ts;
  const double den = std::max(std::sqrt(std::max(var, 0.0)), 1e-12);
  const double z = (mu_top - mu_second) / den;
  return {z, std_normal_cdf(z)};
}

inline int runner_up_class(const Vector& mu, int top) {
  int second = top == 0 ? 1 : 0;
  for (int c = 0; c < static_cast<int>(mu.size()); ++c) {
    if (c == top) continue;
    if (mu[c] > mu[second]) second = c;
  }
  return second;
}

}  // namespace detail

// Probability that the top class beats the runner-up when the logits are
// Gaussian with the given mean and covariance. Ties pick the lowest index.
inline ClassMargin lower_prob(const Vector& mu, const Matrix& cov) {
  const int classes = static_cast<int>(mu.size());
  if (classes < 2) {
    throw_error(ErrorKind::validation,
                "lower_prob: need at least 2 classes, got " + std::to_string(classes));
  }
  if (cov.rows != mu.size() || cov.cols != mu.size()) {
    throw_error(ErrorKind::dimension, "lower_prob: covariance " + shape_string(cov) +
                                          " does not match " + std::to_string(classes) +
                                          " logits");
  }
  ClassMargin out;
  out.top = argmax_class(mu);
  out.second = detail::runner_up_class(mu, out.top);
  const auto [z, p] = detail::margin_from_entries(mu[out.top], mu[out.second],
                                                  cov(out.top, out.top),
                                                  cov(out.second, out.second),
                                                  cov(out.top, out.second));
  out.z = z;
  out.p = p;
  return out;
}

// Certified radius in closed form, sigma times the z-margin, skipping the
// cdf/inverse-cdf round trip that saturates past |z| ~ 8.
inline CertResult certified_radius(const Vector& mu, const Matrix& cov, double sigma_in) {
  if (!(sigma_in > 0.0)) {
    throw_error(ErrorKind::domain,
                "certified_radius: sigma must be positive, got " + std::to_string(sigma_in));
  }
  const ClassMargin m = lower_prob(mu, cov);
  CertResult out;
  out.predicted = m.top;
  out.runner_up = m.second;
  out.p_lower = m.p;
  out.margin_z = m.z;
  out.radius = sigma_in * m.z;
  return out;
}

// Certifies through the final fully connected layer while forming only the
// 2x2 covariance of the two competing logits. Matmul and accumulation orders
// mirror the full path exactly, so the result is bit-identical to running
// certified_radius on the fully propagated covariance.
inline CertResult last_layer_2x2(const MomentState& s, const LinearLayer& lin, double sigma_in) {
  if (!(sigma_in > 0.0)) {
    throw_error(ErrorKind::domain,
                "last_layer_2x2: sigma must be positive, got " + std::to_string(sigma_in));
  }
  const int total = s.pixel_count() * s.channels;
  if (!s.flattened && s.pixel_count() != 1) {
    throw_error(ErrorKind::validation, "last_layer_2x2: flatten the state first");
  }
  if (lin.in_dim != total) {
    throw_error(ErrorKind::dimension, "last_layer_2x2: layer expects " +
                                          std::to_string(lin.in_dim) + " inputs, state has " +
                                          std::to_string(total));
  }
  if (lin.out_dim < 2) {
    throw_error(ErrorKind::validation,
                "last_layer_2x2: need at least 2 classes, got " + std::to_string(lin.out_dim));
  }

  Vector packed(total);
  {
    const std::vector<double> flat = detail::pack_means(s);
    std::copy(flat.begin(), flat.end(), packed.data.begin());
  }
  Vector mean = matvec_transposed(lin.weights, packed);
  for (int o = 0; o < lin.out_dim; ++o) mean[o] += lin.bias[o];

  const int top = argmax_class(mean);
  const int second = detail::runner_up_class(mean, top);

  Matrix acc(2, 2);
  for (int p = 0; p < s.pixel_count(); ++p) {
    const Matrix wp = detail::rows_block(lin.weights,
                                         static_cast<std::size_t>(p) * s.channels, s.channels);
    Matrix pair_cols(wp.rows, 2);
    for (std::size_t l = 0; l < wp.rows; ++l) {
      pair_cols(l, 0) = wp(l, top);
      pair_cols(l, 1) = wp(l, second);
    }
    acc = add(acc, matmul(pair_cols.transposed(), matmul(s.cov, pair_cols)));
  }
  detail::symmetrize(acc);

  const auto [z, p] = detail::margin_from_entries(mean[top], mean[second], acc(0, 0), acc(1, 1),
                                                  acc(0, 1));
  CertResult out;
  out.predicted = top;
  out.runner_up = second;
  out.p_lower = p;
  out.margin_z = z;
  out.radius = sigma_in * z;
  return out;
}

// Average certified radius: misclassified samples contribute zero.
inline double acr(const std::vector<std::pair<CertResult, int>>& results) {
  if (results.empty()) {
    throw_error(ErrorKind::validation, "acr: empty result list");
  }
  double sum = 0.0;
  for (const auto& [res, label] : results) {
    if (res.predicted == label) sum += res.radius;
  }
  return sum / static_cast<double>(results.size());
}

// Fraction of samples that are correctly classified with a certified radius
// strictly larger than the threshold.
inline double certified_fraction(const std::vector<std::pair<CertResult, int>>& results,
                                 double threshold) {
  if (results.empty()) {
    throw_error(ErrorKind::validation, "certified_fraction: empty result list");
  }
  std::size_t hits = 0;
  for (const auto& [res, label] : results) {
    if (res.predicted == label && res.radius > threshold) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(results.size());
}

struct CertRow {
  long sample_id = 0;
  int true_label = -1;
  int predicted = -1;
  double p_lower = 0.0;
  double radius = 0.0;
};

inline void write_certification_csv(const std::vector<CertRow>& rows, std::ostream& out) {
  out << "sample_id,true_label,predicted,p_lower,radius\n";
  char buf[64];
  for (const CertRow& row : rows) {
    out << row.sample_id << ',' << row.true_label << ',' << row.predicted << ',';
    std::snprintf(buf, sizeof(buf), "%.12g", row.p_lower);
    out << buf << ',';
    std::snprintf(buf, sizeof(buf), "%.12g", row.radius);
    out << buf << '\n';
  }
}

}  // namespace covprop
