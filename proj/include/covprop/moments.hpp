#pragma once

// Distribution propagation: each layer state is M per-pixel mean vectors plus
// ONE channel covariance shared by every pixel. Cross-pixel correlations are
// never tracked; wherever a layer would need them (overlapping conv windows),
// the shared covariance is inflated by tau = 1 + r_max instead, which bounds
// the true covariance as long as no correlation coefficient exceeds r_max.
//
// Worked 1-D sketch of the overlap situation, kernel 3, stride 1:
//
//   inputs:    x0 x1 x2 x3 x4
//   window A:  [x0 x1 x2]
//   window B:     [x1 x2 x3]
//
// A and B share x1, x2, so the outputs correlate. Tracking that would need a
// cross-term matrix per pixel pair; instead both outputs keep the single
// inflated covariance tau * sum_t W_t^T Sigma W_t.

#include <cmath>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "covprop/error.hpp"
#include "covprop/network.hpp"
#include "covprop/numkit.hpp"

namespace covprop {

struct BoundConfig {
  double r_max = 0.0;
  double sigma_in = 0.25;

  // sigma_in = 0 is accepted as a degenerate diagnostic case (zero covariance
  // everywhere); certification and sampling paths demand a positive value.
  void validate() const {
    if (!(r_max >= 0.0) || !(r_max < 1.0)) {
      throw_error(ErrorKind::domain,
                  "r_max = " + std::to_string(r_max) + " outside [0, 1)");
    }
    if (!(sigma_in >= 0.0)) {
      throw_error(ErrorKind::domain, "sigma_in = " + std::to_string(sigma_in) + " is negative");
    }
  }
};

// Inflation factors for merging decorrelated variables: with the correlation
// budget eta = 1/(1+r_max) and the cross term kappa pinned to zero, both
// factors come out as 1 + r_max. The feasibility constraints on (eta, kappa)
// are re-checked here so a bad r_max cannot slip through silently.
inline std::pair<double, double> decorrelation_tau(double r_max) {
  if (!(r_max >= 0.0) || !(r_max < 1.0)) {
    throw_error(ErrorKind::domain, "decorrelation_tau: r_max = " + std::to_string(r_max) +
                                       " outside [0, 1)");
  }
  const double eta = 1.0 / (1.0 + r_max);
  const double kappa = 0.0;
  if (!(0.5 <= eta + 1e-12) || !(eta <= 1.0 / (1.0 + r_max) + 1e-12)) {
    throw_error(ErrorKind::numeric, "decorrelation_tau: eta = " + std::to_string(eta) +
                                        " violates its admissible range");
  }
  const double kappa_budget = (1.0 - 2.0 * eta) / (1.0 - r_max * r_max) + eta * eta;
  if (kappa * kappa > kappa_budget + 1e-12) {
    throw_error(ErrorKind::numeric, "decorrelation_tau: kappa constraint violated");
  }
  const double tau = 1.0 / eta;
  return {tau, tau};
}

struct MomentState {
  int height = 0;
  int width = 0;
  int channels = 0;
  bool flattened = false;
  std::vector<Vector> means;  // pixel-major order, one vector per pixel
  Matrix cov;                 // channels x channels, shared across pixels
  int layer_index = 0;

  int pixel_count() const { return height * width; }

  void check_invariants() const {
    for (const Vector& m : means) {
      for (double v : m.data) {
        if (!std::isfinite(v)) {
          throw_error(ErrorKind::numeric, "moment state: non-finite mean entry");
        }
      }
    }
    detail::check_symmetric(cov, "moment state");
    const double slack = 1e-8 * std::max(1.0, cov.frobenius_norm());
    if (min_eigenvalue_sym(cov) < -slack) {
      throw_error(ErrorKind::numeric, "moment state: covariance is not PSD");
    }
  }
};

namespace detail {

inline std::vector<double> pack_means(const MomentState& s) {
  std::vector<double> flat(static_cast<std::size_t>(s.pixel_count()) * s.channels);
  for (int p = 0; p < s.pixel_count(); ++p)
    for (int c = 0; c < s.channels; ++c) flat[static_cast<std::size_t>(p) * s.channels + c] = s.means[p][c];
  return flat;
}

inline std::vector<Vector> unpack_means(const std::vector<double>& flat, int pixels,
                                        int channels) {
  std::vector<Vector> means(pixels, Vector(channels));
  for (int p = 0; p < pixels; ++p)
    for (int c = 0; c < channels; ++c) means[p][c] = flat[static_cast<std::size_t>(p) * channels + c];
  return means;
}

inline Matrix rows_block(const Matrix& m, std::size_t row0, std::size_t count) {
  Matrix out(count, m.cols);
  std::copy(m.data.begin() + static_cast<std::ptrdiff_t>(row0 * m.cols),
            m.data.begin() + static_cast<std::ptrdiff_t>((row0 + count) * m.cols),
            out.data.begin());
  return out;
}

inline void symmetrize(Matrix& m) {
  for (std::size_t i = 0; i < m.rows; ++i)
    for (std::size_t j = i + 1; j < m.cols; ++j) {
      const double v = 0.5 * (m(i, j) + m(j, i));
      m(i, j) = v;
      m(j, i) = v;
    }
}

}  // namespace detail

inline MomentState init_input(const Image& x, const BoundConfig& cfg) {
  cfg.validate();
  if (x.data.size() != static_cast<std::size_t>(x.height) * x.width * x.channels) {
    throw_error(ErrorKind::dimension, "init_input: image buffer does not match its dims");
  }
  MomentState s;
  s.height = x.height;
  s.width = x.width;
  s.channels = x.channels;
  s.means = detail::unpack_means(x.data, x.height * x.width, x.channels);
  s.cov = Matrix::scaled_identity(x.channels, cfg.sigma_in * cfg.sigma_in);
  s.layer_index = 0;
  return s;
}

// Mean path: ordinary convolution arithmetic (zero padding included).
// Covariance path: tau * sum over all k^2 taps of W_t^T Sigma W_t. Every
// output pixel gets this full-window covariance; for boundary pixels whose
// windows overlap the padding it dominates the true (smaller) covariance,
// which keeps the single-shared-covariance invariant intact.
inline MomentState propagate_conv(const MomentState& s, const ConvLayer& conv,
                                  const BoundConfig& cfg) {
  if (s.flattened) {
    throw_error(ErrorKind::validation, "propagate_conv: state is flattened");
  }
  if (conv.in_channels != s.channels) {
    throw_error(ErrorKind::dimension, "propagate_conv: layer expects " +
                                          std::to_string(conv.in_channels) +
                                          " channels, state has " + std::to_string(s.channels));
  }
  const auto [tau, tau2] = decorrelation_tau(cfg.r_max);
  (void)tau2;

  MomentState out;
  out.height = detail::conv_out_dim(s.height, conv.kernel, conv.stride, conv.padding, "height");
  out.width = detail::conv_out_dim(s.width, conv.kernel, conv.stride, conv.padding, "width");
  out.channels = conv.out_channels;
  out.means = detail::unpack_means(
      detail::conv_apply(s.height, s.width, s.channels, detail::pack_means(s), conv),
      out.height * out.width, conv.out_channels);

  Matrix acc(conv.out_channels, conv.out_channels);
  for (int tap = 0; tap < conv.kernel * conv.kernel; ++tap) {
    const Matrix wt = detail::rows_block(conv.weights,
                                         static_cast<std::size_t>(tap) * conv.in_channels,
                                         conv.in_channels);
    acc = add(acc, matmul(wt.transposed(), matmul(s.cov, wt)));
  }
  out.cov = scaled(acc, tau);
  detail::symmetrize(out.cov);
  out.layer_index = s.layer_index + 1;
  return out;
}

// First (and possibly only) fully connected layer: consumes all M pixels at
// once. Output covariance sums the per-pixel blocks W_p^T Sigma W_p with no
// inflation factor.
inline MomentState propagate_linear_first(const MomentState& s, const LinearLayer& lin) {
  const int total = s.pixel_count() * s.channels;
  if (!s.flattened && s.pixel_count() != 1) {
    throw_error(ErrorKind::validation, "propagate_linear_first: flatten the state first");
  }
  if (lin.in_dim != total) {
    throw_error(ErrorKind::dimension, "propagate_linear_first: layer expects " +
                                          std::to_string(lin.in_dim) + " inputs, state has " +
                                          std::to_string(total));
  }
  MomentState out;
  out.height = 1;
  out.width = 1;
  out.channels = lin.out_dim;
  out.flattened = true;

  Vector packed(total);
  {
    const std::vector<double> flat = detail::pack_means(s);
    std::copy(flat.begin(), flat.end(), packed.data.begin());
  }
  Vector mean = matvec_transposed(lin.weights, packed);
  for (int o = 0; o < lin.out_dim; ++o) mean[o] += lin.bias[o];
  out.means = {std::move(mean)};

  Matrix acc(lin.out_dim, lin.out_dim);
  for (int p = 0; p < s.pixel_count(); ++p) {
    const Matrix wp = detail::rows_block(lin.weights,
                                         static_cast<std::size_t>(p) * s.channels, s.channels);
    acc = add(acc, matmul(wp.transposed(), matmul(s.cov, wp)));
  }
  out.cov = std::move(acc);
  detail::symmetrize(out.cov);
  out.layer_index = s.layer_index + 1;
  return out;
}

inline MomentState propagate_linear(const MomentState& s, const LinearLayer& lin) {
  if (s.pixel_count() != 1) {
    throw_error(ErrorKind::validation,
                "propagate_linear: state still has " + std::to_string(s.pixel_count()) +
                    " pixels; flatten first");
  }
  return propagate_linear_first(s, lin);
}

inline MomentState propagate_avgpool(const MomentState& s, const AvgPoolLayer& pool) {
  if (s.flattened) {
    throw_error(ErrorKind::validation, "propagate_avgpool: state is flattened");
  }
  const int k = pool.kernel;
  if (k < 1 || s.height % k != 0 || s.width % k != 0) {
    throw_error(ErrorKind::dimension, "propagate_avgpool: window " + std::to_string(k) +
                                          " does not divide " + std::to_string(s.height) + "x" +
                                          std::to_string(s.width));
  }
  MomentState out;
  out.height = s.height / k;
  out.width = s.width / k;
  out.channels = s.channels;
  out.means = detail::unpack_means(
      detail::avgpool_apply(s.height, s.width, s.channels, detail::pack_means(s), k),
      out.height * out.width, s.channels);
  out.cov = scaled(s.cov, 1.0 / (static_cast<double>(k) * k));
  out.layer_index = s.layer_index + 1;
  return out;
}

// E[max(0, X)] for X ~ N(mu, sigma^2).
inline double relu_gaussian_mean(double mu, double sigma) {
  if (sigma <= 0.0) return std::max(0.0, mu);
  const double t = mu / sigma;
  return mu * std_normal_cdf(t) + sigma * std_normal_pdf(t);
}

// Means pass through the exact Gaussian ReLU mean; the covariance is kept as
// is, a valid upper bound that also preserves the shared-across-pixels form.
inline MomentState propagate_relu(const MomentState& s) {
  const double slack = 1e-8 * std::max(1.0, s.cov.frobenius_norm());
  MomentState out = s;
  std::vector<double> sigma(s.channels);
  for (int c = 0; c < s.channels; ++c) {
    const double var = s.cov(c, c);
    if (var < -slack) {
      throw_error(ErrorKind::numeric,
                  "propagate_relu: negative variance " + std::to_string(var) + " on channel " +
                      std::to_string(c));
    }
    sigma[c] = std::sqrt(std::max(0.0, var));
  }
  for (Vector& mean : out.means) {
    for (int c = 0; c < s.channels; ++c) mean[c] = relu_gaussian_mean(mean[c], sigma[c]);
  }
  out.layer_index = s.layer_index + 1;
  return out;
}

inline MomentState propagate_normalize(const MomentState& s, const NormalizeLayer& norm) {
  if (!norm.enabled) {
    throw_error(ErrorKind::validation, "propagate_normalize: layer is not enabled");
  }
  if (norm.mu_prime.size() != static_cast<std::size_t>(s.channels) ||
      norm.sigma_prime.size() != static_cast<std::size_t>(s.channels)) {
    throw_error(ErrorKind::dimension, "propagate_normalize: stats do not match " +
                                          std::to_string(s.channels) + " channels");
  }
  for (double v : norm.sigma_prime.data) {
    if (!(v > 0.0)) {
      throw_error(ErrorKind::validation, "propagate_normalize: scale entries must be positive");
    }
  }
  MomentState out = s;
  for (Vector& mean : out.means) {
    for (int c = 0; c < s.channels; ++c) {
      mean[c] = (mean[c] - norm.mu_prime[c]) / norm.sigma_prime[c];
    }
  }
  for (int i = 0; i < s.channels; ++i)
    for (int j = 0; j < s.channels; ++j) {
      out.cov(i, j) = s.cov(i, j) / (norm.sigma_prime[i] * norm.sigma_prime[j]);
    }
  out.layer_index = s.layer_index + 1;
  return out;
}

inline MomentState propagate_flatten(const MomentState& s) {
  if (s.flattened) {
    throw_error(ErrorKind::validation, "propagate_flatten: state is already flattened");
  }
  MomentState out = s;
  out.flattened = true;
  out.layer_index = s.layer_index + 1;
  return out;
}

// Merge of a residual branch back into the trunk: means add, covariances add.
inline MomentState propagate_residual(const MomentState& trunk, const MomentState& branch_out) {
  if (trunk.height != branch_out.height || trunk.width != branch_out.width ||
      trunk.channels != branch_out.channels || trunk.flattened != branch_out.flattened) {
    throw_error(ErrorKind::dimension, "propagate_residual: trunk and branch shapes differ");
  }
  MomentState out = trunk;
  for (int p = 0; p < trunk.pixel_count(); ++p)
    for (int c = 0; c < trunk.channels; ++c) out.means[p][c] += branch_out.means[p][c];
  out.cov = add(trunk.cov, branch_out.cov);
  out.layer_index = trunk.layer_index + 1;
  return out;
}

namespace detail {

inline MomentState apply_moment_layer(const MomentState& s, const LayerSpec& layer,
                                      const BoundConfig& cfg) {
  struct Apply {
    const MomentState& s;
    const BoundConfig& cfg;

    MomentState operator()(const ConvLayer& conv) const { return propagate_conv(s, conv, cfg); }
    MomentState operator()(const LinearLayer& lin) const {
      return s.pixel_count() > 1 ? propagate_linear_first(s, lin) : propagate_linear(s, lin);
    }
    MomentState operator()(const AvgPoolLayer& pool) const { return propagate_avgpool(s, pool); }
    MomentState operator()(const ReluLayer&) const { return propagate_relu(s); }
    MomentState operator()(const ResidualAddLayer& res) const {
      MomentState branch = s;
      for (const LayerSpec& l : res.branch) branch = apply_moment_layer(branch, l, cfg);
      return propagate_residual(s, branch);
    }
    MomentState operator()(const FlattenLayer&) const { return propagate_flatten(s); }
    MomentState operator()(const NormalizeLayer& norm) const {
      return propagate_normalize(s, norm);
    }
  };
  return std::visit(Apply{s, cfg}, layer.node);
}

}  // namespace detail

struct PropagationResult {
  MomentState final_state;
  std::vector<MomentState> trace;  // entry 0 = input state, entry j = after layer j-1
};

inline PropagationResult propagate_all(const NetworkSpec& net, const Image& x,
                                       const BoundConfig& cfg) {
  PropagationResult result;
  result.trace.reserve(net.layers.size() + 1);
  result.trace.push_back(init_input(x, cfg));
  for (std::size_t j = 0; j < net.layers.size(); ++j) {
    try {
      MomentState next = detail::apply_moment_layer(result.trace.back(), net.layers[j], cfg);
      next.layer_index = static_cast<int>(j) + 1;
      result.trace.push_back(std::move(next));
    } catch (const Error& e) {
      throw Error(e.kind(), "layer " + std::to_string(j) + ": " + e.what());
    }
  }
  result.final_state = result.trace.back();
  return result;
}

// One row per trace entry; entry 0 carries the kind label "input".
inline void write_trace_csv(const NetworkSpec& net, const std::vector<MomentState>& trace,
                            std::ostream& out) {
  out << "layer_index,layer_kind,N,trace_cov,min_eig_cov,max_diag_cov\n";
  char buf[160];
  for (std::size_t j = 0; j < trace.size(); ++j) {
    const MomentState& s = trace[j];
    const char* kind = j == 0 ? "input" : net.layers[j - 1].kind_name();
    std::snprintf(buf, sizeof buf, "%d,%s,%d,%.12g,%.12g,%.12g\n", s.layer_index, kind,
                  s.channels, s.cov.trace(), min_eigenvalue_sym(s.cov), s.cov.max_diag());
    out << buf;
  }
}

}  // namespace covprop
