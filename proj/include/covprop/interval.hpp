#pragma once

// Interval (box) propagation over the same layer catalog, used as the
// baseline in tightness comparisons. Affine layers use the center/half-width
// rule c' = W^T c + b, r' = |W|^T r; monotone layers map both bounds.

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>
#include <string>
#include <vector>

#include "covprop/error.hpp"
#include "covprop/moments.hpp"
#include "covprop/network.hpp"
#include "covprop/numkit.hpp"

namespace covprop {

struct IntervalState {
  int height = 0;
  int width = 0;
  int channels = 0;
  bool flattened = false;
  std::vector<Vector> lower;  // pixel-major, one vector per pixel
  std::vector<Vector> upper;
  int layer_index = 0;

  int pixel_count() const { return height * width; }

  void check_invariants() const {
    for (int p = 0; p < pixel_count(); ++p)
      for (int c = 0; c < channels; ++c) {
        if (!(lower[p][c] <= upper[p][c] + 1e-12)) {
          throw_error(ErrorKind::numeric, "interval state: lower exceeds upper");
        }
      }
  }
};

inline IntervalState init_interval(const Image& x, double sigma, double width_multiplier = 2.0) {
  if (!(sigma >= 0.0)) {
    throw_error(ErrorKind::domain, "init_interval: sigma = " + std::to_string(sigma) +
                                       " is negative");
  }
  if (!(width_multiplier >= 0.0)) {
    throw_error(ErrorKind::domain, "init_interval: negative width multiplier");
  }
  IntervalState s;
  s.height = x.height;
  s.width = x.width;
  s.channels = x.channels;
  const double half = width_multiplier * sigma;
  s.lower.assign(s.pixel_count(), Vector(x.channels));
  s.upper.assign(s.pixel_count(), Vector(x.channels));
  for (int p = 0; p < s.pixel_count(); ++p)
    for (int c = 0; c < x.channels; ++c) {
      const double v = x.data[static_cast<std::size_t>(p) * x.channels + c];
      s.lower[p][c] = v - half;
      s.upper[p][c] = v + half;
    }
  return s;
}

namespace detail {

inline std::vector<double> pack_interval(const std::vector<Vector>& vecs, int channels) {
  std::vector<double> flat(vecs.size() * channels);
  for (std::size_t p = 0; p < vecs.size(); ++p)
    for (int c = 0; c < channels; ++c) flat[p * channels + c] = vecs[p][c];
  return flat;
}

inline IntervalState interval_apply_layer(const IntervalState& s, const LayerSpec& layer) {
  struct Apply {
    const IntervalState& s;

    IntervalState from_center_halfwidth(int h, int w, int c, bool flattened,
                                        const std::vector<double>& center,
                                        const std::vector<double>& half) const {
      IntervalState out;
      out.height = h;
      out.width = w;
      out.channels = c;
      out.flattened = flattened;
      out.lower.assign(h * w, Vector(c));
      out.upper.assign(h * w, Vector(c));
      for (int p = 0; p < h * w; ++p)
        for (int ci = 0; ci < c; ++ci) {
          const std::size_t i = static_cast<std::size_t>(p) * c + ci;
          out.lower[p][ci] = center[i] - half[i];
          out.upper[p][ci] = center[i] + half[i];
        }
      return out;
    }

    IntervalState operator()(const ConvLayer& conv) const {
      if (s.flattened) {
        throw_error(ErrorKind::validation, "interval conv: state is flattened");
      }
      if (conv.in_channels != s.channels) {
        throw_error(ErrorKind::dimension, "interval conv: channel mismatch");
      }
      std::vector<double> center(static_cast<std::size_t>(s.pixel_count()) * s.channels);
      std::vector<double> half(center.size());
      for (int p = 0; p < s.pixel_count(); ++p)
        for (int c = 0; c < s.channels; ++c) {
          const std::size_t i = static_cast<std::size_t>(p) * s.channels + c;
          center[i] = 0.5 * (s.lower[p][c] + s.upper[p][c]);
          half[i] = 0.5 * (s.upper[p][c] - s.lower[p][c]);
        }
      ConvLayer abs_conv = conv;
      for (double& v : abs_conv.weights.data) v = std::abs(v);
      for (double& v : abs_conv.bias.data) v = 0.0;
      const int oh = conv_out_dim(s.height, conv.kernel, conv.stride, conv.padding, "height");
      const int ow = conv_out_dim(s.width, conv.kernel, conv.stride, conv.padding, "width");
      return from_center_halfwidth(
          oh, ow, conv.out_channels, false,
          conv_apply(s.height, s.width, s.channels, center, conv),
          conv_apply(s.height, s.width, s.channels, half, abs_conv));
    }

    IntervalState operator()(const LinearLayer& lin) const {
      const int total = s.pixel_count() * s.channels;
      if (!s.flattened && s.pixel_count() != 1) {
        throw_error(ErrorKind::validation, "interval linear: flatten the state first");
      }
      if (lin.in_dim != total) {
        throw_error(ErrorKind::dimension, "interval linear: dimension mismatch");
      }
      std::vector<double> center(total);
      std::vector<double> half(total);
      for (int p = 0; p < s.pixel_count(); ++p)
        for (int c = 0; c < s.channels; ++c) {
          const std::size_t i = static_cast<std::size_t>(p) * s.channels + c;
          center[i] = 0.5 * (s.lower[p][c] + s.upper[p][c]);
          half[i] = 0.5 * (s.upper[p][c] - s.lower[p][c]);
        }
      std::vector<double> c_out(lin.out_dim);
      std::vector<double> h_out(lin.out_dim);
      for (int o = 0; o < lin.out_dim; ++o) c_out[o] = lin.bias[o];
      for (int i = 0; i < lin.in_dim; ++i) {
        const double cv = center[i];
        const double hv = half[i];
        const double* wrow = &lin.weights.data[static_cast<std::size_t>(i) * lin.out_dim];
        for (int o = 0; o < lin.out_dim; ++o) {
          c_out[o] += cv * wrow[o];
          h_out[o] += hv * std::abs(wrow[o]);
        }
      }
      return from_center_halfwidth(1, 1, lin.out_dim, true, c_out, h_out);
    }

    IntervalState operator()(const AvgPoolLayer& pool) const {
      if (s.flattened) {
        throw_error(ErrorKind::validation, "interval avgpool: state is flattened");
      }
      const int k = pool.kernel;
      if (k < 1 || s.height % k != 0 || s.width % k != 0) {
        throw_error(ErrorKind::dimension, "interval avgpool: window does not divide the state");
      }
      IntervalState out;
      out.height = s.height / k;
      out.width = s.width / k;
      out.channels = s.channels;
      const auto lo = avgpool_apply(s.height, s.width, s.channels,
                                    pack_interval(s.lower, s.channels), k);
      const auto hi = avgpool_apply(s.height, s.width, s.channels,
                                    pack_interval(s.upper, s.channels), k);
      out.lower.assign(out.pixel_count(), Vector(s.channels));
      out.upper.assign(out.pixel_count(), Vector(s.channels));
      for (int p = 0; p < out.pixel_count(); ++p)
        for (int c = 0; c < s.channels; ++c) {
          out.lower[p][c] = lo[static_cast<std::size_t>(p) * s.channels + c];
          out.upper[p][c] = hi[static_cast<std::size_t>(p) * s.channels + c];
        }
      return out;
    }

    IntervalState operator()(const ReluLayer&) const {
      IntervalState out = s;
      for (Vector& v : out.lower)
        for (double& x : v.data) x = std::max(0.0, x);
      for (Vector& v : out.upper)
        for (double& x : v.data) x = std::max(0.0, x);
      return out;
    }

    IntervalState operator()(const ResidualAddLayer& res) const {
      IntervalState branch = s;
      for (const LayerSpec& l : res.branch) branch = interval_apply_layer(branch, l);
      if (branch.height != s.height || branch.width != s.width ||
          branch.channels != s.channels) {
        throw_error(ErrorKind::dimension, "interval residual: branch shape mismatch");
      }
      IntervalState out = s;
      for (int p = 0; p < s.pixel_count(); ++p)
        for (int c = 0; c < s.channels; ++c) {
          out.lower[p][c] += branch.lower[p][c];
          out.upper[p][c] += branch.upper[p][c];
        }
      return out;
    }

    IntervalState operator()(const FlattenLayer&) const {
      IntervalState out = s;
      out.flattened = true;
      return out;
    }

    IntervalState operator()(const NormalizeLayer& norm) const {
      if (!norm.enabled) {
        throw_error(ErrorKind::validation, "interval normalize: layer is not enabled");
      }
      IntervalState out = s;
      for (int p = 0; p < s.pixel_count(); ++p)
        for (int c = 0; c < s.channels; ++c) {
          out.lower[p][c] = (s.lower[p][c] - norm.mu_prime[c]) / norm.sigma_prime[c];
          out.upper[p][c] = (s.upper[p][c] - norm.mu_prime[c]) / norm.sigma_prime[c];
        }
      return out;
    }
  };
  return std::visit(Apply{s}, layer.node);
}

}  // namespace detail

struct IntervalResult {
  IntervalState final_state;
  std::vector<IntervalState> trace;  // entry 0 = initial box
};

inline IntervalResult propagate_interval_trace(const NetworkSpec& net, const IntervalState& init) {
  IntervalResult result;
  result.trace.reserve(net.layers.size() + 1);
  result.trace.push_back(init);
  for (std::size_t j = 0; j < net.layers.size(); ++j) {
    try {
      IntervalState next = detail::interval_apply_layer(result.trace.back(), net.layers[j]);
      next.layer_index = static_cast<int>(j) + 1;
      result.trace.push_back(std::move(next));
    } catch (const Error& e) {
      throw Error(e.kind(), "layer " + std::to_string(j) + ": " + e.what());
    }
  }
  result.final_state = result.trace.back();
  return result;
}

inline IntervalState propagate_interval(const NetworkSpec& net, const IntervalState& init) {
  return propagate_interval_trace(net, init).final_state;
}

struct TightnessRow {
  int layer_index = 0;
  double box_log_volume = 0.0;
  double cov_log_volume = 0.0;
};

// Per-layer volume proxies. Box: mean over pixels of the per-pixel sum of log
// half-widths (boxes differ across pixels). Covariance: 0.5 * log det(2*pi*e
// * Sigma), identical for every pixel since Sigma is shared. Degenerate boxes
// or singular covariances report -inf.
inline std::vector<TightnessRow> tightness_report(const NetworkSpec& net, const Image& x,
                                                  const BoundConfig& cfg,
                                                  double width_multiplier = 2.0) {
  const PropagationResult moments = propagate_all(net, x, cfg);
  const IntervalResult boxes =
      propagate_interval_trace(net, init_interval(x, cfg.sigma_in, width_multiplier));

  std::vector<TightnessRow> rows(moments.trace.size());
  const double neg_inf = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < moments.trace.size(); ++j) {
    rows[j].layer_index = static_cast<int>(j);

    const IntervalState& box = boxes.trace[j];
    double box_total = 0.0;
    for (int p = 0; p < box.pixel_count(); ++p)
      for (int c = 0; c < box.channels; ++c) {
        const double half = 0.5 * (box.upper[p][c] - box.lower[p][c]);
        box_total += half > 0.0 ? std::log(half) : neg_inf;
      }
    rows[j].box_log_volume = box_total / box.pixel_count();

    const MomentState& ms = moments.trace[j];
    double cov_total = 0.0;
    for (double lambda : sym_eigenvalues(ms.cov)) {
      cov_total += lambda > 0.0 ? 0.5 * std::log(2.0 * kPi * std::exp(1.0) * lambda) : neg_inf;
    }
    rows[j].cov_log_volume = cov_total;
  }
  return rows;
}

inline void write_tightness_csv(const std::vector<TightnessRow>& rows, std::ostream& out) {
  out << "layer_index,box_log_volume,cov_log_volume\n";
  char buf[120];
  for (const TightnessRow& r : rows) {
    std::snprintf(buf, sizeof buf, "%d,%.12g,%.12g\n", r.layer_index, r.box_log_volume,
                  r.cov_log_volume);
    out << buf;
  }
}

}  // namespace covprop
