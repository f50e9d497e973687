#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <ostream>
#include <string>
#include <variant>
#include <vector>

#include "covprop/error.hpp"
#include "covprop/moments.hpp"
#include "covprop/network.hpp"
#include "covprop/numkit.hpp"
#include "covprop/parallel.hpp"

namespace covprop {

struct MCConfig {
  long n0 = 100;       // selection samples
  long n = 10000;      // estimation samples
  double alpha = 0.001;
  double sigma = 0.25;
  std::uint64_t seed = 0;

  void validate() const {
    if (n0 < 1 || n < 1) {
      throw_error(ErrorKind::validation, "mc config: n0 and n must be at least 1");
    }
    if (!(alpha > 0.0 && alpha < 1.0)) {
      throw_error(ErrorKind::domain,
                  "mc config: alpha = " + std::to_string(alpha) + " is outside (0, 1)");
    }
    if (!(sigma >= 0.0)) {
      throw_error(ErrorKind::domain, "mc config: sigma = " + std::to_string(sigma) +
                                         " is negative");
    }
  }

  // n should dwarf n0; callers surface this as a warning, not an error.
  bool wants_more_samples() const { return n < 10 * n0; }
};

struct MCReport {
  int predicted = -1;  // -1 when abstained
  std::vector<long> class_counts;
  double p_lower = 0.0;
  double radius = 0.0;
  bool abstained = true;
};

namespace detail {

// Substream per sample index: identical draws no matter how samples are
// distributed over workers or chunks.
inline Image noisy_copy(const Image& x, double sigma, std::uint64_t seed, std::uint64_t stream) {
  NormalRng rng(mix_seed(seed, stream));
  Image out = x;
  for (double& v : out.data) v += sigma * rng.normal();
  return out;
}

inline std::vector<int> sampled_classes(const NetworkSpec& net, const Image& x, double sigma,
                                        std::uint64_t seed, std::uint64_t stream_offset,
                                        long count) {
  std::vector<int> cls(static_cast<std::size_t>(count));
  parallel_for(static_cast<std::size_t>(count), [&](std::size_t i) {
    const Image noisy = noisy_copy(x, sigma, seed, stream_offset + i);
    cls[i] = argmax_class(forward(net, noisy));
  });
  return cls;
}

inline std::vector<long> class_histogram(const std::vector<int>& cls, int classes) {
  std::vector<long> counts(static_cast<std::size_t>(classes), 0);
  for (int c : cls) ++counts[static_cast<std::size_t>(c)];
  return counts;
}

}  // namespace detail

// Majority class over n0 noisy forward passes; -1 when the top count is tied.
inline int mc_predict(const NetworkSpec& net, const Image& x, const MCConfig& cfg) {
  cfg.validate();
  const std::vector<int> cls = detail::sampled_classes(net, x, cfg.sigma, cfg.seed, 0, cfg.n0);
  const std::vector<long> counts = detail::class_histogram(cls, net.class_count);
  int best = 0;
  for (int c = 1; c < net.class_count; ++c) {
    if (counts[c] > counts[best]) best = c;
  }
  for (int c = 0; c < net.class_count; ++c) {
    if (c != best && counts[c] == counts[best]) return -1;
  }
  return best;
}

// Two-stage certification: n0 draws select the candidate class, n fresh draws
// feed an exact binomial lower confidence bound on its success probability.
// A selection tie falls through with the lowest tied index; the confidence
// test then abstains on its own, which keeps the histogram invariant intact.
inline MCReport mc_certify(const NetworkSpec& net, const Image& x, const MCConfig& cfg) {
  cfg.validate();
  const std::vector<int> sel = detail::sampled_classes(net, x, cfg.sigma, cfg.seed, 0, cfg.n0);
  const std::vector<long> sel_counts = detail::class_histogram(sel, net.class_count);
  int candidate = 0;
  for (int c = 1; c < net.class_count; ++c) {
    if (sel_counts[c] > sel_counts[candidate]) candidate = c;
  }

  const std::vector<int> est = detail::sampled_classes(net, x, cfg.sigma, cfg.seed,
                                                       static_cast<std::uint64_t>(cfg.n0), cfg.n);
  MCReport report;
  report.class_counts = detail::class_histogram(est, net.class_count);

  const long successes = report.class_counts[static_cast<std::size_t>(candidate)];
  report.p_lower = binom_lower_confidence(static_cast<std::uint64_t>(successes),
                                          static_cast<std::uint64_t>(cfg.n), cfg.alpha);
  if (report.p_lower > 0.5) {
    report.abstained = false;
    report.predicted = candidate;
    report.radius = cfg.sigma * std_normal_cdf_inv(report.p_lower);
  }
  return report;
}

struct LayerMoments {
  int layer_index = 0;
  std::string kind;
  int height = 0;
  int width = 0;
  int channels = 0;
  bool flattened = false;
  std::vector<Vector> means;      // per pixel, like the propagated state
  Matrix cov;                     // channel covariance pooled across pixels
  double mean_diag = 0.0;         // mean diagonal entry of cov
  double max_cross_pixel_corr = 0.0;
};

namespace detail {

// Coordinates probed for the cross-pixel correlation diagnostic: an even
// stride over the flattened grid, capped so the second-moment matrix for the
// probe stays small.
inline std::vector<std::size_t> probe_coordinates(std::size_t total) {
  const std::size_t cap = 64;
  const std::size_t stride = std::max<std::size_t>(1, (total + cap - 1) / cap);
  std::vector<std::size_t> coords;
  for (std::size_t i = 0; i < total; i += stride) coords.push_back(i);
  return coords;
}

}  // namespace detail

// Empirical per-layer mean grids and pooled channel covariances from n noisy
// forward passes. Layer 0 is the input; every network layer adds one entry.
// The cross-pixel correlation maximum is the diagnostic companion to the
// inflation factor's correlation cap.
inline std::vector<LayerMoments> mc_layer_moments(const NetworkSpec& net, const Image& x,
                                                  double sigma, long n, std::uint64_t seed) {
  if (n < 100) {
    throw_error(ErrorKind::validation,
                "mc_layer_moments: need at least 100 samples, got " + std::to_string(n));
  }
  if (!(sigma >= 0.0)) {
    throw_error(ErrorKind::domain, "mc_layer_moments: negative sigma");
  }

  const std::vector<Activation> clean = forward_activations(net, x);
  const std::size_t entries = clean.size();

  std::vector<LayerMoments> layers(entries);
  std::vector<std::vector<std::size_t>> probes(entries);
  std::vector<std::vector<double>> probe_sum(entries);
  std::vector<Matrix> probe_outer(entries);
  std::vector<std::vector<Vector>> mean_sum(entries);
  std::vector<std::vector<Matrix>> outer_sum(entries);

  for (std::size_t j = 0; j < entries; ++j) {
    // Flatten is a pure reshape; keep the previous pixel/channel structure so
    // the entry lines up with the propagated trace.
    Shape sh = clean[j].shape;
    if (j > 0 && std::holds_alternative<FlattenLayer>(net.layers[j - 1].node)) {
      sh = clean[j - 1].shape;
      sh.flattened = true;
    }
    if (sh.channels > 512) {
      throw_error(ErrorKind::validation,
                  "mc_layer_moments: layer " + std::to_string(j) + " has " +
                      std::to_string(sh.channels) + " channels, refusing above 512");
    }
    LayerMoments& lm = layers[j];
    lm.layer_index = static_cast<int>(j);
    lm.kind = j == 0 ? "input" : net.layers[j - 1].kind_name();
    lm.height = sh.height;
    lm.width = sh.width;
    lm.channels = sh.channels;
    lm.flattened = sh.flattened;

    const std::size_t pixels = static_cast<std::size_t>(sh.height) * sh.width;
    mean_sum[j].assign(pixels, Vector(sh.channels));
    outer_sum[j].assign(pixels, Matrix(sh.channels, sh.channels));
    probes[j] = detail::probe_coordinates(clean[j].values.size());
    probe_sum[j].assign(probes[j].size(), 0.0);
    probe_outer[j] = Matrix(probes[j].size(), probes[j].size());
  }

  // Fixed chunks bound the stored activations; accumulation runs in sample
  // order inside each chunk, so results do not depend on the worker count.
  const long chunk = 256;
  std::vector<std::vector<Activation>> slots(static_cast<std::size_t>(std::min(chunk, n)));
  for (long start = 0; start < n; start += chunk) {
    const long count = std::min(chunk, n - start);
    parallel_for(static_cast<std::size_t>(count), [&](std::size_t i) {
      const Image noisy = detail::noisy_copy(x, sigma, seed, static_cast<std::uint64_t>(start) + i);
      slots[i] = forward_activations(net, noisy);
    });
    for (long i = 0; i < count; ++i) {
      const std::vector<Activation>& acts = slots[static_cast<std::size_t>(i)];
      for (std::size_t j = 0; j < entries; ++j) {
        const int ch = layers[j].channels;
        const std::vector<double>& vals = acts[j].values;
        const std::vector<double>& base = clean[j].values;
        const std::size_t pixels = mean_sum[j].size();
        // Accumulate deviations from the clean pass: better conditioned than
        // raw second moments, and exactly zero when sigma is zero.
        for (std::size_t p = 0; p < pixels; ++p) {
          const double* v = vals.data() + p * ch;
          const double* c0 = base.data() + p * ch;
          Vector& ms = mean_sum[j][p];
          Matrix& os = outer_sum[j][p];
          for (int a = 0; a < ch; ++a) {
            const double da = v[a] - c0[a];
            ms[a] += da;
            for (int b = a; b < ch; ++b) os(a, b) += da * (v[b] - c0[b]);
          }
        }
        const auto& coords = probes[j];
        for (std::size_t a = 0; a < coords.size(); ++a) {
          const double da = vals[coords[a]] - base[coords[a]];
          probe_sum[j][a] += da;
          for (std::size_t b = a; b < coords.size(); ++b) {
            probe_outer[j](a, b) += da * (vals[coords[b]] - base[coords[b]]);
          }
        }
      }
    }
  }

  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t j = 0; j < entries; ++j) {
    LayerMoments& lm = layers[j];
    const int ch = lm.channels;
    const std::size_t pixels = mean_sum[j].size();
    lm.means.assign(pixels, Vector(ch));
    lm.cov = Matrix(ch, ch);
    const std::vector<double>& base = clean[j].values;
    for (std::size_t p = 0; p < pixels; ++p) {
      Vector dev_mean(ch);
      for (int a = 0; a < ch; ++a) dev_mean[a] = mean_sum[j][p][a] * inv_n;
      for (int a = 0; a < ch; ++a)
        for (int b = a; b < ch; ++b) {
          lm.cov(a, b) += outer_sum[j][p](a, b) * inv_n - dev_mean[a] * dev_mean[b];
        }
      for (int a = 0; a < ch; ++a) {
        lm.means[p][a] = base[p * static_cast<std::size_t>(ch) + a] + dev_mean[a];
      }
    }
    const double inv_pixels = 1.0 / static_cast<double>(pixels);
    for (int a = 0; a < ch; ++a)
      for (int b = a; b < ch; ++b) {
        lm.cov(a, b) *= inv_pixels;
        lm.cov(b, a) = lm.cov(a, b);
      }
    lm.mean_diag = lm.cov.trace() / static_cast<double>(ch);

    const auto& coords = probes[j];
    double max_corr = 0.0;
    for (std::size_t a = 0; a < coords.size(); ++a) {
      const double ma = probe_sum[j][a] * inv_n;
      const double va = probe_outer[j](a, a) * inv_n - ma * ma;
      if (va <= 1e-15) continue;
      const std::size_t pa = coords[a] / static_cast<std::size_t>(ch);
      for (std::size_t b = a + 1; b < coords.size(); ++b) {
        const std::size_t pb = coords[b] / static_cast<std::size_t>(ch);
        if (pa == pb) continue;
        const double mb = probe_sum[j][b] * inv_n;
        const double vb = probe_outer[j](b, b) * inv_n - mb * mb;
        if (vb <= 1e-15) continue;
        const double cab = probe_outer[j](a, b) * inv_n - ma * mb;
        max_corr = std::max(max_corr, std::abs(cab) / std::sqrt(va * vb));
      }
    }
    lm.max_cross_pixel_corr = max_corr;
  }
  return layers;
}

// Scatter export for one channel pair at one layer: n sampled value pairs at
// pixel 0, preceded by comment lines carrying the tracked 2x2 covariance and
// its ellipse parameters.
inline void empirical_gaussianity(const NetworkSpec& net, const Image& x, const BoundConfig& cfg,
                                  long n, int layer, int channel_a, int channel_b,
                                  std::uint64_t seed, std::ostream& out) {
  if (n < 1) {
    throw_error(ErrorKind::validation, "empirical_gaussianity: need at least 1 sample");
  }
  if (layer < 0 || layer > static_cast<int>(net.layers.size())) {
    throw_error(ErrorKind::validation,
                "empirical_gaussianity: layer index " + std::to_string(layer) +
                    " out of range 0.." + std::to_string(net.layers.size()));
  }
  const PropagationResult prop = propagate_all(net, x, cfg);
  const MomentState& state = prop.trace[static_cast<std::size_t>(layer)];
  if (channel_a < 0 || channel_b < 0 || channel_a >= state.channels ||
      channel_b >= state.channels || channel_a == channel_b) {
    throw_error(ErrorKind::validation, "empirical_gaussianity: bad channel pair (" +
                                           std::to_string(channel_a) + ", " +
                                           std::to_string(channel_b) + ") for " +
                                           std::to_string(state.channels) + " channels");
  }

  const double caa = state.cov(channel_a, channel_a);
  const double cbb = state.cov(channel_b, channel_b);
  const double cab = state.cov(channel_a, channel_b);
  const double half_sum = 0.5 * (caa + cbb);
  const double half_diff = 0.5 * (caa - cbb);
  const double root = std::sqrt(half_diff * half_diff + cab * cab);
  const double lam1 = std::max(0.0, half_sum + root);
  const double lam2 = std::max(0.0, half_sum - root);
  const double angle = 0.5 * std::atan2(2.0 * cab, caa - cbb);

  char buf[256];
  std::snprintf(buf, sizeof(buf), "# layer=%d pixel=0 channel_a=%d channel_b=%d\n", layer,
                channel_a, channel_b);
  out << buf;
  std::snprintf(buf, sizeof(buf), "# mean_a=%.12g mean_b=%.12g\n", state.means[0][channel_a],
                state.means[0][channel_b]);
  out << buf;
  std::snprintf(buf, sizeof(buf), "# cov_aa=%.12g cov_ab=%.12g cov_bb=%.12g\n", caa, cab, cbb);
  out << buf;
  std::snprintf(buf, sizeof(buf), "# ellipse_axis_1=%.12g ellipse_axis_2=%.12g angle_rad=%.12g\n",
                std::sqrt(lam1), std::sqrt(lam2), angle);
  out << buf;
  out << "channel_a,channel_b\n";

  std::vector<double> va(static_cast<std::size_t>(n));
  std::vector<double> vb(static_cast<std::size_t>(n));
  parallel_for(static_cast<std::size_t>(n), [&](std::size_t i) {
    const Image noisy = detail::noisy_copy(x, cfg.sigma_in, seed, i);
    const std::vector<Activation> acts = forward_activations(net, noisy);
    const Activation& act = acts[static_cast<std::size_t>(layer)];
    va[i] = act.values[static_cast<std::size_t>(channel_a)];
    vb[i] = act.values[static_cast<std::size_t>(channel_b)];
  });
  for (long i = 0; i < n; ++i) {
    std::snprintf(buf, sizeof(buf), "%.12g,%.12g\n", va[static_cast<std::size_t>(i)],
                  vb[static_cast<std::size_t>(i)]);
    out << buf;
  }
}

}  // namespace covprop
