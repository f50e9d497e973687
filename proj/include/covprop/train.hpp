#pragma once

// Reverse-mode differentiation of the moment-propagation pipeline and the
// training loops built on it. The forward tape records the input state of
// every layer; the backward pass walks the layers in reverse, carrying an
// adjoint (d_means, d_cov) and accumulating weight/bias gradients from both
// the mean path and the covariance path.
//
// Adjoint convention: d_cov(i, j) holds the loss sensitivity to covariance
// entry (i, j) with gradients of the symmetric cross terms split evenly over
// the two mirror entries. Every propagation rule maps symmetric matrices to
// symmetric matrices, so the adjoint stays symmetric all the way down.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "covprop/certify.hpp"
#include "covprop/dataset.hpp"
#include "covprop/error.hpp"
#include "covprop/moments.hpp"
#include "covprop/network.hpp"
#include "covprop/numkit.hpp"
#include "covprop/parallel.hpp"

namespace covprop {

struct LossConfig {
  double lambda = 0.0;  // robustness weight; 0 trains plain cross-entropy
  double gamma = 2.0;   // hinge offset; keep above typical radii or the hinge dies
  double sigma = 0.25;  // input perturbation scale
  std::vector<std::pair<int, double>> lr_schedule = {{0, 0.05}};
  int lambda_activation_epoch = 20;

  void validate() const {
    if (!(lambda >= 0.0)) {
      throw_error(ErrorKind::domain, "loss config: lambda must be >= 0");
    }
    if (!(gamma > 0.0)) {
      throw_error(ErrorKind::domain, "loss config: gamma must be positive");
    }
    if (!(sigma >= 0.0)) {
      throw_error(ErrorKind::domain, "loss config: sigma must be >= 0");
    }
    if (lambda_activation_epoch < 0) {
      throw_error(ErrorKind::validation, "loss config: lambda_activation_epoch must be >= 0");
    }
    if (lr_schedule.empty() || lr_schedule.front().first != 0) {
      throw_error(ErrorKind::validation, "loss config: lr schedule must start at epoch 0");
    }
    for (std::size_t i = 0; i < lr_schedule.size(); ++i) {
      if (!(lr_schedule[i].second > 0.0)) {
        throw_error(ErrorKind::validation, "loss config: learning rates must be positive");
      }
      if (i > 0 && lr_schedule[i].first <= lr_schedule[i - 1].first) {
        throw_error(ErrorKind::validation, "loss config: lr schedule epochs must increase");
      }
    }
  }
};

struct TrainConfig {
  LossConfig loss;
  double r_max = 0.0;
  int epochs = 40;
  int batch_size = 32;
  double momentum = 0.9;

  BoundConfig bound() const { return BoundConfig{r_max, loss.sigma}; }

  void validate() const {
    loss.validate();
    bound().validate();
    if (epochs < 1) {
      throw_error(ErrorKind::validation, "train config: epochs must be >= 1");
    }
    if (batch_size < 1) {
      throw_error(ErrorKind::validation, "train config: batch size must be >= 1");
    }
    if (!(momentum >= 0.0) || !(momentum < 1.0)) {
      throw_error(ErrorKind::domain, "train config: momentum must lie in [0, 1)");
    }
  }
};

inline double schedule_rate(const std::vector<std::pair<int, double>>& schedule, int epoch) {
  double rate = schedule.front().second;
  for (const auto& [start, lr] : schedule) {
    if (start <= epoch) rate = lr;
  }
  return rate;
}

struct ClassificationLoss {
  double value = 0.0;
  Vector grad;  // softmax(mu) - onehot(label)
};

inline ClassificationLoss loss_classification(const Vector& logits, int label) {
  const int n = static_cast<int>(logits.size());
  if (label < 0 || label >= n) {
    throw_error(ErrorKind::validation, "loss_classification: label " + std::to_string(label) +
                                           " outside 0.." + std::to_string(n - 1));
  }
  double top = logits[0];
  for (double v : logits.data) {
    if (!std::isfinite(v)) {
      throw_error(ErrorKind::numeric, "loss_classification: non-finite logit");
    }
    top = std::max(top, v);
  }
  ClassificationLoss out;
  out.grad = Vector(n);
  double z = 0.0;
  for (int c = 0; c < n; ++c) {
    out.grad[c] = std::exp(logits[c] - top);
    z += out.grad[c];
  }
  for (int c = 0; c < n; ++c) out.grad[c] /= z;
  out.value = -std::log(out.grad[label]);
  out.grad[label] -= 1.0;
  return out;
}

// Hinge on the certified radius, max(0, gamma - sigma * z) with z the margin
// between the true class and the strongest wrong class. The true label plays
// the top role even when the network misclassifies, so the gradient also
// pushes toward correct ordering. Argmax choices are constants within a step.
struct RobustnessLoss {
  double value = 0.0;
  bool active = false;      // hinge engaged: radius below gamma
  bool degenerate = false;  // denominator too small to trust its gradient
  int true_class = -1;
  int top_wrong = -1;
  double d_mu_true = 0.0;
  double d_mu_wrong = 0.0;
  double d_cov_tt = 0.0;  // diagonal entry (true, true)
  double d_cov_ww = 0.0;  // diagonal entry (wrong, wrong)
  double d_cov_tw = 0.0;  // each of the two mirror entries (true, wrong), (wrong, true)
};

inline RobustnessLoss loss_robustness(const Vector& mu, const Matrix& cov, int label,
                                      const LossConfig& cfg) {
  cfg.validate();
  const int n = static_cast<int>(mu.size());
  if (n < 2) {
    throw_error(ErrorKind::validation, "loss_robustness: need at least 2 classes");
  }
  if (label < 0 || label >= n) {
    throw_error(ErrorKind::validation, "loss_robustness: label " + std::to_string(label) +
                                           " outside 0.." + std::to_string(n - 1));
  }
  if (cov.rows != static_cast<std::size_t>(n) || cov.cols != static_cast<std::size_t>(n)) {
    throw_error(ErrorKind::dimension, "loss_robustness: covariance does not match logits");
  }
  RobustnessLoss out;
  out.true_class = label;
  int wrong = label == 0 ? 1 : 0;
  for (int c = 0; c < n; ++c) {
    if (c != label && mu[c] > mu[wrong]) wrong = c;
  }
  out.top_wrong = wrong;

  const double gap = mu[label] - mu[wrong];
  const double d = cov(label, label) + cov(wrong, wrong) - 2.0 * cov(label, wrong);
  const double den = std::max(std::sqrt(std::max(d, 0.0)), 1e-12);
  const double z = gap / den;
  out.value = std::max(0.0, cfg.gamma - cfg.sigma * z);
  out.active = out.value > 0.0;
  out.degenerate = d < 1e-12;
  if (!out.active || out.degenerate) return out;

  const double common = cfg.sigma / den;
  out.d_mu_true = -common;
  out.d_mu_wrong = common;
  const double c1 = cfg.sigma * gap / (2.0 * d * den);  // sigma * gap / (2 d^{3/2})
  out.d_cov_tt = c1;
  out.d_cov_ww = c1;
  out.d_cov_tw = -c1;
  return out;
}

// Forward recording: the state entering each layer, with residual branches
// recorded recursively.
struct LayerTape {
  MomentState input;
  std::vector<LayerTape> branch;
};

struct GradientTape {
  std::vector<LayerTape> layers;
  MomentState output;
  BoundConfig cfg;
};

namespace detail {

inline MomentState tape_layers(const std::vector<LayerSpec>& layers, MomentState s,
                               const BoundConfig& cfg, std::vector<LayerTape>& tape) {
  tape.clear();
  tape.reserve(layers.size());
  for (const LayerSpec& layer : layers) {
    LayerTape t;
    t.input = s;
    if (const auto* res = std::get_if<ResidualAddLayer>(&layer.node)) {
      MomentState branch_out = tape_layers(res->branch, s, cfg, t.branch);
      s = propagate_residual(s, branch_out);
    } else {
      s = apply_moment_layer(s, layer, cfg);
    }
    tape.push_back(std::move(t));
  }
  return s;
}

}  // namespace detail

inline GradientTape forward_tape(const NetworkSpec& net, const Image& x, const BoundConfig& cfg) {
  GradientTape tape;
  tape.cfg = cfg;
  tape.output = detail::tape_layers(net.layers, init_input(x, cfg), cfg, tape.layers);
  return tape;
}

// Per-layer parameter gradients, shaped exactly like the layer's parameters;
// empty for layers without any.
struct LayerGrads {
  Matrix weights;
  Vector bias;
  std::vector<LayerGrads> branch;
};

struct ParamGrads {
  std::vector<LayerGrads> layers;
};

// Adjoint of a moment state: same means layout, same covariance shape.
struct MomentAdjoint {
  std::vector<Vector> d_means;
  Matrix d_cov;
};

namespace detail {

inline LayerGrads zero_layer_grads(const LayerSpec& layer) {
  LayerGrads g;
  if (const auto* conv = std::get_if<ConvLayer>(&layer.node)) {
    g.weights = Matrix(conv->weights.rows, conv->weights.cols);
    g.bias = Vector(static_cast<int>(conv->bias.size()));
  } else if (const auto* lin = std::get_if<LinearLayer>(&layer.node)) {
    g.weights = Matrix(lin->weights.rows, lin->weights.cols);
    g.bias = Vector(static_cast<int>(lin->bias.size()));
  } else if (const auto* res = std::get_if<ResidualAddLayer>(&layer.node)) {
    g.branch.reserve(res->branch.size());
    for (const LayerSpec& l : res->branch) g.branch.push_back(zero_layer_grads(l));
  }
  return g;
}

inline void add_layer_grads(LayerGrads& into, const LayerGrads& from) {
  for (std::size_t i = 0; i < into.weights.data.size(); ++i)
    into.weights.data[i] += from.weights.data[i];
  for (std::size_t i = 0; i < into.bias.size(); ++i) into.bias[i] += from.bias[i];
  for (std::size_t i = 0; i < into.branch.size(); ++i)
    add_layer_grads(into.branch[i], from.branch[i]);
}

inline void scale_layer_grads(LayerGrads& g, double s) {
  for (double& v : g.weights.data) v *= s;
  for (double& v : g.bias.data) v *= s;
  for (LayerGrads& b : g.branch) scale_layer_grads(b, s);
}

inline std::vector<double> pack_adjoint_means(const std::vector<Vector>& d_means, int channels) {
  std::vector<double> flat(d_means.size() * static_cast<std::size_t>(channels));
  for (std::size_t p = 0; p < d_means.size(); ++p)
    for (int c = 0; c < channels; ++c) flat[p * channels + c] = d_means[p][c];
  return flat;
}

inline std::vector<Vector> unpack_adjoint_means(const std::vector<double>& flat, int pixels,
                                                int channels) {
  std::vector<Vector> out(static_cast<std::size_t>(pixels), Vector(channels));
  for (int p = 0; p < pixels; ++p)
    for (int c = 0; c < channels; ++c) out[p][c] = flat[static_cast<std::size_t>(p) * channels + c];
  return out;
}

// Shared core of the linear and conv covariance backward: given the forward
// rule Sigma_out = scale * sum_b W_b^T Sigma W_b over row blocks of W, push
// the symmetric adjoint G back to Sigma and to each block of W.
inline void cov_blocks_backward(const Matrix& weights, int block_rows, int block_count,
                                const Matrix& sigma_in, const Matrix& g_out, double scale,
                                Matrix& d_sigma_in, Matrix& d_weights) {
  for (int b = 0; b < block_count; ++b) {
    const std::size_t row0 = static_cast<std::size_t>(b) * block_rows;
    const Matrix wb = rows_block(weights, row0, static_cast<std::size_t>(block_rows));
    // d Sigma_in += scale * W_b G W_b^T
    const Matrix wg = matmul(wb, g_out);
    const Matrix ds = matmul(wg, wb.transposed());
    for (std::size_t i = 0; i < d_sigma_in.data.size(); ++i)
      d_sigma_in.data[i] += scale * ds.data[i];
    // d W_b += scale * Sigma W_b (G + G^T) = 2 scale * Sigma W_b G
    const Matrix dw = matmul(matmul(sigma_in, wb), g_out);
    for (int r = 0; r < block_rows; ++r)
      for (std::size_t c = 0; c < weights.cols; ++c)
        d_weights(row0 + static_cast<std::size_t>(r), c) += 2.0 * scale * dw(static_cast<std::size_t>(r), c);
  }
}

inline MomentAdjoint backward_layers(const std::vector<LayerSpec>& layers,
                                     const std::vector<LayerTape>& tape, MomentAdjoint grad,
                                     const BoundConfig& cfg, std::vector<LayerGrads>& grads) {
  if (tape.size() != layers.size()) {
    throw_error(ErrorKind::validation, "backward: tape has " + std::to_string(tape.size()) +
                                           " entries for " + std::to_string(layers.size()) +
                                           " layers");
  }
  const auto [tau, tau2] = decorrelation_tau(cfg.r_max);
  (void)tau2;
  for (std::size_t j = layers.size(); j-- > 0;) {
    const MomentState& in = tape[j].input;
    const int pixels = in.pixel_count();
    const int ch = in.channels;

    if (const auto* conv = std::get_if<ConvLayer>(&layers[j].node)) {
      MomentAdjoint next;
      next.d_cov = Matrix(static_cast<std::size_t>(ch), static_cast<std::size_t>(ch));
      const std::vector<double> d_out = pack_adjoint_means(grad.d_means, conv->out_channels);
      const std::vector<double> in_flat = pack_means(in);
      conv_backward_params(in.height, in.width, ch, in_flat, *conv, d_out, grads[j].weights,
                           grads[j].bias);
      next.d_means = unpack_adjoint_means(
          conv_backward_input(in.height, in.width, ch, *conv, d_out), pixels, ch);
      cov_blocks_backward(conv->weights, ch, conv->kernel * conv->kernel, in.cov, grad.d_cov, tau,
                          next.d_cov, grads[j].weights);
      grad = std::move(next);
    } else if (const auto* lin = std::get_if<LinearLayer>(&layers[j].node)) {
      MomentAdjoint next;
      next.d_cov = Matrix(static_cast<std::size_t>(ch), static_cast<std::size_t>(ch));
      const Vector& g = grad.d_means[0];
      const std::vector<double> in_flat = pack_means(in);
      // mean path: d_in = W g, dW += packed_in g^T, db += g
      std::vector<double> d_in(in_flat.size(), 0.0);
      for (std::size_t r = 0; r < lin->weights.rows; ++r) {
        const double* wrow = &lin->weights.data[r * lin->weights.cols];
        double s = 0.0;
        for (int o = 0; o < lin->out_dim; ++o) s += wrow[o] * g[o];
        d_in[r] = s;
        double* grow = &grads[j].weights.data[r * lin->weights.cols];
        const double x = in_flat[r];
        for (int o = 0; o < lin->out_dim; ++o) grow[o] += x * g[o];
      }
      for (int o = 0; o < lin->out_dim; ++o) grads[j].bias[o] += g[o];
      next.d_means = unpack_adjoint_means(d_in, pixels, ch);
      cov_blocks_backward(lin->weights, ch, pixels, in.cov, grad.d_cov, 1.0, next.d_cov,
                          grads[j].weights);
      grad = std::move(next);
    } else if (const auto* pool = std::get_if<AvgPoolLayer>(&layers[j].node)) {
      MomentAdjoint next;
      const std::vector<double> d_out = pack_adjoint_means(grad.d_means, ch);
      next.d_means = unpack_adjoint_means(
          avgpool_backward(in.height, in.width, ch, pool->kernel, d_out), pixels, ch);
      next.d_cov = scaled(grad.d_cov, 1.0 / (static_cast<double>(pool->kernel) * pool->kernel));
      grad = std::move(next);
    } else if (std::holds_alternative<ReluLayer>(layers[j].node)) {
      // means: d m_in = Phi(t) g_out; diagonal covariance picks up the
      // phi(t) / (2 s) terms from every pixel; the rest of d_cov passes through.
      std::vector<double> s_ch(static_cast<std::size_t>(ch));
      for (int c = 0; c < ch; ++c) s_ch[c] = std::sqrt(std::max(0.0, in.cov(c, c)));
      MomentAdjoint next;
      next.d_cov = grad.d_cov;
      next.d_means.assign(static_cast<std::size_t>(pixels), Vector(ch));
      for (int p = 0; p < pixels; ++p) {
        for (int c = 0; c < ch; ++c) {
          const double m = in.means[p][c];
          const double s = s_ch[c];
          const double g = grad.d_means[p][c];
          if (s > 0.0) {
            const double t = m / s;
            next.d_means[p][c] = g * std_normal_cdf(t);
            next.d_cov(c, c) += g * std_normal_pdf(t) / (2.0 * s);
          } else {
            next.d_means[p][c] = g * (m > 0.0 ? 1.0 : (m < 0.0 ? 0.0 : 0.5));
          }
        }
      }
      grad = std::move(next);
    } else if (const auto* res = std::get_if<ResidualAddLayer>(&layers[j].node)) {
      MomentAdjoint branch_grad{grad.d_means, grad.d_cov};
      MomentAdjoint from_branch =
          backward_layers(res->branch, tape[j].branch, std::move(branch_grad), cfg,
                          grads[j].branch);
      for (int p = 0; p < pixels; ++p)
        for (int c = 0; c < ch; ++c) grad.d_means[p][c] += from_branch.d_means[p][c];
      grad.d_cov = add(grad.d_cov, from_branch.d_cov);
    } else if (std::holds_alternative<FlattenLayer>(layers[j].node)) {
      // layout unchanged
    } else if (const auto* norm = std::get_if<NormalizeLayer>(&layers[j].node)) {
      for (int p = 0; p < pixels; ++p)
        for (int c = 0; c < ch; ++c) grad.d_means[p][c] /= norm->sigma_prime[c];
      for (int i = 0; i < ch; ++i)
        for (int k = 0; k < ch; ++k)
          grad.d_cov(i, k) /= norm->sigma_prime[i] * norm->sigma_prime[k];
    }
  }
  return grad;
}

}  // namespace detail

inline ParamGrads zero_grads(const NetworkSpec& net) {
  ParamGrads g;
  g.layers.reserve(net.layers.size());
  for (const LayerSpec& l : net.layers) g.layers.push_back(detail::zero_layer_grads(l));
  return g;
}

inline void add_grads(ParamGrads& into, const ParamGrads& from) {
  if (into.layers.size() != from.layers.size()) {
    throw_error(ErrorKind::dimension, "add_grads: layer counts differ");
  }
  for (std::size_t i = 0; i < into.layers.size(); ++i)
    detail::add_layer_grads(into.layers[i], from.layers[i]);
}

inline void scale_grads(ParamGrads& g, double s) {
  for (LayerGrads& l : g.layers) detail::scale_layer_grads(l, s);
}

inline ParamGrads backward_all(const NetworkSpec& net, const GradientTape& tape,
                               const MomentAdjoint& final_grad) {
  if (tape.layers.size() != net.layers.size()) {
    throw_error(ErrorKind::validation, "backward_all: tape does not match the network");
  }
  if (final_grad.d_means.size() != tape.output.means.size() ||
      final_grad.d_cov.rows != tape.output.cov.rows) {
    throw_error(ErrorKind::dimension, "backward_all: final gradient shape mismatch");
  }
  ParamGrads grads = zero_grads(net);
  MomentAdjoint g{final_grad.d_means, final_grad.d_cov};
  detail::backward_layers(net.layers, tape.layers, std::move(g), tape.cfg, grads.layers);
  return grads;
}

namespace detail {

inline void sgd_update_layers(std::vector<LayerSpec>& layers, std::vector<LayerGrads>& velocity,
                              const std::vector<LayerGrads>& grads, double lr, double momentum) {
  for (std::size_t j = 0; j < layers.size(); ++j) {
    if (auto* conv = std::get_if<ConvLayer>(&layers[j].node)) {
      for (std::size_t i = 0; i < conv->weights.data.size(); ++i) {
        double& v = velocity[j].weights.data[i];
        v = momentum * v - lr * grads[j].weights.data[i];
        conv->weights.data[i] += v;
      }
      for (std::size_t i = 0; i < conv->bias.size(); ++i) {
        double& v = velocity[j].bias[i];
        v = momentum * v - lr * grads[j].bias[i];
        conv->bias[i] += v;
      }
    } else if (auto* lin = std::get_if<LinearLayer>(&layers[j].node)) {
      for (std::size_t i = 0; i < lin->weights.data.size(); ++i) {
        double& v = velocity[j].weights.data[i];
        v = momentum * v - lr * grads[j].weights.data[i];
        lin->weights.data[i] += v;
      }
      for (std::size_t i = 0; i < lin->bias.size(); ++i) {
        double& v = velocity[j].bias[i];
        v = momentum * v - lr * grads[j].bias[i];
        lin->bias[i] += v;
      }
    } else if (auto* res = std::get_if<ResidualAddLayer>(&layers[j].node)) {
      sgd_update_layers(res->branch, velocity[j].branch, grads[j].branch, lr, momentum);
    }
  }
}

}  // namespace detail

struct EpochMetrics {
  int epoch = 0;
  double clean_acc = 0.0;
  double acr = 0.0;
  double mean_loss_c = 0.0;
  double mean_loss_cr = 0.0;
};

struct TrainResult {
  NetworkSpec net;
  std::vector<EpochMetrics> metrics;
};

inline void write_metrics_csv(const std::vector<EpochMetrics>& metrics, std::ostream& out) {
  out << "epoch,clean_acc,acr,mean_loss_c,mean_loss_cr\n";
  char buf[200];
  for (const EpochMetrics& m : metrics) {
    std::snprintf(buf, sizeof buf, "%d,%.12g,%.12g,%.12g,%.12g\n", m.epoch, m.clean_acc, m.acr,
                  m.mean_loss_c, m.mean_loss_cr);
    out << buf;
  }
}

namespace detail {

struct SampleResult {
  ParamGrads grads;
  double loss_c = 0.0;
  double loss_cr = 0.0;
};

// One sample's forward/backward. drop_classification removes the l_C gradient
// (the value is still reported) while the robustness term stays.
inline SampleResult sample_pass(const NetworkSpec& net, const Sample& sample,
                                const TrainConfig& cfg, double lambda_eff,
                                bool drop_classification) {
  GradientTape tape = forward_tape(net, sample.image, cfg.bound());
  const Vector& mu = tape.output.means[0];
  const ClassificationLoss lc = loss_classification(mu, sample.label);
  const RobustnessLoss lr = loss_robustness(mu, tape.output.cov, sample.label, cfg.loss);

  MomentAdjoint final_grad;
  final_grad.d_cov = Matrix(tape.output.cov.rows, tape.output.cov.cols);
  final_grad.d_means.assign(1, Vector(static_cast<int>(mu.size())));
  if (!drop_classification) {
    for (std::size_t c = 0; c < mu.size(); ++c) final_grad.d_means[0][c] = lc.grad[c];
  }
  if (lambda_eff > 0.0 && lr.active && !lr.degenerate) {
    final_grad.d_means[0][lr.true_class] += lambda_eff * lr.d_mu_true;
    final_grad.d_means[0][lr.top_wrong] += lambda_eff * lr.d_mu_wrong;
    final_grad.d_cov(lr.true_class, lr.true_class) += lambda_eff * lr.d_cov_tt;
    final_grad.d_cov(lr.top_wrong, lr.top_wrong) += lambda_eff * lr.d_cov_ww;
    final_grad.d_cov(lr.true_class, lr.top_wrong) += lambda_eff * lr.d_cov_tw;
    final_grad.d_cov(lr.top_wrong, lr.true_class) += lambda_eff * lr.d_cov_tw;
  }
  SampleResult out;
  out.grads = backward_all(net, tape, final_grad);
  out.loss_c = lc.value;
  out.loss_cr = lr.value;
  return out;
}

inline void check_dataset(const NetworkSpec& net, const Dataset& data) {
  if (data.empty()) {
    throw_error(ErrorKind::validation, "train: dataset is empty");
  }
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Sample& s = data[i];
    if (s.label < 0 || s.label >= net.class_count) {
      throw_error(ErrorKind::validation, "train: sample " + std::to_string(i) + " label " +
                                             std::to_string(s.label) + " outside 0.." +
                                             std::to_string(net.class_count - 1));
    }
    if (s.image.height != net.input_shape.height || s.image.width != net.input_shape.width ||
        s.image.channels != net.input_shape.channels) {
      throw_error(ErrorKind::dimension,
                  "train: sample " + std::to_string(i) + " shape does not match the network");
    }
  }
}

// Fisher-Yates driven by the shared rng so shuffles are seed-stable.
inline std::vector<std::size_t> shuffled_order(std::size_t n, NormalRng& rng) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = std::min(i - 1, static_cast<std::size_t>(rng.uniform() * static_cast<double>(i)));
    std::swap(order[i - 1], order[j]);
  }
  return order;
}

inline TrainResult train_impl(NetworkSpec net, const Dataset& data, const TrainConfig& cfg,
                              std::uint64_t seed, bool finetune_top_decile) {
  cfg.validate();
  net.validate();
  check_dataset(net, data);

  const std::size_t n = data.size();
  ParamGrads velocity = zero_grads(net);
  TrainResult result;
  result.metrics.reserve(static_cast<std::size_t>(cfg.epochs));

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = schedule_rate(cfg.loss.lr_schedule, epoch);
    const double lambda_eff = epoch >= cfg.loss.lambda_activation_epoch ? cfg.loss.lambda : 0.0;

    // Fine-tuning rule: rank samples by the current propagated radius and
    // drop the classification term for the top decile, recomputed per epoch.
    std::vector<char> drop(n, 0);
    if (finetune_top_decile) {
      const std::size_t k = n / 10;
      if (k > 0) {
        std::vector<double> radius(n, 0.0);
        parallel_for(n, [&](std::size_t i) {
          const PropagationResult prop = propagate_all(net, data[i].image, cfg.bound());
          radius[i] = certified_radius(prop.final_state.means[0], prop.final_state.cov,
                                       cfg.loss.sigma)
                          .radius;
        });
        std::vector<std::size_t> by_radius(n);
        for (std::size_t i = 0; i < n; ++i) by_radius[i] = i;
        std::stable_sort(by_radius.begin(), by_radius.end(),
                         [&](std::size_t a, std::size_t b) { return radius[a] > radius[b]; });
        for (std::size_t i = 0; i < k; ++i) drop[by_radius[i]] = 1;
      }
    }

    NormalRng shuffle_rng(mix_seed(seed, 0x700 + static_cast<std::uint64_t>(epoch)));
    const std::vector<std::size_t> order = shuffled_order(n, shuffle_rng);

    double sum_loss_c = 0.0;
    double sum_loss_cr = 0.0;
    for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t stop = std::min(n, start + static_cast<std::size_t>(cfg.batch_size));
      const std::size_t count = stop - start;
      const std::size_t batch_no = start / static_cast<std::size_t>(cfg.batch_size);
      std::vector<SampleResult> slots(count);
      try {
        parallel_for(count, [&](std::size_t i) {
          const Sample& s = data[order[start + i]];
          slots[i] = sample_pass(net, s, cfg, lambda_eff, drop[order[start + i]] != 0);
        });
      } catch (const Error& e) {
        throw Error(e.kind(), "train: epoch " + std::to_string(epoch) + ", batch " +
                                  std::to_string(batch_no) + ": " + e.what());
      }
      ParamGrads batch = zero_grads(net);
      for (std::size_t i = 0; i < count; ++i) {
        const double total = slots[i].loss_c + lambda_eff * slots[i].loss_cr;
        if (!std::isfinite(total)) {
          throw_error(ErrorKind::numeric, "train: non-finite loss at epoch " +
                                              std::to_string(epoch) + ", batch " +
                                              std::to_string(batch_no));
        }
        sum_loss_c += slots[i].loss_c;
        sum_loss_cr += slots[i].loss_cr;
        add_grads(batch, slots[i].grads);
      }
      scale_grads(batch, 1.0 / static_cast<double>(count));
      sgd_update_layers(net.layers, velocity.layers, batch.layers, lr, cfg.momentum);
    }

    EpochMetrics m;
    m.epoch = epoch;
    m.mean_loss_c = sum_loss_c / static_cast<double>(n);
    m.mean_loss_cr = sum_loss_cr / static_cast<double>(n);
    std::vector<char> correct(n, 0);
    std::vector<double> radius_hit(n, 0.0);
    const bool want_acr = cfg.loss.sigma > 0.0;
    parallel_for(n, [&](std::size_t i) {
      correct[i] = argmax_class(forward(net, data[i].image)) == data[i].label ? 1 : 0;
      if (want_acr) {
        const PropagationResult prop = propagate_all(net, data[i].image, cfg.bound());
        const CertResult cert = certified_radius(prop.final_state.means[0],
                                                 prop.final_state.cov, cfg.loss.sigma);
        radius_hit[i] = cert.predicted == data[i].label ? cert.radius : 0.0;
      }
    });
    int hits = 0;
    double radius_sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      hits += correct[i];
      radius_sum += radius_hit[i];
    }
    m.clean_acc = static_cast<double>(hits) / static_cast<double>(n);
    m.acr = want_acr ? radius_sum / static_cast<double>(n) : 0.0;
    result.metrics.push_back(m);
  }
  result.net = std::move(net);
  return result;
}

}  // namespace detail

inline TrainResult train_loop(NetworkSpec net, const Dataset& data, const TrainConfig& cfg,
                              std::uint64_t seed) {
  return detail::train_impl(std::move(net), data, cfg, seed, false);
}

// Fine-tuning pass for label noise: assumes a warm-started net; each epoch the
// top-10% of samples by current certified radius lose their classification
// term, keeping confidently certified (possibly mislabeled) points from
// dragging the decision boundary.
inline TrainResult noisy_label_finetune(NetworkSpec net, const Dataset& data_noisy,
                                        const TrainConfig& cfg, std::uint64_t seed) {
  if (!(cfg.loss.sigma > 0.0)) {
    throw_error(ErrorKind::domain, "noisy_label_finetune: sigma must be positive to rank radii");
  }
  return detail::train_impl(std::move(net), data_noisy, cfg, seed, true);
}

// Pair-flipping label noise: label i becomes i+1 mod C with probability p.
inline Dataset pair_flip_labels(const Dataset& data, double p, int class_count,
                                std::uint64_t seed) {
  if (!(p >= 0.0) || !(p <= 1.0)) {
    throw_error(ErrorKind::domain, "pair_flip_labels: p must lie in [0, 1]");
  }
  if (class_count < 2) {
    throw_error(ErrorKind::validation, "pair_flip_labels: need at least 2 classes");
  }
  Dataset out = data;
  NormalRng rng(mix_seed(seed, 0x5e7'0004));
  for (Sample& s : out) {
    if (s.label >= class_count) {
      throw_error(ErrorKind::validation, "pair_flip_labels: label outside the class range");
    }
    if (rng.uniform() < p) s.label = (s.label + 1) % class_count;
  }
  return out;
}

}  // namespace covprop
