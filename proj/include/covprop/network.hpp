#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "covprop/error.hpp"
#include "covprop/numkit.hpp"

namespace covprop {

struct Image {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<double> data;  // pixel-major: data[(y * width + x) * channels + c]

  Image() = default;
  Image(int h, int w, int c) : height(h), width(w), channels(c), data(h * w * c, 0.0) {}

  double at(int y, int x, int c) const { return data[(y * width + x) * channels + c]; }
  double& at(int y, int x, int c) { return data[(y * width + x) * channels + c]; }
};

struct Shape {
  int height = 0;
  int width = 0;
  int channels = 0;
  bool flattened = false;

  int pixel_count() const { return height * width; }
  int total_dim() const { return height * width * channels; }
  bool operator==(const Shape&) const = default;
};

inline std::string shape_string(const Shape& s) {
  return std::to_string(s.height) + "x" + std::to_string(s.width) + "x" +
         std::to_string(s.channels) + (s.flattened ? " (flat)" : "");
}

struct ConvLayer {
  int in_channels = 0;
  int out_channels = 0;
  int kernel = 0;
  int stride = 1;
  int padding = 0;
  Matrix weights;  // (kernel^2 * in_channels) x out_channels; row = tap * in_channels + c_in
  Vector bias;     // out_channels
};

struct LinearLayer {
  int in_dim = 0;
  int out_dim = 0;
  Matrix weights;  // in_dim x out_dim
  Vector bias;     // out_dim
};

struct AvgPoolLayer {
  int kernel = 0;  // stride equals kernel
};

struct ReluLayer {};

struct FlattenLayer {};

struct NormalizeLayer {
  bool enabled = false;
  Vector mu_prime;     // per channel
  Vector sigma_prime;  // per channel, strictly positive
};

struct LayerSpec;

struct ResidualAddLayer {
  std::vector<LayerSpec> branch;  // must map the input shape to itself
};

struct LayerSpec {
  std::variant<ConvLayer, LinearLayer, AvgPoolLayer, ReluLayer, ResidualAddLayer, FlattenLayer,
               NormalizeLayer>
      node;

  const char* kind_name() const {
    struct Namer {
      const char* operator()(const ConvLayer&) const { return "conv"; }
      const char* operator()(const LinearLayer&) const { return "linear"; }
      const char* operator()(const AvgPoolLayer&) const { return "avgpool"; }
      const char* operator()(const ReluLayer&) const { return "relu"; }
      const char* operator()(const ResidualAddLayer&) const { return "residual"; }
      const char* operator()(const FlattenLayer&) const { return "flatten"; }
      const char* operator()(const NormalizeLayer&) const { return "normalize"; }
    };
    return std::visit(Namer{}, node);
  }
};

namespace detail {

inline int conv_out_dim(int in, int kernel, int stride, int padding, const char* axis) {
  const int span = in + 2 * padding - kernel;
  if (span < 0) {
    throw_error(ErrorKind::dimension, std::string("conv: kernel ") + std::to_string(kernel) +
                                          " exceeds padded input extent along " + axis);
  }
  return span / stride + 1;
}

// Plain convolution arithmetic over a pixel-major buffer (rows = pixels,
// entries = channels). Shared by the forward pass and the mean path of the
// moment propagation. Padding reads as zero.
inline std::vector<double> conv_apply(int h, int w, int cin, const std::vector<double>& in,
                                      const ConvLayer& conv) {
  const int k = conv.kernel;
  const int oh = conv_out_dim(h, k, conv.stride, conv.padding, "height");
  const int ow = conv_out_dim(w, k, conv.stride, conv.padding, "width");
  const int cout = conv.out_channels;
  std::vector<double> out(static_cast<std::size_t>(oh) * ow * cout, 0.0);
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox) {
      double* opix = &out[(static_cast<std::size_t>(oy) * ow + ox) * cout];
      for (int co = 0; co < cout; ++co) opix[co] = conv.bias[co];
      for (int ky = 0; ky < k; ++ky) {
        const int y = oy * conv.stride + ky - conv.padding;
        if (y < 0 || y >= h) continue;
        for (int kx = 0; kx < k; ++kx) {
          const int x = ox * conv.stride + kx - conv.padding;
          if (x < 0 || x >= w) continue;
          const double* ipix = &in[(static_cast<std::size_t>(y) * w + x) * cin];
          const int tap = ky * k + kx;
          for (int ci = 0; ci < cin; ++ci) {
            const double v = ipix[ci];
            if (v == 0.0) continue;
            const double* wrow = &conv.weights.data[(static_cast<std::size_t>(tap) * cin + ci) *
                                                    static_cast<std::size_t>(cout)];
            for (int co = 0; co < cout; ++co) opix[co] += v * wrow[co];
          }
        }
      }
    }
  }
  return out;
}

// Adjoint of conv_apply with respect to the input buffer.
inline std::vector<double> conv_backward_input(int h, int w, int cin, const ConvLayer& conv,
                                               const std::vector<double>& d_out) {
  const int k = conv.kernel;
  const int oh = conv_out_dim(h, k, conv.stride, conv.padding, "height");
  const int ow = conv_out_dim(w, k, conv.stride, conv.padding, "width");
  const int cout = conv.out_channels;
  std::vector<double> d_in(static_cast<std::size_t>(h) * w * cin, 0.0);
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox) {
      const double* dpix = &d_out[(static_cast<std::size_t>(oy) * ow + ox) * cout];
      for (int ky = 0; ky < k; ++ky) {
        const int y = oy * conv.stride + ky - conv.padding;
        if (y < 0 || y >= h) continue;
        for (int kx = 0; kx < k; ++kx) {
          const int x = ox * conv.stride + kx - conv.padding;
          if (x < 0 || x >= w) continue;
          double* gpix = &d_in[(static_cast<std::size_t>(y) * w + x) * cin];
          const int tap = ky * k + kx;
          for (int ci = 0; ci < cin; ++ci) {
            const double* wrow = &conv.weights.data[(static_cast<std::size_t>(tap) * cin + ci) *
                                                    static_cast<std::size_t>(cout)];
            double s = 0.0;
            for (int co = 0; co < cout; ++co) s += wrow[co] * dpix[co];
            gpix[ci] += s;
          }
        }
      }
    }
  }
  return d_in;
}

// Accumulates weight and bias gradients of conv_apply into d_weights/d_bias.
inline void conv_backward_params(int h, int w, int cin, const std::vector<double>& in,
                                 const ConvLayer& conv, const std::vector<double>& d_out,
                                 Matrix& d_weights, Vector& d_bias) {
  const int k = conv.kernel;
  const int oh = conv_out_dim(h, k, conv.stride, conv.padding, "height");
  const int ow = conv_out_dim(w, k, conv.stride, conv.padding, "width");
  const int cout = conv.out_channels;
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox) {
      const double* dpix = &d_out[(static_cast<std::size_t>(oy) * ow + ox) * cout];
      for (int co = 0; co < cout; ++co) d_bias[co] += dpix[co];
      for (int ky = 0; ky < k; ++ky) {
        const int y = oy * conv.stride + ky - conv.padding;
        if (y < 0 || y >= h) continue;
        for (int kx = 0; kx < k; ++kx) {
          const int x = ox * conv.stride + kx - conv.padding;
          if (x < 0 || x >= w) continue;
          const double* ipix = &in[(static_cast<std::size_t>(y) * w + x) * cin];
          const int tap = ky * k + kx;
          for (int ci = 0; ci < cin; ++ci) {
            const double v = ipix[ci];
            if (v == 0.0) continue;
            double* grow = &d_weights.data[(static_cast<std::size_t>(tap) * cin + ci) *
                                           static_cast<std::size_t>(cout)];
            for (int co = 0; co < cout; ++co) grow[co] += v * dpix[co];
          }
        }
      }
    }
  }
}

inline std::vector<double> avgpool_apply(int h, int w, int c, const std::vector<double>& in,
                                         int k) {
  const int oh = h / k;
  const int ow = w / k;
  const double inv = 1.0 / (static_cast<double>(k) * k);
  std::vector<double> out(static_cast<std::size_t>(oh) * ow * c, 0.0);
  for (int oy = 0; oy < oh; ++oy)
    for (int ox = 0; ox < ow; ++ox) {
      double* opix = &out[(static_cast<std::size_t>(oy) * ow + ox) * c];
      for (int ky = 0; ky < k; ++ky)
        for (int kx = 0; kx < k; ++kx) {
          const double* ipix =
              &in[(static_cast<std::size_t>(oy * k + ky) * w + (ox * k + kx)) * c];
          for (int ci = 0; ci < c; ++ci) opix[ci] += ipix[ci];
        }
      for (int ci = 0; ci < c; ++ci) opix[ci] *= inv;
    }
  return out;
}

inline std::vector<double> avgpool_backward(int h, int w, int c, int k,
                                            const std::vector<double>& d_out) {
  const int oh = h / k;
  const int ow = w / k;
  const double inv = 1.0 / (static_cast<double>(k) * k);
  std::vector<double> d_in(static_cast<std::size_t>(h) * w * c, 0.0);
  for (int oy = 0; oy < oh; ++oy)
    for (int ox = 0; ox < ow; ++ox) {
      const double* dpix = &d_out[(static_cast<std::size_t>(oy) * ow + ox) * c];
      for (int ky = 0; ky < k; ++ky)
        for (int kx = 0; kx < k; ++kx) {
          double* gpix = &d_in[(static_cast<std::size_t>(oy * k + ky) * w + (ox * k + kx)) * c];
          for (int ci = 0; ci < c; ++ci) gpix[ci] += dpix[ci] * inv;
        }
    }
  return d_in;
}

}  // namespace detail

// Shape inference for a single layer; throws on any mismatch.
inline Shape layer_output_shape(const LayerSpec& layer, const Shape& in) {
  struct Infer {
    const Shape& in;

    Shape operator()(const ConvLayer& conv) const {
      if (in.flattened) {
        throw_error(ErrorKind::validation, "conv applied to a flattened state");
      }
      if (conv.in_channels != in.channels) {
        throw_error(ErrorKind::dimension,
                    "conv: expects " + std::to_string(conv.in_channels) + " channels, state has " +
                        std::to_string(in.channels));
      }
      if (conv.stride != 1 && conv.stride != 2) {
        throw_error(ErrorKind::validation,
                    "conv: stride " + std::to_string(conv.stride) + " not in {1, 2}");
      }
      if (conv.kernel < 1 || conv.padding < 0 || conv.out_channels < 1) {
        throw_error(ErrorKind::validation, "conv: invalid kernel/padding/output channels");
      }
      const std::size_t wrows = static_cast<std::size_t>(conv.kernel) * conv.kernel *
                                static_cast<std::size_t>(conv.in_channels);
      if (conv.weights.rows != wrows ||
          conv.weights.cols != static_cast<std::size_t>(conv.out_channels) ||
          conv.bias.size() != static_cast<std::size_t>(conv.out_channels)) {
        throw_error(ErrorKind::dimension, "conv: weight/bias storage does not match declared dims");
      }
      Shape out;
      out.height = detail::conv_out_dim(in.height, conv.kernel, conv.stride, conv.padding, "height");
      out.width = detail::conv_out_dim(in.width, conv.kernel, conv.stride, conv.padding, "width");
      out.channels = conv.out_channels;
      return out;
    }

    Shape operator()(const LinearLayer& lin) const {
      if (!in.flattened && in.pixel_count() != 1) {
        throw_error(ErrorKind::validation,
                    "linear applied to a spatial state " + shape_string(in) + "; flatten first");
      }
      if (lin.in_dim != in.total_dim()) {
        throw_error(ErrorKind::dimension, "linear: expects " + std::to_string(lin.in_dim) +
                                              " inputs, state has " +
                                              std::to_string(in.total_dim()));
      }
      if (lin.weights.rows != static_cast<std::size_t>(lin.in_dim) ||
          lin.weights.cols != static_cast<std::size_t>(lin.out_dim) ||
          lin.bias.size() != static_cast<std::size_t>(lin.out_dim)) {
        throw_error(ErrorKind::dimension,
                    "linear: weight/bias storage does not match declared dims");
      }
      return Shape{1, 1, lin.out_dim, true};
    }

    Shape operator()(const AvgPoolLayer& pool) const {
      if (in.flattened) {
        throw_error(ErrorKind::validation, "avgpool applied to a flattened state");
      }
      if (pool.kernel < 1 || in.height % pool.kernel != 0 || in.width % pool.kernel != 0) {
        throw_error(ErrorKind::dimension,
                    "avgpool: window " + std::to_string(pool.kernel) + " does not divide " +
                        shape_string(in));
      }
      return Shape{in.height / pool.kernel, in.width / pool.kernel, in.channels, false};
    }

    Shape operator()(const ReluLayer&) const { return in; }

    Shape operator()(const ResidualAddLayer& res) const {
      Shape s = in;
      for (std::size_t j = 0; j < res.branch.size(); ++j) {
        s = layer_output_shape(res.branch[j], s);
      }
      if (!(s == in)) {
        throw_error(ErrorKind::dimension, "residual: branch output " + shape_string(s) +
                                              " does not match trunk " + shape_string(in));
      }
      return in;
    }

    Shape operator()(const FlattenLayer&) const {
      if (in.flattened) {
        throw_error(ErrorKind::validation, "flatten applied twice");
      }
      return Shape{1, 1, in.total_dim(), true};
    }

    Shape operator()(const NormalizeLayer& norm) const {
      if (!norm.enabled) {
        throw_error(ErrorKind::validation, "normalize layer present but not enabled");
      }
      if (norm.mu_prime.size() != static_cast<std::size_t>(in.channels) ||
          norm.sigma_prime.size() != static_cast<std::size_t>(in.channels)) {
        throw_error(ErrorKind::dimension, "normalize: per-channel stats do not match " +
                                              std::to_string(in.channels) + " channels");
      }
      for (double s : norm.sigma_prime.data) {
        if (!(s > 0.0)) {
          throw_error(ErrorKind::validation, "normalize: scale entries must be positive");
        }
      }
      return in;
    }
  };
  return std::visit(Infer{in}, layer.node);
}

struct NetworkSpec {
  Shape input_shape;
  int class_count = 0;
  std::vector<LayerSpec> layers;

  Shape output_shape() const {
    Shape s = input_shape;
    for (std::size_t j = 0; j < layers.size(); ++j) {
      try {
        s = layer_output_shape(layers[j], s);
      } catch (const Error& e) {
        throw Error(e.kind(), "layer " + std::to_string(j) + ": " + e.what());
      }
    }
    return s;
  }

  void validate() const {
    if (class_count < 2) {
      throw_error(ErrorKind::validation,
                  "network: class count " + std::to_string(class_count) + " below 2");
    }
    if (input_shape.height < 1 || input_shape.width < 1 || input_shape.channels < 1 ||
        input_shape.flattened) {
      throw_error(ErrorKind::validation, "network: bad input shape " + shape_string(input_shape));
    }
    if (layers.empty()) {
      throw_error(ErrorKind::validation, "network: no layers");
    }
    if (!std::holds_alternative<LinearLayer>(layers.back().node)) {
      throw_error(ErrorKind::validation, "network: final layer must be linear");
    }
    const Shape out = output_shape();
    if (out.channels != class_count) {
      throw_error(ErrorKind::validation, "network: final layer emits " +
                                             std::to_string(out.channels) + " values for " +
                                             std::to_string(class_count) + " classes");
    }
  }
};

struct Activation {
  Shape shape;
  std::vector<double> values;  // pixel-major
};

namespace detail {

inline void apply_layer(const LayerSpec& layer, Activation& act);

inline void apply_layers(const std::vector<LayerSpec>& layers, Activation& act) {
  for (const LayerSpec& l : layers) apply_layer(l, act);
}

inline void apply_layer(const LayerSpec& layer, Activation& act) {
  struct Apply {
    Activation& act;

    void operator()(const ConvLayer& conv) const {
      const int oh = conv_out_dim(act.shape.height, conv.kernel, conv.stride, conv.padding,
                                  "height");
      const int ow = conv_out_dim(act.shape.width, conv.kernel, conv.stride, conv.padding,
                                  "width");
      act.values = conv_apply(act.shape.height, act.shape.width, act.shape.channels, act.values,
                              conv);
      act.shape = Shape{oh, ow, conv.out_channels, false};
    }

    void operator()(const LinearLayer& lin) const {
      std::vector<double> out(lin.out_dim);
      for (int o = 0; o < lin.out_dim; ++o) out[o] = lin.bias[o];
      for (int i = 0; i < lin.in_dim; ++i) {
        const double v = act.values[i];
        if (v == 0.0) continue;
        const double* wrow = &lin.weights.data[static_cast<std::size_t>(i) * lin.out_dim];
        for (int o = 0; o < lin.out_dim; ++o) out[o] += v * wrow[o];
      }
      act.values = std::move(out);
      act.shape = Shape{1, 1, lin.out_dim, true};
    }

    void operator()(const AvgPoolLayer& pool) const {
      act.values = avgpool_apply(act.shape.height, act.shape.width, act.shape.channels,
                                 act.values, pool.kernel);
      act.shape = Shape{act.shape.height / pool.kernel, act.shape.width / pool.kernel,
                        act.shape.channels, false};
    }

    void operator()(const ReluLayer&) const {
      for (double& v : act.values) v = std::max(0.0, v);
    }

    void operator()(const ResidualAddLayer& res) const {
      Activation branch = act;
      apply_layers(res.branch, branch);
      for (std::size_t i = 0; i < act.values.size(); ++i) act.values[i] += branch.values[i];
    }

    void operator()(const FlattenLayer&) const {
      act.shape = Shape{1, 1, act.shape.total_dim(), true};
    }

    void operator()(const NormalizeLayer& norm) const {
      const int c = act.shape.channels;
      const std::size_t pixels = act.values.size() / c;
      for (std::size_t p = 0; p < pixels; ++p) {
        double* pix = &act.values[p * c];
        for (int ci = 0; ci < c; ++ci) pix[ci] = (pix[ci] - norm.mu_prime[ci]) / norm.sigma_prime[ci];
      }
    }
  };
  std::visit(Apply{act}, layer.node);
}

inline Activation input_activation(const NetworkSpec& net, const Image& x) {
  if (x.height != net.input_shape.height || x.width != net.input_shape.width ||
      x.channels != net.input_shape.channels) {
    throw_error(ErrorKind::dimension,
                "forward: image " + std::to_string(x.height) + "x" + std::to_string(x.width) +
                    "x" + std::to_string(x.channels) + " vs network input " +
                    shape_string(net.input_shape));
  }
  if (x.data.size() != static_cast<std::size_t>(x.height) * x.width * x.channels) {
    throw_error(ErrorKind::dimension, "forward: image buffer does not match its dims");
  }
  return Activation{net.input_shape, x.data};
}

}  // namespace detail

inline Vector forward(const NetworkSpec& net, const Image& x) {
  Activation act = detail::input_activation(net, x);
  detail::apply_layers(net.layers, act);
  Vector out(act.values.size());
  out.data = std::move(act.values);
  return out;
}

// Records the state after every top-level layer; entry 0 is the input.
// Residual blocks contribute a single entry (their merged output).
inline std::vector<Activation> forward_activations(const NetworkSpec& net, const Image& x) {
  std::vector<Activation> trace;
  trace.reserve(net.layers.size() + 1);
  trace.push_back(detail::input_activation(net, x));
  for (const LayerSpec& layer : net.layers) {
    Activation next = trace.back();
    detail::apply_layer(layer, next);
    trace.push_back(std::move(next));
  }
  return trace;
}

inline int argmax_class(const Vector& logits) {
  int best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i) {
    if (logits[i] > logits[best]) best = static_cast<int>(i);
  }
  return best;
}

namespace detail {

inline ConvLayer make_conv(int cin, int cout, int kernel, int stride, int padding,
                           NormalRng& rng) {
  ConvLayer conv;
  conv.in_channels = cin;
  conv.out_channels = cout;
  conv.kernel = kernel;
  conv.stride = stride;
  conv.padding = padding;
  conv.weights = Matrix(static_cast<std::size_t>(kernel) * kernel * cin, cout);
  const double scale = std::sqrt(2.0 / (static_cast<double>(kernel) * kernel * cin));
  for (double& v : conv.weights.data) v = rng.normal() * scale;
  conv.bias = Vector(cout);
  return conv;
}

inline LinearLayer make_linear(int in_dim, int out_dim, NormalRng& rng) {
  LinearLayer lin;
  lin.in_dim = in_dim;
  lin.out_dim = out_dim;
  lin.weights = Matrix(in_dim, out_dim);
  const double scale = std::sqrt(2.0 / static_cast<double>(in_dim));
  for (double& v : lin.weights.data) v = rng.normal() * scale;
  lin.bias = Vector(out_dim);
  return lin;
}

}  // namespace detail

// Small LeNet-style stack: three conv/relu/pool stages (the last pool is
// global), then a two-layer head. Needs a square input divisible by 4.
inline NetworkSpec build_lenet_small(const Shape& input, int class_count, std::uint64_t seed) {
  if (input.height != input.width || input.height % 4 != 0 || input.height < 4) {
    throw_error(ErrorKind::validation,
                "build_lenet_small: input must be square with side divisible by 4, got " +
                    shape_string(input));
  }
  NormalRng rng(seed);
  NetworkSpec net;
  net.input_shape = input;
  net.class_count = class_count;
  const int w1 = 8, w2 = 16, w3 = 32, fc = 64;
  net.layers.push_back({detail::make_conv(input.channels, w1, 3, 1, 1, rng)});
  net.layers.push_back({ReluLayer{}});
  net.layers.push_back({AvgPoolLayer{2}});
  net.layers.push_back({detail::make_conv(w1, w2, 3, 1, 1, rng)});
  net.layers.push_back({ReluLayer{}});
  net.layers.push_back({AvgPoolLayer{2}});
  net.layers.push_back({detail::make_conv(w2, w3, 3, 1, 1, rng)});
  net.layers.push_back({ReluLayer{}});
  net.layers.push_back({AvgPoolLayer{input.height / 4}});
  net.layers.push_back({FlattenLayer{}});
  net.layers.push_back({detail::make_linear(w3, fc, rng)});
  net.layers.push_back({ReluLayer{}});
  net.layers.push_back({detail::make_linear(fc, class_count, rng)});
  net.validate();
  return net;
}

// Residual stack: stem conv, `blocks` two-conv residual blocks, global pool
// and a linear head. Top-level depth is 2 + 2 * blocks + 3.
inline NetworkSpec build_residual_small(const Shape& input, int class_count, int blocks,
                                        std::uint64_t seed, int width = 8) {
  if (input.height != input.width || input.height < 1) {
    throw_error(ErrorKind::validation,
                "build_residual_small: input must be square, got " + shape_string(input));
  }
  if (blocks < 1) {
    throw_error(ErrorKind::validation, "build_residual_small: need at least one block");
  }
  NormalRng rng(seed);
  NetworkSpec net;
  net.input_shape = input;
  net.class_count = class_count;
  net.layers.push_back({detail::make_conv(input.channels, width, 3, 1, 1, rng)});
  net.layers.push_back({ReluLayer{}});
  for (int b = 0; b < blocks; ++b) {
    ResidualAddLayer res;
    res.branch.push_back({detail::make_conv(width, width, 3, 1, 1, rng)});
    res.branch.push_back({ReluLayer{}});
    res.branch.push_back({detail::make_conv(width, width, 3, 1, 1, rng)});
    net.layers.push_back({std::move(res)});
    net.layers.push_back({ReluLayer{}});
  }
  net.layers.push_back({AvgPoolLayer{input.height}});
  net.layers.push_back({FlattenLayer{}});
  net.layers.push_back({detail::make_linear(width, class_count, rng)});
  net.validate();
  return net;
}

}  // namespace covprop
