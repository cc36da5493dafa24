#pragma once

// Dense feed-forward generator G: latent z -> image, with exact reverse-mode
// vector-Jacobian products and a little-endian binary model format.
//
// Weights are stored as float; every product and sum is accumulated in double.

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "dequant/error.hpp"
#include "dequant/image.hpp"
#include "dequant/image_io.hpp"
#include "dequant/surrogates.hpp"

namespace dequant {

enum class Activation : std::uint8_t { Linear = 0, LeakyRelu = 1, Sigmoid = 2 };

inline constexpr float kDefaultLeakySlope = 0.2f;

struct DenseLayer {
  std::uint32_t rows = 0;  // outputs
  std::uint32_t cols = 0;  // inputs
  Activation activation = Activation::Linear;
  float leaky_slope = kDefaultLeakySlope;
  std::vector<float> weights;  // rows x cols, row-major
  std::vector<float> bias;     // rows

  friend bool operator==(const DenseLayer&, const DenseLayer&) = default;
};

inline double activate(Activation a, double x, double slope) {
  switch (a) {
    case Activation::LeakyRelu:
      return x >= 0.0 ? x : slope * x;
    case Activation::Sigmoid:
      return logistic(x);
    case Activation::Linear:
      break;
  }
  return x;
}

/// Derivative given the pre-activation x and the activation output y.
inline double activate_grad(Activation a, double x, double y, double slope) {
  switch (a) {
    case Activation::LeakyRelu:
      return x >= 0.0 ? 1.0 : slope;
    case Activation::Sigmoid:
      return y * (1.0 - y);
    case Activation::Linear:
      break;
  }
  return 1.0;
}

/// Activations recorded by a forward pass, consumed by the VJP.
struct ForwardTape {
  std::vector<std::vector<double>> inputs;       // input to each layer
  std::vector<std::vector<double>> pre;          // pre-activation of each layer
  std::vector<double> raw_output;                // final activation output before clamping
  std::vector<double> output;                    // clamped to [0,1]
};

class GeneratorModel {
 public:
  GeneratorModel() = default;

  GeneratorModel(std::vector<DenseLayer> layers, Shape output_shape)
      : layers_(std::move(layers)), output_shape_(output_shape) {
    validate();
    wide_.reserve(layers_.size());
    for (const auto& l : layers_) {
      wide_.emplace_back(l.weights.begin(), l.weights.end());
      wide_bias_.emplace_back(l.bias.begin(), l.bias.end());
    }
  }

  const std::vector<DenseLayer>& layers() const noexcept { return layers_; }
  const Shape& output_shape() const noexcept { return output_shape_; }
  std::size_t latent_dim() const noexcept { return layers_.empty() ? 0 : layers_.front().cols; }
  std::size_t output_size() const noexcept { return output_shape_.size(); }

  friend bool operator==(const GeneratorModel& a, const GeneratorModel& b) {
    return a.layers_ == b.layers_ && a.output_shape_ == b.output_shape_;
  }

  /// Forward pass recording everything the VJP needs.
  ForwardTape forward_tape(std::span<const double> z) const {
    check_latent(z);
    ForwardTape tape;
    tape.inputs.reserve(layers_.size());
    tape.pre.reserve(layers_.size());
    std::vector<double> h(z.begin(), z.end());
    for (std::size_t li = 0; li < layers_.size(); ++li) {
      const auto& layer = layers_[li];
      std::vector<double> pre(layer.rows);
      for (std::uint32_t r = 0; r < layer.rows; ++r) {
        const double* w = wide_[li].data() + static_cast<std::size_t>(r) * layer.cols;
        double acc = wide_bias_[li][r];
        for (std::uint32_t c = 0; c < layer.cols; ++c) acc += w[c] * h[c];
        pre[r] = acc;
      }
      std::vector<double> next(layer.rows);
      for (std::uint32_t r = 0; r < layer.rows; ++r) next[r] = activate(layer.activation, pre[r], layer.leaky_slope);
      tape.inputs.push_back(std::move(h));
      tape.pre.push_back(std::move(pre));
      h = std::move(next);
    }
    for (double v : h) {
      if (!std::isfinite(v)) throw RangeError("generator produced a non-finite output");
    }
    tape.output.resize(h.size());
    for (std::size_t i = 0; i < h.size(); ++i) tape.output[i] = std::clamp(h[i], 0.0, 1.0);
    tape.raw_output = std::move(h);
    return tape;
  }

  ImageTensor forward(std::span<const double> z) const {
    auto tape = forward_tape(z);
    return ImageTensor(output_shape_, std::move(tape.output));
  }

  /// Gradient of <upstream, G(z)> with respect to z, given a recorded tape.
  /// Outputs that were clamped pass no gradient.
  std::vector<double> vjp(const ForwardTape& tape, std::span<const double> upstream) const {
    if (upstream.size() != output_size()) {
      throw ShapeError("generator vjp: cotangent length " + std::to_string(upstream.size()) +
                       " does not match output size " + std::to_string(output_size()));
    }
    if (tape.pre.size() != layers_.size()) throw ShapeError("generator vjp: tape does not match model");
    std::vector<double> g(upstream.begin(), upstream.end());
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double y = tape.raw_output[i];
      if (y < 0.0 || y > 1.0) g[i] = 0.0;
    }
    for (std::size_t li = layers_.size(); li-- > 0;) {
      const auto& layer = layers_[li];
      const auto& pre = tape.pre[li];
      const std::vector<double>& post = li + 1 < layers_.size() ? tape.inputs[li + 1] : tape.raw_output;
      for (std::uint32_t r = 0; r < layer.rows; ++r) {
        g[r] *= activate_grad(layer.activation, pre[r], post[r], layer.leaky_slope);
      }
      std::vector<double> back(layer.cols, 0.0);
      for (std::uint32_t r = 0; r < layer.rows; ++r) {
        const double gr = g[r];
        if (gr == 0.0) continue;
        const double* w = wide_[li].data() + static_cast<std::size_t>(r) * layer.cols;
        for (std::uint32_t c = 0; c < layer.cols; ++c) back[c] += w[c] * gr;
      }
      g = std::move(back);
    }
    return g;
  }

  std::vector<double> vjp(std::span<const double> z, std::span<const double> upstream) const {
    return vjp(forward_tape(z), upstream);
  }

 private:
  void check_latent(std::span<const double> z) const {
    if (z.size() != latent_dim()) {
      throw ShapeError("latent dimension " + std::to_string(z.size()) + " does not match generator input " +
                       std::to_string(latent_dim()));
    }
    for (double v : z) {
      if (!std::isfinite(v)) throw RangeError("latent vector has a non-finite entry");
    }
  }

  void validate() const {
    if (layers_.empty()) throw ShapeError("generator needs at least one layer");
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const auto& l = layers_[i];
      if (l.rows == 0 || l.cols == 0) throw ShapeError("layer " + std::to_string(i) + " has a zero dimension");
      if (l.weights.size() != static_cast<std::size_t>(l.rows) * l.cols || l.bias.size() != l.rows) {
        throw ShapeError("layer " + std::to_string(i) + " parameter count does not match its dimensions");
      }
      if (i > 0 && l.cols != layers_[i - 1].rows) {
        throw FormatError(FormatError::Kind::ChainViolation,
                          "layer " + std::to_string(i) + " expects " + std::to_string(l.cols) +
                              " inputs but layer " + std::to_string(i - 1) + " produces " +
                              std::to_string(layers_[i - 1].rows));
      }
    }
    if (output_shape_.channels != 1 && output_shape_.channels != 3) {
      throw ShapeError("generator output channels must be 1 or 3");
    }
    if (layers_.back().rows != output_shape_.size()) {
      throw FormatError(FormatError::Kind::ChainViolation,
                        "final layer produces " + std::to_string(layers_.back().rows) + " values but output shape " +
                            to_string(output_shape_) + " needs " + std::to_string(output_shape_.size()));
    }
  }

  std::vector<DenseLayer> layers_;
  Shape output_shape_{};
  // Weights widened once to double; stored values stay float.
  std::vector<std::vector<double>> wide_;
  std::vector<std::vector<double>> wide_bias_;
};

// ---------------------------------------------------------------------------
// Binary model format (little-endian):
//   "GDQM" 0x01 | u32 layer count | per layer: u32 rows, u32 cols, u8 activation,
//   f32 leaky slope, rows*cols f32 weights, rows f32 biases | u32 height, width, channels

namespace detail {

inline constexpr std::array<std::uint8_t, 5> kModelMagic{'G', 'D', 'Q', 'M', 0x01};

class ByteWriter {
 public:
  void u8(std::uint8_t v) { bytes_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  std::vector<std::uint8_t> take() { return std::move(bytes_); }

 private:
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  bool has(std::size_t n) const { return bytes_.size() - pos_ >= n; }
  std::size_t remaining() const { return bytes_.size() - pos_; }
  std::uint8_t u8() { return bytes_[pos_++]; }
  std::uint32_t u32() {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_++]) << (8 * i);
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<std::uint8_t> serialize_model(const GeneratorModel& model) {
  detail::ByteWriter w;
  for (auto b : detail::kModelMagic) w.u8(b);
  w.u32(static_cast<std::uint32_t>(model.layers().size()));
  for (const auto& l : model.layers()) {
    w.u32(l.rows);
    w.u32(l.cols);
    w.u8(static_cast<std::uint8_t>(l.activation));
    w.f32(l.leaky_slope);
    for (float v : l.weights) w.f32(v);
    for (float v : l.bias) w.f32(v);
  }
  const auto& s = model.output_shape();
  w.u32(static_cast<std::uint32_t>(s.height));
  w.u32(static_cast<std::uint32_t>(s.width));
  w.u32(static_cast<std::uint32_t>(s.channels));
  return w.take();
}

inline GeneratorModel deserialize_model(std::span<const std::uint8_t> bytes, const std::string& name = "<memory>") {
  using Kind = FormatError::Kind;
  detail::ByteReader r(bytes);
  if (!r.has(detail::kModelMagic.size())) throw FormatError(Kind::BadMagic, name + ": file too short for header");
  for (std::size_t i = 0; i < 4; ++i) {
    if (r.u8() != detail::kModelMagic[i]) throw FormatError(Kind::BadMagic, name + ": bad magic, expected GDQM");
  }
  if (const auto version = r.u8(); version != detail::kModelMagic[4]) {
    throw FormatError(Kind::Unsupported, name + ": unsupported model version " + std::to_string(version));
  }
  if (!r.has(4)) throw FormatError(Kind::Truncated, name + ": truncated before layer count");
  const std::uint32_t count = r.u32();
  if (count == 0) throw FormatError(Kind::Malformed, name + ": model has no layers");

  std::vector<DenseLayer> layers;
  for (std::uint32_t li = 0; li < count; ++li) {
    auto truncated = [&] {
      return FormatError(Kind::Truncated, name + ": truncated in layer " + std::to_string(li));
    };
    if (!r.has(13)) throw truncated();
    DenseLayer l;
    l.rows = r.u32();
    l.cols = r.u32();
    const auto act = r.u8();
    if (act > 2) {
      throw FormatError(Kind::Malformed, name + ": layer " + std::to_string(li) + " has unknown activation code " +
                                             std::to_string(act));
    }
    l.activation = static_cast<Activation>(act);
    l.leaky_slope = r.f32();
    if (l.rows == 0 || l.cols == 0) {
      throw FormatError(Kind::Malformed, name + ": layer " + std::to_string(li) + " has a zero dimension");
    }
    if (!layers.empty() && l.cols != layers.back().rows) {
      throw FormatError(Kind::ChainViolation, name + ": layer " + std::to_string(li) + " expects " +
                                                  std::to_string(l.cols) + " inputs but layer " +
                                                  std::to_string(li - 1) + " produces " +
                                                  std::to_string(layers.back().rows));
    }
    const std::uint64_t n = static_cast<std::uint64_t>(l.rows) * l.cols + l.rows;
    if (r.remaining() / 4 < n) throw truncated();
    l.weights.resize(static_cast<std::size_t>(l.rows) * l.cols);
    for (auto& v : l.weights) v = r.f32();
    l.bias.resize(l.rows);
    for (auto& v : l.bias) v = r.f32();
    layers.push_back(std::move(l));
  }
  if (!r.has(12)) throw FormatError(Kind::Truncated, name + ": truncated in output shape trailer");
  Shape shape;
  shape.height = r.u32();
  shape.width = r.u32();
  shape.channels = r.u32();
  if (r.remaining() != 0) {
    throw FormatError(Kind::Malformed, name + ": " + std::to_string(r.remaining()) + " trailing bytes");
  }
  if (layers.back().rows != shape.size()) {
    throw FormatError(Kind::ChainViolation, name + ": final layer produces " + std::to_string(layers.back().rows) +
                                                " values but output shape " + to_string(shape) + " needs " +
                                                std::to_string(shape.size()));
  }
  try {
    return GeneratorModel(std::move(layers), shape);
  } catch (const FormatError&) {
    throw;
  } catch (const Error& e) {
    throw FormatError(Kind::Malformed, name + ": " + e.what());
  }
}

inline void save_model(const GeneratorModel& model, const std::filesystem::path& path) {
  detail::write_file(path, serialize_model(model));
}

inline GeneratorModel load_model(const std::filesystem::path& path) {
  return deserialize_model(detail::read_file(path), path.string());
}

// ---------------------------------------------------------------------------
// Toy generators for desk-scale experiments and tests.

/// Single identity layer, no nonlinearity: G(z) = clamp(z) with d = H*W*C.
inline GeneratorModel make_identity_generator(Shape shape) {
  const auto d = static_cast<std::uint32_t>(shape.size());
  DenseLayer l;
  l.rows = d;
  l.cols = d;
  l.weights.assign(static_cast<std::size_t>(d) * d, 0.0f);
  for (std::uint32_t i = 0; i < d; ++i) l.weights[static_cast<std::size_t>(i) * d + i] = 1.0f;
  l.bias.assign(d, 0.0f);
  return GeneratorModel({std::move(l)}, shape);
}

namespace detail {

inline DenseLayer gaussian_layer(std::mt19937_64& rng, std::uint32_t rows, std::uint32_t cols, Activation act,
                                 double gain, double bias) {
  DenseLayer l;
  l.rows = rows;
  l.cols = cols;
  l.activation = act;
  l.weights.resize(static_cast<std::size_t>(rows) * cols);
  std::normal_distribution<double> normal(0.0, 1.0);
  const double scale = gain / std::sqrt(static_cast<double>(cols));
  for (auto& w : l.weights) w = static_cast<float>(scale * normal(rng));
  l.bias.assign(rows, static_cast<float>(bias));
  return l;
}

}  // namespace detail

/// G(z) = clamp(A z + 0.5) with A Gaussian, scaled by 1/sqrt(latent_dim).
inline GeneratorModel make_linear_generator(std::uint64_t seed, std::size_t latent_dim, Shape shape) {
  if (latent_dim == 0) throw RangeError("latent dimension must be positive");
  std::mt19937_64 rng(seed);
  auto layer = detail::gaussian_layer(rng, static_cast<std::uint32_t>(shape.size()),
                                      static_cast<std::uint32_t>(latent_dim), Activation::Linear, 1.0, 0.5);
  return GeneratorModel({std::move(layer)}, shape);
}

/// MLP with leaky-ReLU hidden layers and a sigmoid output.
///
/// `widths` lists the latent dimension followed by the hidden widths; the
/// output width H*W*C is appended. Hidden layers use He scaling; the output
/// layer scales by `output_gain`/sqrt(fan-in) so images use most of [0,1].
inline GeneratorModel make_mlp_generator(std::uint64_t seed, std::span<const std::size_t> widths, Shape shape,
                                         double output_gain = 3.0) {
  if (widths.empty()) throw RangeError("mlp widths must include the latent dimension");
  for (auto w : widths) {
    if (w == 0) throw RangeError("mlp widths must be positive");
  }
  if (shape.size() == 0) throw RangeError("mlp output shape must be non-empty");
  std::mt19937_64 rng(seed);
  std::vector<DenseLayer> layers;
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
    layers.push_back(detail::gaussian_layer(rng, static_cast<std::uint32_t>(widths[i + 1]),
                                            static_cast<std::uint32_t>(widths[i]), Activation::LeakyRelu,
                                            std::sqrt(2.0), 0.0));
  }
  layers.push_back(detail::gaussian_layer(rng, static_cast<std::uint32_t>(shape.size()),
                                          static_cast<std::uint32_t>(widths.back()), Activation::Sigmoid,
                                          output_gain, 0.0));
  return GeneratorModel(std::move(layers), shape);
}

/// Standard-normal latent sample.
inline std::vector<double> sample_latent(std::mt19937_64& rng, std::size_t dim) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> z(dim);
  for (auto& v : z) v = normal(rng);
  return z;
}

}  // namespace dequant
