#pragma once

// Differentiable stand-ins for the hard quantizers.
//
// Sharpness k and threshold delta are carried through unconstrained raw
// values: k = exp(kappa), delta = logistic(delta_raw). Every partial reported
// here is with respect to the input and to those raw values.

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "dequant/error.hpp"
#include "dequant/image.hpp"
#include "dequant/quantizers.hpp"

namespace dequant {

inline double logistic(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double logit(double p) { return std::log(p / (1.0 - p)); }

/// Surrogate parameters in raw (unconstrained) form plus trainable flags.
struct SurrogateParams {
  static constexpr double kInitialK = 10.0;
  static constexpr double kInitialDelta = 0.5;

  double kappa = std::log(kInitialK);
  double delta_raw = 0.0;  // logit(0.5)
  bool train_k = true;
  bool train_delta = false;

  double k() const { return std::exp(kappa); }
  double delta() const { return logistic(delta_raw); }

  static SurrogateParams with(double k, double delta = kInitialDelta) {
    if (!(k > 0.0)) throw RangeError("sharpness k must be positive");
    if (!(delta > 0.0 && delta < 1.0)) throw RangeError("threshold delta must lie in (0,1)");
    SurrogateParams p;
    p.kappa = std::log(k);
    p.delta_raw = logit(delta);
    return p;
  }
};

struct SoftUniform {
  int levels;
};
struct SoftPalette {
  PaletteQuantizer palette;
};
struct SoftThreshold {};
struct IdentitySurrogate {};

using SurrogateKind = std::variant<SoftUniform, SoftPalette, SoftThreshold, IdentitySurrogate>;

inline std::string surrogate_name(const SurrogateKind& kind) {
  return std::visit(
      [](const auto& s) -> std::string {
        using T = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<T, SoftUniform>) return "soft-uniform";
        if constexpr (std::is_same_v<T, SoftPalette>) return "soft-palette";
        if constexpr (std::is_same_v<T, SoftThreshold>) return "soft-threshold";
        return "identity";
      },
      kind);
}

inline bool uses_k(const SurrogateKind& kind) { return !std::holds_alternative<IdentitySurrogate>(kind); }
inline bool uses_delta(const SurrogateKind& kind) { return std::holds_alternative<SoftThreshold>(kind); }

/// Scalar surrogate value with partials in the input and raw parameters.
struct ScalarEval {
  double value = 0.0;
  double d_input = 0.0;
  double d_kappa = 0.0;
  double d_delta_raw = 0.0;
};

/// Softmax over levels centered at (i - 0.5)/m with logits -k (r - c_i)^2.
///
/// value = E_w[c]; d/dr = 2k Var_w[c]; d/dkappa = k Cov_w[c, -(r - c)^2].
inline ScalarEval soft_uniform(double r, int levels, double k) {
  if (levels < 1) throw RangeError("soft_uniform needs m >= 1");
  if (levels == 1) return {0.5, 0.0, 0.0, 0.0};

  // Small fixed buffers cover every practical m; fall back to the heap otherwise.
  constexpr int kStack = 64;
  std::array<double, kStack> wbuf{}, cbuf{}, sbuf{};
  std::vector<double> wheap, cheap, sheap;
  double *w = wbuf.data(), *c = cbuf.data(), *sq = sbuf.data();
  if (levels > kStack) {
    wheap.resize(levels);
    cheap.resize(levels);
    sheap.resize(levels);
    w = wheap.data();
    c = cheap.data();
    sq = sheap.data();
  }

  double max_logit = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < levels; ++i) {
    c[i] = (i + 0.5) / levels;
    sq[i] = (r - c[i]) * (r - c[i]);
    max_logit = std::max(max_logit, -k * sq[i]);
  }
  double total = 0.0;
  for (int i = 0; i < levels; ++i) {
    w[i] = std::exp(-k * sq[i] - max_logit);
    total += w[i];
  }
  double mean_c = 0.0;
  double mean_sq = 0.0;
  for (int i = 0; i < levels; ++i) {
    w[i] /= total;
    mean_c += w[i] * c[i];
    mean_sq += w[i] * sq[i];
  }
  double var_c = 0.0;
  double cov_c_sq = 0.0;
  for (int i = 0; i < levels; ++i) {
    const double dc = c[i] - mean_c;
    var_c += w[i] * dc * dc;
    cov_c_sq += w[i] * dc * (sq[i] - mean_sq);
  }
  return {mean_c, 2.0 * k * var_c, -k * cov_c_sq, 0.0};
}

/// Palette surrogate value with its input Jacobian and kappa partial.
struct PaletteEval {
  Color value{};
  std::array<Color, 3> jacobian{};  // jacobian[a][b] = d value_a / d x_b
  Color d_kappa{};
};

/// Softmax over palette colors with logits -k ||x - q_i||^2.
///
/// J = 2k Cov_w[q, q]; d/dkappa = k Cov_w[q, -||x - q||^2].
inline PaletteEval soft_palette(std::span<const double> x, const PaletteQuantizer& palette, double k) {
  const auto& q = palette.colors();
  const std::size_t count = q.size();
  std::vector<double> w(count);
  std::vector<double> sq(count);
  double max_logit = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < count; ++i) {
    sq[i] = squared_distance(x, q[i]);
    max_logit = std::max(max_logit, -k * sq[i]);
  }
  double total = 0.0;
  for (std::size_t i = 0; i < count; ++i) {
    w[i] = std::exp(-k * sq[i] - max_logit);
    total += w[i];
  }
  PaletteEval out;
  double mean_sq = 0.0;
  for (std::size_t i = 0; i < count; ++i) {
    w[i] /= total;
    mean_sq += w[i] * sq[i];
    for (int a = 0; a < 3; ++a) out.value[a] += w[i] * q[i][a];
  }
  for (std::size_t i = 0; i < count; ++i) {
    const Color dq{q[i][0] - out.value[0], q[i][1] - out.value[1], q[i][2] - out.value[2]};
    const double dsq = sq[i] - mean_sq;
    for (int a = 0; a < 3; ++a) {
      for (int b = 0; b < 3; ++b) out.jacobian[a][b] += w[i] * dq[a] * dq[b];
      out.d_kappa[a] += w[i] * dq[a] * dsq;
    }
  }
  for (int a = 0; a < 3; ++a) {
    for (int b = 0; b < 3; ++b) out.jacobian[a][b] *= 2.0 * k;
    out.d_kappa[a] *= -k;
  }
  return out;
}

/// Sigmoid 1 / (1 + exp(-k (I - delta))) with partials in I, kappa and delta_raw.
inline ScalarEval soft_threshold(double intensity, double k, double delta) {
  const double t = k * (intensity - delta);
  const double s = logistic(t);
  // s (1 - s) computed from exp(-|t|) so it does not cancel for large |t|.
  const double e = std::exp(-std::abs(t));
  const double slope = e / ((1.0 + e) * (1.0 + e));
  const double d_delta = -k * slope;
  return {s, k * slope, t * slope, d_delta * delta * (1.0 - delta)};
}

/// Element- or pixel-wise partials captured by apply_surrogate for later VJPs.
class SurrogateContext {
 public:
  /// Gradient of <upstream, T(x)> with respect to x, kappa and delta_raw.
  struct Grad {
    std::vector<double> d_input;
    double d_kappa = 0.0;
    double d_delta_raw = 0.0;
  };

  SurrogateContext() = default;

  const Shape& shape() const noexcept { return shape_; }

  Grad vjp(std::span<const double> upstream) const {
    if (upstream.size() != shape_.size()) {
      throw ShapeError("surrogate vjp: cotangent length " + std::to_string(upstream.size()) +
                       " does not match " + to_string(shape_));
    }
    Grad g;
    g.d_input.resize(upstream.size());
    switch (mode_) {
      case Mode::Identity:
        std::copy(upstream.begin(), upstream.end(), g.d_input.begin());
        break;
      case Mode::Scalar:
        for (std::size_t i = 0; i < upstream.size(); ++i) {
          g.d_input[i] = upstream[i] * d_input_[i];
          g.d_kappa += upstream[i] * d_kappa_[i];
          g.d_delta_raw += upstream[i] * d_delta_[i];
        }
        break;
      case Mode::Palette:
        for (std::size_t p = 0; p < shape_.pixels(); ++p) {
          const auto& jac = jacobians_[p];
          for (int b = 0; b < 3; ++b) {
            double acc = 0.0;
            for (int a = 0; a < 3; ++a) acc += upstream[3 * p + a] * jac[a][b];
            g.d_input[3 * p + b] = acc;
          }
          for (int a = 0; a < 3; ++a) g.d_kappa += upstream[3 * p + a] * d_kappa_[3 * p + a];
        }
        break;
    }
    return g;
  }

 private:
  enum class Mode { Identity, Scalar, Palette };

  friend std::vector<double> evaluate_surrogate(std::span<const double>, const Shape&, const SurrogateKind&,
                                                const SurrogateParams&, SurrogateContext*);

  Shape shape_{};
  Mode mode_ = Mode::Identity;
  std::vector<double> d_input_;
  std::vector<double> d_kappa_;
  std::vector<double> d_delta_;
  std::vector<std::array<Color, 3>> jacobians_;
};

inline void check_surrogate_channels(const SurrogateKind& kind, std::size_t channels) {
  if (std::holds_alternative<SoftPalette>(kind) && channels != 3) {
    throw ShapeError("soft-palette surrogate needs 3 channels, got " + std::to_string(channels));
  }
  if (std::holds_alternative<SoftThreshold>(kind) && channels != 1) {
    throw ShapeError("soft-threshold surrogate needs 1 channel, got " + std::to_string(channels));
  }
}

/// Applies the surrogate to raw values laid out as `shape`. When `ctx` is
/// non-null it receives the partials needed for SurrogateContext::vjp.
inline std::vector<double> evaluate_surrogate(std::span<const double> input, const Shape& shape,
                                              const SurrogateKind& kind, const SurrogateParams& params,
                                              SurrogateContext* ctx) {
  if (input.size() != shape.size()) throw ShapeError("surrogate input length does not match shape");
  check_surrogate_channels(kind, shape.channels);
  const double k = params.k();
  const double delta = params.delta();
  if (!(k > 0.0) || !std::isfinite(k)) throw RangeError("surrogate sharpness k must be positive and finite");

  std::vector<double> out(input.size());
  if (ctx) {
    *ctx = SurrogateContext{};
    ctx->shape_ = shape;
  }

  auto scalar = [&](auto&& fn) {
    if (ctx) {
      ctx->mode_ = SurrogateContext::Mode::Scalar;
      ctx->d_input_.resize(input.size());
      ctx->d_kappa_.resize(input.size());
      ctx->d_delta_.resize(input.size());
    }
    for (std::size_t i = 0; i < input.size(); ++i) {
      const ScalarEval e = fn(input[i]);
      out[i] = e.value;
      if (ctx) {
        ctx->d_input_[i] = e.d_input;
        ctx->d_kappa_[i] = e.d_kappa;
        ctx->d_delta_[i] = e.d_delta_raw;
      }
    }
  };

  std::visit(
      [&](const auto& s) {
        using T = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<T, SoftUniform>) {
          scalar([&](double r) { return soft_uniform(r, s.levels, k); });
        } else if constexpr (std::is_same_v<T, SoftThreshold>) {
          scalar([&](double v) { return soft_threshold(v, k, delta); });
        } else if constexpr (std::is_same_v<T, SoftPalette>) {
          if (ctx) {
            ctx->mode_ = SurrogateContext::Mode::Palette;
            ctx->jacobians_.resize(shape.pixels());
            ctx->d_kappa_.resize(input.size());
          }
          for (std::size_t p = 0; p < shape.pixels(); ++p) {
            const PaletteEval e = soft_palette(input.subspan(3 * p, 3), s.palette, k);
            for (int a = 0; a < 3; ++a) {
              out[3 * p + a] = e.value[a];
              if (ctx) ctx->d_kappa_[3 * p + a] = e.d_kappa[a];
            }
            if (ctx) ctx->jacobians_[p] = e.jacobian;
          }
        } else {
          std::copy(input.begin(), input.end(), out.begin());
        }
      },
      kind);
  return out;
}

struct SurrogateResult {
  ImageTensor output;
  SurrogateContext context;
};

/// Applies the surrogate to an image or intensity tensor and captures a VJP context.
inline SurrogateResult apply_surrogate(const ImageTensor& input, const SurrogateKind& kind,
                                       const SurrogateParams& params) {
  SurrogateResult r;
  auto values = evaluate_surrogate(input.data(), input.shape(), kind, params, &r.context);
  // Softmax averages may overshoot the hull by an ulp.
  r.output = ImageTensor::clamped(input.shape(), std::move(values));
  return r;
}

/// Writes "r,value" samples of the soft uniform quantizer on an even grid of
/// `samples` points in [0,1], one column per sharpness value.
inline void write_soft_uniform_curves(const std::filesystem::path& path, int levels,
                                      std::span<const double> sharpness, int samples = 1001) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.precision(10);
  out << "r,hard";
  for (double k : sharpness) out << ",k=" << k;
  out << '\n';
  const UniformQuantizer hard(levels);
  for (int i = 0; i < samples; ++i) {
    const double r = samples == 1 ? 0.0 : static_cast<double>(i) / (samples - 1);
    out << r << ',' << hard(r);
    for (double k : sharpness) out << ',' << soft_uniform(r, levels, k).value;
    out << '\n';
  }
}

}  // namespace dequant
