#pragma once

// Central finite-difference validation of every analytic gradient: the three
// surrogates, their VJP contexts, the generator VJP and the full objective.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "dequant/generator.hpp"
#include "dequant/quantizers.hpp"
#include "dequant/restoration.hpp"
#include "dequant/surrogates.hpp"

namespace dequant {

struct GradcheckOptions {
  std::uint64_t seed = 7;
  int points = 100;
  double step = 1e-5;
  double tolerance = 1e-4;
  /// Perturbs one analytic gradient so callers can exercise the failure path.
  bool inject_fault = false;
};

struct CheckResult {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t comparisons = 0;

  bool passed(double tolerance) const { return max_rel_error < tolerance; }
};

/// |analytic - numeric| / (|numeric| + 1e-8)
inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / (std::abs(numeric) + 1e-8);
}

/// Central difference of f at x along coordinate i.
inline double central_difference(const std::function<double(std::span<const double>)>& f, std::vector<double> x,
                                  std::size_t i, double h) {
  const double x0 = x[i];
  x[i] = x0 + h;
  const double plus = f(x);
  x[i] = x0 - h;
  const double minus = f(x);
  return (plus - minus) / (2.0 * h);
}

namespace detail {

class CheckAccumulator {
 public:
  explicit CheckAccumulator(std::string name) { result_.name = std::move(name); }
  void add(double analytic, double numeric) {
    result_.max_rel_error = std::max(result_.max_rel_error, relative_error(analytic, numeric));
    ++result_.comparisons;
  }
  CheckResult take() { return std::move(result_); }

 private:
  CheckResult result_;
};

inline double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline double log_uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::exp(uniform(rng, std::log(lo), std::log(hi)));
}

inline PaletteQuantizer random_palette(std::mt19937_64& rng, int count) {
  std::vector<Color> colors(static_cast<std::size_t>(count));
  for (auto& c : colors) c = {uniform(rng, 0, 1), uniform(rng, 0, 1), uniform(rng, 0, 1)};
  return PaletteQuantizer(std::move(colors));
}

/// Smallest |pre-activation| of any non-linear hidden unit; FD across a
/// leaky-ReLU kink is meaningless, so points too close to one are redrawn.
inline double kink_margin(const GeneratorModel& g, std::span<const double> z) {
  const auto tape = g.forward_tape(z);
  double margin = std::numeric_limits<double>::infinity();
  for (std::size_t li = 0; li < g.layers().size(); ++li) {
    if (g.layers()[li].activation != Activation::LeakyRelu) continue;
    for (double v : tape.pre[li]) margin = std::min(margin, std::abs(v));
  }
  for (double v : tape.raw_output) margin = std::min({margin, std::abs(v), std::abs(v - 1.0)});
  return margin;
}

}  // namespace detail

// Surrogate checks sample the unsaturated band (logit gaps of at most ~8).
// Saturated partials fall below the roundoff floor of a 1e-5 central
// difference (about 1e-11) and are covered by the unit tests instead.

inline CheckResult check_soft_uniform(const GradcheckOptions& opt) {
  std::mt19937_64 rng(opt.seed + 1);
  detail::CheckAccumulator acc("soft_uniform d/dr, d/dkappa");
  const double fault = opt.inject_fault ? 1.01 : 1.0;
  for (int i = 0; i < opt.points; ++i) {
    const int m = std::uniform_int_distribution<int>(2, 6)(rng);
    const double kappa = std::log(m * m * detail::log_uniform(rng, 0.5, 8.0));
    const double r = detail::uniform(rng, 0.0, 1.0);
    const ScalarEval e = soft_uniform(r, m, std::exp(kappa));
    auto in_r = [&](std::span<const double> x) { return soft_uniform(x[0], m, std::exp(kappa)).value; };
    auto in_kappa = [&](std::span<const double> x) { return soft_uniform(r, m, std::exp(x[0])).value; };
    acc.add(e.d_input * fault, central_difference(in_r, {r}, 0, opt.step));
    acc.add(e.d_kappa, central_difference(in_kappa, {kappa}, 0, opt.step));
  }
  return acc.take();
}

inline CheckResult check_soft_palette(const GradcheckOptions& opt) {
  std::mt19937_64 rng(opt.seed + 2);
  detail::CheckAccumulator acc("soft_palette Jacobian, d/dkappa");
  for (int i = 0; i < opt.points; ++i) {
    const auto palette = detail::random_palette(rng, std::uniform_int_distribution<int>(2, 8)(rng));
    const double kappa = std::log(detail::log_uniform(rng, 1.0, 20.0));
    const std::vector<double> x{detail::uniform(rng, 0, 1), detail::uniform(rng, 0, 1), detail::uniform(rng, 0, 1)};
    const PaletteEval e = soft_palette(x, palette, std::exp(kappa));
    for (int a = 0; a < 3; ++a) {
      auto in_x = [&](std::span<const double> v) { return soft_palette(v, palette, std::exp(kappa)).value[a]; };
      for (std::size_t b = 0; b < 3; ++b) acc.add(e.jacobian[a][b], central_difference(in_x, x, b, opt.step));
      auto in_kappa = [&](std::span<const double> v) { return soft_palette(x, palette, std::exp(v[0])).value[a]; };
      acc.add(e.d_kappa[a], central_difference(in_kappa, {kappa}, 0, opt.step));
    }
  }
  return acc.take();
}

inline CheckResult check_soft_threshold(const GradcheckOptions& opt) {
  std::mt19937_64 rng(opt.seed + 3);
  detail::CheckAccumulator acc("soft_threshold d/dI, d/dkappa, d/ddelta_raw");
  for (int i = 0; i < opt.points; ++i) {
    const double k = detail::log_uniform(rng, 1.0, 50.0);
    const double kappa = std::log(k);
    const double delta = detail::uniform(rng, 0.1, 0.9);
    const double delta_raw = logit(delta);
    const double v = delta + detail::uniform(rng, -8.0, 8.0) / k;
    const ScalarEval e = soft_threshold(v, std::exp(kappa), logistic(delta_raw));
    auto in_v = [&](std::span<const double> x) { return soft_threshold(x[0], std::exp(kappa), logistic(delta_raw)).value; };
    auto in_kappa = [&](std::span<const double> x) { return soft_threshold(v, std::exp(x[0]), logistic(delta_raw)).value; };
    auto in_delta = [&](std::span<const double> x) { return soft_threshold(v, std::exp(kappa), logistic(x[0])).value; };
    acc.add(e.d_input, central_difference(in_v, {v}, 0, opt.step));
    acc.add(e.d_kappa, central_difference(in_kappa, {kappa}, 0, opt.step));
    acc.add(e.d_delta_raw, central_difference(in_delta, {delta_raw}, 0, opt.step));
  }
  return acc.take();
}

/// VJP of apply_surrogate contexts against FD of <u, T(x)> for every kind.
inline CheckResult check_surrogate_vjp(const GradcheckOptions& opt) {
  std::mt19937_64 rng(opt.seed + 4);
  detail::CheckAccumulator acc("surrogate context VJP");
  for (int i = 0; i < opt.points; ++i) {
    const int which = i % 4;
    SurrogateKind kind = IdentitySurrogate{};
    Shape shape{2, 2, 3};
    if (which == 0) kind = SoftUniform{std::uniform_int_distribution<int>(2, 5)(rng)};
    if (which == 1) kind = SoftPalette{detail::random_palette(rng, 4)};
    if (which == 2) {
      kind = SoftThreshold{};
      shape.channels = 1;
    }
    SurrogateParams params = SurrogateParams::with(detail::log_uniform(rng, 1.0, 8.0), detail::uniform(rng, 0.2, 0.8));
    std::vector<double> x(shape.size()), u(shape.size());
    for (auto& v : x) v = detail::uniform(rng, 0, 1);
    for (auto& v : u) v = detail::uniform(rng, -1, 1);

    SurrogateContext ctx;
    evaluate_surrogate(x, shape, kind, params, &ctx);
    const auto g = ctx.vjp(u);
    auto pairing = [&](std::span<const double> input, const SurrogateParams& p) {
      const auto t = evaluate_surrogate(input, shape, kind, p, nullptr);
      double s = 0.0;
      for (std::size_t j = 0; j < t.size(); ++j) s += u[j] * t[j];
      return s;
    };
    for (std::size_t j = 0; j < x.size(); ++j) {
      acc.add(g.d_input[j], central_difference([&](std::span<const double> v) { return pairing(v, params); }, x, j, opt.step));
    }
    auto in_kappa = [&](std::span<const double> v) {
      SurrogateParams p = params;
      p.kappa = v[0];
      return pairing(x, p);
    };
    auto in_delta = [&](std::span<const double> v) {
      SurrogateParams p = params;
      p.delta_raw = v[0];
      return pairing(x, p);
    };
    acc.add(g.d_kappa, central_difference(in_kappa, {params.kappa}, 0, opt.step));
    acc.add(g.d_delta_raw, central_difference(in_delta, {params.delta_raw}, 0, opt.step));
  }
  return acc.take();
}

/// Generator VJP against FD of <u, G(z)> on seeded toy MLPs and linear maps.
inline CheckResult check_generator_vjp(const GradcheckOptions& opt) {
  std::mt19937_64 rng(opt.seed + 5);
  detail::CheckAccumulator acc("generator VJP");
  const std::vector<std::size_t> widths{4, 12, 10};
  const Shape shape{3, 3, 3};
  const std::vector<GeneratorModel> models{
      make_mlp_generator(opt.seed + 11, widths, shape),
      make_mlp_generator(opt.seed + 12, std::vector<std::size_t>{3, 8}, Shape{2, 3, 1}),
      make_linear_generator(opt.seed + 13, 4, shape),
  };
  for (int i = 0; i < opt.points; ++i) {
    const auto& g = models[static_cast<std::size_t>(i) % models.size()];
    std::vector<double> z;
    do {
      z = sample_latent(rng, g.latent_dim());
      for (auto& v : z) v *= 0.5;
    } while (detail::kink_margin(g, z) < 1e-3);
    std::vector<double> u(g.output_size());
    for (auto& v : u) v = detail::uniform(rng, -1, 1);
    const auto grad = g.vjp(z, u);
    auto pairing = [&](std::span<const double> v) {
      const auto out = g.forward(v);
      double s = 0.0;
      for (std::size_t j = 0; j < u.size(); ++j) s += u[j] * out[j];
      return s;
    };
    for (std::size_t j = 0; j < z.size(); ++j) acc.add(grad[j], central_difference(pairing, z, j, opt.step));
  }
  return acc.take();
}

/// Total-objective gradients in z, kappa and delta_raw for every variant.
inline CheckResult check_objective(const GradcheckOptions& opt) {
  std::mt19937_64 rng(opt.seed + 6);
  detail::CheckAccumulator acc("objective gradient (z, kappa, delta_raw)");
  const Shape rgb{4, 4, 3};
  const auto gen_rgb = std::make_shared<const GeneratorModel>(make_mlp_generator(opt.seed + 21, std::vector<std::size_t>{3, 10}, rgb));
  const auto gen_gray = std::make_shared<const GeneratorModel>(make_mlp_generator(opt.seed + 22, std::vector<std::size_t>{2, 8}, Shape{3, 3, 1}));

  for (int i = 0; i < opt.points; ++i) {
    const int which = i % 5;
    std::mt19937_64 local(rng());
    std::shared_ptr<const GeneratorModel> gen = which == 4 ? gen_gray : gen_rgb;
    const auto truth = gen->forward(sample_latent(local, gen->latent_dim()));
    ObjectiveSpec spec;
    SurrogateParams init = SurrogateParams::with(detail::log_uniform(local, 2.0, 20.0), detail::uniform(local, 0.3, 0.7));
    init.train_delta = true;
    switch (which) {
      case 0: {
        const int m = std::uniform_int_distribution<int>(2, 4)(local);
        spec = make_objective(Variant::Full, SoftUniform{m}, gen, quantize_uniform(truth, UniformQuantizer(m)), init);
        break;
      }
      case 1: {
        const auto palette = detail::random_palette(local, 5);
        spec = make_objective(Variant::Full, SoftPalette{palette}, gen, quantize_palette(truth, palette), init);
        break;
      }
      case 2:
        spec = make_objective(Variant::Full, SoftThreshold{}, gen,
                              quantize_threshold(rgb_to_intensity(truth), ThresholdQuantizer(0.45)), init);
        break;
      case 3:
        spec = make_objective(Variant::Identity, IdentitySurrogate{}, gen, quantize_uniform(truth, UniformQuantizer(3)), init);
        break;
      default:
        spec = make_objective(Variant::Full, SoftUniform{3}, gen, quantize_uniform(truth, UniformQuantizer(3)), init);
        break;
    }

    std::vector<double> z;
    do {
      z = sample_latent(local, gen->latent_dim());
    } while (detail::kink_margin(*gen, z) < 1e-3);
    const SurrogateParams params = spec.initial;
    const auto ev = loss_and_grads(spec, z, params);

    auto in_z = [&](std::span<const double> v) { return loss_and_grads(spec, v, params).loss.total; };
    for (std::size_t j = 0; j < z.size(); ++j) acc.add(ev.grad_z[j], central_difference(in_z, z, j, opt.step));
    if (params.train_k && uses_k(spec.surrogate)) {
      auto in_kappa = [&](std::span<const double> v) {
        SurrogateParams p = params;
        p.kappa = v[0];
        return loss_and_grads(spec, z, p).loss.total;
      };
      acc.add(ev.grad_kappa, central_difference(in_kappa, {params.kappa}, 0, opt.step));
    }
    if (params.train_delta) {
      auto in_delta = [&](std::span<const double> v) {
        SurrogateParams p = params;
        p.delta_raw = v[0];
        return loss_and_grads(spec, z, p).loss.total;
      };
      acc.add(ev.grad_delta_raw, central_difference(in_delta, {params.delta_raw}, 0, opt.step));
    }
  }
  return acc.take();
}

/// Runs every check; results are reported in a fixed order.
inline std::vector<CheckResult> run_gradcheck(const GradcheckOptions& opt = {}) {
  return {check_soft_uniform(opt),  check_soft_palette(opt),  check_soft_threshold(opt),
          check_surrogate_vjp(opt), check_generator_vjp(opt), check_objective(opt)};
}

}  // namespace dequant
