#pragma once

// MAP restoration over the generator latent:
//
//   minimize  N log(max(S, eps)) + ||z||^2,   S = ||Y - T(G(z), alpha)||^2
//
// jointly in z and the surrogate parameters alpha = (k, delta) by momentum
// descent on per-block normalized gradients. The noise variance is eliminated
// analytically; its maximizer S/N is reported in the trace.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <memory>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "dequant/error.hpp"
#include "dequant/generator.hpp"
#include "dequant/image.hpp"
#include "dequant/parallel.hpp"
#include "dequant/surrogates.hpp"

namespace dequant {

enum class Variant { Full, Identity };

inline std::string variant_name(Variant v) { return v == Variant::Full ? "full" : "identity"; }

inline Variant parse_variant(const std::string& s) {
  if (s == "full") return Variant::Full;
  if (s == "identity") return Variant::Identity;
  throw RangeError("unknown variant '" + s + "' (expected full or identity)");
}

/// Everything that defines one restoration problem.
struct ObjectiveSpec {
  Variant variant = Variant::Full;
  SurrogateKind surrogate = IdentitySurrogate{};
  SurrogateParams initial{};  // starting values and trainable flags
  std::shared_ptr<const GeneratorModel> generator;
  ImageTensor observation;
  /// RGB-to-intensity projection applied to G(z) before the surrogate; set when
  /// the generator is RGB and the observation is an intensity image.
  std::optional<GrayscaleCoefficients> intensity;

  /// N, the observation dimension.
  std::size_t dimension() const noexcept { return observation.size(); }

  /// Shape of the tensor the surrogate acts on.
  Shape transformed_shape() const {
    Shape s = generator->output_shape();
    if (intensity) s.channels = 1;
    return s;
  }

  void validate() const {
    if (!generator) throw ShapeError("objective has no generator");
    if (observation.empty()) throw ShapeError("objective has no observation");
    const Shape& g = generator->output_shape();
    if (intensity && g.channels != 3) throw ShapeError("intensity projection needs an RGB generator");
    if (transformed_shape() != observation.shape()) {
      throw ShapeError("generator output " + to_string(g) + (intensity ? " (projected to intensity)" : "") +
                       " does not match observation " + to_string(observation.shape()));
    }
    if (variant == Variant::Identity && !std::holds_alternative<IdentitySurrogate>(surrogate)) {
      throw RangeError("identity variant requires the identity surrogate");
    }
    check_surrogate_channels(surrogate, observation.channels());
    if (intensity) intensity->validate();
  }
};

/// Builds a validated objective. The identity variant replaces the surrogate
/// with the identity and freezes k and delta. An RGB generator paired with an
/// intensity observation gets the default grayscale projection.
inline ObjectiveSpec make_objective(Variant variant, SurrogateKind surrogate,
                                    std::shared_ptr<const GeneratorModel> generator, ImageTensor observation,
                                    SurrogateParams initial = {}) {
  ObjectiveSpec spec;
  spec.variant = variant;
  spec.generator = std::move(generator);
  spec.observation = std::move(observation);
  spec.initial = initial;
  if (variant == Variant::Identity) {
    spec.surrogate = IdentitySurrogate{};
    spec.initial.train_k = false;
    spec.initial.train_delta = false;
  } else {
    spec.surrogate = std::move(surrogate);
    if (!uses_k(spec.surrogate)) spec.initial.train_k = false;
    if (!uses_delta(spec.surrogate)) spec.initial.train_delta = false;
  }
  if (spec.generator && spec.generator->output_shape().channels == 3 && spec.observation.channels() == 1) {
    spec.intensity = GrayscaleCoefficients{};
  }
  spec.validate();
  return spec;
}

struct TracePoint {
  long iteration = 0;
  double loss = 0.0;
  double residual = 0.0;  // S
  double znorm2 = 0.0;
  double k = 0.0;
  double delta = 0.0;
  double beta2 = 0.0;  // S / N
};

struct RunTrace {
  long stride = 1;
  bool has_k = false;
  bool has_delta = false;
  /// delta is trainable but the observation carries no information about it
  /// (every element equal), so its estimate is unconstrained.
  bool delta_unconstrained = false;
  std::vector<TracePoint> points;
};

struct LossValue {
  double total = 0.0;
  double data = 0.0;   // N log(max(S, eps))
  double prior = 0.0;  // ||z||^2
};

struct ObjectiveEval {
  LossValue loss;
  double residual = 0.0;  // S
  std::vector<double> grad_z;
  double grad_kappa = 0.0;
  double grad_delta_raw = 0.0;
};

/// Loss became NaN or infinite; carries the iteration, the state at failure
/// and, when raised from a restoration run, the trace recorded up to it.
class NonFiniteLossError : public Error {
 public:
  NonFiniteLossError(const std::string& what, long iteration, std::vector<double> z, SurrogateParams params)
      : Error(what), iteration_(iteration), z_(std::move(z)), params_(params) {}

  long iteration() const noexcept { return iteration_; }
  const std::vector<double>& z() const noexcept { return z_; }
  const SurrogateParams& params() const noexcept { return params_; }
  const RunTrace& trace() const noexcept { return trace_; }
  void set_trace(RunTrace trace) { trace_ = std::move(trace); }

 private:
  long iteration_;
  std::vector<double> z_;
  SurrogateParams params_;
  RunTrace trace_;
};

inline constexpr double kDefaultResidualFloor = 1e-12;

/// Objective value and gradients in z, kappa and delta_raw. Parameter
/// gradients are zero when the corresponding trainable flag is off.
inline ObjectiveEval loss_and_grads(const ObjectiveSpec& spec, std::span<const double> z,
                                    const SurrogateParams& params, double residual_floor = kDefaultResidualFloor,
                                    long iteration = -1) {
  const GeneratorModel& gen = *spec.generator;
  const ForwardTape tape = gen.forward_tape(z);
  const Shape tshape = spec.transformed_shape();

  std::vector<double> projected;
  std::span<const double> surrogate_in = tape.output;
  if (spec.intensity) {
    const auto& a = *spec.intensity;
    projected.resize(tshape.size());
    for (std::size_t p = 0; p < projected.size(); ++p) {
      projected[p] = a.red * tape.output[3 * p] + a.green * tape.output[3 * p + 1] + a.blue * tape.output[3 * p + 2];
    }
    surrogate_in = projected;
  }

  SurrogateContext ctx;
  const auto transformed = evaluate_surrogate(surrogate_in, tshape, spec.surrogate, params, &ctx);

  const auto y = spec.observation.data();
  const double n = static_cast<double>(spec.dimension());
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double d = y[i] - transformed[i];
    s += d * d;
  }
  double znorm2 = 0.0;
  for (double v : z) znorm2 += v * v;

  ObjectiveEval out;
  out.residual = s;
  out.loss.data = n * std::log(std::max(s, residual_floor));
  out.loss.prior = znorm2;
  out.loss.total = out.loss.data + out.loss.prior;
  if (!std::isfinite(out.loss.total)) {
    std::ostringstream os;
    os << "non-finite loss " << out.loss.total << " (S=" << s << ", ||z||^2=" << znorm2 << ", k=" << params.k()
       << ", delta=" << params.delta() << ")";
    if (iteration >= 0) os << " at iteration " << iteration;
    throw NonFiniteLossError(os.str(), iteration, std::vector<double>(z.begin(), z.end()), params);
  }

  // d/dT of N log S is -2 (N/S) (Y - T); zero while the floor is active.
  std::vector<double> upstream(y.size(), 0.0);
  if (s > residual_floor) {
    const double scale = -2.0 * n / s;
    for (std::size_t i = 0; i < y.size(); ++i) upstream[i] = scale * (y[i] - transformed[i]);
  }
  auto sg = ctx.vjp(upstream);

  std::vector<double> gx;
  if (spec.intensity) {
    const auto& a = *spec.intensity;
    gx.resize(tape.output.size());
    for (std::size_t p = 0; p < sg.d_input.size(); ++p) {
      gx[3 * p] = a.red * sg.d_input[p];
      gx[3 * p + 1] = a.green * sg.d_input[p];
      gx[3 * p + 2] = a.blue * sg.d_input[p];
    }
  } else {
    gx = std::move(sg.d_input);
  }
  out.grad_z = gen.vjp(tape, gx);
  for (std::size_t i = 0; i < z.size(); ++i) out.grad_z[i] += 2.0 * z[i];
  out.grad_kappa = params.train_k && uses_k(spec.surrogate) ? sg.d_kappa : 0.0;
  out.grad_delta_raw = params.train_delta && uses_delta(spec.surrogate) ? sg.d_delta_raw : 0.0;
  return out;
}

inline constexpr long kDeskIterations = 20000;
inline constexpr long kLongIterations = 200000;

struct OptimizerConfig {
  double learning_rate = 0.1;
  double momentum = 0.999;
  long iterations = kDeskIterations;
  std::uint64_t seed = 0;
  int restarts = 1;
  double residual_floor = kDefaultResidualFloor;
  long trace_stride = 100;
  // Box for the raw surrogate parameters after each step.
  double kappa_min = std::log(1e-2);
  double kappa_max = std::log(1e6);
  double delta_raw_limit = 12.0;

  void validate() const {
    if (!(learning_rate > 0.0)) throw RangeError("learning rate must be positive");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw RangeError("momentum must lie in [0,1)");
    if (iterations < 1) throw RangeError("iterations must be positive");
    if (restarts < 1) throw RangeError("restarts must be positive");
    if (trace_stride < 1) throw RangeError("trace stride must be positive");
    if (!(residual_floor > 0.0)) throw RangeError("residual floor must be positive");
    if (!(kappa_min < kappa_max)) throw RangeError("kappa bounds are empty");
  }
};

/// Iterate and velocities for each parameter block.
struct OptimizerState {
  std::vector<double> z;
  double kappa = 0.0;
  double delta_raw = 0.0;
  std::vector<double> velocity_z;
  double velocity_kappa = 0.0;
  double velocity_delta_raw = 0.0;

  OptimizerState() = default;
  OptimizerState(std::vector<double> z0, const SurrogateParams& p)
      : z(std::move(z0)), kappa(p.kappa), delta_raw(p.delta_raw), velocity_z(z.size(), 0.0) {}

  SurrogateParams params(const SurrogateParams& flags) const {
    SurrogateParams p = flags;
    p.kappa = kappa;
    p.delta_raw = delta_raw;
    return p;
  }
};

struct Gradients {
  std::vector<double> z;
  double kappa = 0.0;
  double delta_raw = 0.0;
};

namespace detail {

inline constexpr double kNormFloor = 1e-12;

inline void momentum_update(std::span<double> theta, std::span<double> velocity, std::span<const double> grad,
                            double lr, double mu) {
  double norm2 = 0.0;
  for (double g : grad) norm2 += g * g;
  const double inv = 1.0 / std::max(std::sqrt(norm2), kNormFloor);
  for (std::size_t i = 0; i < theta.size(); ++i) {
    velocity[i] = mu * velocity[i] + grad[i] * inv;
    theta[i] -= lr * velocity[i];
  }
}

}  // namespace detail

/// One momentum step on per-block L2-normalized gradients:
/// v_b <- mu v_b + g_b / max(||g_b||, 1e-12);  theta_b <- theta_b - lr v_b.
/// kappa and delta_raw are then projected into the configured box.
inline void step(OptimizerState& state, const Gradients& grads, const OptimizerConfig& config) {
  if (grads.z.size() != state.z.size() || state.velocity_z.size() != state.z.size()) {
    throw ShapeError("optimizer state and gradient sizes differ");
  }
  const double lr = config.learning_rate;
  const double mu = config.momentum;
  detail::momentum_update(state.z, state.velocity_z, grads.z, lr, mu);
  detail::momentum_update(std::span<double>(&state.kappa, 1), std::span<double>(&state.velocity_kappa, 1),
                          std::span<const double>(&grads.kappa, 1), lr, mu);
  detail::momentum_update(std::span<double>(&state.delta_raw, 1), std::span<double>(&state.velocity_delta_raw, 1),
                          std::span<const double>(&grads.delta_raw, 1), lr, mu);
  state.kappa = std::clamp(state.kappa, config.kappa_min, config.kappa_max);
  state.delta_raw = std::clamp(state.delta_raw, -config.delta_raw_limit, config.delta_raw_limit);
}

struct RestoreResult {
  std::vector<double> z;
  SurrogateParams params;
  ImageTensor image;  // G(z)
  LossValue loss;     // at the returned z
  double residual = 0.0;
  RunTrace trace;
  int restart = 0;

  double k() const { return params.k(); }
  double delta() const { return params.delta(); }
};

/// Restart r derives its own stream from the base seed.
inline std::uint64_t restart_seed(std::uint64_t seed, int restart) {
  return seed + 0x9E3779B97F4A7C15ull * static_cast<std::uint64_t>(restart);
}

inline bool observation_is_constant(const ImageTensor& y) {
  const auto d = y.data();
  return std::all_of(d.begin(), d.end(), [&](double v) { return v == d[0]; });
}

/// Single descent run from z0 ~ N(0, I) drawn with `seed`.
inline RestoreResult restore_once(const ObjectiveSpec& spec, const OptimizerConfig& config, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  OptimizerState state(sample_latent(rng, spec.generator->latent_dim()), spec.initial);
  const SurrogateParams& flags = spec.initial;
  const double n = static_cast<double>(spec.dimension());

  RestoreResult result;
  result.trace.stride = config.trace_stride;
  result.trace.has_k = uses_k(spec.surrogate);
  result.trace.has_delta = uses_delta(spec.surrogate);
  result.trace.delta_unconstrained = flags.train_delta && uses_delta(spec.surrogate) &&
                                     observation_is_constant(spec.observation);
  result.trace.points.reserve(static_cast<std::size_t>((config.iterations + config.trace_stride - 1) /
                                                       config.trace_stride));

  // The returned iterate is the lowest-loss point visited, including the final one.
  std::vector<double> best_z = state.z;
  SurrogateParams best_params = state.params(flags);
  double best_loss = std::numeric_limits<double>::infinity();

  Gradients grads;
  for (long it = 0; it < config.iterations; ++it) {
    const SurrogateParams p = state.params(flags);
    ObjectiveEval ev;
    try {
      ev = loss_and_grads(spec, state.z, p, config.residual_floor, it);
    } catch (NonFiniteLossError& e) {
      e.set_trace(std::move(result.trace));
      throw;
    }
    if (it % config.trace_stride == 0) {
      double zn = 0.0;
      for (double v : state.z) zn += v * v;
      result.trace.points.push_back({it, ev.loss.total, ev.residual, zn, p.k(), p.delta(), ev.residual / n});
    }
    if (ev.loss.total < best_loss) {
      best_loss = ev.loss.total;
      best_z = state.z;
      best_params = p;
    }
    grads.z = std::move(ev.grad_z);
    grads.kappa = ev.grad_kappa;
    grads.delta_raw = ev.grad_delta_raw;
    step(state, grads, config);
  }

  const SurrogateParams last_params = state.params(flags);
  const ObjectiveEval last = loss_and_grads(spec, state.z, last_params, config.residual_floor, config.iterations);
  if (last.loss.total < best_loss) {
    best_z = state.z;
    best_params = last_params;
  }
  const ObjectiveEval final_eval = loss_and_grads(spec, best_z, best_params, config.residual_floor);
  result.params = best_params;
  result.loss = final_eval.loss;
  result.residual = final_eval.residual;
  result.image = spec.generator->forward(best_z);
  result.z = std::move(best_z);
  return result;
}

/// Runs `restarts` seeded descents and keeps the lowest final total loss.
inline RestoreResult restore(const ObjectiveSpec& spec, const OptimizerConfig& config) {
  spec.validate();
  config.validate();
  std::optional<RestoreResult> best;
  for (int r = 0; r < config.restarts; ++r) {
    RestoreResult run = restore_once(spec, config, restart_seed(config.seed, r));
    run.restart = r;
    if (!best || run.loss.total < best->loss.total) best = std::move(run);
  }
  return std::move(*best);
}

/// Restoration of a binarized intensity observation with k and delta both estimated.
inline RestoreResult restore_with_unknown_threshold(const ObjectiveSpec& spec, const OptimizerConfig& config) {
  if (!std::holds_alternative<SoftThreshold>(spec.surrogate)) {
    throw RangeError("unknown-threshold restoration needs the soft-threshold surrogate");
  }
  if (!spec.initial.train_k || !spec.initial.train_delta) {
    throw RangeError("unknown-threshold restoration needs k and delta trainable");
  }
  return restore(spec, config);
}

/// Outcome of one run in a batch: a result or the error that stopped it.
struct BatchOutcome {
  std::optional<RestoreResult> result;
  std::string error;
};

/// Independent restorations on a bounded worker pool (0 = available parallelism).
inline std::vector<BatchOutcome> restore_batch(std::span<const ObjectiveSpec> specs,
                                               std::span<const OptimizerConfig> configs, std::size_t workers = 0) {
  if (specs.size() != configs.size()) throw ShapeError("restore_batch: one config per spec is required");
  std::vector<BatchOutcome> out(specs.size());
  parallel_for(specs.size(), workers, [&](std::size_t i) {
    try {
      out[i].result = restore(specs[i], configs[i]);
    } catch (const std::exception& e) {
      out[i].error = e.what();
    }
  });
  return out;
}

struct DeltaErrorPoint {
  long iteration = 0;
  double error_variance = 0.0;  // mean over runs of (delta_hat - delta_true)^2
};

/// Pointwise mean squared delta error across traces sharing an iteration grid.
inline std::vector<DeltaErrorPoint> delta_error_curve(std::span<const RunTrace> traces,
                                                      std::span<const double> truths) {
  if (traces.empty()) throw RangeError("delta_error_curve needs at least one trace");
  if (traces.size() != truths.size()) throw ShapeError("delta_error_curve: one ground-truth delta per trace");
  std::size_t len = traces[0].points.size();
  for (const auto& t : traces) {
    if (!t.has_delta) throw RangeError("trace has no delta column");
    len = std::min(len, t.points.size());
  }
  std::vector<DeltaErrorPoint> out(len);
  for (std::size_t i = 0; i < len; ++i) {
    const long iter = traces[0].points[i].iteration;
    double acc = 0.0;
    for (std::size_t r = 0; r < traces.size(); ++r) {
      if (traces[r].points[i].iteration != iter) throw ShapeError("traces have different iteration grids");
      const double e = traces[r].points[i].delta - truths[r];
      acc += e * e;
    }
    out[i] = {iter, acc / static_cast<double>(traces.size())};
  }
  return out;
}

// ---------------------------------------------------------------------------
// CSV: iter,loss,S,znorm2,k,delta,beta2 (k / delta empty when not applicable)

inline constexpr const char* kTraceHeader = "iter,loss,S,znorm2,k,delta,beta2";

inline std::string format_number(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

inline void write_trace_csv(const RunTrace& trace, std::ostream& out) {
  out << kTraceHeader << '\n';
  for (const auto& p : trace.points) {
    out << p.iteration << ',' << format_number(p.loss) << ',' << format_number(p.residual) << ','
        << format_number(p.znorm2) << ',' << (trace.has_k ? format_number(p.k) : "") << ','
        << (trace.has_delta ? format_number(p.delta) : "") << ',' << format_number(p.beta2) << '\n';
  }
}

inline void write_trace_csv(const RunTrace& trace, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  write_trace_csv(trace, out);
}

inline RunTrace read_trace_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw FormatError(FormatError::Kind::Malformed, path.string() + ": empty trace");
  if (!line.empty() && line.back() == '\r') line.pop_back();

  std::vector<std::string> header;
  {
    std::istringstream hs(line);
    std::string cell;
    while (std::getline(hs, cell, ',')) header.push_back(cell);
  }
  auto column = [&](const std::string& name) -> int {
    const auto it = std::find(header.begin(), header.end(), name);
    return it == header.end() ? -1 : static_cast<int>(it - header.begin());
  };
  const int ci = column("iter"), cl = column("loss"), cs = column("S"), cz = column("znorm2"), ck = column("k"),
            cd = column("delta"), cb = column("beta2");
  if (ci < 0) throw FormatError(FormatError::Kind::Malformed, path.string() + ": missing iter column");

  RunTrace trace;
  trace.has_k = ck >= 0;
  trace.has_delta = cd >= 0;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    auto num = [&](int c, bool& present) -> double {
      present = c >= 0 && c < static_cast<int>(cells.size()) && !cells[c].empty();
      if (!present) return 0.0;
      try {
        return std::stod(cells[c]);
      } catch (const std::exception&) {
        throw FormatError(FormatError::Kind::Malformed,
                          path.string() + ":" + std::to_string(lineno) + ": bad number '" + cells[c] + "'");
      }
    };
    bool ok = false;
    TracePoint p;
    p.iteration = static_cast<long>(num(ci, ok));
    p.loss = num(cl, ok);
    p.residual = num(cs, ok);
    p.znorm2 = num(cz, ok);
    p.k = num(ck, ok);
    if (!ok) trace.has_k = false;
    p.delta = num(cd, ok);
    if (!ok) trace.has_delta = false;
    p.beta2 = num(cb, ok);
    trace.points.push_back(p);
  }
  if (trace.points.size() >= 2) trace.stride = trace.points[1].iteration - trace.points[0].iteration;
  return trace;
}

}  // namespace dequant
