#pragma once

// Command-line front end: quantize | restore | gradcheck | traceplot | sample.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "dequant/generator.hpp"
#include "dequant/gradcheck.hpp"
#include "dequant/image.hpp"
#include "dequant/image_io.hpp"
#include "dequant/parallel.hpp"
#include "dequant/quantizers.hpp"
#include "dequant/restoration.hpp"

namespace dequant::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

enum ExitCode : int { kOk = 0, kUsage = 1, kValidation = 2, kIo = 3 };

class UsageError : public Error {
 public:
  using Error::Error;
};

inline int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const UsageError*>(&e)) return kUsage;
  if (dynamic_cast<const IoError*>(&e) || dynamic_cast<const FormatError*>(&e)) return kIo;
  return kValidation;
}

struct ExperimentConfig {
  std::string pipeline = "uniform";  // uniform | colorize | palette
  int m = 4;
  std::optional<double> delta;
  bool otsu = false;
  bool unknown_delta = false;
  std::string palette;
  std::string variant = "full";
  std::string generator;
  long iters = kDeskIterations;
  double lr = 0.01;
  double momentum = 0.9;
  std::uint64_t seed = 0;
  int restarts = 1;
  long trace_stride = 100;
  std::string out = ".";
  std::size_t workers = 0;
  std::vector<std::string> inputs;
  std::vector<std::string> references;

  bool estimates_delta() const { return pipeline == "colorize" && (unknown_delta || otsu); }

  void validate() const {
    if (pipeline != "uniform" && pipeline != "colorize" && pipeline != "palette") {
      throw UsageError("unknown pipeline '" + pipeline + "' (expected uniform, colorize or palette)");
    }
    if (m < 1) throw RangeError("--m must be at least 1");
    if (delta && !(*delta > 0.0 && *delta < 1.0)) throw RangeError("--delta must lie in (0,1)");
    if (pipeline == "colorize" && delta && (otsu || unknown_delta)) {
      throw UsageError("--delta cannot be combined with --otsu or --unknown-delta");
    }
    if (pipeline == "palette" && palette.empty()) throw UsageError("palette pipeline needs --palette");
    parse_variant(variant);
  }

  OptimizerConfig optimizer() const {
    OptimizerConfig c;
    c.learning_rate = lr;
    c.momentum = momentum;
    c.iterations = iters;
    c.seed = seed;
    c.restarts = restarts;
    c.trace_stride = trace_stride;
    c.validate();
    return c;
  }
};

// ---------------------------------------------------------------------------
// Generators: a .gdqm path or a toy spec
//   toy:identity:HxWxC
//   toy:linear:SEED:DIM:HxWxC
//   toy:mlp[:SEED[:HxWxC[:W0,W1,...]]]   (defaults 1, 16x16x3, 8,32,64)

inline Shape parse_shape(const std::string& text) {
  Shape s{};
  char x1 = 0, x2 = 0;
  std::istringstream in(text);
  std::string rest;
  if (!(in >> s.height >> x1 >> s.width >> x2 >> s.channels) || x1 != 'x' || x2 != 'x' || (in >> rest)) {
    throw UsageError("bad shape '" + text + "' (expected HxWxC)");
  }
  return s;
}

inline std::vector<std::string> split(const std::string& text, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(text);
  while (std::getline(in, cur, sep)) out.push_back(cur);
  return out;
}

inline std::uint64_t parse_uint(const std::string& text, const char* what) {
  try {
    std::size_t pos = 0;
    const auto v = std::stoull(text, &pos);
    if (pos == text.size()) return v;
  } catch (const std::exception&) {
  }
  throw UsageError(std::string("bad ") + what + " '" + text + "'");
}

inline GeneratorModel load_generator(const std::string& spec) {
  if (spec.empty()) throw UsageError("--generator is required");
  if (spec.rfind("toy:", 0) != 0) return load_model(spec);
  const auto parts = split(spec, ':');
  const std::string& kind = parts.size() > 1 ? parts[1] : "";
  if (kind == "identity" && parts.size() == 3) return make_identity_generator(parse_shape(parts[2]));
  if (kind == "linear" && parts.size() == 5) {
    return make_linear_generator(parse_uint(parts[2], "seed"), parse_uint(parts[3], "latent dimension"),
                                 parse_shape(parts[4]));
  }
  if (kind == "mlp" && parts.size() <= 5) {
    const std::uint64_t seed = parts.size() > 2 ? parse_uint(parts[2], "seed") : 1;
    const Shape shape = parts.size() > 3 ? parse_shape(parts[3]) : Shape{16, 16, 3};
    std::vector<std::size_t> widths{8, 32, 64};
    if (parts.size() > 4) {
      widths.clear();
      for (const auto& w : split(parts[4], ',')) widths.push_back(parse_uint(w, "width"));
    }
    return make_mlp_generator(seed, widths, shape);
  }
  throw UsageError("bad toy generator spec '" + spec + "'");
}

inline PaletteQuantizer load_palette_checked(const std::string& path, std::ostream& err) {
  auto q = read_palette(path);
  for (auto j : q.duplicate_indices()) {
    err << "warning: palette entry " << j << " duplicates an earlier entry; nearest-color ties go to the first\n";
  }
  return q;
}

// ---------------------------------------------------------------------------
// Config file: JSON object with the long flag names (dashes or underscores)
// as keys. Values given on the command line win.

inline void apply_config_file(const std::string& path, ExperimentConfig& c, const CLI::App& sub) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw UsageError("config " + path + ": " + e.what());
  }
  if (!j.is_object()) throw UsageError("config " + path + ": expected a JSON object");

  using Setter = std::function<void(const json&)>;
  const std::map<std::string, Setter> setters{
      {"pipeline", [&](const json& v) { c.pipeline = v.get<std::string>(); }},
      {"m", [&](const json& v) { c.m = v.get<int>(); }},
      {"delta", [&](const json& v) { c.delta = v.get<double>(); }},
      {"otsu", [&](const json& v) { c.otsu = v.get<bool>(); }},
      {"unknown-delta", [&](const json& v) { c.unknown_delta = v.get<bool>(); }},
      {"palette", [&](const json& v) { c.palette = v.get<std::string>(); }},
      {"variant", [&](const json& v) { c.variant = v.get<std::string>(); }},
      {"generator", [&](const json& v) { c.generator = v.get<std::string>(); }},
      {"iters", [&](const json& v) { c.iters = v.get<long>(); }},
      {"lr", [&](const json& v) { c.lr = v.get<double>(); }},
      {"momentum", [&](const json& v) { c.momentum = v.get<double>(); }},
      {"seed", [&](const json& v) { c.seed = v.get<std::uint64_t>(); }},
      {"restarts", [&](const json& v) { c.restarts = v.get<int>(); }},
      {"trace-stride", [&](const json& v) { c.trace_stride = v.get<long>(); }},
      {"out", [&](const json& v) { c.out = v.get<std::string>(); }},
      {"workers", [&](const json& v) { c.workers = v.get<std::size_t>(); }},
      {"inputs", [&](const json& v) { c.inputs = v.get<std::vector<std::string>>(); }},
      {"reference", [&](const json& v) { c.references = v.get<std::vector<std::string>>(); }},
  };
  for (const auto& [raw_key, value] : j.items()) {
    std::string key = raw_key;
    std::replace(key.begin(), key.end(), '_', '-');
    const auto it = setters.find(key);
    if (it == setters.end()) throw UsageError("config " + path + ": unknown key '" + raw_key + "'");
    const CLI::Option* opt = sub.get_option_no_throw(key == "inputs" ? "inputs" : "--" + key);
    if (opt && opt->count() > 0) continue;
    try {
      it->second(value);
    } catch (const json::exception& e) {
      throw UsageError("config " + path + ": key '" + raw_key + "': " + e.what());
    }
  }
}

// ---------------------------------------------------------------------------

// Inputs already named <stem>.<pipeline> (quantize output) keep their stem.
inline std::string output_name(const std::string& input, const std::string& pipeline, const std::string& suffix) {
  std::string stem = fs::path(input).stem().string();
  const std::string tag = "." + pipeline;
  if (stem.size() > tag.size() && stem.compare(stem.size() - tag.size(), tag.size(), tag) == 0) {
    stem.resize(stem.size() - tag.size());
  }
  return stem + tag + suffix;
}

inline ImageTensor quantize_one(const ImageTensor& img, const ExperimentConfig& c,
                                const std::optional<PaletteQuantizer>& palette, double* used_delta) {
  if (c.pipeline == "uniform") return quantize_uniform(img, UniformQuantizer(c.m));
  if (c.pipeline == "palette") return quantize_palette(img, *palette);
  const ImageTensor intensity = img.channels() == 3 ? rgb_to_intensity(img) : img;
  const double d = c.otsu ? otsu_threshold(intensity) : c.delta.value_or(SurrogateParams::kInitialDelta);
  if (used_delta) *used_delta = d;
  return quantize_threshold(intensity, ThresholdQuantizer(d));
}

inline int cmd_quantize(const ExperimentConfig& c, std::ostream& out, std::ostream& err) {
  c.validate();
  if (c.inputs.empty()) throw UsageError("no input images");
  std::optional<PaletteQuantizer> palette;
  if (c.pipeline == "palette") palette = load_palette_checked(c.palette, err);
  fs::create_directories(c.out);

  int status = kOk;
  std::vector<std::pair<std::string, double>> thresholds;
  for (const auto& input : c.inputs) {
    try {
      double d = 0.0;
      const auto y = quantize_one(load_image(input), c, palette, &d);
      const fs::path dst = fs::path(c.out) / output_name(input, c.pipeline, ".png");
      save_image(y, dst);
      if (c.pipeline == "colorize" && c.otsu) thresholds.emplace_back(fs::path(input).filename().string(), d);
      out << input << " -> " << dst.string() << "\n";
    } catch (const std::exception& e) {
      err << "error: " << input << ": " << e.what() << "\n";
      status = std::max(status, exit_code_for(e));
    }
  }
  if (c.pipeline == "colorize" && c.otsu) {
    const fs::path sidecar = fs::path(c.out) / "otsu_thresholds.csv";
    std::ofstream csv(sidecar, std::ios::trunc);
    if (!csv) throw IoError("cannot write " + sidecar.string());
    csv << "image,delta\n";
    for (const auto& [name, d] : thresholds) csv << name << ',' << format_number(d) << '\n';
  }
  return status;
}

struct MetricsRow {
  std::string image;
  std::optional<double> error;
  std::optional<double> psnr;
  std::string status = "ok";
};

inline void write_metrics_csv(const std::vector<MetricsRow>& rows, const std::string& variant, const fs::path& path) {
  std::ofstream csv(path, std::ios::trunc);
  if (!csv) throw IoError("cannot write " + path.string());
  csv << "image,variant,error,psnr,status\n";
  std::vector<double> errors, psnrs;
  for (const auto& r : rows) {
    csv << r.image << ',' << variant << ',' << (r.error ? format_number(*r.error) : "") << ','
        << (r.psnr ? format_number(*r.psnr) : "") << ',' << r.status << '\n';
    if (r.error) errors.push_back(*r.error);
    if (r.psnr) psnrs.push_back(*r.psnr);
  }
  csv << "mean," << variant << ',' << (errors.empty() ? "" : format_number(mean_of(errors))) << ','
      << (psnrs.empty() ? "" : format_number(mean_of(psnrs))) << ",n=" << errors.size() << '\n';
}

inline int cmd_restore(const ExperimentConfig& c, std::ostream& out, std::ostream& err) {
  c.validate();
  if (c.inputs.empty()) throw UsageError("no input images");
  if (!c.references.empty() && c.references.size() != c.inputs.size()) {
    throw UsageError("--reference needs one image per input");
  }
  const Variant variant = parse_variant(c.variant);
  const OptimizerConfig opt = c.optimizer();
  const auto generator = std::make_shared<const GeneratorModel>(load_generator(c.generator));

  SurrogateKind surrogate = IdentitySurrogate{};
  SurrogateParams initial;
  if (c.pipeline == "uniform") {
    surrogate = SoftUniform{c.m};
  } else if (c.pipeline == "palette") {
    surrogate = SoftPalette{load_palette_checked(c.palette, err)};
  } else {
    surrogate = SoftThreshold{};
    if (c.estimates_delta()) {
      initial.train_delta = true;
    } else {
      initial = SurrogateParams::with(SurrogateParams::kInitialK, c.delta.value_or(SurrogateParams::kInitialDelta));
    }
  }

  // Load everything and validate shapes before any run starts.
  const std::size_t n = c.inputs.size();
  std::vector<MetricsRow> rows(n);
  std::vector<std::optional<ObjectiveSpec>> specs(n);
  std::vector<std::optional<ImageTensor>> refs(n);
  int status = kOk;
  for (std::size_t i = 0; i < n; ++i) {
    rows[i].image = fs::path(c.inputs[i]).filename().string();
    ImageTensor y;
    try {
      y = load_image(c.inputs[i]);
      if (!c.references.empty()) refs[i] = load_image(c.references[i]);
    } catch (const std::exception& e) {
      err << "error: " << c.inputs[i] << ": " << e.what() << "\n";
      rows[i].status = std::string("failed: ") + e.what();
      status = std::max(status, exit_code_for(e));
      continue;
    }
    specs[i] = make_objective(variant, surrogate, generator, std::move(y), initial);
    if (refs[i] && refs[i]->shape() != generator->output_shape()) {
      throw ShapeError("reference " + c.references[i] + " has shape " + to_string(refs[i]->shape()) +
                       ", generator produces " + to_string(generator->output_shape()));
    }
  }

  fs::create_directories(c.out);
  std::vector<std::optional<RestoreResult>> results(n);
  std::vector<std::string> failures(n);
  std::vector<int> codes(n, kOk);
  parallel_for(n, c.workers, [&](std::size_t i) {
    if (!specs[i]) return;
    try {
      results[i] = restore(*specs[i], opt);
    } catch (const NonFiniteLossError& e) {
      failures[i] = e.what();
      codes[i] = kValidation;
      try {
        write_trace_csv(e.trace(), fs::path(c.out) / output_name(c.inputs[i], c.pipeline, "." + c.variant + ".trace.csv"));
      } catch (const std::exception&) {
      }
    } catch (const std::exception& e) {
      failures[i] = e.what();
      codes[i] = exit_code_for(e);
    }
  });

  for (std::size_t i = 0; i < n; ++i) {
    if (!specs[i]) continue;
    if (!results[i]) {
      err << "error: " << c.inputs[i] << ": " << failures[i] << "\n";
      rows[i].status = "failed: " + failures[i];
      status = std::max(status, codes[i]);
      continue;
    }
    const auto& r = *results[i];
    const std::string base = output_name(c.inputs[i], c.pipeline, "." + c.variant);
    try {
      save_image(r.image, fs::path(c.out) / (base + ".png"));
      write_trace_csv(r.trace, fs::path(c.out) / (base + ".trace.csv"));
    } catch (const std::exception& e) {
      err << "error: " << c.inputs[i] << ": " << e.what() << "\n";
      rows[i].status = std::string("failed: ") + e.what();
      status = std::max(status, exit_code_for(e));
      continue;
    }
    if (refs[i]) {
      rows[i].error = mse(r.image, *refs[i]);
      rows[i].psnr = psnr_from_mse(*rows[i].error);
    }
    out << c.inputs[i] << ": loss " << r.loss.total << " k " << r.k();
    if (c.pipeline == "colorize") out << " delta " << r.delta();
    if (rows[i].psnr) out << " psnr " << *rows[i].psnr;
    out << "\n";
  }
  write_metrics_csv(rows, c.variant, fs::path(c.out) / "metrics.csv");
  return status;
}

inline int cmd_gradcheck(std::uint64_t seed, int points, bool inject_fault, std::ostream& out) {
  GradcheckOptions o;
  o.seed = seed;
  o.points = points;
  o.inject_fault = inject_fault;
  if (points < 1) throw RangeError("--points must be positive");
  bool ok = true;
  for (const auto& r : run_gradcheck(o)) {
    const bool pass = r.passed(o.tolerance);
    ok = ok && pass;
    out << r.name << " max_rel_error " << r.max_rel_error << " over " << r.comparisons << " "
        << (pass ? "PASS" : "FAIL") << "\n";
  }
  return ok ? kOk : kValidation;
}

inline int cmd_traceplot(const std::vector<std::string>& traces, std::vector<double> truth, const std::string& out_path,
                         std::ostream& out) {
  if (traces.empty()) throw UsageError("no trace files");
  if (truth.size() == 1) truth.assign(traces.size(), truth[0]);
  if (truth.size() != traces.size()) throw UsageError("--truth needs one value or one per trace");
  std::vector<RunTrace> loaded;
  for (const auto& t : traces) loaded.push_back(read_trace_csv(t));
  const auto curve = delta_error_curve(loaded, truth);
  std::ofstream file;
  if (!out_path.empty()) {
    file.open(out_path, std::ios::trunc);
    if (!file) throw IoError("cannot write " + out_path);
  }
  std::ostream& dst = out_path.empty() ? out : file;
  dst << "iter,delta_err_var\n";
  for (const auto& p : curve) dst << p.iteration << ',' << format_number(p.error_variance) << '\n';
  return kOk;
}

inline int cmd_sample(const std::string& generator, int count, std::uint64_t seed, const std::string& out_dir,
                      std::ostream& out) {
  if (count < 1) throw RangeError("--count must be positive");
  const auto g = load_generator(generator);
  fs::create_directories(out_dir);
  for (int i = 0; i < count; ++i) {
    std::mt19937_64 rng(seed + static_cast<std::uint64_t>(i));
    const fs::path dst = fs::path(out_dir) / ("sample_" + std::to_string(i) + ".png");
    save_image(g.forward(sample_latent(rng, g.latent_dim())), dst);
    out << dst.string() << "\n";
  }
  return kOk;
}

// ---------------------------------------------------------------------------

inline void add_pipeline_options(CLI::App* sub, ExperimentConfig& c) {
  sub->add_option("--pipeline", c.pipeline, "uniform | colorize | palette");
  sub->add_option("--m", c.m, "levels per channel (uniform)");
  sub->add_option("--delta", c.delta, "binarization threshold (colorize)");
  sub->add_flag("--otsu", c.otsu, "per-image Otsu threshold (colorize)");
  sub->add_option("--palette", c.palette, "palette file, one 'r g b' line per entry");
  sub->add_option("--out", c.out, "output directory");
  sub->add_option("inputs", c.inputs, "input images");
}

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Generative-prior de-quantization"};
  app.require_subcommand(1);
  std::string config_path;

  ExperimentConfig cfg;
  auto* quantize = app.add_subcommand("quantize", "apply a quantizer to images");
  add_pipeline_options(quantize, cfg);
  quantize->add_option("--config", config_path, "JSON config file");

  auto* restore_cmd = app.add_subcommand("restore", "restore quantized images with a generator prior");
  add_pipeline_options(restore_cmd, cfg);
  restore_cmd->add_option("--config", config_path, "JSON config file");
  restore_cmd->add_flag("--unknown-delta", cfg.unknown_delta, "estimate the threshold jointly (colorize)");
  restore_cmd->add_option("--variant", cfg.variant, "full | identity");
  restore_cmd->add_option("--generator", cfg.generator, "model file or toy:identity|linear|mlp spec");
  restore_cmd->add_option("--iters", cfg.iters, "iterations per run");
  restore_cmd->add_option("--lr", cfg.lr, "learning rate");
  restore_cmd->add_option("--momentum", cfg.momentum, "momentum in [0,1)");
  restore_cmd->add_option("--seed", cfg.seed, "seed for the latent initialization");
  restore_cmd->add_option("--restarts", cfg.restarts, "seeded restarts; lowest loss kept");
  restore_cmd->add_option("--trace-stride", cfg.trace_stride, "iterations between trace points");
  restore_cmd->add_option("--workers", cfg.workers, "concurrent runs (0 = available parallelism)");
  restore_cmd->add_option("--reference", cfg.references, "ground-truth image per input, for metrics");

  std::uint64_t gc_seed = GradcheckOptions{}.seed;
  int gc_points = GradcheckOptions{}.points;
  bool gc_fault = false;
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of every analytic gradient");
  gradcheck->add_option("--config", config_path, "ignored; accepted for uniformity");
  gradcheck->add_option("--seed", gc_seed, "sampling seed");
  gradcheck->add_option("--points", gc_points, "points per check");
  gradcheck->add_flag("--inject-fault", gc_fault, "corrupt one gradient to exercise the failure path");

  std::vector<std::string> traces;
  std::vector<double> truth;
  std::string plot_out;
  auto* traceplot = app.add_subcommand("traceplot", "mean squared threshold error across trace files");
  traceplot->add_option("traces", traces, "trace CSV files")->required();
  traceplot->add_option("--truth", truth, "true threshold (one value or one per trace)")->required();
  traceplot->add_option("--out", plot_out, "output CSV (default stdout)");

  std::string sample_gen, sample_out = ".";
  int sample_count = 1;
  std::uint64_t sample_seed = 0;
  auto* sample = app.add_subcommand("sample", "write generator samples G(z), z ~ N(0, I)");
  sample->add_option("--generator", sample_gen, "model file or toy spec")->required();
  sample->add_option("--count", sample_count, "number of images");
  sample->add_option("--seed", sample_seed, "seed of the first latent");
  sample->add_option("--out", sample_out, "output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (quantize->parsed()) {
      if (!config_path.empty()) apply_config_file(config_path, cfg, *quantize);
      return cmd_quantize(cfg, out, err);
    }
    if (restore_cmd->parsed()) {
      if (!config_path.empty()) apply_config_file(config_path, cfg, *restore_cmd);
      return cmd_restore(cfg, out, err);
    }
    if (gradcheck->parsed()) return cmd_gradcheck(gc_seed, gc_points, gc_fault, out);
    if (traceplot->parsed()) return cmd_traceplot(traces, truth, plot_out, out);
    return cmd_sample(sample_gen, sample_count, sample_seed, sample_out, out);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return exit_code_for(e);
  }
}

inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  std::vector<const char*> argv{"dequant"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return run(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace dequant::cli
