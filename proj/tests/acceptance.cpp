// Acceptance run: one PASS/FAIL line per criterion.
//   acceptance            all criteria
//   acceptance 3 5        selected criteria
// Exit status is nonzero when any selected criterion fails.

#include <chrono>
#include <cstring>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>

#include "cli.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace dequant;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

// Desk optimizer settings used throughout (see README).
OptimizerConfig desk(std::uint64_t seed) {
  OptimizerConfig c;
  c.learning_rate = 0.01;
  c.momentum = 0.9;
  c.seed = seed;
  return c;
}

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << "  failed: " << what << "\n";
    }
  }
};

// ---------------------------------------------------------------------------

void gradient_suite(Outcome& o) {
  const auto t0 = Clock::now();
  const GradcheckOptions opt;
  for (const auto& r : run_gradcheck(opt)) {
    o.detail << "  " << r.name << ": max rel error " << r.max_rel_error << " over " << r.comparisons << "\n";
    o.require(r.passed(opt.tolerance), r.name);
    o.require(r.comparisons >= 100, r.name + " has fewer than 100 comparisons");
  }
  const double secs = seconds_since(t0);
  o.detail << "  runtime " << secs << " s\n";
  o.require(secs < 30.0, "runtime above 30 s");
}

void surrogate_convergence(Outcome& o) {
  for (int m : {1, 2, 3, 4, 5, 8}) {
    const UniformQuantizer hard(m);
    const double k = 1e4 * m * m;
    double worst = 0.0;
    for (int i = 0; i < 10000; ++i) {
      const double r = i / 9999.0;
      bool near_edge = false;
      for (int j = 1; j < m; ++j) near_edge |= std::abs(r - static_cast<double>(j) / m) < 0.25 / m;
      if (!near_edge) worst = std::max(worst, std::abs(soft_uniform(r, m, k).value - hard(r)));
    }
    o.detail << "  soft_uniform m=" << m << ": sup error " << worst << "\n";
    o.require(worst < 1e-3, "soft_uniform m=" + std::to_string(m));
  }

  for (double delta : {0.2, 0.4, 0.5, 0.8}) {
    const ThresholdQuantizer hard(delta);
    double worst = 0.0;
    for (int i = 0; i < 10000; ++i) {
      const double v = i / 9999.0;
      if (std::abs(v - delta) < 0.05) continue;
      worst = std::max(worst, std::abs(soft_threshold(v, 1e4, delta).value - hard(v)));
    }
    o.detail << "  soft_threshold delta=" << delta << " k=1e4: sup error " << worst << "\n";
    o.require(worst < 1e-3, "soft_threshold");
  }

  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<PaletteQuantizer> palettes{uniform_grid_palette(2), uniform_grid_palette(3)};
  for (int count : {4, 8, 16}) {
    std::vector<Color> colors(static_cast<std::size_t>(count));
    for (auto& c : colors) c = {u(rng), u(rng), u(rng)};
    palettes.emplace_back(std::move(colors));
  }
  for (const auto& q : palettes) {
    double worst = 0.0;
    int used = 0;
    for (int t = 0; t < 10000; ++t) {
      const double x[] = {u(rng), u(rng), u(rng)};
      const std::size_t j = q.nearest(x);
      double margin = 1e9;
      for (std::size_t i = 0; i < q.size(); ++i) {
        if (i == j) continue;
        const double gap = std::sqrt(squared_distance(std::span<const double>(q.colors()[i].data(), 3), q.colors()[j]));
        margin = std::min(margin, (squared_distance(x, q.colors()[i]) - squared_distance(x, q.colors()[j])) / (2 * gap));
      }
      if (margin < 0.05) continue;
      ++used;
      const auto soft = soft_palette(x, q, 1e4);
      for (int a = 0; a < 3; ++a) worst = std::max(worst, std::abs(soft.value[a] - q.colors()[j][a]));
    }
    o.detail << "  soft_palette M=" << q.size() << " k=1e4: sup error " << worst << " over " << used << " points\n";
    o.require(worst < 1e-3, "soft_palette M=" + std::to_string(q.size()));
  }
}

void otsu_oracle(Outcome& o) {
  std::vector<double> v(100);
  std::fill(v.begin(), v.begin() + 50, 0.2);
  std::fill(v.begin() + 50, v.end(), 0.8);
  const ImageTensor two({10, 10, 1}, v);
  const double d = otsu_threshold(two);
  o.require(d * kOtsuBins == oracle::brute_force_otsu(intensity_histogram(two)), "two-cluster example");
  o.require(d > 0.2 && d <= 0.8, "two-cluster threshold separates the clusters");

  std::mt19937_64 rng(6);
  int checked = 0;
  while (checked < 50) {
    std::array<std::uint64_t, kOtsuBins> hist{};
    const int occupied = 2 + static_cast<int>(rng() % 40);
    for (int i = 0; i < occupied; ++i) hist[rng() % kOtsuBins] += 1 + rng() % 50;
    if (std::count_if(hist.begin(), hist.end(), [](auto c) { return c > 0; }) < 2) continue;
    const auto img = oracle::image_from_histogram(hist);
    const double got = otsu_threshold(img);
    o.require(got * kOtsuBins == oracle::brute_force_otsu(hist), "histogram " + std::to_string(checked));
    ++checked;
  }
  o.detail << "  two-cluster threshold " << d << ", " << checked << " random histograms\n";
}

void grid_oracle(Outcome& o) {
  const auto t0 = Clock::now();
  for (std::uint64_t s = 0; s < 10; ++s) {
    auto gen = std::make_shared<const GeneratorModel>(make_linear_generator(s, 2, {4, 4, 1}));
    std::mt19937_64 rng(500 + s);
    const auto y = quantize_uniform(gen->forward(sample_latent(rng, 2)), UniformQuantizer(4));
    const auto spec = make_objective(Variant::Identity, IdentitySurrogate{}, gen, y);
    double grid_min = std::numeric_limits<double>::infinity();
    std::vector<double> z(2);
    for (int i = 0; i <= 800; ++i) {
      for (int j = 0; j <= 800; ++j) {
        z[0] = -4.0 + 0.01 * i;
        z[1] = -4.0 + 0.01 * j;
        grid_min = std::min(grid_min, loss_and_grads(spec, z, spec.initial, kDefaultResidualFloor).loss.total);
      }
    }
    const double got = restore(spec, desk(s)).loss.total;
    const double bound = grid_min + 0.01 * std::abs(grid_min);
    o.detail << "  instance " << s << ": restore " << got << ", grid minimum " << grid_min << "\n";
    o.require(got <= bound, "instance " + std::to_string(s));
  }
  const double secs = seconds_since(t0);
  o.detail << "  runtime " << secs << " s\n";
  o.require(secs < 120.0, "runtime above 2 min");
}

void toy_recovery(Outcome& o) {
  const auto t0 = Clock::now();
  constexpr std::size_t kInstances = 10;
  const std::vector<std::size_t> widths{8, 32, 64};
  const auto gen = std::make_shared<const GeneratorModel>(make_mlp_generator(1, widths, {16, 16, 3}));
  const std::vector<int> levels{2, 3, 4, 5};
  std::map<int, double> err_full, err_ident, psnr_full, psnr_ident;
  for (int m : levels) {
    std::vector<double> ef(kInstances), ei(kInstances), pf(kInstances), pi(kInstances), py(kInstances);
    parallel_for(kInstances, 0, [&](std::size_t inst) {
      std::mt19937_64 rng(100 + inst);
      const auto x = gen->forward(sample_latent(rng, 8));
      const auto y = quantize_uniform(x, UniformQuantizer(m));
      const auto full = restore(make_objective(Variant::Full, SoftUniform{m}, gen, y), desk(inst));
      const auto ident = restore(make_objective(Variant::Identity, SoftUniform{m}, gen, y), desk(inst));
      ef[inst] = mse(full.image, x);
      ei[inst] = mse(ident.image, x);
      pf[inst] = psnr(full.image, x);
      pi[inst] = psnr(ident.image, x);
      py[inst] = psnr(y, x);
    });
    err_full[m] = mean_of(ef);
    err_ident[m] = mean_of(ei);
    psnr_full[m] = mean_of(pf);
    psnr_ident[m] = mean_of(pi);
    for (std::size_t i = 0; i < kInstances; ++i) {
      o.require(pf[i] >= py[i], "(c) m=" + std::to_string(m) + " instance " + std::to_string(i) + ": full " +
                                    std::to_string(pf[i]) + " dB below observation " + std::to_string(py[i]) + " dB");
    }
    o.detail << "  m=" << m << ": error full " << err_full[m] << " identity " << err_ident[m] << "; psnr full "
             << psnr_full[m] << " identity " << psnr_ident[m] << " observation " << mean_of(py) << "\n";
  }
  o.require(err_full[2] <= err_ident[2], "(a) full variant error above identity at m=2");
  for (std::size_t i = 1; i < levels.size(); ++i) {
    const int a = levels[i - 1], b = levels[i];
    const std::string pair = " psnr decreases from m=" + std::to_string(a) + " to m=" + std::to_string(b);
    o.require(psnr_full[b] >= psnr_full[a], "(b) full" + pair);
    o.require(psnr_ident[b] >= psnr_ident[a], "(b) identity" + pair);
  }
  const double secs = seconds_since(t0);
  o.detail << "  runtime " << secs << " s\n";
  o.require(secs < 600.0, "runtime above 10 min");
}

void delta_estimation(Outcome& o) {
  const std::vector<std::size_t> widths{8, 32, 64};
  const auto gen = std::make_shared<const GeneratorModel>(make_mlp_generator(1, widths, {16, 16, 3}));
  for (bool otsu : {false, true}) {
    constexpr std::size_t kRuns = 10;
    std::vector<RunTrace> traces(kRuns);
    std::vector<double> truth(kRuns), estimate(kRuns);
    parallel_for(kRuns, 0, [&](std::size_t inst) {
      std::mt19937_64 rng(200 + inst);
      const auto intensity = rgb_to_intensity(gen->forward(sample_latent(rng, 8)));
      truth[inst] = otsu ? otsu_threshold(intensity) : 0.4;
      const auto y = quantize_threshold(intensity, ThresholdQuantizer(truth[inst]));
      SurrogateParams p;
      p.train_delta = true;
      const auto r =
          restore_with_unknown_threshold(make_objective(Variant::Full, SoftThreshold{}, gen, y, p), desk(inst));
      traces[inst] = r.trace;
      estimate[inst] = r.delta();
    });
    const auto curve = delta_error_curve(traces, truth);
    double dev = 0.0;
    for (std::size_t i = 0; i < kRuns; ++i) dev += std::abs(estimate[i] - truth[i]);
    dev /= kRuns;
    const std::string mode = otsu ? "otsu" : "delta=0.4";
    o.detail << "  " << mode << ": error variance " << curve.front().error_variance << " at iteration 0, "
             << curve.back().error_variance << " at iteration " << curve.back().iteration << "; mean |delta error| "
             << dev << "\n";
    o.require(curve.back().error_variance < curve.front().error_variance, mode + ": variance did not decrease");
    o.require(dev < 0.1, mode + ": mean absolute delta error");
  }
}

void determinism(Outcome& o) {
  const std::vector<std::size_t> widths{6, 24};
  const auto gen = std::make_shared<const GeneratorModel>(make_mlp_generator(4, widths, {8, 8, 3}));
  std::mt19937_64 rng(9);
  const auto x = gen->forward(sample_latent(rng, 6));
  std::vector<ObjectiveSpec> specs{make_objective(Variant::Full, SoftUniform{3}, gen, quantize_uniform(x, UniformQuantizer(3)))};
  SurrogateParams p;
  p.train_delta = true;
  specs.push_back(make_objective(Variant::Full, SoftThreshold{}, gen,
                                 quantize_threshold(rgb_to_intensity(x), ThresholdQuantizer(0.45)), p));
  for (std::size_t s = 0; s < specs.size(); ++s) {
    auto cfg = desk(5);
    cfg.iterations = 3000;
    cfg.restarts = 2;
    const auto a = restore(specs[s], cfg);
    const auto b = restore(specs[s], cfg);
    std::vector<OptimizerConfig> cfgs(2, cfg);
    const std::vector<ObjectiveSpec> pair{specs[s], specs[s]};
    const auto batch = restore_batch(pair, cfgs, 2);
    const std::string tag = "problem " + std::to_string(s);
    o.require(a.z.size() == b.z.size() && std::memcmp(a.z.data(), b.z.data(), a.z.size() * sizeof(double)) == 0,
              tag + ": latent differs");
    for (const auto& out : batch) o.require(out.result && out.result->z == a.z, tag + ": concurrent run differs");
    std::ostringstream ta, tb;
    write_trace_csv(a.trace, ta);
    write_trace_csv(b.trace, tb);
    o.require(ta.str() == tb.str(), tag + ": trace CSV differs");
    o.require(detail::encode_png(a.image) == detail::encode_png(b.image), tag + ": PNG bytes differ");
  }
  o.detail << "  repeated and concurrent runs bitwise identical on " << specs.size() << " problems\n";
}

void format_round_trips(Outcome& o) {
  testutil::TempDir dir;
  const std::vector<std::size_t> widths{8, 32, 64};
  const auto model = make_mlp_generator(3, widths, {16, 16, 3});
  save_model(model, dir.path / "a.gdqm");
  save_model(load_model(dir.path / "a.gdqm"), dir.path / "b.gdqm");
  o.require(detail::read_file(dir.path / "a.gdqm") == detail::read_file(dir.path / "b.gdqm"), "model bytes");
  o.require(load_model(dir.path / "a.gdqm") == model, "model contents");

  std::mt19937_64 rng(12);
  double worst = 0.0;
  for (int t = 0; t < 20; ++t) {
    const auto img = testutil::random_image(rng, {9, 11, t % 2 ? 3u : 1u});
    save_image(img, dir.path / "x.png");
    const auto back = load_image(dir.path / "x.png");
    for (std::size_t i = 0; i < img.size(); ++i) worst = std::max(worst, std::abs(back[i] - img[i]));
  }
  o.require(worst <= 1.0 / 510.0 + 1e-12, "PNG round trip above 1/510");

  std::ostringstream sink;
  const auto p = [&](const std::string& s) { return (dir.path / s).string(); };
  const std::string gen = "toy:mlp:1:8x8x3:8,16";
  int rc = cli::run({"sample", "--generator", gen, "--count", "3", "--seed", "40", "--out", p("s")}, sink, sink);
  rc = std::max(rc, cli::run({"quantize", "--m", "3", "--out", p("q"), p("s/sample_0.png"), p("s/sample_1.png"),
                              p("s/sample_2.png")},
                             sink, sink));
  rc = std::max(rc, cli::run({"restore", "--m", "3", "--generator", gen, "--iters", "1000", "--out", p("r"),
                              "--reference", p("s/sample_0.png"), p("s/sample_1.png"), p("s/sample_2.png"), "--",
                              p("q/sample_0.uniform.png"), p("q/sample_1.uniform.png"), p("q/sample_2.uniform.png")},
                             sink, sink));
  o.require(rc == 0, "CLI pipeline exit status " + std::to_string(rc) + ": " + sink.str());
  const auto problem = oracle::check_metrics_csv(
      dir.path / "r", {"sample_0.uniform.full.png", "sample_1.uniform.full.png", "sample_2.uniform.full.png"},
      {p("s/sample_0.png"), p("s/sample_1.png"), p("s/sample_2.png")});
  o.require(problem.empty(), "metrics CSV: " + problem);
  o.detail << "  model bytes identical; PNG max round-trip error " << worst << "; metrics CSV "
           << (problem.empty() ? "consistent" : problem) << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<void(Outcome&)>>> criteria{
      {"gradient suite", gradient_suite},
      {"surrogate convergence", surrogate_convergence},
      {"otsu oracle", otsu_oracle},
      {"grid-search oracle", grid_oracle},
      {"toy recovery ordering", toy_recovery},
      {"delta estimation", delta_estimation},
      {"determinism", determinism},
      {"format round-trips", format_round_trips},
  };
  std::vector<std::size_t> selected;
  for (int i = 1; i < argc; ++i) {
    const int n = std::atoi(argv[i]);
    if (n < 1 || n > static_cast<int>(criteria.size())) {
      std::cerr << "unknown criterion " << argv[i] << "\n";
      return 1;
    }
    selected.push_back(static_cast<std::size_t>(n - 1));
  }
  if (selected.empty()) {
    for (std::size_t i = 0; i < criteria.size(); ++i) selected.push_back(i);
  }

  int failures = 0;
  for (std::size_t i : selected) {
    Outcome o;
    const auto t0 = Clock::now();
    try {
      criteria[i].second(o);
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail << "  exception: " << e.what() << "\n";
    }
    failures += o.pass ? 0 : 1;
    std::cout << (o.pass ? "PASS" : "FAIL") << " " << i + 1 << " " << criteria[i].first << " ("
              << seconds_since(t0) << " s)\n"
              << o.detail.str() << std::flush;
  }
  return failures == 0 ? 0 : 2;
}
