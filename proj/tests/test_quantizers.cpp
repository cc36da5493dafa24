#include <gtest/gtest.h>

#include <algorithm>
#include <fstream>
#include <random>
#include <set>

#include "dequant/quantizers.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace dequant;

TEST(Uniform, Examples) {
  EXPECT_EQ(UniformQuantizer(1)(0.0), 0.5);
  EXPECT_EQ(UniformQuantizer(1)(0.73), 0.5);
  EXPECT_EQ(UniformQuantizer(1)(1.0), 0.5);
  EXPECT_EQ(UniformQuantizer(4)(0.3), 0.375);
  EXPECT_EQ(UniformQuantizer(2)(0.6), 0.75);
}

TEST(Uniform, BinEdgesAreRightClosed) {
  UniformQuantizer q(4);
  EXPECT_EQ(q.bin(0.0), 1);
  EXPECT_EQ(q.bin(0.25), 1);
  EXPECT_EQ(q.bin(std::nextafter(0.25, 1.0)), 2);
  EXPECT_EQ(q.bin(0.5), 2);
  EXPECT_EQ(q.bin(1.0), 4);
  UniformQuantizer q3(3);
  EXPECT_EQ(q3.bin(1.0 / 3.0), 1);
  EXPECT_EQ(q3.bin(2.0 / 3.0), 2);
  EXPECT_EQ(q3(0.0), 0.5 / 3.0);
}

TEST(Uniform, RejectsZeroLevels) { EXPECT_THROW(UniformQuantizer(0), RangeError); }

TEST(Uniform, AlphabetDisplacementIdempotence) {
  std::mt19937_64 rng(1);
  for (int m = 1; m <= 9; ++m) {
    UniformQuantizer q(m);
    std::set<double> centers;
    for (int i = 1; i <= m; ++i) centers.insert(q.center(i));
    auto img = testutil::random_image(rng, {6, 7, 3});
    auto out = quantize_uniform(img, q);
    EXPECT_EQ(quantize_uniform(out, q), out);
    for (std::size_t i = 0; i < img.size(); ++i) {
      EXPECT_TRUE(centers.count(out[i])) << out[i];
      EXPECT_LE(std::abs(out[i] - img[i]), 0.5 / m + 1e-15);
    }
  }
}

TEST(Palette, Examples) {
  PaletteQuantizer q({{0, 0, 0}, {1, 1, 1}});
  const double a[] = {0.2, 0.2, 0.2};
  const double b[] = {0.5, 0.5, 0.5};
  const double c[] = {1.0, 1.0, 1.0};
  EXPECT_EQ(q.nearest(a), 0u);
  EXPECT_EQ(q.nearest(b), 0u);
  EXPECT_EQ(q.nearest(c), 1u);
}

TEST(Palette, Errors) {
  EXPECT_THROW(PaletteQuantizer({}), RangeError);
  EXPECT_THROW(PaletteQuantizer({{0, 0, 1.5}}), RangeError);
  EXPECT_THROW(quantize_palette(ImageTensor({2, 2, 1}), PaletteQuantizer({{0, 0, 0}})), ShapeError);
}

TEST(Palette, DuplicatesFlagged) {
  PaletteQuantizer q({{0, 0, 0}, {1, 1, 1}, {0, 0, 0}, {1, 1, 1}});
  EXPECT_EQ(q.duplicate_indices(), (std::vector<std::size_t>{2, 3}));
  EXPECT_TRUE(PaletteQuantizer({{0, 0, 0}}).duplicate_indices().empty());
}

TEST(Palette, AlphabetAndIdempotence) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<Color> colors(7);
  for (auto& c : colors) c = {u(rng), u(rng), u(rng)};
  PaletteQuantizer q(colors);
  auto img = testutil::random_image(rng, {8, 8, 3});
  auto out = quantize_palette(img, q);
  EXPECT_EQ(quantize_palette(out, q), out);
  for (std::size_t p = 0; p < out.shape().pixels(); ++p) {
    auto px = out.pixel(p);
    const Color c{px[0], px[1], px[2]};
    EXPECT_NE(std::find(colors.begin(), colors.end(), c), colors.end());
  }
}

TEST(Palette, GridMatchesUniform) {
  std::mt19937_64 rng(3);
  for (int m = 1; m <= 5; ++m) {
    auto img = testutil::random_image(rng, {9, 9, 3});
    EXPECT_EQ(quantize_palette(img, uniform_grid_palette(m)), quantize_uniform(img, UniformQuantizer(m)));
  }
}

TEST(Threshold, Examples) {
  EXPECT_EQ(ThresholdQuantizer(0.5)(0.5), 1.0);
  EXPECT_EQ(ThresholdQuantizer(0.4)(0.39), 0.0);
  auto out = quantize_threshold(ImageTensor({3, 3, 1}, 0.0), ThresholdQuantizer(0.2));
  for (double v : out.data()) EXPECT_EQ(v, 0.0);
}

TEST(Threshold, Errors) {
  EXPECT_THROW(ThresholdQuantizer(0.0), RangeError);
  EXPECT_THROW(ThresholdQuantizer(1.0), RangeError);
  EXPECT_THROW(quantize_threshold(ImageTensor({2, 2, 3}), ThresholdQuantizer(0.5)), ShapeError);
}

TEST(Threshold, BinaryAndIdempotent) {
  std::mt19937_64 rng(4);
  auto img = testutil::random_image(rng, {10, 10, 1});
  ThresholdQuantizer t(0.37);
  auto out = quantize_threshold(img, t);
  EXPECT_EQ(quantize_threshold(out, t), out);
  for (double v : out.data()) EXPECT_TRUE(v == 0.0 || v == 1.0);
}

using oracle::brute_force_otsu;
using oracle::image_from_histogram;

TEST(Otsu, TwoClusters) {
  std::vector<double> v(100);
  std::fill(v.begin(), v.begin() + 50, 0.2);
  std::fill(v.begin() + 50, v.end(), 0.8);
  ImageTensor img({10, 10, 1}, v);
  const double d = otsu_threshold(img);
  EXPECT_GT(d, 0.2);
  EXPECT_LE(d, 0.8);
  auto bin = quantize_threshold(img, ThresholdQuantizer(d));
  for (std::size_t i = 0; i < 100; ++i) EXPECT_EQ(bin[i], i < 50 ? 0.0 : 1.0);
  EXPECT_EQ(static_cast<int>(d * kOtsuBins), brute_force_otsu(intensity_histogram(img)));
}

TEST(Otsu, TwoValuesAnyWeights) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int t = 0; t < 40; ++t) {
    double a = u(rng), b = u(rng);
    if (otsu_bin(a) == otsu_bin(b)) continue;
    if (a > b) std::swap(a, b);
    const int na = 1 + static_cast<int>(u(rng) * 60), nb = 1 + static_cast<int>(u(rng) * 60);
    std::vector<double> v(na, a);
    v.insert(v.end(), nb, b);
    const double d = otsu_threshold(ImageTensor({1, v.size(), 1}, v));
    EXPECT_LT(a, d);
    EXPECT_LE(d, b);
  }
}

TEST(Otsu, MatchesBruteForce) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    std::array<std::uint64_t, kOtsuBins> hist{};
    const int occupied = 2 + static_cast<int>(rng() % 40);
    for (int i = 0; i < occupied; ++i) hist[rng() % kOtsuBins] += 1 + rng() % 50;
    if (std::count_if(hist.begin(), hist.end(), [](auto c) { return c > 0; }) < 2) continue;
    auto img = image_from_histogram(hist);
    ASSERT_EQ(intensity_histogram(img), hist);
    EXPECT_EQ(otsu_threshold(img), brute_force_otsu(hist) / static_cast<double>(kOtsuBins)) << trial;
  }
}

TEST(Otsu, Degenerate) {
  EXPECT_THROW(otsu_threshold(ImageTensor({4, 4, 1}, 0.3)), DegenerateInputError);
  // Distinct values inside one bin still form a single-bin histogram.
  EXPECT_THROW(otsu_threshold(ImageTensor({1, 2, 1}, std::vector<double>{0.5, 0.5001})), DegenerateInputError);
  EXPECT_THROW(otsu_threshold(ImageTensor({2, 2, 3}, 0.3)), ShapeError);
}

TEST(KMeans, ExactColors) {
  std::vector<double> v;
  const std::vector<Color> colors{{0.1, 0.2, 0.3}, {0.9, 0.1, 0.5}, {0.4, 0.4, 0.4}};
  for (int p = 0; p < 30; ++p) v.insert(v.end(), colors[p % 3].begin(), colors[p % 3].end());
  ImageTensor img({5, 6, 3}, v);
  auto pal = kmeans_palette(img, 3, 1);
  auto got = pal.colors();
  auto want = colors;
  std::sort(got.begin(), got.end());
  std::sort(want.begin(), want.end());
  for (int k = 0; k < 3; ++k) {
    for (int c = 0; c < 3; ++c) EXPECT_NEAR(got[k][c], want[k][c], 1e-15);
  }
}

TEST(KMeans, SingleClusterIsMean) {
  std::mt19937_64 rng(7);
  auto img = testutil::random_image(rng, {4, 4, 3});
  auto pal = kmeans_palette(img, 1, 9);
  for (int c = 0; c < 3; ++c) {
    double mean = 0.0;
    for (std::size_t p = 0; p < 16; ++p) mean += img.pixel(p)[c];
    EXPECT_NEAR(pal.colors()[0][c], mean / 16.0, 1e-12);
  }
}

TEST(KMeans, TwoBlobs) {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> noise(0.0, 0.02);
  std::vector<double> v;
  const Color centers[] = {{0.2, 0.3, 0.25}, {0.8, 0.7, 0.75}};
  Color sums[2] = {};
  for (int p = 0; p < 200; ++p) {
    for (int c = 0; c < 3; ++c) {
      const double x = std::clamp(centers[p % 2][c] + noise(rng), 0.0, 1.0);
      v.push_back(x);
      sums[p % 2][c] += x;
    }
  }
  auto pal = kmeans_palette(ImageTensor({10, 20, 3}, v), 2, 3);
  auto got = pal.colors();
  std::sort(got.begin(), got.end());
  for (int k = 0; k < 2; ++k) {
    for (int c = 0; c < 3; ++c) EXPECT_NEAR(got[k][c], sums[k][c] / 100.0, 1e-12);
  }
}

TEST(KMeans, DeterministicAndErrors) {
  std::mt19937_64 rng(9);
  auto img = testutil::random_image(rng, {6, 6, 3});
  EXPECT_EQ(kmeans_palette(img, 5, 4).colors(), kmeans_palette(img, 5, 4).colors());
  EXPECT_THROW(kmeans_palette(ImageTensor({2, 2, 3}, 0.5), 2, 0), RangeError);
  EXPECT_THROW(kmeans_palette(img, 0, 0), RangeError);
}

TEST(PaletteFile, RoundTripAndErrors) {
  testutil::TempDir dir;
  PaletteQuantizer q({{0.1, 0.2, 0.3}, {1.0, 0.0, 0.5}});
  write_palette(q, dir.path / "p.txt");
  EXPECT_EQ(read_palette(dir.path / "p.txt").colors(), q.colors());

  {
    std::ofstream f(dir.path / "c.txt");
    f << "# header\n\n0 0 0\n1 1 1  # white\n";
  }
  EXPECT_EQ(read_palette(dir.path / "c.txt").size(), 2u);
  {
    std::ofstream f(dir.path / "bad.txt");
    f << "0 0\n";
  }
  EXPECT_THROW(read_palette(dir.path / "bad.txt"), FormatError);
  {
    std::ofstream f(dir.path / "range.txt");
    f << "0 0 2\n";
  }
  EXPECT_THROW(read_palette(dir.path / "range.txt"), FormatError);
  {
    std::ofstream f(dir.path / "empty.txt");
  }
  EXPECT_THROW(read_palette(dir.path / "empty.txt"), FormatError);
  EXPECT_THROW(read_palette(dir.path / "missing.txt"), IoError);
}
