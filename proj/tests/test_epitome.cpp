#include <gtest/gtest.h>

#include <epinet/epitome.hpp>
#include <epinet/gradcheck.hpp>
#include <epinet/layers.hpp>

#include "oracles.hpp"

using namespace epinet;

namespace {

EpitomeBank<double> one_to_nine() {
  EpitomeBank<double> bank(1, 3, 2, 1, 1);
  for (std::size_t i = 0; i < 9; ++i) bank.weights[i] = static_cast<double>(i + 1);
  return bank;
}

Tensor<double> two_by_two() { return Tensor<double>(Shape{1, 1, 2, 2}, std::vector<double>{1, 2, 3, 4}); }

struct Instance {
  Tensor<double> input;
  EpitomeBank<double> bank;
  Tensor<double> probe;  // loss = <probe, output>
  std::size_t stride;
  double margin;
};

Instance random_instance(Rng& rng, std::size_t k, std::size_t v, std::size_t w, std::size_t c, std::size_t side,
                         std::size_t stride, std::size_t es, bool norm) {
  Instance inst{oracle::random_tensor<double>(Shape{2, c, side, side}, rng),
                EpitomeBank<double>(k, v, w, c, es, norm, 0.01), {}, stride, 0};
  oracle::fill_normal(inst.bank.weights, rng);
  auto fwd = epitomic_forward(inst.input, inst.bank, stride);
  inst.probe = oracle::random_tensor<double>(fwd.output.shape(), rng);
  inst.margin = fwd.min_margin;
  return inst;
}

GradCheckReport check_instance(Instance& inst, const std::string& label) {
  auto fwd = epitomic_forward(inst.input, inst.bank, inst.stride);
  auto g = epitomic_backward(inst.probe, inst.input, inst.bank, fwd.argmax, inst.stride);
  auto loss = [&] { return oracle::weighted_sum(epitomic_forward(inst.input, inst.bank, inst.stride).output, inst.probe); };
  return check_op(label, loss,
                  {{"input", inst.input.values(), g.input.values()}, {"weights", inst.bank.weights.values(), g.weights.values()}},
                  {}, [&] { return inst.margin; });
}

}  // namespace

TEST(ExtractFilter, EqualSizesGiveWholeEpitome) {
  EpitomeBank<double> bank(1, 3, 3, 1);
  for (std::size_t i = 0; i < 9; ++i) bank.weights[i] = static_cast<double>(i);
  EXPECT_EQ(bank.candidates(), 1u);
  const auto f = extract_filter(bank, 0, {0, 0});
  EXPECT_EQ(f.flatten(), std::vector<double>(bank.weights.values().begin(), bank.weights.values().end()));
}

TEST(ExtractFilter, SubWindowAtOffset) {
  const auto bank = one_to_nine();
  EXPECT_EQ(extract_filter(bank, 0, {1, 1}).flatten(), (std::vector<double>{5, 6, 8, 9}));
}

TEST(ExtractFilter, OutOfRangeDisplacement) {
  const auto bank = one_to_nine();
  EXPECT_THROW(extract_filter(bank, 0, {2, 0}), RangeError);
  EpitomeBank<double> strided(1, 5, 2, 1, 2);
  EXPECT_THROW(extract_filter(strided, 0, {1, 0}), RangeError);
  EXPECT_NO_THROW(extract_filter(strided, 0, {2, 2}));
}

TEST(ExtractFilter, OverlappingWindowsAliasStorage) {
  const auto bank = one_to_nine();
  const auto a = extract_filter(bank, 0, {0, 0});
  const auto b = extract_filter(bank, 0, {1, 1});
  EXPECT_EQ(a.cell(0, 1, 1), b.cell(0, 0, 0));
  EXPECT_EQ(a.cell(0, 1, 1), &bank.weights(0, 0, 1, 1));
}

TEST(EpitomicForward, SingleFilterReducesToInnerProduct) {
  EpitomeBank<double> bank(1, 2, 2, 1);
  const std::vector<double> w = {0.5, -1.5, 2.0, 3.0};
  std::copy(w.begin(), w.end(), bank.weights.data());
  Tensor<double> x(Shape{1, 1, 2, 2}, w);
  const auto r = epitomic_forward(x, bank, 1);
  EXPECT_DOUBLE_EQ(r.output[0], 0.25 + 2.25 + 4.0 + 9.0);
  EXPECT_EQ(r.argmax[0], (Displacement{0, 0}));
}

TEST(EpitomicForward, BruteForceHandExample) {
  const auto r = epitomic_forward(two_by_two(), one_to_nine(), 1);
  // candidate scores 37, 47, 67, 77
  EXPECT_EQ(r.output.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_DOUBLE_EQ(r.output[0], 77.0);
  EXPECT_EQ(r.argmax[0], (Displacement{1, 1}));
  EXPECT_DOUBLE_EQ(r.min_margin, 10.0);
}

TEST(EpitomicForward, ImagenetFirstLayerShapes) {
  EpitomeBank<float> bank(96, 12, 8, 3, 2);
  EXPECT_EQ(bank.candidates() * bank.candidates(), 9u);
  EXPECT_EQ(epitomic_output_shape(Shape{1, 3, 220, 220}, bank, 4), (Shape{1, 96, 54, 54}));
  Rng rng(1);
  bank.init_gaussian(rng);
  Tensor<float> x(Shape{1, 3, 220, 220});
  oracle::fill_normal(x, rng);
  const auto r = epitomic_forward(x, bank, 4);
  EXPECT_EQ(r.output.shape(), (Shape{1, 96, 54, 54}));
  for (std::size_t i = 0; i < r.argmax.size(); ++i) {
    ASSERT_LE(r.argmax[i].dy, 4);
    ASSERT_EQ(r.argmax[i].dy % 2, 0);
    ASSERT_EQ(r.argmax[i].dx % 2, 0);
  }
}

TEST(EpitomicForward, TiesResolveToFirstDisplacement) {
  EpitomeBank<double> bank(1, 4, 2, 1);
  bank.weights.fill(1.0);
  Tensor<double> x(Shape{1, 1, 2, 2}, 1.0);
  const auto r = epitomic_forward(x, bank, 1);
  EXPECT_EQ(r.argmax[0], (Displacement{0, 0}));
  EXPECT_EQ(r.min_margin, 0.0);
}

TEST(EpitomicForward, NormalizedConstantFilterRespondsZero) {
  EpitomeBank<double> bank(1, 3, 3, 1, 1, true, 0.01);
  bank.weights.fill(2.5);
  Rng rng(4);
  const auto x = oracle::random_tensor<double>(Shape{1, 1, 3, 3}, rng);
  EXPECT_EQ(epitomic_forward(x, bank, 1).output[0], 0.0);
}

TEST(EpitomicForward, NormalizedTwoElementExample) {
  EpitomeBank<double> bank(1, 2, 1, 2, 1, true, 0.01);  // W=1, C=2: the filter is [3, -1]
  bank.weights.fill(0.0);
  bank.weights(0, 0, 0, 0) = 3.0;
  bank.weights(0, 1, 0, 0) = -1.0;
  Tensor<double> x(Shape{1, 2, 1, 1}, std::vector<double>{1.0, 0.0});
  const auto r = epitomic_forward(x, bank, 1);
  // Other candidates are all-zero filters; the [3, -1] window scores 2 / sqrt(8.01).
  EXPECT_NEAR(r.output[0], 2.0 / std::sqrt(8.01), 1e-15);
  EXPECT_NEAR(r.output[0], 0.70666, 1e-5);
  EXPECT_EQ(r.argmax[0], (Displacement{0, 0}));
}

TEST(EpitomicForward, ChannelMismatchAndSmallInputThrow) {
  EpitomeBank<double> bank(2, 4, 3, 2);
  EXPECT_THROW(epitomic_forward(Tensor<double>(Shape{1, 3, 5, 5}), bank, 1), DimensionError);
  EXPECT_THROW(epitomic_forward(Tensor<double>(Shape{1, 2, 2, 5}), bank, 1), DimensionError);
}

#ifndef NDEBUG
TEST(EpitomicForward, NanScoresAreRejectedInDebug) {
  EpitomeBank<double> bank(1, 3, 2, 1);
  bank.weights[0] = std::nan("");
  EXPECT_THROW(epitomic_forward(two_by_two(), bank, 1), NumericError);
}
#endif

TEST(EpitomicBackward, ZeroUpstreamGivesZeroGradients) {
  const auto x = two_by_two();
  const auto bank = one_to_nine();
  const auto fwd = epitomic_forward(x, bank, 1);
  const auto g = epitomic_backward(Tensor<double>(fwd.output.shape()), x, bank, fwd.argmax, 1);
  EXPECT_EQ(g.input, Tensor<double>(x.shape()));
  EXPECT_EQ(g.weights, Tensor<double>(bank.weights.shape()));
}

TEST(EpitomicBackward, HandExampleRoutesThroughWinner) {
  const auto x = two_by_two();
  const auto bank = one_to_nine();
  const auto fwd = epitomic_forward(x, bank, 1);
  const auto g = epitomic_backward(Tensor<double>(fwd.output.shape(), 1.0), x, bank, fwd.argmax, 1);
  EXPECT_EQ(std::vector<double>(g.weights.values().begin(), g.weights.values().end()),
            (std::vector<double>{0, 0, 0, 0, 1, 2, 0, 3, 4}));
  EXPECT_EQ(std::vector<double>(g.input.values().begin(), g.input.values().end()), (std::vector<double>{5, 6, 8, 9}));
}

TEST(EpitomicBackward, OverlappingWinnersSumIntoSharedCells) {
  EpitomeBank<double> bank(1, 3, 2, 1);
  const std::vector<double> v = {3, 0, 0.5, 0, 2, 1, 0, 0, 0};
  std::copy(v.begin(), v.end(), bank.weights.data());
  Tensor<double> x(Shape{1, 1, 2, 4}, std::vector<double>{1, 0, 0, 1, 0, 1, 1, 0});
  const auto fwd = epitomic_forward(x, bank, 2);
  ASSERT_EQ(fwd.argmax[0], (Displacement{0, 0}));
  ASSERT_EQ(fwd.argmax[1], (Displacement{0, 1}));
  Tensor<double> up(fwd.output.shape(), 1.0);
  const auto g = epitomic_backward(up, x, bank, fwd.argmax, 2);
  EXPECT_EQ(std::vector<double>(g.weights.values().begin(), g.weights.values().end()),
            (std::vector<double>{1, 0, 1, 0, 2, 0, 0, 0, 0}));
  Instance inst{x, bank, up, 2, fwd.min_margin};
  const auto rep = check_instance(inst, "overlap");
  EXPECT_TRUE(rep.pass) << rep.text();
}

TEST(EpitomicBackward, ArgmaxFromDifferentInputIsRejected) {
  const auto bank = one_to_nine();
  const auto fwd = epitomic_forward(two_by_two(), bank, 1);
  Tensor<double> bigger(Shape{1, 1, 3, 3});
  EXPECT_THROW(epitomic_backward(Tensor<double>(Shape{1, 1, 2, 2}), bigger, bank, fwd.argmax, 1), DimensionError);
}

TEST(EpitomicBackward, ArgmaxSparsityAtSingleSite) {
  Rng rng(8);
  EpitomeBank<double> bank(3, 6, 3, 2, 1);
  oracle::fill_normal(bank.weights, rng);
  const auto x = oracle::random_tensor<double>(Shape{1, 2, 3, 3}, rng);
  const auto fwd = epitomic_forward(x, bank, 1);
  for (std::size_t k = 0; k < 3; ++k) {
    Tensor<double> up(fwd.output.shape());
    up[k] = 1.0;
    const auto g = epitomic_backward(up, x, bank, fwd.argmax, 1);
    const Displacement p = fwd.argmax[k];
    for (std::size_t kk = 0; kk < 3; ++kk)
      for (std::size_t c = 0; c < 2; ++c)
        for (std::size_t y = 0; y < 6; ++y)
          for (std::size_t xx = 0; xx < 6; ++xx) {
            const bool inside = kk == k && y >= p.dy && y < p.dy + 3u && xx >= p.dx && xx < p.dx + 3u;
            if (!inside) {
              ASSERT_EQ(g.weights(kk, c, y, xx), 0.0);
            } else {
              ASSERT_EQ(g.weights(kk, c, y, xx), x(0, c, y - p.dy, xx - p.dx));
            }
          }
  }
}

// Forward equals the max over explicitly extracted filters, both against the
// shared arithmetic path (exact) and an independent long-double oracle.
TEST(EpitomicForward, MaxoutOracleEquivalence) {
  Rng rng(2024);
  for (int trial = 0; trial < 60; ++trial) {
    const std::size_t k = 1 + rng.below(4), w = 1 + rng.below(5), c = 1 + rng.below(3);
    const std::size_t v = w + rng.below(9 - w), es = 1 + rng.below(2), stride = 1 + rng.below(3);
    const bool norm = rng.bernoulli(0.5);
    EpitomeBank<double> bank(k, v, w, c, es, norm, 0.01);
    oracle::fill_normal(bank.weights, rng);
    const std::size_t side = w + rng.below(5);
    const auto x = oracle::random_tensor<double>(Shape{2, c, side, side}, rng);
    const auto r = epitomic_forward(x, bank, stride);
    const std::size_t nc = bank.candidates();
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t oy = 0; oy < r.output.shape().h; ++oy)
        for (std::size_t ox = 0; ox < r.output.shape().w; ++ox)
          for (std::size_t kk = 0; kk < k; ++kk) {
            const auto ref = oracle::best(x, n, oy * stride, ox * stride, bank, kk, 0, nc, 0, nc);
            ASSERT_NEAR(r.output(n, kk, oy, ox), static_cast<double>(ref.value), 1e-12);
            if (r.min_margin > 1e-9) {
              const Displacement want{static_cast<std::uint8_t>(ref.dy), static_cast<std::uint8_t>(ref.dx)};
              ASSERT_EQ(r.argmax(n, kk, oy, ox), want);
            }
          }
  }
}

TEST(EpitomicForward, EqualSizesMatchConvolutionBitwise) {
  Rng rng(6);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t k = 1 + rng.below(5), w = 1 + rng.below(4), c = 1 + rng.below(3), stride = 1 + rng.below(3);
    EpitomeBank<float> bank(k, w, w, c);
    oracle::fill_normal(bank.weights, rng);
    ConvBank<float> conv(k, w, c, stride);
    conv.weights = bank.weights;
    const auto x = oracle::random_tensor<float>(Shape{3, c, w + 4, w + 5}, rng);
    EXPECT_EQ(epitomic_forward(x, bank, stride).output, conv_forward(x, conv));
  }
}

TEST(EpitomicBackward, FiniteDifferenceGradients) {
  Rng rng(77);
  for (bool norm : {false, true})
    for (int trial = 0; trial < 5; ++trial) {
      std::function<Instance(Rng&)> make = [norm](Rng& r) { return random_instance(r, 2, 5, 3, 2, 6, 1, 1, norm); };
      std::function<double(Instance&)> margin = [](Instance& i) { return i.margin; };
      auto inst = guarded_instance(make, margin, rng);
      const auto rep = check_instance(inst, norm ? "normalized" : "plain");
      EXPECT_TRUE(rep.pass) << rep.text();
    }
}

TEST(EpitomicBackward, NormalizedClosedFormMatchesHandDerivation) {
  // Single W=1, C=2 window: w = [a, b]; r = x.wc / n.
  EpitomeBank<double> bank(1, 1, 1, 2, 1, true, 0.01);
  bank.weights(0, 0, 0, 0) = 3.0;
  bank.weights(0, 1, 0, 0) = -1.0;
  Tensor<double> x(Shape{1, 2, 1, 1}, std::vector<double>{1.0, 0.0});
  const auto fwd = epitomic_forward(x, bank, 1);
  const auto g = epitomic_backward(Tensor<double>(fwd.output.shape(), 1.0), x, bank, fwd.argmax, 1);
  const double n = std::sqrt(8.01), r = 2.0 / n;
  // (x - mean(x)) / n - r * wc / n^2 with x - mean = [0.5, -0.5], wc = [2, -2]
  EXPECT_NEAR(g.weights[0], 0.5 / n - r * 2.0 / (n * n), 1e-14);
  EXPECT_NEAR(g.weights[1], -0.5 / n + r * 2.0 / (n * n), 1e-14);
  EXPECT_NEAR(g.input[0], 2.0 / n, 1e-14);
  EXPECT_NEAR(g.input[1], -2.0 / n, 1e-14);
}

TEST(Normalization, MeanShiftInvarianceIsExact) {
  Rng rng(31);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t k = 1 + rng.below(3), w = 1 + rng.below(4), c = 1 + rng.below(3);
    EpitomeBank<double> bank(k, w + rng.below(4), w, c, 1, true, 0.01);
    oracle::fill_dyadic(bank.weights, rng);
    Tensor<double> x(Shape{1, c, w + 3, w + 3});
    oracle::fill_dyadic(x, rng);
    const auto before = epitomic_forward(x, bank, 1);
    auto shifted = bank;
    const double shift = static_cast<double>(static_cast<int>(rng.below(33)) - 16) / 4.0;
    for (auto& v : shifted.weights.values()) v += shift;
    const auto after = epitomic_forward(x, shifted, 1);
    ASSERT_EQ(before.output, after.output);
    ASSERT_EQ(before.argmax, after.argmax);
  }
}

TEST(Normalization, PositiveScaleInvarianceWithoutLambda) {
  Rng rng(37);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t w = 2 + rng.below(3), c = 1 + rng.below(2);
    EpitomeBank<double> bank(2, w + 2, w, c, 1, true, 0.0);
    oracle::fill_normal(bank.weights, rng);
    const auto x = oracle::random_tensor<double>(Shape{1, c, w + 2, w + 2}, rng);
    const auto before = epitomic_forward(x, bank, 1);
    for (double scale : {0.25, 0.5, 2.0, 8.0}) {
      auto scaled = bank;
      for (auto& v : scaled.weights.values()) v *= scale;
      const auto after = epitomic_forward(x, scaled, 1);
      ASSERT_EQ(before.output, after.output);
      ASSERT_EQ(before.argmax, after.argmax);
    }
  }
}

// With lambda > 0 the contrast term does not scale with the weights, so a
// low-contrast candidate that is better aligned with x can overtake a
// high-contrast one once everything is scaled up.
TEST(Normalization, PositiveLambdaScalingCanReorderCandidates) {
  EpitomeBank<double> bank(1, 2, 1, 3, 1, true, 0.01);  // W = 1, C = 3, candidates (0,0) (0,1) (1,0) (1,1)
  bank.weights.fill(0.0);
  const double a[3] = {1.0, -1.0, 0.0}, b[3] = {0.02, 0.0, -0.02};
  for (std::size_t c = 0; c < 3; ++c) {
    bank.weights(0, c, 0, 0) = a[c];
    bank.weights(0, c, 0, 1) = b[c];
  }
  Tensor<double> x(Shape{1, 3, 1, 1}, std::vector<double>{1.0, 0.0, -1.0});
  const auto unit = epitomic_forward(x, bank, 1);
  EXPECT_NEAR(unit.output[0], 1.0 / std::sqrt(2.01), 1e-12);
  EXPECT_EQ(unit.argmax[0], (Displacement{0, 0}));
  auto big = bank;
  for (auto& v : big.weights.values()) v *= 100.0;
  const auto scaled = epitomic_forward(x, big, 1);
  EXPECT_NEAR(scaled.output[0], 4.0 / std::sqrt(8.01), 1e-12);
  EXPECT_EQ(scaled.argmax[0], (Displacement{0, 1}));
}
