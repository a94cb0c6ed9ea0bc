#include <gtest/gtest.h>

#include <cmath>
#include <fstream>

#include <epinet/gradsuite.hpp>
#include <epinet/network.hpp>

using namespace epinet;

namespace {

std::string cfg_path(const std::string& name) { return std::string(EPINET_CONFIG_DIR) + "/" + name; }

// The MNIST architecture with every layer at the default init_std.
NetworkConfig default_init_mnist() {
  std::ifstream f(cfg_path("mnist-epitomic.net"));
  std::string text, line;
  while (std::getline(f, line))
    if (line.rfind("init_std", 0) != 0) text += line + "\n";
  return parse_config(text);
}

template <class T>
Tensor<T> random_batch(const NetworkConfig& cfg, std::size_t n, Rng& rng) {
  Tensor<T> x(cfg.input.batch(n));
  for (auto& v : x.values()) v = static_cast<T>(rng.normal(0.0, 1.0));
  return x;
}

std::vector<int> random_labels(std::size_t n, std::size_t classes, Rng& rng) {
  std::vector<int> l;
  for (std::size_t i = 0; i < n; ++i) l.push_back(static_cast<int>(rng.below(classes)));
  return l;
}

const char* kFcOnly = R"(
[net]
input = 2x2x2
classes = 3
[layer fc]
type = fc
channels = 3
[layer out]
type = softmax
)";

}  // namespace

TEST(Network, UntrainedMnistLossNearLogTen) {
  const auto cfg = default_init_mnist();
  Network<float> net(cfg, 3);
  Rng rng(4);
  Tensor<float> x(cfg.input.batch(16));
  for (auto& v : x.values()) v = static_cast<float>(rng.uniform());
  const auto labels = random_labels(16, 10, rng);
  EXPECT_NEAR(net.forward(x, labels, Mode::eval).loss, std::log(10.0), 0.1);
}

TEST(Network, FcSoftmaxGradientMatchesClosedForm) {
  const auto cfg = parse_config(kFcOnly);
  Network<double> net(cfg, 1);
  Rng rng(2);
  for (auto* p : net.params())
    for (auto& v : p->value.values()) v = rng.normal(0.0, 1.0);
  const auto x = random_batch<double>(cfg, 4, rng);
  const auto labels = random_labels(4, 3, rng);
  const auto fwd = net.forward(x, labels, Mode::train);
  net.backward();
  const auto& gw = net.params()[0]->grad;
  for (std::size_t j = 0; j < 3; ++j)
    for (std::size_t i = 0; i < 8; ++i) {
      double want = 0;
      for (std::size_t n = 0; n < 4; ++n) {
        const double delta = fwd.probabilities[n * 3 + j] - (labels[n] == static_cast<int>(j) ? 1.0 : 0.0);
        want += delta * x[n * 8 + i] / 4.0;
      }
      ASSERT_NEAR(gw(j, i, 0, 0), want, 1e-15);
    }
}

TEST(Network, EvalPredictionsAreDeterministic) {
  const auto cfg = load_config(cfg_path("mnist-epitomic.net"));
  Network<float> net(cfg, 9);
  Rng rng(1);
  const auto x = random_batch<float>(cfg, 8, rng);
  EXPECT_EQ(net.predict(x), net.predict(x));
  auto copy = net.clone();
  EXPECT_EQ(copy.predict(x), net.predict(x));
}

TEST(Network, BackwardWithoutForwardThrows) {
  Network<float> net(parse_config(kFcOnly), 1);
  EXPECT_THROW(net.backward(), StateError);
  Rng rng(1);
  const auto x = random_batch<float>(net.config(), 2, rng);
  const std::vector<int> labels = {0, 1};
  net.forward(x, labels, Mode::train);
  net.backward();
  EXPECT_THROW(net.backward(), StateError);
  net.predict(x);
  EXPECT_THROW(net.backward(), StateError);
}

TEST(Network, WrongInputShapeThrows) {
  Network<float> net(parse_config(kFcOnly), 1);
  EXPECT_THROW(net.predict(Tensor<float>(Shape{1, 1, 2, 2})), DimensionError);
}

TEST(Network, SameSeedSameInitialization) {
  const auto cfg = load_config(cfg_path("mnist-epitomic.net"));
  Network<float> a(cfg, 5), b(cfg, 5), c(cfg, 6);
  auto pa = a.params(), pb = b.params(), pc = c.params();
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(pa[i]->value, pb[i]->value);
  EXPECT_NE(pa[0]->value, pc[0]->value);
}

TEST(Network, NormalizedEpitomesAreExcludedFromDecay) {
  const auto cfg = load_config(cfg_path("mnist-epitomic-norm.net"));
  Network<float> net(cfg, 1);
  for (auto* p : net.params()) {
    const bool epitome = p->name.find('e') == 0 && p->rank == 4;
    if (epitome || p->rank == 1) {
      EXPECT_FALSE(p->decay) << p->name;
    } else {
      EXPECT_TRUE(p->decay) << p->name;
    }
  }
  const auto plain = load_config(cfg_path("mnist-epitomic.net"));
  Network<float> pnet(plain, 1);
  EXPECT_TRUE(pnet.params()[0]->decay);
}

TEST(Network, RuntimeShapesMatchInferenceForShippedConfigs) {
  for (const char* name : {"mnist-epitomic.net", "mnist-epitomic-norm.net", "cifar10-epitomic.net", "gradcheck-tiny.net"}) {
    const auto cfg = load_config(cfg_path(name));
    Network<float> net(cfg, 1);
    Rng rng(1);
    net.predict(random_batch<float>(cfg, 2, rng));
    const auto& shapes = net.runtime_shapes();
    ASSERT_EQ(shapes.size(), cfg.layers.size()) << name;
    for (std::size_t i = 0; i < shapes.size(); ++i) EXPECT_EQ(shapes[i], cfg.layers[i].out.batch(2)) << name << " " << i;
  }
}

TEST(Network, OverfittingLossDecreasesStrictly) {
  const auto cfg = default_init_mnist();
  Network<float> net(cfg, 11);
  SgdConfig sgd;
  SgdOptimizer<float> opt(net, sgd);
  Rng rng(12);
  Tensor<float> x(cfg.input.batch(32));
  for (auto& v : x.values()) v = static_cast<float>(rng.uniform());
  const auto labels = random_labels(32, 10, rng);
  // eval mode keeps the objective fixed; dropout would make it stochastic
  double prev = net.forward(x, labels, Mode::eval).loss;
  for (int step = 0; step < 20; ++step) {
    net.backward();
    opt.step(net, 0);
    const double loss = net.forward(x, labels, Mode::eval).loss;
    EXPECT_LT(loss, prev) << "step " << step;
    prev = loss;
  }
}

TEST(Network, TinyNetEndToEndGradients) {
  const auto cfg = load_config(cfg_path("gradcheck-tiny.net"));
  for (std::uint64_t i = 0; i < 3; ++i) {
    Rng rng = Rng::stream(77, i);
    const auto rep = check_network_instance(cfg, rng);
    EXPECT_TRUE(rep.pass) << rep.text();
    EXPECT_EQ(rep.blocks.size(), 6u);
  }
}

TEST(Network, CountersTrackInnerProducts) {
  const auto cfg = load_config(cfg_path("gradcheck-tiny.net"));
  Network<float> net(cfg, 1);
  Rng rng(3);
  net.predict(random_batch<float>(cfg, 2, rng));
  // e1: 36 sites x 4 epitomes x 9 candidates; e2: 4 sites x 6 x 4; fc: 3 outputs
  EXPECT_EQ(net.counter().inner_products, 2u * (36 * 4 * 9 + 4 * 6 * 4 + 3));
}
