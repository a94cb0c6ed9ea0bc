#pragma once

// Seeded, margin-guarded finite-difference checks for every layer type and
// for a whole network. Each check draws a fresh random instance and compares
// the analytic gradient of a random linear readout (or the loss itself for
// softmax and networks) against central differences.

#include <chrono>
#include <functional>
#include <string>
#include <vector>

#include "config.hpp"
#include "gradcheck.hpp"
#include "layers.hpp"
#include "topographic.hpp"

namespace epinet {

namespace detail {

inline Tensor<double> gaussian(Shape s, Rng& rng, double scale = 1.0) {
  Tensor<double> t(s);
  for (auto& v : t.values()) v = rng.normal(0.0, scale);
  return t;
}

inline double readout(const Tensor<double>& y, const Tensor<double>& r) {
  if (y.shape() != r.shape()) throw DimensionError("readout shape mismatch");
  double s = 0;
  for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * r[i];
  return s;
}

/// Draws instances until the margin guard holds, then differences them.
/// `make` returns the check to run plus the instance margin.
struct Prepared {
  std::function<GradCheckReport()> run;
  double margin = std::numeric_limits<double>::infinity();
};

inline GradCheckReport guarded_check(const std::function<Prepared(Rng&)>& make, Rng& rng,
                                     const GradCheckOptions& opt) {
  const double threshold = opt.margin_factor * opt.epsilon;
  for (int t = 0; t < 100; ++t) {
    Prepared p = make(rng);
    if (p.margin > threshold) return p.run();
  }
  throw Error("margin guard unsatisfiable after 100 resamples");
}

// Bank-based layers keep their state in shared_ptrs so the returned closure
// owns everything it perturbs.
template <class Bank, class Fwd, class Bwd>
Prepared match_instance(const std::string& label, std::shared_ptr<Bank> bank, Tensor<double>& weights,
                        Shape in, std::size_t stride, Rng& rng, const GradCheckOptions& opt, Fwd fwd, Bwd bwd) {
  auto x = std::make_shared<Tensor<double>>(gaussian(in, rng));
  for (auto& v : weights.values()) v = rng.normal(0.0, 1.0);
  auto f = fwd(*x, *bank, stride);
  auto r = std::make_shared<Tensor<double>>(gaussian(f.output.shape(), rng));
  Prepared p;
  p.margin = f.min_margin;
  p.run = [=, &weights] {
    auto g = bwd(*r, *x, *bank, f.argmax, stride);
    auto loss = [&] { return readout(fwd(*x, *bank, stride).output, *r); };
    const double margin = f.min_margin;
    return check_op(label, loss, {{"input", x->values(), g.input.values()}, {"weights", weights.values(), g.weights.values()}},
                    opt, [margin] { return margin; });
  };
  return p;
}

}  // namespace detail

inline const std::vector<std::string>& gradcheck_layer_names() {
  static const std::vector<std::string> names = {"epitomic", "epitomic-norm", "topographic", "conv", "maxpool",
                                                 "bias-relu", "lrn",           "dropout",     "fc",   "softmax"};
  return names;
}

/// One random instance of the named layer type.
inline GradCheckReport check_layer(const std::string& name, Rng& rng, const GradCheckOptions& opt = {}) {
  using detail::gaussian;
  using detail::Prepared;
  using detail::readout;
  std::function<Prepared(Rng&)> make;
  if (name == "epitomic" || name == "epitomic-norm") {
    const bool norm = name == "epitomic-norm";
    make = [=](Rng& r) {
      auto bank = std::make_shared<EpitomeBank<double>>(2, 5, 3, 2, 1, norm, 0.01);
      return detail::match_instance(
          name, bank, bank->weights, Shape{2, 2, 6, 6}, 1 + r.below(2), r, opt,
          [](const Tensor<double>& x, const EpitomeBank<double>& b, std::size_t s) { return epitomic_forward(x, b, s); },
          [](const Tensor<double>& g, const Tensor<double>& x, const EpitomeBank<double>& b, const ArgmaxMap& a,
             std::size_t s) { return epitomic_backward(g, x, b, a, s); });
    };
  } else if (name == "topographic") {
    make = [=](Rng& r) {
      auto bank =
          std::make_shared<TopographicBank<double>>(EpitomeBank<double>(2, 7, 3, 2, 1, r.bernoulli(0.5), 0.01), 2);
      return detail::match_instance(
          name, bank, bank->epitome.weights, Shape{2, 2, 5, 5}, 2, r, opt,
          [](const Tensor<double>& x, const TopographicBank<double>& b, std::size_t s) {
            return topographic_forward(x, b, s);
          },
          [](const Tensor<double>& g, const Tensor<double>& x, const TopographicBank<double>& b, const ArgmaxMap& a,
             std::size_t s) { return topographic_backward(g, x, b, a, s); });
    };
  } else if (name == "conv") {
    make = [=](Rng& r) {
      auto bank = std::make_shared<ConvBank<double>>(3, 3, 2, 2);
      for (auto& v : bank->weights.values()) v = r.normal(0.0, 1.0);
      auto x = std::make_shared<Tensor<double>>(gaussian(Shape{2, 2, 7, 7}, r));
      auto probe = std::make_shared<Tensor<double>>(gaussian(conv_output_shape(x->shape(), *bank), r));
      Prepared p;
      p.run = [=] {
        auto g = conv_backward(*probe, *x, *bank);
        auto loss = [&] { return readout(conv_forward(*x, *bank), *probe); };
        return check_op(name, loss,
                        {{"input", x->values(), g.input.values()}, {"weights", bank->weights.values(), g.weights.values()}},
                        opt);
      };
      return p;
    };
  } else if (name == "maxpool") {
    make = [=](Rng& r) {
      auto x = std::make_shared<Tensor<double>>(gaussian(Shape{2, 3, 7, 7}, r));
      const auto f = maxpool_forward(*x, 3, 2);
      auto probe = std::make_shared<Tensor<double>>(gaussian(f.output.shape(), r));
      Prepared p;
      p.margin = f.min_margin;
      p.run = [=] {
        const auto g = maxpool_backward(*probe, f.argmax, x->shape(), 3, 2);
        auto loss = [&] { return readout(maxpool_forward(*x, 3, 2).output, *probe); };
        const double m = f.min_margin;
        return check_op(name, loss, {{"input", x->values(), g.values()}}, opt, [m] { return m; });
      };
      return p;
    };
  } else if (name == "bias-relu") {
    make = [=](Rng& r) {
      auto x = std::make_shared<Tensor<double>>(gaussian(Shape{2, 3, 4, 4}, r));
      auto b = std::make_shared<std::vector<double>>(3);
      for (auto& v : *b) v = r.uniform(-0.5, 0.5);
      double margin = std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < x->size(); ++i)
        margin = std::min(margin, std::abs((*x)[i] + (*b)[(i / 16) % 3]));
      const auto y = bias_relu_forward<double>(*x, *b);
      auto probe = std::make_shared<Tensor<double>>(gaussian(y.shape(), r));
      Prepared p;
      p.margin = margin;
      p.run = [=] {
        const auto g = bias_relu_backward(*probe, y);
        auto loss = [&] { return readout(bias_relu_forward<double>(*x, *b), *probe); };
        return check_op(name, loss, {{"input", x->values(), g.input.values()}, {"biases", *b, g.biases}}, opt,
                        [margin] { return margin; });
      };
      return p;
    };
  } else if (name == "lrn") {
    make = [=](Rng& r) {
      auto x = std::make_shared<Tensor<double>>(gaussian(Shape{2, 7, 3, 3}, r, 2.0));
      LrnParams lp;
      lp.alpha = 0.5;  // large enough for the normalizer to matter on unit-scale inputs
      lp.k = 1.5;
      auto probe = std::make_shared<Tensor<double>>(gaussian(x->shape(), r));
      Prepared p;
      p.run = [=] {
        const auto g = lrn_backward(*probe, *x, lp);
        auto loss = [&] { return readout(lrn_forward(*x, lp), *probe); };
        return check_op(name, loss, {{"input", x->values(), g.values()}}, opt);
      };
      return p;
    };
  } else if (name == "dropout") {
    make = [=](Rng& r) {
      auto x = std::make_shared<Tensor<double>>(gaussian(Shape{2, 3, 4, 4}, r));
      auto probe = std::make_shared<Tensor<double>>(gaussian(x->shape(), r));
      const Rng mask_rng(r.next());
      Prepared p;
      p.run = [=] {
        DropoutState st;
        Rng m = mask_rng;
        dropout_forward(*x, st, m);
        const auto g = dropout_backward(*probe, st);
        auto loss = [&] {
          DropoutState s2;
          Rng m2 = mask_rng;
          return readout(dropout_forward(*x, s2, m2), *probe);
        };
        return check_op(name, loss, {{"input", x->values(), g.values()}}, opt);
      };
      return p;
    };
  } else if (name == "fc") {
    make = [=](Rng& r) {
      auto x = std::make_shared<Tensor<double>>(gaussian(Shape{3, 2, 2, 2}, r));
      auto w = std::make_shared<Tensor<double>>(gaussian(Shape{5, 8, 1, 1}, r, 0.5));
      auto b = std::make_shared<std::vector<double>>(5);
      for (auto& v : *b) v = r.uniform(-0.5, 0.5);
      auto probe = std::make_shared<Tensor<double>>(gaussian(Shape{3, 5, 1, 1}, r));
      Prepared p;
      p.run = [=] {
        const auto g = fc_backward(*probe, *x, *w);
        auto loss = [&] { return readout(fc_forward<double>(*x, *w, *b), *probe); };
        return check_op(name, loss,
                        {{"input", x->values(), g.input.values()},
                         {"weights", w->values(), g.weights.values()},
                         {"biases", *b, g.biases}},
                        opt);
      };
      return p;
    };
  } else if (name == "softmax") {
    make = [=](Rng& r) {
      auto z = std::make_shared<Tensor<double>>(gaussian(Shape{4, 10, 1, 1}, r, 2.0));
      auto labels = std::make_shared<std::vector<int>>();
      for (int i = 0; i < 4; ++i) labels->push_back(static_cast<int>(r.below(10)));
      Prepared p;
      p.run = [=] {
        const auto g = softmax_loss<double>(*z, *labels).grad;
        auto loss = [&] { return softmax_loss<double>(*z, *labels).loss; };
        return check_op(name, loss, {{"logits", z->values(), g.values()}}, opt);
      };
      return p;
    };
  } else {
    throw Error("no gradient check for layer type '" + name + "'");
  }
  return detail::guarded_check(make, rng, opt);
}

/// One random instance of a whole network: parameters are redrawn at unit
/// scale and a random batch with random labels is drawn.
inline GradCheckReport check_network_instance(const NetworkConfig& cfg, Rng& rng, const GradCheckOptions& opt = {},
                                              std::size_t batch = 2) {
  const double threshold = opt.margin_factor * opt.epsilon;
  for (int t = 0; t < 100; ++t) {
    Network<double> net(cfg, rng.next());
    randomize_for_gradcheck(net, rng);
    Tensor<double> x(cfg.input.batch(batch));
    for (auto& v : x.values()) v = rng.normal(0.0, 1.0);
    std::vector<int> labels;
    for (std::size_t i = 0; i < batch; ++i) labels.push_back(static_cast<int>(rng.below(cfg.classes)));
    net.forward(x, labels, Mode::eval);
    const double margin = net.min_margin();
    for (std::size_t i = 0; i < net.size(); ++i) net.layer(i).release();
    if (margin > threshold) return check_network("network", net, x, labels, opt);
  }
  throw Error("margin guard unsatisfiable after 100 resamples");
}

struct SuiteEntry {
  std::string name;
  std::size_t instances = 0;
  std::size_t passed = 0;
  double max_rel_error = 0.0;
  double seconds = 0.0;
  std::vector<GradCheckReport> reports;
  bool pass() const { return passed == instances; }
};

/// `instances` seeded checks of every layer type, then of the network when
/// one is given. Seeds are derived per check so entries are independent.
inline std::vector<SuiteEntry> run_gradcheck_suite(std::uint64_t seed, std::size_t instances,
                                                   const NetworkConfig* net = nullptr,
                                                   const GradCheckOptions& opt = {}) {
  std::vector<SuiteEntry> out;
  std::vector<std::string> names = gradcheck_layer_names();
  if (net) names.push_back("network");
  for (std::size_t e = 0; e < names.size(); ++e) {
    SuiteEntry entry;
    entry.name = names[e];
    const auto t0 = std::chrono::steady_clock::now();
    for (std::size_t i = 0; i < instances; ++i) {
      Rng rng = Rng::stream(seed, e * 1000 + i);
      GradCheckReport rep = names[e] == "network" ? check_network_instance(*net, rng, opt) : check_layer(names[e], rng, opt);
      rep.label = names[e] + "#" + std::to_string(i);
      ++entry.instances;
      entry.passed += rep.pass ? 1 : 0;
      entry.max_rel_error = std::max(entry.max_rel_error, rep.max_rel_error());
      entry.reports.push_back(std::move(rep));
    }
    entry.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out.push_back(std::move(entry));
  }
  return out;
}

}  // namespace epinet
