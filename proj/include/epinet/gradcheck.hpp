#pragma once

// Central finite-difference oracle for the hand-written backward passes.

#include <cmath>
#include <functional>
#include <iomanip>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "errors.hpp"
#include "network.hpp"
#include "rng.hpp"

namespace epinet {

struct GradCheckOptions {
  double epsilon = 1e-5;
  double tolerance = 1e-4;
  /// Check at most this many elements per block (0 = all), picked at random.
  std::size_t max_per_block = 0;
  std::uint64_t sample_seed = 0;
  /// Instances must keep every max / ReLU this far from its kink.
  double margin_factor = 10.0;
};

/// Values are perturbed in place; `analytic` holds the gradient under test.
struct ParamBlock {
  std::string name;
  std::span<double> values;
  std::span<const double> analytic;
};

struct BlockReport {
  std::string name;
  std::size_t checked = 0;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;  // at worst_index
  double numeric = 0.0;   // at worst_index
  bool pass = true;
};

struct GradCheckReport {
  std::string label;
  std::vector<BlockReport> blocks;
  double min_margin = std::numeric_limits<double>::infinity();
  double margin_threshold = 0.0;
  double tolerance = 0.0;
  bool pass = true;

  double max_rel_error() const {
    double m = 0;
    for (const auto& b : blocks) m = std::max(m, b.max_rel_error);
    return m;
  }

  std::string text() const {
    std::ostringstream os;
    os << std::setprecision(4);
    os << (pass ? "PASS " : "FAIL ") << label << "  max_rel_err=" << max_rel_error() << "  margin=" << min_margin
       << "\n";
    for (const auto& b : blocks)
      os << "  " << (b.pass ? "ok   " : "BAD  ") << b.name << "  n=" << b.checked << "  max_rel_err=" << b.max_rel_error
         << "  worst[" << b.worst_index << "] analytic=" << b.analytic << " numeric=" << b.numeric << "\n";
    return os.str();
  }

  static std::string csv_header() {
    return "check,block,elements,max_rel_error,worst_index,analytic,numeric,min_margin,pass\n";
  }

  std::string csv_rows() const {
    std::ostringstream os;
    os << std::setprecision(10);
    for (const auto& b : blocks)
      os << label << ',' << b.name << ',' << b.checked << ',' << b.max_rel_error << ',' << b.worst_index << ','
         << b.analytic << ',' << b.numeric << ',' << min_margin << ',' << (b.pass ? 1 : 0) << "\n";
    return os.str();
  }
};

inline double relative_error(double a, double n) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-8});
}

/// Differencing of `loss` around the current values of every block.
/// `margin` reports the instance's distance from the nearest kink; it must
/// exceed margin_factor * epsilon.
inline GradCheckReport check_op(const std::string& label, const std::function<double()>& loss,
                                std::vector<ParamBlock> blocks, const GradCheckOptions& opt = {},
                                const std::function<double()>& margin = {}) {
  GradCheckReport rep;
  rep.label = label;
  rep.tolerance = opt.tolerance;
  rep.margin_threshold = opt.margin_factor * opt.epsilon;
  if (margin) {
    rep.min_margin = margin();
    if (!(rep.min_margin > rep.margin_threshold))
      throw Error(label + ": instance margin " + std::to_string(rep.min_margin) + " violates the guard " +
                  std::to_string(rep.margin_threshold));
  }
  Rng pick(opt.sample_seed);
  for (auto& block : blocks) {
    if (block.values.size() != block.analytic.size())
      throw DimensionError(label + ": block '" + block.name + "' has mismatched analytic gradient");
    std::vector<std::size_t> idx;
    if (opt.max_per_block == 0 || block.values.size() <= opt.max_per_block) {
      for (std::size_t i = 0; i < block.values.size(); ++i) idx.push_back(i);
    } else {
      for (std::size_t i = 0; i < opt.max_per_block; ++i) idx.push_back(pick.below(block.values.size()));
    }
    BlockReport br;
    br.name = block.name;
    for (std::size_t i : idx) {
      const double saved = block.values[i];
      block.values[i] = saved + opt.epsilon;
      const double up = loss();
      block.values[i] = saved - opt.epsilon;
      const double down = loss();
      block.values[i] = saved;
      if (!std::isfinite(up) || !std::isfinite(down))
        throw NumericError(label + ": non-finite loss while perturbing " + block.name);
      const double a = block.analytic[i];
      if (!std::isfinite(a)) throw NumericError(label + ": non-finite analytic gradient in " + block.name);
      const double numeric = (up - down) / (2.0 * opt.epsilon);
      const double err = relative_error(a, numeric);
      ++br.checked;
      if (err >= br.max_rel_error) {
        br.max_rel_error = err;
        br.worst_index = i;
        br.analytic = a;
        br.numeric = numeric;
      }
    }
    br.pass = br.max_rel_error < opt.tolerance;
    rep.pass = rep.pass && br.pass;
    rep.blocks.push_back(std::move(br));
  }
  return rep;
}

/// Regenerates an instance until its margin clears the guard.
template <class Instance>
Instance guarded_instance(const std::function<Instance(Rng&)>& make, const std::function<double(Instance&)>& margin,
                          Rng& rng, const GradCheckOptions& opt = {}, int max_tries = 100) {
  const double threshold = opt.margin_factor * opt.epsilon;
  for (int t = 0; t < max_tries; ++t) {
    Instance inst = make(rng);
    if (margin(inst) > threshold) return inst;
  }
  throw Error("margin guard unsatisfiable after " + std::to_string(max_tries) + " resamples");
}

/// Re-draws every parameter at unit-ish scale (weights ~ N(0, 1/fan_in),
/// biases ~ U(-0.5, 0.5)) so kinks are well separated.
inline void randomize_for_gradcheck(Network<double>& net, Rng& rng) {
  for (auto* p : net.params()) {
    const Shape s = p->value.shape();
    const bool bias = p->rank == 1;
    const double fan_in = bias ? 1.0 : static_cast<double>(std::max<std::size_t>(1, s.per_item()));
    for (auto& v : p->value.values()) v = bias ? rng.uniform(-0.5, 0.5) : rng.normal(0.0, 1.0 / std::sqrt(fan_in));
  }
}

/// End-to-end check of every network parameter against the softmax loss.
inline GradCheckReport check_network(const std::string& label, Network<double>& net, const Tensor<double>& batch,
                                     const std::vector<int>& labels, const GradCheckOptions& opt = {}) {
  net.forward(batch, labels, Mode::eval);
  const double margin = net.min_margin();
  net.backward();
  std::vector<std::vector<double>> analytic;
  std::vector<ParamBlock> blocks;
  auto ps = net.params();
  for (auto* p : ps) analytic.emplace_back(p->grad.values().begin(), p->grad.values().end());
  for (std::size_t i = 0; i < ps.size(); ++i) blocks.push_back({ps[i]->name, ps[i]->value.values(), analytic[i]});
  auto loss = [&] {
    const double l = net.forward(batch, labels, Mode::eval).loss;
    for (std::size_t i = 0; i < net.size(); ++i) net.layer(i).release();
    return l;
  };
  return check_op(label, loss, std::move(blocks), opt, [margin] { return margin; });
}

}  // namespace epinet
