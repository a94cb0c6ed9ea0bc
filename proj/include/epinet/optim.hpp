#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "errors.hpp"
#include "tensor.hpp"

namespace epinet {

struct ScheduleStep {
  std::size_t epoch = 0;
  double multiplier = 1.0;
  friend bool operator==(const ScheduleStep&, const ScheduleStep&) = default;
};

struct SgdConfig {
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::size_t batch_size = 128;
  std::vector<ScheduleStep> schedule;

  void validate() const {
    if (!(lr > 0.0)) throw RangeError("learning rate must be positive");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw RangeError("momentum must lie in [0, 1)");
    if (!(weight_decay >= 0.0)) throw RangeError("weight decay must be non-negative");
    if (batch_size == 0) throw RangeError("batch size must be positive");
    for (std::size_t i = 1; i < schedule.size(); ++i)
      if (schedule[i].epoch <= schedule[i - 1].epoch)
        throw RangeError("schedule epochs must be strictly increasing");
  }
};

/// Piecewise-constant rate: every step whose epoch has been reached
/// multiplies the base rate.
inline double apply_schedule(const SgdConfig& cfg, std::size_t epoch) {
  double lr = cfg.lr;
  for (const auto& s : cfg.schedule)
    if (epoch >= s.epoch) lr *= s.multiplier;
  return lr;
}

/// A parameter tensor with its momentum buffer. Groups belonging to
/// mean+contrast normalized layers carry decay_enabled = false.
template <class T>
struct ParamGroup {
  std::string name;
  Tensor<T>* param = nullptr;
  Tensor<T>* velocity = nullptr;
  bool decay_enabled = true;
};

/// v <- momentum * v - lr * (grad + wd * w); w <- w + v.
template <class T>
void sgd_step(const ParamGroup<T>& group, const Tensor<T>& grad, const SgdConfig& cfg, double lr) {
  Tensor<T>& w = *group.param;
  Tensor<T>& v = *group.velocity;
  if (grad.shape() != w.shape() || v.shape() != w.shape())
    throw DimensionError("sgd: shape mismatch for " + group.name);
  if (!grad.all_finite()) throw NumericError("sgd: non-finite gradient for " + group.name);
  const T m = static_cast<T>(cfg.momentum);
  const T rate = static_cast<T>(lr);
  const T wd = group.decay_enabled ? static_cast<T>(cfg.weight_decay) : T(0);
  for (std::size_t i = 0; i < w.size(); ++i) {
    v[i] = m * v[i] - rate * (grad[i] + wd * w[i]);
    w[i] += v[i];
  }
}

template <class T>
void sgd_step(const ParamGroup<T>& group, const Tensor<T>& grad, const SgdConfig& cfg) {
  sgd_step(group, grad, cfg, cfg.lr);
}

/// Parses "10:0.1,20:0.1".
inline std::vector<ScheduleStep> parse_schedule(const std::string& text) {
  std::vector<ScheduleStep> steps;
  std::size_t pos = 0;
  while (pos < text.size()) {
    auto comma = text.find(',', pos);
    if (comma == std::string::npos) comma = text.size();
    const std::string item = text.substr(pos, comma - pos);
    const auto colon = item.find(':');
    if (colon == std::string::npos) throw RangeError("schedule entry '" + item + "' is not epoch:mult");
    try {
      steps.push_back({static_cast<std::size_t>(std::stoul(item.substr(0, colon))),
                       std::stod(item.substr(colon + 1))});
    } catch (const std::logic_error&) {
      throw RangeError("schedule entry '" + item + "' is not epoch:mult");
    }
    pos = comma + 1;
  }
  return steps;
}

}  // namespace epinet
