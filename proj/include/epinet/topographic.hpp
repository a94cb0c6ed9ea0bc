#pragma once

// Large-epitome variant: the candidate grid of each epitome is max-pooled in
// non-overlapping P x P blocks, so one epitome yields several output channels
// whose winning filters overlap inside the epitome.

#include "epitome.hpp"

namespace epinet {

template <class T>
struct TopographicBank {
  EpitomeBank<T> epitome;
  std::size_t epit_pool = 1;  // P_e, pool stride equals window

  TopographicBank() = default;
  TopographicBank(EpitomeBank<T> bank, std::size_t pool) : epitome(std::move(bank)), epit_pool(pool) {
    validate();
  }

  std::size_t candidates() const { return epitome.candidates(); }

  /// Outputs per epitome along one axis.
  std::size_t outputs_per_axis() const { return (candidates() - epit_pool) / epit_pool + 1; }
  std::size_t outputs_per_epitome() const { return outputs_per_axis() * outputs_per_axis(); }
  std::size_t output_channels() const { return epitome.epitomes * outputs_per_epitome(); }

  void validate() const {
    epitome.validate();
    if (epit_pool == 0) throw DimensionError("epitome pool must be positive");
    if (epit_pool > candidates())
      throw DimensionError("epitome pool " + std::to_string(epit_pool) + " exceeds the " +
                           std::to_string(candidates()) + " candidate displacements per axis");
  }

  detail::PoolGrid grid() const { return {candidates(), epit_pool, outputs_per_axis()}; }
};

/// Outputs per epitome for unit epitome stride and pooling extent D:
/// (floor(((V - W + 1) - D) / D) + 1)^2.
inline std::size_t topographic_outputs_unit_stride(std::size_t v, std::size_t w, std::size_t d) {
  const std::size_t per_axis = ((v - w + 1) - d) / d + 1;
  return per_axis * per_axis;
}

template <class T>
Shape topographic_output_shape(const Shape& in, const TopographicBank<T>& bank,
                               std::size_t input_stride) {
  return detail::match_output_shape(in, bank.epitome, input_stride, bank.grid());
}

/// Channel (k, a, b) is the best response over candidate block (a, b) of
/// epitome k; channels are epitome-major, then row-major over blocks.
template <class T>
MatchResult<T> topographic_forward(const Tensor<T>& input, const TopographicBank<T>& bank,
                                   std::size_t input_stride, OpCounter* counter = nullptr) {
  bank.validate();
  return detail::match_forward(input, bank.epitome, input_stride, bank.grid(), counter,
                               "topographic");
}

template <class T>
BankGradients<T> topographic_backward(const Tensor<T>& grad_out, const Tensor<T>& input,
                                      const TopographicBank<T>& bank, const ArgmaxMap& argmax,
                                      std::size_t input_stride) {
  bank.validate();
  return detail::match_backward(grad_out, input, bank.epitome, argmax, input_stride, bank.grid(),
                                "topographic");
}

}  // namespace epinet
