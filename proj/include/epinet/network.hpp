#pragma once

#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "config.hpp"
#include "epitome.hpp"
#include "layers.hpp"
#include "optim.hpp"
#include "rng.hpp"
#include "tensor.hpp"
#include "topographic.hpp"

namespace epinet {

/// A named learnable tensor with its gradient from the last backward pass.
template <class T>
struct Param {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  std::size_t rank = 4;  // logical rank written to checkpoints
  bool decay = true;

  std::vector<std::size_t> dims() const {
    const Shape& s = value.shape();
    const std::size_t all[4] = {s.n, s.c, s.h, s.w};
    return {all, all + rank};
  }
};

template <class T>
class Layer {
 public:
  explicit Layer(LayerSpec spec) : spec_(std::move(spec)) {}
  virtual ~Layer() = default;
  Layer(const Layer&) = delete;
  Layer& operator=(const Layer&) = delete;

  const LayerSpec& spec() const { return spec_; }
  const std::string& name() const { return spec_.name; }

  virtual Tensor<T> forward(const Tensor<T>& x, Mode mode, Rng& rng, OpCounter* counter) = 0;
  /// Returns the input gradient and overwrites the gradients of params().
  virtual Tensor<T> backward(const Tensor<T>& grad_out) = 0;
  virtual std::vector<Param<T>*> params() { return {}; }
  /// Distance of the last forward pass from its nearest kink (max ties, ReLU zero).
  virtual double min_margin() const { return std::numeric_limits<double>::infinity(); }
  virtual void release() {}

 protected:
  void require_forward(bool cached) const {
    if (!cached) throw StateError("layer '" + spec_.name + "': backward without a preceding forward");
  }

 private:
  LayerSpec spec_;
};

namespace layers {

template <class T>
Param<T> make_param(const std::string& layer, const std::string& what, Shape shape, std::size_t rank,
                    bool decay) {
  Param<T> p;
  p.name = layer + "." + what;
  p.value = Tensor<T>(shape);
  p.grad = Tensor<T>(shape);
  p.rank = rank;
  p.decay = decay;
  return p;
}

template <class T>
class Epitomic : public Layer<T> {
 public:
  Epitomic(const LayerSpec& s, Rng& init)
      : Layer<T>(s),
        weights_(make_param<T>(s.name, "weights", Shape{s.epitomes, s.in.c, s.epitome, s.epitome}, 4,
                               !s.normalize)) {
    init_values(init);
  }

  Tensor<T> forward(const Tensor<T>& x, Mode, Rng&, OpCounter* counter) override {
    sync_bank();
    auto r = run_forward(x, counter);
    input_ = x;
    argmax_ = std::move(r.argmax);
    margin_ = r.min_margin;
    cached_ = true;
    return std::move(r.output);
  }

  Tensor<T> backward(const Tensor<T>& grad_out) override {
    this->require_forward(cached_);
    sync_bank();
    auto g = run_backward(grad_out);
    weights_.grad = std::move(g.weights);
    return std::move(g.input);
  }

  std::vector<Param<T>*> params() override { return {&weights_}; }
  double min_margin() const override { return margin_; }
  void release() override {
    input_ = {};
    argmax_ = {};
    cached_ = false;
  }

 protected:
  virtual MatchResult<T> run_forward(const Tensor<T>& x, OpCounter* counter) {
    return epitomic_forward(x, bank_, this->spec().stride, counter);
  }
  virtual BankGradients<T> run_backward(const Tensor<T>& grad_out) {
    return epitomic_backward(grad_out, input_, bank_, argmax_, this->spec().stride);
  }

  void init_values(Rng& init) {
    for (auto& v : weights_.value.values()) v = static_cast<T>(init.normal(0.0, this->spec().init_std));
  }

  // The bank borrows the parameter storage by copy; kept in sync before use.
  void sync_bank() {
    const auto& s = this->spec();
    if (bank_.weights.shape() != weights_.value.shape())
      bank_ = EpitomeBank<T>(s.epitomes, s.epitome, s.filter, s.in.c, s.epitome_stride, s.normalize,
                             static_cast<T>(s.lambda));
    bank_.weights = weights_.value;
  }

  Param<T> weights_;
  EpitomeBank<T> bank_;
  Tensor<T> input_;
  ArgmaxMap argmax_;
  double margin_ = std::numeric_limits<double>::infinity();
  bool cached_ = false;
};

template <class T>
class Topographic : public Epitomic<T> {
 public:
  using Epitomic<T>::Epitomic;

 protected:
  MatchResult<T> run_forward(const Tensor<T>& x, OpCounter* counter) override {
    return topographic_forward(x, TopographicBank<T>(this->bank_, this->spec().pool), this->spec().stride,
                               counter);
  }
  BankGradients<T> run_backward(const Tensor<T>& grad_out) override {
    return topographic_backward(grad_out, this->input_, TopographicBank<T>(this->bank_, this->spec().pool),
                                this->argmax_, this->spec().stride);
  }
};

template <class T>
class Conv : public Layer<T> {
 public:
  Conv(const LayerSpec& s, Rng& init)
      : Layer<T>(s), weights_(make_param<T>(s.name, "weights", Shape{s.channels, s.in.c, s.filter, s.filter}, 4, true)) {
    for (auto& v : weights_.value.values()) v = static_cast<T>(init.normal(0.0, s.init_std));
  }

  Tensor<T> forward(const Tensor<T>& x, Mode, Rng&, OpCounter* counter) override {
    sync_bank();
    input_ = x;
    cached_ = true;
    return conv_forward(x, bank_, counter);
  }
  Tensor<T> backward(const Tensor<T>& grad_out) override {
    this->require_forward(cached_);
    sync_bank();
    auto g = conv_backward(grad_out, input_, bank_);
    weights_.grad = std::move(g.weights);
    return std::move(g.input);
  }
  std::vector<Param<T>*> params() override { return {&weights_}; }
  void release() override {
    input_ = {};
    cached_ = false;
  }

 private:
  void sync_bank() {
    const auto& s = this->spec();
    if (bank_.weights.shape() != weights_.value.shape()) bank_ = ConvBank<T>(s.channels, s.filter, s.in.c, s.stride);
    bank_.weights = weights_.value;
  }

  Param<T> weights_;
  ConvBank<T> bank_;
  Tensor<T> input_;
  bool cached_ = false;
};

template <class T>
class MaxPool : public Layer<T> {
 public:
  explicit MaxPool(const LayerSpec& s) : Layer<T>(s) {}

  Tensor<T> forward(const Tensor<T>& x, Mode, Rng&, OpCounter*) override {
    auto r = maxpool_forward(x, this->spec().pool, stride());
    input_shape_ = x.shape();
    argmax_ = std::move(r.argmax);
    margin_ = r.min_margin;
    cached_ = true;
    return std::move(r.output);
  }
  Tensor<T> backward(const Tensor<T>& grad_out) override {
    this->require_forward(cached_);
    return maxpool_backward(grad_out, argmax_, input_shape_, this->spec().pool, stride());
  }
  double min_margin() const override { return margin_; }
  void release() override {
    argmax_ = {};
    cached_ = false;
  }

 private:
  std::size_t stride() const { return this->spec().pool_stride == 0 ? this->spec().pool : this->spec().pool_stride; }

  Shape input_shape_{};
  ArgmaxMap argmax_;
  double margin_ = std::numeric_limits<double>::infinity();
  bool cached_ = false;
};

template <class T>
class BiasRelu : public Layer<T> {
 public:
  explicit BiasRelu(const LayerSpec& s) : Layer<T>(s), biases_(make_param<T>(s.name, "biases", Shape{s.in.c, 1, 1, 1}, 1, false)) {}

  Tensor<T> forward(const Tensor<T>& x, Mode, Rng&, OpCounter*) override {
    const std::span<const T> b = biases_.value.values();
    double margin = std::numeric_limits<double>::infinity();
    const Shape& s = x.shape();
    const std::size_t sites = s.h * s.w;
    for (std::size_t i = 0; i < x.size(); ++i)
      margin = std::min(margin, std::abs(static_cast<double>(x[i] + b[(i / sites) % s.c])));
    margin_ = margin;
    output_ = bias_relu_forward(x, b);
    cached_ = true;
    return output_;
  }
  Tensor<T> backward(const Tensor<T>& grad_out) override {
    this->require_forward(cached_);
    auto g = bias_relu_backward(grad_out, output_);
    std::copy(g.biases.begin(), g.biases.end(), biases_.grad.data());
    return std::move(g.input);
  }
  std::vector<Param<T>*> params() override { return {&biases_}; }
  double min_margin() const override { return margin_; }
  void release() override {
    output_ = {};
    cached_ = false;
  }

 private:
  Param<T> biases_;
  Tensor<T> output_;
  double margin_ = std::numeric_limits<double>::infinity();
  bool cached_ = false;
};

template <class T>
class Lrn : public Layer<T> {
 public:
  explicit Lrn(const LayerSpec& s)
      : Layer<T>(s), params_{s.lrn_n, s.lrn_alpha, s.lrn_beta, s.lrn_k} {}

  Tensor<T> forward(const Tensor<T>& x, Mode, Rng&, OpCounter*) override {
    input_ = x;
    cached_ = true;
    return lrn_forward(x, params_);
  }
  Tensor<T> backward(const Tensor<T>& grad_out) override {
    this->require_forward(cached_);
    return lrn_backward(grad_out, input_, params_);
  }
  void release() override {
    input_ = {};
    cached_ = false;
  }

 private:
  LrnParams params_;
  Tensor<T> input_;
  bool cached_ = false;
};

template <class T>
class Dropout : public Layer<T> {
 public:
  explicit Dropout(const LayerSpec& s) : Layer<T>(s) { state_.rate = s.dropout; }

  Tensor<T> forward(const Tensor<T>& x, Mode mode, Rng& rng, OpCounter*) override {
    state_.mode = mode;
    cached_ = true;
    return dropout_forward(x, state_, rng);
  }
  Tensor<T> backward(const Tensor<T>& grad_out) override {
    this->require_forward(cached_);
    return dropout_backward(grad_out, state_);
  }
  void release() override {
    state_.mask.clear();
    cached_ = false;
  }

 private:
  DropoutState state_;
  bool cached_ = false;
};

template <class T>
class FullyConnected : public Layer<T> {
 public:
  FullyConnected(const LayerSpec& s, Rng& init)
      : Layer<T>(s),
        weights_(make_param<T>(s.name, "weights", Shape{s.channels, s.in.c * s.in.h * s.in.w, 1, 1}, 2, true)),
        biases_(make_param<T>(s.name, "biases", Shape{s.channels, 1, 1, 1}, 1, false)) {
    for (auto& v : weights_.value.values()) v = static_cast<T>(init.normal(0.0, s.init_std));
  }

  Tensor<T> forward(const Tensor<T>& x, Mode, Rng&, OpCounter* counter) override {
    input_ = x;
    cached_ = true;
    if (counter) counter->add(x.shape().n * this->spec().channels, x.shape().per_item());
    return fc_forward(x, weights_.value, std::span<const T>(biases_.value.values()));
  }
  Tensor<T> backward(const Tensor<T>& grad_out) override {
    this->require_forward(cached_);
    auto g = fc_backward(grad_out, input_, weights_.value);
    weights_.grad = std::move(g.weights);
    std::copy(g.biases.begin(), g.biases.end(), biases_.grad.data());
    return std::move(g.input);
  }
  std::vector<Param<T>*> params() override { return {&weights_, &biases_}; }
  void release() override {
    input_ = {};
    cached_ = false;
  }

 private:
  Param<T> weights_, biases_;
  Tensor<T> input_;
  bool cached_ = false;
};

/// Terminal layer; the loss itself is evaluated by the network.
template <class T>
class Softmax : public Layer<T> {
 public:
  explicit Softmax(const LayerSpec& s) : Layer<T>(s) {}
  Tensor<T> forward(const Tensor<T>& x, Mode, Rng&, OpCounter*) override { return x; }
  Tensor<T> backward(const Tensor<T>& grad_out) override { return grad_out; }
};

template <class T>
std::unique_ptr<Layer<T>> make_layer(const LayerSpec& s, Rng& init) {
  switch (s.type) {
    case LayerType::epitomic: return std::make_unique<Epitomic<T>>(s, init);
    case LayerType::topographic: return std::make_unique<Topographic<T>>(s, init);
    case LayerType::conv: return std::make_unique<Conv<T>>(s, init);
    case LayerType::maxpool: return std::make_unique<MaxPool<T>>(s);
    case LayerType::relu: return std::make_unique<BiasRelu<T>>(s);
    case LayerType::lrn: return std::make_unique<Lrn<T>>(s);
    case LayerType::dropout: return std::make_unique<Dropout<T>>(s);
    case LayerType::fc: return std::make_unique<FullyConnected<T>>(s, init);
    case LayerType::softmax: return std::make_unique<Softmax<T>>(s);
  }
  throw ConfigError("unsupported layer type");
}

}  // namespace layers

template <class T>
struct ForwardResult {
  double loss = 0.0;
  Tensor<T> logits;
  Tensor<T> probabilities;
};

/// Linear stack of layers built from a NetworkConfig.
template <class T>
class Network {
 public:
  explicit Network(NetworkConfig cfg) : Network(std::move(cfg), 0, false) {}
  Network(NetworkConfig cfg, std::uint64_t seed) : Network(std::move(cfg), seed, true) {}

  const NetworkConfig& config() const { return cfg_; }
  std::uint64_t seed() const { return seed_; }
  std::size_t size() const { return layers_.size(); }
  Layer<T>& layer(std::size_t i) { return *layers_[i]; }
  const Layer<T>& layer(std::size_t i) const { return *layers_[i]; }

  /// Dropout stream; persisted in checkpoints.
  Rng& rng() { return rng_; }
  const Rng& rng() const { return rng_; }
  OpCounter& counter() { return counter_; }

  std::vector<Param<T>*> params() {
    std::vector<Param<T>*> all;
    for (auto& l : layers_)
      for (auto* p : l->params()) all.push_back(p);
    return all;
  }

  /// Runs every layer; computes the loss when labels are given.
  ForwardResult<T> forward(const Tensor<T>& batch, std::span<const int> labels, Mode mode) {
    check_input(batch);
    shapes_.clear();
    Tensor<T> x = batch;
    for (auto& l : layers_) {
      x = l->forward(x, mode, rng_, &counter_);
      shapes_.push_back(x.shape());
    }
    ForwardResult<T> res;
    res.logits = std::move(x);
    debug_check_finite(res.logits, "logits");
    if (!labels.empty()) {
      auto loss = softmax_loss(res.logits, labels);
      res.loss = loss.loss;
      res.probabilities = std::move(loss.probabilities);
      loss_grad_ = std::move(loss.grad);
      ready_ = true;
    } else {
      ready_ = false;
    }
    return res;
  }

  /// Backpropagates the loss of the immediately preceding forward call.
  void backward() {
    if (!ready_) throw StateError("network: backward without a preceding forward with labels");
    Tensor<T> g = std::move(loss_grad_);
    for (std::size_t i = layers_.size(); i-- > 0;) g = layers_[i]->backward(g);
    ready_ = false;
    for (auto& l : layers_) l->release();
  }

  std::vector<int> predict(const Tensor<T>& batch) {
    auto res = forward(batch, {}, Mode::eval);
    for (auto& l : layers_) l->release();
    const std::size_t classes = res.logits.shape().per_item();
    std::vector<int> out(batch.shape().n);
    for (std::size_t n = 0; n < out.size(); ++n) {
      const T* z = res.logits.data() + n * classes;
      out[n] = static_cast<int>(std::max_element(z, z + classes) - z);
    }
    return out;
  }

  /// Output shape of every layer in the last forward pass.
  const std::vector<Shape>& runtime_shapes() const { return shapes_; }

  double min_margin() const {
    double m = std::numeric_limits<double>::infinity();
    for (const auto& l : layers_) m = std::min(m, l->min_margin());
    return m;
  }

  /// Independent copy with identical parameters and RNG state.
  Network clone() const {
    Network copy(cfg_, seed_);
    auto dst = copy.params();
    auto src = const_cast<Network*>(this)->params();
    for (std::size_t i = 0; i < src.size(); ++i) dst[i]->value = src[i]->value;
    copy.rng_ = rng_;
    return copy;
  }

 private:
  Network(NetworkConfig cfg, std::uint64_t seed, bool explicit_seed)
      : cfg_(std::move(cfg)), seed_(explicit_seed ? seed : cfg_.seed), rng_(Rng::stream(seed_, 1)) {
    if (cfg_.layers.empty() || cfg_.layers.front().in != cfg_.input) infer_shapes(cfg_);
    Rng init = Rng::stream(seed_, 0);
    for (const auto& spec : cfg_.layers) layers_.push_back(layers::make_layer<T>(spec, init));
  }

  void check_input(const Tensor<T>& batch) const {
    const Shape& s = batch.shape();
    if (s.c != cfg_.input.c || s.h != cfg_.input.h || s.w != cfg_.input.w)
      throw DimensionError("network expects items of " + cfg_.input.str() + ", got " + s.str());
  }

  NetworkConfig cfg_;
  std::uint64_t seed_;
  Rng rng_;
  std::vector<std::unique_ptr<Layer<T>>> layers_;
  std::vector<Shape> shapes_;
  Tensor<T> loss_grad_;
  bool ready_ = false;
  OpCounter counter_;
};

/// Momentum SGD over every parameter of a network.
template <class T>
class SgdOptimizer {
 public:
  SgdOptimizer(Network<T>& net, SgdConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    for (auto* p : net.params()) velocities_.emplace_back(p->value.shape());
  }

  const SgdConfig& config() const { return cfg_; }
  SgdConfig& config() { return cfg_; }
  std::vector<Tensor<T>>& velocities() { return velocities_; }
  const std::vector<Tensor<T>>& velocities() const { return velocities_; }

  std::vector<ParamGroup<T>> groups(Network<T>& net) {
    auto ps = net.params();
    if (ps.size() != velocities_.size()) throw StateError("optimizer does not belong to this network");
    std::vector<ParamGroup<T>> g;
    for (std::size_t i = 0; i < ps.size(); ++i) g.push_back({ps[i]->name, &ps[i]->value, &velocities_[i], ps[i]->decay});
    return g;
  }

  void step(Network<T>& net, std::size_t epoch) {
    const double lr = apply_schedule(cfg_, epoch);
    auto ps = net.params();
    auto gs = groups(net);
    for (std::size_t i = 0; i < ps.size(); ++i) sgd_step(gs[i], ps[i]->grad, cfg_, lr);
  }

 private:
  SgdConfig cfg_;
  std::vector<Tensor<T>> velocities_;
};

}  // namespace epinet
