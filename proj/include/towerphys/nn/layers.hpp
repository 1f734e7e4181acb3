#pragma once

// Stateful layers. In Mode::train every forward call pushes what its backward
// needs onto a per-layer tape and every backward call pops it, so a layer
// applied several times (shared weights, unrolled recurrences) is
// differentiated by calling backward in reverse order of the forwards.

#include <memory>
#include <string>
#include <vector>

#include "towerphys/nn/ops.hpp"
#include "towerphys/nn/tensor.hpp"
#include "towerphys/random.hpp"

namespace towerphys::nn {

enum class Mode { train, eval };

template <class T>
struct Parameter {
  Tensor<T> value;
  Tensor<T> grad;

  explicit Parameter(std::vector<int> shape) : value(shape), grad(shape) {}
};

// Named views of a model's parameters and non-trainable buffers.
template <class T>
struct ParameterList {
  std::vector<std::pair<std::string, Parameter<T>*>> params;
  std::vector<std::pair<std::string, Tensor<T>*>> buffers;

  void zero_grad() {
    for (auto& [name, p] : params) p->grad.zero();
  }
  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& [name, p] : params) n += p->value.size();
    return n;
  }
};

template <class T>
class Module {
 public:
  virtual ~Module() = default;
  virtual void collect(const std::string& prefix, ParameterList<T>& out) = 0;
  virtual void clear_tape() = 0;
};

// Fan-in scaled normal init for ReLU networks: std = sqrt(2 / fan_in).
template <class T>
void init_he_normal(Tensor<T>& w, int fan_in, CounterRng& rng);

template <class T>
class Conv2d : public Module<T> {
 public:
  Conv2d(int in, int out, int kernel, int stride, int padding, CounterRng& rng);
  Tensor<T> forward(const Tensor<T>& x, Mode mode);
  Tensor<T> backward(const Tensor<T>& dy, bool need_dx = true);
  void collect(const std::string& prefix, ParameterList<T>& out) override;
  void clear_tape() override { tape_.clear(); }

  Parameter<T> weight, bias;
  int stride, padding;

 private:
  std::vector<Tensor<T>> tape_;
};

template <class T>
class Deconv2d : public Module<T> {
 public:
  Deconv2d(int in, int out, int kernel, int stride, int padding, CounterRng& rng);
  Tensor<T> forward(const Tensor<T>& x, Mode mode);
  Tensor<T> backward(const Tensor<T>& dy, bool need_dx = true);
  void collect(const std::string& prefix, ParameterList<T>& out) override;
  void clear_tape() override { tape_.clear(); }

  Parameter<T> weight, bias;
  int stride, padding;

 private:
  std::vector<Tensor<T>> tape_;
};

template <class T>
class Linear : public Module<T> {
 public:
  Linear(int in, int out, CounterRng& rng);
  Tensor<T> forward(const Tensor<T>& x, Mode mode);
  Tensor<T> backward(const Tensor<T>& dy, bool need_dx = true);
  void collect(const std::string& prefix, ParameterList<T>& out) override;
  void clear_tape() override { tape_.clear(); }

  Parameter<T> weight, bias;

 private:
  std::vector<Tensor<T>> tape_;
};

template <class T>
class MaxPool2d : public Module<T> {
 public:
  explicit MaxPool2d(int size) : size(size) {}
  Tensor<T> forward(const Tensor<T>& x, Mode mode);
  Tensor<T> backward(const Tensor<T>& dy);
  void collect(const std::string&, ParameterList<T>&) override {}
  void clear_tape() override { tape_.clear(); }

  int size;

 private:
  struct Entry {
    std::vector<int> shape;
    std::vector<int> argmax;
  };
  std::vector<Entry> tape_;
};

template <class T>
class ReLU : public Module<T> {
 public:
  Tensor<T> forward(const Tensor<T>& x, Mode mode);
  Tensor<T> backward(const Tensor<T>& dy);
  void collect(const std::string&, ParameterList<T>&) override {}
  void clear_tape() override { tape_.clear(); }

 private:
  std::vector<Tensor<T>> tape_;
};

template <class T>
class BatchNorm : public Module<T> {
 public:
  explicit BatchNorm(int channels, T momentum = T(0.1), T eps = T(1e-5));
  Tensor<T> forward(const Tensor<T>& x, Mode mode);
  Tensor<T> backward(const Tensor<T>& dy);
  void collect(const std::string& prefix, ParameterList<T>& out) override;
  void clear_tape() override { tape_.clear(); }

  Parameter<T> gamma, beta;
  Tensor<T> running_mean, running_var;
  T momentum, eps;

 private:
  std::vector<BatchNormCache<T>> tape_;
};

template <class T>
class GlobalAvgPool : public Module<T> {
 public:
  Tensor<T> forward(const Tensor<T>& x, Mode mode);
  Tensor<T> backward(const Tensor<T>& dy);
  void collect(const std::string&, ParameterList<T>&) override {}
  void clear_tape() override { tape_.clear(); }

 private:
  std::vector<std::vector<int>> tape_;
};

// Pre-activation residual block:
//   a = relu(bn1(x)); y = conv2(relu(bn2(conv1(a)))) + shortcut
// The shortcut is x itself, or a 1x1 strided projection of a when the
// channel count or resolution changes.
template <class T>
class PreActBlock : public Module<T> {
 public:
  PreActBlock(int in, int out, int stride, CounterRng& rng);
  Tensor<T> forward(const Tensor<T>& x, Mode mode);
  Tensor<T> backward(const Tensor<T>& dy);
  void collect(const std::string& prefix, ParameterList<T>& out) override;
  void clear_tape() override;

  bool has_projection() const { return static_cast<bool>(projection); }

  BatchNorm<T> bn1;
  ReLU<T> relu1;
  Conv2d<T> conv1;
  BatchNorm<T> bn2;
  ReLU<T> relu2;
  Conv2d<T> conv2;
  std::unique_ptr<Conv2d<T>> projection;
};

template <class T>
class LSTMCell : public Module<T> {
 public:
  LSTMCell(int input, int hidden, CounterRng& rng);
  LstmState<T> zero_state(int batch) const;
  LstmState<T> forward(const Tensor<T>& x, const LstmState<T>& state, Mode mode);
  // Gradients w.r.t. the outputs (h, c) of the matching forward call.
  LstmGrads<T> backward(const Tensor<T>& dh, const Tensor<T>& dc);
  void collect(const std::string& prefix, ParameterList<T>& out) override;
  void clear_tape() override { tape_.clear(); }

  int hidden() const { return hidden_; }

  Parameter<T> wx, wh, bias;

 private:
  int hidden_;
  std::vector<LstmCache<T>> tape_;
};

}  // namespace towerphys::nn
