#include "towerphys/nn/layers.hpp"

#include <cmath>

namespace towerphys::nn {
namespace {

template <class E>
E pop(std::vector<E>& tape, const char* what) {
  if (tape.empty()) {
    fail(ErrorKind::invalid_argument,
         std::string(what) + ": backward called without a matching training-mode forward");
  }
  E e = std::move(tape.back());
  tape.pop_back();
  return e;
}

template <class T>
void add_param(ParameterList<T>& out, const std::string& prefix, const char* name,
               Parameter<T>& p) {
  out.params.emplace_back(prefix + name, &p);
}

}  // namespace

template <class T>
void init_he_normal(Tensor<T>& w, int fan_in, CounterRng& rng) {
  const double std = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (T& v : w.values()) v = static_cast<T>(std * rng.normal());
}

// ---------------------------------------------------------------------------

template <class T>
Conv2d<T>::Conv2d(int in, int out, int kernel, int stride, int padding, CounterRng& rng)
    : weight({out, in, kernel, kernel}), bias({out}), stride(stride), padding(padding) {
  init_he_normal(weight.value, in * kernel * kernel, rng);
}

template <class T>
Tensor<T> Conv2d<T>::forward(const Tensor<T>& x, Mode mode) {
  Tensor<T> y = conv2d_forward(x, weight.value, bias.value, stride, padding);
  if (mode == Mode::train) tape_.push_back(x);
  return y;
}

template <class T>
Tensor<T> Conv2d<T>::backward(const Tensor<T>& dy, bool need_dx) {
  const Tensor<T> x = pop(tape_, "conv2d");
  return conv2d_backward(x, weight.value, dy, stride, padding, weight.grad, &bias.grad, need_dx);
}

template <class T>
void Conv2d<T>::collect(const std::string& prefix, ParameterList<T>& out) {
  add_param(out, prefix, "weight", weight);
  add_param(out, prefix, "bias", bias);
}

// ---------------------------------------------------------------------------

template <class T>
Deconv2d<T>::Deconv2d(int in, int out, int kernel, int stride, int padding, CounterRng& rng)
    : weight({in, out, kernel, kernel}), bias({out}), stride(stride), padding(padding) {
  init_he_normal(weight.value, in * kernel * kernel, rng);
}

template <class T>
Tensor<T> Deconv2d<T>::forward(const Tensor<T>& x, Mode mode) {
  Tensor<T> y = deconv2d_forward(x, weight.value, bias.value, stride, padding);
  if (mode == Mode::train) tape_.push_back(x);
  return y;
}

template <class T>
Tensor<T> Deconv2d<T>::backward(const Tensor<T>& dy, bool need_dx) {
  const Tensor<T> x = pop(tape_, "deconv2d");
  return deconv2d_backward(x, weight.value, dy, stride, padding, weight.grad, &bias.grad,
                           need_dx);
}

template <class T>
void Deconv2d<T>::collect(const std::string& prefix, ParameterList<T>& out) {
  add_param(out, prefix, "weight", weight);
  add_param(out, prefix, "bias", bias);
}

// ---------------------------------------------------------------------------

template <class T>
Linear<T>::Linear(int in, int out, CounterRng& rng) : weight({out, in}), bias({out}) {
  init_he_normal(weight.value, in, rng);
}

template <class T>
Tensor<T> Linear<T>::forward(const Tensor<T>& x, Mode mode) {
  Tensor<T> y = linear_forward(x, weight.value, bias.value);
  if (mode == Mode::train) tape_.push_back(x);
  return y;
}

template <class T>
Tensor<T> Linear<T>::backward(const Tensor<T>& dy, bool need_dx) {
  const Tensor<T> x = pop(tape_, "linear");
  return linear_backward(x, weight.value, dy, weight.grad, bias.grad, need_dx);
}

template <class T>
void Linear<T>::collect(const std::string& prefix, ParameterList<T>& out) {
  add_param(out, prefix, "weight", weight);
  add_param(out, prefix, "bias", bias);
}

// ---------------------------------------------------------------------------

template <class T>
Tensor<T> MaxPool2d<T>::forward(const Tensor<T>& x, Mode mode) {
  if (mode != Mode::train) return maxpool_forward<T>(x, size, nullptr);
  Entry e{x.shape(), {}};
  Tensor<T> y = maxpool_forward(x, size, &e.argmax);
  tape_.push_back(std::move(e));
  return y;
}

template <class T>
Tensor<T> MaxPool2d<T>::backward(const Tensor<T>& dy) {
  const Entry e = pop(tape_, "maxpool");
  return maxpool_backward(dy, e.argmax, e.shape);
}

template <class T>
Tensor<T> ReLU<T>::forward(const Tensor<T>& x, Mode mode) {
  if (mode == Mode::train) tape_.push_back(x);
  return relu_forward(x);
}

template <class T>
Tensor<T> ReLU<T>::backward(const Tensor<T>& dy) {
  const Tensor<T> x = pop(tape_, "relu");
  return relu_backward(x, dy);
}

template <class T>
Tensor<T> GlobalAvgPool<T>::forward(const Tensor<T>& x, Mode mode) {
  if (mode == Mode::train) tape_.push_back(x.shape());
  return global_avgpool_forward(x);
}

template <class T>
Tensor<T> GlobalAvgPool<T>::backward(const Tensor<T>& dy) {
  const std::vector<int> shape = pop(tape_, "global average pool");
  return global_avgpool_backward(dy, shape);
}

// ---------------------------------------------------------------------------

template <class T>
BatchNorm<T>::BatchNorm(int channels, T momentum, T eps)
    : gamma({channels}),
      beta({channels}),
      running_mean({channels}),
      running_var({channels}, T(1)),
      momentum(momentum),
      eps(eps) {
  gamma.value.fill(T(1));
}

template <class T>
Tensor<T> BatchNorm<T>::forward(const Tensor<T>& x, Mode mode) {
  if (mode == Mode::eval) {
    return batchnorm_forward_eval(x, gamma.value, beta.value, running_mean, running_var, eps);
  }
  std::vector<T> mean, var;
  BatchNormCache<T> cache;
  Tensor<T> y = batchnorm_forward_train(x, gamma.value, beta.value, eps, mean, var, &cache);
  // Running variance uses the unbiased batch estimate.
  const T m = static_cast<T>(x.size() / static_cast<std::size_t>(x.dim(1)));
  const T unbias = m / (m - T(1));
  for (std::size_t c = 0; c < mean.size(); ++c) {
    running_mean[c] = (T(1) - momentum) * running_mean[c] + momentum * mean[c];
    running_var[c] = (T(1) - momentum) * running_var[c] + momentum * var[c] * unbias;
  }
  tape_.push_back(std::move(cache));
  return y;
}

template <class T>
Tensor<T> BatchNorm<T>::backward(const Tensor<T>& dy) {
  const BatchNormCache<T> cache = pop(tape_, "batchnorm");
  return batchnorm_backward(cache, gamma.value, dy, gamma.grad, beta.grad);
}

template <class T>
void BatchNorm<T>::collect(const std::string& prefix, ParameterList<T>& out) {
  add_param(out, prefix, "gamma", gamma);
  add_param(out, prefix, "beta", beta);
  out.buffers.emplace_back(prefix + "running_mean", &running_mean);
  out.buffers.emplace_back(prefix + "running_var", &running_var);
}

// ---------------------------------------------------------------------------

template <class T>
PreActBlock<T>::PreActBlock(int in, int out, int stride, CounterRng& rng)
    : bn1(in), conv1(in, out, 3, stride, 1, rng), bn2(out), conv2(out, out, 3, 1, 1, rng) {
  if (in != out || stride != 1) {
    projection = std::make_unique<Conv2d<T>>(in, out, 1, stride, 0, rng);
  }
}

template <class T>
Tensor<T> PreActBlock<T>::forward(const Tensor<T>& x, Mode mode) {
  const Tensor<T> a = relu1.forward(bn1.forward(x, mode), mode);
  Tensor<T> h = conv1.forward(a, mode);
  h = conv2.forward(relu2.forward(bn2.forward(h, mode), mode), mode);
  const Tensor<T> shortcut = projection ? projection->forward(a, mode) : x;
  for (std::size_t i = 0; i < h.size(); ++i) h[i] += shortcut[i];
  return h;
}

template <class T>
Tensor<T> PreActBlock<T>::backward(const Tensor<T>& dy) {
  Tensor<T> da;
  if (projection) da = projection->backward(dy);
  Tensor<T> dh = bn2.backward(relu2.backward(conv2.backward(dy)));
  Tensor<T> dconv = conv1.backward(dh);
  if (da.empty()) {
    da = std::move(dconv);
  } else {
    for (std::size_t i = 0; i < da.size(); ++i) da[i] += dconv[i];
  }
  Tensor<T> dx = bn1.backward(relu1.backward(da));
  if (!projection) {
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i];
  }
  return dx;
}

template <class T>
void PreActBlock<T>::collect(const std::string& prefix, ParameterList<T>& out) {
  bn1.collect(prefix + "bn1.", out);
  conv1.collect(prefix + "conv1.", out);
  bn2.collect(prefix + "bn2.", out);
  conv2.collect(prefix + "conv2.", out);
  if (projection) projection->collect(prefix + "projection.", out);
}

template <class T>
void PreActBlock<T>::clear_tape() {
  bn1.clear_tape();
  relu1.clear_tape();
  conv1.clear_tape();
  bn2.clear_tape();
  relu2.clear_tape();
  conv2.clear_tape();
  if (projection) projection->clear_tape();
}

// ---------------------------------------------------------------------------

template <class T>
LSTMCell<T>::LSTMCell(int input, int hidden, CounterRng& rng)
    : wx({4 * hidden, input}), wh({4 * hidden, hidden}), bias({4 * hidden}), hidden_(hidden) {
  const double std = std::sqrt(1.0 / static_cast<double>(input + hidden));
  for (T& v : wx.value.values()) v = static_cast<T>(std * rng.normal());
  for (T& v : wh.value.values()) v = static_cast<T>(std * rng.normal());
  for (int j = hidden; j < 2 * hidden; ++j) bias.value[static_cast<std::size_t>(j)] = T(1);
}

template <class T>
LstmState<T> LSTMCell<T>::zero_state(int batch) const {
  return {Tensor<T>({batch, hidden_}), Tensor<T>({batch, hidden_})};
}

template <class T>
LstmState<T> LSTMCell<T>::forward(const Tensor<T>& x, const LstmState<T>& state, Mode mode) {
  if (mode == Mode::eval) return lstm_cell_forward<T>(x, state, wx.value, wh.value, bias.value, nullptr);
  LstmCache<T> cache;
  LstmState<T> out = lstm_cell_forward(x, state, wx.value, wh.value, bias.value, &cache);
  tape_.push_back(std::move(cache));
  return out;
}

template <class T>
LstmGrads<T> LSTMCell<T>::backward(const Tensor<T>& dh, const Tensor<T>& dc) {
  const LstmCache<T> cache = pop(tape_, "lstm");
  return lstm_cell_backward(cache, dh, dc, wx.value, wh.value, wx.grad, wh.grad, bias.grad);
}

template <class T>
void LSTMCell<T>::collect(const std::string& prefix, ParameterList<T>& out) {
  add_param(out, prefix, "wx", wx);
  add_param(out, prefix, "wh", wh);
  add_param(out, prefix, "bias", bias);
}

#define TOWERPHYS_NN_LAYERS(T)                                                   \
  template void init_he_normal(Tensor<T>&, int, CounterRng&);                    \
  template class Conv2d<T>;                                                      \
  template class Deconv2d<T>;                                                    \
  template class Linear<T>;                                                      \
  template class MaxPool2d<T>;                                                   \
  template class ReLU<T>;                                                        \
  template class GlobalAvgPool<T>;                                               \
  template class BatchNorm<T>;                                                   \
  template class PreActBlock<T>;                                                 \
  template class LSTMCell<T>;

TOWERPHYS_NN_LAYERS(float)
TOWERPHYS_NN_LAYERS(double)

}  // namespace towerphys::nn
