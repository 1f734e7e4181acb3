#pragma once

// Stateless layer kernels with exact backward passes. Backward functions
// accumulate (+=) into parameter gradients and return the input gradient.
// All image tensors are NCHW.

#include <span>
#include <vector>

#include "towerphys/nn/tensor.hpp"

namespace towerphys::nn {

int conv_output_size(int input, int kernel, int stride, int padding);
int deconv_output_size(int input, int kernel, int stride, int padding);

// Cross-correlation. x [N,C,H,W], w [O,C,K,K], b [O] or empty.
template <class T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int stride,
                         int padding);
// Returns dx (empty when need_dx is false). db may be null.
template <class T>
Tensor<T> conv2d_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy, int stride,
                          int padding, Tensor<T>& dw, Tensor<T>* db, bool need_dx = true);

// Transposed convolution, the adjoint of conv2d_forward with the same weight
// tensor: x [N,Cin,H,W], w [Cin,Cout,K,K], b [Cout] or empty.
template <class T>
Tensor<T> deconv2d_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int stride,
                           int padding);
template <class T>
Tensor<T> deconv2d_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy,
                            int stride, int padding, Tensor<T>& dw, Tensor<T>* db,
                            bool need_dx = true);

// Non-overlapping max pooling, stride = size, floor division of spatial dims.
// argmax holds the flat input index of each output's maximum (first on ties).
template <class T>
Tensor<T> maxpool_forward(const Tensor<T>& x, int size, std::vector<int>* argmax);
template <class T>
Tensor<T> maxpool_backward(const Tensor<T>& dy, std::span<const int> argmax,
                           const std::vector<int>& input_shape);

// Affine map. x [N,F], w [O,F], b [O].
template <class T>
Tensor<T> linear_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b);
template <class T>
Tensor<T> linear_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy,
                          Tensor<T>& dw, Tensor<T>& db, bool need_dx = true);

template <class T>
Tensor<T> relu_forward(const Tensor<T>& x);
// Gradient passes where the forward input was strictly positive.
template <class T>
Tensor<T> relu_backward(const Tensor<T>& x, const Tensor<T>& dy);

// LSTM cell with gate order (input, forget, output, candidate):
//   z = x wx^T + h wh^T + b,  c' = f*c + i*g,  h' = o*tanh(c')
// x [N,I], h and c [N,H], wx [4H,I], wh [4H,H], b [4H].
template <class T>
struct LstmCache {
  Tensor<T> x, h_prev, c_prev;
  Tensor<T> gates;  // [N,4H] after nonlinearities
  Tensor<T> c, tanh_c;
};

template <class T>
struct LstmState {
  Tensor<T> h, c;
};

template <class T>
LstmState<T> lstm_cell_forward(const Tensor<T>& x, const LstmState<T>& state, const Tensor<T>& wx,
                               const Tensor<T>& wh, const Tensor<T>& b, LstmCache<T>* cache);

template <class T>
struct LstmGrads {
  Tensor<T> dx, dh_prev, dc_prev;
};

// dh and dc are the gradients flowing into this step's outputs.
template <class T>
LstmGrads<T> lstm_cell_backward(const LstmCache<T>& cache, const Tensor<T>& dh,
                                const Tensor<T>& dc, const Tensor<T>& wx, const Tensor<T>& wh,
                                Tensor<T>& dwx, Tensor<T>& dwh, Tensor<T>& db);

// Per-channel batch normalization over N, H, W (x rank 4) or N (x rank 2).
template <class T>
struct BatchNormCache {
  Tensor<T> x_hat;
  std::vector<T> inv_std;
};

template <class T>
Tensor<T> batchnorm_forward_train(const Tensor<T>& x, const Tensor<T>& gamma,
                                  const Tensor<T>& beta, T eps, std::vector<T>& batch_mean,
                                  std::vector<T>& batch_var, BatchNormCache<T>* cache);
template <class T>
Tensor<T> batchnorm_forward_eval(const Tensor<T>& x, const Tensor<T>& gamma,
                                 const Tensor<T>& beta, const Tensor<T>& running_mean,
                                 const Tensor<T>& running_var, T eps);
template <class T>
Tensor<T> batchnorm_backward(const BatchNormCache<T>& cache, const Tensor<T>& gamma,
                             const Tensor<T>& dy, Tensor<T>& dgamma, Tensor<T>& dbeta);

// Mean over [N,C,H,W] spatial dims -> [N,C].
template <class T>
Tensor<T> global_avgpool_forward(const Tensor<T>& x);
template <class T>
Tensor<T> global_avgpool_backward(const Tensor<T>& dy, const std::vector<int>& input_shape);

template <class T>
struct Loss {
  T value = 0;
  Tensor<T> grad;  // d value / d prediction
};

// Mean over all elements.
template <class T>
Loss<T> mse_loss(const Tensor<T>& prediction, const Tensor<T>& target);

// Mean over the batch of -log softmax(logits)[label]. logits [N,K].
template <class T>
Loss<T> cross_entropy_loss(const Tensor<T>& logits, std::span<const int> labels);

template <class T>
Tensor<T> softmax(const Tensor<T>& logits);

}  // namespace towerphys::nn
