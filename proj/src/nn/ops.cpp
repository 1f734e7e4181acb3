#include "towerphys/nn/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

namespace towerphys::nn {
namespace {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapM = Eigen::Map<Mat<T>>;
template <class T>
using CMapM = Eigen::Map<const Mat<T>>;

struct ConvGeom {
  int c, h, w;    // image side (conv input / deconv output)
  int k, stride, pad;
  int oh, ow;     // column side (conv output / deconv input)
  int rows() const { return c * k * k; }
  int cols() const { return oh * ow; }
};

// Range of output columns ox whose input column ox * stride - pad + kj lies
// inside [0, w).
inline void valid_columns(const ConvGeom& g, int kj, int& lo, int& hi) {
  const int off = kj - g.pad;
  lo = off >= 0 ? 0 : (-off + g.stride - 1) / g.stride;
  hi = g.w - off <= 0 ? 0 : (g.w - off + g.stride - 1) / g.stride;
  hi = std::min(hi, g.ow);
  lo = std::min(lo, hi);
}

template <class T>
void im2col(const T* img, const ConvGeom& g, T* cols) {
  const int p = g.cols();
  for (int c = 0; c < g.c; ++c) {
    for (int ki = 0; ki < g.k; ++ki) {
      for (int kj = 0; kj < g.k; ++kj) {
        T* row = cols + static_cast<std::ptrdiff_t>((c * g.k + ki) * g.k + kj) * p;
        int lo, hi;
        valid_columns(g, kj, lo, hi);
        const int off = kj - g.pad;
        for (int oy = 0; oy < g.oh; ++oy) {
          const int iy = oy * g.stride - g.pad + ki;
          T* out = row + oy * g.ow;
          if (iy < 0 || iy >= g.h) {
            std::fill(out, out + g.ow, T(0));
            continue;
          }
          const T* src = img + (static_cast<std::ptrdiff_t>(c) * g.h + iy) * g.w + off;
          std::fill(out, out + lo, T(0));
          if (g.stride == 1) {
            std::copy(src + lo, src + hi, out + lo);
          } else {
            for (int ox = lo; ox < hi; ++ox) out[ox] = src[ox * g.stride];
          }
          std::fill(out + hi, out + g.ow, T(0));
        }
      }
    }
  }
}

// Adjoint of im2col: scatters columns back, accumulating into img.
template <class T>
void col2im(const T* cols, const ConvGeom& g, T* img) {
  const int p = g.cols();
  for (int c = 0; c < g.c; ++c) {
    for (int ki = 0; ki < g.k; ++ki) {
      for (int kj = 0; kj < g.k; ++kj) {
        const T* row = cols + static_cast<std::ptrdiff_t>((c * g.k + ki) * g.k + kj) * p;
        int lo, hi;
        valid_columns(g, kj, lo, hi);
        const int off = kj - g.pad;
        for (int oy = 0; oy < g.oh; ++oy) {
          const int iy = oy * g.stride - g.pad + ki;
          if (iy < 0 || iy >= g.h) continue;
          T* dst = img + (static_cast<std::ptrdiff_t>(c) * g.h + iy) * g.w + off;
          const T* in = row + oy * g.ow;
          if (g.stride == 1) {
            for (int ox = lo; ox < hi; ++ox) dst[ox] += in[ox];
          } else {
            for (int ox = lo; ox < hi; ++ox) dst[ox * g.stride] += in[ox];
          }
        }
      }
    }
  }
}

void check_conv_args(int k, int stride, int padding, const char* what) {
  require(k >= 1 && stride >= 1 && padding >= 0,
          std::string(what) + ": kernel and stride must be positive, padding non-negative");
}

template <class T>
void check_bias(const Tensor<T>& b, int n, const char* what) {
  if (!b.empty()) expect_shape(b, {n}, std::string(what) + " bias");
}

}  // namespace

int conv_output_size(int input, int kernel, int stride, int padding) {
  const int span = input + 2 * padding - kernel;
  if (span < 0) {
    fail(ErrorKind::shape_mismatch, "conv: kernel " + std::to_string(kernel) +
                                        " larger than padded input " +
                                        std::to_string(input + 2 * padding));
  }
  return span / stride + 1;
}

int deconv_output_size(int input, int kernel, int stride, int padding) {
  const int out = (input - 1) * stride - 2 * padding + kernel;
  if (out <= 0) fail(ErrorKind::shape_mismatch, "deconv: non-positive output size");
  return out;
}

template <class T>
void check_finite(const Tensor<T>& t, const std::string& what) {
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (!std::isfinite(t[i])) {
      fail(ErrorKind::numerical, what + ": non-finite value at element " + std::to_string(i));
    }
  }
}

// ---------------------------------------------------------------------------
// conv2d

template <class T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int stride,
                         int padding) {
  expect_rank(x, 4, "conv2d input");
  expect_rank(w, 4, "conv2d weight");
  require(w.dim(2) == w.dim(3), "conv2d: kernel must be square");
  check_conv_args(w.dim(2), stride, padding, "conv2d");
  if (x.dim(1) != w.dim(1)) {
    fail(ErrorKind::shape_mismatch, "conv2d: input has " + std::to_string(x.dim(1)) +
                                        " channels, weight expects " + std::to_string(w.dim(1)));
  }
  const int n = x.dim(0), o = w.dim(0);
  check_bias(b, o, "conv2d");
  ConvGeom g{x.dim(1), x.dim(2), x.dim(3), w.dim(2), stride, padding, 0, 0};
  g.oh = conv_output_size(g.h, g.k, stride, padding);
  g.ow = conv_output_size(g.w, g.k, stride, padding);
  Tensor<T> y({n, o, g.oh, g.ow});
  AlignedVector<T> cols(static_cast<std::size_t>(g.rows()) * g.cols());
  CMapM<T> wm(w.data(), o, g.rows());
  const std::size_t in_stride = static_cast<std::size_t>(g.c) * g.h * g.w;
  const std::size_t out_stride = static_cast<std::size_t>(o) * g.cols();
  for (int s = 0; s < n; ++s) {
    im2col(x.data() + s * in_stride, g, cols.data());
    MapM<T> ym(y.data() + s * out_stride, o, g.cols());
    ym.noalias() = wm * CMapM<T>(cols.data(), g.rows(), g.cols());
    if (!b.empty()) {
      for (int c = 0; c < o; ++c) ym.row(c).array() += b[c];
    }
  }
  return y;
}

template <class T>
Tensor<T> conv2d_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy, int stride,
                          int padding, Tensor<T>& dw, Tensor<T>* db, bool need_dx) {
  const int n = x.dim(0), o = w.dim(0);
  ConvGeom g{x.dim(1), x.dim(2), x.dim(3), w.dim(2), stride, padding, 0, 0};
  g.oh = conv_output_size(g.h, g.k, stride, padding);
  g.ow = conv_output_size(g.w, g.k, stride, padding);
  expect_shape(dy, {n, o, g.oh, g.ow}, "conv2d output gradient");
  expect_shape(dw, w.shape(), "conv2d weight gradient");
  if (db) expect_shape(*db, {o}, "conv2d bias gradient");

  Tensor<T> dx;
  if (need_dx) dx = Tensor<T>(x.shape());
  AlignedVector<T> cols(static_cast<std::size_t>(g.rows()) * g.cols());
  CMapM<T> wm(w.data(), o, g.rows());
  MapM<T> dwm(dw.data(), o, g.rows());
  const std::size_t in_stride = static_cast<std::size_t>(g.c) * g.h * g.w;
  const std::size_t out_stride = static_cast<std::size_t>(o) * g.cols();
  for (int s = 0; s < n; ++s) {
    CMapM<T> dym(dy.data() + s * out_stride, o, g.cols());
    im2col(x.data() + s * in_stride, g, cols.data());
    dwm.noalias() += dym * CMapM<T>(cols.data(), g.rows(), g.cols()).transpose();
    if (db) {
      for (int c = 0; c < o; ++c) (*db)[c] += dym.row(c).sum();
    }
    if (need_dx) {
      MapM<T>(cols.data(), g.rows(), g.cols()).noalias() = wm.transpose() * dym;
      col2im(cols.data(), g, dx.data() + s * in_stride);
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// deconv2d

template <class T>
Tensor<T> deconv2d_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int stride,
                           int padding) {
  expect_rank(x, 4, "deconv2d input");
  expect_rank(w, 4, "deconv2d weight");
  require(w.dim(2) == w.dim(3), "deconv2d: kernel must be square");
  check_conv_args(w.dim(2), stride, padding, "deconv2d");
  if (x.dim(1) != w.dim(0)) {
    fail(ErrorKind::shape_mismatch, "deconv2d: input has " + std::to_string(x.dim(1)) +
                                        " channels, weight expects " + std::to_string(w.dim(0)));
  }
  const int n = x.dim(0), cin = w.dim(0), cout = w.dim(1), k = w.dim(2);
  check_bias(b, cout, "deconv2d");
  ConvGeom g{cout, deconv_output_size(x.dim(2), k, stride, padding),
             deconv_output_size(x.dim(3), k, stride, padding), k, stride, padding,
             x.dim(2), x.dim(3)};
  Tensor<T> y({n, cout, g.h, g.w});
  AlignedVector<T> cols(static_cast<std::size_t>(g.rows()) * g.cols());
  CMapM<T> wm(w.data(), cin, g.rows());
  const std::size_t in_stride = static_cast<std::size_t>(cin) * g.cols();
  const std::size_t out_stride = static_cast<std::size_t>(cout) * g.h * g.w;
  for (int s = 0; s < n; ++s) {
    MapM<T>(cols.data(), g.rows(), g.cols()).noalias() =
        wm.transpose() * CMapM<T>(x.data() + s * in_stride, cin, g.cols());
    T* ys = y.data() + s * out_stride;
    col2im(cols.data(), g, ys);
    if (!b.empty()) {
      const std::size_t plane = static_cast<std::size_t>(g.h) * g.w;
      for (int c = 0; c < cout; ++c) {
        for (std::size_t i = 0; i < plane; ++i) ys[c * plane + i] += b[c];
      }
    }
  }
  return y;
}

template <class T>
Tensor<T> deconv2d_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy,
                            int stride, int padding, Tensor<T>& dw, Tensor<T>* db, bool need_dx) {
  const int n = x.dim(0), cin = w.dim(0), cout = w.dim(1), k = w.dim(2);
  ConvGeom g{cout, deconv_output_size(x.dim(2), k, stride, padding),
             deconv_output_size(x.dim(3), k, stride, padding), k, stride, padding,
             x.dim(2), x.dim(3)};
  expect_shape(dy, {n, cout, g.h, g.w}, "deconv2d output gradient");
  expect_shape(dw, w.shape(), "deconv2d weight gradient");
  if (db) expect_shape(*db, {cout}, "deconv2d bias gradient");

  Tensor<T> dx;
  if (need_dx) dx = Tensor<T>(x.shape());
  AlignedVector<T> cols(static_cast<std::size_t>(g.rows()) * g.cols());
  CMapM<T> wm(w.data(), cin, g.rows());
  MapM<T> dwm(dw.data(), cin, g.rows());
  const std::size_t in_stride = static_cast<std::size_t>(cin) * g.cols();
  const std::size_t out_stride = static_cast<std::size_t>(cout) * g.h * g.w;
  const std::size_t plane = static_cast<std::size_t>(g.h) * g.w;
  for (int s = 0; s < n; ++s) {
    const T* dys = dy.data() + s * out_stride;
    im2col(dys, g, cols.data());
    CMapM<T> colm(cols.data(), g.rows(), g.cols());
    dwm.noalias() += CMapM<T>(x.data() + s * in_stride, cin, g.cols()) * colm.transpose();
    if (db) {
      for (int c = 0; c < cout; ++c) {
        T acc = 0;
        for (std::size_t i = 0; i < plane; ++i) acc += dys[c * plane + i];
        (*db)[c] += acc;
      }
    }
    if (need_dx) MapM<T>(dx.data() + s * in_stride, cin, g.cols()).noalias() = wm * colm;
  }
  return dx;
}

// ---------------------------------------------------------------------------
// maxpool

template <class T>
Tensor<T> maxpool_forward(const Tensor<T>& x, int size, std::vector<int>* argmax) {
  expect_rank(x, 4, "maxpool input");
  require(size >= 1, "maxpool: size must be positive");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h < size || w < size) {
    fail(ErrorKind::shape_mismatch, "maxpool: spatial size " + std::to_string(h) + "x" +
                                        std::to_string(w) + " smaller than pool " +
                                        std::to_string(size));
  }
  const int oh = h / size, ow = w / size;
  Tensor<T> y({n, c, oh, ow});
  if (argmax) argmax->assign(y.size(), 0);
  std::size_t out = 0;
  for (int p = 0; p < n * c; ++p) {
    const std::size_t base = static_cast<std::size_t>(p) * h * w;
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox, ++out) {
        std::size_t best = base + static_cast<std::size_t>(oy * size) * w + ox * size;
        T best_v = x[best];
        for (int i = 0; i < size; ++i) {
          for (int j = 0; j < size; ++j) {
            const std::size_t idx = base + static_cast<std::size_t>(oy * size + i) * w + ox * size + j;
            if (x[idx] > best_v) {
              best_v = x[idx];
              best = idx;
            }
          }
        }
        y[out] = best_v;
        if (argmax) (*argmax)[out] = static_cast<int>(best);
      }
    }
  }
  return y;
}

template <class T>
Tensor<T> maxpool_backward(const Tensor<T>& dy, std::span<const int> argmax,
                           const std::vector<int>& input_shape) {
  require(argmax.size() == dy.size(), "maxpool backward: argmax size mismatch");
  Tensor<T> dx(input_shape);
  for (std::size_t i = 0; i < dy.size(); ++i) dx[static_cast<std::size_t>(argmax[i])] += dy[i];
  return dx;
}

// ---------------------------------------------------------------------------
// linear, relu

template <class T>
Tensor<T> linear_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  expect_rank(x, 2, "linear input");
  expect_rank(w, 2, "linear weight");
  if (x.dim(1) != w.dim(1)) {
    fail(ErrorKind::shape_mismatch, "linear: input has " + std::to_string(x.dim(1)) +
                                        " features, weight expects " + std::to_string(w.dim(1)));
  }
  const int n = x.dim(0), o = w.dim(0), f = w.dim(1);
  expect_shape(b, {o}, "linear bias");
  Tensor<T> y({n, o});
  MapM<T> ym(y.data(), n, o);
  ym.noalias() = CMapM<T>(x.data(), n, f) * CMapM<T>(w.data(), o, f).transpose();
  ym.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(b.data(), o);
  return y;
}

template <class T>
Tensor<T> linear_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy,
                          Tensor<T>& dw, Tensor<T>& db, bool need_dx) {
  const int n = x.dim(0), o = w.dim(0), f = w.dim(1);
  expect_shape(dy, {n, o}, "linear output gradient");
  CMapM<T> dym(dy.data(), n, o);
  MapM<T>(dw.data(), o, f).noalias() += dym.transpose() * CMapM<T>(x.data(), n, f);
  Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(db.data(), o) += dym.colwise().sum();
  Tensor<T> dx;
  if (need_dx) {
    dx = Tensor<T>(x.shape());
    MapM<T>(dx.data(), n, f).noalias() = dym * CMapM<T>(w.data(), o, f);
  }
  return dx;
}

template <class T>
Tensor<T> relu_forward(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
  return y;
}

template <class T>
Tensor<T> relu_backward(const Tensor<T>& x, const Tensor<T>& dy) {
  expect_shape(dy, x.shape(), "relu output gradient");
  Tensor<T> dx(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) dx[i] = x[i] > T(0) ? dy[i] : T(0);
  return dx;
}

// ---------------------------------------------------------------------------
// LSTM

namespace {
template <class T>
T sigmoid(T z) {
  return z >= T(0) ? T(1) / (T(1) + std::exp(-z)) : std::exp(z) / (T(1) + std::exp(z));
}
}  // namespace

template <class T>
LstmState<T> lstm_cell_forward(const Tensor<T>& x, const LstmState<T>& state, const Tensor<T>& wx,
                               const Tensor<T>& wh, const Tensor<T>& b, LstmCache<T>* cache) {
  expect_rank(x, 2, "lstm input");
  const int n = x.dim(0), in = x.dim(1), hid = wh.dim(1);
  expect_shape(wx, {4 * hid, in}, "lstm input weight");
  expect_shape(wh, {4 * hid, hid}, "lstm recurrent weight");
  expect_shape(b, {4 * hid}, "lstm bias");
  expect_shape(state.h, {n, hid}, "lstm hidden state");
  expect_shape(state.c, {n, hid}, "lstm cell state");

  Tensor<T> z({n, 4 * hid});
  MapM<T> zm(z.data(), n, 4 * hid);
  zm.noalias() = CMapM<T>(x.data(), n, in) * CMapM<T>(wx.data(), 4 * hid, in).transpose();
  zm.noalias() += CMapM<T>(state.h.data(), n, hid) * CMapM<T>(wh.data(), 4 * hid, hid).transpose();
  zm.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(b.data(), 4 * hid);

  LstmState<T> out{Tensor<T>({n, hid}), Tensor<T>({n, hid})};
  Tensor<T> tanh_c({n, hid});
  for (int s = 0; s < n; ++s) {
    T* zr = z.data() + static_cast<std::size_t>(s) * 4 * hid;
    for (int j = 0; j < hid; ++j) {
      const T i = sigmoid(zr[j]);
      const T f = sigmoid(zr[hid + j]);
      const T o = sigmoid(zr[2 * hid + j]);
      const T g = std::tanh(zr[3 * hid + j]);
      zr[j] = i;
      zr[hid + j] = f;
      zr[2 * hid + j] = o;
      zr[3 * hid + j] = g;
      const std::size_t k = static_cast<std::size_t>(s) * hid + j;
      const T c = f * state.c[k] + i * g;
      out.c[k] = c;
      tanh_c[k] = std::tanh(c);
      out.h[k] = o * tanh_c[k];
    }
  }
  if (cache) {
    cache->x = x;
    cache->h_prev = state.h;
    cache->c_prev = state.c;
    cache->gates = std::move(z);
    cache->c = out.c;
    cache->tanh_c = std::move(tanh_c);
  }
  return out;
}

template <class T>
LstmGrads<T> lstm_cell_backward(const LstmCache<T>& cache, const Tensor<T>& dh,
                                const Tensor<T>& dc, const Tensor<T>& wx, const Tensor<T>& wh,
                                Tensor<T>& dwx, Tensor<T>& dwh, Tensor<T>& db) {
  const int n = cache.x.dim(0), in = cache.x.dim(1), hid = wh.dim(1);
  expect_shape(dh, {n, hid}, "lstm hidden gradient");
  expect_shape(dc, {n, hid}, "lstm cell gradient");
  Tensor<T> dz({n, 4 * hid});
  LstmGrads<T> out{Tensor<T>(), Tensor<T>({n, hid}), Tensor<T>({n, hid})};
  for (int s = 0; s < n; ++s) {
    const T* gr = cache.gates.data() + static_cast<std::size_t>(s) * 4 * hid;
    T* dzr = dz.data() + static_cast<std::size_t>(s) * 4 * hid;
    for (int j = 0; j < hid; ++j) {
      const std::size_t k = static_cast<std::size_t>(s) * hid + j;
      const T i = gr[j], f = gr[hid + j], o = gr[2 * hid + j], g = gr[3 * hid + j];
      const T tc = cache.tanh_c[k];
      const T dct = dc[k] + dh[k] * o * (T(1) - tc * tc);
      dzr[j] = dct * g * i * (T(1) - i);
      dzr[hid + j] = dct * cache.c_prev[k] * f * (T(1) - f);
      dzr[2 * hid + j] = dh[k] * tc * o * (T(1) - o);
      dzr[3 * hid + j] = dct * i * (T(1) - g * g);
      out.dc_prev[k] = dct * f;
    }
  }
  CMapM<T> dzm(dz.data(), n, 4 * hid);
  MapM<T>(dwx.data(), 4 * hid, in).noalias() += dzm.transpose() * CMapM<T>(cache.x.data(), n, in);
  MapM<T>(dwh.data(), 4 * hid, hid).noalias() +=
      dzm.transpose() * CMapM<T>(cache.h_prev.data(), n, hid);
  Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(db.data(), 4 * hid) += dzm.colwise().sum();
  out.dx = Tensor<T>({n, in});
  MapM<T>(out.dx.data(), n, in).noalias() = dzm * CMapM<T>(wx.data(), 4 * hid, in);
  MapM<T>(out.dh_prev.data(), n, hid).noalias() = dzm * CMapM<T>(wh.data(), 4 * hid, hid);
  return out;
}

// ---------------------------------------------------------------------------
// batchnorm

namespace {
struct BnLayout {
  int n, c, plane;
};

template <class T>
BnLayout bn_layout(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta) {
  require(x.rank() == 4 || x.rank() == 2, "batchnorm: input must be rank 2 or 4");
  BnLayout l{x.dim(0), x.dim(1), x.rank() == 4 ? x.dim(2) * x.dim(3) : 1};
  expect_shape(gamma, {l.c}, "batchnorm gamma");
  expect_shape(beta, {l.c}, "batchnorm beta");
  return l;
}
}  // namespace

template <class T>
Tensor<T> batchnorm_forward_train(const Tensor<T>& x, const Tensor<T>& gamma,
                                  const Tensor<T>& beta, T eps, std::vector<T>& batch_mean,
                                  std::vector<T>& batch_var, BatchNormCache<T>* cache) {
  const BnLayout l = bn_layout(x, gamma, beta);
  if (l.n < 2) {
    fail(ErrorKind::invalid_argument,
         "batchnorm: training mode needs a batch of at least 2 (got " + std::to_string(l.n) + ")");
  }
  const double m = static_cast<double>(l.n) * l.plane;
  batch_mean.assign(static_cast<std::size_t>(l.c), T(0));
  batch_var.assign(static_cast<std::size_t>(l.c), T(0));
  std::vector<T> inv_std(static_cast<std::size_t>(l.c));
  Tensor<T> y(x.shape());
  Tensor<T> x_hat(x.shape());
  for (int c = 0; c < l.c; ++c) {
    double sum = 0;
    for (int s = 0; s < l.n; ++s) {
      const T* p = x.data() + (static_cast<std::size_t>(s) * l.c + c) * l.plane;
      for (int i = 0; i < l.plane; ++i) sum += p[i];
    }
    const double mean = sum / m;
    double sq = 0;
    for (int s = 0; s < l.n; ++s) {
      const T* p = x.data() + (static_cast<std::size_t>(s) * l.c + c) * l.plane;
      for (int i = 0; i < l.plane; ++i) sq += (p[i] - mean) * (p[i] - mean);
    }
    const double var = sq / m;
    const T is = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
    batch_mean[c] = static_cast<T>(mean);
    batch_var[c] = static_cast<T>(var);
    inv_std[c] = is;
    for (int s = 0; s < l.n; ++s) {
      const std::size_t off = (static_cast<std::size_t>(s) * l.c + c) * l.plane;
      for (int i = 0; i < l.plane; ++i) {
        const T xh = (x[off + i] - static_cast<T>(mean)) * is;
        x_hat[off + i] = xh;
        y[off + i] = gamma[c] * xh + beta[c];
      }
    }
  }
  if (cache) {
    cache->x_hat = std::move(x_hat);
    cache->inv_std = std::move(inv_std);
  }
  return y;
}

template <class T>
Tensor<T> batchnorm_forward_eval(const Tensor<T>& x, const Tensor<T>& gamma,
                                 const Tensor<T>& beta, const Tensor<T>& running_mean,
                                 const Tensor<T>& running_var, T eps) {
  const BnLayout l = bn_layout(x, gamma, beta);
  Tensor<T> y(x.shape());
  for (int c = 0; c < l.c; ++c) {
    const T scale = gamma[c] / std::sqrt(running_var[c] + eps);
    const T shift = beta[c] - running_mean[c] * scale;
    for (int s = 0; s < l.n; ++s) {
      const std::size_t off = (static_cast<std::size_t>(s) * l.c + c) * l.plane;
      for (int i = 0; i < l.plane; ++i) y[off + i] = x[off + i] * scale + shift;
    }
  }
  return y;
}

template <class T>
Tensor<T> batchnorm_backward(const BatchNormCache<T>& cache, const Tensor<T>& gamma,
                             const Tensor<T>& dy, Tensor<T>& dgamma, Tensor<T>& dbeta) {
  const Tensor<T>& xh = cache.x_hat;
  expect_shape(dy, xh.shape(), "batchnorm output gradient");
  const int n = xh.dim(0), channels = xh.dim(1);
  const int plane = xh.rank() == 4 ? xh.dim(2) * xh.dim(3) : 1;
  const T m = static_cast<T>(n) * static_cast<T>(plane);
  Tensor<T> dx(xh.shape());
  for (int c = 0; c < channels; ++c) {
    T sum_dy = 0, sum_dy_xh = 0;
    for (int s = 0; s < n; ++s) {
      const std::size_t off = (static_cast<std::size_t>(s) * channels + c) * plane;
      for (int i = 0; i < plane; ++i) {
        sum_dy += dy[off + i];
        sum_dy_xh += dy[off + i] * xh[off + i];
      }
    }
    dgamma[c] += sum_dy_xh;
    dbeta[c] += sum_dy;
    const T k = gamma[c] * cache.inv_std[c] / m;
    for (int s = 0; s < n; ++s) {
      const std::size_t off = (static_cast<std::size_t>(s) * channels + c) * plane;
      for (int i = 0; i < plane; ++i) {
        dx[off + i] = k * (m * dy[off + i] - sum_dy - xh[off + i] * sum_dy_xh);
      }
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// pooling to features, losses

template <class T>
Tensor<T> global_avgpool_forward(const Tensor<T>& x) {
  expect_rank(x, 4, "global average pool input");
  const int n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  Tensor<T> y({n, c});
  for (int p = 0; p < n * c; ++p) {
    T acc = 0;
    const T* src = x.data() + static_cast<std::size_t>(p) * plane;
    for (int i = 0; i < plane; ++i) acc += src[i];
    y[p] = acc / static_cast<T>(plane);
  }
  return y;
}

template <class T>
Tensor<T> global_avgpool_backward(const Tensor<T>& dy, const std::vector<int>& input_shape) {
  Tensor<T> dx(input_shape);
  const int plane = input_shape[2] * input_shape[3];
  require(dy.size() * plane == dx.size(), "global average pool backward: shape mismatch");
  for (std::size_t p = 0; p < dy.size(); ++p) {
    const T g = dy[p] / static_cast<T>(plane);
    std::fill_n(dx.data() + p * plane, plane, g);
  }
  return dx;
}

template <class T>
Loss<T> mse_loss(const Tensor<T>& prediction, const Tensor<T>& target) {
  expect_shape(target, prediction.shape(), "mse target");
  require(prediction.size() > 0, "mse: empty input");
  Loss<T> out{T(0), Tensor<T>(prediction.shape())};
  const T scale = T(2) / static_cast<T>(prediction.size());
  double acc = 0;
  for (std::size_t i = 0; i < prediction.size(); ++i) {
    const T d = prediction[i] - target[i];
    acc += static_cast<double>(d) * d;
    out.grad[i] = scale * d;
  }
  out.value = static_cast<T>(acc / static_cast<double>(prediction.size()));
  return out;
}

template <class T>
Tensor<T> softmax(const Tensor<T>& logits) {
  expect_rank(logits, 2, "softmax input");
  const int n = logits.dim(0), k = logits.dim(1);
  Tensor<T> p(logits.shape());
  for (int s = 0; s < n; ++s) {
    const T* z = logits.data() + static_cast<std::size_t>(s) * k;
    T* q = p.data() + static_cast<std::size_t>(s) * k;
    const T mx = *std::max_element(z, z + k);
    T sum = 0;
    for (int j = 0; j < k; ++j) sum += (q[j] = std::exp(z[j] - mx));
    for (int j = 0; j < k; ++j) q[j] /= sum;
  }
  return p;
}

template <class T>
Loss<T> cross_entropy_loss(const Tensor<T>& logits, std::span<const int> labels) {
  expect_rank(logits, 2, "cross entropy logits");
  const int n = logits.dim(0), k = logits.dim(1);
  require(n > 0, "cross entropy: empty batch");
  if (labels.size() != static_cast<std::size_t>(n)) {
    fail(ErrorKind::shape_mismatch, "cross entropy: " + std::to_string(labels.size()) +
                                        " labels for batch of " + std::to_string(n));
  }
  Loss<T> out{T(0), softmax(logits)};
  double acc = 0;
  for (int s = 0; s < n; ++s) {
    const int y = labels[static_cast<std::size_t>(s)];
    require(y >= 0 && y < k, "cross entropy: label out of range");
    const T* z = logits.data() + static_cast<std::size_t>(s) * k;
    const T mx = *std::max_element(z, z + k);
    double sum = 0;
    for (int j = 0; j < k; ++j) sum += std::exp(static_cast<double>(z[j] - mx));
    acc += std::log(sum) - static_cast<double>(z[y] - mx);
    T* g = out.grad.data() + static_cast<std::size_t>(s) * k;
    g[y] -= T(1);
    for (int j = 0; j < k; ++j) g[j] /= static_cast<T>(n);
  }
  out.value = static_cast<T>(acc / n);
  return out;
}

// ---------------------------------------------------------------------------

#define TOWERPHYS_NN_OPS(T)                                                                       \
  template void check_finite(const Tensor<T>&, const std::string&);                              \
  template Tensor<T> conv2d_forward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int,   \
                                    int);                                                         \
  template Tensor<T> conv2d_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int,  \
                                     int, Tensor<T>&, Tensor<T>*, bool);                          \
  template Tensor<T> deconv2d_forward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int, \
                                      int);                                                       \
  template Tensor<T> deconv2d_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,     \
                                       int, int, Tensor<T>&, Tensor<T>*, bool);                   \
  template Tensor<T> maxpool_forward(const Tensor<T>&, int, std::vector<int>*);                  \
  template Tensor<T> maxpool_backward(const Tensor<T>&, std::span<const int>,                    \
                                      const std::vector<int>&);                                   \
  template Tensor<T> linear_forward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);       \
  template Tensor<T> linear_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,       \
                                     Tensor<T>&, Tensor<T>&, bool);                               \
  template Tensor<T> relu_forward(const Tensor<T>&);                                              \
  template Tensor<T> relu_backward(const Tensor<T>&, const Tensor<T>&);                           \
  template LstmState<T> lstm_cell_forward(const Tensor<T>&, const LstmState<T>&,                 \
                                          const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,   \
                                          LstmCache<T>*);                                         \
  template LstmGrads<T> lstm_cell_backward(const LstmCache<T>&, const Tensor<T>&,                \
                                           const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,  \
                                           Tensor<T>&, Tensor<T>&, Tensor<T>&);                   \
  template Tensor<T> batchnorm_forward_train(const Tensor<T>&, const Tensor<T>&,                 \
                                             const Tensor<T>&, T, std::vector<T>&,                \
                                             std::vector<T>&, BatchNormCache<T>*);                \
  template Tensor<T> batchnorm_forward_eval(const Tensor<T>&, const Tensor<T>&,                  \
                                            const Tensor<T>&, const Tensor<T>&,                   \
                                            const Tensor<T>&, T);                                 \
  template Tensor<T> batchnorm_backward(const BatchNormCache<T>&, const Tensor<T>&,              \
                                        const Tensor<T>&, Tensor<T>&, Tensor<T>&);                \
  template Tensor<T> global_avgpool_forward(const Tensor<T>&);                                    \
  template Tensor<T> global_avgpool_backward(const Tensor<T>&, const std::vector<int>&);         \
  template Loss<T> mse_loss(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> softmax(const Tensor<T>&);                                                   \
  template Loss<T> cross_entropy_loss(const Tensor<T>&, std::span<const int>);

TOWERPHYS_NN_OPS(float)
TOWERPHYS_NN_OPS(double)

}  // namespace towerphys::nn
