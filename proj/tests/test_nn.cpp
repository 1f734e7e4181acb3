#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "gradcheck.hpp"
#include "towerphys/io.hpp"
#include "towerphys/nn/checkpoint.hpp"
#include "towerphys/nn/layers.hpp"
#include "towerphys/nn/ops.hpp"
#include "towerphys/nn/optim.hpp"

using namespace towerphys;
using namespace towerphys::nn;
using gradcheck::check_layer;
using gradcheck::dot;
using gradcheck::random_tensor;

namespace {

constexpr double kTol64 = 1e-4;

}  // namespace

TEST_CASE("conv2d examples") {
  SUBCASE("1x1 unit kernel is the identity") {
    CounterRng rng(1);
    const Tensor<double> x = random_tensor({2, 1, 5, 4}, rng);
    const Tensor<double> w({1, 1, 1, 1}, 1.0);
    CHECK(conv2d_forward(x, w, Tensor<double>({1}), 1, 0) == x);
  }
  SUBCASE("2x2 input with diagonal kernel") {
    const Tensor<double> x({1, 1, 2, 2}, {1, 2, 3, 4});
    const Tensor<double> w({1, 1, 2, 2}, {1, 0, 0, 1});
    const Tensor<double> y = conv2d_forward(x, w, Tensor<double>(), 1, 0);
    CHECK(y.shape() == std::vector<int>{1, 1, 1, 1});
    CHECK(y[0] == 5.0);
  }
  SUBCASE("channel mismatch is a shape error") {
    const Tensor<double> x({1, 2, 4, 4});
    const Tensor<double> w({1, 3, 3, 3});
    try {
      conv2d_forward(x, w, Tensor<double>(), 1, 1);
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::shape_mismatch);
    }
  }
  SUBCASE("padding 1 keeps 64x64; pools chain 64 -> 16 -> 5 -> 1") {
    CHECK(conv_output_size(64, 3, 1, 1) == 64);
    CHECK(64 / 4 == 16);
    const Tensor<double> x({1, 1, 16, 16});
    CHECK(maxpool_forward<double>(x, 3, nullptr).shape() == std::vector<int>{1, 1, 5, 5});
    CHECK(maxpool_forward<double>(Tensor<double>({1, 1, 5, 5}), 3, nullptr).dim(2) == 1);
  }
}

TEST_CASE("conv2d gradients match finite differences") {
  CounterRng rng(2);
  Conv2d<double> conv(2, 3, 3, 1, 1, rng);
  const auto r = check_layer(conv, random_tensor({1, 2, 5, 5}, rng), rng, 0);
  INFO(r.worst);
  CHECK(r.max_rel < kTol64);
  Conv2d<double> strided(2, 2, 3, 2, 1, rng);
  const auto r2 = check_layer(strided, random_tensor({2, 2, 7, 6}, rng), rng, 0);
  INFO(r2.worst);
  CHECK(r2.max_rel < kTol64);
}

TEST_CASE("deconv2d is the adjoint of conv2d") {
  CounterRng rng(3);
  for (int trial = 0; trial < 6; ++trial) {
    const int stride = 1 + trial % 2, pad = trial % 3 == 0 ? 0 : 1, k = 3 - (trial % 3 == 2 ? 2 : 0);
    const int h = 6 + trial, w = 5 + trial;
    const Tensor<double> weight = random_tensor({3, 2, k, k}, rng);
    const int oh = conv_output_size(h, k, stride, pad), ow = conv_output_size(w, k, stride, pad);
    // Choose the image size that deconv reproduces exactly.
    const int hh = deconv_output_size(oh, k, stride, pad), ww = deconv_output_size(ow, k, stride, pad);
    const Tensor<double> x = random_tensor({2, 2, hh, ww}, rng);
    const Tensor<double> y = random_tensor({2, 3, oh, ow}, rng);
    const double lhs = dot(conv2d_forward(x, weight, Tensor<double>(), stride, pad), y);
    const double rhs = dot(x, deconv2d_forward(y, weight, Tensor<double>(), stride, pad));
    CHECK(std::abs(lhs - rhs) <= 1e-6 * std::max(std::abs(lhs), 1.0));
  }
}

TEST_CASE("deconv2d examples and gradients") {
  CounterRng rng(4);
  const Tensor<double> x = random_tensor({1, 1, 4, 4}, rng);
  CHECK(deconv2d_forward(x, Tensor<double>({1, 1, 1, 1}, 1.0), Tensor<double>(), 1, 0) == x);
  CHECK(deconv2d_forward(random_tensor({1, 2, 8, 8}, rng), random_tensor({2, 3, 3, 3}, rng),
                         Tensor<double>(), 1, 1)
            .shape() == std::vector<int>{1, 3, 8, 8});
  Deconv2d<double> deconv(2, 3, 3, 1, 1, rng);
  const auto r = check_layer(deconv, random_tensor({2, 2, 4, 5}, rng), rng, 0);
  INFO(r.worst);
  CHECK(r.max_rel < kTol64);
}

TEST_CASE("maxpool") {
  SUBCASE("constant input routes the gradient to the first element of each window") {
    const Tensor<double> x({1, 1, 4, 4}, 2.0);
    std::vector<int> argmax;
    const Tensor<double> y = maxpool_forward(x, 2, &argmax);
    CHECK(y == Tensor<double>({1, 1, 2, 2}, 2.0));
    const Tensor<double> dx = maxpool_backward(Tensor<double>({1, 1, 2, 2}, 1.0), argmax, x.shape());
    const std::vector<double> expected{1, 0, 1, 0, 0, 0, 0, 0, 1, 0, 1, 0, 0, 0, 0, 0};
    CHECK(dx.to_vector() == expected);
  }
  SUBCASE("gradient") {
    CounterRng rng(5);
    MaxPool2d<double> pool(3);
    const auto r = check_layer(pool, random_tensor({2, 2, 7, 8}, rng), rng, 0);
    CHECK(r.max_rel < kTol64);
  }
}

TEST_CASE("linear and relu") {
  CounterRng rng(6);
  Linear<double> fc(5, 4, rng);
  auto r = check_layer(fc, random_tensor({3, 5}, rng), rng, 0);
  CHECK(r.max_rel < kTol64);

  const Tensor<double> x({4}, {-2.0, 0.0, 0.5, 3.0});
  CHECK(relu_forward(x).to_vector() == std::vector<double>{0.0, 0.0, 0.5, 3.0});
  CHECK(relu_backward(x, Tensor<double>({4}, 1.0)).to_vector() == std::vector<double>{0, 0, 1, 1});
  ReLU<double> relu;
  Tensor<double> xr = random_tensor({2, 3, 4, 4}, rng);
  gradcheck::push_from_zero(xr);
  r = check_layer(relu, xr, rng, 0);
  CHECK(r.max_rel < kTol64);
}

TEST_CASE("lstm cell") {
  CounterRng rng(7);
  SUBCASE("zero weights keep zero state") {
    LSTMCell<double> cell(3, 4, rng);
    cell.wx.value.zero();
    cell.wh.value.zero();
    cell.bias.value.zero();
    LstmState<double> s = cell.zero_state(2);
    for (int t = 0; t < 3; ++t) s = cell.forward(random_tensor({2, 3}, rng), s, Mode::eval);
    CHECK(s.h == Tensor<double>({2, 4}));
    CHECK(s.c == Tensor<double>({2, 4}));
  }
  SUBCASE("forget gate bias starts at one") {
    LSTMCell<double> cell(3, 4, rng);
    for (int j = 0; j < 16; ++j) CHECK(cell.bias.value[j] == (j >= 4 && j < 8 ? 1.0 : 0.0));
  }
  SUBCASE("backprop through time over 3 steps") {
    LSTMCell<double> cell(3, 5, rng);
    std::vector<Tensor<double>> xs;
    for (int t = 0; t < 3; ++t) xs.push_back(random_tensor({2, 3}, rng));
    std::vector<Tensor<double>> wh;
    for (int t = 0; t < 3; ++t) wh.push_back(random_tensor({2, 5}, rng));
    const Tensor<double> wc = random_tensor({2, 5}, rng);
    auto forward = [&](Mode mode) {
      LstmState<double> s = cell.zero_state(2);
      double l = 0;
      for (int t = 0; t < 3; ++t) {
        s = cell.forward(xs[t], s, mode);
        l += dot(s.h, wh[t]);
      }
      return l + dot(s.c, wc);
    };
    ParameterList<double> params;
    cell.collect("", params);
    params.zero_grad();
    forward(Mode::train);
    Tensor<double> dh({2, 5}), dc = wc;
    std::vector<Tensor<double>> dxs(3);
    for (int t = 2; t >= 0; --t) {
      for (std::size_t i = 0; i < dh.size(); ++i) dh[i] += wh[t][i];
      LstmGrads<double> g = cell.backward(dh, dc);
      dxs[t] = g.dx;
      dh = g.dh_prev;
      dc = g.dc_prev;
    }
    auto loss = [&] { return forward(Mode::eval); };
    gradcheck::Result r;
    for (int t = 0; t < 3; ++t) gradcheck::compare(xs[t], dxs[t], loss, "x", 0, rng, r);
    for (auto& [name, p] : params.params) {
      const Tensor<double> g = p->grad;
      gradcheck::compare(p->value, g, loss, name, 0, rng, r);
    }
    INFO(r.worst);
    CHECK(r.max_rel < 1e-3);
  }
}

TEST_CASE("batchnorm") {
  CounterRng rng(8);
  SUBCASE("normalizes each channel to mean 0, std 1") {
    BatchNorm<double> bn(3);
    Tensor<double> x({4, 3, 5, 5});
    for (std::size_t i = 0; i < x.size(); ++i) {
      const int c = static_cast<int>(i / 25 % 3);
      x[i] = 10.0 * c + (c + 2.0) * rng.normal();
    }
    const Tensor<double> y = bn.forward(x, Mode::train);
    for (int c = 0; c < 3; ++c) {
      double s = 0, sq = 0;
      for (int n = 0; n < 4; ++n) {
        for (int i = 0; i < 25; ++i) s += y[(n * 3 + c) * 25 + i];
      }
      const double mean = s / 100;
      for (int n = 0; n < 4; ++n) {
        for (int i = 0; i < 25; ++i) sq += std::pow(y[(n * 3 + c) * 25 + i] - mean, 2);
      }
      CHECK(std::abs(mean) < 1e-5);
      CHECK(std::abs(std::sqrt(sq / 100) - 1.0) < 1e-5);
    }
  }
  SUBCASE("batch of one in training mode is rejected") {
    BatchNorm<double> bn(2);
    CHECK_THROWS_AS(bn.forward(Tensor<double>({1, 2, 3, 3}), Mode::train), Error);
    CHECK_NOTHROW(bn.forward(Tensor<double>({1, 2, 3, 3}), Mode::eval));
  }
  SUBCASE("gradient") {
    BatchNorm<double> bn(3);
    bn.gamma.value = random_tensor({3}, rng);
    bn.beta.value = random_tensor({3}, rng);
    const auto r = check_layer(bn, random_tensor({3, 3, 3, 3}, rng), rng, 0);
    INFO(r.worst);
    CHECK(r.max_rel < kTol64);
  }
}

TEST_CASE("pre-activation residual block") {
  CounterRng rng(9);
  SUBCASE("zero conv weights leave only the shortcut") {
    PreActBlock<double> same(3, 3, 1, rng);
    same.conv1.weight.value.zero();
    same.conv2.weight.value.zero();
    const Tensor<double> x = random_tensor({2, 3, 4, 4}, rng);
    const Tensor<double> y = same.forward(x, Mode::train);
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(y[i] == doctest::Approx(x[i]).epsilon(1e-12));
  }
  SUBCASE("gradient, identity and projection shortcuts") {
    PreActBlock<double> same(2, 2, 1, rng);
    auto r = check_layer(same, random_tensor({3, 2, 5, 5}, rng), rng, 30);
    INFO(r.worst);
    CHECK(r.max_rel < 1e-3);
    PreActBlock<double> proj(2, 3, 2, rng);
    CHECK(proj.has_projection());
    r = check_layer(proj, random_tensor({3, 2, 6, 6}, rng), rng, 30);
    INFO(r.worst);
    CHECK(r.max_rel < 1e-3);
  }
}

TEST_CASE("losses") {
  CounterRng rng(10);
  const Tensor<double> x = random_tensor({2, 3}, rng);
  CHECK(mse_loss(x, x).value == 0.0);
  const std::vector<int> zero{0}, one{1};
  CHECK(cross_entropy_loss(Tensor<double>({1, 2}), zero).value == doctest::Approx(std::log(2.0)));
  CHECK(cross_entropy_loss(Tensor<double>({1, 2}), one).value == doctest::Approx(std::log(2.0)));
  const Loss<double> big = cross_entropy_loss(Tensor<double>({1, 2}, {1000.0, 0.0}), zero);
  CHECK(std::isfinite(big.value));
  CHECK(big.value < 1e-12);
  const Loss<float> bigf = cross_entropy_loss(Tensor<float>({1, 2}, {1000.0f, 0.0f}), zero);
  CHECK(std::isfinite(bigf.value));

  SUBCASE("loss gradients") {
    Tensor<double> p = random_tensor({2, 3, 2, 2}, rng);
    const Tensor<double> t = random_tensor({2, 3, 2, 2}, rng);
    gradcheck::Result r;
    gradcheck::compare(p, mse_loss(p, t).grad, [&] { return mse_loss(p, t).value; }, "mse", 0, rng, r);
    Tensor<double> z = random_tensor({4, 3}, rng);
    const std::vector<int> labels{0, 2, 1, 2};
    gradcheck::compare(z, cross_entropy_loss(z, labels).grad,
                       [&] { return cross_entropy_loss(z, labels).value; }, "ce", 0, rng, r);
    CHECK(r.max_rel < kTol64);
  }
}

TEST_CASE("adam") {
  SUBCASE("zero gradient leaves parameters unchanged") {
    std::vector<double> p{1.5, -2.0}, g{0, 0}, m{0, 0}, v{0, 0};
    adam_update<double>(p, g, m, v, 1, {});
    CHECK(p == std::vector<double>{1.5, -2.0});
  }
  SUBCASE("first step from p = 0, g = 1") {
    // m_hat = 1 and v_hat = 1 after bias correction.
    std::vector<double> p{0}, g{1}, m{0}, v{0};
    adam_update<double>(p, g, m, v, 1, {});
    CHECK(p[0] == doctest::Approx(-1e-3 / (1.0 + 1e-8)).epsilon(1e-15));
    CHECK(p[0] == doctest::Approx(-9.99999990e-4).epsilon(1e-9));
  }
  SUBCASE("minimizes p^2") {
    Parameter<double> p({1});
    p.value[0] = 1.0;
    ParameterList<double> list;
    list.params.emplace_back("p", &p);
    Adam<double> opt(list, {0.1});
    for (int i = 0; i < 200; ++i) {
      p.grad[0] = 2 * p.value[0];
      opt.step();
    }
    CHECK(std::abs(p.value[0]) < 0.01);
    CHECK(opt.steps() == 200);
    for (double v : opt.second_moments()[0].values()) CHECK(v >= 0);
  }
  SUBCASE("non-finite gradient is a divergence error") {
    Parameter<double> p({2});
    ParameterList<double> list;
    list.params.emplace_back("p", &p);
    Adam<double> opt(list);
    p.grad[1] = std::nan("");
    try {
      opt.step();
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::divergence);
    }
    CHECK(p.value[0] == 0.0);
  }
}

TEST_CASE("early stopping") {
  Parameter<double> p({1});
  ParameterList<double> list;
  list.params.emplace_back("p", &p);
  EarlyStopper<double> stop(list, 3, EarlyStopper<double>::Goal::minimize);
  const std::vector<double> metric{5, 4, 2, 3, 2.5, 2.1};
  bool stopped = false;
  for (std::size_t e = 0; e < metric.size() && !stopped; ++e) {
    p.value[0] = static_cast<double>(e);
    stopped = stop.observe(metric[e]);
  }
  CHECK(stopped);
  CHECK(stop.epochs() == 6);
  CHECK(stop.best() == 2);
  CHECK(stop.best_epoch() == 2);
  stop.restore();
  CHECK(p.value[0] == 2.0);
}

TEST_CASE("checkpoint round trip and corruption") {
  CounterRng rng(11);
  PreActBlock<float> block(2, 3, 2, rng);
  ParameterList<float> params;
  block.collect("block.", params);
  block.forward(Tensor<float>({2, 2, 4, 4}, 0.5f), Mode::train);  // touch running stats
  block.clear_tape();
  const Checkpoint c = make_checkpoint(params, R"({"kind":"test"})");
  const auto dir = std::filesystem::temp_directory_path() / "towerphys_ckpt_test";
  std::filesystem::create_directories(dir);
  const auto path = dir / "block.ckpt";
  save_checkpoint(c, path);
  const Checkpoint back = load_checkpoint(path);
  CHECK(back == c);

  CounterRng rng2(99);
  PreActBlock<float> other(2, 3, 2, rng2);
  ParameterList<float> other_params;
  other.collect("block.", other_params);
  restore_checkpoint(back, other_params);
  CHECK(make_checkpoint(other_params, back.metadata) == c);

  std::vector<std::uint8_t> bytes = io::read_file(path);
  bytes[bytes.size() / 2] ^= 0x10;
  CHECK_THROWS_AS(decode_checkpoint(bytes, "flipped"), Error);
  bytes = io::read_file(path);
  bytes.resize(bytes.size() - 7);
  try {
    decode_checkpoint(bytes, "truncated");
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::format);
  }
  std::filesystem::remove_all(dir);
}
