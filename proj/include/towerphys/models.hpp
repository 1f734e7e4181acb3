#pragma once

// Frame predictors and stability classifiers.

#include <memory>
#include <string>
#include <vector>

#include "towerphys/nn/layers.hpp"

namespace towerphys {

// Encoder shared by both frame predictors: 3x3 conv (padding 1) + ReLU +
// non-overlapping max pool, per stage.
struct EncoderConfig {
  std::vector<int> widths{64, 128, 64};
  std::vector<int> pools{4, 3, 3};
  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

struct ConvDeconvConfig {
  int image_size = 64;
  EncoderConfig encoder;
  int fc_channels = 16;              // FC output reshaped to fc_channels x S x S
  std::vector<int> decoder{64, 128, 64};  // followed by a linear deconv to 3
  std::uint64_t seed = 0;

  static ConvDeconvConfig full();
  static ConvDeconvConfig desk();
  std::string to_json() const;
  static ConvDeconvConfig from_json(const std::string& text);
  friend bool operator==(const ConvDeconvConfig&, const ConvDeconvConfig&) = default;
};

struct ConvLSTMDeconvConfig {
  int image_size = 64;
  EncoderConfig encoder;
  int hidden = 2000;
  int fc_channels = 3;
  std::vector<int> decoder{64, 64};  // followed by a linear deconv to 3
  std::uint64_t seed = 0;

  static ConvLSTMDeconvConfig full();
  static ConvLSTMDeconvConfig desk();
  std::string to_json() const;
  static ConvLSTMDeconvConfig from_json(const std::string& text);
  friend bool operator==(const ConvLSTMDeconvConfig&, const ConvLSTMDeconvConfig&) = default;
};

enum class StabilityVariant { single, double_frame };

struct StabilityNetConfig {
  StabilityVariant variant = StabilityVariant::single;
  int image_size = 64;
  int stem_width = 16;
  int stem_stride = 2;
  std::vector<int> widths{16, 32, 64};  // one stage per entry; stages after the first halve resolution
  int blocks_per_stage = 3;             // depth = 6 * blocks_per_stage + 2
  int classes = 2;
  std::uint64_t seed = 0;

  int depth() const { return 6 * blocks_per_stage + 2; }
  static StabilityNetConfig full(StabilityVariant variant);
  static StabilityNetConfig desk(StabilityVariant variant);
  std::string to_json() const;
  static StabilityNetConfig from_json(const std::string& text);
  friend bool operator==(const StabilityNetConfig&, const StabilityNetConfig&) = default;
};

const char* to_string(StabilityVariant variant);

namespace detail {
template <class T>
struct Encoder {
  std::vector<nn::Conv2d<T>> convs;
  std::vector<nn::ReLU<T>> relus;
  std::vector<nn::MaxPool2d<T>> pools;
  int out_channels = 0;
  int out_size = 0;

  Encoder(const EncoderConfig& config, int image_size, CounterRng& rng);
  nn::Tensor<T> forward(const nn::Tensor<T>& x, nn::Mode mode);  // -> [N, features]
  void backward(const nn::Tensor<T>& dfeatures);
  void collect(const std::string& prefix, nn::ParameterList<T>& out);
  void clear_tape();
  int features() const { return out_channels * out_size * out_size; }
};

template <class T>
struct Decoder {
  std::vector<nn::Deconv2d<T>> deconvs;  // last one is linear
  std::vector<nn::ReLU<T>> relus;

  Decoder(int in_channels, const std::vector<int>& widths, CounterRng& rng);
  nn::Tensor<T> forward(const nn::Tensor<T>& x, nn::Mode mode);
  nn::Tensor<T> backward(const nn::Tensor<T>& dy);
  void collect(const std::string& prefix, nn::ParameterList<T>& out);
  void clear_tape();
};
}  // namespace detail

// First frame -> predicted last frame, 3 x S x S both ways.
template <class T>
class ConvDeconvNet {
 public:
  explicit ConvDeconvNet(const ConvDeconvConfig& config);

  nn::Tensor<T> forward(const nn::Tensor<T>& first, nn::Mode mode);
  void backward(const nn::Tensor<T>& dprediction);
  nn::ParameterList<T> parameters();
  void clear_tape();
  const ConvDeconvConfig& config() const { return config_; }

 private:
  ConvDeconvConfig config_;
  CounterRng rng_;
  detail::Encoder<T> encoder_;
  nn::Linear<T> fc_;
  nn::ReLU<T> fc_relu_;
  detail::Decoder<T> decoder_;
};

template <class T>
class ConvLSTMDeconvNet {
 public:
  explicit ConvLSTMDeconvNet(const ConvLSTMDeconvConfig& config);

  // frames[t] is [N,3,S,S]; returns frames.size() - 1 predictions where
  // prediction t targets frames[t + 1].
  std::vector<nn::Tensor<T>> teacher_forced(const std::vector<nn::Tensor<T>>& frames,
                                            nn::Mode mode);
  // Gradients for each prediction of the last teacher_forced call.
  void backward(const std::vector<nn::Tensor<T>>& dpredictions);
  // Step 1 consumes `first`; later steps consume the previous prediction.
  // Returns steps - 1 generated frames.
  std::vector<nn::Tensor<T>> rollout(const nn::Tensor<T>& first, int steps = 5);

  nn::ParameterList<T> parameters();
  void clear_tape();
  const ConvLSTMDeconvConfig& config() const { return config_; }

 private:
  nn::Tensor<T> step(const nn::Tensor<T>& x, nn::LstmState<T>& state, nn::Mode mode);

  ConvLSTMDeconvConfig config_;
  CounterRng rng_;
  detail::Encoder<T> encoder_;
  nn::LSTMCell<T> lstm_;
  nn::Linear<T> fc_;
  nn::ReLU<T> fc_relu_;
  detail::Decoder<T> decoder_;
  int steps_taken_ = 0;
};

// Pre-activation residual trunk ending in BN + ReLU + global average pool.
template <class T>
class ResidualTrunk {
 public:
  ResidualTrunk(const StabilityNetConfig& config, CounterRng& rng);
  nn::Tensor<T> forward(const nn::Tensor<T>& x, nn::Mode mode);  // -> [N, features]
  nn::Tensor<T> backward(const nn::Tensor<T>& dfeatures);
  void collect(const std::string& prefix, nn::ParameterList<T>& out);
  void clear_tape();
  int features() const { return features_; }

 private:
  nn::Conv2d<T> stem_;
  std::vector<std::unique_ptr<nn::PreActBlock<T>>> blocks_;
  nn::BatchNorm<T> bn_;
  nn::ReLU<T> relu_;
  nn::GlobalAvgPool<T> pool_;
  int features_;
};

// Single: trunk(first) -> linear head. Double: one trunk applied to first and
// last frame, features concatenated, linear head. Class 1 means "falls".
template <class T>
class StabilityNet {
 public:
  explicit StabilityNet(const StabilityNetConfig& config);

  // `last` must be empty for Single and present for Double.
  nn::Tensor<T> logits(const nn::Tensor<T>& first, const nn::Tensor<T>& last, nn::Mode mode);
  void backward(const nn::Tensor<T>& dlogits);
  // Probability of class 1 per sample, evaluation mode.
  std::vector<T> fall_probability(const nn::Tensor<T>& first, const nn::Tensor<T>& last);

  nn::ParameterList<T> parameters();
  std::size_t trunk_parameter_count();
  std::size_t head_parameter_count();
  ResidualTrunk<T>& trunk() { return trunk_; }
  void clear_tape();
  const StabilityNetConfig& config() const { return config_; }

 private:
  StabilityNetConfig config_;
  CounterRng rng_;
  ResidualTrunk<T> trunk_;
  nn::Linear<T> head_;
};

}  // namespace towerphys
