#include "towerphys/models.hpp"

#include "json_util.hpp"

namespace towerphys {

using nn::Mode;
using nn::Tensor;
using nlohmann::json;
using detail::parse_object;
using detail::read_opt;

namespace {

constexpr std::uint64_t kInitStream = 0x494e4954ULL;  // "INIT"

void validate_encoder(const EncoderConfig& e, int image_size, const char* what) {
  require(!e.widths.empty() && e.widths.size() == e.pools.size(),
          std::string(what) + ": encoder widths and pools must be non-empty and of equal length");
  int s = image_size;
  for (std::size_t i = 0; i < e.widths.size(); ++i) {
    require(e.widths[i] > 0 && e.pools[i] >= 1, std::string(what) + ": bad encoder stage");
    s /= e.pools[i];
    require(s >= 1, std::string(what) + ": pools shrink the image below 1 pixel");
  }
}

template <class T>
void check_image(const Tensor<T>& t, int size, const char* what) {
  const std::vector<int>& shape = t.shape();
  if (shape.size() != 4 || shape[1] != 3 || shape[2] != size || shape[3] != size) {
    fail(ErrorKind::shape_mismatch, std::string(what) + ": expected [N, 3, " +
                                        std::to_string(size) + ", " + std::to_string(size) +
                                        "], got " + Tensor<T>::shape_string(shape));
  }
}

}  // namespace

const char* to_string(StabilityVariant variant) {
  return variant == StabilityVariant::single ? "single" : "double";
}

// ---------------------------------------------------------------------------
// Configs

ConvDeconvConfig ConvDeconvConfig::full() { return {}; }

ConvDeconvConfig ConvDeconvConfig::desk() {
  ConvDeconvConfig c;
  c.encoder.widths = {16, 32, 16};
  c.fc_channels = 4;
  c.decoder = {16, 32, 16};
  return c;
}

std::string ConvDeconvConfig::to_json() const {
  return json{{"image_size", image_size},
              {"encoder_widths", encoder.widths},
              {"encoder_pools", encoder.pools},
              {"fc_channels", fc_channels},
              {"decoder_widths", decoder},
              {"seed", seed}}
      .dump();
}

ConvDeconvConfig ConvDeconvConfig::from_json(const std::string& text) {
  const char* what = "convdeconv config";
  const json j = parse_object(text, what,
                              {"image_size", "encoder_widths", "encoder_pools", "fc_channels",
                               "decoder_widths", "seed"});
  ConvDeconvConfig c = desk();
  read_opt(j, "image_size", c.image_size, what);
  read_opt(j, "encoder_widths", c.encoder.widths, what);
  read_opt(j, "encoder_pools", c.encoder.pools, what);
  read_opt(j, "fc_channels", c.fc_channels, what);
  read_opt(j, "decoder_widths", c.decoder, what);
  read_opt(j, "seed", c.seed, what);
  return c;
}

ConvLSTMDeconvConfig ConvLSTMDeconvConfig::full() { return {}; }

ConvLSTMDeconvConfig ConvLSTMDeconvConfig::desk() {
  ConvLSTMDeconvConfig c;
  c.encoder.widths = {16, 32, 16};
  c.hidden = 256;
  c.decoder = {16, 16};
  return c;
}

std::string ConvLSTMDeconvConfig::to_json() const {
  return json{{"image_size", image_size},
              {"encoder_widths", encoder.widths},
              {"encoder_pools", encoder.pools},
              {"hidden", hidden},
              {"fc_channels", fc_channels},
              {"decoder_widths", decoder},
              {"seed", seed}}
      .dump();
}

ConvLSTMDeconvConfig ConvLSTMDeconvConfig::from_json(const std::string& text) {
  const char* what = "convlstmdeconv config";
  const json j = parse_object(text, what,
                              {"image_size", "encoder_widths", "encoder_pools", "hidden",
                               "fc_channels", "decoder_widths", "seed"});
  ConvLSTMDeconvConfig c = desk();
  read_opt(j, "image_size", c.image_size, what);
  read_opt(j, "encoder_widths", c.encoder.widths, what);
  read_opt(j, "encoder_pools", c.encoder.pools, what);
  read_opt(j, "hidden", c.hidden, what);
  read_opt(j, "fc_channels", c.fc_channels, what);
  read_opt(j, "decoder_widths", c.decoder, what);
  read_opt(j, "seed", c.seed, what);
  return c;
}

StabilityNetConfig StabilityNetConfig::full(StabilityVariant variant) {
  StabilityNetConfig c;
  c.variant = variant;
  c.stem_stride = 1;
  c.blocks_per_stage = 8;  // 6 * 8 + 2 = 50 layers
  return c;
}

StabilityNetConfig StabilityNetConfig::desk(StabilityVariant variant) {
  StabilityNetConfig c;
  c.variant = variant;
  c.stem_width = 8;
  c.widths = {8, 16, 32};
  c.blocks_per_stage = 1;
  return c;
}

std::string StabilityNetConfig::to_json() const {
  return json{{"variant", to_string(variant)},
              {"image_size", image_size},
              {"stem_width", stem_width},
              {"stem_stride", stem_stride},
              {"widths", widths},
              {"blocks_per_stage", blocks_per_stage},
              {"classes", classes},
              {"seed", seed}}
      .dump();
}

StabilityNetConfig StabilityNetConfig::from_json(const std::string& text) {
  const char* what = "stability net config";
  const json j = parse_object(text, what,
                              {"variant", "image_size", "stem_width", "stem_stride", "widths",
                               "blocks_per_stage", "classes", "seed"});
  std::string variant = "single";
  read_opt(j, "variant", variant, what);
  require(variant == "single" || variant == "double",
          std::string(what) + ": variant must be 'single' or 'double'");
  StabilityNetConfig c =
      desk(variant == "single" ? StabilityVariant::single : StabilityVariant::double_frame);
  read_opt(j, "image_size", c.image_size, what);
  read_opt(j, "stem_width", c.stem_width, what);
  read_opt(j, "stem_stride", c.stem_stride, what);
  read_opt(j, "widths", c.widths, what);
  read_opt(j, "blocks_per_stage", c.blocks_per_stage, what);
  read_opt(j, "classes", c.classes, what);
  read_opt(j, "seed", c.seed, what);
  return c;
}

// ---------------------------------------------------------------------------
// Encoder / decoder

namespace detail {

template <class T>
Encoder<T>::Encoder(const EncoderConfig& config, int image_size, CounterRng& rng) {
  validate_encoder(config, image_size, "encoder");
  int in = 3;
  int s = image_size;
  for (std::size_t i = 0; i < config.widths.size(); ++i) {
    convs.emplace_back(in, config.widths[i], 3, 1, 1, rng);
    relus.emplace_back();
    pools.emplace_back(config.pools[i]);
    in = config.widths[i];
    s /= config.pools[i];
  }
  out_channels = in;
  out_size = s;
}

template <class T>
Tensor<T> Encoder<T>::forward(const Tensor<T>& x, Mode mode) {
  Tensor<T> h = x;
  for (std::size_t i = 0; i < convs.size(); ++i) {
    h = pools[i].forward(relus[i].forward(convs[i].forward(h, mode), mode), mode);
  }
  h.reshape({x.dim(0), features()});
  return h;
}

template <class T>
void Encoder<T>::backward(const Tensor<T>& dfeatures) {
  Tensor<T> d = dfeatures.reshaped({dfeatures.dim(0), out_channels, out_size, out_size});
  for (std::size_t i = convs.size(); i-- > 0;) {
    d = convs[i].backward(relus[i].backward(pools[i].backward(d)), i > 0);
  }
}

template <class T>
void Encoder<T>::collect(const std::string& prefix, nn::ParameterList<T>& out) {
  for (std::size_t i = 0; i < convs.size(); ++i) {
    convs[i].collect(prefix + "conv" + std::to_string(i) + ".", out);
  }
}

template <class T>
void Encoder<T>::clear_tape() {
  for (auto& c : convs) c.clear_tape();
  for (auto& r : relus) r.clear_tape();
  for (auto& p : pools) p.clear_tape();
}

template <class T>
Decoder<T>::Decoder(int in_channels, const std::vector<int>& widths, CounterRng& rng) {
  int in = in_channels;
  for (int w : widths) {
    require(w > 0, "decoder: widths must be positive");
    deconvs.emplace_back(in, w, 3, 1, 1, rng);
    relus.emplace_back();
    in = w;
  }
  deconvs.emplace_back(in, 3, 3, 1, 1, rng);
  // Start the linear output near zero (the mean of a normalized frame). At
  // full He scale the first updates are large enough to kill most of the
  // encoder's bottleneck units.
  for (T& v : deconvs.back().weight.value.values()) v *= T(0.1);
}

template <class T>
Tensor<T> Decoder<T>::forward(const Tensor<T>& x, Mode mode) {
  Tensor<T> h = x;
  for (std::size_t i = 0; i < deconvs.size(); ++i) {
    h = deconvs[i].forward(h, mode);
    if (i < relus.size()) h = relus[i].forward(h, mode);
  }
  return h;
}

template <class T>
Tensor<T> Decoder<T>::backward(const Tensor<T>& dy) {
  Tensor<T> d = dy;
  for (std::size_t i = deconvs.size(); i-- > 0;) {
    if (i < relus.size()) d = relus[i].backward(d);
    d = deconvs[i].backward(d);
  }
  return d;
}

template <class T>
void Decoder<T>::collect(const std::string& prefix, nn::ParameterList<T>& out) {
  for (std::size_t i = 0; i < deconvs.size(); ++i) {
    deconvs[i].collect(prefix + "deconv" + std::to_string(i) + ".", out);
  }
}

template <class T>
void Decoder<T>::clear_tape() {
  for (auto& d : deconvs) d.clear_tape();
  for (auto& r : relus) r.clear_tape();
}

template struct Encoder<float>;
template struct Encoder<double>;
template struct Decoder<float>;
template struct Decoder<double>;

}  // namespace detail

// ---------------------------------------------------------------------------
// ConvDeconv

template <class T>
ConvDeconvNet<T>::ConvDeconvNet(const ConvDeconvConfig& config)
    : config_(config),
      rng_(config.seed, kInitStream, 1),
      encoder_(config.encoder, config.image_size, rng_),
      fc_(encoder_.features(), config.fc_channels * config.image_size * config.image_size, rng_),
      decoder_(config.fc_channels, config.decoder, rng_) {
  require(config.fc_channels > 0, "convdeconv: fc_channels must be positive");
}

template <class T>
Tensor<T> ConvDeconvNet<T>::forward(const Tensor<T>& first, Mode mode) {
  check_image(first, config_.image_size, "convdeconv input");
  const int s = config_.image_size;
  Tensor<T> h = fc_relu_.forward(fc_.forward(encoder_.forward(first, mode), mode), mode);
  h.reshape({first.dim(0), config_.fc_channels, s, s});
  return decoder_.forward(h, mode);
}

template <class T>
void ConvDeconvNet<T>::backward(const Tensor<T>& dprediction) {
  Tensor<T> d = decoder_.backward(dprediction);
  d.reshape({d.dim(0), static_cast<int>(d.size() / static_cast<std::size_t>(d.dim(0)))});
  encoder_.backward(fc_.backward(fc_relu_.backward(d)));
}

template <class T>
nn::ParameterList<T> ConvDeconvNet<T>::parameters() {
  nn::ParameterList<T> out;
  encoder_.collect("encoder.", out);
  fc_.collect("fc.", out);
  decoder_.collect("decoder.", out);
  return out;
}

template <class T>
void ConvDeconvNet<T>::clear_tape() {
  encoder_.clear_tape();
  fc_.clear_tape();
  fc_relu_.clear_tape();
  decoder_.clear_tape();
}

// ---------------------------------------------------------------------------
// ConvLSTMDeconv

template <class T>
ConvLSTMDeconvNet<T>::ConvLSTMDeconvNet(const ConvLSTMDeconvConfig& config)
    : config_(config),
      rng_(config.seed, kInitStream, 2),
      encoder_(config.encoder, config.image_size, rng_),
      lstm_(encoder_.features(), config.hidden, rng_),
      fc_(config.hidden, config.fc_channels * config.image_size * config.image_size, rng_),
      decoder_(config.fc_channels, config.decoder, rng_) {
  require(config.hidden > 0 && config.fc_channels > 0,
          "convlstmdeconv: hidden and fc_channels must be positive");
}

template <class T>
Tensor<T> ConvLSTMDeconvNet<T>::step(const Tensor<T>& x, nn::LstmState<T>& state, Mode mode) {
  const int s = config_.image_size;
  state = lstm_.forward(encoder_.forward(x, mode), state, mode);
  Tensor<T> h = fc_relu_.forward(fc_.forward(state.h, mode), mode);
  h.reshape({x.dim(0), config_.fc_channels, s, s});
  return decoder_.forward(h, mode);
}

template <class T>
std::vector<Tensor<T>> ConvLSTMDeconvNet<T>::teacher_forced(const std::vector<Tensor<T>>& frames,
                                                            Mode mode) {
  require(frames.size() >= 2, "convlstmdeconv: need at least 2 frames");
  for (const auto& f : frames) check_image(f, config_.image_size, "convlstmdeconv input");
  nn::LstmState<T> state = lstm_.zero_state(frames[0].dim(0));
  std::vector<Tensor<T>> out;
  for (std::size_t t = 0; t + 1 < frames.size(); ++t) out.push_back(step(frames[t], state, mode));
  steps_taken_ = static_cast<int>(out.size());
  return out;
}

template <class T>
void ConvLSTMDeconvNet<T>::backward(const std::vector<Tensor<T>>& dpredictions) {
  require(static_cast<int>(dpredictions.size()) == steps_taken_,
          "convlstmdeconv: backward needs one gradient per prediction");
  Tensor<T> dh_next, dc_next;
  for (std::size_t t = dpredictions.size(); t-- > 0;) {
    Tensor<T> d = decoder_.backward(dpredictions[t]);
    d.reshape({d.dim(0), static_cast<int>(d.size() / static_cast<std::size_t>(d.dim(0)))});
    Tensor<T> dh = fc_.backward(fc_relu_.backward(d));
    if (dh_next.empty()) {
      dh_next = Tensor<T>(dh.shape());
      dc_next = Tensor<T>(dh.shape());
    }
    for (std::size_t i = 0; i < dh.size(); ++i) dh[i] += dh_next[i];
    nn::LstmGrads<T> g = lstm_.backward(dh, dc_next);
    encoder_.backward(g.dx);
    dh_next = std::move(g.dh_prev);
    dc_next = std::move(g.dc_prev);
  }
  steps_taken_ = 0;
}

template <class T>
std::vector<Tensor<T>> ConvLSTMDeconvNet<T>::rollout(const Tensor<T>& first, int steps) {
  require(steps >= 2, "convlstmdeconv: rollout needs at least 2 steps");
  check_image(first, config_.image_size, "convlstmdeconv input");
  nn::LstmState<T> state = lstm_.zero_state(first.dim(0));
  std::vector<Tensor<T>> out;
  out.push_back(step(first, state, Mode::eval));
  for (int t = 2; t < steps; ++t) out.push_back(step(out.back(), state, Mode::eval));
  return out;
}

template <class T>
nn::ParameterList<T> ConvLSTMDeconvNet<T>::parameters() {
  nn::ParameterList<T> out;
  encoder_.collect("encoder.", out);
  lstm_.collect("lstm.", out);
  fc_.collect("fc.", out);
  decoder_.collect("decoder.", out);
  return out;
}

template <class T>
void ConvLSTMDeconvNet<T>::clear_tape() {
  encoder_.clear_tape();
  lstm_.clear_tape();
  fc_.clear_tape();
  fc_relu_.clear_tape();
  decoder_.clear_tape();
  steps_taken_ = 0;
}

// ---------------------------------------------------------------------------
// Residual trunk and classifier

template <class T>
ResidualTrunk<T>::ResidualTrunk(const StabilityNetConfig& config, CounterRng& rng)
    : stem_(3, config.stem_width, 3, config.stem_stride, 1, rng),
      bn_(config.widths.empty() ? 1 : config.widths.back()),
      features_(config.widths.empty() ? 0 : config.widths.back()) {
  require(!config.widths.empty() && config.blocks_per_stage >= 1 && config.stem_width > 0 &&
              config.stem_stride >= 1,
          "residual trunk: needs at least one stage, one block per stage, positive widths");
  int in = config.stem_width;
  for (std::size_t s = 0; s < config.widths.size(); ++s) {
    for (int b = 0; b < config.blocks_per_stage; ++b) {
      const int stride = (s > 0 && b == 0) ? 2 : 1;
      blocks_.push_back(std::make_unique<nn::PreActBlock<T>>(in, config.widths[s], stride, rng));
      in = config.widths[s];
    }
  }
}

template <class T>
Tensor<T> ResidualTrunk<T>::forward(const Tensor<T>& x, Mode mode) {
  Tensor<T> h = stem_.forward(x, mode);
  for (auto& b : blocks_) h = b->forward(h, mode);
  return pool_.forward(relu_.forward(bn_.forward(h, mode), mode), mode);
}

template <class T>
Tensor<T> ResidualTrunk<T>::backward(const Tensor<T>& dfeatures) {
  Tensor<T> d = bn_.backward(relu_.backward(pool_.backward(dfeatures)));
  for (std::size_t i = blocks_.size(); i-- > 0;) d = blocks_[i]->backward(d);
  return stem_.backward(d, false);
}

template <class T>
void ResidualTrunk<T>::collect(const std::string& prefix, nn::ParameterList<T>& out) {
  stem_.collect(prefix + "stem.", out);
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    blocks_[i]->collect(prefix + "block" + std::to_string(i) + ".", out);
  }
  bn_.collect(prefix + "bn.", out);
}

template <class T>
void ResidualTrunk<T>::clear_tape() {
  stem_.clear_tape();
  for (auto& b : blocks_) b->clear_tape();
  bn_.clear_tape();
  relu_.clear_tape();
  pool_.clear_tape();
}

template <class T>
StabilityNet<T>::StabilityNet(const StabilityNetConfig& config)
    : config_(config),
      rng_(config.seed, kInitStream, 3),
      trunk_(config, rng_),
      head_(trunk_.features() * (config.variant == StabilityVariant::double_frame ? 2 : 1),
            config.classes, rng_) {
  require(config.classes >= 2, "stability net: need at least 2 classes");
}

template <class T>
Tensor<T> StabilityNet<T>::logits(const Tensor<T>& first, const Tensor<T>& last, Mode mode) {
  check_image(first, config_.image_size, "stability net first frame");
  if (config_.variant == StabilityVariant::single) {
    require(last.empty(), "stability net: the single-frame variant takes no last frame");
    return head_.forward(trunk_.forward(first, mode), mode);
  }
  require(!last.empty(), "stability net: the double-frame variant needs a last frame");
  check_image(last, config_.image_size, "stability net last frame");
  require(last.dim(0) == first.dim(0), "stability net: first and last batch sizes differ");
  const Tensor<T> a = trunk_.forward(first, mode);
  const Tensor<T> b = trunk_.forward(last, mode);
  const int n = first.dim(0), f = trunk_.features();
  Tensor<T> joined({n, 2 * f});
  for (int s = 0; s < n; ++s) {
    std::copy_n(a.data() + s * f, f, joined.data() + s * 2 * f);
    std::copy_n(b.data() + s * f, f, joined.data() + s * 2 * f + f);
  }
  return head_.forward(joined, mode);
}

template <class T>
void StabilityNet<T>::backward(const Tensor<T>& dlogits) {
  Tensor<T> d = head_.backward(dlogits);
  if (config_.variant == StabilityVariant::single) {
    trunk_.backward(d);
    return;
  }
  const int n = d.dim(0), f = trunk_.features();
  Tensor<T> da({n, f}), db({n, f});
  for (int s = 0; s < n; ++s) {
    std::copy_n(d.data() + s * 2 * f, f, da.data() + s * f);
    std::copy_n(d.data() + s * 2 * f + f, f, db.data() + s * f);
  }
  // Reverse order of the two forward applications.
  trunk_.backward(db);
  trunk_.backward(da);
}

template <class T>
std::vector<T> StabilityNet<T>::fall_probability(const Tensor<T>& first, const Tensor<T>& last) {
  const Tensor<T> p = nn::softmax(logits(first, last, Mode::eval));
  std::vector<T> out(static_cast<std::size_t>(p.dim(0)));
  for (int s = 0; s < p.dim(0); ++s) out[s] = p[static_cast<std::size_t>(s) * p.dim(1) + 1];
  return out;
}

template <class T>
nn::ParameterList<T> StabilityNet<T>::parameters() {
  nn::ParameterList<T> out;
  trunk_.collect("trunk.", out);
  head_.collect("head.", out);
  return out;
}

template <class T>
std::size_t StabilityNet<T>::trunk_parameter_count() {
  nn::ParameterList<T> out;
  trunk_.collect("", out);
  return out.count();
}

template <class T>
std::size_t StabilityNet<T>::head_parameter_count() {
  nn::ParameterList<T> out;
  head_.collect("", out);
  return out.count();
}

template <class T>
void StabilityNet<T>::clear_tape() {
  trunk_.clear_tape();
  head_.clear_tape();
}

template class ConvDeconvNet<float>;
template class ConvDeconvNet<double>;
template class ConvLSTMDeconvNet<float>;
template class ConvLSTMDeconvNet<double>;
template class ResidualTrunk<float>;
template class ResidualTrunk<double>;
template class StabilityNet<float>;
template class StabilityNet<double>;

}  // namespace towerphys
