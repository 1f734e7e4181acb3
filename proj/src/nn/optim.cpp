#include "towerphys/nn/optim.hpp"

#include <cmath>

namespace towerphys::nn {

template <class T>
void adam_update(std::span<T> param, std::span<const T> grad, std::span<T> m, std::span<T> v,
                 std::int64_t t, const AdamConfig& c) {
  require(t >= 1, "adam: step count must start at 1");
  if (grad.size() != param.size() || m.size() != param.size() || v.size() != param.size()) {
    fail(ErrorKind::shape_mismatch, "adam: parameter, gradient and moment sizes differ");
  }
  const T b1 = static_cast<T>(c.beta1), b2 = static_cast<T>(c.beta2);
  const T c1 = static_cast<T>(1.0 - std::pow(c.beta1, static_cast<double>(t)));
  const T c2 = static_cast<T>(1.0 - std::pow(c.beta2, static_cast<double>(t)));
  const T lr = static_cast<T>(c.learning_rate), eps = static_cast<T>(c.epsilon);
  for (std::size_t i = 0; i < param.size(); ++i) {
    const T g = grad[i];
    m[i] = b1 * m[i] + (T(1) - b1) * g;
    v[i] = b2 * v[i] + (T(1) - b2) * g * g;
    const T m_hat = m[i] / c1;
    const T v_hat = v[i] / c2;
    param[i] -= lr * m_hat / (std::sqrt(v_hat) + eps);
  }
}

template <class T>
Adam<T>::Adam(ParameterList<T> params, AdamConfig config)
    : params_(std::move(params)), config_(config) {
  require(config.learning_rate > 0 && config.beta1 >= 0 && config.beta1 < 1 &&
              config.beta2 >= 0 && config.beta2 < 1 && config.epsilon > 0,
          "adam: invalid hyperparameters");
  for (auto& [name, p] : params_.params) {
    m_.emplace_back(p->value.shape());
    v_.emplace_back(p->value.shape());
  }
}

template <class T>
void Adam<T>::step() {
  for (auto& [name, p] : params_.params) {
    for (std::size_t i = 0; i < p->grad.size(); ++i) {
      if (!std::isfinite(p->grad[i])) {
        fail(ErrorKind::divergence, "adam: non-finite gradient in " + name + " at step " +
                                        std::to_string(t_ + 1));
      }
    }
  }
  ++t_;
  for (std::size_t k = 0; k < params_.params.size(); ++k) {
    Parameter<T>& p = *params_.params[k].second;
    adam_update<T>(p.value.span(), p.grad.span(), m_[k].span(), v_[k].span(), t_, config_);
  }
}

template <class T>
EarlyStopper<T>::EarlyStopper(ParameterList<T> params, int patience, Goal goal)
    : params_(std::move(params)),
      patience_(patience),
      goal_(goal),
      best_(goal == Goal::minimize ? std::numeric_limits<double>::infinity()
                                   : -std::numeric_limits<double>::infinity()) {
  require(patience >= 1, "early stopping: patience must be at least 1");
}

template <class T>
bool EarlyStopper<T>::observe(double metric) {
  if (std::isnan(metric)) fail(ErrorKind::divergence, "early stopping: metric is NaN");
  const bool improved = goal_ == Goal::minimize ? metric < best_ : metric > best_;
  if (improved) {
    best_ = metric;
    best_epoch_ = epochs_;
    since_improvement_ = 0;
    snapshot_.clear();
    for (const auto& [name, p] : params_.params) snapshot_.push_back(p->value);
    for (const auto& [name, b] : params_.buffers) snapshot_.push_back(*b);
  } else {
    ++since_improvement_;
  }
  ++epochs_;
  return should_stop();
}

template <class T>
void EarlyStopper<T>::restore() const {
  if (snapshot_.empty()) return;
  std::size_t k = 0;
  for (const auto& [name, p] : params_.params) p->value = snapshot_[k++];
  for (const auto& [name, b] : params_.buffers) *b = snapshot_[k++];
}

template void adam_update(std::span<float>, std::span<const float>, std::span<float>,
                          std::span<float>, std::int64_t, const AdamConfig&);
template void adam_update(std::span<double>, std::span<const double>, std::span<double>,
                          std::span<double>, std::int64_t, const AdamConfig&);
template class Adam<float>;
template class Adam<double>;
template class EarlyStopper<float>;
template class EarlyStopper<double>;

}  // namespace towerphys::nn
