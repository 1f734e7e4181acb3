#pragma once

#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "towerphys/nn/layers.hpp"

namespace towerphys::nn {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// One bias-corrected Adam update of a single tensor at step t (t >= 1).
template <class T>
void adam_update(std::span<T> param, std::span<const T> grad, std::span<T> m, std::span<T> v,
                 std::int64_t t, const AdamConfig& config);

template <class T>
class Adam {
 public:
  Adam(ParameterList<T> params, AdamConfig config = {});

  // Applies the accumulated gradients. Throws Error(divergence) naming the
  // parameter if any gradient is not finite; parameters are left untouched.
  void step();
  std::int64_t steps() const { return t_; }
  const AdamConfig& config() const { return config_; }
  const std::vector<Tensor<T>>& first_moments() const { return m_; }
  const std::vector<Tensor<T>>& second_moments() const { return v_; }

 private:
  ParameterList<T> params_;
  AdamConfig config_;
  std::vector<Tensor<T>> m_, v_;
  std::int64_t t_ = 0;
};

// Tracks a validation metric; snapshots the parameters (and buffers) whenever
// it improves and signals a stop after `patience` epochs without improvement.
template <class T>
class EarlyStopper {
 public:
  enum class Goal { minimize, maximize };

  EarlyStopper(ParameterList<T> params, int patience, Goal goal);

  // Records one epoch's metric. Returns true when training should stop.
  bool observe(double metric);
  // Copies the best snapshot back into the parameters.
  void restore() const;

  bool should_stop() const { return since_improvement_ >= patience_; }
  double best() const { return best_; }
  int best_epoch() const { return best_epoch_; }
  int epochs() const { return epochs_; }
  int epochs_since_improvement() const { return since_improvement_; }

 private:
  ParameterList<T> params_;
  int patience_;
  Goal goal_;
  double best_;
  int best_epoch_ = -1;
  int epochs_ = 0;
  int since_improvement_ = 0;
  std::vector<Tensor<T>> snapshot_;
};

}  // namespace towerphys::nn
