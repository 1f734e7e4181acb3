#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "towerphys/physics.hpp"

namespace towerphys {

// Maximum lateral offset between consecutive blocks, as a fraction of the
// block side, for a tower of n blocks. Strictly decreasing over 3..5.
double default_offset_fraction(int n_blocks);

struct TowerSamplerConfig {
  int n_blocks = 3;
  std::function<double(int)> max_offset_fraction = default_offset_fraction;
  std::uint64_t rng_seed = 0;
  std::uint64_t stream = 0;  // keeps dataset splits on disjoint draws
  double block_side = 1.0;
  SolverSettings solver;
  FallCriterion criterion;
};

struct LabeledScene {
  Scene scene;
  StabilityOutcome outcome;
  std::uint64_t sampler_seed = 0;
  std::uint64_t draw_index = 0;
};

// Block 0 at x = 0; each next block rests on the previous one, shifted by an
// offset drawn uniformly from [-f(n), +f(n)] * block_side. Pure in
// (config.rng_seed, config.stream, draw_index).
Scene sample_tower(const TowerSamplerConfig& config, std::uint64_t draw_index);

// Simulates and labels one draw.
LabeledScene label_draw(const TowerSamplerConfig& config, std::uint64_t draw_index);

// Rejection-samples successive draws until count / 2 stable and count / 2
// unstable towers are accepted, then returns them in a seeded shuffled order.
// Labeling runs on `workers` threads; the result does not depend on it.
// Throws Error(quota_unreachable) after 100 * count consecutive useless draws.
std::vector<LabeledScene> generate_balanced(const TowerSamplerConfig& config, int count,
                                            int workers = 1);

}  // namespace towerphys
