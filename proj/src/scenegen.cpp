#include "towerphys/scenegen.hpp"

#include <algorithm>
#include <string>
#include <thread>

#include "towerphys/error.hpp"
#include "towerphys/random.hpp"

namespace towerphys {
namespace {

constexpr std::uint64_t kShuffleStream = 0x5348554646ULL;  // "SHUFF"

void validate(const TowerSamplerConfig& config) {
  require(config.n_blocks >= 1 && config.n_blocks <= 16,
          "tower sampler: n_blocks must be in 1..16");
  require(config.block_side > 0.0, "tower sampler: block_side must be positive");
  require(static_cast<bool>(config.max_offset_fraction),
          "tower sampler: missing offset schedule");
  const double f = config.max_offset_fraction(config.n_blocks);
  require(f >= 0.0 && f < 1.0, "tower sampler: offset fraction must be in [0, 1)");
}

}  // namespace

double default_offset_fraction(int n_blocks) {
  switch (n_blocks) {
    case 3: return 0.70;
    case 4: return 0.58;
    case 5: return 0.52;
    default: break;
  }
  if (n_blocks < 3) return 0.80;
  // Past five blocks, shrink in proportion to height.
  return 0.52 * 5.0 / static_cast<double>(n_blocks);
}

Scene sample_tower(const TowerSamplerConfig& config, std::uint64_t draw_index) {
  validate(config);
  CounterRng rng(config.rng_seed, config.stream, draw_index);
  const double reach = config.max_offset_fraction(config.n_blocks) * config.block_side;
  std::vector<double> xs(static_cast<std::size_t>(config.n_blocks), 0.0);
  for (std::size_t i = 1; i < xs.size(); ++i) {
    xs[i] = xs[i - 1] + rng.uniform(-reach, reach);
  }
  return make_tower(xs, config.block_side);
}

LabeledScene label_draw(const TowerSamplerConfig& config, std::uint64_t draw_index) {
  LabeledScene out;
  out.scene = sample_tower(config, draw_index);
  const Trajectory traj = simulate(out.scene, config.solver.horizon, config.solver);
  out.outcome = classify_outcome(traj, config.block_side, config.criterion);
  out.sampler_seed = config.rng_seed;
  out.draw_index = draw_index;
  return out;
}

std::vector<LabeledScene> generate_balanced(const TowerSamplerConfig& config, int count,
                                            int workers) {
  validate(config);
  require(count >= 0 && count % 2 == 0, "generate_balanced: count must be even");
  workers = std::max(1, workers);

  const int quota = count / 2;
  int stable = 0;
  int unstable = 0;
  std::vector<LabeledScene> accepted;
  accepted.reserve(static_cast<std::size_t>(count));
  const std::uint64_t give_up = 100ULL * static_cast<std::uint64_t>(std::max(count, 1));
  std::uint64_t useless_run = 0;

  const std::size_t chunk = static_cast<std::size_t>(std::max(16, 8 * workers));
  std::vector<LabeledScene> batch(chunk);
  std::uint64_t next_draw = 0;
  while (stable < quota || unstable < quota) {
    // Label a chunk of draws in parallel; accept sequentially in draw order.
    auto label_range = [&](std::size_t begin, std::size_t end) {
      for (std::size_t k = begin; k < end; ++k) batch[k] = label_draw(config, next_draw + k);
    };
    if (workers == 1) {
      label_range(0, chunk);
    } else {
      std::vector<std::thread> pool;
      const std::size_t per = (chunk + static_cast<std::size_t>(workers) - 1) /
                              static_cast<std::size_t>(workers);
      for (std::size_t b = 0; b < chunk; b += per) {
        pool.emplace_back(label_range, b, std::min(chunk, b + per));
      }
      for (auto& t : pool) t.join();
    }
    for (std::size_t k = 0; k < chunk && (stable < quota || unstable < quota); ++k) {
      LabeledScene& s = batch[k];
      int& have = s.outcome.stable ? stable : unstable;
      if (have < quota) {
        ++have;
        accepted.push_back(std::move(s));
        useless_run = 0;
      } else if (++useless_run >= give_up) {
        fail(ErrorKind::quota_unreachable,
             "generate_balanced: " + std::to_string(give_up) +
                 " consecutive draws produced no " +
                 (stable < quota ? "stable" : "unstable") + " tower for n_blocks=" +
                 std::to_string(config.n_blocks) + " (offset range miscalibrated?)");
      }
    }
    next_draw += chunk;
  }

  CounterRng shuffle_rng(config.rng_seed, config.stream ^ kShuffleStream,
                         static_cast<std::uint64_t>(count));
  for (std::size_t i = accepted.size(); i > 1; --i) {
    const std::size_t j = shuffle_rng.below(i);
    std::swap(accepted[i - 1], accepted[j]);
  }
  return accepted;
}

}  // namespace towerphys
