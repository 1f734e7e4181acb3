#pragma once

// Deterministic 2D rigid-body simulation of stacked square blocks.
//
// The engine works in a vertical plane: x is lateral, y points up. Blocks are
// oriented squares of equal side and unit density. Contacts are resolved with
// sequential impulses: each contact manifold (block-ground or block-block)
// solves its normal impulses as a two-point block LCP and its friction as a
// single tangential impulse at the manifold center, clamped by the Coulomb
// cone of the summed normal impulses.
//
// Every arithmetic path is written so that mirroring a scene about x = 0
// mirrors the trajectory bit-for-bit; the core library is compiled with
// floating-point contraction disabled to keep that property.

#include <array>
#include <cstdint>
#include <span>
#include <vector>

namespace towerphys {

struct Vec2 {
  double x = 0.0;
  double y = 0.0;

  friend bool operator==(const Vec2&, const Vec2&) = default;
};

struct BlockState {
  Vec2 position;
  double angle = 0.0;
  Vec2 linear_velocity;
  double angular_velocity = 0.0;

  friend bool operator==(const BlockState&, const BlockState&) = default;
};

struct Scene {
  std::vector<BlockState> blocks;  // bottom to top
  double block_side = 1.0;
  double gravity = 9.8;
  double friction_coefficient = 0.8;
  double restitution = 0.0;
  double ground_height = 0.0;

  friend bool operator==(const Scene&, const Scene&) = default;
};

// Numerical knobs of the contact solver. Defaults are the dataset constants.
struct SolverSettings {
  double timestep = 1.0 / 120.0;
  int iterations = 10;
  double contact_slop = 1e-3;    // allowed penetration before position correction
  double baumgarte = 0.2;        // fraction of excess penetration removed per step
  double contact_margin = 0.02;  // speculative contact distance
  double horizon = 6.0;          // default simulated seconds
};

// Accumulated impulses from the previous step, keyed by body pair and contact
// feature, used to warm-start the solver.
struct ContactCache {
  struct Manifold {
    int body_a = -1;  // -1 is the ground
    int body_b = 0;
    int count = 0;
    std::array<std::uint32_t, 2> features{};
    std::array<double, 2> normal_impulses{};
    double tangent_impulse = 0.0;
  };
  std::vector<Manifold> manifolds;
};

struct SimulationState {
  Scene scene;
  ContactCache contacts;
};

struct Trajectory {
  double timestep = 0.0;
  // states[k] is the scene at time k * timestep; states[0] is the initial pose.
  std::vector<std::vector<BlockState>> states;
};

struct StabilityOutcome {
  bool stable = true;
  int fallen_count = 0;

  friend bool operator==(const StabilityOutcome&, const StabilityOutcome&) = default;
};

// A block has fallen when, at the last recorded step, its center moved more
// than displacement_fraction * block_side or it tilted more than tilt_degrees.
struct FallCriterion {
  double displacement_fraction = 0.25;
  double tilt_degrees = 15.0;
};

struct QuasiStaticResult {
  bool stable = true;
  double margin = 0.0;  // meters; negative when some center of mass is unsupported
};

// Tower whose i-th block is centered at x_positions[i] and rests exactly on
// the block below (or the ground).
Scene make_tower(std::span<const double> x_positions, double block_side = 1.0);

// Reflects positions, angles, and velocities about the vertical axis x = 0.
Scene mirror(const Scene& scene);
std::vector<BlockState> mirror(std::span<const BlockState> blocks);

// Advances the scene by one step of length dt. Throws Error(numerical) naming
// step_index if the input or resulting state is not finite.
SimulationState step(const SimulationState& state, double dt,
                     const SolverSettings& settings = {}, std::int64_t step_index = 0);
// Cold-started step (no impulses carried over).
Scene step(const Scene& scene, double dt, const SolverSettings& settings = {},
           std::int64_t step_index = 0);

// Runs round(duration / timestep) steps. The trajectory holds steps + 1 states.
Trajectory simulate(const Scene& scene, double duration,
                    const SolverSettings& settings = {});
inline Trajectory simulate(const Scene& scene) {
  return simulate(scene, SolverSettings{}.horizon);
}

// Labels the final recorded step against the initial one.
StabilityOutcome classify_outcome(const Trajectory& trajectory, double block_side,
                                  const FallCriterion& criterion = {});

// Static center-of-mass test at every interface (ground = interface 0).
QuasiStaticResult quasi_static_stability(const Scene& scene);

// Kinetic plus gravitational potential energy, unit density.
double mechanical_energy(const Scene& scene);

}  // namespace towerphys
