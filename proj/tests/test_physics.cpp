#include <algorithm>
#include <cmath>
#include <vector>

#include "doctest.h"
#include "towerphys/error.hpp"
#include "towerphys/physics.hpp"
#include "towerphys/random.hpp"
#include "towerphys/scenegen.hpp"

using namespace towerphys;

namespace {

// Independent center-of-mass rule, written from scratch against x positions.
struct Oracle {
  bool stable;
  double margin;
};

Oracle com_oracle(const std::vector<double>& xs, double side = 1.0) {
  const int n = static_cast<int>(xs.size());
  double margin = 0.5 * side;
  bool stable = true;
  for (int j = 0; j < n; ++j) {
    double lo = xs[j] - 0.5 * side, hi = xs[j] + 0.5 * side;
    if (j > 0) {
      lo = std::max(lo, xs[j - 1] - 0.5 * side);
      hi = std::min(hi, xs[j - 1] + 0.5 * side);
    }
    double sum = 0.0;
    for (int k = j; k < n; ++k) sum += xs[k];
    const double com = sum / (n - j);
    const double d = std::min(com - lo, hi - com);
    margin = std::min(margin, d);
    if (!(d > 0.0)) stable = false;
  }
  return {stable, margin};
}

double max_displacement(const Trajectory& t) {
  double m = 0.0;
  for (std::size_t b = 0; b < t.states.front().size(); ++b) {
    const auto& a = t.states.front()[b];
    const auto& z = t.states.back()[b];
    m = std::max(m, std::hypot(z.position.x - a.position.x, z.position.y - a.position.y));
  }
  return m;
}

}  // namespace

TEST_CASE("make_tower rests each block on the one below") {
  const std::vector<double> xs{0.0, 0.2, -0.1, 0.3};
  const Scene s = make_tower(xs);
  REQUIRE(s.blocks.size() == 4);
  for (int i = 0; i < 4; ++i) {
    CHECK(s.blocks[i].position.x == xs[i]);
    CHECK(s.blocks[i].position.y == 0.5 + i);
    CHECK(s.blocks[i].angle == 0.0);
    CHECK(s.blocks[i].linear_velocity == Vec2{});
  }
  const std::vector<double> bad{0.0, 1.0};
  CHECK_THROWS_AS(make_tower(bad), Error);
}

TEST_CASE("single resting block is exactly static") {
  const std::vector<double> xs{0.0};
  SimulationState st{make_tower(xs), {}};
  const Scene initial = st.scene;
  for (int i = 0; i < 600; ++i) st = step(st, 1.0 / 120.0, {}, i);
  CHECK(st.scene.blocks[0] == initial.blocks[0]);
}

TEST_CASE("dropped block comes to rest on the ground") {
  const std::vector<double> xs{0.0};
  Scene s = make_tower(xs);
  s.blocks[0].position.y += 1.0;
  const Trajectory t = simulate(s, 6.0);
  const BlockState& end = t.states.back()[0];
  CHECK(std::abs(end.position.y - 0.5) <= SolverSettings{}.contact_slop + 1e-9);
  CHECK(std::abs(end.position.x) < 1e-9);
  CHECK(std::abs(end.linear_velocity.y) < 1e-6);
  // Free fall of 1 m takes sqrt(2 / 9.8) = 0.4518 s; the block must still be
  // airborne just before and landed shortly after.
  CHECK(t.states[50][0].position.y > 0.5 + 0.1);
  CHECK(t.states[70][0].position.y < 0.5 + 0.01);
}

TEST_CASE("aligned towers stay put over the horizon") {
  for (int n : {3, 5}) {
    const std::vector<double> xs(n, 0.0);
    const Trajectory t = simulate(make_tower(xs));
    CHECK(t.states.size() == 721);
    CHECK(max_displacement(t) < 0.05);
    CHECK(classify_outcome(t, 1.0) == StabilityOutcome{true, 0});
  }
}

TEST_CASE("unsupported top block falls") {
  const std::vector<double> xs{0.0, 0.0, 0.6};
  const Trajectory t = simulate(make_tower(xs));
  const auto& a = t.states.front()[2];
  const auto& z = t.states.back()[2];
  CHECK(std::hypot(z.position.x - a.position.x, z.position.y - a.position.y) > 1.0);
  const StabilityOutcome o = classify_outcome(t, 1.0);
  CHECK_FALSE(o.stable);
  CHECK(o.fallen_count >= 1);
}

TEST_CASE("grossly offset towers") {
  // On the ground the base never moves: both upper blocks slide off it.
  const std::vector<double> xs{0.0, 0.45, 0.9};
  const Trajectory t = simulate(make_tower(xs));
  CHECK(classify_outcome(t, 1.0) == StabilityOutcome{false, 2});
  // Released 2 m above the ground, every block ends scattered on the ground.
  Scene lifted = make_tower(xs);
  for (BlockState& b : lifted.blocks) b.position.y += 2.0;
  const Trajectory u = simulate(lifted);
  for (const BlockState& b : u.states.back()) CHECK(b.position.y < 1.6);
  CHECK(classify_outcome(u, 1.0) == StabilityOutcome{false, 3});
}

TEST_CASE("5-tower with only the top block sliding off") {
  const std::vector<double> xs{0.0, 0.0, 0.0, 0.0, 0.7};
  CHECK(com_oracle({0.0, 0.0, 0.0, 0.0}).stable);
  const Trajectory t = simulate(make_tower(xs));
  CHECK(classify_outcome(t, 1.0) == StabilityOutcome{false, 1});
}

TEST_CASE("empty scene simulates vacuously") {
  const Trajectory t = simulate(Scene{}, 1.0);
  CHECK(t.states.size() == 121);
  for (const auto& s : t.states) CHECK(s.empty());
}

TEST_CASE("step rejects non-finite state and names the step") {
  const std::vector<double> xs{0.0, 0.1};
  Scene s = make_tower(xs);
  s.blocks[1].angular_velocity = std::nan("");
  try {
    step(s, 1.0 / 120.0, {}, 17);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::numerical);
    CHECK(std::string(e.what()).find("17") != std::string::npos);
  }
  CHECK_THROWS_AS(step(make_tower(xs), 0.0), Error);
}

TEST_CASE("simulation is deterministic") {
  const std::vector<double> xs{0.0, 0.31, -0.12, 0.27};
  const Trajectory a = simulate(make_tower(xs));
  const Trajectory b = simulate(make_tower(xs));
  CHECK(a.states == b.states);
}

TEST_CASE("mirrored scenes give mirrored trajectories") {
  CounterRng rng(99, 1, 0);
  for (int trial = 0; trial < 12; ++trial) {
    const int n = 3 + trial % 3;
    std::vector<double> xs{0.0};
    for (int i = 1; i < n; ++i) xs.push_back(xs.back() + rng.uniform(-0.45, 0.45));
    const Scene s = make_tower(xs);
    const Trajectory a = simulate(s);
    const Trajectory b = simulate(mirror(s));
    double worst = 0.0;
    for (std::size_t k = 0; k < a.states.size(); ++k) {
      const auto m = mirror(a.states[k]);
      for (int i = 0; i < n; ++i) {
        worst = std::max(worst, std::abs(m[i].position.x - b.states[k][i].position.x));
        worst = std::max(worst, std::abs(m[i].position.y - b.states[k][i].position.y));
      }
    }
    CHECK(worst <= 1e-9);
    CHECK(classify_outcome(a, 1.0) == classify_outcome(b, 1.0));
  }
}

TEST_CASE("mechanical energy does not grow with zero restitution") {
  const std::vector<double> xs{0.0, 0.4, 0.8};
  SimulationState st{make_tower(xs), {}};
  double e = mechanical_energy(st.scene);
  double worst = 0.0;
  for (int i = 0; i < 720; ++i) {
    st = step(st, 1.0 / 120.0, {}, i);
    const double next = mechanical_energy(st.scene);
    worst = std::max(worst, next - e);
    e = next;
  }
  CHECK(worst < 0.05);
}

TEST_CASE("classify_outcome thresholds") {
  const std::vector<double> xs{0.0, 0.0};
  const Scene s = make_tower(xs);
  Trajectory t{1.0 / 120.0, {s.blocks, s.blocks}};
  CHECK(classify_outcome(t, 1.0) == StabilityOutcome{true, 0});
  t.states.back()[1].position.x += 0.26;
  CHECK(classify_outcome(t, 1.0) == StabilityOutcome{false, 1});
  t.states.back()[0].angle = 16.0 * M_PI / 180.0;
  CHECK(classify_outcome(t, 1.0) == StabilityOutcome{false, 2});
  t.states.back()[0].angle = -14.0 * M_PI / 180.0;
  CHECK(classify_outcome(t, 1.0) == StabilityOutcome{false, 1});
}

TEST_CASE("classify_outcome is monotone in its thresholds") {
  CounterRng rng(5, 2, 0);
  for (int trial = 0; trial < 20; ++trial) {
    const std::vector<double> xs{0.0, rng.uniform(-0.5, 0.5), 0.0};
    std::vector<double> ys = xs;
    ys[2] = ys[1] + rng.uniform(-0.45, 0.45);
    const Trajectory t = simulate(make_tower(ys), 3.0);
    const int tight = classify_outcome(t, 1.0, {0.1, 5.0}).fallen_count;
    const int mid = classify_outcome(t, 1.0).fallen_count;
    const int loose = classify_outcome(t, 1.0, {0.6, 40.0}).fallen_count;
    CHECK(tight >= mid);
    CHECK(mid >= loose);
  }
}

TEST_CASE("quasi-static oracle examples") {
  SUBCASE("centered stack") {
    const std::vector<double> xs{0.0, 0.0, 0.0};
    const QuasiStaticResult r = quasi_static_stability(make_tower(xs));
    CHECK(r.stable);
    CHECK(r.margin == doctest::Approx(0.5).epsilon(1e-12));
  }
  SUBCASE("2-tower just past the edge") {
    const std::vector<double> xs{0.0, 0.5 + 1e-9};
    CHECK_FALSE(quasi_static_stability(make_tower(xs)).stable);
    const std::vector<double> edge{0.0, 0.5 - 1e-9};
    CHECK(quasi_static_stability(make_tower(edge)).stable);
  }
  SUBCASE("offsets (0, 0.3, 0.3)") {
    // Interfaces: ground [-0.5,0.5] com 0.3; first [-0.2,0.5] com 0.45;
    // second [0.1,0.8] com 0.6. Tightest is 0.05 at the first.
    const std::vector<double> xs{0.0, 0.3, 0.6};
    const QuasiStaticResult r = quasi_static_stability(make_tower(xs));
    CHECK(r.stable);
    CHECK(r.margin == doctest::Approx(0.05).epsilon(1e-9));
  }
}

TEST_CASE("quasi-static oracle matches an independent brute force") {
  CounterRng rng(11, 0, 0);
  for (int trial = 0; trial < 2000; ++trial) {
    const int n = 1 + static_cast<int>(rng.below(6));
    std::vector<double> xs{rng.uniform(-1.0, 1.0)};
    for (int i = 1; i < n; ++i) xs.push_back(xs.back() + rng.uniform(-0.9, 0.9));
    const QuasiStaticResult r = quasi_static_stability(make_tower(xs));
    const Oracle o = com_oracle(xs);
    CHECK(r.stable == o.stable);
    CHECK(r.margin == doctest::Approx(o.margin).epsilon(1e-9));
  }
}

TEST_CASE("clearly stable and clearly unstable towers agree with the oracle (small sample)") {
  for (int n : {3, 5}) {
    TowerSamplerConfig c;
    c.n_blocks = n;
    c.rng_seed = 2024;
    int agree = 0, total = 0;
    for (std::uint64_t d = 0; total < 40; ++d) {
      const Scene s = sample_tower(c, d);
      const QuasiStaticResult q = quasi_static_stability(s);
      if (std::abs(q.margin) <= 0.05) continue;
      ++total;
      agree += classify_outcome(simulate(s), 1.0).stable == q.stable;
    }
    CHECK(agree >= 39);
  }
}

TEST_CASE("default offset fractions") {
  CHECK(default_offset_fraction(3) > default_offset_fraction(4));
  CHECK(default_offset_fraction(4) > default_offset_fraction(5));
  for (int n = 1; n <= 16; ++n) {
    CHECK(default_offset_fraction(n) > 0.0);
    CHECK(default_offset_fraction(n) < 1.0);
  }
}

TEST_CASE("sample_tower") {
  TowerSamplerConfig c;
  c.n_blocks = 4;
  c.rng_seed = 3;
  SUBCASE("deterministic in (seed, stream, draw)") {
    CHECK(sample_tower(c, 5) == sample_tower(c, 5));
    CHECK_FALSE(sample_tower(c, 5) == sample_tower(c, 6));
    TowerSamplerConfig other = c;
    other.stream = 1;
    CHECK_FALSE(sample_tower(c, 5) == sample_tower(other, 5));
  }
  SUBCASE("zero range gives the centered stack") {
    c.max_offset_fraction = [](int) { return 0.0; };
    const std::vector<double> xs(4, 0.0);
    CHECK(sample_tower(c, 0) == make_tower(xs));
  }
  SUBCASE("geometry") {
    const Scene s = sample_tower(c, 1);
    CHECK(s.blocks[0].position.x == 0.0);
    for (int i = 1; i < 4; ++i) {
      CHECK(s.blocks[i].position.y == 0.5 + i);
      CHECK(std::abs(s.blocks[i].position.x - s.blocks[i - 1].position.x) <=
            default_offset_fraction(4));
    }
  }
}

TEST_CASE("taller towers get strictly smaller offsets") {
  auto max_offset = [](int n) {
    TowerSamplerConfig c;
    c.n_blocks = n;
    double m = 0.0;
    for (std::uint64_t d = 0; d < 500; ++d) {
      const Scene s = sample_tower(c, d);
      for (int i = 1; i < n; ++i) {
        m = std::max(m, std::abs(s.blocks[i].position.x - s.blocks[i - 1].position.x));
      }
    }
    return m;
  };
  const double m3 = max_offset(3), m5 = max_offset(5);
  CHECK(m5 < m3);
  CHECK(m5 <= default_offset_fraction(5));
}

TEST_CASE("offsets are uniform on the configured interval") {
  TowerSamplerConfig c;
  c.n_blocks = 2;
  c.rng_seed = 77;
  const double f = default_offset_fraction(2);
  std::vector<double> u;
  for (std::uint64_t d = 0; d < 10000; ++d) {
    u.push_back((sample_tower(c, d).blocks[1].position.x + f) / (2.0 * f));
  }
  std::sort(u.begin(), u.end());
  double dev = 0.0;
  const double n = static_cast<double>(u.size());
  for (std::size_t i = 0; i < u.size(); ++i) {
    dev = std::max({dev, std::abs((i + 1) / n - u[i]), std::abs(u[i] - i / n)});
  }
  CHECK(dev < 0.02);
}

TEST_CASE("generate_balanced") {
  TowerSamplerConfig c;
  c.n_blocks = 3;
  c.rng_seed = 8;
  SUBCASE("exact balance, determinism, and unaltered scenes") {
    const auto a = generate_balanced(c, 40);
    REQUIRE(a.size() == 40);
    int stable = 0;
    for (const LabeledScene& l : a) {
      stable += l.outcome.stable;
      CHECK(l.outcome.stable == (l.outcome.fallen_count == 0));
      CHECK(l.scene == sample_tower(c, l.draw_index));
      CHECK(l.sampler_seed == 8);
    }
    CHECK(stable == 20);
    const auto b = generate_balanced(c, 40, 3);
    REQUIRE(b.size() == a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(a[i].draw_index == b[i].draw_index);
      CHECK(a[i].outcome == b[i].outcome);
    }
  }
  SUBCASE("odd count is rejected") { CHECK_THROWS_AS(generate_balanced(c, 3), Error); }
  SUBCASE("zero range cannot fill the unstable quota") {
    c.max_offset_fraction = [](int) { return 0.0; };
    try {
      generate_balanced(c, 2);
      FAIL("expected quota error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::quota_unreachable);
    }
  }
}

TEST_CASE("raw stable fractions are moderate for the default ranges") {
  for (int n : {3, 4, 5}) {
    TowerSamplerConfig c;
    c.n_blocks = n;
    c.rng_seed = 1;
    int stable = 0;
    const int draws = 200;
    for (int d = 0; d < draws; ++d) stable += label_draw(c, d).outcome.stable;
    const double frac = static_cast<double>(stable) / draws;
    CHECK(frac >= 0.25);
    CHECK(frac <= 0.75);
  }
}
