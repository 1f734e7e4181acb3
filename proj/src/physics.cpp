#include "towerphys/physics.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "towerphys/error.hpp"

// Mirror-exactness notes. The engine relies on these IEEE facts, all of which
// hold under round-to-nearest with contraction disabled:
//   (-a) * b == -(a * b),   a - b == -(b - a),   a + b == b + a.
// Expressions that combine the two points of a manifold are therefore written
// so that swapping the points only commutes additions and multiplications.

namespace towerphys {
namespace {

Vec2 operator+(Vec2 a, Vec2 b) { return {a.x + b.x, a.y + b.y}; }
Vec2 operator-(Vec2 a, Vec2 b) { return {a.x - b.x, a.y - b.y}; }
Vec2 operator-(Vec2 a) { return {-a.x, -a.y}; }
Vec2 operator*(double s, Vec2 a) { return {s * a.x, s * a.y}; }
double dot(Vec2 a, Vec2 b) { return a.x * b.x + a.y * b.y; }
double cross(Vec2 a, Vec2 b) { return a.x * b.y - a.y * b.x; }
// w x r for a scalar angular velocity.
Vec2 cross(double w, Vec2 r) { return {-w * r.y, w * r.x}; }

struct Box {
  Vec2 center;
  Vec2 ex;  // local x axis in world coordinates
  Vec2 ey;
  double half = 0.5;
};

Box make_box(const BlockState& b, double half) {
  const double c = std::cos(b.angle);
  const double s = std::sin(b.angle);
  return {b.position, {c, s}, {-s, c}, half};
}

// World position of the local point (lx, ly).
Vec2 box_point(const Box& box, double lx, double ly) {
  return {box.center.x + (box.ex.x * lx + box.ey.x * ly),
          box.center.y + (box.ex.y * lx + box.ey.y * ly)};
}

struct ContactPoint {
  Vec2 point;
  double separation = 0.0;
  std::uint32_t feature = 0;  // stable id of the geometric features in contact
};

struct Manifold {
  int body_a = -1;  // -1 is the ground
  int body_b = 0;
  Vec2 normal;      // from a to b
  int count = 0;
  std::array<ContactPoint, 2> points;
};

// Point on segment (va, vb) where the signed plane distance is zero, given
// distances da and db of opposite sign. Symmetric in its two endpoints.
Vec2 plane_crossing(Vec2 va, double da, Vec2 vb, double db) {
  const double denom = db - da;
  return {(va.x * db - vb.x * da) / denom, (va.y * db - vb.y * da) / denom};
}

// Separating-axis test plus reference-face clipping for two squares.
bool collide_boxes(const Box& a, const Box& b, double margin, Manifold& out) {
  const Vec2 d = b.center - a.center;
  const double h = a.half;

  const double a_x = std::abs(dot(d, a.ex)) -
                     (h + h * (std::abs(dot(a.ex, b.ex)) + std::abs(dot(a.ex, b.ey))));
  const double a_y = std::abs(dot(d, a.ey)) -
                     (h + h * (std::abs(dot(a.ey, b.ex)) + std::abs(dot(a.ey, b.ey))));
  if (a_x > margin || a_y > margin) return false;
  const double b_x = std::abs(dot(d, b.ex)) -
                     (h + h * (std::abs(dot(b.ex, a.ex)) + std::abs(dot(b.ex, a.ey))));
  const double b_y = std::abs(dot(d, b.ey)) -
                     (h + h * (std::abs(dot(b.ey, a.ex)) + std::abs(dot(b.ey, a.ey))));
  if (b_x > margin || b_y > margin) return false;

  // Prefer faces of `a`, and x before y, unless another axis is clearly better.
  constexpr double relative_tol = 0.95;
  const double absolute_tol = 0.01 * h;
  enum { kAx, kAy, kBx, kBy } axis = kAx;
  double separation = a_x;
  if (a_y > relative_tol * separation + absolute_tol) { axis = kAy; separation = a_y; }
  if (b_x > relative_tol * separation + absolute_tol) { axis = kBx; separation = b_x; }
  if (b_y > relative_tol * separation + absolute_tol) { axis = kBy; separation = b_y; }

  const bool ref_is_a = axis == kAx || axis == kAy;
  const Box& ref = ref_is_a ? a : b;
  const Box& inc = ref_is_a ? b : a;
  const bool ref_axis_x = axis == kAx || axis == kBx;
  const Vec2 ref_axis = ref_axis_x ? ref.ex : ref.ey;
  const Vec2 side = ref_axis_x ? ref.ey : ref.ex;
  const Vec2 to_inc = inc.center - ref.center;
  const bool n_positive = dot(to_inc, ref_axis) > 0.0;
  const Vec2 n = n_positive ? ref_axis : -ref_axis;

  // Incident face: the one whose outward normal is most anti-parallel to n.
  const double inc_dx = dot(inc.ex, n);
  const double inc_dy = dot(inc.ey, n);
  Vec2 inc_normal;
  Vec2 inc_tangent;
  const bool inc_axis_x = std::abs(inc_dx) > std::abs(inc_dy);
  const bool inc_positive = (inc_axis_x ? inc_dx : inc_dy) <= 0.0;
  if (inc_axis_x) {
    inc_normal = inc_positive ? inc.ex : -inc.ex;
    inc_tangent = inc.ey;
  } else {
    inc_normal = inc_positive ? inc.ey : -inc.ey;
    inc_tangent = inc.ex;
  }
  const std::uint32_t face_id = (ref_is_a ? 1u : 0u) | (ref_axis_x ? 2u : 0u) |
                                (n_positive ? 4u : 0u) | (inc_axis_x ? 8u : 0u) |
                                (inc_positive ? 16u : 0u);
  const Vec2 face_center = inc.center + h * inc_normal;
  const std::array<Vec2, 2> v = {face_center + h * inc_tangent,
                                 face_center - h * inc_tangent};

  // Clip the incident edge to the reference face's lateral extent. Each
  // endpoint is outside at most one of the two parallel side planes.
  std::array<double, 2> d_plus{};
  std::array<double, 2> d_minus{};
  for (int k = 0; k < 2; ++k) {
    const double u = dot(side, v[k] - ref.center);
    d_plus[k] = u - h;
    d_minus[k] = (-u) - h;
  }
  if ((d_plus[0] > 0.0 && d_plus[1] > 0.0) || (d_minus[0] > 0.0 && d_minus[1] > 0.0)) {
    return false;
  }

  out.count = 0;
  for (int k = 0; k < 2; ++k) {
    const int o = 1 - k;
    Vec2 p = v[k];
    std::uint32_t clip = 0;
    if (d_plus[k] > 0.0) {
      p = plane_crossing(v[k], d_plus[k], v[o], d_plus[o]);
      clip = 1;
    } else if (d_minus[k] > 0.0) {
      p = plane_crossing(v[k], d_minus[k], v[o], d_minus[o]);
      clip = 2;
    }
    const double sep = dot(n, p - ref.center) - h;
    if (sep < margin) {
      const std::uint32_t feature =
          face_id | (static_cast<std::uint32_t>(k) << 5) | (clip << 6);
      out.points[out.count++] = {p - (0.5 * sep) * n, sep, feature};
    }
  }
  out.normal = ref_is_a ? n : -n;
  return out.count > 0;
}

bool collide_ground(const Box& box, double ground, double margin, Manifold& out) {
  const double h = box.half;
  std::array<ContactPoint, 4> candidates{};
  int found = 0;
  std::uint32_t vertex = 0;
  for (const auto& [lx, ly] : {std::pair{h, h}, {-h, h}, {-h, -h}, {h, -h}}) {
    const Vec2 p = box_point(box, lx, ly);
    const double sep = p.y - ground;
    if (sep < margin) candidates[found++] = {{p.x, p.y - 0.5 * sep}, sep, vertex};
    ++vertex;
  }
  if (found == 0) return false;
  if (found > 2) {
    std::stable_sort(candidates.begin(), candidates.begin() + found,
                     [](const ContactPoint& l, const ContactPoint& r) {
                       return l.separation < r.separation;
                     });
    found = 2;
  }
  out.normal = {0.0, 1.0};
  out.count = found;
  out.points[0] = candidates[0];
  out.points[1] = candidates[1];
  return true;
}

struct Body {
  Vec2 v;
  double w = 0.0;
  double inv_mass = 0.0;
  double inv_inertia = 0.0;
};

struct PointConstraint {
  Vec2 r_a;
  Vec2 r_b;
  double normal_mass = 0.0;
  double bias = 0.0;
  double impulse = 0.0;
  std::uint32_t feature = 0;
};

struct ManifoldConstraint {
  int a = -1;
  int b = 0;
  Vec2 normal;
  Vec2 tangent;
  int count = 0;
  std::array<PointConstraint, 2> points;
  // Two-point block solver data.
  double k11 = 0.0, k12 = 0.0, k22 = 0.0;
  double inv11 = 0.0, inv12 = 0.0, inv22 = 0.0;
  // Central friction.
  Vec2 rt_a;
  Vec2 rt_b;
  double tangent_mass = 0.0;
  double tangent_impulse = 0.0;
};

class ContactSolver {
 public:
  ContactSolver(std::vector<Body>& bodies, double friction, double restitution,
                const ContactCache& previous)
      : bodies_(bodies), friction_(friction), restitution_(restitution), previous_(previous) {}

  void add(const Manifold& m, const std::vector<Vec2>& centers, double inv_dt,
           const SolverSettings& settings) {
    ManifoldConstraint c;
    c.a = m.body_a;
    c.b = m.body_b;
    c.normal = m.normal;
    c.tangent = {m.normal.y, -m.normal.x};
    const Vec2 ca = m.body_a >= 0 ? centers[m.body_a] : Vec2{};
    const Vec2 cb = centers[m.body_b];
    const Body& A = body(c.a);
    const Body& B = body(c.b);

    std::array<ContactPoint, 2> pts = m.points;
    int count = m.count;
    if (count == 2) {
      const double kt = well_conditioned(pts, ca, cb, c.normal, A, B);
      if (kt <= 0.0) {
        // Nearly coincident points: collapse to one at the midpoint.
        pts[0] = {0.5 * (pts[0].point + pts[1].point),
                  std::min(pts[0].separation, pts[1].separation), kMergedFeature};
        count = 1;
      }
    }
    c.count = count;
    for (int k = 0; k < count; ++k) {
      PointConstraint& pc = c.points[k];
      pc.feature = pts[k].feature;
      pc.r_a = pts[k].point - ca;
      pc.r_b = pts[k].point - cb;
      const double rn_a = cross(pc.r_a, c.normal);
      const double rn_b = cross(pc.r_b, c.normal);
      pc.normal_mass = 1.0 / (A.inv_mass + B.inv_mass + A.inv_inertia * (rn_a * rn_a) +
                              B.inv_inertia * (rn_b * rn_b));
      const double sep = pts[k].separation;
      if (sep > 0.0) {
        pc.bias = -sep * inv_dt;
      } else {
        pc.bias = settings.baumgarte * inv_dt * std::max(0.0, (-sep) - settings.contact_slop);
      }
      if (restitution_ > 0.0) {
        const double vn = dot(relative_velocity(c.a, c.b, pc.r_a, pc.r_b), c.normal);
        if (vn < -1.0) pc.bias = std::max(pc.bias, -restitution_ * vn);
      }
    }
    if (count == 2) {
      const double rn_a1 = cross(c.points[0].r_a, c.normal);
      const double rn_a2 = cross(c.points[1].r_a, c.normal);
      const double rn_b1 = cross(c.points[0].r_b, c.normal);
      const double rn_b2 = cross(c.points[1].r_b, c.normal);
      const double base = A.inv_mass + B.inv_mass;
      c.k11 = base + A.inv_inertia * (rn_a1 * rn_a1) + B.inv_inertia * (rn_b1 * rn_b1);
      c.k22 = base + A.inv_inertia * (rn_a2 * rn_a2) + B.inv_inertia * (rn_b2 * rn_b2);
      c.k12 = base + A.inv_inertia * (rn_a1 * rn_a2) + B.inv_inertia * (rn_b1 * rn_b2);
      const double inv_det = 1.0 / (c.k11 * c.k22 - c.k12 * c.k12);
      c.inv11 = c.k22 * inv_det;
      c.inv22 = c.k11 * inv_det;
      c.inv12 = -c.k12 * inv_det;
    }
    const Vec2 center =
        count == 2 ? 0.5 * (pts[0].point + pts[1].point) : pts[0].point;
    c.rt_a = center - ca;
    c.rt_b = center - cb;
    const double rt_a = cross(c.rt_a, c.tangent);
    const double rt_b = cross(c.rt_b, c.tangent);
    c.tangent_mass = 1.0 / (A.inv_mass + B.inv_mass + A.inv_inertia * (rt_a * rt_a) +
                            B.inv_inertia * (rt_b * rt_b));
    recall(c);
    constraints_.push_back(c);
  }

  // Applies the impulses recalled from the previous step.
  void warm_start() {
    for (ManifoldConstraint& c : constraints_) {
      if (c.count == 2) {
        apply_pair(c, c.points[0].impulse, c.points[1].impulse);
      } else {
        apply(c, c.points[0].r_a, c.points[0].r_b, c.points[0].impulse * c.normal);
      }
      apply(c, c.rt_a, c.rt_b, c.tangent_impulse * c.tangent);
    }
  }

  ContactCache export_cache() const {
    ContactCache cache;
    for (const ManifoldConstraint& c : constraints_) {
      ContactCache::Manifold m{c.a, c.b, c.count, {}, {}, c.tangent_impulse};
      for (int k = 0; k < c.count; ++k) {
        m.features[k] = c.points[k].feature;
        m.normal_impulses[k] = c.points[k].impulse;
      }
      cache.manifolds.push_back(m);
    }
    return cache;
  }

  void solve(int iterations) {
    for (int it = 0; it < iterations; ++it) {
      for (ManifoldConstraint& c : constraints_) {
        solve_friction(c);
        if (c.count == 1) {
          solve_single(c);
        } else {
          solve_pair(c);
        }
      }
    }
  }

 private:
  static constexpr std::uint32_t kMergedFeature = 0xffffu;

  Body& body(int index) { return index < 0 ? ground_ : bodies_[index]; }

  void recall(ManifoldConstraint& c) const {
    for (const ContactCache::Manifold& old : previous_.manifolds) {
      if (old.body_a != c.a || old.body_b != c.b) continue;
      bool matched = false;
      for (int k = 0; k < c.count; ++k) {
        for (int j = 0; j < old.count; ++j) {
          if (old.features[j] == c.points[k].feature) {
            c.points[k].impulse = old.normal_impulses[j];
            matched = true;
          }
        }
      }
      if (matched) c.tangent_impulse = old.tangent_impulse;
      return;
    }
  }

  Vec2 relative_velocity(int a, int b, Vec2 r_a, Vec2 r_b) {
    const Body& A = body(a);
    const Body& B = body(b);
    return B.v + cross(B.w, r_b) - A.v - cross(A.w, r_a);
  }

  // Returns a positive value when the 2x2 normal system is safe to invert.
  static double well_conditioned(const std::array<ContactPoint, 2>& pts, Vec2 ca, Vec2 cb,
                                 Vec2 n, const Body& A, const Body& B) {
    constexpr double max_condition = 1000.0;
    const double rn_a1 = cross(pts[0].point - ca, n);
    const double rn_a2 = cross(pts[1].point - ca, n);
    const double rn_b1 = cross(pts[0].point - cb, n);
    const double rn_b2 = cross(pts[1].point - cb, n);
    const double base = A.inv_mass + B.inv_mass;
    const double k11 = base + A.inv_inertia * (rn_a1 * rn_a1) + B.inv_inertia * (rn_b1 * rn_b1);
    const double k22 = base + A.inv_inertia * (rn_a2 * rn_a2) + B.inv_inertia * (rn_b2 * rn_b2);
    const double k12 = base + A.inv_inertia * (rn_a1 * rn_a2) + B.inv_inertia * (rn_b1 * rn_b2);
    const double kmax = std::max(k11, k22);
    const double det = k11 * k22 - k12 * k12;
    return kmax * kmax < max_condition * det ? 1.0 : 0.0;
  }

  void apply(ManifoldConstraint& c, Vec2 r_a, Vec2 r_b, Vec2 impulse) {
    Body& A = body(c.a);
    Body& B = body(c.b);
    A.v = A.v - A.inv_mass * impulse;
    A.w -= A.inv_inertia * cross(r_a, impulse);
    B.v = B.v + B.inv_mass * impulse;
    B.w += B.inv_inertia * cross(r_b, impulse);
  }

  void apply_pair(ManifoldConstraint& c, double d1, double d2) {
    Body& A = body(c.a);
    Body& B = body(c.b);
    const Vec2 p1 = d1 * c.normal;
    const Vec2 p2 = d2 * c.normal;
    const Vec2 total = p1 + p2;
    A.v = A.v - A.inv_mass * total;
    A.w -= A.inv_inertia * (cross(c.points[0].r_a, p1) + cross(c.points[1].r_a, p2));
    B.v = B.v + B.inv_mass * total;
    B.w += B.inv_inertia * (cross(c.points[0].r_b, p1) + cross(c.points[1].r_b, p2));
  }

  void solve_friction(ManifoldConstraint& c) {
    const double normal_total =
        c.count == 2 ? c.points[0].impulse + c.points[1].impulse : c.points[0].impulse;
    const double max_friction = friction_ * normal_total;
    const Vec2 dv = relative_velocity(c.a, c.b, c.rt_a, c.rt_b);
    const double vt = dot(dv, c.tangent);
    const double lambda = -c.tangent_mass * vt;
    const double updated =
        std::clamp(c.tangent_impulse + lambda, -max_friction, max_friction);
    const double delta = updated - c.tangent_impulse;
    c.tangent_impulse = updated;
    apply(c, c.rt_a, c.rt_b, delta * c.tangent);
  }

  void solve_single(ManifoldConstraint& c) {
    PointConstraint& p = c.points[0];
    const double vn = dot(relative_velocity(c.a, c.b, p.r_a, p.r_b), c.normal);
    const double lambda = -p.normal_mass * (vn - p.bias);
    const double updated = std::max(p.impulse + lambda, 0.0);
    const double delta = updated - p.impulse;
    p.impulse = updated;
    apply(c, p.r_a, p.r_b, delta * c.normal);
  }

  // Exact solve of the two-point LCP by enumerating complementarity cases.
  void solve_pair(ManifoldConstraint& c) {
    PointConstraint& p1 = c.points[0];
    PointConstraint& p2 = c.points[1];
    const double a1 = p1.impulse;
    const double a2 = p2.impulse;
    const double vn1 = dot(relative_velocity(c.a, c.b, p1.r_a, p1.r_b), c.normal);
    const double vn2 = dot(relative_velocity(c.a, c.b, p2.r_a, p2.r_b), c.normal);
    const double b1 = (vn1 - p1.bias) - (c.k11 * a1 + c.k12 * a2);
    const double b2 = (vn2 - p2.bias) - (c.k12 * a1 + c.k22 * a2);

    auto commit = [&](double x1, double x2) {
      apply_pair(c, x1 - a1, x2 - a2);
      p1.impulse = x1;
      p2.impulse = x2;
    };

    // Both points active.
    {
      const double x1 = -(c.inv11 * b1 + c.inv12 * b2);
      const double x2 = -(c.inv12 * b1 + c.inv22 * b2);
      if (x1 >= 0.0 && x2 >= 0.0) return commit(x1, x2);
    }
    // Only point 1 active.
    {
      const double x1 = -b1 / c.k11;
      const double w2 = c.k12 * x1 + b2;
      if (x1 >= 0.0 && w2 >= 0.0) return commit(x1, 0.0);
    }
    // Only point 2 active.
    {
      const double x2 = -b2 / c.k22;
      const double w1 = c.k12 * x2 + b1;
      if (x2 >= 0.0 && w1 >= 0.0) return commit(0.0, x2);
    }
    // Neither.
    if (b1 >= 0.0 && b2 >= 0.0) commit(0.0, 0.0);
  }

  std::vector<Body>& bodies_;
  Body ground_{};
  double friction_;
  double restitution_;
  const ContactCache& previous_;
  std::vector<ManifoldConstraint> constraints_;
};

bool finite(const BlockState& b) {
  return std::isfinite(b.position.x) && std::isfinite(b.position.y) &&
         std::isfinite(b.angle) && std::isfinite(b.linear_velocity.x) &&
         std::isfinite(b.linear_velocity.y) && std::isfinite(b.angular_velocity);
}

void check_finite(const Scene& scene, std::int64_t step_index, const char* where) {
  for (std::size_t i = 0; i < scene.blocks.size(); ++i) {
    if (!finite(scene.blocks[i])) {
      fail(ErrorKind::numerical, "non-finite state of block " + std::to_string(i) + " " +
                                     where + " step " + std::to_string(step_index));
    }
  }
}

}  // namespace

Scene make_tower(std::span<const double> x_positions, double block_side) {
  Scene scene;
  scene.block_side = block_side;
  scene.blocks.reserve(x_positions.size());
  for (std::size_t i = 0; i < x_positions.size(); ++i) {
    require(std::isfinite(x_positions[i]), "make_tower: non-finite position");
    if (i > 0) {
      require(std::abs(x_positions[i] - x_positions[i - 1]) < block_side,
              "make_tower: block " + std::to_string(i) + " does not overlap the block below");
    }
    BlockState b;
    b.position = {x_positions[i],
                  scene.ground_height + (static_cast<double>(i) + 0.5) * block_side};
    scene.blocks.push_back(b);
  }
  return scene;
}

std::vector<BlockState> mirror(std::span<const BlockState> blocks) {
  std::vector<BlockState> out(blocks.begin(), blocks.end());
  for (BlockState& b : out) {
    b.position.x = -b.position.x;
    b.angle = -b.angle;
    b.linear_velocity.x = -b.linear_velocity.x;
    b.angular_velocity = -b.angular_velocity;
  }
  return out;
}

Scene mirror(const Scene& scene) {
  Scene out = scene;
  out.blocks = mirror(std::span<const BlockState>(scene.blocks));
  return out;
}

SimulationState step(const SimulationState& state, double dt, const SolverSettings& settings,
                     std::int64_t step_index) {
  const Scene& scene = state.scene;
  require(dt > 0.0 && std::isfinite(dt), "step: dt must be positive and finite");
  check_finite(scene, step_index, "entering");

  const std::size_t n = scene.blocks.size();
  const double half = 0.5 * scene.block_side;
  const double mass = scene.block_side * scene.block_side;
  const double inertia = mass * scene.block_side * scene.block_side / 6.0;

  std::vector<Box> boxes;
  std::vector<Vec2> centers;
  std::vector<Body> bodies(n);
  boxes.reserve(n);
  centers.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const BlockState& b = scene.blocks[i];
    boxes.push_back(make_box(b, half));
    centers.push_back(b.position);
    bodies[i].v = {b.linear_velocity.x, b.linear_velocity.y - scene.gravity * dt};
    bodies[i].w = b.angular_velocity;
    bodies[i].inv_mass = 1.0 / mass;
    bodies[i].inv_inertia = 1.0 / inertia;
  }

  const double inv_dt = 1.0 / dt;
  const double margin = settings.contact_margin;
  ContactSolver solver(bodies, scene.friction_coefficient, scene.restitution, state.contacts);
  Manifold m;
  for (std::size_t i = 0; i < n; ++i) {
    if (collide_ground(boxes[i], scene.ground_height, margin, m)) {
      m.body_a = -1;
      m.body_b = static_cast<int>(i);
      solver.add(m, centers, inv_dt, settings);
    }
  }
  const double reach = 2.0 * std::numbers::sqrt2 * half + margin;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const Vec2 d = centers[j] - centers[i];
      if (dot(d, d) > reach * reach) continue;
      if (collide_boxes(boxes[i], boxes[j], margin, m)) {
        m.body_a = static_cast<int>(i);
        m.body_b = static_cast<int>(j);
        solver.add(m, centers, inv_dt, settings);
      }
    }
  }
  solver.warm_start();
  solver.solve(settings.iterations);

  SimulationState out{scene, solver.export_cache()};
  Scene& next = out.scene;
  for (std::size_t i = 0; i < n; ++i) {
    BlockState& b = next.blocks[i];
    b.linear_velocity = bodies[i].v;
    b.angular_velocity = bodies[i].w;
    b.position = b.position + dt * bodies[i].v;
    b.angle += dt * bodies[i].w;
  }
  check_finite(next, step_index, "after");
  return out;
}

Scene step(const Scene& scene, double dt, const SolverSettings& settings,
           std::int64_t step_index) {
  return step(SimulationState{scene, {}}, dt, settings, step_index).scene;
}

Trajectory simulate(const Scene& scene, double duration, const SolverSettings& settings) {
  require(duration >= 0.0 && std::isfinite(duration), "simulate: duration must be >= 0");
  const auto steps = static_cast<std::int64_t>(std::llround(duration / settings.timestep));
  Trajectory traj;
  traj.timestep = settings.timestep;
  traj.states.reserve(static_cast<std::size_t>(steps) + 1);
  traj.states.push_back(scene.blocks);
  SimulationState current{scene, {}};
  for (std::int64_t k = 0; k < steps; ++k) {
    current = step(current, settings.timestep, settings, k);
    traj.states.push_back(current.scene.blocks);
  }
  return traj;
}

StabilityOutcome classify_outcome(const Trajectory& trajectory, double block_side,
                                  const FallCriterion& criterion) {
  require(!trajectory.states.empty(), "classify_outcome: empty trajectory");
  const auto& first = trajectory.states.front();
  const auto& last = trajectory.states.back();
  const double max_disp = criterion.displacement_fraction * block_side;
  const double max_tilt = criterion.tilt_degrees * std::numbers::pi / 180.0;
  StabilityOutcome out;
  for (std::size_t i = 0; i < first.size(); ++i) {
    const double dx = last[i].position.x - first[i].position.x;
    const double dy = last[i].position.y - first[i].position.y;
    if (std::hypot(dx, dy) > max_disp || std::abs(last[i].angle) > max_tilt) {
      ++out.fallen_count;
    }
  }
  out.stable = out.fallen_count == 0;
  return out;
}

QuasiStaticResult quasi_static_stability(const Scene& scene) {
  const auto& blocks = scene.blocks;
  const double h = 0.5 * scene.block_side;
  QuasiStaticResult out{true, std::numeric_limits<double>::infinity()};
  const std::size_t n = blocks.size();
  for (std::size_t j = 0; j < n; ++j) {
    double lo = blocks[j].position.x - h;
    double hi = blocks[j].position.x + h;
    if (j > 0) {
      lo = std::max(lo, blocks[j - 1].position.x - h);
      hi = std::min(hi, blocks[j - 1].position.x + h);
    }
    double sum = 0.0;
    for (std::size_t k = j; k < n; ++k) sum += blocks[k].position.x;
    const double com = sum / static_cast<double>(n - j);
    out.margin = std::min(out.margin, std::min(com - lo, hi - com));
  }
  out.stable = out.margin > 0.0;
  return out;
}

double mechanical_energy(const Scene& scene) {
  const double mass = scene.block_side * scene.block_side;
  const double inertia = mass * scene.block_side * scene.block_side / 6.0;
  double e = 0.0;
  for (const BlockState& b : scene.blocks) {
    e += 0.5 * mass * dot(b.linear_velocity, b.linear_velocity) +
         0.5 * inertia * b.angular_velocity * b.angular_velocity +
         mass * scene.gravity * (b.position.y - scene.ground_height);
  }
  return e;
}

}  // namespace towerphys
