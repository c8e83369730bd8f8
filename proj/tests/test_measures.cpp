#include "itrans/errors.h"
#include "itrans/measures.h"
#include "itrans/rng.h"
#include "itrans/wasserstein.h"

#include "oracles.h"

#include <doctest.h>

#include <cmath>
#include <numbers>
#include <sstream>

using namespace itrans;
using std::numbers::pi;

namespace {

Vec3 on_circle(double a) { return Vec3{std::cos(a), std::sin(a)}; }

// outgoing ray at boundary angle a with direction tilted by t from the normal
std::pair<Vec3, Vec3> out_ray(double a, double t) { return {on_circle(a), on_circle(a + t)}; }

BoundaryMeasure random_measure(int atoms, std::uint64_t seed, std::uint64_t stream)
{
  BoundaryMeasure m(2, Side::outgoing);
  for (int i = 0; i < atoms; ++i) {
    double a = 0.6 * uniform01(seed, stream, i, 0), t = 1.2 * uniform01(seed, stream, i, 1) - 0.6;
    auto [x, v] = out_ray(a, t);
    m.add(x, v, 0.1 + uniform01(seed, stream, i, 2));
  }
  return m;
}

} // namespace

TEST_CASE("W1kappa examples")
{
  auto [x, v] = out_ray(0.3, 0.2);
  auto [y, w] = out_ray(0.35, 0.2);
  auto mu = BoundaryMeasure::point(2, x, v, 1.5);
  BoundaryMeasure zero(2, Side::outgoing);
  CHECK(w1kappa(mu, mu, 4) == doctest::Approx(0).scale(1));
  CHECK(w1kappa(mu, zero, 4) == doctest::Approx(1.5).epsilon(1e-12));
  CHECK(w1kappa(mu.scaled(-1), zero, 4) == doctest::Approx(1.5).epsilon(1e-12));
  auto nu = BoundaryMeasure::point(2, y, w, 1.5);
  // both x and v rotate by 0.05
  CHECK(w1kappa(mu, nu, 4) == doctest::Approx(1.5 * 4 * 0.1).epsilon(1e-9));
  // far apart: capped at 2 per unit
  auto [z, u] = out_ray(2.0, 0.0);
  CHECK(w1kappa(mu, BoundaryMeasure::point(2, z, u, 1.5), 4) == doctest::Approx(3).epsilon(1e-12));
  // unequal masses: transport the common part, the rest costs 1
  CHECK(w1kappa(mu, nu.scaled(2.0 / 3), 4) == doctest::Approx(1.0 * 0.4 + 0.5).epsilon(1e-9));
}

TEST_CASE("W1kappa agrees with the dense LP oracle")
{
  for (std::uint64_t s = 0; s < 25; ++s) {
    auto mu = random_measure(1 + static_cast<int>(s % 6), 21, 2 * s);
    auto nu = random_measure(1 + static_cast<int>((s + 3) % 7), 21, 2 * s + 1);
    for (double kappa : {1.0, 4.0, 30.0}) {
      double ref = oracle::w1kappa_lp(mu, nu, kappa);
      CHECK(w1kappa(mu, nu, kappa) == doctest::Approx(ref).epsilon(1e-9).scale(1));
    }
  }
}

TEST_CASE("W1kappa is a metric, covariant and monotone in kappa")
{
  for (std::uint64_t s = 0; s < 20; ++s) {
    auto a = random_measure(4, 22, 3 * s), b = random_measure(5, 22, 3 * s + 1), c = random_measure(3, 22, 3 * s + 2);
    double ab = w1kappa(a, b, 5), ba = w1kappa(b, a, 5);
    CHECK(ab == doctest::Approx(ba).epsilon(1e-12));
    CHECK(ab >= 0);
    CHECK(ab <= w1kappa(a, c, 5) + w1kappa(c, b, 5) + 1e-12);
    CHECK(w1kappa(a.scaled(2.5), b.scaled(2.5), 5) == doctest::Approx(2.5 * ab).epsilon(1e-10));
    CHECK(w1kappa(a, b, 2) <= ab + 1e-12);
    CHECK(ab <= w1kappa(a, b, 10) + 1e-12);
    CHECK(ab <= a.total_variation() + b.total_variation() + 1e-12);
  }
}

TEST_CASE("two-point distance is min(2, kappa d) per unit mass")
{
  for (double d : {0.01, 0.1, 0.3, 0.6}) {
    Vec3 x = on_circle(0.1), v = on_circle(0.2);
    Vec3 y = on_circle(0.1 + d), w = v;
    for (double kappa : {1.0, 3.0, 8.0}) {
      auto mu = BoundaryMeasure::point(2, x, v, 0.7), nu = BoundaryMeasure::point(2, y, w, 0.7);
      CHECK(w1kappa(mu, nu, kappa) == doctest::Approx(0.7 * std::min(2.0, kappa * d)).epsilon(1e-9));
      CHECK(KappaMetric(kappa).cost(x, v, y, w) == doctest::Approx(std::min(2.0, kappa * d)).epsilon(1e-12));
    }
  }
}

TEST_CASE("W1kappa rejects mixed sides and kappa < 1")
{
  auto [x, v] = out_ray(0.3, 0.2);
  auto mu = BoundaryMeasure::point(2, x, v);
  auto nu = BoundaryMeasure::point(2, x, -v);
  nu.side = Side::incoming;
  CHECK_THROWS_AS(w1kappa(mu, nu, 2), SideMismatch);
  CHECK_THROWS_AS(KappaMetric(0.5), ConfigError);
}

TEST_CASE("dual potential is feasible and attains the value")
{
  auto mu = random_measure(6, 23, 0), nu = random_measure(6, 23, 1);
  auto r = w1kappa_solve(mu, nu, 6);
  double s = 0;
  for (std::size_t i = 0; i < r.support_points.size(); ++i) {
    CHECK(std::abs(r.potential[i]) <= 1 + 1e-9);
    s += r.potential[i] * r.support_points[i].mass;
    for (std::size_t j = 0; j < r.support_points.size(); ++j) {
      const auto &p = r.support_points[i], &q = r.support_points[j];
      CHECK(r.potential[i] - r.potential[j] <= 6 * ground_distance(p.x, p.v, q.x, q.v) + 1e-9);
    }
  }
  CHECK(s == doctest::Approx(r.value).epsilon(1e-9));
}

TEST_CASE("blur preserves mass and moves it by at most eta")
{
  for (int n : {2, 3}) {
    Vec3 x = n == 2 ? on_circle(0.4) : normalized(Vec3{0.3, 0.4, 0.8});
    Vec3 v = normalized(x + (n == 2 ? Vec3{-x.y, x.x} * 0.3 : Vec3{0, 0.3, -0.15}));
    auto m = BoundaryMeasure::point(n, x, v, 2.0);
    for (auto shape : {KernelShape::tent, KernelShape::cross}) {
      const double eta = 0.05;
      auto b = blur(m, eta, shape);
      CHECK(b.total_mass() == doctest::Approx(2.0).epsilon(1e-12));
      CHECK(b.size() > 1);
      for (const auto& a : b.atoms) {
        CHECK(a.mass >= 0);
        CHECK(ground_distance(a.x, a.v, x, v) <= eta + 1e-12);
        CHECK(dot(a.x, a.v) > 0);
      }
      double cost = blur_plan_cost(m, eta, shape, 4);
      CHECK(cost <= 4 * eta * 2.0 + 1e-12);
      if (n == 2) CHECK(w1kappa(m, b, 4) <= cost + 1e-12);
    }
  }
  CHECK(parse_kernel_shape("cross") == KernelShape::cross);
  CHECK_THROWS_AS(parse_kernel_shape("disk"), ConfigError);
}

TEST_CASE("blur near grazing folds mass back without loss")
{
  auto m = BoundaryMeasure::point(2, on_circle(0), on_circle(1.55), 1.0);
  auto b = blur(m, 0.1);
  CHECK(b.total_mass() == doctest::Approx(1).epsilon(1e-12));
  for (const auto& a : b.atoms) CHECK(dot(a.x, a.v) > 0);
}

TEST_CASE("misalign moves base points by exactly the shift")
{
  auto [x, v] = out_ray(1.0, 0.3);
  auto m = BoundaryMeasure::point(2, x, v, 0.8);
  auto s = misalign(m, 0.02);
  REQUIRE(s.size() == 1);
  CHECK(ground_distance(s.atoms[0].x, s.atoms[0].v, x, v) == doctest::Approx(0.02).epsilon(1e-10));
  CHECK(w1kappa(m, s, 4) == doctest::Approx(0.8 * 0.08).epsilon(1e-9));
  CHECK(misalign(m, 0).atoms[0].x == x);
  auto r = misalign(random_measure(5, 24, 0), 0.03);
  CHECK(w1kappa(random_measure(5, 24, 0), r, 4) <= 4 * 0.03 * r.total_variation() + 1e-12);
  Vec3 x3 = normalized(Vec3{0.2, 0.3, 0.9});
  auto m3 = BoundaryMeasure::point(3, x3, x3, 1.0);
  auto s3 = misalign(m3, 0.05);
  CHECK(std::acos(std::clamp(dot(s3.atoms[0].x, x3), -1.0, 1.0)) == doctest::Approx(0.05).epsilon(1e-9));
  CHECK_THROWS_AS(misalign(BoundaryMeasure::point(2, x, on_circle(1.0 - 1.56)), 0.05), SideViolation);
}

TEST_CASE("grid_discretize")
{
  auto g = random_measure(30, 25, 0);
  for (double h : {0.01, 0.04, 0.16}) {
    auto d = grid_discretize(g, h, 4);
    CHECK(d.comb.total_mass() == doctest::Approx(g.total_mass()).epsilon(1e-12));
    CHECK(d.delta_bound == doctest::Approx(4 * h));
    CHECK(d.max_displacement <= h + 1e-12);
    CHECK(d.plan_cost <= d.delta_bound * g.total_mass() + 1e-12);
    CHECK(w1kappa(g, d.comb, 4) <= d.plan_cost + 1e-9);
    CHECK(d.comb.size() <= g.size());
  }
  auto fine = grid_discretize(g, 0.01, 4), coarse = grid_discretize(g, 0.16, 4);
  CHECK(w1kappa(g, fine.comb, 4) < w1kappa(g, coarse.comb, 4));
  CHECK_THROWS_AS(grid_discretize(g, 0, 4), ConfigError);
  CHECK_THROWS_AS(grid_discretize(g.scaled(-1), 0.1, 4), ConfigError);

  Vec3 x3 = normalized(Vec3{0.2, 0.3, 0.9}), v3 = normalized(x3 + Vec3{0.2, 0, 0});
  auto src = psi_source(3, x3, v3, 0.05);
  GridSpec spec;
  spec.has_reference = true;
  spec.ref_x = x3;
  spec.ref_v = v3;
  auto d3 = grid_discretize(src, 0.02, 4, spec);
  CHECK(d3.comb.total_mass() == doctest::Approx(1).epsilon(1e-12));
  CHECK(d3.max_displacement <= 0.02 + 1e-12);
  CHECK(d3.plan_cost <= 4 * 0.02 + 1e-12);
}

TEST_CASE("psi_source")
{
  auto [x, v] = out_ray(0.5, -0.2);
  for (int n : {2, 3}) {
    Vec3 xs = n == 2 ? x : normalized(Vec3{0.1, 0.2, -0.95});
    Vec3 vs = n == 2 ? -v : normalized(-xs + Vec3{0.2, 0.1, 0.05});
    auto s = psi_source(n, xs, vs, 0.1);
    CHECK(s.side == Side::incoming);
    CHECK(s.total_mass() == doctest::Approx(1).epsilon(1e-12));
    for (const auto& a : s.atoms) {
      CHECK(a.mass > 0);
      CHECK(ground_distance(a.x, a.v, xs, vs) <= 0.1 + 1e-12);
    }
  }
  CHECK_THROWS_AS(psi_source(2, x, v, 0), ConfigError);
  CHECK_THROWS_AS(psi_source(4, x, v, 0.1), InvalidDimension);
}

TEST_CASE("JSON-lines round trip")
{
  auto m = random_measure(7, 26, 0);
  std::stringstream ss;
  write_jsonl(ss, m);
  auto back = read_jsonl(ss);
  REQUIRE(back.size() == m.size());
  CHECK(back.side == m.side);
  for (std::size_t i = 0; i < m.size(); ++i) {
    CHECK(back.atoms[i].mass == m.atoms[i].mass);
    CHECK(back.atoms[i].x == m.atoms[i].x);
    CHECK(back.atoms[i].v == m.atoms[i].v);
  }
  CHECK(w1kappa(m, back, 4) == 0);
  std::stringstream bad("{\"side\": \"outgoing\", \"x\": [1, 0]}\n");
  CHECK_THROWS_AS(read_jsonl(bad), ConfigError);
}

TEST_CASE("blurred point measures converge weakly")
{
  auto [x, v] = out_ray(0.7, 0.1);
  auto m = BoundaryMeasure::point(2, x, v);
  auto phi = [](const Vec3& y, const Vec3& w) { return std::sin(2 * y.x) + 0.5 * w.y; };
  double exact = phi(x, v), prev = 1e300;
  for (double eta : {0.2, 0.1, 0.05, 0.025, 0.0125}) {
    double err = std::abs(blur(m, eta).pair(phi) - exact);
    CHECK(err <= 2.5 * eta); // Lipschitz constant of phi w.r.t. the ground distance
    CHECK(err <= prev + 1e-12);
    prev = err;
    CHECK(w1kappa(m, blur(m, eta), 1) <= eta + 1e-12);
  }
}
