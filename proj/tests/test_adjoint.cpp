#include "itrans/errors.h"
#include "itrans/transport_adjoint.h"
#include "itrans/transport_forward.h"

#include "oracles.h"

#include <doctest.h>

#include <cmath>
#include <numbers>

using namespace itrans;
using std::numbers::pi;

namespace {

double one(const Vec3&, const Vec3&) { return 1; }

} // namespace

TEST_CASE("T and T* of constants")
{
  Medium vac(2, SigmaConstant{0}, KernelNone{});
  Medium abs(2, SigmaConstant{0.7}, KernelNone{});
  Vec3 x{0.3, -0.2}, v = normalized(Vec3{0.4, 1});
  CHECK(t_star_at(vac, one, x, v) == doctest::Approx(tau_plus(x, v)).epsilon(1e-12));
  CHECK(t_forward_at(vac, one, x, v) == doctest::Approx(tau_minus(x, v)).epsilon(1e-12));
  CHECK(t_star_at(abs, one, x, v) == doctest::Approx((1 - std::exp(-0.7 * tau_plus(x, v))) / 0.7).epsilon(1e-10));
  CHECK(t_forward_at(abs, one, x, v) ==
        doctest::Approx((1 - std::exp(-0.7 * tau_minus(x, v))) / 0.7).epsilon(1e-10));
  // u depends on position: T* (x.x) with sigma = 0 is int_0^tau (x.x + s v.x) ds
  auto lin = [](const Vec3& y, const Vec3&) { return y.x; };
  double tp = tau_plus(x, v);
  CHECK(t_star_at(vac, lin, x, v) == doctest::Approx(x.x * tp + 0.5 * v.x * tp * tp).epsilon(1e-12));
  CHECK(t_star_adaptive(abs, one, x, v) == doctest::Approx((1 - std::exp(-0.7 * tp)) / 0.7).epsilon(1e-9));
}

TEST_CASE("P* of constants is sigma_p")
{
  const double c = 0.04;
  Medium m(2, SigmaConstant{0.1}, KernelIsotropic{c}, 0.1);
  auto p = p_star(m, one);
  CHECK(p(Vec3{0.2, 0.1}, Vec3{1, 0}) == doctest::Approx(2 * pi * c).epsilon(1e-10));
  CHECK(p(Vec3{0.95, 0}, Vec3{1, 0}) == 0);
  Medium hg(3, SigmaConstant{0.1}, KernelHenyeyGreenstein{0.05, 0.5}, 0.1);
  Vec3 x{0.1, 0.2, -0.1}, v = normalized(Vec3{1, 1, 0});
  CHECK(p_star(hg, one)(x, v) == doctest::Approx(hg.sigma_p(x, v)).epsilon(5e-3));
  // P u for u = 1 integrates k over incoming directions; isotropic: same value
  CHECK(p_forward(m, one)(Vec3{0.2, 0.1}, Vec3{0, 1}) == doctest::Approx(2 * pi * c).epsilon(1e-10));
}

TEST_CASE("K and K* are L2 duals on a coarse quadrature")
{
  Medium m(2, SigmaConstant{0.3}, KernelHenyeyGreenstein{0.08, 0.4}, 0.1);
  auto u = [](const Vec3& x, const Vec3& v) { return 1 + 0.5 * x.x * v.y + 0.3 * x.y - 0.2 * v.x; };
  auto w = [](const Vec3& x, const Vec3& v) { return std::exp(-norm2(x)) * (1 + 0.4 * v.x + 0.3 * v.y * v.y); };
  auto q = phase_quadrature(2, 6, 24, 24, {0.8, 0.9});
  OperatorRule r;
  r.line_panels = 2;
  r.directions = 32;
  auto c = adjointness_check(m, u, w, q, r);
  CHECK(c.lhs > 0);
  CHECK(c.rel_error < 1e-3);
  // K~ is a different operator; its pairing is not the transpose
  CHECK(std::abs(c.rhs_tilde - c.lhs) / c.lhs > 1e-2);
}

TEST_CASE("K~ preserves positivity and is bounded")
{
  Medium m(2, SigmaConstant{0.2}, KernelHenyeyGreenstein{0.05, 0.3}, 0.1);
  auto u = [](const Vec3& x, const Vec3& v) { return 0.5 + 0.5 * std::sin(3 * x.x + v.y); };
  auto kt = k_tilde(m, u);
  // |K~ u| <= sup sigma_p * sup tau * sup |u|
  double bound = m.sigma_p_sup() * 2 * 1.0;
  for (std::uint64_t i = 0; i < 40; ++i) {
    Vec3 x{0.9 * uniform01(11, i, 0, 0) - 0.45, 0.9 * uniform01(11, i, 0, 1) - 0.45};
    Vec3 v = uniform_direction(2, uniform01(11, i, 0, 2), 0);
    double val = kt(x, v);
    CHECK(val >= 0);
    CHECK(val <= bound);
  }
}

TEST_CASE("K~ annihilates fields supported where k = 0")
{
  Medium m(2, SigmaConstant{0.2}, KernelIsotropic{0.05}, 0.1);
  auto shell = [](const Vec3& x, const Vec3&) { return norm(x) > 0.9 ? 1.0 : 0.0; };
  auto kt = k_tilde(m, shell);
  for (std::uint64_t i = 0; i < 20; ++i) {
    Vec3 x{0.6 * uniform01(12, i, 0, 0) - 0.3, 0.6 * uniform01(12, i, 0, 1) - 0.3};
    Vec3 v = uniform_direction(2, uniform01(12, i, 0, 2), 0);
    CHECK(kt(x, v) == 0);
  }
}

TEST_CASE("J~ lift and averaged trace")
{
  Medium vac(2, SigmaConstant{0}, KernelNone{});
  Medium abs(2, SigmaConstant{0.5}, KernelNone{});
  auto phi = [](const Vec3& x, const Vec3& v) { return 1 + x.x + 0.5 * v.y; };
  Vec3 x{0.1, 0.2}, v{1, 0};
  Vec3 y = x + v * tau_plus(x, v);
  CHECK(j_tilde_lift(vac, phi)(x, v) == doctest::Approx(phi(y, v)).epsilon(1e-12));
  CHECK(j_tilde_lift(abs, phi)(x, v) == doctest::Approx(std::exp(-0.5 * tau_plus(x, v)) * phi(y, v)).epsilon(1e-10));
  auto u = [](const Vec3& z, const Vec3& w) { return 1 + z.x * w.y + z.y * z.y + 0.3 * std::sin(z.x); };
  for (double a : {0.3, 1.7, 4.0}) {
    Vec3 xb{std::cos(a), std::sin(a)};
    Vec3 vb = normalized(Vec3{-xb.x + 0.3 * xb.y, -xb.y - 0.3 * xb.x});
    CHECK(j_tilde_averaged(u, xb, vb) == doctest::Approx(u(xb, vb)).epsilon(1e-6));
  }
}

TEST_CASE("backward field without scattering is the attenuated pullback")
{
  Medium m(2, SigmaConstant{0.4}, KernelNone{});
  auto phi = [](const Vec3& x, const Vec3& v) { return 0.5 + 0.4 * x.y * v.x + 0.1 * v.y; };
  BackwardField bf(m, phi, 2, BackwardGrid{16, 16, 16});
  CHECK(bf.tail_bound() == 0);
  for (double a : {0.2, 2.5}) {
    Vec3 x{std::cos(a), std::sin(a)};
    Vec3 v = normalized(Vec3{-x.x - 0.2 * x.y, -x.y + 0.2 * x.x});
    double L = chord_length(x, v);
    CHECK(bf(x, v) == doctest::Approx(std::exp(-0.4 * L) * phi(x + v * L, v)).epsilon(1e-9));
  }
  Medium m3(3, SigmaConstant{0.4}, KernelNone{});
  CHECK_THROWS_AS(BackwardField(m3, phi, 1), InvalidDimension);
}

TEST_CASE("backward and forward pairings agree for one source ray")
{
  Medium m(2, SigmaConstant{0.3}, KernelIsotropic{0.04}, 0.1);
  auto phi = [](const Vec3& x, const Vec3& v) { return 0.5 + 0.4 * x.y * v.x + 0.1 * v.y; };
  Vec3 x0{std::cos(2.0), std::sin(2.0)};
  Vec3 v0 = normalized(Vec3{-x0.x + 0.2 * x0.y, -x0.y - 0.2 * x0.x});
  BoundaryMeasure g(2, Side::incoming);
  g.add(x0, v0, 1);
  ExpansionSettings s;
  s.truncation_order = 1;
  auto fwd = expand_albedo(m, g, s).combined().pair(phi);
  BackwardField bf(m, phi, 1);
  CHECK(bf(x0, v0) == doctest::Approx(fwd).epsilon(2e-4));
}

TEST_CASE("estimate_lipschitz")
{
  auto f = [](const Vec3& x, const Vec3&) { return x.x; };
  double L = estimate_lipschitz(2, Side::outgoing, f, 4000, 3);
  CHECK(L <= 1 + 1e-9);
  CHECK(L >= 0.95);
  auto c = [](const Vec3&, const Vec3&) { return 2.0; };
  CHECK(estimate_lipschitz(3, Side::incoming, c, 500, 4) == 0);
  auto r = random_boundary_ray(3, Side::incoming, 0.1, 0.2, 0.3, 0.4);
  CHECK(dot(r.x, r.v) < 0);
  CHECK(std::abs(norm(r.x) - 1) < 1e-12);
}
