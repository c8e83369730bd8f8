#include "itrans/transport_adjoint.h"

#include "itrans/errors.h"
#include "itrans/measures.h"
#include "itrans/parallel.h"
#include "itrans/quadrature.h"
#include "itrans/rng.h"
#include "itrans/transport_forward.h"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace itrans {

using std::numbers::pi;

namespace {

// optical depth from x along v over [0, len]; cheap fixed rule when sigma varies
double depth_along(const Medium& m, const Vec3& x, const Vec3& v, double len)
{
  double c;
  if (m.sigma_is_constant(&c)) return c * len;
  if (len <= 0) return 0.0;
  auto g = gauss_legendre(16, 0, len);
  double acc = 0;
  for (std::size_t i = 0; i < g.size(); ++i) acc += g.weights[i] * m.sigma(x + v * g.nodes[i], v);
  return acc;
}

double line_integral(const Medium& m, const PhaseField& u, const Vec3& x, const Vec3& v, double L,
                     double sign, const OperatorRule& r)
{
  if (L <= 0) return 0.0;
  // breakpoints where the cutoff changes regularity
  std::vector<double> edges{0.0};
  if (m.cutoff_margin() > 0) {
    double r0 = m.cutoff_margin();
    for (double t : radial_crossings(x, v * sign, L, {1 - 2 * r0, 1 - r0})) edges.push_back(t);
  }
  edges.push_back(L);
  double acc = 0;
  for (std::size_t s = 0; s + 1 < edges.size(); ++s) {
    auto q = composite_gauss(uniform_edges(edges[s], edges[s + 1], r.line_panels), r.line_order);
    for (std::size_t i = 0; i < q.size(); ++i) {
      double t = q.nodes[i];
      Vec3 y = x + v * (sign * t);
      double val = u(y, v);
      if (val == 0) continue;
      acc += q.weights[i] * std::exp(-depth_along(m, x, v * sign, t)) * val;
    }
  }
  return acc;
}

} // namespace

double t_forward_at(const Medium& m, const PhaseField& u, const Vec3& x, const Vec3& v,
                    const OperatorRule& r)
{
  return line_integral(m, u, x, v, tau_minus(x, v), -1.0, r);
}

double t_star_at(const Medium& m, const PhaseField& u, const Vec3& x, const Vec3& v,
                 const OperatorRule& r)
{
  return line_integral(m, u, x, v, tau_plus(x, v), 1.0, r);
}

double t_star_adaptive(const Medium& m, const PhaseField& u, const Vec3& x, const Vec3& v,
                       double rel_tol)
{
  double L = tau_plus(x, v);
  if (L <= 0) return 0.0;
  return integrate_adaptive(
      [&](double s) {
        double val = u(x + v * s, v);
        if (val == 0) return 0.0;
        return std::exp(-optical_depth(m, x, v, s)) * val;
      },
      0.0, L, rel_tol);
}

PhaseField p_forward(const Medium& m, PhaseField u, int directions)
{
  auto d = std::make_shared<DirectionQuadrature>(direction_quadrature(m.dimension(), directions));
  return [&m, u = std::move(u), d](const Vec3& x, const Vec3& v) {
    if (m.cutoff(x) == 0) return 0.0;
    double acc = 0;
    for (std::size_t i = 0; i < d->nodes.size(); ++i) {
      double kv = m.k(x, d->nodes[i], v);
      if (kv != 0) acc += d->weights[i] * kv * u(x, d->nodes[i]);
    }
    return acc;
  };
}

PhaseField p_star(const Medium& m, PhaseField u, int directions)
{
  auto d = std::make_shared<DirectionQuadrature>(direction_quadrature(m.dimension(), directions));
  return [&m, u = std::move(u), d](const Vec3& x, const Vec3& v) {
    if (m.cutoff(x) == 0) return 0.0;
    double acc = 0;
    for (std::size_t i = 0; i < d->nodes.size(); ++i) {
      double kv = m.k(x, v, d->nodes[i]);
      if (kv != 0) acc += d->weights[i] * kv * u(x, d->nodes[i]);
    }
    return acc;
  };
}

PhaseField t_forward(const Medium& m, PhaseField u, const OperatorRule& r)
{
  return [&m, u = std::move(u), r](const Vec3& x, const Vec3& v) { return t_forward_at(m, u, x, v, r); };
}

PhaseField t_star(const Medium& m, PhaseField u, const OperatorRule& r)
{
  return [&m, u = std::move(u), r](const Vec3& x, const Vec3& v) { return t_star_at(m, u, x, v, r); };
}

PhaseField k_forward(const Medium& m, PhaseField u, const OperatorRule& r)
{
  return t_forward(m, p_forward(m, std::move(u), r.directions), r);
}

PhaseField k_star(const Medium& m, PhaseField u, const OperatorRule& r)
{
  return p_star(m, t_star(m, std::move(u), r), r.directions);
}

PhaseField k_tilde(const Medium& m, PhaseField u, const OperatorRule& r)
{
  return t_star(m, p_star(m, std::move(u), r.directions), r);
}

PhaseField j_tilde_lift(const Medium& m, PhaseField phi)
{
  return [&m, phi = std::move(phi)](const Vec3& x, const Vec3& v) {
    double L = tau_plus(x, v);
    double val = phi(x + v * L, v);
    if (val == 0) return 0.0;
    return std::exp(-optical_depth(m, x, v, L)) * val;
  };
}

double j_tilde_averaged(const PhaseField& u, const Vec3& x, const Vec3& v, int order, double h)
{
  double L = tau_plus(x, v);
  if (L <= 0) return u(x, v);
  auto g = gauss_legendre(order, 0, L);
  double acc = 0;
  for (std::size_t i = 0; i < g.size(); ++i) {
    double t = g.nodes[i];
    // keep the stencil inside the chord
    double hh = std::min(h, 0.5 * std::min(t, L - t));
    Vec3 y = x + v * t;
    double du = (u(y + v * hh, v) - u(y - v * hh, v)) / (2 * hh);
    acc += g.weights[i] * (u(y, v) - (L - t) * du);
  }
  return acc / L;
}

double l2_inner(const PhaseQuadrature& q, const PhaseField& u, const PhaseField& w)
{
  std::vector<double> part(q.nodes.size());
  parallel_for(q.nodes.size(), [&](std::size_t i) {
    const auto& p = q.nodes[i];
    double a = u(p.x, p.v);
    part[i] = a == 0 ? 0.0 : q.weights[i] * a * w(p.x, p.v);
  });
  double s = 0;
  for (double p : part) s += p;
  return s;
}

AdjointCheck adjointness_check(const Medium& m, const PhaseField& u, const PhaseField& w,
                               const PhaseQuadrature& q, const OperatorRule& r)
{
  AdjointCheck c;
  c.lhs = l2_inner(q, k_forward(m, u, r), w);
  c.rhs = l2_inner(q, u, k_star(m, w, r));
  c.rhs_tilde = l2_inner(q, u, k_tilde(m, w, r));
  double scale = std::max(std::abs(c.lhs), std::abs(c.rhs));
  c.rel_error = scale > 0 ? std::abs(c.lhs - c.rhs) / scale : 0.0;
  return c;
}

// ---------------------------------------------------------------------------

BackwardField::BackwardField(const Medium& m, PhaseField phi, int truncation_order, BackwardGrid grid,
                             OperatorRule rule)
    : m_(&m), phi_(std::move(phi)), order_(truncation_order), radial_(grid.radial),
      angular_(grid.angular), dirs_(grid.directions), rule_(rule)
{
  if (m.dimension() != 2) throw InvalidDimension("the backward field grid is two-dimensional");
  if (truncation_order < 0) throw ConfigError("truncation order must be nonnegative");
  if (radial_ < 2 || angular_ < 4 || dirs_ < 4) throw ConfigError("backward grid too coarse");
  lift_ = j_tilde_lift(m, phi_);
  dir_weight_ = 2 * pi / dirs_;
  for (int j = 0; j < dirs_; ++j) {
    double a = (j + 0.5) * dir_weight_;
    dir_nodes_.push_back({std::cos(a), std::sin(a), 0});
  }
  if (m.has_scattering()) {
    auto cert = certify(m, 20000);
    q_ = cert.q;
    tail_ = std::pow(q_, order_ + 1) / (1 - q_);
  }
  const std::size_t N = static_cast<std::size_t>(radial_) * angular_ * dirs_;
  auto node_x = [&](int ir, int ip) {
    double r = static_cast<double>(ir) / (radial_ - 1);
    double a = 2 * pi * ip / angular_;
    return Vec3{r * std::cos(a), r * std::sin(a), 0};
  };
  std::vector<double> u(N);
  parallel_for(static_cast<std::size_t>(radial_) * angular_, [&](std::size_t c) {
    int ir = static_cast<int>(c / angular_), ip = static_cast<int>(c % angular_);
    Vec3 x = node_x(ir, ip);
    for (int j = 0; j < dirs_; ++j) u[index(ir, ip, j)] = lift_(x, dir_nodes_[j]);
  });
  auto sup = [](const std::vector<double>& a) {
    double s = 0;
    for (double x : a) s = std::max(s, std::abs(x));
    return s;
  };
  order_sup_.push_back(sup(u));
  partial_ = u;
  // orders 1..M-1 on the grid; order M is applied at evaluation time
  for (int ord = 1; ord < order_ && m.has_scattering(); ++ord) {
    std::vector<double> g(N, 0.0);
    parallel_for(static_cast<std::size_t>(radial_) * angular_, [&](std::size_t c) {
      int ir = static_cast<int>(c / angular_), ip = static_cast<int>(c % angular_);
      Vec3 x = node_x(ir, ip);
      if (m.cutoff(x) == 0) return;
      for (int a = 0; a < dirs_; ++a) {
        double acc = 0;
        for (int b = 0; b < dirs_; ++b) {
          double kv = m.k(x, dir_nodes_[a], dir_nodes_[b]);
          if (kv != 0) acc += kv * u[index(ir, ip, b)];
        }
        g[index(ir, ip, a)] = acc * dir_weight_;
      }
    });
    std::vector<double> next(N, 0.0);
    parallel_for(static_cast<std::size_t>(radial_) * angular_, [&](std::size_t c) {
      int ir = static_cast<int>(c / angular_), ip = static_cast<int>(c % angular_);
      Vec3 x = node_x(ir, ip);
      for (int a = 0; a < dirs_; ++a) {
        PhaseField ga = [&](const Vec3& y, const Vec3&) { return grid_value(g, y, a); };
        next[index(ir, ip, a)] = t_star_at(m, ga, x, dir_nodes_[a], rule_);
      }
    });
    order_sup_.push_back(sup(next));
    for (std::size_t i = 0; i < N; ++i) partial_[i] += next[i];
    u.swap(next);
  }
}

double BackwardField::grid_value(const std::vector<double>& g, const Vec3& y, int dir) const
{
  double r = std::hypot(y.x, y.y);
  double fr = std::min(r, 1.0) * (radial_ - 1);
  int ir = std::min(static_cast<int>(fr), radial_ - 2);
  double wr = fr - ir;
  double a = std::atan2(y.y, y.x);
  if (a < 0) a += 2 * pi;
  double fa = a / (2 * pi) * angular_;
  int ia = static_cast<int>(fa) % angular_;
  double wa = fa - std::floor(fa);
  int ib = (ia + 1) % angular_;
  double v00 = g[index(ir, ia, dir)], v01 = g[index(ir, ib, dir)];
  double v10 = g[index(ir + 1, ia, dir)], v11 = g[index(ir + 1, ib, dir)];
  return (1 - wr) * ((1 - wa) * v00 + wa * v01) + wr * ((1 - wa) * v10 + wa * v11);
}

double BackwardField::interior(const Vec3& x, const Vec3& v) const
{
  double val = lift_(x, v);
  if (order_ == 0 || !m_->has_scattering()) return val;
  // K~ applied to the grid partial sum, exact in v
  PhaseField ps = [&](const Vec3& y, const Vec3& w) {
    if (m_->cutoff(y) == 0) return 0.0;
    double acc = 0;
    for (int b = 0; b < dirs_; ++b) {
      double kv = m_->k(y, w, dir_nodes_[b]);
      if (kv != 0) acc += kv * grid_value(partial_, y, b);
    }
    return acc * dir_weight_;
  };
  return val + t_star_at(*m_, ps, x, v, rule_);
}

double BackwardField::operator()(const Vec3& x, const Vec3& v) const
{
  return interior(x, v);
}

// ---------------------------------------------------------------------------

BoundaryRay random_boundary_ray(int n, Side side, double u1, double u2, double u3, double u4)
{
  Vec3 x;
  if (n == 2) {
    double a = 2 * pi * u1;
    x = {std::cos(a), std::sin(a), 0};
  } else {
    double z = 2 * u1 - 1, s = std::sqrt(std::max(0.0, 1 - z * z)), a = 2 * pi * u2;
    x = {s * std::cos(a), s * std::sin(a), z};
  }
  Vec3 v = uniform_direction(n, u3, u4);
  double c = dot(v, x);
  if ((side == Side::incoming && c > 0) || (side == Side::outgoing && c < 0)) v = v - x * (2 * c);
  if (std::abs(dot(v, x)) < 1e-9) v = normalized(v + x * (side == Side::incoming ? -1e-6 : 1e-6));
  return BoundaryRay{x, v, side, 1.0};
}

double estimate_lipschitz(int n, Side side, const PhaseField& f, int pairs, std::uint64_t seed)
{
  std::vector<double> best(pairs, 0.0);
  parallel_for(pairs, [&](std::size_t i) {
    auto u = [&](int d) { return uniform01(seed, 17, i, d); };
    BoundaryRay a = random_boundary_ray(n, side, u(0), u(1), u(2), u(3));
    BoundaryRay b;
    if (i % 2 == 0) {
      b = random_boundary_ray(n, side, u(4), u(5), u(6), u(7));
    } else {
      // nearby ray at distance up to 0.1
      double scale = 0.1 * u(4);
      double da = scale * (2 * u(5) - 1), db = n == 3 ? scale * (2 * u(6) - 1) : 0.0;
      double dc = scale * (2 * u(7) - 1), dd = n == 3 ? scale * (2 * u(8) - 1) : 0.0;
      Vec3 xo, vo;
      offset_ray(n, a.x, a.v, da, db, dc, dd, &xo, &vo);
      double c = dot(vo, xo);
      if ((side == Side::incoming && c >= 0) || (side == Side::outgoing && c <= 0)) return;
      b = BoundaryRay{xo, vo, side, 1.0};
    }
    double d = ground_distance(a, b);
    if (d < 1e-12) return;
    best[i] = std::abs(f(a.x, a.v) - f(b.x, b.v)) / d;
  });
  return *std::max_element(best.begin(), best.end());
}

} // namespace itrans
