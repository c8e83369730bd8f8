#pragma once

#include "itrans/geometry.h"
#include "itrans/optics.h"

#include <cstdint>
#include <functional>
#include <vector>

namespace itrans {

// Function on X x V (or on Gamma when restricted to boundary rays).
using PhaseField = std::function<double(const Vec3& x, const Vec3& v)>;

// Fixed rules used by the operator evaluators.
struct OperatorRule {
  int line_panels = 4; // composite Gauss panels along a chord
  int line_order = 8;
  int directions = 64; // direction_quadrature resolution
};

// Line integrals, evaluated pointwise.
//   T u(x,v)  = int_0^{tau_-} e^{-int_0^s sigma(x - r v)} u(x - s v, v) ds
//   T* u(x,v) = int_0^{tau_+} e^{-int_0^s sigma(x + r v)} u(x + s v, v) ds
double t_forward_at(const Medium& m, const PhaseField& u, const Vec3& x, const Vec3& v,
                    const OperatorRule& r = {});
double t_star_at(const Medium& m, const PhaseField& u, const Vec3& x, const Vec3& v,
                 const OperatorRule& r = {});
// adaptive version, relative tolerance rel_tol
double t_star_adaptive(const Medium& m, const PhaseField& u, const Vec3& x, const Vec3& v,
                       double rel_tol = 1e-9);

// Angular integrals.
//   P u(x,v)  = int_V k(x, v', v) u(x, v') dv'
//   P* u(x,v) = int_V k(x, v, v') u(x, v') dv'
PhaseField p_forward(const Medium& m, PhaseField u, int directions = 64);
PhaseField p_star(const Medium& m, PhaseField u, int directions = 64);
PhaseField t_forward(const Medium& m, PhaseField u, const OperatorRule& r = {});
PhaseField t_star(const Medium& m, PhaseField u, const OperatorRule& r = {});

// K = T P, its L2 dual K* = P* T*, and the backward operator K~ = T* P*.
PhaseField k_forward(const Medium& m, PhaseField u, const OperatorRule& r = {});
PhaseField k_star(const Medium& m, PhaseField u, const OperatorRule& r = {});
PhaseField k_tilde(const Medium& m, PhaseField u, const OperatorRule& r = {});

// J~ phi(x,v) = e^{-int_0^{tau_+} sigma} phi(x + tau_+ v, v)
PhaseField j_tilde_lift(const Medium& m, PhaseField phi);

// Trace on Gamma_- through the averaged formula
//   (1/tau_+) int_0^{tau_+} u(x+tv,v) - (tau_+ - t) v.grad u(x+tv,v) dt
// with a central difference for the directional derivative.
double j_tilde_averaged(const PhaseField& u, const Vec3& x, const Vec3& v, int order = 24,
                        double h = 1e-5);

double l2_inner(const PhaseQuadrature& q, const PhaseField& u, const PhaseField& w);

struct AdjointCheck {
  double lhs = 0;       // <K u, w>
  double rhs = 0;       // <u, K* w>
  double rel_error = 0;
  double rhs_tilde = 0; // <u, K~ w>, differs from lhs in general
};

AdjointCheck adjointness_check(const Medium& m, const PhaseField& u, const PhaseField& w,
                               const PhaseQuadrature& q, const OperatorRule& r = {});

struct BackwardGrid {
  int radial = 64;
  int angular = 64;
  int directions = 64;
};

// Backward solution sum_{m<=M} K~^m J~ phi on a polar (r, psi) x theta grid
// (n = 2). Orders are stored on grid nodes; evaluation applies the last
// K~ exactly in v and interpolates the previous orders in x only.
class BackwardField {
public:
  BackwardField(const Medium& m, PhaseField phi, int truncation_order, BackwardGrid grid = {},
                OperatorRule rule = {});

  // truncated backward albedo at a ray (x on the sphere, v incoming)
  double operator()(const Vec3& x, const Vec3& v) const;
  // value of the truncated solution at an interior phase point
  double interior(const Vec3& x, const Vec3& v) const;

  double tail_bound() const { return tail_; }
  double series_ratio() const { return q_; }
  int truncation_order() const { return order_; }
  // max over grid of |u_m| per order
  const std::vector<double>& order_sup() const { return order_sup_; }

  double lipschitz_estimate = 0; // filled by callers that sample it

private:
  double grid_value(const std::vector<double>& g, const Vec3& y, int dir) const;
  std::size_t index(int ir, int ip, int id) const
  {
    return (static_cast<std::size_t>(ir) * angular_ + ip) * dirs_ + id;
  }

  const Medium* m_;
  PhaseField phi_, lift_;
  int order_;
  int radial_, angular_, dirs_;
  OperatorRule rule_;
  std::vector<Vec3> dir_nodes_;
  double dir_weight_ = 0;
  std::vector<double> partial_; // sum of orders 0..M-1 on the grid
  std::vector<double> order_sup_;
  double q_ = 0, tail_ = 0;
};

// Max of |f(p) - f(q)| / ground distance over sampled ray pairs on the given
// side: half uniformly random pairs, half nearby pairs.
double estimate_lipschitz(int n, Side side, const PhaseField& f, int pairs, std::uint64_t seed);

// Random ray on Gamma_side from three uniforms (n = 2 uses two).
BoundaryRay random_boundary_ray(int n, Side side, double u1, double u2, double u3, double u4);

} // namespace itrans
