#include "itrans/geometry.h"

#include "itrans/errors.h"
#include "itrans/quadrature.h"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

namespace itrans {

using std::numbers::pi;

void check_dimension(int n)
{
  if (n != 2 && n != 3)
    throw InvalidDimension("dimension must be 2 or 3, got " + std::to_string(n));
}

Domain::Domain(int dim) : n(dim) { check_dimension(dim); }

double Domain::sphere_measure() const { return n == 2 ? 2 * pi : 4 * pi; }
double Domain::volume() const { return n == 2 ? pi : 4 * pi / 3; }
double Domain::boundary_measure() const { return n == 2 ? 2 * pi : 4 * pi; }

const char* side_name(Side s) { return s == Side::incoming ? "incoming" : "outgoing"; }

Side parse_side(const std::string& s)
{
  if (s == "incoming" || s == "in" || s == "minus") return Side::incoming;
  if (s == "outgoing" || s == "out" || s == "plus") return Side::outgoing;
  throw ConfigError("unknown side '" + s + "'");
}

double tau_plus(const Vec3& x, const Vec3& v)
{
  double r2 = norm2(x);
  if (r2 > (1 + outside_tol) * (1 + outside_tol))
    throw OutsideDomain("point at radius " + std::to_string(std::sqrt(r2)));
  double b = dot(x, v);
  double disc = 1.0 - r2 + b * b;
  if (disc < 0) disc = 0;
  double t = -b + std::sqrt(disc);
  return t > 0 ? t : 0.0;
}

double tau_minus(const Vec3& x, const Vec3& v) { return tau_plus(x, -v); }

double chord_length(const Vec3& x, const Vec3& v) { return tau_plus(x, v) + tau_minus(x, v); }

BoundaryRay make_ray(const Vec3& x, const Vec3& v)
{
  double r = norm(x);
  if (std::abs(r - 1.0) > on_boundary_tol)
    throw SideViolation("ray base point not on the boundary (|x| = " + std::to_string(r) + ")");
  double c = dot(v, x) / r;
  if (c == 0.0) throw SideViolation("tangent ray belongs to neither side");
  return BoundaryRay{x, v, c < 0 ? Side::incoming : Side::outgoing, std::abs(c)};
}

BoundaryRay make_ray(const Vec3& x, const Vec3& v, Side expected)
{
  BoundaryRay r = make_ray(x, v);
  if (r.side != expected)
    throw SideViolation(std::string("ray is ") + side_name(r.side) + ", expected " +
                        side_name(expected));
  return r;
}

Frame orthogonal_frame(int n, const Vec3& a)
{
  if (n == 2) return Frame{Vec3{-a.y, a.x, 0}, Vec3{}};
  Vec3 e1 = any_orthogonal(a);
  return Frame{e1, cross(a, e1)};
}

Vec3 direction_about(int n, const Vec3& axis, double theta, double phi)
{
  Frame f = orthogonal_frame(n, axis);
  if (n == 2) return axis * std::cos(theta) + f.e1 * std::sin(theta);
  return axis * std::cos(theta) +
         (f.e1 * std::cos(phi) + f.e2 * std::sin(phi)) * std::sin(theta);
}

Vec3 uniform_direction(int n, double u1, double u2)
{
  if (n == 2) {
    double a = 2 * pi * u1;
    return {std::cos(a), std::sin(a), 0};
  }
  double z = 1 - 2 * u1;
  double s = std::sqrt(std::max(0.0, 1 - z * z));
  double a = 2 * pi * u2;
  return {s * std::cos(a), s * std::sin(a), z};
}

double ground_distance(const Vec3& xa, const Vec3& va, const Vec3& xb, const Vec3& vb)
{
  return angle_between(xa, xb) + angle_between(va, vb);
}

double ground_distance(const BoundaryRay& a, const BoundaryRay& b)
{
  return ground_distance(a.x, a.v, b.x, b.v);
}

Vec3 geodesic_step(const Vec3& x, const Vec3& t, double s)
{
  return x * std::cos(s) + t * std::sin(s);
}

double BoundaryQuadrature::total() const
{
  double s = 0;
  for (double w : weights) s += w;
  return s;
}

BoundaryQuadrature boundary_quadrature(int n, Side side, int resolution)
{
  check_dimension(n);
  if (resolution < 8) throw ConfigError("boundary quadrature needs at least 8 nodes per angle");
  BoundaryQuadrature q;
  const double sgn = side == Side::incoming ? -1.0 : 1.0;
  if (n == 2) {
    int npsi = 2 * resolution;
    auto alpha = gauss_legendre(resolution, -pi / 2, pi / 2);
    double dpsi = 2 * pi / npsi;
    for (int i = 0; i < npsi; ++i) {
      double psi = (i + 0.5) * dpsi;
      Vec3 nu{std::cos(psi), std::sin(psi), 0};
      Vec3 t{-nu.y, nu.x, 0};
      for (std::size_t j = 0; j < alpha.size(); ++j) {
        double a = alpha.nodes[j];
        Vec3 v = nu * (sgn * std::cos(a)) + t * std::sin(a);
        q.nodes.push_back(BoundaryRay{nu, v, side, std::cos(a)});
        q.weights.push_back(dpsi * alpha.weights[j] * std::cos(a));
      }
    }
    return q;
  }
  auto mu = gauss_legendre(resolution, -1, 1);
  int nphi = 2 * resolution;
  double dphi = 2 * pi / nphi;
  auto alpha = gauss_legendre(resolution, 0, pi / 2);
  int nbeta = 2 * resolution;
  double dbeta = 2 * pi / nbeta;
  for (std::size_t i = 0; i < mu.size(); ++i) {
    double s = std::sqrt(1 - mu.nodes[i] * mu.nodes[i]);
    for (int j = 0; j < nphi; ++j) {
      double phi = (j + 0.5) * dphi;
      Vec3 nu{s * std::cos(phi), s * std::sin(phi), mu.nodes[i]};
      Vec3 axis = nu * sgn;
      Frame f = orthogonal_frame(3, axis);
      double area = mu.weights[i] * dphi;
      for (std::size_t a = 0; a < alpha.size(); ++a) {
        double al = alpha.nodes[a];
        double ca = std::cos(al), sa = std::sin(al);
        for (int b = 0; b < nbeta; ++b) {
          double be = (b + 0.5) * dbeta;
          Vec3 v = axis * ca + (f.e1 * std::cos(be) + f.e2 * std::sin(be)) * sa;
          q.nodes.push_back(BoundaryRay{nu, v, side, ca});
          q.weights.push_back(area * alpha.weights[a] * sa * ca * dbeta);
        }
      }
    }
  }
  return q;
}

DirectionQuadrature direction_quadrature(int n, int resolution)
{
  check_dimension(n);
  DirectionQuadrature d;
  if (n == 2) {
    double da = 2 * pi / resolution;
    for (int i = 0; i < resolution; ++i) {
      double a = (i + 0.5) * da;
      d.nodes.push_back({std::cos(a), std::sin(a), 0});
      d.weights.push_back(da);
    }
    return d;
  }
  auto mu = gauss_legendre(resolution, -1, 1);
  int nphi = 2 * resolution;
  double dphi = 2 * pi / nphi;
  for (std::size_t i = 0; i < mu.size(); ++i) {
    double s = std::sqrt(1 - mu.nodes[i] * mu.nodes[i]);
    for (int j = 0; j < nphi; ++j) {
      double phi = (j + 0.5) * dphi;
      d.nodes.push_back({s * std::cos(phi), s * std::sin(phi), mu.nodes[i]});
      d.weights.push_back(mu.weights[i] * dphi);
    }
  }
  return d;
}

PhaseQuadrature phase_quadrature(int n, int radial, int angular, int directions)
{
  return phase_quadrature(n, radial, angular, directions, {});
}

PhaseQuadrature phase_quadrature(int n, int radial, int angular, int directions,
                                 const std::vector<double>& radial_breaks)
{
  check_dimension(n);
  PhaseQuadrature q;
  std::vector<double> edges{0.0};
  for (double b : radial_breaks)
    if (b > edges.back() && b < 1) edges.push_back(b);
  edges.push_back(1.0);
  auto r = composite_gauss(edges, radial);
  DirectionQuadrature pos = direction_quadrature(n, angular);
  DirectionQuadrature dir = direction_quadrature(n, directions);
  for (std::size_t i = 0; i < r.size(); ++i) {
    double jac = n == 2 ? r.nodes[i] : r.nodes[i] * r.nodes[i];
    for (std::size_t j = 0; j < pos.nodes.size(); ++j) {
      Vec3 x = pos.nodes[j] * r.nodes[i];
      double wx = r.weights[i] * jac * pos.weights[j];
      for (std::size_t k = 0; k < dir.nodes.size(); ++k) {
        q.nodes.push_back(PhasePoint{x, dir.nodes[k]});
        q.weights.push_back(wx * dir.weights[k]);
      }
    }
  }
  return q;
}

} // namespace itrans
