#pragma once

#include "itrans/vec.h"

#include <string>
#include <vector>

namespace itrans {

// The unit ball in R^n, n in {2, 3}.
struct Domain {
  int n = 2;

  Domain() = default;
  explicit Domain(int dim);

  static constexpr double radius() { return 1.0; }
  static constexpr double diameter() { return 2.0; }
  double sphere_measure() const;   // |V| = |S^{n-1}|
  double volume() const;           // |X|
  double boundary_measure() const; // |dX|
};

void check_dimension(int n);

constexpr double on_boundary_tol = 1e-10;
constexpr double outside_tol = 1e-12;

struct PhasePoint {
  Vec3 x;
  Vec3 v;
};

enum class Side { incoming, outgoing };

const char* side_name(Side s);
Side parse_side(const std::string& s);

struct BoundaryRay {
  Vec3 x;
  Vec3 v;
  Side side = Side::incoming;
  double xi_weight = 0; // |v . nu(x)|
};

// Builds a ray at boundary point x, classifying the side from v . x. Throws
// SideViolation when the ray is tangent or the point is off the sphere.
BoundaryRay make_ray(const Vec3& x, const Vec3& v);
BoundaryRay make_ray(const Vec3& x, const Vec3& v, Side expected);

// Escape times of the unit ball. tau_minus(x, v) = tau_plus(x, -v).
double tau_plus(const Vec3& x, const Vec3& v);
double tau_minus(const Vec3& x, const Vec3& v);
inline double tau_plus(const PhasePoint& p) { return tau_plus(p.x, p.v); }
inline double tau_minus(const PhasePoint& p) { return tau_minus(p.x, p.v); }
double chord_length(const Vec3& x, const Vec3& v);

inline Vec3 exit_point(const Vec3& x, const Vec3& v) { return x + v * tau_plus(x, v); }
inline Vec3 entry_point(const Vec3& x, const Vec3& v) { return x - v * tau_minus(x, v); }

// Orthonormal frame completing a unit vector a: in 2D only e1 is meaningful
// (the in-plane perpendicular), in 3D e1, e2 span the orthogonal plane.
struct Frame {
  Vec3 e1, e2;
};
Frame orthogonal_frame(int n, const Vec3& a);

// Unit vector at polar angle theta from axis, azimuth phi (3D) or signed
// angle theta (2D, phi ignored).
Vec3 direction_about(int n, const Vec3& axis, double theta, double phi);

// Uniform direction on V from uniforms (2D uses u1 only).
Vec3 uniform_direction(int n, double u1, double u2);

// Ground distance on Gamma: boundary geodesic + velocity angle.
double ground_distance(const BoundaryRay& a, const BoundaryRay& b);
double ground_distance(const Vec3& xa, const Vec3& va, const Vec3& xb, const Vec3& vb);

// Moves a point on the sphere along the geodesic with unit tangent t.
Vec3 geodesic_step(const Vec3& x, const Vec3& t, double s);

struct BoundaryQuadrature {
  std::vector<BoundaryRay> nodes;
  std::vector<double> weights; // include the |v . nu| factor of d xi
  double total() const;
};

// Product rule on Gamma_side. 2D: midpoint rule in the boundary angle times
// Gauss in the incidence angle. 3D: Gauss in cos(latitude) x uniform
// longitude for x, Gauss in incidence polar angle x uniform azimuth for v.
BoundaryQuadrature boundary_quadrature(int n, Side side, int resolution);

struct PhaseQuadrature {
  std::vector<PhasePoint> nodes;
  std::vector<double> weights; // dx dv
};

// Tensor rule on X x V: radial Gauss x angular nodes for x, uniform (2D) or
// Gauss x uniform (3D) for v.
PhaseQuadrature phase_quadrature(int n, int radial, int angular, int directions);
// same with the radial rule split at the given radii (radial nodes per piece)
PhaseQuadrature phase_quadrature(int n, int radial, int angular, int directions,
                                 const std::vector<double>& radial_breaks);

struct DirectionQuadrature {
  std::vector<Vec3> nodes;
  std::vector<double> weights;
};

DirectionQuadrature direction_quadrature(int n, int resolution);

} // namespace itrans
