#pragma once

#include "itrans/geometry.h"

#include <json.hpp>

#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

namespace itrans {

struct Atom {
  Vec3 x;
  Vec3 v;
  double mass = 0;
};

// Finitely supported measure on Gamma_- or Gamma_+ (masses in d xi units).
struct BoundaryMeasure {
  int n = 2;
  Side side = Side::outgoing;
  std::vector<Atom> atoms;

  BoundaryMeasure() = default;
  BoundaryMeasure(int dim, Side s) : n(dim), side(s) {}

  static BoundaryMeasure point(int n, const Vec3& x, const Vec3& v, double mass = 1.0);

  void add(const Vec3& x, const Vec3& v, double mass) { atoms.push_back({x, v, mass}); }
  void append(const BoundaryMeasure& other);
  std::size_t size() const { return atoms.size(); }
  bool empty() const { return atoms.empty(); }

  double total_mass() const;
  double total_variation() const;
  BoundaryMeasure scaled(double s) const;

  // <phi, measure>
  double pair(const std::function<double(const Vec3&, const Vec3&)>& phi) const;

  nlohmann::json to_json() const;
  static BoundaryMeasure from_json(const nlohmann::json& j);
};

// mu - nu as a signed measure (same side required).
BoundaryMeasure difference(const BoundaryMeasure& mu, const BoundaryMeasure& nu);

// JSON-lines: one {"side","x","v","mass"} object per atom.
void write_jsonl(std::ostream& os, const BoundaryMeasure& m);
BoundaryMeasure read_jsonl(std::istream& is);
BoundaryMeasure read_jsonl_file(const std::string& path);
void write_jsonl_file(const std::string& path, const BoundaryMeasure& m);

enum class KernelShape { tent, cross };
KernelShape parse_kernel_shape(const std::string& s);

// Moves a ray by tangent offsets: position along (a, b) in the tangent plane
// of x, velocity along (c, d) in the tangent plane of v (2D uses a and c).
// The ground distance of the move is sqrt(a^2+b^2) + sqrt(c^2+d^2).
void offset_ray(int n, const Vec3& x, const Vec3& v, double a, double b, double c, double d,
                Vec3* xo, Vec3* vo);

// Splits every atom over a kernel whose nodes lie within ground distance eta.
// Nodes that would cross to the other side are folded back into the centre,
// so mass is preserved exactly.
BoundaryMeasure blur(const BoundaryMeasure& m, double eta, KernelShape shape = KernelShape::tent);

// The atoms blur() produces from one atom (centre last).
void blur_atom(int n, Side side, const Atom& a, double eta, KernelShape shape,
               const std::function<void(const Vec3&, const Vec3&, double)>& emit);

// Transport cost of the atom-to-kernel plan used by blur: an upper bound on
// W_{1,kappa}(m, blur(m)).
double blur_plan_cost(const BoundaryMeasure& m, double eta, KernelShape shape, double kappa);

// Moves every atom's base point by exactly `shift` along the boundary.
BoundaryMeasure misalign(const BoundaryMeasure& m, double shift);

struct GridSpec {
  double phase_a = 0.37; // grid offset in units of h
  double phase_b = 0.37;
  bool has_reference = false; // 3D grids are built around a reference ray
  Vec3 ref_x, ref_v;
};

struct DiscretizedSource {
  BoundaryMeasure comb;
  double delta_bound = 0;      // certified kappa * h
  double max_displacement = 0; // largest ground distance any mass moved
  double plan_cost = 0;        // kappa-weighted transport cost of the rounding
};

// Aggregates the mass of g to the nearest node of a mesh of size h.
DiscretizedSource grid_discretize(const BoundaryMeasure& g, double h, double kappa,
                                  const GridSpec& spec = {});

// Normalized nonnegative source of unit d xi-mass within ground distance rho
// of (x0, v0), with a cone-shaped profile.
BoundaryMeasure psi_source(int n, const Vec3& x0, const Vec3& v0, double rho);

} // namespace itrans
