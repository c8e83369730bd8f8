#pragma once

#include "itrans/geometry.h"
#include "itrans/measures.h"
#include "itrans/optics.h"

#include <json.hpp>

#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

namespace itrans {

// integral of sigma(x + s v, v) for s in [0, length]
double optical_depth(const Medium& m, const Vec3& x, const Vec3& v, double length);

// E(x, y) = exp(-integral of sigma along the segment)
double attenuation_E(const Medium& m, const Vec3& x, const Vec3& y);

// E~(x, v, w): attenuation along the broken line arriving along v, leaving along w
double attenuation_broken(const Medium& m, const Vec3& x, const Vec3& v, const Vec3& w);

// Unscattered exit of every atom of g (on Gamma_-).
BoundaryMeasure apply_ballistic(const Medium& m, const BoundaryMeasure& g);

// Breakpoints t in (0, tmax) where |x + t v| crosses any of the radii.
std::vector<double> radial_crossings(const Vec3& x, const Vec3& v, double tmax,
                                     const std::vector<double>& radii);

// Sub-interval of [0, tmax] along x + t v where k can be nonzero, with the
// cutoff transition points as interior breakpoints.
std::vector<double> scattering_breakpoints(const Medium& m, const Vec3& x, const Vec3& v,
                                           double tmax);

// Single-scattering integrand for exit ray (z0, v0) on Gamma_+ and incoming
// direction v1 at depth t: E(z0, z0 - t v0, entry) k(z0 - t v0, v1, v0).
double single_scatter_integrand(const Medium& m, const Vec3& z0, const Vec3& v0, const Vec3& v1,
                                double t);

struct SingleScatterPath {
  double t = 0;  // depth along the exit ray, measured backward from z0
  double s = 0;  // distance from the entry point to the scattering point
  Vec3 scatter_point;
  double value = 0; // E along the broken path times k
};

// Solves the delta constraint: the scattering point on the exit line whose
// backward ray along the entry direction leaves through the entry point.
SingleScatterPath single_scatter_connect(const Medium& m, const BoundaryRay& exit,
                                         const BoundaryRay& entry);

// Second-order kernel beta_2((x, v), (x', v')) with the near-singular factor
// integrated exactly by substitution around the closest approach.
double beta2_kernel(const Medium& m, const PhasePoint& out, const PhasePoint& in,
                    double rel_tol = 1e-9);

// Mass of K^2 J delta_(xs, vs) on Gamma_+ computed by integrating beta_2 over
// the outgoing boundary and the source chord.
double double_scatter_mass_kernel_route(const Medium& m, const Vec3& xs, const Vec3& vs,
                                        int boundary_resolution);

// Constants of the weakly singular integral bounds over the unit ball.
struct SingularIntegralConstants {
  int n = 2;
  double A = 0;       // sup_z int_X |z - y|^{1-n} dy
  double C = 0;       // int_X dz1 / (|z0-z1||z1-z|^{n-1}) <= C - C' ln|z0 - z|
  double Cprime = 0;
  double Clog = 0;    // sup int_X |ln|z0-z1|| / |z1-z|^{n-1} dz1
  double C2 = 0;      // n=3: int dz1/(|z0-z1|^2|z1-z|^2) <= C2/|z0-z|
  double Cn2 = 0;     // chained constant of the (n+2)-fold kernel bound
  double safety = 1.1;
};

const SingularIntegralConstants& singular_integral_constants(int n);

// C_{n+2} e^{(n+2)||tau sigma_-||} ||k||^{n+2}
double kernel_bound_e1(const Medium& m);

// Receives exit atoms of every collision order.
class ExitSink {
public:
  virtual ~ExitSink() = default;
  virtual void add(int order, const Vec3& x, const Vec3& v, double mass) = 0;
  virtual std::unique_ptr<ExitSink> fork() const = 0;
  virtual void merge(ExitSink& part) = 0;
};

// Collects atoms per order.
class AtomSink : public ExitSink {
public:
  AtomSink(int n, int max_order);
  void add(int order, const Vec3& x, const Vec3& v, double mass) override;
  std::unique_ptr<ExitSink> fork() const override;
  void merge(ExitSink& part) override;
  std::vector<BoundaryMeasure> orders;
};

// Accumulates <f, order_m> and the sum of squared contributions per order.
class TallySink : public ExitSink {
public:
  using Fn = std::function<double(const Vec3&, const Vec3&)>;
  TallySink(int max_order, std::vector<Fn> functions);
  void add(int order, const Vec3& x, const Vec3& v, double mass) override;
  std::unique_ptr<ExitSink> fork() const override;
  void merge(ExitSink& part) override;

  std::vector<Fn> fns;
  // [order][function]
  std::vector<std::vector<double>> sum, sum_sq;
  std::vector<double> mass;
};

enum class Order2Method { monte_carlo, quadrature };

struct ExpansionSettings {
  int truncation_order = -1; // default n + 1
  // single scattering: composite Gauss in depth, graded directions about v0
  int t_panels = 4;
  int t_order = 8;
  double dir_first = 2e-3;
  double dir_ratio = 1.6;
  int dir_order = 6;
  int azimuth = 32;
  // double scattering
  Order2Method order2 = Order2Method::monte_carlo;
  int order2_t = 12;
  int order2_dir = 48;
  // Monte Carlo for the remaining orders
  std::size_t histories = 100000;
  std::uint64_t seed = 1;
  double mc_rel_tol = 0; // > 0: BudgetExceeded when an order's relative error exceeds it
  std::size_t chunk = 2048;
  int first_order = 0;   // orders below this are skipped
  bool report_e1 = false; // evaluate kernel_bound_e1 (slow the first time in 3D)

  nlohmann::json to_json() const;
  static ExpansionSettings from_json(const nlohmann::json& j);
};

struct ExpansionInfo {
  int truncation_order = 0;
  double q = 0;
  double input_mass = 0;
  double tail_bound = 0;
  double e1_bound = 0;
  std::uint64_t seed = 0;
  // Monte Carlo sample count per order (0 for deterministic orders)
  std::vector<std::size_t> samples;
};

struct CollisionExpansion {
  int n = 2;
  std::vector<BoundaryMeasure> orders;
  ExpansionInfo info;

  double order_mass(int m) const;
  double total_mass() const;
  // standard error of an order's mass (0 for deterministic orders)
  double order_mass_stderr(int m) const;
  BoundaryMeasure combined() const;

  nlohmann::json to_json() const;
};

ExpansionInfo expand_albedo_into(const Medium& m, const BoundaryMeasure& g,
                                 const ExpansionSettings& s, ExitSink& sink);

CollisionExpansion expand_albedo(const Medium& m, const BoundaryMeasure& g,
                                 const ExpansionSettings& s = {});

// standard error of sum over samples, from the running sums of one order
double tally_stderr(double sum, double sum_sq, std::size_t samples);

} // namespace itrans
