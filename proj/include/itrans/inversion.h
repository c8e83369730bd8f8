#pragma once

#include "itrans/geometry.h"
#include "itrans/measures.h"
#include "itrans/optics.h"
#include "itrans/transport_adjoint.h"

#include <json.hpp>

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace itrans {

// 1 on t <= 1, 2 - t on [1, 2], 0 beyond
double chi1(double t);
// clamp of t to [-1, 1]
double chi2(double t);

struct TestFunction {
  int n = 2;
  std::string kind;
  PhaseField eval;
  double kappa = 1;
  double eta = 0;
  double sup = 0;       // bound on |phi|
  double amplitude = 0; // normalization used by the estimators
  double lip_g = 0;     // sign test only: sampled Lip(G) with safety factor
  BoundaryRay center;   // probing ray on Gamma_-
  Vec3 exit_x;          // ballistic exit point of the probing ray
  // maps four uniforms to a ray on Gamma_+ near the support
  std::function<BoundaryRay(const std::array<double, 4>&)> support_sampler;

  double operator()(const Vec3& x, const Vec3& v) const { return eval(x, v); }
  nlohmann::json descriptor() const;
};

struct TestFunctionCertificate {
  double sup_sampled = 0;
  double lip_sampled = 0;
  bool ok = false;
};

// Samples pairs near the support: |phi| <= 1 and Lip <= kappa (1 + 1e-6).
TestFunctionCertificate certify_test_function(const TestFunction& f, int pairs = 10000,
                                              std::uint64_t seed = 7);

// Cone bump at the ballistic exit of (x0, v0):
// min(1, kappa eta / 2) * max(0, 1 - (2/eta) max(d(x, y0), angle(v, v0)))
TestFunction ballistic_bump(int n, const Vec3& x0, const Vec3& v0, double eta, double kappa);

// G(x,v) = (1 - (v0.v)^2) (E~1 k1 - E~2 k2)(z, v0, v) with z the point of the
// probing chord closest to the line (x, v); 0 near v = +-v0.
double sign_test_g(const Medium& m1, const Medium& m2, const Vec3& x0, const Vec3& v0,
                   const Vec3& x, const Vec3& v);

// min over (t, s) in [-2, 2]^2 of |x - x0 - t v + s v0|
double line_distance(const Vec3& x, const Vec3& v, const Vec3& x0, const Vec3& v0);

// Sign approximation for the single-scattering discrepancy (n = 3):
// A chi2(G / (eta (LipG + 1))) chi1(d~/(2 eta)) (1 - chi1)(|v - v0|/eta),
// A = kappa eta / 3 so that the product of three factors stays kappa-Lipschitz.
TestFunction sign_test(const Medium& m1, const Medium& m2, const Vec3& x0, const Vec3& v0,
                       double eta, double kappa, int lip_pairs = 10000, std::uint64_t seed = 11);

struct XRaySample {
  Vec3 x0, v0;
  double value = 0;    // -ln E, clamped at 0
  double estimate = 0; // raw E estimate
  nlohmann::json to_json() const;
};

// E estimate <phi, data> / (sup phi * source_mass), value -ln E.
XRaySample extract_xray(const BoundaryMeasure& data, const Vec3& x0, const Vec3& v0, double eta,
                        double kappa, double source_mass);
// same, from an already computed pairing <phi, data>
XRaySample xray_from_pairing(double pairing, const TestFunction& phi, double source_mass);

// <phi, data1 - data2> / amplitude
double extract_single_scatter(const TestFunction& phi, const BoundaryMeasure& data1,
                              const BoundaryMeasure& data2);
double extract_single_scatter(const Medium& m1, const Medium& m2, const BoundaryMeasure& data1,
                              const BoundaryMeasure& data2, const Vec3& x0, const Vec3& v0,
                              double eta, double kappa);

// Parallel-beam sinogram: line {x . (cos a, sin a) = s}, direction (-sin a, cos a).
struct Sinogram {
  int angles = 0;
  int offsets = 0;
  std::vector<double> values; // [angle][offset], NaN marks a missing entry

  Sinogram() = default;
  Sinogram(int na, int no);
  double angle(int a) const;
  double offset(int j) const;
  double spacing() const { return 2.0 / offsets; }
  double& at(int a, int j) { return values[static_cast<std::size_t>(a) * offsets + j]; }
  double at(int a, int j) const { return values[static_cast<std::size_t>(a) * offsets + j]; }
  // entry ray of line (a, j)
  void ray(int a, int j, Vec3* x0, Vec3* v0) const;
  void check_complete() const;
};

Sinogram make_sinogram(int angles, int offsets,
                       const std::function<double(const Vec3& x0, const Vec3& v0)>& value);
// exact X-ray transform of sigma by adaptive quadrature
Sinogram sinogram_of_medium(const Medium& m, int angles, int offsets);

void write_sinogram_csv(const std::string& path, const Sinogram& s);
Sinogram read_sinogram_csv(const std::string& path);

struct Image {
  int size = 0;
  double pitch = 0; // pixels cover [-1, 1]^2
  std::vector<double> values; // row-major, row index along y
  bool disk_mask = true;

  Vec3 pixel_center(int i, int j) const;
  double at(int i, int j) const { return values[static_cast<std::size_t>(i) * size + j]; }
};

// Ram-Lak filter with a cosine window reaching zero at window_cutoff times
// the Nyquist frequency; linear-interpolation backprojection; output masked
// to the unit disk.
Image fbp_invert(const Sinogram& s, int image_size = 128, double window_cutoff = 2.0);

// flat float64 grid plus a JSON sidecar path + ".json"
void write_image(const std::string& path, const Image& img);

// relative L2 error of img against f over the disk pixels
double relative_l2_error(const Image& img, const std::function<double(const Vec3&)>& f);

// X-ray transform of an image (bilinear sampling) on the sinogram's lines
Sinogram reproject(const Image& img, int angles, int offsets);

// k(x, v', v) = (E~k) / E~(x, v', v) with E~ from the sigma estimate.
double recover_k_pointwise(const Medium& sigma_estimate, double ek_value, const Vec3& x,
                           const Vec3& vin, const Vec3& vout);

} // namespace itrans
