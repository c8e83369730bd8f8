#pragma once

#include "itrans/vec.h"

#include <json.hpp>

#include <string>
#include <variant>
#include <vector>

namespace itrans {

// --- absorption models (sigma depends on x only in the shipped library) ---

struct SigmaConstant {
  double value = 0;
};

// sigma(x) = sum_i coeffs[i] * |x|^(2i)
struct SigmaRadial {
  std::vector<double> coeffs;
};

// sigma(x) = background + amplitude * exp(-|x - center|^2 / (2 width^2))
struct SigmaGaussian {
  double background = 0;
  double amplitude = 1;
  Vec3 center;
  double width = 0.2;
};

using SigmaModel = std::variant<SigmaConstant, SigmaRadial, SigmaGaussian>;

// --- scattering models: k(x, v', v) = rho(|x|) * angular(v' . v) ---

struct KernelNone {};

// k = value (per length per solid angle)
struct KernelIsotropic {
  double value = 0;
};

// k = strength * p_g(v' . v), p_g normalized to 1 over V
struct KernelHenyeyGreenstein {
  double strength = 0;
  double g = 0;
};

using KernelModel = std::variant<KernelNone, KernelIsotropic, KernelHenyeyGreenstein>;

// Smooth radial cutoff: 1 for r <= 1 - 2 r0, 0 for r >= 1 - r0, quintic
// smoothstep in between. r0 = 0 disables the cutoff.
double radial_cutoff(double r, double r0);
double radial_cutoff_lipschitz(double r0);

class Medium {
public:
  Medium() = default;
  Medium(int n, SigmaModel sigma, KernelModel kernel, double cutoff_margin = 0.1);

  int dimension() const { return n_; }

  double sigma(const Vec3& x, const Vec3& v) const;
  // scattering density from direction vin into vout at x
  double k(const Vec3& x, const Vec3& vin, const Vec3& vout) const;
  // integral of k over outgoing directions
  double sigma_p(const Vec3& x, const Vec3& vin) const;

  // angular factor of k and the spatial cutoff, exposed for samplers
  double k_angular(double cos_angle) const;
  double cutoff(const Vec3& x) const;

  bool has_scattering() const;
  // true when sigma is the same constant everywhere; value written to *c
  bool sigma_is_constant(double* c) const;

  double sigma_sup() const;
  double sigma_inf() const;
  double k_sup() const;
  double sigma_p_sup() const;
  double sigma_lipschitz() const;
  double k_lipschitz() const;
  double lipschitz_bound() const;
  double cutoff_margin() const { return r0_; }
  bool satisfies_hl() const { return r0_ > 0 || !has_scattering(); }

  // same absorption, scattering multiplied by s
  Medium scaled_kernel(double s) const;

  const SigmaModel& sigma_model() const { return sigma_; }
  const KernelModel& kernel_model() const { return kernel_; }

  nlohmann::json to_json() const;
  static Medium from_json(const nlohmann::json& j, int n);

private:
  int n_ = 2;
  SigmaModel sigma_ = SigmaConstant{};
  KernelModel kernel_ = KernelNone{};
  double r0_ = 0.1;
};

enum class SubcriticalMode { hsc1, hsc2 };

struct SubcriticalityCertificate {
  SubcriticalMode mode = SubcriticalMode::hsc1;
  double margin = 0;          // HSC1: min(sigma - sigma_p); HSC2: 1 - ||tau sigma_p||
  double q = 0;               // contraction ratio for the Neumann series
  double tau_sigma_p_sup = 0; // sampled ||tau sigma_p||_inf
  double tau_sigma_sup = 0;   // sampled ||tau sigma||_inf
  double hsc1_slack = 0;      // sampled min(sigma - sigma_p)

  nlohmann::json to_json() const;
};

// Samples a deterministic Halton grid over X x V. Throws NotSubcritical
// when neither condition holds on the sample.
SubcriticalityCertificate certify(const Medium& m, int sample_count = 100000);

// (1/tau) * integral over the full chord of (sigma1 - sigma2)(x + s v, v).
double gauge_representative_diff(const Medium& m1, const Medium& m2, const Vec3& x,
                                 const Vec3& v);

// Sampled Lipschitz quotient of sigma over random pairs in X x V.
double sampled_sigma_lipschitz(const Medium& m, int pairs, std::uint64_t seed);
double sampled_k_lipschitz(const Medium& m, int pairs, std::uint64_t seed);

} // namespace itrans
