#include "itrans/optics.h"

#include "itrans/errors.h"
#include "itrans/geometry.h"
#include "itrans/quadrature.h"
#include "itrans/rng.h"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace itrans {

using std::numbers::pi;
using nlohmann::json;

namespace {

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

double halton(std::uint64_t i, int base)
{
  double f = 1, r = 0;
  while (i > 0) {
    f /= base;
    r += f * (i % base);
    i /= base;
  }
  return r;
}

Vec3 vec_from_json(const json& j)
{
  if (!j.is_array() || j.size() < 2 || j.size() > 3) throw ConfigError("expected a 2- or 3-vector");
  return {j[0].get<double>(), j[1].get<double>(), j.size() == 3 ? j[2].get<double>() : 0.0};
}

json vec_to_json(const Vec3& v, int n)
{
  if (n == 2) return json::array({v.x, v.y});
  return json::array({v.x, v.y, v.z});
}

} // namespace

double radial_cutoff(double r, double r0)
{
  if (r0 <= 0) return 1.0;
  if (r <= 1 - 2 * r0) return 1.0;
  if (r >= 1 - r0) return 0.0;
  double s = (1 - r0 - r) / r0;
  return s * s * s * (10 + s * (-15 + 6 * s));
}

double radial_cutoff_lipschitz(double r0) { return r0 > 0 ? 15.0 / (8.0 * r0) : 0.0; }

Medium::Medium(int n, SigmaModel sigma, KernelModel kernel, double cutoff_margin)
    : n_(n), sigma_(std::move(sigma)), kernel_(std::move(kernel)), r0_(cutoff_margin)
{
  check_dimension(n);
  if (r0_ < 0 || r0_ >= 0.5) throw ConfigError("cutoff margin must lie in [0, 0.5)");
  if (auto* g = std::get_if<SigmaGaussian>(&sigma_); g && g->width <= 0)
    throw ConfigError("gaussian width must be positive");
  if (auto* hg = std::get_if<KernelHenyeyGreenstein>(&kernel_); hg && std::abs(hg->g) >= 1)
    throw ConfigError("henyey-greenstein g must satisfy |g| < 1");
  if (sigma_inf() < 0) throw ConfigError("absorption must be nonnegative");
  if (auto* iso = std::get_if<KernelIsotropic>(&kernel_); iso && iso->value < 0)
    throw ConfigError("scattering must be nonnegative");
  if (auto* hg = std::get_if<KernelHenyeyGreenstein>(&kernel_); hg && hg->strength < 0)
    throw ConfigError("scattering must be nonnegative");
}

double Medium::sigma(const Vec3& x, const Vec3&) const
{
  return std::visit(overloaded{
                        [](const SigmaConstant& s) { return s.value; },
                        [&](const SigmaRadial& s) {
                          double r2 = norm2(x), p = 1, acc = 0;
                          for (double c : s.coeffs) {
                            acc += c * p;
                            p *= r2;
                          }
                          return acc;
                        },
                        [&](const SigmaGaussian& s) {
                          double d2 = norm2(x - s.center);
                          return s.background +
                                 s.amplitude * std::exp(-d2 / (2 * s.width * s.width));
                        },
                    },
                    sigma_);
}

double Medium::k_angular(double mu) const
{
  return std::visit(overloaded{
                        [](const KernelNone&) { return 0.0; },
                        [](const KernelIsotropic& k) { return k.value; },
                        [&](const KernelHenyeyGreenstein& k) {
                          double g = k.g, d = 1 + g * g - 2 * g * mu;
                          if (n_ == 2) return k.strength * (1 - g * g) / (2 * pi * d);
                          return k.strength * (1 - g * g) / (4 * pi * d * std::sqrt(d));
                        },
                    },
                    kernel_);
}

double Medium::cutoff(const Vec3& x) const { return radial_cutoff(norm(x), r0_); }

double Medium::k(const Vec3& x, const Vec3& vin, const Vec3& vout) const
{
  if (std::holds_alternative<KernelNone>(kernel_)) return 0.0;
  double r2 = norm2(x);
  if (r2 > 1.0) return 0.0; // extended by zero outside the domain
  double rho = radial_cutoff(std::sqrt(r2), r0_);
  if (rho == 0.0) return 0.0;
  return rho * k_angular(dot(vin, vout));
}

double Medium::sigma_p(const Vec3& x, const Vec3&) const
{
  double rho = cutoff(x);
  return std::visit(overloaded{
                        [](const KernelNone&) { return 0.0; },
                        [&](const KernelIsotropic& k) {
                          return rho * k.value * Domain(n_).sphere_measure();
                        },
                        [&](const KernelHenyeyGreenstein& k) { return rho * k.strength; },
                    },
                    kernel_);
}

bool Medium::has_scattering() const
{
  return std::visit(overloaded{
                        [](const KernelNone&) { return false; },
                        [](const KernelIsotropic& k) { return k.value > 0; },
                        [](const KernelHenyeyGreenstein& k) { return k.strength > 0; },
                    },
                    kernel_);
}

bool Medium::sigma_is_constant(double* c) const
{
  if (auto* s = std::get_if<SigmaConstant>(&sigma_)) {
    if (c) *c = s->value;
    return true;
  }
  return false;
}

double Medium::sigma_sup() const
{
  return std::visit(overloaded{
                        [](const SigmaConstant& s) { return s.value; },
                        [&](const SigmaRadial&) {
                          double m = -1e300;
                          for (int i = 0; i <= 4096; ++i)
                            m = std::max(m, sigma(Vec3{i / 4096.0, 0, 0}, Vec3{}));
                          return m;
                        },
                        [](const SigmaGaussian& s) { return s.background + std::max(0.0, s.amplitude); },
                    },
                    sigma_);
}

double Medium::sigma_inf() const
{
  return std::visit(overloaded{
                        [](const SigmaConstant& s) { return s.value; },
                        [&](const SigmaRadial&) {
                          double m = 1e300;
                          for (int i = 0; i <= 4096; ++i)
                            m = std::min(m, sigma(Vec3{i / 4096.0, 0, 0}, Vec3{}));
                          return m;
                        },
                        [](const SigmaGaussian& s) { return s.background + std::min(0.0, s.amplitude); },
                    },
                    sigma_);
}

double Medium::k_sup() const
{
  return std::visit(overloaded{
                        [](const KernelNone&) { return 0.0; },
                        [](const KernelIsotropic& k) { return k.value; },
                        [&](const KernelHenyeyGreenstein& k) {
                          double g = std::abs(k.g), d = (1 - g) * (1 - g);
                          if (n_ == 2) return k.strength * (1 - g * g) / (2 * pi * d);
                          return k.strength * (1 - g * g) / (4 * pi * d * (1 - g));
                        },
                    },
                    kernel_);
}

double Medium::sigma_p_sup() const { return sigma_p(Vec3{}, Vec3{1, 0, 0}); }

double Medium::sigma_lipschitz() const
{
  return std::visit(overloaded{
                        [](const SigmaConstant&) { return 0.0; },
                        [](const SigmaRadial& s) {
                          double acc = 0;
                          for (std::size_t i = 0; i < s.coeffs.size(); ++i)
                            acc += 2.0 * i * std::abs(s.coeffs[i]);
                          return acc;
                        },
                        [](const SigmaGaussian& s) {
                          return std::abs(s.amplitude) / (s.width * std::sqrt(std::exp(1.0)));
                        },
                    },
                    sigma_);
}

double Medium::k_lipschitz() const
{
  // |dk| <= A |drho| + B |dmu| with |dmu| <= |dv'| + |dv|; the sum of three
  // displacements is at most sqrt(3) times the Euclidean product distance.
  double a_sup = k_sup();
  double a_slope = std::visit(overloaded{
                                  [](const KernelNone&) { return 0.0; },
                                  [](const KernelIsotropic&) { return 0.0; },
                                  [&](const KernelHenyeyGreenstein& k) {
                                    double g = std::abs(k.g), c = 1 - g;
                                    if (n_ == 2)
                                      return k.strength * (1 - g * g) / (2 * pi) * 2 * g /
                                             (c * c * c * c);
                                    return k.strength * (1 - g * g) / (4 * pi) * 3 * g /
                                           (c * c * c * c * c);
                                  },
                              },
                              kernel_);
  return std::sqrt(3.0) * std::max(a_sup * radial_cutoff_lipschitz(r0_), a_slope);
}

double Medium::lipschitz_bound() const { return std::max(sigma_lipschitz(), k_lipschitz()); }

Medium Medium::scaled_kernel(double s) const
{
  KernelModel k = std::visit(overloaded{
                                 [](const KernelNone& k) -> KernelModel { return k; },
                                 [&](const KernelIsotropic& k) -> KernelModel {
                                   return KernelIsotropic{k.value * s};
                                 },
                                 [&](const KernelHenyeyGreenstein& k) -> KernelModel {
                                   return KernelHenyeyGreenstein{k.strength * s, k.g};
                                 },
                             },
                             kernel_);
  return Medium(n_, sigma_, k, r0_);
}

json Medium::to_json() const
{
  json j;
  std::visit(overloaded{
                 [&](const SigmaConstant& s) { j["sigma"] = {{"type", "constant"}, {"value", s.value}}; },
                 [&](const SigmaRadial& s) { j["sigma"] = {{"type", "radial"}, {"coeffs", s.coeffs}}; },
                 [&](const SigmaGaussian& s) {
                   j["sigma"] = {{"type", "gaussian"},
                                 {"background", s.background},
                                 {"amplitude", s.amplitude},
                                 {"center", vec_to_json(s.center, n_)},
                                 {"width", s.width}};
                 },
             },
             sigma_);
  std::visit(overloaded{
                 [&](const KernelNone&) { j["k"] = {{"type", "none"}}; },
                 [&](const KernelIsotropic& k) { j["k"] = {{"type", "isotropic"}, {"value", k.value}}; },
                 [&](const KernelHenyeyGreenstein& k) {
                   j["k"] = {{"type", "henyey_greenstein"}, {"strength", k.strength}, {"g", k.g}};
                 },
             },
             kernel_);
  j["cutoff_margin"] = r0_;
  return j;
}

Medium Medium::from_json(const json& j, int n)
{
  try {
    SigmaModel sigma = SigmaConstant{0};
    if (j.contains("sigma")) {
      const auto& s = j.at("sigma");
      std::string type = s.at("type");
      if (type == "constant") sigma = SigmaConstant{s.at("value").get<double>()};
      else if (type == "radial") sigma = SigmaRadial{s.at("coeffs").get<std::vector<double>>()};
      else if (type == "gaussian") {
        SigmaGaussian g;
        g.background = s.value("background", 0.0);
        g.amplitude = s.value("amplitude", 1.0);
        if (s.contains("center")) g.center = vec_from_json(s.at("center"));
        g.width = s.value("width", 0.2);
        sigma = g;
      } else
        throw ConfigError("unknown sigma type '" + type + "'");
    }
    KernelModel kernel = KernelNone{};
    if (j.contains("k")) {
      const auto& k = j.at("k");
      std::string type = k.at("type");
      if (type == "none") kernel = KernelNone{};
      else if (type == "isotropic") kernel = KernelIsotropic{k.at("value").get<double>()};
      else if (type == "henyey_greenstein")
        kernel = KernelHenyeyGreenstein{k.at("strength").get<double>(), k.value("g", 0.0)};
      else
        throw ConfigError("unknown k type '" + type + "'");
    }
    return Medium(n, sigma, kernel, j.value("cutoff_margin", 0.1));
  } catch (const json::exception& e) {
    throw ConfigError(std::string("medium: ") + e.what());
  }
}

json SubcriticalityCertificate::to_json() const
{
  return {{"mode", mode == SubcriticalMode::hsc1 ? "HSC1" : "HSC2"},
          {"margin", margin},
          {"q", q},
          {"tau_sigma_p_sup", tau_sigma_p_sup},
          {"tau_sigma_sup", tau_sigma_sup},
          {"hsc1_slack", hsc1_slack}};
}

SubcriticalityCertificate certify(const Medium& m, int sample_count)
{
  const int n = m.dimension();
  double slack = 1e300, tsp = 0, ts = 0, ratio = 0;
  bool ratio_finite = true;
  auto visit = [&](const Vec3& x, const Vec3& v) {
    double s = m.sigma(x, v), sp = m.sigma_p(x, v), tau = chord_length(x, v);
    slack = std::min(slack, s - sp);
    tsp = std::max(tsp, tau * sp);
    ts = std::max(ts, tau * s);
    if (sp > 0) {
      if (s > 0) ratio = std::max(ratio, sp / s);
      else ratio_finite = false;
    }
  };
  for (int i = 0; i < sample_count; ++i) {
    std::uint64_t k = static_cast<std::uint64_t>(i) + 1;
    Vec3 x, v;
    if (n == 2) {
      double r = std::sqrt(halton(k, 2)), a = 2 * pi * halton(k, 3);
      x = {r * std::cos(a), r * std::sin(a), 0};
      v = uniform_direction(2, halton(k, 5), 0);
    } else {
      double r = std::cbrt(halton(k, 2));
      x = uniform_direction(3, halton(k, 3), halton(k, 5)) * r;
      v = uniform_direction(3, halton(k, 7), halton(k, 11));
    }
    visit(x, v);
  }
  // the centre carries the longest chords
  for (int i = 0; i < 16; ++i) visit(Vec3{}, uniform_direction(n, (i + 0.5) / 16, 0.3));

  SubcriticalityCertificate c;
  c.tau_sigma_p_sup = tsp;
  c.tau_sigma_sup = ts;
  c.hsc1_slack = slack;
  double scale = std::max(1.0, m.sigma_sup());
  bool hsc1 = slack >= -1e-12 * scale && ratio_finite;
  bool hsc2 = tsp < 1.0;
  double q1 = hsc1 ? ratio * (1 - std::exp(-ts)) : 1.0;
  double q2 = hsc2 ? tsp : 1.0;
  if (!hsc1 && !hsc2)
    throw NotSubcritical("sigma - sigma_p has min " + std::to_string(slack) +
                         " and ||tau sigma_p|| = " + std::to_string(tsp));
  if (hsc1 && (!hsc2 || q1 <= q2)) {
    c.mode = SubcriticalMode::hsc1;
    c.margin = std::max(0.0, slack);
    c.q = q1;
  } else {
    c.mode = SubcriticalMode::hsc2;
    c.margin = 1 - tsp;
    c.q = q2;
  }
  return c;
}

double gauge_representative_diff(const Medium& m1, const Medium& m2, const Vec3& x, const Vec3& v)
{
  double tp = tau_plus(x, v), tm = tau_minus(x, v), tau = tp + tm;
  auto diff = [&](double s) {
    Vec3 y = x + v * s;
    return m1.sigma(y, v) - m2.sigma(y, v);
  };
  if (tau < 1e-12) return diff(0.0);
  return integrate_adaptive(diff, -tm, tp, 1e-12) / tau;
}

double sampled_sigma_lipschitz(const Medium& m, int pairs, std::uint64_t seed)
{
  const int n = m.dimension();
  double worst = 0;
  for (int i = 0; i < pairs; ++i) {
    auto u = [&](int d) { return uniform01(seed, 11, i, d); };
    double r = n == 2 ? std::sqrt(u(0)) : std::cbrt(u(0));
    Vec3 x = uniform_direction(n, u(1), u(2)) * r;
    Vec3 step = uniform_direction(n, u(3), u(4)) * (0.2 * u(5) + 1e-6);
    Vec3 y = x + step;
    if (norm(y) > 1) y = normalized(y) * 0.999999;
    Vec3 v = uniform_direction(n, u(6), u(7));
    double d = norm(x - y);
    if (d > 0) worst = std::max(worst, std::abs(m.sigma(x, v) - m.sigma(y, v)) / d);
  }
  return worst;
}

double sampled_k_lipschitz(const Medium& m, int pairs, std::uint64_t seed)
{
  const int n = m.dimension();
  double worst = 0;
  for (int i = 0; i < pairs; ++i) {
    auto u = [&](int d) { return uniform01(seed, 12, i, d); };
    double r = n == 2 ? std::sqrt(u(0)) : std::cbrt(u(0));
    Vec3 x = uniform_direction(n, u(1), u(2)) * r;
    double h = 0.1 * u(3) + 1e-6;
    Vec3 y = x + uniform_direction(n, u(4), u(5)) * h;
    if (norm(y) > 1) y = normalized(y) * 0.999999;
    Vec3 a = uniform_direction(n, u(6), u(7)), b = uniform_direction(n, u(8), u(9));
    Vec3 a2 = normalized(a + uniform_direction(n, u(10), u(11)) * h);
    Vec3 b2 = normalized(b + uniform_direction(n, u(12), u(13)) * h);
    double d = std::sqrt(norm2(x - y) + norm2(a - a2) + norm2(b - b2));
    if (d > 0) worst = std::max(worst, std::abs(m.k(x, a, b) - m.k(y, a2, b2)) / d);
  }
  return worst;
}

} // namespace itrans
