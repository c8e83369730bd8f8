#include "itrans/experiments.h"

#include "itrans/errors.h"
#include "itrans/parallel.h"
#include "itrans/quadrature.h"
#include "itrans/rng.h"
#include "itrans/wasserstein.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <numbers>
#include <optional>
#include <sstream>
#include <tuple>

namespace itrans {

using nlohmann::json;

namespace {

Vec3 vec_from_json(const json& j, int n)
{
  if (!j.is_array() || static_cast<int>(j.size()) < n)
    throw ConfigError("expected an array of " + std::to_string(n) + " numbers");
  Vec3 v{j[0].get<double>(), j[1].get<double>(), n == 3 ? j[2].get<double>() : 0.0};
  return v;
}

json vec_to_json(const Vec3& v, int n)
{
  if (n == 2) return json::array({v.x, v.y});
  return json::array({v.x, v.y, v.z});
}

std::vector<double> number_list(const json& j, const char* key)
{
  std::vector<double> out;
  if (!j.contains(key)) return out;
  for (const auto& x : j.at(key)) out.push_back(x.get<double>());
  return out;
}

const char* shape_name(KernelShape s) { return s == KernelShape::tent ? "tent" : "cross"; }

BoundaryMeasure point_source(int n, const Probe& p)
{
  auto g = BoundaryMeasure::point(n, p.x0, p.v0, 1.0);
  g.side = Side::incoming;
  return g;
}

double eta_cap_ballistic(double kappa) { return std::min(2.0 / kappa, 2.0) * (1 - 1e-12); }
double eta_cap_sign(double kappa) { return std::min(2.0, 1.0 / kappa) * (1 - 1e-9); }

// <phi, blur(m)> without materializing the blurred measure
double pair_blurred(const BoundaryMeasure& m, double eta_b, KernelShape shape, const PhaseField& phi)
{
  const std::size_t chunk = 4096;
  const std::size_t parts = (m.size() + chunk - 1) / chunk;
  std::vector<double> partial(parts, 0.0);
  parallel_for(parts, [&](std::size_t c) {
    double s = 0;
    std::size_t hi = std::min(m.size(), (c + 1) * chunk);
    for (std::size_t i = c * chunk; i < hi; ++i) {
      const Atom& a = m.atoms[i];
      if (eta_b <= 0) {
        s += a.mass * phi(a.x, a.v);
        continue;
      }
      blur_atom(m.n, m.side, a, eta_b, shape,
                [&](const Vec3& x, const Vec3& v, double w) { s += w * phi(x, v); });
    }
    partial[c] = s;
  });
  double total = 0;
  for (double p : partial) total += p;
  return total;
}

// standard error of <f, expansion> from the Monte Carlo orders
double pairing_stderr(const CollisionExpansion& e, const PhaseField& f)
{
  double var = 0;
  for (std::size_t o = 0; o < e.orders.size(); ++o) {
    if (o >= e.info.samples.size() || e.info.samples[o] == 0) continue;
    double s = 0, s2 = 0;
    for (const auto& a : e.orders[o].atoms) {
      double c = a.mass * f(a.x, a.v);
      s += c;
      s2 += c * c;
    }
    double se = tally_stderr(s, s2, e.info.samples[o]);
    var += se * se;
  }
  return std::sqrt(var);
}

std::string fmt_double(double x)
{
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

double corrected(double x, double y)
{
  if (x <= 0) return y;
  return y / (1 + std::sqrt(std::abs(std::log(x))));
}

void sort_records(std::vector<StabilityRecord>& r)
{
  std::stable_sort(r.begin(), r.end(), [](const StabilityRecord& a, const StabilityRecord& b) {
    return std::tie(a.perturbation, a.level, a.probe, a.kappa) <
           std::tie(b.perturbation, b.level, b.probe, b.kappa);
  });
}

struct Level {
  std::string kind;
  double value;
};

std::vector<Level> perturbation_levels(const ExperimentConfig& c)
{
  std::vector<Level> out{{"none", 0.0}};
  for (double e : c.eta_blur)
    if (e > 0) out.push_back({"blur", e});
  for (double s : c.shifts)
    if (s > 0) out.push_back({"shift", s});
  return out;
}

BoundaryMeasure perturb(const BoundaryMeasure& m, const Level& l, KernelShape shape)
{
  if (l.kind == "blur") return blur(m, l.value, shape);
  if (l.kind == "shift") return misalign(m, l.value);
  return m;
}

} // namespace

Probe probe_from_json(const json& j, int n)
{
  if (!j.contains("v0")) throw ConfigError("probe needs v0");
  Probe p;
  p.v0 = normalized(vec_from_json(j.at("v0"), n));
  if (j.contains("x0")) {
    p.x0 = vec_from_json(j.at("x0"), n);
    try {
      make_ray(p.x0, p.v0, Side::incoming);
    } catch (const Error& e) {
      throw ConfigError(std::string("probe is not an incoming boundary ray: ") + e.what());
    }
  } else if (j.contains("through")) {
    Vec3 t = vec_from_json(j.at("through"), n);
    if (norm(t) >= 1) throw ConfigError("probe point must be inside the ball");
    p.x0 = entry_point(t, p.v0);
  } else {
    throw ConfigError("probe needs x0 or through");
  }
  return p;
}

json probe_to_json(const Probe& p, int n)
{
  return json{{"x0", vec_to_json(p.x0, n)}, {"v0", vec_to_json(p.v0, n)}};
}

ExperimentConfig ExperimentConfig::from_json(const json& j)
{
  try {
    ExperimentConfig c;
    c.n = j.value("n", 2);
    check_dimension(c.n);
    if (!j.contains("medium1") || !j.contains("medium2"))
      throw ConfigError("config needs medium1 and medium2");
    c.medium1 = Medium::from_json(j.at("medium1"), c.n);
    c.medium2 = Medium::from_json(j.at("medium2"), c.n);
    if (j.contains("probes"))
      for (const auto& p : j.at("probes")) c.probes.push_back(probe_from_json(p, c.n));
    c.eta_blur = number_list(j, "eta_blur");
    c.shifts = number_list(j, "shifts");
    c.mesh_h = number_list(j, "mesh_h");
    if (j.contains("kappas")) c.kappas = number_list(j, "kappas");
    c.eta_grid = number_list(j, "eta_grid");
    if (j.contains("expansion")) c.expansion = ExpansionSettings::from_json(j.at("expansion"));
    if (j.contains("truncation_order"))
      c.expansion.truncation_order = j.at("truncation_order").get<int>();
    if (j.contains("histories")) c.expansion.histories = j.at("histories").get<std::size_t>();
    c.seed = j.value("seed", std::uint64_t{1});
    c.expansion.seed = c.seed;
    c.output_dir = j.value("output_dir", std::string("."));
    if (j.contains("blur_shape")) c.blur_shape = parse_kernel_shape(j.at("blur_shape"));
    c.bias_constant = j.value("bias_constant", 1.0);
    c.eta_min = j.value("eta_min", 1e-4);
    c.psi_rho = j.value("psi_rho", 1e-3);
    c.bin_first = j.value("bin_first", 0.01);
    c.bin_ratio = j.value("bin_ratio", 1.5);
    return c;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }
}

json ExperimentConfig::to_json() const
{
  json probes_j = json::array();
  for (const auto& p : probes) probes_j.push_back(probe_to_json(p, n));
  return json{{"n", n},
              {"medium1", medium1.to_json()},
              {"medium2", medium2.to_json()},
              {"probes", probes_j},
              {"eta_blur", eta_blur},
              {"shifts", shifts},
              {"mesh_h", mesh_h},
              {"kappas", kappas},
              {"eta_grid", eta_grid},
              {"expansion", expansion.to_json()},
              {"seed", seed},
              {"output_dir", output_dir},
              {"blur_shape", shape_name(blur_shape)},
              {"bias_constant", bias_constant},
              {"eta_min", eta_min},
              {"psi_rho", psi_rho},
              {"bin_first", bin_first},
              {"bin_ratio", bin_ratio}};
}

void ExperimentConfig::validate() const
{
  check_dimension(n);
  if (medium1.dimension() != n || medium2.dimension() != n)
    throw ConfigError("media must have the configured dimension");
  if (probes.empty()) throw ConfigError("probe list is empty");
  if (kappas.empty()) throw ConfigError("kappa list is empty");
  for (double k : kappas)
    if (!(k >= 1)) throw ConfigError("kappa must be >= 1");
  for (double e : eta_blur)
    if (e < 0) throw ConfigError("blur widths must be nonnegative");
  for (double s : shifts)
    if (s < 0) throw ConfigError("shifts must be nonnegative");
  for (double h : mesh_h)
    if (h <= 0) throw ConfigError("mesh sizes must be positive");
  for (double e : eta_grid)
    if (!(e > 0 && e < 2)) throw ConfigError("eta grid values must lie in (0, 2)");
  if (!(eta_min > 0)) throw ConfigError("eta_min must be positive");
  if (!(bias_constant > 0)) throw ConfigError("bias_constant must be positive");
  if (!(bin_first > 0) || !(bin_ratio > 1)) throw ConfigError("invalid detector binning");
  certify(medium1);
  certify(medium2);
}

ExperimentConfig load_config(const std::string& path)
{
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return ExperimentConfig::from_json(j);
}

double a_priori_eta(double eps, double kappa, double p, double c, double eta_min, double eta_max)
{
  if (!(kappa > 0) || !(p > 0) || !(c > 0)) throw ConfigError("a_priori_eta: bad parameters");
  if (eps <= 0) return eta_min;
  double eta = std::pow(eps / (kappa * c * p), 1.0 / (p + 1));
  return std::clamp(eta, eta_min, eta_max);
}

BoundaryMeasure detector_bin(const BoundaryMeasure& m, const Vec3& y0, const Vec3& v0, double first,
                             double ratio)
{
  if (m.n != 2) throw InvalidDimension("detector binning is two-dimensional");
  const double pi = std::numbers::pi;
  auto g = graded_edges(pi, first, ratio);
  std::vector<double> edges;
  for (std::size_t i = g.size() - 1; i > 0; --i) edges.push_back(-g[i]);
  for (double x : g) edges.push_back(x);
  auto wrap = [pi](double a) {
    while (a > pi) a -= 2 * pi;
    while (a <= -pi) a += 2 * pi;
    return a;
  };
  auto cell = [&](double a) {
    long i = std::upper_bound(edges.begin(), edges.end(), a) - edges.begin() - 1;
    return std::clamp<long>(i, 0, static_cast<long>(edges.size()) - 2);
  };
  const double p0 = std::atan2(y0.y, y0.x), t0 = std::atan2(v0.y, v0.x);
  struct Bin {
    double mass = 0, sp = 0, st = 0;
    std::vector<std::size_t> members;
  };
  std::map<std::pair<long, long>, Bin> bins;
  for (std::size_t k = 0; k < m.size(); ++k) {
    const Atom& a = m.atoms[k];
    double p = wrap(std::atan2(a.x.y, a.x.x) - p0), t = wrap(std::atan2(a.v.y, a.v.x) - t0);
    auto& b = bins[{cell(p), cell(t)}];
    b.mass += a.mass;
    b.sp += a.mass * p;
    b.st += a.mass * t;
    b.members.push_back(k);
  }
  BoundaryMeasure out(2, m.side);
  for (const auto& [key, b] : bins) {
    bool ok = b.mass > 0;
    Vec3 x, v;
    if (ok) {
      double p = p0 + b.sp / b.mass, t = t0 + b.st / b.mass;
      x = Vec3{std::cos(p), std::sin(p), 0};
      v = Vec3{std::cos(t), std::sin(t), 0};
      double c = dot(x, v);
      ok = m.side == Side::outgoing ? c > 1e-9 : c < -1e-9;
    }
    if (ok) {
      out.add(x, v, b.mass);
    } else {
      // centroid not a valid ray (or signed mass): keep the bin's atoms
      for (std::size_t k : b.members) out.atoms.push_back(m.atoms[k]);
    }
  }
  return out;
}

std::vector<StabilityRecord> run_ballistic_sweep(const ExperimentConfig& c)
{
  c.validate();
  const int n = c.n;
  const auto levels = perturbation_levels(c);
  std::vector<StabilityRecord> out;

  for (std::size_t pi = 0; pi < c.probes.size(); ++pi) {
    const Probe& p = c.probes[pi];
    auto g = point_source(n, p);
    auto e1 = expand_albedo(c.medium1, g, c.expansion);
    auto e2 = expand_albedo(c.medium2, g, c.expansion);
    const Vec3 y0 = exit_point(p.x0, p.v0);
    auto data = [&](const CollisionExpansion& e) {
      auto all = e.combined();
      return n == 2 ? detector_bin(all, y0, p.v0, c.bin_first, c.bin_ratio) : all;
    };
    const BoundaryMeasure D1 = data(e1), D2 = data(e2);
    const double L = chord_length(p.x0, p.v0);
    const double truth = optical_depth(c.medium1, p.x0, p.v0, L) - optical_depth(c.medium2, p.x0, p.v0, L);

    struct Item {
      Level level;
      double kappa;
    };
    std::vector<Item> items;
    for (const auto& l : levels)
      for (double k : c.kappas) items.push_back({l, k});
    std::vector<std::optional<StabilityRecord>> slots(items.size());

    parallel_for(items.size(), [&](std::size_t i) {
      const auto& [level, kappa] = items[i];
      BoundaryMeasure P1 = perturb(D1, level, c.blur_shape), P2 = perturb(D2, level, c.blur_shape);
      StabilityRecord r;
      r.sweep = "ballistic";
      r.perturbation = level.kind;
      r.level = level.value;
      r.probe = pi;
      r.kappa = kappa;
      r.seed = c.seed;
      if (level.kind == "none") {
        r.epsilon = 0;
        r.epsilon_method = "exact";
      } else if (n == 2) {
        r.epsilon = std::max(w1kappa(P1, D1, kappa), w1kappa(P2, D2, kappa));
        r.epsilon_method = "lp";
      } else if (level.kind == "blur") {
        r.epsilon = std::max(blur_plan_cost(D1, level.value, c.blur_shape, kappa),
                             blur_plan_cost(D2, level.value, c.blur_shape, kappa));
        r.epsilon_method = "plan_cost";
      } else {
        r.epsilon = std::min(kappa * level.value, 2.0) *
                    std::max(D1.total_variation(), D2.total_variation());
        r.epsilon_method = "shift_cost";
      }
      r.eta = a_priori_eta(r.epsilon, kappa, n - 1, c.bias_constant, c.eta_min, eta_cap_ballistic(kappa));
      auto phi = ballistic_bump(n, p.x0, p.v0, r.eta, kappa);
      XRaySample x1, x2;
      try {
        x1 = xray_from_pairing(P1.pair(phi.eval), phi, 1.0);
        x2 = xray_from_pairing(P2.pair(phi.eval), phi, 1.0);
      } catch (const NonPositiveEstimate& err) {
        std::cerr << "skipping flagged sample (" << level.kind << " " << level.value << "): "
                  << err.what() << "\n";
        return;
      }
      r.estimate1 = x1.value;
      r.estimate2 = x2.value;
      r.truth = truth;
      r.recon_error = std::abs(x1.value - x2.value - truth);
      double s1 = pairing_stderr(e1, phi.eval) / (phi.sup * x1.estimate);
      double s2 = pairing_stderr(e2, phi.eval) / (phi.sup * x2.estimate);
      r.mc_stderr = std::sqrt(s1 * s1 + s2 * s2);
      slots[i] = r;
    });
    for (auto& s : slots)
      if (s) out.push_back(*s);
  }
  sort_records(out);
  return out;
}

double single_scatter_functional(const Medium& m1, const Medium& m2, const Probe& p, int depth_nodes,
                                 int direction_res)
{
  const int n = m1.dimension();
  if (m2.dimension() != n) throw InvalidDimension("media dimensions differ");
  const double L = chord_length(p.x0, p.v0);
  auto b1 = scattering_breakpoints(m1, p.x0, p.v0, L);
  auto b2 = scattering_breakpoints(m2, p.x0, p.v0, L);
  std::vector<double> edges{0.0, L};
  edges.insert(edges.end(), b1.begin(), b1.end());
  edges.insert(edges.end(), b2.begin(), b2.end());
  std::sort(edges.begin(), edges.end());
  edges.erase(std::unique(edges.begin(), edges.end(),
                          [](double a, double b) { return std::abs(a - b) < 1e-14; }),
              edges.end());
  const int per = std::max(2, depth_nodes / static_cast<int>(edges.size() - 1));
  auto depth = composite_gauss(edges, per);
  auto dirs = direction_quadrature(n, direction_res);
  std::vector<double> partial(depth.size(), 0.0);
  parallel_for(depth.size(), [&](std::size_t i) {
    Vec3 z = p.x0 + p.v0 * depth.nodes[i];
    double s = 0;
    for (std::size_t d = 0; d < dirs.nodes.size(); ++d) {
      const Vec3& v = dirs.nodes[d];
      double a = 0, b = 0;
      double k1 = m1.k(z, p.v0, v), k2 = m2.k(z, p.v0, v);
      if (k1 != 0) a = attenuation_broken(m1, z, p.v0, v) * k1;
      if (k2 != 0) b = attenuation_broken(m2, z, p.v0, v) * k2;
      s += dirs.weights[d] * std::abs(a - b);
    }
    partial[i] = depth.weights[i] * s;
  });
  double total = 0;
  for (double x : partial) total += x;
  return total;
}

namespace {

struct SinglePair {
  CollisionExpansion e1, e2;
  BoundaryMeasure D1, D2;
};

SinglePair single_data(const ExperimentConfig& c, const Probe& p, const ExpansionSettings& s)
{
  if (c.n != 3) throw InvalidDimension("single-scattering extraction needs n = 3");
  auto g = point_source(3, p);
  SinglePair d{expand_albedo(c.medium1, g, s), expand_albedo(c.medium2, g, s), {}, {}};
  d.D1 = d.e1.combined();
  d.D2 = d.e2.combined();
  return d;
}

} // namespace

std::vector<StabilityRecord> run_singlescatter_sweep(const ExperimentConfig& c)
{
  c.validate();
  if (c.n != 3) throw InvalidDimension("single-scattering sweep needs n = 3");
  const auto levels = perturbation_levels(c);
  std::vector<StabilityRecord> out;
  for (std::size_t pi = 0; pi < c.probes.size(); ++pi) {
    const Probe& p = c.probes[pi];
    auto d = single_data(c, p, c.expansion);
    const double truth = single_scatter_functional(c.medium1, c.medium2, p);
    // sweep points run one after another; the pairings inside are parallel
    for (const auto& level : levels) {
      for (double kappa : c.kappas) {
        StabilityRecord r;
        r.sweep = "single";
        r.perturbation = level.kind;
        r.level = level.value;
        r.probe = pi;
        r.kappa = kappa;
        r.seed = c.seed;
        if (level.kind == "none") {
          r.epsilon_method = "exact";
        } else if (level.kind == "blur") {
          r.epsilon = std::max(blur_plan_cost(d.D1, level.value, c.blur_shape, kappa),
                               blur_plan_cost(d.D2, level.value, c.blur_shape, kappa));
          r.epsilon_method = "plan_cost";
        } else {
          r.epsilon = std::min(kappa * level.value, 2.0) *
                      std::max(d.D1.total_variation(), d.D2.total_variation());
          r.epsilon_method = "shift_cost";
        }
        r.eta = a_priori_eta(r.epsilon, kappa, 1, c.bias_constant, c.eta_min, eta_cap_sign(kappa));
        auto phi = sign_test(c.medium1, c.medium2, p.x0, p.v0, r.eta, kappa);
        double p1, p2;
        if (level.kind == "shift") {
          p1 = misalign(d.D1, level.value).pair(phi.eval);
          p2 = misalign(d.D2, level.value).pair(phi.eval);
        } else {
          double eb = level.kind == "blur" ? level.value : 0.0;
          p1 = pair_blurred(d.D1, eb, c.blur_shape, phi.eval);
          p2 = pair_blurred(d.D2, eb, c.blur_shape, phi.eval);
        }
        r.estimate1 = p1 / phi.amplitude;
        r.estimate2 = p2 / phi.amplitude;
        r.truth = truth;
        r.recon_error = std::abs(r.estimate1 - r.estimate2 - truth);
        double s1 = pairing_stderr(d.e1, phi.eval), s2 = pairing_stderr(d.e2, phi.eval);
        r.mc_stderr = std::sqrt(s1 * s1 + s2 * s2) / phi.amplitude;
        out.push_back(r);
      }
    }
  }
  sort_records(out);
  return out;
}

SingleScatterCheck single_scatter_check(const ExperimentConfig& c, const Probe& p, double eta,
                                        double kappa)
{
  auto d = single_data(c, p, c.expansion);
  auto phi = sign_test(c.medium1, c.medium2, p.x0, p.v0, eta, kappa);
  const double A = phi.amplitude;
  SingleScatterCheck r;
  r.lip_g = phi.lip_g;
  r.estimate = (d.D1.pair(phi.eval) - d.D2.pair(phi.eval)) / A;
  r.truth = single_scatter_functional(c.medium1, c.medium2, p);
  r.error = std::abs(r.estimate - r.truth);
  double s1 = pairing_stderr(d.e1, phi.eval), s2 = pairing_stderr(d.e2, phi.eval);
  r.mc_stderr = std::sqrt(s1 * s1 + s2 * s2) / A;

  // order one: phi/A is +-1 on the scattering geometry except on the cone
  // |v - v0| < 2 eta and the band |G| < eta (LipG + 1)
  const double L = chord_length(p.x0, p.v0);
  auto att_sup = [&](const Medium& m) { return std::exp(2 * std::max(0.0, -m.sigma_inf()) * 2.0); };
  const double ksum = att_sup(c.medium1) * c.medium1.k_sup() + att_sup(c.medium2) * c.medium2.k_sup();
  const double cone = 4 * std::numbers::pi * eta * eta * L;
  auto depth = composite_gauss(uniform_edges(0, L, 8), 8);
  auto dirs = direction_quadrature(3, 64);
  std::vector<double> band(depth.size(), 0.0);
  const double thr = eta * (phi.lip_g + 1);
  parallel_for(depth.size(), [&](std::size_t i) {
    Vec3 z = p.x0 + p.v0 * depth.nodes[i];
    double s = 0;
    for (std::size_t k = 0; k < dirs.nodes.size(); ++k) {
      const Vec3& v = dirs.nodes[k];
      if (norm(v - p.v0) < 2 * eta) continue;
      double b = dot(v, p.v0);
      double k1 = c.medium1.k(z, p.v0, v), k2 = c.medium2.k(z, p.v0, v);
      if (k1 == 0 && k2 == 0) continue;
      double G = (1 - b * b) * (attenuation_broken(c.medium1, z, p.v0, v) * k1 -
                                attenuation_broken(c.medium2, z, p.v0, v) * k2);
      if (std::abs(G) < thr) s += dirs.weights[k];
    }
    band[i] = depth.weights[i] * s;
  });
  double band_measure = 0;
  for (double b : band) band_measure += b;
  r.loss_term = ksum * (cone + band_measure);

  auto abs_phi = [&](const Vec3& x, const Vec3& v) { return std::abs(phi.eval(x, v)); };
  for (const auto* e : {&d.e1, &d.e2})
    for (std::size_t o = 2; o < e->orders.size(); ++o) r.multiple_term += e->orders[o].pair(abs_phi) / A;
  r.tail_term = d.e1.info.tail_bound + d.e2.info.tail_bound;
  r.noise_term = 3 * r.mc_stderr;
  r.envelope = r.loss_term + r.multiple_term + r.tail_term + r.noise_term;
  return r;
}

NullCheck single_scatter_null(const ExperimentConfig& c, const Probe& p, double eta, double kappa)
{
  if (c.n != 3) throw InvalidDimension("single-scattering extraction needs n = 3");
  auto g = point_source(3, p);
  ExpansionSettings sa = c.expansion, sb = c.expansion;
  sa.seed = c.seed;
  sb.seed = mix64(c.seed + 0x51ed);
  auto ea = expand_albedo(c.medium1, g, sa);
  auto eb = expand_albedo(c.medium1, g, sb);
  auto phi = sign_test(c.medium1, c.medium2, p.x0, p.v0, eta, kappa);
  NullCheck r;
  r.estimate = extract_single_scatter(phi, ea.combined(), eb.combined());
  double s1 = pairing_stderr(ea, phi.eval), s2 = pairing_stderr(eb, phi.eval);
  r.stderr_ = std::sqrt(s1 * s1 + s2 * s2) / phi.amplitude;
  return r;
}

std::vector<StabilityRecord> run_source_error_sweep(const ExperimentConfig& c)
{
  c.validate();
  if (c.mesh_h.empty()) throw ConfigError("source-error sweep needs mesh_h");
  const int n = c.n;
  std::vector<StabilityRecord> out;
  for (std::size_t pi = 0; pi < c.probes.size(); ++pi) {
    const Probe& p = c.probes[pi];
    auto src = psi_source(n, p.x0, p.v0, c.psi_rho);
    const double L = chord_length(p.x0, p.v0);
    const double truth = optical_depth(c.medium1, p.x0, p.v0, L) - optical_depth(c.medium2, p.x0, p.v0, L);
    const Vec3 y0 = exit_point(p.x0, p.v0);
    GridSpec spec;
    spec.has_reference = true;
    spec.ref_x = p.x0;
    spec.ref_v = p.v0;
    for (double h : c.mesh_h) {
      // delta depends on kappa only through the factor kappa h
      auto comb = grid_discretize(src, h, 1.0, spec);
      auto data = [&](const Medium& m) {
        auto all = expand_albedo(m, comb.comb, c.expansion).combined();
        return n == 2 ? detector_bin(all, y0, p.v0, c.bin_first, c.bin_ratio) : all;
      };
      const BoundaryMeasure D1 = data(c.medium1), D2 = data(c.medium2);
      const double mass = comb.comb.total_mass();
      for (double kappa : c.kappas) {
        StabilityRecord r;
        r.sweep = "source";
        r.perturbation = "mesh";
        r.level = h;
        r.probe = pi;
        r.kappa = kappa;
        r.seed = c.seed;
        r.epsilon = 0;
        r.epsilon_method = "exact";
        r.delta = kappa * h;
        r.eta = a_priori_eta(r.epsilon + r.delta, kappa, n - 1, c.bias_constant, c.eta_min,
                             eta_cap_ballistic(kappa));
        auto phi = ballistic_bump(n, p.x0, p.v0, r.eta, kappa);
        try {
          auto x1 = xray_from_pairing(D1.pair(phi.eval), phi, mass);
          auto x2 = xray_from_pairing(D2.pair(phi.eval), phi, mass);
          r.estimate1 = x1.value;
          r.estimate2 = x2.value;
        } catch (const NonPositiveEstimate& err) {
          std::cerr << "skipping flagged sample (mesh " << h << "): " << err.what() << "\n";
          continue;
        }
        r.truth = truth;
        r.recon_error = std::abs(r.estimate1 - r.estimate2 - truth);
        out.push_back(r);
      }
    }
  }
  sort_records(out);
  return out;
}

FitResult fit_exponent(const std::vector<std::pair<double, double>>& pts, bool log_correction)
{
  if (pts.size() < 4) throw NonPositiveData("fit needs at least 4 points");
  std::vector<double> X, Y;
  for (const auto& [x, y] : pts) {
    if (!(x > 0) || !(y > 0) || !std::isfinite(x) || !std::isfinite(y))
      throw NonPositiveData("fit needs positive finite data");
    X.push_back(std::log(x));
    Y.push_back(std::log(log_correction ? corrected(x, y) : y));
  }
  const double N = static_cast<double>(X.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < X.size(); ++i) {
    mx += X[i];
    my += Y[i];
  }
  mx /= N;
  my /= N;
  double sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < X.size(); ++i) {
    sxx += (X[i] - mx) * (X[i] - mx);
    sxy += (X[i] - mx) * (Y[i] - my);
  }
  if (sxx == 0) throw NonPositiveData("fit needs at least two distinct abscissae");
  FitResult f;
  f.slope = sxy / sxx;
  f.intercept = my - f.slope * mx;
  double ss = 0;
  for (std::size_t i = 0; i < X.size(); ++i) {
    double e = Y[i] - f.intercept - f.slope * X[i];
    ss += e * e;
  }
  f.residual = std::sqrt(ss / N);
  f.points = X.size();
  return f;
}

std::vector<std::pair<double, double>> error_points(const std::vector<StabilityRecord>& r,
                                                    const std::string& perturbation)
{
  std::vector<std::pair<double, double>> out;
  for (const auto& s : r) {
    if (!perturbation.empty() && s.perturbation != perturbation) continue;
    double x = (s.epsilon + s.delta) / s.kappa;
    if (x > 0 && s.recon_error > 0) out.emplace_back(x, s.recon_error);
  }
  return out;
}

EtaScalingTable run_eta_scaling(const ExperimentConfig& c)
{
  c.validate();
  if (c.eta_grid.empty()) throw ConfigError("eta scaling needs eta_grid");
  const int n = c.n;
  ExpansionSettings s = c.expansion;
  s.truncation_order = 2;
  s.first_order = 1;
  EtaScalingTable t;
  t.n = n;
  t.theory1 = n - 1;
  t.theory2 = n - 2;
  std::map<double, std::pair<double, double>> mean1, mean2; // eta -> (sum, count)
  for (std::size_t pi = 0; pi < c.probes.size(); ++pi) {
    const Probe& p = c.probes[pi];
    auto e = expand_albedo(c.medium1, point_source(n, p), s);
    for (double eta : c.eta_grid) {
      // bump with unit peak
      auto bump = ballistic_bump(n, p.x0, p.v0, eta, 2.0 / eta);
      EtaScalingRow r1{1, "bump", pi, eta, e.orders[1].pair(bump.eval) / bump.sup, 0};
      r1.stderr_ = e.info.samples[1] ? pairing_stderr(e, bump.eval) / bump.sup : 0.0;
      PhaseField line = [&](const Vec3& x, const Vec3& v) {
        return chi1(line_distance(x, v, p.x0, p.v0) / (2 * eta));
      };
      EtaScalingRow r2{2, "line", pi, eta, e.orders[2].pair(line), 0};
      if (e.info.samples[2]) {
        double a = 0, b = 0;
        for (const auto& at : e.orders[2].atoms) {
          double v = at.mass * line(at.x, at.v);
          a += v;
          b += v * v;
        }
        r2.stderr_ = tally_stderr(a, b, e.info.samples[2]);
      }
      t.rows.push_back(r1);
      t.rows.push_back(r2);
      mean1[eta].first += r1.value;
      mean1[eta].second += 1;
      mean2[eta].first += r2.value;
      mean2[eta].second += 1;
    }
  }
  auto fit = [](const std::map<double, std::pair<double, double>>& m) {
    std::vector<std::pair<double, double>> pts;
    for (const auto& [eta, v] : m) pts.emplace_back(eta, v.first / v.second);
    return fit_exponent(pts, false);
  };
  bool any_scattering = c.medium1.has_scattering();
  if (any_scattering) {
    t.order1 = fit(mean1);
    t.order2 = fit(mean2);
  }
  return t;
}

void write_records_csv(std::ostream& os, const std::vector<StabilityRecord>& rec)
{
  os << "schema_version,sweep,perturbation,level,probe,kappa,epsilon,epsilon_method,delta,eta,"
        "estimate1,estimate2,truth,recon_error,corrected_error,mc_stderr,seed\n";
  for (const auto& r : rec) {
    double x = (r.epsilon + r.delta) / r.kappa;
    os << csv_schema_version << ',' << r.sweep << ',' << r.perturbation << ',' << fmt_double(r.level)
       << ',' << r.probe << ',' << fmt_double(r.kappa) << ',' << fmt_double(r.epsilon) << ','
       << r.epsilon_method << ',' << fmt_double(r.delta) << ',' << fmt_double(r.eta) << ','
       << fmt_double(r.estimate1) << ',' << fmt_double(r.estimate2) << ',' << fmt_double(r.truth)
       << ',' << fmt_double(r.recon_error) << ',' << fmt_double(corrected(x, r.recon_error)) << ','
       << fmt_double(r.mc_stderr) << ',' << r.seed << '\n';
  }
}

void write_records_csv(const std::string& path, const std::vector<StabilityRecord>& r)
{
  std::ofstream os(path);
  if (!os) throw ConfigError("cannot write " + path);
  write_records_csv(os, r);
}

std::vector<StabilityRecord> read_records_csv(const std::string& path)
{
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path);
  std::string line;
  if (!std::getline(in, line) || line.rfind("schema_version,", 0) != 0)
    throw ConfigError(path + ": not a stability CSV");
  std::vector<StabilityRecord> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 17) throw ConfigError(path + ": wrong column count");
    if (std::stoi(f[0]) != csv_schema_version) throw ConfigError(path + ": unsupported schema version");
    StabilityRecord r;
    r.sweep = f[1];
    r.perturbation = f[2];
    r.level = std::stod(f[3]);
    r.probe = std::stoul(f[4]);
    r.kappa = std::stod(f[5]);
    r.epsilon = std::stod(f[6]);
    r.epsilon_method = f[7];
    r.delta = std::stod(f[8]);
    r.eta = std::stod(f[9]);
    r.estimate1 = std::stod(f[10]);
    r.estimate2 = std::stod(f[11]);
    r.truth = std::stod(f[12]);
    r.recon_error = std::stod(f[13]);
    r.mc_stderr = std::stod(f[15]);
    r.seed = std::stoull(f[16]);
    out.push_back(r);
  }
  return out;
}

void write_eta_scaling_csv(std::ostream& os, const EtaScalingTable& t)
{
  os << "schema_version,n,order,test,probe,eta,value,stderr\n";
  for (const auto& r : t.rows)
    os << csv_schema_version << ',' << t.n << ',' << r.order << ',' << r.test << ',' << r.probe << ','
       << fmt_double(r.eta) << ',' << fmt_double(r.value) << ',' << fmt_double(r.stderr_) << '\n';
}

} // namespace itrans
