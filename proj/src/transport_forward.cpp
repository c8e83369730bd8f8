#include "itrans/transport_forward.h"

#include "itrans/errors.h"
#include "itrans/parallel.h"
#include "itrans/quadrature.h"
#include "itrans/rng.h"

#include <algorithm>
#include <cmath>
#include <mutex>
#include <numbers>

namespace itrans {

using nlohmann::json;
using std::numbers::pi;

double optical_depth(const Medium& m, const Vec3& x, const Vec3& v, double length)
{
  if (length <= 0) return 0.0;
  double c;
  if (m.sigma_is_constant(&c)) return c * length;
  return integrate_adaptive([&](double s) { return m.sigma(x + v * s, v); }, 0.0, length, 1e-10);
}

double attenuation_E(const Medium& m, const Vec3& x, const Vec3& y)
{
  Vec3 d = y - x;
  double len = norm(d);
  if (len < 1e-12) throw DegenerateSegment("attenuation between coincident points");
  // travel from y to x has direction (x - y)/|x - y|; sigma(x) models ignore it
  Vec3 dir = d / len;
  return std::exp(-optical_depth(m, x, dir, len));
}

double attenuation_broken(const Medium& m, const Vec3& x, const Vec3& v, const Vec3& w)
{
  double back = tau_minus(x, v), fwd = tau_plus(x, w);
  double depth = optical_depth(m, x, -v, back) + optical_depth(m, x, w, fwd);
  return std::exp(-depth);
}

BoundaryMeasure apply_ballistic(const Medium& m, const BoundaryMeasure& g)
{
  BoundaryMeasure out(g.n, Side::outgoing);
  for (const auto& a : g.atoms) {
    double L = tau_plus(a.x, a.v);
    Vec3 y = a.x + a.v * L;
    out.add(y, a.v, a.mass * std::exp(-optical_depth(m, a.x, a.v, L)));
  }
  return out;
}

std::vector<double> radial_crossings(const Vec3& x, const Vec3& v, double tmax,
                                     const std::vector<double>& radii)
{
  std::vector<double> out;
  double b = dot(x, v), x2 = norm2(x);
  for (double r : radii) {
    double disc = b * b - x2 + r * r;
    if (disc <= 0) continue;
    double s = std::sqrt(disc);
    for (double t : {-b - s, -b + s})
      if (t > 0 && t < tmax) out.push_back(t);
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<double> scattering_breakpoints(const Medium& m, const Vec3& x, const Vec3& v,
                                           double tmax)
{
  if (!m.has_scattering() || tmax <= 0) return {};
  double r0 = m.cutoff_margin();
  if (r0 <= 0) return {0.0, tmax};
  double rout = 1 - r0, rin = 1 - 2 * r0;
  double b = dot(x, v), x2 = norm2(x);
  double disc = b * b - x2 + rout * rout;
  if (disc <= 0) return {};
  double s = std::sqrt(disc);
  double lo = std::max(0.0, -b - s), hi = std::min(tmax, -b + s);
  if (hi <= lo) return {};
  std::vector<double> e{lo};
  for (double t : radial_crossings(x, v, tmax, {rin}))
    if (t > lo && t < hi) e.push_back(t);
  e.push_back(hi);
  return e;
}

double single_scatter_integrand(const Medium& m, const Vec3& z0, const Vec3& v0, const Vec3& v1,
                                double t)
{
  Vec3 z = z0 - v0 * t;
  double kv = m.k(z, v1, v0);
  if (kv == 0) return 0.0;
  double back = tau_minus(z, v1);
  double depth = optical_depth(m, z, v0, t) + optical_depth(m, z, -v1, back);
  return std::exp(-depth) * kv;
}

SingleScatterPath single_scatter_connect(const Medium& m, const BoundaryRay& exit,
                                         const BoundaryRay& entry)
{
  if (exit.side != Side::outgoing || entry.side != Side::incoming)
    throw SideViolation("single scattering connects an incoming ray to an outgoing ray");
  // z0 - t v0 = z2 + s v1
  const Vec3 &z0 = exit.x, &v0 = exit.v, &z2 = entry.x, &v1 = entry.v;
  Vec3 w = z0 - z2;
  double c = dot(v0, v1), den = 1 - c * c;
  if (den < 1e-14) throw NoIntersection("parallel exit and entry lines");
  double t = (dot(w, v0) - c * dot(w, v1)) / den;
  double s = (c * dot(w, v0) - dot(w, v1)) / den * -1.0;
  Vec3 p1 = z0 - v0 * t, p2 = z2 + v1 * s;
  if (norm(p1 - p2) > 1e-9) throw NoIntersection("exit and entry lines do not meet");
  if (t < 0 || s < 0 || norm2(p1) > 1 + 1e-12) throw NoIntersection("lines meet outside the domain");
  SingleScatterPath p;
  p.t = t;
  p.s = s;
  p.scatter_point = p1;
  p.value = single_scatter_integrand(m, z0, v0, v1, t);
  return p;
}

double beta2_kernel(const Medium& m, const PhasePoint& out, const PhasePoint& in, double rel_tol)
{
  const int n = m.dimension();
  const Vec3 &x = out.x, &v = out.v, &xp = in.x, &vp = in.v;
  if (norm(x - xp) < 1e-12) throw DegenerateSegment("beta2 at coincident points");
  if (!m.has_scattering()) return 0.0;
  double tm = tau_minus(x, v);
  Vec3 w = x - xp;
  double tstar = dot(w, v);
  double h = norm(w - v * tstar);
  auto smooth = [&](double t) {
    Vec3 z = x - v * t;
    Vec3 d = z - xp;
    double len = norm(d);
    if (len < 1e-14) return 0.0;
    Vec3 v1 = d / len;
    double k1 = m.k(z, v1, v);
    if (k1 == 0) return 0.0;
    double k2 = m.k(xp, vp, v1);
    if (k2 == 0) return 0.0;
    double depth = optical_depth(m, x, -v, t) + optical_depth(m, z, -v1, len);
    return std::exp(-depth) * k1 * k2;
  };
  if (h < 1e-12 && tstar > 0 && tstar < tm)
    throw DegenerateSegment("beta2 line passes through the source point");
  if (h < 1e-12) {
    // source point on the extension of the line: integrand is regular
    auto f = [&](double t) { return smooth(t) / std::pow(std::abs(t - tstar), n - 1); };
    return integrate_adaptive(f, 0, tm, rel_tol);
  }
  // t - t* = h sinh(u) (n=2) or h tan(u) (n=3) cancels |x - t v - x'|^{1-n}
  if (n == 2) {
    double ua = std::asinh((0 - tstar) / h), ub = std::asinh((tm - tstar) / h);
    auto f = [&](double u) { return smooth(tstar + h * std::sinh(u)); };
    // breakpoint at closest approach keeps the panels aligned
    double acc = 0;
    if (ua < 0 && ub > 0) acc = integrate_adaptive(f, ua, 0, rel_tol) + integrate_adaptive(f, 0, ub, rel_tol);
    else acc = integrate_adaptive(f, ua, ub, rel_tol);
    return acc;
  }
  double ua = std::atan((0 - tstar) / h), ub = std::atan((tm - tstar) / h);
  auto f = [&](double u) { return smooth(tstar + h * std::tan(u)); };
  double acc = 0;
  if (ua < 0 && ub > 0) acc = integrate_adaptive(f, ua, 0, rel_tol) + integrate_adaptive(f, 0, ub, rel_tol);
  else acc = integrate_adaptive(f, ua, ub, rel_tol);
  return acc / h;
}

double double_scatter_mass_kernel_route(const Medium& m, const Vec3& xs, const Vec3& vs,
                                        int boundary_resolution)
{
  const int n = m.dimension();
  auto rule = boundary_quadrature(n, Side::outgoing, boundary_resolution);
  double Ls = tau_plus(xs, vs);
  std::vector<double> parts(rule.nodes.size(), 0.0);
  parallel_for(rule.nodes.size(), [&](std::size_t i) {
    const auto& r = rule.nodes[i];
    // source-line parameter where the exit line comes closest: log-type
    // singularity in s there, so panels are graded toward it from both sides
    Vec3 w = r.x - xs;
    double c = dot(r.v, vs), den = 1 - c * c;
    double sstar = den > 1e-12 ? (dot(w, vs) - c * dot(w, r.v)) / den : -1.0;
    std::vector<double> cuts{0.0};
    if (sstar > 0 && sstar < Ls) cuts.push_back(sstar);
    cuts.push_back(Ls);
    double acc = 0;
    for (std::size_t p = 0; p + 1 < cuts.size(); ++p) {
      double a = cuts[p], b = cuts[p + 1], len = b - a;
      bool to_left = p == 1, to_right = p == 0 && cuts.size() == 3;
      std::vector<double> edges;
      if (to_right || to_left) {
        auto g = graded_edges(len, len * 1e-4, 2.0);
        for (double e : g) edges.push_back(to_right ? b - e : a + e);
        std::sort(edges.begin(), edges.end());
      } else {
        edges = uniform_edges(a, b, 4);
      }
      auto q = composite_gauss(edges, 6);
      for (std::size_t k = 0; k < q.size(); ++k) {
        Vec3 z2 = xs + vs * q.nodes[k];
        double e = std::exp(-optical_depth(m, xs, vs, q.nodes[k]));
        double b2 = 0;
        try {
          b2 = beta2_kernel(m, PhasePoint{r.x, r.v}, PhasePoint{z2, vs}, 1e-7);
        } catch (const DegenerateSegment&) {
          b2 = 0;
        }
        acc += q.weights[k] * e * b2;
      }
    }
    parts[i] = rule.weights[i] * acc;
  });
  double total = 0;
  for (double p : parts) total += p;
  return total;
}

// ---------------------------------------------------------------------------
// singular-integral constants

namespace {

// int_0^R dr / |w - r omega|
double inv_distance_ray(const Vec3& w, const Vec3& om, double R)
{
  double a = dot(w, om);
  double b = norm(w - om * a);
  if (b < 1e-300) {
    if (a <= 0) return std::log((R - a) / -a);
    if (a >= R) return std::log(a / (a - R));
    return 1e300;
  }
  return std::asinh((R - a) / b) + std::asinh(a / b);
}

// int_0^R |ln |w - r omega|| dr
double abs_log_ray(const Vec3& w, const Vec3& om, double R)
{
  double a = dot(w, om);
  double b2 = std::max(0.0, norm2(w) - a * a);
  std::vector<double> cuts{0.0};
  if (a > 0 && a < R) cuts.push_back(a);
  if (b2 < 1) {
    double s = std::sqrt(1 - b2);
    for (double t : {a - s, a + s})
      if (t > 0 && t < R) cuts.push_back(t);
  }
  cuts.push_back(R);
  std::sort(cuts.begin(), cuts.end());
  auto f = [&](double r) {
    double d2 = (r - a) * (r - a) + b2;
    return d2 > 0 ? 0.5 * std::abs(std::log(d2)) : 0.0;
  };
  double acc = 0;
  for (std::size_t i = 0; i + 1 < cuts.size(); ++i)
    if (cuts[i + 1] > cuts[i]) acc += integrate_adaptive(f, cuts[i], cuts[i + 1], 1e-7, 12);
  return acc;
}

// int over directions about z of ray(w, omega, tau_+(z, omega))
double direction_integral(int n, const Vec3& z, const Vec3& w,
                          const std::function<double(const Vec3&, const Vec3&, double)>& ray)
{
  Vec3 axis = norm(w) > 0 ? normalized(w) : Vec3{1, 0, 0};
  if (n == 2) {
    auto f = [&](double th) {
      Vec3 om = direction_about(2, axis, th, 0);
      return ray(w, om, tau_plus(z, om));
    };
    return integrate_adaptive(f, -pi, 0, 1e-7, 12) + integrate_adaptive(f, 0, pi, 1e-7, 12);
  }
  Frame fr = orthogonal_frame(3, axis);
  auto outer = [&](double g) {
    double sg = std::sin(g), cg = std::cos(g);
    auto inner = [&](double ph) {
      Vec3 om = axis * cg + (fr.e1 * std::cos(ph) + fr.e2 * std::sin(ph)) * sg;
      return ray(w, om, tau_plus(z, om));
    };
    return sg * integrate_adaptive(inner, 0, 2 * pi, 1e-6, 8);
  };
  return integrate_adaptive(outer, 0, pi, 1e-6, 10);
}

SingularIntegralConstants compute_constants(int n)
{
  SingularIntegralConstants c;
  c.n = n;
  c.A = n == 2 ? 2 * pi : 4 * pi;
  c.Cprime = c.A;
  c.C2 = n == 3 ? pi * pi * pi : 0.0;

  std::vector<std::pair<Vec3, Vec3>> pairs; // (z0, z)
  const double radii[] = {0.0, 0.5, 0.9, 1.0};
  for (double rz : radii)
    for (double r0 : radii)
      for (double ph : {0.0, pi / 2, pi}) {
        Vec3 z{rz, 0, 0}, z0{r0 * std::cos(ph), r0 * std::sin(ph), 0};
        if (norm(z - z0) > 1e-9) pairs.emplace_back(z0, z);
      }
  for (double rz : {0.0, 0.9, 1.0})
    for (double d : {1e-3, 1e-2, 0.1})
      for (const Vec3& e : {Vec3{-1, 0, 0}, Vec3{0, 1, 0}}) {
        Vec3 z{rz, 0, 0}, z0 = z + e * d;
        if (norm(z0) > 1) z0 = normalized(z0);
        pairs.emplace_back(z0, z);
      }

  std::vector<double> f1(pairs.size()), lg(pairs.size());
  parallel_for(pairs.size(), [&](std::size_t i) {
    const auto& [z0, z] = pairs[i];
    Vec3 w = z0 - z;
    f1[i] = direction_integral(n, z, w, inv_distance_ray) + c.Cprime * std::log(norm(w));
    lg[i] = direction_integral(n, z, w, abs_log_ray);
  });
  double cmax = 0, lmax = 0;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    cmax = std::max(cmax, f1[i]);
    lmax = std::max(lmax, lg[i]);
  }
  c.C = c.safety * cmax;
  c.Clog = c.safety * lmax;
  double chain = c.C * c.A + c.Cprime * c.Clog;
  c.Cn2 = n == 2 ? chain : c.C2 * chain;
  return c;
}

} // namespace

const SingularIntegralConstants& singular_integral_constants(int n)
{
  check_dimension(n);
  static std::once_flag once[2];
  static SingularIntegralConstants table[2];
  int i = n - 2;
  std::call_once(once[i], [&] { table[i] = compute_constants(n); });
  return table[i];
}

double kernel_bound_e1(const Medium& m)
{
  const int n = m.dimension();
  double ks = m.k_sup();
  if (ks == 0) return 0.0;
  double tau_sigma_minus = 2.0 * std::max(0.0, -m.sigma_inf());
  return singular_integral_constants(n).Cn2 * std::exp((n + 2) * tau_sigma_minus) *
         std::pow(ks, n + 2);
}

// ---------------------------------------------------------------------------
// sinks

AtomSink::AtomSink(int n, int max_order)
{
  for (int i = 0; i <= max_order; ++i) orders.emplace_back(n, Side::outgoing);
}

void AtomSink::add(int order, const Vec3& x, const Vec3& v, double mass)
{
  orders[order].add(x, v, mass);
}

std::unique_ptr<ExitSink> AtomSink::fork() const
{
  return std::make_unique<AtomSink>(orders.front().n, static_cast<int>(orders.size()) - 1);
}

void AtomSink::merge(ExitSink& part)
{
  auto& p = static_cast<AtomSink&>(part);
  for (std::size_t i = 0; i < orders.size(); ++i) orders[i].append(p.orders[i]);
}

TallySink::TallySink(int max_order, std::vector<Fn> functions) : fns(std::move(functions))
{
  sum.assign(max_order + 1, std::vector<double>(fns.size(), 0.0));
  sum_sq = sum;
  mass.assign(max_order + 1, 0.0);
}

void TallySink::add(int order, const Vec3& x, const Vec3& v, double m)
{
  mass[order] += m;
  for (std::size_t i = 0; i < fns.size(); ++i) {
    double c = m * fns[i](x, v);
    sum[order][i] += c;
    sum_sq[order][i] += c * c;
  }
}

std::unique_ptr<ExitSink> TallySink::fork() const
{
  return std::make_unique<TallySink>(static_cast<int>(mass.size()) - 1, fns);
}

void TallySink::merge(ExitSink& part)
{
  auto& p = static_cast<TallySink&>(part);
  for (std::size_t o = 0; o < mass.size(); ++o) {
    mass[o] += p.mass[o];
    for (std::size_t i = 0; i < fns.size(); ++i) {
      sum[o][i] += p.sum[o][i];
      sum_sq[o][i] += p.sum_sq[o][i];
    }
  }
}

double tally_stderr(double sum, double sum_sq, std::size_t samples)
{
  if (samples == 0) return 0.0;
  return std::sqrt(std::max(0.0, sum_sq - sum * sum / static_cast<double>(samples)));
}

// ---------------------------------------------------------------------------
// settings

json ExpansionSettings::to_json() const
{
  return {{"truncation_order", truncation_order},
          {"t_panels", t_panels},
          {"t_order", t_order},
          {"dir_first", dir_first},
          {"dir_ratio", dir_ratio},
          {"dir_order", dir_order},
          {"azimuth", azimuth},
          {"order2", order2 == Order2Method::quadrature ? "quadrature" : "monte_carlo"},
          {"order2_t", order2_t},
          {"order2_dir", order2_dir},
          {"histories", histories},
          {"seed", seed},
          {"mc_rel_tol", mc_rel_tol},
          {"chunk", chunk},
          {"first_order", first_order},
          {"report_e1", report_e1}};
}

ExpansionSettings ExpansionSettings::from_json(const json& j)
{
  ExpansionSettings s;
  s.truncation_order = j.value("truncation_order", s.truncation_order);
  s.t_panels = j.value("t_panels", s.t_panels);
  s.t_order = j.value("t_order", s.t_order);
  s.dir_first = j.value("dir_first", s.dir_first);
  s.dir_ratio = j.value("dir_ratio", s.dir_ratio);
  s.dir_order = j.value("dir_order", s.dir_order);
  s.azimuth = j.value("azimuth", s.azimuth);
  std::string o2 = j.value("order2", std::string("monte_carlo"));
  if (o2 == "quadrature") s.order2 = Order2Method::quadrature;
  else if (o2 == "monte_carlo") s.order2 = Order2Method::monte_carlo;
  else throw ConfigError("order2 must be 'quadrature' or 'monte_carlo'");
  s.order2_t = j.value("order2_t", s.order2_t);
  s.order2_dir = j.value("order2_dir", s.order2_dir);
  s.histories = j.value("histories", s.histories);
  s.seed = j.value("seed", s.seed);
  s.mc_rel_tol = j.value("mc_rel_tol", s.mc_rel_tol);
  s.chunk = j.value("chunk", s.chunk);
  s.first_order = j.value("first_order", s.first_order);
  s.report_e1 = j.value("report_e1", s.report_e1);
  if (s.histories < 1 || s.chunk < 1) throw ConfigError("histories and chunk must be positive");
  return s;
}

// ---------------------------------------------------------------------------
// expansion engine

namespace {

struct DirNode {
  Vec3 v;
  double w;
};

// directions graded in angle about the axis
std::vector<DirNode> graded_directions(int n, const Vec3& axis, const ExpansionSettings& s)
{
  auto edges = graded_edges(pi, s.dir_first, s.dir_ratio);
  auto th = composite_gauss(edges, s.dir_order);
  std::vector<DirNode> out;
  if (n == 2) {
    for (std::size_t i = 0; i < th.size(); ++i)
      for (int sg : {-1, 1}) out.push_back({direction_about(2, axis, sg * th.nodes[i], 0), th.weights[i]});
    return out;
  }
  double dphi = 2 * pi / s.azimuth;
  for (std::size_t i = 0; i < th.size(); ++i)
    for (int j = 0; j < s.azimuth; ++j)
      out.push_back({direction_about(3, axis, th.nodes[i], (j + 0.5) * dphi),
                     th.weights[i] * std::sin(th.nodes[i]) * dphi});
  return out;
}

Rule1D depth_rule(const std::vector<double>& edges, int core_panels, int order)
{
  // the core segment (longest) gets core_panels panels, transition zones one
  Rule1D r;
  if (edges.size() < 2) return r;
  std::size_t longest = 0;
  for (std::size_t i = 0; i + 1 < edges.size(); ++i)
    if (edges[i + 1] - edges[i] > edges[longest + 1] - edges[longest]) longest = i;
  for (std::size_t i = 0; i + 1 < edges.size(); ++i) {
    int panels = i == longest ? core_panels : 1;
    auto q = composite_gauss(uniform_edges(edges[i], edges[i + 1], panels), order);
    r.nodes.insert(r.nodes.end(), q.nodes.begin(), q.nodes.end());
    r.weights.insert(r.weights.end(), q.weights.begin(), q.weights.end());
  }
  return r;
}

struct Work {
  std::function<void(ExitSink&)> run;
};

void run_chunks(const std::vector<Work>& work, ExitSink& sink)
{
  std::vector<std::unique_ptr<ExitSink>> parts(work.size());
  parallel_for(work.size(), [&](std::size_t i) {
    parts[i] = sink.fork();
    work[i].run(*parts[i]);
  });
  for (auto& p : parts) sink.merge(*p);
}

} // namespace

ExpansionInfo expand_albedo_into(const Medium& m, const BoundaryMeasure& g,
                                 const ExpansionSettings& s, ExitSink& sink)
{
  const int n = m.dimension();
  if (g.n != n) throw ConfigError("source dimension does not match the medium");
  if (!g.empty() && g.side != Side::incoming) throw SideViolation("sources live on Gamma_-");
  const int M = s.truncation_order < 0 ? n + 1 : s.truncation_order;

  ExpansionInfo info;
  info.truncation_order = M;
  info.seed = s.seed;
  info.samples.assign(M + 1, 0);
  for (const auto& a : g.atoms) info.input_mass += std::abs(a.mass);
  const bool scattering = m.has_scattering();
  if (scattering) {
    auto cert = certify(m, 20000);
    info.q = cert.q;
    info.tail_bound = info.input_mass * std::pow(info.q, M + 1) / (1 - info.q);
    if (s.report_e1) info.e1_bound = kernel_bound_e1(m);
  }

  // order 0
  if (s.first_order <= 0) {
    BoundaryMeasure b = apply_ballistic(m, g);
    for (const auto& a : b.atoms) sink.add(0, a.x, a.v, a.mass);
  }
  if (!scattering || M < 1) return info;
  const double vmeasure = Domain(n).sphere_measure();

  // order 1: deterministic quadrature over (depth, direction)
  if (s.first_order <= 1) {
    std::vector<Work> work;
    for (const auto& a : g.atoms) {
      double L = tau_plus(a.x, a.v);
      auto edges = scattering_breakpoints(m, a.x, a.v, L);
      auto tr = depth_rule(edges, s.t_panels, s.t_order);
      auto dirs = std::make_shared<std::vector<DirNode>>(graded_directions(n, a.v, s));
      for (std::size_t it = 0; it < tr.size(); ++it) {
        double t = tr.nodes[it], wt = tr.weights[it];
        Atom src = a;
        work.push_back({[&m, src, t, wt, dirs](ExitSink& out) {
          Vec3 z = src.x + src.v * t;
          double ein = std::exp(-optical_depth(m, src.x, src.v, t));
          for (const auto& d : *dirs) {
            double kv = m.k(z, src.v, d.v);
            if (kv == 0) continue;
            double L2 = tau_plus(z, d.v);
            double eout = std::exp(-optical_depth(m, z, d.v, L2));
            out.add(1, z + d.v * L2, d.v, src.mass * wt * d.w * ein * kv * eout);
          }
        }});
      }
    }
    run_chunks(work, sink);
  }

  int mc_from = 2;
  if (M >= 2 && s.order2 == Order2Method::quadrature && n == 2) {
    mc_from = 3;
    if (s.first_order <= 2) {
      std::vector<Work> work;
      int panels = std::max(1, s.order2_dir / 8);
      auto ang = composite_gauss(uniform_edges(0, 2 * pi, panels), 8);
      for (const auto& a : g.atoms) {
        double L = tau_plus(a.x, a.v);
        auto edges = scattering_breakpoints(m, a.x, a.v, L);
        auto t1 = depth_rule(edges, 1, s.order2_t);
        for (std::size_t i1 = 0; i1 < t1.size(); ++i1) {
          Atom src = a;
          double t = t1.nodes[i1], wt = t1.weights[i1];
          work.push_back({[&m, &s, src, t, wt, ang](ExitSink& out) {
            Vec3 z1 = src.x + src.v * t;
            double e1 = std::exp(-optical_depth(m, src.x, src.v, t));
            for (std::size_t b1 = 0; b1 < ang.size(); ++b1) {
              Vec3 v1{std::cos(ang.nodes[b1]), std::sin(ang.nodes[b1]), 0};
              double k1 = m.k(z1, src.v, v1);
              if (k1 == 0) continue;
              double L1 = tau_plus(z1, v1);
              auto t2 = depth_rule(scattering_breakpoints(m, z1, v1, L1), 1, s.order2_t);
              for (std::size_t i2 = 0; i2 < t2.size(); ++i2) {
                Vec3 z2 = z1 + v1 * t2.nodes[i2];
                double e2 = std::exp(-optical_depth(m, z1, v1, t2.nodes[i2]));
                double pre = src.mass * wt * ang.weights[b1] * e1 * k1 * t2.weights[i2] * e2;
                for (std::size_t b2 = 0; b2 < ang.size(); ++b2) {
                  Vec3 v2{std::cos(ang.nodes[b2]), std::sin(ang.nodes[b2]), 0};
                  double k2 = m.k(z2, v1, v2);
                  if (k2 == 0) continue;
                  double L2 = tau_plus(z2, v2);
                  double e3 = std::exp(-optical_depth(m, z2, v2, L2));
                  out.add(2, z2 + v2 * L2, v2, pre * ang.weights[b2] * k2 * e3);
                }
              }
            }
          }});
        }
      }
      run_chunks(work, sink);
    }
  }

  // remaining orders: stratified Monte Carlo over source, depths, directions
  std::vector<double> cdf;
  double total = 0;
  for (const auto& a : g.atoms) {
    total += std::abs(a.mass);
    cdf.push_back(total);
  }
  if (total == 0) return info;
  const std::size_t N = s.histories;
  for (int order = std::max(mc_from, s.first_order); order <= M; ++order) {
    info.samples[order] = N;
    std::vector<Work> work;
    for (std::size_t c0 = 0; c0 < N; c0 += s.chunk) {
      std::size_t c1 = std::min(N, c0 + s.chunk);
      work.push_back({[&, order, c0, c1](ExitSink& out) {
        for (std::size_t i = c0; i < c1; ++i) {
          auto u = [&](int d) {
            return stratified01(s.seed, static_cast<std::uint64_t>(order), static_cast<std::uint32_t>(i),
                                static_cast<std::uint32_t>(N), d);
          };
          std::size_t pick = 0;
          if (g.size() > 1) {
            double target = u(0) * total;
            pick = std::upper_bound(cdf.begin(), cdf.end(), target) - cdf.begin();
            if (pick >= g.size()) pick = g.size() - 1;
          }
          const Atom& src = g.atoms[pick];
          double w = total * (src.mass < 0 ? -1.0 : 1.0);
          Vec3 z = src.x, dir = src.v;
          for (int c = 1; c <= order && w != 0; ++c) {
            int d0 = 1 + (c - 1) * n;
            double L = tau_plus(z, dir);
            auto e = scattering_breakpoints(m, z, dir, L);
            if (e.empty()) {
              w = 0;
              break;
            }
            double lo = e.front(), hi = e.back();
            double t = lo + u(d0) * (hi - lo);
            w *= (hi - lo) * std::exp(-optical_depth(m, z, dir, t));
            Vec3 zn = z + dir * t;
            Vec3 nd = uniform_direction(n, u(d0 + 1), n == 3 ? u(d0 + 2) : 0.0);
            w *= vmeasure * m.k(zn, dir, nd);
            z = zn;
            dir = nd;
          }
          if (w == 0) continue;
          double L = tau_plus(z, dir);
          w *= std::exp(-optical_depth(m, z, dir, L));
          out.add(order, z + dir * L, dir, w / static_cast<double>(N));
        }
      }});
    }
    run_chunks(work, sink);
  }
  return info;
}

double CollisionExpansion::order_mass(int m) const
{
  return m < static_cast<int>(orders.size()) ? orders[m].total_mass() : 0.0;
}

double CollisionExpansion::total_mass() const
{
  double s = 0;
  for (const auto& o : orders) s += o.total_mass();
  return s;
}

double CollisionExpansion::order_mass_stderr(int m) const
{
  if (m >= static_cast<int>(orders.size()) || info.samples[m] == 0) return 0.0;
  double s = 0, s2 = 0;
  for (const auto& a : orders[m].atoms) {
    s += a.mass;
    s2 += a.mass * a.mass;
  }
  return tally_stderr(s, s2, info.samples[m]);
}

BoundaryMeasure CollisionExpansion::combined() const
{
  BoundaryMeasure out(n, Side::outgoing);
  for (const auto& o : orders) out.append(o);
  return out;
}

json CollisionExpansion::to_json() const
{
  json ord = json::array();
  for (std::size_t i = 0; i < orders.size(); ++i) {
    json j = orders[i].to_json();
    j["order"] = i;
    j["monte_carlo_samples"] = info.samples[i];
    ord.push_back(j);
  }
  return {{"dimension", n},
          {"truncation_order", info.truncation_order},
          {"tail_bound", info.tail_bound},
          {"series_ratio", info.q},
          {"input_mass", info.input_mass},
          {"e1_bound", info.e1_bound},
          {"seed", info.seed},
          {"orders", ord}};
}

CollisionExpansion expand_albedo(const Medium& m, const BoundaryMeasure& g, const ExpansionSettings& s)
{
  const int M = s.truncation_order < 0 ? m.dimension() + 1 : s.truncation_order;
  AtomSink sink(m.dimension(), M);
  CollisionExpansion e;
  e.n = m.dimension();
  e.info = expand_albedo_into(m, g, s, sink);
  e.orders = std::move(sink.orders);
  if (s.mc_rel_tol > 0) {
    for (int o = 0; o <= M; ++o) {
      double mass = e.order_mass(o), se = e.order_mass_stderr(o);
      if (e.info.samples[o] > 0 && mass > 0 && se / mass > s.mc_rel_tol)
        throw BudgetExceeded("order " + std::to_string(o) + " relative error " +
                             std::to_string(se / mass));
    }
  }
  return e;
}

} // namespace itrans
