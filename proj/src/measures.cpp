#include "itrans/measures.h"

#include "itrans/errors.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <array>
#include <map>
#include <numbers>
#include <sstream>

namespace itrans {

using nlohmann::json;
using std::numbers::pi;

BoundaryMeasure BoundaryMeasure::point(int n, const Vec3& x, const Vec3& v, double mass)
{
  BoundaryRay r = make_ray(x, v);
  BoundaryMeasure m(n, r.side);
  m.add(x, v, mass);
  return m;
}

void BoundaryMeasure::append(const BoundaryMeasure& other)
{
  if (other.empty()) return;
  if (other.side != side) throw SideMismatch("cannot merge measures on different sides");
  atoms.insert(atoms.end(), other.atoms.begin(), other.atoms.end());
}

double BoundaryMeasure::total_mass() const
{
  double s = 0;
  for (const auto& a : atoms) s += a.mass;
  return s;
}

double BoundaryMeasure::total_variation() const
{
  double s = 0;
  for (const auto& a : atoms) s += std::abs(a.mass);
  return s;
}

BoundaryMeasure BoundaryMeasure::scaled(double s) const
{
  BoundaryMeasure out = *this;
  for (auto& a : out.atoms) a.mass *= s;
  return out;
}

double BoundaryMeasure::pair(const std::function<double(const Vec3&, const Vec3&)>& phi) const
{
  double s = 0;
  for (const auto& a : atoms)
    if (a.mass != 0) s += a.mass * phi(a.x, a.v);
  return s;
}

namespace {

json vec_json(const Vec3& v, int n)
{
  return n == 2 ? json::array({v.x, v.y}) : json::array({v.x, v.y, v.z});
}

Vec3 json_vec(const json& j)
{
  if (!j.is_array() || j.size() < 2 || j.size() > 3) throw ConfigError("expected a 2- or 3-vector");
  return {j[0].get<double>(), j[1].get<double>(), j.size() == 3 ? j[2].get<double>() : 0.0};
}

} // namespace

json BoundaryMeasure::to_json() const
{
  json atoms_j = json::array();
  for (const auto& a : atoms)
    atoms_j.push_back({{"x", vec_json(a.x, n)}, {"v", vec_json(a.v, n)}, {"mass", a.mass}});
  return {{"dimension", n}, {"side", side_name(side)}, {"atoms", atoms_j}};
}

BoundaryMeasure BoundaryMeasure::from_json(const json& j)
{
  BoundaryMeasure m(j.at("dimension").get<int>(), parse_side(j.at("side").get<std::string>()));
  for (const auto& a : j.at("atoms")) m.add(json_vec(a.at("x")), json_vec(a.at("v")), a.at("mass"));
  return m;
}

BoundaryMeasure difference(const BoundaryMeasure& mu, const BoundaryMeasure& nu)
{
  if (!mu.empty() && !nu.empty() && mu.side != nu.side)
    throw SideMismatch("difference of measures on different sides");
  BoundaryMeasure d = mu;
  if (mu.empty()) d.side = nu.side;
  for (const auto& a : nu.atoms) d.add(a.x, a.v, -a.mass);
  return d;
}

void write_jsonl(std::ostream& os, const BoundaryMeasure& m)
{
  for (const auto& a : m.atoms) {
    json line = {{"side", side_name(m.side)},
                 {"x", vec_json(a.x, m.n)},
                 {"v", vec_json(a.v, m.n)},
                 {"mass", a.mass}};
    os << line.dump() << '\n';
  }
}

BoundaryMeasure read_jsonl(std::istream& is)
{
  BoundaryMeasure m;
  bool first = true;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw ConfigError("measure line " + std::to_string(lineno) + ": " + e.what());
    }
    Side s;
    Vec3 x, v;
    int n = 0;
    double mass = 0;
    try {
      s = parse_side(j.at("side").get<std::string>());
      x = json_vec(j.at("x"));
      v = json_vec(j.at("v"));
      n = static_cast<int>(j.at("x").size());
      mass = j.at("mass").get<double>();
    } catch (const json::exception& e) {
      throw ConfigError("measure line " + std::to_string(lineno) + ": " + e.what());
    }
    if (first) {
      m = BoundaryMeasure(n, s);
      first = false;
    } else if (s != m.side) {
      throw SideMismatch("measure file mixes sides (line " + std::to_string(lineno) + ")");
    } else if (n != m.n) {
      throw ConfigError("measure file mixes dimensions");
    }
    m.add(x, v, mass);
  }
  return m;
}

BoundaryMeasure read_jsonl_file(const std::string& path)
{
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open " + path);
  return read_jsonl(f);
}

void write_jsonl_file(const std::string& path, const BoundaryMeasure& m)
{
  std::ofstream f(path);
  if (!f) throw ConfigError("cannot write " + path);
  f.precision(17);
  write_jsonl(f, m);
}

KernelShape parse_kernel_shape(const std::string& s)
{
  if (s == "tent") return KernelShape::tent;
  if (s == "cross") return KernelShape::cross;
  throw ConfigError("unknown kernel shape '" + s + "'");
}

namespace {

Vec3 exp_map(int n, const Vec3& p, double a, double b)
{
  if (a == 0 && b == 0) return p;
  Frame f = orthogonal_frame(n, p);
  if (n == 2) return geodesic_step(p, f.e1, a);
  Vec3 w = f.e1 * a + f.e2 * b;
  double r = std::sqrt(a * a + b * b);
  return p * std::cos(r) + w * (std::sin(r) / r);
}

// inverse of exp_map on the sphere, coordinates in the same frame
void log_map(int n, const Vec3& p, const Vec3& q, double* a, double* b)
{
  Frame f = orthogonal_frame(n, p);
  if (n == 2) {
    *a = std::atan2(dot(q, f.e1), dot(q, p));
    *b = 0;
    return;
  }
  double th = angle_between(p, q);
  if (th < 1e-15) {
    *a = *b = 0;
    return;
  }
  Vec3 w = normalized(q - p * dot(p, q)) * th;
  *a = dot(w, f.e1);
  *b = dot(w, f.e2);
}

bool valid_side(const Vec3& x, const Vec3& v, Side s)
{
  double c = dot(x, v);
  return s == Side::incoming ? c < 0 : c > 0;
}

struct KernelNode {
  double off[4];
  double w;
};

std::vector<KernelNode> kernel_nodes(int n, double eta, KernelShape shape)
{
  const int dims = 2 * (n - 1);
  std::vector<KernelNode> nodes;
  if (shape == KernelShape::tent) {
    // per-axis offsets eta/dims so the worst corner sits at distance eta
    const double h = eta / dims;
    const double off[3] = {-h, 0, h}, wt[3] = {0.25, 0.5, 0.25};
    int total = 1;
    for (int d = 0; d < dims; ++d) total *= 3;
    for (int c = 0; c < total; ++c) {
      KernelNode k{{0, 0, 0, 0}, 1.0};
      int r = c;
      for (int d = 0; d < dims; ++d) {
        k.off[d] = off[r % 3];
        k.w *= wt[r % 3];
        r /= 3;
      }
      nodes.push_back(k);
    }
  } else {
    nodes.push_back({{0, 0, 0, 0}, 0.5});
    for (int d = 0; d < dims; ++d)
      for (int s : {-1, 1}) {
        KernelNode k{{0, 0, 0, 0}, 0.25 / dims};
        k.off[d] = s * eta / 2;
        nodes.push_back(k);
      }
  }
  return nodes;
}

} // namespace

void offset_ray(int n, const Vec3& x, const Vec3& v, double a, double b, double c, double d,
                Vec3* xo, Vec3* vo)
{
  *xo = exp_map(n, x, a, b);
  *vo = exp_map(n, v, c, d);
}

void blur_atom(int n, Side side, const Atom& a, double eta, KernelShape shape,
               const std::function<void(const Vec3&, const Vec3&, double)>& emit)
{
  if (eta < 0) throw ConfigError("blur width must be nonnegative");
  if (eta == 0) {
    emit(a.x, a.v, a.mass);
    return;
  }
  thread_local std::vector<KernelNode> nodes;
  thread_local double cached_eta = -1;
  thread_local int cached_n = 0;
  thread_local KernelShape cached_shape = KernelShape::tent;
  if (cached_eta != eta || cached_n != n || cached_shape != shape) {
    nodes = kernel_nodes(n, eta, shape);
    cached_eta = eta;
    cached_n = n;
    cached_shape = shape;
  }
  double centre = 0;
  for (const auto& k : nodes) {
    bool is_centre = k.off[0] == 0 && k.off[1] == 0 && k.off[2] == 0 && k.off[3] == 0;
    if (is_centre) {
      centre += a.mass * k.w;
      continue;
    }
    Vec3 x2, v2;
    if (n == 2) offset_ray(n, a.x, a.v, k.off[0], 0, k.off[1], 0, &x2, &v2);
    else offset_ray(n, a.x, a.v, k.off[0], k.off[1], k.off[2], k.off[3], &x2, &v2);
    if (!valid_side(x2, v2, side)) {
      centre += a.mass * k.w;
      continue;
    }
    emit(x2, v2, a.mass * k.w);
  }
  emit(a.x, a.v, centre);
}

BoundaryMeasure blur(const BoundaryMeasure& m, double eta, KernelShape shape)
{
  if (eta < 0) throw ConfigError("blur width must be nonnegative");
  if (eta == 0) return m;
  BoundaryMeasure out(m.n, m.side);
  out.atoms.reserve(m.atoms.size() * (m.n == 2 ? 9 : 81));
  for (const auto& a : m.atoms)
    blur_atom(m.n, m.side, a, eta, shape,
              [&](const Vec3& x, const Vec3& v, double w) { out.add(x, v, w); });
  return out;
}

double blur_plan_cost(const BoundaryMeasure& m, double eta, KernelShape shape, double kappa)
{
  if (eta == 0) return 0;
  const int n = m.n;
  auto nodes = kernel_nodes(n, eta, shape);
  double cost = 0;
  for (const auto& a : m.atoms) {
    double per = 0;
    for (const auto& k : nodes) {
      Vec3 x2, v2;
      if (n == 2) offset_ray(n, a.x, a.v, k.off[0], 0, k.off[1], 0, &x2, &v2);
      else offset_ray(n, a.x, a.v, k.off[0], k.off[1], k.off[2], k.off[3], &x2, &v2);
      if (!valid_side(x2, v2, m.side)) continue;
      per += k.w * std::min(2.0, kappa * ground_distance(a.x, a.v, x2, v2));
    }
    cost += std::abs(a.mass) * per;
  }
  return cost;
}

BoundaryMeasure misalign(const BoundaryMeasure& m, double shift)
{
  if (shift == 0) return m;
  BoundaryMeasure out(m.n, m.side);
  for (const auto& a : m.atoms) {
    Vec3 t;
    if (m.n == 2) {
      t = Vec3{-a.x.y, a.x.x, 0};
    } else {
      Vec3 axis = std::abs(a.x.z) < 0.9 ? Vec3{0, 0, 1} : Vec3{1, 0, 0};
      t = normalized(cross(axis, a.x));
    }
    Vec3 x2 = geodesic_step(a.x, t, shift);
    if (!valid_side(x2, a.v, m.side))
      throw SideViolation("misalignment pushes a ray across the tangent plane");
    out.add(x2, a.v, a.mass);
  }
  return out;
}

DiscretizedSource grid_discretize(const BoundaryMeasure& g, double h, double kappa,
                                  const GridSpec& spec)
{
  if (h <= 0) throw ConfigError("mesh size must be positive");
  for (const auto& a : g.atoms)
    if (a.mass < 0) throw ConfigError("grid_discretize expects a nonnegative source");
  const int n = g.n;
  DiscretizedSource out;
  out.comb = BoundaryMeasure(n, g.side);
  if (g.empty()) {
    out.delta_bound = kappa * h;
    return out;
  }

  Vec3 ref_x = spec.ref_x, ref_v = spec.ref_v;
  if (n == 3 && !spec.has_reference) {
    auto it = std::max_element(g.atoms.begin(), g.atoms.end(),
                               [](const Atom& a, const Atom& b) { return a.mass < b.mass; });
    ref_x = it->x;
    ref_v = it->v;
  }
  // 2D: nodes in absolute (boundary angle, direction angle) at pitch h, so
  // rounding moves each coordinate by at most h/2. 3D: exponential-map
  // coordinates about the reference ray at pitch h/2.
  const double pitch = n == 2 ? h : h / 2;
  auto node_ray = [&](long i, long j, long k, long l, Vec3* x, Vec3* v) {
    double a = (i + spec.phase_a) * pitch, b = (j + spec.phase_b) * pitch;
    if (n == 2) {
      *x = Vec3{std::cos(a), std::sin(a), 0};
      *v = Vec3{std::cos(b), std::sin(b), 0};
    } else {
      double c = (k + spec.phase_a) * pitch, d = (l + spec.phase_b) * pitch;
      *x = exp_map(3, ref_x, a, b);
      *v = exp_map(3, ref_v, c, d);
    }
  };

  std::map<std::array<long, 4>, std::pair<std::size_t, double>> bins;
  std::vector<std::pair<Vec3, Vec3>> rays;
  for (const auto& a : g.atoms) {
    double c[4] = {0, 0, 0, 0};
    if (n == 2) {
      c[0] = std::atan2(a.x.y, a.x.x);
      c[1] = std::atan2(a.v.y, a.v.x);
    } else {
      log_map(3, ref_x, a.x, &c[0], &c[1]);
      log_map(3, ref_v, a.v, &c[2], &c[3]);
    }
    const int dims = n == 2 ? 2 : 4;
    long base[4] = {0, 0, 0, 0};
    for (int d = 0; d < dims; ++d) {
      double ph = (d % 2 == 0) ? spec.phase_a : spec.phase_b;
      base[d] = std::lround(c[d] / pitch - ph);
    }
    // nearest valid node: the rounded one, else the closest valid neighbour
    std::array<long, 4> best{};
    double best_d = 1e300;
    Vec3 bx, bv;
    int span = 0;
    for (int attempt = 0; attempt < 2 && best_d == 1e300; ++attempt, ++span) {
      int lim = span;
      for (int d0 = -lim; d0 <= lim; ++d0)
        for (int d1 = -lim; d1 <= lim; ++d1)
          for (int d2 = (dims == 4 ? -lim : 0); d2 <= (dims == 4 ? lim : 0); ++d2)
            for (int d3 = (dims == 4 ? -lim : 0); d3 <= (dims == 4 ? lim : 0); ++d3) {
              std::array<long, 4> key{base[0] + d0, base[1] + d1, base[2] + d2, base[3] + d3};
              Vec3 x, v;
              node_ray(key[0], key[1], key[2], key[3], &x, &v);
              if (!valid_side(x, v, g.side)) continue;
              double dist = ground_distance(a.x, a.v, x, v);
              if (dist < best_d) {
                best_d = dist;
                best = key;
                bx = x;
                bv = v;
              }
            }
    }
    if (best_d == 1e300) throw SideViolation("no valid grid node near a source atom");
    if (best_d < 1e-12) {
      // already on a node: keep the atom's own coordinates
      bx = a.x;
      bv = a.v;
      best_d = 0;
    }
    out.max_displacement = std::max(out.max_displacement, best_d);
    out.plan_cost += a.mass * std::min(2.0, kappa * best_d);
    auto it = bins.find(best);
    if (it == bins.end()) {
      bins.emplace(best, std::make_pair(rays.size(), a.mass));
      rays.emplace_back(bx, bv);
    } else {
      it->second.second += a.mass;
    }
  }
  std::vector<double> mass(rays.size(), 0.0);
  for (const auto& [key, val] : bins) mass[val.first] = val.second;
  for (std::size_t i = 0; i < rays.size(); ++i) out.comb.add(rays[i].first, rays[i].second, mass[i]);
  out.delta_bound = kappa * std::max(h, out.max_displacement);
  return out;
}

BoundaryMeasure psi_source(int n, const Vec3& x0, const Vec3& v0, double rho)
{
  check_dimension(n);
  if (rho <= 0) throw ConfigError("psi_source needs rho > 0");
  BoundaryRay r0 = make_ray(x0, v0);
  BoundaryMeasure m(n, r0.side);
  double total = 0;
  if (n == 2) {
    for (int i = 0; i < 9; ++i)
      for (int j = 0; j < 9; ++j) {
        double a = rho * (i - 4) / 5.0, c = rho * (j - 4) / 5.0;
        double w = 1 - (std::abs(a) + std::abs(c)) / rho;
        if (w <= 0) continue;
        Vec3 x, v;
        offset_ray(2, x0, v0, a, 0, c, 0, &x, &v);
        if (!valid_side(x, v, r0.side)) continue;
        m.add(x, v, w);
        total += w;
      }
  } else {
    for (int i = 0; i < 5; ++i)
      for (int j = 0; j < 5; ++j)
        for (int k = 0; k < 5; ++k)
          for (int l = 0; l < 5; ++l) {
            double a = rho * (i - 2) / 6.0, b = rho * (j - 2) / 6.0;
            double c = rho * (k - 2) / 6.0, d = rho * (l - 2) / 6.0;
            double w = 1 - (std::hypot(a, b) + std::hypot(c, d)) / rho;
            if (w <= 0) continue;
            Vec3 x, v;
            offset_ray(3, x0, v0, a, b, c, d, &x, &v);
            if (!valid_side(x, v, r0.side)) continue;
            m.add(x, v, w);
            total += w;
          }
  }
  for (auto& a : m.atoms) a.mass /= total;
  return m;
}

} // namespace itrans
