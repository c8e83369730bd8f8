#include "itrans/inversion.h"

#include "itrans/errors.h"
#include "itrans/parallel.h"
#include "itrans/rng.h"
#include "itrans/transport_forward.h"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <sstream>

namespace itrans {

using nlohmann::json;
using std::numbers::pi;

double chi1(double t)
{
  if (t <= 1) return 1.0;
  if (t >= 2) return 0.0;
  return 2 - t;
}

double chi2(double t)
{
  return std::clamp(t, -1.0, 1.0);
}

json TestFunction::descriptor() const
{
  auto vj = [&](const Vec3& a) {
    return n == 2 ? json::array({a.x, a.y}) : json::array({a.x, a.y, a.z});
  };
  return {{"kind", kind},     {"x0", vj(center.x)}, {"v0", vj(center.v)}, {"eta", eta},
          {"kappa", kappa},   {"sup", sup},         {"amplitude", amplitude},
          {"lip_g", lip_g}};
}

namespace {

bool on_side(const Vec3& x, const Vec3& v, Side s)
{
  double c = dot(x, v);
  return s == Side::outgoing ? c > 0 : c < 0;
}

// ray near `a` at ground distance up to `scale`, or `a` itself if the move
// leaves Gamma_+
BoundaryRay nearby(int n, const BoundaryRay& a, double scale, std::uint64_t seed, std::uint64_t i,
                   int dim0)
{
  auto u = [&](int d) { return 2 * uniform01(seed, 23, i, dim0 + d) - 1; };
  double r = scale * 0.5 * (u(0) + 1);
  double a1 = u(1), b1 = n == 3 ? u(2) : 0.0, c1 = u(3), d1 = n == 3 ? u(4) : 0.0;
  double len = std::hypot(a1, b1) + std::hypot(c1, d1);
  if (len < 1e-12) return a;
  double s = r / len;
  Vec3 xo, vo;
  offset_ray(n, a.x, a.v, a1 * s, b1 * s, c1 * s, d1 * s, &xo, &vo);
  if (!on_side(xo, vo, a.side)) return a;
  return BoundaryRay{xo, vo, a.side, 1.0};
}

} // namespace

TestFunctionCertificate certify_test_function(const TestFunction& f, int pairs, std::uint64_t seed)
{
  std::vector<double> sup(pairs, 0.0), lip(pairs, 0.0);
  const double scale = std::max(f.eta, 1e-3);
  parallel_for(pairs, [&](std::size_t i) {
    auto u = [&](int d) { return uniform01(seed, 29, i, d); };
    BoundaryRay a = f.support_sampler({u(0), u(1), u(2), u(3)});
    a = nearby(f.n, a, 2 * scale, seed, i, 8);
    // half the partners are close (local slope), half at the kernel scale
    double s2 = i % 2 == 0 ? scale * 0.05 : scale;
    BoundaryRay b = nearby(f.n, a, s2, seed, i, 16);
    double fa = f(a.x, a.v), fb = f(b.x, b.v);
    sup[i] = std::max(std::abs(fa), std::abs(fb));
    double d = ground_distance(a, b);
    if (d > 1e-12) lip[i] = std::abs(fa - fb) / d;
  });
  TestFunctionCertificate c;
  for (int i = 0; i < pairs; ++i) {
    c.sup_sampled = std::max(c.sup_sampled, sup[i]);
    c.lip_sampled = std::max(c.lip_sampled, lip[i]);
  }
  c.ok = c.sup_sampled <= 1.0 && c.lip_sampled <= f.kappa * (1 + 1e-6);
  return c;
}

TestFunction ballistic_bump(int n, const Vec3& x0, const Vec3& v0, double eta, double kappa)
{
  check_dimension(n);
  if (!(eta > 0 && eta < 2)) throw ConfigError("bump width must lie in (0, 2)");
  if (kappa < 1) throw ConfigError("kappa must be at least 1");
  BoundaryRay c = make_ray(x0, v0, Side::incoming);
  TestFunction f;
  f.n = n;
  f.kind = "ballistic_bump";
  f.kappa = kappa;
  f.eta = eta;
  f.center = c;
  f.exit_x = exit_point(c.x, c.v);
  f.sup = std::min(1.0, kappa * eta / 2);
  f.amplitude = f.sup;
  const Vec3 y0 = f.exit_x, w0 = c.v;
  const double amp = f.sup;
  f.eval = [y0, w0, amp, eta](const Vec3& x, const Vec3& v) {
    double d = std::max(angle_between(x, y0), angle_between(v, w0));
    return amp * std::max(0.0, 1 - 2 * d / eta);
  };
  f.support_sampler = [n, y0, w0, eta](const std::array<double, 4>& u) {
    Vec3 xo, vo;
    double a = eta * (u[0] - 0.5), b = n == 3 ? eta * (u[1] - 0.5) : 0.0;
    double cc = eta * (u[2] - 0.5), d = n == 3 ? eta * (u[3] - 0.5) : 0.0;
    offset_ray(n, y0, w0, a, b, cc, d, &xo, &vo);
    if (!on_side(xo, vo, Side::outgoing)) return BoundaryRay{y0, w0, Side::outgoing, 1.0};
    return BoundaryRay{xo, vo, Side::outgoing, 1.0};
  };
  return f;
}

double sign_test_g(const Medium& m1, const Medium& m2, const Vec3& x0, const Vec3& v0,
                   const Vec3& x, const Vec3& v)
{
  double b = dot(v0, v);
  double f = 1 - b * b;
  if (f < 1e-8) return 0.0;
  Vec3 w = x0 - x;
  double t = (b * dot(v, w) - dot(v0, w)) / f;
  double L = chord_length(x0, v0);
  t = std::clamp(t, 0.0, L);
  Vec3 z = x0 + v0 * t;
  if (norm2(z) > 1) z = normalized(z);
  double k1 = m1.k(z, v0, v), k2 = m2.k(z, v0, v);
  if (k1 == 0 && k2 == 0) return 0.0;
  double e1 = k1 == 0 ? 0.0 : attenuation_broken(m1, z, v0, v) * k1;
  double e2 = k2 == 0 ? 0.0 : attenuation_broken(m2, z, v0, v) * k2;
  return f * (e1 - e2);
}

double line_distance(const Vec3& x, const Vec3& v, const Vec3& x0, const Vec3& v0)
{
  Vec3 w = x - x0;
  auto dist = [&](double t, double s) { return norm(w - v * t + v0 * s); };
  double b = dot(v, v0), det = 1 - b * b;
  double vw = dot(v, w), v0w = dot(v0, w);
  if (det > 1e-12) {
    double t = (vw - b * v0w) / det, s = (b * vw - v0w) / det;
    if (std::abs(t) <= 2 && std::abs(s) <= 2) return dist(t, s);
  }
  double best = std::numeric_limits<double>::infinity();
  for (double t : {-2.0, 2.0}) {
    double s = std::clamp(-dot(v0, w - v * t), -2.0, 2.0);
    best = std::min(best, dist(t, s));
  }
  for (double s : {-2.0, 2.0}) {
    double t = std::clamp(dot(v, w + v0 * s), -2.0, 2.0);
    best = std::min(best, dist(t, s));
  }
  return best;
}

TestFunction sign_test(const Medium& m1, const Medium& m2, const Vec3& x0, const Vec3& v0,
                       double eta, double kappa, int lip_pairs, std::uint64_t seed)
{
  if (m1.dimension() != 3 || m2.dimension() != 3)
    throw InvalidDimension("the sign test is built in three dimensions");
  if (kappa < 1) throw ConfigError("kappa must be at least 1");
  if (!(eta > 0 && eta < std::min(2.0, 1.0 / kappa)))
    throw ConfigError("sign test width must lie in (0, min(2, 1/kappa))");
  BoundaryRay c = make_ray(x0, v0, Side::incoming);
  const double L = chord_length(c.x, c.v);
  TestFunction f;
  f.n = 3;
  f.kind = "sign_test";
  f.kappa = kappa;
  f.eta = eta;
  f.center = c;
  f.exit_x = exit_point(c.x, c.v);
  f.amplitude = kappa * eta / 3;
  f.sup = f.amplitude;
  const Vec3 px = c.x, pv = c.v;
  // rays whose line meets the probing chord
  f.support_sampler = [px, pv, L](const std::array<double, 4>& u) {
    Vec3 z = px + pv * (L * (0.02 + 0.96 * u[0]));
    Vec3 v = uniform_direction(3, u[1], u[2]);
    if (u[3] < 0.25) v = normalized(pv + v * (0.2 * u[3]));
    return BoundaryRay{exit_point(z, v), v, Side::outgoing, 1.0};
  };

  // Lip(G) by sampling pairs around the support, with a 1.2 safety factor
  std::vector<double> q(lip_pairs, 0.0);
  parallel_for(lip_pairs, [&](std::size_t i) {
    auto u = [&](int d) { return uniform01(seed, 31, i, d); };
    BoundaryRay a = f.support_sampler({u(0), u(1), u(2), u(3)});
    a = nearby(3, a, 4 * eta, seed, i, 8);
    BoundaryRay b = nearby(3, a, i % 2 == 0 ? 0.01 : 0.1, seed, i, 16);
    double d = ground_distance(a, b);
    if (d < 1e-12) return;
    q[i] = std::abs(sign_test_g(m1, m2, px, pv, a.x, a.v) - sign_test_g(m1, m2, px, pv, b.x, b.v)) / d;
  });
  f.lip_g = 1.2 * *std::max_element(q.begin(), q.end());
  const double lg = f.lip_g, amp = f.amplitude;
  f.eval = [m1, m2, px, pv, eta, lg, amp](const Vec3& x, const Vec3& v) {
    double cv = 1 - chi1(norm(v - pv) / eta);
    if (cv == 0) return 0.0;
    double cd = chi1(line_distance(x, v, px, pv) / (2 * eta));
    if (cd == 0) return 0.0;
    double g = sign_test_g(m1, m2, px, pv, x, v);
    if (g == 0) return 0.0;
    return amp * chi2(g / (eta * (lg + 1))) * cd * cv;
  };
  return f;
}

json XRaySample::to_json() const
{
  return {{"x0", {x0.x, x0.y, x0.z}}, {"v0", {v0.x, v0.y, v0.z}}, {"value", value},
          {"estimate", estimate}};
}

XRaySample xray_from_pairing(double pairing, const TestFunction& phi, double source_mass)
{
  if (!(source_mass > 0)) throw ConfigError("source mass must be positive");
  double e = pairing / (phi.sup * source_mass);
  if (!(e > 0)) throw NonPositiveEstimate("<phi, data> = " + std::to_string(pairing));
  XRaySample s;
  s.x0 = phi.center.x;
  s.v0 = phi.center.v;
  s.estimate = e;
  s.value = std::max(0.0, -std::log(e));
  return s;
}

XRaySample extract_xray(const BoundaryMeasure& data, const Vec3& x0, const Vec3& v0, double eta,
                        double kappa, double source_mass)
{
  TestFunction phi = ballistic_bump(data.n, x0, v0, eta, kappa);
  return xray_from_pairing(data.pair(phi.eval), phi, source_mass);
}

double extract_single_scatter(const TestFunction& phi, const BoundaryMeasure& data1,
                              const BoundaryMeasure& data2)
{
  if (phi.n != 3) throw InvalidDimension("single-scattering extraction is three-dimensional");
  if (phi.amplitude <= 0) throw ConfigError("test function has zero amplitude");
  return (data1.pair(phi.eval) - data2.pair(phi.eval)) / phi.amplitude;
}

double extract_single_scatter(const Medium& m1, const Medium& m2, const BoundaryMeasure& data1,
                              const BoundaryMeasure& data2, const Vec3& x0, const Vec3& v0,
                              double eta, double kappa)
{
  if (data1.n != 3 || data2.n != 3) throw InvalidDimension("single-scattering extraction is three-dimensional");
  return extract_single_scatter(sign_test(m1, m2, x0, v0, eta, kappa), data1, data2);
}

// ---------------------------------------------------------------------------

Sinogram::Sinogram(int na, int no) : angles(na), offsets(no)
{
  if (na < 1 || no < 2) throw ConfigError("sinogram needs at least one angle and two offsets");
  values.assign(static_cast<std::size_t>(na) * no, std::numeric_limits<double>::quiet_NaN());
}

double Sinogram::angle(int a) const
{
  return pi * a / angles;
}

double Sinogram::offset(int j) const
{
  return -1 + (j + 0.5) * spacing();
}

void Sinogram::ray(int a, int j, Vec3* x0, Vec3* v0) const
{
  double th = angle(a), s = offset(j);
  Vec3 nrm{std::cos(th), std::sin(th), 0};
  Vec3 v{-std::sin(th), std::cos(th), 0};
  *x0 = nrm * s - v * std::sqrt(std::max(0.0, 1 - s * s));
  *v0 = v;
}

void Sinogram::check_complete() const
{
  if (angles < 1 || offsets < 2 || values.size() != static_cast<std::size_t>(angles) * offsets)
    throw IncompleteSinogram("sinogram grid is empty or malformed");
  for (std::size_t i = 0; i < values.size(); ++i)
    if (!std::isfinite(values[i]))
      throw IncompleteSinogram("missing or non-finite entry at angle " +
                               std::to_string(i / offsets) + ", offset " +
                               std::to_string(i % offsets));
}

Sinogram make_sinogram(int angles, int offsets,
                       const std::function<double(const Vec3&, const Vec3&)>& value)
{
  Sinogram s(angles, offsets);
  parallel_for(static_cast<std::size_t>(angles) * offsets, [&](std::size_t i) {
    int a = static_cast<int>(i / offsets), j = static_cast<int>(i % offsets);
    Vec3 x0, v0;
    s.ray(a, j, &x0, &v0);
    s.values[i] = value(x0, v0);
  });
  return s;
}

Sinogram sinogram_of_medium(const Medium& m, int angles, int offsets)
{
  if (m.dimension() != 2) throw InvalidDimension("sinograms are two-dimensional");
  return make_sinogram(angles, offsets, [&](const Vec3& x0, const Vec3& v0) {
    return optical_depth(m, x0, v0, chord_length(x0, v0));
  });
}

void write_sinogram_csv(const std::string& path, const Sinogram& s)
{
  std::ofstream os(path);
  if (!os) throw ConfigError("cannot write " + path);
  os << "angle_index,offset_index,angle_rad,offset,value\n";
  os.precision(17);
  for (int a = 0; a < s.angles; ++a)
    for (int j = 0; j < s.offsets; ++j)
      os << a << ',' << j << ',' << s.angle(a) << ',' << s.offset(j) << ',' << s.at(a, j) << '\n';
}

Sinogram read_sinogram_csv(const std::string& path)
{
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read " + path);
  std::string line;
  std::getline(is, line);
  if (line.rfind("angle_index,offset_index", 0) != 0) throw ConfigError("unexpected sinogram header");
  struct Row {
    int a, j;
    double v;
  };
  std::vector<Row> rows;
  int na = 0, no = 0;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string f[5];
    for (auto& x : f)
      if (!std::getline(ss, x, ',')) throw ConfigError("malformed sinogram row: " + line);
    Row r{std::stoi(f[0]), std::stoi(f[1]), 0};
    try {
      r.v = std::stod(f[4]);
    } catch (...) {
      r.v = std::numeric_limits<double>::quiet_NaN();
    }
    if (r.a < 0 || r.j < 0) throw ConfigError("negative sinogram index");
    na = std::max(na, r.a + 1);
    no = std::max(no, r.j + 1);
    rows.push_back(r);
  }
  if (na == 0) throw IncompleteSinogram("sinogram has no rows");
  Sinogram s(na, std::max(no, 2));
  for (const auto& r : rows) s.at(r.a, r.j) = r.v;
  s.check_complete();
  return s;
}

Vec3 Image::pixel_center(int i, int j) const
{
  return {-1 + (j + 0.5) * pitch, -1 + (i + 0.5) * pitch, 0};
}

Image fbp_invert(const Sinogram& s, int image_size, double window_cutoff)
{
  s.check_complete();
  if (image_size < 2) throw ConfigError("image size must be at least 2");
  if (!(window_cutoff > 0)) throw ConfigError("window cutoff must be positive");
  const int N = s.offsets;
  int P = 1;
  while (P < 2 * N) P <<= 1;
  const double ds = s.spacing();

  // spatial Ram-Lak kernel, circularly wrapped
  std::vector<double> h(P, 0.0);
  for (int k = -P / 2; k < P / 2; ++k) {
    double val = 0;
    if (k == 0) val = 1 / (4 * ds * ds);
    else if (k % 2 != 0) val = -1 / (pi * pi * k * k * ds * ds);
    h[(k + P) % P] = val;
  }
  const int F = P / 2 + 1;
  std::vector<fftw_complex> H(F), buf(F);
  std::vector<double> in(P);
  fftw_plan fwd = fftw_plan_dft_r2c_1d(P, in.data(), buf.data(), FFTW_ESTIMATE);
  fftw_plan inv = fftw_plan_dft_c2r_1d(P, buf.data(), in.data(), FFTW_ESTIMATE);
  std::copy(h.begin(), h.end(), in.begin());
  fftw_execute(fwd);
  for (int f = 0; f < F; ++f) {
    double w = std::cos(std::min(0.5 * pi, pi * f / (P * window_cutoff)));
    H[f][0] = buf[f][0] * w;
    H[f][1] = buf[f][1] * w;
  }
  std::vector<double> filtered(static_cast<std::size_t>(s.angles) * N);
  for (int a = 0; a < s.angles; ++a) {
    std::fill(in.begin(), in.end(), 0.0);
    for (int j = 0; j < N; ++j) in[j] = s.at(a, j);
    fftw_execute(fwd);
    for (int f = 0; f < F; ++f) {
      double re = buf[f][0] * H[f][0] - buf[f][1] * H[f][1];
      double im = buf[f][0] * H[f][1] + buf[f][1] * H[f][0];
      buf[f][0] = re;
      buf[f][1] = im;
    }
    fftw_execute(inv);
    for (int j = 0; j < N; ++j) filtered[static_cast<std::size_t>(a) * N + j] = in[j] * ds / P;
  }
  fftw_destroy_plan(fwd);
  fftw_destroy_plan(inv);

  Image img;
  img.size = image_size;
  img.pitch = 2.0 / image_size;
  img.values.assign(static_cast<std::size_t>(image_size) * image_size, 0.0);
  std::vector<double> cs(s.angles), sn(s.angles);
  for (int a = 0; a < s.angles; ++a) {
    cs[a] = std::cos(s.angle(a));
    sn[a] = std::sin(s.angle(a));
  }
  const double s0 = s.offset(0);
  parallel_for(image_size, [&](std::size_t i) {
    for (int j = 0; j < image_size; ++j) {
      Vec3 p = img.pixel_center(static_cast<int>(i), j);
      if (norm2(p) > 1) continue;
      double acc = 0;
      for (int a = 0; a < s.angles; ++a) {
        double t = (p.x * cs[a] + p.y * sn[a] - s0) / ds;
        int k = static_cast<int>(std::floor(t));
        double w = t - k;
        const double* q = &filtered[static_cast<std::size_t>(a) * N];
        double lo = k >= 0 && k < N ? q[k] : 0.0;
        double hi = k + 1 >= 0 && k + 1 < N ? q[k + 1] : 0.0;
        acc += (1 - w) * lo + w * hi;
      }
      img.values[i * image_size + j] = acc * pi / s.angles;
    }
  });
  return img;
}

void write_image(const std::string& path, const Image& img)
{
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ConfigError("cannot write " + path);
  os.write(reinterpret_cast<const char*>(img.values.data()),
           static_cast<std::streamsize>(img.values.size() * sizeof(double)));
  std::ofstream js(path + ".json");
  js << json{{"size", img.size},
             {"pixel_pitch", img.pitch},
             {"origin", -1.0},
             {"dtype", "float64"},
             {"order", "row-major, rows along y"},
             {"disk_mask", img.disk_mask}}
            .dump(2)
     << '\n';
}

double relative_l2_error(const Image& img, const std::function<double(const Vec3&)>& f)
{
  double num = 0, den = 0;
  for (int i = 0; i < img.size; ++i)
    for (int j = 0; j < img.size; ++j) {
      Vec3 p = img.pixel_center(i, j);
      if (norm2(p) > 1) continue;
      double ref = f(p);
      num += (img.at(i, j) - ref) * (img.at(i, j) - ref);
      den += ref * ref;
    }
  if (den == 0) return std::sqrt(num);
  return std::sqrt(num / den);
}

Sinogram reproject(const Image& img, int angles, int offsets)
{
  auto sample = [&](const Vec3& p) {
    double fx = (p.x + 1) / img.pitch - 0.5, fy = (p.y + 1) / img.pitch - 0.5;
    int j = static_cast<int>(std::floor(fx)), i = static_cast<int>(std::floor(fy));
    double wx = fx - j, wy = fy - i;
    auto at = [&](int a, int b) {
      if (a < 0 || b < 0 || a >= img.size || b >= img.size) return 0.0;
      return img.at(a, b);
    };
    return (1 - wy) * ((1 - wx) * at(i, j) + wx * at(i, j + 1)) +
           wy * ((1 - wx) * at(i + 1, j) + wx * at(i + 1, j + 1));
  };
  return make_sinogram(angles, offsets, [&](const Vec3& x0, const Vec3& v0) {
    double L = chord_length(x0, v0);
    int steps = std::max(2, static_cast<int>(std::ceil(L / (0.5 * img.pitch))));
    double dt = L / steps, acc = 0;
    for (int k = 0; k < steps; ++k) acc += sample(x0 + v0 * ((k + 0.5) * dt));
    return acc * dt;
  });
}

double recover_k_pointwise(const Medium& sigma_estimate, double ek_value, const Vec3& x,
                           const Vec3& vin, const Vec3& vout)
{
  double e = attenuation_broken(sigma_estimate, x, vin, vout);
  if (e < 1e-12) throw AttenuationUnderflow("broken-line attenuation below 1e-12");
  return ek_value / e;
}

} // namespace itrans
