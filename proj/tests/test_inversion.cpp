#include "itrans/errors.h"
#include "itrans/inversion.h"
#include "itrans/rng.h"
#include "itrans/transport_forward.h"

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <limits>
#include <numbers>

using namespace itrans;
using std::numbers::pi;

namespace {

BoundaryMeasure incoming_point(int n, const Vec3& x, const Vec3& v, double mass = 1)
{
  auto g = BoundaryMeasure::point(n, x, v, mass);
  g.side = Side::incoming;
  return g;
}

// entry ray of the chord at angle a and signed impact parameter p
void chord(double a, double p, Vec3* x0, Vec3* v0)
{
  Vec3 v{std::cos(a), std::sin(a)};
  Vec3 nrm{-v.y, v.x};
  *v0 = v;
  *x0 = nrm * p - v * std::sqrt(1 - p * p);
}

// average of f over pixel (i, j) on an s x s subgrid
double pixel_average(const Image& img, int i, int j, const std::function<double(const Vec3&)>& f, int s = 8)
{
  Vec3 c = img.pixel_center(i, j);
  double acc = 0;
  for (int a = 0; a < s; ++a)
    for (int b = 0; b < s; ++b)
      acc += f(Vec3{c.x + img.pitch * ((b + 0.5) / s - 0.5), c.y + img.pitch * ((a + 0.5) / s - 0.5)});
  return acc / (s * s);
}

double rel_error_pixel_avg(const Image& img, const std::function<double(const Vec3&)>& f)
{
  double num = 0, den = 0;
  for (int i = 0; i < img.size; ++i)
    for (int j = 0; j < img.size; ++j) {
      if (norm2(img.pixel_center(i, j)) > 1) continue;
      double r = pixel_average(img, i, j, f);
      num += (img.at(i, j) - r) * (img.at(i, j) - r);
      den += r * r;
    }
  return std::sqrt(num / den);
}

} // namespace

TEST_CASE("chi1 and chi2")
{
  CHECK(chi1(0) == 1);
  CHECK(chi1(1) == 1);
  CHECK(chi1(1.5) == 0.5);
  CHECK(chi1(2) == 0);
  CHECK(chi1(7) == 0);
  CHECK(chi2(-3) == -1);
  CHECK(chi2(0.25) == 0.25);
  CHECK(chi2(4) == 1);
}

TEST_CASE("ballistic bump")
{
  Vec3 x0, v0;
  chord(0.3, 0.2, &x0, &v0);
  const double eta = 0.05, kappa = 4;
  auto phi = ballistic_bump(2, x0, v0, eta, kappa);
  Vec3 y0 = exit_point(x0, v0);
  CHECK(norm(phi.exit_x - y0) < 1e-12);
  CHECK(phi.sup == doctest::Approx(0.1));
  CHECK(phi(y0, v0) == doctest::Approx(0.1).epsilon(1e-12));
  Vec3 far{std::cos(std::atan2(y0.y, y0.x) + 0.03), std::sin(std::atan2(y0.y, y0.x) + 0.03)};
  CHECK(phi(far, v0) == 0);
  CHECK(phi(y0, Vec3{std::cos(0.3 + 0.026), std::sin(0.3 + 0.026)}) == 0);
  auto cert = certify_test_function(phi, 4000);
  CHECK(cert.ok);
  CHECK(cert.sup_sampled <= 1);
  CHECK(cert.lip_sampled <= kappa * (1 + 1e-6));
  // large eta caps the amplitude at 1
  CHECK(ballistic_bump(2, x0, v0, 0.45, 10).sup == 1);
  Vec3 x3 = normalized(Vec3{0.1, -0.2, -0.9}), v3 = normalized(Vec3{0.1, 0.3, 1});
  auto phi3 = ballistic_bump(3, x3, v3, 0.04, 6);
  CHECK(certify_test_function(phi3, 4000).ok);
}

TEST_CASE("extract_xray on ballistic data")
{
  Vec3 x0{-1, 0}, v0{1, 0};
  auto g = incoming_point(2, x0, v0);
  Medium vac(2, SigmaConstant{0}, KernelNone{});
  Medium one(2, SigmaConstant{1}, KernelNone{});
  Medium rad(2, SigmaRadial{{1, -1}}, KernelNone{});
  CHECK(extract_xray(apply_ballistic(vac, g), x0, v0, 0.05, 4, 1).value == doctest::Approx(0).scale(1));
  CHECK(extract_xray(apply_ballistic(one, g), x0, v0, 0.05, 4, 1).value == doctest::Approx(2).epsilon(1e-12));
  CHECK(extract_xray(apply_ballistic(rad, g), x0, v0, 0.05, 4, 1).value == doctest::Approx(4.0 / 3).epsilon(1e-8));
  // source scaling cancels
  auto g3 = g.scaled(3);
  CHECK(extract_xray(apply_ballistic(one, g3), x0, v0, 0.05, 4, 3).value == doctest::Approx(2).epsilon(1e-12));
  BoundaryMeasure empty(2, Side::outgoing);
  CHECK_THROWS_AS(extract_xray(empty, x0, v0, 0.05, 4, 1), NonPositiveEstimate);
  // mass above the source never gives a negative depth
  auto more = apply_ballistic(vac, g).scaled(1.2);
  CHECK(extract_xray(more, x0, v0, 0.05, 4, 1).value == 0);
}

TEST_CASE("x-ray error grows with the data blur")
{
  Medium m(2, SigmaRadial{{0.6, -0.3}}, KernelNone{});
  for (int c = 0; c < 20; ++c) {
    Vec3 x0, v0;
    chord(0.31 * c, -0.8 + 0.08 * c, &x0, &v0);
    auto data = apply_ballistic(m, incoming_point(2, x0, v0));
    double truth = optical_depth(m, x0, v0, chord_length(x0, v0)), prev = -1;
    for (double eb : {0.0, 0.005, 0.01, 0.02, 0.04}) {
      auto d = eb == 0 ? data : blur(data, eb);
      double err = std::abs(extract_xray(d, x0, v0, 0.05, 4, 1).value - truth);
      CHECK(err >= prev - 1e-12);
      prev = err;
    }
  }
}

TEST_CASE("sign test")
{
  Medium m1(3, SigmaConstant{0.2}, KernelIsotropic{0.02}, 0.1);
  Medium m2(3, SigmaConstant{0.2}, KernelHenyeyGreenstein{0.02, 0.4}, 0.1);
  Vec3 x0 = normalized(Vec3{-1, -0.1, -0.05}), v0 = normalized(Vec3{1, 0.3, 0.2});
  if (dot(x0, v0) >= 0) x0 = -x0;
  const double eta = 0.05, kappa = 4;
  SUBCASE("identical media give the zero function")
  {
    auto phi = sign_test(m1, m1, x0, v0, eta, kappa, 500);
    for (std::uint64_t i = 0; i < 200; ++i) {
      auto r = phi.support_sampler({uniform01(31, i, 0, 0), uniform01(31, i, 0, 1), uniform01(31, i, 0, 2),
                                    uniform01(31, i, 0, 3)});
      CHECK(phi(r.x, r.v) == 0);
    }
  }
  SUBCASE("amplitude, centre and support")
  {
    auto phi = sign_test(m1, m2, x0, v0, eta, kappa, 2000);
    CHECK(phi.amplitude == doctest::Approx(kappa * eta / 3));
    Vec3 y0 = exit_point(x0, v0);
    CHECK(phi(y0, v0) == 0);
    int nonzero = 0;
    for (std::uint64_t i = 0; i < 3000; ++i) {
      auto r = phi.support_sampler({uniform01(32, i, 0, 0), uniform01(32, i, 0, 1), uniform01(32, i, 0, 2),
                                    uniform01(32, i, 0, 3)});
      double val = phi(r.x, r.v);
      CHECK(std::abs(val) <= phi.amplitude + 1e-12);
      if (val != 0) {
        ++nonzero;
        CHECK(line_distance(r.x, r.v, x0, v0) <= 4 * eta + 1e-9);
        CHECK(norm(r.v - v0) >= eta - 1e-9);
      }
    }
    CHECK(nonzero > 0);
    CHECK(certify_test_function(phi, 4000).ok);
  }
  CHECK_THROWS_AS(sign_test(Medium(2, SigmaConstant{0.2}, KernelNone{}), Medium(2, SigmaConstant{0.2}, KernelNone{}),
                            Vec3{-1, 0}, Vec3{1, 0}, eta, kappa),
                  InvalidDimension);
}

TEST_CASE("single-scattering extraction")
{
  Medium m1(3, SigmaConstant{0.2}, KernelIsotropic{0.02}, 0.1);
  Medium m2(3, SigmaConstant{0.2}, KernelHenyeyGreenstein{0.02, 0.4}, 0.1);
  Vec3 x0 = normalized(Vec3{-1, -0.1, -0.05}), v0 = normalized(Vec3{1, 0.3, 0.2});
  auto g = incoming_point(3, x0, v0);
  ExpansionSettings s;
  s.truncation_order = 2;
  s.histories = 5000;
  auto d1 = expand_albedo(m1, g, s).combined();
  CHECK(extract_single_scatter(m1, m2, d1, d1, x0, v0, 0.1, 4) == 0);
  auto phi = sign_test(m1, m2, x0, v0, 0.1, 4, 2000);
  for (double shift : {0.005, 0.02}) {
    auto moved = misalign(d1, shift);
    double diff = std::abs(extract_single_scatter(phi, moved, d1));
    CHECK(diff <= std::min(4 * shift, 2.0) * d1.total_variation() / phi.amplitude + 1e-12);
  }
}

TEST_CASE("filtered backprojection")
{
  SUBCASE("zero sinogram")
  {
    auto s = make_sinogram(60, 64, [](const Vec3&, const Vec3&) { return 0.0; });
    auto img = fbp_invert(s, 32);
    for (double v : img.values) CHECK(v == 0);
  }
  SUBCASE("disk phantom against the pixel-averaged indicator")
  {
    const double r = 0.5;
    Sinogram s(180, 256);
    for (int a = 0; a < s.angles; ++a)
      for (int j = 0; j < s.offsets; ++j) {
        double p = s.offset(j);
        s.at(a, j) = std::abs(p) < r ? 2 * std::sqrt(r * r - p * p) : 0;
      }
    auto img = fbp_invert(s, 128);
    CHECK(rel_error_pixel_avg(img, [&](const Vec3& x) { return norm(x) < r ? 1.0 : 0.0; }) <= 0.05);
  }
  SUBCASE("gaussian phantom and reprojection round trip")
  {
    const double w = 0.2;
    Sinogram s(180, 256);
    for (int a = 0; a < s.angles; ++a)
      for (int j = 0; j < s.offsets; ++j) {
        double p = s.offset(j);
        s.at(a, j) = std::sqrt(2 * pi) * w * std::exp(-p * p / (2 * w * w));
      }
    auto img = fbp_invert(s, 128);
    CHECK(relative_l2_error(img, [&](const Vec3& x) { return std::exp(-norm2(x) / (2 * w * w)); }) <= 0.05);
    auto back = reproject(img, s.angles, s.offsets);
    double num = 0, den = 0;
    for (std::size_t i = 0; i < s.values.size(); ++i) {
      num += (back.values[i] - s.values[i]) * (back.values[i] - s.values[i]);
      den += s.values[i] * s.values[i];
    }
    CHECK(std::sqrt(num / den) <= 0.07);
  }
  SUBCASE("missing entries")
  {
    auto s = make_sinogram(30, 32, [](const Vec3&, const Vec3&) { return 1.0; });
    s.at(3, 4) = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(fbp_invert(s, 32), IncompleteSinogram);
  }
}

TEST_CASE("sinogram of a medium and CSV round trip")
{
  Medium m(2, SigmaConstant{0.4}, KernelNone{});
  auto s = sinogram_of_medium(m, 12, 16);
  for (int a = 0; a < 12; ++a)
    for (int j = 0; j < 16; ++j) {
      double p = s.offset(j);
      CHECK(s.at(a, j) == doctest::Approx(0.4 * 2 * std::sqrt(1 - p * p)).epsilon(1e-9));
    }
  Vec3 x0, v0;
  s.ray(2, 5, &x0, &v0);
  CHECK(std::abs(norm(x0) - 1) < 1e-12);
  CHECK(dot(x0, v0) < 0);
  auto path = (std::filesystem::temp_directory_path() / "itrans_sino_test.csv").string();
  write_sinogram_csv(path, s);
  auto back = read_sinogram_csv(path);
  std::filesystem::remove(path);
  REQUIRE(back.angles == 12);
  REQUIRE(back.offsets == 16);
  for (std::size_t i = 0; i < s.values.size(); ++i) CHECK(back.values[i] == s.values[i]);
}

TEST_CASE("pointwise kernel recovery")
{
  Vec3 x{0.1, 0.2}, vin{1, 0}, vout = normalized(Vec3{0.2, 1});
  Medium vac(2, SigmaConstant{0}, KernelNone{});
  CHECK(recover_k_pointwise(vac, 0.07, x, vin, vout) == doctest::Approx(0.07));
  Medium one(2, SigmaConstant{1}, KernelNone{});
  double e = attenuation_broken(one, x, vin, vout);
  CHECK(recover_k_pointwise(one, 0.07 * e, x, vin, vout) == doctest::Approx(0.07).epsilon(1e-12));
  Medium opaque(2, SigmaConstant{30}, KernelNone{});
  CHECK_THROWS_AS(recover_k_pointwise(opaque, 0.07, x, vin, vout), AttenuationUnderflow);
}
