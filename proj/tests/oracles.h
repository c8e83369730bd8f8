#pragma once
// Reference computations for the tests. Nothing here calls the library's
// quadrature, transport or LP code.

#include "itrans/measures.h"
#include "itrans/optics.h"
#include "itrans/rng.h"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numbers>
#include <vector>

namespace oracle {

using itrans::Vec3;

// Gauss-Legendre nodes on [-1, 1] by Newton iteration on P_m
inline void gauss_nodes(int m, std::vector<double>& x, std::vector<double>& w)
{
  x.assign(m, 0);
  w.assign(m, 0);
  for (int i = 0; i < m; ++i) {
    double z = std::cos(std::numbers::pi * (i + 0.75) / (m + 0.5));
    double dp = 0;
    for (int it = 0; it < 100; ++it) {
      double p0 = 1, p1 = z;
      for (int k = 2; k <= m; ++k) {
        double p2 = ((2 * k - 1) * z * p1 - (k - 1) * p0) / k;
        p0 = p1;
        p1 = p2;
      }
      dp = m * (z * p1 - p0) / (z * z - 1);
      double dz = p1 / dp;
      z -= dz;
      if (std::abs(dz) < 1e-15) break;
    }
    x[i] = z;
    w[i] = 2 / ((1 - z * z) * dp * dp);
  }
}

// composite Gauss on [a, b]
inline double integrate(const std::function<double(double)>& f, double a, double b, int panels = 32,
                        int m = 10)
{
  std::vector<double> x, w;
  gauss_nodes(m, x, w);
  double h = (b - a) / panels, s = 0;
  for (int p = 0; p < panels; ++p) {
    double lo = a + p * h;
    for (int i = 0; i < m; ++i) s += 0.5 * h * w[i] * f(lo + 0.5 * h * (x[i] + 1));
  }
  return s;
}

inline double ground(const Vec3& xa, const Vec3& va, const Vec3& xb, const Vec3& vb)
{
  auto ang = [](const Vec3& a, const Vec3& b) {
    return std::acos(std::clamp(itrans::dot(a, b) / (itrans::norm(a) * itrans::norm(b)), -1.0, 1.0));
  };
  return ang(xa, xb) + ang(va, vb);
}

// max c.p subject to A p <= b, p >= 0 with b >= 0; dense tableau, Bland's rule
inline double simplex_max(const std::vector<std::vector<double>>& A, const std::vector<double>& b,
                          const std::vector<double>& c)
{
  const std::size_t m = A.size(), n = c.size();
  std::vector<std::vector<double>> T(m + 1, std::vector<double>(n + m + 1, 0.0));
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) T[i][j] = A[i][j];
    T[i][n + i] = 1;
    T[i][n + m] = b[i];
  }
  for (std::size_t j = 0; j < n; ++j) T[m][j] = -c[j];
  std::vector<std::size_t> basis(m);
  for (std::size_t i = 0; i < m; ++i) basis[i] = n + i;
  const double tol = 1e-12;
  for (int iter = 0; iter < 100000; ++iter) {
    std::size_t enter = n + m;
    for (std::size_t j = 0; j < n + m; ++j)
      if (T[m][j] < -tol) {
        enter = j;
        break;
      }
    if (enter == n + m) break;
    std::size_t leave = m;
    double best = 0;
    for (std::size_t i = 0; i < m; ++i) {
      if (T[i][enter] > tol) {
        double r = T[i][n + m] / T[i][enter];
        if (leave == m || r < best - 1e-15 || (std::abs(r - best) <= 1e-15 && basis[i] < basis[leave])) {
          best = r;
          leave = i;
        }
      }
    }
    if (leave == m) return INFINITY;
    double piv = T[leave][enter];
    for (auto& v : T[leave]) v /= piv;
    for (std::size_t i = 0; i <= m; ++i) {
      if (i == leave || T[i][enter] == 0) continue;
      double f = T[i][enter];
      for (std::size_t j = 0; j <= n + m; ++j) T[i][j] -= f * T[leave][j];
    }
    basis[leave] = enter;
  }
  return T[m][n + m];
}

// W_{1,kappa} from its dual: max sum phi_i (mu_i - nu_i), |phi| <= 1,
// phi_i - phi_j <= kappa d_ij. phi = p - 1 with p in [0, 2].
inline double w1kappa_lp(const itrans::BoundaryMeasure& mu, const itrans::BoundaryMeasure& nu, double kappa)
{
  std::vector<itrans::Atom> pts;
  std::vector<double> net;
  auto add = [&](const itrans::Atom& a, double sign) {
    for (std::size_t i = 0; i < pts.size(); ++i)
      if (itrans::norm(pts[i].x - a.x) < 1e-14 && itrans::norm(pts[i].v - a.v) < 1e-14) {
        net[i] += sign * a.mass;
        return;
      }
    pts.push_back(a);
    net.push_back(sign * a.mass);
  };
  for (const auto& a : mu.atoms) add(a, 1);
  for (const auto& a : nu.atoms) add(a, -1);
  const std::size_t N = pts.size();
  if (N == 0) return 0;
  std::vector<std::vector<double>> A;
  std::vector<double> b;
  for (std::size_t i = 0; i < N; ++i) {
    std::vector<double> row(N, 0.0);
    row[i] = 1;
    A.push_back(row);
    b.push_back(2);
  }
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t j = 0; j < N; ++j) {
      if (i == j) continue;
      double d = kappa * ground(pts[i].x, pts[i].v, pts[j].x, pts[j].v);
      if (d >= 2) continue;
      std::vector<double> row(N, 0.0);
      row[i] = 1;
      row[j] = -1;
      A.push_back(row);
      b.push_back(d);
    }
  double shift = 0;
  for (double x : net) shift += x;
  return simplex_max(A, b, net) - shift;
}

// Weighted particle tracking of the full collision series for constant
// sigma and isotropic k = c * cutoff(x). Flights are drawn at the majorant
// rate lambda = c |V|; returns mean exit weight and its standard error.
struct ParticleResult {
  double mean = 0, stderr_ = 0;
};

inline ParticleResult particle_exit_mass(const itrans::Medium& m, double sigma, double c, const Vec3& x0,
                                         const Vec3& v0, std::size_t histories, std::uint64_t seed)
{
  const int n = m.dimension();
  const double vmeas = n == 2 ? 2 * std::numbers::pi : 4 * std::numbers::pi;
  const double lambda = c * vmeas;
  auto exit_time = [](const Vec3& x, const Vec3& v) {
    double b = itrans::dot(x, v);
    return -b + std::sqrt(std::max(0.0, b * b - itrans::dot(x, x) + 1));
  };
  double s1 = 0, s2 = 0;
  for (std::size_t h = 0; h < histories; ++h) {
    Vec3 x = x0, v = v0;
    double w = 1;
    std::uint64_t d = 0;
    for (int coll = 0; coll < 400; ++coll) {
      double L = exit_time(x, v);
      double u = itrans::uniform01(seed, 17, h, d++);
      double t = -std::log(1 - u) / lambda;
      if (t >= L) {
        w *= std::exp(-sigma * L) / std::exp(-lambda * L);
        break;
      }
      x = x + v * t;
      double sp = lambda * m.cutoff(x);
      w *= std::exp(-sigma * t) * sp / (lambda * std::exp(-lambda * t));
      double a = itrans::uniform01(seed, 17, h, d++), bb = itrans::uniform01(seed, 17, h, d++);
      if (n == 2) {
        double th = 2 * std::numbers::pi * a;
        v = Vec3{std::cos(th), std::sin(th), 0};
      } else {
        double z = 2 * a - 1, ph = 2 * std::numbers::pi * bb, r = std::sqrt(std::max(0.0, 1 - z * z));
        v = Vec3{r * std::cos(ph), r * std::sin(ph), z};
      }
      if (w == 0) break;
    }
    s1 += w;
    s2 += w * w;
  }
  double N = static_cast<double>(histories);
  double mean = s1 / N;
  return {mean, std::sqrt(std::max(0.0, s2 / N - mean * mean) / N)};
}

} // namespace oracle
