#include "itrans/quadrature.h"

#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <boost/math/special_functions/legendre.hpp>

#include <cmath>
#include <map>
#include <memory>
#include <mutex>
#include <stdexcept>

namespace itrans {

namespace {

struct ReferenceRule {
  std::vector<double> x, w; // on [-1, 1]
};

const ReferenceRule& reference_rule(int m)
{
  static std::mutex lock;
  static std::map<int, std::unique_ptr<ReferenceRule>> cache;
  std::lock_guard<std::mutex> guard(lock);
  auto& slot = cache[m];
  if (!slot) {
    auto rule = std::make_unique<ReferenceRule>();
    // boost returns the nonnegative zeros in increasing order
    auto zeros = boost::math::legendre_p_zeros<double>(m);
    for (double z : zeros) {
      double dp = boost::math::legendre_p_prime(m, z);
      double w = 2.0 / ((1.0 - z * z) * dp * dp);
      if (z == 0.0) {
        rule->x.push_back(0.0);
        rule->w.push_back(w);
      } else {
        rule->x.push_back(z);
        rule->w.push_back(w);
        rule->x.push_back(-z);
        rule->w.push_back(w);
      }
    }
    slot = std::move(rule);
  }
  return *slot;
}

} // namespace

Rule1D gauss_legendre(int m, double a, double b)
{
  if (m < 1) throw std::invalid_argument("gauss_legendre: need at least one node");
  const auto& ref = reference_rule(m);
  Rule1D out;
  out.nodes.reserve(m);
  out.weights.reserve(m);
  double half = 0.5 * (b - a), mid = 0.5 * (a + b);
  for (std::size_t i = 0; i < ref.x.size(); ++i) {
    out.nodes.push_back(mid + half * ref.x[i]);
    out.weights.push_back(half * ref.w[i]);
  }
  return out;
}

Rule1D composite_gauss(const std::vector<double>& edges, int m)
{
  Rule1D out;
  for (std::size_t p = 0; p + 1 < edges.size(); ++p) {
    auto r = gauss_legendre(m, edges[p], edges[p + 1]);
    out.nodes.insert(out.nodes.end(), r.nodes.begin(), r.nodes.end());
    out.weights.insert(out.weights.end(), r.weights.begin(), r.weights.end());
  }
  return out;
}

std::vector<double> graded_edges(double span, double first, double ratio)
{
  std::vector<double> e{0.0};
  if (first >= span) {
    e.push_back(span);
    return e;
  }
  double width = first;
  while (e.back() + width < span) {
    e.push_back(e.back() + width);
    width *= ratio;
  }
  // merge a sliver last panel into its neighbour
  if (span - e.back() < 0.3 * width / ratio && e.size() > 1) e.back() = span;
  else e.push_back(span);
  return e;
}

std::vector<double> uniform_edges(double a, double b, int panels)
{
  std::vector<double> e(panels + 1);
  for (int i = 0; i <= panels; ++i) e[i] = a + (b - a) * i / panels;
  return e;
}

double integrate_adaptive(const std::function<double(double)>& f, double a, double b,
                          double rel_tol, int max_depth)
{
  if (a == b) return 0.0;
  double err = 0;
  return boost::math::quadrature::gauss_kronrod<double, 15>::integrate(f, a, b, max_depth,
                                                                      rel_tol, &err);
}

} // namespace itrans
