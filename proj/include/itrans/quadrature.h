#pragma once

#include <functional>
#include <vector>

namespace itrans {

// One-dimensional rule: nodes and weights on some interval.
struct Rule1D {
  std::vector<double> nodes;
  std::vector<double> weights;

  std::size_t size() const { return nodes.size(); }
};

// Gauss-Legendre with m points mapped to [a, b].
Rule1D gauss_legendre(int m, double a, double b);

// m-point Gauss-Legendre on each panel [edges[i], edges[i+1]].
Rule1D composite_gauss(const std::vector<double>& edges, int m);

// Panels on [0, span] refined geometrically toward 0: first edge at `first`,
// successive widths growing by `ratio` until span is reached.
std::vector<double> graded_edges(double span, double first, double ratio);

// Uniform panels.
std::vector<double> uniform_edges(double a, double b, int panels);

// Adaptive Gauss-Kronrod on [a, b] with the given relative tolerance.
double integrate_adaptive(const std::function<double(double)>& f, double a, double b,
                          double rel_tol = 1e-10, int max_depth = 15);

} // namespace itrans
