#pragma once

#include "itrans/measures.h"

#include <cstddef>
#include <vector>

namespace itrans {

struct KappaMetric {
  double kappa = 1;

  explicit KappaMetric(double k);
  // min(kappa d, 2): the effective cost between two atoms
  double cost(const Vec3& xa, const Vec3& va, const Vec3& xb, const Vec3& vb) const;
};

struct W1Result {
  double value = 0;
  std::size_t support = 0; // atoms with nonzero net mass
  std::size_t arcs = 0;
  std::size_t pivots = 0;
  // optimal dual potential phi on each merged support point (|phi| <= 1)
  std::vector<Atom> support_points; // mass field holds the net mass
  std::vector<double> potential;
};

// Exact W_{1,kappa} through the equivalent min-cost flow: transport at cost
// kappa*d between atoms of opposite sign, or through a ground node at cost 1
// per unit (the sup-norm cap). Arcs with kappa*d >= 2 are never needed.
W1Result w1kappa_solve(const BoundaryMeasure& mu, const BoundaryMeasure& nu, double kappa);
double w1kappa(const BoundaryMeasure& mu, const BoundaryMeasure& nu, double kappa);

// Uncapacitated min-cost flow by the primal network simplex method. Nodes
// carry supplies summing to zero; `root` must be joined to every other node
// by an arc usable as the initial feasible tree.
class NetworkSimplex {
public:
  int add_node(double supply);
  int add_arc(int from, int to, double cost);
  // initial_tree[i] = arc linking node i with root (ignored for root)
  void solve(int root, const std::vector<int>& initial_tree);

  double objective() const;
  double flow(int arc) const { return flow_[arc]; }
  // dual value y with y_u - y_v <= c_uv, normalized so y_root = 0
  double dual(int node) const { return -pi_[node]; }
  std::size_t pivots() const { return pivots_; }
  std::size_t arc_count() const { return src_.size(); }

private:
  void rehang(int entering, int leaving_child, int subtree_anchor, int other, double shift);

  std::vector<double> supply_;
  std::vector<int> src_, dst_;
  std::vector<double> cost_, flow_;
  std::vector<char> in_tree_;
  std::vector<int> parent_, pred_, depth_, first_child_, next_sib_, prev_sib_;
  std::vector<double> pi_;
  std::size_t pivots_ = 0;
};

} // namespace itrans
