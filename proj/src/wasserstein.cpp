#include "itrans/wasserstein.h"

#include "itrans/errors.h"

#include <algorithm>
#include <cmath>
#include <tuple>

namespace itrans {

KappaMetric::KappaMetric(double k) : kappa(k)
{
  if (!(k >= 1)) throw ConfigError("kappa must be >= 1");
}

double KappaMetric::cost(const Vec3& xa, const Vec3& va, const Vec3& xb, const Vec3& vb) const
{
  return std::min(2.0, kappa * ground_distance(xa, va, xb, vb));
}

int NetworkSimplex::add_node(double supply)
{
  supply_.push_back(supply);
  return static_cast<int>(supply_.size()) - 1;
}

int NetworkSimplex::add_arc(int from, int to, double cost)
{
  src_.push_back(from);
  dst_.push_back(to);
  cost_.push_back(cost);
  return static_cast<int>(src_.size()) - 1;
}

double NetworkSimplex::objective() const
{
  double s = 0;
  for (std::size_t a = 0; a < src_.size(); ++a) s += cost_[a] * flow_[a];
  return s;
}

void NetworkSimplex::rehang(int entering, int q, int anchor, int other, double shift)
{
  // Path anchor -> ... -> q (upwards) is reversed; anchor becomes the
  // subtree root hanging from `other` via the entering arc.
  auto unlink = [&](int w) {
    int p = parent_[w];
    if (prev_sib_[w] >= 0) next_sib_[prev_sib_[w]] = next_sib_[w];
    else first_child_[p] = next_sib_[w];
    if (next_sib_[w] >= 0) prev_sib_[next_sib_[w]] = prev_sib_[w];
    prev_sib_[w] = next_sib_[w] = -1;
  };
  auto link = [&](int w, int p) {
    parent_[w] = p;
    prev_sib_[w] = -1;
    next_sib_[w] = first_child_[p];
    if (first_child_[p] >= 0) prev_sib_[first_child_[p]] = w;
    first_child_[p] = w;
  };

  std::vector<int> path;
  for (int w = anchor;; w = parent_[w]) {
    path.push_back(w);
    if (w == q) break;
  }
  std::vector<int> preds(path.size());
  for (std::size_t i = 0; i < path.size(); ++i) preds[i] = pred_[path[i]];
  for (std::size_t i = 0; i < path.size(); ++i) unlink(path[i]);
  for (std::size_t i = path.size(); i-- > 1;) {
    link(path[i], path[i - 1]);
    pred_[path[i]] = preds[i - 1];
  }
  link(anchor, other);
  pred_[anchor] = entering;

  // refresh depth and potentials over the moved subtree
  std::vector<int> stack{anchor};
  while (!stack.empty()) {
    int w = stack.back();
    stack.pop_back();
    depth_[w] = depth_[parent_[w]] + 1;
    pi_[w] += shift;
    for (int c = first_child_[w]; c >= 0; c = next_sib_[c]) stack.push_back(c);
  }
}

void NetworkSimplex::solve(int root, const std::vector<int>& initial_tree)
{
  const int nn = static_cast<int>(supply_.size());
  const std::size_t na = src_.size();
  flow_.assign(na, 0.0);
  in_tree_.assign(na, 0);
  parent_.assign(nn, -1);
  pred_.assign(nn, -1);
  depth_.assign(nn, 0);
  first_child_.assign(nn, -1);
  next_sib_.assign(nn, -1);
  prev_sib_.assign(nn, -1);
  pi_.assign(nn, 0.0);
  pivots_ = 0;

  double cmax = 1;
  for (double c : cost_) cmax = std::max(cmax, std::abs(c));
  const double eps = 1e-12 * cmax;

  for (int i = 0; i < nn; ++i) {
    if (i == root) continue;
    int a = initial_tree[i];
    bool up = src_[a] == i && dst_[a] == root;
    bool down = src_[a] == root && dst_[a] == i;
    if (!up && !down) throw Error("network simplex: initial tree arc does not touch the root");
    double f = up ? supply_[i] : -supply_[i];
    if (f < 0) {
      if (f < -1e-12) throw Error("network simplex: initial tree is infeasible");
      f = 0;
    }
    flow_[a] = f;
    in_tree_[a] = 1;
    parent_[i] = root;
    pred_[i] = a;
    depth_[i] = 1;
    next_sib_[i] = first_child_[root];
    if (first_child_[root] >= 0) prev_sib_[first_child_[root]] = i;
    first_child_[root] = i;
    // reduced cost zero on tree arcs: c + pi_src - pi_dst = 0
    pi_[i] = up ? -cost_[a] : cost_[a];
  }

  const std::size_t block = std::max<std::size_t>(64, static_cast<std::size_t>(std::sqrt(double(na))));
  std::size_t cursor = 0;
  std::vector<int> path_u, path_v;
  for (;;) {
    // block-search pricing
    int entering = -1;
    double best = -eps;
    std::size_t scanned = 0;
    while (scanned < na) {
      std::size_t end = std::min(na, cursor + block);
      for (std::size_t a = cursor; a < end; ++a) {
        if (in_tree_[a]) continue;
        double rc = cost_[a] + pi_[src_[a]] - pi_[dst_[a]];
        if (rc < best) {
          best = rc;
          entering = static_cast<int>(a);
        }
      }
      scanned += end - cursor;
      cursor = end == na ? 0 : end;
      if (entering >= 0) break;
    }
    if (entering < 0) break;
    ++pivots_;

    const int u = src_[entering], v = dst_[entering];
    path_u.clear();
    path_v.clear();
    int a = u, b = v;
    while (a != b) {
      if (depth_[a] >= depth_[b]) {
        path_u.push_back(a);
        a = parent_[a];
      } else {
        path_v.push_back(b);
        b = parent_[b];
      }
    }
    // flow travels join -> (down) u -> v -> (up) join
    double delta = 1e300;
    auto decreasing_down = [&](int w) { return src_[pred_[w]] == w; };  // on path_u
    auto decreasing_up = [&](int w) { return src_[pred_[w]] != w; };    // on path_v
    for (int w : path_u)
      if (decreasing_down(w)) delta = std::min(delta, flow_[pred_[w]]);
    for (int w : path_v)
      if (decreasing_up(w)) delta = std::min(delta, flow_[pred_[w]]);
    if (delta == 1e300) throw Error("network simplex: unbounded cycle");

    // last blocking arc in traversal order (keeps the tree strongly feasible)
    int leave_child = -1;
    bool leave_on_u = false;
    for (std::size_t i = path_u.size(); i-- > 0;) {
      int w = path_u[i];
      if (decreasing_down(w) && flow_[pred_[w]] <= delta) {
        leave_child = w;
        leave_on_u = true;
      }
    }
    for (int w : path_v)
      if (decreasing_up(w) && flow_[pred_[w]] <= delta) {
        leave_child = w;
        leave_on_u = false;
      }

    flow_[entering] += delta;
    for (int w : path_u) flow_[pred_[w]] += decreasing_down(w) ? -delta : delta;
    for (int w : path_v) flow_[pred_[w]] += decreasing_up(w) ? -delta : delta;
    int leaving = pred_[leave_child];
    flow_[leaving] = 0.0;

    in_tree_[leaving] = 0;
    in_tree_[entering] = 1;
    double rc = cost_[entering] + pi_[u] - pi_[v];
    if (leave_on_u) rehang(entering, leave_child, u, v, -rc);
    else rehang(entering, leave_child, v, u, rc);
  }
}

W1Result w1kappa_solve(const BoundaryMeasure& mu, const BoundaryMeasure& nu, double kappa)
{
  KappaMetric metric(kappa);
  if (!mu.empty() && !nu.empty() && mu.side != nu.side)
    throw SideMismatch("W distance between measures on different sides");
  if (!mu.empty() && !nu.empty() && mu.n != nu.n)
    throw ConfigError("W distance between measures of different dimension");

  // merge coincident atoms of mu - nu
  std::vector<Atom> all;
  all.reserve(mu.size() + nu.size());
  for (const auto& a : mu.atoms) all.push_back(a);
  for (const auto& a : nu.atoms) all.push_back({a.x, a.v, -a.mass});
  auto key = [](const Atom& a) { return std::tie(a.x.x, a.x.y, a.x.z, a.v.x, a.v.y, a.v.z); };
  std::stable_sort(all.begin(), all.end(), [&](const Atom& a, const Atom& b) { return key(a) < key(b); });
  std::vector<Atom> merged;
  double scale = 0;
  for (const auto& a : all) {
    scale = std::max(scale, std::abs(a.mass));
    if (!merged.empty() && key(merged.back()) == key(a)) merged.back().mass += a.mass;
    else merged.push_back(a);
  }
  W1Result res;
  std::vector<Atom> pos, neg;
  for (const auto& a : merged) {
    if (std::abs(a.mass) <= 1e-15 * scale) continue;
    (a.mass > 0 ? pos : neg).push_back(a);
  }
  res.support = pos.size() + neg.size();
  if (res.support == 0) return res;

  NetworkSimplex ns;
  double net = 0;
  for (const auto& a : pos) {
    ns.add_node(a.mass);
    net += a.mass;
  }
  for (const auto& a : neg) {
    ns.add_node(a.mass);
    net += a.mass;
  }
  const int ground = ns.add_node(-net);
  const int np = static_cast<int>(pos.size()), nn = static_cast<int>(neg.size());
  std::vector<int> tree(ground + 1, -1);
  for (int i = 0; i < np; ++i) tree[i] = ns.add_arc(i, ground, 1.0);
  for (int j = 0; j < nn; ++j) tree[np + j] = ns.add_arc(ground, np + j, 1.0);
  for (int i = 0; i < np; ++i)
    for (int j = 0; j < nn; ++j) {
      double d = ground_distance(pos[i].x, pos[i].v, neg[j].x, neg[j].v);
      if (kappa * d < 2.0) ns.add_arc(i, np + j, kappa * d);
    }
  ns.solve(ground, tree);
  res.value = ns.objective();
  res.arcs = ns.arc_count();
  res.pivots = ns.pivots();
  for (int i = 0; i < np; ++i) {
    res.support_points.push_back(pos[i]);
    res.potential.push_back(ns.dual(i));
  }
  for (int j = 0; j < nn; ++j) {
    res.support_points.push_back(neg[j]);
    res.potential.push_back(ns.dual(np + j));
  }
  return res;
}

double w1kappa(const BoundaryMeasure& mu, const BoundaryMeasure& nu, double kappa)
{
  return w1kappa_solve(mu, nu, kappa).value;
}

} // namespace itrans
