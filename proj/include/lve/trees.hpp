#pragma once

// Labeled trees on vertices 0..n-1: Pruefer coding, lexicographic
// enumeration, degree counting, path queries and isomorphism classes.

#include <algorithm>
#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "lve/common.hpp"

namespace lve::trees {

inline constexpr int default_enumeration_cap = 9;

struct LabeledTree {
  int n = 1;
  std::vector<std::pair<int, int>> edges;  // each with first < second
  int root = 0;

  std::vector<std::vector<int>> adjacency() const {
    std::vector<std::vector<int>> adj(n);
    for (auto [a, b] : edges) {
      adj[a].push_back(b);
      adj[b].push_back(a);
    }
    for (auto& v : adj) std::sort(v.begin(), v.end());
    return adj;
  }

  std::vector<int> degrees() const {
    std::vector<int> k(n, 0);
    for (auto [a, b] : edges) {
      ++k[a];
      ++k[b];
    }
    return k;
  }

  /// Index of the edge joining a and b, or -1.
  int edge_index(int a, int b) const {
    if (a > b) std::swap(a, b);
    for (std::size_t i = 0; i < edges.size(); ++i)
      if (edges[i].first == a && edges[i].second == b) return static_cast<int>(i);
    return -1;
  }

  bool is_valid_tree() const {
    if (n < 1 || static_cast<int>(edges.size()) != n - 1 || root < 0 || root >= n) return false;
    std::vector<int> parent(n);
    std::iota(parent.begin(), parent.end(), 0);
    std::function<int(int)> find = [&](int x) { return parent[x] == x ? x : parent[x] = find(parent[x]); };
    for (auto [a, b] : edges) {
      if (a < 0 || b < 0 || a >= n || b >= n || a == b) return false;
      const int ra = find(a), rb = find(b);
      if (ra == rb) return false;
      parent[ra] = rb;
    }
    return true;
  }
};

using PruferCode = std::vector<int>;

inline LabeledTree make_tree(int n, std::vector<std::pair<int, int>> edges, int root = 0) {
  LabeledTree t;
  t.n = n;
  t.root = root;
  for (auto& e : edges)
    if (e.first > e.second) std::swap(e.first, e.second);
  t.edges = std::move(edges);
  require(t.is_valid_tree(), "make_tree: edges do not form a tree on " + std::to_string(n) + " vertices");
  return t;
}

/// Decodes a Pruefer sequence of length n-2 with labels in [0, n).
/// Edges are emitted in the order the leaves are removed.
inline LabeledTree prufer_decode(int n, std::span<const int> code) {
  require(n >= 1, "prufer_decode: n must be >= 1");
  require(static_cast<int>(code.size()) == std::max(0, n - 2), "prufer_decode: code length must be n-2");
  LabeledTree t;
  t.n = n;
  if (n == 1) return t;
  std::vector<int> degree(n, 1);
  for (int c : code) {
    require(c >= 0 && c < n, "prufer_decode: label " + std::to_string(c) + " out of range");
    ++degree[c];
  }
  // O(n) pointer walk over the smallest leaf
  int ptr = 0;
  while (degree[ptr] != 1) ++ptr;
  int leaf = ptr;
  for (int c : code) {
    t.edges.emplace_back(std::min(leaf, c), std::max(leaf, c));
    --degree[leaf];
    if (--degree[c] == 1 && c < ptr) {
      leaf = c;
    } else {
      ++ptr;
      while (degree[ptr] != 1) ++ptr;
      leaf = ptr;
    }
  }
  t.edges.emplace_back(std::min(leaf, n - 1), std::max(leaf, n - 1));
  return t;
}

inline PruferCode prufer_encode(const LabeledTree& t) {
  require(t.is_valid_tree(), "prufer_encode: not a tree");
  const int n = t.n;
  PruferCode code;
  if (n <= 2) return code;
  auto adj = t.adjacency();
  std::vector<int> degree(n);
  for (int v = 0; v < n; ++v) degree[v] = static_cast<int>(adj[v].size());
  std::vector<bool> removed(n, false);
  int ptr = 0;
  while (degree[ptr] != 1) ++ptr;
  int leaf = ptr;
  for (int step = 0; step < n - 2; ++step) {
    int next = -1;
    for (int u : adj[leaf])
      if (!removed[u]) {
        next = u;
        break;
      }
    code.push_back(next);
    removed[leaf] = true;
    if (--degree[next] == 1 && next < ptr) {
      leaf = next;
    } else {
      ++ptr;
      while (degree[ptr] != 1 || removed[ptr]) ++ptr;
      leaf = ptr;
    }
  }
  return code;
}

/// Number of labeled trees, n^{n-2} (1 for n = 1).
inline std::uint64_t cayley_count(int n) {
  require(n >= 1 && n <= 15, "cayley_count: n out of range");
  std::uint64_t c = 1;
  for (int i = 0; i < n - 2; ++i) c *= static_cast<std::uint64_t>(n);
  return c;
}

/// The index-th Pruefer code in lexicographic order.
inline PruferCode prufer_code_at(int n, std::uint64_t index) {
  PruferCode code(std::max(0, n - 2));
  for (int i = static_cast<int>(code.size()) - 1; i >= 0; --i) {
    code[i] = static_cast<int>(index % static_cast<std::uint64_t>(n));
    index /= static_cast<std::uint64_t>(n);
  }
  return code;
}

/// Calls f(tree) for every labeled tree on n vertices in lexicographic Pruefer order.
template <class F>
void for_each_tree(int n, F&& f, int cap = default_enumeration_cap) {
  require(n >= 1, "enumerate_trees: n must be >= 1");
  require(n <= cap, "enumerate_trees: n = " + std::to_string(n) + " exceeds cap " + std::to_string(cap));
  PruferCode code(std::max(0, n - 2), 0);
  while (true) {
    f(prufer_decode(n, code));
    int i = static_cast<int>(code.size()) - 1;
    while (i >= 0 && code[i] == n - 1) code[i--] = 0;
    if (i < 0) break;
    ++code[i];
  }
}

inline std::vector<LabeledTree> enumerate_trees(int n, int cap = default_enumeration_cap) {
  std::vector<LabeledTree> out;
  for_each_tree(n, [&](LabeledTree t) { out.push_back(std::move(t)); }, cap);
  return out;
}

/// Minimum of w over the path between u and v; 1 if u == v.
inline double path_infimum(const LabeledTree& t, std::span<const double> w, int u, int v) {
  require(u >= 0 && u < t.n && v >= 0 && v < t.n, "path_infimum: vertex out of range");
  require(static_cast<int>(w.size()) == t.n - 1, "path_infimum: need one weakening parameter per edge");
  if (u == v) return 1.0;
  const auto adj = t.adjacency();
  std::vector<int> parent(t.n, -1);
  std::vector<int> stack{u};
  parent[u] = u;
  while (!stack.empty()) {
    const int x = stack.back();
    stack.pop_back();
    for (int y : adj[x])
      if (parent[y] < 0) {
        parent[y] = x;
        stack.push_back(y);
      }
  }
  double m = 1.0;
  for (int x = v; x != u; x = parent[x]) m = std::min(m, w[t.edge_index(x, parent[x])]);
  return m;
}

/// All-pairs path infima as an n x n row-major table.
inline std::vector<double> path_infimum_table(const LabeledTree& t, std::span<const double> w) {
  require(static_cast<int>(w.size()) == t.n - 1, "path_infimum: need one weakening parameter per edge");
  const int n = t.n;
  std::vector<double> table(static_cast<std::size_t>(n) * n, 1.0);
  const auto adj = t.adjacency();
  std::vector<int> eidx(static_cast<std::size_t>(n) * n, -1);
  for (std::size_t i = 0; i < t.edges.size(); ++i) {
    auto [a, b] = t.edges[i];
    eidx[a * n + b] = eidx[b * n + a] = static_cast<int>(i);
  }
  for (int s = 0; s < n; ++s) {
    std::vector<int> stack{s};
    std::vector<bool> seen(n, false);
    seen[s] = true;
    while (!stack.empty()) {
      const int x = stack.back();
      stack.pop_back();
      for (int y : adj[x])
        if (!seen[y]) {
          seen[y] = true;
          table[s * n + y] = std::min(table[s * n + x], w[eidx[x * n + y]]);
          stack.push_back(y);
        }
    }
  }
  return table;
}

/// (n-2)! / prod (k_v - 1)!, the number of labeled trees with the given degrees.
inline std::uint64_t count_trees_with_degrees(int n, std::span<const int> degrees) {
  require(n >= 1 && static_cast<int>(degrees.size()) == n, "count_trees_with_degrees: need n degrees");
  if (n == 1) {
    require(degrees[0] == 0, "count_trees_with_degrees: single vertex has degree 0");
    return 1;
  }
  int sum = 0;
  for (int k : degrees) {
    require(k >= 1, "count_trees_with_degrees: every degree must be >= 1");
    sum += k;
  }
  require(sum == 2 * (n - 1), "count_trees_with_degrees: degrees must sum to 2(n-1)");
  // multinomial by successive binomials, exact in 64 bits for n <= 20
  std::uint64_t result = 1;
  int placed = 0;
  for (int k : degrees) {
    const int r = k - 1;
    for (int i = 1; i <= r; ++i) {
      result = result * static_cast<std::uint64_t>(placed + i) / static_cast<std::uint64_t>(i);
    }
    placed += r;
  }
  return result;
}

// ---------------------------------------------------------------------------
// Isomorphism classes (AHU canonical strings).

namespace detail {
inline std::string rooted_code(const std::vector<std::vector<int>>& adj, int v, int parent) {
  std::vector<std::string> kids;
  for (int u : adj[v])
    if (u != parent) kids.push_back(rooted_code(adj, u, v));
  std::sort(kids.begin(), kids.end());
  std::string s = "(";
  for (auto& k : kids) s += k;
  return s + ")";
}

inline std::vector<int> centers(const LabeledTree& t) {
  const auto adj = t.adjacency();
  std::vector<int> deg(t.n);
  std::vector<int> layer;
  for (int v = 0; v < t.n; ++v) {
    deg[v] = static_cast<int>(adj[v].size());
    if (deg[v] <= 1) layer.push_back(v);
  }
  int remaining = t.n;
  while (remaining > 2) {
    remaining -= static_cast<int>(layer.size());
    std::vector<int> next;
    for (int v : layer)
      for (int u : adj[v])
        if (--deg[u] == 1) next.push_back(u);
    layer = std::move(next);
  }
  std::sort(layer.begin(), layer.end());
  return layer;
}
}  // namespace detail

/// Canonical form of the tree rooted at `root`.
inline std::string rooted_canonical(const LabeledTree& t, int root) {
  return detail::rooted_code(t.adjacency(), root, -1);
}

/// Canonical form of the unrooted tree (equal iff isomorphic).
inline std::string unrooted_canonical(const LabeledTree& t) {
  const auto adj = t.adjacency();
  std::string best;
  for (int c : detail::centers(t)) {
    std::string s = detail::rooted_code(adj, c, -1);
    if (best.empty() || s < best) best = s;
  }
  return best;
}

struct ShapeClass {
  LabeledTree representative;  // first tree of the class in Pruefer order
  std::uint64_t multiplicity = 0;
  std::string canonical;
};

/// Isomorphism classes of labeled trees on n vertices. With `fixed_root`
/// >= 0 the classes are those of trees rooted at that vertex (isomorphisms
/// fixing it); otherwise unrooted. Classes are listed by first appearance.
inline std::vector<ShapeClass> tree_shapes(int n, int fixed_root = -1, int cap = default_enumeration_cap) {
  std::vector<ShapeClass> out;
  std::map<std::string, std::size_t> index;
  for_each_tree(
      n,
      [&](LabeledTree t) {
        std::string key = fixed_root >= 0 ? rooted_canonical(t, fixed_root) : unrooted_canonical(t);
        auto it = index.find(key);
        if (it == index.end()) {
          index.emplace(key, out.size());
          if (fixed_root >= 0) t.root = fixed_root;
          out.push_back({std::move(t), 1, key});
        } else {
          ++out[it->second].multiplicity;
        }
      },
      cap);
  return out;
}

}  // namespace lve::trees
