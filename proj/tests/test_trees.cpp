#include <catch2/catch_amalgamated.hpp>

#include <set>

#include "lve/quadrature.hpp"
#include "lve/trees.hpp"

using namespace lve;

namespace {

// brute force: all (n-1)-edge subsets of the complete graph that form a tree
std::uint64_t brute_force_tree_count(int n) {
  std::vector<std::pair<int, int>> all;
  for (int a = 0; a < n; ++a)
    for (int b = a + 1; b < n; ++b) all.emplace_back(a, b);
  const int m = static_cast<int>(all.size());
  std::uint64_t count = 0;
  for (std::uint64_t mask = 0; mask < (1ULL << m); ++mask) {
    if (std::popcount(mask) != n - 1) continue;
    trees::LabeledTree t;
    t.n = n;
    for (int e = 0; e < m; ++e)
      if (mask >> e & 1) t.edges.push_back(all[e]);
    if (t.is_valid_tree()) ++count;
  }
  return count;
}

}  // namespace

TEST_CASE("small enumerations") {
  const auto one = trees::enumerate_trees(1);
  REQUIRE(one.size() == 1);
  CHECK(one[0].edges.empty());
  const auto two = trees::enumerate_trees(2);
  REQUIRE(two.size() == 1);
  CHECK(two[0].edges == std::vector<std::pair<int, int>>{{0, 1}});
  CHECK(trees::enumerate_trees(4).size() == 16);
  CHECK(brute_force_tree_count(4) == 16);
  CHECK(brute_force_tree_count(5) == 125);
}

TEST_CASE("counts follow Cayley for n = 2..8") {
  for (int n = 2; n <= 8; ++n) {
    std::uint64_t count = 0;
    std::set<std::vector<std::pair<int, int>>> seen;
    trees::for_each_tree(n, [&](const trees::LabeledTree& t) {
      ++count;
      REQUIRE(t.is_valid_tree());
      if (n <= 6) seen.insert(t.edges);
    });
    CHECK(count == trees::cayley_count(n));
    CHECK(count == static_cast<std::uint64_t>(std::pow(n, n - 2) + 0.5));
    if (n <= 6) CHECK(seen.size() == count);  // no duplicates
  }
}

TEST_CASE("degree-sequence histogram is exact for n <= 7") {
  for (int n = 2; n <= 7; ++n) {
    std::map<std::vector<int>, std::uint64_t> hist;
    trees::for_each_tree(n, [&](const trees::LabeledTree& t) {
      const auto k = t.degrees();
      int sum = 0;
      for (int d : k) sum += d;
      REQUIRE(sum == 2 * (n - 1));
      ++hist[k];
    });
    std::uint64_t total = 0;
    for (const auto& [k, c] : hist) {
      CHECK(trees::count_trees_with_degrees(n, k) == c);
      total += c;
    }
    CHECK(total == trees::cayley_count(n));
  }
}

TEST_CASE("count_trees_with_degrees examples") {
  const int chain[] = {2, 1, 1};
  CHECK(trees::count_trees_with_degrees(3, chain) == 1);
  const int star[] = {3, 1, 1, 1};
  CHECK(trees::count_trees_with_degrees(4, star) == 1);
  const int bad[] = {2, 2, 2, 1};  // degree sum must be 2(n-1)
  CHECK_THROWS_AS(trees::count_trees_with_degrees(4, bad), Error);
}

TEST_CASE("Pruefer decoding") {
  SECTION("n = 2, empty code") {
    const auto t = trees::prufer_decode(2, {});
    CHECK(t.edges == std::vector<std::pair<int, int>>{{0, 1}});
  }
  SECTION("repeated label gives a star") {
    const int code[] = {0, 0};
    const auto t = trees::prufer_decode(4, code);
    CHECK(t.degrees() == std::vector<int>{3, 1, 1, 1});
    CHECK(trees::prufer_encode(t) == trees::PruferCode{0, 0});
  }
  SECTION("invalid codes throw") {
    const int code[] = {0, 7};
    CHECK_THROWS_AS(trees::prufer_decode(4, code), Error);
    const int wrong_length[] = {0};
    CHECK_THROWS_AS(trees::prufer_decode(4, wrong_length), Error);
  }
}

TEST_CASE("encode after decode is the identity on random codes") {
  const quad::CounterRng rng(17, 3);
  for (std::uint64_t i = 0; i < 10000; ++i) {
    const int n = 2 + static_cast<int>(rng.uniform(i * 16) * 8);  // 2..9
    trees::PruferCode code(n - 2);
    for (int c = 0; c < n - 2; ++c) code[c] = std::min(n - 1, static_cast<int>(rng.uniform(i * 16 + 1 + c) * n));
    const auto t = trees::prufer_decode(n, code);
    REQUIRE(t.is_valid_tree());
    REQUIRE(trees::prufer_encode(t) == code);
  }
}

TEST_CASE("path infimum") {
  const auto chain = trees::make_tree(3, {{0, 1}, {1, 2}});
  const double w[] = {0.5, 0.2};
  CHECK(trees::path_infimum(chain, w, 0, 2) == 0.2);
  CHECK(trees::path_infimum(chain, w, 0, 1) == 0.5);
  CHECK(trees::path_infimum(chain, w, 1, 1) == 1.0);
  const auto edge = trees::make_tree(2, {{0, 1}});
  const double w1[] = {0.7};
  CHECK(trees::path_infimum(edge, w1, 0, 1) == 0.7);
  const auto table = trees::path_infimum_table(chain, w);
  CHECK(table == std::vector<double>{1.0, 0.5, 0.2, 0.5, 1.0, 0.2, 0.2, 0.2, 1.0});
}

TEST_CASE("malformed trees are rejected") {
  CHECK_THROWS_AS(trees::make_tree(3, {{0, 1}, {0, 1}}), Error);
  CHECK_THROWS_AS(trees::make_tree(3, {{0, 1}}), Error);
  CHECK_FALSE(trees::LabeledTree{3, {{0, 1}, {1, 0}}, 0}.is_valid_tree());
}

TEST_CASE("shape classes partition the labeled trees") {
  // unrooted trees on n vertices: 1, 1, 1, 2, 3, 6, 11, 23
  const int unrooted[] = {0, 1, 1, 1, 2, 3, 6, 11, 23};
  // trees rooted at a fixed labeled vertex: 1, 1, 2, 4, 9, 20, 48
  const int rooted[] = {0, 1, 1, 2, 4, 9, 20, 48};
  for (int n = 1; n <= 8; ++n) {
    const auto s = trees::tree_shapes(n);
    CHECK(static_cast<int>(s.size()) == unrooted[n]);
    std::uint64_t total = 0;
    for (const auto& c : s) total += c.multiplicity;
    CHECK(total == trees::cayley_count(n));
  }
  for (int n = 1; n <= 7; ++n) {
    const auto s = trees::tree_shapes(n, 0);
    CHECK(static_cast<int>(s.size()) == rooted[n]);
    std::uint64_t total = 0;
    for (const auto& c : s) {
      total += c.multiplicity;
      CHECK(c.representative.root == 0);
    }
    CHECK(total == trees::cayley_count(n));
  }
}

TEST_CASE("canonical forms are label independent") {
  const auto a = trees::make_tree(4, {{0, 1}, {1, 2}, {2, 3}});
  const auto b = trees::make_tree(4, {{0, 2}, {2, 3}, {3, 1}});
  CHECK(trees::unrooted_canonical(a) == trees::unrooted_canonical(b));
  CHECK(trees::rooted_canonical(a, 0) != trees::rooted_canonical(a, 1));
  CHECK(trees::rooted_canonical(a, 0) == trees::rooted_canonical(b, 0));
}
