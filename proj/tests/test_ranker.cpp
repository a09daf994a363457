#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <numeric>

#include "raco/ranker.hpp"

using namespace raco;
using namespace raco::ranker;

namespace {
// Hard descending ranks (rank 1 = highest score), ties by original index.
std::vector<double> hard_ranks(const std::vector<double>& s) {
  std::vector<int> idx(s.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return s[a] > s[b]; });
  std::vector<double> r(s.size());
  for (size_t i = 0; i < idx.size(); ++i) r[idx[i]] = static_cast<double>(i + 1);
  return r;
}
}  // namespace

TEST_CASE("soft rank basics") {
  CHECK(soft_rank({3.7}, 1.0).ranks == std::vector<double>{1.0});

  const auto equal = soft_rank({2.0, 2.0, 2.0, 2.0, 2.0}, 0.5);
  for (double r : equal.ranks) CHECK(r == doctest::Approx(3.0).epsilon(1e-12));

  Rng rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    const int n = 2 + trial % 30;
    std::vector<double> s(n);
    for (double& v : s) v = rng.normal();
    const auto r = soft_rank(s, rng.uniform(0.05, 5.0));
    double sum = 0.0;
    for (double v : r.ranks) {
      sum += v;
      CHECK(v >= 1.0 - 1e-9);
      CHECK(v <= n + 1e-9);
    }
    CHECK(sum == doctest::Approx(n * (n + 1) / 2.0).epsilon(1e-9));
  }

  CHECK_THROWS_AS(soft_rank({}, 1.0), std::invalid_argument);
  CHECK_THROWS_AS(soft_rank({1.0}, 0.0), std::invalid_argument);
}

TEST_CASE("soft rank converges to hard ranks as epsilon -> 0") {
  Rng rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 2 + trial % 20;
    std::vector<double> s(n);
    for (double& v : s) v = rng.uniform(-5.0, 5.0);
    const auto exact = hard_ranks(s);
    const auto soft = soft_rank(s, 1e-6);
    for (int i = 0; i < n; ++i) {
      CHECK(soft.ranks[i] == doctest::Approx(exact[i]).epsilon(1e-4));
    }
  }
}

TEST_CASE("soft rank is shift invariant and permutation equivariant") {
  const std::vector<double> s = {0.3, -1.2, 2.5, 0.9, 0.9};
  const auto base = soft_rank(s, 0.7).ranks;

  std::vector<double> shifted = s;
  for (double& v : shifted) v += 42.0;
  const auto sh = soft_rank(shifted, 0.7).ranks;
  for (size_t i = 0; i < s.size(); ++i) CHECK(sh[i] == doctest::Approx(base[i]).epsilon(1e-9));

  const std::vector<int> perm = {3, 0, 4, 1, 2};
  std::vector<double> permuted(s.size());
  for (size_t i = 0; i < perm.size(); ++i) permuted[i] = s[perm[i]];
  const auto pr = soft_rank(permuted, 0.7).ranks;
  for (size_t i = 0; i < perm.size(); ++i) {
    CHECK(pr[i] == doctest::Approx(base[perm[i]]).epsilon(1e-9));
  }
}

TEST_CASE("soft rank vjp matches finite differences") {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const int n = 3 + trial % 10;
    std::vector<double> s(n);
    for (double& v : s) v = rng.normal();
    const double eps_rank = rng.uniform(0.3, 2.0);
    std::vector<double> g(n);
    for (double& v : g) v = rng.normal();

    const auto res = soft_rank(s, eps_rank);
    const auto vjp = soft_rank_vjp(res, g);

    const double h = 1e-6;
    for (int i = 0; i < n; ++i) {
      auto hi = s, lo = s;
      hi[i] += h;
      lo[i] -= h;
      const auto rh = soft_rank(hi, eps_rank).ranks;
      const auto rl = soft_rank(lo, eps_rank).ranks;
      double fd = 0.0;
      for (int j = 0; j < n; ++j) fd += g[j] * (rh[j] - rl[j]) / (2 * h);
      CHECK(std::abs(vjp[i] - fd) < 1e-4 * std::max(1.0, std::abs(fd)));
    }
  }
}

TEST_CASE("spearman loss closed forms") {
  CHECK(spearman_loss({1.0, 2.0}, {1.0, 2.0}, {{0, 0}, {1, 1}}) == doctest::Approx(0.0));
  CHECK(spearman_loss({1.0, 2.0}, {2.0, 1.0}, {{0, 0}, {1, 1}}) == doctest::Approx(1.0));
  CHECK(spearman_loss({1.0}, {5.0}, {}) == doctest::Approx(0.0));  // warned, zero
  CHECK_THROWS_AS(spearman_loss({1.0}, {1.0}, {{0, 5}}), std::out_of_range);
}

TEST_CASE("pull loss closed forms") {
  // Matched at rank 1 and unmatched at rank N contribute nothing.
  CHECK(pull_loss({1.0, 2.0}, {true, false}) == doctest::Approx(0.0));
  // A matched keypoint at rank N contributes N-1 (before the 1/N mean).
  const int n = 5;
  std::vector<double> ranks = {5.0, 1.0, 2.0, 3.0, 4.0};
  std::vector<bool> matched = {true, false, false, false, false};
  double expected = (n - 1);                               // matched at rank N
  expected += (n - 1) + (n - 2) + (n - 3) + (n - 4);       // unmatched below N
  CHECK(pull_loss(ranks, matched) == doctest::Approx(expected / n));
}

TEST_CASE("combined loss reduces to spearman at lambda zero") {
  const std::vector<double> sa = {3.0, 1.0, 2.0};
  const std::vector<double> sb = {2.5, 0.5, 1.5};
  const auto lg = ranker_loss(sa, sb, {{0, 0}, {2, 2}}, 1e-6, 0.0);
  const auto ra = soft_rank(sa, 1e-6).ranks;
  const auto rb = soft_rank(sb, 1e-6).ranks;
  CHECK(lg.loss == doctest::Approx(spearman_loss(ra, rb, {{0, 0}, {2, 2}})).epsilon(1e-9));
  CHECK_THROWS_AS(ranker_loss(sa, sb, {{0, 9}}, 1.0, 1.0), std::out_of_range);
}

TEST_CASE("perfect hard ranking leaves only the interior pull residual") {
  // Matched points occupy ranks 1..k identically in both views, unmatched
  // k+1..N. Spearman = 0; the pull term is sum_{i=1..k}(i-1) per view,
  // averaged over the 2N keypoints.
  const int n = 6, k = 4;
  std::vector<double> scores(n);
  for (int i = 0; i < n; ++i) scores[i] = static_cast<double>(n - i);  // ranks 1..n in order
  std::vector<std::pair<int, int>> matches;
  for (int i = 0; i < k; ++i) matches.emplace_back(i, i);

  const auto lg = ranker_loss(scores, scores, matches, 1e-7, 1.0);
  double pull_sum = 0.0;
  for (int i = 1; i <= k; ++i) pull_sum += i - 1;          // matched tail
  // Unmatched points already sit at ranks k+1..n; distance to rank n.
  for (int i = k + 1; i <= n; ++i) pull_sum += n - i;
  const double expected = 2.0 * pull_sum / (2.0 * n);
  CHECK(lg.spearman == doctest::Approx(0.0).epsilon(1e-6));
  CHECK(lg.loss == doctest::Approx(expected).epsilon(1e-4));
}

TEST_CASE("combined loss gradient matches finite differences on N=32") {
  Rng rng(4);
  const int n = 32;
  std::vector<double> sa(n), sb(n);
  for (double& v : sa) v = rng.normal();
  for (double& v : sb) v = rng.normal();
  std::vector<std::pair<int, int>> matches;
  for (int i = 0; i < 12; ++i) {
    matches.emplace_back(static_cast<int>(rng.uniform_int(0, n - 1)),
                         static_cast<int>(rng.uniform_int(0, n - 1)));
  }
  const double eps_rank = 1.0, lambda = 1.0;
  const auto lg = ranker_loss(sa, sb, matches, eps_rank, lambda);

  const double h = 1e-6;
  for (int i = 0; i < n; ++i) {
    auto hi = sa, lo = sa;
    hi[i] += h;
    lo[i] -= h;
    const double fd = (ranker_loss(hi, sb, matches, eps_rank, lambda).loss -
                       ranker_loss(lo, sb, matches, eps_rank, lambda).loss) /
                      (2 * h);
    CHECK(std::abs(lg.grad_scores_a[i] - fd) < 1e-4 * std::max(1.0, std::abs(fd)));
  }
  for (int i = 0; i < n; ++i) {
    auto hi = sb, lo = sb;
    hi[i] += h;
    lo[i] -= h;
    const double fd = (ranker_loss(sa, hi, matches, eps_rank, lambda).loss -
                       ranker_loss(sa, lo, matches, eps_rank, lambda).loss) /
                      (2 * h);
    CHECK(std::abs(lg.grad_scores_b[i] - fd) < 1e-4 * std::max(1.0, std::abs(fd)));
  }
}

TEST_CASE("rank-ordered truncation agrees with a full sort and nests") {
  Rng rng(5);
  detector::KeypointSet kps;
  const int n = 40;
  std::vector<double> scores(n);
  for (int i = 0; i < n; ++i) {
    kps.coords.emplace_back(i, 2 * i);
    kps.grid.emplace_back(i, 2 * i);
    kps.probs.push_back(rng.uniform());
    scores[i] = rng.uniform_int(0, 9);  // coarse values force ties
  }

  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return scores[a] > scores[b]; });

  std::vector<Eigen::Vector2i> prev;
  for (int budget = 1; budget <= n; ++budget) {
    const auto t = rank_order_truncate(kps, scores, budget);
    REQUIRE(static_cast<int>(t.size()) == budget);
    for (int i = 0; i < budget; ++i) CHECK(t.grid[i] == kps.grid[order[i]]);
    // Budgets nest: every previous selection stays selected.
    for (size_t i = 0; i < prev.size(); ++i) CHECK(t.grid[i] == prev[i]);
    prev = t.grid;
  }
  CHECK(rank_order_truncate(kps, scores, n + 50).size() == static_cast<size_t>(n));
  CHECK_THROWS_AS(rank_order_truncate(kps, scores, 0), std::invalid_argument);
}
