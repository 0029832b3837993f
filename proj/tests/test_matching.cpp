#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <vector>

#include "dloseg/matching.hpp"
#include "dloseg/random.hpp"

using namespace dloseg;

namespace {

// Exhaustive oracle: enumerate every injective assignment of size min(N, M),
// pick the minimal total, break ties by the lexicographically smallest pair
// list. Only viable for small matrices.
struct BruteResult {
  std::vector<std::pair<int, int>> pairs;
  double total = 0.0;
};

void enumerate(const Eigen::MatrixXd& cost, int next_pred, int remaining,
               std::vector<char>& gt_used, std::vector<std::pair<int, int>>& current,
               BruteResult& best, bool& has_best) {
  const int n = static_cast<int>(cost.rows());
  const int m = static_cast<int>(cost.cols());
  if (remaining == 0) {
    double total = 0.0;
    for (auto& p : current) total += cost(p.first, p.second);
    const bool better =
        !has_best || total < best.total - 1e-12 ||
        (std::abs(total - best.total) <= 1e-9 * (1.0 + std::abs(best.total)) &&
         current < best.pairs);
    if (better) {
      best.pairs = current;
      best.total = total;
      has_best = true;
    }
    return;
  }
  if (n - next_pred < remaining) return;
  // skip this pred entirely
  enumerate(cost, next_pred + 1, remaining, gt_used, current, best, has_best);
  for (int j = 0; j < m; ++j) {
    if (gt_used[j]) continue;
    gt_used[j] = 1;
    current.emplace_back(next_pred, j);
    enumerate(cost, next_pred + 1, remaining - 1, gt_used, current, best, has_best);
    current.pop_back();
    gt_used[j] = 0;
  }
}

BruteResult brute_force(const Eigen::MatrixXd& cost) {
  BruteResult best;
  bool has_best = false;
  std::vector<char> gt_used(cost.cols(), 0);
  std::vector<std::pair<int, int>> current;
  enumerate(cost, 0, static_cast<int>(std::min(cost.rows(), cost.cols())), gt_used,
            current, best, has_best);
  return best;
}

MaskArray random_binary(Rng& rng, int r, int c, double p = 0.4) {
  MaskArray a(r, c);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) a(i, j) = rng.bernoulli(p) ? 1.0 : 0.0;
  return a;
}

MaskArray random_probs(Rng& rng, int r, int c) {
  MaskArray a(r, c);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) a(i, j) = rng.uniform();
  return a;
}

}  // namespace

TEST_CASE("hand-solved 2x2 assignment") {
  Eigen::MatrixXd cost(2, 2);
  cost << 1, 2, 3, 1;
  MatchResult r = solve_assignment(cost);
  REQUIRE(r.pairs.size() == 2);
  CHECK(r.pairs[0] == std::make_pair(0, 0));
  CHECK(r.pairs[1] == std::make_pair(1, 1));
  CHECK(r.total_cost == doctest::Approx(2.0));
}

TEST_CASE("diagonal-zero matrix maps to the identity assignment") {
  Eigen::MatrixXd cost = Eigen::MatrixXd::Ones(5, 5);
  cost.diagonal().setZero();
  MatchResult r = solve_assignment(cost);
  for (int i = 0; i < 5; ++i) CHECK(r.pairs[i] == std::make_pair(i, i));
  CHECK(r.total_cost == doctest::Approx(0.0));
}

TEST_CASE("rectangular: 11 preds and 4 gts give 4 pairs and 7 unmatched") {
  Rng rng(1);
  Eigen::MatrixXd cost = rng.normal_matrix(11, 4).array().abs().matrix();
  MatchResult r = solve_assignment(cost);
  CHECK(r.pairs.size() == 4);
  CHECK(r.unmatched_preds.size() == 7);
  CHECK(r.unmatched_gts.empty());
}

TEST_CASE("empty matrices give empty results") {
  MatchResult r = solve_assignment(Eigen::MatrixXd(0, 0));
  CHECK(r.pairs.empty());
  r = solve_assignment(Eigen::MatrixXd(3, 0));
  CHECK(r.pairs.empty());
  CHECK(r.unmatched_preds.size() == 3);
}

TEST_CASE("solver equals exhaustive search on random matrices") {
  Rng rng(42);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = rng.uniform_int(1, 6);
    const int m = rng.uniform_int(1, 6);
    Eigen::MatrixXd cost(n, m);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < m; ++j) cost(i, j) = rng.uniform(0.0, 10.0);
    MatchResult fast = solve_assignment(cost);
    BruteResult slow = brute_force(cost);
    CHECK(std::abs(fast.total_cost - slow.total) < 1e-9 * (1.0 + slow.total));
    REQUIRE(fast.pairs.size() == slow.pairs.size());
    for (std::size_t k = 0; k < fast.pairs.size(); ++k)
      CHECK(fast.pairs[k] == slow.pairs[k]);
  }
}

TEST_CASE("ties break toward the lowest pred then gt index") {
  Eigen::MatrixXd cost = Eigen::MatrixXd::Ones(3, 2);  // all assignments equal
  MatchResult r = solve_assignment(cost);
  REQUIRE(r.pairs.size() == 2);
  CHECK(r.pairs[0] == std::make_pair(0, 0));
  CHECK(r.pairs[1] == std::make_pair(1, 1));
  CHECK(r.unmatched_preds == std::vector<int>{2});
}

TEST_CASE("labels from matching follow the matched-is-positive rule") {
  MatchResult r;
  r.pairs = {{0, 0}, {2, 1}};
  Eigen::ArrayXd labels = labels_from_matching(r, 4);
  CHECK(labels[0] == 1.0);
  CHECK(labels[1] == 0.0);
  CHECK(labels[2] == 1.0);
  CHECK(labels[3] == 0.0);
}

TEST_CASE("label counts equal min(N, M) on random problems") {
  Rng rng(7);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = rng.uniform_int(1, 11);
    const int m = rng.uniform_int(0, 10);
    Eigen::MatrixXd cost(n, m);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < m; ++j) cost(i, j) = rng.uniform(0.0, 5.0);
    Eigen::ArrayXd labels = labels_from_matching(solve_assignment(cost), n);
    CHECK(static_cast<int>(labels.sum()) == std::min(n, m));
  }
}

TEST_CASE("cost matrix: perfect matches cost zero, disjoint pairs follow dice") {
  Rng rng(11);
  MaskArray gt = random_binary(rng, 16, 16);
  std::vector<MaskArray> preds = {gt};
  std::vector<MaskArray> gts = {gt};
  Eigen::MatrixXd c = cost_matrix(preds, gts);
  CHECK(c(0, 0) < 1e-9);

  // disjoint 10-pixel masks: the dice component is 1 - 1/21
  MaskArray p = MaskArray::Zero(4, 10), g = MaskArray::Zero(4, 10);
  p.row(0) = 1.0;
  g.row(2) = 1.0;
  CHECK(dice_loss(p, g) == doctest::Approx(1.0 - 1.0 / 21.0));
  const double expected = 20.0 * focal_loss(p, g) + dice_loss(p, g);
  CHECK(cost_matrix({p}, {g})(0, 0) == doctest::Approx(expected));
}

TEST_CASE("cost matrix rejects resolution mismatches") {
  MaskArray a = MaskArray::Zero(4, 4), b = MaskArray::Zero(5, 5);
  a(0, 0) = 1.0;
  b(0, 0) = 1.0;
  CHECK_THROWS_AS(cost_matrix({a}, {b}), ShapeError);
}

TEST_CASE("cost is monotone in overlap improvements") {
  Rng rng(13);
  for (int trial = 0; trial < 50; ++trial) {
    MaskArray gt = random_binary(rng, 10, 10, 0.3);
    MaskArray pred = random_binary(rng, 10, 10, 0.3);
    const double before = combined_pair_loss(pred, gt);

    MaskArray improved = pred;
    bool changed = false;
    for (int i = 0; i < 10 && !changed; ++i)
      for (int j = 0; j < 10 && !changed; ++j) {
        if (gt(i, j) == 1.0 && improved(i, j) == 0.0) {
          improved(i, j) = 1.0;  // add a true positive
          changed = true;
        } else if (gt(i, j) == 0.0 && improved(i, j) == 1.0) {
          improved(i, j) = 0.0;  // drop a false positive
          changed = true;
        }
      }
    if (!changed) continue;
    CHECK(combined_pair_loss(improved, gt) <= before + 1e-12);
  }
}

TEST_CASE("oracle filter keeps exactly the matched preds with partners") {
  Rng rng(17);
  std::vector<MaskArray> gts;
  for (int j = 0; j < 4; ++j) gts.push_back(random_binary(rng, 12, 12));
  std::vector<MaskArray> preds;
  for (int i = 0; i < 11; ++i) preds.push_back(random_probs(rng, 12, 12));
  OracleSelection sel = oracle_filter(preds, gts);
  CHECK(sel.kept_pred_indices.size() == 4);
  std::vector<int> partners = sel.gt_partner;
  std::sort(partners.begin(), partners.end());
  CHECK(partners == std::vector<int>{0, 1, 2, 3});
}

TEST_CASE("oracle filter keeps the cheaper of two near-duplicates") {
  Rng rng(19);
  MaskArray gt = random_binary(rng, 12, 12, 0.3);
  MaskArray good = gt;
  MaskArray near = gt;
  // corrupt a few pixels so `near` costs slightly more
  int flips = 0;
  for (int i = 0; i < 12 && flips < 3; ++i)
    for (int j = 0; j < 12 && flips < 3; ++j)
      if (gt(i, j) == 0.0) {
        near(i, j) = 1.0;
        ++flips;
      }
  OracleSelection sel = oracle_filter({near, good}, {gt});
  REQUIRE(sel.kept_pred_indices.size() == 1);
  CHECK(sel.kept_pred_indices[0] == 1);
}

TEST_CASE("oracle kept set is permutation invariant up to relabeling") {
  Rng rng(23);
  std::vector<MaskArray> gts = {random_binary(rng, 10, 10), random_binary(rng, 10, 10)};
  std::vector<MaskArray> preds;
  for (int i = 0; i < 6; ++i) preds.push_back(random_probs(rng, 10, 10));

  OracleSelection base = oracle_filter(preds, gts);
  // reversed pred order
  std::vector<MaskArray> rev(preds.rbegin(), preds.rend());
  OracleSelection sel = oracle_filter(rev, gts);
  auto remap = [&](int i) { return static_cast<int>(preds.size()) - 1 - i; };
  std::vector<int> base_set = base.kept_pred_indices;
  std::vector<int> mapped;
  for (int i : sel.kept_pred_indices) mapped.push_back(remap(i));
  std::sort(base_set.begin(), base_set.end());
  std::sort(mapped.begin(), mapped.end());
  CHECK(base_set == mapped);
}
