#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "dloseg/common.hpp"
#include "dloseg/losses.hpp"

namespace dloseg {

using MaskArray = Eigen::ArrayXXd;

// Injective assignment between predicted masks and ground-truth submasks.
// `pairs` is sorted by pred index and holds min(N_pred, N_gt) entries.
struct MatchResult {
  std::vector<std::pair<int, int>> pairs;  // (pred_index, gt_index)
  std::vector<double> pair_costs;
  std::vector<int> unmatched_preds;
  std::vector<int> unmatched_gts;
  double total_cost = 0.0;

  bool pred_matched(int i) const {
    for (const auto& p : pairs)
      if (p.first == i) return true;
    return false;
  }
};

// Pairwise matching cost: the training segmentation loss (20:1 focal:dice by
// default) evaluated on every (pred, gt) combination.
inline Eigen::MatrixXd cost_matrix(const std::vector<MaskArray>& pred_probs,
                                   const std::vector<MaskArray>& gts,
                                   const LossConfig& cfg = {}) {
  Eigen::MatrixXd cost(pred_probs.size(), gts.size());
  for (std::size_t i = 0; i < pred_probs.size(); ++i) {
    for (std::size_t j = 0; j < gts.size(); ++j) {
      require_shape(pred_probs[i].rows() == gts[j].rows() &&
                        pred_probs[i].cols() == gts[j].cols(),
                    "cost_matrix: mask resolution mismatch");
      cost(i, j) = combined_pair_loss(pred_probs[i], gts[j], cfg);
    }
  }
  return cost;
}

namespace detail {

// Minimal total cost of assigning every element of the smaller index set,
// via the O(n^3) potentials formulation of the Kuhn-Munkres algorithm.
inline double assignment_min_cost(const Eigen::MatrixXd& cost,
                                  const std::vector<int>& rows,
                                  const std::vector<int>& cols) {
  const int n = static_cast<int>(std::min(rows.size(), cols.size()));
  if (n == 0) return 0.0;
  const bool flip = rows.size() > cols.size();
  const std::vector<int>& small = flip ? cols : rows;
  const std::vector<int>& big = flip ? rows : cols;
  auto at = [&](int si, int bj) {
    return flip ? cost(big[bj], small[si]) : cost(small[si], big[bj]);
  };

  const int ns = static_cast<int>(small.size());
  const int nb = static_cast<int>(big.size());
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(ns + 1, 0.0), v(nb + 1, 0.0);
  std::vector<int> p(nb + 1, 0), way(nb + 1, 0);
  for (int i = 1; i <= ns; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(nb + 1, inf);
    std::vector<char> used(nb + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= nb; ++j) {
        if (used[j]) continue;
        const double cur = at(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= nb; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  double total = 0.0;
  for (int j = 1; j <= nb; ++j)
    if (p[j] != 0) total += at(p[j] - 1, j - 1);
  return total;
}

}  // namespace detail

// Minimal-total-cost injective assignment of size min(N, M). Among equally
// optimal assignments the one whose (pred, gt) pair list is lexicographically
// smallest wins: lowest pred index first, then lowest gt index.
inline MatchResult solve_assignment(const Eigen::MatrixXd& cost) {
  const int n_pred = static_cast<int>(cost.rows());
  const int n_gt = static_cast<int>(cost.cols());
  MatchResult res;
  const int k = std::min(n_pred, n_gt);
  if (k == 0) {
    for (int i = 0; i < n_pred; ++i) res.unmatched_preds.push_back(i);
    for (int j = 0; j < n_gt; ++j) res.unmatched_gts.push_back(j);
    return res;
  }
  require(cost.allFinite(), "solve_assignment: costs must be finite");

  std::vector<int> all_preds(n_pred), all_gts(n_gt);
  for (int i = 0; i < n_pred; ++i) all_preds[i] = i;
  for (int j = 0; j < n_gt; ++j) all_gts[j] = j;
  const double best = detail::assignment_min_cost(cost, all_preds, all_gts);
  const double eps = 1e-9 * (1.0 + std::abs(best));

  // Fix pairs one at a time in lexicographic order, each time verifying via a
  // sub-assignment solve that an optimal completion still exists.
  std::vector<char> gt_used(n_gt, 0);
  double target = best;
  int remaining = k;
  int next_pred = 0;
  while (remaining > 0) {
    bool fixed = false;
    for (int i = next_pred; i < n_pred && !fixed; ++i) {
      if (n_pred - i < remaining) break;  // not enough preds left
      for (int j = 0; j < n_gt && !fixed; ++j) {
        if (gt_used[j]) continue;
        std::vector<int> rest_preds;
        for (int r = i + 1; r < n_pred; ++r) rest_preds.push_back(r);
        std::vector<int> rest_gts;
        for (int c = 0; c < n_gt; ++c)
          if (!gt_used[c] && c != j) rest_gts.push_back(c);
        const double completion =
            detail::assignment_min_cost(cost, rest_preds, rest_gts);
        if (std::abs(cost(i, j) + completion - target) <= eps) {
          res.pairs.emplace_back(i, j);
          res.pair_costs.push_back(cost(i, j));
          gt_used[j] = 1;
          target -= cost(i, j);
          next_pred = i + 1;
          --remaining;
          fixed = true;
        }
      }
    }
    require(fixed, "solve_assignment: internal error, no consistent completion");
  }

  res.total_cost = best;
  std::vector<char> pred_used(n_pred, 0);
  for (const auto& pr : res.pairs) pred_used[pr.first] = 1;
  for (int i = 0; i < n_pred; ++i)
    if (!pred_used[i]) res.unmatched_preds.push_back(i);
  for (int j = 0; j < n_gt; ++j)
    if (!gt_used[j]) res.unmatched_gts.push_back(j);
  return res;
}

// A mask that matches is labeled 1, every other mask 0.
inline Eigen::ArrayXd labels_from_matching(const MatchResult& result, int n_pred) {
  Eigen::ArrayXd labels = Eigen::ArrayXd::Zero(n_pred);
  for (const auto& pr : result.pairs) {
    require(pr.first >= 0 && pr.first < n_pred,
            "labels_from_matching: pred index out of range");
    labels[pr.first] = 1.0;
  }
  return labels;
}

// Ground-truth-assisted filtering: keep exactly the matched predictions,
// remembering each one's ground-truth partner for metric computation.
struct OracleSelection {
  std::vector<int> kept_pred_indices;        // ascending
  std::vector<int> gt_partner;               // parallel to kept_pred_indices
};

inline OracleSelection oracle_filter(const std::vector<MaskArray>& pred_probs,
                                     const std::vector<MaskArray>& gts,
                                     const LossConfig& cfg = {}) {
  OracleSelection sel;
  if (pred_probs.empty() || gts.empty()) return sel;
  MatchResult match = solve_assignment(cost_matrix(pred_probs, gts, cfg));
  for (const auto& pr : match.pairs) {
    sel.kept_pred_indices.push_back(pr.first);
    sel.gt_partner.push_back(pr.second);
  }
  return sel;
}

}  // namespace dloseg
