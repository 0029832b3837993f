#pragma once

#include <iostream>
#include <vector>

#include <Eigen/Core>

#include "dloseg/autodiff.hpp"
#include "dloseg/common.hpp"

namespace dloseg {

// Loss constants. Defaults follow the training recipe: focal and dice are
// combined 20:1 and positive classifier labels are weighted 3x.
struct LossConfig {
  double focal_weight = 20.0;
  double dice_weight = 1.0;
  double focal_gamma = 2.0;
  double focal_alpha = 0.25;
  double dice_epsilon = 1.0;
  double bce_pos_weight = 3.0;
  double lambda_cls = 1.0;
};

namespace detail {
constexpr double kProbClamp = 1e-7;

inline void check_same_shape(const Eigen::ArrayXXd& a, const Eigen::ArrayXXd& b,
                             const char* what) {
  require_shape(a.rows() == b.rows() && a.cols() == b.cols(), what);
}
}  // namespace detail

// Mean-reduced focal loss. `pred` holds probabilities, `gt` is 0/1.
inline double focal_loss(const Eigen::ArrayXXd& pred, const Eigen::ArrayXXd& gt,
                         double alpha = 0.25, double gamma = 2.0) {
  detail::check_same_shape(pred, gt, "focal_loss: shape mismatch");
  Eigen::ArrayXXd p = pred.max(detail::kProbClamp).min(1.0 - detail::kProbClamp);
  Eigen::ArrayXXd pt = gt * p + (1.0 - gt) * (1.0 - p);
  Eigen::ArrayXXd a = alpha * gt + (1.0 - alpha) * (1.0 - gt);
  return (a * (1.0 - pt).pow(gamma) * (-pt.log())).mean();
}

// 1 - (2*sum(p*g) + eps) / (sum(p) + sum(g) + eps). Exactly zero when pred
// equals a binary gt, and zero on the empty-empty pair.
inline double dice_loss(const Eigen::ArrayXXd& pred, const Eigen::ArrayXXd& gt,
                        double eps = 1.0) {
  detail::check_same_shape(pred, gt, "dice_loss: shape mismatch");
  const double inter = (pred * gt).sum();
  return 1.0 - (2.0 * inter + eps) / (pred.sum() + gt.sum() + eps);
}

inline double combined_pair_loss(const Eigen::ArrayXXd& pred,
                                 const Eigen::ArrayXXd& gt,
                                 const LossConfig& cfg = {}) {
  return cfg.focal_weight * focal_loss(pred, gt, cfg.focal_alpha, cfg.focal_gamma) +
         cfg.dice_weight * dice_loss(pred, gt, cfg.dice_epsilon);
}

// Mean over matched (pred, gt) mask pairs of the 20:1 focal+dice combination.
inline double segmentation_loss(const std::vector<Eigen::ArrayXXd>& preds,
                                const std::vector<Eigen::ArrayXXd>& gts,
                                const LossConfig& cfg = {}) {
  require(preds.size() == gts.size(), "segmentation_loss: pair count mismatch");
  if (preds.empty()) {
    std::cerr << "[dloseg] warning: segmentation loss over zero matched pairs\n";
    return 0.0;
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i)
    acc += combined_pair_loss(preds[i], gts[i], cfg);
  return acc / static_cast<double>(preds.size());
}

// Mean over items of -w*y*log(sigmoid(l)) - (1-y)*log(1-sigmoid(l)) with
// w = pos_weight, computed through softplus for stability.
inline double weighted_bce(const Eigen::ArrayXd& logits, const Eigen::ArrayXd& labels,
                           double pos_weight = 3.0) {
  require_shape(logits.size() == labels.size(), "weighted_bce: length mismatch");
  if (logits.size() == 0) return 0.0;
  auto softplus = [](double x) {
    return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
  };
  double acc = 0.0;
  for (Eigen::Index i = 0; i < logits.size(); ++i)
    acc += pos_weight * labels[i] * softplus(-logits[i]) +
           (1.0 - labels[i]) * softplus(logits[i]);
  return acc / static_cast<double>(logits.size());
}

inline double total_loss(double seg, double cls, double lambda_cls = 1.0) {
  return seg + lambda_cls * cls;
}

// ---------------------------------------------------------------------------
// Differentiable versions used by the trainer. Ground truth enters as a
// constant; gradients flow into the prediction only.

inline ad::Var focal_loss_graph(const ad::Var& pred, const ad::Mat& gt,
                                double alpha = 0.25, double gamma = 2.0) {
  require_shape(pred.rows() == gt.rows() && pred.cols() == gt.cols(),
                "focal_loss_graph: shape mismatch");
  ad::Var p = ad::clamp(pred, detail::kProbClamp, 1.0 - detail::kProbClamp);
  // pt = y*p + (1-y)*(1-p) = (2y-1)*p + (1-y)
  ad::Mat two_y_minus_1 = (2.0 * gt.array() - 1.0).matrix();
  ad::Mat one_minus_y = (1.0 - gt.array()).matrix();
  ad::Var pt = ad::add_elem_const(ad::mul_elem_const(p, two_y_minus_1), one_minus_y);
  ad::Var q = ad::affine(pt, -1.0, 1.0);  // 1 - pt
  ad::Mat a = (alpha * gt.array() + (1.0 - alpha) * (1.0 - gt.array())).matrix();
  ad::Var per_pixel = ad::mul_elem_const(
      ad::hadamard(ad::pow_const(q, gamma), ad::scale(ad::vlog(pt), -1.0)), a);
  return ad::mean_all(per_pixel);
}

inline ad::Var dice_loss_graph(const ad::Var& pred, const ad::Mat& gt,
                               double eps = 1.0) {
  require_shape(pred.rows() == gt.rows() && pred.cols() == gt.cols(),
                "dice_loss_graph: shape mismatch");
  ad::Var inter = ad::sum_all(ad::mul_elem_const(pred, gt));
  ad::Var num = ad::affine(inter, 2.0, eps);
  ad::Var den = ad::affine(ad::sum_all(pred), 1.0, gt.sum() + eps);
  return ad::affine(ad::divide(num, den), -1.0, 1.0);
}

inline ad::Var combined_pair_loss_graph(const ad::Var& pred, const ad::Mat& gt,
                                        const LossConfig& cfg = {}) {
  ad::Var f = focal_loss_graph(pred, gt, cfg.focal_alpha, cfg.focal_gamma);
  ad::Var d = dice_loss_graph(pred, gt, cfg.dice_epsilon);
  return ad::add(ad::scale(f, cfg.focal_weight), ad::scale(d, cfg.dice_weight));
}

// logits: N x 1 variable; labels: length-N 0/1 vector.
inline ad::Var weighted_bce_graph(const ad::Var& logits, const Eigen::ArrayXd& labels,
                                  double pos_weight = 3.0) {
  require_shape(logits.cols() == 1 && logits.rows() == labels.size(),
                "weighted_bce_graph: logits must be N x 1 matching labels");
  ad::Mat wy = (pos_weight * labels).matrix();
  ad::Mat one_minus_y = (1.0 - labels).matrix();
  ad::Var pos = ad::mul_elem_const(ad::softplus(ad::scale(logits, -1.0)), wy);
  ad::Var neg = ad::mul_elem_const(ad::softplus(logits), one_minus_y);
  return ad::mean_all(ad::add(pos, neg));
}

}  // namespace dloseg
