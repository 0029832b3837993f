#pragma once

#include <cmath>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dloseg/common.hpp"
#include "dloseg/matching.hpp"
#include "dloseg/raster.hpp"
#include "dloseg/types.hpp"

namespace dloseg {

// Intersection over union of two binary masks; the empty-empty pair counts
// as a perfect match.
inline double iou(const MaskArray& a, const MaskArray& b) {
  require_shape(a.rows() == b.rows() && a.cols() == b.cols(),
                "iou: resolution mismatch");
  double inter = 0.0, uni = 0.0;
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < a.cols(); ++j) {
      const bool pa = a(i, j) > 0.5, pb = b(i, j) > 0.5;
      inter += pa && pb;
      uni += pa || pb;
    }
  return uni == 0.0 ? 1.0 : inter / uni;
}

// 2|A∩B| / (|A| + |B|) on binary masks.
inline double dice_coefficient(const MaskArray& a, const MaskArray& b) {
  require_shape(a.rows() == b.rows() && a.cols() == b.cols(),
                "dice_coefficient: resolution mismatch");
  double inter = 0.0, total = 0.0;
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < a.cols(); ++j) {
      const bool pa = a(i, j) > 0.5, pb = b(i, j) > 0.5;
      inter += pa && pb;
      total += static_cast<double>(pa) + static_cast<double>(pb);
    }
  return total == 0.0 ? 1.0 : 2.0 * inter / total;
}

enum class EvalMode { Classifier, Oracle };

inline const char* eval_mode_name(EvalMode m) {
  return m == EvalMode::Oracle ? "oracle" : "classifier";
}

struct EvalProtocol {
  LossConfig cost_cfg;              // matching cost (training loss weights)
  double binarize_threshold = 0.5;  // probability-space decision boundary
  double keep_threshold = 0.5;      // classifier keep probability

  std::string fingerprint() const {
    nlohmann::json j = {{"protocol", "instance-matched-miou/union-dice"},
                        {"focal_weight", cost_cfg.focal_weight},
                        {"dice_weight", cost_cfg.dice_weight},
                        {"focal_gamma", cost_cfg.focal_gamma},
                        {"focal_alpha", cost_cfg.focal_alpha},
                        {"dice_epsilon", cost_cfg.dice_epsilon},
                        {"binarize_threshold", binarize_threshold},
                        {"keep_threshold", keep_threshold}};
    return hex64(fnv1a(j.dump()));
  }
};

struct ImageEval {
  double miou = 0.0;
  double dice = 0.0;
  int n_gt = 0;
  int n_kept = 0;
};

namespace detail {

// Scores a set of kept predictions against full-resolution ground truth.
// Matching runs at the decoder-native resolution; IoU and DICE are computed
// at image resolution on the upsampled, binarized masks.
inline ImageEval score_kept(const MaskBundle& bundle, const std::vector<int>& kept,
                            const std::vector<MaskArray>& gts_fullres,
                            const EvalProtocol& proto) {
  require(!gts_fullres.empty(), "score_kept: no ground-truth submasks");
  const int full_h = static_cast<int>(gts_fullres[0].rows());
  const int full_w = static_cast<int>(gts_fullres[0].cols());

  ImageEval ev;
  ev.n_gt = static_cast<int>(gts_fullres.size());
  ev.n_kept = static_cast<int>(kept.size());

  MaskArray gt_union = MaskArray::Zero(full_h, full_w);
  for (const MaskArray& g : gts_fullres) gt_union = gt_union.max(g);

  if (kept.empty()) {
    ev.miou = 0.0;
    ev.dice = 0.0;
    return ev;
  }

  std::vector<MaskArray> kept_lowres;
  std::vector<MaskArray> kept_full_bin;
  for (int idx : kept) {
    kept_lowres.push_back(bundle.masks[idx]);
    MaskArray up = upsample_bilinear(bundle.masks[idx], full_h, full_w);
    kept_full_bin.push_back((up >= proto.binarize_threshold).cast<double>());
  }
  std::vector<MaskArray> gts_lowres;
  for (const MaskArray& g : gts_fullres)
    gts_lowres.push_back(downsample_binary(g, bundle.native_h, bundle.native_w));

  MatchResult match =
      solve_assignment(cost_matrix(kept_lowres, gts_lowres, proto.cost_cfg));
  double iou_sum = 0.0;
  for (const auto& [ki, gj] : match.pairs)
    iou_sum += iou(kept_full_bin[ki], gts_fullres[gj]);
  ev.miou = iou_sum / static_cast<double>(ev.n_gt);

  MaskArray pred_union = MaskArray::Zero(full_h, full_w);
  for (const MaskArray& p : kept_full_bin) pred_union = pred_union.max(p);
  ev.dice = dice_coefficient(pred_union, gt_union);
  return ev;
}

}  // namespace detail

// Classifier mode scores the masks the classifier kept; Oracle mode replaces
// the classifier with ground-truth bipartite matching over all N masks.
inline ImageEval evaluate_image(const MaskBundle& bundle,
                                const std::vector<MaskArray>& gts_fullres,
                                EvalMode mode,
                                const std::vector<bool>& keep_flags = {},
                                const EvalProtocol& proto = {}) {
  std::vector<int> kept;
  if (mode == EvalMode::Oracle) {
    std::vector<MaskArray> gts_lowres;
    for (const MaskArray& g : gts_fullres)
      gts_lowres.push_back(downsample_binary(g, bundle.native_h, bundle.native_w));
    OracleSelection sel = oracle_filter(bundle.masks, gts_lowres, proto.cost_cfg);
    kept = sel.kept_pred_indices;
  } else {
    require(static_cast<int>(keep_flags.size()) == bundle.count(),
            "evaluate_image: keep flags must cover every mask");
    for (int i = 0; i < bundle.count(); ++i)
      if (keep_flags[i]) kept.push_back(i);
  }
  return detail::score_kept(bundle, kept, gts_fullres, proto);
}

struct PerImageEval {
  std::string id;
  double miou = 0.0;
  double dice = 0.0;
  int n_gt = 0;
  int n_kept = 0;
};

struct EvalReport {
  std::vector<PerImageEval> per_image;
  double miou_percent = 0.0;
  double dice_percent = 0.0;
  std::string mode;
  std::string config_fingerprint;
  int skipped_records = 0;
};

inline EvalReport aggregate(const std::vector<PerImageEval>& per_image,
                            EvalMode mode, const EvalProtocol& proto,
                            int skipped = 0) {
  require(!per_image.empty(), "aggregate: need at least one evaluated image");
  EvalReport r;
  r.per_image = per_image;
  double miou = 0.0, dice = 0.0;
  for (const PerImageEval& e : per_image) {
    miou += e.miou;
    dice += e.dice;
  }
  r.miou_percent = 100.0 * miou / static_cast<double>(per_image.size());
  r.dice_percent = 100.0 * dice / static_cast<double>(per_image.size());
  r.mode = eval_mode_name(mode);
  r.config_fingerprint = proto.fingerprint();
  r.skipped_records = skipped;
  return r;
}

inline nlohmann::json report_to_json(const EvalReport& r) {
  nlohmann::json j;
  j["mode"] = r.mode;
  j["config_fingerprint"] = r.config_fingerprint;
  j["aggregate"] = {{"miou_percent", r.miou_percent},
                    {"dice_percent", r.dice_percent}};
  j["skipped_records"] = r.skipped_records;
  j["per_image"] = nlohmann::json::array();
  for (const PerImageEval& e : r.per_image)
    j["per_image"].push_back({{"id", e.id},
                              {"miou", e.miou},
                              {"dice", e.dice},
                              {"n_gt", e.n_gt},
                              {"n_kept", e.n_kept}});
  return j;
}

inline std::string report_to_table(const EvalReport& r) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2);
  os << "mode: " << r.mode << "  fingerprint: " << r.config_fingerprint << "\n";
  os << std::setw(8) << "id" << std::setw(10) << "mIoU[%]" << std::setw(10)
     << "DICE[%]" << std::setw(7) << "n_gt" << std::setw(8) << "n_kept" << "\n";
  for (const PerImageEval& e : r.per_image)
    os << std::setw(8) << e.id << std::setw(10) << 100.0 * e.miou << std::setw(10)
       << 100.0 * e.dice << std::setw(7) << e.n_gt << std::setw(8) << e.n_kept
       << "\n";
  os << std::setw(8) << "mean" << std::setw(10) << r.miou_percent << std::setw(10)
     << r.dice_percent << "\n";
  return os.str();
}

}  // namespace dloseg
