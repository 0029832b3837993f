#pragma once

#include <iostream>
#include <string>
#include <vector>

#include <opencv2/core.hpp>

#include "dloseg/adapter.hpp"
#include "dloseg/backbones.hpp"
#include "dloseg/dataset.hpp"
#include "dloseg/metrics.hpp"
#include "dloseg/positional_encoding.hpp"

namespace dloseg {

// One eval-mode pass over a single image: semantic grid -> prompt encoding ->
// decode -> classification. Deterministic for fixed weights.
struct ForwardResult {
  SemanticGrid grid;
  PromptSet prompts;
  MaskBundle bundle;
  ClassifierOutput cls;
};

inline ForwardResult run_forward(StubBackbones& backbones, Adapter& adapter,
                                 const cv::Mat& image, const std::string& text) {
  ForwardResult r;
  r.grid = backbones.semantic_grid(image, text);
  ImageEmbedding emb = backbones.image_embedding(image);
  r.prompts = adapter.encoder.encode(r.grid, backbones.dpe_grid());
  r.bundle = backbones.decode(emb, r.prompts);
  r.cls = adapter.classifier.classify(r.prompts.tokens, r.bundle.mask_tokens);
  return r;
}

inline std::vector<MaskArray> record_gt_arrays(const InstanceRecord& rec) {
  std::vector<MaskArray> gts;
  for (const cv::Mat& m : rec.submasks) gts.push_back(mask_to_array(m));
  return gts;
}

// Evaluates a whole split. Records without ground truth are skipped with a
// warning; everything else contributes one per-image row.
inline EvalReport evaluate_split(StubBackbones& backbones, Adapter& adapter,
                                 const DatasetManifest& manifest, EvalMode mode,
                                 const std::string& text,
                                 const EvalProtocol& proto = {}) {
  std::vector<PerImageEval> rows;
  int skipped = 0;
  for (const std::string& id : manifest.ids) {
    InstanceRecord rec = load_record(manifest, id);
    if (rec.submasks.empty()) {
      std::cerr << "[dloseg] warning: skipping record " << id << " (no submasks)\n";
      ++skipped;
      continue;
    }
    ForwardResult f = run_forward(backbones, adapter, rec.image, text);
    ImageEval ev = evaluate_image(f.bundle, record_gt_arrays(rec), mode,
                                  f.cls.keep_flags, proto);
    rows.push_back({id, ev.miou, ev.dice, ev.n_gt, ev.n_kept});
  }
  require(!rows.empty(), "evaluate_split: no evaluable records in split");
  return aggregate(rows, mode, proto, skipped);
}

// Classifier label accuracy against matching-derived labels, averaged over a
// split; mirrors the validation-curve bookkeeping.
inline double classifier_accuracy(StubBackbones& backbones, Adapter& adapter,
                                  const DatasetManifest& manifest,
                                  const std::string& text,
                                  const EvalProtocol& proto = {}) {
  double correct = 0.0, total = 0.0;
  for (const std::string& id : manifest.ids) {
    InstanceRecord rec = load_record(manifest, id);
    if (rec.submasks.empty()) continue;
    ForwardResult f = run_forward(backbones, adapter, rec.image, text);
    std::vector<MaskArray> gts_low;
    for (const cv::Mat& m : rec.submasks)
      gts_low.push_back(downsample_binary(mask_to_array(m), f.bundle.native_h,
                                          f.bundle.native_w));
    MatchResult match =
        solve_assignment(cost_matrix(f.bundle.masks, gts_low, proto.cost_cfg));
    Eigen::ArrayXd labels = labels_from_matching(match, f.bundle.count());
    for (int i = 0; i < f.bundle.count(); ++i) {
      correct += (f.cls.keep_flags[i] ? 1.0 : 0.0) == labels[i] ? 1.0 : 0.0;
      total += 1.0;
    }
  }
  return total == 0.0 ? 0.0 : correct / total;
}

}  // namespace dloseg
