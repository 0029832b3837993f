#pragma once

#include <algorithm>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "dloseg/common.hpp"
#include "dloseg/random.hpp"
#include "dloseg/raster.hpp"

namespace dloseg {

namespace fs = std::filesystem;

// One annotated image: RGB raster, per-instance binary submasks (values 0/1)
// and their pixelwise union as the semantic mask.
struct InstanceRecord {
  cv::Mat image;                  // 8UC3
  std::vector<cv::Mat> submasks;  // 8UC1, 0/1
  cv::Mat semantic_mask;          // 8UC1, 0/1
  std::string id;

  int height() const { return image.rows; }
  int width() const { return image.cols; }
};

enum class DefectClass {
  OrphanRgb,          // RGB file without a mask folder (or an empty one)
  MissingSemanticMask,
  EmptySubmask,       // all-black instance mask
  TooManySubmasks,    // more than 10 in paper-format data
  UnionMismatch,      // semantic mask disagrees with the submask union
  ResolutionMismatch,
  UnreadableRaster,
};

inline const char* defect_name(DefectClass c) {
  switch (c) {
    case DefectClass::OrphanRgb: return "orphan_rgb";
    case DefectClass::MissingSemanticMask: return "missing_semantic_mask";
    case DefectClass::EmptySubmask: return "empty_submask";
    case DefectClass::TooManySubmasks: return "too_many_submasks";
    case DefectClass::UnionMismatch: return "union_mismatch";
    case DefectClass::ResolutionMismatch: return "resolution_mismatch";
    case DefectClass::UnreadableRaster: return "unreadable_raster";
  }
  return "unknown";
}

struct Defect {
  std::string split;
  std::string id;
  DefectClass kind;
  std::string detail;
};

struct DatasetManifest {
  fs::path root;
  std::string split;
  std::vector<std::string> ids;  // sorted ascending
  std::map<std::string, int> submask_counts;
  std::vector<Defect> defects;  // scan-time defects (ids excluded from `ids`)

  fs::path rgb_path(const std::string& id) const {
    return root / split / "RGB" / (id + "_0001.png");
  }
  fs::path mask_dir(const std::string& id) const {
    return root / split / "Masks" / id;
  }
  fs::path semantic_path(const std::string& id) const {
    return root / split / "Masks" / (id + "_mask.png");
  }
  bool contains(const std::string& id) const {
    return std::binary_search(ids.begin(), ids.end(), id);
  }
};

namespace detail {
inline std::vector<fs::path> sorted_pngs(const fs::path& dir) {
  std::vector<fs::path> out;
  if (!fs::exists(dir)) return out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".png")
      out.push_back(e.path());
  std::sort(out.begin(), out.end(),
            [](const fs::path& a, const fs::path& b) { return a.filename() < b.filename(); });
  return out;
}
}  // namespace detail

// Walks `<root>/<split>/RGB`, pairing every `<id>_0001.png` with its mask
// folder and semantic mask. Ids with an RGB file but no usable masks are
// recorded as defects rather than aborting the scan.
inline DatasetManifest scan_dataset(const fs::path& root, const std::string& split) {
  if (split != "train" && split != "val" && split != "test")
    throw ConfigError("scan_dataset: split must be train, val or test, got '" + split + "'");
  const fs::path split_dir = root / split;
  const fs::path rgb_dir = split_dir / "RGB";
  if (!fs::exists(split_dir) || !fs::exists(rgb_dir))
    throw ConfigError("scan_dataset: missing directory " + rgb_dir.string());

  DatasetManifest m;
  m.root = root;
  m.split = split;
  for (const fs::path& p : detail::sorted_pngs(rgb_dir)) {
    const std::string name = p.filename().string();
    const auto us = name.find('_');
    if (us == std::string::npos) continue;
    const std::string id = name.substr(0, us);
    const fs::path mask_dir = split_dir / "Masks" / id;
    const int n_masks = static_cast<int>(detail::sorted_pngs(mask_dir).size());
    if (n_masks == 0) {
      m.defects.push_back({split, id, DefectClass::OrphanRgb,
                           "RGB file without submasks: " + name});
      continue;
    }
    if (!fs::exists(split_dir / "Masks" / (id + "_mask.png"))) {
      m.defects.push_back({split, id, DefectClass::MissingSemanticMask,
                           "no semantic mask for " + id});
      continue;
    }
    m.ids.push_back(id);
    m.submask_counts[id] = n_masks;
  }
  std::sort(m.ids.begin(), m.ids.end());
  return m;
}

// Loads one record. Submasks are binarized at 127 and ordered
// lexicographically by filename; rasters failing to decode raise IoError.
// Non-fatal oddities (more than 10 submasks) are appended to `warnings`.
inline InstanceRecord load_record(const DatasetManifest& manifest, const std::string& id,
                                  std::vector<std::string>* warnings = nullptr) {
  require(manifest.contains(id), "load_record: id not in manifest: " + id);
  InstanceRecord rec;
  rec.id = id;
  rec.image = cv::imread(manifest.rgb_path(id).string(), cv::IMREAD_COLOR);
  if (rec.image.empty())
    throw IoError("load_record: unreadable RGB for id " + id);

  const auto mask_files = detail::sorted_pngs(manifest.mask_dir(id));
  if (mask_files.size() > 10 && warnings)
    warnings->push_back("record " + id + " has " + std::to_string(mask_files.size()) +
                        " submasks; paper-format data caps at 10");
  for (const fs::path& p : mask_files) {
    cv::Mat raw = cv::imread(p.string(), cv::IMREAD_GRAYSCALE);
    if (raw.empty())
      throw IoError("load_record: unreadable submask " + p.string() + " for id " + id);
    if (raw.size() != rec.image.size())
      throw IoError("load_record: submask resolution mismatch for id " + id);
    cv::Mat bin;
    cv::threshold(raw, bin, 127, 1, cv::THRESH_BINARY);
    if (cv::countNonZero(bin) == 0)
      throw IoError("load_record: all-black submask " + p.filename().string() +
                    " for id " + id);
    rec.submasks.push_back(bin);
  }

  cv::Mat sem_raw = cv::imread(manifest.semantic_path(id).string(), cv::IMREAD_GRAYSCALE);
  if (sem_raw.empty())
    throw IoError("load_record: unreadable semantic mask for id " + id);
  if (sem_raw.size() != rec.image.size())
    throw IoError("load_record: semantic mask resolution mismatch for id " + id);
  cv::threshold(sem_raw, rec.semantic_mask, 127, 1, cv::THRESH_BINARY);
  return rec;
}

// Ground truth padded to the prompt capacity: N slots, real submasks flagged
// valid, the rest all-zero padding.
struct PaddedGroundTruth {
  std::vector<cv::Mat> masks;  // exactly N, 8UC1 0/1
  std::vector<bool> valid;

  int valid_count() const {
    return static_cast<int>(std::count(valid.begin(), valid.end(), true));
  }
};

inline PaddedGroundTruth pad_to_capacity(const InstanceRecord& record, int capacity) {
  require(!record.submasks.empty(),
          "pad_to_capacity: record has no submasks (violates dataset invariant)");
  require(static_cast<int>(record.submasks.size()) <= capacity,
          "pad_to_capacity: more submasks than capacity; truncate with "
          "truncate_to_largest first");
  PaddedGroundTruth out;
  for (const cv::Mat& m : record.submasks) {
    out.masks.push_back(m);
    out.valid.push_back(true);
  }
  while (static_cast<int>(out.masks.size()) < capacity) {
    out.masks.push_back(cv::Mat::zeros(record.image.size(), CV_8UC1));
    out.valid.push_back(false);
  }
  return out;
}

// Keeps the `capacity` largest-area submasks; used when a record carries more
// instances than the prompt cap.
inline InstanceRecord truncate_to_largest(const InstanceRecord& record, int capacity) {
  if (static_cast<int>(record.submasks.size()) <= capacity) return record;
  std::cerr << "[dloseg] warning: record " << record.id << " has "
            << record.submasks.size() << " submasks; keeping the " << capacity
            << " largest\n";
  std::vector<std::pair<int, int>> area_idx;  // (-area, index) for stable order
  for (std::size_t i = 0; i < record.submasks.size(); ++i)
    area_idx.emplace_back(-cv::countNonZero(record.submasks[i]), static_cast<int>(i));
  std::sort(area_idx.begin(), area_idx.end());
  area_idx.resize(capacity);
  std::sort(area_idx.begin(), area_idx.end(),
            [](auto& a, auto& b) { return a.second < b.second; });
  InstanceRecord out = record;
  out.submasks.clear();
  for (const auto& [neg_area, idx] : area_idx) out.submasks.push_back(record.submasks[idx]);
  return out;
}

// ---------------------------------------------------------------------------
// Fixture generation. Desk-scale stand-in for the rendered dataset: thick
// quadratic-Bezier "cables" in the four dataset colors on a flat background.

struct FixtureParams {
  int n_images = 3;
  int height = 128;
  int width = 128;
  int min_curves = 2;
  int max_curves = 3;
  int min_stroke = 3;
  int max_stroke = 9;
};

// Background distinct from all four cable colors so stub backbones can
// recover the semantic mask from pixels alone.
inline cv::Vec3b fixture_background() { return cv::Vec3b(40, 40, 40); }

inline const std::vector<cv::Vec3b>& fixture_palette() {
  static const std::vector<cv::Vec3b> colors = {
      cv::Vec3b(255, 255, 0),    // cyan (BGR)
      cv::Vec3b(255, 255, 255),  // white
      cv::Vec3b(0, 255, 255),    // yellow
      cv::Vec3b(0, 0, 0),        // black
  };
  return colors;
}

inline InstanceRecord render_fixture_record(Rng& rng, const FixtureParams& p,
                                            const std::string& id) {
  require(p.height >= 64 && p.width >= 64, "fixture images must be at least 64x64");
  require(p.max_curves <= 10, "fixture curve count capped at 10");
  InstanceRecord rec;
  rec.id = id;
  rec.image = cv::Mat(p.height, p.width, CV_8UC3, fixture_background());
  rec.semantic_mask = cv::Mat::zeros(p.height, p.width, CV_8UC1);

  const int n_curves = rng.uniform_int(p.min_curves, p.max_curves);
  for (int c = 0; c < n_curves; ++c) {
    const cv::Vec3b color = fixture_palette()[rng.uniform_int(0, 3)];
    const int stroke = rng.uniform_int(p.min_stroke, p.max_stroke);
    // Control points with a margin so strokes stay inside the frame.
    const int mx = p.width / 8, my = p.height / 8;
    auto pt = [&]() {
      return cv::Point(rng.uniform_int(mx, p.width - 1 - mx),
                       rng.uniform_int(my, p.height - 1 - my));
    };
    const cv::Point p0 = pt(), p1 = pt(), p2 = pt();
    std::vector<cv::Point> poly;
    const int samples = 64;
    for (int s = 0; s <= samples; ++s) {
      const double t = static_cast<double>(s) / samples;
      const double u = 1.0 - t;
      poly.emplace_back(
          static_cast<int>(std::lround(u * u * p0.x + 2 * u * t * p1.x + t * t * p2.x)),
          static_cast<int>(std::lround(u * u * p0.y + 2 * u * t * p1.y + t * t * p2.y)));
    }
    cv::Mat submask = cv::Mat::zeros(p.height, p.width, CV_8UC1);
    cv::polylines(submask, poly, false, cv::Scalar(1), stroke, cv::LINE_8);
    cv::polylines(rec.image, poly, false,
                  cv::Scalar(color[0], color[1], color[2]), stroke, cv::LINE_8);
    rec.submasks.push_back(submask);
    rec.semantic_mask |= submask;
  }
  return rec;
}

inline void write_record(const fs::path& root, const std::string& split,
                         const InstanceRecord& rec) {
  const fs::path rgb_dir = root / split / "RGB";
  const fs::path mask_dir = root / split / "Masks" / rec.id;
  std::error_code ec;
  fs::create_directories(rgb_dir, ec);
  fs::create_directories(mask_dir, ec);
  if (ec) throw IoError("write_record: cannot create " + mask_dir.string());

  auto write_png = [](const fs::path& p, const cv::Mat& m) {
    if (!cv::imwrite(p.string(), m))
      throw IoError("write_record: cannot write " + p.string());
  };
  write_png(rgb_dir / (rec.id + "_0001.png"), rec.image);
  for (std::size_t k = 0; k < rec.submasks.size(); ++k) {
    char name[16];
    std::snprintf(name, sizeof(name), "%03zu.png", k);
    write_png(mask_dir / name, rec.submasks[k] * 255);
  }
  write_png(root / split / "Masks" / (rec.id + "_mask.png"), rec.semantic_mask * 255);
}

inline std::string fixture_id(int index) {
  char buf[8];
  std::snprintf(buf, sizeof(buf), "%05d", index);
  return buf;
}

// Writes one split of a fixture tree. Deterministic: the same seed yields a
// byte-identical tree.
inline std::vector<std::string> generate_fixture_set(const fs::path& root,
                                                     const std::string& split,
                                                     std::uint64_t seed,
                                                     const FixtureParams& params = {}) {
  Rng rng(seed);
  std::vector<std::string> ids;
  for (int i = 0; i < params.n_images; ++i) {
    InstanceRecord rec = render_fixture_record(rng, params, fixture_id(i));
    write_record(root, split, rec);
    ids.push_back(rec.id);
  }
  return ids;
}

// ---------------------------------------------------------------------------
// Validation

struct ValidationReport {
  std::vector<Defect> defects;
  int records_checked = 0;
  bool clean() const { return defects.empty(); }
};

inline ValidationReport validate_split(const fs::path& root, const std::string& split) {
  ValidationReport report;
  DatasetManifest manifest = scan_dataset(root, split);
  report.defects = manifest.defects;
  for (const std::string& id : manifest.ids) {
    ++report.records_checked;
    InstanceRecord rec;
    rec.id = id;
    rec.image = cv::imread(manifest.rgb_path(id).string(), cv::IMREAD_COLOR);
    if (rec.image.empty()) {
      report.defects.push_back({split, id, DefectClass::UnreadableRaster, "RGB"});
      continue;
    }
    const auto mask_files = detail::sorted_pngs(manifest.mask_dir(id));
    if (mask_files.size() > 10)
      report.defects.push_back({split, id, DefectClass::TooManySubmasks,
                                std::to_string(mask_files.size()) + " submasks"});
    cv::Mat uni = cv::Mat::zeros(rec.image.size(), CV_8UC1);
    bool ok = true;
    for (const fs::path& p : mask_files) {
      cv::Mat raw = cv::imread(p.string(), cv::IMREAD_GRAYSCALE);
      if (raw.empty()) {
        report.defects.push_back({split, id, DefectClass::UnreadableRaster,
                                  p.filename().string()});
        ok = false;
        break;
      }
      if (raw.size() != rec.image.size()) {
        report.defects.push_back({split, id, DefectClass::ResolutionMismatch,
                                  p.filename().string()});
        ok = false;
        break;
      }
      cv::Mat bin;
      cv::threshold(raw, bin, 127, 1, cv::THRESH_BINARY);
      if (cv::countNonZero(bin) == 0) {
        report.defects.push_back({split, id, DefectClass::EmptySubmask,
                                  p.filename().string()});
        ok = false;
        break;
      }
      uni |= bin;
    }
    if (!ok) continue;
    cv::Mat sem_raw = cv::imread(manifest.semantic_path(id).string(), cv::IMREAD_GRAYSCALE);
    if (sem_raw.empty() || sem_raw.size() != rec.image.size()) {
      report.defects.push_back({split, id,
                                sem_raw.empty() ? DefectClass::UnreadableRaster
                                                : DefectClass::ResolutionMismatch,
                                "semantic mask"});
      continue;
    }
    cv::Mat sem;
    cv::threshold(sem_raw, sem, 127, 1, cv::THRESH_BINARY);
    cv::Mat diff;
    cv::absdiff(sem, uni, diff);
    const double disagree = static_cast<double>(cv::countNonZero(diff)) /
                            static_cast<double>(sem.total());
    if (disagree > 0.01)
      report.defects.push_back({split, id, DefectClass::UnionMismatch,
                                "semantic/union disagreement " + std::to_string(disagree)});
  }
  return report;
}

inline ValidationReport validate_tree(const fs::path& root) {
  if (!fs::exists(root)) throw ConfigError("validate: no such directory " + root.string());
  ValidationReport all;
  bool any_split = false;
  for (const char* split : {"train", "val", "test"}) {
    if (!fs::exists(root / split)) continue;
    any_split = true;
    ValidationReport r = validate_split(root, split);
    all.records_checked += r.records_checked;
    all.defects.insert(all.defects.end(), r.defects.begin(), r.defects.end());
  }
  if (!any_split)
    throw ConfigError("validate: " + root.string() + " contains no train/val/test split");
  return all;
}

}  // namespace dloseg
