#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include <opencv2/imgcodecs.hpp>

#include "dloseg/dataset.hpp"

using namespace dloseg;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("dloseg_test_" + tag);
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::vector<char> slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

FixtureParams small_params() {
  FixtureParams p;
  p.n_images = 3;
  p.height = 128;
  p.width = 128;
  p.min_curves = 2;
  p.max_curves = 3;
  return p;
}

}  // namespace

TEST_CASE("fixture set scans back with the expected ids and counts") {
  TempDir tmp("scan");
  auto ids = generate_fixture_set(tmp.path, "train", 7, small_params());
  CHECK(ids == std::vector<std::string>{"00000", "00001", "00002"});
  DatasetManifest m = scan_dataset(tmp.path, "train");
  CHECK(m.ids == ids);
  for (const std::string& id : m.ids) {
    CHECK(m.submask_counts.at(id) >= 2);
    CHECK(m.submask_counts.at(id) <= 3);
  }
  CHECK(m.defects.empty());
}

TEST_CASE("round trip: rendered records equal loaded records bit for bit") {
  TempDir tmp("roundtrip");
  FixtureParams params = small_params();
  generate_fixture_set(tmp.path, "train", 7, params);

  // re-render the same stream in memory
  Rng rng(7);
  DatasetManifest m = scan_dataset(tmp.path, "train");
  for (int i = 0; i < params.n_images; ++i) {
    InstanceRecord mem = render_fixture_record(rng, params, fixture_id(i));
    InstanceRecord disk = load_record(m, fixture_id(i));
    CHECK(cv::countNonZero(disk.image.reshape(1) != mem.image.reshape(1)) == 0);
    REQUIRE(disk.submasks.size() == mem.submasks.size());
    for (std::size_t k = 0; k < mem.submasks.size(); ++k)
      CHECK(cv::countNonZero(disk.submasks[k] != mem.submasks[k]) == 0);
    CHECK(cv::countNonZero(disk.semantic_mask != mem.semantic_mask) == 0);
  }
}

TEST_CASE("same seed twice yields byte-identical trees") {
  TempDir a("deta"), b("detb");
  generate_fixture_set(a.path, "train", 99, small_params());
  generate_fixture_set(b.path, "train", 99, small_params());
  for (const auto& e : fs::recursive_directory_iterator(a.path)) {
    if (!e.is_regular_file()) continue;
    const fs::path rel = fs::relative(e.path(), a.path);
    CHECK(slurp(e.path()) == slurp(b.path / rel));
  }
}

TEST_CASE("fixture pixels use only the four cable colors plus background") {
  TempDir tmp("colors");
  generate_fixture_set(tmp.path, "train", 3, small_params());
  DatasetManifest m = scan_dataset(tmp.path, "train");
  InstanceRecord rec = load_record(m, "00000");
  std::set<std::uint32_t> allowed;
  auto key = [](const cv::Vec3b& v) {
    return static_cast<std::uint32_t>(v[0]) << 16 | v[1] << 8 | v[2];
  };
  allowed.insert(key(fixture_background()));
  for (const cv::Vec3b& c : fixture_palette()) allowed.insert(key(c));
  for (int y = 0; y < rec.image.rows; ++y)
    for (int x = 0; x < rec.image.cols; ++x)
      CHECK(allowed.count(key(rec.image.at<cv::Vec3b>(y, x))) == 1);
}

TEST_CASE("semantic mask equals the union of submasks exactly on fixtures") {
  TempDir tmp("union");
  generate_fixture_set(tmp.path, "train", 11, small_params());
  DatasetManifest m = scan_dataset(tmp.path, "train");
  for (const std::string& id : m.ids) {
    InstanceRecord rec = load_record(m, id);
    cv::Mat uni = cv::Mat::zeros(rec.image.size(), CV_8UC1);
    for (const cv::Mat& s : rec.submasks) {
      uni |= s;
      cv::Mat outside = s & (1 - rec.semantic_mask);
      CHECK(cv::countNonZero(outside) == 0);  // submask within semantic mask
    }
    CHECK(cv::countNonZero(uni != rec.semantic_mask) == 0);
  }
}

TEST_CASE("loading is pure: two loads are identical") {
  TempDir tmp("pure");
  generate_fixture_set(tmp.path, "train", 5, small_params());
  DatasetManifest m = scan_dataset(tmp.path, "train");
  InstanceRecord a = load_record(m, "00001");
  InstanceRecord b = load_record(m, "00001");
  CHECK(cv::countNonZero(a.image.reshape(1) != b.image.reshape(1)) == 0);
  CHECK(cv::countNonZero(a.semantic_mask != b.semantic_mask) == 0);
}

TEST_CASE("empty split scans to zero records") {
  TempDir tmp("empty");
  fs::create_directories(tmp.path / "train" / "RGB");
  DatasetManifest m = scan_dataset(tmp.path, "train");
  CHECK(m.ids.empty());
}

TEST_CASE("missing directories and bad splits are configuration errors") {
  TempDir tmp("missing");
  CHECK_THROWS_AS(scan_dataset(tmp.path / "nope", "train"), ConfigError);
  CHECK_THROWS_AS(scan_dataset(tmp.path, "training"), ConfigError);
}

TEST_CASE("pad_to_capacity pads with invalid zero masks") {
  TempDir tmp("pad");
  generate_fixture_set(tmp.path, "train", 7, small_params());
  DatasetManifest m = scan_dataset(tmp.path, "train");
  InstanceRecord rec = load_record(m, "00000");
  const int n_real = static_cast<int>(rec.submasks.size());

  PaddedGroundTruth padded = pad_to_capacity(rec, 11);
  CHECK(padded.masks.size() == 11);
  CHECK(padded.valid_count() == n_real);
  for (int i = 0; i < n_real; ++i) {
    CHECK(padded.valid[i]);
    CHECK(cv::countNonZero(padded.masks[i] != rec.submasks[i]) == 0);
  }
  for (int i = n_real; i < 11; ++i) {
    CHECK_FALSE(padded.valid[i]);
    CHECK(cv::countNonZero(padded.masks[i]) == 0);
  }

  // boundary: capacity equal to the instance count leaves no padding
  PaddedGroundTruth exact = pad_to_capacity(rec, n_real);
  CHECK(exact.valid_count() == n_real);

  // over-capacity records must go through the truncation path
  CHECK_THROWS(pad_to_capacity(rec, n_real - 1));

  InstanceRecord empty;
  empty.image = rec.image;
  CHECK_THROWS(pad_to_capacity(empty, 11));
}

TEST_CASE("truncate_to_largest keeps the biggest instances in order") {
  TempDir tmp("trunc");
  generate_fixture_set(tmp.path, "train", 7, small_params());
  DatasetManifest m = scan_dataset(tmp.path, "train");
  InstanceRecord rec = load_record(m, "00000");
  while (rec.submasks.size() < 4) rec.submasks.push_back(rec.submasks[0]);
  InstanceRecord cut = truncate_to_largest(rec, 2);
  CHECK(cut.submasks.size() == 2);
  int min_kept = INT_MAX;
  for (const cv::Mat& s : cut.submasks) min_kept = std::min(min_kept, cv::countNonZero(s));
  for (const cv::Mat& s : rec.submasks) {
    // nothing dropped may be strictly larger than everything kept
    CHECK(cv::countNonZero(s) <= std::max(min_kept, cv::countNonZero(s)));
  }
}

TEST_CASE("validate: clean fixture trees have zero defects") {
  TempDir tmp("validate");
  generate_fixture_set(tmp.path, "train", 7, small_params());
  ValidationReport r = validate_tree(tmp.path);
  CHECK(r.clean());
  CHECK(r.records_checked == 3);
}

TEST_CASE("validate: orphan RGB produces exactly the orphan defect") {
  TempDir tmp("orphan");
  generate_fixture_set(tmp.path, "train", 7, small_params());
  fs::remove_all(tmp.path / "train" / "Masks" / "00001");
  ValidationReport r = validate_tree(tmp.path);
  REQUIRE(r.defects.size() == 1);
  CHECK(r.defects[0].kind == DefectClass::OrphanRgb);
  CHECK(r.defects[0].id == "00001");
}

TEST_CASE("validate: all-black submask produces exactly the empty-submask defect") {
  TempDir tmp("blank");
  generate_fixture_set(tmp.path, "train", 7, small_params());
  cv::Mat black = cv::Mat::zeros(128, 128, CV_8UC1);
  cv::imwrite((tmp.path / "train" / "Masks" / "00002" / "000.png").string(), black);
  ValidationReport r = validate_tree(tmp.path);
  REQUIRE(r.defects.size() == 1);
  CHECK(r.defects[0].kind == DefectClass::EmptySubmask);
  CHECK(r.defects[0].id == "00002");

  // the loader refuses such a record outright
  DatasetManifest m = scan_dataset(tmp.path, "train");
  CHECK_THROWS_AS(load_record(m, "00002"), IoError);
}

TEST_CASE("validate: empty tree is a configuration error") {
  TempDir tmp("novalidate");
  CHECK_THROWS_AS(validate_tree(tmp.path), ConfigError);
}

TEST_CASE("more than ten submasks is flagged but loadable") {
  TempDir tmp("many");
  FixtureParams p = small_params();
  p.n_images = 1;
  generate_fixture_set(tmp.path, "train", 7, p);
  DatasetManifest m0 = scan_dataset(tmp.path, "train");
  InstanceRecord rec = load_record(m0, "00000");
  for (int k = static_cast<int>(rec.submasks.size()); k < 12; ++k) {
    char name[16];
    std::snprintf(name, sizeof(name), "%03d.png", k);
    cv::imwrite((tmp.path / "train" / "Masks" / "00000" / name).string(),
                rec.submasks[0] * 255);
  }
  ValidationReport r = validate_tree(tmp.path);
  bool has_many = false;
  for (const Defect& d : r.defects) has_many |= d.kind == DefectClass::TooManySubmasks;
  CHECK(has_many);

  std::vector<std::string> warnings;
  DatasetManifest m = scan_dataset(tmp.path, "train");
  InstanceRecord loaded = load_record(m, "00000", &warnings);
  CHECK(loaded.submasks.size() == 12);
  CHECK(warnings.size() == 1);
}
