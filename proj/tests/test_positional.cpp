#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>

#include "dloseg/positional_encoding.hpp"

using namespace dloseg;

TEST_CASE("zero frequency matrix encodes to [0..0 | 1..1]") {
  FrequencyMatrix freq{Eigen::MatrixXd::Zero(2, 128)};
  Eigen::VectorXd v = encode_coords(0.7, 0.2, freq);
  REQUIRE(v.size() == 256);
  CHECK(v.head(128).norm() == 0.0);
  CHECK((v.tail(128).array() - 1.0).matrix().norm() == 0.0);
  CHECK(v.norm() == doctest::Approx(std::sqrt(128.0)).epsilon(1e-9));
}

TEST_CASE("every encoded vector has norm sqrt(pairs)") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    FrequencyMatrix freq = FrequencyMatrix::from_seed(seed);
    DpeGrid grid = build_dpe_grid(22, 22, freq);
    for (Eigen::Index r = 0; r < grid.flat.rows(); ++r)
      CHECK(std::abs(grid.flat.row(r).norm() - std::sqrt(128.0)) < 1e-6);
  }
}

TEST_CASE("grid center matches the zero-matrix encoding for any B") {
  FrequencyMatrix freq = FrequencyMatrix::from_seed(99);
  FrequencyMatrix zero{Eigen::MatrixXd::Zero(2, 128)};
  Eigen::VectorXd a = encode_coords(0.5, 0.5, freq);
  Eigen::VectorXd b = encode_coords(0.1, 0.9, zero);
  CHECK((a - b).norm() < 1e-12);
}

TEST_CASE("out-of-range coordinates are rejected") {
  FrequencyMatrix freq = FrequencyMatrix::from_seed(1);
  CHECK_THROWS(encode_coords(-0.01, 0.5, freq));
  CHECK_THROWS(encode_coords(0.5, 1.01, freq));
}

TEST_CASE("1x1 grid encodes the cell center") {
  FrequencyMatrix freq = FrequencyMatrix::from_seed(5);
  DpeGrid grid = build_dpe_grid(1, 1, freq);
  CHECK((grid.flat.row(0).transpose() - encode_coords(0.5, 0.5, freq)).norm() < 1e-12);
}

TEST_CASE("generic B yields pairwise distinct cell encodings") {
  FrequencyMatrix freq = FrequencyMatrix::from_seed(7);
  DpeGrid grid = build_dpe_grid(22, 22, freq);
  for (Eigen::Index i = 0; i < grid.flat.rows(); ++i)
    for (Eigen::Index j = i + 1; j < grid.flat.rows(); ++j)
      CHECK((grid.flat.row(i) - grid.flat.row(j)).norm() > 1e-6);
}

TEST_CASE("equal frequency rows make the encoding symmetric in x and y") {
  Rng rng(21);
  Eigen::MatrixXd b(2, 128);
  b.row(0) = rng.normal_matrix(1, 128);
  b.row(1) = b.row(0);
  FrequencyMatrix freq{b};
  DpeGrid grid = build_dpe_grid(16, 16, freq);
  for (int i = 0; i < 16; ++i)
    for (int j = 0; j < 16; ++j)
      CHECK((grid.at(i, j) - grid.at(j, i)).norm() < 1e-12);
}

TEST_CASE("encode_coords is Lipschitz with constant 4*pi*|B|") {
  Rng rng(33);
  for (int trial = 0; trial < 50; ++trial) {
    FrequencyMatrix freq = FrequencyMatrix::from_seed(trial);
    const double lip = 4.0 * M_PI * freq.b.norm();  // Frobenius bound
    const double x1 = rng.uniform(), y1 = rng.uniform();
    const double x2 = rng.uniform(), y2 = rng.uniform();
    const double dv = (encode_coords(x1, y1, freq) - encode_coords(x2, y2, freq)).norm();
    const double dx = std::hypot(x1 - x2, y1 - y2);
    CHECK(dv <= lip * dx + 1e-9);
  }
}

TEST_CASE("adjacent cells are more similar than distant cells on average") {
  int wins = 0;
  const int n_seeds = 5;
  for (std::uint64_t seed = 100; seed < 100 + n_seeds; ++seed) {
    FrequencyMatrix freq = FrequencyMatrix::from_seed(seed);
    DpeGrid grid = build_dpe_grid(22, 22, freq);
    auto cos_sim = [&](int r0, int r1) {
      return grid.flat.row(r0).dot(grid.flat.row(r1)) /
             (grid.flat.row(r0).norm() * grid.flat.row(r1).norm());
    };
    double adj = 0.0;
    int n_adj = 0;
    for (int i = 0; i < 22; ++i)
      for (int j = 0; j + 1 < 22; ++j) {
        adj += cos_sim(i * 22 + j, i * 22 + j + 1);
        ++n_adj;
      }
    double far = 0.0;
    int n_far = 0;
    for (int i = 0; i < 22; ++i)
      for (int j = 0; j < 22; ++j) {
        const int oi = (i + 11) % 22, oj = (j + 11) % 22;
        far += cos_sim(i * 22 + j, oi * 22 + oj);
        ++n_far;
      }
    if (adj / n_adj > far / n_far) ++wins;
  }
  CHECK(wins == n_seeds);
}

TEST_CASE("build_grid is pure: repeated calls agree exactly") {
  FrequencyMatrix freq = FrequencyMatrix::from_seed(2);
  DpeGrid a = build_dpe_grid(22, 22, freq);
  DpeGrid b = build_dpe_grid(22, 22, freq);
  CHECK((a.flat - b.flat).norm() == 0.0);
}

TEST_CASE("seeded frequency matrices differ across seeds and repeat within") {
  FrequencyMatrix a1 = FrequencyMatrix::from_seed(0);
  FrequencyMatrix a2 = FrequencyMatrix::from_seed(0);
  FrequencyMatrix b = FrequencyMatrix::from_seed(1);
  CHECK((a1.b - a2.b).norm() == 0.0);
  CHECK((a1.b - b.b).norm() > 1e-3);
}
