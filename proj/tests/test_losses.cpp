#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "dloseg/losses.hpp"
#include "dloseg/random.hpp"

using namespace dloseg;
using Eigen::ArrayXXd;

namespace {

// Independent per-pixel reference implementations: plain scalar loops over
// the written-out formulas, no shared code with the library path.
double focal_reference(const ArrayXXd& pred, const ArrayXXd& gt, double alpha,
                       double gamma) {
  double acc = 0.0;
  for (Eigen::Index i = 0; i < pred.rows(); ++i) {
    for (Eigen::Index j = 0; j < pred.cols(); ++j) {
      double p = pred(i, j);
      p = std::min(std::max(p, 1e-7), 1.0 - 1e-7);
      if (gt(i, j) > 0.5)
        acc += -alpha * std::pow(1.0 - p, gamma) * std::log(p);
      else
        acc += -(1.0 - alpha) * std::pow(p, gamma) * std::log(1.0 - p);
    }
  }
  return acc / static_cast<double>(pred.size());
}

double dice_reference(const ArrayXXd& pred, const ArrayXXd& gt, double eps) {
  double inter = 0.0, sp = 0.0, sg = 0.0;
  for (Eigen::Index i = 0; i < pred.rows(); ++i)
    for (Eigen::Index j = 0; j < pred.cols(); ++j) {
      inter += pred(i, j) * gt(i, j);
      sp += pred(i, j);
      sg += gt(i, j);
    }
  return 1.0 - (2.0 * inter + eps) / (sp + sg + eps);
}

ArrayXXd random_probs(Rng& rng, int r, int c) {
  ArrayXXd a(r, c);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) a(i, j) = rng.uniform();
  return a;
}

ArrayXXd random_binary(Rng& rng, int r, int c, double p = 0.4) {
  ArrayXXd a(r, c);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) a(i, j) = rng.bernoulli(p) ? 1.0 : 0.0;
  return a;
}

}  // namespace

TEST_CASE("focal and dice match the per-pixel reference on random pairs") {
  Rng rng(2024);
  for (int trial = 0; trial < 200; ++trial) {
    ArrayXXd pred = random_probs(rng, 8, 8);
    ArrayXXd gt = random_binary(rng, 8, 8);
    CHECK(std::abs(focal_loss(pred, gt) - focal_reference(pred, gt, 0.25, 2.0)) < 1e-9);
    CHECK(std::abs(dice_loss(pred, gt) - dice_reference(pred, gt, 1.0)) < 1e-9);
  }
}

TEST_CASE("focal hand values") {
  ArrayXXd p(1, 1), y1(1, 1), y0(1, 1);
  y1 << 1.0;
  y0 << 0.0;

  p << 0.5;
  CHECK(std::abs(focal_loss(p, y1) - 0.25 * 0.25 * std::log(2.0)) < 1e-12);
  CHECK(focal_loss(p, y1) == doctest::Approx(0.043322).epsilon(1e-4));

  p << 0.9;
  CHECK(std::abs(focal_loss(p, y0) - 0.75 * 0.81 * std::log(10.0)) < 1e-9);
  CHECK(focal_loss(p, y0) == doctest::Approx(1.39882).epsilon(1e-4));

  p << 1.0;  // perfect positive prediction, loss vanishes
  CHECK(focal_loss(p, y1) < 1e-12);
}

TEST_CASE("dice hand values") {
  // identical binary masks: exactly zero thanks to eps in both terms
  ArrayXXd a = ArrayXXd::Zero(5, 5);
  a(1, 1) = a(1, 2) = a(2, 2) = 1.0;
  CHECK(dice_loss(a, a) == 0.0);

  // disjoint masks of 10 pixels each: 1 - 1/21
  ArrayXXd p = ArrayXXd::Zero(4, 10), g = ArrayXXd::Zero(4, 10);
  p.row(0) = 1.0;
  g.row(2) = 1.0;
  CHECK(std::abs(dice_loss(p, g) - (1.0 - 1.0 / 21.0)) < 1e-12);

  // empty-empty convention
  ArrayXXd z = ArrayXXd::Zero(3, 3);
  CHECK(dice_loss(z, z) == 0.0);
}

TEST_CASE("dice is symmetric on binary inputs") {
  Rng rng(5);
  for (int t = 0; t < 20; ++t) {
    ArrayXXd a = random_binary(rng, 6, 6);
    ArrayXXd b = random_binary(rng, 6, 6);
    CHECK(dice_loss(a, b) == doctest::Approx(dice_loss(b, a)).epsilon(1e-12));
  }
}

TEST_CASE("segmentation loss means the 20:1 combination over pairs") {
  Rng rng(6);
  ArrayXXd g1 = random_binary(rng, 8, 8), g2 = random_binary(rng, 8, 8);
  ArrayXXd p1 = random_probs(rng, 8, 8), p2 = random_probs(rng, 8, 8);
  const double expected =
      0.5 * (combined_pair_loss(p1, g1) + combined_pair_loss(p2, g2));
  CHECK(segmentation_loss({p1, p2}, {g1, g2}) == doctest::Approx(expected));

  // one perfect pair scores zero
  CHECK(segmentation_loss({g1}, {g1}) < 1e-9);

  // zero pairs: defined as zero
  CHECK(segmentation_loss({}, {}) == 0.0);
}

TEST_CASE("weighted bce probes") {
  Eigen::ArrayXd l(1), y(1);
  l << 0.0;
  y << 1.0;
  CHECK(std::abs(weighted_bce(l, y) - 3.0 * std::log(2.0)) < 1e-9);
  y << 0.0;
  CHECK(std::abs(weighted_bce(l, y) - std::log(2.0)) < 1e-9);

  Eigen::ArrayXd big(2), yy(2);
  big << 40.0, -40.0;
  yy << 1.0, 0.0;
  CHECK(weighted_bce(big, yy) < 1e-12);
}

TEST_CASE("total loss combines seg and cls") {
  CHECK(total_loss(0.4, 0.7, 1.0) == doctest::Approx(1.1));
  CHECK(total_loss(0.4, 0.7, 0.0) == doctest::Approx(0.4));
  CHECK(total_loss(1.0, 1.0, 2.0) == doctest::Approx(3.0));
}

TEST_CASE("every loss is nonnegative and zero at its perfect input") {
  Rng rng(9);
  for (int t = 0; t < 30; ++t) {
    ArrayXXd pred = random_probs(rng, 6, 6);
    ArrayXXd gt = random_binary(rng, 6, 6);
    CHECK(focal_loss(pred, gt) >= 0.0);
    CHECK(dice_loss(pred, gt) >= -1e-12);
  }
  ArrayXXd gt = random_binary(rng, 6, 6);
  CHECK(focal_loss(gt, gt) < 1e-10);
  CHECK(dice_loss(gt, gt) == 0.0);
  Eigen::ArrayXd l(2), y(2);
  l << 50.0, -50.0;
  y << 1.0, 0.0;
  CHECK(weighted_bce(l, y) < 1e-12);
}

TEST_CASE("graph losses equal the plain implementations") {
  Rng rng(31);
  ArrayXXd pred = random_probs(rng, 8, 8);
  ArrayXXd gt = random_binary(rng, 8, 8);
  ad::Mat pm = pred.matrix(), gm = gt.matrix();
  ad::Tape t;
  CHECK(std::abs(focal_loss_graph(t.input(pm), gm).value()(0, 0) -
                 focal_loss(pred, gt)) < 1e-12);
  CHECK(std::abs(dice_loss_graph(t.input(pm), gm).value()(0, 0) -
                 dice_loss(pred, gt)) < 1e-12);

  Eigen::ArrayXd logits(4), labels(4);
  logits << 0.3, -1.2, 2.0, 0.0;
  labels << 1, 0, 1, 0;
  ad::Mat lm = logits.matrix();
  CHECK(std::abs(weighted_bce_graph(t.input(lm), labels).value()(0, 0) -
                 weighted_bce(logits, labels)) < 1e-12);
}

TEST_CASE("analytic loss gradients match central finite differences") {
  Rng rng(77);
  ArrayXXd pred = 0.1 + 0.8 * random_probs(rng, 8, 8);  // keep away from clamps
  ArrayXXd gt = random_binary(rng, 8, 8);
  ad::Mat pm = pred.matrix(), gm = gt.matrix();

  auto fd_check = [&](auto build, const ad::Mat& x, double tol) {
    ad::Tape t;
    ad::Var in = t.input(x);
    ad::Var loss = build(t, in);
    t.backward(loss);
    ad::Mat analytic = in.grad();
    const double h = 1e-5;
    ad::Mat probe = x;
    double worst = 0.0;
    for (Eigen::Index i = 0; i < x.rows(); ++i)
      for (Eigen::Index j = 0; j < x.cols(); ++j) {
        probe(i, j) = x(i, j) + h;
        ad::Tape tp;
        const double fp = build(tp, tp.input(probe)).value()(0, 0);
        probe(i, j) = x(i, j) - h;
        ad::Tape tm;
        const double fm = build(tm, tm.input(probe)).value()(0, 0);
        probe(i, j) = x(i, j);
        const double fd = (fp - fm) / (2.0 * h);
        const double an = analytic(i, j);
        worst = std::max(worst,
                         std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-8}));
      }
    CHECK(worst < tol);
  };

  fd_check([&](ad::Tape&, const ad::Var& v) { return focal_loss_graph(v, gm); }, pm, 1e-4);
  fd_check([&](ad::Tape&, const ad::Var& v) { return dice_loss_graph(v, gm); }, pm, 1e-4);

  Eigen::ArrayXd labels(6);
  labels << 1, 0, 1, 1, 0, 0;
  ad::Mat logits = Rng(3).normal_matrix(6, 1);
  fd_check([&](ad::Tape&, const ad::Var& v) { return weighted_bce_graph(v, labels); },
           logits, 1e-4);
}
