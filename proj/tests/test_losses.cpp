#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "fedmeta/errors.hpp"
#include "fedmeta/losses.hpp"
#include "fedmeta/rng.hpp"

using namespace fedmeta;

namespace {

Matrix mat(std::size_t r, std::size_t c, std::vector<double> v) {
  Matrix m(r, c);
  m.data = std::move(v);
  return m;
}

Matrix random_logits(std::size_t r, std::size_t c, Rng &rng, double scale = 2.0) {
  Matrix m(r, c);
  for (auto &v : m.data)
    v = scale * rng.normal();
  return m;
}

std::vector<int> random_labels(std::size_t n, std::size_t k, Rng &rng) {
  std::vector<int> y(n);
  for (auto &v : y)
    v = static_cast<int>(rng.below(k));
  return y;
}

// -log p_true written independently: log(sum exp(z - z_true)).
double ref_ce_row(std::span<const double> z, int y) {
  double mx = z[0];
  for (double v : z)
    mx = std::max(mx, v);
  long double s = 0.0L;
  for (double v : z)
    s += std::exp(static_cast<long double>(v - mx));
  return static_cast<double>(std::log(s) + (mx - z[y]));
}

double ref_focal(double c, double eta, double lambda) {
  return eta * std::pow(1.0 - std::exp(-c), lambda) * c;
}

TaskOutcome task(double focal, double acc, std::size_t q = 20) {
  TaskOutcome t;
  t.focal_loss = focal;
  t.accuracy = acc;
  t.query_size = q;
  return t;
}

} // namespace

TEST_SUITE("cross_entropy") {
  TEST_CASE("uniform two-class logits give ln 2") {
    auto l = cross_entropy(mat(2, 2, {0, 0, 0, 0}), std::vector<int>{0, 1});
    CHECK(l.loss == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  }

  TEST_CASE("saturated correct class is stable") {
    auto l = cross_entropy(mat(1, 2, {1000, 0}), std::vector<int>{0});
    CHECK(std::isfinite(l.loss));
    CHECK(l.loss < 1e-300);
    auto wrong = cross_entropy(mat(1, 2, {1000, 0}), std::vector<int>{1});
    CHECK(wrong.loss == doctest::Approx(1000.0));
  }

  TEST_CASE("matches an independent log-sum-exp") {
    Rng rng(1);
    for (int t = 0; t < 50; ++t) {
      auto z = random_logits(7, 4, rng, 5.0);
      auto y = random_labels(7, 4, rng);
      auto per = per_sample_cross_entropy(z, y);
      double mean = 0.0;
      for (std::size_t r = 0; r < 7; ++r) {
        const double want = ref_ce_row(z.row(r), y[r]);
        CHECK(std::abs(per[r] - want) <= 1e-12 * std::max(1.0, want));
        mean += want;
      }
      CHECK(std::abs(cross_entropy(z, y).loss - mean / 7) <= 1e-12);
    }
  }

  TEST_CASE("gradient is (softmax - onehot) / rows") {
    Rng rng(2);
    auto z = random_logits(5, 3, rng);
    auto y = random_labels(5, 3, rng);
    auto l = cross_entropy(z, y);
    for (std::size_t r = 0; r < 5; ++r) {
      double s = 0.0;
      for (double v : z.row(r))
        s += std::exp(v);
      for (std::size_t j = 0; j < 3; ++j) {
        const double want = (std::exp(z(r, j)) / s - (y[r] == int(j) ? 1.0 : 0.0)) / 5.0;
        CHECK(std::abs(l.grad_logits(r, j) - want) < 1e-15);
      }
    }
  }

  TEST_CASE("label out of range") {
    CHECK_THROWS(cross_entropy(mat(1, 2, {0, 0}), std::vector<int>{2}));
    CHECK_THROWS(cross_entropy(mat(1, 2, {0, 0}), std::vector<int>{-1}));
    CHECK_THROWS(cross_entropy(mat(2, 2, {0, 0, 0, 0}), std::vector<int>{0}));
  }
}

TEST_SUITE("focal_loss") {
  TEST_CASE("c = ln 2 with eta 5, lambda 2") {
    auto l = focal_loss(mat(1, 2, {0, 0}), std::vector<int>{0}, {5.0, 2.0});
    CHECK(l.loss == doctest::Approx(0.866434).epsilon(1e-6));
    CHECK(l.loss == doctest::Approx(5.0 * 0.25 * std::log(2.0)).epsilon(1e-14));
  }

  TEST_CASE("lambda 0 is eta times cross-entropy, loss and gradient") {
    Rng rng(3);
    for (int t = 0; t < 20; ++t) {
      auto z = random_logits(6, 3, rng);
      auto y = random_labels(6, 3, rng);
      const double eta = 0.5 + 4.0 * rng.uniform();
      auto f = focal_loss(z, y, {eta, 0.0});
      auto ce = cross_entropy(z, y);
      CHECK(f.loss == doctest::Approx(eta * ce.loss).epsilon(1e-14));
      for (std::size_t i = 0; i < f.grad_logits.data.size(); ++i)
        CHECK(f.grad_logits.data[i] == eta * ce.grad_logits.data[i]);
    }
  }

  TEST_CASE("batch loss is the mean of per-sample focal values") {
    Rng rng(4);
    auto z = random_logits(9, 2, rng);
    auto y = random_labels(9, 2, rng);
    double s = 0.0;
    for (std::size_t r = 0; r < 9; ++r)
      s += ref_focal(ref_ce_row(z.row(r), y[r]), 5.0, 2.0);
    CHECK(focal_loss(z, y, {5.0, 2.0}).loss == doctest::Approx(s / 9).epsilon(1e-12));
  }

  TEST_CASE("gradient matches finite differences") {
    Rng rng(5);
    for (auto fp : {FocalParams{5.0, 2.0}, FocalParams{1.0, 0.5}, FocalParams{2.0, 3.0}}) {
      auto z = random_logits(6, 3, rng);
      auto y = random_labels(6, 3, rng);
      auto l = focal_loss(z, y, fp);
      const double h = 1e-5;
      for (std::size_t i = 0; i < z.data.size(); ++i) {
        Matrix up = z, down = z;
        up.data[i] += h;
        down.data[i] -= h;
        const double num =
            (focal_loss(up, y, fp).loss - focal_loss(down, y, fp).loss) / (2 * h);
        const double a = l.grad_logits.data[i];
        CHECK(std::abs(num - a) / std::max({std::abs(num), std::abs(a), 1e-6}) < 1e-4);
      }
    }
  }

  TEST_CASE("non-negative, zero exactly when cross-entropy is zero") {
    Rng rng(6);
    for (int t = 0; t < 100; ++t) {
      auto z = random_logits(4, 3, rng, 10.0);
      auto y = random_labels(4, 3, rng);
      CHECK(focal_loss(z, y, {5.0, 2.0}).loss >= 0.0);
    }
    auto perfect = mat(1, 2, {800, 0});
    CHECK(cross_entropy(perfect, std::vector<int>{0}).loss == 0.0);
    CHECK(focal_loss(perfect, std::vector<int>{0}, {5.0, 2.0}).loss == 0.0);
    auto tiny = mat(1, 2, {20, 0});
    CHECK(focal_loss(tiny, std::vector<int>{0}, {5.0, 2.0}).loss > 0.0);
  }

  TEST_CASE("strictly increasing in per-sample cross-entropy") {
    // Two-class row [d, 0] with label 0 has c = log(1 + e^-d); sweeping d
    // downward sweeps c upward.
    for (double lambda : {0.5, 1.0, 2.0, 4.0}) {
      double prev = -1.0, prev_c = -1.0;
      for (double d = 12.0; d >= -12.0; d -= 0.25) {
        auto z = mat(1, 2, {d, 0});
        const double c = cross_entropy(z, std::vector<int>{0}).loss;
        const double f = focal_loss(z, std::vector<int>{0}, {5.0, lambda}).loss;
        REQUIRE(c > prev_c);
        CHECK(f > prev);
        prev = f;
        prev_c = c;
      }
    }
  }

  TEST_CASE("negative lambda is rejected") {
    CHECK_THROWS(focal_loss(mat(1, 2, {0, 0}), std::vector<int>{0}, {5.0, -1.0}));
  }
}

TEST_SUITE("at_loss") {
  TEST_CASE("perfect accuracy contributes nothing") {
    std::vector<TaskOutcome> t{task(3.7, 1.0)};
    auto a = at_loss(t, 2.0);
    CHECK(a.loss == 0.0);
    CHECK(a.task_weights[0] == 0.0);
  }

  TEST_CASE("single task at accuracy 0.5") {
    std::vector<TaskOutcome> t{task(1.0, 0.5)};
    auto a = at_loss(t, 2.0);
    CHECK(a.loss == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(a.task_weights[0] == doctest::Approx(2.0).epsilon(1e-15));
  }

  TEST_CASE("two-task example") {
    std::vector<TaskOutcome> t{task(0.8664, 0.5), task(0.2, 1.0)};
    CHECK(at_loss(t, 2.0).loss == doctest::Approx(0.75065).epsilon(1e-5));
  }

  TEST_CASE("zero accuracy is clamped to half a query sample") {
    CHECK(accuracy_floor(20) == 0.025);
    std::vector<TaskOutcome> t{task(1.0, 0.0, 20)};
    auto a = at_loss(t, 1.0);
    CHECK(a.loss == doctest::Approx(-std::log2(0.025)).epsilon(1e-15));
    CHECK(std::isfinite(a.task_weights[0]));
  }

  TEST_CASE("phi 1 at accuracy 0.5 is the summed focal loss") {
    Rng rng(7);
    std::vector<TaskOutcome> t;
    double sum = 0.0;
    for (int i = 0; i < 10; ++i) {
      const double f = 3.0 * rng.uniform();
      sum += f;
      t.push_back(task(f, 0.5));
    }
    auto a = at_loss(t, 1.0);
    CHECK(a.loss == doctest::Approx(sum).epsilon(1e-14));
    for (double w : a.task_weights)
      CHECK(w == 1.0);
  }

  TEST_CASE("weights are the derivative with respect to each focal loss") {
    Rng rng(8);
    for (double phi : {0.5, 1.0, 2.0, 3.0}) {
      std::vector<TaskOutcome> t;
      for (int i = 0; i < 5; ++i)
        t.push_back(task(0.1 + 2.0 * rng.uniform(), 0.05 + 0.9 * rng.uniform()));
      auto a = at_loss(t, phi);
      for (std::size_t i = 0; i < t.size(); ++i) {
        auto up = t, down = t;
        up[i].focal_loss += 1e-6;
        down[i].focal_loss -= 1e-6;
        const double num = (at_loss(up, phi).loss - at_loss(down, phi).loss) / 2e-6;
        CHECK(a.task_weights[i] == doctest::Approx(num).epsilon(1e-6));
        CHECK(a.task_weights[i] ==
              doctest::Approx(-phi * std::pow(t[i].focal_loss, phi - 1) *
                              std::log2(t[i].accuracy))
                  .epsilon(1e-14));
      }
    }
  }

  TEST_CASE("monotone in accuracy and focal loss") {
    Rng rng(9);
    for (int trial = 0; trial < 200; ++trial) {
      std::vector<TaskOutcome> t;
      for (int i = 0; i < 3; ++i)
        t.push_back(task(0.05 + 2.0 * rng.uniform(), 0.05 + 0.9 * rng.uniform()));
      const double phi = 0.5 + 2.0 * rng.uniform();
      const double base = at_loss(t, phi).loss;
      CHECK(base >= 0.0);
      auto more_acc = t;
      more_acc[1].accuracy = std::min(1.0, t[1].accuracy + 0.01);
      CHECK(at_loss(more_acc, phi).loss < base);
      auto more_focal = t;
      more_focal[2].focal_loss += 0.01;
      CHECK(at_loss(more_focal, phi).loss > base);
    }
  }

  TEST_CASE("empty task list is an error") {
    std::vector<TaskOutcome> none;
    CHECK_THROWS(at_loss(none, 2.0));
  }
}

TEST_SUITE("accuracy") {
  TEST_CASE("all correct") {
    CHECK(accuracy(mat(2, 2, {1, 0, 0, 1}), std::vector<int>{0, 1}) == 1.0);
  }

  TEST_CASE("zero logits, balanced labels: ties go to class 0") {
    CHECK(accuracy(mat(4, 2, {0, 0, 0, 0, 0, 0, 0, 0}), std::vector<int>{0, 1, 0, 1}) == 0.5);
    CHECK(accuracy(mat(3, 3, std::vector<double>(9, 0.0)), std::vector<int>{0, 1, 2}) ==
          doctest::Approx(1.0 / 3));
  }

  TEST_CASE("matches a brute-force count") {
    Rng rng(10);
    for (int t = 0; t < 50; ++t) {
      auto z = random_logits(11, 4, rng);
      for (auto &v : z.data)
        v = std::round(v); // force some ties
      auto y = random_labels(11, 4, rng);
      int hits = 0;
      for (std::size_t r = 0; r < 11; ++r) {
        int best = 0;
        for (int j = 1; j < 4; ++j)
          if (z(r, j) > z(r, best))
            best = j;
        hits += best == y[r];
      }
      CHECK(accuracy(z, y) == doctest::Approx(hits / 11.0).epsilon(1e-15));
    }
  }
}
