#include <doctest.h>

#include <cmath>
#include <limits>
#include <vector>

#include "aligndistill/losses.hpp"
#include "aligndistill/rng.hpp"
#include "oracles.hpp"

using namespace aligndistill;

namespace {

Tensor random_rows(SeededRng& rng, std::size_t n, std::size_t d) {
  Tensor t = Tensor::matrix(n, d);
  for (double& v : t.data()) v = rng.normal();
  return t;
}

std::vector<double> random_vector(SeededRng& rng, std::size_t n, double sd = 2.0) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.normal(0, sd);
  return v;
}

}  // namespace

TEST_CASE("rotation examples") {
  const Tensor x({1, 2}, std::vector<double>{1, 2});
  const Tensor w({2, 2}, std::vector<double>{0, 0.5, 0, 0});
  const Tensor y = rotate_rows(x, w);
  CHECK(y(0, 0) == 2.0);
  CHECK(y(0, 1) == 2.0);

  SeededRng rng(1);
  const Tensor rows = random_rows(rng, 5, 3);
  CHECK(rotate_rows(rows, RotationParams::zeros(3).w) == rows);
  Tensor minus_i = Tensor::identity(3);
  for (double& v : minus_i.data()) v = -v;
  const Tensor cancelled = rotate_rows(rows, minus_i);
  for (double v : cancelled.data()) CHECK(v == 0.0);
  CHECK_THROWS_AS(rotate_rows(rows, Tensor::matrix(2, 2)), std::invalid_argument);
}

TEST_CASE("rotation equals applying I + W as a dense matrix") {
  SeededRng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 1 + rng.below(8), d = 1 + rng.below(6);
    const Tensor x = random_rows(rng, n, d);
    const Tensor w = random_rows(rng, d, d);
    Tensor m = Tensor::identity(d);
    add_inplace(m, w);
    const Tensor dense = matmul_nt(x, m);
    const Tensor y = rotate_rows(x, w);
    for (std::size_t i = 0; i < y.size(); ++i) CHECK(std::abs(y[i] - dense[i]) <= 1e-12);
  }
}

TEST_CASE("similarity matrix examples") {
  const SimilarityMatrix ones = similarity_matrix(Tensor({3, 2}, std::vector<double>{1, 2, 1, 2, 1, 2}));
  for (double v : ones.s.data()) CHECK(v == doctest::Approx(1.0).epsilon(1e-15));
  const SimilarityMatrix eye = similarity_matrix(Tensor({2, 2}, std::vector<double>{1, 0, 0, 1}));
  CHECK(eye.s == Tensor::identity(2));
  const SimilarityMatrix diag = similarity_matrix(Tensor({2, 2}, std::vector<double>{1, 0, 1, 1}));
  CHECK(std::abs(diag.s(0, 1) - 0.707107) < 5e-7);
  const SimilarityMatrix zero = similarity_matrix(Tensor({2, 2}, std::vector<double>{0, 0, 1, 1}));
  CHECK(zero.zero_rows == 1);
  CHECK(zero.s(0, 0) == 1.0);
  CHECK(zero.s(0, 1) == 0.0);
}

TEST_CASE("similarity matrix invariants") {
  SeededRng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + rng.below(10), d = 1 + rng.below(6);
    const Tensor x = random_rows(rng, n, d);
    const Tensor s = similarity_matrix(x).s;
    const auto ref = oracle::cosine(x.values(), n, d);
    for (std::size_t i = 0; i < n; ++i) {
      CHECK(std::abs(s(i, i) - 1) <= 1e-12);
      for (std::size_t j = 0; j < n; ++j) {
        CHECK(std::abs(s(i, j) - s(j, i)) <= 1e-12);
        CHECK(s(i, j) >= -1 - 1e-12);
        CHECK(s(i, j) <= 1 + 1e-12);
        CHECK(std::abs(s(i, j) - ref[i * n + j]) <= 1e-12);
      }
    }
    // Positive per-row rescaling leaves every cosine unchanged.
    Tensor scaled = x;
    for (std::size_t i = 0; i < n; ++i) {
      const double c = std::exp(rng.uniform(-3, 3));
      for (double& v : scaled.row(i)) v *= c;
    }
    const Tensor s2 = similarity_matrix(scaled).s;
    for (std::size_t i = 0; i < s.size(); ++i) CHECK(std::abs(s[i] - s2[i]) <= 1e-9);
  }
}

TEST_CASE("visual alignment loss") {
  SimilarityMatrix all_ones{Tensor::matrix(2, 2, 1.0)};
  SimilarityMatrix eye{Tensor::identity(2)};
  CHECK(visual_alignment_loss(all_ones, eye) == 0.5);
  CHECK(visual_alignment_loss(eye, all_ones) == 0.5);
  CHECK(visual_alignment_loss(eye, eye) == 0.0);
  CHECK_THROWS_AS(visual_alignment_loss(eye, SimilarityMatrix{Tensor::identity(3)}), std::invalid_argument);

  SeededRng rng(4);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t n = 2 + rng.below(7);
    const auto a = similarity_matrix(random_rows(rng, n, 3));
    const auto b = similarity_matrix(random_rows(rng, n, 3));
    CHECK(visual_alignment_loss(a, b) == visual_alignment_loss(b, a));
    CHECK(visual_alignment_loss(a, b) > 0.0);
    CHECK(visual_alignment_loss(a, a) == 0.0);
  }
}

TEST_CASE("average heads") {
  const AttentionVector avg = average_heads(Tensor({2, 2}, std::vector<double>{0.2, 0.8, 0.6, 0.4}));
  CHECK(avg.scores[0] == doctest::Approx(0.4).epsilon(1e-15));
  CHECK(avg.scores[1] == doctest::Approx(0.6).epsilon(1e-15));
  CHECK_FALSE(avg.normalized);
  const std::vector<double> row{1.5, -2, 0.25};
  CHECK(average_heads(Tensor({1, 3}, row)).scores == row);
  CHECK(average_heads(Tensor({3, 3}, std::vector<double>{1.5, -2, 0.25, 1.5, -2, 0.25, 1.5, -2, 0.25})).scores == row);
  CHECK_THROWS_AS(average_heads(Tensor::matrix(0, 3)), std::invalid_argument);
}

TEST_CASE("heads are averaged before the softmax") {
  // softmax(mean(raw)) and mean(softmax(raw)) differ for these heads.
  const Tensor heads({2, 2}, std::vector<double>{4, 0, 0, 0});
  const AttentionVector raw_mean = average_heads(heads);
  const auto p_of_mean = softmax(raw_mean.scores);
  const auto s0 = softmax(std::vector<double>{4, 0}), s1 = softmax(std::vector<double>{0, 0});
  const double mean_of_p = 0.5 * (s0[0] + s1[0]);
  CHECK(std::abs(p_of_mean[0] - mean_of_p) > 0.05);
  CHECK(raw_mean.scores[0] == 2.0);
  const AttentionVector teacher{{2, 0}, false};
  CHECK(attention_alignment_loss(teacher, raw_mean) == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("attention loss examples") {
  const AttentionVector a{{1, 0}, false}, b{{0, 1}, false};
  const double expected = (std::exp(1.0) - 1) / (std::exp(1.0) + 1);
  CHECK(std::abs(attention_alignment_loss(a, b) - 0.462117) < 5e-7);
  CHECK(attention_alignment_loss(a, b) == doctest::Approx(expected).epsilon(1e-14));
  CHECK(attention_alignment_loss(a, a) == 0.0);
  CHECK_THROWS_AS(attention_alignment_loss(a, AttentionVector{{1, 2, 3}, false}), std::invalid_argument);
}

TEST_CASE("attention loss properties") {
  SeededRng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + rng.below(16);
    const AttentionVector t{random_vector(rng, n), false}, s{random_vector(rng, n), false};
    const double kl = attention_alignment_loss(t, s);
    CHECK(kl >= 0.0);
    CHECK(kl == doctest::Approx(oracle::kl(t.scores, s.scores)).epsilon(1e-9));

    AttentionVector t2 = t, s2 = s;
    const double ct = rng.uniform(-20, 20), cs = rng.uniform(-20, 20);
    for (double& v : t2.scores) v += ct;
    for (double& v : s2.scores) v += cs;
    CHECK(std::abs(attention_alignment_loss(t2, s2) - kl) <= 1e-9);
    // Equal after softmax means zero.
    CHECK(std::abs(attention_alignment_loss(t, t2)) <= 1e-9);
  }
}

TEST_CASE("combined objective") {
  CHECK(combined_objective(2.0, 0.5, 0.4, {1.0, 0.03}) == doctest::Approx(2.512).epsilon(1e-15));
  CHECK(combined_objective(1.75, 0.5, 0.4, {0.0, 0.0}) == 1.75);
  CHECK(combined_objective(1.75, 0.0, 0.0, {}) == 1.75);
  CHECK_THROWS_AS(combined_objective(std::numeric_limits<double>::quiet_NaN(), 0, 0, {}), std::invalid_argument);
  CHECK_THROWS_AS(combined_objective(1, std::numeric_limits<double>::infinity(), 0, {}), std::invalid_argument);
  const DistillationWeights defaults;
  CHECK(defaults.alpha == 1.0);
  CHECK(defaults.beta == 0.03);
  CHECK_THROWS(DistillationWeights{-1.0, 0.0}.validate());
}
