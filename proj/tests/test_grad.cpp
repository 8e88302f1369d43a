#include <doctest.h>

#include <cmath>
#include <limits>
#include <vector>

#include "aligndistill/finite_diff.hpp"
#include "aligndistill/gradients.hpp"
#include "aligndistill/rng.hpp"
#include "aligndistill/tape.hpp"
#include "oracles.hpp"

using namespace aligndistill;

namespace {

Tensor random_matrix(SeededRng& rng, std::size_t r, std::size_t c, double sd = 1.0) {
  Tensor t = Tensor::matrix(r, c);
  for (double& v : t.data()) v = rng.normal(0, sd);
  return t;
}

std::vector<double> random_vector(SeededRng& rng, std::size_t n, double sd = 1.5) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.normal(0, sd);
  return v;
}

// Scalar test objective on a tape: sum(out ⊙ probe) for a fixed probe.
using Build = std::function<Var(Tape&, const std::vector<Var>&)>;

double tape_value(const Build& build, const std::vector<Tensor>& inputs) {
  Tape tape;
  std::vector<Var> vars;
  for (const Tensor& t : inputs) vars.push_back(tape.constant(t));
  return build(tape, vars).value()[0];
}

// Max relative error of the tape's gradients against central differences.
double tape_fd_error(const Build& build, const std::vector<Tensor>& inputs) {
  Tape tape;
  std::vector<Var> vars;
  for (const Tensor& t : inputs) vars.push_back(tape.parameter(t));
  tape.backward(build(tape, vars));
  double worst = 0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const auto numeric = oracle::numeric_gradient(
        [&](const std::vector<double>& v) {
          std::vector<Tensor> probe = inputs;
          probe[k] = Tensor(inputs[k].dims(), v);
          return tape_value(build, probe);
        },
        inputs[k].values());
    worst = std::max(worst, oracle::max_rel_error(vars[k].grad().values(), numeric));
  }
  return worst;
}

Var weighted_sum(Tape& tape, Var x, const Tensor& probe) {
  // sum(x ⊙ probe): flatten x into one row, then a dot product with the flattened probe.
  std::vector<Var> rows;
  for (std::size_t r = 0; r < x.value().rows(); ++r) rows.push_back(ops::slice_rows(x, r, 1));
  return ops::matmul(ops::concat_cols(rows), tape.constant(probe.reshaped({probe.size(), 1})));
}

}  // namespace

TEST_CASE("visual alignment gradient vanishes at the minimum") {
  SeededRng rng(0);
  FeatureGrid x({2, 2}, 3, 0.0);
  for (double& v : x.values().data()) v = rng.normal();
  const SimilarityMatrix se = similarity_matrix(x);
  const GradientBundle g = grad_visual_alignment(x, RotationParams::zeros(3), se);
  CHECK(g.loss == 0.0);
  for (double v : g.at("W").data()) CHECK(std::abs(v) <= 1e-15);
  for (double v : g.at("X").data()) CHECK(std::abs(v) <= 1e-15);
}

TEST_CASE("visual alignment gradient matches finite differences") {
  SeededRng rng(0);
  const std::size_t n = 4, d = 3;
  FeatureGrid x({2, 2}, d);
  for (double& v : x.values().data()) v = rng.normal();
  Tensor e = random_matrix(rng, n, 2);
  const SimilarityMatrix se = similarity_matrix(e);

  for (double w_scale : {0.0, 0.3}) {
    RotationParams r = RotationParams::zeros(d);
    for (double& v : r.w.data()) v = w_scale * rng.normal();
    const GradientBundle g = grad_visual_alignment(x, r, se);
    CHECK(g.loss == doctest::Approx(oracle::visual_loss(x.values().values(), r.w.values(), n, d, se.s.values())).epsilon(1e-12));
    const auto num_w = oracle::numeric_gradient(
        [&](const std::vector<double>& w) { return oracle::visual_loss(x.values().values(), w, n, d, se.s.values()); },
        r.w.values());
    const auto num_x = oracle::numeric_gradient(
        [&](const std::vector<double>& xs) { return oracle::visual_loss(xs, r.w.values(), n, d, se.s.values()); },
        x.values().values());
    CHECK(oracle::max_rel_error(g.at("W").values(), num_w) <= 1e-6);
    CHECK(oracle::max_rel_error(g.at("X").values(), num_x) <= 1e-6);
  }
}

TEST_CASE("visual alignment loss is scale invariant in X") {
  SeededRng rng(3);
  FeatureGrid x({3, 2}, 4);
  for (double& v : x.values().data()) v = rng.normal();
  FeatureGrid doubled = x;
  for (double& v : doubled.values().data()) v *= 2;
  const SimilarityMatrix se = similarity_matrix(random_matrix(rng, 6, 3));
  RotationParams r = RotationParams::zeros(4);
  for (double& v : r.w.data()) v = 0.2 * rng.normal();
  const GradientBundle a = grad_visual_alignment(x, r, se), b = grad_visual_alignment(doubled, r, se);
  CHECK(std::abs(a.loss - b.loss) <= 1e-9);
  // dL/dX scales as 1/|x|; dL/dW = dYᵀX is unchanged because dY halves while X doubles.
  for (std::size_t i = 0; i < a.at("X").size(); ++i) CHECK(b.at("X")[i] == doctest::Approx(0.5 * a.at("X")[i]).epsilon(1e-9));
  for (std::size_t i = 0; i < a.at("W").size(); ++i) CHECK(b.at("W")[i] == doctest::Approx(a.at("W")[i]).epsilon(1e-9));
}

TEST_CASE("zero rows get zero gradient and are tallied") {
  FeatureGrid x({1, 3}, 2);
  x.token(0)[0] = 1;
  x.token(2)[1] = 1;
  const SimilarityMatrix se{Tensor::matrix(3, 3, 0.5)};
  const GradientBundle g = grad_visual_alignment(x, RotationParams::zeros(2), se);
  CHECK(g.zero_rows == 1);
  CHECK(g.at("X")(1, 0) == 0.0);
  CHECK(g.at("X")(1, 1) == 0.0);
  CHECK(g.all_finite());
}

TEST_CASE("attention gradient examples") {
  const GradientBundle g = grad_attention_alignment({{1, 0}, false}, {{0, 1}, false});
  CHECK(std::abs(g.at("student")[0] + 0.462117) < 5e-7);
  CHECK(std::abs(g.at("student")[1] - 0.462117) < 5e-7);
  const GradientBundle same = grad_attention_alignment({{0.3, -1, 2}, false}, {{0.3, -1, 2}, false});
  for (double v : same.at("student").data()) CHECK(v == 0.0);
  CHECK_THROWS_AS(grad_attention_alignment({{1, 0}, false}, {{1, 0, 0}, false}), std::invalid_argument);
}

TEST_CASE("attention gradient sums to zero and matches finite differences") {
  SeededRng rng(9);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t n = 2 + rng.below(12);
    const AttentionVector t{random_vector(rng, n), false}, s{random_vector(rng, n), false};
    const GradientBundle g = grad_attention_alignment(t, s);
    double sum = 0;
    for (double v : g.at("student").data()) sum += v;
    CHECK(std::abs(sum) <= 1e-12);
    const auto numeric = oracle::numeric_gradient([&](const std::vector<double>& v) { return oracle::kl(t.scores, v); }, s.scores);
    CHECK(oracle::max_rel_error(g.at("student").values(), numeric) <= 1e-6);
  }
}

TEST_CASE("teacher scores are constants") {
  // Changing the teacher changes the loss and the student gradient, but the
  // gradient is always q - p with no term flowing back into the teacher.
  SeededRng rng(10);
  const std::vector<double> s = random_vector(rng, 6);
  for (int trial = 0; trial < 10; ++trial) {
    const std::vector<double> t = random_vector(rng, 6);
    Tape tape;
    Var student = tape.parameter(Tensor({1, 6}, s));
    Var loss = ops::softmax_kl(t, student);
    tape.backward(loss);
    const auto p = softmax(t), q = softmax(s);
    for (std::size_t i = 0; i < 6; ++i) CHECK(std::abs(student.grad()[i] - (q[i] - p[i])) <= 1e-15);
    CHECK(tape.size() == 2);
  }
}

TEST_CASE("finite difference check basics") {
  ParamSet theta{{"theta", Tensor({1}, std::vector<double>{3.0})}};
  const Objective square = [](const ParamSet& p) { return p.at("theta")[0] * p.at("theta")[0]; };
  ParamSet analytic{{"theta", Tensor({1}, std::vector<double>{6.0})}};
  FiniteDiffReport r = finite_difference_check(square, theta, analytic, 1e-5, 1e-10);
  CHECK(r.pass);
  CHECK(r.params.at(0).numeric == doctest::Approx(6.0).epsilon(1e-10));
  CHECK(r.max_rel_error <= 1e-10);

  const Objective constant = [](const ParamSet&) { return 4.2; };
  ParamSet zero{{"theta", Tensor({1}, std::vector<double>{0.0})}};
  r = finite_difference_check(constant, theta, zero, 1e-5, 1e-4);
  CHECK(r.pass);
  CHECK(r.params.at(0).numeric == 0.0);

  const Objective blows_up = [](const ParamSet& p) {
    return p.at("theta")[0] > 3.0 ? std::numeric_limits<double>::infinity() : 1.0;
  };
  r = finite_difference_check(blows_up, theta, zero, 1e-5, 1e-4);
  CHECK_FALSE(r.pass);
  CHECK(r.failure.find("theta") != std::string::npos);

  ParamSet wrong{{"other", Tensor({1}, std::vector<double>{0.0})}};
  CHECK_THROWS_AS(finite_difference_check(square, theta, wrong, 1e-5, 1e-4), std::invalid_argument);
  CHECK(relative_error(0.0, 0.0) == 0.0);
  CHECK(relative_error(1e-9, 0.0) == doctest::Approx(0.1));
}

TEST_CASE("finite difference check names the failing parameter") {
  ParamSet p{{"a", Tensor({2}, std::vector<double>{1, 2})}, {"b", Tensor({1}, std::vector<double>{3})}};
  const Objective f = [](const ParamSet& q) { return q.at("a")[0] * q.at("a")[1] + q.at("b")[0]; };
  ParamSet good{{"a", Tensor({2}, std::vector<double>{2, 1})}, {"b", Tensor({1}, std::vector<double>{1})}};
  CHECK(finite_difference_check(f, p, good, 1e-5, 1e-8).pass);
  ParamSet bad = good;
  bad.at("b")[0] = 1.01;
  const FiniteDiffReport r = finite_difference_check(f, p, bad, 1e-5, 1e-4);
  CHECK_FALSE(r.pass);
  CHECK(r.failure == "b");
  CHECK(r.find("a")->pass);
  CHECK_FALSE(r.find("b")->pass);
}

TEST_CASE("tape ops match finite differences") {
  SeededRng rng(21);
  const Tensor probe3x4 = random_matrix(rng, 3, 4);
  const Tensor probe3x3 = random_matrix(rng, 3, 3);
  const Tensor a = random_matrix(rng, 3, 5), b = random_matrix(rng, 5, 4), c = random_matrix(rng, 4, 5);
  const Tensor x = random_matrix(rng, 3, 4), w = random_matrix(rng, 4, 4, 0.3);

  CHECK(tape_fd_error([&](Tape& t, const std::vector<Var>& v) { return weighted_sum(t, ops::matmul(v[0], v[1]), probe3x4); },
                      {a, b}) <= 1e-7);
  CHECK(tape_fd_error([&](Tape& t, const std::vector<Var>& v) { return weighted_sum(t, ops::matmul_nt(v[0], v[1]), probe3x4); },
                      {a, c}) <= 1e-7);
  CHECK(tape_fd_error([&](Tape& t, const std::vector<Var>& v) { return weighted_sum(t, ops::rms_norm(v[0]), probe3x4); },
                      {x}) <= 1e-7);
  CHECK(tape_fd_error([&](Tape& t, const std::vector<Var>& v) { return weighted_sum(t, ops::gelu(v[0]), probe3x4); },
                      {x}) <= 1e-7);
  CHECK(tape_fd_error([&](Tape& t, const std::vector<Var>& v) { return weighted_sum(t, ops::rotate(v[0], v[1]), probe3x4); },
                      {x, w}) <= 1e-7);
  CHECK(tape_fd_error([&](Tape& t, const std::vector<Var>& v) { return weighted_sum(t, ops::cosine_similarity(v[0]), probe3x3); },
                      {x}) <= 1e-6);
  Tensor mask = Tensor::matrix(3, 3, 1.0);
  mask(0, 2) = 0.0;
  CHECK(tape_fd_error([&](Tape& t, const std::vector<Var>& v) {
          return weighted_sum(t, ops::masked_softmax(ops::matmul_nt(v[0], v[0]), mask), probe3x3);
        },
                      {x}) <= 1e-6);
  const std::vector<int> targets{1, 3, 0};
  CHECK(tape_fd_error([&](Tape&, const std::vector<Var>& v) { return ops::cross_entropy(v[0], targets); }, {x}) <= 1e-7);
  const Tensor target = random_matrix(rng, 3, 3);
  CHECK(tape_fd_error([&](Tape&, const std::vector<Var>& v) { return ops::mse_to(ops::cosine_similarity(v[0]), target); },
                      {x}) <= 1e-6);
  const std::vector<double> teacher = random_vector(rng, 4);
  CHECK(tape_fd_error([&](Tape&, const std::vector<Var>& v) { return ops::softmax_kl(teacher, ops::mean_rows(v[0])); }, {x}) <=
        1e-7);
  const Tensor probe6x2 = random_matrix(rng, 6, 2);
  CHECK(tape_fd_error([&](Tape& t, const std::vector<Var>& v) {
          Var joined = ops::concat_rows(std::vector<Var>{ops::slice_cols(v[0], 1, 2), ops::slice_cols(v[1], 0, 2)});
          Var replaced = ops::replace_rows(joined, 2, ops::scale(ops::slice_rows(ops::slice_cols(v[1], 2, 2), 0, 2), -1.5));
          return weighted_sum(t, ops::add(replaced, ops::slice_rows(replaced, 0, 6)), probe6x2);
        },
                      {x, x}) <= 1e-7);
}

TEST_CASE("tape only differentiates what needs it") {
  Tape tape;
  Var c = tape.constant(Tensor::matrix(2, 2, 1.0));
  Var p = tape.parameter(Tensor::matrix(2, 2, 2.0));
  Var y = ops::mean_rows(ops::mean_rows(ops::matmul(c, p)));
  CHECK_FALSE(c.needs_grad());
  CHECK(p.needs_grad());
  CHECK_THROWS(tape.backward(ops::matmul(c, p)));
  Var s = ops::matmul(y, tape.constant(Tensor::matrix(2, 1, 1.0)));
  tape.backward(s);
  CHECK(c.grad().empty());
  CHECK(p.grad().size() == 4);
}
