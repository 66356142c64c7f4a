#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "idc/nn.hpp"

#include <cmath>
#include <functional>
#include <random>

using idc::nn::Matrix;
using idc::nn::Var;
namespace nn = idc::nn;

namespace {

Matrix randn(int r, int c, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> d(0.0, scale);
  Matrix m(r, c);
  for (int i = 0; i < r; ++i) {
    for (int j = 0; j < c; ++j) m(i, j) = d(rng);
  }
  return m;
}

// Max relative error between analytic gradients and central differences
// over every element of every parameter.
double fd_max_rel_err(const std::function<Var()>& make_loss,
                      std::vector<Var> params, double h = 1e-5) {
  Var loss = make_loss();
  nn::backward(loss);
  std::vector<Matrix> grads;
  for (auto& p : params) grads.push_back(p.grad());
  double worst = 0.0;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Matrix& value = params[pi].value();
    for (Eigen::Index i = 0; i < value.rows(); ++i) {
      for (Eigen::Index j = 0; j < value.cols(); ++j) {
        const double saved = value(i, j);
        value(i, j) = saved + h;
        const double fp = make_loss().scalar();
        value(i, j) = saved - h;
        const double fm = make_loss().scalar();
        value(i, j) = saved;
        const double fd = (fp - fm) / (2.0 * h);
        const double an = grads[pi](i, j);
        const double denom = std::max({std::abs(fd), std::abs(an), 1e-6});
        worst = std::max(worst, std::abs(fd - an) / denom);
      }
    }
  }
  return worst;
}

}  // namespace

TEST_CASE("matmul and affine gradients match finite differences") {
  std::mt19937_64 rng(7);
  Var w = Var::leaf(randn(4, 5, rng));
  Var b = Var::leaf(randn(1, 5, rng));
  Var x = Var::leaf(randn(3, 4, rng));
  auto loss = [&] {
    Var y = nn::add_rowvec(nn::matmul(x, w), b);
    return nn::mean_all(nn::mul(y, y));
  };
  CHECK(fd_max_rel_err(loss, {w, b, x}) < 1e-6);
}

TEST_CASE("matmul_nt, slicing and concatenation gradients") {
  std::mt19937_64 rng(11);
  Var a = Var::leaf(randn(3, 6, rng));
  Var b = Var::leaf(randn(4, 6, rng));
  auto loss = [&] {
    Var s = nn::matmul_nt(a, b);  // 3x4
    Var left = nn::slice_cols(s, 0, 2);
    Var right = nn::slice_cols(s, 2, 2);
    Var stacked = nn::concat_rows({left, right});    // 6x2
    Var wide = nn::concat_cols({stacked, stacked});  // 6x4
    return nn::mean_all(nn::mul(wide, wide));
  };
  CHECK(fd_max_rel_err(loss, {a, b}) < 1e-6);
}

TEST_CASE("gelu and layer_norm gradients") {
  std::mt19937_64 rng(13);
  Var x = Var::leaf(randn(4, 8, rng));
  Var g = Var::leaf(Matrix::Ones(1, 8) + 0.1 * randn(1, 8, rng));
  Var b = Var::leaf(randn(1, 8, rng, 0.1));
  auto loss = [&] {
    return nn::mean_all(nn::mul(nn::layer_norm(nn::gelu(x), g, b),
                                nn::layer_norm(nn::gelu(x), g, b)));
  };
  // Near-zero gradients sit on the relative-error floor; roundoff in the
  // central difference dominates there.
  CHECK(fd_max_rel_err(loss, {x, g, b}) < 2e-5);
}

TEST_CASE("masked softmax gradients and fully-masked rows") {
  std::mt19937_64 rng(17);
  Var s = Var::leaf(randn(4, 4, rng));
  Matrix allow = Matrix::Ones(4, 4);
  allow(1, 2) = 0;
  allow(1, 3) = 0;
  allow.row(3).setZero();  // fully masked row comes out zero
  Var v = Var::leaf(randn(4, 3, rng));
  auto loss = [&] {
    Var p = nn::softmax_rows_masked(s, allow);
    Var y = nn::matmul(p, v);
    return nn::mean_all(nn::mul(y, y));
  };
  Var probs = nn::softmax_rows_masked(s, allow);
  CHECK(probs.value().row(3).cwiseAbs().sum() == 0.0);
  CHECK(probs.value().row(0).sum() == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(probs.value()(1, 2) == 0.0);
  CHECK(fd_max_rel_err(loss, {s, v}) < 1e-6);
}

TEST_CASE("gather_rows accumulates duplicate-id gradients") {
  std::mt19937_64 rng(19);
  Var table = Var::leaf(randn(5, 3, rng));
  std::vector<int> ids = {0, 2, 2, 4};
  auto loss = [&] {
    Var g = nn::gather_rows(table, ids);
    return nn::mean_all(nn::mul(g, g));
  };
  CHECK(fd_max_rel_err(loss, {table}) < 1e-6);
}

TEST_CASE("normalization, dots, logsumexp gradients") {
  std::mt19937_64 rng(23);
  Var a = Var::leaf(randn(3, 6, rng));
  Var b = Var::leaf(randn(3, 6, rng));
  auto loss = [&] {
    Var an = nn::l2_normalize_rows(a);
    Var bn = nn::l2_normalize_rows(b);
    Var cosines = nn::rowwise_dot(an, bn);
    Var sims = nn::matmul_nt(an, bn);
    return nn::add(nn::mean_all(nn::logsumexp_rows(sims)),
                   nn::mean_all(cosines));
  };
  CHECK(fd_max_rel_err(loss, {a, b}) < 1e-6);
}

TEST_CASE("cross entropy closed forms and gradient") {
  // Uniform logits over V classes cost ln(V).
  Var uniform = Var::leaf(Matrix::Zero(3, 100));
  CHECK(nn::cross_entropy_mean(uniform, {0, 50, 99}).scalar() ==
        doctest::Approx(std::log(100.0)).epsilon(1e-12));
  // A dominant correct logit drives the loss toward zero.
  Matrix sharp = Matrix::Zero(1, 10);
  sharp(0, 3) = 50.0;
  CHECK(nn::cross_entropy_mean(Var::leaf(sharp), {3}).scalar() < 1e-12);

  std::mt19937_64 rng(29);
  Var logits = Var::leaf(randn(4, 7, rng));
  auto loss = [&] { return nn::cross_entropy_mean(logits, {1, 0, 6, 3}); };
  CHECK(fd_max_rel_err(loss, {logits}) < 1e-6);
}

TEST_CASE("bce closed form and gradient") {
  Var zero = Var::leaf(Matrix::Zero(4, 1));
  CHECK(nn::bce_with_logits_mean(zero, {1, 0, 1, 0}).scalar() ==
        doctest::Approx(std::log(2.0)).epsilon(1e-12));
  std::mt19937_64 rng(31);
  Var logits = Var::leaf(randn(5, 1, rng));
  auto loss = [&] {
    return nn::bce_with_logits_mean(logits, {1, 0, 1, 0, 1});
  };
  CHECK(fd_max_rel_err(loss, {logits}) < 1e-6);
}

TEST_CASE("nce closed forms") {
  // Positive at similarity 1, four negatives at 0: ln(1 + 4/e).
  Var s_pos = Var::leaf(Matrix::Ones(1, 1));
  Var s_neg = Var::leaf(Matrix::Zero(1, 4));
  CHECK(nn::nce_loss(s_pos, s_neg, 1.0).scalar() ==
        doctest::Approx(std::log(1.0 + 4.0 / std::exp(1.0))).epsilon(1e-12));
  // All similarities equal: ln(K+1).
  Var flat_pos = Var::leaf(Matrix::Constant(1, 1, 0.3));
  Var flat_neg = Var::leaf(Matrix::Constant(1, 6, 0.3));
  CHECK(nn::nce_loss(flat_pos, flat_neg, 1.0).scalar() ==
        doctest::Approx(std::log(7.0)).epsilon(1e-12));
  // Empty negative set is an error.
  CHECK_THROWS(nn::nce_loss(s_pos, Var::leaf(Matrix(1, 0)), 1.0));

  std::mt19937_64 rng(37);
  Var p = Var::leaf(randn(3, 1, rng));
  Var n = Var::leaf(randn(3, 5, rng));
  auto loss = [&] { return nn::nce_loss(p, n, 0.7); };
  CHECK(fd_max_rel_err(loss, {p, n}) < 1e-6);
}

TEST_CASE("dropout is identity in eval mode and scales in train mode") {
  std::mt19937_64 rng(41);
  Var x = Var::leaf(randn(50, 20, rng));
  Var same = nn::dropout(x, 0.5, rng, false);
  CHECK(same.node() == x.node());
  Var dropped = nn::dropout(x, 0.5, rng, true);
  int zeros = 0;
  for (Eigen::Index i = 0; i < dropped.rows(); ++i) {
    for (Eigen::Index j = 0; j < dropped.cols(); ++j) {
      if (dropped.value()(i, j) == 0.0) ++zeros;
    }
  }
  CHECK(zeros > 300);
  CHECK(zeros < 700);
}

TEST_CASE("adam skips parameters outside the last graph") {
  std::mt19937_64 rng(43);
  std::vector<nn::NamedParam> params;
  params.push_back({"used", Var::leaf(randn(2, 2, rng))});
  params.push_back({"unused", Var::leaf(randn(2, 2, rng))});
  const Matrix before_unused = params[1].var.value();
  const Matrix before_used = params[0].var.value();
  Var loss = nn::mean_all(nn::mul(params[0].var, params[0].var));
  nn::backward(loss);
  nn::Adam adam;
  adam.step(params, 0.1);
  CHECK(params[1].var.value() == before_unused);
  CHECK(params[0].var.value() != before_used);
}

TEST_CASE("sinusoidal table has unit-range entries and distinct rows") {
  const Matrix pe = nn::sinusoidal_positions(16, 8);
  CHECK(pe.rows() == 16);
  CHECK(pe.cwiseAbs().maxCoeff() <= 1.0);
  CHECK((pe.row(0) - pe.row(1)).norm() > 1e-3);
}
