#include "idc/nn.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace idc::nn {

namespace {

std::shared_ptr<Node> make_node(Matrix value,
                                std::vector<std::shared_ptr<Node>> parents,
                                std::function<void(Node&)> backprop) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->parents = std::move(parents);
  n->backprop = std::move(backprop);
  return n;
}

void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                std::to_string(a.rows()) + "x" +
                                std::to_string(a.cols()) + " vs " +
                                std::to_string(b.rows()) + "x" +
                                std::to_string(b.cols()));
  }
}

}  // namespace

Var Var::leaf(Matrix value) {
  return Var(make_node(std::move(value), {}, nullptr));
}

double Var::scalar() const {
  if (rows() != 1 || cols() != 1) {
    throw std::logic_error("scalar() on non-1x1 value");
  }
  return node_->value(0, 0);
}

void backward(const Var& root) {
  if (!root.defined() || root.rows() != 1 || root.cols() != 1) {
    throw std::invalid_argument("backward: root must be a defined 1x1 value");
  }
  // Deterministic post-order DFS over parents.
  std::vector<Node*> topo;
  std::unordered_set<Node*> visited;
  struct Frame {
    Node* n;
    size_t next_parent;
  };
  std::vector<Frame> stack;
  stack.push_back({root.node().get(), 0});
  visited.insert(root.node().get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_parent < f.n->parents.size()) {
      Node* p = f.n->parents[f.next_parent++].get();
      if (visited.insert(p).second) {
        stack.push_back({p, 0});
      }
    } else {
      topo.push_back(f.n);
      stack.pop_back();
    }
  }
  for (Node* n : topo) {
    n->grad.setZero(n->value.rows(), n->value.cols());
  }
  root.node()->grad(0, 0) = 1.0;
  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    if ((*it)->backprop) (*it)->backprop(**it);
  }
}

Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dims");
  Matrix v = a.value() * b.value();
  return Var(make_node(std::move(v), {a.node(), b.node()}, [](Node& self) {
    self.parents[0]->grad.noalias() +=
        self.grad * self.parents[1]->value.transpose();
    self.parents[1]->grad.noalias() +=
        self.parents[0]->value.transpose() * self.grad;
  }));
}

Var matmul_nt(const Var& a, const Var& b) {
  if (a.cols() != b.cols()) {
    throw std::invalid_argument("matmul_nt: inner dims");
  }
  Matrix v = a.value() * b.value().transpose();
  return Var(make_node(std::move(v), {a.node(), b.node()}, [](Node& self) {
    self.parents[0]->grad.noalias() += self.grad * self.parents[1]->value;
    self.parents[1]->grad.noalias() +=
        self.grad.transpose() * self.parents[0]->value;
  }));
}

Var add(const Var& a, const Var& b) {
  check_same_shape(a, b, "add");
  Matrix v = a.value() + b.value();
  return Var(make_node(std::move(v), {a.node(), b.node()}, [](Node& self) {
    self.parents[0]->grad += self.grad;
    self.parents[1]->grad += self.grad;
  }));
}

Var sub(const Var& a, const Var& b) {
  check_same_shape(a, b, "sub");
  Matrix v = a.value() - b.value();
  return Var(make_node(std::move(v), {a.node(), b.node()}, [](Node& self) {
    self.parents[0]->grad += self.grad;
    self.parents[1]->grad -= self.grad;
  }));
}

Var mul(const Var& a, const Var& b) {
  check_same_shape(a, b, "mul");
  Matrix v = a.value().cwiseProduct(b.value());
  return Var(make_node(std::move(v), {a.node(), b.node()}, [](Node& self) {
    self.parents[0]->grad += self.grad.cwiseProduct(self.parents[1]->value);
    self.parents[1]->grad += self.grad.cwiseProduct(self.parents[0]->value);
  }));
}

Var scale(const Var& a, double c) {
  Matrix v = a.value() * c;
  return Var(make_node(std::move(v), {a.node()}, [c](Node& self) {
    self.parents[0]->grad += self.grad * c;
  }));
}

Var add_rowvec(const Var& x, const Var& b) {
  if (b.rows() != 1 || b.cols() != x.cols()) {
    throw std::invalid_argument("add_rowvec: bias must be 1 x cols(x)");
  }
  Matrix v = x.value().rowwise() + b.value().row(0);
  return Var(make_node(std::move(v), {x.node(), b.node()}, [](Node& self) {
    self.parents[0]->grad += self.grad;
    self.parents[1]->grad.row(0) += self.grad.colwise().sum();
  }));
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: empty");
  Eigen::Index rows = 0;
  const Eigen::Index cols = parts[0].cols();
  std::vector<std::shared_ptr<Node>> parents;
  for (const Var& p : parts) {
    if (p.cols() != cols) throw std::invalid_argument("concat_rows: cols");
    rows += p.rows();
    parents.push_back(p.node());
  }
  Matrix v(rows, cols);
  Eigen::Index r = 0;
  for (const Var& p : parts) {
    v.middleRows(r, p.rows()) = p.value();
    r += p.rows();
  }
  return Var(make_node(std::move(v), std::move(parents), [](Node& self) {
    Eigen::Index r = 0;
    for (auto& p : self.parents) {
      p->grad += self.grad.middleRows(r, p->value.rows());
      r += p->value.rows();
    }
  }));
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: empty");
  Eigen::Index cols = 0;
  const Eigen::Index rows = parts[0].rows();
  std::vector<std::shared_ptr<Node>> parents;
  for (const Var& p : parts) {
    if (p.rows() != rows) throw std::invalid_argument("concat_cols: rows");
    cols += p.cols();
    parents.push_back(p.node());
  }
  Matrix v(rows, cols);
  Eigen::Index c = 0;
  for (const Var& p : parts) {
    v.middleCols(c, p.cols()) = p.value();
    c += p.cols();
  }
  return Var(make_node(std::move(v), std::move(parents), [](Node& self) {
    Eigen::Index c = 0;
    for (auto& p : self.parents) {
      p->grad += self.grad.middleCols(c, p->value.cols());
      c += p->value.cols();
    }
  }));
}

Var slice_rows(const Var& a, Eigen::Index r0, Eigen::Index n) {
  if (r0 < 0 || r0 + n > a.rows()) {
    throw std::out_of_range("slice_rows: out of range");
  }
  Matrix v = a.value().middleRows(r0, n);
  return Var(make_node(std::move(v), {a.node()}, [r0, n](Node& self) {
    self.parents[0]->grad.middleRows(r0, n) += self.grad;
  }));
}

Var slice_cols(const Var& a, Eigen::Index c0, Eigen::Index n) {
  if (c0 < 0 || c0 + n > a.cols()) {
    throw std::out_of_range("slice_cols: out of range");
  }
  Matrix v = a.value().middleCols(c0, n);
  return Var(make_node(std::move(v), {a.node()}, [c0, n](Node& self) {
    self.parents[0]->grad.middleCols(c0, n) += self.grad;
  }));
}

Var gelu(const Var& a) {
  static constexpr double kInvSqrt2 = 0.7071067811865475244;
  static constexpr double kInvSqrt2Pi = 0.3989422804014326779;
  Matrix v = a.value().unaryExpr(
      [](double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); });
  return Var(make_node(std::move(v), {a.node()}, [](Node& self) {
    const Matrix& x = self.parents[0]->value;
    Matrix d = x.unaryExpr([](double t) {
      return 0.5 * (1.0 + std::erf(t * kInvSqrt2)) +
             t * kInvSqrt2Pi * std::exp(-0.5 * t * t);
    });
    self.parents[0]->grad += self.grad.cwiseProduct(d);
  }));
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  if (gamma.rows() != 1 || gamma.cols() != x.cols() || beta.rows() != 1 ||
      beta.cols() != x.cols()) {
    throw std::invalid_argument("layer_norm: gamma/beta must be 1 x cols(x)");
  }
  const Eigen::Index n = x.rows(), d = x.cols();
  Matrix xhat(n, d);
  Eigen::VectorXd inv_std(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double mu = x.value().row(i).mean();
    Eigen::RowVectorXd c = x.value().row(i).array() - mu;
    const double var = c.squaredNorm() / double(d);
    inv_std(i) = 1.0 / std::sqrt(var + eps);
    xhat.row(i) = c * inv_std(i);
  }
  Matrix v(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    v.row(i) =
        xhat.row(i).cwiseProduct(gamma.value().row(0)) + beta.value().row(0);
  }
  return Var(make_node(
      std::move(v), {x.node(), gamma.node(), beta.node()},
      [xhat, inv_std](Node& self) {
        Node& xn = *self.parents[0];
        Node& gn = *self.parents[1];
        Node& bn = *self.parents[2];
        const Eigen::Index n = xn.value.rows(), d = xn.value.cols();
        gn.grad.row(0) += (self.grad.array() * xhat.array()).colwise().sum().matrix();
        bn.grad.row(0) += self.grad.colwise().sum();
        for (Eigen::Index i = 0; i < n; ++i) {
          Eigen::RowVectorXd gh =
              self.grad.row(i).cwiseProduct(gn.value.row(0));
          const double mean_gh = gh.mean();
          const double mean_gh_xhat = gh.cwiseProduct(xhat.row(i)).mean();
          xn.grad.row(i) +=
              inv_std(i) *
              (gh.array() - mean_gh - xhat.row(i).array() * mean_gh_xhat)
                  .matrix();
        }
      }));
}

Var softmax_rows_masked(const Var& scores, const Matrix& allow) {
  if (allow.rows() != scores.rows() || allow.cols() != scores.cols()) {
    throw std::invalid_argument("softmax_rows_masked: mask shape");
  }
  const Eigen::Index n = scores.rows(), m = scores.cols();
  Matrix p = Matrix::Zero(n, m);
  for (Eigen::Index i = 0; i < n; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < m; ++j) {
      if (allow(i, j) != 0.0) mx = std::max(mx, scores.value()(i, j));
    }
    if (!std::isfinite(mx)) continue;  // fully masked row -> zeros
    double z = 0.0;
    for (Eigen::Index j = 0; j < m; ++j) {
      if (allow(i, j) != 0.0) {
        p(i, j) = std::exp(scores.value()(i, j) - mx);
        z += p(i, j);
      }
    }
    p.row(i) /= z;
  }
  return Var(make_node(p, {scores.node()}, [](Node& self) {
    const Matrix& p = self.value;
    for (Eigen::Index i = 0; i < p.rows(); ++i) {
      const double dot = self.grad.row(i).dot(p.row(i));
      self.parents[0]->grad.row(i) +=
          p.row(i).cwiseProduct((self.grad.row(i).array() - dot).matrix());
    }
  }));
}

Var dropout(const Var& x, double p, std::mt19937_64& rng, bool training) {
  if (!training || p <= 0.0) return x;
  if (p >= 1.0) throw std::invalid_argument("dropout: p must be < 1");
  std::bernoulli_distribution keep(1.0 - p);
  Matrix mask(x.rows(), x.cols());
  const double inv_keep = 1.0 / (1.0 - p);
  for (Eigen::Index i = 0; i < mask.rows(); ++i) {
    for (Eigen::Index j = 0; j < mask.cols(); ++j) {
      mask(i, j) = keep(rng) ? inv_keep : 0.0;
    }
  }
  Matrix v = x.value().cwiseProduct(mask);
  return Var(make_node(std::move(v), {x.node()}, [mask](Node& self) {
    self.parents[0]->grad += self.grad.cwiseProduct(mask);
  }));
}

Var gather_rows(const Var& table, const std::vector<int>& ids) {
  Matrix v(Eigen::Index(ids.size()), table.cols());
  for (size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || Eigen::Index(ids[i]) >= table.rows()) {
      throw std::out_of_range("gather_rows: id out of range");
    }
    v.row(Eigen::Index(i)) = table.value().row(ids[i]);
  }
  return Var(make_node(std::move(v), {table.node()}, [ids](Node& self) {
    for (size_t i = 0; i < ids.size(); ++i) {
      self.parents[0]->grad.row(ids[i]) += self.grad.row(Eigen::Index(i));
    }
  }));
}

Var l2_normalize_rows(const Var& x) {
  const Eigen::Index n = x.rows();
  Eigen::VectorXd inv_norm(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double norm = x.value().row(i).norm();
    if (norm == 0.0) {
      throw std::domain_error("l2_normalize_rows: zero-norm row");
    }
    inv_norm(i) = 1.0 / norm;
  }
  Matrix v = x.value().array().colwise() * inv_norm.array();
  return Var(make_node(v, {x.node()}, [inv_norm](Node& self) {
    const Matrix& y = self.value;
    for (Eigen::Index i = 0; i < y.rows(); ++i) {
      const double dot = self.grad.row(i).dot(y.row(i));
      self.parents[0]->grad.row(i) +=
          inv_norm(i) * (self.grad.row(i) - dot * y.row(i));
    }
  }));
}

Var rowwise_dot(const Var& a, const Var& b) {
  check_same_shape(a, b, "rowwise_dot");
  Matrix v(a.rows(), 1);
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    v(i, 0) = a.value().row(i).dot(b.value().row(i));
  }
  return Var(make_node(std::move(v), {a.node(), b.node()}, [](Node& self) {
    for (Eigen::Index i = 0; i < self.value.rows(); ++i) {
      self.parents[0]->grad.row(i) +=
          self.grad(i, 0) * self.parents[1]->value.row(i);
      self.parents[1]->grad.row(i) +=
          self.grad(i, 0) * self.parents[0]->value.row(i);
    }
  }));
}

Var logsumexp_rows(const Var& x) {
  const Eigen::Index n = x.rows(), m = x.cols();
  Matrix v(n, 1);
  Matrix soft(n, m);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double mx = x.value().row(i).maxCoeff();
    Eigen::RowVectorXd e = (x.value().row(i).array() - mx).exp();
    const double z = e.sum();
    v(i, 0) = mx + std::log(z);
    soft.row(i) = e / z;
  }
  return Var(make_node(std::move(v), {x.node()}, [soft](Node& self) {
    for (Eigen::Index i = 0; i < soft.rows(); ++i) {
      self.parents[0]->grad.row(i) += self.grad(i, 0) * soft.row(i);
    }
  }));
}

Var sum_all(const Var& x) {
  Matrix v(1, 1);
  v(0, 0) = x.value().sum();
  return Var(make_node(std::move(v), {x.node()}, [](Node& self) {
    self.parents[0]->grad.array() += self.grad(0, 0);
  }));
}

Var mean_all(const Var& x) {
  const double inv = 1.0 / double(x.rows() * x.cols());
  Matrix v(1, 1);
  v(0, 0) = x.value().sum() * inv;
  return Var(make_node(std::move(v), {x.node()}, [inv](Node& self) {
    self.parents[0]->grad.array() += self.grad(0, 0) * inv;
  }));
}

Var cross_entropy_mean(const Var& logits, const std::vector<int>& targets) {
  if (Eigen::Index(targets.size()) != logits.rows()) {
    throw std::invalid_argument("cross_entropy_mean: target count");
  }
  if (targets.empty()) {
    throw std::invalid_argument("cross_entropy_mean: no targets");
  }
  const Eigen::Index n = logits.rows(), m = logits.cols();
  Matrix soft(n, m);
  double total = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (targets[i] < 0 || targets[i] >= m) {
      throw std::out_of_range("cross_entropy_mean: target id");
    }
    const double mx = logits.value().row(i).maxCoeff();
    Eigen::RowVectorXd e = (logits.value().row(i).array() - mx).exp();
    const double z = e.sum();
    soft.row(i) = e / z;
    total += mx + std::log(z) - logits.value()(i, targets[i]);
  }
  Matrix v(1, 1);
  v(0, 0) = total / double(n);
  return Var(
      make_node(std::move(v), {logits.node()}, [soft, targets](Node& self) {
        const double g = self.grad(0, 0) / double(soft.rows());
        for (Eigen::Index i = 0; i < soft.rows(); ++i) {
          self.parents[0]->grad.row(i) += g * soft.row(i);
          self.parents[0]->grad(i, targets[i]) -= g;
        }
      }));
}

Var bce_with_logits_mean(const Var& logits,
                         const std::vector<double>& targets) {
  if (logits.cols() != 1 || Eigen::Index(targets.size()) != logits.rows()) {
    throw std::invalid_argument("bce_with_logits_mean: shape");
  }
  const Eigen::Index n = logits.rows();
  double total = 0.0;
  Eigen::VectorXd sig(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double x = logits.value()(i, 0);
    // softplus(x) - y*x, numerically stable
    const double sp = x > 0 ? x + std::log1p(std::exp(-x))
                            : std::log1p(std::exp(x));
    total += sp - targets[size_t(i)] * x;
    sig(i) = 1.0 / (1.0 + std::exp(-x));
  }
  Matrix v(1, 1);
  v(0, 0) = total / double(n);
  return Var(
      make_node(std::move(v), {logits.node()}, [sig, targets](Node& self) {
        const double g = self.grad(0, 0) / double(sig.size());
        for (Eigen::Index i = 0; i < sig.size(); ++i) {
          self.parents[0]->grad(i, 0) += g * (sig(i) - targets[size_t(i)]);
        }
      }));
}

Var nce_loss(const Var& s_pos, const Var& s_neg, double tau) {
  if (s_pos.cols() != 1 || s_pos.rows() != s_neg.rows()) {
    throw std::invalid_argument("nce_loss: shape");
  }
  if (s_neg.cols() < 1) {
    throw std::invalid_argument("nce_loss: empty negative set");
  }
  if (tau <= 0.0) throw std::invalid_argument("nce_loss: tau must be > 0");
  Var all = concat_cols({s_pos, s_neg});
  Var lse = logsumexp_rows(scale(all, 1.0 / tau));
  return mean_all(sub(lse, scale(s_pos, 1.0 / tau)));
}

void trunc_normal_init(Matrix& m, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      double x = dist(rng);
      while (std::abs(x) > 2.0 * stddev) x = dist(rng);
      m(i, j) = x;
    }
  }
}

Matrix sinusoidal_positions(int max_pos, int dim) {
  Matrix pe(max_pos, dim);
  for (int pos = 0; pos < max_pos; ++pos) {
    for (int i = 0; i < dim; i += 2) {
      const double freq = std::pow(10000.0, -double(i) / double(dim));
      pe(pos, i) = std::sin(pos * freq);
      if (i + 1 < dim) pe(pos, i + 1) = std::cos(pos * freq);
    }
  }
  return pe;
}

void Adam::ensure_state(const std::vector<NamedParam>& params) {
  if (m_.size() == params.size()) return;
  m_.clear();
  v_.clear();
  for (const auto& p : params) {
    m_.push_back(Matrix::Zero(p.var.rows(), p.var.cols()));
    v_.push_back(Matrix::Zero(p.var.rows(), p.var.cols()));
  }
}

void Adam::step(std::vector<NamedParam>& params, double lr) {
  ensure_state(params);
  ++step_count_;
  const double bc1 = 1.0 - std::pow(beta1_, double(step_count_));
  const double bc2 = 1.0 - std::pow(beta2_, double(step_count_));
  for (size_t i = 0; i < params.size(); ++i) {
    Var& p = params[i].var;
    if (!p.has_grad()) continue;  // untouched by this step's loss
    Matrix g = p.grad();
    if (weight_decay_ != 0.0) g += weight_decay_ * p.value();
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * g;
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * g.cwiseProduct(g);
    const Matrix mhat = m_[i] / bc1;
    const Matrix vhat = v_[i] / bc2;
    p.value().array() -=
        lr * mhat.array() / (vhat.array().sqrt() + eps_);
    p.grad().resize(0, 0);
  }
}

void Adam::restore(std::vector<Matrix> m, std::vector<Matrix> v,
                   long step_count) {
  m_ = std::move(m);
  v_ = std::move(v);
  step_count_ = step_count;
}

}  // namespace idc::nn
