#pragma once

// Reverse-mode autodiff over dense double matrices, plus the small set of
// neural-net building blocks the encoders need (Adam, init, sinusoidal
// position table). Single-threaded and fully deterministic for a fixed seed.

#include <Eigen/Core>

#include <functional>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace idc::nn {

using Matrix = Eigen::MatrixXd;

struct Node {
  Matrix value;
  Matrix grad;  // sized lazily by backward()
  std::vector<std::shared_ptr<Node>> parents;
  // Scatters this node's grad into its parents' grads. May be empty (leaf).
  std::function<void(Node&)> backprop;
};

// Lightweight value-semantics handle to a graph node.
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Var leaf(Matrix value);

  bool defined() const { return node_ != nullptr; }
  const Matrix& value() const { return node_->value; }
  Matrix& value() { return node_->value; }
  const Matrix& grad() const { return node_->grad; }
  Matrix& grad() { return node_->grad; }
  bool has_grad() const { return node_->grad.size() > 0; }
  Eigen::Index rows() const { return node_->value.rows(); }
  Eigen::Index cols() const { return node_->value.cols(); }
  double scalar() const;

  std::shared_ptr<Node> node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// Runs reverse-mode accumulation from a 1x1 root. Grads of every node
// reachable from the root (parameters included) are reset and recomputed.
void backward(const Var& root);

// --- elementwise / linear algebra ---
Var matmul(const Var& a, const Var& b);     // A * B
Var matmul_nt(const Var& a, const Var& b);  // A * B^T
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);  // elementwise, same shape
Var scale(const Var& a, double c);
Var add_rowvec(const Var& x, const Var& b);  // broadcast 1xd over rows

// --- shape ---
Var concat_rows(const std::vector<Var>& parts);
Var concat_cols(const std::vector<Var>& parts);
Var slice_rows(const Var& a, Eigen::Index r0, Eigen::Index n);
Var slice_cols(const Var& a, Eigen::Index c0, Eigen::Index n);

// --- nonlinearities / normalization ---
Var gelu(const Var& a);  // exact erf form
Var layer_norm(const Var& x, const Var& gamma, const Var& beta,
               double eps = 1e-5);
// Row softmax restricted to allowed (nonzero) entries; rows with no allowed
// entry come out all-zero.
Var softmax_rows_masked(const Var& scores, const Matrix& allow);
Var dropout(const Var& x, double p, std::mt19937_64& rng, bool training);

// --- lookup ---
Var gather_rows(const Var& table, const std::vector<int>& ids);

// --- reductions / losses ---
Var l2_normalize_rows(const Var& x);
Var rowwise_dot(const Var& a, const Var& b);  // nx1
Var logsumexp_rows(const Var& x);             // nx1
Var sum_all(const Var& x);                    // 1x1
Var mean_all(const Var& x);                   // 1x1
// Mean of (logsumexp(row) - row[target]) over rows.
Var cross_entropy_mean(const Var& logits, const std::vector<int>& targets);
// Mean of softplus(x) - y*x over rows of an nx1 logit column.
Var bce_with_logits_mean(const Var& logits, const std::vector<double>& targets);

// -log( exp(s_pos/tau) / (exp(s_pos/tau) + sum_j exp(s_neg_j/tau)) ), with
// s_pos an nx1 column and s_neg an nxK block of per-row negatives; returns
// the mean over the n rows.
Var nce_loss(const Var& s_pos, const Var& s_neg, double tau);

// --- parameter utilities ---
struct NamedParam {
  std::string name;
  Var var;
};

void trunc_normal_init(Matrix& m, double stddev, std::mt19937_64& rng);
Matrix sinusoidal_positions(int max_pos, int dim);

class Adam {
 public:
  Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8,
       double weight_decay = 0.0)
      : beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {}

  // Applies one update with the given learning rate. Parameters whose grad
  // was not touched by the last backward pass are skipped.
  void step(std::vector<NamedParam>& params, double lr);

  long step_count() const { return step_count_; }

  // Checkpoint plumbing: moment buffers in parameter order.
  const std::vector<Matrix>& m() const { return m_; }
  const std::vector<Matrix>& v() const { return v_; }
  void restore(std::vector<Matrix> m, std::vector<Matrix> v, long step_count);

 private:
  void ensure_state(const std::vector<NamedParam>& params);

  double beta1_, beta2_, eps_, weight_decay_;
  long step_count_ = 0;
  std::vector<Matrix> m_, v_;
};

}  // namespace idc::nn
