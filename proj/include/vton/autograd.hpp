#pragma once

// Minimal reverse-mode differentiation over dense float64 matrices.
//
// A Tape records every operation of one forward pass. Parameters live in a
// ParamStore that outlives tapes; Tape::backward() adds gradients into the
// store so several forward passes can accumulate into one optimizer step.

#include <Eigen/Dense>
#include <Eigen/SparseCore>

#include <functional>
#include <map>
#include <string>
#include <vector>

namespace vton {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;
using RowVec = Eigen::RowVectorXd;
using SparseMat = Eigen::SparseMatrix<double>;

// Named float64 arrays, each paired with a gradient buffer of the same shape.
class ParamStore {
 public:
  Mat& add(const std::string& name, Eigen::Index rows, Eigen::Index cols);
  bool contains(const std::string& name) const;
  Mat& value(const std::string& name);
  const Mat& value(const std::string& name) const;
  Mat& grad(const std::string& name);
  const Mat& grad(const std::string& name) const;
  void zero_grad();
  std::vector<std::string> names() const;
  std::size_t size() const { return entries_.size(); }
  std::size_t scalar_count() const;
  bool all_finite() const;

 private:
  friend class Tape;
  struct Entry {
    Mat value;
    Mat grad;
  };
  Entry& entry(const std::string& name);
  const Entry& entry(const std::string& name) const;
  std::map<std::string, Entry> entries_;
};

class Tape;

// Handle to a value recorded on a Tape.
class Var {
 public:
  Var() = default;
  const Mat& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  Tape* tape() const { return tape_; }
  int id() const { return id_; }

 private:
  friend class Tape;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  using Backward = std::function<void(const Mat& grad_out, Tape& tape)>;

  Var constant(Mat value);
  Var param(ParamStore& store, const std::string& name);

  // Seeds d(root)/d(root) = 1 for a 1x1 root and propagates to every
  // parameter reachable from it.
  void backward(Var root);

  const Mat& value(int id) const { return nodes_[id].value; }
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }
  void accumulate(int id, const Mat& g);
  Var record(Mat value, const std::vector<Var>& parents, Backward fn);
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat value;
    Mat grad;
    bool requires_grad = false;
    Backward backward;
    ParamStore::Entry* param = nullptr;
  };
  std::vector<Node> nodes_;
};

namespace ag {

Var matmul(Var a, Var b);
// a * b^T
Var matmul_nt(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
// Adds a 1 x cols row to every row of `a`.
Var add_row(Var a, Var row);
Var scale(Var a, double s);
Var hadamard(Var a, Var b);
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-6);
Var softmax_rows(Var x);
Var gelu(Var x);
Var silu(Var x);
// x_r / sqrt(|x_r|^2 + eps) per row
Var l2_normalize_rows(Var x, double eps = 1e-12);
Var slice_rows(Var x, Eigen::Index begin, Eigen::Index count);
Var slice_cols(Var x, Eigen::Index begin, Eigen::Index count);
Var concat_rows(const std::vector<Var>& parts);
Var concat_cols(const std::vector<Var>& parts);
// Left-multiplies by a fixed sparse operator (pooling, upsampling,
// positional-embedding interpolation).
Var apply_left(const SparseMat& op, Var x);
// 3x3 neighbourhood gather over an (h*w) x C row-major feature grid with
// zero padding; output is (h*w) x (9*C), column block q = tap q.
Var im2col3x3(Var x, int height, int width);
// Mean over all entries of (x - target)^2.
Var mse(Var x, const Mat& target);
// Sum over rows r of targets: -sum_k targets(r,k) * log softmax(logits / temp)_k,
// for a single 1 x K row of logits.
Var soft_cross_entropy(Var logits, const Mat& targets, double temperature);
Var sum(Var x);

}  // namespace ag

// Row-wise softmax with max subtraction.
Mat softmax_rows(const Mat& x);
double gelu(double x);

}  // namespace vton
