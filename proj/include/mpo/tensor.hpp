#pragma once

#include <Eigen/Dense>

#include <array>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace mpo {

using Index = Eigen::Index;
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic>;

enum class OpKind {
  Leaf,
  Add,
  AddRow,
  Sub,
  Mul,
  Scale,
  MatMul,
  MatMulNT,
  Exp,
  Log,
  Sigmoid,
  LogSigmoid,
  Gelu,
  LogSoftmax,
  Softmax,
  CausalSoftmax,
  Gather,
  Rows,
  SliceRows,
  SliceCols,
  ConcatCols,
  Sum,
  Mean,
  RmsNorm,
};

const char* op_name(OpKind op);

// One recorded operation. Parents are owned by the child, so the graph lives
// exactly as long as the outputs that reference it.
struct TapeNode {
  OpKind op = OpKind::Leaf;
  Matrix value;
  Matrix grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<TapeNode>> parents;
  std::function<void(TapeNode&)> backward;

  void accumulate(const Matrix& g);
};

/// Handle to an immutable dense value of rank <= 2 that may take part in
/// reverse-mode differentiation. Scalars are 1x1, vectors are 1xn.
class Tensor {
 public:
  Tensor() = default;

  static Tensor constant(Matrix value);
  static Tensor parameter(Matrix value);
  static Tensor scalar(double v) { return constant(Matrix::Constant(1, 1, v)); }

  bool defined() const { return node_ != nullptr; }
  const Matrix& value() const { return node_->value; }
  /// Accumulated gradient; zeros of the value's shape when nothing reached it.
  Matrix grad() const;
  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }
  std::array<Index, 2> shape() const { return {rows(), cols()}; }
  Index size() const { return node_->value.size(); }
  double item() const;
  bool requires_grad() const { return node_->requires_grad; }
  OpKind op() const { return node_->op; }

  void zero_grad();
  /// Optimizer hook: replaces the value of a leaf in place.
  void assign(const Matrix& value);

  const std::shared_ptr<TapeNode>& node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<TapeNode> n) : node_(std::move(n)) {}
  std::shared_ptr<TapeNode> node_;

  friend Tensor make_result(OpKind, Matrix, std::vector<Tensor>,
                            std::function<void(TapeNode&)>);
};

Tensor make_result(OpKind op, Matrix value, std::vector<Tensor> parents,
                   std::function<void(TapeNode&)> backward);

/// Disables recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

std::string shape_string(const Matrix& m);

// Elementwise and linear algebra.
Tensor add(const Tensor& a, const Tensor& b);
Tensor add_row(const Tensor& a, const Tensor& bias);
Tensor sub(const Tensor& a, const Tensor& b);
/// Elementwise product; `a` may also be a 1x1 scalar broadcast over `b`.
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor matmul(const Tensor& a, const Tensor& b);
/// a * b^T without materializing the transpose.
Tensor matmul_nt(const Tensor& a, const Tensor& b);

Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sigmoid(const Tensor& a);
/// log(sigmoid(a)), stable for large |a|.
Tensor log_sigmoid(const Tensor& a);
Tensor gelu(const Tensor& a);

// Row-wise normalizations.
Tensor log_softmax(const Tensor& a);
Tensor softmax(const Tensor& a);
/// Softmax over columns j <= i of each row i of a square matrix.
Tensor causal_softmax(const Tensor& a);
Tensor rms_norm(const Tensor& a, const Tensor& gain, double eps = 1e-6);

// Indexing.
/// Column vector whose i-th entry is a(i, cols[i]).
Tensor gather(const Tensor& a, std::span<const Index> cols);
/// Stacks rows `ids` of `table` (embedding lookup).
Tensor rows(const Tensor& table, std::span<const Index> ids);
Tensor slice_rows(const Tensor& a, Index start, Index count);
Tensor slice_cols(const Tensor& a, Index start, Index count);
Tensor concat_cols(std::span<const Tensor> parts);

// Reductions to 1x1.
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(double s, const Tensor& a) { return scale(a, s); }

/// Reverse pass from a 1x1 loss. Gradients are added to every leaf reachable
/// from the loss; each recorded node is visited once in reverse topological
/// order.
void backward(const Tensor& loss);

// Plain-value helpers shared by the model and the objectives.
double stable_sigmoid(double x);
double log_sigmoid(double x);
RowVector log_softmax_row(const RowVector& logits);

}  // namespace mpo
