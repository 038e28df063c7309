#include "mpo/tensor.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>
#include <unordered_set>
#include <utility>

namespace mpo {

namespace {

thread_local bool g_grad_enabled = true;

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                shape_string(a.value()) + " vs " +
                                shape_string(b.value()));
  }
}

void require_finite(OpKind op, const Matrix& m) {
  if (!m.allFinite()) {
    throw std::domain_error(std::string(op_name(op)) +
                            (op == OpKind::Leaf ? ": non-finite input "
                                                : ": non-finite result ") +
                            shape_string(m));
  }
}

}  // namespace

const char* op_name(OpKind op) {
  switch (op) {
    case OpKind::Leaf: return "leaf";
    case OpKind::Add: return "add";
    case OpKind::AddRow: return "add_row";
    case OpKind::Sub: return "sub";
    case OpKind::Mul: return "mul";
    case OpKind::Scale: return "scale";
    case OpKind::MatMul: return "matmul";
    case OpKind::MatMulNT: return "matmul_nt";
    case OpKind::Exp: return "exp";
    case OpKind::Log: return "log";
    case OpKind::Sigmoid: return "sigmoid";
    case OpKind::LogSigmoid: return "log_sigmoid";
    case OpKind::Gelu: return "gelu";
    case OpKind::LogSoftmax: return "log_softmax";
    case OpKind::Softmax: return "softmax";
    case OpKind::CausalSoftmax: return "causal_softmax";
    case OpKind::Gather: return "gather";
    case OpKind::Rows: return "rows";
    case OpKind::SliceRows: return "slice_rows";
    case OpKind::SliceCols: return "slice_cols";
    case OpKind::ConcatCols: return "concat_cols";
    case OpKind::Sum: return "sum";
    case OpKind::Mean: return "mean";
    case OpKind::RmsNorm: return "rms_norm";
  }
  return "unknown";
}

std::string shape_string(const Matrix& m) {
  std::ostringstream os;
  os << "[" << m.rows() << "x" << m.cols() << "]";
  return os.str();
}

void TapeNode::accumulate(const Matrix& g) {
  if (grad.size() == 0) {
    grad = g;
  } else {
    grad += g;
  }
}

Tensor Tensor::constant(Matrix value) {
  require_finite(OpKind::Leaf, value);
  auto n = std::make_shared<TapeNode>();
  n->value = std::move(value);
  return Tensor(std::move(n));
}

Tensor Tensor::parameter(Matrix value) {
  require_finite(OpKind::Leaf, value);
  auto n = std::make_shared<TapeNode>();
  n->grad = Matrix::Zero(value.rows(), value.cols());
  n->value = std::move(value);
  n->requires_grad = true;
  return Tensor(std::move(n));
}

Matrix Tensor::grad() const {
  if (node_->grad.size() == 0) return Matrix::Zero(rows(), cols());
  return node_->grad;
}

double Tensor::item() const {
  if (size() != 1) {
    throw std::invalid_argument("item: tensor is not a scalar " +
                                shape_string(value()));
  }
  return node_->value(0, 0);
}

void Tensor::zero_grad() {
  node_->grad.setZero(rows(), cols());
}

void Tensor::assign(const Matrix& value) {
  if (node_->op != OpKind::Leaf) {
    throw std::logic_error("assign: only leaves can be updated");
  }
  if (value.rows() != rows() || value.cols() != cols()) {
    throw std::invalid_argument("assign: shape mismatch " +
                                shape_string(node_->value) + " vs " +
                                shape_string(value));
  }
  require_finite(OpKind::Leaf, value);
  node_->value = value;
}

Tensor make_result(OpKind op, Matrix value, std::vector<Tensor> parents,
                   std::function<void(TapeNode&)> backward) {
  require_finite(op, value);
  auto n = std::make_shared<TapeNode>();
  n->op = op;
  n->value = std::move(value);
  bool any = false;
  for (const auto& p : parents) any = any || p.requires_grad();
  if (g_grad_enabled && any) {
    n->requires_grad = true;
    n->parents.reserve(parents.size());
    for (auto& p : parents) n->parents.push_back(p.node_);
    n->backward = std::move(backward);
  }
  return Tensor(std::move(n));
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) {
  g_grad_enabled = false;
}

NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

// ---------------------------------------------------------------------------

namespace {

// Adds g into parent i when that parent participates in differentiation.
inline void push(TapeNode& self, std::size_t i, const Matrix& g) {
  auto& p = *self.parents[i];
  if (p.requires_grad) p.accumulate(g);
}

inline bool wants(const TapeNode& self, std::size_t i) {
  return self.parents[i]->requires_grad;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  return make_result(OpKind::Add, a.value() + b.value(), {a, b},
                     [](TapeNode& s) {
                       push(s, 0, s.grad);
                       push(s, 1, s.grad);
                     });
}

Tensor add_row(const Tensor& a, const Tensor& bias) {
  if (bias.rows() != 1 || bias.cols() != a.cols()) {
    throw std::invalid_argument("add_row: shape mismatch " +
                                shape_string(a.value()) + " vs " +
                                shape_string(bias.value()));
  }
  Matrix out = a.value().rowwise() + bias.value().row(0);
  return make_result(OpKind::AddRow, std::move(out), {a, bias},
                     [](TapeNode& s) {
                       push(s, 0, s.grad);
                       if (wants(s, 1)) push(s, 1, s.grad.colwise().sum());
                     });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  return make_result(OpKind::Sub, a.value() - b.value(), {a, b},
                     [](TapeNode& s) {
                       push(s, 0, s.grad);
                       if (wants(s, 1)) push(s, 1, -s.grad);
                     });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.size() == 1 && b.size() != 1) {
    const double k = a.item();
    return make_result(OpKind::Mul, k * b.value(), {a, b},
                       [k](TapeNode& s) {
                         const Matrix& bv = s.parents[1]->value;
                         if (wants(s, 0)) {
                           push(s, 0,
                                Matrix::Constant(1, 1,
                                                 (s.grad.array() * bv.array()).sum()));
                         }
                         if (wants(s, 1)) push(s, 1, k * s.grad);
                       });
  }
  require_same_shape("mul", a, b);
  Matrix out = a.value().cwiseProduct(b.value());
  return make_result(OpKind::Mul, std::move(out), {a, b}, [](TapeNode& s) {
    if (wants(s, 0)) push(s, 0, s.grad.cwiseProduct(s.parents[1]->value));
    if (wants(s, 1)) push(s, 1, s.grad.cwiseProduct(s.parents[0]->value));
  });
}

Tensor scale(const Tensor& a, double factor) {
  return make_result(OpKind::Scale, factor * a.value(), {a},
                     [factor](TapeNode& s) { push(s, 0, factor * s.grad); });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) {
    throw std::invalid_argument("matmul: shape mismatch " +
                                shape_string(a.value()) + " vs " +
                                shape_string(b.value()));
  }
  Matrix out = a.value() * b.value();
  return make_result(OpKind::MatMul, std::move(out), {a, b}, [](TapeNode& s) {
    if (wants(s, 0)) push(s, 0, s.grad * s.parents[1]->value.transpose());
    if (wants(s, 1)) push(s, 1, s.parents[0]->value.transpose() * s.grad);
  });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.cols()) {
    throw std::invalid_argument("matmul_nt: shape mismatch " +
                                shape_string(a.value()) + " vs " +
                                shape_string(b.value()));
  }
  Matrix out = a.value() * b.value().transpose();
  return make_result(OpKind::MatMulNT, std::move(out), {a, b},
                     [](TapeNode& s) {
                       if (wants(s, 0)) push(s, 0, s.grad * s.parents[1]->value);
                       if (wants(s, 1)) {
                         push(s, 1, s.grad.transpose() * s.parents[0]->value);
                       }
                     });
}

Tensor exp(const Tensor& a) {
  Matrix out = a.value().array().exp().matrix();
  return make_result(OpKind::Exp, out, {a}, [out](TapeNode& s) {
    push(s, 0, s.grad.cwiseProduct(out));
  });
}

Tensor log(const Tensor& a) {
  if ((a.value().array() <= 0.0).any()) {
    throw std::domain_error("log: non-positive input " +
                            shape_string(a.value()));
  }
  return make_result(OpKind::Log, a.value().array().log().matrix(), {a},
                     [](TapeNode& s) {
                       push(s, 0,
                            (s.grad.array() / s.parents[0]->value.array())
                                .matrix());
                     });
}

double stable_sigmoid(double x) {
  // Both branches only ever exponentiate a non-positive number.
  const double e = std::exp(-std::abs(x));
  return x >= 0.0 ? 1.0 / (1.0 + e) : e / (1.0 + e);
}

double log_sigmoid(double x) {
  return std::min(x, 0.0) - std::log1p(std::exp(-std::abs(x)));
}

Tensor sigmoid(const Tensor& a) {
  Matrix out = a.value().unaryExpr([](double x) { return stable_sigmoid(x); });
  return make_result(OpKind::Sigmoid, out, {a}, [out](TapeNode& s) {
    push(s, 0,
         (s.grad.array() * out.array() * (1.0 - out.array())).matrix());
  });
}

Tensor log_sigmoid(const Tensor& a) {
  Matrix out = a.value().unaryExpr([](double x) { return log_sigmoid(x); });
  return make_result(OpKind::LogSigmoid, std::move(out), {a},
                     [](TapeNode& s) {
                       // d/dx log sigma(x) = sigma(-x)
                       Matrix d = s.parents[0]->value.unaryExpr(
                           [](double x) { return stable_sigmoid(-x); });
                       push(s, 0, s.grad.cwiseProduct(d));
                     });
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

Tensor gelu(const Tensor& a) {
  Matrix out = a.value().unaryExpr([](double x) {
    return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x)));
  });
  return make_result(OpKind::Gelu, std::move(out), {a}, [](TapeNode& s) {
    Matrix d = s.parents[0]->value.unaryExpr([](double x) {
      const double t = std::tanh(kGeluC * (x + kGeluA * x * x * x));
      return 0.5 * (1.0 + t) +
             0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
    });
    push(s, 0, s.grad.cwiseProduct(d));
  });
}

RowVector log_softmax_row(const RowVector& logits) {
  const double m = logits.maxCoeff();
  const double lse = m + std::log((logits.array() - m).exp().sum());
  return (logits.array() - lse).matrix();
}

Tensor log_softmax(const Tensor& a) {
  const Matrix& x = a.value();
  Matrix out(x.rows(), x.cols());
  for (Index i = 0; i < x.rows(); ++i) out.row(i) = log_softmax_row(x.row(i));
  return make_result(OpKind::LogSoftmax, out, {a}, [out](TapeNode& s) {
    Matrix g = s.grad;
    for (Index i = 0; i < g.rows(); ++i) {
      const double total = s.grad.row(i).sum();
      g.row(i) -= total * out.row(i).array().exp().matrix();
    }
    push(s, 0, g);
  });
}

namespace {

Tensor softmax_impl(const Tensor& a, bool causal) {
  const Matrix& x = a.value();
  if (causal && x.rows() != x.cols()) {
    throw std::invalid_argument("causal_softmax: expected square input, got " +
                                shape_string(x));
  }
  Matrix out = Matrix::Zero(x.rows(), x.cols());
  for (Index i = 0; i < x.rows(); ++i) {
    const Index n = causal ? i + 1 : x.cols();
    auto row = x.row(i).head(n);
    const double m = row.maxCoeff();
    auto e = (row.array() - m).exp();
    out.row(i).head(n) = (e / e.sum()).matrix();
  }
  return make_result(causal ? OpKind::CausalSoftmax : OpKind::Softmax, out,
                     {a}, [out](TapeNode& s) {
                       Matrix g(out.rows(), out.cols());
                       for (Index i = 0; i < out.rows(); ++i) {
                         const double dot = s.grad.row(i).dot(out.row(i));
                         g.row(i) = (out.row(i).array() *
                                     (s.grad.row(i).array() - dot))
                                        .matrix();
                       }
                       push(s, 0, g);
                     });
}

}  // namespace

Tensor softmax(const Tensor& a) { return softmax_impl(a, false); }
Tensor causal_softmax(const Tensor& a) { return softmax_impl(a, true); }

Tensor rms_norm(const Tensor& a, const Tensor& gain, double eps) {
  if (gain.rows() != 1 || gain.cols() != a.cols()) {
    throw std::invalid_argument("rms_norm: shape mismatch " +
                                shape_string(a.value()) + " vs " +
                                shape_string(gain.value()));
  }
  const Matrix& x = a.value();
  const Index d = x.cols();
  Eigen::VectorXd inv(x.rows());
  Matrix normed(x.rows(), d);
  for (Index i = 0; i < x.rows(); ++i) {
    inv(i) = 1.0 / std::sqrt(x.row(i).squaredNorm() / d + eps);
    normed.row(i) = x.row(i) * inv(i);
  }
  Matrix out = normed.array().rowwise() * gain.value().row(0).array();
  return make_result(
      OpKind::RmsNorm, std::move(out), {a, gain},
      [normed, inv](TapeNode& s) {
        const RowVector& g = s.parents[1]->value.row(0);
        if (wants(s, 1)) {
          push(s, 1, s.grad.cwiseProduct(normed).colwise().sum());
        }
        if (wants(s, 0)) {
          const Index d = normed.cols();
          Matrix dn = s.grad.array().rowwise() * g.array();
          Matrix dx(dn.rows(), d);
          for (Index i = 0; i < dn.rows(); ++i) {
            const double proj = dn.row(i).dot(normed.row(i)) / d;
            dx.row(i) = inv(i) * (dn.row(i) - proj * normed.row(i));
          }
          push(s, 0, dx);
        }
      });
}

Tensor gather(const Tensor& a, std::span<const Index> cols) {
  if (static_cast<Index>(cols.size()) != a.rows()) {
    throw std::invalid_argument("gather: " + std::to_string(cols.size()) +
                                " indices for " + shape_string(a.value()));
  }
  std::vector<Index> idx(cols.begin(), cols.end());
  Matrix out(a.rows(), 1);
  for (Index i = 0; i < a.rows(); ++i) {
    if (idx[i] < 0 || idx[i] >= a.cols()) {
      throw std::out_of_range("gather: index " + std::to_string(idx[i]) +
                              " outside " + shape_string(a.value()));
    }
    out(i, 0) = a.value()(i, idx[i]);
  }
  return make_result(OpKind::Gather, std::move(out), {a},
                     [idx = std::move(idx)](TapeNode& s) {
                       const auto& p = *s.parents[0];
                       Matrix g = Matrix::Zero(p.value.rows(), p.value.cols());
                       for (std::size_t i = 0; i < idx.size(); ++i) {
                         g(static_cast<Index>(i), idx[i]) = s.grad(i, 0);
                       }
                       push(s, 0, g);
                     });
}

Tensor rows(const Tensor& table, std::span<const Index> ids) {
  std::vector<Index> idx(ids.begin(), ids.end());
  Matrix out(static_cast<Index>(idx.size()), table.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= table.rows()) {
      throw std::out_of_range("rows: index " + std::to_string(idx[i]) +
                              " outside " + shape_string(table.value()));
    }
    out.row(static_cast<Index>(i)) = table.value().row(idx[i]);
  }
  return make_result(OpKind::Rows, std::move(out), {table},
                     [idx = std::move(idx)](TapeNode& s) {
                       auto& p = *s.parents[0];
                       if (p.grad.size() == 0) {
                         p.grad = Matrix::Zero(p.value.rows(), p.value.cols());
                       }
                       for (std::size_t i = 0; i < idx.size(); ++i) {
                         p.grad.row(idx[i]) += s.grad.row(static_cast<Index>(i));
                       }
                     });
}

Tensor slice_rows(const Tensor& a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) {
    throw std::out_of_range("slice_rows: [" + std::to_string(start) + ", +" +
                            std::to_string(count) + ") outside " +
                            shape_string(a.value()));
  }
  Matrix out = a.value().middleRows(start, count);
  return make_result(OpKind::SliceRows, std::move(out), {a},
                     [start, count](TapeNode& s) {
                       auto& p = *s.parents[0];
                       if (p.grad.size() == 0) {
                         p.grad = Matrix::Zero(p.value.rows(), p.value.cols());
                       }
                       p.grad.middleRows(start, count) += s.grad;
                     });
}

Tensor slice_cols(const Tensor& a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) {
    throw std::out_of_range("slice_cols: [" + std::to_string(start) + ", +" +
                            std::to_string(count) + ") outside " +
                            shape_string(a.value()));
  }
  Matrix out = a.value().middleCols(start, count);
  return make_result(OpKind::SliceCols, std::move(out), {a},
                     [start, count](TapeNode& s) {
                       auto& p = *s.parents[0];
                       if (p.grad.size() == 0) {
                         p.grad = Matrix::Zero(p.value.rows(), p.value.cols());
                       }
                       p.grad.middleCols(start, count) += s.grad;
                     });
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  const Index r = parts[0].rows();
  Index total = 0;
  for (const auto& p : parts) {
    if (p.rows() != r) {
      throw std::invalid_argument("concat_cols: shape mismatch " +
                                  shape_string(parts[0].value()) + " vs " +
                                  shape_string(p.value()));
    }
    total += p.cols();
  }
  Matrix out(r, total);
  std::vector<Index> offsets;
  Index at = 0;
  for (const auto& p : parts) {
    offsets.push_back(at);
    out.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  return make_result(OpKind::ConcatCols, std::move(out),
                     std::vector<Tensor>(parts.begin(), parts.end()),
                     [offsets = std::move(offsets)](TapeNode& s) {
                       for (std::size_t i = 0; i < s.parents.size(); ++i) {
                         if (!wants(s, i)) continue;
                         const Index c = s.parents[i]->value.cols();
                         push(s, i, s.grad.middleCols(offsets[i], c));
                       }
                     });
}

Tensor sum(const Tensor& a) {
  return make_result(OpKind::Sum, Matrix::Constant(1, 1, a.value().sum()),
                     {a}, [](TapeNode& s) {
                       const auto& p = *s.parents[0];
                       push(s, 0,
                            Matrix::Constant(p.value.rows(), p.value.cols(),
                                             s.grad(0, 0)));
                     });
}

Tensor mean(const Tensor& a) {
  const double n = static_cast<double>(a.size());
  return make_result(OpKind::Mean, Matrix::Constant(1, 1, a.value().sum() / n),
                     {a}, [n](TapeNode& s) {
                       const auto& p = *s.parents[0];
                       push(s, 0,
                            Matrix::Constant(p.value.rows(), p.value.cols(),
                                             s.grad(0, 0) / n));
                     });
}

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw std::invalid_argument(
        "backward: loss must be a scalar, got " +
        (loss.defined() ? shape_string(loss.value()) : std::string("<empty>")));
  }
  TapeNode* root = loss.node().get();
  if (!root->requires_grad) return;

  // Iterative post-order DFS gives a topological order of the recorded graph.
  std::vector<TapeNode*> order;
  std::unordered_set<TapeNode*> seen;
  std::vector<std::pair<TapeNode*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      TapeNode* p = node->parents[next++].get();
      if (p->requires_grad && !p->parents.empty() && seen.insert(p).second) {
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  // Interior gradients belong to this pass only.
  for (TapeNode* n : order) n->grad.resize(0, 0);
  root->grad = Matrix::Ones(1, 1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TapeNode* n = *it;
    if (n->grad.size() == 0 || !n->backward) continue;
    n->backward(*n);
  }
  for (TapeNode* n : order) n->grad.resize(0, 0);
}

}  // namespace mpo
