#include "cilmp/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numbers>

#include "cilmp/errors.hpp"

namespace cilmp::ops {

namespace {

using detail::Node;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMat>;
using Map = Eigen::Map<RowMat>;

MapC view(const std::vector<double>& v, std::size_t r, std::size_t c) {
  return MapC(v.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

Map view(std::vector<double>& v, std::size_t r, std::size_t c) {
  return Map(v.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

Tensor make_result(const char* op, Shape shape, std::vector<double> value,
                   std::initializer_list<const Tensor*> inputs, std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->op = op;
  node->shape = std::move(shape);
  node->value = std::move(value);
  for (const Tensor* in : inputs) {
    if (in->node()->requires_grad) node->requires_grad = true;
  }
  if (node->requires_grad) {
    for (const Tensor* in : inputs) node->inputs.push_back(in->node());
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

// Grad buffer of input i, or nullptr when that input needs no gradient.
std::vector<double>* grad_of(Node& self, std::size_t i) {
  Node& in = *self.inputs[i];
  if (!in.requires_grad) return nullptr;
  in.ensure_grad();
  return &in.grad;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_to_string(a.shape()) + " vs " +
                         shape_to_string(b.shape()));
  }
}

void require_rank2(const Tensor& a, const char* op) {
  if (a.rank() != 2) throw DimensionError(std::string(op) + ": expected rank-2 tensor, got " + shape_to_string(a.shape()));
}

void require_finite(const std::vector<double>& v, const char* op) {
  for (double x : v) {
    if (!std::isfinite(x)) throw EvaluationError(std::string(op) + ": non-finite result");
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) {
    throw DimensionError("matmul: inner dimensions differ, " + shape_to_string(a.shape()) + " . " +
                         shape_to_string(b.shape()));
  }
  std::vector<double> out(m * n);
  view(out, m, n).noalias() = view(a.node()->value, m, k) * view(b.node()->value, k, n);
  return make_result("matmul", {m, n}, std::move(out), {&a, &b}, [m, k, n](Node& self) {
    const auto g = view(self.grad, m, n);
    if (auto* ga = grad_of(self, 0)) view(*ga, m, k).noalias() += g * view(self.inputs[1]->value, k, n).transpose();
    if (auto* gb = grad_of(self, 1)) view(*gb, k, n).noalias() += view(self.inputs[0]->value, m, k).transpose() * g;
  });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul_nt");
  require_rank2(b, "matmul_nt");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[0];
  if (b.shape()[1] != k) {
    throw DimensionError("matmul_nt: inner dimensions differ, " + shape_to_string(a.shape()) + " . " +
                         shape_to_string(b.shape()) + "^T");
  }
  std::vector<double> out(m * n);
  view(out, m, n).noalias() = view(a.node()->value, m, k) * view(b.node()->value, n, k).transpose();
  return make_result("matmul_nt", {m, n}, std::move(out), {&a, &b}, [m, k, n](Node& self) {
    const auto g = view(self.grad, m, n);
    if (auto* ga = grad_of(self, 0)) view(*ga, m, k).noalias() += g * view(self.inputs[1]->value, n, k);
    if (auto* gb = grad_of(self, 1)) view(*gb, n, k).noalias() += g.transpose() * view(self.inputs[0]->value, m, k);
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.values().begin(), a.values().end());
  const auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return make_result("add", a.shape(), std::move(out), {&a, &b}, [](Node& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (auto* g = grad_of(self, k)) {
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
      }
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.values().begin(), a.values().end());
  const auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return make_result("sub", a.shape(), std::move(out), {&a, &b}, [](Node& self) {
    if (auto* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    }
    if (auto* g = grad_of(self, 1)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= self.grad[i];
    }
  });
}

Tensor hadamard(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "hadamard");
  std::vector<double> out(a.values().begin(), a.values().end());
  const auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return make_result("hadamard", a.shape(), std::move(out), {&a, &b}, [](Node& self) {
    const auto& av = self.inputs[0]->value;
    const auto& bv = self.inputs[1]->value;
    if (auto* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * bv[i];
    }
    if (auto* g = grad_of(self, 1)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * av[i];
    }
  });
}

Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.values().begin(), a.values().end());
  for (double& x : out) x *= factor;
  return make_result("scale", a.shape(), std::move(out), {&a}, [factor](Node& self) {
    if (auto* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * factor;
    }
  });
}

Tensor mul_scalar(const Tensor& x, const Tensor& s) {
  if (s.numel() != 1) throw DimensionError("mul_scalar: expected scalar, got " + shape_to_string(s.shape()));
  const double sv = s.item();
  std::vector<double> out(x.values().begin(), x.values().end());
  for (double& v : out) v *= sv;
  return make_result("mul_scalar", x.shape(), std::move(out), {&x, &s}, [](Node& self) {
    const auto& xv = self.inputs[0]->value;
    const double sv = self.inputs[1]->value[0];
    if (auto* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * sv;
    }
    if (auto* g = grad_of(self, 1)) {
      double acc = 0.0;
      for (std::size_t i = 0; i < xv.size(); ++i) acc += self.grad[i] * xv[i];
      (*g)[0] += acc;
    }
  });
}

Tensor add_scalar(const Tensor& x, double value) {
  std::vector<double> out(x.values().begin(), x.values().end());
  for (double& v : out) v += value;
  return make_result("add_scalar", x.shape(), std::move(out), {&x}, [](Node& self) {
    if (auto* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    }
  });
}

Tensor add_rowwise(const Tensor& x, const Tensor& row) {
  const std::size_t r = x.rows(), c = x.cols();
  if (row.numel() != c || row.rows() != 1) {
    throw DimensionError("add_rowwise: row " + shape_to_string(row.shape()) + " does not fit " +
                         shape_to_string(x.shape()));
  }
  std::vector<double> out(x.values().begin(), x.values().end());
  const auto rv = row.values();
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] += rv[j];
  }
  return make_result("add_rowwise", x.shape(), std::move(out), {&x, &row}, [r, c](Node& self) {
    if (auto* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    }
    if (auto* g = grad_of(self, 1)) {
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) (*g)[j] += self.grad[i * c + j];
      }
    }
  });
}

Tensor transpose(const Tensor& a) {
  if (a.rank() > 2) throw DimensionError("transpose: expected rank <= 2, got " + shape_to_string(a.shape()));
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<double> out(r * c);
  view(out, c, r) = view(a.node()->value, r, c).transpose();
  return make_result("transpose", {c, r}, std::move(out), {&a}, [r, c](Node& self) {
    if (auto* g = grad_of(self, 0)) view(*g, r, c) += view(self.grad, c, r).transpose();
  });
}

Tensor reshape(const Tensor& a, const Shape& shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: " + shape_to_string(a.shape()) + " -> " + shape_to_string(shape));
  }
  std::vector<double> out(a.values().begin(), a.values().end());
  return make_result("reshape", shape, std::move(out), {&a}, [](Node& self) {
    if (auto* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    }
  });
}

Tensor concat(std::initializer_list<Tensor> parts, std::size_t axis) {
  std::vector<Tensor> v(parts);
  return concat(std::span<const Tensor>(v), axis);
}

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  if (axis > 1) throw DimensionError("concat: axis must be 0 or 1");
  std::vector<std::size_t> extent;  // rows (axis 0) or cols (axis 1) per part
  const std::size_t fixed = axis == 0 ? parts[0].cols() : parts[0].rows();
  std::size_t total = 0;
  for (const Tensor& p : parts) {
    const std::size_t other = axis == 0 ? p.cols() : p.rows();
    if (other != fixed) {
      throw DimensionError("concat: incompatible shapes " + shape_to_string(parts[0].shape()) + " and " +
                           shape_to_string(p.shape()));
    }
    extent.push_back(axis == 0 ? p.rows() : p.cols());
    total += extent.back();
  }
  std::vector<double> out;
  Shape shape;
  if (axis == 0) {
    out.reserve(total * fixed);
    for (const Tensor& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());
    shape = Shape{total, fixed};
  } else {
    out.resize(fixed * total);
    std::size_t offset = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
      const auto pv = parts[k].values();
      for (std::size_t i = 0; i < fixed; ++i) {
        std::copy_n(pv.begin() + static_cast<std::ptrdiff_t>(i * extent[k]), extent[k],
                    out.begin() + static_cast<std::ptrdiff_t>(i * total + offset));
      }
      offset += extent[k];
    }
    shape = parts[0].rank() == 1 ? Shape{total} : Shape{fixed, total};
  }
  auto node = std::make_shared<Node>();
  node->op = "concat";
  node->shape = std::move(shape);
  node->value = std::move(out);
  for (const Tensor& p : parts) node->requires_grad = node->requires_grad || p.requires_grad();
  if (node->requires_grad) {
    for (const Tensor& p : parts) node->inputs.push_back(p.node());
    node->backward = [axis, extent, fixed, total](Node& self) {
      std::size_t offset = 0;
      for (std::size_t k = 0; k < self.inputs.size(); ++k) {
        if (auto* g = grad_of(self, k)) {
          if (axis == 0) {
            for (std::size_t i = 0; i < extent[k] * fixed; ++i) (*g)[i] += self.grad[offset * fixed + i];
          } else {
            for (std::size_t i = 0; i < fixed; ++i) {
              for (std::size_t j = 0; j < extent[k]; ++j) (*g)[i * extent[k] + j] += self.grad[i * total + offset + j];
            }
          }
        }
        offset += extent[k];
      }
    };
  }
  return Tensor(std::move(node));
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end) {
  if (axis > 1) throw DimensionError("slice: axis must be 0 or 1");
  const std::size_t r = a.rows(), c = a.cols();
  const std::size_t limit = axis == 0 ? r : c;
  if (begin >= end || end > limit) {
    throw IndexError("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) + ") outside " +
                     shape_to_string(a.shape()));
  }
  const std::size_t len = end - begin;
  std::vector<double> out;
  Shape shape;
  const auto av = a.values();
  if (axis == 0) {
    out.assign(av.begin() + static_cast<std::ptrdiff_t>(begin * c), av.begin() + static_cast<std::ptrdiff_t>(end * c));
    shape = a.rank() >= 2 ? Shape{len, c} : Shape{len * c};
  } else {
    out.resize(r * len);
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < len; ++j) out[i * len + j] = av[i * c + begin + j];
    }
    shape = a.rank() == 1 ? Shape{len} : Shape{r, len};
  }
  return make_result("slice", std::move(shape), std::move(out), {&a}, [axis, begin, len, c, r](Node& self) {
    if (auto* g = grad_of(self, 0)) {
      if (axis == 0) {
        for (std::size_t i = 0; i < len * c; ++i) (*g)[begin * c + i] += self.grad[i];
      } else {
        for (std::size_t i = 0; i < r; ++i) {
          for (std::size_t j = 0; j < len; ++j) (*g)[i * c + begin + j] += self.grad[i * len + j];
        }
      }
    }
  });
}

Tensor gather_rows(const Tensor& a, std::span<const std::size_t> index) {
  const std::size_t r = a.rows(), c = a.cols();
  if (index.empty()) throw DimensionError("gather_rows: empty index");
  std::vector<double> out(index.size() * c);
  const auto av = a.values();
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= r) {
      throw IndexError("gather_rows: row " + std::to_string(index[i]) + " outside " + shape_to_string(a.shape()));
    }
    std::copy_n(av.begin() + static_cast<std::ptrdiff_t>(index[i] * c), c,
                out.begin() + static_cast<std::ptrdiff_t>(i * c));
  }
  std::vector<std::size_t> idx(index.begin(), index.end());
  return make_result("gather_rows", {index.size(), c}, std::move(out), {&a}, [idx = std::move(idx), c](Node& self) {
    if (auto* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < idx.size(); ++i) {
        double* dst = g->data() + idx[i] * c;
        const double* src = self.grad.data() + i * c;
        for (std::size_t j = 0; j < c; ++j) dst[j] += src[j];
      }
    }
  });
}

Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (double x : a.values()) acc += x;
  return make_result("sum", {1}, {acc}, {&a}, [](Node& self) {
    if (auto* g = grad_of(self, 0)) {
      for (double& x : *g) x += self.grad[0];
    }
  });
}

Tensor mean(const Tensor& a) {
  const double n = static_cast<double>(a.numel());
  double acc = 0.0;
  for (double x : a.values()) acc += x;
  return make_result("mean", {1}, {acc / n}, {&a}, [n](Node& self) {
    if (auto* g = grad_of(self, 0)) {
      for (double& x : *g) x += self.grad[0] / n;
    }
  });
}

Tensor sum_cols(const Tensor& a) {
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<double> out(r, 0.0);
  const auto av = a.values();
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) out[i] += av[i * c + j];
  }
  return make_result("sum_cols", {r}, std::move(out), {&a}, [r, c](Node& self) {
    if (auto* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) (*g)[i * c + j] += self.grad[i];
      }
    }
  });
}

Tensor log(const Tensor& a) {
  std::vector<double> out(a.values().begin(), a.values().end());
  for (double& x : out) {
    if (!(x > 0.0)) throw EvaluationError("log: non-positive argument");
    x = std::log(x);
  }
  return make_result("log", a.shape(), std::move(out), {&a}, [](Node& self) {
    const auto& av = self.inputs[0]->value;
    if (auto* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] / av[i];
    }
  });
}

Tensor exp(const Tensor& a) {
  std::vector<double> out(a.values().begin(), a.values().end());
  for (double& x : out) x = std::exp(x);
  require_finite(out, "exp");
  return make_result("exp", a.shape(), std::move(out), {&a}, [](Node& self) {
    if (auto* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * self.value[i];
    }
  });
}

Tensor gelu(const Tensor& a) {
  constexpr double kC = 0.044715;
  const double k = std::sqrt(2.0 / std::numbers::pi);
  std::vector<double> out(a.values().begin(), a.values().end());
  for (double& x : out) x = 0.5 * x * (1.0 + std::tanh(k * (x + kC * x * x * x)));
  return make_result("gelu", a.shape(), std::move(out), {&a}, [k](Node& self) {
    const auto& av = self.inputs[0]->value;
    if (auto* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) {
        const double x = av[i];
        const double t = std::tanh(k * (x + kC * x * x * x));
        const double d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * k * (1.0 + 3.0 * kC * x * x);
        (*g)[i] += self.grad[i] * d;
      }
    }
  });
}

namespace {

// Shared kernel of l2_normalize/normalize_rows: each of `r` rows of width `c`.
Tensor normalize_impl(const Tensor& a, std::size_t r, std::size_t c, const char* op) {
  std::vector<double> out(a.values().begin(), a.values().end());
  std::vector<double> norms(r);
  for (std::size_t i = 0; i < r; ++i) {
    double sq = 0.0;
    for (std::size_t j = 0; j < c; ++j) sq += out[i * c + j] * out[i * c + j];
    const double n = std::sqrt(sq);
    if (!std::isfinite(n)) throw EvaluationError(std::string(op) + ": non-finite input");
    if (n <= kNormEpsilon) throw DegenerateInputError(std::string(op) + ": norm below 1e-12");
    norms[i] = n;
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] /= n;
  }
  return make_result(op, a.shape(), std::move(out), {&a}, [r, c, norms = std::move(norms)](Node& self) {
    if (auto* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < r; ++i) {
        const double* y = self.value.data() + i * c;
        const double* gy = self.grad.data() + i * c;
        double dot = 0.0;
        for (std::size_t j = 0; j < c; ++j) dot += y[j] * gy[j];
        for (std::size_t j = 0; j < c; ++j) (*g)[i * c + j] += (gy[j] - y[j] * dot) / norms[i];
      }
    }
  });
}

}  // namespace

Tensor l2_normalize(const Tensor& v) { return normalize_impl(v, 1, v.numel(), "l2_normalize"); }

Tensor normalize_rows(const Tensor& a) { return normalize_impl(a, a.rows(), a.cols(), "normalize_rows"); }

Tensor softmax_rows(const Tensor& logits) {
  const std::size_t r = logits.rows(), c = logits.cols();
  std::vector<double> out(logits.values().begin(), logits.values().end());
  for (std::size_t i = 0; i < r; ++i) {
    double* row = out.data() + i * c;
    const double m = *std::max_element(row, row + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += (row[j] = std::exp(row[j] - m));
    for (std::size_t j = 0; j < c; ++j) row[j] /= z;
  }
  require_finite(out, "softmax_rows");
  return make_result("softmax_rows", logits.shape(), std::move(out), {&logits}, [r, c](Node& self) {
    if (auto* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < r; ++i) {
        const double* y = self.value.data() + i * c;
        const double* gy = self.grad.data() + i * c;
        double dot = 0.0;
        for (std::size_t j = 0; j < c; ++j) dot += y[j] * gy[j];
        for (std::size_t j = 0; j < c; ++j) (*g)[i * c + j] += y[j] * (gy[j] - dot);
      }
    }
  });
}

Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> targets) {
  const std::size_t r = logits.rows(), c = logits.cols();
  if (targets.size() != r) {
    throw DimensionError("softmax_cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(r) + " rows");
  }
  for (int t : targets) {
    if (t < 0 || static_cast<std::size_t>(t) >= c) {
      throw LabelError("softmax_cross_entropy: target " + std::to_string(t) + " outside [0, " + std::to_string(c) + ")");
    }
  }
  const auto lv = logits.values();
  std::vector<double> probs(r * c);
  double total = 0.0;
  for (std::size_t i = 0; i < r; ++i) {
    const double* row = lv.data() + i * c;
    const double m = *std::max_element(row, row + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += (probs[i * c + j] = std::exp(row[j] - m));
    for (std::size_t j = 0; j < c; ++j) probs[i * c + j] /= z;
    total += m + std::log(z) - row[targets[i]];
  }
  if (!std::isfinite(total)) throw EvaluationError("softmax_cross_entropy: non-finite loss");
  std::vector<int> tgt(targets.begin(), targets.end());
  return make_result("softmax_cross_entropy", {1}, {total / static_cast<double>(r)}, {&logits},
                     [r, c, probs = std::move(probs), tgt = std::move(tgt)](Node& self) {
                       if (auto* g = grad_of(self, 0)) {
                         const double s = self.grad[0] / static_cast<double>(r);
                         for (std::size_t i = 0; i < r; ++i) {
                           for (std::size_t j = 0; j < c; ++j) {
                             const double onehot = static_cast<std::size_t>(tgt[i]) == j ? 1.0 : 0.0;
                             (*g)[i * c + j] += s * (probs[i * c + j] - onehot);
                           }
                         }
                       }
                     });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const std::size_t r = x.rows(), c = x.cols();
  if (gain.numel() != c || bias.numel() != c) {
    throw DimensionError("layer_norm: gain/bias width does not match " + shape_to_string(x.shape()));
  }
  const auto xv = x.values();
  const auto gv = gain.values();
  const auto bv = bias.values();
  std::vector<double> xhat(r * c), inv_std(r), out(r * c);
  for (std::size_t i = 0; i < r; ++i) {
    const double* row = xv.data() + i * c;
    double mu = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += row[j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(c);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) {
      xhat[i * c + j] = (row[j] - mu) * inv_std[i];
      out[i * c + j] = xhat[i * c + j] * gv[j] + bv[j];
    }
  }
  return make_result("layer_norm", x.shape(), std::move(out), {&x, &gain, &bias},
                     [r, c, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
                       const auto& gv = self.inputs[1]->value;
                       auto* gx = grad_of(self, 0);
                       auto* gg = grad_of(self, 1);
                       auto* gb = grad_of(self, 2);
                       std::vector<double> dxhat(c);
                       for (std::size_t i = 0; i < r; ++i) {
                         const double* dy = self.grad.data() + i * c;
                         const double* xh = xhat.data() + i * c;
                         if (gg) for (std::size_t j = 0; j < c; ++j) (*gg)[j] += dy[j] * xh[j];
                         if (gb) for (std::size_t j = 0; j < c; ++j) (*gb)[j] += dy[j];
                         if (!gx) continue;
                         double m1 = 0.0, m2 = 0.0;
                         for (std::size_t j = 0; j < c; ++j) {
                           dxhat[j] = dy[j] * gv[j];
                           m1 += dxhat[j];
                           m2 += dxhat[j] * xh[j];
                         }
                         m1 /= static_cast<double>(c);
                         m2 /= static_cast<double>(c);
                         for (std::size_t j = 0; j < c; ++j) (*gx)[i * c + j] += inv_std[i] * (dxhat[j] - m1 - xh[j] * m2);
                       }
                     });
}

Tensor segment_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t segment_len, bool causal) {
  require_rank2(q, "segment_attention");
  require_same_shape(q, k, "segment_attention");
  require_same_shape(q, v, "segment_attention");
  const std::size_t total = q.rows(), d = q.cols(), t = segment_len;
  if (t == 0 || total % t != 0) {
    throw DimensionError("segment_attention: " + std::to_string(total) + " rows are not a multiple of segment length " +
                         std::to_string(t));
  }
  const std::size_t segments = total / t;
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  std::vector<double> probs(segments * t * t), out(total * d);
  for (std::size_t s = 0; s < segments; ++s) {
    const auto qs = view(q.node()->value, total, d).middleRows(static_cast<Eigen::Index>(s * t), static_cast<Eigen::Index>(t));
    const auto ks = view(k.node()->value, total, d).middleRows(static_cast<Eigen::Index>(s * t), static_cast<Eigen::Index>(t));
    const auto vs = view(v.node()->value, total, d).middleRows(static_cast<Eigen::Index>(s * t), static_cast<Eigen::Index>(t));
    auto p = Map(probs.data() + s * t * t, static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(t));
    p.noalias() = qs * ks.transpose();
    p *= inv_sqrt_d;
    for (std::size_t i = 0; i < t; ++i) {
      const std::size_t limit = causal ? i + 1 : t;
      double m = p(static_cast<Eigen::Index>(i), 0);
      for (std::size_t j = 1; j < limit; ++j) m = std::max(m, p(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)));
      double z = 0.0;
      for (std::size_t j = 0; j < t; ++j) {
        double& e = p(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
        e = j < limit ? std::exp(e - m) : 0.0;
        z += e;
      }
      p.row(static_cast<Eigen::Index>(i)) /= z;
    }
    view(out, total, d).middleRows(static_cast<Eigen::Index>(s * t), static_cast<Eigen::Index>(t)).noalias() = p * vs;
  }
  return make_result(
      "segment_attention", q.shape(), std::move(out), {&q, &k, &v},
      [segments, t, d, total, inv_sqrt_d, probs = std::move(probs)](Node& self) {
        auto* gq = grad_of(self, 0);
        auto* gk = grad_of(self, 1);
        auto* gv = grad_of(self, 2);
        RowMat dp(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(t));
        const auto rows = [&](const std::vector<double>& buf, std::size_t s) {
          return view(buf, total, d).middleRows(static_cast<Eigen::Index>(s * t), static_cast<Eigen::Index>(t));
        };
        for (std::size_t s = 0; s < segments; ++s) {
          const auto p = MapC(probs.data() + s * t * t, static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(t));
          const auto go = rows(self.grad, s);
          if (gv) view(*gv, total, d).middleRows(static_cast<Eigen::Index>(s * t), static_cast<Eigen::Index>(t)).noalias() += p.transpose() * go;
          if (!gq && !gk) continue;
          dp.noalias() = go * rows(self.inputs[2]->value, s).transpose();
          // dS = P o (dP - rowsum(dP o P))
          for (Eigen::Index i = 0; i < dp.rows(); ++i) {
            const double dot = dp.row(i).dot(p.row(i));
            dp.row(i) = (dp.row(i).array() - dot).matrix().cwiseProduct(p.row(i));
          }
          dp *= inv_sqrt_d;
          if (gq) view(*gq, total, d).middleRows(static_cast<Eigen::Index>(s * t), static_cast<Eigen::Index>(t)).noalias() += dp * rows(self.inputs[1]->value, s);
          if (gk) view(*gk, total, d).middleRows(static_cast<Eigen::Index>(s * t), static_cast<Eigen::Index>(t)).noalias() += dp.transpose() * rows(self.inputs[0]->value, s);
        }
      });
}

double gradient_check(const std::function<Tensor()>& loss, std::span<Tensor> params, double step) {
  if (!(step >= 1e-6 && step <= 1e-4)) throw ConfigError("gradient_check: step must lie in [1e-6, 1e-4]");
  for (Tensor& p : params) {
    if (p.has_grad()) p.zero_grad();
  }
  const Tensor value = loss();
  if (!std::isfinite(value.item())) throw EvaluationError("gradient_check: non-finite objective");
  backward(value);

  const auto evaluate = [&]() {
    const double f = loss().item();
    if (!std::isfinite(f)) throw EvaluationError("gradient_check: non-finite objective");
    return f;
  };
  double worst = 0.0;
  for (Tensor& p : params) {
    std::vector<double> analytic(p.numel(), 0.0);
    if (p.has_grad()) std::copy(p.grad().begin(), p.grad().end(), analytic.begin());
    auto values = p.mutable_values();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double original = values[i];
      values[i] = original + step;
      const double up = evaluate();
      values[i] = original - step;
      const double down = evaluate();
      values[i] = original;
      const double numeric = (up - down) / (2.0 * step);
      worst = std::max(worst, std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i])));
    }
  }
  return worst;
}

}  // namespace cilmp::ops
