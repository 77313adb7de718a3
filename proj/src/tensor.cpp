#include "sacnet/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>
#include <unordered_set>

#include "parallel.hpp"
#include "sacnet/errors.hpp"

namespace sacnet {

int64_t numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

Tensor::Tensor(Shape s, std::vector<double> d, bool rg)
    : shape(std::move(s)), data(std::move(d)), requires_grad(rg) {
  if (numel(shape) != static_cast<int64_t>(data.size()))
    throw ShapeMismatch("tensor: data length " + std::to_string(data.size()) +
                        " does not match shape " + shape_str(shape));
}

void Tensor::ensure_grad() {
  if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
}

void Tensor::zero_grad() {
  if (!grad.empty()) std::fill(grad.begin(), grad.end(), 0.0);
}

void Tensor::accum_grad(const double* g, int64_t n) {
  ensure_grad();
  for (int64_t i = 0; i < n; ++i) grad[i] += g[i];
}

double Tensor::value() const {
  if (size() != 1) throw NotScalar("value(): tensor has " + std::to_string(size()) + " elements");
  return data[0];
}

TensorPtr Tensor::create(Shape shape, std::vector<double> data, bool requires_grad) {
  return std::make_shared<Tensor>(std::move(shape), std::move(data), requires_grad);
}

TensorPtr Tensor::zeros(Shape shape, bool requires_grad) {
  int64_t n = numel(shape);
  return create(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

TensorPtr Tensor::full(Shape shape, double v, bool requires_grad) {
  int64_t n = numel(shape);
  return create(std::move(shape), std::vector<double>(n, v), requires_grad);
}

TensorPtr Tensor::scalar(double v, bool requires_grad) {
  return create({1}, {v}, requires_grad);
}

namespace {

thread_local bool g_grad_enabled = true;



Shape strides_of(const Shape& shape) {
  Shape st(shape.size(), 1);
  for (int64_t i = static_cast<int64_t>(shape.size()) - 2; i >= 0; --i)
    st[i] = st[i + 1] * shape[i + 1];
  return st;
}

void check_axis(const TensorPtr& a, int64_t axis, const char* op) {
  if (axis < 0 || axis >= static_cast<int64_t>(a->shape.size()))
    throw ShapeMismatch(std::string(op) + ": axis " + std::to_string(axis) +
                        " out of range for shape " + shape_str(a->shape));
}

// right operand must be a scalar or a trailing suffix of the left shape
void check_suffix(const TensorPtr& a, const TensorPtr& b, const char* op) {
  if (b->size() == 1) return;
  if (b->shape.size() > a->shape.size())
    throw ShapeMismatch(std::string(op) + ": cannot broadcast " + shape_str(b->shape) +
                        " against " + shape_str(a->shape));
  size_t off = a->shape.size() - b->shape.size();
  for (size_t i = 0; i < b->shape.size(); ++i)
    if (a->shape[off + i] != b->shape[i])
      throw ShapeMismatch(std::string(op) + ": shape " + shape_str(b->shape) +
                          " is not a trailing suffix of " + shape_str(a->shape));
}

TensorPtr binary_broadcast(const TensorPtr& a, const TensorPtr& b, const char* op,
                           double (*fwd)(double, double),
                           void (*bwd)(double g, double av, double bv, double& da, double& db)) {
  check_suffix(a, b, op);
  const int64_t n = a->size(), nb = b->size();
  std::vector<double> out(n);
  if (nb == n) {
    for (int64_t i = 0; i < n; ++i) out[i] = fwd(a->data[i], b->data[i]);
  } else {
    for (int64_t i = 0; i < n; ++i) out[i] = fwd(a->data[i], b->data[i % nb]);
  }
  auto r = Tensor::create(a->shape, std::move(out));
  attach_op(r, op, {a, b}, [self = r.get(), a, b, bwd]() {
    const int64_t n = a->size(), nb = b->size();
    const bool ga = a->requires_grad, gb = b->requires_grad;
    if (ga) a->ensure_grad();
    if (gb) b->ensure_grad();
    for (int64_t i = 0; i < n; ++i) {
      double da = 0.0, db = 0.0;
      bwd(self->grad[i], a->data[i], b->data[i % nb], da, db);
      if (ga) a->grad[i] += da;
      if (gb) b->grad[i % nb] += db;
    }
  });
  return r;
}

TensorPtr unary(const TensorPtr& a, const char* op, double (*fwd)(double),
                double (*dfdx)(double x, double y)) {
  const int64_t n = a->size();
  std::vector<double> out(n);
  for (int64_t i = 0; i < n; ++i) out[i] = fwd(a->data[i]);
  auto r = Tensor::create(a->shape, std::move(out));
  attach_op(r, op, {a}, [self = r.get(), a, dfdx]() {
    a->ensure_grad();
    const int64_t n = a->size();
    for (int64_t i = 0; i < n; ++i)
      a->grad[i] += self->grad[i] * dfdx(a->data[i], self->data[i]);
  });
  return r;
}

}  // namespace

void attach_op(const TensorPtr& r, const char* op, std::vector<TensorPtr> parents,
               std::function<void()> fn) {
  if (!g_grad_enabled) return;
  bool rg = false;
  for (const auto& p : parents)
    if (p->requires_grad) {
      rg = true;
      break;
    }
  if (!rg) return;
  r->requires_grad = true;
  r->op = op;
  r->parents = std::move(parents);
  r->backward_fn = std::move(fn);
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

std::vector<TensorPtr> Graph::collect(const TensorPtr& root) {
  std::vector<TensorPtr> order;
  std::unordered_set<const Tensor*> seen;
  // iterative postorder; second==true means children already expanded
  std::vector<std::pair<TensorPtr, bool>> stack;
  stack.emplace_back(root, false);
  while (!stack.empty()) {
    auto [node, expanded] = stack.back();
    stack.pop_back();
    if (expanded) {
      order.push_back(node);
      continue;
    }
    if (seen.count(node.get())) continue;
    seen.insert(node.get());
    stack.emplace_back(node, true);
    for (const auto& p : node->parents) stack.emplace_back(p, false);
  }
  return order;
}

void backward(const TensorPtr& loss) {
  if (loss->size() != 1)
    throw NotScalar("backward: loss has " + std::to_string(loss->size()) + " elements");
  auto order = Graph::collect(loss);
  // intermediate grads are scratch per call; leaves accumulate across calls
  for (auto& t : order) {
    if (!t->is_leaf() && t->requires_grad) {
      t->ensure_grad();
      t->zero_grad();
    }
  }
  loss->ensure_grad();
  loss->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward_fn) (*it)->backward_fn();
  }
}

TensorPtr add(const TensorPtr& a, const TensorPtr& b) {
  return binary_broadcast(
      a, b, "add", [](double x, double y) { return x + y; },
      [](double g, double, double, double& da, double& db) {
        da = g;
        db = g;
      });
}

TensorPtr sub(const TensorPtr& a, const TensorPtr& b) {
  return binary_broadcast(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](double g, double, double, double& da, double& db) {
        da = g;
        db = -g;
      });
}

TensorPtr mul(const TensorPtr& a, const TensorPtr& b) {
  return binary_broadcast(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](double g, double av, double bv, double& da, double& db) {
        da = g * bv;
        db = g * av;
      });
}

TensorPtr add(const TensorPtr& a, double b) {
  const int64_t n = a->size();
  std::vector<double> out(n);
  for (int64_t i = 0; i < n; ++i) out[i] = a->data[i] + b;
  auto r = Tensor::create(a->shape, std::move(out));
  attach_op(r, "add", {a}, [self = r.get(), a]() {
    a->accum_grad(self->grad.data(), a->size());
  });
  return r;
}

TensorPtr scale(const TensorPtr& a, double c) {
  const int64_t n = a->size();
  std::vector<double> out(n);
  for (int64_t i = 0; i < n; ++i) out[i] = a->data[i] * c;
  auto r = Tensor::create(a->shape, std::move(out));
  attach_op(r, "scale", {a}, [self = r.get(), a, c]() {
    a->ensure_grad();
    const int64_t n = a->size();
    for (int64_t i = 0; i < n; ++i) a->grad[i] += self->grad[i] * c;
  });
  return r;
}

TensorPtr neg(const TensorPtr& a) {
  return unary(a, "neg", [](double x) { return -x; },
               [](double, double) { return -1.0; });
}

TensorPtr exp(const TensorPtr& a) {
  return unary(a, "exp", [](double x) { return std::exp(x); },
               [](double, double y) { return y; });
}

TensorPtr log(const TensorPtr& a) {
  return unary(a, "log", [](double x) { return std::log(x); },
               [](double x, double) { return 1.0 / x; });
}

TensorPtr cos(const TensorPtr& a) {
  return unary(a, "cos", [](double x) { return std::cos(x); },
               [](double x, double) { return -std::sin(x); });
}

TensorPtr sqrt(const TensorPtr& a) {
  return unary(a, "sqrt", [](double x) { return std::sqrt(x); },
               [](double, double y) { return 0.5 / std::max(y, 1e-12); });
}

TensorPtr relu(const TensorPtr& a) {
  return unary(a, "relu", [](double x) { return x > 0.0 ? x : 0.0; },
               [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

TensorPtr softplus(const TensorPtr& a) {
  return unary(a, "softplus",
               [](double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::fabs(x))); },
               [](double x, double) { return 1.0 / (1.0 + std::exp(-x)); });
}

TensorPtr reshape(const TensorPtr& a, Shape shape) {
  if (numel(shape) != a->size())
    throw ShapeMismatch("reshape: " + shape_str(a->shape) + " to " + shape_str(shape) +
                        " changes element count");
  auto r = Tensor::create(std::move(shape), a->data);
  attach_op(r, "reshape", {a}, [self = r.get(), a]() {
    a->accum_grad(self->grad.data(), a->size());
  });
  return r;
}

TensorPtr permute(const TensorPtr& a, const std::vector<int64_t>& axes) {
  const size_t rank = a->shape.size();
  if (axes.size() != rank) throw ShapeMismatch("permute: axes length mismatch");
  std::vector<bool> used(rank, false);
  for (int64_t ax : axes) {
    if (ax < 0 || ax >= static_cast<int64_t>(rank) || used[ax])
      throw ShapeMismatch("permute: invalid axes");
    used[ax] = true;
  }
  Shape out_shape(rank);
  for (size_t i = 0; i < rank; ++i) out_shape[i] = a->shape[axes[i]];
  Shape in_strides = strides_of(a->shape);
  // source stride to advance when the i-th output coordinate increments
  Shape step(rank);
  for (size_t i = 0; i < rank; ++i) step[i] = in_strides[axes[i]];

  const int64_t n = a->size();
  std::vector<double> out(n);
  Shape coord(rank, 0);
  int64_t src = 0;
  for (int64_t i = 0; i < n; ++i) {
    out[i] = a->data[src];
    for (int64_t ax = static_cast<int64_t>(rank) - 1; ax >= 0; --ax) {
      coord[ax]++;
      src += step[ax];
      if (coord[ax] < out_shape[ax]) break;
      src -= step[ax] * out_shape[ax];
      coord[ax] = 0;
    }
  }
  auto r = Tensor::create(out_shape, std::move(out));
  attach_op(r, "permute", {a}, [self = r.get(), a, out_shape, step]() {
    a->ensure_grad();
    const size_t rank = out_shape.size();
    const int64_t n = a->size();
    Shape coord(rank, 0);
    int64_t src = 0;
    for (int64_t i = 0; i < n; ++i) {
      a->grad[src] += self->grad[i];
      for (int64_t ax = static_cast<int64_t>(rank) - 1; ax >= 0; --ax) {
        coord[ax]++;
        src += step[ax];
        if (coord[ax] < out_shape[ax]) break;
        src -= step[ax] * out_shape[ax];
        coord[ax] = 0;
      }
    }
  });
  return r;
}

TensorPtr concat(const std::vector<TensorPtr>& parts, int64_t axis) {
  if (parts.empty()) throw ShapeMismatch("concat: no inputs");
  const size_t rank = parts[0]->shape.size();
  check_axis(parts[0], axis, "concat");
  int64_t axis_total = 0;
  for (const auto& p : parts) {
    if (p->shape.size() != rank) throw ShapeMismatch("concat: rank mismatch");
    for (size_t i = 0; i < rank; ++i)
      if (static_cast<int64_t>(i) != axis && p->shape[i] != parts[0]->shape[i])
        throw ShapeMismatch("concat: shape " + shape_str(p->shape) + " incompatible with " +
                            shape_str(parts[0]->shape) + " along axis " + std::to_string(axis));
    axis_total += p->shape[axis];
  }
  Shape out_shape = parts[0]->shape;
  out_shape[axis] = axis_total;

  int64_t outer = 1, inner = 1;
  for (int64_t i = 0; i < axis; ++i) outer *= out_shape[i];
  for (size_t i = axis + 1; i < rank; ++i) inner *= out_shape[i];

  std::vector<double> out(numel(out_shape));
  int64_t out_row = axis_total * inner;
  int64_t offset = 0;
  for (const auto& p : parts) {
    int64_t block = p->shape[axis] * inner;
    for (int64_t o = 0; o < outer; ++o)
      std::memcpy(out.data() + o * out_row + offset, p->data.data() + o * block,
                  block * sizeof(double));
    offset += block;
  }
  auto r = Tensor::create(out_shape, std::move(out));
  attach_op(r, "concat", {parts.begin(), parts.end()},
         [self = r.get(), parts, outer, out_row]() {
           int64_t off = 0;
           for (const auto& p : parts) {
             const int64_t blk = p->size() / outer;
             if (p->requires_grad) {
               p->ensure_grad();
               for (int64_t o = 0; o < outer; ++o) {
                 const double* g = self->grad.data() + o * out_row + off;
                 double* dst = p->grad.data() + o * blk;
                 for (int64_t i = 0; i < blk; ++i) dst[i] += g[i];
               }
             }
             off += blk;
           }
         });
  return r;
}

TensorPtr slice(const TensorPtr& a, int64_t axis, int64_t start, int64_t len) {
  check_axis(a, axis, "slice");
  if (start < 0 || len < 1 || start + len > a->shape[axis])
    throw ShapeMismatch("slice: range [" + std::to_string(start) + "," +
                        std::to_string(start + len) + ") out of bounds for axis " +
                        std::to_string(axis) + " of " + shape_str(a->shape));
  const size_t rank = a->shape.size();
  int64_t outer = 1, inner = 1;
  for (int64_t i = 0; i < axis; ++i) outer *= a->shape[i];
  for (size_t i = axis + 1; i < rank; ++i) inner *= a->shape[i];
  Shape out_shape = a->shape;
  out_shape[axis] = len;

  const int64_t in_row = a->shape[axis] * inner;
  const int64_t out_row = len * inner;
  std::vector<double> out(outer * out_row);
  for (int64_t o = 0; o < outer; ++o)
    std::memcpy(out.data() + o * out_row, a->data.data() + o * in_row + start * inner,
                out_row * sizeof(double));
  auto r = Tensor::create(out_shape, std::move(out));
  attach_op(r, "slice", {a}, [self = r.get(), a, outer, inner, in_row, out_row, start]() {
    a->ensure_grad();
    for (int64_t o = 0; o < outer; ++o) {
      const double* g = self->grad.data() + o * out_row;
      double* dst = a->grad.data() + o * in_row + start * inner;
      for (int64_t i = 0; i < out_row; ++i) dst[i] += g[i];
    }
  });
  return r;
}

namespace {

struct AxisDims {
  int64_t outer, n, inner;
};

AxisDims axis_dims(const TensorPtr& a, int64_t axis) {
  AxisDims d{1, a->shape[axis], 1};
  for (int64_t i = 0; i < axis; ++i) d.outer *= a->shape[i];
  for (size_t i = axis + 1; i < a->shape.size(); ++i) d.inner *= a->shape[i];
  return d;
}

Shape reduced_shape(const TensorPtr& a, int64_t axis) {
  Shape s;
  for (size_t i = 0; i < a->shape.size(); ++i)
    if (static_cast<int64_t>(i) != axis) s.push_back(a->shape[i]);
  if (s.empty()) s.push_back(1);
  return s;
}

}  // namespace

TensorPtr reduce_sum(const TensorPtr& a, int64_t axis) {
  check_axis(a, axis, "reduce_sum");
  auto d = axis_dims(a, axis);
  std::vector<double> out(d.outer * d.inner, 0.0);
  for (int64_t o = 0; o < d.outer; ++o)
    for (int64_t i = 0; i < d.n; ++i) {
      const double* src = a->data.data() + (o * d.n + i) * d.inner;
      double* dst = out.data() + o * d.inner;
      for (int64_t j = 0; j < d.inner; ++j) dst[j] += src[j];
    }
  auto r = Tensor::create(reduced_shape(a, axis), std::move(out));
  attach_op(r, "reduce_sum", {a}, [self = r.get(), a, d]() {
    a->ensure_grad();
    for (int64_t o = 0; o < d.outer; ++o)
      for (int64_t i = 0; i < d.n; ++i) {
        double* dst = a->grad.data() + (o * d.n + i) * d.inner;
        const double* g = self->grad.data() + o * d.inner;
        for (int64_t j = 0; j < d.inner; ++j) dst[j] += g[j];
      }
  });
  return r;
}

TensorPtr reduce_mean(const TensorPtr& a, int64_t axis) {
  check_axis(a, axis, "reduce_mean");
  auto d = axis_dims(a, axis);
  const double inv = 1.0 / static_cast<double>(d.n);
  std::vector<double> out(d.outer * d.inner, 0.0);
  for (int64_t o = 0; o < d.outer; ++o) {
    for (int64_t i = 0; i < d.n; ++i) {
      const double* src = a->data.data() + (o * d.n + i) * d.inner;
      double* dst = out.data() + o * d.inner;
      for (int64_t j = 0; j < d.inner; ++j) dst[j] += src[j];
    }
    double* dst = out.data() + o * d.inner;
    for (int64_t j = 0; j < d.inner; ++j) dst[j] *= inv;
  }
  auto r = Tensor::create(reduced_shape(a, axis), std::move(out));
  attach_op(r, "reduce_mean", {a}, [self = r.get(), a, d, inv]() {
    a->ensure_grad();
    for (int64_t o = 0; o < d.outer; ++o)
      for (int64_t i = 0; i < d.n; ++i) {
        double* dst = a->grad.data() + (o * d.n + i) * d.inner;
        const double* g = self->grad.data() + o * d.inner;
        for (int64_t j = 0; j < d.inner; ++j) dst[j] += g[j] * inv;
      }
  });
  return r;
}

TensorPtr reduce_max(const TensorPtr& a, int64_t axis) {
  check_axis(a, axis, "reduce_max");
  auto d = axis_dims(a, axis);
  std::vector<double> out(d.outer * d.inner);
  // winner positions for the backward scatter; first max wins ties
  auto argmax = std::make_shared<std::vector<int64_t>>(d.outer * d.inner);
  for (int64_t o = 0; o < d.outer; ++o)
    for (int64_t j = 0; j < d.inner; ++j) {
      int64_t best = (o * d.n) * d.inner + j;
      double bv = a->data[best];
      for (int64_t i = 1; i < d.n; ++i) {
        int64_t idx = (o * d.n + i) * d.inner + j;
        if (a->data[idx] > bv) {
          bv = a->data[idx];
          best = idx;
        }
      }
      out[o * d.inner + j] = bv;
      (*argmax)[o * d.inner + j] = best;
    }
  auto r = Tensor::create(reduced_shape(a, axis), std::move(out));
  attach_op(r, "reduce_max", {a}, [self = r.get(), a, argmax]() {
    a->ensure_grad();
    for (size_t i = 0; i < argmax->size(); ++i) a->grad[(*argmax)[i]] += self->grad[i];
  });
  return r;
}

TensorPtr sum_all(const TensorPtr& a) {
  double acc = 0.0;
  for (double v : a->data) acc += v;
  auto r = Tensor::scalar(acc);
  attach_op(r, "sum_all", {a}, [self = r.get(), a]() {
    a->ensure_grad();
    const double g = self->grad[0];
    for (auto& gv : a->grad) gv += g;
  });
  return r;
}

namespace {

// C[m,n] += A[m,k] * B[k,n]; accumulation over k runs in increasing order
void mm_acc(double* C, int64_t ldc, const double* A, int64_t lda, const double* B, int64_t ldb,
            int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    double* crow = C + i * ldc;
    for (int64_t kk = 0; kk < k; ++kk) {
      const double a = A[i * lda + kk];
      const double* brow = B + kk * ldb;
      for (int64_t j = 0; j < n; ++j) crow[j] += a * brow[j];
    }
  }
}

// C[m,n] += A[m,k] * B[n,k]^T
void mm_abT(double* C, int64_t ldc, const double* A, int64_t lda, const double* B, int64_t ldb,
            int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const double* arow = A + i * lda;
    for (int64_t j = 0; j < n; ++j) {
      const double* brow = B + j * ldb;
      double acc = 0.0;
      for (int64_t kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
      C[i * ldc + j] += acc;
    }
  }
}

// C[k,n] += A[m,k]^T * B[m,n]
void mm_aTb(double* C, int64_t ldc, const double* A, int64_t lda, const double* B, int64_t ldb,
            int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const double* brow = B + i * ldb;
    for (int64_t kk = 0; kk < k; ++kk) {
      const double a = A[i * lda + kk];
      double* crow = C + kk * ldc;
      for (int64_t j = 0; j < n; ++j) crow[j] += a * brow[j];
    }
  }
}

}  // namespace

TensorPtr matmul(const TensorPtr& a, const TensorPtr& b) {
  const size_t ra = a->shape.size(), rb = b->shape.size();
  if (!((ra == 2 && rb == 2) || (ra == 3 && rb == 2) || (ra == 3 && rb == 3)))
    throw ShapeMismatch("matmul: unsupported ranks " + shape_str(a->shape) + " x " +
                        shape_str(b->shape));
  const int64_t batch = (ra == 3) ? a->shape[0] : 1;
  const int64_t m = a->shape[ra - 2], k = a->shape[ra - 1];
  const int64_t kb = b->shape[rb - 2], n = b->shape[rb - 1];
  if (k != kb || (rb == 3 && b->shape[0] != batch))
    throw ShapeMismatch("matmul: " + shape_str(a->shape) + " x " + shape_str(b->shape));

  Shape out_shape = (ra == 3) ? Shape{batch, m, n} : Shape{m, n};
  std::vector<double> out(numel(out_shape), 0.0);
  const bool b_batched = (rb == 3);
  const int64_t mm_work = batch * m * k * n;
  if (batch > 1) {
    detail::parallel_for(batch, mm_work, [&](int64_t lo, int64_t hi) {
      for (int64_t bi = lo; bi < hi; ++bi)
        mm_acc(out.data() + bi * m * n, n, a->data.data() + bi * m * k, k,
               b->data.data() + (b_batched ? bi * k * n : 0), n, m, k, n);
    });
  } else {
    detail::parallel_for(m, mm_work, [&](int64_t lo, int64_t hi) {
      mm_acc(out.data() + lo * n, n, a->data.data() + lo * k, k, b->data.data(), n, hi - lo, k,
             n);
    });
  }
  auto r = Tensor::create(out_shape, std::move(out));
  attach_op(r, "matmul", {a, b}, [self = r.get(), a, b, batch, m, k, n, b_batched]() {
    if (a->requires_grad) a->ensure_grad();
    if (b->requires_grad) b->ensure_grad();
    const int64_t mm_work = batch * m * k * n;
    if (a->requires_grad) {
      detail::parallel_for(batch, mm_work, [&](int64_t lo, int64_t hi) {
        for (int64_t bi = lo; bi < hi; ++bi)
          mm_abT(a->grad.data() + bi * m * k, k, self->grad.data() + bi * m * n, n,
                 b->data.data() + (b_batched ? bi * k * n : 0), n, m, n, k);
      });
    }
    if (b->requires_grad) {
      if (b_batched) {
        detail::parallel_for(batch, mm_work, [&](int64_t lo, int64_t hi) {
          for (int64_t bi = lo; bi < hi; ++bi)
            mm_aTb(b->grad.data() + bi * k * n, n, a->data.data() + bi * m * k, k,
                   self->grad.data() + bi * m * n, n, m, k, n);
        });
      } else {
        for (int64_t bi = 0; bi < batch; ++bi)
          mm_aTb(b->grad.data(), n, a->data.data() + bi * m * k, k,
                 self->grad.data() + bi * m * n, n, m, k, n);
      }
    }
  });
  return r;
}

TensorPtr softmax(const TensorPtr& a, int64_t axis) {
  check_axis(a, axis, "softmax");
  auto d = axis_dims(a, axis);
  std::vector<double> out(a->size());
  detail::parallel_for(d.outer, a->size() * 8, [&](int64_t lo, int64_t hi) {
    for (int64_t o = lo; o < hi; ++o)
      for (int64_t j = 0; j < d.inner; ++j) {
        const int64_t base = o * d.n * d.inner + j;
        double m = a->data[base];
        for (int64_t i = 1; i < d.n; ++i) m = std::max(m, a->data[base + i * d.inner]);
        double s = 0.0;
        for (int64_t i = 0; i < d.n; ++i) {
          double e = std::exp(a->data[base + i * d.inner] - m);
          out[base + i * d.inner] = e;
          s += e;
        }
        const double inv = 1.0 / s;
        for (int64_t i = 0; i < d.n; ++i) out[base + i * d.inner] *= inv;
      }
  });
  auto r = Tensor::create(a->shape, std::move(out));
  attach_op(r, "softmax", {a}, [self = r.get(), a, d]() {
    a->ensure_grad();
    detail::parallel_for(d.outer, static_cast<int64_t>(a->data.size()) * 8,
                         [&](int64_t lo, int64_t hi) {
      for (int64_t o = lo; o < hi; ++o)
        for (int64_t j = 0; j < d.inner; ++j) {
          const int64_t base = o * d.n * d.inner + j;
          double dot = 0.0;
          for (int64_t i = 0; i < d.n; ++i)
            dot += self->grad[base + i * d.inner] * self->data[base + i * d.inner];
          for (int64_t i = 0; i < d.n; ++i) {
            const int64_t idx = base + i * d.inner;
            a->grad[idx] += self->data[idx] * (self->grad[idx] - dot);
          }
        }
    });
  });
  return r;
}

TensorPtr log_softmax(const TensorPtr& a, int64_t axis) {
  check_axis(a, axis, "log_softmax");
  auto d = axis_dims(a, axis);
  std::vector<double> out(a->size());
  for (int64_t o = 0; o < d.outer; ++o)
    for (int64_t j = 0; j < d.inner; ++j) {
      const int64_t base = o * d.n * d.inner + j;
      double m = a->data[base];
      for (int64_t i = 1; i < d.n; ++i) m = std::max(m, a->data[base + i * d.inner]);
      double s = 0.0;
      for (int64_t i = 0; i < d.n; ++i) s += std::exp(a->data[base + i * d.inner] - m);
      const double lse = m + std::log(s);
      for (int64_t i = 0; i < d.n; ++i)
        out[base + i * d.inner] = a->data[base + i * d.inner] - lse;
    }
  auto r = Tensor::create(a->shape, std::move(out));
  attach_op(r, "log_softmax", {a}, [self = r.get(), a, d]() {
    a->ensure_grad();
    for (int64_t o = 0; o < d.outer; ++o)
      for (int64_t j = 0; j < d.inner; ++j) {
        const int64_t base = o * d.n * d.inner + j;
        double gsum = 0.0;
        for (int64_t i = 0; i < d.n; ++i) gsum += self->grad[base + i * d.inner];
        for (int64_t i = 0; i < d.n; ++i) {
          const int64_t idx = base + i * d.inner;
          a->grad[idx] += self->grad[idx] - std::exp(self->data[idx]) * gsum;
        }
      }
  });
  return r;
}

TensorPtr layer_normalize(const TensorPtr& a, int64_t axis) {
  check_axis(a, axis, "layer_normalize");
  constexpr double kEps = 1e-5;
  auto d = axis_dims(a, axis);
  std::vector<double> out(a->size());
  auto inv_std = std::make_shared<std::vector<double>>(d.outer * d.inner);
  for (int64_t o = 0; o < d.outer; ++o)
    for (int64_t j = 0; j < d.inner; ++j) {
      const int64_t base = o * d.n * d.inner + j;
      double mean = 0.0;
      for (int64_t i = 0; i < d.n; ++i) mean += a->data[base + i * d.inner];
      mean /= static_cast<double>(d.n);
      double var = 0.0;
      for (int64_t i = 0; i < d.n; ++i) {
        const double c = a->data[base + i * d.inner] - mean;
        var += c * c;
      }
      var /= static_cast<double>(d.n);
      const double inv = 1.0 / std::sqrt(var + kEps);
      (*inv_std)[o * d.inner + j] = inv;
      for (int64_t i = 0; i < d.n; ++i)
        out[base + i * d.inner] = (a->data[base + i * d.inner] - mean) * inv;
    }
  auto r = Tensor::create(a->shape, std::move(out));
  attach_op(r, "layer_normalize", {a}, [self = r.get(), a, d, inv_std]() {
    a->ensure_grad();
    const double invn = 1.0 / static_cast<double>(d.n);
    for (int64_t o = 0; o < d.outer; ++o)
      for (int64_t j = 0; j < d.inner; ++j) {
        const int64_t base = o * d.n * d.inner + j;
        const double inv = (*inv_std)[o * d.inner + j];
        double gsum = 0.0, gysum = 0.0;
        for (int64_t i = 0; i < d.n; ++i) {
          const int64_t idx = base + i * d.inner;
          gsum += self->grad[idx];
          gysum += self->grad[idx] * self->data[idx];
        }
        for (int64_t i = 0; i < d.n; ++i) {
          const int64_t idx = base + i * d.inner;
          a->grad[idx] +=
              inv * (self->grad[idx] - invn * gsum - self->data[idx] * invn * gysum);
        }
      }
  });
  return r;
}

TensorPtr select_index(const TensorPtr& a, const std::vector<int64_t>& index) {
  if (a->shape.size() != 2)
    throw ShapeMismatch("select_index: expected rank-2 input, got " + shape_str(a->shape));
  const int64_t b = a->shape[0], c = a->shape[1];
  if (static_cast<int64_t>(index.size()) != b)
    throw ShapeMismatch("select_index: index length " + std::to_string(index.size()) +
                        " does not match rows " + std::to_string(b));
  std::vector<double> out(b);
  for (int64_t i = 0; i < b; ++i) {
    if (index[i] < 0 || index[i] >= c)
      throw ShapeMismatch("select_index: index " + std::to_string(index[i]) + " out of range");
    out[i] = a->data[i * c + index[i]];
  }
  auto r = Tensor::create({b}, std::move(out));
  attach_op(r, "select_index", {a}, [self = r.get(), a, index, c]() {
    a->ensure_grad();
    for (size_t i = 0; i < index.size(); ++i)
      a->grad[static_cast<int64_t>(i) * c + index[i]] += self->grad[i];
  });
  return r;
}

TensorPtr l2_normalize_rows(const TensorPtr& a) {
  if (a->shape.size() != 2)
    throw ShapeMismatch("l2_normalize_rows: expected rank-2 input, got " + shape_str(a->shape));
  constexpr double kEps = 1e-12;
  const int64_t b = a->shape[0], dim = a->shape[1];
  std::vector<double> out(a->size());
  auto norms = std::make_shared<std::vector<double>>(b);
  for (int64_t i = 0; i < b; ++i) {
    double n2 = 0.0;
    for (int64_t j = 0; j < dim; ++j) n2 += a->data[i * dim + j] * a->data[i * dim + j];
    const double nrm = std::sqrt(n2);
    (*norms)[i] = nrm;
    const double inv = 1.0 / (nrm + kEps);
    for (int64_t j = 0; j < dim; ++j) out[i * dim + j] = a->data[i * dim + j] * inv;
  }
  auto r = Tensor::create(a->shape, std::move(out));
  attach_op(r, "l2_normalize_rows", {a}, [self = r.get(), a, norms, b, dim]() {
    a->ensure_grad();
    for (int64_t i = 0; i < b; ++i) {
      const double nrm = (*norms)[i];
      const double s = nrm + 1e-12;
      double dot = 0.0;
      for (int64_t j = 0; j < dim; ++j) dot += self->grad[i * dim + j] * a->data[i * dim + j];
      const double coef = dot / (s * s * std::max(nrm, 1e-12));
      for (int64_t j = 0; j < dim; ++j)
        a->grad[i * dim + j] += self->grad[i * dim + j] / s - a->data[i * dim + j] * coef;
    }
  });
  return r;
}

namespace {

struct ConvDims {
  int64_t b, inC, h, w, outC, k, stride, pad, outH, outW;
};

ConvDims conv_check(const TensorPtr& input, const TensorPtr& kernels, int64_t stride,
                    int64_t padding) {
  if (input->shape.size() != 4)
    throw ShapeMismatch("conv2d: input must be [b,c,h,w], got " + shape_str(input->shape));
  if (kernels->shape.size() != 4)
    throw ShapeMismatch("conv2d: kernels must be [outC,inC,k,k], got " +
                        shape_str(kernels->shape));
  if (kernels->shape[2] != kernels->shape[3])
    throw ShapeMismatch("conv2d: only square kernels supported, got " +
                        shape_str(kernels->shape));
  if (kernels->shape[1] != input->shape[1])
    throw ShapeMismatch("conv2d: kernel inC " + std::to_string(kernels->shape[1]) +
                        " does not match input channels " + std::to_string(input->shape[1]));
  if (stride < 1) throw ShapeMismatch("conv2d: stride must be >= 1");
  if (padding < 0) throw ShapeMismatch("conv2d: padding must be >= 0");
  ConvDims d;
  d.b = input->shape[0];
  d.inC = input->shape[1];
  d.h = input->shape[2];
  d.w = input->shape[3];
  d.outC = kernels->shape[0];
  d.k = kernels->shape[2];
  d.stride = stride;
  d.pad = padding;
  if (d.k > d.h + 2 * d.pad || d.k > d.w + 2 * d.pad)
    throw ShapeMismatch("conv2d: kernel size " + std::to_string(d.k) +
                        " exceeds padded input " + shape_str(input->shape));
  d.outH = (d.h + 2 * d.pad - d.k) / d.stride + 1;
  d.outW = (d.w + 2 * d.pad - d.k) / d.stride + 1;
  return d;
}

void conv_forward_direct(const double* in, const double* K, double* out, const ConvDims& d) {
  for (int64_t bi = 0; bi < d.b; ++bi)
    for (int64_t oc = 0; oc < d.outC; ++oc)
      for (int64_t oy = 0; oy < d.outH; ++oy)
        for (int64_t ox = 0; ox < d.outW; ++ox) {
          double acc = 0.0;
          for (int64_t ic = 0; ic < d.inC; ++ic)
            for (int64_t ky = 0; ky < d.k; ++ky) {
              const int64_t iy = oy * d.stride - d.pad + ky;
              if (iy < 0 || iy >= d.h) continue;
              for (int64_t kx = 0; kx < d.k; ++kx) {
                const int64_t ix = ox * d.stride - d.pad + kx;
                if (ix < 0 || ix >= d.w) continue;
                acc += in[((bi * d.inC + ic) * d.h + iy) * d.w + ix] *
                       K[((oc * d.inC + ic) * d.k + ky) * d.k + kx];
              }
            }
          out[((bi * d.outC + oc) * d.outH + oy) * d.outW + ox] = acc;
        }
}

void conv_backward_direct(const double* in, const double* K, const double* gout, double* gin,
                          double* gK, const ConvDims& d) {
  for (int64_t bi = 0; bi < d.b; ++bi)
    for (int64_t oc = 0; oc < d.outC; ++oc)
      for (int64_t oy = 0; oy < d.outH; ++oy)
        for (int64_t ox = 0; ox < d.outW; ++ox) {
          const double g = gout[((bi * d.outC + oc) * d.outH + oy) * d.outW + ox];
          if (g == 0.0) continue;
          for (int64_t ic = 0; ic < d.inC; ++ic)
            for (int64_t ky = 0; ky < d.k; ++ky) {
              const int64_t iy = oy * d.stride - d.pad + ky;
              if (iy < 0 || iy >= d.h) continue;
              for (int64_t kx = 0; kx < d.k; ++kx) {
                const int64_t ix = ox * d.stride - d.pad + kx;
                if (ix < 0 || ix >= d.w) continue;
                const int64_t in_idx = ((bi * d.inC + ic) * d.h + iy) * d.w + ix;
                const int64_t k_idx = ((oc * d.inC + ic) * d.k + ky) * d.k + kx;
                if (gin) gin[in_idx] += g * K[k_idx];
                if (gK) gK[k_idx] += g * in[in_idx];
              }
            }
        }
}

// column block for output rows [oy0, oy1): [inC*k*k, (oy1-oy0)*outW]
void build_col(const double* in_b, const ConvDims& d, int64_t oy0, int64_t oy1, double* col) {
  const int64_t ncol = (oy1 - oy0) * d.outW;
  int64_t row = 0;
  for (int64_t ic = 0; ic < d.inC; ++ic)
    for (int64_t ky = 0; ky < d.k; ++ky)
      for (int64_t kx = 0; kx < d.k; ++kx, ++row) {
        double* crow = col + row * ncol;
        int64_t ci = 0;
        for (int64_t oy = oy0; oy < oy1; ++oy) {
          const int64_t iy = oy * d.stride - d.pad + ky;
          if (iy < 0 || iy >= d.h) {
            for (int64_t ox = 0; ox < d.outW; ++ox) crow[ci++] = 0.0;
            continue;
          }
          const double* irow = in_b + (ic * d.h + iy) * d.w;
          for (int64_t ox = 0; ox < d.outW; ++ox) {
            const int64_t ix = ox * d.stride - d.pad + kx;
            crow[ci++] = (ix >= 0 && ix < d.w) ? irow[ix] : 0.0;
          }
        }
      }
}

void scatter_col(const double* col, const ConvDims& d, int64_t oy0, int64_t oy1, double* gin_b) {
  const int64_t ncol = (oy1 - oy0) * d.outW;
  int64_t row = 0;
  for (int64_t ic = 0; ic < d.inC; ++ic)
    for (int64_t ky = 0; ky < d.k; ++ky)
      for (int64_t kx = 0; kx < d.k; ++kx, ++row) {
        const double* crow = col + row * ncol;
        int64_t ci = 0;
        for (int64_t oy = oy0; oy < oy1; ++oy) {
          const int64_t iy = oy * d.stride - d.pad + ky;
          if (iy < 0 || iy >= d.h) {
            ci += d.outW;
            continue;
          }
          double* irow = gin_b + (ic * d.h + iy) * d.w;
          for (int64_t ox = 0; ox < d.outW; ++ox) {
            const int64_t ix = ox * d.stride - d.pad + kx;
            if (ix >= 0 && ix < d.w) irow[ix] += crow[ci];
            ++ci;
          }
        }
      }
}

int64_t col_block_rows(const ConvDims& d) {
  // keep the column buffer around 16 MB
  const int64_t budget = int64_t{1} << 21;
  const int64_t per_row = d.inC * d.k * d.k * d.outW;
  return std::max<int64_t>(1, std::min(d.outH, budget / std::max<int64_t>(per_row, 1)));
}

void conv_forward_im2col(const double* in, const double* K, double* out, const ConvDims& d) {
  const int64_t ickk = d.inC * d.k * d.k;
  const int64_t block = col_block_rows(d);
  const int64_t work = d.b * d.outC * d.outH * d.outW * ickk;
  detail::parallel_for(d.b, work, [&](int64_t lo, int64_t hi) {
    std::vector<double> col(ickk * block * d.outW);
    for (int64_t bi = lo; bi < hi; ++bi) {
      const double* in_b = in + bi * d.inC * d.h * d.w;
      for (int64_t oy0 = 0; oy0 < d.outH; oy0 += block) {
        const int64_t oy1 = std::min(d.outH, oy0 + block);
        const int64_t ncol = (oy1 - oy0) * d.outW;
        build_col(in_b, d, oy0, oy1, col.data());
        double* out_base = out + (bi * d.outC * d.outH + oy0) * d.outW;
        mm_acc(out_base, d.outH * d.outW, K, ickk, col.data(), ncol, d.outC, ickk, ncol);
      }
    }
  });
}

void conv_backward_im2col(const double* in, const double* K, const double* gout, double* gin,
                          double* gK, const ConvDims& d) {
  const int64_t ickk = d.inC * d.k * d.k;
  const int64_t block = col_block_rows(d);
  const int64_t work = d.b * d.outC * d.outH * d.outW * ickk * 2;
  std::vector<std::vector<double>> gK_partial(gK ? d.b : 0);
  detail::parallel_for(d.b, work, [&](int64_t lo, int64_t hi) {
    std::vector<double> col(ickk * block * d.outW);
    std::vector<double> dcol(gin ? col.size() : 0);
    for (int64_t bi = lo; bi < hi; ++bi) {
      double* gK_item = nullptr;
      if (gK) {
        gK_partial[bi].assign(d.outC * ickk, 0.0);
        gK_item = gK_partial[bi].data();
      }
      const double* in_b = in + bi * d.inC * d.h * d.w;
      for (int64_t oy0 = 0; oy0 < d.outH; oy0 += block) {
        const int64_t oy1 = std::min(d.outH, oy0 + block);
        const int64_t ncol = (oy1 - oy0) * d.outW;
        const double* g_base = gout + (bi * d.outC * d.outH + oy0) * d.outW;
        if (gK_item) {
          build_col(in_b, d, oy0, oy1, col.data());
          mm_abT(gK_item, ickk, g_base, d.outH * d.outW, col.data(), ncol, d.outC, ncol, ickk);
        }
        if (gin) {
          std::fill(dcol.begin(), dcol.begin() + ickk * ncol, 0.0);
          mm_aTb(dcol.data(), ncol, K, ickk, g_base, d.outH * d.outW, d.outC, ickk, ncol);
          scatter_col(dcol.data(), d, oy0, oy1, gin + bi * d.inC * d.h * d.w);
        }
      }
    }
  });
  if (gK) {
    for (int64_t bi = 0; bi < d.b; ++bi)
      for (int64_t i = 0; i < d.outC * ickk; ++i) gK[i] += gK_partial[bi][i];
  }
}

}  // namespace

TensorPtr conv2d(const TensorPtr& input, const TensorPtr& kernels, int64_t stride,
                 int64_t padding, ConvAlgo algo) {
  const ConvDims d = conv_check(input, kernels, stride, padding);
  std::vector<double> out(d.b * d.outC * d.outH * d.outW, 0.0);
  if (algo == ConvAlgo::Direct)
    conv_forward_direct(input->data.data(), kernels->data.data(), out.data(), d);
  else
    conv_forward_im2col(input->data.data(), kernels->data.data(), out.data(), d);
  auto r = Tensor::create({d.b, d.outC, d.outH, d.outW}, std::move(out));
  attach_op(r, "conv2d", {input, kernels}, [self = r.get(), input, kernels, d, algo]() {
    double* gin = nullptr;
    double* gK = nullptr;
    if (input->requires_grad) {
      input->ensure_grad();
      gin = input->grad.data();
    }
    if (kernels->requires_grad) {
      kernels->ensure_grad();
      gK = kernels->grad.data();
    }
    if (algo == ConvAlgo::Direct)
      conv_backward_direct(input->data.data(), kernels->data.data(), self->grad.data(), gin, gK,
                           d);
    else
      conv_backward_im2col(input->data.data(), kernels->data.data(), self->grad.data(), gin, gK,
                           d);
  });
  return r;
}

}  // namespace sacnet
