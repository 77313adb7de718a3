#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace sacnet {

struct Tensor;
using TensorPtr = std::shared_ptr<Tensor>;
using Shape = std::vector<int64_t>;

int64_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense row-major f64 tensor. Every op records its parents and a backward
// closure on the result node, so the nodes reachable from a loss form the
// dynamic graph for that pass. Graphs are confined to one thread; tensors
// with requires_grad=false are immutable after construction and shareable.
struct Tensor : std::enable_shared_from_this<Tensor> {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::vector<double> grad;  // lazily allocated, same length as data

  // graph record; empty for leaves
  std::string op;
  std::vector<TensorPtr> parents;
  std::function<void()> backward_fn;

  Tensor(Shape s, std::vector<double> d, bool rg);

  int64_t size() const { return static_cast<int64_t>(data.size()); }
  bool is_leaf() const { return parents.empty(); }

  void ensure_grad();
  void zero_grad();
  void accum_grad(const double* g, int64_t n);

  double value() const;  // scalar read; throws NotScalar otherwise

  static TensorPtr create(Shape shape, std::vector<double> data,
                          bool requires_grad = false);
  static TensorPtr zeros(Shape shape, bool requires_grad = false);
  static TensorPtr full(Shape shape, double v, bool requires_grad = false);
  static TensorPtr scalar(double v, bool requires_grad = false);
};

// Thread-local switch: ops executed while disabled record no graph and their
// results never require grad. Used for frozen-model evaluation.
bool grad_enabled();
struct NoGradGuard {
  NoGradGuard();
  ~NoGradGuard();

 private:
  bool prev_;
};

// Reverse-traversal record of the graph rooted at a node: topological order,
// every op's inputs precede it.
struct Graph {
  static std::vector<TensorPtr> collect(const TensorPtr& root);
};

// Populates dLoss/dLeaf on every requires_grad leaf reachable from loss.
// Intermediate grads are scratch; repeated calls accumulate on the leaves.
void backward(const TensorPtr& loss);

// Registers a custom op node: records op name, parents and the backward
// closure on `result`. No-op while grad is disabled or when no parent
// requires gradients. The closure must accumulate (+=) into parent grads.
void attach_op(const TensorPtr& result, const char* op, std::vector<TensorPtr> parents,
               std::function<void()> backward_fn);

// elementwise; the right operand must be a scalar or a trailing suffix of
// the left operand's shape
TensorPtr add(const TensorPtr& a, const TensorPtr& b);
TensorPtr add(const TensorPtr& a, double b);
TensorPtr sub(const TensorPtr& a, const TensorPtr& b);
TensorPtr mul(const TensorPtr& a, const TensorPtr& b);
TensorPtr scale(const TensorPtr& a, double c);
TensorPtr neg(const TensorPtr& a);
TensorPtr exp(const TensorPtr& a);
TensorPtr log(const TensorPtr& a);
TensorPtr cos(const TensorPtr& a);
TensorPtr sqrt(const TensorPtr& a);
TensorPtr relu(const TensorPtr& a);
TensorPtr softplus(const TensorPtr& a);

// shape
TensorPtr reshape(const TensorPtr& a, Shape shape);
TensorPtr permute(const TensorPtr& a, const std::vector<int64_t>& axes);
TensorPtr concat(const std::vector<TensorPtr>& parts, int64_t axis);
TensorPtr slice(const TensorPtr& a, int64_t axis, int64_t start, int64_t len);

// reductions; the reduced axis is removed (scalar results keep shape {1})
TensorPtr reduce_sum(const TensorPtr& a, int64_t axis);
TensorPtr reduce_mean(const TensorPtr& a, int64_t axis);
TensorPtr reduce_max(const TensorPtr& a, int64_t axis);
TensorPtr sum_all(const TensorPtr& a);

// [m,k]x[k,n], [B,m,k]x[k,n] (shared right operand), or [B,m,k]x[B,k,n]
TensorPtr matmul(const TensorPtr& a, const TensorPtr& b);

// fused ops with hand-derived backward rules
TensorPtr softmax(const TensorPtr& a, int64_t axis);      // max-subtracted
TensorPtr log_softmax(const TensorPtr& a, int64_t axis);  // max-subtracted
TensorPtr layer_normalize(const TensorPtr& a, int64_t axis);  // eps 1e-5
TensorPtr select_index(const TensorPtr& a, const std::vector<int64_t>& index);
TensorPtr l2_normalize_rows(const TensorPtr& a);

enum class ConvAlgo { Direct, Im2col };

// input [b,inC,h,w], kernels [outC,inC,k,k]; both paths produce identical
// values and gradients
TensorPtr conv2d(const TensorPtr& input, const TensorPtr& kernels,
                 int64_t stride, int64_t padding,
                 ConvAlgo algo = ConvAlgo::Im2col);

}  // namespace sacnet
