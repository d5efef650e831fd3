#pragma once

// Dense f64 tensors with tape-based reverse-mode differentiation.
//
// A Tensor is a shared handle: copies alias the same storage, which is how
// parameters are threaded through a forward pass and later read back with
// their gradients. Operations record onto the thread's active Tape only when
// at least one operand requires a gradient; with no active Tape (or under a
// NoGradGuard) they are plain value computations.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace olab {

using Shape = std::vector<std::size_t>;

std::size_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a gradient reaches this node
  bool requires_grad = false;
  std::int64_t node_id = -1;  // position on the recording tape, -1 for leaves
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor from(Shape shape, std::vector<double> data);
  static Tensor scalar(double value);
  /// Leaf tensor that accumulates a gradient.
  static Tensor parameter(Shape shape, std::vector<double> data);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const double> data() const { return impl_->data; }
  std::span<double> mutable_data() { return impl_->data; }
  double operator[](std::size_t i) const { return impl_->data[i]; }
  double item() const;

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool on) { impl_->requires_grad = on; }
  bool has_grad() const { return !impl_->grad.empty(); }
  /// Gradient buffer; zeros when nothing has flowed back yet.
  std::vector<double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad() { impl_->grad.clear(); }

  std::int64_t node_id() const { return impl_->node_id; }
  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

  /// Deep copy with no gradient history.
  Tensor detach() const;

 private:
  std::shared_ptr<TensorImpl> impl_;
};

// ---------------------------------------------------------------------------
// Tape

using BackwardFn = std::function<void(const TensorImpl& out)>;

/// Records differentiable operations in execution order. Constructing a Tape
/// makes it the active tape of the calling thread until it is destroyed.
class Tape {
 public:
  struct Entry {
    std::shared_ptr<TensorImpl> output;
    std::vector<std::shared_ptr<TensorImpl>> parents;
    std::vector<std::int64_t> parent_ids;  // -1 marks a leaf parent
    BackwardFn backward;
  };

  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* current();

  std::size_t size() const { return entries_.size(); }
  const Entry& entry(std::size_t i) const { return entries_.at(i); }

  std::int64_t record(std::shared_ptr<TensorImpl> out,
                      std::vector<std::shared_ptr<TensorImpl>> parents,
                      BackwardFn fn);

  /// Seeds d(loss)/d(loss) = 1 and replays the tape in reverse from the loss
  /// node. Returns the number of nodes whose backward ran.
  std::size_t backward(const Tensor& loss);

  void clear();

 private:
  std::vector<Entry> entries_;
  Tape* previous_ = nullptr;
};

/// Runs backward on the calling thread's active tape.
void backward(const Tensor& loss);

/// Disables recording for its lifetime (nests).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool recording_enabled();

// ---------------------------------------------------------------------------
// Operations. Every differentiable op records its backward when any input
// requires a gradient.

/// [..., m, k] x [..., k, n] -> [..., m, n]; batch extents broadcast
/// (right-aligned, equal or 1).
Tensor matmul(const Tensor& a, const Tensor& b);

/// `b` broadcasts to `a` (or `a` to `b`) with right-aligned extents that are
/// equal or 1.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double value);

Tensor sigmoid(const Tensor& x);
Tensor relu(const Tensor& x);
/// Exact (erf) GELU.
Tensor gelu(const Tensor& x);
/// Clamps to [lo, hi]. The gradient passes only where lo < x < hi strictly.
Tensor clip(const Tensor& x, double lo, double hi);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

/// Max-subtracted softmax. -inf entries (masks) are allowed; NaN, +inf, or an
/// all -inf slice raise NumericError.
Tensor softmax(const Tensor& x, std::ptrdiff_t axis = -1);

/// Normalizes over the last axis, then applies gamma * x_hat + beta.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-12);

/// Swaps the last two axes.
Tensor transpose(const Tensor& x);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes);
Tensor reshape(const Tensor& x, Shape shape);

/// Rows of `table` [vocab, d] selected by `ids` -> [ids.size(), d].
Tensor embedding_lookup(const Tensor& table, std::span<const std::int32_t> ids);

inline constexpr std::int32_t kIgnoreIndex = -100;

enum class Reduction { Mean, Sum };

/// Cross-entropy of logits [N, V] against class ids; positions holding
/// kIgnoreIndex are skipped. Throws ContractError when every position is
/// ignored.
Tensor cross_entropy(const Tensor& logits, std::span<const std::int32_t> targets,
                     Reduction reduction = Reduction::Mean);

}  // namespace olab
