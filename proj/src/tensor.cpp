#include "olab/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "olab/errors.hpp"

namespace olab {

namespace {

thread_local Tape* g_current_tape = nullptr;
thread_local bool g_grad_enabled = true;

using ImplPtr = std::shared_ptr<TensorImpl>;

ImplPtr new_impl(Shape shape, std::vector<double> data) {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  return impl;
}

std::span<double> grad_of(TensorImpl& t) {
  if (t.grad.empty()) t.grad.assign(t.data.size(), 0.0);
  return t.grad;
}

bool wants_grad(std::initializer_list<const Tensor*> inputs) {
  if (g_current_tape == nullptr || !g_grad_enabled) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor* t) { return t->requires_grad(); });
}

// Wraps a freshly computed result, recording it when any parent needs grad.
Tensor finish(Shape shape, std::vector<double> data,
              std::initializer_list<const Tensor*> inputs, BackwardFn fn) {
  auto out = new_impl(std::move(shape), std::move(data));
  if (wants_grad(inputs)) {
    std::vector<ImplPtr> parents;
    parents.reserve(inputs.size());
    for (const Tensor* t : inputs) parents.push_back(t->impl());
    out->requires_grad = true;
    g_current_tape->record(out, std::move(parents), std::move(fn));
  }
  return Tensor(out);
}

void require_defined(const Tensor& t, const char* op) {
  if (!t.defined()) throw ContractError(std::string(op) + ": undefined tensor");
}

// Right-aligned: every extent of `small` equals its partner in `big` or is 1.
bool broadcastable(const Shape& big, const Shape& small) {
  if (small.size() > big.size()) return false;
  const std::size_t off = big.size() - small.size();
  for (std::size_t i = 0; i < small.size(); ++i) {
    if (small[i] != big[off + i] && small[i] != 1) return false;
  }
  return true;
}

// For each flat index of `big`, the flat index into `small`.
std::vector<std::size_t> broadcast_map(const Shape& big, const Shape& small) {
  const std::size_t n = numel_of(big);
  std::vector<std::size_t> map(n);
  const std::size_t rank = big.size();
  const std::size_t off = rank - small.size();
  std::vector<std::size_t> stride(rank, 0);
  std::size_t s = 1;
  for (std::size_t i = small.size(); i-- > 0;) {
    stride[off + i] = small[i] == 1 ? 0 : s;
    s *= small[i];
  }
  std::vector<std::size_t> idx(rank, 0);
  std::size_t pos = 0;
  for (std::size_t flat = 0; flat < n; ++flat) {
    map[flat] = pos;
    for (std::size_t d = rank; d-- > 0;) {
      ++idx[d];
      pos += stride[d];
      if (idx[d] < big[d]) break;
      pos -= stride[d] * idx[d];
      idx[d] = 0;
    }
  }
  return map;
}

enum class Binary { Add, Sub, Mul };

Tensor binary_op(const Tensor& a_in, const Tensor& b_in, Binary kind,
                 const char* name) {
  require_defined(a_in, name);
  require_defined(b_in, name);
  const Tensor* a = &a_in;
  const Tensor* b = &b_in;
  if (a->shape() != b->shape() && !broadcastable(a->shape(), b->shape())) {
    if (kind != Binary::Sub && broadcastable(b->shape(), a->shape())) {
      std::swap(a, b);
    } else {
      throw DimensionError(std::string(name) + ": cannot broadcast " +
                           shape_str(a_in.shape()) + " with " +
                           shape_str(b_in.shape()));
    }
  }
  const auto& ad = a->impl()->data;
  const auto& bd = b->impl()->data;
  const std::size_t n = ad.size();
  std::vector<double> out(n);
  const bool same = a->shape() == b->shape();
  std::shared_ptr<std::vector<std::size_t>> map;
  if (!same) {
    map = std::make_shared<std::vector<std::size_t>>(
        broadcast_map(a->shape(), b->shape()));
  }
  auto bidx = [&](std::size_t i) { return same ? i : (*map)[i]; };
  switch (kind) {
    case Binary::Add:
      for (std::size_t i = 0; i < n; ++i) out[i] = ad[i] + bd[bidx(i)];
      break;
    case Binary::Sub:
      for (std::size_t i = 0; i < n; ++i) out[i] = ad[i] - bd[bidx(i)];
      break;
    case Binary::Mul:
      for (std::size_t i = 0; i < n; ++i) out[i] = ad[i] * bd[bidx(i)];
      break;
  }
  ImplPtr pa = a->impl();
  ImplPtr pb = b->impl();
  return finish(a->shape(), std::move(out), {a, b},
                [pa, pb, map, kind, same](const TensorImpl& o) {
                  const std::size_t n = o.grad.size();
                  auto bi = [&](std::size_t i) { return same ? i : (*map)[i]; };
                  if (pa->requires_grad) {
                    auto ga = grad_of(*pa);
                    if (kind == Binary::Mul) {
                      for (std::size_t i = 0; i < n; ++i)
                        ga[i] += o.grad[i] * pb->data[bi(i)];
                    } else {
                      for (std::size_t i = 0; i < n; ++i) ga[i] += o.grad[i];
                    }
                  }
                  if (pb->requires_grad) {
                    auto gb = grad_of(*pb);
                    switch (kind) {
                      case Binary::Add:
                        for (std::size_t i = 0; i < n; ++i) gb[bi(i)] += o.grad[i];
                        break;
                      case Binary::Sub:
                        for (std::size_t i = 0; i < n; ++i) gb[bi(i)] -= o.grad[i];
                        break;
                      case Binary::Mul:
                        for (std::size_t i = 0; i < n; ++i)
                          gb[bi(i)] += o.grad[i] * pa->data[i];
                        break;
                    }
                  }
                });
}

template <typename F, typename D>
Tensor unary_op(const Tensor& x, const char* name, F forward, D derivative) {
  require_defined(x, name);
  const auto& xd = x.impl()->data;
  std::vector<double> out(xd.size());
  for (std::size_t i = 0; i < xd.size(); ++i) out[i] = forward(xd[i]);
  ImplPtr px = x.impl();
  return finish(x.shape(), std::move(out), {&x},
                [px, derivative](const TensorImpl& o) {
                  auto g = grad_of(*px);
                  for (std::size_t i = 0; i < g.size(); ++i)
                    g[i] += o.grad[i] * derivative(px->data[i], o.data[i]);
                });
}

// The gemm kernels accumulate every output element over the reduction index
// in ascending order, whatever the tiling, so results do not depend on the
// matrix extents beyond the values themselves.

// 4x4 register tile: c[r][j] += sum_p a(r, p) * b(p, j) for p ascending.
// a(r, p) = a[r * a_row + p * a_col], b(p, j) = b[p * n + j].
inline void tile4x4(const double* a, std::size_t a_row, std::size_t a_col, const double* b,
                    double* c, std::size_t c_row, std::size_t depth, std::size_t n) {
  double acc[4][4];
  for (int r = 0; r < 4; ++r)
    for (int j = 0; j < 4; ++j) acc[r][j] = c[r * c_row + j];
  for (std::size_t p = 0; p < depth; ++p) {
    const double* brow = b + p * n;
    for (int r = 0; r < 4; ++r) {
      const double av = a[r * a_row + p * a_col];
      for (int j = 0; j < 4; ++j) acc[r][j] += av * brow[j];
    }
  }
  for (int r = 0; r < 4; ++r)
    for (int j = 0; j < 4; ++j) c[r * c_row + j] = acc[r][j];
}

// c[m,n] += a[m,k] * b[k,n]
void gemm_nn(const double* a, const double* b, double* c, std::size_t m,
             std::size_t k, std::size_t n) {
  const std::size_t m4 = m - m % 4;
  const std::size_t n4 = n - n % 4;
  for (std::size_t i = 0; i < m4; i += 4) {
    for (std::size_t j = 0; j < n4; j += 4) {
      tile4x4(a + i * k, k, 1, b + j, c + i * n + j, n, k, n);
    }
  }
  // Ragged edges: right columns of the tiled rows, then the leftover rows.
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t j0 = i < m4 ? n4 : 0;
    if (j0 == n) continue;
    double* crow = c + i * n;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = b + p * n;
      for (std::size_t j = j0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[m,k] += a[m,n] * b[k,n]^T
void gemm_nt(const double* a, const double* b, double* c, std::size_t m,
             std::size_t n, std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * n;
    double* crow = c + i * k;
    std::size_t p = 0;
    // Four independent dot products per pass; each keeps its own summation
    // order, so results match the plain loop bit for bit.
    for (; p + 4 <= k; p += 4) {
      const double* b0 = b + p * n;
      const double* b1 = b0 + n;
      const double* b2 = b1 + n;
      const double* b3 = b2 + n;
      double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        const double av = arow[j];
        s0 += av * b0[j];
        s1 += av * b1[j];
        s2 += av * b2[j];
        s3 += av * b3[j];
      }
      crow[p] += s0;
      crow[p + 1] += s1;
      crow[p + 2] += s2;
      crow[p + 3] += s3;
    }
    for (; p < k; ++p) {
      const double* brow = b + p * n;
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) acc += arow[j] * brow[j];
      crow[p] += acc;
    }
  }
}

// c[k,n] += a[m,k]^T * b[m,n]
void gemm_tn(const double* a, const double* b, double* c, std::size_t m,
             std::size_t k, std::size_t n) {
  const std::size_t k4 = k - k % 4;
  const std::size_t n4 = n - n % 4;
  for (std::size_t p = 0; p < k4; p += 4) {
    for (std::size_t j = 0; j < n4; j += 4) {
      tile4x4(a + p, 1, k, b + j, c + p * n + j, n, m, n);
    }
  }
  for (std::size_t p = 0; p < k; ++p) {
    const std::size_t j0 = p < k4 ? n4 : 0;
    if (j0 == n) continue;
    double* crow = c + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = a[i * k + p];
      const double* brow = b + i * n;
      for (std::size_t j = j0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace

std::size_t numel_of(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, double value) {
  const std::size_t n = numel_of(shape);
  return Tensor(new_impl(std::move(shape), std::vector<double>(n, value)));
}

Tensor Tensor::from(Shape shape, std::vector<double> data) {
  if (numel_of(shape) != data.size()) {
    throw DimensionError("Tensor::from: shape " + shape_str(shape) + " holds " +
                         std::to_string(numel_of(shape)) + " elements, got " +
                         std::to_string(data.size()));
  }
  return Tensor(new_impl(std::move(shape), std::move(data)));
}

Tensor Tensor::scalar(double value) { return from({}, {value}); }

Tensor Tensor::parameter(Shape shape, std::vector<double> data) {
  Tensor t = from(std::move(shape), std::move(data));
  t.set_requires_grad(true);
  return t;
}

double Tensor::item() const {
  if (numel() != 1) {
    throw ContractError("item() on tensor of shape " + shape_str(shape()));
  }
  return impl_->data[0];
}

std::vector<double> Tensor::grad() const {
  if (impl_->grad.empty()) return std::vector<double>(impl_->data.size(), 0.0);
  return impl_->grad;
}

std::span<double> Tensor::mutable_grad() { return grad_of(*impl_); }

Tensor Tensor::detach() const { return Tensor(new_impl(shape(), impl_->data)); }

// ---------------------------------------------------------------------------
// Tape

Tape::Tape() : previous_(g_current_tape) { g_current_tape = this; }

Tape::~Tape() { g_current_tape = previous_; }

Tape* Tape::current() { return g_current_tape; }

std::int64_t Tape::record(std::shared_ptr<TensorImpl> out,
                          std::vector<std::shared_ptr<TensorImpl>> parents,
                          BackwardFn fn) {
  const auto id = static_cast<std::int64_t>(entries_.size());
  out->node_id = id;
  Entry e;
  e.parent_ids.reserve(parents.size());
  for (const auto& p : parents) {
    e.parent_ids.push_back(p->requires_grad ? p->node_id : -1);
  }
  e.output = std::move(out);
  e.parents = std::move(parents);
  e.backward = std::move(fn);
  entries_.push_back(std::move(e));
  return id;
}

std::size_t Tape::backward(const Tensor& loss) {
  require_defined(loss, "backward");
  if (loss.numel() != 1) {
    throw ContractError("backward: loss must be scalar, got shape " +
                        shape_str(loss.shape()));
  }
  const std::int64_t id = loss.node_id();
  if (id < 0 || static_cast<std::size_t>(id) >= entries_.size() ||
      entries_[static_cast<std::size_t>(id)].output != loss.impl()) {
    throw ContractError("backward: loss is not recorded on this tape");
  }
  auto g = grad_of(*loss.impl());
  g[0] = 1.0;
  std::size_t visited = 0;
  for (std::size_t i = static_cast<std::size_t>(id) + 1; i-- > 0;) {
    Entry& e = entries_[i];
    if (e.output->grad.empty()) continue;
    e.backward(*e.output);
    ++visited;
  }
  return visited;
}

void Tape::clear() {
  for (auto& e : entries_) e.output->node_id = -1;
  entries_.clear();
}

void backward(const Tensor& loss) {
  if (g_current_tape == nullptr) {
    throw ContractError("backward: no active tape on this thread");
  }
  g_current_tape->backward(loss);
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool recording_enabled() { return g_current_tape != nullptr && g_grad_enabled; }

// ---------------------------------------------------------------------------
// Operations

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_defined(a, "matmul");
  require_defined(b, "matmul");
  if (a.rank() < 2 || b.rank() < 2 ||
      a.dim(a.rank() - 1) != b.dim(b.rank() - 2)) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(a.rank() - 2);
  const std::size_t k = a.dim(a.rank() - 1);
  const std::size_t n = b.dim(b.rank() - 1);
  Shape a_batch(a.shape().begin(), a.shape().end() - 2);
  Shape b_batch(b.shape().begin(), b.shape().end() - 2);
  Shape batch;
  {
    const std::size_t r = std::max(a_batch.size(), b_batch.size());
    batch.assign(r, 1);
    for (std::size_t i = 0; i < r; ++i) {
      const std::size_t ai =
          i + a_batch.size() >= r ? a_batch[i + a_batch.size() - r] : 1;
      const std::size_t bi =
          i + b_batch.size() >= r ? b_batch[i + b_batch.size() - r] : 1;
      if (ai != bi && ai != 1 && bi != 1) {
        throw DimensionError("matmul: batch extents of " + shape_str(a.shape()) +
                             " and " + shape_str(b.shape()) +
                             " do not broadcast");
      }
      batch[i] = std::max(ai, bi);
    }
  }
  const std::size_t nb = numel_of(batch);
  auto a_map = std::make_shared<std::vector<std::size_t>>(
      broadcast_map(batch, a_batch));
  auto b_map = std::make_shared<std::vector<std::size_t>>(
      broadcast_map(batch, b_batch));

  std::vector<double> out(nb * m * n, 0.0);
  const double* ad = a.impl()->data.data();
  const double* bd = b.impl()->data.data();
  for (std::size_t bi = 0; bi < nb; ++bi) {
    gemm_nn(ad + (*a_map)[bi] * m * k, bd + (*b_map)[bi] * k * n,
            out.data() + bi * m * n, m, k, n);
  }
  Shape out_shape = batch;
  out_shape.push_back(m);
  out_shape.push_back(n);
  ImplPtr pa = a.impl();
  ImplPtr pb = b.impl();
  return finish(std::move(out_shape), std::move(out), {&a, &b},
                [pa, pb, a_map, b_map, nb, m, k, n](const TensorImpl& o) {
                  const double* g = o.grad.data();
                  if (pa->requires_grad) {
                    double* ga = grad_of(*pa).data();
                    for (std::size_t bi = 0; bi < nb; ++bi) {
                      gemm_nt(g + bi * m * n, pb->data.data() + (*b_map)[bi] * k * n,
                              ga + (*a_map)[bi] * m * k, m, n, k);
                    }
                  }
                  if (pb->requires_grad) {
                    double* gb = grad_of(*pb).data();
                    for (std::size_t bi = 0; bi < nb; ++bi) {
                      gemm_tn(pa->data.data() + (*a_map)[bi] * m * k, g + bi * m * n,
                              gb + (*b_map)[bi] * k * n, m, k, n);
                    }
                  }
                });
}

Tensor add(const Tensor& a, const Tensor& b) { return binary_op(a, b, Binary::Add, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_op(a, b, Binary::Sub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_op(a, b, Binary::Mul, "mul"); }

Tensor scale(const Tensor& x, double factor) {
  return unary_op(
      x, "scale", [factor](double v) { return v * factor; },
      [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& x, double value) {
  return unary_op(
      x, "add_scalar", [value](double v) { return v + value; },
      [](double, double) { return 1.0; });
}

Tensor sigmoid(const Tensor& x) {
  return unary_op(
      x, "sigmoid",
      [](double v) {
        if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor relu(const Tensor& x) {
  return unary_op(
      x, "relu", [](double v) { return v > 0 ? v : 0.0; },
      [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& x) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  return unary_op(
      x, "gelu", [](double v) { return 0.5 * v * (1.0 + std::erf(v * kInvSqrt2)); },
      [](double v, double) {
        const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
        return cdf + v * kInvSqrt2Pi * std::exp(-0.5 * v * v);
      });
}

Tensor clip(const Tensor& x, double lo, double hi) {
  if (!(lo <= hi)) throw ConfigError("clip: lo must not exceed hi");
  return unary_op(
      x, "clip", [lo, hi](double v) { return std::clamp(v, lo, hi); },
      [lo, hi](double v, double) { return (v > lo && v < hi) ? 1.0 : 0.0; });
}

Tensor sum(const Tensor& x) {
  require_defined(x, "sum");
  double s = 0.0;
  for (double v : x.data()) s += v;
  ImplPtr px = x.impl();
  return finish({}, {s}, {&x}, [px](const TensorImpl& o) {
    auto g = grad_of(*px);
    for (double& gi : g) gi += o.grad[0];
  });
}

Tensor mean(const Tensor& x) {
  require_defined(x, "mean");
  if (x.numel() == 0) throw ContractError("mean: empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor softmax(const Tensor& x, std::ptrdiff_t axis) {
  require_defined(x, "softmax");
  const auto r = static_cast<std::ptrdiff_t>(x.rank());
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw DimensionError("softmax: axis out of range");
  const auto ax = static_cast<std::size_t>(axis);
  const std::size_t len = x.dim(ax);
  std::size_t inner = 1;
  for (std::size_t i = ax + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::size_t outer = x.numel() / (len * inner);
  const auto& xd = x.impl()->data;
  std::vector<double> out(xd.size());
  constexpr double kNegInf = -std::numeric_limits<double>::infinity();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      double mx = kNegInf;
      for (std::size_t j = 0; j < len; ++j) {
        const double v = xd[base + j * inner];
        if (std::isnan(v) || v == std::numeric_limits<double>::infinity()) {
          throw NumericError("softmax: non-finite input");
        }
        mx = std::max(mx, v);
      }
      if (mx == kNegInf) throw NumericError("softmax: slice is entirely masked");
      double s = 0.0;
      for (std::size_t j = 0; j < len; ++j) {
        const double e = std::exp(xd[base + j * inner] - mx);
        out[base + j * inner] = e;
        s += e;
      }
      const double inv = 1.0 / s;
      for (std::size_t j = 0; j < len; ++j) out[base + j * inner] *= inv;
    }
  }
  ImplPtr px = x.impl();
  return finish(x.shape(), std::move(out), {&x},
                [px, outer, inner, len](const TensorImpl& o) {
                  auto g = grad_of(*px);
                  for (std::size_t oo = 0; oo < outer; ++oo) {
                    for (std::size_t in = 0; in < inner; ++in) {
                      const std::size_t base = oo * len * inner + in;
                      double dot = 0.0;
                      for (std::size_t j = 0; j < len; ++j) {
                        const std::size_t i = base + j * inner;
                        dot += o.grad[i] * o.data[i];
                      }
                      for (std::size_t j = 0; j < len; ++j) {
                        const std::size_t i = base + j * inner;
                        g[i] += o.data[i] * (o.grad[i] - dot);
                      }
                    }
                  }
                });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps) {
  require_defined(x, "layer_norm");
  if (x.rank() == 0) throw DimensionError("layer_norm: scalar input");
  const std::size_t n = x.dim(x.rank() - 1);
  if (gamma.shape() != Shape{n} || beta.shape() != Shape{n}) {
    throw DimensionError("layer_norm: gamma/beta " + shape_str(gamma.shape()) +
                         "/" + shape_str(beta.shape()) + " vs input " +
                         shape_str(x.shape()));
  }
  const std::size_t rows = x.numel() / n;
  const auto& xd = x.impl()->data;
  const auto& gd = gamma.impl()->data;
  const auto& bd = beta.impl()->data;
  std::vector<double> out(xd.size());
  auto xhat = std::make_shared<std::vector<double>>(xd.size());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xd.data() + r * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += row[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t j = 0; j < n; ++j) {
      const double h = (row[j] - mu) * is;
      (*xhat)[r * n + j] = h;
      out[r * n + j] = gd[j] * h + bd[j];
    }
  }
  ImplPtr px = x.impl();
  ImplPtr pg = gamma.impl();
  ImplPtr pb = beta.impl();
  return finish(x.shape(), std::move(out), {&x, &gamma, &beta},
                [px, pg, pb, xhat, inv_std, rows, n](const TensorImpl& o) {
                  const auto& dy = o.grad;
                  if (pg->requires_grad) {
                    auto gg = grad_of(*pg);
                    for (std::size_t r = 0; r < rows; ++r)
                      for (std::size_t j = 0; j < n; ++j)
                        gg[j] += dy[r * n + j] * (*xhat)[r * n + j];
                  }
                  if (pb->requires_grad) {
                    auto gb = grad_of(*pb);
                    for (std::size_t r = 0; r < rows; ++r)
                      for (std::size_t j = 0; j < n; ++j) gb[j] += dy[r * n + j];
                  }
                  if (px->requires_grad) {
                    auto gx = grad_of(*px);
                    const double inv_n = 1.0 / static_cast<double>(n);
                    for (std::size_t r = 0; r < rows; ++r) {
                      double mean_d = 0.0;
                      double mean_dh = 0.0;
                      for (std::size_t j = 0; j < n; ++j) {
                        const double d = dy[r * n + j] * pg->data[j];
                        mean_d += d;
                        mean_dh += d * (*xhat)[r * n + j];
                      }
                      mean_d *= inv_n;
                      mean_dh *= inv_n;
                      for (std::size_t j = 0; j < n; ++j) {
                        const double d = dy[r * n + j] * pg->data[j];
                        gx[r * n + j] += (*inv_std)[r] *
                                         (d - mean_d - (*xhat)[r * n + j] * mean_dh);
                      }
                    }
                  }
                });
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes) {
  require_defined(x, "permute");
  const std::size_t r = x.rank();
  if (axes.size() != r) throw DimensionError("permute: axis count mismatch");
  std::vector<bool> seen(r, false);
  for (std::size_t a : axes) {
    if (a >= r || seen[a]) throw DimensionError("permute: invalid axis list");
    seen[a] = true;
  }
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = x.dim(axes[i]);
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t i = r; i-- > 1;) in_stride[i - 1] = in_stride[i] * x.dim(i);
  // src[flat_out] = flat index into x
  auto src = std::make_shared<std::vector<std::size_t>>(x.numel());
  {
    std::vector<std::size_t> idx(r, 0);
    std::size_t pos = 0;
    for (std::size_t flat = 0; flat < x.numel(); ++flat) {
      (*src)[flat] = pos;
      for (std::size_t d = r; d-- > 0;) {
        ++idx[d];
        pos += in_stride[axes[d]];
        if (idx[d] < out_shape[d]) break;
        pos -= in_stride[axes[d]] * idx[d];
        idx[d] = 0;
      }
    }
  }
  const auto& xd = x.impl()->data;
  std::vector<double> out(xd.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[(*src)[i]];
  ImplPtr px = x.impl();
  return finish(std::move(out_shape), std::move(out), {&x},
                [px, src](const TensorImpl& o) {
                  auto g = grad_of(*px);
                  for (std::size_t i = 0; i < o.grad.size(); ++i) g[(*src)[i]] += o.grad[i];
                });
}

Tensor transpose(const Tensor& x) {
  require_defined(x, "transpose");
  if (x.rank() < 2) throw DimensionError("transpose: rank < 2");
  std::vector<std::size_t> axes(x.rank());
  std::iota(axes.begin(), axes.end(), 0);
  std::swap(axes[x.rank() - 1], axes[x.rank() - 2]);
  return permute(x, axes);
}

Tensor reshape(const Tensor& x, Shape shape) {
  require_defined(x, "reshape");
  if (numel_of(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                         shape_str(shape));
  }
  ImplPtr px = x.impl();
  return finish(std::move(shape), x.impl()->data, {&x}, [px](const TensorImpl& o) {
    auto g = grad_of(*px);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
  });
}

Tensor embedding_lookup(const Tensor& table, std::span<const std::int32_t> ids) {
  require_defined(table, "embedding_lookup");
  if (table.rank() != 2) throw DimensionError("embedding_lookup: table must be 2-D");
  const std::size_t vocab = table.dim(0);
  const std::size_t d = table.dim(1);
  std::vector<double> out(ids.size() * d);
  const auto& td = table.impl()->data;
  for (std::size_t t = 0; t < ids.size(); ++t) {
    if (ids[t] < 0 || static_cast<std::size_t>(ids[t]) >= vocab) {
      throw ContractError("embedding_lookup: id " + std::to_string(ids[t]) +
                          " outside vocabulary of " + std::to_string(vocab));
    }
    std::copy_n(td.begin() + static_cast<std::ptrdiff_t>(ids[t] * d), d,
                out.begin() + static_cast<std::ptrdiff_t>(t * d));
  }
  auto id_copy = std::make_shared<std::vector<std::int32_t>>(ids.begin(), ids.end());
  ImplPtr pt = table.impl();
  return finish({ids.size(), d}, std::move(out), {&table},
                [pt, id_copy, d](const TensorImpl& o) {
                  auto g = grad_of(*pt);
                  for (std::size_t t = 0; t < id_copy->size(); ++t) {
                    const std::size_t row = static_cast<std::size_t>((*id_copy)[t]);
                    for (std::size_t j = 0; j < d; ++j) g[row * d + j] += o.grad[t * d + j];
                  }
                });
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::int32_t> targets,
                     Reduction reduction) {
  require_defined(logits, "cross_entropy");
  if (logits.rank() != 2 || logits.dim(0) != targets.size()) {
    throw DimensionError("cross_entropy: logits " + shape_str(logits.shape()) +
                         " vs " + std::to_string(targets.size()) + " targets");
  }
  const std::size_t rows = logits.dim(0);
  const std::size_t v = logits.dim(1);
  const auto& ld = logits.impl()->data;
  auto probs = std::make_shared<std::vector<double>>(ld.size(), 0.0);
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const std::int32_t tgt = targets[r];
    if (tgt == kIgnoreIndex) continue;
    if (tgt < 0 || static_cast<std::size_t>(tgt) >= v) {
      throw ContractError("cross_entropy: target " + std::to_string(tgt) +
                          " outside " + std::to_string(v) + " classes");
    }
    const double* row = ld.data() + r * v;
    double mx = *std::max_element(row, row + v);
    if (!std::isfinite(mx)) throw NumericError("cross_entropy: non-finite logits");
    double s = 0.0;
    for (std::size_t j = 0; j < v; ++j) s += std::exp(row[j] - mx);
    const double lse = mx + std::log(s);
    total += lse - row[tgt];
    for (std::size_t j = 0; j < v; ++j) (*probs)[r * v + j] = std::exp(row[j] - lse);
    (*probs)[r * v + static_cast<std::size_t>(tgt)] -= 1.0;
    ++count;
  }
  if (count == 0) throw ContractError("cross_entropy: every position is ignored");
  const double norm = reduction == Reduction::Mean ? 1.0 / static_cast<double>(count) : 1.0;
  ImplPtr pl = logits.impl();
  return finish({}, {total * norm}, {&logits}, [pl, probs, norm](const TensorImpl& o) {
    auto g = grad_of(*pl);
    const double s = o.grad[0] * norm;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * (*probs)[i];
  });
}

}  // namespace olab
