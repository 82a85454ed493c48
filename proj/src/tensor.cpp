#include "mamo/tensor.hpp"

#include <Eigen/Core>
#include <unsupported/Eigen/SpecialFunctions>

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>

namespace mamo {

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

template <typename T>
std::vector<T>& TensorNode<T>::parent_grad(std::size_t i) {
  auto& p = *parents[i];
  if (p.grad.empty()) p.grad.assign(p.values.size(), T(0));
  return p.grad;
}

namespace {

template <typename T>
thread_local Tape<T>* g_active_tape = nullptr;

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapC = Eigen::Map<const RowMat<T>>;
template <typename T>
using MapM = Eigen::Map<RowMat<T>>;

template <typename T>
using NodePtr = std::shared_ptr<TensorNode<T>>;

// Builds an op result; it is recorded only when a tape is active and some
// input takes part in differentiation.
template <typename T>
Tensor<T> make_op(const char* op, Shape shape, std::vector<T> values,
                  std::vector<NodePtr<T>> parents, std::function<void(TensorNode<T>&)> backward) {
  auto node = std::make_shared<TensorNode<T>>();
  node->shape = std::move(shape);
  node->values = std::move(values);
  node->op = op;
  Tape<T>* tape = Tape<T>::active();
  const bool tracked =
      tape && std::any_of(parents.begin(), parents.end(), [](const auto& p) { return p->requires_grad; });
  if (tracked) {
    node->requires_grad = true;
    node->parents = std::move(parents);
    node->backward = std::move(backward);
    tape->record(node);
  }
  return Tensor<T>(node);
}

[[noreturn]] void shape_fail(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

[[noreturn]] void shape_fail(const char* op, const std::string& what) {
  throw ShapeError(std::string(op) + ": " + what);
}

// Resolves the documented single-element broadcast.
template <typename T>
Shape binary_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() == b.shape()) return a.shape();
  if (b.size() == 1) return a.shape();
  if (a.size() == 1) return b.shape();
  shape_fail(op, a.shape(), b.shape());
}

template <typename T, typename Fwd, typename Da, typename Db>
Tensor<T> binary(const char* op, const Tensor<T>& a, const Tensor<T>& b, Fwd fwd, Da da, Db db) {
  Shape shape = binary_shape(op, a, b);
  const std::size_t n = numel(shape);
  const bool a_one = a.size() == 1 && n != 1;
  const bool b_one = b.size() == 1 && n != 1;
  auto av = a.values();
  auto bv = b.values();
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(av[a_one ? 0 : i], bv[b_one ? 0 : i]);
  return make_op<T>(op, std::move(shape), std::move(out), {a.node_ptr(), b.node_ptr()},
                    [a_one, b_one, da, db](TensorNode<T>& self) {
                      const auto& x = self.parents[0]->values;
                      const auto& y = self.parents[1]->values;
                      const std::size_t n = self.values.size();
                      if (self.parents[0]->requires_grad) {
                        auto& gx = self.parent_grad(0);
                        for (std::size_t i = 0; i < n; ++i) {
                          const T xa = x[a_one ? 0 : i];
                          const T yb = y[b_one ? 0 : i];
                          gx[a_one ? 0 : i] += da(self.grad[i], xa, yb);
                        }
                      }
                      if (self.parents[1]->requires_grad) {
                        auto& gy = self.parent_grad(1);
                        for (std::size_t i = 0; i < n; ++i) {
                          const T xa = x[a_one ? 0 : i];
                          const T yb = y[b_one ? 0 : i];
                          gy[b_one ? 0 : i] += db(self.grad[i], xa, yb);
                        }
                      }
                    });
}

template <typename T, typename Fwd, typename Deriv>
Tensor<T> unary(const char* op, const Tensor<T>& x, Fwd fwd, Deriv deriv) {
  auto xv = x.values();
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = fwd(xv[i]);
  return make_op<T>(op, x.shape(), std::move(out), {x.node_ptr()}, [deriv](TensorNode<T>& self) {
    auto& gx = self.parent_grad(0);
    const auto& xv = self.parents[0]->values;
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i] * deriv(xv[i], self.values[i]);
  });
}

// Exponent-field test; branch-free so the scan vectorises.
bool all_finite(const std::vector<float>& v) {
  std::uint32_t bad = 0;
  for (float x : v) bad |= static_cast<std::uint32_t>((std::bit_cast<std::uint32_t>(x) & 0x7f800000u) == 0x7f800000u);
  return bad == 0;
}

bool all_finite(const std::vector<double>& v) {
  std::uint64_t bad = 0;
  for (double x : v)
    bad |= static_cast<std::uint64_t>((std::bit_cast<std::uint64_t>(x) & 0x7ff0000000000000ull) ==
                                      0x7ff0000000000000ull);
  return bad == 0;
}

template <typename T>
using ArrayMap = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>;
template <typename T>
using ArrayMapC = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>;

// In-place exp over a contiguous run.
template <typename T>
void exp_inplace(T* p, std::size_t n) {
  ArrayMap<T> a(p, static_cast<Eigen::Index>(n));
  a = a.exp();
}

}  // namespace

const std::vector<std::string>& primitive_set() {
  static const std::vector<std::string> names{
      "add",        "sub",     "mul",    "div",          "scale",     "add_bias",    "exp",
      "gelu",       "matmul",  "softmax", "masked_softmax", "layer_norm", "l2_normalize", "embedding",
      "concat",     "gather_rows", "reshape", "permute", "sum",       "mean",        "mse",
      "l1",         "cross_entropy"};
  return names;
}

// ---- Tensor ----------------------------------------------------------------

template <typename T>
Tensor<T> Tensor<T>::constant(Shape shape, std::vector<T> values) {
  if (numel(shape) != values.size())
    throw ShapeError("constant: shape " + shape_str(shape) + " does not hold " +
                     std::to_string(values.size()) + " values");
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->values = std::move(values);
  return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape) {
  return full(std::move(shape), T(0));
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value) {
  const std::size_t n = numel(shape);
  return constant(std::move(shape), std::vector<T>(n, value));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value) {
  return constant({}, {value});
}

template <typename T>
Tensor<T> Tensor<T>::parameter(Shape shape, std::vector<T> values) {
  Tensor t = constant(std::move(shape), std::move(values));
  t.node_->requires_grad = true;
  return t;
}

template <typename T>
T Tensor<T>::item() const {
  if (size() != 1) throw ShapeError("item: tensor of shape " + shape_str(shape()) + " is not scalar");
  return node_->values[0];
}

template <typename T>
Tensor<T> Tensor<T>::detach_copy() const {
  return constant(shape(), node_->values);
}

// ---- Tape ------------------------------------------------------------------

template <typename T>
Tape<T>::Scope::Scope(Tape& tape) : previous_(g_active_tape<T>) {
  g_active_tape<T> = &tape;
}

template <typename T>
Tape<T>::Scope::~Scope() {
  g_active_tape<T> = previous_;
}

template <typename T>
Tape<T>::Pause::Pause() : previous_(g_active_tape<T>) {
  g_active_tape<T> = nullptr;
}

template <typename T>
Tape<T>::Pause::~Pause() {
  g_active_tape<T> = previous_;
}

template <typename T>
Tape<T>* Tape<T>::active() {
  return g_active_tape<T>;
}

template <typename T>
void Tape<T>::backward(const Tensor<T>& loss) {
  if (loss.size() != 1) throw ShapeError("backward: loss must be scalar, got " + shape_str(loss.shape()));
  if (!std::isfinite(loss.item())) throw NumericError("backward: loss is not finite");
  if (!loss.requires_grad()) return;
  loss.node()->grad.assign(1, T(1));
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    TensorNode<T>& node = **it;
    if (node.grad.empty() || !node.backward) continue;
    node.backward(node);
    for (const auto& p : node.parents) {
      if (p->requires_grad && !all_finite(p->grad))
        throw NumericError(std::string("backward: non-finite gradient produced by '") + node.op + "'");
    }
  }
}

// ---- elementwise -----------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary<T>(
      "add", a, b, [](T x, T y) { return x + y; }, [](T g, T, T) { return g; }, [](T g, T, T) { return g; });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary<T>(
      "sub", a, b, [](T x, T y) { return x - y; }, [](T g, T, T) { return g; }, [](T g, T, T) { return -g; });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary<T>(
      "mul", a, b, [](T x, T y) { return x * y; }, [](T g, T, T y) { return g * y; },
      [](T g, T x, T) { return g * x; });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return binary<T>(
      "div", a, b, [](T x, T y) { return x / y; }, [](T g, T, T y) { return g / y; },
      [](T g, T x, T y) { return -g * x / (y * y); });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  return unary<T>(
      "scale", a, [factor](T x) { return x * factor; }, [factor](T, T) { return factor; });
}

template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  if (x.rank() == 0 || bias.rank() != 1 || bias.dim(0) != x.shape().back())
    shape_fail("add_bias", x.shape(), bias.shape());
  const std::size_t cols = bias.dim(0);
  const std::size_t rows = x.size() / cols;
  std::vector<T> out(x.values().begin(), x.values().end());
  auto bv = bias.values();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] += bv[c];
  return make_op<T>("add_bias", x.shape(), std::move(out), {x.node_ptr(), bias.node_ptr()},
                    [rows, cols](TensorNode<T>& self) {
                      if (self.parents[0]->requires_grad) {
                        auto& px = *self.parents[0];
                        if (px.grad.empty()) px.grad = self.grad;
                        else
                          for (std::size_t i = 0; i < px.grad.size(); ++i) px.grad[i] += self.grad[i];
                      }
                      if (self.parents[1]->requires_grad) {
                        auto& gb = self.parent_grad(1);
                        for (std::size_t r = 0; r < rows; ++r)
                          for (std::size_t c = 0; c < cols; ++c) gb[c] += self.grad[r * cols + c];
                      }
                    });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& x) {
  return unary<T>(
      "exp", x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  constexpr T inv_sqrt2pi = std::numbers::inv_sqrtpi_v<T> * inv_sqrt2;
  const auto n = static_cast<Eigen::Index>(x.size());
  ArrayMapC<T> xv(x.values().data(), n);
  // Standard normal CDF, kept for backward.
  auto cdf = std::make_shared<std::vector<T>>(x.size());
  ArrayMap<T> phi(cdf->data(), n);
  phi = T(0.5) * (T(1) + (xv * inv_sqrt2).erf());
  std::vector<T> out(x.size());
  ArrayMap<T>(out.data(), n) = xv * phi;
  return make_op<T>("gelu", x.shape(), std::move(out), {x.node_ptr()}, [cdf, inv_sqrt2pi](TensorNode<T>& self) {
    auto& gx = self.parent_grad(0);
    const auto n = static_cast<Eigen::Index>(gx.size());
    ArrayMapC<T> xv(self.parents[0]->values.data(), n);
    ArrayMapC<T> phi(cdf->data(), n);
    ArrayMapC<T> g(self.grad.data(), n);
    ArrayMap<T>(gx.data(), n) += g * (phi + xv * inv_sqrt2pi * (T(-0.5) * xv * xv).exp());
  });
}

// ---- matmul ----------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b) {
  if (a.rank() < 2) shape_fail("matmul", a.shape(), b.shape());
  const std::size_t k = a.shape().back();
  std::size_t batch = 1;
  std::size_t m = 0;
  std::size_t n = 0;
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  if (b.rank() == 2) {
    // Shared weight: fold all leading axes of a into rows.
    m = a.size() / k;
    const std::size_t bk = transpose_b ? b.dim(1) : b.dim(0);
    n = transpose_b ? b.dim(0) : b.dim(1);
    if (bk != k) shape_fail("matmul", a.shape(), b.shape());
  } else if (b.rank() == 3 && a.rank() == 3) {
    batch = a.dim(0);
    m = a.dim(1);
    const std::size_t bk = transpose_b ? b.dim(2) : b.dim(1);
    n = transpose_b ? b.dim(1) : b.dim(2);
    if (b.dim(0) != batch || bk != k) shape_fail("matmul", a.shape(), b.shape());
  } else {
    shape_fail("matmul", a.shape(), b.shape());
  }
  out_shape.push_back(n);

  std::vector<T> out(batch * m * n);
  const std::size_t b_stride = b.rank() == 3 ? k * n : 0;
  for (std::size_t i = 0; i < batch; ++i) {
    MapC<T> A(a.values().data() + i * m * k, m, k);
    MapM<T> C(out.data() + i * m * n, m, n);
    if (transpose_b) {
      MapC<T> B(b.values().data() + i * b_stride, n, k);
      C.noalias() = A * B.transpose();
    } else {
      MapC<T> B(b.values().data() + i * b_stride, k, n);
      C.noalias() = A * B;
    }
  }
  return make_op<T>("matmul", std::move(out_shape), std::move(out), {a.node_ptr(), b.node_ptr()},
                    [batch, m, k, n, b_stride, transpose_b](TensorNode<T>& self) {
                      const auto& av = self.parents[0]->values;
                      const auto& bv = self.parents[1]->values;
                      const bool ga_on = self.parents[0]->requires_grad;
                      const bool gb_on = self.parents[1]->requires_grad;
                      T* ga = ga_on ? self.parent_grad(0).data() : nullptr;
                      T* gb = gb_on ? self.parent_grad(1).data() : nullptr;
                      for (std::size_t i = 0; i < batch; ++i) {
                        MapC<T> G(self.grad.data() + i * m * n, m, n);
                        MapC<T> A(av.data() + i * m * k, m, k);
                        if (transpose_b) {
                          MapC<T> B(bv.data() + i * b_stride, n, k);
                          if (ga_on) MapM<T>(ga + i * m * k, m, k).noalias() += G * B;
                          if (gb_on) MapM<T>(gb + i * b_stride, n, k).noalias() += G.transpose() * A;
                        } else {
                          MapC<T> B(bv.data() + i * b_stride, k, n);
                          if (ga_on) MapM<T>(ga + i * m * k, m, k).noalias() += G * B.transpose();
                          if (gb_on) MapM<T>(gb + i * b_stride, k, n).noalias() += A.transpose() * G;
                        }
                      }
                    });
}

// ---- softmax / normalisation ----------------------------------------------

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  if (axis >= x.rank()) shape_fail("softmax", "axis " + std::to_string(axis) + " out of range for " + shape_str(x.shape()));
  const auto& s = x.shape();
  const std::size_t len = s[axis];
  const std::size_t inner = numel(Shape(s.begin() + axis + 1, s.end()));
  const std::size_t outer = x.size() / (len * inner);
  auto xv = x.values();
  std::vector<T> out(x.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      T mx = xv[base];
      for (std::size_t j = 1; j < len; ++j) mx = std::max(mx, xv[base + j * inner]);
      T z = 0;
      for (std::size_t j = 0; j < len; ++j) z += out[base + j * inner] = std::exp(xv[base + j * inner] - mx);
      for (std::size_t j = 0; j < len; ++j) out[base + j * inner] /= z;
    }
  }
  return make_op<T>("softmax", s, std::move(out), {x.node_ptr()}, [outer, len, inner](TensorNode<T>& self) {
    auto& gx = self.parent_grad(0);
    const auto& y = self.values;
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * len * inner + in;
        T dot = 0;
        for (std::size_t j = 0; j < len; ++j) dot += self.grad[base + j * inner] * y[base + j * inner];
        for (std::size_t j = 0; j < len; ++j) {
          const std::size_t idx = base + j * inner;
          gx[idx] += y[idx] * (self.grad[idx] - dot);
        }
      }
    }
  });
}

template <typename T>
Tensor<T> masked_softmax(const Tensor<T>& scores, std::span<const std::uint8_t> key_valid) {
  if (scores.rank() != 4) shape_fail("masked_softmax", "expected [batch, heads, queries, keys], got " + shape_str(scores.shape()));
  const std::size_t batch = scores.dim(0);
  const std::size_t rows_per_batch = scores.dim(1) * scores.dim(2);
  const std::size_t keys = scores.dim(3);
  if (key_valid.size() != batch * keys)
    shape_fail("masked_softmax", "key mask holds " + std::to_string(key_valid.size()) + " entries for " +
                                     shape_str(scores.shape()));
  std::vector<std::uint8_t> valid(key_valid.begin(), key_valid.end());
  auto sv = scores.values();
  std::vector<T> out(scores.size(), T(0));
  for (std::size_t b = 0; b < batch; ++b) {
    const std::uint8_t* kv = valid.data() + b * keys;
    if (std::none_of(kv, kv + keys, [](std::uint8_t v) { return v != 0; }))
      shape_fail("masked_softmax", "every key is masked in batch entry " + std::to_string(b));
    for (std::size_t r = 0; r < rows_per_batch; ++r) {
      const std::size_t base = (b * rows_per_batch + r) * keys;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < keys; ++j)
        if (kv[j]) mx = std::max(mx, sv[base + j]);
      T* row = out.data() + base;
      for (std::size_t j = 0; j < keys; ++j) row[j] = kv[j] ? sv[base + j] - mx : T(-100);
      exp_inplace(row, keys);
      T z = 0;
      for (std::size_t j = 0; j < keys; ++j) z += row[j] = kv[j] ? row[j] : T(0);
      const T inv = T(1) / z;
      for (std::size_t j = 0; j < keys; ++j) row[j] *= inv;
    }
  }
  const std::size_t rows = batch * rows_per_batch;
  return make_op<T>("masked_softmax", scores.shape(), std::move(out), {scores.node_ptr()},
                    [rows, keys](TensorNode<T>& self) {
                      auto& gx = self.parent_grad(0);
                      const auto& y = self.values;
                      for (std::size_t r = 0; r < rows; ++r) {
                        const std::size_t base = r * keys;
                        T dot = 0;
                        for (std::size_t j = 0; j < keys; ++j) dot += self.grad[base + j] * y[base + j];
                        for (std::size_t j = 0; j < keys; ++j)
                          gx[base + j] += y[base + j] * (self.grad[base + j] - dot);
                      }
                    });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& shift, T eps) {
  if (x.rank() == 0 || gain.rank() != 1 || gain.shape() != shift.shape() || gain.dim(0) != x.shape().back())
    shape_fail("layer_norm", x.shape(), gain.shape());
  const std::size_t cols = gain.dim(0);
  const std::size_t rows = x.size() / cols;
  auto xv = x.values();
  auto gv = gain.values();
  auto bv = shift.values();
  std::vector<T> out(x.size());
  // Saved per-row normalised inputs and inverse std for backward.
  auto xhat = std::make_shared<std::vector<T>>(x.size());
  auto rstd = std::make_shared<std::vector<T>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xv.data() + r * cols;
    T mu = 0;
    for (std::size_t c = 0; c < cols; ++c) mu += row[c];
    mu /= T(cols);
    T var = 0;
    for (std::size_t c = 0; c < cols; ++c) var += (row[c] - mu) * (row[c] - mu);
    var /= T(cols);
    const T rs = T(1) / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t c = 0; c < cols; ++c) {
      const T h = (row[c] - mu) * rs;
      (*xhat)[r * cols + c] = h;
      out[r * cols + c] = h * gv[c] + bv[c];
    }
  }
  return make_op<T>(
      "layer_norm", x.shape(), std::move(out), {x.node_ptr(), gain.node_ptr(), shift.node_ptr()},
      [rows, cols, xhat, rstd](TensorNode<T>& self) {
        const auto& gv = self.parents[1]->values;
        if (self.parents[0]->requires_grad) {
          auto& gx = self.parent_grad(0);
          for (std::size_t r = 0; r < rows; ++r) {
            T m1 = 0, m2 = 0;
            for (std::size_t c = 0; c < cols; ++c) {
              const T gh = self.grad[r * cols + c] * gv[c];
              m1 += gh;
              m2 += gh * (*xhat)[r * cols + c];
            }
            m1 /= T(cols);
            m2 /= T(cols);
            for (std::size_t c = 0; c < cols; ++c) {
              const T gh = self.grad[r * cols + c] * gv[c];
              gx[r * cols + c] += (*rstd)[r] * (gh - m1 - (*xhat)[r * cols + c] * m2);
            }
          }
        }
        if (self.parents[1]->requires_grad) {
          auto& gg = self.parent_grad(1);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) gg[c] += self.grad[r * cols + c] * (*xhat)[r * cols + c];
        }
        if (self.parents[2]->requires_grad) {
          auto& gb = self.parent_grad(2);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) gb[c] += self.grad[r * cols + c];
        }
      });
}

template <typename T>
Tensor<T> l2_normalize(const Tensor<T>& x, T eps) {
  if (x.rank() == 0) shape_fail("l2_normalize", "scalar input");
  const std::size_t cols = x.shape().back();
  const std::size_t rows = x.size() / cols;
  auto xv = x.values();
  std::vector<T> out(x.size());
  auto norms = std::make_shared<std::vector<T>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    T s = 0;
    for (std::size_t c = 0; c < cols; ++c) s += xv[r * cols + c] * xv[r * cols + c];
    const T n = std::sqrt(s + eps);
    (*norms)[r] = n;
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = xv[r * cols + c] / n;
  }
  return make_op<T>("l2_normalize", x.shape(), std::move(out), {x.node_ptr()},
                    [rows, cols, norms](TensorNode<T>& self) {
                      auto& gx = self.parent_grad(0);
                      const auto& y = self.values;
                      for (std::size_t r = 0; r < rows; ++r) {
                        T dot = 0;
                        for (std::size_t c = 0; c < cols; ++c) dot += self.grad[r * cols + c] * y[r * cols + c];
                        for (std::size_t c = 0; c < cols; ++c)
                          gx[r * cols + c] += (self.grad[r * cols + c] - y[r * cols + c] * dot) / (*norms)[r];
                      }
                    });
}

// ---- indexing / layout -----------------------------------------------------

template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const std::int32_t> ids) {
  if (table.rank() != 2) shape_fail("embedding", "table must be rank 2, got " + shape_str(table.shape()));
  const std::size_t vocab = table.dim(0);
  const std::size_t d = table.dim(1);
  std::vector<std::size_t> rows(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab)
      shape_fail("embedding", "id " + std::to_string(ids[i]) + " outside vocabulary of " + std::to_string(vocab));
    rows[i] = static_cast<std::size_t>(ids[i]);
  }
  std::vector<T> out(ids.size() * d);
  auto tv = table.values();
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy_n(tv.data() + rows[i] * d, d, out.data() + i * d);
  return make_op<T>("embedding", {ids.size(), d}, std::move(out), {table.node_ptr()},
                    [rows = std::move(rows), d](TensorNode<T>& self) {
                      auto& gt = self.parent_grad(0);
                      for (std::size_t i = 0; i < rows.size(); ++i)
                        for (std::size_t c = 0; c < d; ++c) gt[rows[i] * d + c] += self.grad[i * d + c];
                    });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) shape_fail("concat", "no inputs");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) shape_fail("concat", "axis out of range for " + shape_str(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    if (p.rank() != first.size()) shape_fail("concat", first, p.shape());
    for (std::size_t i = 0; i < first.size(); ++i)
      if (i != axis && p.dim(i) != first[i]) shape_fail("concat", first, p.shape());
    out_shape[axis] += p.dim(axis);
  }
  const std::size_t outer = numel(Shape(first.begin(), first.begin() + axis));
  const std::size_t inner = numel(Shape(first.begin() + axis + 1, first.end()));
  std::vector<std::size_t> widths;
  std::vector<NodePtr<T>> nodes;
  for (const auto& p : parts) {
    widths.push_back(p.dim(axis) * inner);
    nodes.push_back(p.node_ptr());
  }
  const std::size_t total = out_shape[axis] * inner;
  std::vector<T> out(numel(out_shape));
  for (std::size_t o = 0; o < outer; ++o) {
    std::size_t off = 0;
    for (std::size_t pi = 0; pi < parts.size(); ++pi) {
      std::copy_n(parts[pi].values().data() + o * widths[pi], widths[pi], out.data() + o * total + off);
      off += widths[pi];
    }
  }
  return make_op<T>("concat", std::move(out_shape), std::move(out), std::move(nodes),
                    [outer, total, widths = std::move(widths)](TensorNode<T>& self) {
                      std::size_t off = 0;
                      for (std::size_t pi = 0; pi < widths.size(); ++pi) {
                        if (self.parents[pi]->requires_grad) {
                          auto& g = self.parent_grad(pi);
                          for (std::size_t o = 0; o < outer; ++o)
                            for (std::size_t i = 0; i < widths[pi]; ++i)
                              g[o * widths[pi] + i] += self.grad[o * total + off + i];
                        }
                        off += widths[pi];
                      }
                    });
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::size_t> rows) {
  if (x.rank() == 0) shape_fail("gather_rows", "scalar input");
  const std::size_t cols = x.shape().back();
  const std::size_t nrows = x.size() / cols;
  for (std::size_t r : rows)
    if (r >= nrows)
      shape_fail("gather_rows", "row " + std::to_string(r) + " out of range for " + shape_str(x.shape()));
  std::vector<T> out(rows.size() * cols);
  auto xv = x.values();
  for (std::size_t i = 0; i < rows.size(); ++i) std::copy_n(xv.data() + rows[i] * cols, cols, out.data() + i * cols);
  return make_op<T>("gather_rows", {rows.size(), cols}, std::move(out), {x.node_ptr()},
                    [idx = std::vector<std::size_t>(rows.begin(), rows.end()), cols](TensorNode<T>& self) {
                      auto& gx = self.parent_grad(0);
                      for (std::size_t i = 0; i < idx.size(); ++i)
                        for (std::size_t c = 0; c < cols; ++c) gx[idx[i] * cols + c] += self.grad[i * cols + c];
                    });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.size()) shape_fail("reshape", x.shape(), shape);
  std::vector<T> out(x.values().begin(), x.values().end());
  return make_op<T>("reshape", std::move(shape), std::move(out), {x.node_ptr()}, [](TensorNode<T>& self) {
    auto& p = *self.parents[0];
    if (p.grad.empty()) {
      p.grad = self.grad;
      return;
    }
    for (std::size_t i = 0; i < p.grad.size(); ++i) p.grad[i] += self.grad[i];
  });
}

namespace {

// Visits (destination, source) offsets of a permutation as contiguous runs:
// run(dst, src, src_step, length) covers the innermost output axis.
template <typename Run>
void for_each_permuted_run(const Shape& out_shape, const std::vector<std::size_t>& src_stride, Run run) {
  const std::size_t r = out_shape.size();
  if (r == 0) {
    run(0, 0, 1, 1);
    return;
  }
  const std::size_t len = out_shape[r - 1];
  const std::size_t step = src_stride[r - 1];
  const std::size_t total = numel(out_shape);
  if (total == 0) return;
  std::vector<std::size_t> idx(r - 1, 0);
  std::size_t src = 0;
  for (std::size_t dst = 0; dst < total; dst += len) {
    run(dst, src, step, len);
    for (std::size_t i = r - 1; i-- > 0;) {
      src += src_stride[i];
      if (++idx[i] < out_shape[i]) break;
      src -= src_stride[i] * out_shape[i];
      idx[i] = 0;
    }
  }
}

}  // namespace

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& perm) {
  const std::size_t r = x.rank();
  if (perm.size() != r) shape_fail("permute", "permutation rank mismatch for " + shape_str(x.shape()));
  std::vector<bool> seen(r, false);
  for (std::size_t p : perm) {
    if (p >= r || seen[p]) shape_fail("permute", "invalid permutation for " + shape_str(x.shape()));
    seen[p] = true;
  }
  const Shape& in = x.shape();
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = in[perm[i]];
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t i = r; i-- > 1;) in_stride[i - 1] = in_stride[i] * in[i];
  // Source stride of each output axis.
  std::vector<std::size_t> src_stride(r);
  for (std::size_t i = 0; i < r; ++i) src_stride[i] = in_stride[perm[i]];
  const T* xv = x.values().data();
  std::vector<T> out(x.size());
  for_each_permuted_run(out_shape, src_stride, [&](std::size_t dst, std::size_t src, std::size_t step, std::size_t len) {
    for (std::size_t j = 0; j < len; ++j) out[dst + j] = xv[src + j * step];
  });
  return make_op<T>("permute", out_shape, std::move(out), {x.node_ptr()},
                    [out_shape, src_stride](TensorNode<T>& self) {
                      auto& gx = self.parent_grad(0);
                      const T* g = self.grad.data();
                      for_each_permuted_run(out_shape, src_stride,
                                            [&](std::size_t dst, std::size_t src, std::size_t step, std::size_t len) {
                                              for (std::size_t j = 0; j < len; ++j) gx[src + j * step] += g[dst + j];
                                            });
                    });
}

// ---- reductions / losses ---------------------------------------------------

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  auto xv = x.values();
  T s = std::accumulate(xv.begin(), xv.end(), T(0));
  return make_op<T>("sum", {}, {s}, {x.node_ptr()}, [](TensorNode<T>& self) {
    auto& gx = self.parent_grad(0);
    for (auto& g : gx) g += self.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  if (x.size() == 0) shape_fail("mean", "empty input");
  auto xv = x.values();
  const T n = T(x.size());
  T s = std::accumulate(xv.begin(), xv.end(), T(0));
  return make_op<T>("mean", {}, {s / n}, {x.node_ptr()}, [n](TensorNode<T>& self) {
    auto& gx = self.parent_grad(0);
    for (auto& g : gx) g += self.grad[0] / n;
  });
}

template <typename T>
Tensor<T> mse(const Tensor<T>& pred, const Tensor<T>& target) {
  if (pred.shape() != target.shape()) shape_fail("mse", pred.shape(), target.shape());
  if (pred.size() == 0) shape_fail("mse", "empty input");
  auto pv = pred.values();
  auto tv = target.values();
  T s = 0;
  for (std::size_t i = 0; i < pv.size(); ++i) s += (pv[i] - tv[i]) * (pv[i] - tv[i]);
  const T n = T(pv.size());
  return make_op<T>("mse", {}, {s / n}, {pred.node_ptr(), target.node_ptr()}, [n](TensorNode<T>& self) {
    const auto& pv = self.parents[0]->values;
    const auto& tv = self.parents[1]->values;
    const T k = T(2) * self.grad[0] / n;
    if (self.parents[0]->requires_grad) {
      auto& g = self.parent_grad(0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += k * (pv[i] - tv[i]);
    }
    if (self.parents[1]->requires_grad) {
      auto& g = self.parent_grad(1);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= k * (pv[i] - tv[i]);
    }
  });
}

template <typename T>
Tensor<T> l1(const Tensor<T>& pred, const Tensor<T>& target) {
  if (pred.shape() != target.shape()) shape_fail("l1", pred.shape(), target.shape());
  if (pred.size() == 0) shape_fail("l1", "empty input");
  auto pv = pred.values();
  auto tv = target.values();
  T s = 0;
  for (std::size_t i = 0; i < pv.size(); ++i) s += std::abs(pv[i] - tv[i]);
  const T n = T(pv.size());
  return make_op<T>("l1", {}, {s / n}, {pred.node_ptr(), target.node_ptr()}, [n](TensorNode<T>& self) {
    const auto& pv = self.parents[0]->values;
    const auto& tv = self.parents[1]->values;
    const T k = self.grad[0] / n;
    auto sign = [](T v) { return T((v > 0) - (v < 0)); };
    if (self.parents[0]->requires_grad) {
      auto& g = self.parent_grad(0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += k * sign(pv[i] - tv[i]);
    }
    if (self.parents[1]->requires_grad) {
      auto& g = self.parent_grad(1);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= k * sign(pv[i] - tv[i]);
    }
  });
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> targets) {
  if (logits.rank() != 2 || logits.dim(0) != targets.size())
    shape_fail("cross_entropy", "logits " + shape_str(logits.shape()) + " vs " + std::to_string(targets.size()) +
                                    " targets");
  const std::size_t rows = logits.dim(0);
  const std::size_t classes = logits.dim(1);
  if (rows == 0) shape_fail("cross_entropy", "empty batch");
  auto lv = logits.values();
  auto probs = std::make_shared<std::vector<T>>(logits.size());
  std::vector<std::int32_t> tgt(targets.begin(), targets.end());
  T total = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (tgt[r] < 0 || static_cast<std::size_t>(tgt[r]) >= classes)
      shape_fail("cross_entropy", "target " + std::to_string(tgt[r]) + " outside " + std::to_string(classes) + " classes");
    const T* row = lv.data() + r * classes;
    const T mx = *std::max_element(row, row + classes);
    T z = 0;
    for (std::size_t c = 0; c < classes; ++c) z += (*probs)[r * classes + c] = std::exp(row[c] - mx);
    for (std::size_t c = 0; c < classes; ++c) (*probs)[r * classes + c] /= z;
    total += std::log(z) + mx - row[tgt[r]];
  }
  return make_op<T>("cross_entropy", {}, {total / T(rows)}, {logits.node_ptr()},
                    [rows, classes, probs, tgt = std::move(tgt)](TensorNode<T>& self) {
                      auto& g = self.parent_grad(0);
                      const T k = self.grad[0] / T(rows);
                      for (std::size_t r = 0; r < rows; ++r) {
                        for (std::size_t c = 0; c < classes; ++c) g[r * classes + c] += k * (*probs)[r * classes + c];
                        g[r * classes + static_cast<std::size_t>(tgt[r])] -= k;
                      }
                    });
}

// ---- explicit instantiation -----------------------------------------------

#define MAMO_INSTANTIATE(T)                                                                         \
  template struct TensorNode<T>;                                                                   \
  template class Tensor<T>;                                                                        \
  template class Tape<T>;                                                                          \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> div(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> scale(const Tensor<T>&, T);                                                   \
  template Tensor<T> add_bias(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> exp(const Tensor<T>&);                                                        \
  template Tensor<T> gelu(const Tensor<T>&);                                                       \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&, bool);                             \
  template Tensor<T> softmax(const Tensor<T>&, std::size_t);                                       \
  template Tensor<T> masked_softmax(const Tensor<T>&, std::span<const std::uint8_t>);              \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);          \
  template Tensor<T> l2_normalize(const Tensor<T>&, T);                                            \
  template Tensor<T> embedding(const Tensor<T>&, std::span<const std::int32_t>);                   \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, std::size_t);                           \
  template Tensor<T> gather_rows(const Tensor<T>&, std::span<const std::size_t>);                  \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                             \
  template Tensor<T> permute(const Tensor<T>&, const std::vector<std::size_t>&);                   \
  template Tensor<T> sum(const Tensor<T>&);                                                        \
  template Tensor<T> mean(const Tensor<T>&);                                                       \
  template Tensor<T> mse(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> l1(const Tensor<T>&, const Tensor<T>&);                                       \
  template Tensor<T> cross_entropy(const Tensor<T>&, std::span<const std::int32_t>);

MAMO_INSTANTIATE(float)
MAMO_INSTANTIATE(double)

}  // namespace mamo
