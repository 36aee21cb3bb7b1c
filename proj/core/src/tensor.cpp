#include "cgfuse/tensor.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "cgfuse/errors.hpp"

namespace cgfuse::tensor {

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;
using Strided = Eigen::OuterStride<>;
using MapBlock = Eigen::Map<RowMat, 0, Strided>;
using CMapBlock = Eigen::Map<const RowMat, 0, Strided>;
using ImplPtr = std::shared_ptr<detail::Impl>;

thread_local Tape* g_active = nullptr;

[[noreturn]] void shape_error(const std::string& op, const Shape& a, const Shape& b) {
  throw ShapeMismatch(op + ": incompatible shapes " + shape_string(a) + " and " + shape_string(b));
}

void require_rank2(const std::string& op, const Tensor& t) {
  if (t.rank() != 2) throw ShapeMismatch(op + ": expected a matrix, got " + shape_string(t.shape()));
}

bool recording(std::initializer_list<const Tensor*> inputs) {
  if (!g_active) return false;
  for (auto* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

void check_finite([[maybe_unused]] const std::string& op, [[maybe_unused]] const Tensor& t) {
#ifndef NDEBUG
  for (float x : t.data())
    if (!std::isfinite(x)) throw InvariantViolation(op + ": non-finite value in output");
#endif
}

MapMat mat(std::vector<float>& v, std::size_t r, std::size_t c) {
  return MapMat(v.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}
CMapMat cmat(const std::vector<float>& v, std::size_t r, std::size_t c) {
  return CMapMat(v.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

// Registers `fn` on the active tape; fn runs only if `out` received a gradient.
template <typename Fn>
void on_backward(const Tensor& out, Fn fn) {
  ImplPtr o = out.impl();
  g_active->record([o, fn = std::move(fn)]() {
    if (o->grad.empty()) return;
    fn(o->grad);
  });
}

Tensor result(Shape shape, std::vector<float> values, bool grad) {
  Tensor t = make_tensor(std::move(shape), std::move(values));
  if (grad) t.set_requires_grad(true);
  return t;
}

bool is_row_vector_for(const Tensor& b, std::size_t cols) {
  if (b.rank() == 1) return b.shape()[0] == cols;
  return b.rank() == 2 && b.shape()[0] == 1 && b.shape()[1] == cols;
}

constexpr std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace

// ---- Impl / Tensor -------------------------------------------------------

void detail::Impl::accumulate(std::span<const float> g) {
  auto& buf = grad_buffer();
  for (std::size_t i = 0; i < g.size(); ++i) buf[i] += g[i];
}

std::vector<float>& detail::Impl::grad_buffer() {
  if (grad.empty()) grad.assign(data.size(), 0.0f);
  return grad;
}

std::string shape_string(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

Tensor make_tensor(Shape shape, std::vector<float> values) {
  if (shape.size() > 2) throw ShapeMismatch("tensors have rank <= 2, got " + shape_string(shape));
  if (numel(shape) != values.size())
    throw ShapeMismatch("shape " + shape_string(shape) + " does not hold " + std::to_string(values.size()) +
                        " values");
  auto p = std::make_shared<detail::Impl>();
  p->shape = std::move(shape);
  p->data = std::move(values);
  return Tensor(std::move(p));
}

Tensor Tensor::zeros(Shape shape) {
  auto n = tensor::numel(shape);
  return make_tensor(std::move(shape), std::vector<float>(n, 0.0f));
}

Tensor Tensor::full(Shape shape, float value) {
  auto n = tensor::numel(shape);
  return make_tensor(std::move(shape), std::vector<float>(n, value));
}

Tensor Tensor::from(Shape shape, std::vector<float> values) { return make_tensor(std::move(shape), std::move(values)); }

Tensor Tensor::scalar(float value) { return make_tensor({}, {value}); }

Tensor Tensor::parameter(Shape shape, std::vector<float> values) {
  Tensor t = make_tensor(std::move(shape), std::move(values));
  t.set_requires_grad(true);
  return t;
}

const Shape& Tensor::shape() const { return p_->shape; }

std::size_t Tensor::rows() const { return rank() == 2 ? shape()[0] : 1; }

std::size_t Tensor::cols() const {
  if (rank() == 2) return shape()[1];
  if (rank() == 1) return shape()[0];
  return 1;
}

std::span<float> Tensor::data() { return p_->data; }
std::span<const float> Tensor::data() const { return p_->data; }

float Tensor::item() const {
  if (numel() != 1) throw NotScalar("item() on tensor of shape " + shape_string(shape()));
  return p_->data[0];
}

bool Tensor::requires_grad() const { return p_ && p_->requires_grad; }
void Tensor::set_requires_grad(bool on) { p_->requires_grad = on; }

std::vector<float> Tensor::grad() const {
  if (p_->grad.empty()) return std::vector<float>(p_->data.size(), 0.0f);
  return p_->grad;
}

bool Tensor::has_grad() const { return !p_->grad.empty(); }
void Tensor::zero_grad() { p_->grad.clear(); }

Tensor Tensor::detach() const { return make_tensor(p_->shape, p_->data); }

// ---- Tape ------------------------------------------------------------------

Tape::Tape() : previous_(g_active) { g_active = this; }
Tape::~Tape() { g_active = previous_; }

Tape* Tape::active() noexcept { return g_active; }

void Tape::record(std::function<void()> backward_fn) { ops_.push_back(std::move(backward_fn)); }

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1)
    throw NotScalar("backward needs a scalar loss, got " + (loss.defined() ? shape_string(loss.shape()) : "undefined"));
  if (!loss.requires_grad()) {
    ops_.clear();
    return;
  }
  loss.impl()->grad_buffer()[0] += 1.0f;
  for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
  ops_.clear();
}

// ---- operations ----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b, bool ta, bool tb) {
  require_rank2("matmul", a);
  require_rank2("matmul", b);
  const std::size_t m = ta ? a.shape()[1] : a.shape()[0];
  const std::size_t k = ta ? a.shape()[0] : a.shape()[1];
  const std::size_t kb = tb ? b.shape()[1] : b.shape()[0];
  const std::size_t n = tb ? b.shape()[0] : b.shape()[1];
  if (k != kb) shape_error("matmul", a.shape(), b.shape());
  const bool grad = recording({&a, &b});
  std::vector<float> out(m * n);
  auto A = cmat(a.impl()->data, a.shape()[0], a.shape()[1]);
  auto B = cmat(b.impl()->data, b.shape()[0], b.shape()[1]);
  auto C = mat(out, m, n);
  if (!ta && !tb) C.noalias() = A * B;
  else if (ta && !tb) C.noalias() = A.transpose() * B;
  else if (!ta && tb) C.noalias() = A * B.transpose();
  else C.noalias() = A.transpose() * B.transpose();
  Tensor r = result({m, n}, std::move(out), grad);
  if (grad) {
    ImplPtr pa = a.impl(), pb = b.impl();
    on_backward(r, [pa, pb, m, n, k, ta, tb](const std::vector<float>& g) {
      auto G = cmat(g, m, n);
      auto A = cmat(pa->data, pa->shape[0], pa->shape[1]);
      auto B = cmat(pb->data, pb->shape[0], pb->shape[1]);
      if (pa->requires_grad) {
        auto dA = mat(pa->grad_buffer(), pa->shape[0], pa->shape[1]);
        // op(A) grad = G * op(B)^T
        if (!ta) {
          if (!tb) dA.noalias() += G * B.transpose();
          else dA.noalias() += G * B;
        } else {
          if (!tb) dA.noalias() += B * G.transpose();
          else dA.noalias() += B.transpose() * G.transpose();
        }
      }
      if (pb->requires_grad) {
        auto dB = mat(pb->grad_buffer(), pb->shape[0], pb->shape[1]);
        // op(B) grad = op(A)^T * G
        if (!tb) {
          if (!ta) dB.noalias() += A.transpose() * G;
          else dB.noalias() += A * G;
        } else {
          if (!ta) dB.noalias() += G.transpose() * A;
          else dB.noalias() += G.transpose() * A.transpose();
        }
      }
      (void)k;
    });
  }
  check_finite("matmul", r);
  return r;
}

namespace {

Tensor add_impl(const Tensor& a, const Tensor& b, float sign, const char* name) {
  const bool same = a.shape() == b.shape();
  const bool bias = !same && a.rank() == 2 && is_row_vector_for(b, a.cols());
  if (!same && !bias) shape_error(name, a.shape(), b.shape());
  const bool grad = recording({&a, &b});
  std::vector<float> out(a.data().begin(), a.data().end());
  const auto bd = b.data();
  if (same) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += sign * bd[i];
  } else {
    const std::size_t c = a.cols();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += sign * bd[i % c];
  }
  Tensor r = result(a.shape(), std::move(out), grad);
  if (grad) {
    ImplPtr pa = a.impl(), pb = b.impl();
    const std::size_t c = a.cols();
    on_backward(r, [pa, pb, same, c, sign](const std::vector<float>& g) {
      if (pa->requires_grad) pa->accumulate(g);
      if (!pb->requires_grad) return;
      auto& db = pb->grad_buffer();
      if (same) {
        for (std::size_t i = 0; i < g.size(); ++i) db[i] += sign * g[i];
      } else {
        for (std::size_t i = 0; i < g.size(); ++i) db[i % c] += sign * g[i];
      }
    });
  }
  return r;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return add_impl(a, b, 1.0f, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return add_impl(a, b, -1.0f, "sub"); }

Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_error("mul", a.shape(), b.shape());
  const bool grad = recording({&a, &b});
  std::vector<float> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  Tensor r = result(a.shape(), std::move(out), grad);
  if (grad) {
    ImplPtr pa = a.impl(), pb = b.impl();
    on_backward(r, [pa, pb](const std::vector<float>& g) {
      if (pa->requires_grad) {
        auto& d = pa->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * pb->data[i];
      }
      if (pb->requires_grad) {
        auto& d = pb->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * pa->data[i];
      }
    });
  }
  return r;
}

Tensor mul_scalar(const Tensor& a, float s) {
  const bool grad = recording({&a});
  std::vector<float> out(a.data().begin(), a.data().end());
  for (auto& x : out) x *= s;
  Tensor r = result(a.shape(), std::move(out), grad);
  if (grad) {
    ImplPtr pa = a.impl();
    on_backward(r, [pa, s](const std::vector<float>& g) {
      auto& d = pa->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += s * g[i];
    });
  }
  return r;
}

Tensor scale_rows(const Tensor& a, std::span<const float> factors) {
  if (factors.size() != a.rows())
    throw ShapeMismatch("scale_rows: " + std::to_string(factors.size()) + " factors for shape " +
                        shape_string(a.shape()));
  const bool grad = recording({&a});
  const std::size_t c = a.cols();
  std::vector<float> f(factors.begin(), factors.end());
  std::vector<float> out(a.data().begin(), a.data().end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= f[i / c];
  Tensor r = result(a.shape(), std::move(out), grad);
  if (grad) {
    ImplPtr pa = a.impl();
    on_backward(r, [pa, f = std::move(f), c](const std::vector<float>& g) {
      auto& d = pa->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += f[i / c] * g[i];
    });
  }
  return r;
}

Tensor concat(std::span<const Tensor> parts, int axis) {
  if (parts.empty()) throw ShapeMismatch("concat: no inputs");
  if (axis != 0 && axis != 1) throw ShapeMismatch("concat: axis must be 0 or 1");
  for (const auto& p : parts) require_rank2("concat", p);
  const std::size_t r0 = parts[0].rows(), c0 = parts[0].cols();
  std::size_t rows = 0, cols = 0;
  for (const auto& p : parts) {
    if (axis == 0 && p.cols() != c0) shape_error("concat", parts[0].shape(), p.shape());
    if (axis == 1 && p.rows() != r0) shape_error("concat", parts[0].shape(), p.shape());
    rows += p.rows();
    cols += p.cols();
  }
  if (axis == 0) cols = c0;
  else rows = r0;
  bool grad = false;
  if (g_active)
    for (const auto& p : parts) grad = grad || p.requires_grad();
  std::vector<float> out(rows * cols);
  std::size_t off = 0;
  for (const auto& p : parts) {
    const auto d = p.data();
    if (axis == 0) {
      std::copy(d.begin(), d.end(), out.begin() + static_cast<std::ptrdiff_t>(off * cols));
      off += p.rows();
    } else {
      for (std::size_t i = 0; i < rows; ++i)
        std::copy_n(d.begin() + static_cast<std::ptrdiff_t>(i * p.cols()), p.cols(),
                    out.begin() + static_cast<std::ptrdiff_t>(i * cols + off));
      off += p.cols();
    }
  }
  Tensor r = result({rows, cols}, std::move(out), grad);
  if (grad) {
    std::vector<ImplPtr> ps;
    for (const auto& p : parts) ps.push_back(p.impl());
    on_backward(r, [ps, axis, cols, rows](const std::vector<float>& g) {
      std::size_t off = 0;
      for (const auto& p : ps) {
        const std::size_t pr = p->shape[0], pc = p->shape[1];
        if (p->requires_grad) {
          auto& d = p->grad_buffer();
          for (std::size_t i = 0; i < pr; ++i)
            for (std::size_t j = 0; j < pc; ++j)
              d[i * pc + j] += axis == 0 ? g[(off + i) * cols + j] : g[i * cols + off + j];
        }
        off += axis == 0 ? pr : pc;
      }
      (void)rows;
    });
  }
  return r;
}

Tensor slice(const Tensor& a, int axis, std::size_t begin, std::size_t end) {
  require_rank2("slice", a);
  const std::size_t R = a.rows(), C = a.cols();
  const std::size_t lim = axis == 0 ? R : C;
  if ((axis != 0 && axis != 1) || begin > end || end > lim)
    throw ShapeMismatch("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) + ") on axis " +
                        std::to_string(axis) + " of " + shape_string(a.shape()));
  const bool grad = recording({&a});
  const std::size_t rows = axis == 0 ? end - begin : R;
  const std::size_t cols = axis == 0 ? C : end - begin;
  std::vector<float> out(rows * cols);
  const auto d = a.data();
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j)
      out[i * cols + j] = axis == 0 ? d[(begin + i) * C + j] : d[i * C + begin + j];
  Tensor r = result({rows, cols}, std::move(out), grad);
  if (grad) {
    ImplPtr pa = a.impl();
    on_backward(r, [pa, axis, begin, rows, cols, C](const std::vector<float>& g) {
      auto& dd = pa->grad_buffer();
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j)
          (axis == 0 ? dd[(begin + i) * C + j] : dd[i * C + begin + j]) += g[i * cols + j];
    });
  }
  return r;
}

Tensor transpose(const Tensor& a) {
  require_rank2("transpose", a);
  const std::size_t R = a.rows(), C = a.cols();
  const bool grad = recording({&a});
  std::vector<float> out(R * C);
  mat(out, C, R) = cmat(a.impl()->data, R, C).transpose();
  Tensor r = result({C, R}, std::move(out), grad);
  if (grad) {
    ImplPtr pa = a.impl();
    on_backward(r, [pa, R, C](const std::vector<float>& g) {
      mat(pa->grad_buffer(), R, C) += cmat(g, C, R).transpose();
    });
  }
  return r;
}

Tensor embedding_lookup(const Tensor& table, std::span<const std::size_t> ids) {
  require_rank2("embedding_lookup", table);
  const std::size_t V = table.rows(), d = table.cols();
  for (auto id : ids)
    if (id >= V)
      throw ShapeMismatch("embedding_lookup: id " + std::to_string(id) + " out of range for " +
                          shape_string(table.shape()));
  const bool grad = recording({&table});
  std::vector<float> out(ids.size() * d);
  const auto t = table.data();
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::copy_n(t.begin() + static_cast<std::ptrdiff_t>(ids[i] * d), d,
                out.begin() + static_cast<std::ptrdiff_t>(i * d));
  Tensor r = result({ids.size(), d}, std::move(out), grad);
  if (grad) {
    ImplPtr pt = table.impl();
    std::vector<std::size_t> idv(ids.begin(), ids.end());
    on_backward(r, [pt, idv = std::move(idv), d](const std::vector<float>& g) {
      auto& dt = pt->grad_buffer();
      for (std::size_t i = 0; i < idv.size(); ++i)
        for (std::size_t j = 0; j < d; ++j) dt[idv[i] * d + j] += g[i * d + j];
    });
  }
  return r;
}

Tensor scatter_add_rows(const Tensor& src, std::span<const std::size_t> index, std::size_t out_rows) {
  require_rank2("scatter_add_rows", src);
  if (index.size() != src.rows())
    throw ShapeMismatch("scatter_add_rows: " + std::to_string(index.size()) + " indices for " +
                        shape_string(src.shape()));
  for (auto i : index)
    if (i >= out_rows) throw ShapeMismatch("scatter_add_rows: index " + std::to_string(i) + " >= " +
                                           std::to_string(out_rows));
  const std::size_t d = src.cols();
  const bool grad = recording({&src});
  std::vector<float> out(out_rows * d, 0.0f);
  const auto s = src.data();
  for (std::size_t i = 0; i < index.size(); ++i)
    for (std::size_t j = 0; j < d; ++j) out[index[i] * d + j] += s[i * d + j];
  Tensor r = result({out_rows, d}, std::move(out), grad);
  if (grad) {
    ImplPtr ps = src.impl();
    std::vector<std::size_t> idx(index.begin(), index.end());
    on_backward(r, [ps, idx = std::move(idx), d](const std::vector<float>& g) {
      auto& ds = ps->grad_buffer();
      for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::size_t j = 0; j < d; ++j) ds[i * d + j] += g[idx[i] * d + j];
    });
  }
  return r;
}

Tensor replace_rows(const Tensor& a, std::span<const std::size_t> index, const Tensor& rows) {
  require_rank2("replace_rows", a);
  require_rank2("replace_rows", rows);
  if (rows.rows() != index.size() || rows.cols() != a.cols()) shape_error("replace_rows", a.shape(), rows.shape());
  std::vector<char> hit(a.rows(), 0);
  for (auto i : index) {
    if (i >= a.rows() || hit[i]) throw ShapeMismatch("replace_rows: bad or repeated row " + std::to_string(i));
    hit[i] = 1;
  }
  const std::size_t d = a.cols();
  const bool grad = recording({&a, &rows});
  std::vector<float> out(a.data().begin(), a.data().end());
  for (std::size_t k = 0; k < index.size(); ++k)
    std::copy_n(rows.data().begin() + static_cast<std::ptrdiff_t>(k * d), d,
                out.begin() + static_cast<std::ptrdiff_t>(index[k] * d));
  Tensor r = result(a.shape(), std::move(out), grad);
  if (grad) {
    ImplPtr pa = a.impl(), pr = rows.impl();
    std::vector<std::size_t> idx(index.begin(), index.end());
    on_backward(r, [pa, pr, idx = std::move(idx), hit = std::move(hit), d](const std::vector<float>& g) {
      if (pa->requires_grad) {
        auto& da = pa->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i)
          if (!hit[i / d]) da[i] += g[i];
      }
      if (pr->requires_grad) {
        auto& dr = pr->grad_buffer();
        for (std::size_t k = 0; k < idx.size(); ++k)
          for (std::size_t j = 0; j < d; ++j) dr[k * d + j] += g[idx[k] * d + j];
      }
    });
  }
  return r;
}

Tensor relu(const Tensor& a) {
  const bool grad = recording({&a});
  std::vector<float> out(a.data().begin(), a.data().end());
  for (auto& x : out) x = x > 0.0f ? x : 0.0f;
  Tensor r = result(a.shape(), std::move(out), grad);
  if (grad) {
    ImplPtr pa = a.impl();
    on_backward(r, [pa](const std::vector<float>& g) {
      auto& d = pa->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i)
        if (pa->data[i] > 0.0f) d[i] += g[i];
    });
  }
  return r;
}

Tensor gelu(const Tensor& a) {
  constexpr float kInvSqrt2 = 0.70710678118654752f;
  constexpr float kInvSqrt2Pi = 0.39894228040143268f;
  const bool grad = recording({&a});
  std::vector<float> out(a.numel());
  const auto d = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = 0.5f * d[i] * (1.0f + std::erf(d[i] * kInvSqrt2));
  Tensor r = result(a.shape(), std::move(out), grad);
  if (grad) {
    ImplPtr pa = a.impl();
    on_backward(r, [pa](const std::vector<float>& g) {
      auto& dd = pa->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const float x = pa->data[i];
        const float cdf = 0.5f * (1.0f + std::erf(x * kInvSqrt2));
        const float pdf = kInvSqrt2Pi * std::exp(-0.5f * x * x);
        dd[i] += g[i] * (cdf + x * pdf);
      }
    });
  }
  return r;
}

Tensor softmax(const Tensor& a, int axis) {
  if (axis != 0 && axis != 1) throw ShapeMismatch("softmax: axis must be 0 or 1");
  const std::size_t R = a.rows(), C = a.cols();
  // Iterate "lines" of length L with element stride `step`.
  const std::size_t lines = axis == 1 ? R : C, L = axis == 1 ? C : R;
  const std::size_t line_stride = axis == 1 ? C : 1, step = axis == 1 ? 1 : C;
  const bool grad = recording({&a});
  std::vector<float> out(a.numel());
  const auto d = a.data();
  for (std::size_t l = 0; l < lines; ++l) {
    const std::size_t base = l * line_stride;
    float mx = -std::numeric_limits<float>::infinity();
    for (std::size_t i = 0; i < L; ++i) mx = std::max(mx, d[base + i * step]);
    double s = 0.0;
    for (std::size_t i = 0; i < L; ++i) {
      const float e = std::exp(d[base + i * step] - mx);
      out[base + i * step] = e;
      s += e;
    }
    const float inv = static_cast<float>(1.0 / s);
    for (std::size_t i = 0; i < L; ++i) out[base + i * step] *= inv;
  }
  Tensor r = result(a.shape(), std::move(out), grad);
  if (grad) {
    ImplPtr pa = a.impl(), pr = r.impl();
    on_backward(r, [pa, pr, lines, L, line_stride, step](const std::vector<float>& g) {
      const auto& y = pr->data;
      auto& dd = pa->grad_buffer();
      for (std::size_t l = 0; l < lines; ++l) {
        const std::size_t base = l * line_stride;
        double dot = 0.0;
        for (std::size_t i = 0; i < L; ++i) dot += static_cast<double>(g[base + i * step]) * y[base + i * step];
        const float df = static_cast<float>(dot);
        for (std::size_t i = 0; i < L; ++i) {
          const std::size_t k = base + i * step;
          dd[k] += y[k] * (g[k] - df);
        }
      }
    });
  }
  return r;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps) {
  require_rank2("layer_norm", x);
  const std::size_t R = x.rows(), C = x.cols();
  if (gamma.numel() != C) shape_error("layer_norm", x.shape(), gamma.shape());
  if (beta.numel() != C) shape_error("layer_norm", x.shape(), beta.shape());
  const bool grad = recording({&x, &gamma, &beta});
  std::vector<float> out(R * C), xhat(R * C), rstd(R);
  const auto d = x.data();
  const auto gm = gamma.data();
  const auto bt = beta.data();
  for (std::size_t i = 0; i < R; ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < C; ++j) mu += d[i * C + j];
    mu /= static_cast<double>(C);
    double var = 0.0;
    for (std::size_t j = 0; j < C; ++j) {
      const double t = d[i * C + j] - mu;
      var += t * t;
    }
    var /= static_cast<double>(C);
    const double rs = 1.0 / std::sqrt(var + eps);
    rstd[i] = static_cast<float>(rs);
    for (std::size_t j = 0; j < C; ++j) {
      const float xh = static_cast<float>((d[i * C + j] - mu) * rs);
      xhat[i * C + j] = xh;
      out[i * C + j] = gm[j] * xh + bt[j];
    }
  }
  Tensor r = result({R, C}, std::move(out), grad);
  if (grad) {
    ImplPtr px = x.impl(), pg = gamma.impl(), pb = beta.impl();
    on_backward(r, [px, pg, pb, xhat = std::move(xhat), rstd = std::move(rstd), R, C](const std::vector<float>& g) {
      if (pg->requires_grad) {
        auto& dg = pg->grad_buffer();
        for (std::size_t i = 0; i < R; ++i)
          for (std::size_t j = 0; j < C; ++j) dg[j] += g[i * C + j] * xhat[i * C + j];
      }
      if (pb->requires_grad) {
        auto& db = pb->grad_buffer();
        for (std::size_t i = 0; i < R; ++i)
          for (std::size_t j = 0; j < C; ++j) db[j] += g[i * C + j];
      }
      if (px->requires_grad) {
        auto& dx = px->grad_buffer();
        std::vector<float> dxh(C);
        for (std::size_t i = 0; i < R; ++i) {
          double m1 = 0.0, m2 = 0.0;
          for (std::size_t j = 0; j < C; ++j) {
            dxh[j] = g[i * C + j] * pg->data[j];
            m1 += dxh[j];
            m2 += static_cast<double>(dxh[j]) * xhat[i * C + j];
          }
          m1 /= static_cast<double>(C);
          m2 /= static_cast<double>(C);
          for (std::size_t j = 0; j < C; ++j)
            dx[i * C + j] += rstd[i] * static_cast<float>(dxh[j] - m1 - xhat[i * C + j] * m2);
        }
      }
    });
  }
  return r;
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::int64_t> targets, std::int64_t ignore_index) {
  require_rank2("cross_entropy", logits);
  const std::size_t N = logits.rows(), V = logits.cols();
  if (targets.size() != N)
    throw ShapeMismatch("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                        shape_string(logits.shape()));
  const bool grad = recording({&logits});
  const auto d = logits.data();
  std::vector<float> prob(N * V, 0.0f);
  std::vector<std::int64_t> tg(targets.begin(), targets.end());
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < N; ++i) {
    if (tg[i] == ignore_index) continue;
    if (tg[i] < 0 || static_cast<std::size_t>(tg[i]) >= V)
      throw ShapeMismatch("cross_entropy: target " + std::to_string(tg[i]) + " outside [0, " + std::to_string(V) + ")");
    float mx = -std::numeric_limits<float>::infinity();
    for (std::size_t j = 0; j < V; ++j) mx = std::max(mx, d[i * V + j]);
    double s = 0.0;
    for (std::size_t j = 0; j < V; ++j) {
      const float e = std::exp(d[i * V + j] - mx);
      prob[i * V + j] = e;
      s += e;
    }
    const float inv = static_cast<float>(1.0 / s);
    for (std::size_t j = 0; j < V; ++j) prob[i * V + j] *= inv;
    total += std::log(s) + mx - d[i * V + static_cast<std::size_t>(tg[i])];
    ++count;
  }
  const float loss = count ? static_cast<float>(total / static_cast<double>(count)) : 0.0f;
  Tensor r = result({}, {loss}, grad);
  if (grad && count) {
    ImplPtr pl = logits.impl();
    on_backward(r, [pl, prob = std::move(prob), tg = std::move(tg), ignore_index, N, V,
                    count](const std::vector<float>& g) {
      auto& dl = pl->grad_buffer();
      const float scale = g[0] / static_cast<float>(count);
      for (std::size_t i = 0; i < N; ++i) {
        if (tg[i] == ignore_index) continue;
        for (std::size_t j = 0; j < V; ++j) dl[i * V + j] += scale * prob[i * V + j];
        dl[i * V + static_cast<std::size_t>(tg[i])] -= scale;
      }
    });
  }
  return r;
}

Tensor sum(const Tensor& a) {
  const bool grad = recording({&a});
  double s = 0.0;
  for (float x : a.data()) s += x;
  Tensor r = result({}, {static_cast<float>(s)}, grad);
  if (grad) {
    ImplPtr pa = a.impl();
    on_backward(r, [pa](const std::vector<float>& g) {
      auto& d = pa->grad_buffer();
      for (auto& x : d) x += g[0];
    });
  }
  return r;
}

Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw ShapeMismatch("mean of empty tensor " + shape_string(a.shape()));
  return mul_scalar(sum(a), 1.0f / static_cast<float>(a.numel()));
}

Tensor dropout(const Tensor& a, std::span<const std::uint8_t> keep, float p) {
  if (keep.size() != a.numel()) throw ShapeMismatch("dropout: mask size does not match " + shape_string(a.shape()));
  if (p <= 0.0f) return a;
  const float scale = 1.0f / (1.0f - p);
  std::vector<float> f(keep.size());
  for (std::size_t i = 0; i < f.size(); ++i) f[i] = keep[i] ? scale : 0.0f;
  return mul(a, make_tensor(a.shape(), std::move(f)));
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::span<const AttentionSegment> segments,
                 std::size_t heads, bool causal) {
  require_rank2("attention", q);
  require_rank2("attention", k);
  require_rank2("attention", v);
  const std::size_t d = q.cols();
  if (k.cols() != d || v.cols() != d) shape_error("attention", q.shape(), k.shape());
  if (k.rows() != v.rows()) shape_error("attention", k.shape(), v.shape());
  if (heads == 0 || d % heads != 0) throw ShapeMismatch("attention: width " + std::to_string(d) +
                                                        " not divisible by heads " + std::to_string(heads));
  for (const auto& s : segments) {
    if (s.q_begin + s.q_len > q.rows() || s.k_begin + s.k_len > k.rows())
      throw ShapeMismatch("attention: segment outside inputs");
    if (causal && s.q_len > s.k_len) throw ShapeMismatch("attention: causal segment with fewer keys than queries");
    if (s.q_len && !s.k_len) throw ShapeMismatch("attention: queries with no keys");
  }
  const std::size_t dh = d / heads;
  const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
  const bool grad = recording({&q, &k, &v});
  std::vector<float> out(q.rows() * d, 0.0f);
  std::vector<RowMat> probs;  // per (segment, head)
  probs.reserve(segments.size() * heads);
  const float* Q = q.data().data();
  const float* K = k.data().data();
  const float* Vp = v.data().data();
  const auto di = static_cast<Eigen::Index>(d);
  for (const auto& s : segments) {
    const auto ql = static_cast<Eigen::Index>(s.q_len), kl = static_cast<Eigen::Index>(s.k_len);
    for (std::size_t h = 0; h < heads; ++h) {
      CMapBlock Qh(Q + s.q_begin * d + h * dh, ql, static_cast<Eigen::Index>(dh), Strided(di));
      CMapBlock Kh(K + s.k_begin * d + h * dh, kl, static_cast<Eigen::Index>(dh), Strided(di));
      CMapBlock Vh(Vp + s.k_begin * d + h * dh, kl, static_cast<Eigen::Index>(dh), Strided(di));
      RowMat S(ql, kl);
      S.noalias() = Qh * Kh.transpose();
      S *= scale;
      // Causal: query i aligned with key i + (k_len - q_len).
      const Eigen::Index shift = kl - ql;
      for (Eigen::Index i = 0; i < ql; ++i) {
        const Eigen::Index lim = causal ? i + shift + 1 : kl;
        float mx = -std::numeric_limits<float>::infinity();
        for (Eigen::Index j = 0; j < lim; ++j) mx = std::max(mx, S(i, j));
        double z = 0.0;
        for (Eigen::Index j = 0; j < lim; ++j) {
          S(i, j) = std::exp(S(i, j) - mx);
          z += S(i, j);
        }
        const float inv = static_cast<float>(1.0 / z);
        for (Eigen::Index j = 0; j < lim; ++j) S(i, j) *= inv;
        for (Eigen::Index j = lim; j < kl; ++j) S(i, j) = 0.0f;
      }
      MapBlock Oh(out.data() + s.q_begin * d + h * dh, ql, static_cast<Eigen::Index>(dh), Strided(di));
      Oh.noalias() = S * Vh;
      if (grad) probs.push_back(std::move(S));
    }
  }
  Tensor r = result(q.shape(), std::move(out), grad);
  if (grad) {
    ImplPtr pq = q.impl(), pk = k.impl(), pv = v.impl();
    std::vector<AttentionSegment> segs(segments.begin(), segments.end());
    on_backward(r, [pq, pk, pv, segs = std::move(segs), probs = std::move(probs), heads, d, dh,
                    scale](const std::vector<float>& g) {
      const auto di = static_cast<Eigen::Index>(d), dhi = static_cast<Eigen::Index>(dh);
      float* dQ = pq->requires_grad ? pq->grad_buffer().data() : nullptr;
      float* dK = pk->requires_grad ? pk->grad_buffer().data() : nullptr;
      float* dV = pv->requires_grad ? pv->grad_buffer().data() : nullptr;
      std::size_t idx = 0;
      for (const auto& s : segs) {
        const auto ql = static_cast<Eigen::Index>(s.q_len), kl = static_cast<Eigen::Index>(s.k_len);
        for (std::size_t h = 0; h < heads; ++h, ++idx) {
          const RowMat& P = probs[idx];
          CMapBlock G(g.data() + s.q_begin * d + h * dh, ql, dhi, Strided(di));
          CMapBlock Qh(pq->data.data() + s.q_begin * d + h * dh, ql, dhi, Strided(di));
          CMapBlock Kh(pk->data.data() + s.k_begin * d + h * dh, kl, dhi, Strided(di));
          CMapBlock Vh(pv->data.data() + s.k_begin * d + h * dh, kl, dhi, Strided(di));
          if (dV) {
            MapBlock dVh(dV + s.k_begin * d + h * dh, kl, dhi, Strided(di));
            dVh.noalias() += P.transpose() * G;
          }
          if (!dQ && !dK) continue;
          RowMat dP(ql, kl);
          dP.noalias() = G * Vh.transpose();
          RowMat dS = P.cwiseProduct(dP);
          for (Eigen::Index i = 0; i < ql; ++i) {
            const float rs = dS.row(i).sum();
            dS.row(i) -= rs * P.row(i);
          }
          dS *= scale;
          if (dQ) {
            MapBlock dQh(dQ + s.q_begin * d + h * dh, ql, dhi, Strided(di));
            dQh.noalias() += dS * Kh;
          }
          if (dK) {
            MapBlock dKh(dK + s.k_begin * d + h * dh, kl, dhi, Strided(di));
            dKh.noalias() += dS.transpose() * Qh;
          }
        }
      }
    });
  }
  check_finite("attention", r);
  return r;
}

// ---- randomness -----------------------------------------------------------

std::uint64_t CounterRng::next_u64() {
  const std::uint64_t base = mix64(seed_ ^ mix64(key_ + 0x9E3779B97F4A7C15ULL));
  return mix64(base + 0x9E3779B97F4A7C15ULL * (++counter_));
}

double CounterRng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

float CounterRng::normal() {
  const double u1 = 1.0 - uniform();
  const double u2 = uniform();
  return static_cast<float>(std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2));
}

std::size_t CounterRng::below(std::size_t n) {
  if (n == 0) throw InvariantViolation("CounterRng::below(0)");
  return static_cast<std::size_t>(next_u64() % n);
}

CounterRng CounterRng::fork(std::string_view label) const {
  std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
  for (unsigned char c : label) h = (h ^ c) * 0x100000001b3ULL;
  return CounterRng(seed_, mix64(key_ ^ h));
}

Tensor randn_parameter(Shape shape, float stddev, CounterRng& rng) {
  std::vector<float> v(numel(shape));
  for (auto& x : v) x = rng.normal() * stddev;
  return Tensor::parameter(std::move(shape), std::move(v));
}

// ---- ParamStore / Adam ---------------------------------------------------------

Tensor& ParamStore::add(const std::string& name, Tensor t) {
  if (index_.count(name)) throw InvariantViolation("duplicate parameter name " + name);
  index_[name] = items_.size();
  items_.emplace_back(name, std::move(t));
  return items_.back().second;
}

Tensor& ParamStore::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw FormatError("unknown parameter " + name);
  return items_[it->second].second;
}

const Tensor& ParamStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw FormatError("unknown parameter " + name);
  return items_[it->second].second;
}

std::size_t ParamStore::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [_, t] : items_) n += t.numel();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& [_, t] : items_) t.zero_grad();
}

void ParamStore::set_requires_grad(bool on) {
  for (auto& [_, t] : items_) t.set_requires_grad(on);
}

void ParamStore::load_values(const ParamStore& other) {
  for (auto& [name, t] : items_) {
    if (!other.contains(name)) continue;
    const auto& src = other.get(name);
    if (src.shape() != t.shape()) shape_error("load " + name, t.shape(), src.shape());
    std::copy(src.data().begin(), src.data().end(), t.data().begin());
  }
}

ParamStore ParamStore::clone() const {
  ParamStore out;
  for (const auto& [name, t] : items_) {
    Tensor c = t.detach();
    c.set_requires_grad(t.requires_grad());
    out.add(name, std::move(c));
  }
  return out;
}

void adam_step(std::span<Tensor> params, AdamState& state, const AdamConfig& cfg) {
  ++state.step;
  const double bc1 = 1.0 - std::pow(static_cast<double>(cfg.beta1), static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(static_cast<double>(cfg.beta2), static_cast<double>(state.step));
  for (auto& p : params) {
    if (!p.requires_grad() || !p.has_grad()) continue;
    auto& slot = state.slots[p.id()];
    const auto& g = p.impl()->grad;
    if (slot.m.empty()) {
      slot.m.assign(g.size(), 0.0f);
      slot.v.assign(g.size(), 0.0f);
    }
    if (slot.m.size() != g.size()) throw ShapeMismatch("adam_step: optimizer state does not match parameter");
    auto w = p.data();
    for (std::size_t i = 0; i < g.size(); ++i) {
      slot.m[i] = cfg.beta1 * slot.m[i] + (1.0f - cfg.beta1) * g[i];
      slot.v[i] = cfg.beta2 * slot.v[i] + (1.0f - cfg.beta2) * g[i] * g[i];
      const double mh = slot.m[i] / bc1;
      const double vh = slot.v[i] / bc2;
      w[i] -= static_cast<float>(cfg.lr * mh / (std::sqrt(vh) + cfg.eps));
    }
  }
}

float clip_grad_norm(std::span<Tensor> params, float max_norm) {
  double sq = 0.0;
  for (const auto& p : params)
    if (p.has_grad())
      for (float g : p.impl()->grad) sq += static_cast<double>(g) * g;
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const float s = static_cast<float>(max_norm / norm);
    for (auto& p : params)
      if (p.has_grad())
        for (auto& g : p.impl()->grad) g *= s;
  }
  return static_cast<float>(norm);
}

// ---- checkpoints -------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'C', 'G', 'F', 'T'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::ostream& out, T v) {
  if constexpr (std::endian::native == std::endian::big) {
    auto* b = reinterpret_cast<unsigned char*>(&v);
    std::reverse(b, b + sizeof(T));
  }
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T take(std::istream& in) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(T))) throw FormatError("checkpoint truncated");
  if constexpr (std::endian::native == std::endian::big) {
    auto* b = reinterpret_cast<unsigned char*>(&v);
    std::reverse(b, b + sizeof(T));
  }
  return v;
}

}  // namespace

void write_checkpoint(std::ostream& out, const std::vector<std::pair<std::string, Tensor>>& tensors) {
  out.write(kMagic, 4);
  put<std::uint32_t>(out, kVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (auto dim : t.shape()) put<std::uint64_t>(out, dim);
    for (float x : t.data()) put<float>(out, x);
  }
}

std::vector<std::pair<std::string, Tensor>> read_checkpoint(std::istream& in) {
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) throw FormatError("not a checkpoint (bad magic)");
  const auto version = take<std::uint32_t>(in);
  if (version != kVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
  const auto count = take<std::uint32_t>(in);
  std::vector<std::pair<std::string, Tensor>> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = take<std::uint32_t>(in);
    if (len > (1u << 16)) throw FormatError("checkpoint name too long");
    std::string name(len, '\0');
    if (!in.read(name.data(), len)) throw FormatError("checkpoint truncated");
    const auto rank = take<std::uint32_t>(in);
    if (rank > 2) throw FormatError("checkpoint tensor " + name + " has rank " + std::to_string(rank));
    Shape shape;
    for (std::uint32_t r = 0; r < rank; ++r) shape.push_back(static_cast<std::size_t>(take<std::uint64_t>(in)));
    const auto n = numel(shape);
    if (n > (std::size_t{1} << 30)) throw FormatError("checkpoint tensor " + name + " too large");
    std::vector<float> v(n);
    for (auto& x : v) x = take<float>(in);
    out.emplace_back(std::move(name), make_tensor(std::move(shape), std::move(v)));
  }
  return out;
}

void save_checkpoint(const std::string& path, const std::vector<std::pair<std::string, Tensor>>& tensors) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  write_checkpoint(out, tensors);
  if (!out) throw IoError("write failed for " + path);
}

std::vector<std::pair<std::string, Tensor>> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path);
  return read_checkpoint(in);
}

// ---- gradient check ---------------------------------------------------------

GradCheckResult grad_check(const std::function<Tensor()>& f, std::span<Tensor> inputs, double eps,
                           std::size_t max_elements) {
  for (auto& t : inputs) t.zero_grad();
  double base = 0.0;
  {
    Tape tape;
    Tensor loss = f();
    tape.backward(loss);
    base = loss.item();
  }
  GradCheckResult res;
  CounterRng pick(0x5EED, inputs.size());
  for (auto& t : inputs) {
    const auto analytic = t.grad();
    std::vector<std::size_t> idx(t.numel());
    std::iota(idx.begin(), idx.end(), 0);
    if (max_elements && idx.size() > max_elements) {
      pick.shuffle(idx.begin(), idx.end());
      idx.resize(max_elements);
    }
    auto w = t.data();
    double diff = 0.0, na = 0.0, nn = 0.0;
    for (auto i : idx) {
      const float orig = w[i];
      // Derivative at orig of the quartic through five stencil points, using
      // the offsets float rounding actually produced.
      std::array<double, 5> d{}, fv{};
      for (int s = -2; s <= 2; ++s) {
        const float x = static_cast<float>(orig + s * eps);
        d[s + 2] = static_cast<double>(x) - static_cast<double>(orig);
        if (s == 0) {
          fv[2] = base;
          continue;
        }
        w[i] = x;
        fv[s + 2] = f().item();
      }
      w[i] = orig;
      double numeric = 0.0;
      for (std::size_t a = 0; a < 5; ++a) {
        double denom = 1.0, numer = 0.0;
        for (std::size_t j = 0; j < 5; ++j)
          if (j != a) denom *= d[a] - d[j];
        for (std::size_t k = 0; k < 5; ++k) {
          if (k == a) continue;
          double prod = 1.0;
          for (std::size_t j = 0; j < 5; ++j)
            if (j != a && j != k) prod *= -d[j];
          numer += prod;
        }
        numeric += fv[a] * numer / denom;
      }
      const double a = analytic[i];
      diff += (a - numeric) * (a - numeric);
      na += a * a;
      nn += numeric * numeric;
      ++res.checked;
    }
    const double denom = std::max({std::sqrt(na), std::sqrt(nn), 1e-12});
    res.max_rel_error = std::max(res.max_rel_error, std::sqrt(diff) / denom);
  }
  return res;
}

}  // namespace cgfuse::tensor
