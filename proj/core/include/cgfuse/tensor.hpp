#pragma once

// Dense float32 tensors (rank <= 2) with a reverse-mode tape.
//
// Operations record a backward closure on the thread's active Tape when at
// least one input requires a gradient. With no active tape, operations are
// plain forward computations.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace cgfuse::tensor {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& s);
std::size_t numel(const Shape& s);

namespace detail {
struct Impl {
  Shape shape;
  std::vector<float> data;
  std::vector<float> grad;  // empty until first accumulation
  bool requires_grad = false;

  void accumulate(std::span<const float> g);
  std::vector<float>& grad_buffer();
};
}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, float value);
  static Tensor from(Shape shape, std::vector<float> values);
  static Tensor scalar(float value);
  /// A leaf that requires gradients.
  static Tensor parameter(Shape shape, std::vector<float> values);

  bool defined() const noexcept { return p_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  /// Rank-2: shape[0]; rank-1 and rank-0: 1.
  std::size_t rows() const;
  /// Rank-2: shape[1]; rank-1: shape[0]; rank-0: 1.
  std::size_t cols() const;
  std::size_t numel() const { return data().size(); }

  std::span<float> data();
  std::span<const float> data() const;
  float item() const;
  float at(std::size_t r, std::size_t c) const { return data()[r * cols() + c]; }

  bool requires_grad() const;
  void set_requires_grad(bool on);
  /// Accumulated gradient; zeros of matching size when nothing was accumulated.
  std::vector<float> grad() const;
  bool has_grad() const;
  void zero_grad();

  /// Fresh leaf with copied values and no gradient.
  Tensor detach() const;

  const detail::Impl* id() const noexcept { return p_.get(); }
  std::shared_ptr<detail::Impl> impl() const { return p_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Impl> p) : p_(std::move(p)) {}
  friend Tensor make_tensor(Shape, std::vector<float>);
  std::shared_ptr<detail::Impl> p_;
};

Tensor make_tensor(Shape shape, std::vector<float> values);

/// Records backward closures while alive and installed as the thread's
/// active tape. Nested tapes restore the previous one on destruction.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Seeds d(loss)/d(loss) = 1 and runs recorded closures once each in
  /// reverse order. Throws NotScalar unless loss has one element.
  void backward(const Tensor& loss);
  std::size_t size() const noexcept { return ops_.size(); }

  static Tape* active() noexcept;
  void record(std::function<void()> backward_fn);

 private:
  std::vector<std::function<void()>> ops_;
  Tape* previous_;
};

// ---- operations ----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a = false, bool trans_b = false);
/// Same shapes, or b a row vector ({n} or {1,n}) broadcast over a's rows.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
/// Elementwise product, same shapes.
Tensor mul(const Tensor& a, const Tensor& b);
Tensor mul_scalar(const Tensor& a, float s);
/// Multiplies row r by the constant factors[r].
Tensor scale_rows(const Tensor& a, std::span<const float> factors);
/// axis 0 stacks rows, axis 1 joins columns.
Tensor concat(std::span<const Tensor> parts, int axis);
Tensor slice(const Tensor& a, int axis, std::size_t begin, std::size_t end);
Tensor transpose(const Tensor& a);
/// Rows of `table` selected by ids; doubles as a row gather.
Tensor embedding_lookup(const Tensor& table, std::span<const std::size_t> ids);
/// out[index[i]] += src[i]; out has `out_rows` rows.
Tensor scatter_add_rows(const Tensor& src, std::span<const std::size_t> index, std::size_t out_rows);
/// Replaces the listed rows of `a` with rows of `rows` (one per listed index).
Tensor replace_rows(const Tensor& a, std::span<const std::size_t> index, const Tensor& rows);
Tensor relu(const Tensor& a);
/// Exact (erf) GELU.
Tensor gelu(const Tensor& a);
/// axis 1: each row; axis 0: each column.
Tensor softmax(const Tensor& a, int axis = 1);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps = 1e-5f);
/// Mean token cross-entropy over rows whose target != ignore_index. Returns
/// 0 (still on the tape) when every row is ignored.
Tensor cross_entropy(const Tensor& logits, std::span<const std::int64_t> targets,
                     std::int64_t ignore_index = -100);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
/// Zeroes entries where mask is 0 and scales kept ones by 1/(1-p).
Tensor dropout(const Tensor& a, std::span<const std::uint8_t> keep, float p);

/// One attention segment inside row-stacked queries and keys.
struct AttentionSegment {
  std::size_t q_begin, q_len;
  std::size_t k_begin, k_len;
};

/// Multi-head scaled dot-product attention over row-stacked sequences.
/// q: [Nq, d], k and v: [Nk, d]; query rows of a segment only see key rows
/// of the same segment, and with `causal` query i sees keys 0..i.
/// Rows of q not covered by a segment produce zeros.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v,
                 std::span<const AttentionSegment> segments, std::size_t heads, bool causal);

// ---- randomness -----------------------------------------------------------

/// SplitMix64 in counter mode: value i of stream (seed, key) is a pure
/// function of (seed, key, i).
class CounterRng {
 public:
  explicit CounterRng(std::uint64_t seed, std::uint64_t key = 0) : seed_(seed), key_(key) {}

  std::uint64_t next_u64();
  /// Uniform in [0, 1).
  double uniform();
  float normal();
  std::size_t below(std::size_t n);
  /// Independent stream derived from this one's identity and a label.
  CounterRng fork(std::string_view label) const;
  std::uint64_t counter() const noexcept { return counter_; }

  template <typename It>
  void shuffle(It first, It last) {
    for (auto n = last - first; n > 1; --n) std::swap(first[n - 1], first[below(static_cast<std::size_t>(n))]);
  }

 private:
  std::uint64_t seed_;
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

/// Normal(0, stddev) parameter.
Tensor randn_parameter(Shape shape, float stddev, CounterRng& rng);

// ---- parameters, optimizer, checkpoints -----------------------------------

/// Named parameters in insertion order.
class ParamStore {
 public:
  Tensor& add(const std::string& name, Tensor t);
  Tensor& get(const std::string& name);
  const Tensor& get(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) > 0; }
  const std::vector<std::pair<std::string, Tensor>>& items() const { return items_; }
  std::vector<std::pair<std::string, Tensor>>& items() { return items_; }
  std::size_t parameter_count() const;
  void zero_grad();
  void set_requires_grad(bool on);
  /// Copies values of every entry whose name exists in `other` with equal shape.
  void load_values(const ParamStore& other);
  /// Copies names, shapes and values into fresh tensors.
  ParamStore clone() const;

 private:
  std::vector<std::pair<std::string, Tensor>> items_;
  std::map<std::string, std::size_t> index_;
};

struct AdamConfig {
  float lr = 1e-3f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
};

struct AdamSlot {
  std::vector<float> m, v;
};

struct AdamState {
  std::map<const detail::Impl*, AdamSlot> slots;
  std::int64_t step = 0;
};

/// One Adam step with bias correction over tensors that require gradients.
/// Tensors without an accumulated gradient are left untouched.
void adam_step(std::span<Tensor> params, AdamState& state, const AdamConfig& cfg);

/// Scales all gradients so their global L2 norm is at most max_norm; returns
/// the norm before scaling.
float clip_grad_norm(std::span<Tensor> params, float max_norm);

/// Binary named-tensor container: magic, version, then (name, shape,
/// little-endian float32 payload) entries.
void save_checkpoint(const std::string& path, const std::vector<std::pair<std::string, Tensor>>& tensors);
std::vector<std::pair<std::string, Tensor>> load_checkpoint(const std::string& path);
void write_checkpoint(std::ostream& out, const std::vector<std::pair<std::string, Tensor>>& tensors);
std::vector<std::pair<std::string, Tensor>> read_checkpoint(std::istream& in);

// ---- gradient checking ----------------------------------------------------

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
};

/// Five-point central finite differences (step `eps`) on every element (or
/// `max_elements` sampled deterministically) of each input. `f` must rebuild the loss from the
/// current input values. Per input, the error is ||a - n|| / max(||a||, ||n||)
/// over the checked elements; the result holds the worst input.
GradCheckResult grad_check(const std::function<Tensor()>& f, std::span<Tensor> inputs,
                           double eps = 1e-2, std::size_t max_elements = 0);

}  // namespace cgfuse::tensor
