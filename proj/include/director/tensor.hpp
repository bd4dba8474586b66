#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace director {

class Tape;

/// Dense row-major tensor of doubles (rank 1 or 2) with an optional gradient
/// buffer. Tensors are cheap shared handles: copies alias the same storage.
///
/// A tensor participates in reverse-mode differentiation when an op consuming
/// it runs while a Tape is active and some input has requires_grad set. Ops
/// never record in inference code paths (no active tape), so decoding pays no
/// autograd overhead.
class Tensor {
 public:
  Tensor() = default;
  Tensor(std::vector<int64_t> shape, std::vector<double> values,
         bool requires_grad = false);

  static Tensor zeros(std::vector<int64_t> shape, bool requires_grad = false);
  static Tensor full(std::vector<int64_t> shape, double value,
                     bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return data_ != nullptr; }
  const std::vector<int64_t>& shape() const;
  int64_t rank() const;
  int64_t dim(int64_t i) const;
  int64_t numel() const;
  int64_t rows() const;  // rank-2 only
  int64_t cols() const;  // rank-2 only

  std::span<const double> values() const;
  std::span<double> values_mut();
  double at(int64_t flat_index) const;
  double at(int64_t row, int64_t col) const;
  double item() const;  // numel()==1 only

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  bool has_grad() const;
  std::span<const double> grad() const;  // throws if no grad buffer
  std::span<double> grad_mut();
  void ensure_grad();
  void zero_grad();

  /// Identity of the tape this tensor was produced on (0 for leaves).
  uint64_t tape_id() const;

  bool same_storage(const Tensor& other) const { return data_ == other.data_; }

 private:
  struct Data {
    std::vector<int64_t> shape;
    std::vector<double> values;
    std::vector<double> grad;  // empty until ensure_grad()
    bool requires_grad = false;
    uint64_t tape_id = 0;
  };

  std::shared_ptr<Data> data_;
  friend class Tape;
  friend struct OpWriter;
};

/// Records ops of one forward pass in topological order and replays their
/// backward rules in exact reverse order. One tape per forward pass; a tape
/// is consumed by backward() and cannot be reused.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Seeds d(loss)/d(loss) = 1 and runs all recorded backward rules in
  /// reverse. Throws on non-scalar loss or a second backward() call.
  void backward(const Tensor& loss);

  size_t op_count() const { return nodes_.size(); }
  uint64_t id() const { return id_; }

  static Tape* active() noexcept;
  void record(std::function<void()> backward_fn);

 private:
  std::vector<std::function<void()>> nodes_;
  bool consumed_ = false;
  uint64_t id_ = 0;
};

std::string shape_str(std::span<const int64_t> shape);

// ---- primitives ------------------------------------------------------------
// All reductions (softmax, log_softmax, layer_norm) act over the last axis.
// Shape errors throw std::invalid_argument with both shapes spelled out.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // elementwise
Tensor scale(const Tensor& x, double c);
Tensor add_scalar(const Tensor& x, double c);
Tensor neg(const Tensor& x);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& x);
/// y[i][j] = x[i][j] + bias[j]; the only broadcasting supported anywhere.
Tensor add_bias(const Tensor& x, const Tensor& bias);

/// out[i] = table[ids[i]] (row gather; backward scatter-adds).
Tensor gather_rows(const Tensor& table, std::span<const int> ids);
/// out[k] = x[row[k], col[k]]
Tensor gather_entries(const Tensor& x, std::span<const int64_t> rows,
                      std::span<const int64_t> cols);

Tensor softmax(const Tensor& x);
Tensor log_softmax(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor gelu(const Tensor& x);
Tensor clamp(const Tensor& x, double lo, double hi);

/// Per-row normalization over the last axis: gain * (x-mean)/sqrt(var+eps) + bias.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = 1e-5);

/// y = x except y[i] = value where mask[i] != 0. Gradient is zero through
/// masked entries.
Tensor masked_fill(const Tensor& x, std::span<const uint8_t> mask, double value);

Tensor slice(const Tensor& x, int64_t axis, int64_t start, int64_t end);
Tensor concat(std::span<const Tensor> parts, int64_t axis);

Tensor sum(const Tensor& x);   // scalar
Tensor mean(const Tensor& x);  // scalar

}  // namespace director
