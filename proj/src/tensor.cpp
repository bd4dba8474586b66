#include "director/tensor.hpp"

#include <atomic>
#include <cmath>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace director {

namespace {

thread_local Tape* g_active_tape = nullptr;
std::atomic<uint64_t> g_next_tape_id{1};

[[noreturn]] void fail(const std::string& msg) {
  throw std::invalid_argument(msg);
}

int64_t checked_numel(const std::vector<int64_t>& shape) {
  if (shape.empty() || shape.size() > 2) {
    fail("tensor rank must be 1 or 2, got " + shape_str(shape));
  }
  int64_t n = 1;
  for (int64_t d : shape) {
    if (d <= 0) fail("tensor dimensions must be positive, got " + shape_str(shape));
    n *= d;
  }
  return n;
}

// plain C = A(m x k) * B(k x n), accumulating into zeroed C
void raw_matmul(const double* a, int64_t m, int64_t k, const double* b,
                int64_t n, double* c) {
  for (int64_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    const double* ai = a + i * k;
    for (int64_t p = 0; p < k; ++p) {
      const double av = ai[p];
      if (av == 0.0) continue;
      const double* bp = b + p * n;
      for (int64_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

std::vector<double> raw_transpose(const double* x, int64_t m, int64_t n) {
  std::vector<double> t(static_cast<size_t>(m * n));
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) t[j * m + i] = x[i * n + j];
  return t;
}

double stable_sigmoid(double x) {
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

std::string shape_str(std::span<const int64_t> shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << " x ";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

// ---- Tensor ----------------------------------------------------------------

Tensor::Tensor(std::vector<int64_t> shape, std::vector<double> values,
               bool requires_grad) {
  const int64_t n = checked_numel(shape);
  if (n != static_cast<int64_t>(values.size())) {
    fail("tensor value count " + std::to_string(values.size()) +
         " does not match shape " + shape_str(shape));
  }
  data_ = std::make_shared<Data>();
  data_->shape = std::move(shape);
  data_->values = std::move(values);
  data_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(std::vector<int64_t> shape, bool requires_grad) {
  const int64_t n = checked_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(static_cast<size_t>(n), 0.0),
                requires_grad);
}

Tensor Tensor::full(std::vector<int64_t> shape, double value, bool requires_grad) {
  const int64_t n = checked_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(static_cast<size_t>(n), value),
                requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor({1}, {value}, requires_grad);
}

const std::vector<int64_t>& Tensor::shape() const { return data_->shape; }
int64_t Tensor::rank() const { return static_cast<int64_t>(data_->shape.size()); }

int64_t Tensor::dim(int64_t i) const {
  if (i < 0 || i >= rank()) fail("dim index out of range");
  return data_->shape[static_cast<size_t>(i)];
}

int64_t Tensor::numel() const {
  return static_cast<int64_t>(data_->values.size());
}

int64_t Tensor::rows() const {
  if (rank() != 2) fail("rows(): tensor is not rank-2, shape " + shape_str(shape()));
  return data_->shape[0];
}

int64_t Tensor::cols() const {
  if (rank() != 2) fail("cols(): tensor is not rank-2, shape " + shape_str(shape()));
  return data_->shape[1];
}

std::span<const double> Tensor::values() const { return data_->values; }
std::span<double> Tensor::values_mut() { return data_->values; }

double Tensor::at(int64_t flat_index) const {
  if (flat_index < 0 || flat_index >= numel()) fail("flat index out of range");
  return data_->values[static_cast<size_t>(flat_index)];
}

double Tensor::at(int64_t row, int64_t col) const {
  if (rank() != 2) fail("at(r,c): tensor is not rank-2");
  if (row < 0 || row >= rows() || col < 0 || col >= cols())
    fail("index (" + std::to_string(row) + "," + std::to_string(col) +
         ") out of range for " + shape_str(shape()));
  return data_->values[static_cast<size_t>(row * cols() + col)];
}

double Tensor::item() const {
  if (numel() != 1) fail("item(): tensor is not scalar, shape " + shape_str(shape()));
  return data_->values[0];
}

bool Tensor::requires_grad() const { return data_->requires_grad; }

void Tensor::set_requires_grad(bool flag) {
  if (data_->tape_id != 0)
    fail("set_requires_grad: tensor is an op output, not a leaf");
  data_->requires_grad = flag;
}

bool Tensor::has_grad() const { return defined() && !data_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  if (!has_grad()) fail("grad(): gradient buffer not populated");
  return data_->grad;
}

std::span<double> Tensor::grad_mut() {
  if (!has_grad()) fail("grad_mut(): gradient buffer not populated");
  return data_->grad;
}

void Tensor::ensure_grad() {
  if (data_->grad.empty()) data_->grad.assign(data_->values.size(), 0.0);
}

void Tensor::zero_grad() {
  if (!data_->grad.empty()) data_->grad.assign(data_->values.size(), 0.0);
}

uint64_t Tensor::tape_id() const { return data_->tape_id; }

// ---- Tape ------------------------------------------------------------------

Tape::Tape() : id_(g_next_tape_id.fetch_add(1)) {
  if (g_active_tape != nullptr) {
    throw std::logic_error("Tape: another tape is already active on this thread");
  }
  g_active_tape = this;
}

Tape::~Tape() {
  if (g_active_tape == this) g_active_tape = nullptr;
}

Tape* Tape::active() noexcept { return g_active_tape; }

void Tape::record(std::function<void()> backward_fn) {
  nodes_.push_back(std::move(backward_fn));
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined()) throw std::invalid_argument("backward: undefined loss");
  if (loss.numel() != 1) {
    throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                shape_str(loss.shape()));
  }
  if (consumed_) {
    throw std::logic_error("backward: tape already consumed; build a new tape");
  }
  consumed_ = true;
  Tensor seed = loss;
  seed.ensure_grad();
  seed.grad_mut()[0] = 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
}

// ---- op recording machinery -------------------------------------------------

struct OpWriter {
  bool recording = false;

  explicit OpWriter(std::initializer_list<const Tensor*> inputs)
      : OpWriter(std::vector<const Tensor*>(inputs)) {}

  explicit OpWriter(const std::vector<const Tensor*>& inputs) {
    Tape* tape = Tape::active();
    for (const Tensor* t : inputs) {
      if (!t->defined()) fail("op input tensor is undefined");
      if (t->data_->tape_id != 0 &&
          (tape == nullptr || t->data_->tape_id != tape->id())) {
        throw std::logic_error(
            "op input was produced on a different (or expired) tape");
      }
      if (t->requires_grad()) recording = true;
    }
    if (tape == nullptr) recording = false;
    if (recording) {
      for (const Tensor* t : inputs) {
        if (t->requires_grad()) const_cast<Tensor*>(t)->ensure_grad();
      }
    }
  }

  Tensor output(std::vector<int64_t> shape, std::vector<double> values) const {
    Tensor out(std::move(shape), std::move(values));
    if (recording) {
      out.data_->requires_grad = true;
      out.data_->tape_id = Tape::active()->id();
      out.ensure_grad();
    }
    return out;
  }

  void rule(std::function<void()> fn) const {
    if (recording) Tape::active()->record(std::move(fn));
  }
};

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    fail(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
         shape_str(b.shape()));
  }
}

void accumulate(Tensor& t, std::span<const double> g) {
  auto dst = t.grad_mut();
  for (size_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
}

}  // namespace

// ---- arithmetic ------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  OpWriter w({&a, &b});
  std::vector<double> out(a.values().begin(), a.values().end());
  for (size_t i = 0; i < out.size(); ++i) out[i] += b.at(static_cast<int64_t>(i));
  Tensor y = w.output(a.shape(), std::move(out));
  w.rule([a = a, b = b, y]() mutable {
    if (a.requires_grad()) accumulate(a, y.grad());
    if (b.requires_grad()) accumulate(b, y.grad());
  });
  return y;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  OpWriter w({&a, &b});
  std::vector<double> out(a.values().begin(), a.values().end());
  auto bv = b.values();
  for (size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  Tensor y = w.output(a.shape(), std::move(out));
  w.rule([a = a, b = b, y]() mutable {
    auto g = y.grad();
    if (a.requires_grad()) accumulate(a, g);
    if (b.requires_grad()) {
      auto dst = b.grad_mut();
      for (size_t i = 0; i < dst.size(); ++i) dst[i] -= g[i];
    }
  });
  return y;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  OpWriter w({&a, &b});
  auto av = a.values();
  auto bv = b.values();
  std::vector<double> out(av.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  Tensor y = w.output(a.shape(), std::move(out));
  w.rule([a = a, b = b, y]() mutable {
    auto g = y.grad();
    if (a.requires_grad()) {
      auto dst = a.grad_mut();
      auto bv2 = b.values();
      for (size_t i = 0; i < dst.size(); ++i) dst[i] += g[i] * bv2[i];
    }
    if (b.requires_grad()) {
      auto dst = b.grad_mut();
      auto av2 = a.values();
      for (size_t i = 0; i < dst.size(); ++i) dst[i] += g[i] * av2[i];
    }
  });
  return y;
}

Tensor scale(const Tensor& x, double c) {
  OpWriter w({&x});
  auto xv = x.values();
  std::vector<double> out(xv.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * c;
  Tensor y = w.output(x.shape(), std::move(out));
  w.rule([x = x, y, c]() mutable {
    if (!x.requires_grad()) return;
    auto g = y.grad();
    auto dst = x.grad_mut();
    for (size_t i = 0; i < dst.size(); ++i) dst[i] += g[i] * c;
  });
  return y;
}

Tensor add_scalar(const Tensor& x, double c) {
  OpWriter w({&x});
  auto xv = x.values();
  std::vector<double> out(xv.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = xv[i] + c;
  Tensor y = w.output(x.shape(), std::move(out));
  w.rule([x = x, y]() mutable {
    if (x.requires_grad()) accumulate(x, y.grad());
  });
  return y;
}

Tensor neg(const Tensor& x) { return scale(x, -1.0); }

// ---- linear algebra ----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2) {
    fail("matmul: operands must be rank-2, got " + shape_str(a.shape()) +
         " and " + shape_str(b.shape()));
  }
  if (a.cols() != b.rows()) {
    fail("matmul: inner dimensions differ: " + shape_str(a.shape()) + " vs " +
         shape_str(b.shape()));
  }
  OpWriter w({&a, &b});
  const int64_t m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<double> out(static_cast<size_t>(m * n), 0.0);
  raw_matmul(a.values().data(), m, k, b.values().data(), n, out.data());
  Tensor y = w.output({m, n}, std::move(out));
  w.rule([a = a, b = b, y, m, k, n]() mutable {
    auto g = y.grad();
    if (a.requires_grad()) {
      // dA = dY * B^T
      auto bt = raw_transpose(b.values().data(), k, n);
      std::vector<double> da(static_cast<size_t>(m * k), 0.0);
      raw_matmul(g.data(), m, n, bt.data(), k, da.data());
      accumulate(a, da);
    }
    if (b.requires_grad()) {
      // dB = A^T * dY
      auto at = raw_transpose(a.values().data(), m, k);
      std::vector<double> db(static_cast<size_t>(k * n), 0.0);
      raw_matmul(at.data(), k, m, g.data(), n, db.data());
      accumulate(b, db);
    }
  });
  return y;
}

Tensor transpose(const Tensor& x) {
  if (x.rank() != 2) fail("transpose: tensor must be rank-2, got " + shape_str(x.shape()));
  OpWriter w({&x});
  const int64_t m = x.rows(), n = x.cols();
  Tensor y = w.output({n, m}, raw_transpose(x.values().data(), m, n));
  w.rule([x = x, y, m, n]() mutable {
    if (!x.requires_grad()) return;
    auto gt = raw_transpose(y.grad().data(), n, m);
    accumulate(x, gt);
  });
  return y;
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  if (x.rank() != 2 || bias.rank() != 1 || bias.dim(0) != x.cols()) {
    fail("add_bias: need [m x n] + [n], got " + shape_str(x.shape()) + " and " +
         shape_str(bias.shape()));
  }
  OpWriter w({&x, &bias});
  const int64_t m = x.rows(), n = x.cols();
  auto xv = x.values();
  auto bv = bias.values();
  std::vector<double> out(xv.size());
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j)
      out[static_cast<size_t>(i * n + j)] = xv[static_cast<size_t>(i * n + j)] + bv[static_cast<size_t>(j)];
  Tensor y = w.output({m, n}, std::move(out));
  w.rule([x = x, bias = bias, y, m, n]() mutable {
    auto g = y.grad();
    if (x.requires_grad()) accumulate(x, g);
    if (bias.requires_grad()) {
      auto dst = bias.grad_mut();
      for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) dst[static_cast<size_t>(j)] += g[static_cast<size_t>(i * n + j)];
    }
  });
  return y;
}

// ---- gathers ---------------------------------------------------------------

Tensor gather_rows(const Tensor& table, std::span<const int> ids) {
  if (table.rank() != 2) fail("gather_rows: table must be rank-2");
  if (ids.empty()) fail("gather_rows: empty id list");
  const int64_t v = table.rows(), d = table.cols();
  for (int id : ids) {
    if (id < 0 || id >= v)
      fail("gather_rows: row id " + std::to_string(id) + " out of range [0, " +
           std::to_string(v) + ")");
  }
  OpWriter w({&table});
  const int64_t n = static_cast<int64_t>(ids.size());
  std::vector<double> out(static_cast<size_t>(n * d));
  auto tv = table.values();
  for (int64_t i = 0; i < n; ++i) {
    const double* src = tv.data() + static_cast<int64_t>(ids[static_cast<size_t>(i)]) * d;
    std::copy(src, src + d, out.data() + i * d);
  }
  Tensor y = w.output({n, d}, std::move(out));
  std::vector<int> ids_copy(ids.begin(), ids.end());
  w.rule([table = table, y, ids_copy, d]() mutable {
    if (!table.requires_grad()) return;
    auto g = y.grad();
    auto dst = table.grad_mut();
    for (size_t i = 0; i < ids_copy.size(); ++i) {
      double* row = dst.data() + static_cast<int64_t>(ids_copy[i]) * d;
      const double* gr = g.data() + static_cast<int64_t>(i) * d;
      for (int64_t j = 0; j < d; ++j) row[j] += gr[j];
    }
  });
  return y;
}

Tensor gather_entries(const Tensor& x, std::span<const int64_t> rows,
                      std::span<const int64_t> cols) {
  if (x.rank() != 2) fail("gather_entries: tensor must be rank-2");
  if (rows.size() != cols.size() || rows.empty())
    fail("gather_entries: row/col index lists must be equal-length and non-empty");
  const int64_t m = x.rows(), n = x.cols();
  for (size_t k = 0; k < rows.size(); ++k) {
    if (rows[k] < 0 || rows[k] >= m || cols[k] < 0 || cols[k] >= n)
      fail("gather_entries: index (" + std::to_string(rows[k]) + "," +
           std::to_string(cols[k]) + ") out of range for " + shape_str(x.shape()));
  }
  OpWriter w({&x});
  std::vector<double> out(rows.size());
  auto xv = x.values();
  for (size_t k = 0; k < rows.size(); ++k)
    out[k] = xv[static_cast<size_t>(rows[k] * n + cols[k])];
  Tensor y = w.output({static_cast<int64_t>(rows.size())}, std::move(out));
  std::vector<int64_t> rc(rows.begin(), rows.end());
  std::vector<int64_t> cc(cols.begin(), cols.end());
  w.rule([x = x, y, rc, cc, n]() mutable {
    if (!x.requires_grad()) return;
    auto g = y.grad();
    auto dst = x.grad_mut();
    for (size_t k = 0; k < rc.size(); ++k)
      dst[static_cast<size_t>(rc[k] * n + cc[k])] += g[k];
  });
  return y;
}

// ---- row-wise nonlinearities -------------------------------------------------

namespace {

// rows/width view of a rank-1 or rank-2 tensor, reducing over the last axis
void last_axis(const Tensor& x, int64_t& nrows, int64_t& width, const char* op) {
  if (x.rank() == 1) {
    nrows = 1;
    width = x.dim(0);
  } else {
    nrows = x.dim(0);
    width = x.dim(1);
  }
  if (width <= 0) fail(std::string(op) + ": reduction axis has size 0");
}

}  // namespace

Tensor softmax(const Tensor& x) {
  int64_t nrows = 0, width = 0;
  last_axis(x, nrows, width, "softmax");
  OpWriter w({&x});
  auto xv = x.values();
  std::vector<double> out(xv.size());
  for (int64_t r = 0; r < nrows; ++r) {
    const double* in = xv.data() + r * width;
    double* o = out.data() + r * width;
    double mx = in[0];
    for (int64_t j = 1; j < width; ++j) mx = std::max(mx, in[j]);
    double total = 0.0;
    for (int64_t j = 0; j < width; ++j) {
      o[j] = std::exp(in[j] - mx);
      total += o[j];
    }
    for (int64_t j = 0; j < width; ++j) o[j] /= total;
  }
  Tensor y = w.output(x.shape(), std::move(out));
  w.rule([x = x, y, nrows, width]() mutable {
    if (!x.requires_grad()) return;
    auto g = y.grad();
    auto yv = y.values();
    auto dst = x.grad_mut();
    for (int64_t r = 0; r < nrows; ++r) {
      const double* gr = g.data() + r * width;
      const double* yr = yv.data() + r * width;
      double dot = 0.0;
      for (int64_t j = 0; j < width; ++j) dot += gr[j] * yr[j];
      double* d = dst.data() + r * width;
      for (int64_t j = 0; j < width; ++j) d[j] += yr[j] * (gr[j] - dot);
    }
  });
  return y;
}

Tensor log_softmax(const Tensor& x) {
  int64_t nrows = 0, width = 0;
  last_axis(x, nrows, width, "log_softmax");
  OpWriter w({&x});
  auto xv = x.values();
  std::vector<double> out(xv.size());
  for (int64_t r = 0; r < nrows; ++r) {
    const double* in = xv.data() + r * width;
    double* o = out.data() + r * width;
    double mx = in[0];
    for (int64_t j = 1; j < width; ++j) mx = std::max(mx, in[j]);
    double total = 0.0;
    for (int64_t j = 0; j < width; ++j) total += std::exp(in[j] - mx);
    const double lse = mx + std::log(total);
    for (int64_t j = 0; j < width; ++j) o[j] = in[j] - lse;
  }
  Tensor y = w.output(x.shape(), std::move(out));
  w.rule([x = x, y, nrows, width]() mutable {
    if (!x.requires_grad()) return;
    auto g = y.grad();
    auto yv = y.values();
    auto dst = x.grad_mut();
    for (int64_t r = 0; r < nrows; ++r) {
      const double* gr = g.data() + r * width;
      const double* yr = yv.data() + r * width;
      double s = 0.0;
      for (int64_t j = 0; j < width; ++j) s += gr[j];
      double* d = dst.data() + r * width;
      for (int64_t j = 0; j < width; ++j) d[j] += gr[j] - std::exp(yr[j]) * s;
    }
  });
  return y;
}

Tensor sigmoid(const Tensor& x) {
  OpWriter w({&x});
  auto xv = x.values();
  std::vector<double> out(xv.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = stable_sigmoid(xv[i]);
  Tensor y = w.output(x.shape(), std::move(out));
  w.rule([x = x, y]() mutable {
    if (!x.requires_grad()) return;
    auto g = y.grad();
    auto yv = y.values();
    auto dst = x.grad_mut();
    for (size_t i = 0; i < dst.size(); ++i) dst[i] += g[i] * yv[i] * (1.0 - yv[i]);
  });
  return y;
}

Tensor exp(const Tensor& x) {
  OpWriter w({&x});
  auto xv = x.values();
  std::vector<double> out(xv.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = std::exp(xv[i]);
  Tensor y = w.output(x.shape(), std::move(out));
  w.rule([x = x, y]() mutable {
    if (!x.requires_grad()) return;
    auto g = y.grad();
    auto yv = y.values();
    auto dst = x.grad_mut();
    for (size_t i = 0; i < dst.size(); ++i) dst[i] += g[i] * yv[i];
  });
  return y;
}

Tensor log(const Tensor& x) {
  OpWriter w({&x});
  auto xv = x.values();
  std::vector<double> out(xv.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = std::log(xv[i]);
  Tensor y = w.output(x.shape(), std::move(out));
  w.rule([x = x, y]() mutable {
    if (!x.requires_grad()) return;
    auto g = y.grad();
    auto xv2 = x.values();
    auto dst = x.grad_mut();
    for (size_t i = 0; i < dst.size(); ++i) dst[i] += g[i] / xv2[i];
  });
  return y;
}

Tensor gelu(const Tensor& x) {
  OpWriter w({&x});
  auto xv = x.values();
  std::vector<double> out(xv.size());
  constexpr double inv_sqrt2 = 0.7071067811865475244;
  for (size_t i = 0; i < out.size(); ++i) {
    out[i] = 0.5 * xv[i] * (1.0 + std::erf(xv[i] * inv_sqrt2));
  }
  Tensor y = w.output(x.shape(), std::move(out));
  w.rule([x = x, y]() mutable {
    if (!x.requires_grad()) return;
    constexpr double c = 0.7071067811865475244;
    const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
    auto g = y.grad();
    auto xv2 = x.values();
    auto dst = x.grad_mut();
    for (size_t i = 0; i < dst.size(); ++i) {
      const double v = xv2[i];
      const double cdf = 0.5 * (1.0 + std::erf(v * c));
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
      dst[i] += g[i] * (cdf + v * pdf);
    }
  });
  return y;
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  if (lo > hi) fail("clamp: lo > hi");
  OpWriter w({&x});
  auto xv = x.values();
  std::vector<double> out(xv.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = std::min(std::max(xv[i], lo), hi);
  Tensor y = w.output(x.shape(), std::move(out));
  w.rule([x = x, y, lo, hi]() mutable {
    if (!x.requires_grad()) return;
    auto g = y.grad();
    auto xv2 = x.values();
    auto dst = x.grad_mut();
    for (size_t i = 0; i < dst.size(); ++i) {
      if (xv2[i] > lo && xv2[i] < hi) dst[i] += g[i];
    }
  });
  return y;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps) {
  int64_t nrows = 0, width = 0;
  last_axis(x, nrows, width, "layer_norm");
  if (gain.rank() != 1 || gain.dim(0) != width || bias.rank() != 1 ||
      bias.dim(0) != width) {
    fail("layer_norm: gain/bias must be rank-1 of size " + std::to_string(width) +
         ", got " + shape_str(gain.shape()) + " and " + shape_str(bias.shape()));
  }
  OpWriter w({&x, &gain, &bias});
  auto xv = x.values();
  auto gv = gain.values();
  auto bv = bias.values();
  std::vector<double> out(xv.size());
  std::vector<double> xhat(xv.size());
  std::vector<double> inv_sigma(static_cast<size_t>(nrows));
  for (int64_t r = 0; r < nrows; ++r) {
    const double* in = xv.data() + r * width;
    double mu = 0.0;
    for (int64_t j = 0; j < width; ++j) mu += in[j];
    mu /= static_cast<double>(width);
    double var = 0.0;
    for (int64_t j = 0; j < width; ++j) {
      const double d = in[j] - mu;
      var += d * d;
    }
    var /= static_cast<double>(width);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_sigma[static_cast<size_t>(r)] = is;
    for (int64_t j = 0; j < width; ++j) {
      const double xh = (in[j] - mu) * is;
      xhat[static_cast<size_t>(r * width + j)] = xh;
      out[static_cast<size_t>(r * width + j)] = gv[static_cast<size_t>(j)] * xh + bv[static_cast<size_t>(j)];
    }
  }
  Tensor y = w.output(x.shape(), std::move(out));
  w.rule([x = x, gain = gain, bias = bias, y, xhat, inv_sigma, nrows, width]() mutable {
    auto g = y.grad();
    const double n = static_cast<double>(width);
    if (x.requires_grad()) {
      auto gv2 = gain.values();
      auto dst = x.grad_mut();
      for (int64_t r = 0; r < nrows; ++r) {
        const double* gr = g.data() + r * width;
        const double* xh = xhat.data() + r * width;
        double m1 = 0.0, m2 = 0.0;
        for (int64_t j = 0; j < width; ++j) {
          const double dyh = gr[j] * gv2[static_cast<size_t>(j)];
          m1 += dyh;
          m2 += dyh * xh[j];
        }
        m1 /= n;
        m2 /= n;
        const double is = inv_sigma[static_cast<size_t>(r)];
        double* d = dst.data() + r * width;
        for (int64_t j = 0; j < width; ++j) {
          const double dyh = gr[j] * gv2[static_cast<size_t>(j)];
          d[j] += (dyh - m1 - xh[j] * m2) * is;
        }
      }
    }
    if (gain.requires_grad()) {
      auto dst = gain.grad_mut();
      for (int64_t r = 0; r < nrows; ++r)
        for (int64_t j = 0; j < width; ++j)
          dst[static_cast<size_t>(j)] += g[static_cast<size_t>(r * width + j)] *
                                         xhat[static_cast<size_t>(r * width + j)];
    }
    if (bias.requires_grad()) {
      auto dst = bias.grad_mut();
      for (int64_t r = 0; r < nrows; ++r)
        for (int64_t j = 0; j < width; ++j)
          dst[static_cast<size_t>(j)] += g[static_cast<size_t>(r * width + j)];
    }
  });
  return y;
}

Tensor masked_fill(const Tensor& x, std::span<const uint8_t> mask, double value) {
  if (static_cast<int64_t>(mask.size()) != x.numel()) {
    fail("masked_fill: mask size " + std::to_string(mask.size()) +
         " does not match tensor " + shape_str(x.shape()));
  }
  OpWriter w({&x});
  auto xv = x.values();
  std::vector<double> out(xv.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = mask[i] ? value : xv[i];
  Tensor y = w.output(x.shape(), std::move(out));
  std::vector<uint8_t> mask_copy(mask.begin(), mask.end());
  w.rule([x = x, y, mask_copy]() mutable {
    if (!x.requires_grad()) return;
    auto g = y.grad();
    auto dst = x.grad_mut();
    for (size_t i = 0; i < dst.size(); ++i) {
      if (!mask_copy[i]) dst[i] += g[i];
    }
  });
  return y;
}

// ---- slicing / concatenation -------------------------------------------------

Tensor slice(const Tensor& x, int64_t axis, int64_t start, int64_t end) {
  if (axis < 0 || axis >= x.rank()) fail("slice: axis out of range");
  const int64_t len = x.dim(axis);
  if (start < 0 || end > len || start >= end) {
    fail("slice: range [" + std::to_string(start) + ", " + std::to_string(end) +
         ") invalid for axis of size " + std::to_string(len));
  }
  OpWriter w({&x});
  auto xv = x.values();
  std::vector<int64_t> out_shape = x.shape();
  out_shape[static_cast<size_t>(axis)] = end - start;
  std::vector<double> out;
  if (x.rank() == 1 || axis == 0) {
    const int64_t width = (x.rank() == 2) ? x.cols() : 1;
    out.assign(xv.begin() + start * width, xv.begin() + end * width);
  } else {
    const int64_t m = x.rows(), n = x.cols(), k = end - start;
    out.resize(static_cast<size_t>(m * k));
    for (int64_t i = 0; i < m; ++i)
      std::copy(xv.data() + i * n + start, xv.data() + i * n + end,
                out.data() + i * k);
  }
  Tensor y = w.output(std::move(out_shape), std::move(out));
  w.rule([x = x, y, axis, start]() mutable {
    if (!x.requires_grad()) return;
    auto g = y.grad();
    auto dst = x.grad_mut();
    if (x.rank() == 1 || axis == 0) {
      const int64_t width = (x.rank() == 2) ? x.cols() : 1;
      for (size_t i = 0; i < g.size(); ++i)
        dst[static_cast<size_t>(start * width) + i] += g[i];
    } else {
      const int64_t m = x.rows(), n = x.cols(), k = y.cols();
      for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < k; ++j)
          dst[static_cast<size_t>(i * n + start + j)] += g[static_cast<size_t>(i * k + j)];
    }
  });
  return y;
}

Tensor concat(std::span<const Tensor> parts, int64_t axis) {
  if (parts.empty()) fail("concat: no tensors given");
  const int64_t r = parts[0].rank();
  if (axis < 0 || axis >= r) fail("concat: axis out of range");
  for (const Tensor& p : parts) {
    if (p.rank() != r) fail("concat: mixed ranks");
    for (int64_t d = 0; d < r; ++d) {
      if (d != axis && p.dim(d) != parts[0].dim(d))
        fail("concat: shape mismatch " + shape_str(parts[0].shape()) + " vs " +
             shape_str(p.shape()));
    }
  }
  std::vector<const Tensor*> ptrs;
  for (const Tensor& p : parts) ptrs.push_back(&p);
  OpWriter w(ptrs);

  std::vector<int64_t> out_shape = parts[0].shape();
  int64_t total = 0;
  for (const Tensor& p : parts) total += p.dim(axis);
  out_shape[static_cast<size_t>(axis)] = total;

  std::vector<double> out;
  if (r == 1 || axis == 0) {
    for (const Tensor& p : parts)
      out.insert(out.end(), p.values().begin(), p.values().end());
  } else {
    const int64_t m = parts[0].rows();
    out.resize(static_cast<size_t>(m * total));
    int64_t col0 = 0;
    for (const Tensor& p : parts) {
      const int64_t k = p.cols();
      auto pv = p.values();
      for (int64_t i = 0; i < m; ++i)
        std::copy(pv.data() + i * k, pv.data() + (i + 1) * k,
                  out.data() + i * total + col0);
      col0 += k;
    }
  }
  Tensor y = w.output(std::move(out_shape), std::move(out));
  std::vector<Tensor> owned(parts.begin(), parts.end());
  w.rule([owned, y, axis, r]() mutable {
    auto g = y.grad();
    if (r == 1 || axis == 0) {
      size_t off = 0;
      for (Tensor& p : owned) {
        const size_t n = static_cast<size_t>(p.numel());
        if (p.requires_grad()) {
          auto dst = p.grad_mut();
          for (size_t i = 0; i < n; ++i) dst[i] += g[off + i];
        }
        off += n;
      }
    } else {
      const int64_t m = owned[0].rows();
      const int64_t total = y.cols();
      int64_t col0 = 0;
      for (Tensor& p : owned) {
        const int64_t k = p.cols();
        if (p.requires_grad()) {
          auto dst = p.grad_mut();
          for (int64_t i = 0; i < m; ++i)
            for (int64_t j = 0; j < k; ++j)
              dst[static_cast<size_t>(i * k + j)] += g[static_cast<size_t>(i * total + col0 + j)];
        }
        col0 += k;
      }
    }
  });
  return y;
}

// ---- reductions ----------------------------------------------------------------

Tensor sum(const Tensor& x) {
  OpWriter w({&x});
  double total = 0.0;
  for (double v : x.values()) total += v;
  Tensor y = w.output({1}, {total});
  w.rule([x = x, y]() mutable {
    if (!x.requires_grad()) return;
    const double g = y.grad()[0];
    auto dst = x.grad_mut();
    for (double& d : dst) d += g;
  });
  return y;
}

Tensor mean(const Tensor& x) {
  OpWriter w({&x});
  double total = 0.0;
  for (double v : x.values()) total += v;
  const double inv = 1.0 / static_cast<double>(x.numel());
  Tensor y = w.output({1}, {total * inv});
  w.rule([x = x, y, inv]() mutable {
    if (!x.requires_grad()) return;
    const double g = y.grad()[0] * inv;
    auto dst = x.grad_mut();
    for (double& d : dst) d += g;
  });
  return y;
}

}  // namespace director
