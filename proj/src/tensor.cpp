#include "cseek/tensor.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

namespace cseek {

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return std::string(buf);
}

namespace {

std::size_t shape_numel(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw ShapeError("tensor dimension must be positive");
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

std::string shape_str(const std::vector<int>& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << "]";
  return os.str();
}

thread_local std::vector<Tape*> g_tape_stack;

// Row-major gemm: C = alpha*op(A)*op(B) + beta*C. Stored column counts are
// derived from the op shapes. Small products skip the BLAS dispatch.
void gemm(bool trans_a, bool trans_b, int m, int n, int k, float alpha, const float* a,
          const float* b, float beta, float* c) {
  const std::size_t work = static_cast<std::size_t>(m) * n * k;
  if (work <= 16384) {
    const int sa = trans_a ? m : k;  // stored columns of A
    const int sb = trans_b ? k : n;
    for (int i = 0; i < m; ++i) {
      for (int j = 0; j < n; ++j) {
        float acc = 0.0f;
        for (int p = 0; p < k; ++p) {
          const float av = trans_a ? a[p * sa + i] : a[i * sa + p];
          const float bv = trans_b ? b[j * sb + p] : b[p * sb + j];
          acc += av * bv;
        }
        c[i * n + j] = alpha * acc + beta * c[i * n + j];
      }
    }
    return;
  }
  cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, trans_a ? m : k, b,
              trans_b ? k : n, beta, c, n);
}

// Returns the active tape when any input participates in differentiation.
Tape* tape_for(std::initializer_list<const Tensor*> inputs) {
  Tape* t = Tape::active();
  if (!t) return nullptr;
  for (const Tensor* p : inputs) {
    if (p->defined() && p->requires_grad()) return t;
  }
  return nullptr;
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

int last_dim(const Tensor& x) {
  if (x.shape().empty()) throw ShapeError("op requires at least one dimension");
  return x.shape().back();
}

}  // namespace

// ---- Tensor ----------------------------------------------------------

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
  Tensor t;
  t.impl_ = std::make_shared<Impl>();
  const std::size_t n = shape_numel(shape);
  t.impl_->shape = std::move(shape);
  t.impl_->data.assign(n, 0.0f);
  if (requires_grad) t.enable_grad();
  return t;
}

Tensor Tensor::full(std::vector<int> shape, float value, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  std::fill(t.impl_->data.begin(), t.impl_->data.end(), value);
  return t;
}

Tensor Tensor::from_data(std::vector<int> shape, std::vector<float> data, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  if (n != data.size()) {
    throw ShapeError("from_data: data length " + std::to_string(data.size()) +
                     " does not match shape " + shape_str(shape));
  }
  Tensor t;
  t.impl_ = std::make_shared<Impl>();
  t.impl_->shape = std::move(shape);
  t.impl_->data = std::move(data);
  if (requires_grad) t.enable_grad();
  return t;
}

Tensor Tensor::scalar(float value, bool requires_grad) {
  return from_data({1}, {value}, requires_grad);
}

const std::vector<int>& Tensor::shape() const {
  if (!impl_) throw ContractError("tensor is undefined");
  return impl_->shape;
}

int Tensor::dim(int i) const { return shape().at(static_cast<std::size_t>(i)); }

std::size_t Tensor::numel() const {
  if (!impl_) throw ContractError("tensor is undefined");
  return impl_->data.size();
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

const std::vector<float>& Tensor::data() const {
  if (!impl_) throw ContractError("tensor is undefined");
  return impl_->data;
}

std::vector<float>& Tensor::mutable_data() {
  if (!impl_) throw ContractError("tensor is undefined");
  return impl_->data;
}

const std::vector<float>& Tensor::grad() const {
  if (!requires_grad()) throw ContractError("tensor has no gradient buffer");
  return impl_->grad;
}

std::vector<float>& Tensor::mutable_grad() const {
  if (!requires_grad()) throw ContractError("tensor has no gradient buffer");
  return impl_->grad;
}

float Tensor::item() const {
  if (numel() != 1) throw ShapeError("item: tensor is not scalar, shape " + shape_str(shape()));
  return impl_->data[0];
}

float Tensor::at(int row, int col) const {
  if (shape().size() != 2) throw ShapeError("at: tensor is not 2-d");
  if (row < 0 || row >= dim(0) || col < 0 || col >= dim(1)) {
    throw IndexError("at: index out of range");
  }
  return impl_->data[static_cast<std::size_t>(row) * dim(1) + col];
}

void Tensor::zero_grad() const {
  if (requires_grad()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0f);
}

void Tensor::enable_grad() {
  if (!impl_) throw ContractError("tensor is undefined");
  impl_->requires_grad = true;
  if (impl_->grad.size() != impl_->data.size()) impl_->grad.assign(impl_->data.size(), 0.0f);
}

void Tensor::disable_grad() {
  if (!impl_) throw ContractError("tensor is undefined");
  impl_->requires_grad = false;
  impl_->grad.clear();
  impl_->grad.shrink_to_fit();
}

// ---- Tape ------------------------------------------------------------

Tape::Tape() { g_tape_stack.push_back(this); }

Tape::~Tape() {
  if (!g_tape_stack.empty() && g_tape_stack.back() == this) g_tape_stack.pop_back();
}

Tape* Tape::active() { return g_tape_stack.empty() ? nullptr : g_tape_stack.back(); }

void Tape::record(std::function<void()> fn) { nodes_.push_back(std::move(fn)); }

void Tape::backward(const Tensor& loss) {
  if (consumed_) throw ContractError("backward: tape already consumed; build a new tape");
  if (loss.numel() != 1) throw ContractError("backward: loss must be a scalar tensor");
  if (!loss.requires_grad()) {
    throw ContractError("backward: loss is not reachable from grad-enabled tensors");
  }
  Tensor l = loss;
  l.mutable_grad()[0] += 1.0f;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  nodes_.clear();
  consumed_ = true;
}

// ---- elementwise -----------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  Tensor out = Tensor::zeros(a.shape());
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) out.mutable_data()[i] = a.data()[i] + b.data()[i];
  if (Tape* t = tape_for({&a, &b})) {
    out.enable_grad();
    t->record([a, b, out]() mutable {
      const std::size_t m = out.numel();
      if (a.requires_grad())
        for (std::size_t i = 0; i < m; ++i) a.mutable_grad()[i] += out.grad()[i];
      if (b.requires_grad())
        for (std::size_t i = 0; i < m; ++i) b.mutable_grad()[i] += out.grad()[i];
    });
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  Tensor out = Tensor::zeros(a.shape());
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) out.mutable_data()[i] = a.data()[i] - b.data()[i];
  if (Tape* t = tape_for({&a, &b})) {
    out.enable_grad();
    t->record([a, b, out]() mutable {
      const std::size_t m = out.numel();
      if (a.requires_grad())
        for (std::size_t i = 0; i < m; ++i) a.mutable_grad()[i] += out.grad()[i];
      if (b.requires_grad())
        for (std::size_t i = 0; i < m; ++i) b.mutable_grad()[i] -= out.grad()[i];
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  Tensor out = Tensor::zeros(a.shape());
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) out.mutable_data()[i] = a.data()[i] * b.data()[i];
  if (Tape* t = tape_for({&a, &b})) {
    out.enable_grad();
    t->record([a, b, out]() mutable {
      const std::size_t m = out.numel();
      if (a.requires_grad())
        for (std::size_t i = 0; i < m; ++i) a.mutable_grad()[i] += out.grad()[i] * b.data()[i];
      if (b.requires_grad())
        for (std::size_t i = 0; i < m; ++i) b.mutable_grad()[i] += out.grad()[i] * a.data()[i];
    });
  }
  return out;
}

Tensor scale(const Tensor& a, float s) {
  Tensor out = Tensor::zeros(a.shape());
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) out.mutable_data()[i] = a.data()[i] * s;
  if (Tape* t = tape_for({&a})) {
    out.enable_grad();
    t->record([a, out, s]() mutable {
      for (std::size_t i = 0; i < out.numel(); ++i) a.mutable_grad()[i] += out.grad()[i] * s;
    });
  }
  return out;
}

Tensor add_const(const Tensor& a, float c) {
  Tensor out = Tensor::zeros(a.shape());
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) out.mutable_data()[i] = a.data()[i] + c;
  if (Tape* t = tape_for({&a})) {
    out.enable_grad();
    t->record([a, out]() mutable {
      for (std::size_t i = 0; i < out.numel(); ++i) a.mutable_grad()[i] += out.grad()[i];
    });
  }
  return out;
}

// ---- linear algebra --------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2) {
    throw ShapeError("matmul: expects 2-d tensors, got " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  if (a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: inner dimensions disagree, " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out = Tensor::zeros({m, n});
  gemm(false, false, m, n, k, 1.0f, a.data().data(), b.data().data(), 0.0f,
       out.mutable_data().data());
  if (Tape* t = tape_for({&a, &b})) {
    out.enable_grad();
    t->record([a, b, out, m, n, k]() mutable {
      if (a.requires_grad()) {
        gemm(false, true, m, k, n, 1.0f, out.grad().data(), b.data().data(), 1.0f,
             a.mutable_grad().data());
      }
      if (b.requires_grad()) {
        gemm(true, false, k, n, m, 1.0f, a.data().data(), out.grad().data(), 1.0f,
             b.mutable_grad().data());
      }
    });
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  if (a.shape().size() != 2) throw ShapeError("transpose: expects a 2-d tensor");
  const int r = a.dim(0), c = a.dim(1);
  Tensor out = Tensor::zeros({c, r});
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out.mutable_data()[j * r + i] = a.data()[i * c + j];
  if (Tape* t = tape_for({&a})) {
    out.enable_grad();
    t->record([a, out, r, c]() mutable {
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) a.mutable_grad()[i * c + j] += out.grad()[j * r + i];
    });
  }
  return out;
}

Tensor slice_cols(const Tensor& a, int offset, int len) {
  if (a.shape().size() != 2) throw ShapeError("slice_cols: expects a 2-d tensor");
  const int r = a.dim(0), c = a.dim(1);
  if (offset < 0 || len <= 0 || offset + len > c) {
    throw IndexError("slice_cols: range [" + std::to_string(offset) + ", " +
                     std::to_string(offset + len) + ") outside " + std::to_string(c) +
                     " columns");
  }
  Tensor out = Tensor::zeros({r, len});
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < len; ++j)
      out.mutable_data()[i * len + j] = a.data()[i * c + offset + j];
  if (Tape* t = tape_for({&a})) {
    out.enable_grad();
    t->record([a, out, r, c, offset, len]() mutable {
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < len; ++j)
          a.mutable_grad()[i * c + offset + j] += out.grad()[i * len + j];
    });
  }
  return out;
}

Tensor concat_rows(const Tensor& a, const Tensor& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.dim(1) != b.dim(1)) {
    throw ShapeError("concat_rows: column counts disagree, " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  const int ra = a.dim(0), rb = b.dim(0), c = a.dim(1);
  Tensor out = Tensor::zeros({ra + rb, c});
  std::copy(a.data().begin(), a.data().end(), out.mutable_data().begin());
  std::copy(b.data().begin(), b.data().end(),
            out.mutable_data().begin() + static_cast<std::ptrdiff_t>(ra) * c);
  if (Tape* t = tape_for({&a, &b})) {
    out.enable_grad();
    t->record([a, b, out, ra, rb, c]() mutable {
      if (a.requires_grad())
        for (int i = 0; i < ra * c; ++i) a.mutable_grad()[i] += out.grad()[i];
      if (b.requires_grad())
        for (int i = 0; i < rb * c; ++i) b.mutable_grad()[i] += out.grad()[ra * c + i];
    });
  }
  return out;
}

Tensor gather_rows(const Tensor& a, const std::vector<int>& rows) {
  if (a.shape().size() != 2) throw ShapeError("gather_rows: expects a 2-d tensor");
  const int r = a.dim(0), c = a.dim(1);
  for (int idx : rows) {
    if (idx < 0 || idx >= r) {
      throw IndexError("gather_rows: row " + std::to_string(idx) + " outside [0, " +
                       std::to_string(r) + ")");
    }
  }
  Tensor out = Tensor::zeros({static_cast<int>(rows.size()), c});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const float* src = a.data().data() + static_cast<std::size_t>(rows[i]) * c;
    std::copy(src, src + c, out.mutable_data().begin() + static_cast<std::ptrdiff_t>(i) * c);
  }
  if (Tape* t = tape_for({&a})) {
    out.enable_grad();
    t->record([a, out, rows, c]() mutable {
      for (std::size_t i = 0; i < rows.size(); ++i)
        for (int j = 0; j < c; ++j)
          a.mutable_grad()[static_cast<std::size_t>(rows[i]) * c + j] +=
              out.grad()[i * static_cast<std::size_t>(c) + j];
    });
  }
  return out;
}

Tensor embed(const Tensor& table, const std::vector<int>& ids) {
  const int v = table.dim(0);
  for (int id : ids) {
    if (id < 0 || id >= v) {
      throw IndexError("embed: token id " + std::to_string(id) + " outside vocabulary of " +
                       std::to_string(v));
    }
  }
  return gather_rows(table, ids);
}

// ---- nonlinearities --------------------------------------------------

Tensor softmax_lastdim(const Tensor& x) {
  const int d = last_dim(x);
  const std::size_t rows = x.numel() / static_cast<std::size_t>(d);
  Tensor out = Tensor::zeros(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const float* in = x.data().data() + r * d;
    float* o = out.mutable_data().data() + r * d;
    float mx = in[0];
    for (int j = 1; j < d; ++j) mx = std::max(mx, in[j]);
    double sum = 0.0;
    for (int j = 0; j < d; ++j) {
      o[j] = std::exp(in[j] - mx);
      sum += o[j];
    }
    const float inv = static_cast<float>(1.0 / sum);
    for (int j = 0; j < d; ++j) o[j] *= inv;
  }
  if (Tape* t = tape_for({&x})) {
    out.enable_grad();
    t->record([x, out, d, rows]() mutable {
      for (std::size_t r = 0; r < rows; ++r) {
        const float* y = out.data().data() + r * d;
        const float* dy = out.grad().data() + r * d;
        float* dx = x.mutable_grad().data() + r * d;
        double dot = 0.0;
        for (int j = 0; j < d; ++j) dot += static_cast<double>(dy[j]) * y[j];
        for (int j = 0; j < d; ++j) dx[j] += y[j] * (dy[j] - static_cast<float>(dot));
      }
    });
  }
  return out;
}

Tensor rmsnorm(const Tensor& x, const Tensor& gain, float eps) {
  if (eps <= 0.0f) throw ContractError("rmsnorm: eps must be positive");
  const int d = last_dim(x);
  if (gain.shape().size() != 1 || gain.dim(0) != d) {
    throw ShapeError("rmsnorm: gain shape " + shape_str(gain.shape()) +
                     " does not match last dimension " + std::to_string(d));
  }
  const std::size_t rows = x.numel() / static_cast<std::size_t>(d);
  Tensor out = Tensor::zeros(x.shape());
  std::vector<float> inv_rms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const float* in = x.data().data() + r * d;
    double ms = 0.0;
    for (int j = 0; j < d; ++j) ms += static_cast<double>(in[j]) * in[j];
    ms /= d;
    const float inv = static_cast<float>(1.0 / std::sqrt(ms + eps));
    inv_rms[r] = inv;
    float* o = out.mutable_data().data() + r * d;
    for (int j = 0; j < d; ++j) o[j] = in[j] * inv * gain.data()[j];
  }
  if (Tape* t = tape_for({&x, &gain})) {
    out.enable_grad();
    t->record([x, gain, out, d, rows, inv_rms]() mutable {
      for (std::size_t r = 0; r < rows; ++r) {
        const float* in = x.data().data() + r * d;
        const float* dy = out.grad().data() + r * d;
        const float inv = inv_rms[r];
        if (x.requires_grad()) {
          double s = 0.0;  // sum dy_i * g_i * x_i
          for (int j = 0; j < d; ++j)
            s += static_cast<double>(dy[j]) * gain.data()[j] * in[j];
          const float coef = static_cast<float>(s) * inv * inv * inv / d;
          float* dx = x.mutable_grad().data() + r * d;
          for (int j = 0; j < d; ++j) dx[j] += inv * gain.data()[j] * dy[j] - coef * in[j];
        }
        if (gain.requires_grad()) {
          float* dg = gain.mutable_grad().data();
          for (int j = 0; j < d; ++j) dg[j] += dy[j] * in[j] * inv;
        }
      }
    });
  }
  return out;
}

namespace {

// separate helper so the exp loop vectorizes through libmvec
__attribute__((optimize("fast-math"))) void sigmoid_fill(const float* x, float* out,
                                                         std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = 1.0f / (1.0f + std::exp(-x[i]));
}

}  // namespace

Tensor silu(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  const std::size_t n = out.numel();
  auto sig = std::make_shared<std::vector<float>>(n);
  sigmoid_fill(x.data().data(), sig->data(), n);
  for (std::size_t i = 0; i < n; ++i) out.mutable_data()[i] = x.data()[i] * (*sig)[i];
  if (Tape* t = tape_for({&x})) {
    out.enable_grad();
    t->record([x, out, sig]() mutable {
      for (std::size_t i = 0; i < out.numel(); ++i) {
        const float v = x.data()[i];
        const float s = (*sig)[i];
        x.mutable_grad()[i] += out.grad()[i] * s * (1.0f + v * (1.0f - s));
      }
    });
  }
  return out;
}

Tensor sqrt_elem(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) {
    const float v = x.data()[i];
    if (v < 0.0f) throw ContractError("sqrt_elem: negative input");
    out.mutable_data()[i] = std::sqrt(v);
  }
  if (Tape* t = tape_for({&x})) {
    out.enable_grad();
    t->record([x, out]() mutable {
      for (std::size_t i = 0; i < out.numel(); ++i) {
        const float y = out.data()[i];
        x.mutable_grad()[i] += out.grad()[i] * 0.5f / (y > 0.0f ? y : 1e-12f);
      }
    });
  }
  return out;
}

// ---- reductions and selection ----------------------------------------

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (float v : x.data()) acc += v;
  Tensor out = Tensor::scalar(static_cast<float>(acc));
  if (Tape* t = tape_for({&x})) {
    out.enable_grad();
    t->record([x, out]() mutable {
      const float g = out.grad()[0];
      for (std::size_t i = 0; i < x.numel(); ++i) x.mutable_grad()[i] += g;
    });
  }
  return out;
}

Tensor select_item(const Tensor& x, int index) {
  if (index < 0 || static_cast<std::size_t>(index) >= x.numel()) {
    throw IndexError("select_item: index " + std::to_string(index) + " outside " +
                     std::to_string(x.numel()) + " elements");
  }
  Tensor out = Tensor::scalar(x.data()[static_cast<std::size_t>(index)]);
  if (Tape* t = tape_for({&x})) {
    out.enable_grad();
    t->record([x, out, index]() mutable {
      x.mutable_grad()[static_cast<std::size_t>(index)] += out.grad()[0];
    });
  }
  return out;
}

Tensor select_row(const Tensor& x, int row) {
  if (x.shape().size() != 2) throw ShapeError("select_row: expects a 2-d tensor");
  const int r = x.dim(0), c = x.dim(1);
  if (row < 0 || row >= r)
    throw IndexError("select_row: row " + std::to_string(row) + " outside [0, " +
                     std::to_string(r) + ")");
  Tensor out = Tensor::zeros({c});
  std::copy(x.data().begin() + static_cast<std::ptrdiff_t>(row) * c,
            x.data().begin() + static_cast<std::ptrdiff_t>(row + 1) * c,
            out.mutable_data().begin());
  if (Tape* t = tape_for({&x})) {
    out.enable_grad();
    t->record([x, out, row, c]() mutable {
      for (int j = 0; j < c; ++j)
        x.mutable_grad()[static_cast<std::size_t>(row) * c + j] += out.grad()[j];
    });
  }
  return out;
}

namespace {

// log-sum-exp in double; shared by both cross-entropy forms
double row_lse(const float* l, int v) {
  float mx = l[0];
  for (int j = 1; j < v; ++j) mx = std::max(mx, l[j]);
  double s = 0.0;
  for (int j = 0; j < v; ++j) s += std::exp(static_cast<double>(l[j]) - mx);
  return mx + std::log(s);
}

}  // namespace

Tensor cross_entropy(const Tensor& logits, int target) {
  const int v = last_dim(logits);
  if (logits.numel() != static_cast<std::size_t>(v)) {
    throw ShapeError("cross_entropy: expects a single logit row");
  }
  if (target < 0 || target >= v) {
    throw IndexError("cross_entropy: target " + std::to_string(target) +
                     " outside vocabulary of " + std::to_string(v));
  }
  const double lse = row_lse(logits.data().data(), v);
  Tensor out = Tensor::scalar(static_cast<float>(lse - logits.data()[target]));
  if (Tape* t = tape_for({&logits})) {
    out.enable_grad();
    t->record([logits, out, target, v, lse]() mutable {
      const float g = out.grad()[0];
      for (int j = 0; j < v; ++j) {
        const float p = static_cast<float>(std::exp(logits.data()[j] - lse));
        logits.mutable_grad()[j] += g * (p - (j == target ? 1.0f : 0.0f));
      }
    });
  }
  return out;
}

Tensor cross_entropy_mean(const Tensor& logits, const std::vector<int>& targets) {
  if (logits.shape().size() != 2) throw ShapeError("cross_entropy_mean: expects a 2-d tensor");
  const int b = logits.dim(0), v = logits.dim(1);
  if (static_cast<std::size_t>(b) != targets.size()) {
    throw ShapeError("cross_entropy_mean: " + std::to_string(b) + " rows vs " +
                     std::to_string(targets.size()) + " targets");
  }
  std::vector<double> lses(b);
  double acc = 0.0;
  for (int r = 0; r < b; ++r) {
    if (targets[r] < 0 || targets[r] >= v) {
      throw IndexError("cross_entropy_mean: target " + std::to_string(targets[r]) +
                       " outside vocabulary of " + std::to_string(v));
    }
    lses[r] = row_lse(logits.data().data() + static_cast<std::size_t>(r) * v, v);
    acc += lses[r] - logits.data()[static_cast<std::size_t>(r) * v + targets[r]];
  }
  Tensor out = Tensor::scalar(static_cast<float>(acc / b));
  if (Tape* t = tape_for({&logits})) {
    out.enable_grad();
    t->record([logits, out, targets, b, v, lses]() mutable {
      const float g = out.grad()[0] / b;
      for (int r = 0; r < b; ++r) {
        const float* l = logits.data().data() + static_cast<std::size_t>(r) * v;
        float* dl = logits.mutable_grad().data() + static_cast<std::size_t>(r) * v;
        for (int j = 0; j < v; ++j) {
          const float p = static_cast<float>(std::exp(l[j] - lses[r]));
          dl[j] += g * (p - (j == targets[r] ? 1.0f : 0.0f));
        }
      }
    });
  }
  return out;
}

// ---- attention -------------------------------------------------------

Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, int n_seqs) {
  if (q.shape().size() != 2) throw ShapeError("causal_attention: expects 2-d tensors");
  check_same_shape(q, k, "causal_attention(q,k)");
  check_same_shape(q, v, "causal_attention(q,v)");
  const int s = q.dim(0), dh = q.dim(1);
  if (n_seqs <= 0 || s % n_seqs != 0) {
    throw ShapeError("causal_attention: " + std::to_string(s) + " rows not divisible into " +
                     std::to_string(n_seqs) + " sequences");
  }
  const int tl = s / n_seqs;
  const float sc = 1.0f / std::sqrt(static_cast<float>(dh));
  Tensor out = Tensor::zeros({s, dh});
  // per-block attention probabilities, kept for backward
  auto probs = std::make_shared<std::vector<float>>(
      static_cast<std::size_t>(n_seqs) * tl * tl, 0.0f);
  for (int bseq = 0; bseq < n_seqs; ++bseq) {
    const float* qb = q.data().data() + static_cast<std::size_t>(bseq) * tl * dh;
    const float* kb = k.data().data() + static_cast<std::size_t>(bseq) * tl * dh;
    const float* vb = v.data().data() + static_cast<std::size_t>(bseq) * tl * dh;
    float* ob = out.mutable_data().data() + static_cast<std::size_t>(bseq) * tl * dh;
    float* pb = probs->data() + static_cast<std::size_t>(bseq) * tl * tl;
    for (int i = 0; i < tl; ++i) {
      float mx = -std::numeric_limits<float>::infinity();
      std::vector<float> row(static_cast<std::size_t>(i) + 1);
      for (int j = 0; j <= i; ++j) {
        float acc = 0.0f;
        for (int p = 0; p < dh; ++p) acc += qb[i * dh + p] * kb[j * dh + p];
        row[j] = acc * sc;
        mx = std::max(mx, row[j]);
      }
      double ssum = 0.0;
      for (int j = 0; j <= i; ++j) {
        row[j] = std::exp(row[j] - mx);
        ssum += row[j];
      }
      const float inv = static_cast<float>(1.0 / ssum);
      for (int j = 0; j <= i; ++j) pb[i * tl + j] = row[j] * inv;
      for (int p = 0; p < dh; ++p) {
        float acc = 0.0f;
        for (int j = 0; j <= i; ++j) acc += pb[i * tl + j] * vb[j * dh + p];
        ob[i * dh + p] = acc;
      }
    }
  }
  if (Tape* t = tape_for({&q, &k, &v})) {
    out.enable_grad();
    t->record([q, k, v, out, probs, n_seqs, tl, dh, sc]() mutable {
      std::vector<float> dp(static_cast<std::size_t>(tl) * tl);
      std::vector<float> ds(static_cast<std::size_t>(tl) * tl);
      for (int bseq = 0; bseq < n_seqs; ++bseq) {
        const std::size_t off = static_cast<std::size_t>(bseq) * tl * dh;
        const float* qb = q.data().data() + off;
        const float* kb = k.data().data() + off;
        const float* vb = v.data().data() + off;
        const float* dob = out.grad().data() + off;
        const float* pb = probs->data() + static_cast<std::size_t>(bseq) * tl * tl;
        for (int i = 0; i < tl; ++i) {
          for (int j = 0; j <= i; ++j) {
            float acc = 0.0f;
            for (int p = 0; p < dh; ++p) acc += dob[i * dh + p] * vb[j * dh + p];
            dp[i * tl + j] = acc;
          }
          double dot = 0.0;
          for (int j = 0; j <= i; ++j)
            dot += static_cast<double>(dp[i * tl + j]) * pb[i * tl + j];
          for (int j = 0; j <= i; ++j)
            ds[i * tl + j] = pb[i * tl + j] * (dp[i * tl + j] - static_cast<float>(dot));
        }
        if (v.requires_grad()) {
          float* dv = v.mutable_grad().data() + off;
          for (int j = 0; j < tl; ++j)
            for (int p = 0; p < dh; ++p) {
              float acc = 0.0f;
              for (int i = j; i < tl; ++i) acc += pb[i * tl + j] * dob[i * dh + p];
              dv[j * dh + p] += acc;
            }
        }
        if (q.requires_grad()) {
          float* dq = q.mutable_grad().data() + off;
          for (int i = 0; i < tl; ++i)
            for (int p = 0; p < dh; ++p) {
              float acc = 0.0f;
              for (int j = 0; j <= i; ++j) acc += ds[i * tl + j] * kb[j * dh + p];
              dq[i * dh + p] += acc * sc;
            }
        }
        if (k.requires_grad()) {
          float* dk = k.mutable_grad().data() + off;
          for (int j = 0; j < tl; ++j)
            for (int p = 0; p < dh; ++p) {
              float acc = 0.0f;
              for (int i = j; i < tl; ++i) acc += ds[i * tl + j] * qb[i * dh + p];
              dk[j * dh + p] += acc * sc;
            }
        }
      }
    });
  }
  return out;
}

Tensor causal_attention_heads(const Tensor& q, const Tensor& k, const Tensor& v, int n_seqs,
                              int n_heads) {
  if (q.shape().size() != 2) throw ShapeError("causal_attention_heads: expects 2-d tensors");
  check_same_shape(q, k, "causal_attention_heads(q,k)");
  check_same_shape(q, v, "causal_attention_heads(q,v)");
  const int s = q.dim(0), d = q.dim(1);
  if (n_seqs <= 0 || s % n_seqs != 0 || n_heads <= 0 || d % n_heads != 0) {
    throw ShapeError("causal_attention_heads: rows/columns not divisible into sequences and "
                     "heads");
  }
  const int tl = s / n_seqs;
  const int dh = d / n_heads;
  const float sc = 1.0f / std::sqrt(static_cast<float>(dh));
  Tensor out = Tensor::zeros({s, d});
  auto probs = std::make_shared<std::vector<float>>(
      static_cast<std::size_t>(n_seqs) * n_heads * tl * tl, 0.0f);
  for (int bseq = 0; bseq < n_seqs; ++bseq) {
    const std::size_t row0 = static_cast<std::size_t>(bseq) * tl;
    for (int h = 0; h < n_heads; ++h) {
      const int c0 = h * dh;
      float* pb = probs->data() +
                  (static_cast<std::size_t>(bseq) * n_heads + h) * tl * tl;
      for (int i = 0; i < tl; ++i) {
        const float* qi = q.data().data() + (row0 + i) * d + c0;
        float mx = -std::numeric_limits<float>::infinity();
        for (int j = 0; j <= i; ++j) {
          const float* kj = k.data().data() + (row0 + j) * d + c0;
          float acc = 0.0f;
          for (int p = 0; p < dh; ++p) acc += qi[p] * kj[p];
          pb[i * tl + j] = acc * sc;
          mx = std::max(mx, pb[i * tl + j]);
        }
        double ssum = 0.0;
        for (int j = 0; j <= i; ++j) {
          pb[i * tl + j] = std::exp(pb[i * tl + j] - mx);
          ssum += pb[i * tl + j];
        }
        const float inv = static_cast<float>(1.0 / ssum);
        float* oi = out.mutable_data().data() + (row0 + i) * d + c0;
        for (int j = 0; j <= i; ++j) {
          const float prob = pb[i * tl + j] * inv;
          pb[i * tl + j] = prob;
          const float* vj = v.data().data() + (row0 + j) * d + c0;
          for (int p = 0; p < dh; ++p) oi[p] += prob * vj[p];
        }
      }
    }
  }
  if (Tape* t = tape_for({&q, &k, &v})) {
    out.enable_grad();
    t->record([q, k, v, out, probs, n_seqs, n_heads, tl, dh, d, sc]() mutable {
      std::vector<float> dp(static_cast<std::size_t>(tl) * tl);
      std::vector<float> ds(static_cast<std::size_t>(tl) * tl);
      for (int bseq = 0; bseq < n_seqs; ++bseq) {
        const std::size_t row0 = static_cast<std::size_t>(bseq) * tl;
        for (int h = 0; h < n_heads; ++h) {
          const int c0 = h * dh;
          const float* pb = probs->data() +
                            (static_cast<std::size_t>(bseq) * n_heads + h) * tl * tl;
          for (int i = 0; i < tl; ++i) {
            const float* doi = out.grad().data() + (row0 + i) * d + c0;
            for (int j = 0; j <= i; ++j) {
              const float* vj = v.data().data() + (row0 + j) * d + c0;
              float acc = 0.0f;
              for (int p = 0; p < dh; ++p) acc += doi[p] * vj[p];
              dp[i * tl + j] = acc;
            }
            double dot = 0.0;
            for (int j = 0; j <= i; ++j)
              dot += static_cast<double>(dp[i * tl + j]) * pb[i * tl + j];
            for (int j = 0; j <= i; ++j)
              ds[i * tl + j] = pb[i * tl + j] * (dp[i * tl + j] - static_cast<float>(dot));
          }
          if (v.requires_grad()) {
            for (int j = 0; j < tl; ++j) {
              float* dvj = v.mutable_grad().data() + (row0 + j) * d + c0;
              for (int i = j; i < tl; ++i) {
                const float* doi = out.grad().data() + (row0 + i) * d + c0;
                const float prob = pb[i * tl + j];
                for (int p = 0; p < dh; ++p) dvj[p] += prob * doi[p];
              }
            }
          }
          if (q.requires_grad()) {
            for (int i = 0; i < tl; ++i) {
              float* dqi = q.mutable_grad().data() + (row0 + i) * d + c0;
              for (int j = 0; j <= i; ++j) {
                const float* kj = k.data().data() + (row0 + j) * d + c0;
                const float w = ds[i * tl + j] * sc;
                for (int p = 0; p < dh; ++p) dqi[p] += w * kj[p];
              }
            }
          }
          if (k.requires_grad()) {
            for (int j = 0; j < tl; ++j) {
              float* dkj = k.mutable_grad().data() + (row0 + j) * d + c0;
              for (int i = j; i < tl; ++i) {
                const float* qi = q.data().data() + (row0 + i) * d + c0;
                const float w = ds[i * tl + j] * sc;
                for (int p = 0; p < dh; ++p) dkj[p] += w * qi[p];
              }
            }
          }
        }
      }
    });
  }
  return out;
}

// ---- patching primitive ----------------------------------------------

Tensor blend_rows(const Tensor& x, const std::vector<int>& rows, const Tensor& alt,
                  const Tensor& w) {
  if (x.shape().size() != 2 || alt.shape().size() != 2) {
    throw ShapeError("blend_rows: expects 2-d tensors");
  }
  const int r = x.dim(0), c = x.dim(1);
  if (alt.dim(0) != static_cast<int>(rows.size()) || alt.dim(1) != c) {
    throw ShapeError("blend_rows: alternate values " + shape_str(alt.shape()) +
                     " do not cover " + std::to_string(rows.size()) + " rows of width " +
                     std::to_string(c));
  }
  if (w.numel() != 1) throw ShapeError("blend_rows: weight must be scalar");
  for (int row : rows) {
    if (row < 0 || row >= r)
      throw IndexError("blend_rows: row " + std::to_string(row) + " outside [0, " +
                       std::to_string(r) + ")");
  }
  const float wv = w.data()[0];
  Tensor out = Tensor::from_data(x.shape(), x.data());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    float* o = out.mutable_data().data() + static_cast<std::size_t>(rows[i]) * c;
    const float* xv = x.data().data() + static_cast<std::size_t>(rows[i]) * c;
    const float* av = alt.data().data() + i * c;
    for (int j = 0; j < c; ++j) o[j] = wv * xv[j] + (1.0f - wv) * av[j];
  }
  if (Tape* t = tape_for({&x, &w})) {
    out.enable_grad();
    t->record([x, alt, w, out, rows, r, c, wv]() mutable {
      if (x.requires_grad()) {
        std::vector<bool> patched(static_cast<std::size_t>(r), false);
        for (int row : rows) patched[static_cast<std::size_t>(row)] = true;
        for (int i = 0; i < r; ++i) {
          const float f = patched[static_cast<std::size_t>(i)] ? wv : 1.0f;
          float* dx = x.mutable_grad().data() + static_cast<std::size_t>(i) * c;
          const float* dy = out.grad().data() + static_cast<std::size_t>(i) * c;
          for (int j = 0; j < c; ++j) dx[j] += f * dy[j];
        }
      }
      if (w.requires_grad()) {
        double acc = 0.0;
        for (std::size_t i = 0; i < rows.size(); ++i) {
          const float* dy = out.grad().data() + static_cast<std::size_t>(rows[i]) * c;
          const float* xv = x.data().data() + static_cast<std::size_t>(rows[i]) * c;
          const float* av = alt.data().data() + i * c;
          for (int j = 0; j < c; ++j)
            acc += static_cast<double>(dy[j]) * (xv[j] - av[j]);
        }
        w.mutable_grad()[0] += static_cast<float>(acc);
      }
    });
  }
  return out;
}

Tensor mean_of(const std::vector<Tensor>& xs) {
  if (xs.empty()) throw ContractError("mean_of: empty list");
  Tensor acc = xs[0];
  for (std::size_t i = 1; i < xs.size(); ++i) acc = add(acc, xs[i]);
  return scale(acc, 1.0f / static_cast<float>(xs.size()));
}

// ---- gradient checking -----------------------------------------------

float grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x, float step) {
  if (!x.requires_grad()) x.enable_grad();
  x.zero_grad();
  {
    Tape tape;
    Tensor y = f(x);
    if (y.numel() != 1) throw ContractError("grad_check: f must be scalar-valued");
    tape.backward(y);
  }
  const std::vector<float> analytic = x.grad();
  float worst = 0.0f;
  auto& xd = x.mutable_data();
  for (std::size_t i = 0; i < xd.size(); ++i) {
    const float orig = xd[i];
    xd[i] = orig + step;
    const double fp = f(x).item();
    xd[i] = orig - step;
    const double fm = f(x).item();
    xd[i] = orig;
    const double numeric = (fp - fm) / (2.0 * step);
    const double denom =
        std::max({std::abs(static_cast<double>(analytic[i])), std::abs(numeric), 1e-8});
    worst = std::max(worst, static_cast<float>(std::abs(analytic[i] - numeric) / denom));
  }
  return worst;
}

}  // namespace cseek
