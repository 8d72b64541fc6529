#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "cseek/common.hpp"

namespace cseek {

// Dense row-major float32 tensor with optional gradient buffer.
// Data is immutable after construction except through mutable_data(),
// which is reserved for optimizers running outside any tape.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
  static Tensor full(std::vector<int> shape, float value, bool requires_grad = false);
  static Tensor from_data(std::vector<int> shape, std::vector<float> data,
                          bool requires_grad = false);
  static Tensor scalar(float value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const std::vector<int>& shape() const;
  int dim(int i) const;
  std::size_t numel() const;
  bool requires_grad() const;

  const std::vector<float>& data() const;
  std::vector<float>& mutable_data();
  const std::vector<float>& grad() const;
  // Gradient buffers are the one mutable aspect of a constructed tensor, so
  // grad accumulation is allowed through const handles.
  std::vector<float>& mutable_grad() const;

  float item() const;             // scalar tensors only
  float at(int row, int col) const;

  void zero_grad() const;
  void enable_grad();             // allocates a zeroed grad buffer
  void disable_grad();            // detaches from differentiation

  // Identity of the underlying buffer; used by tests and the tape.
  const void* id() const { return impl_.get(); }

 private:
  struct Impl {
    std::vector<int> shape;
    std::vector<float> data;
    std::vector<float> grad;
    bool requires_grad = false;
  };
  std::shared_ptr<Impl> impl_;
};

// Reverse-mode tape. Ops executed while a tape is active append one backward
// record each; backward() replays the records in reverse execution order and
// then frees the graph. A tape may be consumed exactly once.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void backward(const Tensor& loss);
  std::size_t size() const { return nodes_.size(); }

  static Tape* active();
  void record(std::function<void()> fn);

 private:
  std::vector<std::function<void()>> nodes_;
  bool consumed_ = false;
};

// ---- ops -------------------------------------------------------------
// Every op is deterministic and, when a tape is active and an input is
// grad-enabled, registers its backward record on the active tape.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float s);
Tensor add_const(const Tensor& a, float c);
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor slice_cols(const Tensor& a, int offset, int len);
Tensor concat_rows(const Tensor& a, const Tensor& b);
Tensor gather_rows(const Tensor& a, const std::vector<int>& rows);
Tensor embed(const Tensor& table, const std::vector<int>& ids);
Tensor softmax_lastdim(const Tensor& x);
Tensor rmsnorm(const Tensor& x, const Tensor& gain, float eps);
Tensor silu(const Tensor& x);
Tensor sqrt_elem(const Tensor& x);
Tensor sum(const Tensor& x);
Tensor select_item(const Tensor& x, int index);
Tensor select_row(const Tensor& x, int row);
Tensor cross_entropy(const Tensor& logits, int target);
Tensor cross_entropy_mean(const Tensor& logits, const std::vector<int>& targets);

// Causal self-attention over n_seqs row-blocks of equal length. q, k, v are
// [n_seqs*T, d_head]; each block attends within itself under a causal mask
// with 1/sqrt(d_head) score scaling.
Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, int n_seqs);

// Multi-head variant over the full projections [n_seqs*T, n_heads*d_head];
// column block h behaves exactly like causal_attention on that head's slice.
Tensor causal_attention_heads(const Tensor& q, const Tensor& k, const Tensor& v, int n_seqs,
                              int n_heads);

// Convex-combination patch: rows[i] of x is replaced by w*x[rows[i]] + (1-w)*alt[i].
// alt is a plain [len(rows), d] value matrix (no gradient); w is a scalar tensor.
Tensor blend_rows(const Tensor& x, const std::vector<int>& rows, const Tensor& alt,
                  const Tensor& w);

// Mean of scalar tensors (composite of add/scale).
Tensor mean_of(const std::vector<Tensor>& xs);

// Compares backward() gradients of f at x against central finite differences
// with the given step; returns the worst relative error with denominator
// max(|analytic|, |numeric|, 1e-8).
float grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x, float step);

}  // namespace cseek
