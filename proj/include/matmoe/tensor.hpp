#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

namespace matmoe {

// Dense 2-D (or scalar) tensor of 64-bit floats participating in a
// reverse-mode gradient tape. Value-semantic handle over a shared node;
// copies alias the same storage, which is what the tape needs.
//
// All shapes are {rows, cols}; a scalar is {1, 1}. Gradients accumulate
// additively; callers zero them between steps.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(int rows, int cols, bool requires_grad = false);
  static Tensor full(int rows, int cols, double value, bool requires_grad = false);
  static Tensor from_values(int rows, int cols, std::vector<double> values,
                            bool requires_grad = false);
  static Tensor scalar_value(double v, bool requires_grad = false);
  // Uniform in [-limit, limit].
  static Tensor uniform(int rows, int cols, double limit, std::mt19937_64& rng,
                        bool requires_grad = false);
  static Tensor gaussian(int rows, int cols, double stddev, std::mt19937_64& rng,
                         bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  int rows() const;
  int cols() const;
  std::int64_t size() const;

  std::vector<double>& values();
  const std::vector<double>& values() const;
  std::vector<double>& grad();
  const std::vector<double>& grad() const;
  bool has_grad() const;

  bool requires_grad() const;
  void set_requires_grad(bool rg);
  void zero_grad();

  double at(int r, int c) const;
  double& at(int r, int c);
  double scalar() const;  // requires size() == 1

  // Identity of the underlying node; used by tests asserting aliasing.
  const void* node_id() const;

  struct Node;
  std::shared_ptr<Node> node() const { return node_; }
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<Node> node_;
};

// Runs reverse-mode accumulation from a scalar loss through every recorded
// operation that produced it. Throws if loss is not 1x1 or if this tape
// section was already consumed by a previous backward call.
void backward(const Tensor& loss);

// --- forward ops (all recorded on the tape when an input requires grad) ---

Tensor matmul(const Tensor& a, const Tensor& b);           // [m,k]x[k,n]
Tensor matmul_bt(const Tensor& a, const Tensor& b);        // a * b^T
Tensor add(const Tensor& a, const Tensor& b);              // same shape
Tensor add_rowvec(const Tensor& a, const Tensor& row);     // row: [1,n]
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);              // elementwise
Tensor scale(const Tensor& a, double c);
Tensor sum(const Tensor& a);                               // -> scalar
Tensor mean_rows(const Tensor& a);                         // [t,n] -> [1,n]
Tensor relu(const Tensor& a);
Tensor gelu(const Tensor& a);                              // tanh approximation
Tensor softmax_rows(const Tensor& a);
Tensor layernorm_rows(const Tensor& x, const Tensor& gain, const Tensor& bias);
Tensor slice_rows(const Tensor& a, int begin, int end);
Tensor slice_cols(const Tensor& a, int begin, int end);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor gather_rows(const Tensor& a, const std::vector<int>& indices);
// Inverse of gather_rows: places src row i at output row indices[i]; other
// rows are zero. Duplicate indices accumulate.
Tensor scatter_rows(const Tensor& src, const std::vector<int>& indices, int total_rows);
// out[r, :] = a[r, :] * g[r, 0]
Tensor row_scale(const Tensor& a, const Tensor& g);
// Retains entries flagged in keep (row-major bools), zeroes the rest.
// Gradient flows only through retained entries.
Tensor sparse_mask(const Tensor& a, const std::vector<std::uint8_t>& keep);
// Picks single elements; out is [n,1] with out[i] = a[idx[i].first, idx[i].second].
Tensor gather_elems(const Tensor& a, const std::vector<std::pair<int, int>>& idx);
// Mean over non-overlapping windows of r rows; final partial window averaged
// over its actual size. Output has ceil(rows/r) rows.
Tensor avg_pool_rows(const Tensor& a, int r);
// Concatenates r consecutive rows feature-wise; final partial group
// zero-padded. Output is ceil(rows/r) x (r*cols).
Tensor stack_pool_rows(const Tensor& a, int r);
Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids);
// Mean over rows of -log softmax(logits)[target]; targets.size() == rows.
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets);

double gelu_scalar(double x);

}  // namespace matmoe
