#include "matmoe/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <unordered_set>

namespace matmoe {

using RowMajorMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMajorMatrix>;
using ConstMatMap = Eigen::Map<const RowMajorMatrix>;

struct Tensor::Node {
  int rows = 0;
  int cols = 0;
  std::vector<double> values;
  std::vector<double> grad;  // sized lazily, same length as values
  bool requires_grad = false;
  bool backward_done = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backprop;  // pulls node.grad into parents

  void ensure_grad() {
    if (grad.size() != values.size()) grad.assign(values.size(), 0.0);
  }
  MatMap val_map() { return MatMap(values.data(), rows, cols); }
  ConstMatMap val_cmap() const { return ConstMatMap(values.data(), rows, cols); }
  MatMap grad_map() {
    ensure_grad();
    return MatMap(grad.data(), rows, cols);
  }
};

namespace {

using Node = Tensor::Node;
using NodePtr = std::shared_ptr<Node>;

NodePtr make_node(int rows, int cols) {
  if (rows <= 0 || cols <= 0) throw std::invalid_argument("tensor dimensions must be positive");
  auto n = std::make_shared<Node>();
  n->rows = rows;
  n->cols = cols;
  n->values.assign(static_cast<std::size_t>(rows) * cols, 0.0);
  return n;
}

NodePtr result_of(int rows, int cols, std::initializer_list<Tensor> inputs) {
  auto out = make_node(rows, cols);
  for (const auto& t : inputs) {
    if (!t.defined()) throw std::invalid_argument("undefined tensor input");
    if (t.requires_grad()) out->requires_grad = true;
    out->parents.push_back(t.node());
  }
  return out;
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch (" +
                                std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                                " vs " + std::to_string(b.rows()) + "x" +
                                std::to_string(b.cols()) + ")");
  }
}

}  // namespace

Tensor Tensor::zeros(int rows, int cols, bool requires_grad) {
  auto n = make_node(rows, cols);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::full(int rows, int cols, double value, bool requires_grad) {
  auto n = make_node(rows, cols);
  std::fill(n->values.begin(), n->values.end(), value);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::from_values(int rows, int cols, std::vector<double> values, bool requires_grad) {
  if (values.size() != static_cast<std::size_t>(rows) * cols)
    throw std::invalid_argument("from_values: value count does not match shape");
  auto n = make_node(rows, cols);
  n->values = std::move(values);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::scalar_value(double v, bool requires_grad) {
  return from_values(1, 1, {v}, requires_grad);
}

Tensor Tensor::uniform(int rows, int cols, double limit, std::mt19937_64& rng, bool requires_grad) {
  auto n = make_node(rows, cols);
  std::uniform_real_distribution<double> dist(-limit, limit);
  for (auto& v : n->values) v = dist(rng);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::gaussian(int rows, int cols, double stddev, std::mt19937_64& rng,
                        bool requires_grad) {
  auto n = make_node(rows, cols);
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : n->values) v = dist(rng);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

int Tensor::rows() const { return node_->rows; }
int Tensor::cols() const { return node_->cols; }
std::int64_t Tensor::size() const { return static_cast<std::int64_t>(node_->rows) * node_->cols; }

std::vector<double>& Tensor::values() { return node_->values; }
const std::vector<double>& Tensor::values() const { return node_->values; }
std::vector<double>& Tensor::grad() {
  node_->ensure_grad();
  return node_->grad;
}
const std::vector<double>& Tensor::grad() const {
  node_->ensure_grad();
  return node_->grad;
}
bool Tensor::has_grad() const { return node_->grad.size() == node_->values.size(); }

bool Tensor::requires_grad() const { return node_->requires_grad; }
void Tensor::set_requires_grad(bool rg) { node_->requires_grad = rg; }
void Tensor::zero_grad() { node_->grad.assign(node_->values.size(), 0.0); }

double Tensor::at(int r, int c) const { return node_->values[static_cast<std::size_t>(r) * node_->cols + c]; }
double& Tensor::at(int r, int c) { return node_->values[static_cast<std::size_t>(r) * node_->cols + c]; }

double Tensor::scalar() const {
  if (size() != 1) throw std::logic_error("scalar() on tensor of size != 1");
  return node_->values[0];
}

const void* Tensor::node_id() const { return node_.get(); }

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1)
    throw std::logic_error("backward: loss must be a defined scalar tensor");
  auto root = loss.node();
  if (root->backward_done)
    throw std::logic_error("backward: tape already consumed; re-record the forward pass");

  // Iterative post-order DFS so deep tapes do not overflow the stack.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.get(), 0);
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next_child] = stack.back();
    if (next_child < node->parents.size()) {
      Node* child = node->parents[next_child++].get();
      if (visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->ensure_grad();
  root->grad[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->backprop && node->requires_grad) node->backprop(*node);
    node->backward_done = true;
  }
}

// ---------------------------------------------------------------------------
// ops

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) {
    throw std::invalid_argument("matmul: inner dimensions disagree (" + std::to_string(a.rows()) +
                                "x" + std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) +
                                "x" + std::to_string(b.cols()) + ")");
  }
  auto out = result_of(a.rows(), b.cols(), {a, b});
  out->val_map().noalias() = a.node()->val_cmap() * b.node()->val_cmap();
  out->backprop = [](Node& n) {
    auto& pa = n.parents[0];
    auto& pb = n.parents[1];
    auto g = n.grad_map();
    if (pa->requires_grad) pa->grad_map().noalias() += g * pb->val_cmap().transpose();
    if (pb->requires_grad) pb->grad_map().noalias() += pa->val_cmap().transpose() * g;
  };
  return Tensor(std::move(out));
}

Tensor matmul_bt(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.cols()) {
    throw std::invalid_argument("matmul_bt: inner dimensions disagree (" + std::to_string(a.rows()) +
                                "x" + std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) +
                                "x" + std::to_string(b.cols()) + "^T)");
  }
  auto out = result_of(a.rows(), b.rows(), {a, b});
  out->val_map().noalias() = a.node()->val_cmap() * b.node()->val_cmap().transpose();
  out->backprop = [](Node& n) {
    auto& pa = n.parents[0];
    auto& pb = n.parents[1];
    auto g = n.grad_map();
    if (pa->requires_grad) pa->grad_map().noalias() += g * pb->val_cmap();
    if (pb->requires_grad) pb->grad_map().noalias() += g.transpose() * pa->val_cmap();
  };
  return Tensor(std::move(out));
}

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  auto out = result_of(a.rows(), a.cols(), {a, b});
  for (std::size_t i = 0; i < out->values.size(); ++i)
    out->values[i] = a.values()[i] + b.values()[i];
  out->backprop = [](Node& n) {
    for (auto& p : n.parents) {
      if (!p->requires_grad) continue;
      p->ensure_grad();
      for (std::size_t i = 0; i < n.grad.size(); ++i) p->grad[i] += n.grad[i];
    }
  };
  return Tensor(std::move(out));
}

Tensor add_rowvec(const Tensor& a, const Tensor& row) {
  if (row.rows() != 1 || row.cols() != a.cols())
    throw std::invalid_argument("add_rowvec: row must be 1x" + std::to_string(a.cols()));
  auto out = result_of(a.rows(), a.cols(), {a, row});
  const int cols = a.cols();
  for (int r = 0; r < a.rows(); ++r)
    for (int c = 0; c < cols; ++c)
      out->values[static_cast<std::size_t>(r) * cols + c] = a.at(r, c) + row.at(0, c);
  out->backprop = [](Node& n) {
    auto& pa = n.parents[0];
    auto& pr = n.parents[1];
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (std::size_t i = 0; i < n.grad.size(); ++i) pa->grad[i] += n.grad[i];
    }
    if (pr->requires_grad) {
      pr->ensure_grad();
      for (int r = 0; r < n.rows; ++r)
        for (int c = 0; c < n.cols; ++c)
          pr->grad[c] += n.grad[static_cast<std::size_t>(r) * n.cols + c];
    }
  };
  return Tensor(std::move(out));
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  auto out = result_of(a.rows(), a.cols(), {a, b});
  for (std::size_t i = 0; i < out->values.size(); ++i)
    out->values[i] = a.values()[i] - b.values()[i];
  out->backprop = [](Node& n) {
    auto& pa = n.parents[0];
    auto& pb = n.parents[1];
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (std::size_t i = 0; i < n.grad.size(); ++i) pa->grad[i] += n.grad[i];
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (std::size_t i = 0; i < n.grad.size(); ++i) pb->grad[i] -= n.grad[i];
    }
  };
  return Tensor(std::move(out));
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  auto out = result_of(a.rows(), a.cols(), {a, b});
  for (std::size_t i = 0; i < out->values.size(); ++i)
    out->values[i] = a.values()[i] * b.values()[i];
  out->backprop = [](Node& n) {
    auto& pa = n.parents[0];
    auto& pb = n.parents[1];
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (std::size_t i = 0; i < n.grad.size(); ++i) pa->grad[i] += n.grad[i] * pb->values[i];
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (std::size_t i = 0; i < n.grad.size(); ++i) pb->grad[i] += n.grad[i] * pa->values[i];
    }
  };
  return Tensor(std::move(out));
}

Tensor scale(const Tensor& a, double c) {
  auto out = result_of(a.rows(), a.cols(), {a});
  for (std::size_t i = 0; i < out->values.size(); ++i) out->values[i] = a.values()[i] * c;
  out->backprop = [c](Node& n) {
    auto& p = n.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (std::size_t i = 0; i < n.grad.size(); ++i) p->grad[i] += n.grad[i] * c;
  };
  return Tensor(std::move(out));
}

Tensor sum(const Tensor& a) {
  auto out = result_of(1, 1, {a});
  out->values[0] = std::accumulate(a.values().begin(), a.values().end(), 0.0);
  out->backprop = [](Node& n) {
    auto& p = n.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (auto& g : p->grad) g += n.grad[0];
  };
  return Tensor(std::move(out));
}

Tensor mean_rows(const Tensor& a) {
  auto out = result_of(1, a.cols(), {a});
  const double inv = 1.0 / a.rows();
  for (int c = 0; c < a.cols(); ++c) {
    double acc = 0.0;
    for (int r = 0; r < a.rows(); ++r) acc += a.at(r, c);
    out->values[c] = acc * inv;
  }
  out->backprop = [inv](Node& n) {
    auto& p = n.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (int r = 0; r < p->rows; ++r)
      for (int c = 0; c < p->cols; ++c)
        p->grad[static_cast<std::size_t>(r) * p->cols + c] += n.grad[c] * inv;
  };
  return Tensor(std::move(out));
}

Tensor relu(const Tensor& a) {
  auto out = result_of(a.rows(), a.cols(), {a});
  for (std::size_t i = 0; i < out->values.size(); ++i)
    out->values[i] = a.values()[i] > 0.0 ? a.values()[i] : 0.0;
  out->backprop = [](Node& n) {
    auto& p = n.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (std::size_t i = 0; i < n.grad.size(); ++i)
      if (p->values[i] > 0.0) p->grad[i] += n.grad[i];
  };
  return Tensor(std::move(out));
}

// Fixed tanh approximation: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3))).
double gelu_scalar(double x) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kA = 0.044715;
  return 0.5 * x * (1.0 + std::tanh(kC * (x + kA * x * x * x)));
}

Tensor gelu(const Tensor& a) {
  auto out = result_of(a.rows(), a.cols(), {a});
  for (std::size_t i = 0; i < out->values.size(); ++i) out->values[i] = gelu_scalar(a.values()[i]);
  out->backprop = [](Node& n) {
    constexpr double kC = 0.7978845608028654;
    constexpr double kA = 0.044715;
    auto& p = n.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (std::size_t i = 0; i < n.grad.size(); ++i) {
      const double x = p->values[i];
      const double u = kC * (x + kA * x * x * x);
      const double t = std::tanh(u);
      const double dudx = kC * (1.0 + 3.0 * kA * x * x);
      const double d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dudx;
      p->grad[i] += n.grad[i] * d;
    }
  };
  return Tensor(std::move(out));
}

Tensor softmax_rows(const Tensor& a) {
  auto out = result_of(a.rows(), a.cols(), {a});
  const int cols = a.cols();
  for (int r = 0; r < a.rows(); ++r) {
    double mx = a.at(r, 0);
    for (int c = 1; c < cols; ++c) mx = std::max(mx, a.at(r, c));
    double denom = 0.0;
    for (int c = 0; c < cols; ++c) {
      const double e = std::exp(a.at(r, c) - mx);
      out->values[static_cast<std::size_t>(r) * cols + c] = e;
      denom += e;
    }
    for (int c = 0; c < cols; ++c) out->values[static_cast<std::size_t>(r) * cols + c] /= denom;
  }
  out->backprop = [](Node& n) {
    auto& p = n.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (int r = 0; r < n.rows; ++r) {
      const std::size_t base = static_cast<std::size_t>(r) * n.cols;
      double dot = 0.0;
      for (int c = 0; c < n.cols; ++c) dot += n.grad[base + c] * n.values[base + c];
      for (int c = 0; c < n.cols; ++c)
        p->grad[base + c] += n.values[base + c] * (n.grad[base + c] - dot);
    }
  };
  return Tensor(std::move(out));
}

Tensor layernorm_rows(const Tensor& x, const Tensor& gain, const Tensor& bias) {
  if (x.cols() < 2) throw std::invalid_argument("layernorm_rows: needs width >= 2");
  if (gain.rows() != 1 || gain.cols() != x.cols() || bias.rows() != 1 || bias.cols() != x.cols())
    throw std::invalid_argument("layernorm_rows: gain/bias must be 1x" + std::to_string(x.cols()));
  constexpr double kEps = 1e-5;
  auto out = result_of(x.rows(), x.cols(), {x, gain, bias});
  const int d = x.cols();
  // Stash per-row mean and inv-std for the backward rule.
  auto stats = std::make_shared<std::vector<double>>(static_cast<std::size_t>(x.rows()) * 2);
  for (int r = 0; r < x.rows(); ++r) {
    double mean = 0.0;
    for (int c = 0; c < d; ++c) mean += x.at(r, c);
    mean /= d;
    double var = 0.0;
    for (int c = 0; c < d; ++c) {
      const double dv = x.at(r, c) - mean;
      var += dv * dv;
    }
    var /= d;
    const double inv_std = 1.0 / std::sqrt(var + kEps);
    (*stats)[2 * r] = mean;
    (*stats)[2 * r + 1] = inv_std;
    for (int c = 0; c < d; ++c)
      out->values[static_cast<std::size_t>(r) * d + c] =
          (x.at(r, c) - mean) * inv_std * gain.at(0, c) + bias.at(0, c);
  }
  out->backprop = [stats, d](Node& n) {
    auto& px = n.parents[0];
    auto& pg = n.parents[1];
    auto& pb = n.parents[2];
    for (int r = 0; r < n.rows; ++r) {
      const std::size_t base = static_cast<std::size_t>(r) * d;
      const double mean = (*stats)[2 * r];
      const double inv_std = (*stats)[2 * r + 1];
      // dxhat, plus reductions for the mean/var terms.
      double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
      for (int c = 0; c < d; ++c) {
        const double xhat = (px->values[base + c] - mean) * inv_std;
        const double dxhat = n.grad[base + c] * pg->values[c];
        sum_dxhat += dxhat;
        sum_dxhat_xhat += dxhat * xhat;
        if (pg->requires_grad) {
          pg->ensure_grad();
          pg->grad[c] += n.grad[base + c] * xhat;
        }
        if (pb->requires_grad) {
          pb->ensure_grad();
          pb->grad[c] += n.grad[base + c];
        }
      }
      if (px->requires_grad) {
        px->ensure_grad();
        for (int c = 0; c < d; ++c) {
          const double xhat = (px->values[base + c] - mean) * inv_std;
          const double dxhat = n.grad[base + c] * pg->values[c];
          px->grad[base + c] +=
              inv_std * (dxhat - sum_dxhat / d - xhat * sum_dxhat_xhat / d);
        }
      }
    }
  };
  return Tensor(std::move(out));
}

Tensor slice_rows(const Tensor& a, int begin, int end) {
  if (begin < 0 || end > a.rows() || begin >= end)
    throw std::invalid_argument("slice_rows: bad range");
  auto out = result_of(end - begin, a.cols(), {a});
  const std::size_t w = a.cols();
  std::copy(a.values().begin() + begin * w, a.values().begin() + end * w, out->values.begin());
  out->backprop = [begin, w](Node& n) {
    auto& p = n.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (std::size_t i = 0; i < n.grad.size(); ++i) p->grad[begin * w + i] += n.grad[i];
  };
  return Tensor(std::move(out));
}

Tensor slice_cols(const Tensor& a, int begin, int end) {
  if (begin < 0 || end > a.cols() || begin >= end)
    throw std::invalid_argument("slice_cols: bad range");
  auto out = result_of(a.rows(), end - begin, {a});
  const int w = end - begin;
  for (int r = 0; r < a.rows(); ++r)
    for (int c = 0; c < w; ++c)
      out->values[static_cast<std::size_t>(r) * w + c] = a.at(r, begin + c);
  out->backprop = [begin, w](Node& n) {
    auto& p = n.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (int r = 0; r < n.rows; ++r)
      for (int c = 0; c < w; ++c)
        p->grad[static_cast<std::size_t>(r) * p->cols + begin + c] +=
            n.grad[static_cast<std::size_t>(r) * w + c];
  };
  return Tensor(std::move(out));
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: empty input");
  int total = 0;
  const int cols = parts.front().cols();
  for (const auto& p : parts) {
    if (p.cols() != cols) throw std::invalid_argument("concat_rows: column mismatch");
    total += p.rows();
  }
  auto out = make_node(total, cols);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    if (p.requires_grad()) out->requires_grad = true;
    out->parents.push_back(p.node());
    std::copy(p.values().begin(), p.values().end(), out->values.begin() + offset);
    offset += p.values().size();
  }
  out->backprop = [](Node& n) {
    std::size_t offset = 0;
    for (auto& p : n.parents) {
      if (p->requires_grad) {
        p->ensure_grad();
        for (std::size_t i = 0; i < p->values.size(); ++i) p->grad[i] += n.grad[offset + i];
      }
      offset += p->values.size();
    }
  };
  return Tensor(std::move(out));
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: empty input");
  const int rows = parts.front().rows();
  int total = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw std::invalid_argument("concat_cols: row mismatch");
    total += p.cols();
  }
  auto out = make_node(rows, total);
  int col0 = 0;
  for (const auto& p : parts) {
    if (p.requires_grad()) out->requires_grad = true;
    out->parents.push_back(p.node());
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < p.cols(); ++c)
        out->values[static_cast<std::size_t>(r) * total + col0 + c] = p.at(r, c);
    col0 += p.cols();
  }
  out->backprop = [](Node& n) {
    int col0 = 0;
    for (auto& p : n.parents) {
      if (p->requires_grad) {
        p->ensure_grad();
        for (int r = 0; r < p->rows; ++r)
          for (int c = 0; c < p->cols; ++c)
            p->grad[static_cast<std::size_t>(r) * p->cols + c] +=
                n.grad[static_cast<std::size_t>(r) * n.cols + col0 + c];
      }
      col0 += p->cols;
    }
  };
  return Tensor(std::move(out));
}

Tensor gather_rows(const Tensor& a, const std::vector<int>& indices) {
  if (indices.empty()) throw std::invalid_argument("gather_rows: empty index list");
  for (int i : indices)
    if (i < 0 || i >= a.rows()) throw std::out_of_range("gather_rows: index out of range");
  auto out = result_of(static_cast<int>(indices.size()), a.cols(), {a});
  const std::size_t w = a.cols();
  for (std::size_t r = 0; r < indices.size(); ++r)
    std::copy(a.values().begin() + indices[r] * w, a.values().begin() + (indices[r] + 1) * w,
              out->values.begin() + r * w);
  auto idx = indices;
  out->backprop = [idx, w](Node& n) {
    auto& p = n.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t c = 0; c < w; ++c) p->grad[idx[r] * w + c] += n.grad[r * w + c];
  };
  return Tensor(std::move(out));
}

Tensor scatter_rows(const Tensor& src, const std::vector<int>& indices, int total_rows) {
  if (indices.size() != static_cast<std::size_t>(src.rows()))
    throw std::invalid_argument("scatter_rows: one index per source row required");
  for (int i : indices)
    if (i < 0 || i >= total_rows) throw std::out_of_range("scatter_rows: index out of range");
  auto out = result_of(total_rows, src.cols(), {src});
  const std::size_t w = src.cols();
  for (std::size_t r = 0; r < indices.size(); ++r)
    for (std::size_t c = 0; c < w; ++c)
      out->values[indices[r] * w + c] += src.values()[r * w + c];
  auto idx = indices;
  out->backprop = [idx, w](Node& n) {
    auto& p = n.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t c = 0; c < w; ++c) p->grad[r * w + c] += n.grad[idx[r] * w + c];
  };
  return Tensor(std::move(out));
}

Tensor row_scale(const Tensor& a, const Tensor& g) {
  if (g.rows() != a.rows() || g.cols() != 1)
    throw std::invalid_argument("row_scale: g must be " + std::to_string(a.rows()) + "x1");
  auto out = result_of(a.rows(), a.cols(), {a, g});
  for (int r = 0; r < a.rows(); ++r)
    for (int c = 0; c < a.cols(); ++c)
      out->values[static_cast<std::size_t>(r) * a.cols() + c] = a.at(r, c) * g.at(r, 0);
  out->backprop = [](Node& n) {
    auto& pa = n.parents[0];
    auto& pg = n.parents[1];
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (int r = 0; r < n.rows; ++r)
        for (int c = 0; c < n.cols; ++c)
          pa->grad[static_cast<std::size_t>(r) * n.cols + c] +=
              n.grad[static_cast<std::size_t>(r) * n.cols + c] * pg->values[r];
    }
    if (pg->requires_grad) {
      pg->ensure_grad();
      for (int r = 0; r < n.rows; ++r) {
        double acc = 0.0;
        for (int c = 0; c < n.cols; ++c)
          acc += n.grad[static_cast<std::size_t>(r) * n.cols + c] *
                 pa->values[static_cast<std::size_t>(r) * n.cols + c];
        pg->grad[r] += acc;
      }
    }
  };
  return Tensor(std::move(out));
}

Tensor sparse_mask(const Tensor& a, const std::vector<std::uint8_t>& keep) {
  if (keep.size() != a.values().size())
    throw std::invalid_argument("sparse_mask: mask size mismatch");
  auto out = result_of(a.rows(), a.cols(), {a});
  for (std::size_t i = 0; i < keep.size(); ++i)
    out->values[i] = keep[i] ? a.values()[i] : 0.0;
  auto mask = keep;
  out->backprop = [mask](Node& n) {
    auto& p = n.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (std::size_t i = 0; i < mask.size(); ++i)
      if (mask[i]) p->grad[i] += n.grad[i];
  };
  return Tensor(std::move(out));
}

Tensor gather_elems(const Tensor& a, const std::vector<std::pair<int, int>>& idx) {
  if (idx.empty()) throw std::invalid_argument("gather_elems: empty index list");
  for (auto [r, c] : idx)
    if (r < 0 || r >= a.rows() || c < 0 || c >= a.cols())
      throw std::out_of_range("gather_elems: index out of range");
  auto out = result_of(static_cast<int>(idx.size()), 1, {a});
  for (std::size_t i = 0; i < idx.size(); ++i) out->values[i] = a.at(idx[i].first, idx[i].second);
  auto indices = idx;
  out->backprop = [indices](Node& n) {
    auto& p = n.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (std::size_t i = 0; i < indices.size(); ++i)
      p->grad[static_cast<std::size_t>(indices[i].first) * p->cols + indices[i].second] +=
          n.grad[i];
  };
  return Tensor(std::move(out));
}

Tensor avg_pool_rows(const Tensor& a, int r) {
  if (r <= 0) throw std::invalid_argument("avg_pool_rows: rate must be positive");
  const int out_rows = (a.rows() + r - 1) / r;
  auto out = result_of(out_rows, a.cols(), {a});
  for (int o = 0; o < out_rows; ++o) {
    const int begin = o * r;
    const int end = std::min(begin + r, a.rows());
    const double inv = 1.0 / (end - begin);
    for (int c = 0; c < a.cols(); ++c) {
      double acc = 0.0;
      for (int rr = begin; rr < end; ++rr) acc += a.at(rr, c);
      out->values[static_cast<std::size_t>(o) * a.cols() + c] = acc * inv;
    }
  }
  out->backprop = [r](Node& n) {
    auto& p = n.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (int o = 0; o < n.rows; ++o) {
      const int begin = o * r;
      const int end = std::min(begin + r, p->rows);
      const double inv = 1.0 / (end - begin);
      for (int c = 0; c < n.cols; ++c)
        for (int rr = begin; rr < end; ++rr)
          p->grad[static_cast<std::size_t>(rr) * p->cols + c] +=
              n.grad[static_cast<std::size_t>(o) * n.cols + c] * inv;
    }
  };
  return Tensor(std::move(out));
}

Tensor stack_pool_rows(const Tensor& a, int r) {
  if (r <= 0) throw std::invalid_argument("stack_pool_rows: rate must be positive");
  const int out_rows = (a.rows() + r - 1) / r;
  const int out_cols = r * a.cols();
  auto out = result_of(out_rows, out_cols, {a});
  for (int o = 0; o < out_rows; ++o) {
    for (int k = 0; k < r; ++k) {
      const int src = o * r + k;
      if (src >= a.rows()) break;  // trailing zeros already in place
      for (int c = 0; c < a.cols(); ++c)
        out->values[static_cast<std::size_t>(o) * out_cols + k * a.cols() + c] = a.at(src, c);
    }
  }
  out->backprop = [r](Node& n) {
    auto& p = n.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    const int in_cols = p->cols;
    for (int o = 0; o < n.rows; ++o)
      for (int k = 0; k < r; ++k) {
        const int src = o * r + k;
        if (src >= p->rows) break;
        for (int c = 0; c < in_cols; ++c)
          p->grad[static_cast<std::size_t>(src) * in_cols + c] +=
              n.grad[static_cast<std::size_t>(o) * n.cols + k * in_cols + c];
      }
  };
  return Tensor(std::move(out));
}

Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids) {
  if (ids.empty()) throw std::invalid_argument("embedding_lookup: empty id list");
  for (int id : ids)
    if (id < 0 || id >= table.rows()) throw std::out_of_range("embedding_lookup: id out of range");
  return gather_rows(table, ids);
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets) {
  if (static_cast<int>(targets.size()) != logits.rows())
    throw std::invalid_argument("cross_entropy: one target per logit row required");
  for (int t : targets)
    if (t < 0 || t >= logits.cols())
      throw std::out_of_range("cross_entropy: target index " + std::to_string(t) +
                              " out of range for vocab " + std::to_string(logits.cols()));
  auto out = result_of(1, 1, {logits});
  const int cols = logits.cols();
  // Stash the softmax for the backward rule.
  auto probs = std::make_shared<std::vector<double>>(logits.values().size());
  double total = 0.0;
  for (int r = 0; r < logits.rows(); ++r) {
    const std::size_t base = static_cast<std::size_t>(r) * cols;
    double mx = logits.values()[base];
    for (int c = 1; c < cols; ++c) mx = std::max(mx, logits.values()[base + c]);
    double denom = 0.0;
    for (int c = 0; c < cols; ++c) {
      const double e = std::exp(logits.values()[base + c] - mx);
      (*probs)[base + c] = e;
      denom += e;
    }
    for (int c = 0; c < cols; ++c) (*probs)[base + c] /= denom;
    total += -(logits.values()[base + targets[r]] - mx - std::log(denom));
  }
  out->values[0] = total / logits.rows();
  auto tgt = targets;
  out->backprop = [probs, tgt, cols](Node& n) {
    auto& p = n.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    const double g = n.grad[0] / p->rows;
    for (int r = 0; r < p->rows; ++r) {
      const std::size_t base = static_cast<std::size_t>(r) * cols;
      for (int c = 0; c < cols; ++c) {
        double d = (*probs)[base + c];
        if (c == tgt[r]) d -= 1.0;
        p->grad[base + c] += g * d;
      }
    }
  };
  return Tensor(std::move(out));
}

}  // namespace matmoe
