// SPDX-License-Identifier: Apache-2.0
//
// Reverse-mode automatic differentiation over small dense tensors. A Tensor
// is a flat row-major value container (rank 1 or 2, f64); a GradientTape
// records primitive ops executed while it is active and replays them in
// reverse to accumulate gradients for watched leaves.

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

namespace dco {

using Shape = std::vector<std::size_t>;

class GradientTape;

class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double v);
  static Tensor zeros(const Shape& shape);
  static Tensor full(const Shape& shape, double v);

  const Shape& shape() const { return shape_; }
  const std::vector<double>& values() const { return values_; }
  std::vector<double>& mutable_values() { return values_; }

  std::size_t rank() const { return shape_.size(); }
  std::size_t numel() const { return values_.size(); }
  std::size_t rows() const;
  std::size_t cols() const;
  bool is_scalar() const { return values_.size() == 1; }

  double item() const;
  double at(std::size_t i) const { return values_[i]; }
  double at(std::size_t i, std::size_t j) const { return values_[i * cols() + j]; }

  bool requires_grad() const { return requires_grad_; }
  bool recorded() const;

 private:
  friend class GradientTape;
  friend class GradientMap;

  Shape shape_;
  std::vector<double> values_;
  bool requires_grad_ = false;
  std::uint64_t epoch_ = 0;  // tape generation the node id refers to
  int node_ = -1;
};

// Gradients of one backward pass, keyed by the watched leaves of the tape.
class GradientMap {
 public:
  const Tensor& at(const Tensor& leaf) const;
  std::size_t size() const { return grads_.size(); }

 private:
  friend class GradientTape;

  std::uint64_t epoch_ = 0;
  std::unordered_map<int, Tensor> grads_;
};

// Records primitive ops while alive. Exactly one tape may be active per
// thread; construction activates it, destruction deactivates it. backward()
// consumes the tape: a second call is an error.
class GradientTape {
 public:
  GradientTape();
  ~GradientTape();
  GradientTape(const GradientTape&) = delete;
  GradientTape& operator=(const GradientTape&) = delete;

  void watch(Tensor& t);
  GradientMap backward(const Tensor& loss);

  std::size_t num_ops() const { return ops_.size(); }
  static GradientTape* active();

  // Internal plumbing used by the op layer.
  using BackwardFn =
      std::function<void(const std::vector<double>& out_grad,
                         std::vector<std::vector<double>>& grad_slots)>;
  bool live(const Tensor& t) const;
  int node_of(const Tensor& t) const;
  void record(Tensor& out, BackwardFn back);

 private:
  struct OpRecord {
    int out = -1;
    BackwardFn back;
  };

  std::uint64_t epoch_ = 0;
  bool consumed_ = false;
  int next_node_ = 0;
  std::vector<OpRecord> ops_;
  std::vector<Shape> leaf_shapes_;   // indexed by node id; empty if interior
  std::vector<int> watched_nodes_;
};

// Primitive ops. Elementwise binaries accept equal shapes or a one-element
// operand broadcast against the other side.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor sigmoid(const Tensor& a);
Tensor log_sigmoid(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor square(const Tensor& a);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor concat(const Tensor& a, const Tensor& b);

// Numerically stable scalar kernels shared by ops and plain-double callers.
double stable_sigmoid(double x);
double stable_softplus(double x);
double stable_log_sigmoid(double x);

}  // namespace dco
