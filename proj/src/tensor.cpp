// SPDX-License-Identifier: Apache-2.0
//
// Tensor value type, tape recording and the primitive op set.

#include "dco/tensor.hpp"

#include <atomic>
#include <cmath>
#include <sstream>
#include <stdexcept>
#include <utility>

namespace dco {

namespace {

thread_local GradientTape* g_active_tape = nullptr;
std::atomic<std::uint64_t> g_epoch_counter{1};

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

[[noreturn]] void fail(const std::string& op, const std::string& msg) {
  throw std::runtime_error(op + ": " + msg);
}

void check_finite(const std::string& op, const std::vector<double>& v) {
  for (double x : v)
    if (!std::isfinite(x)) fail(op, "non-finite value produced");
}

std::vector<double>& slot(std::vector<std::vector<double>>& grads, int node,
                          std::size_t n) {
  auto& g = grads[static_cast<std::size_t>(node)];
  if (g.empty()) g.assign(n, 0.0);
  return g;
}

struct BinaryLayout {
  std::size_t n = 0;      // output element count
  bool a_scalar = false;  // operand broadcast flags
  bool b_scalar = false;
  Shape shape;
};

BinaryLayout binary_layout(const std::string& op, const Tensor& a,
                           const Tensor& b) {
  BinaryLayout l;
  if (a.shape() == b.shape()) {
    l.n = a.numel();
    l.shape = a.shape();
    return l;
  }
  if (a.is_scalar()) {
    l.a_scalar = true;
    l.n = b.numel();
    l.shape = b.shape();
    return l;
  }
  if (b.is_scalar()) {
    l.b_scalar = true;
    l.n = a.numel();
    l.shape = a.shape();
    return l;
  }
  fail(op, "shape mismatch " + shape_str(a.shape()) + " vs " +
               shape_str(b.shape()));
}

double reduce_sum(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s;
}

}  // namespace

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

double stable_softplus(double x) {
  double hinge = x > 0.0 ? x : 0.0;
  return hinge + std::log1p(std::exp(-std::abs(x)));
}

double stable_log_sigmoid(double x) { return -stable_softplus(-x); }

Tensor::Tensor(Shape shape, std::vector<double> values)
    : shape_(std::move(shape)), values_(std::move(values)) {
  if (shape_.empty() || shape_.size() > 2)
    fail("tensor", "rank must be 1 or 2, got " + shape_str(shape_));
  std::size_t n = 1;
  for (std::size_t d : shape_) n *= d;
  if (n == 0) fail("tensor", "empty shape " + shape_str(shape_));
  if (n != values_.size())
    fail("tensor", "shape " + shape_str(shape_) + " expects " +
                       std::to_string(n) + " values, got " +
                       std::to_string(values_.size()));
  check_finite("tensor", values_);
}

Tensor Tensor::scalar(double v) { return Tensor({1}, {v}); }

Tensor Tensor::zeros(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return Tensor(shape, std::vector<double>(n, 0.0));
}

Tensor Tensor::full(const Shape& shape, double v) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return Tensor(shape, std::vector<double>(n, v));
}

std::size_t Tensor::rows() const { return shape_.empty() ? 0 : shape_[0]; }

std::size_t Tensor::cols() const { return shape_.size() == 2 ? shape_[1] : 1; }

double Tensor::item() const {
  if (!is_scalar())
    fail("item", "tensor has " + std::to_string(numel()) + " elements");
  return values_[0];
}

bool Tensor::recorded() const {
  GradientTape* t = GradientTape::active();
  return t != nullptr && t->live(*this);
}

const Tensor& GradientMap::at(const Tensor& leaf) const {
  auto it = leaf.epoch_ == epoch_ ? grads_.find(leaf.node_) : grads_.end();
  if (it == grads_.end())
    fail("gradient_map",
         "tensor was not watched on the tape that produced this map");
  return it->second;
}

GradientTape::GradientTape() {
  if (g_active_tape != nullptr)
    fail("gradient_tape", "another tape is already active on this thread");
  epoch_ = g_epoch_counter.fetch_add(1);
  g_active_tape = this;
}

GradientTape::~GradientTape() {
  if (g_active_tape == this) g_active_tape = nullptr;
}

GradientTape* GradientTape::active() { return g_active_tape; }

bool GradientTape::live(const Tensor& t) const {
  return t.epoch_ == epoch_ && t.node_ >= 0;
}

int GradientTape::node_of(const Tensor& t) const {
  return live(t) ? t.node_ : -1;
}

void GradientTape::watch(Tensor& t) {
  if (consumed_) fail("gradient_tape", "tape already consumed by backward");
  if (live(t)) return;
  t.epoch_ = epoch_;
  t.node_ = next_node_++;
  t.requires_grad_ = true;
  leaf_shapes_.resize(static_cast<std::size_t>(next_node_));
  leaf_shapes_[static_cast<std::size_t>(t.node_)] = t.shape();
  watched_nodes_.push_back(t.node_);
}

void GradientTape::record(Tensor& out, BackwardFn back) {
  if (consumed_) fail("gradient_tape", "tape already consumed by backward");
  int node = next_node_++;
  out.epoch_ = epoch_;
  out.node_ = node;
  out.requires_grad_ = true;
  leaf_shapes_.resize(static_cast<std::size_t>(next_node_));
  ops_.push_back({node, std::move(back)});
}

GradientMap GradientTape::backward(const Tensor& loss) {
  if (consumed_) fail("gradient_tape", "tape already consumed by backward");
  if (!loss.is_scalar())
    fail("gradient_tape", "backward requires a scalar loss, got shape " +
                              shape_str(loss.shape()));
  if (loss.node_ >= 0 && loss.epoch_ != epoch_)
    fail("gradient_tape", "loss was recorded on a different tape");
  consumed_ = true;

  std::vector<std::vector<double>> grads(static_cast<std::size_t>(next_node_));
  if (loss.epoch_ == epoch_ && loss.node_ >= 0) {
    slot(grads, loss.node_, 1)[0] = 1.0;
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
      const auto& g = grads[static_cast<std::size_t>(it->out)];
      if (g.empty()) continue;
      it->back(g, grads);
    }
  }

  GradientMap out;
  out.epoch_ = epoch_;
  for (int node : watched_nodes_) {
    const Shape& shape = leaf_shapes_[static_cast<std::size_t>(node)];
    auto& g = grads[static_cast<std::size_t>(node)];
    if (g.empty()) {
      out.grads_.emplace(node, Tensor::zeros(shape));
    } else {
      out.grads_.emplace(node, Tensor(shape, std::move(g)));
    }
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  BinaryLayout l = binary_layout("add", a, b);
  std::vector<double> out(l.n);
  for (std::size_t i = 0; i < l.n; ++i)
    out[i] = (l.a_scalar ? a.at(0) : a.at(i)) + (l.b_scalar ? b.at(0) : b.at(i));
  Tensor r(l.shape, std::move(out));

  GradientTape* t = GradientTape::active();
  if (t == nullptr) return r;
  int na = t->node_of(a), nb = t->node_of(b);
  if (na < 0 && nb < 0) return r;
  std::size_t n = l.n, an = a.numel(), bn = b.numel();
  bool as = l.a_scalar, bs = l.b_scalar;
  t->record(r, [=](const std::vector<double>& og, auto& grads) {
    if (na >= 0) {
      auto& ga = slot(grads, na, an);
      if (as) {
        ga[0] += reduce_sum(og);
      } else {
        for (std::size_t i = 0; i < n; ++i) ga[i] += og[i];
      }
    }
    if (nb >= 0) {
      auto& gb = slot(grads, nb, bn);
      if (bs) {
        gb[0] += reduce_sum(og);
      } else {
        for (std::size_t i = 0; i < n; ++i) gb[i] += og[i];
      }
    }
  });
  return r;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  BinaryLayout l = binary_layout("sub", a, b);
  std::vector<double> out(l.n);
  for (std::size_t i = 0; i < l.n; ++i)
    out[i] = (l.a_scalar ? a.at(0) : a.at(i)) - (l.b_scalar ? b.at(0) : b.at(i));
  Tensor r(l.shape, std::move(out));

  GradientTape* t = GradientTape::active();
  if (t == nullptr) return r;
  int na = t->node_of(a), nb = t->node_of(b);
  if (na < 0 && nb < 0) return r;
  std::size_t n = l.n, an = a.numel(), bn = b.numel();
  bool as = l.a_scalar, bs = l.b_scalar;
  t->record(r, [=](const std::vector<double>& og, auto& grads) {
    if (na >= 0) {
      auto& ga = slot(grads, na, an);
      if (as) {
        ga[0] += reduce_sum(og);
      } else {
        for (std::size_t i = 0; i < n; ++i) ga[i] += og[i];
      }
    }
    if (nb >= 0) {
      auto& gb = slot(grads, nb, bn);
      if (bs) {
        gb[0] -= reduce_sum(og);
      } else {
        for (std::size_t i = 0; i < n; ++i) gb[i] -= og[i];
      }
    }
  });
  return r;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  BinaryLayout l = binary_layout("mul", a, b);
  std::vector<double> out(l.n);
  for (std::size_t i = 0; i < l.n; ++i)
    out[i] = (l.a_scalar ? a.at(0) : a.at(i)) * (l.b_scalar ? b.at(0) : b.at(i));
  Tensor r(l.shape, std::move(out));

  GradientTape* t = GradientTape::active();
  if (t == nullptr) return r;
  int na = t->node_of(a), nb = t->node_of(b);
  if (na < 0 && nb < 0) return r;
  std::size_t n = l.n, an = a.numel(), bn = b.numel();
  bool as = l.a_scalar, bs = l.b_scalar;
  std::vector<double> av = a.values(), bv = b.values();
  t->record(r, [=](const std::vector<double>& og, auto& grads) {
    if (na >= 0) {
      auto& ga = slot(grads, na, an);
      for (std::size_t i = 0; i < n; ++i) {
        double g = og[i] * (bs ? bv[0] : bv[i]);
        ga[as ? 0 : i] += g;
      }
    }
    if (nb >= 0) {
      auto& gb = slot(grads, nb, bn);
      for (std::size_t i = 0; i < n; ++i) {
        double g = og[i] * (as ? av[0] : av[i]);
        gb[bs ? 0 : i] += g;
      }
    }
  });
  return r;
}

Tensor scale(const Tensor& a, double c) {
  if (!std::isfinite(c)) fail("scale", "non-finite factor");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * a.at(i);
  Tensor r(a.shape(), std::move(out));

  GradientTape* t = GradientTape::active();
  if (t == nullptr) return r;
  int na = t->node_of(a);
  if (na < 0) return r;
  std::size_t n = a.numel();
  t->record(r, [=](const std::vector<double>& og, auto& grads) {
    auto& ga = slot(grads, na, n);
    for (std::size_t i = 0; i < n; ++i) ga[i] += c * og[i];
  });
  return r;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2) fail("matmul", "left operand must be rank 2");
  std::size_t n = a.rows(), m = a.cols();
  if (b.rank() == 1) {
    if (b.numel() != m)
      fail("matmul", "inner dimension mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
    std::vector<double> out(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < m; ++j) s += a.at(i, j) * b.at(j);
      out[i] = s;
    }
    Tensor r({n}, std::move(out));

    GradientTape* t = GradientTape::active();
    if (t == nullptr) return r;
    int na = t->node_of(a), nb = t->node_of(b);
    if (na < 0 && nb < 0) return r;
    std::vector<double> av = a.values(), bv = b.values();
    t->record(r, [=](const std::vector<double>& og, auto& grads) {
      if (na >= 0) {
        auto& ga = slot(grads, na, n * m);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < m; ++j) ga[i * m + j] += og[i] * bv[j];
      }
      if (nb >= 0) {
        auto& gb = slot(grads, nb, m);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < m; ++j) gb[j] += av[i * m + j] * og[i];
      }
    });
    return r;
  }

  if (b.rank() != 2 || b.rows() != m)
    fail("matmul", "inner dimension mismatch " + shape_str(a.shape()) +
                       " vs " + shape_str(b.shape()));
  std::size_t k = b.cols();
  std::vector<double> out(n * k, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      double av = a.at(i, j);
      for (std::size_t c = 0; c < k; ++c) out[i * k + c] += av * b.at(j, c);
    }
  Tensor r({n, k}, std::move(out));

  GradientTape* t = GradientTape::active();
  if (t == nullptr) return r;
  int na = t->node_of(a), nb = t->node_of(b);
  if (na < 0 && nb < 0) return r;
  std::vector<double> av = a.values(), bv = b.values();
  t->record(r, [=](const std::vector<double>& og, auto& grads) {
    if (na >= 0) {
      auto& ga = slot(grads, na, n * m);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) {
          double s = 0.0;
          for (std::size_t c = 0; c < k; ++c) s += og[i * k + c] * bv[j * k + c];
          ga[i * m + j] += s;
        }
    }
    if (nb >= 0) {
      auto& gb = slot(grads, nb, m * k);
      for (std::size_t j = 0; j < m; ++j)
        for (std::size_t c = 0; c < k; ++c) {
          double s = 0.0;
          for (std::size_t i = 0; i < n; ++i) s += av[i * m + j] * og[i * k + c];
          gb[j * k + c] += s;
        }
    }
  });
  return r;
}

namespace {

template <typename Fwd, typename Bwd>
Tensor unary_op(const char* name, const Tensor& a, Fwd fwd, Bwd local_grad) {
  (void)name;
  std::size_t n = a.numel();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(a.at(i));
  Tensor r(a.shape(), std::move(out));

  GradientTape* t = GradientTape::active();
  if (t == nullptr) return r;
  int na = t->node_of(a);
  if (na < 0) return r;
  std::vector<double> av = a.values(), rv = r.values();
  t->record(r, [=](const std::vector<double>& og, auto& grads) {
    auto& ga = slot(grads, na, n);
    for (std::size_t i = 0; i < n; ++i) ga[i] += og[i] * local_grad(av[i], rv[i]);
  });
  return r;
}

}  // namespace

Tensor sigmoid(const Tensor& a) {
  return unary_op(
      "sigmoid", a, [](double x) { return stable_sigmoid(x); },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor log_sigmoid(const Tensor& a) {
  return unary_op(
      "log_sigmoid", a, [](double x) { return stable_log_sigmoid(x); },
      [](double x, double) { return stable_sigmoid(-x); });
}

Tensor tanh(const Tensor& a) {
  return unary_op(
      "tanh", a, [](double x) { return std::tanh(x); },
      [](double, double y) { return 1.0 - y * y; });
}

Tensor square(const Tensor& a) {
  return unary_op(
      "square", a, [](double x) { return x * x; },
      [](double x, double) { return 2.0 * x; });
}

Tensor sum(const Tensor& a) {
  Tensor r = Tensor::scalar(reduce_sum(a.values()));
  GradientTape* t = GradientTape::active();
  if (t == nullptr) return r;
  int na = t->node_of(a);
  if (na < 0) return r;
  std::size_t n = a.numel();
  t->record(r, [=](const std::vector<double>& og, auto& grads) {
    auto& ga = slot(grads, na, n);
    for (std::size_t i = 0; i < n; ++i) ga[i] += og[0];
  });
  return r;
}

Tensor mean(const Tensor& a) {
  std::size_t n = a.numel();
  Tensor r = Tensor::scalar(reduce_sum(a.values()) / static_cast<double>(n));
  GradientTape* t = GradientTape::active();
  if (t == nullptr) return r;
  int na = t->node_of(a);
  if (na < 0) return r;
  t->record(r, [=](const std::vector<double>& og, auto& grads) {
    auto& ga = slot(grads, na, n);
    double g = og[0] / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) ga[i] += g;
  });
  return r;
}

Tensor concat(const Tensor& a, const Tensor& b) {
  if (a.rank() != 1 || b.rank() != 1)
    fail("concat", "expects rank-1 operands, got " + shape_str(a.shape()) +
                       " and " + shape_str(b.shape()));
  std::size_t an = a.numel(), bn = b.numel();
  std::vector<double> out;
  out.reserve(an + bn);
  out.insert(out.end(), a.values().begin(), a.values().end());
  out.insert(out.end(), b.values().begin(), b.values().end());
  Tensor r({an + bn}, std::move(out));

  GradientTape* t = GradientTape::active();
  if (t == nullptr) return r;
  int na = t->node_of(a), nb = t->node_of(b);
  if (na < 0 && nb < 0) return r;
  t->record(r, [=](const std::vector<double>& og, auto& grads) {
    if (na >= 0) {
      auto& ga = slot(grads, na, an);
      for (std::size_t i = 0; i < an; ++i) ga[i] += og[i];
    }
    if (nb >= 0) {
      auto& gb = slot(grads, nb, bn);
      for (std::size_t i = 0; i < bn; ++i) gb[i] += og[an + i];
    }
  });
  return r;
}

}  // namespace dco
