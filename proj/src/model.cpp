// SPDX-License-Identifier: Apache-2.0
//
// Condition table and epsilon-prediction MLP.

#include "dco/model.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

#include "dco/lora.hpp"
#include "dco/serialize.hpp"

namespace dco {

namespace {
constexpr double kPi = std::numbers::pi;
}

ConditionTable::ConditionTable(std::size_t embed_dim) : embed_dim_(embed_dim) {
  if (embed_dim_ == 0)
    throw std::runtime_error("condition_table: embed_dim must be positive");
  names_.push_back("<null>");
  rows_.push_back(Tensor::zeros({embed_dim_}));
}

int ConditionTable::add(const std::string& name, Tensor row) {
  if (name.empty())
    throw std::runtime_error("condition_table: empty condition name");
  if (index_of(name) >= 0)
    throw std::runtime_error("condition_table: duplicate condition '" + name +
                             "'");
  if (row.numel() != embed_dim_)
    throw std::runtime_error("condition_table: row for '" + name +
                             "' has wrong dimension");
  names_.push_back(name);
  rows_.push_back(std::move(row));
  return static_cast<int>(rows_.size()) - 1;
}

int ConditionTable::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < names_.size(); ++i)
    if (names_[i] == name) return static_cast<int>(i);
  return -1;
}

int ConditionTable::require(const std::string& name) const {
  int id = index_of(name);
  if (id < 0)
    throw std::runtime_error("condition_table: unknown condition '" + name +
                             "'");
  return id;
}

const Tensor& ConditionTable::row(int id) const {
  if (id < 0 || id >= static_cast<int>(rows_.size()))
    throw std::runtime_error("condition_table: unknown condition id " +
                             std::to_string(id));
  return rows_[static_cast<std::size_t>(id)];
}

Tensor& ConditionTable::mutable_row(int id) {
  return const_cast<Tensor&>(static_cast<const ConditionTable*>(this)->row(id));
}

const std::string& ConditionTable::name_of(int id) const {
  row(id);  // bounds check
  return names_[static_cast<std::size_t>(id)];
}

EpsModel::EpsModel(ModelSpec spec,
                   const std::vector<std::string>& condition_names,
                   std::uint64_t seed)
    : spec_(std::move(spec)),
      schedule_(spec_.schedule),
      table_(spec_.embed_dim) {
  if (spec_.data_dim == 0)
    throw std::runtime_error("model: data_dim must be positive");
  if (spec_.time_dim == 0 || spec_.time_dim % 2 != 0)
    throw std::runtime_error("model: time_dim must be positive and even");
  if (spec_.hidden.empty())
    throw std::runtime_error("model: at least one hidden layer required");

  // Condition rows mimic a frozen text encoder: fixed unit-norm vectors,
  // deterministic in (seed, name). Only overlay tokens are ever trained.
  for (const auto& name : condition_names) {
    Rng rng(derive_seed(seed, "cond:" + name));
    std::vector<double> v = rng.normal_vec(spec_.embed_dim);
    double norm = 0.0;
    for (double x : v) norm += x * x;
    norm = std::sqrt(norm);
    for (double& x : v) x /= norm;
    table_.add(name, Tensor({spec_.embed_dim}, std::move(v)));
  }

  std::size_t in_dim = spec_.data_dim + spec_.time_dim + spec_.embed_dim;
  std::size_t prev = in_dim;
  Rng rng(derive_seed(seed, "layers"));
  for (std::size_t i = 0; i < spec_.hidden.size(); ++i) {
    std::size_t n = spec_.hidden[i];
    double std_dev = 1.0 / std::sqrt(static_cast<double>(prev));
    std::vector<double> w(n * prev);
    for (double& x : w) x = std_dev * rng.normal();
    layers_.push_back({"layer" + std::to_string(i),
                       Tensor({n, prev}, std::move(w)),
                       Tensor::zeros({n})});
    prev = n;
  }
  // Zero output layer: a fresh model predicts eps_hat = 0 everywhere.
  layers_.push_back({"out", Tensor::zeros({spec_.data_dim, prev}),
                     Tensor::zeros({spec_.data_dim})});
}

std::vector<double> EpsModel::time_features(double t) const {
  if (!(t >= 0.0 && t <= 1.0))
    throw std::runtime_error("model: t outside [0,1]: " + std::to_string(t));
  std::vector<double> f(spec_.time_dim);
  double freq = 1.0;
  for (std::size_t k = 0; k < spec_.time_dim / 2; ++k) {
    f[2 * k] = std::sin(kPi * freq * t);
    f[2 * k + 1] = std::cos(kPi * freq * t);
    freq *= 2.0;
  }
  return f;
}

Tensor EpsModel::forward(const std::vector<double>& z, const Tensor& cond,
                         double t, const LoraAdapter* adapter) const {
  if (z.size() != spec_.data_dim)
    throw std::runtime_error("model: input dimension mismatch");
  if (cond.numel() != spec_.embed_dim)
    throw std::runtime_error("model: condition embedding dimension mismatch");

  Tensor zt({spec_.data_dim}, z);
  Tensor tf({spec_.time_dim}, time_features(t));
  Tensor h = concat(concat(zt, tf), cond);

  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const Layer& layer = layers_[i];
    Tensor pre = matmul(layer.w, h);
    if (adapter != nullptr) {
      for (const LoraLayer& part : adapter->parts()) {
        if (part.target != layer.name) continue;
        pre = add(pre,
                  scale(matmul(part.a, matmul(part.b, h)), adapter->tau()));
      }
    }
    pre = add(pre, layer.b);
    h = (i + 1 == layers_.size()) ? pre : tanh(pre);
  }
  return h;
}

std::vector<double> EpsModel::predict(const std::vector<double>& z,
                                      int cond_id, double t) const {
  return forward(z, table_.row(cond_id), t).values();
}

std::vector<Tensor*> EpsModel::trainable_parameters() {
  std::vector<Tensor*> out;
  for (auto& layer : layers_) {
    out.push_back(&layer.w);
    out.push_back(&layer.b);
  }
  return out;
}

std::uint64_t EpsModel::param_checksum() const {
  ByteWriter w;
  for (const auto& layer : layers_) {
    w.f64_array(layer.w.values());
    w.f64_array(layer.b.values());
  }
  for (std::size_t i = 0; i < table_.size(); ++i)
    w.f64_array(table_.row(static_cast<int>(i)).values());
  return fnv1a(w.data().data(), w.data().size());
}

}  // namespace dco
