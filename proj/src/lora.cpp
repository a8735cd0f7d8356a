// SPDX-License-Identifier: Apache-2.0
//
// Adapter construction, merging, alignment and the adapted-model view.

#include "dco/lora.hpp"

#include <cmath>
#include <set>
#include <stdexcept>

#include "dco/rng.hpp"

namespace dco {

Tensor LoraLayer::dense_delta() const { return matmul(a, b); }

LoraAdapter LoraAdapter::fresh(const EpsModel& model, std::size_t rank,
                               std::uint64_t seed) {
  if (rank == 0) throw std::runtime_error("lora: rank must be positive");
  LoraAdapter out;
  out.requested_rank_ = rank;
  out.base_checksum_ = model.param_checksum();
  for (const auto& layer : model.layers()) {
    if (layer.name == "out") continue;
    std::size_t n = layer.w.rows(), m = layer.w.cols();
    std::size_t r = std::min({rank, n, m});
    Rng rng(derive_seed(seed, "lora:" + layer.name));
    std::vector<double> a(n * r);
    for (double& x : a) x = 0.02 * rng.normal();
    out.parts_.push_back({layer.name, Tensor({n, r}, std::move(a)),
                          Tensor::zeros({r, m})});
  }
  return out;
}

void LoraAdapter::set_tau(double tau) {
  if (!std::isfinite(tau)) throw std::runtime_error("lora: non-finite tau");
  tau_ = tau;
}

Tensor LoraAdapter::dense_delta(const std::string& target) const {
  Tensor acc;
  bool found = false;
  for (const auto& part : parts_) {
    if (part.target != target) continue;
    Tensor d = part.dense_delta();
    acc = found ? add(acc, d) : d;
    found = true;
  }
  if (!found)
    throw std::runtime_error("lora: adapter has no part for target '" +
                             target + "'");
  return acc;
}

std::vector<std::string> LoraAdapter::targets() const {
  std::vector<std::string> out;
  for (const auto& part : parts_) {
    bool seen = false;
    for (const auto& t : out) seen = seen || t == part.target;
    if (!seen) out.push_back(part.target);
  }
  return out;
}

namespace {

void check_same_layer_sets(const LoraAdapter& a, const LoraAdapter& b,
                           const char* op) {
  auto ta = a.targets(), tb = b.targets();
  std::set<std::string> sa(ta.begin(), ta.end()), sb(tb.begin(), tb.end());
  if (sa != sb)
    throw std::runtime_error(std::string(op) +
                             ": adapters wrap different layer sets");
  for (const auto& t : ta) {
    Tensor da = a.dense_delta(t), db = b.dense_delta(t);
    if (da.shape() != db.shape())
      throw std::runtime_error(std::string(op) +
                               ": incompatible shapes for target '" + t + "'");
  }
}

}  // namespace

LoraAdapter merge(const MergeSpec& spec) {
  if (spec.entries.empty())
    throw std::runtime_error("merge: empty merge spec");
  for (const auto& e : spec.entries)
    if (e.adapter == nullptr)
      throw std::runtime_error("merge: null adapter in merge spec");
  const LoraAdapter& first = *spec.entries.front().adapter;
  for (const auto& e : spec.entries)
    check_same_layer_sets(first, *e.adapter, "merge");

  LoraAdapter out;
  out.set_tau(1.0);
  out.set_base_checksum(first.base_checksum());
  for (const auto& target : first.targets()) {
    for (const auto& e : spec.entries) {
      double factor = e.coeff * e.adapter->tau();
      if (!std::isfinite(factor))
        throw std::runtime_error("merge: non-finite coefficient");
      for (const auto& part : e.adapter->parts()) {
        if (part.target != target) continue;
        std::vector<double> b = part.b.values();
        for (double& x : b) x = factor * x;
        out.parts().push_back(
            {target, part.a, Tensor(part.b.shape(), std::move(b))});
      }
    }
  }
  return out;
}

std::vector<LayerAlignment> adapter_alignment(const LoraAdapter& a,
                                              const LoraAdapter& b) {
  check_same_layer_sets(a, b, "adapter_alignment");
  std::vector<LayerAlignment> out;
  for (const auto& target : a.targets()) {
    Tensor da = a.dense_delta(target), db = b.dense_delta(target);
    std::size_t n = da.rows(), m = da.cols();
    double acc = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      double dot = 0.0, na = 0.0, nb = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        double x = da.at(i, j), y = db.at(i, j);
        dot += x * y;
        na += x * x;
        nb += y * y;
      }
      if (na > 0.0 && nb > 0.0) acc += dot / std::sqrt(na * nb);
    }
    out.push_back({target, acc / static_cast<double>(m)});
  }
  return out;
}

AdaptedModel::AdaptedModel(const EpsModel& base, LoraAdapter adapter)
    : base_(&base), adapter_(std::move(adapter)), table_(base.conditions()) {
  for (const auto& part : adapter_.parts()) {
    const EpsModel::Layer* layer = nullptr;
    for (const auto& l : base.layers())
      if (l.name == part.target) layer = &l;
    if (layer == nullptr)
      throw std::runtime_error("attach: adapter references unknown layer '" +
                               part.target + "'");
    std::size_t n = layer->w.rows(), m = layer->w.cols();
    if (part.a.rank() != 2 || part.b.rank() != 2 || part.a.rows() != n ||
        part.b.cols() != m || part.a.cols() != part.b.rows())
      throw std::runtime_error("attach: shape mismatch on target '" +
                               part.target + "'");
    if (part.rank() > std::min(n, m))
      throw std::runtime_error("attach: rank exceeds min(n,m) on target '" +
                               part.target + "'");
  }
}

int AdaptedModel::add_token(const std::string& name,
                            const std::string& init_from) {
  int src = table_.require(init_from);
  int id = table_.add(name, table_.row(src));
  tokens_.push_back({name, init_from, id});
  return id;
}

Tensor AdaptedModel::forward(const std::vector<double>& z, const Tensor& cond,
                             double t) const {
  return base_->forward(z, cond, t, &adapter_);
}

std::vector<double> AdaptedModel::predict(const std::vector<double>& z,
                                          int cond_id, double t) const {
  return forward(z, table_.row(cond_id), t).values();
}

std::vector<Tensor*> AdaptedModel::trainable_adapter_parameters() {
  std::vector<Tensor*> out;
  for (auto& part : adapter_.parts()) {
    out.push_back(&part.a);
    out.push_back(&part.b);
  }
  return out;
}

std::vector<Tensor*> AdaptedModel::trainable_embedding_parameters() {
  std::vector<Tensor*> out;
  for (const auto& token : tokens_) out.push_back(&table_.mutable_row(token.row));
  return out;
}

AdaptedModel attach(const EpsModel& base, LoraAdapter adapter) {
  return AdaptedModel(base, std::move(adapter));
}

}  // namespace dco
