// SPDX-License-Identifier: Apache-2.0
//
// Low-rank adapters, learned token embeddings, arithmetic merging and the
// column-cosine alignment diagnostic.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dco/model.hpp"
#include "dco/tensor.hpp"

namespace dco {

// One factor pair contributing tau * A (B h) to a wrapped dense layer. A
// merged adapter carries several parts per target; keeping them separate
// preserves exact per-part arithmetic instead of refactoring the sum.
struct LoraLayer {
  std::string target;
  Tensor a;  // [n, r]
  Tensor b;  // [r, m]

  std::size_t rank() const { return a.cols(); }
  Tensor dense_delta() const;  // a @ b as a plain [n, m] tensor
};

struct TokenEmbedding {
  std::string name;
  std::string init_from;  // table row the vector was copied from
  int row = -1;           // row id in the adapted model's condition table
};

class LoraAdapter {
 public:
  LoraAdapter() = default;

  // One part per hidden weight matrix of the host model. Per-layer rank is
  // clamped to min(n, m); A ~ N(0, 0.02^2) and B = 0 so the initial delta
  // vanishes and the adapted model starts bit-identical to its base.
  static LoraAdapter fresh(const EpsModel& model, std::size_t rank,
                           std::uint64_t seed);

  std::vector<LoraLayer>& parts() { return parts_; }
  const std::vector<LoraLayer>& parts() const { return parts_; }

  // Dense summed delta for one target, part by part.
  Tensor dense_delta(const std::string& target) const;
  std::vector<std::string> targets() const;  // unique, in first-seen order

  double tau() const { return tau_; }
  void set_tau(double tau);

  std::uint64_t base_checksum() const { return base_checksum_; }
  void set_base_checksum(std::uint64_t c) { base_checksum_ = c; }

  std::size_t requested_rank() const { return requested_rank_; }
  void set_requested_rank(std::size_t r) { requested_rank_ = r; }

 private:
  std::vector<LoraLayer> parts_;
  double tau_ = 1.0;
  std::size_t requested_rank_ = 0;
  std::uint64_t base_checksum_ = 0;
};

struct MergeSpec {
  struct Entry {
    const LoraAdapter* adapter;
    double coeff;
  };
  std::vector<Entry> entries;
};

// Effective delta Sum_i coeff_i * tau_i * A_i B_i, realized by concatenating
// the factor pairs with the scalar folded into B. The result has tau = 1.
LoraAdapter merge(const MergeSpec& spec);

struct LayerAlignment {
  std::string target;
  double score;  // mean column cosine in [-1, 1]; zero columns contribute 0
};

std::vector<LayerAlignment> adapter_alignment(const LoraAdapter& a,
                                              const LoraAdapter& b);

// A base model plus an adapter and an overlay condition table that may carry
// new learned tokens. The base is shared and never mutated.
class AdaptedModel {
 public:
  AdaptedModel(const EpsModel& base, LoraAdapter adapter);

  // Adds a new token row initialized as a copy of an existing row.
  int add_token(const std::string& name, const std::string& init_from);

  Tensor forward(const std::vector<double>& z, const Tensor& cond,
                 double t) const;
  std::vector<double> predict(const std::vector<double>& z, int cond_id,
                              double t) const;

  ConditionTable& conditions() { return table_; }
  const ConditionTable& conditions() const { return table_; }
  LoraAdapter& adapter() { return adapter_; }
  const LoraAdapter& adapter() const { return adapter_; }
  const EpsModel& base() const { return *base_; }
  const std::vector<TokenEmbedding>& new_tokens() const { return tokens_; }

  std::vector<Tensor*> trainable_adapter_parameters();
  std::vector<Tensor*> trainable_embedding_parameters();

 private:
  const EpsModel* base_;
  LoraAdapter adapter_;
  ConditionTable table_;
  std::vector<TokenEmbedding> tokens_;
};

// Validates shapes and wires the adapter onto the model.
AdaptedModel attach(const EpsModel& base, LoraAdapter adapter);

}  // namespace dco
