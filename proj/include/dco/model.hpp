// SPDX-License-Identifier: Apache-2.0
//
// Conditional epsilon-prediction network: a small MLP over the noisy point,
// sinusoidal time features and a condition embedding drawn from a table with
// a distinguished null row.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dco/schedule.hpp"
#include "dco/tensor.hpp"

namespace dco {

class LoraAdapter;

class ConditionTable {
 public:
  static constexpr int kNull = 0;

  explicit ConditionTable(std::size_t embed_dim);

  int add(const std::string& name, Tensor row);
  int index_of(const std::string& name) const;  // -1 when absent
  int require(const std::string& name) const;
  const Tensor& row(int id) const;
  Tensor& mutable_row(int id);
  const std::string& name_of(int id) const;

  std::size_t size() const { return rows_.size(); }
  std::size_t embed_dim() const { return embed_dim_; }

 private:
  std::size_t embed_dim_;
  std::vector<std::string> names_;
  std::vector<Tensor> rows_;
};

struct ModelSpec {
  std::size_t data_dim = 2;
  std::size_t embed_dim = 8;
  std::size_t time_dim = 8;  // even; sin/cos pairs at dyadic frequencies
  std::vector<std::size_t> hidden = {64, 64};
  std::string schedule = "cosine-vp";
};

class EpsModel {
 public:
  struct Layer {
    std::string name;
    Tensor w;
    Tensor b;
  };

  EpsModel(ModelSpec spec, const std::vector<std::string>& condition_names,
           std::uint64_t seed);

  // Traced forward with an explicit condition embedding. The adapter, when
  // given, contributes tau * A (B h) on each wrapped dense layer.
  Tensor forward(const std::vector<double>& z, const Tensor& cond, double t,
                 const LoraAdapter* adapter = nullptr) const;

  // Plain evaluation against a table row; identical arithmetic to forward().
  std::vector<double> predict(const std::vector<double>& z, int cond_id,
                              double t) const;

  std::vector<double> time_features(double t) const;

  const ModelSpec& spec() const { return spec_; }
  const NoiseSchedule& schedule() const { return schedule_; }
  ConditionTable& conditions() { return table_; }
  const ConditionTable& conditions() const { return table_; }
  std::vector<Layer>& layers() { return layers_; }
  const std::vector<Layer>& layers() const { return layers_; }

  // Network weights only; condition rows are fixed at construction.
  std::vector<Tensor*> trainable_parameters();

  void freeze() { frozen_ = true; }
  bool frozen() const { return frozen_; }

  // FNV-1a over the little-endian bytes of all parameters and table rows.
  std::uint64_t param_checksum() const;

 private:
  ModelSpec spec_;
  NoiseSchedule schedule_;
  ConditionTable table_;
  std::vector<Layer> layers_;
  bool frozen_ = false;
};

}  // namespace dco
