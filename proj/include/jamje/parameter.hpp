#pragma once

#include <cmath>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "jamje/autodiff.hpp"

namespace jamje {

/// A named trainable tensor. Modules hold these by shared_ptr; two modules
/// holding the same pointer share storage.
struct Parameter {
  std::string name;
  Tensor value;
};

using ParamPtr = std::shared_ptr<Parameter>;

inline ParamPtr make_param(std::string name, Tensor value) {
  return std::make_shared<Parameter>(Parameter{std::move(name), std::move(value)});
}

/// He-normal initialized weight of shape (fan_in, fan_out).
inline ParamPtr he_normal(std::string name, std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng,
                          double gain = 2.0) {
  std::normal_distribution<double> dist(0.0, std::sqrt(gain / static_cast<double>(fan_in)));
  Tensor w(Shape{fan_in, fan_out});
  for (double& v : w.values()) v = dist(rng);
  return make_param(std::move(name), std::move(w));
}

inline ParamPtr zeros(std::string name, Shape shape) { return make_param(std::move(name), Tensor(std::move(shape))); }

/// Appends `p` unless the same storage is already listed.
inline void append_unique(std::vector<ParamPtr>& out, const ParamPtr& p) {
  for (const ParamPtr& q : out)
    if (q.get() == p.get()) return;
  out.push_back(p);
}

/// Maps parameters onto one tape. Each distinct storage becomes exactly one
/// node, so every reader of a shared parameter contributes to the same gradient.
class ParamBinding {
 public:
  /// `trainable == false` binds parameters as constants (inference).
  ParamBinding(ad::Tape& tape, bool trainable) : tape_(&tape), trainable_(trainable) {}

  ad::Var operator()(const ParamPtr& p) {
    auto it = vars_.find(p.get());
    if (it != vars_.end()) return it->second;
    ad::Var v = trainable_ ? tape_->leaf(p->value) : tape_->constant(p->value);
    vars_.emplace(p.get(), v);
    order_.push_back(p);
    return v;
  }

  /// Routes every later read of `p` to `v` (for example a slice of a flat vector).
  void assign(const ParamPtr& p, ad::Var v) {
    if (vars_.count(p.get())) throw std::logic_error("ParamBinding: " + p->name + " already bound");
    if (v.shape() != p->value.shape()) throw ShapeError("ParamBinding::assign " + p->name, v.shape(), p->value.shape());
    vars_.emplace(p.get(), v);
    order_.push_back(p);
  }

  ad::Tape& tape() { return *tape_; }
  bool trainable() const { return trainable_; }

  /// Parameters touched by this forward pass in first-use order.
  const std::vector<ParamPtr>& bound() const { return order_; }

  bool contains(const ParamPtr& p) const { return vars_.count(p.get()) != 0; }

  ad::Var var(const ParamPtr& p) const { return vars_.at(p.get()); }

 private:
  ad::Tape* tape_;
  bool trainable_;
  std::unordered_map<const Parameter*, ad::Var> vars_;
  std::vector<ParamPtr> order_;
};

}  // namespace jamje
