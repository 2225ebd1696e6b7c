#pragma once

#include <functional>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "cpra/autograd.hpp"
#include "cpra/tensor.hpp"

namespace cpra {

enum class InitKind { Normal, Ones, Zeros };

// Declared learnable tensor: the model's shape walk emits one per parameter.
struct ParamSpec {
  std::string name;
  Shape shape;
  InitKind init = InitKind::Normal;
};

// Named parameter store, iterated in lexical name order.
template <typename T>
class ModelWeights {
 public:
  using Map = std::map<std::string, Tensor<T>>;

  void set(const std::string& name, Tensor<T> value) { map_[name] = std::move(value); }
  bool contains(const std::string& name) const { return map_.count(name) != 0; }

  const Tensor<T>& at(const std::string& name) const {
    auto it = map_.find(name);
    if (it == map_.end()) throw std::out_of_range("missing parameter '" + name + "'");
    return it->second;
  }
  Tensor<T>& at(const std::string& name) {
    auto it = map_.find(name);
    if (it == map_.end()) throw std::out_of_range("missing parameter '" + name + "'");
    return it->second;
  }

  std::size_t size() const noexcept { return map_.size(); }
  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : map_) n += t.size();
    return n;
  }
  auto begin() const { return map_.begin(); }
  auto end() const { return map_.end(); }
  auto begin() { return map_.begin(); }
  auto end() { return map_.end(); }

  template <typename U>
  ModelWeights<U> cast() const {
    ModelWeights<U> out;
    for (const auto& [name, t] : map_) out.set(name, t.template cast<U>());
    return out;
  }

  friend bool operator==(const ModelWeights& a, const ModelWeights& b) { return a.map_ == b.map_; }

 private:
  Map map_;
};

template <typename T>
using GradMap = std::map<std::string, Tensor<T>>;

// Hands out graph leaves for named parameters. Leaves require gradients only
// when gradient tracking is on and the name passes the trainable predicate.
template <typename T>
class ParamBinder {
 public:
  using Predicate = std::function<bool(const std::string&)>;

  explicit ParamBinder(const ModelWeights<T>& weights, bool track_grads = false, Predicate trainable = {})
      : weights_(&weights), track_(track_grads), trainable_(std::move(trainable)) {}

  Var<T> get(const std::string& name) {
    auto it = leaves_.find(name);
    if (it != leaves_.end()) return it->second;
    const bool grad = track_ && (!trainable_ || trainable_(name));
    Var<T> v = Var<T>::leaf(weights_->at(name), grad);
    leaves_.emplace(name, v);
    return v;
  }

  // Undefined Var when the parameter is absent (e.g. biases switched off).
  Var<T> maybe(const std::string& name) { return weights_->contains(name) ? get(name) : Var<T>{}; }

  // Gradients of every leaf handed out that tracks gradients; zeros if unreached.
  GradMap<T> gradients() const {
    GradMap<T> out;
    for (const auto& [name, v] : leaves_)
      if (v.requires_grad()) out.emplace(name, v.grad());
    return out;
  }

  const ModelWeights<T>& weights() const noexcept { return *weights_; }

 private:
  const ModelWeights<T>* weights_;
  bool track_;
  Predicate trainable_;
  std::map<std::string, Var<T>> leaves_;
};

// Name prefix helper: scope("spc").name("qkv_pw.weight") -> "<prefix>.spc.qkv_pw.weight".
struct Scope {
  std::string prefix;

  Scope child(const std::string& part) const { return {prefix.empty() ? part : prefix + "." + part}; }
  std::string name(const std::string& leaf) const { return prefix.empty() ? leaf : prefix + "." + leaf; }
};

// Weight plus optional bias of one conv / linear layer.
template <typename T>
struct Affine {
  Var<T> weight;
  Var<T> bias;

  static Affine bind(ParamBinder<T>& binder, const Scope& scope) {
    return {binder.get(scope.name("weight")), binder.maybe(scope.name("bias"))};
  }
};

// Spec emission helpers shared by every module.
struct SpecList {
  std::vector<ParamSpec> specs;
  bool use_bias = true;

  void affine(const Scope& scope, int out, int in, int k) {
    specs.push_back({scope.name("weight"), Shape{out, in, k, k}, InitKind::Normal});
    if (use_bias) specs.push_back({scope.name("bias"), Shape{1, out, 1, 1}, InitKind::Zeros});
  }
  void norm(const Scope& scope, int channels) {
    specs.push_back({scope.name("gamma"), Shape{1, channels, 1, 1}, InitKind::Ones});
    specs.push_back({scope.name("beta"), Shape{1, channels, 1, 1}, InitKind::Zeros});
  }
};

}  // namespace cpra
