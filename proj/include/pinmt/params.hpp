#pragma once

#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "pinmt/rng.hpp"
#include "pinmt/tensor.hpp"

namespace pinmt {

enum class ParamGroup { nmt, plm };

inline std::string_view group_name(ParamGroup g) { return g == ParamGroup::plm ? "plm" : "nmt"; }

/// Ordered registry of named trainable tensors. Insertion order is the
/// canonical order for optimizers and checkpoints.
template <class T>
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor<T> tensor;
    ParamGroup group;
  };

  Tensor<T> add(const std::string& name, Tensor<T> t, ParamGroup group) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter name '" + name + "'");
    t.set_requires_grad(true);
    index_[name] = entries_.size();
    entries_.push_back({name, t, group});
    return t;
  }

  /// Xavier/Glorot uniform: U(-a, a), a = sqrt(6 / (fan_in + fan_out)).
  Tensor<T> xavier(const std::string& name, std::size_t fan_in, std::size_t fan_out, ParamGroup group, Rng& rng) {
    const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::vector<T> v(fan_in * fan_out);
    for (auto& x : v) x = static_cast<T>(rng.uniform(-a, a));
    return add(name, Tensor<T>::from({fan_in, fan_out}, std::move(v)), group);
  }

  Tensor<T> constant(const std::string& name, Shape shape, T value, ParamGroup group) {
    return add(name, Tensor<T>::full(std::move(shape), value), group);
  }

  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Entry>& entries() { return entries_; }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  Tensor<T> get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no parameter named '" + name + "'");
    return entries_[it->second].tensor;
  }

  void zero_grad() {
    for (auto& e : entries_) e.tensor.zero_grad();
  }

  /// Enables or disables gradient recording for a whole group.
  void set_trainable(ParamGroup g, bool on) {
    for (auto& e : entries_)
      if (e.group == g) e.tensor.set_requires_grad(on);
  }

  std::size_t count(ParamGroup g) const {
    std::size_t n = 0;
    for (const auto& e : entries_)
      if (e.group == g) n += e.tensor.size();
    return n;
  }

  /// Deep copy of every value, keyed by name.
  std::map<std::string, std::vector<T>> snapshot() const {
    std::map<std::string, std::vector<T>> out;
    for (const auto& e : entries_) out[e.name].assign(e.tensor.values().begin(), e.tensor.values().end());
    return out;
  }

 private:
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace pinmt
