#pragma once

#include <string>
#include <utility>
#include <vector>

#include "dmad/tensor.hpp"

namespace dmad {

/// Named parameter tensors in insertion order.
template <typename Scalar>
class ParamStore {
 public:
  using Entry = std::pair<std::string, Tensor<Scalar>>;

  void add(std::string name, Tensor<Scalar> t) {
    if (contains(name)) throw ConfigError("duplicate parameter " + name);
    t.set_requires_grad(true);
    entries_.emplace_back(std::move(name), std::move(t));
  }

  bool contains(const std::string& name) const {
    for (const auto& e : entries_)
      if (e.first == name) return true;
    return false;
  }

  Tensor<Scalar>& at(const std::string& name) {
    for (auto& e : entries_)
      if (e.first == name) return e.second;
    throw ConfigError("unknown parameter " + name);
  }
  const Tensor<Scalar>& at(const std::string& name) const {
    return const_cast<ParamStore*>(this)->at(name);
  }

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  void zero_grad() {
    for (auto& e : entries_) e.second.zero_grad();
  }

  /// Deep copy with fresh storage for every tensor.
  ParamStore clone() const {
    ParamStore out;
    for (const auto& [name, t] : entries_) out.add(name, t.detach());
    return out;
  }

  std::size_t numel() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.second.numel();
    return n;
  }

 private:
  std::vector<Entry> entries_;
};

}  // namespace dmad
