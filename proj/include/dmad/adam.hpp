#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "dmad/params.hpp"

namespace dmad {

template <typename Scalar>
struct AdamState {
  std::vector<Scalar> m;
  std::vector<Scalar> v;
  std::int64_t t = 0;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double eps = 1e-8;
  double lr = 2e-4;
};

/// One bias-corrected Adam update in place, then the gradient is released.
/// Entries flagged in `frozen` keep both their value and their moments.
template <typename Scalar>
void adam_step(Tensor<Scalar>& param, AdamState<Scalar>& state,
               std::span<const std::uint8_t> frozen = {}) {
  if (!param.has_grad()) throw StateError("adam_step: parameter has no gradient");
  if (!frozen.empty() && frozen.size() != param.numel()) {
    throw ShapeError("adam_step: frozen flags do not match parameter size");
  }
  auto grad = param.grad();
  if (!all_finite<Scalar>(grad)) throw StateError("adam_step: non-finite gradient");
  if (state.m.empty()) {
    state.m.assign(param.numel(), Scalar(0));
    state.v.assign(param.numel(), Scalar(0));
  }
  if (state.m.size() != param.numel()) throw ShapeError("adam_step: state size mismatch");
  state.t += 1;
  const double c1 = 1.0 - std::pow(state.beta1, double(state.t));
  const double c2 = 1.0 - std::pow(state.beta2, double(state.t));
  auto values = param.data();
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!frozen.empty() && frozen[i]) continue;
    const double g = grad[i];
    const double m = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
    const double v = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
    state.m[i] = static_cast<Scalar>(m);
    state.v[i] = static_cast<Scalar>(v);
    const double step = state.lr * (m / c1) / (std::sqrt(v / c2) + state.eps);
    values[i] = static_cast<Scalar>(values[i] - step);
  }
  param.clear_grad();
}

/// Adam over every tensor of a ParamStore, keyed by parameter name.
template <typename Scalar>
class Adam {
 public:
  explicit Adam(double lr = 2e-4, double beta1 = 0.5, double beta2 = 0.999)
      : lr_(lr), beta1_(beta1), beta2_(beta2) {}

  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }

  void step(ParamStore<Scalar>& params) {
    for (auto& [name, t] : params.entries()) step(name, t);
  }

  void step(const std::string& name, Tensor<Scalar>& t, std::span<const std::uint8_t> frozen = {}) {
    auto& st = state(name);
    st.lr = lr_;
    adam_step(t, st, frozen);
  }

  AdamState<Scalar>& state(const std::string& name) {
    auto it = states_.find(name);
    if (it == states_.end()) {
      AdamState<Scalar> st;
      st.beta1 = beta1_;
      st.beta2 = beta2_;
      st.lr = lr_;
      it = states_.emplace(name, std::move(st)).first;
    }
    return it->second;
  }

  const std::map<std::string, AdamState<Scalar>>& states() const { return states_; }

 private:
  double lr_;
  double beta1_;
  double beta2_;
  std::map<std::string, AdamState<Scalar>> states_;
};

}  // namespace dmad
