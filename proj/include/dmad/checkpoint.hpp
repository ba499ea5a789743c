#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dmad/adam.hpp"
#include "dmad/params.hpp"

namespace dmad {

/// Binary container shared by weights, mask inputs, optimizer state and dataset
/// caches:
///
///   "DMAD" | u32 version (=1) | u32 entry count
///   per entry: u16 name length | UTF-8 name | u8 rank | rank x u32 dims |
///              prod(dims) x f32
///
/// All integers and floats are little-endian.
struct CheckpointEntry {
  std::string name;
  std::vector<std::uint32_t> dims;
  std::vector<float> values;
};

class Checkpoint {
 public:
  static constexpr std::uint32_t kVersion = 1;

  void put(std::string name, std::vector<std::uint32_t> dims, std::vector<float> values);

  template <typename Scalar>
  void put(const std::string& name, const Tensor<Scalar>& t) {
    std::vector<std::uint32_t> dims(t.shape().begin(), t.shape().end());
    put(name, std::move(dims), std::vector<float>(t.data().begin(), t.data().end()));
  }

  bool contains(const std::string& name) const;
  const CheckpointEntry& at(const std::string& name) const;

  template <typename Scalar>
  Tensor<Scalar> tensor(const std::string& name) const {
    const auto& e = at(name);
    Shape shape(e.dims.begin(), e.dims.end());
    return Tensor<Scalar>(std::move(shape), std::vector<Scalar>(e.values.begin(), e.values.end()));
  }

  const std::vector<CheckpointEntry>& entries() const { return entries_; }

  std::vector<std::uint8_t> encode() const;
  static Checkpoint decode(const std::vector<std::uint8_t>& bytes);

  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);

 private:
  std::vector<CheckpointEntry> entries_;
};

template <typename Scalar>
void put_params(Checkpoint& ckpt, const ParamStore<Scalar>& params, const std::string& prefix = "") {
  for (const auto& [name, t] : params.entries()) ckpt.put(prefix + name, t);
}

/// Copies matching entries into an existing store; shapes must agree.
template <typename Scalar>
void load_params(const Checkpoint& ckpt, ParamStore<Scalar>& params, const std::string& prefix = "") {
  for (auto& [name, t] : params.entries()) {
    const auto& e = ckpt.at(prefix + name);
    Shape shape(e.dims.begin(), e.dims.end());
    if (shape != t.shape()) {
      throw ShapeError("checkpoint entry " + prefix + name + " has shape " + shape_str(shape) +
                       ", expected " + shape_str(t.shape()));
    }
    std::copy(e.values.begin(), e.values.end(), t.data().begin());
  }
}

/// Adam moments are stored as "<prefix><param>.m" / ".v" and the step count as
/// a rank-0 "<prefix><param>.t".
template <typename Scalar>
void put_adam(Checkpoint& ckpt, const Adam<Scalar>& adam, const std::string& prefix) {
  for (const auto& [name, st] : adam.states()) {
    if (st.m.empty()) continue;
    const auto n = static_cast<std::uint32_t>(st.m.size());
    ckpt.put(prefix + name + ".m", {n}, std::vector<float>(st.m.begin(), st.m.end()));
    ckpt.put(prefix + name + ".v", {n}, std::vector<float>(st.v.begin(), st.v.end()));
    ckpt.put(prefix + name + ".t", {}, {static_cast<float>(st.t)});
  }
}

template <typename Scalar>
void load_adam(const Checkpoint& ckpt, Adam<Scalar>& adam, const std::string& prefix) {
  for (const auto& e : ckpt.entries()) {
    if (e.name.rfind(prefix, 0) != 0) continue;
    if (e.name.size() < 2 || e.name.compare(e.name.size() - 2, 2, ".m") != 0) continue;
    const std::string param = e.name.substr(prefix.size(), e.name.size() - prefix.size() - 2);
    auto& st = adam.state(param);
    st.m.assign(e.values.begin(), e.values.end());
    const auto& v = ckpt.at(prefix + param + ".v").values;
    st.v.assign(v.begin(), v.end());
    st.t = static_cast<std::int64_t>(ckpt.at(prefix + param + ".t").values.at(0));
  }
}

}  // namespace dmad
