#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "msfcn/tensor.hpp"

namespace msfcn {

enum class ParamRole {
  kWeight,
  kBias,
  kBnScale,
  kBnShift,
  kBnRunningMean,
  kBnRunningVar,
};

/// A named tensor owned by a ParamStore. `dims` is the logical shape written
/// to checkpoints (e.g. rank 1 for biases); `value` stores it as NCHW.
template <typename T>
struct Param {
  std::string name;
  std::vector<int> dims;
  ParamRole role = ParamRole::kWeight;
  Tensor<T> value;

  bool trainable() const noexcept {
    return role != ParamRole::kBnRunningMean && role != ParamRole::kBnRunningVar;
  }
  /// Participates in L2 weight decay (conv/deconv weights only).
  bool decayed() const noexcept { return role == ParamRole::kWeight; }
};

/// Shape of a logical dims vector when stored as a rank-4 tensor.
Shape shape_for_dims(const std::vector<int>& dims);

/// Insertion-ordered parameter map. Entries have stable addresses.
template <typename T>
class ParamStore {
 public:
  Param<T>& add(const std::string& name, std::vector<int> dims, ParamRole role);

  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  Param<T>& get(const std::string& name);
  const Param<T>& get(const std::string& name) const;

  std::size_t size() const noexcept { return entries_.size(); }
  Param<T>& at(std::size_t i) { return *entries_[i]; }
  const Param<T>& at(std::size_t i) const { return *entries_[i]; }

  void zero_grad();
  /// Scalar count over trainable entries.
  std::size_t trainable_scalars() const;

 private:
  std::vector<std::unique_ptr<Param<T>>> entries_;
  std::map<std::string, std::size_t> index_;
};

extern template class ParamStore<float>;
extern template class ParamStore<double>;

}  // namespace msfcn
