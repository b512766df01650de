#pragma once

#include <string>
#include <vector>

#include "vqlogits/numerics/tensor.hpp"

namespace vqlogits {

// A trainable tensor with a stable name (checkpoint manifest key) and its
// weight-decay eligibility.
template <typename T>
struct NamedParam {
  std::string name;
  Tensor<T> tensor;
  bool decay = true;
};

template <typename T>
std::size_t count_elements(const std::vector<NamedParam<T>>& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.tensor.size();
  return n;
}

}  // namespace vqlogits
