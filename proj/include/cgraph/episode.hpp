#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "cgraph/graph.hpp"
#include "cgraph/tensor.hpp"

namespace cgraph {

// One few-shot task: K support image/mask pairs plus a query pair, all for
// a single class in a single domain. Masks are image-resolution binaries.
template <class T>
struct Episode {
  std::vector<std::pair<Tensor<T>, Mask>> support;
  Tensor<T> query_image;
  Mask query_mask;
  int class_id = 0;
  int domain_id = 0;
  std::uint64_t seed = 0;
};

}  // namespace cgraph
