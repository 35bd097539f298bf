#pragma once

#include "punet/tensor.hpp"

namespace punet::detail {

/// C (m x n) = op(A) op(B) + beta * C, all row-major. op(A) is m x k; A is
/// stored k x m when trans_a is set. Likewise for B.
template <typename T>
void gemm(bool trans_a, bool trans_b, Index m, Index n, Index k, const T* a, const T* b, T* c,
          T beta);

}  // namespace punet::detail
