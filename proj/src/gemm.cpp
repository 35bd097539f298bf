#include "gemm.hpp"

#include <Eigen/Core>

namespace punet::detail {

template <typename T>
void gemm(bool trans_a, bool trans_b, Index m, Index n, Index k, const T* a, const T* b, T* c,
          T beta) {
    using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    if (m == 0 || n == 0) {
        return;
    }
    Eigen::Map<Mat> cm(c, m, n);
    if (beta == T(0)) {
        cm.setZero();
    } else if (beta != T(1)) {
        cm *= beta;
    }
    if (k == 0) {
        return;
    }
    Eigen::Map<const Mat> am(a, trans_a ? k : m, trans_a ? m : k);
    Eigen::Map<const Mat> bm(b, trans_b ? n : k, trans_b ? k : n);
    if (!trans_a && !trans_b) {
        cm.noalias() += am * bm;
    } else if (trans_a && !trans_b) {
        cm.noalias() += am.transpose() * bm;
    } else if (!trans_a && trans_b) {
        cm.noalias() += am * bm.transpose();
    } else {
        cm.noalias() += am.transpose() * bm.transpose();
    }
}

template void gemm(bool, bool, Index, Index, Index, const float*, const float*, float*, float);
template void gemm(bool, bool, Index, Index, Index, const double*, const double*, double*, double);

}  // namespace punet::detail
