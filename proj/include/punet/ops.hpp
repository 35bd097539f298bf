#pragma once

// Differentiable numeric operations. Every function here records an adjoint
// rule on the tape of its tracked inputs; with detached inputs it is a plain
// forward computation.
//
// Layout conventions:
//   feature maps      (n, c, h, w)
//   token matrices    (n, c, rows, cols) -- a batch of n*c matrices; most
//                     callers use c = 1
//   vectors           (1, 1, 1, len)

#include <vector>

#include "punet/autodiff.hpp"
#include "punet/tensor.hpp"

namespace punet {

struct Conv2dOptions {
    int stride = 1;
    int dilation = 1;
    int padding = 0;
};

Index conv_output_size(Index in, Index kernel, int stride, int dilation, int padding);

/// Cross-correlation. weight (c_out, c_in, k, k), bias vector of c_out.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, Conv2dOptions opt);

template <typename T>
struct BnState {
    Tensor<T> running_mean;
    Tensor<T> running_var;
};

struct BnOptions {
    bool training = false;
    double momentum = 0.1;
    double eps = 1e-5;
};

/// Per-channel normalization. Training mode uses batch statistics and
/// updates `state` (running_var takes the unbiased batch variance).
template <typename T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, BnState<T>& state,
                  BnOptions opt);

/// Normalizes each row over the last axis.
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, double eps);

/// Batched a (B, p, q) times b (B or 1, q, r), batches taken over (n, c).
template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b);

/// Swaps the last two axes.
template <typename T>
Var<T> transpose(const Var<T>& a);

/// x (rows, in) times weight (out, in)^T plus bias (out).
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias);

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> scale(const Var<T>& x, double s);
template <typename T>
Var<T> add_scalar(const Var<T>& x, double s);
template <typename T>
Var<T> relu(const Var<T>& x);
/// tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
template <typename T>
Var<T> gelu(const Var<T>& x);
template <typename T>
Var<T> exponential(const Var<T>& x);

constexpr double kGeluSqrt2OverPi = 0.7978845608028654;
constexpr double kGeluCubic = 0.044715;

/// Row-wise softmax over the last axis with max subtraction.
template <typename T>
Var<T> softmax_lastdim(const Var<T>& x);

/// 2x bilinear resize, align_corners = false (half-pixel centers, source
/// coordinates clamped to the border).
template <typename T>
Var<T> bilinear_upsample2x(const Var<T>& x);

/// (n, c, h, w) -> (n, 4c, h/2, w/2). Output channel p*c + k holds phase p
/// of input channel k, phases ordered top-left, top-right, bottom-left,
/// bottom-right.
template <typename T>
Var<T> space_to_depth2(const Var<T>& x);
template <typename T>
Var<T> depth_to_space2(const Var<T>& x);

template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b);

/// (n, c, h, w) -> (n, 1, h*w, c), row-major spatial order.
template <typename T>
Var<T> to_tokens(const Var<T>& x);
/// Inverse of to_tokens.
template <typename T>
Var<T> from_tokens(const Var<T>& tokens, Index h, Index w);

template <typename T>
Var<T> concat_rows(const std::vector<Var<T>>& parts);
template <typename T>
Var<T> slice_rows(const Var<T>& x, Index start, Index len);
template <typename T>
Var<T> concat_cols(const std::vector<Var<T>>& parts);
template <typename T>
Var<T> slice_cols(const Var<T>& x, Index start, Index len);

enum class FeatureForm {
    /// m^-1/2 exp(phi.x - |x|^2/2): unbiased for exp(q.k).
    Positive,
    /// m^-1/2 exp(-|x - phi|^2/2): drops exp(|phi|^2/2) per feature, which
    /// does not cancel across features. Biased; kept for comparison.
    LiteralGaussian,
};

/// Rows sharing one stabilization shift.
enum class ShiftScope { Global, PerMatrix, PerRow };

struct FeatureMapOptions {
    FeatureForm form = FeatureForm::Positive;
    /// Subtract the max exponent (over `scope`) before exponentiating.
    bool stabilize = true;
    ShiftScope scope = ShiftScope::Global;
};

/// Random-feature map of the rows of x (rows, d) against phi (m, d).
/// If `shift_out` is given it receives the largest subtracted shift;
/// `row_shifts` receives the shift applied to each row.
/// The adjoint differentiates through the shift at its arg-max entry.
template <typename T>
Var<T> feature_map(const Var<T>& x, const Tensor<T>& phi, FeatureMapOptions opt,
                   double* shift_out = nullptr, std::vector<double>* row_shifts = nullptr);

/// Sum of all elements, shape (1, 1, 1, 1).
template <typename T>
Var<T> sum_all(const Var<T>& x);

/// Column sums of each matrix: (n, c, h, w) -> (n, c, 1, w).
template <typename T>
Var<T> sum_over_rows(const Var<T>& x);

/// x (n, c, h, w) divided row-wise by d (n, c, h, 1).
template <typename T>
Var<T> div_rows(const Var<T>& x, const Var<T>& d);

/// Mean pixelwise cross-entropy of logits (n, C, h, w) against labels.
template <typename T>
Var<T> cross_entropy(const Var<T>& logits, const LabelMap& labels);

/// 1 - mean over classes of soft Dice of softmax(logits) against one-hot
/// labels, aggregated over the batch.
template <typename T>
Var<T> soft_dice_loss(const Var<T>& logits, const LabelMap& labels, double smooth = 1.0);

}  // namespace punet
