#pragma once

#include "hba/tensor.hpp"

namespace hba {

enum class PoolMode { Max, Avg };
enum class ResampleMode { Nearest, Bilinear };
enum class SoftmaxAxis { Channel = 1, Height = 2, Width = 3 };

// Throws NumericError naming `op` if any element is NaN/Inf. Every forward
// op calls this on its output.
template <class Real>
void check_finite(const Tensor<Real>& t, const char* op);

// Cross-correlation. out H' = (H + 2*pad - kh)/stride + 1, which must be a
// positive integer. Optional bias has shape [1,Cout,1,1].
template <class Real>
TensorPtr<Real> conv2d(const TensorPtr<Real>& input, const TensorPtr<Real>& kernel,
                       int stride, int padding, const TensorPtr<Real>& bias = nullptr);

// Square window, no padding, floor semantics: out = (H - window)/stride + 1.
// Max routes gradient to the first-found argmax in scan order.
template <class Real>
TensorPtr<Real> pool2d(const TensorPtr<Real>& input, PoolMode mode, int window, int stride);

// window covers the full H x W extent (output is N x C x 1 x 1)
template <class Real>
TensorPtr<Real> global_pool2d(const TensorPtr<Real>& input, PoolMode mode);

// Affine map over the last axis: [*, Din] x [Din, Dout]. weight shape
// [1,1,Din,Dout], bias [1,1,1,Dout].
template <class Real>
TensorPtr<Real> dense(const TensorPtr<Real>& input, const TensorPtr<Real>& weight,
                      const TensorPtr<Real>& bias = nullptr);

template <class Real>
TensorPtr<Real> relu(const TensorPtr<Real>& input);

template <class Real>
TensorPtr<Real> sigmoid(const TensorPtr<Real>& input);

// numerically stable softmax along the given axis
template <class Real>
TensorPtr<Real> softmax(const TensorPtr<Real>& input, SoftmaxAxis axis);

// align-corners=false convention for both modes
template <class Real>
TensorPtr<Real> resample(const TensorPtr<Real>& input, int target_h, int target_w, ResampleMode mode);

template <class Real>
TensorPtr<Real> add(const TensorPtr<Real>& a, const TensorPtr<Real>& b);

template <class Real>
TensorPtr<Real> scale(const TensorPtr<Real>& a, Real factor);

// out[n,c,h,w] = x[n,c,h,w] * gate[n,c,0,0]
template <class Real>
TensorPtr<Real> scale_channels(const TensorPtr<Real>& x, const TensorPtr<Real>& gate);

template <class Real>
TensorPtr<Real> concat_channels(const TensorPtr<Real>& a, const TensorPtr<Real>& b);

// same element count, data order preserved
template <class Real>
TensorPtr<Real> reshape(const TensorPtr<Real>& x, Shape target);

// [N,C,H,W] -> [N,1,H*W,C] token layout for attention
template <class Real>
TensorPtr<Real> nchw_to_tokens(const TensorPtr<Real>& x);

template <class Real>
TensorPtr<Real> tokens_to_nchw(const TensorPtr<Real>& x, int h, int w);

// [N,1,T,heads*d] -> [N,heads,T,d]
template <class Real>
TensorPtr<Real> split_heads(const TensorPtr<Real>& x, int heads);

// [N,heads,T,d] -> [N,1,T,heads*d]
template <class Real>
TensorPtr<Real> merge_heads(const TensorPtr<Real>& x);

// Batched over (n,c): out[n,c] = a[n,c] * b[n,c] (or b^T). b may broadcast
// when its n and c are both 1.
template <class Real>
TensorPtr<Real> matmul(const TensorPtr<Real>& a, const TensorPtr<Real>& b, bool transpose_b = false);

// sum of all elements -> [1,1,1,1]
template <class Real>
TensorPtr<Real> reduce_sum(const TensorPtr<Real>& x);

// Batch normalization over (N,H,W) per channel. gamma/beta/running stats all
// shaped [1,C,1,1]. Training mode uses batch statistics and, when
// update_running is set, folds them into the running buffers (biased
// variance, momentum m: r = (1-m) r + m s). Eval mode uses running stats.
template <class Real>
TensorPtr<Real> batchnorm2d(const TensorPtr<Real>& x, const TensorPtr<Real>& gamma,
                            const TensorPtr<Real>& beta, const TensorPtr<Real>& running_mean,
                            const TensorPtr<Real>& running_var, bool training,
                            Real momentum, Real eps, bool update_running);

// Relative-position attention scores. q is [N,heads,S*S,dk]; rel_h/rel_w are
// fixed offset tables [1,1,2S-1,dk] (no gradient). Output [N,heads,S*S,S*S]:
// out[i,j] = q_i . (rel_h[dy(i,j)] + rel_w[dx(i,j)]), with dy = row_j - row_i
// and dx = col_j - col_i.
template <class Real>
TensorPtr<Real> rel_pos_scores(const TensorPtr<Real>& q, const TensorPtr<Real>& rel_h,
                               const TensorPtr<Real>& rel_w, int grid);

// Smoothed soft Dice loss on logits vs a {0,1} target of the same shape.
// p = sigmoid(logits); per class c over batch and pixels:
//   DL_c = 1 - (2*sum(p g) + smooth) / (sum p + sum g + smooth)
// Result is the mean over classes, returned as a scalar tensor.
template <class Real>
TensorPtr<Real> dice_loss_with_logits(const TensorPtr<Real>& logits, const TensorPtr<Real>& target,
                                      Real smooth);

} // namespace hba
