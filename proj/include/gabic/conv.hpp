#pragma once

#include "gabic/parallel.hpp"
#include "gabic/tensor.hpp"

namespace gabic {

// Two interchangeable convolution backends. im2col is the fast path; the
// direct quadruple loop is the reference both are checked against.
enum class ConvImpl { direct, im2col };

inline ConvImpl& conv_impl() {
  thread_local ConvImpl v = ConvImpl::im2col;
  return v;
}

namespace convdet {

inline int conv_out_extent(int in, int k, int s, int p) { return (in + 2 * p - k) / s + 1; }
inline int tconv_out_extent(int in, int k, int s, int p) { return (in - 1) * s - 2 * p + k; }

// col [IC*K*K, OH*OW] from X [IC, H, W]
template <typename T>
void im2col(const T* x, int ic, int h, int w, int k, int s, int p, int oh, int ow, T* col) {
  for (int c = 0; c < ic; ++c)
    for (int kh = 0; kh < k; ++kh)
      for (int kw = 0; kw < k; ++kw) {
        T* dst = col + ((static_cast<long>(c) * k + kh) * k + kw) * (static_cast<long>(oh) * ow);
        for (int y = 0; y < oh; ++y) {
          int iy = y * s - p + kh;
          if (iy < 0 || iy >= h) {
            for (int xo = 0; xo < ow; ++xo) dst[static_cast<long>(y) * ow + xo] = T(0);
            continue;
          }
          const T* row = x + (static_cast<long>(c) * h + iy) * w;
          for (int xo = 0; xo < ow; ++xo) {
            int ix = xo * s - p + kw;
            dst[static_cast<long>(y) * ow + xo] = (ix >= 0 && ix < w) ? row[ix] : T(0);
          }
        }
      }
}

// scatter-add of col back into X (adjoint of im2col)
template <typename T>
void col2im(const T* col, int ic, int h, int w, int k, int s, int p, int oh, int ow, T* x) {
  for (int c = 0; c < ic; ++c)
    for (int kh = 0; kh < k; ++kh)
      for (int kw = 0; kw < k; ++kw) {
        const T* src = col + ((static_cast<long>(c) * k + kh) * k + kw) * (static_cast<long>(oh) * ow);
        for (int y = 0; y < oh; ++y) {
          int iy = y * s - p + kh;
          if (iy < 0 || iy >= h) continue;
          T* row = x + (static_cast<long>(c) * h + iy) * w;
          for (int xo = 0; xo < ow; ++xo) {
            int ix = xo * s - p + kw;
            if (ix >= 0 && ix < w) row[ix] += src[static_cast<long>(y) * ow + xo];
          }
        }
      }
}

// Y[n][oc] = W[oc] . col(X[n]); accumulates nothing (overwrites Y).
template <typename T>
void forward_im2col(const T* x, const T* wt, T* y, int n, int ic, int h, int w, int oc, int k,
                    int s, int p, int oh, int ow) {
  long colsz = static_cast<long>(ic) * k * k * oh * ow;
  long xsz = static_cast<long>(ic) * h * w;
  long ysz = static_cast<long>(oc) * oh * ow;
  parallel_for(n, [&](long b) {
    std::vector<T> col(colsz);
    im2col(x + b * xsz, ic, h, w, k, s, p, oh, ow, col.data());
    T* dst = y + b * ysz;
    std::fill(dst, dst + ysz, T(0));
    gemm_nn<T>(oc, ic * k * k, oh * ow, wt, col.data(), dst);
  });
}

template <typename T>
void forward_direct(const T* x, const T* wt, T* y, int n, int ic, int h, int w, int oc, int k,
                    int s, int p, int oh, int ow) {
  parallel_for(static_cast<long>(n) * oc, [&](long job) {
    int b = static_cast<int>(job / oc);
    int co = static_cast<int>(job % oc);
    const T* xb = x + static_cast<long>(b) * ic * h * w;
    T* dst = y + (static_cast<long>(b) * oc + co) * oh * ow;
    for (int yo = 0; yo < oh; ++yo)
      for (int xo = 0; xo < ow; ++xo) {
        double acc = 0.0;
        for (int ci = 0; ci < ic; ++ci)
          for (int kh = 0; kh < k; ++kh) {
            int iy = yo * s - p + kh;
            if (iy < 0 || iy >= h) continue;
            for (int kw = 0; kw < k; ++kw) {
              int ix = xo * s - p + kw;
              if (ix < 0 || ix >= w) continue;
              acc += static_cast<double>(xb[(static_cast<long>(ci) * h + iy) * w + ix]) *
                     wt[((static_cast<long>(co) * ic + ci) * k + kh) * k + kw];
            }
          }
        dst[static_cast<long>(yo) * ow + xo] = static_cast<T>(acc);
      }
  });
}

// dX[n] = col2im(W^T . dY[n])
template <typename T>
void backward_input(const T* dy, const T* wt, T* dx, int n, int ic, int h, int w, int oc, int k,
                    int s, int p, int oh, int ow) {
  long colsz = static_cast<long>(ic) * k * k * oh * ow;
  long xsz = static_cast<long>(ic) * h * w;
  long ysz = static_cast<long>(oc) * oh * ow;
  parallel_for(n, [&](long b) {
    std::vector<T> col(colsz, T(0));
    gemm_tn<T>(ic * k * k, oc, oh * ow, wt, dy + b * ysz, col.data());
    col2im(col.data(), ic, h, w, k, s, p, oh, ow, dx + b * xsz);
  });
}

// dW += sum_n dY[n] . col(X[n])^T
template <typename T>
void backward_weight(const T* dy, const T* x, T* dw, int n, int ic, int h, int w, int oc, int k,
                     int s, int p, int oh, int ow) {
  long colsz = static_cast<long>(ic) * k * k * oh * ow;
  long xsz = static_cast<long>(ic) * h * w;
  long ysz = static_cast<long>(oc) * oh * ow;
  std::vector<T> col(colsz);
  for (int b = 0; b < n; ++b) {
    im2col(x + static_cast<long>(b) * xsz, ic, h, w, k, s, p, oh, ow, col.data());
    gemm_nt<T>(oc, oh * ow, ic * k * k, dy + static_cast<long>(b) * ysz, col.data(), dw);
  }
}

}  // namespace convdet

// Cross-correlation of an NCHW input with W [OC, IC, K, K]; bias optional
// (pass an empty Tensor to skip).
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int stride, int pad) {
  if (x.ndim() != 4 || w.ndim() != 4)
    throw std::invalid_argument("conv2d: expected 4-d input and weight, got " +
                                shape_str(x.shape()) + " and " + shape_str(w.shape()));
  if (stride < 1 || pad < 0)
    throw std::invalid_argument("conv2d: stride must be >= 1 and pad >= 0");
  int N = x.dim(0), IC = x.dim(1), H = x.dim(2), W = x.dim(3);
  int OC = w.dim(0), K = w.dim(2);
  if (w.dim(1) != IC || w.dim(3) != K)
    throw std::invalid_argument("conv2d: weight " + shape_str(w.shape()) +
                                " incompatible with input " + shape_str(x.shape()));
  if (b.defined() && (b.ndim() != 1 || b.dim(0) != OC))
    throw std::invalid_argument("conv2d: bias " + shape_str(b.shape()) + " must be [" +
                                std::to_string(OC) + "]");
  int OH = convdet::conv_out_extent(H, K, stride, pad);
  int OW = convdet::conv_out_extent(W, K, stride, pad);
  if (OH < 1 || OW < 1)
    throw std::invalid_argument("conv2d: kernel " + std::to_string(K) + " too large for input " +
                                shape_str(x.shape()) + " with pad " + std::to_string(pad));

  auto xn = x.node();
  auto wn = w.node();
  std::vector<Tensor<T>> parents{x, w};
  if (b.defined()) parents.push_back(b);
  auto bn = b.defined() ? b.node() : nullptr;

  auto out = make_op<T>({N, OC, OH, OW}, parents,
                        [xn, wn, bn, N, IC, H, W, OC, K, stride, pad, OH, OW](detail::Node<T>& o) {
                          if (xn->requires_grad) {
                            detail::ensure_grad(*xn);
                            convdet::backward_input(o.grad.data(), wn->value.data(), xn->grad.data(),
                                                    N, IC, H, W, OC, K, stride, pad, OH, OW);
                          }
                          if (wn->requires_grad) {
                            detail::ensure_grad(*wn);
                            convdet::backward_weight(o.grad.data(), xn->value.data(), wn->grad.data(),
                                                     N, IC, H, W, OC, K, stride, pad, OH, OW);
                          }
                          if (bn && bn->requires_grad) {
                            detail::ensure_grad(*bn);
                            long hw = static_cast<long>(OH) * OW;
                            for (int n = 0; n < N; ++n)
                              for (int c = 0; c < OC; ++c) {
                                const T* g = o.grad.data() + (static_cast<long>(n) * OC + c) * hw;
                                double acc = 0.0;
                                for (long i = 0; i < hw; ++i) acc += g[i];
                                bn->grad[c] += static_cast<T>(acc);
                              }
                          }
                        });

  if (conv_impl() == ConvImpl::im2col)
    convdet::forward_im2col(x.data(), w.data(), out.data(), N, IC, H, W, OC, K, stride, pad, OH, OW);
  else
    convdet::forward_direct(x.data(), w.data(), out.data(), N, IC, H, W, OC, K, stride, pad, OH, OW);

  if (b.defined()) {
    long hw = static_cast<long>(OH) * OW;
    T* dst = out.data();
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < OC; ++c) {
        T bv = b.data()[c];
        long base = (static_cast<long>(n) * OC + c) * hw;
        for (long i = 0; i < hw; ++i) dst[base + i] += bv;
      }
  }
  return out;
}

// Transposed convolution (gradient-of-conv semantics), weight [IC, OC, K, K].
// Output extent is (in-1)*stride - 2*pad + K.
template <typename T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int stride,
                           int pad) {
  if (x.ndim() != 4 || w.ndim() != 4)
    throw std::invalid_argument("conv_transpose2d: expected 4-d input and weight, got " +
                                shape_str(x.shape()) + " and " + shape_str(w.shape()));
  if (stride < 1 || pad < 0)
    throw std::invalid_argument("conv_transpose2d: stride must be >= 1 and pad >= 0");
  int N = x.dim(0), IC = x.dim(1), H = x.dim(2), W = x.dim(3);
  int OC = w.dim(1), K = w.dim(2);
  if (w.dim(0) != IC || w.dim(3) != K)
    throw std::invalid_argument("conv_transpose2d: weight " + shape_str(w.shape()) +
                                " incompatible with input " + shape_str(x.shape()));
  if (b.defined() && (b.ndim() != 1 || b.dim(0) != OC))
    throw std::invalid_argument("conv_transpose2d: bias " + shape_str(b.shape()) + " must be [" +
                                std::to_string(OC) + "]");
  int OH = convdet::tconv_out_extent(H, K, stride, pad);
  int OW = convdet::tconv_out_extent(W, K, stride, pad);
  if (OH < 1 || OW < 1)
    throw std::invalid_argument("conv_transpose2d: degenerate output for input " +
                                shape_str(x.shape()));

  auto xn = x.node();
  auto wn = w.node();
  std::vector<Tensor<T>> parents{x, w};
  if (b.defined()) parents.push_back(b);
  auto bn = b.defined() ? b.node() : nullptr;

  // Forward is conv-backward-input with roles swapped: x plays dY for a conv
  // whose weight is w seen as [OC'=IC, IC'=OC, K, K] and whose input is the
  // (OH, OW) plane.
  auto out = make_op<T>({N, OC, OH, OW}, parents,
                        [xn, wn, bn, N, IC, H, W, OC, K, stride, pad, OH, OW](detail::Node<T>& o) {
                          if (xn->requires_grad) {
                            detail::ensure_grad(*xn);
                            // dX = conv(dOut, w) with the same stride/pad
                            std::vector<T> tmp(xn->value.size(), T(0));
                            convdet::forward_im2col(o.grad.data(), wn->value.data(), tmp.data(), N,
                                                    OC, OH, OW, IC, K, stride, pad, H, W);
                            for (size_t i = 0; i < tmp.size(); ++i) xn->grad[i] += tmp[i];
                          }
                          if (wn->requires_grad) {
                            detail::ensure_grad(*wn);
                            convdet::backward_weight(xn->value.data(), o.grad.data(),
                                                     wn->grad.data(), N, OC, OH, OW, IC, K, stride,
                                                     pad, H, W);
                          }
                          if (bn && bn->requires_grad) {
                            detail::ensure_grad(*bn);
                            long hw = static_cast<long>(OH) * OW;
                            for (int n = 0; n < N; ++n)
                              for (int c = 0; c < OC; ++c) {
                                const T* g = o.grad.data() + (static_cast<long>(n) * OC + c) * hw;
                                double acc = 0.0;
                                for (long i = 0; i < hw; ++i) acc += g[i];
                                bn->grad[c] += static_cast<T>(acc);
                              }
                          }
                        });

  convdet::backward_input(x.data(), w.data(), out.data(), N, OC, OH, OW, IC, K, stride, pad, H, W);

  if (b.defined()) {
    long hw = static_cast<long>(OH) * OW;
    T* dst = out.data();
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < OC; ++c) {
        T bv = b.data()[c];
        long base = (static_cast<long>(n) * OC + c) * hw;
        for (long i = 0; i < hw; ++i) dst[base + i] += bv;
      }
  }
  return out;
}

}  // namespace gabic
