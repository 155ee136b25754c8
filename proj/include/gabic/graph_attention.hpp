#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include "gabic/tensor.hpp"

namespace gabic {

enum class AttentionMode { knn, dense };

// Per-instance attention weights. Each of the four projections is stored as
// [heads, C/heads, C/heads]; a projection of a node row x is x * W^T.
template <typename T>
struct GwamParams {
  Tensor<T> w_theta, w_phi, w_g, w_z;
  int window = 8;
  int k = -1;  // -1 selects window*window/2
  int heads = 1;
  bool include_self = false;  // neighbor pool includes the node itself

  int effective_k() const { return k < 0 ? (window * window) / 2 : k; }

  static GwamParams init(int channels, int window, int k, int heads, Rng& rng) {
    if (heads < 1 || channels % heads != 0)
      throw std::invalid_argument("gwam: channels " + std::to_string(channels) +
                                  " not divisible by heads " + std::to_string(heads));
    int ch = channels / heads;
    double scale = 1.0 / std::sqrt(static_cast<double>(ch));
    GwamParams p;
    p.w_theta = Tensor<T>::rand_uniform({heads, ch, ch}, rng, -scale, scale);
    p.w_phi = Tensor<T>::rand_uniform({heads, ch, ch}, rng, -scale, scale);
    p.w_g = Tensor<T>::rand_uniform({heads, ch, ch}, rng, -scale, scale);
    p.w_z = Tensor<T>::rand_uniform({heads, ch, ch}, rng, -scale, scale);
    p.window = window;
    p.k = k;
    p.heads = heads;
    return p;
  }
};

// One window's graph: node features, the k-NN edge list and (once computed)
// the per-edge attention coefficients, stored edge-parallel to `edges`.
template <typename T>
struct WindowGraph {
  Tensor<T> nodes;        // [n, C]
  int k = 0;
  std::vector<int> edges;  // n*k neighbor indices, ascending (distance, index)
  std::vector<T> alpha;    // n*k, filled by attention_coefficients
};

// Splits NCHW into non-overlapping M x M windows -> [num_windows, M*M, C].
// Window order is (batch, window-row, window-col); node order inside a window
// is row-major; merge_windows is the exact inverse.
template <typename T>
Tensor<T> partition_windows(const Tensor<T>& x, int M) {
  if (x.ndim() != 4)
    throw std::invalid_argument("partition_windows: expected 4-d, got " + shape_str(x.shape()));
  int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (M < 1 || H % M != 0 || W % M != 0)
    throw std::invalid_argument("partition_windows: extents " + shape_str(x.shape()) +
                                " not divisible by window " + std::to_string(M));
  int wy = H / M, wx = W / M;
  long bw = static_cast<long>(N) * wy * wx;
  int n = M * M;

  auto xn = x.node();
  auto out = make_op<T>({static_cast<int>(bw), n, C}, {x}, [xn, N, C, H, W, M, wy, wx, n](detail::Node<T>& o) {
    detail::ensure_grad(*xn);
    for (int b = 0; b < N; ++b)
      for (int gy = 0; gy < wy; ++gy)
        for (int gx = 0; gx < wx; ++gx) {
          long w_id = (static_cast<long>(b) * wy + gy) * wx + gx;
          for (int t = 0; t < n; ++t) {
            int y = gy * M + t / M, x2 = gx * M + t % M;
            const T* g = o.grad.data() + (w_id * n + t) * C;
            for (int c = 0; c < C; ++c)
              xn->grad[((static_cast<long>(b) * C + c) * H + y) * W + x2] += g[c];
          }
        }
  });
  const T* src = x.data();
  T* dst = out.data();
  for (int b = 0; b < N; ++b)
    for (int gy = 0; gy < wy; ++gy)
      for (int gx = 0; gx < wx; ++gx) {
        long w_id = (static_cast<long>(b) * wy + gy) * wx + gx;
        for (int t = 0; t < n; ++t) {
          int y = gy * M + t / M, x2 = gx * M + t % M;
          T* d = dst + (w_id * n + t) * C;
          for (int c = 0; c < C; ++c) d[c] = src[((static_cast<long>(b) * C + c) * H + y) * W + x2];
        }
      }
  return out;
}

template <typename T>
Tensor<T> merge_windows(const Tensor<T>& xw, int N, int C, int H, int W, int M) {
  int wy = H / M, wx = W / M;
  int n = M * M;
  long bw = static_cast<long>(N) * wy * wx;
  if (xw.ndim() != 3 || xw.dim(0) != bw || xw.dim(1) != n || xw.dim(2) != C)
    throw std::invalid_argument("merge_windows: got " + shape_str(xw.shape()) + ", expected [" +
                                std::to_string(bw) + "," + std::to_string(n) + "," +
                                std::to_string(C) + "]");
  auto wn = xw.node();
  auto out = make_op<T>({N, C, H, W}, {xw}, [wn, N, C, H, W, M, wy, wx, n](detail::Node<T>& o) {
    detail::ensure_grad(*wn);
    for (int b = 0; b < N; ++b)
      for (int gy = 0; gy < wy; ++gy)
        for (int gx = 0; gx < wx; ++gx) {
          long w_id = (static_cast<long>(b) * wy + gy) * wx + gx;
          for (int t = 0; t < n; ++t) {
            int y = gy * M + t / M, x2 = gx * M + t % M;
            T* g = wn->grad.data() + (w_id * n + t) * C;
            for (int c = 0; c < C; ++c)
              g[c] += o.grad[((static_cast<long>(b) * C + c) * H + y) * W + x2];
          }
        }
  });
  const T* src = xw.data();
  T* dst = out.data();
  for (int b = 0; b < N; ++b)
    for (int gy = 0; gy < wy; ++gy)
      for (int gx = 0; gx < wx; ++gx) {
        long w_id = (static_cast<long>(b) * wy + gy) * wx + gx;
        for (int t = 0; t < n; ++t) {
          int y = gy * M + t / M, x2 = gx * M + t % M;
          const T* s = src + (w_id * n + t) * C;
          for (int c = 0; c < C; ++c) dst[((static_cast<long>(b) * C + c) * H + y) * W + x2] = s[c];
        }
      }
  return out;
}

// k nearest neighbors by squared Euclidean distance on the raw node features,
// ties broken by lower index. Rebuilt from values on every call; the edge
// list is structure, not part of the differentiable graph.
template <typename T>
std::vector<int> knn_edges(const T* nodes, int n, int C, int k, bool include_self) {
  int pool = include_self ? n : n - 1;
  if (k < 1 || k > pool)
    throw std::invalid_argument("knn_edges: k=" + std::to_string(k) + " outside [1," +
                                std::to_string(pool) + "] for " + std::to_string(n) + " nodes");
  std::vector<int> edges(static_cast<long>(n) * k);
  std::vector<std::pair<double, int>> cand;
  cand.reserve(n);
  for (int i = 0; i < n; ++i) {
    cand.clear();
    const T* xi = nodes + static_cast<long>(i) * C;
    for (int j = 0; j < n; ++j) {
      if (j == i && !include_self) continue;
      const T* xj = nodes + static_cast<long>(j) * C;
      double d = 0.0;
      for (int c = 0; c < C; ++c) {
        double diff = static_cast<double>(xi[c]) - static_cast<double>(xj[c]);
        d += diff * diff;
      }
      cand.emplace_back(d, j);
    }
    std::sort(cand.begin(), cand.end());
    for (int e = 0; e < k; ++e) edges[static_cast<long>(i) * k + e] = cand[e].second;
  }
  return edges;
}

template <typename T>
WindowGraph<T> build_window_graph(const Tensor<T>& nodes, int k, bool include_self = false) {
  if (nodes.ndim() != 2)
    throw std::invalid_argument("build_window_graph: expected [n,C], got " + shape_str(nodes.shape()));
  WindowGraph<T> g;
  g.nodes = nodes;
  g.k = k;
  g.edges = knn_edges(nodes.data(), nodes.dim(0), nodes.dim(1), k, include_self);
  return g;
}

inline std::shared_ptr<std::vector<std::uint8_t>> edges_to_mask(const std::vector<int>& edges,
                                                                int n, int k) {
  auto mask = std::make_shared<std::vector<std::uint8_t>>(static_cast<long>(n) * n, 0);
  for (int i = 0; i < n; ++i)
    for (int e = 0; e < k; ++e) (*mask)[static_cast<long>(i) * n + edges[static_cast<long>(i) * k + e]] = 1;
  return mask;
}

// alpha_{i,j} = softmax_{j in N(i)} (W_theta x_i)^T (W_phi x_j), returned as a
// dense [n,n] tensor that is exactly zero off the edge set.
template <typename T>
Tensor<T> attention_coefficients(const Tensor<T>& nodes, const std::vector<int>& edges, int k,
                                 const Tensor<T>& w_theta, const Tensor<T>& w_phi) {
  int n = nodes.dim(0);
  if (static_cast<long>(edges.size()) != static_cast<long>(n) * k)
    throw std::invalid_argument("attention_coefficients: edge list size mismatch");
  auto p = matmul_nt(nodes, w_theta);
  auto q = matmul_nt(nodes, w_phi);
  auto logits = matmul_nt(p, q);
  return masked_softmax_lastdim(logits, edges_to_mask(edges, n, k));
}

// Copies the coefficients of a dense alpha tensor onto the graph's edge list.
template <typename T>
void fill_graph_alpha(WindowGraph<T>& g, const Tensor<T>& alpha) {
  int n = g.nodes.dim(0);
  g.alpha.resize(g.edges.size());
  for (int i = 0; i < n; ++i)
    for (int e = 0; e < g.k; ++e)
      g.alpha[static_cast<long>(i) * g.k + e] =
          alpha.data()[static_cast<long>(i) * n + g.edges[static_cast<long>(i) * g.k + e]];
}

// x_upd(i) = x(i) + W_z sum_{j in N(i)} alpha_{i,j} W_g x(j), with alpha given
// as the dense masked [n,n] tensor.
template <typename T>
Tensor<T> gwam_update(const Tensor<T>& nodes, const Tensor<T>& alpha, const Tensor<T>& w_g,
                      const Tensor<T>& w_z) {
  int n = nodes.dim(0);
  if (alpha.ndim() != 2 || alpha.dim(0) != n || alpha.dim(1) != n)
    throw std::invalid_argument("gwam_update: alpha " + shape_str(alpha.shape()) +
                                " incompatible with nodes " + shape_str(nodes.shape()));
  auto g = matmul_nt(nodes, w_g);
  auto u = matmul(alpha, g);
  return add(nodes, matmul_nt(u, w_z));
}

// Conventional window attention: every node attends to the full window
// (self included), then the residual update is applied.
template <typename T>
Tensor<T> dense_window_attention(const Tensor<T>& nodes, const Tensor<T>& w_theta,
                                 const Tensor<T>& w_phi, const Tensor<T>& w_g,
                                 const Tensor<T>& w_z) {
  auto p = matmul_nt(nodes, w_theta);
  auto q = matmul_nt(nodes, w_phi);
  auto alpha = softmax(matmul_nt(p, q), 1);
  return gwam_update(nodes, alpha, w_g, w_z);
}

// Full block: partition, per-head graph build, coefficients, update, merge.
// In knn mode the edge selection is recomputed from the current features and
// treated as fixed structure; gradients flow through selected edges only.
template <typename T>
Tensor<T> gwam_forward(const Tensor<T>& x, const GwamParams<T>& params, AttentionMode mode) {
  int M = params.window;
  if (M < 2)
    throw std::invalid_argument("gwam_forward: window " + std::to_string(M) + " must be >= 2");
  int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  int n = M * M;
  int heads = params.heads;
  int ch = C / heads;
  if (C % heads != 0)
    throw std::invalid_argument("gwam_forward: channels " + std::to_string(C) +
                                " not divisible by heads " + std::to_string(heads));
  if (params.w_theta.dim(1) != ch)
    throw std::invalid_argument("gwam_forward: weight head dim " +
                                std::to_string(params.w_theta.dim(1)) + " != " + std::to_string(ch));

  auto xw = partition_windows(x, M);
  long bw = xw.dim(0);

  std::vector<Tensor<T>> head_outs;
  head_outs.reserve(heads);
  for (int h = 0; h < heads; ++h) {
    Tensor<T> xh = heads == 1 ? xw : slice_lastdim(xw, h * ch, (h + 1) * ch);
    auto wt = transpose2d(slice_dim0(params.w_theta, h));
    auto wp = transpose2d(slice_dim0(params.w_phi, h));
    auto wg = transpose2d(slice_dim0(params.w_g, h));
    auto wz = transpose2d(slice_dim0(params.w_z, h));

    auto mask = std::make_shared<std::vector<std::uint8_t>>(bw * n * n, 1);
    if (mode == AttentionMode::knn) {
      int k = params.effective_k();
      std::fill(mask->begin(), mask->end(), 0);
      const T* vals = xh.data();
      for (long w = 0; w < bw; ++w) {
        auto edges = knn_edges(vals + w * n * ch, n, ch, k, params.include_self);
        std::uint8_t* m = mask->data() + w * n * n;
        for (int i = 0; i < n; ++i)
          for (int e = 0; e < k; ++e) m[static_cast<long>(i) * n + edges[static_cast<long>(i) * k + e]] = 1;
      }
    }

    auto p = matmul(xh, wt);
    auto q = matmul(xh, wp);
    auto logits = bmm_nt(p, q);
    auto alpha = masked_softmax_lastdim(logits, mask);
    auto u = bmm(alpha, matmul(xh, wg));
    head_outs.push_back(add(xh, matmul(u, wz)));
  }
  Tensor<T> merged = heads == 1 ? head_outs[0] : concat_lastdim(head_outs);
  return merge_windows(merged, N, C, H, W, M);
}

}  // namespace gabic
