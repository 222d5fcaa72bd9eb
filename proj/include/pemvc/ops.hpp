#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <memory>
#include <new>
#include <vector>

#include <Eigen/Core>

#include "pemvc/rng.hpp"
#include "pemvc/tensor.hpp"

namespace pemvc {

namespace detail {

template <typename S>
using EMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using EMap = Eigen::Map<EMat<S>>;
template <typename S>
using ECMap = Eigen::Map<const EMat<S>>;
template <typename S>
using EArrMap = Eigen::Map<Eigen::Array<S, Eigen::Dynamic, 1>>;
template <typename S>
using ECArrMap = Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>>;

// Fixed-alignment scratch. Eigen's vectorized array kernels (exp, reductions)
// split head/body/tail by buffer address, and the scalar and SIMD lanes do
// not produce identical bits, so the same values in a differently-aligned
// buffer can come out different. Ops that must be bit-reproducible run their
// Eigen array math in one of these instead of on raw tensor storage.
template <typename S>
class AlignedBuf {
 public:
  explicit AlignedBuf(int64_t n)
      : p_(static_cast<S*>(::operator new(
            sizeof(S) * static_cast<size_t>(n), std::align_val_t{64}))) {}
  ~AlignedBuf() { ::operator delete(p_, std::align_val_t{64}); }
  AlignedBuf(const AlignedBuf&) = delete;
  AlignedBuf& operator=(const AlignedBuf&) = delete;
  S* data() { return p_; }

 private:
  S* p_;
};

// c[m x n] = (or +=) op(a) * op(b) over contiguous row-major buffers.
template <typename S>
inline void mm(const S* a, const S* b, S* c, int m, int k, int n, bool ta,
               bool tb, bool acc) {
  EMap<S> C(c, m, n);
  if (!ta && !tb) {
    ECMap<S> A(a, m, k), B(b, k, n);
    if (acc) C.noalias() += A * B; else C.noalias() = A * B;
  } else if (ta && !tb) {
    ECMap<S> A(a, k, m), B(b, k, n);
    if (acc) C.noalias() += A.transpose() * B; else C.noalias() = A.transpose() * B;
  } else if (!ta && tb) {
    ECMap<S> A(a, m, k), B(b, n, k);
    if (acc) C.noalias() += A * B.transpose(); else C.noalias() = A * B.transpose();
  } else {
    ECMap<S> A(a, k, m), B(b, n, k);
    if (acc) C.noalias() += A.transpose() * B.transpose();
    else C.noalias() = A.transpose() * B.transpose();
  }
}

inline std::vector<int64_t> row_major_strides(const std::vector<int>& shape) {
  std::vector<int64_t> st(shape.size());
  int64_t s = 1;
  for (int i = static_cast<int>(shape.size()) - 1; i >= 0; --i) {
    st[static_cast<size_t>(i)] = s;
    s *= shape[static_cast<size_t>(i)];
  }
  return st;
}

// out[idx] = in[perm-mapped idx]; output-major gather with carry-based
// coordinate stepping (rank is small, numel can be large).
template <typename S>
inline void permute_copy(const S* in, S* out, const std::vector<int>& in_shape,
                         const std::vector<int>& order) {
  const int r = static_cast<int>(in_shape.size());
  std::vector<int64_t> in_strides = row_major_strides(in_shape);
  std::array<int64_t, 8> stride{};  // input stride of each output axis
  std::array<int, 8> extent{};
  for (int i = 0; i < r; ++i) {
    stride[static_cast<size_t>(i)] = in_strides[static_cast<size_t>(order[static_cast<size_t>(i)])];
    extent[static_cast<size_t>(i)] = in_shape[static_cast<size_t>(order[static_cast<size_t>(i)])];
  }
  int64_t total = 1;
  for (int i = 0; i < r; ++i) total *= extent[static_cast<size_t>(i)];
  std::array<int, 8> coord{};
  int64_t src = 0;
  for (int64_t o = 0; o < total; ++o) {
    out[o] = in[src];
    for (int ax = r - 1; ax >= 0; --ax) {
      auto a = static_cast<size_t>(ax);
      if (++coord[a] < extent[a]) { src += stride[a]; break; }
      coord[a] = 0;
      src -= stride[a] * (extent[a] - 1);
    }
  }
}

}  // namespace detail

namespace ops {

// ---------------------------------------------------------------------------
// matmul / affine
// ---------------------------------------------------------------------------

// General matrix product with optional transposes on the two trailing axes.
// Leading (batch) extents must match exactly, or one operand may be rank-2
// and is then broadcast across the other's leading extents.
template <typename S>
Tensor<S> matmul_tt(const Tensor<S>& a, const Tensor<S>& b, bool ta, bool tb,
                    Tape<S>* tape = nullptr) {
  if (a.rank() < 2 || b.rank() < 2) {
    throw ShapeError("matmul: operands must have rank >= 2, got " +
                     shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const auto& as = a.shape();
  const auto& bs = b.shape();
  int am = as[static_cast<size_t>(a.rank() - 2)], an = as[static_cast<size_t>(a.rank() - 1)];
  int bm = bs[static_cast<size_t>(b.rank() - 2)], bn = bs[static_cast<size_t>(b.rank() - 1)];
  int m = ta ? an : am, ka = ta ? am : an;
  int kb = tb ? bn : bm, n = tb ? bm : bn;
  if (ka != kb) {
    throw ShapeError("matmul: inner extents disagree for shapes " +
                     shape_str(as) + " and " + shape_str(bs));
  }
  std::vector<int> lead_a(as.begin(), as.end() - 2);
  std::vector<int> lead_b(bs.begin(), bs.end() - 2);
  bool share_a = false, share_b = false;
  std::vector<int> lead;
  if (lead_a == lead_b) {
    lead = lead_a;
  } else if (lead_b.empty()) {
    lead = lead_a;
    share_b = true;
  } else if (lead_a.empty()) {
    lead = lead_b;
    share_a = true;
  } else {
    throw ShapeError("matmul: leading extents disagree for shapes " +
                     shape_str(as) + " and " + shape_str(bs));
  }
  int64_t slices = 1;
  for (int e : lead) slices *= e;

  std::vector<int> out_shape = lead;
  out_shape.push_back(m);
  out_shape.push_back(n);
  Tensor<S> out(out_shape);

  const int64_t a_step = share_a ? 0 : static_cast<int64_t>(am) * an;
  const int64_t b_step = share_b ? 0 : static_cast<int64_t>(bm) * bn;
  const int64_t c_step = static_cast<int64_t>(m) * n;
  const int k = ka;
  for (int64_t s = 0; s < slices; ++s) {
    detail::mm(a.data() + s * a_step, b.data() + s * b_step,
               out.data() + s * c_step, m, k, n, ta, tb, false);
  }

  if (tape && tape->needs({&a, &b})) {
    bool need_a = a.requires_grad() || tape->tracked(a);
    bool need_b = b.requires_grad() || tape->tracked(b);
    Tensor<S> ac = a, bc = b, oc = out;
    tape->record(out, [=]() mutable {
      const S* g = oc.grad_cref().data();
      for (int64_t s = 0; s < slices; ++s) {
        const S* gs = g + s * c_step;
        const S* ap = ac.data() + s * a_step;
        const S* bp = bc.data() + s * b_step;
        if (need_a) {
          S* ga = ac.grad().data() + s * a_step;
          if (!ta && !tb)      detail::mm(gs, bp, ga, m, n, k, false, true, true);
          else if (!ta && tb)  detail::mm(gs, bp, ga, m, n, k, false, false, true);
          else if (ta && !tb)  detail::mm(bp, gs, ga, k, n, m, false, true, true);
          else                 detail::mm(bp, gs, ga, k, n, m, true, true, true);
        }
        if (need_b) {
          S* gb = bc.grad().data() + s * b_step;
          if (!ta && !tb)      detail::mm(ap, gs, gb, k, m, n, true, false, true);
          else if (!ta && tb)  detail::mm(gs, ap, gb, n, m, k, true, false, true);
          else if (ta && !tb)  detail::mm(ap, gs, gb, k, m, n, false, false, true);
          else                 detail::mm(gs, ap, gb, n, m, k, true, true, true);
        }
      }
    });
  }
  return out;
}

// c[i,j] = sum_p a[i,p] b[p,j]; leading extents broadcast as in matmul_tt.
template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b, Tape<S>* tape = nullptr) {
  return matmul_tt(a, b, false, false, tape);
}

// y = x W + b with b broadcast over rows.
template <typename S>
Tensor<S> affine(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b,
                 Tape<S>* tape = nullptr) {
  if (x.rank() != 2 || w.rank() != 2 || b.rank() != 1) {
    throw ShapeError("affine: expected x rank 2, W rank 2, b rank 1; got " +
                     shape_str(x.shape()) + ", " + shape_str(w.shape()) + ", " +
                     shape_str(b.shape()));
  }
  int n = x.dim(0), fi = x.dim(1), fo = w.dim(1);
  if (w.dim(0) != fi || b.dim(0) != fo) {
    throw ShapeError("affine: extents disagree for x " + shape_str(x.shape()) +
                     ", W " + shape_str(w.shape()) + ", b " + shape_str(b.shape()));
  }
  Tensor<S> out({n, fo});
  detail::mm(x.data(), w.data(), out.data(), n, fi, fo, false, false, false);
  {
    detail::EMap<S> O(out.data(), n, fo);
    detail::ECMap<S> B(b.data(), 1, fo);
    O.rowwise() += B.row(0);
  }
  if (tape && tape->needs({&x, &w, &b})) {
    bool nx = x.requires_grad() || tape->tracked(x);
    bool nw = w.requires_grad() || tape->tracked(w);
    bool nb = b.requires_grad() || tape->tracked(b);
    Tensor<S> xc = x, wc = w, bc = b, oc = out;
    tape->record(out, [=]() mutable {
      const S* g = oc.grad_cref().data();
      if (nx) detail::mm(g, wc.data(), xc.grad().data(), n, fo, fi, false, true, true);
      if (nw) detail::mm(xc.data(), g, wc.grad().data(), fi, n, fo, true, false, true);
      if (nb) {
        S* gb = bc.grad().data();
        detail::ECMap<S> G(g, n, fo);
        detail::EMap<S> GB(gb, 1, fo);
        GB.row(0) += G.colwise().sum();
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// conv3d
// ---------------------------------------------------------------------------

// Cross-correlation over B x C x D x H x W input with C_out x C_in x kd x kh x kw
// weights; kernel restricted to the shapes the architecture uses. Bias may be
// an undefined tensor. Implemented as im2col + matrix product; the column
// buffer is kept for the backward pass.
template <typename S>
Tensor<S> conv3d(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& bias,
                 std::array<int, 3> stride, std::array<int, 3> pad,
                 Tape<S>* tape = nullptr) {
  if (x.rank() != 5 || w.rank() != 5) {
    throw ShapeError("conv3d: expected rank-5 input and weights, got " +
                     shape_str(x.shape()) + " and " + shape_str(w.shape()));
  }
  const int B = x.dim(0), C = x.dim(1), D = x.dim(2), H = x.dim(3), W = x.dim(4);
  const int Co = w.dim(0), Ci = w.dim(1), kd = w.dim(2), kh = w.dim(3), kw = w.dim(4);
  const bool k111 = kd == 1 && kh == 1 && kw == 1;
  const bool k311 = kd == 3 && kh == 1 && kw == 1;
  const bool k333 = kd == 3 && kh == 3 && kw == 3;
  if (!k111 && !k311 && !k333) {
    throw ConfigError("conv3d: unsupported kernel " + std::to_string(kd) + "x" +
                      std::to_string(kh) + "x" + std::to_string(kw));
  }
  if (Ci != C) {
    throw ShapeError("conv3d: input channels " + std::to_string(C) +
                     " do not match weight channels " + std::to_string(Ci));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != Co)) {
    throw ShapeError("conv3d: bias shape " + shape_str(bias.shape()) +
                     " does not match " + std::to_string(Co) + " output channels");
  }
  const int od = (D + 2 * pad[0] - kd) / stride[0] + 1;
  const int oh = (H + 2 * pad[1] - kh) / stride[1] + 1;
  const int ow = (W + 2 * pad[2] - kw) / stride[2] + 1;
  if (od <= 0 || oh <= 0 || ow <= 0) {
    throw ShapeError("conv3d: kernel does not fit padded input " + shape_str(x.shape()));
  }
  const int64_t K = static_cast<int64_t>(C) * kd * kh * kw;
  const int64_t OV = static_cast<int64_t>(od) * oh * ow;

  auto cols = std::make_shared<std::vector<S>>(static_cast<size_t>(B) * K * OV, S(0));
  const int64_t in_item = static_cast<int64_t>(C) * D * H * W;
  for (int b = 0; b < B; ++b) {
    const S* xb = x.data() + b * in_item;
    S* col = cols->data() + b * K * OV;
    int64_t row = 0;
    for (int c = 0; c < C; ++c) {
      for (int zd = 0; zd < kd; ++zd)
        for (int zh = 0; zh < kh; ++zh)
          for (int zw = 0; zw < kw; ++zw, ++row) {
            S* dst = col + row * OV;
            const S* src = xb + static_cast<int64_t>(c) * D * H * W;
            for (int d = 0; d < od; ++d) {
              int id = d * stride[0] + zd - pad[0];
              if (id < 0 || id >= D) { dst += static_cast<int64_t>(oh) * ow; continue; }
              for (int h = 0; h < oh; ++h) {
                int ih = h * stride[1] + zh - pad[1];
                if (ih < 0 || ih >= H) { dst += ow; continue; }
                const S* line = src + (static_cast<int64_t>(id) * H + ih) * W;
                int iw0 = zw - pad[2];
                for (int v = 0; v < ow; ++v, ++dst) {
                  int iw = v * stride[2] + iw0;
                  if (iw >= 0 && iw < W) *dst = line[iw];
                }
              }
            }
          }
    }
  }

  Tensor<S> out({B, Co, od, oh, ow});
  const int64_t out_item = static_cast<int64_t>(Co) * OV;
  for (int b = 0; b < B; ++b) {
    detail::mm(w.data(), cols->data() + b * K * OV, out.data() + b * out_item,
               Co, static_cast<int>(K), static_cast<int>(OV), false, false, false);
    if (bias.defined()) {
      S* ob = out.data() + b * out_item;
      for (int c = 0; c < Co; ++c) {
        S bv = bias.data()[c];
        detail::EArrMap<S>(ob + c * OV, OV) += bv;
      }
    }
  }

  bool want_bias = bias.defined();
  if (tape && (tape->needs({&x, &w}) || (want_bias && tape->needs({&bias})))) {
    bool nx = x.requires_grad() || tape->tracked(x);
    bool nw = w.requires_grad() || tape->tracked(w);
    bool nb = want_bias && (bias.requires_grad() || tape->tracked(bias));
    Tensor<S> xc = x, wc = w, bc = bias, oc = out;
    std::array<int, 3> st = stride, pd = pad;
    tape->record(out, [=]() mutable {
      const S* g = oc.grad_cref().data();
      std::vector<S> dcol;
      if (nx) dcol.resize(static_cast<size_t>(K) * OV);
      for (int b = 0; b < B; ++b) {
        const S* gb = g + b * out_item;
        if (nw) {
          detail::mm(gb, cols->data() + b * K * OV, wc.grad().data(), Co,
                     static_cast<int>(OV), static_cast<int>(K), false, true, true);
        }
        if (nb) {
          S* gbias = bc.grad().data();
          for (int c = 0; c < Co; ++c) {
            const S* gc = gb + c * OV;
            S acc2 = S(0);  // fixed-order sum keeps the bits reproducible
            for (int64_t v = 0; v < OV; ++v) acc2 += gc[v];
            gbias[c] += acc2;
          }
        }
        if (nx) {
          detail::mm(wc.data(), gb, dcol.data(), static_cast<int>(K), Co,
                     static_cast<int>(OV), true, false, false);
          // col2im scatter-add, mirroring the gather above
          S* gx = xc.grad().data() + b * in_item;
          int64_t row = 0;
          for (int c = 0; c < C; ++c) {
            for (int zd = 0; zd < kd; ++zd)
              for (int zh = 0; zh < kh; ++zh)
                for (int zw = 0; zw < kw; ++zw, ++row) {
                  const S* src = dcol.data() + row * OV;
                  S* dst = gx + static_cast<int64_t>(c) * D * H * W;
                  for (int d = 0; d < od; ++d) {
                    int id = d * st[0] + zd - pd[0];
                    if (id < 0 || id >= D) { src += static_cast<int64_t>(oh) * ow; continue; }
                    for (int h = 0; h < oh; ++h) {
                      int ih = h * st[1] + zh - pd[1];
                      if (ih < 0 || ih >= H) { src += ow; continue; }
                      S* line = dst + (static_cast<int64_t>(id) * H + ih) * W;
                      int iw0 = zw - pd[2];
                      for (int v = 0; v < ow; ++v, ++src) {
                        int iw = v * st[2] + iw0;
                        if (iw >= 0 && iw < W) line[iw] += *src;
                      }
                    }
                  }
                }
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// elementwise and structural ops
// ---------------------------------------------------------------------------

// Row-wise exp-normalization over the last axis, max-subtracted for
// stability. Rows sum to 1 and entries lie in (0,1).
template <typename S>
Tensor<S> softmax_rows(const Tensor<S>& x, Tape<S>* tape = nullptr) {
  if (x.rank() < 2) {
    throw ShapeError("softmax_rows: expected rank >= 2, got " + shape_str(x.shape()));
  }
  const int64_t c = x.dim(x.rank() - 1);
  const int64_t rows = x.numel() / c;
  Tensor<S> out(x.shape());
  // Every row is staged through the same aligned scratch so the vectorized
  // exp takes one fixed code path; output bits then depend only on input
  // bits, not on where the allocator happened to place the tensors.
  detail::AlignedBuf<S> scratch(c);
  S* s = scratch.data();
  detail::EArrMap<S> si(s, c);
  for (int64_t r = 0; r < rows; ++r) {
    std::memcpy(s, x.data() + r * c, sizeof(S) * static_cast<size_t>(c));
    S mx = si.maxCoeff();
    si = (si - mx).exp();
    si /= si.sum();
    std::memcpy(out.data() + r * c, s, sizeof(S) * static_cast<size_t>(c));
  }
  if (tape && tape->needs({&x})) {
    Tensor<S> xc = x, oc = out;
    tape->record(out, [=]() mutable {
      const S* g = oc.grad_cref().data();
      S* gx = xc.grad().data();
      const S* y = oc.data();
      for (int64_t r = 0; r < rows; ++r) {
        const S* gi = g + r * c;
        const S* yi = y + r * c;
        S* go = gx + r * c;
        S dot = S(0);
        for (int64_t j = 0; j < c; ++j) dot += gi[j] * yi[j];
        for (int64_t j = 0; j < c; ++j) go[j] += yi[j] * (gi[j] - dot);
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> relu(const Tensor<S>& x, Tape<S>* tape = nullptr) {
  Tensor<S> out(x.shape());
  const S* xi = x.data();
  S* yo = out.data();
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) yo[i] = xi[i] > S(0) ? xi[i] : S(0);
  if (tape && tape->needs({&x})) {
    Tensor<S> xc = x, oc = out;
    tape->record(out, [=]() mutable {
      const S* g = oc.grad_cref().data();
      const S* xv = xc.data();
      S* gx = xc.grad().data();
      for (int64_t i = 0; i < n; ++i)
        if (xv[i] > S(0)) gx[i] += g[i];
    });
  }
  return out;
}

template <typename S>
Tensor<S> sigmoid(const Tensor<S>& x, Tape<S>* tape = nullptr) {
  Tensor<S> out(x.shape());
  const S* xi = x.data();
  S* yo = out.data();
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) {
    S v = xi[i];
    yo[i] = v >= S(0) ? S(1) / (S(1) + std::exp(-v))
                      : std::exp(v) / (S(1) + std::exp(v));
  }
  if (tape && tape->needs({&x})) {
    Tensor<S> xc = x, oc = out;
    tape->record(out, [=]() mutable {
      const S* g = oc.grad_cref().data();
      const S* y = oc.data();
      S* gx = xc.grad().data();
      for (int64_t i = 0; i < n; ++i) gx[i] += g[i] * y[i] * (S(1) - y[i]);
    });
  }
  return out;
}

// Inverted dropout: train mode zeroes each element with probability p and
// scales survivors by 1/(1-p); eval mode is the identity. One uniform draw
// per element in row-major order.
template <typename S>
Tensor<S> dropout(const Tensor<S>& x, double p, bool train_mode, Rng* rng,
                  Tape<S>* tape = nullptr) {
  if (!(p >= 0.0 && p < 1.0)) {
    throw ConfigError("dropout: probability must lie in [0,1), got " + std::to_string(p));
  }
  if (train_mode && p > 0.0 && rng == nullptr) {
    throw InternalError("dropout: train mode needs an RNG stream");
  }
  const int64_t n = x.numel();
  Tensor<S> out(x.shape());
  if (!train_mode || p == 0.0) {
    std::memcpy(out.data(), x.data(), sizeof(S) * static_cast<size_t>(n));
    if (tape && tape->needs({&x})) {
      Tensor<S> xc = x, oc = out;
      tape->record(out, [=]() mutable {
        const S* g = oc.grad_cref().data();
        S* gx = xc.grad().data();
        for (int64_t i = 0; i < n; ++i) gx[i] += g[i];
      });
    }
    return out;
  }
  auto mask = std::make_shared<std::vector<uint8_t>>(static_cast<size_t>(n));
  const S scale = static_cast<S>(1.0 / (1.0 - p));
  const S* xi = x.data();
  S* yo = out.data();
  for (int64_t i = 0; i < n; ++i) {
    bool keep = rng->uniform() >= p;
    (*mask)[static_cast<size_t>(i)] = keep;
    yo[i] = keep ? xi[i] * scale : S(0);
  }
  if (tape && tape->needs({&x})) {
    Tensor<S> xc = x, oc = out;
    tape->record(out, [=]() mutable {
      const S* g = oc.grad_cref().data();
      S* gx = xc.grad().data();
      for (int64_t i = 0; i < n; ++i)
        if ((*mask)[static_cast<size_t>(i)]) gx[i] += g[i] * scale;
    });
  }
  return out;
}

// Materialized axis permutation; out_dim[i] = in_dim[order[i]].
template <typename S>
Tensor<S> permute(const Tensor<S>& x, const std::vector<int>& order,
                  Tape<S>* tape = nullptr) {
  const int r = x.rank();
  if (static_cast<int>(order.size()) != r || r > 8) {
    throw ShapeError("permute: bad axis order for rank " + std::to_string(r));
  }
  std::vector<bool> seen(static_cast<size_t>(r), false);
  for (int a : order) {
    if (a < 0 || a >= r || seen[static_cast<size_t>(a)]) {
      throw ShapeError("permute: axis order is not a permutation of 0.." +
                       std::to_string(r - 1));
    }
    seen[static_cast<size_t>(a)] = true;
  }
  std::vector<int> out_shape(static_cast<size_t>(r));
  for (int i = 0; i < r; ++i)
    out_shape[static_cast<size_t>(i)] = x.dim(order[static_cast<size_t>(i)]);
  Tensor<S> out(out_shape);
  detail::permute_copy(x.data(), out.data(), x.shape(), order);
  if (tape && tape->needs({&x})) {
    std::vector<int> inverse(static_cast<size_t>(r));
    for (int i = 0; i < r; ++i)
      inverse[static_cast<size_t>(order[static_cast<size_t>(i)])] = i;
    Tensor<S> xc = x, oc = out;
    std::vector<int> oshape = out_shape;
    tape->record(out, [=]() mutable {
      std::vector<S> gperm(static_cast<size_t>(oc.numel()));
      detail::permute_copy(oc.grad_cref().data(), gperm.data(), oshape, inverse);
      S* gx = xc.grad().data();
      for (size_t i = 0; i < gperm.size(); ++i) gx[i] += gperm[i];
    });
  }
  return out;
}

// Row-major reinterpretation with the element count conserved.
template <typename S>
Tensor<S> reshape(const Tensor<S>& x, const std::vector<int>& new_shape,
                  Tape<S>* tape = nullptr) {
  if (shape_numel(new_shape) != x.numel()) {
    throw ShapeError("reshape: cannot reshape " + shape_str(x.shape()) + " into " +
                     shape_str(new_shape));
  }
  Tensor<S> out(new_shape, x.vec());
  if (tape && tape->needs({&x})) {
    Tensor<S> xc = x, oc = out;
    tape->record(out, [=]() mutable {
      const S* g = oc.grad_cref().data();
      S* gx = xc.grad().data();
      const int64_t n = oc.numel();
      for (int64_t i = 0; i < n; ++i) gx[i] += g[i];
    });
  }
  return out;
}

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b, Tape<S>* tape = nullptr) {
  if (a.shape() != b.shape()) {
    throw ShapeError("add: shapes disagree, " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  Tensor<S> out(a.shape());
  const int64_t n = a.numel();
  detail::ECArrMap<S> A(a.data(), n), B(b.data(), n);
  detail::EArrMap<S>(out.data(), n) = A + B;
  if (tape && tape->needs({&a, &b})) {
    bool na = a.requires_grad() || tape->tracked(a);
    bool nb = b.requires_grad() || tape->tracked(b);
    Tensor<S> ac = a, bc = b, oc = out;
    tape->record(out, [=]() mutable {
      const S* g = oc.grad_cref().data();
      if (na) {
        S* ga = ac.grad().data();
        for (int64_t i = 0; i < n; ++i) ga[i] += g[i];
      }
      if (nb) {
        S* gb = bc.grad().data();
        for (int64_t i = 0; i < n; ++i) gb[i] += g[i];
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b, Tape<S>* tape = nullptr) {
  if (a.shape() != b.shape()) {
    throw ShapeError("mul: shapes disagree, " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  Tensor<S> out(a.shape());
  const int64_t n = a.numel();
  detail::ECArrMap<S> A(a.data(), n), B(b.data(), n);
  detail::EArrMap<S>(out.data(), n) = A * B;
  if (tape && tape->needs({&a, &b})) {
    bool na = a.requires_grad() || tape->tracked(a);
    bool nb = b.requires_grad() || tape->tracked(b);
    Tensor<S> ac = a, bc = b, oc = out;
    tape->record(out, [=]() mutable {
      const S* g = oc.grad_cref().data();
      if (na) {
        S* ga = ac.grad().data();
        const S* bv = bc.data();
        for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * bv[i];
      }
      if (nb) {
        S* gb = bc.grad().data();
        const S* av = ac.data();
        for (int64_t i = 0; i < n; ++i) gb[i] += g[i] * av[i];
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> scale(const Tensor<S>& x, S factor, Tape<S>* tape = nullptr) {
  Tensor<S> out(x.shape());
  const int64_t n = x.numel();
  detail::EArrMap<S>(out.data(), n) = detail::ECArrMap<S>(x.data(), n) * factor;
  if (tape && tape->needs({&x})) {
    Tensor<S> xc = x, oc = out;
    tape->record(out, [=]() mutable {
      const S* g = oc.grad_cref().data();
      S* gx = xc.grad().data();
      for (int64_t i = 0; i < n; ++i) gx[i] += g[i] * factor;
    });
  }
  return out;
}

// Column-wise concatenation of rank-2 tensors with equal row counts.
template <typename S>
Tensor<S> concat_cols(const std::vector<Tensor<S>>& parts, Tape<S>* tape = nullptr) {
  if (parts.empty()) throw ShapeError("concat_cols: nothing to concatenate");
  const int rows = parts[0].dim(0);
  int total = 0;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.dim(0) != rows) {
      throw ShapeError("concat_cols: all parts must be rank-2 with " +
                       std::to_string(rows) + " rows, got " + shape_str(p.shape()));
    }
    total += p.dim(1);
  }
  Tensor<S> out({rows, total});
  int off = 0;
  for (const auto& p : parts) {
    int c = p.dim(1);
    for (int r = 0; r < rows; ++r)
      std::memcpy(out.data() + static_cast<int64_t>(r) * total + off,
                  p.data() + static_cast<int64_t>(r) * c, sizeof(S) * static_cast<size_t>(c));
    off += c;
  }
  bool any = false;
  if (tape) {
    for (const auto& p : parts)
      if (p.requires_grad() || tape->tracked(p)) { any = true; break; }
  }
  if (tape && any) {
    std::vector<Tensor<S>> pc = parts;
    std::vector<bool> need;
    need.reserve(parts.size());
    for (const auto& p : parts)
      need.push_back(p.requires_grad() || tape->tracked(p));
    Tensor<S> oc = out;
    tape->record(out, [=]() mutable {
      const S* g = oc.grad_cref().data();
      int o = 0;
      for (size_t i = 0; i < pc.size(); ++i) {
        int c = pc[i].dim(1);
        if (need[i]) {
          S* gp = pc[i].grad().data();
          for (int r = 0; r < rows; ++r) {
            const S* gs = g + static_cast<int64_t>(r) * total + o;
            S* gd = gp + static_cast<int64_t>(r) * c;
            for (int j = 0; j < c; ++j) gd[j] += gs[j];
          }
        }
        o += c;
      }
    });
  }
  return out;
}

// Global average pool over the three spatial axes: B x C x D x H x W -> B x C.
template <typename S>
Tensor<S> mean_spatial(const Tensor<S>& x, Tape<S>* tape = nullptr) {
  if (x.rank() != 5) {
    throw ShapeError("mean_spatial: expected rank-5 input, got " + shape_str(x.shape()));
  }
  const int B = x.dim(0), C = x.dim(1);
  const int64_t vox = static_cast<int64_t>(x.dim(2)) * x.dim(3) * x.dim(4);
  Tensor<S> out({B, C});
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      const S* xi = x.data() + (static_cast<int64_t>(b) * C + c) * vox;
      S acc = S(0);  // fixed-order sum keeps the bits reproducible
      for (int64_t v = 0; v < vox; ++v) acc += xi[v];
      out.data()[static_cast<int64_t>(b) * C + c] = acc / static_cast<S>(vox);
    }
  if (tape && tape->needs({&x})) {
    Tensor<S> xc = x, oc = out;
    tape->record(out, [=]() mutable {
      const S* g = oc.grad_cref().data();
      S* gx = xc.grad().data();
      for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
          S gv = g[static_cast<int64_t>(b) * C + c] / static_cast<S>(vox);
          detail::EArrMap<S>(gx + (static_cast<int64_t>(b) * C + c) * vox, vox) += gv;
        }
    });
  }
  return out;
}

template <typename S>
Tensor<S> sum_all(const Tensor<S>& x, Tape<S>* tape = nullptr) {
  Tensor<S> out({1});
  {
    const S* xi = x.data();
    const int64_t n = x.numel();
    S acc = S(0);  // fixed-order sum keeps the bits reproducible
    for (int64_t i = 0; i < n; ++i) acc += xi[i];
    out.data()[0] = acc;
  }
  if (tape && tape->needs({&x})) {
    Tensor<S> xc = x, oc = out;
    tape->record(out, [=]() mutable {
      S g = oc.grad_cref()[0];
      S* gx = xc.grad().data();
      const int64_t n = xc.numel();
      for (int64_t i = 0; i < n; ++i) gx[i] += g;
    });
  }
  return out;
}

// Mean binary cross-entropy on logits, computed as softplus(-(2y-1)z) in the
// overflow-safe max/log1p form. Labels must be exactly 0 or 1.
template <typename S>
Tensor<S> bce_with_logits(const Tensor<S>& logits, const Tensor<S>& labels,
                          Tape<S>* tape = nullptr) {
  if (logits.numel() != labels.numel()) {
    throw ShapeError("bce_with_logits: logits " + shape_str(logits.shape()) +
                     " vs labels " + shape_str(labels.shape()));
  }
  const int64_t n = logits.numel();
  const S* z = logits.data();
  const S* y = labels.data();
  S total = S(0);
  for (int64_t i = 0; i < n; ++i) {
    if (y[i] != S(0) && y[i] != S(1)) {
      throw DataError("bce_with_logits: label at index " + std::to_string(i) +
                      " is not binary");
    }
    S m = (S(2) * y[i] - S(1)) * z[i];
    S t = -m;
    S sp = std::max(t, S(0)) + std::log1p(std::exp(-std::abs(t)));
    total += sp;
  }
  Tensor<S> out({1});
  out.data()[0] = total / static_cast<S>(n);
  if (tape && tape->needs({&logits})) {
    Tensor<S> zc = logits, yc = labels, oc = out;
    tape->record(out, [=]() mutable {
      S g = oc.grad_cref()[0];
      S* gz = zc.grad().data();
      const S* zv = zc.data();
      const S* yv = yc.data();
      for (int64_t i = 0; i < n; ++i) {
        S v = zv[i];
        S sig = v >= S(0) ? S(1) / (S(1) + std::exp(-v))
                          : std::exp(v) / (S(1) + std::exp(v));
        gz[i] += g * (sig - yv[i]) / static_cast<S>(n);
      }
    });
  }
  return out;
}

}  // namespace ops
}  // namespace pemvc
