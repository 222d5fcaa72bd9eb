// Brute-force reference implementations shared by the unit suites and the
// acceptance gate. Everything here is written with plain loops and canonical
// index arithmetic only, so it cannot share a bug with the library's
// view/fold bookkeeping or its linear-algebra kernels.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "pemvc/cmaf.hpp"
#include "pemvc/mvcs.hpp"
#include "pemvc/rng.hpp"
#include "pemvc/tensor.hpp"

namespace refs {

using pemvc::Rng;
using Td = pemvc::Tensor<double>;

inline Td random_tensor(const std::vector<int>& shape, Rng& rng,
                        double lo = -1.0, double hi = 1.0) {
  Td t(shape);
  for (auto& v : t.vec()) v = lo + (hi - lo) * rng.uniform();
  return t;
}

// Row softmax on a dense row-major matrix, plain loops.
inline void ref_softmax_rows(std::vector<double>& m, int rows, int cols) {
  for (int r = 0; r < rows; ++r) {
    double* row = m.data() + static_cast<int64_t>(r) * cols;
    double mx = row[0];
    for (int j = 1; j < cols; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (int j = 0; j < cols; ++j) {
      row[j] = std::exp(row[j] - mx);
      sum += row[j];
    }
    for (int j = 0; j < cols; ++j) row[j] /= sum;
  }
}

// Straight-line reference for the whole block (residual off): for each view
// it materializes the spatial and channel similarity matrices slice by slice,
// and for each fold axis the dimensional similarity matrix, using nothing but
// index arithmetic on the canonical B,C,D,H,W layout.
inline Td ref_mvcs_block(const Td& x, pemvc::MvcsParams<double>& p) {
  using pemvc::ChannelMap;
  const int B = x.dim(0), C = x.dim(1), D = x.dim(2), H = x.dim(3), W = x.dim(4);
  auto xat = [&](int b, int c, int d, int h, int w) {
    return x.data()[(((static_cast<int64_t>(b) * C + c) * D + d) * H + h) * W + w];
  };
  Td out(x.shape());
  auto oat = [&](int b, int c, int d, int h, int w) -> double& {
    return out.data()[(((static_cast<int64_t>(b) * C + c) * D + d) * H + h) * W + w];
  };

  // Channel map evaluated at one canonical position.
  auto project = [&](const ChannelMap<double>& m, int b, int d, int h, int w,
                     int cp) {
    double acc = m.b.data()[cp];
    for (int c = 0; c < C; ++c)
      acc += xat(b, c, d, h, w) * m.w.data()[static_cast<int64_t>(c) * m.w.dim(1) + cp];
    return acc;
  };

  // Per view: the fold axis picks the slice, the other two spatial axes form
  // the in-plane positions. pos(t, slice, i, j) -> canonical (d,h,w).
  auto pos = [&](int t, int slice, int i, int j, int& d, int& h, int& w) {
    if (t == 0) { d = slice; h = i; w = j; }        // plane H x W
    else if (t == 1) { h = slice; w = i; d = j; }   // plane W x D
    else { w = slice; h = i; d = j; }               // plane H x D
  };
  const int ext[3] = {D, H, W};
  const int pi[3] = {H, W, H}, pj[3] = {W, D, D};

  for (int t = 0; t < 3; ++t) {
    auto& maps = p.view_maps[static_cast<size_t>(t)];
    const int ni = pi[t], nj = pj[t], S = ni * nj;
    std::vector<double> q(static_cast<size_t>(S) * C), k(q.size()), v(q.size());
    for (int b = 0; b < B; ++b)
      for (int slice = 0; slice < ext[t]; ++slice) {
        for (int i = 0; i < ni; ++i)
          for (int j = 0; j < nj; ++j) {
            int d, h, w;
            pos(t, slice, i, j, d, h, w);
            for (int c = 0; c < C; ++c) {
              const size_t s = static_cast<size_t>(i * nj + j) * C + c;
              k[s] = project(maps[0], b, d, h, w, c);
              q[s] = project(maps[1], b, d, h, w, c);
              v[s] = project(maps[2], b, d, h, w, c);
            }
          }
        // spatial: M_S[s1][s2] = q[s1] . k[s2]
        std::vector<double> ms(static_cast<size_t>(S) * S, 0.0);
        for (int s1 = 0; s1 < S; ++s1)
          for (int s2 = 0; s2 < S; ++s2)
            for (int c = 0; c < C; ++c)
              ms[static_cast<size_t>(s1) * S + s2] +=
                  q[static_cast<size_t>(s1) * C + c] * k[static_cast<size_t>(s2) * C + c];
        ref_softmax_rows(ms, S, S);
        // channel: M_C[c1][c2] = sum_s k[s][c1] q[s][c2]
        std::vector<double> mc(static_cast<size_t>(C) * C, 0.0);
        for (int c1 = 0; c1 < C; ++c1)
          for (int c2 = 0; c2 < C; ++c2)
            for (int s = 0; s < S; ++s)
              mc[static_cast<size_t>(c1) * C + c2] +=
                  k[static_cast<size_t>(s) * C + c1] * q[static_cast<size_t>(s) * C + c2];
        ref_softmax_rows(mc, C, C);
        for (int i = 0; i < ni; ++i)
          for (int j = 0; j < nj; ++j) {
            const int s1 = i * nj + j;
            int d, h, w;
            pos(t, slice, i, j, d, h, w);
            for (int c = 0; c < C; ++c) {
              double os = 0.0;
              for (int s2 = 0; s2 < S; ++s2)
                os += ms[static_cast<size_t>(s1) * S + s2] * v[static_cast<size_t>(s2) * C + c];
              double oc = 0.0;  // out = v . A^T rowwise over channels
              for (int c2 = 0; c2 < C; ++c2)
                oc += v[static_cast<size_t>(s1) * C + c2] * mc[static_cast<size_t>(c) * C + c2];
              oat(b, c, d, h, w) += os + oc;
            }
          }
      }
  }

  // Shared 3x1x1 depth convolutions, zero-padded along D only.
  auto dconv = [&](int which, int b, int co, int d, int h, int w) {
    double acc = p.depth.b[static_cast<size_t>(which)].data()[co];
    const double* dw = p.depth.w[static_cast<size_t>(which)].data();
    for (int ci = 0; ci < C; ++ci)
      for (int z = 0; z < 3; ++z) {
        const int dd = d + z - 1;
        if (dd < 0 || dd >= D) continue;
        acc += dw[(static_cast<int64_t>(co) * C + ci) * 3 + z] * xat(b, ci, dd, h, w);
      }
    return acc;
  };
  for (int t = 0; t < 3; ++t) {
    const int axis = 2 + t;
    const int L = x.dim(axis);
    for (int b = 0; b < B; ++b) {
      // coords(l, a1, a2) -> canonical (d,h,w) with l on the fold axis
      auto coords = [&](int l, int a1, int a2, int& d, int& h, int& w) {
        if (axis == 2) { d = l; h = a1; w = a2; }
        else if (axis == 3) { d = a1; h = l; w = a2; }
        else { d = a1; h = a2; w = l; }
      };
      auto at_axis = [&](int which, int c, int l, int a1, int a2) {
        int d, h, w;
        coords(l, a1, a2, d, h, w);
        return dconv(which, b, c, d, h, w);
      };
      const int n1 = axis == 2 ? H : D;
      const int n2 = axis == 4 ? H : W;
      // M_D[l1][l2] = sum over channels and the two other spatial axes
      std::vector<double> md(static_cast<size_t>(L) * L, 0.0);
      for (int l1 = 0; l1 < L; ++l1)
        for (int l2 = 0; l2 < L; ++l2)
          for (int c = 0; c < C; ++c)
            for (int a1 = 0; a1 < n1; ++a1)
              for (int a2 = 0; a2 < n2; ++a2)
                md[static_cast<size_t>(l1) * L + l2] +=
                    at_axis(1, c, l1, a1, a2) * at_axis(0, c, l2, a1, a2);
      ref_softmax_rows(md, L, L);
      for (int l = 0; l < L; ++l)
        for (int c = 0; c < C; ++c)
          for (int a1 = 0; a1 < n1; ++a1)
            for (int a2 = 0; a2 < n2; ++a2) {
              double acc = 0.0;
              for (int l2 = 0; l2 < L; ++l2)
                acc += md[static_cast<size_t>(l) * L + l2] * at_axis(2, c, l2, a1, a2);
              int d, h, w;
              coords(l, a1, a2, d, h, w);
              oat(b, c, d, h, w) += acc;
            }
    }
  }
  return out;
}

// Worst |block - reference| over seeded random 1x2x3x3x3 trials, residual off.
inline double mvcs_block_worst(int trials) {
  pemvc::MvcsConfig cfg;
  cfg.residual = false;
  double worst = 0.0;
  for (int trial = 0; trial < trials; ++trial) {
    Rng rng(7000 + static_cast<uint64_t>(trial));
    Td x = random_tensor({1, 2, 3, 3, 3}, rng);
    pemvc::MvcsParams<double> p = pemvc::init_mvcs_params<double>(2, rng);
    Td got = pemvc::mvcs_block_forward(x, p, cfg);
    Td want = ref_mvcs_block(x, p);
    for (int64_t i = 0; i < x.numel(); ++i)
      worst = std::max(worst, std::abs(got.data()[i] - want.data()[i]));
  }
  return worst;
}

struct CmafRefStats {
  double worst = 0.0;         // max |library - double-loop reference|
  double worst_rowsum = 0.0;  // max |row sum of beta/rho - 1|
};

// Double-loop reference for the bidirectional match degrees and the cross
// contexts on random S=3, d=2 token pairs.
inline CmafRefStats cmaf_match_worst(int trials) {
  using namespace pemvc;
  const int B = 2, S = 3, d = 2;
  CmafRefStats st;
  for (int trial = 0; trial < trials; ++trial) {
    Rng rng(4000 + static_cast<uint64_t>(trial));
    CmafConfig cfg;
    cfg.image_dim = S * d;
    cfg.emr_dim = S * d;
    cfg.common_dim = S * d;
    cfg.tokens = S;
    cfg.token_dim = d;
    cfg.hidden = 4;
    cfg.dropout_p = 0.0;
    CmafParams<double> p = init_cmaf_params<double>(cfg, rng);
    TokenPair<double> tok;
    tok.x = random_tensor({B, S, d}, rng);
    tok.y = random_tensor({B, S, d}, rng);
    MatchDegrees<double> m = match_degrees(tok, p);
    CrossContexts<double> ctx = cross_attention_apply(m, tok);

    auto tat = [&](const Td& t, int b, int s, int c) {
      return t.data()[(static_cast<int64_t>(b) * S + s) * d + c];
    };
    auto mat = [&](const Td& t, int b, int i, int j) {
      return t.data()[(static_cast<int64_t>(b) * S + i) * S + j];
    };
    // token maps: affine per token
    auto mapped = [&](const Td& w, const Td& bias, const Td& t, int b, int s, int c) {
      double acc = bias.data()[c];
      for (int e = 0; e < d; ++e)
        acc += tat(t, b, s, e) * w.data()[static_cast<int64_t>(e) * d + c];
      return acc;
    };
    for (int b = 0; b < B; ++b) {
      double s_raw[S][S], t_raw[S][S];
      for (int i = 0; i < S; ++i)
        for (int j = 0; j < S; ++j) {
          double sv = 0.0, tv = 0.0;
          for (int c = 0; c < d; ++c) {
            sv += mapped(p.q1_w, p.q1_b, tok.x, b, i, c) *
                  mapped(p.k2_w, p.k2_b, tok.y, b, j, c);
            tv += mapped(p.q2_w, p.q2_b, tok.y, b, i, c) *
                  mapped(p.k1_w, p.k1_b, tok.x, b, j, c);
          }
          s_raw[i][j] = sv;
          t_raw[i][j] = tv;
        }
      // beta[j][i]: normalize s over image tokens i for each text token j
      for (int j = 0; j < S; ++j) {
        double mx = s_raw[0][j], mxt = t_raw[0][j];
        for (int i = 1; i < S; ++i) {
          mx = std::max(mx, s_raw[i][j]);
          mxt = std::max(mxt, t_raw[i][j]);
        }
        double zs = 0.0, zt = 0.0;
        for (int i = 0; i < S; ++i) {
          zs += std::exp(s_raw[i][j] - mx);
          zt += std::exp(t_raw[i][j] - mxt);
        }
        double bsum = 0.0, rsum = 0.0;
        for (int i = 0; i < S; ++i) {
          double beta = std::exp(s_raw[i][j] - mx) / zs;
          double rho = std::exp(t_raw[i][j] - mxt) / zt;
          st.worst = std::max(st.worst, std::abs(mat(m.beta, b, j, i) - beta));
          st.worst = std::max(st.worst, std::abs(mat(m.rho, b, j, i) - rho));
          bsum += mat(m.beta, b, j, i);
          rsum += mat(m.rho, b, j, i);
        }
        st.worst_rowsum = std::max(st.worst_rowsum, std::abs(bsum - 1.0));
        st.worst_rowsum = std::max(st.worst_rowsum, std::abs(rsum - 1.0));
      }
      // contexts: convex combinations of the opposite modality's tokens
      for (int j = 0; j < S; ++j)
        for (int c = 0; c < d; ++c) {
          double t2i = 0.0, i2t = 0.0;
          for (int i = 0; i < S; ++i) {
            t2i += mat(m.beta, b, j, i) * tat(tok.x, b, i, c);
            i2t += mat(m.rho, b, j, i) * tat(tok.y, b, i, c);
          }
          st.worst = std::max(st.worst, std::abs(tat(ctx.t2i, b, j, c) - t2i));
          st.worst = std::max(st.worst, std::abs(tat(ctx.i2t, b, j, c) - i2t));
        }
    }
  }
  return st;
}

// Concordant-pair oracle: every (positive, negative) pair scores 1, 1/2 or 0.
inline double ref_auc(const std::vector<double>& scores,
                      const std::vector<int>& labels) {
  double num = 0.0;
  int64_t pairs = 0;
  for (size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] != 1) continue;
    for (size_t j = 0; j < scores.size(); ++j) {
      if (labels[j] != 0) continue;
      ++pairs;
      if (scores[i] > scores[j]) num += 1.0;
      else if (scores[i] == scores[j]) num += 0.5;
    }
  }
  return num / static_cast<double>(pairs);
}

}  // namespace refs
