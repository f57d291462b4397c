// lingwav/graph.hpp

// Copyright 2026  The lingwav Authors

// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the Apache 2 License for the specific language governing permissions and
// limitations under the License.

#ifndef LINGWAV_GRAPH_HPP_
#define LINGWAV_GRAPH_HPP_

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <utility>
#include <vector>

#include "lingwav/common.hpp"
#include "lingwav/rng.hpp"
#include "lingwav/tensor.hpp"

namespace lingwav {

// Define-by-run tape of differentiable operations.
//
// Each op computes its output eagerly and, when any input requires a
// gradient, records a closure with the exact analytic backward. Backward()
// replays the closures in reverse. The tape lives for one step; a fresh
// Graph is built per training step.
//
// Not a general autodiff compiler: ops are coarse (attention and conv are
// single nodes) and the inner arithmetic is delegated to Eigen.
template <typename T>
class Graph {
 public:
  using Ref = int32_t;
  static constexpr Ref kNone = -1;

  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MatMap = Eigen::Map<Mat>;
  using ConstMatMap = Eigen::Map<const Mat>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Ref Input(Tensor<T> value, bool requires_grad = false) {
    nodes_.push_back(Node{std::move(value), Tensor<T>(), requires_grad});
    return static_cast<Ref>(nodes_.size() - 1);
  }

  const Tensor<T>& value(Ref r) const { return nodes_[static_cast<size_t>(r)].value; }
  const Tensor<T>& grad(Ref r) const { return nodes_[static_cast<size_t>(r)].grad; }
  bool requires_grad(Ref r) const { return nodes_[static_cast<size_t>(r)].requires_grad; }

  // Gradient tensor of a node, allocated (zero) on first touch.
  Tensor<T>& GradOf(Ref r) {
    Node& n = nodes_[static_cast<size_t>(r)];
    if (n.grad.data.empty() && !n.value.data.empty()) {
      n.grad = Tensor<T>(n.value.shape);
    }
    return n.grad;
  }

  void Backward(Ref loss) {
    LINGWAV_CHECK(value(loss).size() == 1, ErrorCode::kInternal,
                  "Backward expects a scalar loss node");
    GradOf(loss)[0] = T(1);
    for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) (*it)();
  }

  // ---------------------------------------------------------------- basics

  Ref Add(Ref a, Ref b) {
    const Tensor<T>& va = value(a);
    const Tensor<T>& vb = value(b);
    LINGWAV_CHECK(va.SameShape(vb), ErrorCode::kShape,
                  "Add: shape mismatch " << va.ShapeStr() << " vs " << vb.ShapeStr());
    Tensor<T> out = va;
    for (int64_t i = 0; i < out.size(); ++i) out[i] += vb[i];
    Ref y = Input(std::move(out), requires_grad(a) || requires_grad(b));
    if (requires_grad(y)) {
      Record([this, a, b, y] {
        const Tensor<T>& dy = grad(y);
        if (requires_grad(a)) {
          Tensor<T>& da = GradOf(a);
          for (int64_t i = 0; i < dy.size(); ++i) da[i] += dy[i];
        }
        if (requires_grad(b)) {
          Tensor<T>& db = GradOf(b);
          for (int64_t i = 0; i < dy.size(); ++i) db[i] += dy[i];
        }
      });
    }
    return y;
  }

  Ref Scale(Ref a, T s) {
    Tensor<T> out = value(a);
    for (auto& v : out.data) v *= s;
    Ref y = Input(std::move(out), requires_grad(a));
    if (requires_grad(y)) {
      Record([this, a, y, s] {
        const Tensor<T>& dy = grad(y);
        Tensor<T>& da = GradOf(a);
        for (int64_t i = 0; i < dy.size(); ++i) da[i] += s * dy[i];
      });
    }
    return y;
  }

  // a + s * b for scalar nodes; combines loss terms.
  Ref Axpy(Ref a, Ref b, T s) { return Add(a, Scale(b, s)); }

  Ref Reshape(Ref a, std::vector<int64_t> shape) {
    const Tensor<T>& va = value(a);
    LINGWAV_CHECK(Tensor<T>::NumElements(shape) == va.size(), ErrorCode::kShape,
                  "Reshape: element count mismatch");
    Tensor<T> out(std::move(shape), va.data);
    Ref y = Input(std::move(out), requires_grad(a));
    if (requires_grad(y)) {
      Record([this, a, y] {
        const Tensor<T>& dy = grad(y);
        Tensor<T>& da = GradOf(a);
        for (int64_t i = 0; i < dy.size(); ++i) da[i] += dy[i];
      });
    }
    return y;
  }

  // ---------------------------------------------------------------- matmul

  Ref Matmul(Ref a, Ref b) {
    const Tensor<T>& va = value(a);
    const Tensor<T>& vb = value(b);
    LINGWAV_CHECK(va.ndim() == 2 && vb.ndim() == 2 && va.dim(1) == vb.dim(0),
                  ErrorCode::kShape,
                  "Matmul: incompatible " << va.ShapeStr() << " x " << vb.ShapeStr());
    const int64_t m = va.dim(0), k = va.dim(1), n = vb.dim(1);
    Tensor<T> out({m, n});
    MatMap(out.data.data(), m, n).noalias() =
        ConstMatMap(va.data.data(), m, k) * ConstMatMap(vb.data.data(), k, n);
    Ref y = Input(std::move(out), requires_grad(a) || requires_grad(b));
    if (requires_grad(y)) {
      Record([this, a, b, y, m, k, n] {
        ConstMatMap dy(grad(y).data.data(), m, n);
        if (requires_grad(a)) {
          MatMap(GradOf(a).data.data(), m, k).noalias() +=
              dy * ConstMatMap(value(b).data.data(), k, n).transpose();
        }
        if (requires_grad(b)) {
          MatMap(GradOf(b).data.data(), k, n).noalias() +=
              ConstMatMap(value(a).data.data(), m, k).transpose() * dy;
        }
      });
    }
    return y;
  }

  // y = x W^T + b with W stored [out_dim, in_dim]; b may be kNone.
  Ref Linear(Ref x, Ref w, Ref b) {
    const Tensor<T>& vx = value(x);
    const Tensor<T>& vw = value(w);
    const int64_t n = vx.rows(), din = vx.cols();
    const int64_t dout = vw.dim(0);
    LINGWAV_CHECK(vw.ndim() == 2 && vw.dim(1) == din, ErrorCode::kShape,
                  "Linear: weight " << vw.ShapeStr() << " vs input cols " << din);
    Tensor<T> out({n, dout});
    MatMap(out.data.data(), n, dout).noalias() =
        ConstMatMap(vx.data.data(), n, din) *
        ConstMatMap(vw.data.data(), dout, din).transpose();
    if (b != kNone) {
      const Tensor<T>& vb = value(b);
      LINGWAV_CHECK(vb.size() == dout, ErrorCode::kShape, "Linear: bias size");
      for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < dout; ++j) out.at(i, j) += vb[j];
    }
    bool rg = requires_grad(x) || requires_grad(w) || (b != kNone && requires_grad(b));
    Ref y = Input(std::move(out), rg);
    if (rg) {
      Record([this, x, w, b, y, n, din, dout] {
        ConstMatMap dy(grad(y).data.data(), n, dout);
        if (requires_grad(x)) {
          MatMap(GradOf(x).data.data(), n, din).noalias() +=
              dy * ConstMatMap(value(w).data.data(), dout, din);
        }
        if (requires_grad(w)) {
          MatMap(GradOf(w).data.data(), dout, din).noalias() +=
              dy.transpose() * ConstMatMap(value(x).data.data(), n, din);
        }
        if (b != kNone && requires_grad(b)) {
          Tensor<T>& db = GradOf(b);
          for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < dout; ++j) db[j] += dy(i, j);
        }
      });
    }
    return y;
  }

  // ---------------------------------------------------------------- conv1d

  // x: [T_in, C_in], w: [C_out, K * C_in / groups], b: [C_out] or kNone.
  // Zero padding on both sides. Output [T_out, C_out].
  Ref Conv1d(Ref x, Ref w, Ref b, int64_t kernel, int64_t stride, int64_t pad,
             int64_t groups) {
    const Tensor<T>& vx = value(x);
    const Tensor<T>& vw = value(w);
    const int64_t t_in = vx.dim(0), c_in = vx.dim(1);
    const int64_t c_out = vw.dim(0);
    LINGWAV_CHECK(c_in % groups == 0 && c_out % groups == 0, ErrorCode::kShape,
                  "Conv1d: channels not divisible by groups");
    const int64_t cg_in = c_in / groups, cg_out = c_out / groups;
    LINGWAV_CHECK(vw.dim(1) == kernel * cg_in, ErrorCode::kShape,
                  "Conv1d: weight cols " << vw.dim(1) << " != K*Cin/g");
    const int64_t t_pad = t_in + 2 * pad;
    LINGWAV_CHECK(t_pad >= kernel, ErrorCode::kShape,
                  "Conv1d: input shorter than kernel");
    const int64_t t_out = (t_pad - kernel) / stride + 1;

    Tensor<T> out({t_out, c_out});
    Tensor<T> patches({t_out, kernel * cg_in});
    for (int64_t g = 0; g < groups; ++g) {
      Im2Col(vx, patches, kernel, stride, pad, g * cg_in, cg_in);
      MatMap(out.data.data(), t_out, c_out)
          .block(0, g * cg_out, t_out, cg_out)
          .noalias() =
          ConstMatMap(patches.data.data(), t_out, kernel * cg_in) *
          ConstMatMap(vw.data.data(), c_out, kernel * cg_in)
              .block(g * cg_out, 0, cg_out, kernel * cg_in)
              .transpose();
    }
    if (b != kNone) {
      const Tensor<T>& vb = value(b);
      for (int64_t i = 0; i < t_out; ++i)
        for (int64_t j = 0; j < c_out; ++j) out.at(i, j) += vb[j];
    }
    bool rg = requires_grad(x) || requires_grad(w) || (b != kNone && requires_grad(b));
    Ref y = Input(std::move(out), rg);
    if (rg) {
      // Patches are rebuilt in backward rather than kept alive; conv
      // activations dominate memory otherwise.
      Record([this, x, w, b, y, kernel, stride, pad, groups, t_out, cg_in,
              cg_out, c_out] {
        ConstMatMap dy(grad(y).data.data(), t_out, c_out);
        const Tensor<T>& vx2 = value(x);
        Tensor<T> patches2({t_out, kernel * cg_in});
        Tensor<T> dpatch({t_out, kernel * cg_in});
        for (int64_t g = 0; g < groups; ++g) {
          auto dy_g = dy.block(0, g * cg_out, t_out, cg_out);
          if (requires_grad(w)) {
            Im2Col(vx2, patches2, kernel, stride, pad, g * cg_in, cg_in);
            MatMap(GradOf(w).data.data(), c_out, kernel * cg_in)
                .block(g * cg_out, 0, cg_out, kernel * cg_in)
                .noalias() += dy_g.transpose() *
                ConstMatMap(patches2.data.data(), t_out, kernel * cg_in);
          }
          if (requires_grad(x)) {
            MatMap(dpatch.data.data(), t_out, kernel * cg_in).noalias() =
                dy_g *
                ConstMatMap(value(w).data.data(), c_out, kernel * cg_in)
                    .block(g * cg_out, 0, cg_out, kernel * cg_in);
            Col2ImAdd(GradOf(x), dpatch, kernel, stride, pad, g * cg_in, cg_in);
          }
        }
        if (b != kNone && requires_grad(b)) {
          Tensor<T>& db = GradOf(b);
          for (int64_t i = 0; i < t_out; ++i)
            for (int64_t j = 0; j < c_out; ++j) db[j] += dy(i, j);
        }
      });
    }
    return y;
  }

  // ------------------------------------------------------------- rowwise

  Ref LayerNorm(Ref x, Ref gain, Ref bias, T eps = T(1e-5)) {
    const Tensor<T>& vx = value(x);
    const int64_t n = vx.rows(), d = vx.cols();
    const Tensor<T>& vg = value(gain);
    const Tensor<T>& vb = value(bias);
    LINGWAV_CHECK(vg.size() == d && vb.size() == d, ErrorCode::kShape,
                  "LayerNorm: gain/bias size != " << d);
    Tensor<T> out({n, d});
    auto rstd = std::make_shared<std::vector<T>>(static_cast<size_t>(n));
    auto mean = std::make_shared<std::vector<T>>(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
      T mu = 0;
      for (int64_t j = 0; j < d; ++j) mu += vx.at(i, j);
      mu /= static_cast<T>(d);
      T var = 0;
      for (int64_t j = 0; j < d; ++j) {
        const T c = vx.at(i, j) - mu;
        var += c * c;
      }
      var /= static_cast<T>(d);
      const T rs = T(1) / std::sqrt(var + eps);
      (*mean)[static_cast<size_t>(i)] = mu;
      (*rstd)[static_cast<size_t>(i)] = rs;
      for (int64_t j = 0; j < d; ++j)
        out.at(i, j) = (vx.at(i, j) - mu) * rs * vg[j] + vb[j];
    }
    bool rg = requires_grad(x) || requires_grad(gain) || requires_grad(bias);
    Ref y = Input(std::move(out), rg);
    if (rg) {
      Record([this, x, gain, bias, y, n, d, mean, rstd] {
        const Tensor<T>& dy = grad(y);
        const Tensor<T>& vx2 = value(x);
        const Tensor<T>& vg2 = value(gain);
        for (int64_t i = 0; i < n; ++i) {
          const T mu = (*mean)[static_cast<size_t>(i)];
          const T rs = (*rstd)[static_cast<size_t>(i)];
          T sum_dg = 0, sum_dgx = 0;
          for (int64_t j = 0; j < d; ++j) {
            const T xhat = (vx2.at(i, j) - mu) * rs;
            const T dg = dy.at(i, j) * vg2[j];
            sum_dg += dg;
            sum_dgx += dg * xhat;
          }
          sum_dg /= static_cast<T>(d);
          sum_dgx /= static_cast<T>(d);
          if (requires_grad(x)) {
            Tensor<T>& dx = GradOf(x);
            for (int64_t j = 0; j < d; ++j) {
              const T xhat = (vx2.at(i, j) - mu) * rs;
              const T dg = dy.at(i, j) * vg2[j];
              dx.at(i, j) += rs * (dg - sum_dg - xhat * sum_dgx);
            }
          }
          if (requires_grad(gain)) {
            Tensor<T>& dgain = GradOf(gain);
            for (int64_t j = 0; j < d; ++j)
              dgain[j] += dy.at(i, j) * (vx2.at(i, j) - mu) * rs;
          }
          if (requires_grad(bias)) {
            Tensor<T>& dbias = GradOf(bias);
            for (int64_t j = 0; j < d; ++j) dbias[j] += dy.at(i, j);
          }
        }
      });
    }
    return y;
  }

  // Exact (erf) GELU.
  Ref Gelu(Ref x) {
    const Tensor<T>& vx = value(x);
    Tensor<T> out = vx;
    for (auto& v : out.data) v = v * Phi(v);
    Ref y = Input(std::move(out), requires_grad(x));
    if (requires_grad(y)) {
      Record([this, x, y] {
        const Tensor<T>& dy = grad(y);
        const Tensor<T>& vx2 = value(x);
        Tensor<T>& dx = GradOf(x);
        for (int64_t i = 0; i < dy.size(); ++i) {
          const T v = vx2[i];
          dx[i] += dy[i] * (Phi(v) + v * PhiDensity(v));
        }
      });
    }
    return y;
  }

  Ref SoftmaxRows(Ref x) {
    const Tensor<T>& vx = value(x);
    const int64_t n = vx.rows(), d = vx.cols();
    Tensor<T> out({n, d});
    for (int64_t i = 0; i < n; ++i) SoftmaxRow(&vx.data[i * d], &out.data[i * d], d);
    Ref y = Input(std::move(out), requires_grad(x));
    if (requires_grad(y)) {
      Record([this, x, y, n, d] {
        const Tensor<T>& dy = grad(y);
        const Tensor<T>& s = value(y);
        Tensor<T>& dx = GradOf(x);
        for (int64_t i = 0; i < n; ++i) {
          T dot = 0;
          for (int64_t j = 0; j < d; ++j) dot += dy.at(i, j) * s.at(i, j);
          for (int64_t j = 0; j < d; ++j)
            dx.at(i, j) += s.at(i, j) * (dy.at(i, j) - dot);
        }
      });
    }
    return y;
  }

  Ref LogSoftmaxRows(Ref x) {
    const Tensor<T>& vx = value(x);
    const int64_t n = vx.rows(), d = vx.cols();
    Tensor<T> out({n, d});
    for (int64_t i = 0; i < n; ++i) {
      const T* in = &vx.data[i * d];
      T* o = &out.data[i * d];
      T mx = in[0];
      for (int64_t j = 1; j < d; ++j) mx = std::max(mx, in[j]);
      T lse = 0;
      for (int64_t j = 0; j < d; ++j) lse += std::exp(in[j] - mx);
      lse = mx + std::log(lse);
      for (int64_t j = 0; j < d; ++j) o[j] = in[j] - lse;
    }
    Ref y = Input(std::move(out), requires_grad(x));
    if (requires_grad(y)) {
      Record([this, x, y, n, d] {
        const Tensor<T>& dy = grad(y);
        const Tensor<T>& ls = value(y);
        Tensor<T>& dx = GradOf(x);
        for (int64_t i = 0; i < n; ++i) {
          T sum = 0;
          for (int64_t j = 0; j < d; ++j) sum += dy.at(i, j);
          for (int64_t j = 0; j < d; ++j)
            dx.at(i, j) += dy.at(i, j) - std::exp(ls.at(i, j)) * sum;
        }
      });
    }
    return y;
  }

  // Rowwise cosine similarity of two [n, d] inputs -> [n].
  Ref CosineRows(Ref a, Ref b) {
    const Tensor<T>& va = value(a);
    const Tensor<T>& vb = value(b);
    LINGWAV_CHECK(va.SameShape(vb) && va.ndim() == 2, ErrorCode::kShape,
                  "CosineRows: need matching [n, d] inputs");
    const int64_t n = va.rows(), d = va.cols();
    Tensor<T> out({n});
    auto norms = std::make_shared<std::vector<T>>(static_cast<size_t>(2 * n));
    for (int64_t i = 0; i < n; ++i) {
      T na = 0, nb = 0, dot = 0;
      for (int64_t j = 0; j < d; ++j) {
        na += va.at(i, j) * va.at(i, j);
        nb += vb.at(i, j) * vb.at(i, j);
        dot += va.at(i, j) * vb.at(i, j);
      }
      na = std::sqrt(na);
      nb = std::sqrt(nb);
      LINGWAV_CHECK(na > T(0) && nb > T(0), ErrorCode::kNumeric,
                    "cosine similarity undefined for zero-norm vector (row " << i << ")");
      (*norms)[static_cast<size_t>(2 * i)] = na;
      (*norms)[static_cast<size_t>(2 * i + 1)] = nb;
      out[i] = dot / (na * nb);
    }
    bool rg = requires_grad(a) || requires_grad(b);
    Ref y = Input(std::move(out), rg);
    if (rg) {
      Record([this, a, b, y, n, d, norms] {
        const Tensor<T>& dy = grad(y);
        const Tensor<T>& va2 = value(a);
        const Tensor<T>& vb2 = value(b);
        const Tensor<T>& cosv = value(y);
        for (int64_t i = 0; i < n; ++i) {
          const T na = (*norms)[static_cast<size_t>(2 * i)];
          const T nb = (*norms)[static_cast<size_t>(2 * i + 1)];
          const T c = cosv[i];
          const T g = dy[i];
          if (requires_grad(a)) {
            Tensor<T>& da = GradOf(a);
            for (int64_t j = 0; j < d; ++j)
              da.at(i, j) += g * (vb2.at(i, j) / (na * nb) - c * va2.at(i, j) / (na * na));
          }
          if (requires_grad(b)) {
            Tensor<T>& db = GradOf(b);
            for (int64_t j = 0; j < d; ++j)
              db.at(i, j) += g * (va2.at(i, j) / (na * nb) - c * vb2.at(i, j) / (nb * nb));
          }
        }
      });
    }
    return y;
  }

  // Gather rows of `table` by index; serves embedding lookup and generic
  // row selection. Backward scatter-adds.
  Ref EmbeddingRows(Ref table, std::vector<int64_t> ids) {
    const Tensor<T>& vt = value(table);
    const int64_t d = vt.cols(), rows = vt.rows();
    const int64_t n = static_cast<int64_t>(ids.size());
    Tensor<T> out({n, d});
    for (int64_t i = 0; i < n; ++i) {
      LINGWAV_CHECK(ids[static_cast<size_t>(i)] >= 0 && ids[static_cast<size_t>(i)] < rows,
                    ErrorCode::kShape, "EmbeddingRows: id out of range");
      for (int64_t j = 0; j < d; ++j)
        out.at(i, j) = vt.at(ids[static_cast<size_t>(i)], j);
    }
    Ref y = Input(std::move(out), requires_grad(table));
    if (requires_grad(y)) {
      auto idsp = std::make_shared<std::vector<int64_t>>(std::move(ids));
      Record([this, table, y, d, idsp] {
        const Tensor<T>& dy = grad(y);
        Tensor<T>& dt = GradOf(table);
        for (size_t i = 0; i < idsp->size(); ++i)
          for (int64_t j = 0; j < d; ++j)
            dt.at((*idsp)[i], j) += dy.at(static_cast<int64_t>(i), j);
      });
    }
    return y;
  }

  // Mean of per-row cross entropy: -log softmax(logits)[target].
  Ref CrossEntropyRows(Ref logits, std::vector<int64_t> targets) {
    return SmoothedCeRows(logits, std::move(targets), T(0));
  }

  // Label-smoothed cross entropy, mean over rows:
  //   (1 - eps) * NLL(target) + eps * mean_v(-log p_v)
  Ref SmoothedCeRows(Ref logits, std::vector<int64_t> targets, T eps) {
    const Tensor<T>& vl = value(logits);
    const int64_t n = vl.rows(), d = vl.cols();
    LINGWAV_CHECK(static_cast<int64_t>(targets.size()) == n, ErrorCode::kShape,
                  "SmoothedCeRows: one target per row");
    Tensor<T> logp({n, d});
    for (int64_t i = 0; i < n; ++i) {
      const T* in = &vl.data[i * d];
      T mx = in[0];
      for (int64_t j = 1; j < d; ++j) mx = std::max(mx, in[j]);
      T lse = 0;
      for (int64_t j = 0; j < d; ++j) lse += std::exp(in[j] - mx);
      lse = mx + std::log(lse);
      for (int64_t j = 0; j < d; ++j) logp.at(i, j) = in[j] - lse;
    }
    T loss = 0;
    for (int64_t i = 0; i < n; ++i) {
      const int64_t t = targets[static_cast<size_t>(i)];
      LINGWAV_CHECK(t >= 0 && t < d, ErrorCode::kShape, "target out of range");
      T smooth = 0;
      if (eps > T(0)) {
        for (int64_t j = 0; j < d; ++j) smooth -= logp.at(i, j);
        smooth /= static_cast<T>(d);
      }
      loss += (T(1) - eps) * (-logp.at(i, t)) + eps * smooth;
    }
    loss /= static_cast<T>(n);
    Ref y = Input(Tensor<T>({1}, {loss}), requires_grad(logits));
    if (requires_grad(y)) {
      auto logp_p = std::make_shared<Tensor<T>>(std::move(logp));
      auto tg = std::make_shared<std::vector<int64_t>>(std::move(targets));
      Record([this, logits, y, n, d, eps, logp_p, tg] {
        const T g = grad(y)[0] / static_cast<T>(n);
        Tensor<T>& dl = GradOf(logits);
        for (int64_t i = 0; i < n; ++i) {
          const int64_t t = (*tg)[static_cast<size_t>(i)];
          for (int64_t j = 0; j < d; ++j) {
            const T p = std::exp(logp_p->at(i, j));
            T target_mass = (j == t) ? (T(1) - eps) : T(0);
            target_mass += eps / static_cast<T>(d);
            dl.at(i, j) += g * (p - target_mass);
          }
        }
      });
    }
    return y;
  }

  // Replace rows where mask[i] is true by the (learned) embedding e.
  // Unmasked rows pass through bit-identical.
  Ref ReplaceRows(Ref x, const std::vector<uint8_t>& mask, Ref e) {
    const Tensor<T>& vx = value(x);
    const Tensor<T>& ve = value(e);
    const int64_t n = vx.rows(), d = vx.cols();
    LINGWAV_CHECK(static_cast<int64_t>(mask.size()) == n, ErrorCode::kShape,
                  "ReplaceRows: mask length");
    LINGWAV_CHECK(ve.size() == d, ErrorCode::kShape, "ReplaceRows: embedding dim");
    Tensor<T> out = vx;
    for (int64_t i = 0; i < n; ++i) {
      if (mask[static_cast<size_t>(i)]) {
        for (int64_t j = 0; j < d; ++j) out.at(i, j) = ve[j];
      }
    }
    bool rg = requires_grad(x) || requires_grad(e);
    Ref y = Input(std::move(out), rg);
    if (rg) {
      auto m = std::make_shared<std::vector<uint8_t>>(mask);
      Record([this, x, e, y, n, d, m] {
        const Tensor<T>& dy = grad(y);
        for (int64_t i = 0; i < n; ++i) {
          if ((*m)[static_cast<size_t>(i)]) {
            if (requires_grad(e)) {
              Tensor<T>& de = GradOf(e);
              for (int64_t j = 0; j < d; ++j) de[j] += dy.at(i, j);
            }
          } else if (requires_grad(x)) {
            Tensor<T>& dx = GradOf(x);
            for (int64_t j = 0; j < d; ++j) dx.at(i, j) += dy.at(i, j);
          }
        }
      });
    }
    return y;
  }

  Ref ConcatRows(const std::vector<Ref>& parts) {
    LINGWAV_CHECK(!parts.empty(), ErrorCode::kShape, "ConcatRows: empty");
    const int64_t d = value(parts[0]).cols();
    int64_t n = 0;
    bool rg = false;
    for (Ref p : parts) {
      LINGWAV_CHECK(value(p).cols() == d, ErrorCode::kShape, "ConcatRows: cols differ");
      n += value(p).rows();
      rg = rg || requires_grad(p);
    }
    Tensor<T> out({n, d});
    int64_t r = 0;
    for (Ref p : parts) {
      const Tensor<T>& vp = value(p);
      std::copy(vp.data.begin(), vp.data.end(), out.data.begin() + r * d);
      r += vp.rows();
    }
    Ref y = Input(std::move(out), rg);
    if (rg) {
      auto ps = std::make_shared<std::vector<Ref>>(parts);
      Record([this, y, d, ps] {
        const Tensor<T>& dy = grad(y);
        int64_t row = 0;
        for (Ref p : *ps) {
          const int64_t rows = value(p).rows();
          if (requires_grad(p)) {
            Tensor<T>& dp = GradOf(p);
            for (int64_t i = 0; i < rows; ++i)
              for (int64_t j = 0; j < d; ++j) dp.at(i, j) += dy.at(row + i, j);
          }
          row += rows;
        }
      });
    }
    return y;
  }

  Ref SliceRows(Ref x, int64_t start, int64_t count) {
    const Tensor<T>& vx = value(x);
    const int64_t d = vx.cols();
    LINGWAV_CHECK(start >= 0 && start + count <= vx.rows(), ErrorCode::kShape,
                  "SliceRows: range out of bounds");
    Tensor<T> out({count, d});
    std::copy(vx.data.begin() + start * d, vx.data.begin() + (start + count) * d,
              out.data.begin());
    Ref y = Input(std::move(out), requires_grad(x));
    if (requires_grad(y)) {
      Record([this, x, y, start, count, d] {
        const Tensor<T>& dy = grad(y);
        Tensor<T>& dx = GradOf(x);
        for (int64_t i = 0; i < count; ++i)
          for (int64_t j = 0; j < d; ++j) dx.at(start + i, j) += dy.at(i, j);
      });
    }
    return y;
  }

  // Append zero rows up to total_rows (padding for batch stacking).
  Ref PadRows(Ref x, int64_t total_rows) {
    const Tensor<T>& vx = value(x);
    const int64_t n = vx.rows(), d = vx.cols();
    LINGWAV_CHECK(total_rows >= n, ErrorCode::kShape, "PadRows: shrinking");
    if (total_rows == n) return x;
    Tensor<T> out({total_rows, d});
    std::copy(vx.data.begin(), vx.data.end(), out.data.begin());
    Ref y = Input(std::move(out), requires_grad(x));
    if (requires_grad(y)) {
      Record([this, x, y, n, d] {
        const Tensor<T>& dy = grad(y);
        Tensor<T>& dx = GradOf(x);
        for (int64_t i = 0; i < n; ++i)
          for (int64_t j = 0; j < d; ++j) dx.at(i, j) += dy.at(i, j);
      });
    }
    return y;
  }

  Ref MeanRows(Ref x) {
    const Tensor<T>& vx = value(x);
    const int64_t n = vx.rows(), d = vx.cols();
    LINGWAV_CHECK(n > 0, ErrorCode::kShape, "MeanRows: empty input");
    Tensor<T> out({d});
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < d; ++j) out[j] += vx.at(i, j);
    for (int64_t j = 0; j < d; ++j) out[j] /= static_cast<T>(n);
    Ref y = Input(std::move(out), requires_grad(x));
    if (requires_grad(y)) {
      Record([this, x, y, n, d] {
        const Tensor<T>& dy = grad(y);
        Tensor<T>& dx = GradOf(x);
        for (int64_t i = 0; i < n; ++i)
          for (int64_t j = 0; j < d; ++j) dx.at(i, j) += dy[j] / static_cast<T>(n);
      });
    }
    return y;
  }

  // ----------------------------------------------------------- attention

  // Multi-head attention over a packed batch: queries come from xq
  // [B*Tq_max, d_model], keys/values from xkv [B*Tk_max, d_kv]. Per-item true
  // lengths bound the attention window, so padding can never leak across
  // items. `causal` restricts keys to positions <= query position
  // (self-attention in the decoder). Rows past an item's length are zero.
  Ref Attention(Ref xq, Ref xkv, const std::vector<int64_t>& q_lens,
                const std::vector<int64_t>& kv_lens, int64_t tq_max,
                int64_t tk_max, int64_t heads, bool causal, Ref wq, Ref bq,
                Ref wk, Ref bk, Ref wv, Ref bv, Ref wo, Ref bo) {
    const int64_t batch = static_cast<int64_t>(q_lens.size());
    const int64_t d_model = value(wq).dim(0);
    LINGWAV_CHECK(d_model % heads == 0, ErrorCode::kShape,
                  "Attention: heads must divide model dim");
    const int64_t dh = d_model / heads;
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));

    Ref q = Linear(xq, wq, bq);
    Ref k = Linear(xkv, wk, bk);
    Ref v = Linear(xkv, wv, bv);

    const Tensor<T>& vq = value(q);
    const Tensor<T>& vk = value(k);
    const Tensor<T>& vv = value(v);
    Tensor<T> ctx({vq.rows(), d_model});

    // Softmax matrices kept for backward, indexed [item][head].
    auto probs = std::make_shared<std::vector<std::vector<Mat>>>(
        static_cast<size_t>(batch));

    for (int64_t bi = 0; bi < batch; ++bi) {
      const int64_t lq = q_lens[static_cast<size_t>(bi)];
      const int64_t lk = kv_lens[static_cast<size_t>(bi)];
      if (lq == 0 || lk == 0) continue;
      (*probs)[static_cast<size_t>(bi)].resize(static_cast<size_t>(heads));
      ConstMatMap qm(vq.data.data(), vq.rows(), d_model);
      ConstMatMap km(vk.data.data(), vk.rows(), d_model);
      ConstMatMap vm(vv.data.data(), vv.rows(), d_model);
      MatMap cm(ctx.data.data(), ctx.rows(), d_model);
      for (int64_t h = 0; h < heads; ++h) {
        auto qb = qm.block(bi * tq_max, h * dh, lq, dh);
        auto kb = km.block(bi * tk_max, h * dh, lk, dh);
        auto vb2 = vm.block(bi * tk_max, h * dh, lk, dh);
        Mat scores = qb * kb.transpose() * scale;
        if (causal) {
          for (int64_t i = 0; i < lq; ++i)
            for (int64_t j = i + 1; j < lk; ++j)
              scores(i, j) = -std::numeric_limits<T>::infinity();
        }
        Mat& a = (*probs)[static_cast<size_t>(bi)][static_cast<size_t>(h)];
        a.resize(lq, lk);
        for (int64_t i = 0; i < lq; ++i) {
          T mx = scores(i, 0);
          for (int64_t j = 1; j < lk; ++j) mx = std::max(mx, scores(i, j));
          T sum = 0;
          for (int64_t j = 0; j < lk; ++j) {
            const T e = std::exp(scores(i, j) - mx);
            a(i, j) = e;
            sum += e;
          }
          for (int64_t j = 0; j < lk; ++j) a(i, j) /= sum;
        }
        cm.block(bi * tq_max, h * dh, lq, dh).noalias() = a * vb2;
      }
    }

    bool rg = requires_grad(q) || requires_grad(k) || requires_grad(v);
    Ref ctx_ref = Input(std::move(ctx), rg);
    if (rg) {
      auto ql = std::make_shared<std::vector<int64_t>>(q_lens);
      auto kl = std::make_shared<std::vector<int64_t>>(kv_lens);
      Record([this, q, k, v, ctx_ref, ql, kl, tq_max, tk_max, heads, dh, scale,
              probs, d_model, batch] {
        const Tensor<T>& dctx = grad(ctx_ref);
        ConstMatMap dcm(dctx.data.data(), dctx.rows(), d_model);
        ConstMatMap qm(value(q).data.data(), value(q).rows(), d_model);
        ConstMatMap km(value(k).data.data(), value(k).rows(), d_model);
        ConstMatMap vm(value(v).data.data(), value(v).rows(), d_model);
        MatMap dqm(GradOf(q).data.data(), value(q).rows(), d_model);
        MatMap dkm(GradOf(k).data.data(), value(k).rows(), d_model);
        MatMap dvm(GradOf(v).data.data(), value(v).rows(), d_model);
        for (int64_t bi = 0; bi < batch; ++bi) {
          const int64_t lq = (*ql)[static_cast<size_t>(bi)];
          const int64_t lk = (*kl)[static_cast<size_t>(bi)];
          if (lq == 0 || lk == 0) continue;
          for (int64_t h = 0; h < heads; ++h) {
            const Mat& a = (*probs)[static_cast<size_t>(bi)][static_cast<size_t>(h)];
            auto dob = dcm.block(bi * tq_max, h * dh, lq, dh);
            auto qb = qm.block(bi * tq_max, h * dh, lq, dh);
            auto kb = km.block(bi * tk_max, h * dh, lk, dh);
            auto vb2 = vm.block(bi * tk_max, h * dh, lk, dh);
            Mat da = dob * vb2.transpose();
            dvm.block(bi * tk_max, h * dh, lk, dh).noalias() +=
                a.transpose() * dob;
            // softmax backward per row
            Mat ds(lq, lk);
            for (int64_t i = 0; i < lq; ++i) {
              T dot = 0;
              for (int64_t j = 0; j < lk; ++j) dot += da(i, j) * a(i, j);
              for (int64_t j = 0; j < lk; ++j)
                ds(i, j) = a(i, j) * (da(i, j) - dot);
            }
            dqm.block(bi * tq_max, h * dh, lq, dh).noalias() +=
                ds * kb * scale;
            dkm.block(bi * tk_max, h * dh, lk, dh).noalias() +=
                ds.transpose() * qb * scale;
          }
        }
      });
    }
    return Linear(ctx_ref, wo, bo);
  }

  // ------------------------------------------------------------ quantizer

  struct GumbelSoftmaxOut {
    Ref probs;                  // [T, G*V] grouped soft assignments
    std::vector<int32_t> hard;  // [T, G] selected entry per group
  };

  // Per-group softmax over logits/tau (train mode adds Gumbel noise before
  // scaling). `hard` holds the argmax of the noisy logits, i.e. the entries
  // the straight-through forward selects.
  GumbelSoftmaxOut GumbelSoftmaxRows(Ref logits, int64_t groups, T tau,
                                     bool train, Rng* rng) {
    const Tensor<T>& vl = value(logits);
    const int64_t n = vl.rows(), gv = vl.cols();
    LINGWAV_CHECK(gv % groups == 0, ErrorCode::kShape,
                  "GumbelSoftmaxRows: cols not divisible by groups");
    LINGWAV_CHECK(tau > T(0), ErrorCode::kNumeric, "temperature must be > 0");
    const int64_t v = gv / groups;
    CheckFinite(vl, "quantizer logits");
    Tensor<T> noisy = vl;
    if (train) {
      LINGWAV_CHECK(rng != nullptr, ErrorCode::kInternal, "train mode needs rng");
      for (auto& x : noisy.data) x += static_cast<T>(rng->Gumbel());
    }
    Tensor<T> out({n, gv});
    std::vector<int32_t> hard(static_cast<size_t>(n * groups));
    for (int64_t i = 0; i < n; ++i) {
      for (int64_t g = 0; g < groups; ++g) {
        const T* in = &noisy.data[i * gv + g * v];
        T* o = &out.data[i * gv + g * v];
        int64_t arg = 0;
        T mx = in[0];
        for (int64_t j = 1; j < v; ++j) {
          if (in[j] > mx) {
            mx = in[j];
            arg = j;
          }
        }
        T sum = 0;
        for (int64_t j = 0; j < v; ++j) {
          o[j] = std::exp((in[j] - mx) / tau);
          sum += o[j];
        }
        for (int64_t j = 0; j < v; ++j) o[j] /= sum;
        hard[static_cast<size_t>(i * groups + g)] = static_cast<int32_t>(arg);
      }
    }
    Ref y = Input(std::move(out), requires_grad(logits));
    if (requires_grad(y)) {
      Record([this, logits, y, n, groups, v, tau] {
        const Tensor<T>& dy = grad(y);
        const Tensor<T>& p = value(y);
        Tensor<T>& dl = GradOf(logits);
        const int64_t gv2 = groups * v;
        for (int64_t i = 0; i < n; ++i) {
          for (int64_t g = 0; g < groups; ++g) {
            T dot = 0;
            for (int64_t j = 0; j < v; ++j)
              dot += dy.at(i, g * v + j) * p.at(i, g * v + j);
            for (int64_t j = 0; j < v; ++j)
              dl.data[i * gv2 + g * v + j] +=
                  p.at(i, g * v + j) * (dy.at(i, g * v + j) - dot) / tau;
          }
        }
      });
    }
    return GumbelSoftmaxOut{y, std::move(hard)};
  }

  // Straight-through codebook selection. Forward concatenates the hard
  // entries; backward routes gradients through the soft mixture
  // q_soft = sum_v p_v * codebook_v, exactly.
  Ref StCodebookSelect(Ref probs, Ref codebook, const std::vector<int32_t>& hard,
                       int64_t groups) {
    const Tensor<T>& vp = value(probs);
    const Tensor<T>& cb = value(codebook);
    const int64_t n = vp.rows(), gv = vp.cols();
    const int64_t v = gv / groups;
    const int64_t e = cb.cols();
    LINGWAV_CHECK(cb.rows() == gv, ErrorCode::kShape,
                  "StCodebookSelect: codebook rows != G*V");
    Tensor<T> out({n, groups * e});
    for (int64_t i = 0; i < n; ++i) {
      for (int64_t g = 0; g < groups; ++g) {
        const int64_t entry = g * v + hard[static_cast<size_t>(i * groups + g)];
        for (int64_t j = 0; j < e; ++j) out.at(i, g * e + j) = cb.at(entry, j);
      }
    }
    bool rg = requires_grad(probs) || requires_grad(codebook);
    Ref y = Input(std::move(out), rg);
    if (rg) {
      Record([this, probs, codebook, y, n, groups, v, e] {
        const Tensor<T>& dy = grad(y);
        const Tensor<T>& vp2 = value(probs);
        const Tensor<T>& cb2 = value(codebook);
        for (int64_t i = 0; i < n; ++i) {
          for (int64_t g = 0; g < groups; ++g) {
            for (int64_t vv = 0; vv < v; ++vv) {
              T dot = 0;
              for (int64_t j = 0; j < e; ++j)
                dot += dy.at(i, g * e + j) * cb2.at(g * v + vv, j);
              if (requires_grad(probs)) GradOf(probs).at(i, g * v + vv) += dot;
              if (requires_grad(codebook)) {
                Tensor<T>& dcb = GradOf(codebook);
                const T p = vp2.at(i, g * v + vv);
                for (int64_t j = 0; j < e; ++j)
                  dcb.at(g * v + vv, j) += p * dy.at(i, g * e + j);
              }
            }
          }
        }
      });
    }
    return y;
  }

  // Codebook diversity penalty from batch-averaged usage [G, V] rows:
  //   L = (G*V - sum_g exp(H(p_g))) / (G*V)
  Ref DiversityFromUsage(Ref usage, int64_t groups) {
    const Tensor<T>& vu = value(usage);
    const int64_t gv = vu.size();
    LINGWAV_CHECK(gv % groups == 0, ErrorCode::kShape, "usage size vs groups");
    const int64_t v = gv / groups;
    T total = 0;
    std::vector<T> exph(static_cast<size_t>(groups));
    for (int64_t g = 0; g < groups; ++g) {
      T h = 0;
      for (int64_t j = 0; j < v; ++j) {
        const T p = vu[g * v + j];
        if (p > T(0)) h -= p * std::log(p);
      }
      exph[static_cast<size_t>(g)] = std::exp(h);
      total += exph[static_cast<size_t>(g)];
    }
    const T loss = (static_cast<T>(gv) - total) / static_cast<T>(gv);
    Ref y = Input(Tensor<T>({1}, {loss}), requires_grad(usage));
    if (requires_grad(y)) {
      auto eh = std::make_shared<std::vector<T>>(std::move(exph));
      Record([this, usage, y, groups, v, gv, eh] {
        const T g0 = grad(y)[0];
        const Tensor<T>& vu2 = value(usage);
        Tensor<T>& du = GradOf(usage);
        // Clamp away exact zeros (float softmax can underflow); the limit
        // contribution of p -> 0 through the chain is 0.
        const T tiny = std::numeric_limits<T>::min();
        for (int64_t g = 0; g < groups; ++g) {
          const T ehg = (*eh)[static_cast<size_t>(g)];
          for (int64_t j = 0; j < v; ++j) {
            const T p = std::max(vu2[g * v + j], tiny);
            // d exp(H)/dp = exp(H) * (-ln p - 1)
            const T d = ehg * (-std::log(p) - T(1));
            du[g * v + j] += g0 * (-d / static_cast<T>(gv));
          }
        }
      });
    }
    return y;
  }

  // Arbitrary op escape hatch: `backward` receives (graph, upstream grad).
  // Used by the CTC loss node.
  Ref Custom(Tensor<T> value_out, std::vector<Ref> inputs,
             std::function<void(Graph&, const Tensor<T>&)> backward) {
    bool rg = false;
    for (Ref r : inputs) rg = rg || requires_grad(r);
    Ref y = Input(std::move(value_out), rg);
    if (rg) {
      Record([this, y, backward] { backward(*this, grad(y)); });
    }
    return y;
  }

  size_t num_nodes() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
  };

  void Record(std::function<void()> fn) { tape_.push_back(std::move(fn)); }

  static void SoftmaxRow(const T* in, T* out, int64_t d) {
    T mx = in[0];
    for (int64_t j = 1; j < d; ++j) mx = std::max(mx, in[j]);
    T sum = 0;
    for (int64_t j = 0; j < d; ++j) {
      out[j] = std::exp(in[j] - mx);
      sum += out[j];
    }
    for (int64_t j = 0; j < d; ++j) out[j] /= sum;
  }

  static T Phi(T x) {
    return T(0.5) * (T(1) + std::erf(x * T(M_SQRT1_2)));
  }
  static T PhiDensity(T x) {
    return std::exp(T(-0.5) * x * x) * T(0.3989422804014327);
  }

  // Gather conv patches for one channel group into `patches`
  // [T_out, K * cg]; zero padding outside [0, T_in).
  static void Im2Col(const Tensor<T>& x, Tensor<T>& patches, int64_t kernel,
                     int64_t stride, int64_t pad, int64_t ch0, int64_t cg) {
    const int64_t t_in = x.dim(0), c_in = x.dim(1);
    const int64_t t_out = patches.dim(0);
    for (int64_t i = 0; i < t_out; ++i) {
      const int64_t base = i * stride - pad;
      for (int64_t kk = 0; kk < kernel; ++kk) {
        const int64_t t = base + kk;
        T* dst = &patches.data[(i * kernel + kk) * cg];
        if (t < 0 || t >= t_in) {
          std::fill(dst, dst + cg, T(0));
        } else {
          const T* src = &x.data[t * c_in + ch0];
          std::copy(src, src + cg, dst);
        }
      }
    }
  }

  static void Col2ImAdd(Tensor<T>& dx, const Tensor<T>& dpatch, int64_t kernel,
                        int64_t stride, int64_t pad, int64_t ch0, int64_t cg) {
    const int64_t t_in = dx.dim(0), c_in = dx.dim(1);
    const int64_t t_out = dpatch.dim(0);
    for (int64_t i = 0; i < t_out; ++i) {
      const int64_t base = i * stride - pad;
      for (int64_t kk = 0; kk < kernel; ++kk) {
        const int64_t t = base + kk;
        if (t < 0 || t >= t_in) continue;
        const T* src = &dpatch.data[(i * kernel + kk) * cg];
        T* dst = &dx.data[t * c_in + ch0];
        for (int64_t j = 0; j < cg; ++j) dst[j] += src[j];
      }
    }
  }

  std::vector<Node> nodes_;
  std::vector<std::function<void()>> tape_;
};

}  // namespace lingwav

#endif  // LINGWAV_GRAPH_HPP_
