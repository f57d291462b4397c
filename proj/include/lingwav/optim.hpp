// lingwav/optim.hpp

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

#ifndef LINGWAV_OPTIM_HPP_
#define LINGWAV_OPTIM_HPP_

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "lingwav/common.hpp"
#include "lingwav/tensor.hpp"

namespace lingwav {

template <typename T>
struct AdamState {
  Tensor<T> m;  // first moment, parameter shape
  Tensor<T> v;  // second moment, parameter shape, elementwise >= 0
  int64_t t = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  static AdamState ForParam(const Tensor<T>& param) {
    AdamState s;
    s.m = Tensor<T>(param.shape);
    s.v = Tensor<T>(param.shape);
    return s;
  }
};

// One bias-corrected Adam update, in place. Deterministic: identical inputs
// give bit-identical outputs.
template <typename T>
void AdamStep(Tensor<T>& param, const Tensor<T>& grad, AdamState<T>& state,
              double lr) {
  LINGWAV_CHECK(param.SameShape(grad), ErrorCode::kShape,
                "AdamStep: grad shape " << grad.ShapeStr() << " vs param "
                                        << param.ShapeStr());
  LINGWAV_CHECK(state.m.SameShape(param) && state.v.SameShape(param),
                ErrorCode::kShape, "AdamStep: state shape mismatch");
  LINGWAV_CHECK(lr >= 0.0, ErrorCode::kConfig, "AdamStep: negative lr");
  CheckFinite(grad, "gradient");
  state.t += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
  for (int64_t i = 0; i < param.size(); ++i) {
    const double g = static_cast<double>(grad[i]);
    const double m = state.beta1 * static_cast<double>(state.m[i]) +
                     (1.0 - state.beta1) * g;
    const double v = state.beta2 * static_cast<double>(state.v[i]) +
                     (1.0 - state.beta2) * g * g;
    state.m[i] = static_cast<T>(m);
    state.v[i] = static_cast<T>(v);
    const double mhat = m / bc1;
    const double vhat = v / bc2;
    param[i] -= static_cast<T>(lr * mhat / (std::sqrt(vhat) + state.eps));
  }
}

// Scale all gradients so their global L2 norm is at most `clip`.
// Returns the pre-clip norm.
template <typename T>
double ClipGlobalNorm(std::vector<Tensor<T>*> grads, double clip) {
  double sq = 0.0;
  for (const Tensor<T>* g : grads)
    for (int64_t i = 0; i < g->size(); ++i)
      sq += static_cast<double>((*g)[i]) * static_cast<double>((*g)[i]);
  const double norm = std::sqrt(sq);
  if (clip > 0.0 && norm > clip) {
    const T s = static_cast<T>(clip / norm);
    for (Tensor<T>* g : grads)
      for (auto& v : g->data) v *= s;
  }
  return norm;
}

// ------------------------------------------------------------- schedules

enum class ScheduleKind { kPolyWarmup, kTriStage };

struct ScheduleSpec {
  ScheduleKind kind = ScheduleKind::kPolyWarmup;
  double peak_lr = 5e-4;
  int64_t total_updates = 0;
  // poly-warmup
  int64_t warmup_updates = 0;
  double decay_power = 1.0;  // linear by default
  // tri-stage fractions; must sum to 1
  double warmup_frac = 0.1;
  double hold_frac = 0.4;
  double decay_frac = 0.5;

  void Validate() const {
    LINGWAV_CHECK(peak_lr > 0.0, ErrorCode::kConfig, "schedule: peak_lr <= 0");
    LINGWAV_CHECK(total_updates > 0, ErrorCode::kConfig,
                  "schedule: total_updates <= 0");
    if (kind == ScheduleKind::kPolyWarmup) {
      LINGWAV_CHECK(warmup_updates < total_updates, ErrorCode::kConfig,
                    "schedule: warmup_updates must be < total_updates");
    } else {
      LINGWAV_CHECK(std::abs(warmup_frac + hold_frac + decay_frac - 1.0) < 1e-9,
                    ErrorCode::kConfig, "tri-stage fractions must sum to 1");
    }
  }
};

// Real-valued schedule; LrAt() below is the integer-step view. Keeping the
// core real-valued lets tests probe continuity at stage boundaries.
inline double LrValue(const ScheduleSpec& s, double step) {
  s.Validate();
  LINGWAV_CHECK(step >= 0.0 && step <= static_cast<double>(s.total_updates),
                ErrorCode::kConfig, "schedule: step out of range");
  if (s.kind == ScheduleKind::kPolyWarmup) {
    const double w = static_cast<double>(s.warmup_updates);
    if (step < w) return s.peak_lr * step / w;
    const double span = static_cast<double>(s.total_updates) - w;
    return s.peak_lr * std::pow(1.0 - (step - w) / span, s.decay_power);
  }
  const double total = static_cast<double>(s.total_updates);
  const double w = s.warmup_frac * total;
  const double h = s.hold_frac * total;
  if (step < w) return s.peak_lr * (w > 0.0 ? step / w : 1.0);
  if (step < w + h) return s.peak_lr;
  const double span = total - w - h;
  return s.peak_lr * (1.0 - (step - w - h) / span);
}

inline double LrAt(const ScheduleSpec& s, int64_t step) {
  return LrValue(s, static_cast<double>(step));
}

}  // namespace lingwav

#endif  // LINGWAV_OPTIM_HPP_
