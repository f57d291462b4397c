// lingwav/tensor.hpp

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

#ifndef LINGWAV_TENSOR_HPP_
#define LINGWAV_TENSOR_HPP_

#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "lingwav/common.hpp"
#include "lingwav/rng.hpp"

namespace lingwav {

// Dense row-major tensor. The scalar type is a template parameter: training
// runs in float, gradient-check suites instantiate double so finite
// differences are meaningful.
template <typename T>
struct Tensor {
  std::vector<int64_t> shape;
  std::vector<T> data;

  Tensor() = default;

  explicit Tensor(std::vector<int64_t> s) : shape(std::move(s)) {
    data.assign(static_cast<size_t>(NumElements(shape)), T(0));
  }

  Tensor(std::vector<int64_t> s, std::vector<T> d)
      : shape(std::move(s)), data(std::move(d)) {
    LINGWAV_CHECK(static_cast<int64_t>(data.size()) == NumElements(shape),
                  ErrorCode::kShape, "tensor data size does not match shape");
  }

  static int64_t NumElements(const std::vector<int64_t>& s) {
    int64_t n = 1;
    for (auto d : s) {
      LINGWAV_CHECK(d >= 0, ErrorCode::kShape, "negative dimension");
      n *= d;
    }
    return n;
  }

  int64_t size() const { return static_cast<int64_t>(data.size()); }
  int64_t dim(int i) const { return shape[static_cast<size_t>(i)]; }
  int ndim() const { return static_cast<int>(shape.size()); }

  int64_t rows() const { return ndim() == 0 ? 1 : shape[0]; }
  // All trailing dimensions folded together; most ops treat tensors as
  // (rows x cols) row-major matrices.
  int64_t cols() const {
    int64_t c = 1;
    for (size_t i = 1; i < shape.size(); ++i) c *= shape[i];
    return c;
  }

  T& at(int64_t r, int64_t c) { return data[static_cast<size_t>(r * cols() + c)]; }
  T at(int64_t r, int64_t c) const { return data[static_cast<size_t>(r * cols() + c)]; }
  T& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
  T operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

  void Fill(T v) { std::fill(data.begin(), data.end(), v); }

  void FillNormal(Rng& rng, double mean, double stddev) {
    for (auto& v : data) v = static_cast<T>(rng.Normal(mean, stddev));
  }

  void FillUniform(Rng& rng, double lo, double hi) {
    for (auto& v : data) v = static_cast<T>(rng.Uniform(lo, hi));
  }

  bool AllFinite() const {
    for (auto v : data) {
      if (!std::isfinite(static_cast<double>(v))) return false;
    }
    return true;
  }

  bool SameShape(const Tensor& other) const { return shape == other.shape; }

  template <typename U>
  Tensor<U> Cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.data.resize(data.size());
    for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
    return out;
  }

  std::string ShapeStr() const {
    std::string s = "[";
    for (size_t i = 0; i < shape.size(); ++i) {
      if (i) s += ", ";
      s += std::to_string(shape[i]);
    }
    return s + "]";
  }
};

template <typename T>
void CheckFinite(const Tensor<T>& t, const char* what) {
  LINGWAV_CHECK(t.AllFinite(), ErrorCode::kNumeric,
                "non-finite values in " << what);
}

}  // namespace lingwav

#endif  // LINGWAV_TENSOR_HPP_
