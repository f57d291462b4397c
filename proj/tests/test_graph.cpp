#include <cmath>
#include <functional>
#include <vector>

#include "doctest.h"
#include "lingwav/graph.hpp"
#include "lingwav/rng.hpp"
#include "lingwav/tensor.hpp"
#include "support/gradcheck.hpp"

using lingwav::Graph;
using lingwav::Rng;
using lingwav::Tensor;

namespace {

using G = Graph<double>;

// Checks one op against central finite differences: builds the graph with
// the given inputs, reduces the op output to a scalar with fixed random
// weights, and compares analytic input gradients to the numeric oracle.
// `build` must be a pure function of the input values.
void CheckGrads(
    const std::function<G::Ref(G&, const std::vector<G::Ref>&)>& build,
    std::vector<Tensor<double>> inputs, uint64_t seed, double tol = 1e-7) {
  Rng wrng(seed * 7919 + 13);
  std::vector<double> weights;

  auto eval = [&](const std::vector<Tensor<double>>& ins,
                  std::vector<std::vector<double>>* analytic) -> double {
    G g;
    std::vector<G::Ref> refs;
    for (const auto& t : ins) refs.push_back(g.Input(t, true));
    G::Ref out = build(g, refs);
    const Tensor<double>& ov = g.value(out);
    if (weights.empty()) {
      weights.resize(ov.data.size());
      for (auto& w : weights) w = wrng.Uniform(-1.0, 1.0);
    }
    Tensor<double> wt({static_cast<int64_t>(weights.size()), 1}, weights);
    G::Ref flat = g.Reshape(out, {1, static_cast<int64_t>(weights.size())});
    G::Ref loss = g.Matmul(flat, g.Input(wt, false));
    if (analytic) {
      g.Backward(loss);
      analytic->clear();
      for (G::Ref r : refs) analytic->push_back(g.grad(r).data);
    }
    return g.value(loss)[0];
  };

  std::vector<std::vector<double>> analytic;
  eval(inputs, &analytic);

  for (size_t ii = 0; ii < inputs.size(); ++ii) {
    auto f = [&](const std::vector<double>& x) {
      auto ins = inputs;
      ins[ii].data = x;
      return eval(ins, nullptr);
    };
    const auto numeric = lwtest::NumericalGradient(f, inputs[ii].data);
    const double err = lwtest::GradRelError(analytic[ii], numeric);
    CAPTURE(ii);
    CAPTURE(seed);
    CHECK(err < tol);
  }
}

Tensor<double> RandT(std::vector<int64_t> shape, Rng& rng, double scale = 1.0) {
  Tensor<double> t(std::move(shape));
  t.FillNormal(rng, 0.0, scale);
  return t;
}

constexpr int kSeeds = 20;

}  // namespace

TEST_CASE("softmax symmetry and normalization") {
  G g;
  auto x = g.Input(Tensor<double>({1, 2}, {0.0, 0.0}));
  auto s = g.SoftmaxRows(x);
  CHECK(g.value(s)[0] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(g.value(s)[1] == doctest::Approx(0.5).epsilon(1e-12));

  Rng rng(99);
  for (int trial = 0; trial < 50; ++trial) {
    G g2;
    Tensor<double> t({4, 7});
    t.FillNormal(rng, 0.0, 5.0);
    auto out = g2.value(g2.SoftmaxRows(g2.Input(t)));
    for (int64_t i = 0; i < 4; ++i) {
      double sum = 0;
      for (int64_t j = 0; j < 7; ++j) {
        CHECK(out.at(i, j) >= 0.0);
        sum += out.at(i, j);
      }
      CHECK(std::abs(sum - 1.0) < 1e-9);
    }
  }
}

TEST_CASE("cosine of a vector with itself is 1") {
  Rng rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    G g;
    Tensor<double> v({1, 9});
    v.FillNormal(rng, 0.0, 2.0);
    auto r = g.CosineRows(g.Input(v), g.Input(v));
    CHECK(g.value(r)[0] == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("cosine rejects zero vectors") {
  G g;
  Tensor<double> z({1, 3});
  Tensor<double> v({1, 3}, {1.0, 2.0, 3.0});
  CHECK_THROWS_AS(g.CosineRows(g.Input(z), g.Input(v)), lingwav::Error);
}

TEST_CASE("gelu gradient at 0.7 matches finite differences to 1e-6") {
  G g;
  auto x = g.Input(Tensor<double>({1, 1}, {0.7}), true);
  auto y = g.Gelu(x);
  g.Backward(g.Reshape(y, {1}));
  const double analytic = g.grad(x)[0];
  auto f = [](const std::vector<double>& v) {
    return v[0] * 0.5 * (1.0 + std::erf(v[0] * M_SQRT1_2));
  };
  const auto num = lwtest::NumericalGradient(f, {0.7}, 1e-5);
  CHECK(std::abs(analytic - num[0]) / std::abs(num[0]) < 1e-6);
}

TEST_CASE("matmul gradients") {
  for (uint64_t s = 0; s < kSeeds; ++s) {
    Rng rng(s);
    CheckGrads([](G& g, const std::vector<G::Ref>& in) {
      return g.Matmul(in[0], in[1]);
    }, {RandT({3, 4}, rng), RandT({4, 5}, rng)}, s);
  }
}

TEST_CASE("linear gradients") {
  for (uint64_t s = 0; s < kSeeds; ++s) {
    Rng rng(s + 100);
    CheckGrads([](G& g, const std::vector<G::Ref>& in) {
      return g.Linear(in[0], in[1], in[2]);
    }, {RandT({5, 3}, rng), RandT({4, 3}, rng), RandT({4}, rng)}, s);
  }
}

TEST_CASE("conv1d gradients (stride, padding, groups)") {
  for (uint64_t s = 0; s < kSeeds; ++s) {
    Rng rng(s + 200);
    CheckGrads([](G& g, const std::vector<G::Ref>& in) {
      return g.Conv1d(in[0], in[1], in[2], /*kernel=*/3, /*stride=*/2,
                      /*pad=*/1, /*groups=*/1);
    }, {RandT({9, 2}, rng), RandT({4, 6}, rng), RandT({4}, rng)}, s);

    CheckGrads([](G& g, const std::vector<G::Ref>& in) {
      return g.Conv1d(in[0], in[1], in[2], /*kernel=*/5, /*stride=*/1,
                      /*pad=*/2, /*groups=*/2);
    }, {RandT({7, 4}, rng), RandT({6, 10}, rng), RandT({6}, rng)}, s);
  }
}

TEST_CASE("layer norm gradients") {
  for (uint64_t s = 0; s < kSeeds; ++s) {
    Rng rng(s + 300);
    CheckGrads([](G& g, const std::vector<G::Ref>& in) {
      return g.LayerNorm(in[0], in[1], in[2]);
    }, {RandT({4, 6}, rng), RandT({6}, rng), RandT({6}, rng)}, s, 1e-6);
  }
}

TEST_CASE("gelu gradients") {
  for (uint64_t s = 0; s < kSeeds; ++s) {
    Rng rng(s + 400);
    CheckGrads([](G& g, const std::vector<G::Ref>& in) {
      return g.Gelu(in[0]);
    }, {RandT({3, 8}, rng, 2.0)}, s);
  }
}

TEST_CASE("softmax and log-softmax gradients") {
  for (uint64_t s = 0; s < kSeeds; ++s) {
    Rng rng(s + 500);
    CheckGrads([](G& g, const std::vector<G::Ref>& in) {
      return g.SoftmaxRows(in[0]);
    }, {RandT({4, 5}, rng)}, s, 1e-6);
    CheckGrads([](G& g, const std::vector<G::Ref>& in) {
      return g.LogSoftmaxRows(in[0]);
    }, {RandT({4, 5}, rng)}, s, 1e-6);
  }
}

TEST_CASE("cosine similarity gradients") {
  for (uint64_t s = 0; s < kSeeds; ++s) {
    Rng rng(s + 600);
    CheckGrads([](G& g, const std::vector<G::Ref>& in) {
      return g.CosineRows(in[0], in[1]);
    }, {RandT({6, 5}, rng), RandT({6, 5}, rng)}, s, 1e-6);
  }
}

TEST_CASE("embedding lookup gradients") {
  for (uint64_t s = 0; s < kSeeds; ++s) {
    Rng rng(s + 700);
    CheckGrads([](G& g, const std::vector<G::Ref>& in) {
      return g.EmbeddingRows(in[0], {2, 0, 2, 1, 3});
    }, {RandT({4, 6}, rng)}, s);
  }
}

TEST_CASE("cross entropy gradients (plain and smoothed)") {
  for (uint64_t s = 0; s < kSeeds; ++s) {
    Rng rng(s + 800);
    CheckGrads([](G& g, const std::vector<G::Ref>& in) {
      return g.CrossEntropyRows(in[0], {1, 0, 3});
    }, {RandT({3, 4}, rng)}, s, 1e-6);
    CheckGrads([](G& g, const std::vector<G::Ref>& in) {
      return g.SmoothedCeRows(in[0], {1, 0, 3}, 0.1);
    }, {RandT({3, 4}, rng)}, s, 1e-6);
  }
}

TEST_CASE("attention gradients (batched, padded, causal and cross)") {
  const std::vector<int64_t> lens{3, 2};
  for (uint64_t s = 0; s < kSeeds; ++s) {
    Rng rng(s + 900);
    auto mk_weights = [&rng]() {
      std::vector<Tensor<double>> w;
      for (int i = 0; i < 4; ++i) {
        w.push_back(RandT({4, 4}, rng, 0.5));
        w.push_back(RandT({4}, rng, 0.1));
      }
      return w;
    };
    auto weights = mk_weights();
    std::vector<Tensor<double>> inputs{RandT({8, 4}, rng)};
    inputs.insert(inputs.end(), weights.begin(), weights.end());
    const bool causal = (s % 2 == 1);
    CheckGrads([&lens, causal](G& g, const std::vector<G::Ref>& in) {
      return g.Attention(in[0], in[0], lens, lens, 4, 4, /*heads=*/2, causal,
                         in[1], in[2], in[3], in[4], in[5], in[6], in[7], in[8]);
    }, inputs, s, 1e-6);

    // cross attention: separate memory with its own lengths
    auto w2 = mk_weights();
    std::vector<Tensor<double>> inputs2{RandT({6, 4}, rng), RandT({10, 4}, rng)};
    inputs2.insert(inputs2.end(), w2.begin(), w2.end());
    const std::vector<int64_t> qlens{2, 3};
    const std::vector<int64_t> klens{5, 4};
    CheckGrads([&qlens, &klens](G& g, const std::vector<G::Ref>& in) {
      return g.Attention(in[0], in[1], qlens, klens, 3, 5, /*heads=*/2, false,
                         in[2], in[3], in[4], in[5], in[6], in[7], in[8], in[9]);
    }, inputs2, s, 1e-6);
  }
}

TEST_CASE("replace/concat/slice/pad/mean gradients") {
  const std::vector<uint8_t> mask{1, 0, 1, 0};
  for (uint64_t s = 0; s < kSeeds; ++s) {
    Rng rng(s + 1000);
    CheckGrads([&mask](G& g, const std::vector<G::Ref>& in) {
      return g.ReplaceRows(in[0], mask, in[1]);
    }, {RandT({4, 3}, rng), RandT({3}, rng)}, s);

    CheckGrads([](G& g, const std::vector<G::Ref>& in) {
      auto cat = g.ConcatRows({in[0], in[1]});
      auto sl = g.SliceRows(cat, 1, 3);
      return g.MeanRows(g.PadRows(sl, 5));
    }, {RandT({2, 3}, rng), RandT({3, 3}, rng)}, s);
  }
}

TEST_CASE("gumbel softmax eval-mode gradients and temperature scaling") {
  for (uint64_t s = 0; s < kSeeds; ++s) {
    Rng rng(s + 1100);
    CheckGrads([](G& g, const std::vector<G::Ref>& in) {
      return g.GumbelSoftmaxRows(in[0], /*groups=*/2, /*tau=*/0.7,
                                 /*train=*/false, nullptr).probs;
    }, {RandT({3, 8}, rng)}, s, 1e-6);
  }
}

TEST_CASE("straight-through select: backward equals the soft-path gradient") {
  // Forward is the hard selection; backward must be exactly the gradient of
  // q_soft = probs @ codebook. The oracle finite-differences a hand-written
  // soft mixture (independent of the graph).
  const int64_t tdim = 3, groups = 2, v = 4, e = 5;
  for (uint64_t s = 0; s < kSeeds; ++s) {
    Rng rng(s + 1200);
    Tensor<double> logits = RandT({tdim, groups * v}, rng);
    Tensor<double> codebook = RandT({groups * v, e}, rng);
    std::vector<double> w(static_cast<size_t>(tdim * groups * e));
    for (auto& x : w) x = rng.Uniform(-1.0, 1.0);

    // analytic, through the straight-through op
    G g;
    auto lref = g.Input(logits, true);
    auto cref = g.Input(codebook, true);
    auto gs = g.GumbelSoftmaxRows(lref, groups, 0.7, false, nullptr);
    auto q = g.StCodebookSelect(gs.probs, cref, gs.hard, groups);
    auto flat = g.Reshape(q, {1, tdim * groups * e});
    auto loss = g.Matmul(flat, g.Input(Tensor<double>(
        {static_cast<int64_t>(w.size()), 1}, w)));
    g.Backward(loss);

    // oracle: soft mixture, no graph involved
    auto soft_loss = [&](const std::vector<double>& lv) {
      double total = 0.0;
      for (int64_t t = 0; t < tdim; ++t) {
        for (int64_t gi = 0; gi < groups; ++gi) {
          std::vector<double> p(static_cast<size_t>(v));
          double mx = -1e300;
          for (int64_t j = 0; j < v; ++j)
            mx = std::max(mx, lv[static_cast<size_t>(t * groups * v + gi * v + j)]);
          double sum = 0;
          for (int64_t j = 0; j < v; ++j) {
            p[static_cast<size_t>(j)] = std::exp(
                (lv[static_cast<size_t>(t * groups * v + gi * v + j)] - mx) / 0.7);
            sum += p[static_cast<size_t>(j)];
          }
          for (int64_t j = 0; j < v; ++j) p[static_cast<size_t>(j)] /= sum;
          for (int64_t j = 0; j < e; ++j) {
            double q_soft = 0;
            for (int64_t vv = 0; vv < v; ++vv)
              q_soft += p[static_cast<size_t>(vv)] *
                        codebook.at(gi * v + vv, j);
            total += q_soft * w[static_cast<size_t>(t * groups * e + gi * e + j)];
          }
        }
      }
      return total;
    };
    const auto numeric = lwtest::NumericalGradient(soft_loss, logits.data);
    CHECK(lwtest::GradRelError(g.grad(lref).data, numeric) < 1e-6);
  }
}

TEST_CASE("diversity loss values and gradients") {
  using lingwav::Tensor;
  // uniform usage -> 0
  {
    G g;
    Tensor<double> u({8});
    u.Fill(0.25);  // G=2, V=4 grouped rows, each uniform
    auto l = g.DiversityFromUsage(g.Input(u), 2);
    CHECK(g.value(l)[0] == doctest::Approx(0.0).epsilon(1e-12));
  }
  // one-hot usage per group, G=2, V=4 -> (8-2)/8
  {
    G g;
    Tensor<double> u({8}, {1, 0, 0, 0, 0, 1, 0, 0});
    auto l = g.DiversityFromUsage(g.Input(u), 2);
    CHECK(g.value(l)[0] == doctest::Approx(0.75).epsilon(1e-12));
  }
  // random usage stays in [0, (V-1)/V]; gradient matches FD
  Rng rng(77);
  for (uint64_t s = 0; s < kSeeds; ++s) {
    Tensor<double> u({12});
    for (int64_t gi = 0; gi < 3; ++gi) {
      double sum = 0;
      for (int64_t j = 0; j < 4; ++j) {
        u[gi * 4 + j] = rng.Uniform(0.05, 1.0);
        sum += u[gi * 4 + j];
      }
      for (int64_t j = 0; j < 4; ++j) u[gi * 4 + j] /= sum;
    }
    G g;
    auto l = g.DiversityFromUsage(g.Input(u), 3);
    CHECK(g.value(l)[0] >= 0.0);
    CHECK(g.value(l)[0] <= 0.75 + 1e-12);

    CheckGrads([](G& g2, const std::vector<G::Ref>& in) {
      return g2.DiversityFromUsage(in[0], 3);
    }, {u}, s, 1e-6);
  }
}

TEST_CASE("add, scale, reshape gradients") {
  for (uint64_t s = 0; s < 5; ++s) {
    Rng rng(s + 1300);
    CheckGrads([](G& g, const std::vector<G::Ref>& in) {
      auto sum = g.Add(in[0], g.Scale(in[1], 0.37));
      return g.Reshape(sum, {6});
    }, {RandT({2, 3}, rng), RandT({2, 3}, rng)}, s);
  }
}
