// Attention: tiled kernel against the full-matrix reference and an
// independently coded double-loop oracle, gradients, memory accounting.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "mprvit/attention.hpp"
#include "mprvit/gradcheck.hpp"
#include "mprvit/rng.hpp"

using namespace mprvit;

namespace {

// Independent double-loop oracle: per query row, explicit max-shifted
// softmax over all keys, then the weighted sum of value rows.
template <class S>
std::vector<double> ref_attention(const TensorT<S>& q, const TensorT<S>& k, const TensorT<S>& v) {
  const std::size_t t = q.extent(0), d = q.extent(1);
  const double s = 1.0 / std::sqrt(static_cast<double>(d));
  std::vector<double> out(t * d, 0.0);
  for (std::size_t i = 0; i < t; ++i) {
    std::vector<double> logits(t);
    double m = -1e300;
    for (std::size_t j = 0; j < t; ++j) {
      double acc = 0.0;
      for (std::size_t dd = 0; dd < d; ++dd) {
        acc += static_cast<double>(q.data()[i * d + dd]) * static_cast<double>(k.data()[j * d + dd]);
      }
      logits[j] = acc * s;
      m = std::max(m, logits[j]);
    }
    double denom = 0.0;
    for (std::size_t j = 0; j < t; ++j) {
      logits[j] = std::exp(logits[j] - m);
      denom += logits[j];
    }
    for (std::size_t j = 0; j < t; ++j) {
      const double p = logits[j] / denom;
      for (std::size_t dd = 0; dd < d; ++dd) {
        out[i * d + dd] += p * static_cast<double>(v.data()[j * d + dd]);
      }
    }
  }
  return out;
}

Tensor rand_f(Shape shape, Rng& rng, float lo = -1.0f, float hi = 1.0f) {
  return Tensor::uniform(std::move(shape), lo, hi, rng);
}

AttentionConfig tiles(int tq, int tk) {
  AttentionConfig cfg;
  cfg.tile_q = tq;
  cfg.tile_k = tk;
  return cfg;
}

}  // namespace

TEST_CASE("naive_attention fixtures") {
  // T = 1: softmax of a scalar is 1, output equals the single V row
  auto q = Tensor::from({1, 3}, {0.3f, -0.7f, 1.1f});
  auto k = Tensor::from({1, 3}, {2.0f, 0.1f, -0.4f});
  auto v = Tensor::from({1, 3}, {5.0f, -6.0f, 7.0f});
  auto out = naive_attention(q, k, v);
  for (std::size_t i = 0; i < 3; ++i) CHECK(out.data()[i] == v.data()[i]);

  // K all zeros: uniform weights, output = column mean of V
  Rng rng(7);
  auto q4 = rand_f({4, 2}, rng);
  auto k0 = Tensor::zeros({4, 2});
  auto v4 = rand_f({4, 2}, rng);
  auto out4 = naive_attention(q4, k0, v4);
  for (std::size_t dd = 0; dd < 2; ++dd) {
    double col = 0.0;
    for (std::size_t j = 0; j < 4; ++j) col += v4.data()[j * 2 + dd];
    col /= 4.0;
    for (std::size_t i = 0; i < 4; ++i) {
      CHECK(out4.data()[i * 2 + dd] == doctest::Approx(col).epsilon(1e-6));
    }
  }

  // random 8x4 against the double-loop oracle
  auto q8 = rand_f({8, 4}, rng);
  auto k8 = rand_f({8, 4}, rng);
  auto v8 = rand_f({8, 4}, rng);
  auto got = naive_attention(q8, k8, v8);
  auto ref = ref_attention(q8, k8, v8);
  for (std::size_t i = 0; i < ref.size(); ++i) {
    CHECK(std::abs(static_cast<double>(got.data()[i]) - ref[i]) < 1e-6);
  }

  CHECK_THROWS_AS(naive_attention(Tensor::zeros({2, 3}), Tensor::zeros({3, 3}), Tensor::zeros({3, 3})),
                  DimensionError);
}

TEST_CASE("flash_attention fixtures") {
  Rng rng(21);
  // single-tile degeneracy
  auto q = rand_f({6, 4}, rng);
  auto k = rand_f({6, 4}, rng);
  auto v = rand_f({6, 4}, rng);
  auto single = flash_attention(q, k, v, tiles(8, 8));
  auto naive = naive_attention(q, k, v);
  for (std::size_t i = 0; i < single.numel(); ++i) {
    CHECK(std::abs(single.data()[i] - naive.data()[i]) < 1e-6f);
  }

  // tile sweep on 64x16
  auto q64 = rand_f({64, 16}, rng);
  auto k64 = rand_f({64, 16}, rng);
  auto v64 = rand_f({64, 16}, rng);
  auto ref = naive_attention(q64, k64, v64);
  for (int tk : {1, 7, 16, 64}) {
    auto got = flash_attention(q64, k64, v64, tiles(16, tk));
    for (std::size_t i = 0; i < ref.numel(); ++i) {
      CHECK(std::abs(got.data()[i] - ref.data()[i]) < 1e-5f);
    }
  }

  // one huge logit: output converges to the corresponding V row, stays finite
  auto qh = Tensor::zeros({3, 4});
  auto kh = Tensor::zeros({3, 4});
  auto vh = rand_f({3, 4}, rng);
  qh.data()[0] = 100.0f;
  kh.data()[1 * 4 + 0] = 100.0f;  // logit (0,1) = 1e4 before scaling
  auto out = flash_attention(qh, kh, vh, tiles(1, 1));
  CHECK(out.all_finite());
  for (std::size_t dd = 0; dd < 4; ++dd) {
    CHECK(std::abs(out.data()[dd] - vh.data()[4 + dd]) < 1e-4f);
  }
}

TEST_CASE("flash equals naive across random sizes and tilings") {
  Rng rng(33);
  for (int rep = 0; rep < 24; ++rep) {
    const std::size_t t = 1 + rng.below(256);
    const std::size_t d = 1 + rng.below(64);
    auto q = rand_f({t, d}, rng);
    auto k = rand_f({t, d}, rng);
    auto v = rand_f({t, d}, rng);
    auto ref = naive_attention(q, k, v);
    const int tq = 1 + static_cast<int>(rng.below(64));
    const int tk = 1 + static_cast<int>(rng.below(64));
    auto got = flash_attention(q, k, v, tiles(tq, tk));
    float worst = 0.0f;
    for (std::size_t i = 0; i < ref.numel(); ++i) {
      worst = std::max(worst, std::abs(got.data()[i] - ref.data()[i]));
    }
    CHECK(worst <= 1e-5f);
  }
}

TEST_CASE("flash equals naive to 1e-10 in 64-bit mode") {
  Rng rng(47);
  for (std::size_t t : {17, 64, 256}) {
    auto q = TensorD::uniform({t, 24}, -1.0, 1.0, rng);
    auto k = TensorD::uniform({t, 24}, -1.0, 1.0, rng);
    auto v = TensorD::uniform({t, 24}, -1.0, 1.0, rng);
    auto ref = naive_attention(q, k, v);
    auto got = flash_attention(q, k, v, AttentionConfig{1, 1, 16, 9});
    for (std::size_t i = 0; i < ref.numel(); ++i) {
      CHECK(std::abs(got.data()[i] - ref.data()[i]) < 1e-10);
    }
  }
}

TEST_CASE("attention output properties") {
  Rng rng(55);
  auto q = rand_f({32, 8}, rng);
  auto k = rand_f({32, 8}, rng);
  auto v = rand_f({32, 8}, rng);
  auto out = flash_attention(q, k, v, tiles(8, 8));

  // rows lie in the convex hull of V rows (per dimension)
  for (std::size_t dd = 0; dd < 8; ++dd) {
    float vmin = 1e9f, vmax = -1e9f;
    for (std::size_t j = 0; j < 32; ++j) {
      vmin = std::min(vmin, v.data()[j * 8 + dd]);
      vmax = std::max(vmax, v.data()[j * 8 + dd]);
    }
    for (std::size_t i = 0; i < 32; ++i) {
      CHECK(out.data()[i * 8 + dd] >= vmin - 1e-6f);
      CHECK(out.data()[i * 8 + dd] <= vmax + 1e-6f);
    }
  }

  // permuting K and V rows together leaves the output unchanged
  std::vector<std::size_t> perm(32);
  for (std::size_t i = 0; i < 32; ++i) perm[i] = i;
  rng.shuffle(perm);
  auto kp = Tensor::zeros({32, 8});
  auto vp = Tensor::zeros({32, 8});
  for (std::size_t i = 0; i < 32; ++i)
    for (std::size_t dd = 0; dd < 8; ++dd) {
      kp.data()[i * 8 + dd] = k.data()[perm[i] * 8 + dd];
      vp.data()[i * 8 + dd] = v.data()[perm[i] * 8 + dd];
    }
  auto out_p = flash_attention(q, kp, vp, tiles(8, 8));
  for (std::size_t i = 0; i < out.numel(); ++i) {
    CHECK(std::abs(out.data()[i] - out_p.data()[i]) < 1e-6f);
  }
}

TEST_CASE("flash auxiliary memory stays tile-sized while naive is quadratic") {
  Rng rng(61);
  const std::size_t t = 192, d = 16;
  auto q = rand_f({t, d}, rng);
  auto k = rand_f({t, d}, rng);
  auto v = rand_f({t, d}, rng);

  ScratchStats naive_stats;
  naive_attention(q, k, v, &naive_stats);
  CHECK(naive_stats.peak_bytes >= t * t * sizeof(float));  // full score matrix

  const AttentionConfig cfg = tiles(16, 24);
  ScratchStats flash_stats;
  flash_attention(q, k, v, cfg, &flash_stats);
  const std::size_t tile_bound =
      (static_cast<std::size_t>(cfg.tile_q) * cfg.tile_k +
       static_cast<std::size_t>(cfg.tile_q) * d + t + 2 * cfg.tile_q) *
      sizeof(float);
  CHECK(flash_stats.peak_bytes <= tile_bound);
  CHECK(flash_stats.peak_bytes < naive_stats.peak_bytes / 8);
  CHECK(flash_stats.bytes == 0);  // everything released
}

TEST_CASE("flash backward matches naive backward and finite differences") {
  Rng rng(77);
  const std::size_t t = 12, d = 6;
  auto qv = TensorD::uniform({t, d}, -1.0, 1.0, rng);
  auto kv = TensorD::uniform({t, d}, -1.0, 1.0, rng);
  auto vv = TensorD::uniform({t, d}, -1.0, 1.0, rng);
  auto proj = TensorD::uniform({t, d}, 0.5, 1.5, rng);

  // analytic flash grads vs analytic naive grads (independent backward paths)
  auto grads_with = [&](bool flash) {
    qv.set_requires_grad(true);
    kv.set_requires_grad(true);
    vv.set_requires_grad(true);
    qv.zero_grad();
    kv.zero_grad();
    vv.zero_grad();
    TensorD out = flash ? flash_attention(qv, kv, vv, AttentionConfig{1, 1, 5, 4})
                        : naive_attention(qv, kv, vv);
    backward(sum(mul(out, proj)));
    std::vector<double> all;
    for (auto g : {qv.grad(), kv.grad(), vv.grad()}) all.insert(all.end(), g.begin(), g.end());
    qv.set_requires_grad(false);
    kv.set_requires_grad(false);
    vv.set_requires_grad(false);
    qv.drop_grad();
    kv.drop_grad();
    vv.drop_grad();
    return all;
  };
  auto gf = grads_with(true);
  auto gn = grads_with(false);
  REQUIRE(gf.size() == gn.size());
  for (std::size_t i = 0; i < gf.size(); ++i) CHECK(gf[i] == doctest::Approx(gn[i]).epsilon(1e-9));

  // finite differences straight through the tiled kernel
  std::function<TensorD(const TensorD&)> fq = [&](const TensorD& x) {
    return sum(mul(flash_attention(x, kv, vv, AttentionConfig{1, 1, 5, 4}), proj));
  };
  CHECK(grad_check<double>(fq, qv, 1e-5) <= 1e-3);
  std::function<TensorD(const TensorD&)> fk = [&](const TensorD& x) {
    return sum(mul(flash_attention(qv, x, vv, AttentionConfig{1, 1, 5, 4}), proj));
  };
  CHECK(grad_check<double>(fk, kv, 1e-5) <= 1e-3);
  std::function<TensorD(const TensorD&)> fv = [&](const TensorD& x) {
    return sum(mul(flash_attention(qv, kv, x, AttentionConfig{1, 1, 5, 4}), proj));
  };
  CHECK(grad_check<double>(fv, vv, 1e-5) <= 1e-3);
}

TEST_CASE("multi_head_attention fixtures") {
  Rng rng(91);
  const std::size_t dim = 6;

  // identity projections, one head, T = 1: output equals the V-projection
  MhaWeightsT<float> w;
  auto eye = Tensor::zeros({dim, dim});
  for (std::size_t i = 0; i < dim; ++i) eye.data()[i * dim + i] = 1.0f;
  w.wq = eye.clone();
  w.wk = eye.clone();
  w.wv = rand_f({dim, dim}, rng);
  w.wo = eye.clone();
  w.bq = Tensor::zeros({dim});
  w.bk = Tensor::zeros({dim});
  w.bv = Tensor::zeros({dim});
  w.bo = Tensor::zeros({dim});
  auto x1 = rand_f({1, dim}, rng);
  AttentionConfig one_head{1, static_cast<int>(dim), 32, 32};
  auto out1 = multi_head_attention(x1, w, one_head);
  auto vproj = matmul(x1, w.wv);
  for (std::size_t i = 0; i < dim; ++i) {
    CHECK(out1.data()[i] == doctest::Approx(vproj.data()[i]).epsilon(1e-6));
  }

  // one head == projections composed with flash_attention directly
  auto x = rand_f({5, dim}, rng);
  auto direct = matmul(
      flash_attention(matmul(x, w.wq), matmul(x, w.wk), matmul(x, w.wv), one_head), w.wo);
  auto mha = multi_head_attention(x, w, one_head);
  for (std::size_t i = 0; i < mha.numel(); ++i) {
    CHECK(mha.data()[i] == doctest::Approx(direct.data()[i]).epsilon(1e-6));
  }

  // config error: D not divisible into heads
  AttentionConfig bad{4, 1, 32, 32};
  CHECK_THROWS_AS(multi_head_attention(x, w, bad), ConfigError);
}

TEST_CASE("multi_head_attention gradient vs finite differences") {
  Rng rng(101);
  const std::size_t t = 4, dim = 8;
  MhaWeightsT<double> w;
  w.wq = TensorD::uniform({dim, dim}, -0.5, 0.5, rng);
  w.wk = TensorD::uniform({dim, dim}, -0.5, 0.5, rng);
  w.wv = TensorD::uniform({dim, dim}, -0.5, 0.5, rng);
  w.wo = TensorD::uniform({dim, dim}, -0.5, 0.5, rng);
  w.bq = TensorD::uniform({dim}, -0.1, 0.1, rng);
  w.bk = TensorD::uniform({dim}, -0.1, 0.1, rng);
  w.bv = TensorD::uniform({dim}, -0.1, 0.1, rng);
  w.bo = TensorD::uniform({dim}, -0.1, 0.1, rng);
  AttentionConfig cfg{2, 4, 3, 2};
  auto proj = TensorD::uniform({t, dim}, 0.5, 1.5, rng);
  auto x = TensorD::uniform({t, dim}, -1.0, 1.0, rng);

  std::function<TensorD(const TensorD&)> fx = [&](const TensorD& xx) {
    return sum(mul(multi_head_attention(xx, w, cfg), proj));
  };
  CHECK(grad_check<double>(fx, x, 1e-5) <= 1e-3);

  for (TensorD* param : {&w.wq, &w.wk, &w.wv, &w.wo, &w.bq, &w.bo}) {
    std::function<TensorD(const TensorD&)> fp = [&](const TensorD&) {
      return sum(mul(multi_head_attention(x, w, cfg), proj));
    };
    CHECK(grad_check<double>(fp, *param, 1e-5) <= 1e-3);
  }
}
