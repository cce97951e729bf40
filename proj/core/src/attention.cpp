#include "mprvit/attention.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <vector>

namespace mprvit {

void AttentionConfig::validate() const {
  if (num_heads < 1 || head_dim < 1) {
    throw ConfigError("AttentionConfig: num_heads and head_dim must be >= 1");
  }
  if (tile_q < 1 || tile_k < 1) {
    throw ConfigError("AttentionConfig: tile sizes must be >= 1");
  }
}

namespace {

template <class S>
struct TrackedBuffer {
  std::vector<S> buf;
  ScratchStats* stats;
  TrackedBuffer(std::size_t n, ScratchStats* st) : buf(n, S(0)), stats(st) {
    if (stats) stats->allocate(n * sizeof(S));
  }
  ~TrackedBuffer() {
    if (stats) stats->release(buf.size() * sizeof(S));
  }
  S* data() { return buf.data(); }
};

template <class S>
void check_qkv(const TensorT<S>& q, const TensorT<S>& k, const TensorT<S>& v) {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2) {
    throw DimensionError("attention: Q, K, V must be rank-2 [T, d]");
  }
  if (q.shape() != k.shape() || q.shape() != v.shape()) {
    throw DimensionError("attention: Q " + shape_str(q.shape()) + ", K " + shape_str(k.shape()) +
                         ", V " + shape_str(v.shape()) + " must agree");
  }
}

template <class S>
inline S row_dot(const S* a, const S* b, std::size_t d) {
  S acc = S(0);
  for (std::size_t i = 0; i < d; ++i) acc += a[i] * b[i];
  return acc;
}

// Full-matrix reference: softmax(scale * Q K^T) V. Scores buffer is T*T.
template <class S>
void naive_forward_kernel(const S* q, const S* k, const S* v, std::size_t t, std::size_t d, S* out,
                          ScratchStats* stats) {
  const S scaling = static_cast<S>(1.0 / std::sqrt(static_cast<double>(d)));
  TrackedBuffer<S> scores(t * t, stats);
  for (std::size_t i = 0; i < t; ++i) {
    S* srow = scores.data() + i * t;
    const S* qi = q + i * d;
    for (std::size_t j = 0; j < t; ++j) srow[j] = scaling * row_dot(qi, k + j * d, d);
    S m = srow[0];
    for (std::size_t j = 1; j < t; ++j) m = std::max(m, srow[j]);
    double denom = 0.0;
    for (std::size_t j = 0; j < t; ++j) {
      srow[j] = std::exp(srow[j] - m);
      denom += static_cast<double>(srow[j]);
    }
    const S inv = static_cast<S>(1.0 / denom);
    S* orow = out + i * d;
    std::fill(orow, orow + d, S(0));
    for (std::size_t j = 0; j < t; ++j) {
      const S p = srow[j] * inv;
      const S* vrow = v + j * d;
      for (std::size_t dd = 0; dd < d; ++dd) orow[dd] += p * vrow[dd];
    }
  }
}

// Standard full-matrix attention backward (recomputes probabilities).
template <class S>
void naive_backward_kernel(const S* q, const S* k, const S* v, const S* dout, std::size_t t,
                           std::size_t d, S* dq, S* dk, S* dv) {
  const S scaling = static_cast<S>(1.0 / std::sqrt(static_cast<double>(d)));
  std::vector<S> prow(t);
  for (std::size_t i = 0; i < t; ++i) {
    const S* qi = q + i * d;
    const S* doi = dout + i * d;
    S m = std::numeric_limits<S>::lowest();
    for (std::size_t j = 0; j < t; ++j) {
      prow[j] = scaling * row_dot(qi, k + j * d, d);
      m = std::max(m, prow[j]);
    }
    double denom = 0.0;
    for (std::size_t j = 0; j < t; ++j) {
      prow[j] = std::exp(prow[j] - m);
      denom += static_cast<double>(prow[j]);
    }
    const S inv = static_cast<S>(1.0 / denom);
    // dp_j = dO_i . V_j ; correction = sum_j p_j dp_j
    double corr = 0.0;
    for (std::size_t j = 0; j < t; ++j) {
      prow[j] *= inv;
      corr += static_cast<double>(prow[j]) * static_cast<double>(row_dot(doi, v + j * d, d));
    }
    for (std::size_t j = 0; j < t; ++j) {
      const S* vj = v + j * d;
      const S dp = row_dot(doi, vj, d);
      const S ds = prow[j] * (dp - static_cast<S>(corr)) * scaling;
      const S* kj = k + j * d;
      S* dqi = dq + i * d;
      S* dkj = dk + j * d;
      S* dvj = dv + j * d;
      for (std::size_t dd = 0; dd < d; ++dd) {
        dqi[dd] += ds * kj[dd];
        dkj[dd] += ds * qi[dd];
        dvj[dd] += prow[j] * doi[dd];
      }
    }
  }
}

// Tiled online-softmax forward. Writes the output and the per-row
// log-sum-exp of the scaled scores (needed by the recomputing backward).
template <class S>
void flash_forward_kernel(const S* q, const S* k, const S* v, std::size_t t, std::size_t d,
                          int tile_q, int tile_k, S* out, S* lse, ScratchStats* stats) {
  const S scaling = static_cast<S>(1.0 / std::sqrt(static_cast<double>(d)));
  const std::size_t tq = static_cast<std::size_t>(tile_q);
  const std::size_t tk = static_cast<std::size_t>(tile_k);
  TrackedBuffer<S> scores(tq * tk, stats);   // one score tile
  TrackedBuffer<S> run_max(tq, stats);       // running max m
  TrackedBuffer<S> run_norm(tq, stats);      // running normalizer l
  TrackedBuffer<S> acc(tq * d, stats);       // running output accumulator
  for (std::size_t q0 = 0; q0 < t; q0 += tq) {
    const std::size_t qn = std::min(tq, t - q0);
    for (std::size_t i = 0; i < qn; ++i) {
      run_max.data()[i] = std::numeric_limits<S>::lowest();
      run_norm.data()[i] = S(0);
    }
    std::fill(acc.data(), acc.data() + qn * d, S(0));
    for (std::size_t k0 = 0; k0 < t; k0 += tk) {
      const std::size_t kn = std::min(tk, t - k0);
      for (std::size_t i = 0; i < qn; ++i) {
        const S* qi = q + (q0 + i) * d;
        S* srow = scores.data() + i * kn;
        S tile_max = std::numeric_limits<S>::lowest();
        for (std::size_t j = 0; j < kn; ++j) {
          srow[j] = scaling * row_dot(qi, k + (k0 + j) * d, d);
          tile_max = std::max(tile_max, srow[j]);
        }
        S& m = run_max.data()[i];
        S& l = run_norm.data()[i];
        S* arow = acc.data() + i * d;
        const S m_new = std::max(m, tile_max);
        if (m_new > m && l > S(0)) {
          // A larger maximum appeared: rescale the partial sums.
          const S corr = std::exp(m - m_new);
          l *= corr;
          for (std::size_t dd = 0; dd < d; ++dd) arow[dd] *= corr;
        }
        m = m_new;
        for (std::size_t j = 0; j < kn; ++j) {
          const S p = std::exp(srow[j] - m);
          l += p;
          const S* vrow = v + (k0 + j) * d;
          for (std::size_t dd = 0; dd < d; ++dd) arow[dd] += p * vrow[dd];
        }
      }
    }
    for (std::size_t i = 0; i < qn; ++i) {
      const S inv = S(1) / run_norm.data()[i];
      const S* arow = acc.data() + i * d;
      S* orow = out + (q0 + i) * d;
      for (std::size_t dd = 0; dd < d; ++dd) orow[dd] = arow[dd] * inv;
      lse[q0 + i] = run_max.data()[i] + std::log(run_norm.data()[i]);
    }
  }
}

// Recomputation backward: probabilities are rebuilt tile-by-tile from the
// saved log-sum-exp; nothing of size T x T is ever stored.
template <class S>
void flash_backward_kernel(const S* q, const S* k, const S* v, const S* out, const S* dout,
                           const S* lse, std::size_t t, std::size_t d, int tile_q, int tile_k,
                           S* dq, S* dk, S* dv) {
  const S scaling = static_cast<S>(1.0 / std::sqrt(static_cast<double>(d)));
  const std::size_t tq = static_cast<std::size_t>(tile_q);
  const std::size_t tk = static_cast<std::size_t>(tile_k);
  // row_corr[i] = dO_i . O_i, the softmax-backward correction term
  std::vector<S> row_corr(t);
  for (std::size_t i = 0; i < t; ++i) row_corr[i] = row_dot(dout + i * d, out + i * d, d);
  for (std::size_t q0 = 0; q0 < t; q0 += tq) {
    const std::size_t qn = std::min(tq, t - q0);
    for (std::size_t k0 = 0; k0 < t; k0 += tk) {
      const std::size_t kn = std::min(tk, t - k0);
      for (std::size_t i = 0; i < qn; ++i) {
        const std::size_t gi = q0 + i;
        const S* qi = q + gi * d;
        const S* doi = dout + gi * d;
        S* dqi = dq + gi * d;
        for (std::size_t j = 0; j < kn; ++j) {
          const std::size_t gj = k0 + j;
          const S* kj = k + gj * d;
          const S* vj = v + gj * d;
          const S p = std::exp(scaling * row_dot(qi, kj, d) - lse[gi]);
          const S dp = row_dot(doi, vj, d);
          const S ds = p * (dp - row_corr[gi]) * scaling;
          S* dkj = dk + gj * d;
          S* dvj = dv + gj * d;
          for (std::size_t dd = 0; dd < d; ++dd) {
            dqi[dd] += ds * kj[dd];
            dkj[dd] += ds * qi[dd];
            dvj[dd] += p * doi[dd];
          }
        }
      }
    }
  }
}

}  // namespace

template <class S>
TensorT<S> naive_attention(const TensorT<S>& q, const TensorT<S>& k, const TensorT<S>& v,
                           ScratchStats* stats) {
  check_qkv(q, k, v);
  const std::size_t t = q.extent(0), d = q.extent(1);
  std::vector<S> out(t * d);
  naive_forward_kernel(q.data().data(), k.data().data(), v.data().data(), t, d, out.data(), stats);
  auto bw = [t, d](detail::TensorNode<S>& node) {
    auto& pq = *node.parents[0];
    auto& pk = *node.parents[1];
    auto& pv = *node.parents[2];
    std::vector<S> dq(t * d, S(0)), dk(t * d, S(0)), dv(t * d, S(0));
    naive_backward_kernel(pq.value.data(), pk.value.data(), pv.value.data(), node.grad.data(), t,
                          d, dq.data(), dk.data(), dv.data());
    detail::accumulate(pq, dq.data(), dq.size());
    detail::accumulate(pk, dk.data(), dk.size());
    detail::accumulate(pv, dv.data(), dv.size());
  };
  return detail::make_op<S>(q.shape(), std::move(out), {q, k, v}, bw, "naive_attention");
}

template <class S>
TensorT<S> flash_attention(const TensorT<S>& q, const TensorT<S>& k, const TensorT<S>& v,
                           const AttentionConfig& cfg, ScratchStats* stats) {
  check_qkv(q, k, v);
  cfg.validate();
  const std::size_t t = q.extent(0), d = q.extent(1);
  std::vector<S> out(t * d);
  auto lse = std::make_shared<std::vector<S>>(t);
  if (stats) stats->allocate(t * sizeof(S));  // saved log-sum-exp, O(T)
  flash_forward_kernel(q.data().data(), k.data().data(), v.data().data(), t, d, cfg.tile_q,
                       cfg.tile_k, out.data(), lse->data(), stats);
  if (stats) stats->release(t * sizeof(S));
  const int tile_q = cfg.tile_q, tile_k = cfg.tile_k;
  auto bw = [t, d, tile_q, tile_k, lse](detail::TensorNode<S>& node) {
    auto& pq = *node.parents[0];
    auto& pk = *node.parents[1];
    auto& pv = *node.parents[2];
    std::vector<S> dq(t * d, S(0)), dk(t * d, S(0)), dv(t * d, S(0));
    flash_backward_kernel(pq.value.data(), pk.value.data(), pv.value.data(), node.value.data(),
                          node.grad.data(), lse->data(), t, d, tile_q, tile_k, dq.data(),
                          dk.data(), dv.data());
    detail::accumulate(pq, dq.data(), dq.size());
    detail::accumulate(pk, dk.data(), dk.size());
    detail::accumulate(pv, dv.data(), dv.size());
  };
  return detail::make_op<S>(q.shape(), std::move(out), {q, k, v}, bw, "flash_attention");
}

template <class S>
TensorT<S> multi_head_attention(const TensorT<S>& x, const MhaWeightsT<S>& w,
                                const AttentionConfig& cfg) {
  cfg.validate();
  if (x.rank() != 2) throw DimensionError("multi_head_attention: expected [T, D]");
  const std::size_t dim = x.extent(1);
  if (dim != static_cast<std::size_t>(cfg.model_dim()) ||
      dim % static_cast<std::size_t>(cfg.num_heads) != 0) {
    throw ConfigError("multi_head_attention: model dim " + std::to_string(dim) +
                      " incompatible with " + std::to_string(cfg.num_heads) + " heads x " +
                      std::to_string(cfg.head_dim));
  }
  TensorT<S> q = add_row_bias(matmul(x, w.wq), w.bq);
  TensorT<S> k = add_row_bias(matmul(x, w.wk), w.bk);
  TensorT<S> v = add_row_bias(matmul(x, w.wv), w.bv);
  const std::size_t hd = static_cast<std::size_t>(cfg.head_dim);
  std::vector<TensorT<S>> heads;
  heads.reserve(cfg.num_heads);
  for (int h = 0; h < cfg.num_heads; ++h) {
    const std::size_t off = static_cast<std::size_t>(h) * hd;
    heads.push_back(flash_attention(slice(q, 1, off, hd), slice(k, 1, off, hd),
                                    slice(v, 1, off, hd), cfg));
  }
  TensorT<S> merged = cfg.num_heads == 1 ? heads[0] : concat(heads, 1);
  return add_row_bias(matmul(merged, w.wo), w.bo);
}

#define MPRVIT_INSTANTIATE(S)                                                                     \
  template TensorT<S> naive_attention<S>(const TensorT<S>&, const TensorT<S>&, const TensorT<S>&, \
                                         ScratchStats*);                                          \
  template TensorT<S> flash_attention<S>(const TensorT<S>&, const TensorT<S>&, const TensorT<S>&, \
                                         const AttentionConfig&, ScratchStats*);                  \
  template TensorT<S> multi_head_attention<S>(const TensorT<S>&, const MhaWeightsT<S>&,           \
                                              const AttentionConfig&);

MPRVIT_INSTANTIATE(float)
MPRVIT_INSTANTIATE(double)

#undef MPRVIT_INSTANTIATE

}  // namespace mprvit
