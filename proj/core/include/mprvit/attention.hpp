#pragma once

#include <cstddef>

#include "mprvit/tensor.hpp"

namespace mprvit {

// Geometry of the multi-head / tiled kernels. Tile sizes are kernel-owned:
// any positive values give results equal to the untiled computation.
struct AttentionConfig {
  int num_heads = 1;
  int head_dim = 1;
  int tile_q = 32;
  int tile_k = 32;

  int model_dim() const { return num_heads * head_dim; }
  void validate() const;
};

// Auxiliary-buffer accounting for the memory-footprint contract:
// naive materializes the T x T score matrix, flash never does.
struct ScratchStats {
  std::size_t bytes = 0;       // currently outstanding
  std::size_t peak_bytes = 0;  // high-water mark

  void allocate(std::size_t n) {
    bytes += n;
    if (bytes > peak_bytes) peak_bytes = bytes;
  }
  void release(std::size_t n) { bytes -= n; }
};

// softmax(Q K^T / sqrt(d)) V with the full T x T score matrix; the reference
// the tiled kernel is checked against. Q, K, V: [T, d].
template <class S>
TensorT<S> naive_attention(const TensorT<S>& q, const TensorT<S>& k, const TensorT<S>& v,
                           ScratchStats* stats = nullptr);

// Exact attention processed in key/value tiles with a running max, running
// normalizer and rescaled output accumulator (online softmax). Never builds
// the T x T matrix; auxiliary memory is O(tile_q * tile_k + T). The backward
// pass recomputes tile scores from the saved per-row log-sum-exp instead of
// storing probabilities.
template <class S>
TensorT<S> flash_attention(const TensorT<S>& q, const TensorT<S>& k, const TensorT<S>& v,
                           const AttentionConfig& cfg, ScratchStats* stats = nullptr);

template <class S>
struct MhaWeightsT {
  TensorT<S> wq, bq, wk, bk, wv, bv, wo, bo;  // w*: [D,D], b*: [D]
};
using MhaWeights = MhaWeightsT<float>;

// Per-head Q/K/V projections, flash_attention per head, concat, output
// projection. x: [T, D] with D = num_heads * head_dim.
template <class S>
TensorT<S> multi_head_attention(const TensorT<S>& x, const MhaWeightsT<S>& w,
                                const AttentionConfig& cfg);

}  // namespace mprvit
