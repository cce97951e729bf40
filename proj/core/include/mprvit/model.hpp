#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "mprvit/attention.hpp"
#include "mprvit/nn_ops.hpp"
#include "mprvit/tensor.hpp"

namespace mprvit {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct ModelConfig {
  int in_channels = 2;   // 2 for t1w+flair, 1 for unimodal
  int out_channels = 1;
  int base_channels = 16;
  int rb_per_combined = 3;   // 3 = MPR-ViT, 1 = VCT
  int bottleneck_layers = 11;
  std::array<int, 2> vit_positions{4, 8};  // 1-based bottleneck indices
  int token_dim = 96;
  int tx_layers = 2;
  int tx_heads = 4;
  int tx_mlp_dim = 192;
  std::array<int, 2> input_hw{64, 64};  // must be divisible by 4

  // Desk profile: trainable end to end on a CPU in minutes.
  static ModelConfig desk();
  // Full-paper profile: 120x120 inputs, 256-channel bottleneck, 768-wide
  // shared transformer.
  static ModelConfig full_paper();

  void validate() const;  // throws ConfigError
  int head_dim() const { return token_dim / tx_heads; }
  // Token capacity of the learned position embeddings at the configured input.
  int max_tokens() const;
};

// ---------------------------------------------------------------------------
// Parameter table
// ---------------------------------------------------------------------------

// Ordered name -> tensor map. Names are stable dot-separated paths; iteration
// order is registration order. Weight-shared entries are registered once.
template <class S>
class ParamTableT {
 public:
  TensorT<S>& add(const std::string& name, TensorT<S> t);
  TensorT<S>& at(const std::string& name);
  const TensorT<S>& at(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  std::size_t size() const { return items_.size(); }

  auto begin() { return items_.begin(); }
  auto end() { return items_.end(); }
  auto begin() const { return items_.begin(); }
  auto end() const { return items_.end(); }

  // Element count over unique underlying buffers (aliases counted once).
  std::int64_t unique_param_count() const;
  void set_requires_grad(bool on);
  void zero_grad();

 private:
  std::vector<std::pair<std::string, TensorT<S>>> items_;
  std::unordered_map<std::string, std::size_t> index_;
};

using ParamTable = ParamTableT<float>;

// ---------------------------------------------------------------------------
// Blocks
// ---------------------------------------------------------------------------

template <class S>
struct ConvLayerT {
  TensorT<S> w, b;
  int stride = 1, pad = 0, out_pad = 0;
  bool transposed = false;
  TensorT<S> forward(const TensorT<S>& x) const {
    return transposed ? conv_transpose2d(x, w, b, stride, pad, out_pad)
                      : conv2d(x, w, b, stride, pad);
  }
};

template <class S>
struct InstanceNormLayerT {
  TensorT<S> gamma, beta;
  TensorT<S> forward(const TensorT<S>& x) const { return instance_norm(x, gamma, beta, S(1e-5)); }
};

// y = skip(x) + ReLU(IN(Conv(x))); skip is identity or a 1x1 projection that
// matches any channel/stride change of the main conv.
template <class S>
struct ResidualBlockT {
  ConvLayerT<S> conv;
  InstanceNormLayerT<S> norm;
  bool has_proj = false;
  ConvLayerT<S> proj;
  TensorT<S> forward(const TensorT<S>& x) const;
};

enum class CombinedMode { keep, down, up };

// A stack of rb_per_combined residual blocks at one resolution level.
// mode=down: the last block's conv is 3x3 stride-2 and doubles channels.
// mode=up: the first block uses a stride-2 transposed conv halving channels
// (the mirror image of the encoder ordering).
template <class S>
struct CombinedBlockT {
  CombinedMode mode = CombinedMode::keep;
  std::vector<ResidualBlockT<S>> blocks;
  TensorT<S> forward(const TensorT<S>& x) const;
};

// Bottleneck conv block: y = x + Conv(ReLU(IN(Conv(x)))), both convs 3x3.
template <class S>
struct BottleneckConvBlockT {
  ConvLayerT<S> conv1;
  InstanceNormLayerT<S> norm;
  ConvLayerT<S> conv2;
  TensorT<S> forward(const TensorT<S>& x) const;
};

template <class S>
struct TransformerLayerT {
  TensorT<S> ln1_gamma, ln1_beta;
  MhaWeightsT<S> attn;
  TensorT<S> ln2_gamma, ln2_beta;
  TensorT<S> mlp_w1, mlp_b1, mlp_w2, mlp_b2;
};

// Pre-norm encoder stack over a [T, D] token matrix, with learned position
// embeddings added on entry. Shared between the two ViT blocks.
template <class S>
struct TransformerEncoderT {
  std::vector<TransformerLayerT<S>> layers;
  TensorT<S> pos_emb;  // [max_tokens, D]
  AttentionConfig attn_cfg;
  TensorT<S> forward_tokens(const TensorT<S>& tokens) const;
};

// Bottleneck ViT block: two stride-2 convs down to the token grid, shared
// transformer encoder, two stride-2 transposed convs back up, bilinear resize
// to the input size, channel concat + 1x1 compression, residual add.
template <class S>
struct VitBlockT {
  ConvLayerT<S> down1, down2;
  InstanceNormLayerT<S> dnorm1, dnorm2;
  ConvLayerT<S> up1, up2;
  InstanceNormLayerT<S> unorm1, unorm2;
  ConvLayerT<S> compress;
  const TransformerEncoderT<S>* shared_tx = nullptr;
  TensorT<S> forward(const TensorT<S>& x) const;
};

// ---------------------------------------------------------------------------
// Structure accounting (analytic; no parameter allocation)
// ---------------------------------------------------------------------------

struct ArchitectureAudit {
  int residual_blocks = 0;  // combined-block members + bottleneck conv blocks
  int vit_blocks = 0;
};

struct ShapeTrace {
  int input_h, input_w;
  int latent_h, latent_w;       // encoder output / bottleneck resolution
  int token_grid_h, token_grid_w;
  int tokens;
  int upsampled_h, upsampled_w;  // after the ViT transposed convs
  int resized_h, resized_w;      // after bilinear resize back
  int output_h, output_w;
};

ArchitectureAudit audit_architecture(const ModelConfig& cfg);
ShapeTrace trace_shapes(const ModelConfig& cfg);

// Sum of element counts over unique (non-aliased) parameters; the shared
// transformer is counted once.
std::int64_t count_params(const ModelConfig& cfg);

// Analytic forward-pass operation count per batch:
//   conv 2*k^2*Cin*Cout*H'*W'*B, linear 2*in*out*T*B,
//   attention 4*T^2*d per head per item, elementwise ops at per-element cost.
// `transformer` isolates everything inside the shared encoder stack; the
// complexity table reports total() - transformer to match how such tables are
// produced by conv-oriented profilers (see complexity module).
struct FlopBreakdown {
  std::int64_t conv = 0;
  std::int64_t linear = 0;
  std::int64_t attention = 0;
  std::int64_t elementwise = 0;
  std::int64_t transformer = 0;  // subset of linear+attention+elementwise
  std::int64_t total() const { return conv + linear + attention + elementwise; }
  std::int64_t conv_path() const { return total() - transformer; }
};

FlopBreakdown count_flops_breakdown(const ModelConfig& cfg, int batch);
std::int64_t count_flops(const ModelConfig& cfg, int batch);  // = breakdown total

// ---------------------------------------------------------------------------
// Generator
// ---------------------------------------------------------------------------

// The full encoder / bottleneck / decoder generator of the translation model.
template <class S>
class GeneratorT {
 public:
  GeneratorT(const ModelConfig& cfg, std::uint64_t init_seed);
  // ViT blocks hold pointers into shared_tx; the object stays put.
  GeneratorT(const GeneratorT&) = delete;
  GeneratorT& operator=(const GeneratorT&) = delete;

  // x: [B, in_channels, H, W] with H, W divisible by 4 and values in [-1, 1].
  // Returns [B, out_channels, H, W] with values in (-1, 1).
  TensorT<S> forward(const TensorT<S>& x) const;

  // Bottleneck applied to an encoder-resolution feature map (test hook and
  // spec surface).
  TensorT<S> bottleneck_forward(const TensorT<S>& x) const;

  const ModelConfig& config() const { return cfg_; }
  ParamTableT<S>& params() { return params_; }
  const ParamTableT<S>& params() const { return params_; }

  // Counted from the instantiated blocks (not from config arithmetic).
  ArchitectureAudit audit() const;

  std::vector<CombinedBlockT<S>> encoder;
  std::vector<BottleneckConvBlockT<S>> bottleneck_convs;  // in layer order
  std::vector<VitBlockT<S>> vit_blocks;                   // in layer order
  std::vector<int> bottleneck_layout;  // per layer: -1 = conv block, else vit index
  std::vector<CombinedBlockT<S>> decoder;
  ConvLayerT<S> head_conv, head_proj;
  TransformerEncoderT<S> shared_tx;

 private:
  ModelConfig cfg_;
  ParamTableT<S> params_;
};

using Generator = GeneratorT<float>;

}  // namespace mprvit
