#include "mprvit/model.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace mprvit {

// ---------------------------------------------------------------------------
// ModelConfig
// ---------------------------------------------------------------------------

ModelConfig ModelConfig::desk() { return ModelConfig{}; }

ModelConfig ModelConfig::full_paper() {
  ModelConfig cfg;
  cfg.base_channels = 64;
  cfg.token_dim = 768;
  cfg.tx_layers = 12;
  cfg.tx_heads = 12;
  cfg.tx_mlp_dim = 3072;
  cfg.input_hw = {120, 120};
  return cfg;
}

namespace {
inline int conv_out(int h, int k, int stride, int pad) { return (h + 2 * pad - k) / stride + 1; }
inline int ceil_half(int h) { return conv_out(h, 3, 2, 1); }  // = ceil(h/2)
}  // namespace

int ModelConfig::max_tokens() const {
  const int gh = ceil_half(ceil_half(input_hw[0] / 4));
  const int gw = ceil_half(ceil_half(input_hw[1] / 4));
  return gh * gw;
}

void ModelConfig::validate() const {
  if (in_channels < 1 || out_channels < 1 || base_channels < 1) {
    throw ConfigError("ModelConfig: channel counts must be >= 1");
  }
  if (rb_per_combined < 1) throw ConfigError("ModelConfig: rb_per_combined must be >= 1");
  if (bottleneck_layers < 1) throw ConfigError("ModelConfig: bottleneck_layers must be >= 1");
  if (vit_positions[0] == vit_positions[1]) {
    throw ConfigError("ModelConfig: vit_positions must be distinct");
  }
  for (int p : vit_positions) {
    if (p < 1 || p > bottleneck_layers) {
      throw ConfigError("ModelConfig: vit_positions must lie in [1, bottleneck_layers]");
    }
  }
  if (token_dim < 1 || tx_layers < 1 || tx_mlp_dim < 1 || tx_heads < 1) {
    throw ConfigError("ModelConfig: transformer geometry must be positive");
  }
  if (token_dim % tx_heads != 0) {
    throw ConfigError("ModelConfig: token_dim must be divisible by tx_heads");
  }
  if (input_hw[0] % 4 != 0 || input_hw[1] % 4 != 0) {
    throw ConfigError("ModelConfig: input extents must be divisible by 4");
  }
  if (input_hw[0] < 16 || input_hw[1] < 16) {
    throw ConfigError("ModelConfig: input extents must be >= 16");
  }
}

// ---------------------------------------------------------------------------
// ParamTable
// ---------------------------------------------------------------------------

template <class S>
TensorT<S>& ParamTableT<S>::add(const std::string& name, TensorT<S> t) {
  if (index_.count(name)) throw ContractError("ParamTable: duplicate name " + name);
  index_[name] = items_.size();
  items_.emplace_back(name, std::move(t));
  return items_.back().second;
}

template <class S>
TensorT<S>& ParamTableT<S>::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ContractError("ParamTable: unknown name " + name);
  return items_[it->second].second;
}

template <class S>
const TensorT<S>& ParamTableT<S>::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ContractError("ParamTable: unknown name " + name);
  return items_[it->second].second;
}

template <class S>
std::int64_t ParamTableT<S>::unique_param_count() const {
  std::unordered_set<const void*> seen;
  std::int64_t total = 0;
  for (const auto& [name, t] : items_) {
    if (seen.insert(t.node().get()).second) total += static_cast<std::int64_t>(t.numel());
  }
  return total;
}

template <class S>
void ParamTableT<S>::set_requires_grad(bool on) {
  for (auto& [name, t] : items_) t.set_requires_grad(on);
}

template <class S>
void ParamTableT<S>::zero_grad() {
  for (auto& [name, t] : items_) t.zero_grad();
}

// ---------------------------------------------------------------------------
// Block forwards
// ---------------------------------------------------------------------------

template <class S>
TensorT<S> ResidualBlockT<S>::forward(const TensorT<S>& x) const {
  TensorT<S> main = relu(norm.forward(conv.forward(x)));
  TensorT<S> skip = has_proj ? proj.forward(x) : x;
  return add(skip, main);
}

template <class S>
TensorT<S> CombinedBlockT<S>::forward(const TensorT<S>& x) const {
  TensorT<S> y = x;
  for (const auto& block : blocks) y = block.forward(y);
  return y;
}

template <class S>
TensorT<S> BottleneckConvBlockT<S>::forward(const TensorT<S>& x) const {
  return add(x, conv2.forward(relu(norm.forward(conv1.forward(x)))));
}

template <class S>
TensorT<S> TransformerEncoderT<S>::forward_tokens(const TensorT<S>& tokens) const {
  const std::size_t t = tokens.extent(0);
  const std::size_t cap = pos_emb.extent(0);
  if (t > cap) {
    throw ConfigError("transformer: " + std::to_string(t) + " tokens exceed position-embedding capacity " +
                      std::to_string(cap));
  }
  TensorT<S> pos = (t == cap) ? pos_emb : slice(pos_emb, 0, 0, t);
  TensorT<S> h = add(tokens, pos);
  for (const auto& layer : layers) {
    TensorT<S> a = multi_head_attention(layer_norm(h, layer.ln1_gamma, layer.ln1_beta, S(1e-5)),
                                        layer.attn, attn_cfg);
    h = add(h, a);
    TensorT<S> m = layer_norm(h, layer.ln2_gamma, layer.ln2_beta, S(1e-5));
    m = add_row_bias(matmul(m, layer.mlp_w1), layer.mlp_b1);
    m = gelu(m);
    m = add_row_bias(matmul(m, layer.mlp_w2), layer.mlp_b2);
    h = add(h, m);
  }
  return h;
}

template <class S>
TensorT<S> VitBlockT<S>::forward(const TensorT<S>& x) const {
  if (x.extent(2) < 4 || x.extent(3) < 4) {
    throw DimensionError("vit block: input spatial extents must be >= 4");
  }
  TensorT<S> d1 = relu(dnorm1.forward(down1.forward(x)));
  TensorT<S> d2 = relu(dnorm2.forward(down2.forward(d1)));
  const std::size_t batch = d2.extent(0), gh = d2.extent(2), gw = d2.extent(3);
  const std::size_t t = gh * gw, dim = d2.extent(1);
  TensorT<S> tokens = nchw_to_tokens(d2);  // [B, T, D]
  TensorT<S> tokens_out;
  if (batch == 1) {
    tokens_out = reshape(shared_tx->forward_tokens(reshape(tokens, Shape{t, dim})), Shape{1, t, dim});
  } else {
    std::vector<TensorT<S>> rows;
    rows.reserve(batch);
    for (std::size_t bi = 0; bi < batch; ++bi) {
      TensorT<S> tb = reshape(slice(tokens, 0, bi, 1), Shape{t, dim});
      rows.push_back(reshape(shared_tx->forward_tokens(tb), Shape{1, t, dim}));
    }
    tokens_out = concat(rows, 0);
  }
  TensorT<S> u = tokens_to_nchw(tokens_out, gh, gw);
  u = relu(unorm1.forward(up1.forward(u)));
  u = relu(unorm2.forward(up2.forward(u)));
  u = bilinear_resize(u, x.extent(2), x.extent(3));
  TensorT<S> compressed = compress.forward(concat(std::vector<TensorT<S>>{x, u}, 1));
  return add(x, compressed);
}

// ---------------------------------------------------------------------------
// Architecture walk
// ---------------------------------------------------------------------------

namespace {

// Enumerates every primitive of the configured architecture in execution
// order with concrete dimensions (per sample). The same arithmetic drives
// the builder; a unit test pins analytic counts to the materialized model.
struct ArchVisitor {
  virtual void conv(int in_ch, int out_ch, int k, std::int64_t positions, bool shared) = 0;
  virtual void inst_norm(int ch, std::int64_t elems, bool shared) = 0;
  virtual void layer_norm_op(int dim, std::int64_t rows, bool shared) = 0;
  virtual void linear(int in_dim, int out_dim, std::int64_t rows, bool shared) = 0;
  virtual void attention_op(std::int64_t tokens, int heads, int head_dim, bool shared) = 0;
  virtual void param_bank(std::int64_t count, bool shared) = 0;
  virtual void eltwise(std::int64_t elems, int cost_per_elem) = 0;
  virtual void residual_block() = 0;
  virtual void vit_block() = 0;
  virtual void enter_transformer() {}
  virtual void leave_transformer() {}
  virtual ~ArchVisitor() = default;
};

struct WalkState {
  int h = 0, w = 0;
};

void walk_residual_block(ArchVisitor& v, WalkState& s, int in_ch, int out_ch, int k, int stride,
                         bool transposed) {
  v.residual_block();
  const int oh = transposed ? s.h * 2 : conv_out(s.h, k, stride, k / 2);
  const int ow = transposed ? s.w * 2 : conv_out(s.w, k, stride, k / 2);
  const std::int64_t pos =
      transposed ? static_cast<std::int64_t>(s.h) * s.w : static_cast<std::int64_t>(oh) * ow;
  v.conv(in_ch, out_ch, k, pos, false);
  const std::int64_t elems = static_cast<std::int64_t>(out_ch) * oh * ow;
  v.inst_norm(out_ch, elems, false);
  v.eltwise(elems, 1);  // relu
  if (in_ch != out_ch || stride != 1) {
    v.conv(in_ch, out_ch, 1, pos, false);  // projection skip
  }
  v.eltwise(elems, 1);  // residual add
  s.h = oh;
  s.w = ow;
}

void walk_combined_block(ArchVisitor& v, WalkState& s, CombinedMode mode, int in_ch, int out_ch,
                         int rb, bool entry_7x7) {
  // Middle width: down-blocks run at half the doubled output, up-blocks at
  // the halved output, keep-blocks at the unchanged width.
  const int mid = (mode == CombinedMode::down) ? out_ch / 2
                  : (mode == CombinedMode::up) ? out_ch
                                               : in_ch;
  if (mode == CombinedMode::up) {
    walk_residual_block(v, s, in_ch, out_ch, 3, 2, true);
    for (int i = 1; i < rb; ++i) walk_residual_block(v, s, mid, mid, 3, 1, false);
    return;
  }
  for (int i = 0; i < rb - 1; ++i) {
    const int k = (entry_7x7 && i == 0) ? 7 : 3;
    const int ic = (i == 0) ? in_ch : mid;
    walk_residual_block(v, s, ic, mid, k, 1, false);
  }
  const int last_k = (entry_7x7 && rb == 1) ? 7 : 3;
  const int last_in = (rb == 1) ? in_ch : mid;
  if (mode == CombinedMode::down) {
    walk_residual_block(v, s, last_in, out_ch, last_k, 2, false);
  } else {
    walk_residual_block(v, s, last_in, out_ch, last_k, 1, false);
  }
}

void walk_transformer(ArchVisitor& v, const ModelConfig& cfg, std::int64_t tokens, bool shared) {
  const int d = cfg.token_dim;
  v.enter_transformer();
  v.param_bank(static_cast<std::int64_t>(cfg.max_tokens()) * d, shared);
  v.eltwise(tokens * d, 1);  // position add
  for (int l = 0; l < cfg.tx_layers; ++l) {
    v.layer_norm_op(d, tokens, shared);
    for (int p = 0; p < 4; ++p) v.linear(d, d, tokens, shared);  // q, k, v, out
    v.attention_op(tokens, cfg.tx_heads, cfg.head_dim(), shared);
    v.eltwise(tokens * d, 1);
    v.layer_norm_op(d, tokens, shared);
    v.linear(d, cfg.tx_mlp_dim, tokens, shared);
    v.eltwise(tokens * cfg.tx_mlp_dim, 10);  // gelu
    v.linear(cfg.tx_mlp_dim, d, tokens, shared);
    v.eltwise(tokens * d, 1);
  }
  v.leave_transformer();
}

void walk_vit_block(ArchVisitor& v, const ModelConfig& cfg, WalkState& s, bool first_vit) {
  v.vit_block();
  const int c = 4 * cfg.base_channels;
  const int lh = s.h, lw = s.w;
  const int g1h = ceil_half(lh), g1w = ceil_half(lw);
  const int gh = ceil_half(g1h), gw = ceil_half(g1w);
  v.conv(c, 2 * c, 3, static_cast<std::int64_t>(g1h) * g1w, false);
  v.inst_norm(2 * c, static_cast<std::int64_t>(2 * c) * g1h * g1w, false);
  v.eltwise(static_cast<std::int64_t>(2 * c) * g1h * g1w, 1);
  v.conv(2 * c, cfg.token_dim, 3, static_cast<std::int64_t>(gh) * gw, false);
  v.inst_norm(cfg.token_dim, static_cast<std::int64_t>(cfg.token_dim) * gh * gw, false);
  v.eltwise(static_cast<std::int64_t>(cfg.token_dim) * gh * gw, 1);

  walk_transformer(v, cfg, static_cast<std::int64_t>(gh) * gw, !first_vit);

  // transposed convs count input positions (same MAC count as their adjoints)
  v.conv(cfg.token_dim, 2 * c, 3, static_cast<std::int64_t>(gh) * gw, false);
  v.inst_norm(2 * c, static_cast<std::int64_t>(2 * c) * 2 * gh * 2 * gw, false);
  v.eltwise(static_cast<std::int64_t>(2 * c) * 2 * gh * 2 * gw, 1);
  v.conv(2 * c, c, 3, static_cast<std::int64_t>(2 * gh) * 2 * gw, false);
  v.inst_norm(c, static_cast<std::int64_t>(c) * 4 * gh * 4 * gw, false);
  v.eltwise(static_cast<std::int64_t>(c) * 4 * gh * 4 * gw, 1);
  v.eltwise(static_cast<std::int64_t>(c) * lh * lw, 8);  // bilinear resize back
  v.conv(2 * c, c, 1, static_cast<std::int64_t>(lh) * lw, false);  // channel compression
  v.eltwise(static_cast<std::int64_t>(c) * lh * lw, 1);  // residual add
}

void walk_architecture(const ModelConfig& cfg, ArchVisitor& v) {
  cfg.validate();
  WalkState s{cfg.input_hw[0], cfg.input_hw[1]};
  const int b = cfg.base_channels;
  const int rb = cfg.rb_per_combined;

  walk_combined_block(v, s, CombinedMode::down, cfg.in_channels, 2 * b, rb, true);
  walk_combined_block(v, s, CombinedMode::down, 2 * b, 4 * b, rb, false);
  walk_combined_block(v, s, CombinedMode::keep, 4 * b, 4 * b, rb, false);

  bool first_vit = true;
  for (int layer = 1; layer <= cfg.bottleneck_layers; ++layer) {
    if (layer == cfg.vit_positions[0] || layer == cfg.vit_positions[1]) {
      walk_vit_block(v, cfg, s, first_vit);
      first_vit = false;
    } else {
      v.residual_block();
      const std::int64_t pos = static_cast<std::int64_t>(s.h) * s.w;
      const std::int64_t elems = static_cast<std::int64_t>(4 * b) * pos;
      v.conv(4 * b, 4 * b, 3, pos, false);
      v.inst_norm(4 * b, elems, false);
      v.eltwise(elems, 1);
      v.conv(4 * b, 4 * b, 3, pos, false);
      v.eltwise(elems, 1);  // residual add
    }
  }

  walk_combined_block(v, s, CombinedMode::keep, 4 * b, 4 * b, rb, false);
  walk_combined_block(v, s, CombinedMode::up, 4 * b, 2 * b, rb, false);
  walk_combined_block(v, s, CombinedMode::up, 2 * b, b, rb, false);

  // output head: 7x7 conv + 1x1 projection skip + tanh (not a residual block)
  const std::int64_t pos = static_cast<std::int64_t>(s.h) * s.w;
  v.conv(b, cfg.out_channels, 7, pos, false);
  v.conv(b, cfg.out_channels, 1, pos, false);
  v.eltwise(static_cast<std::int64_t>(cfg.out_channels) * pos, 1);   // add
  v.eltwise(static_cast<std::int64_t>(cfg.out_channels) * pos, 10);  // tanh
}

struct CountingVisitor : ArchVisitor {
  std::int64_t params = 0;
  FlopBreakdown flops;
  ArchitectureAudit audit;

  void conv(int in_ch, int out_ch, int k, std::int64_t positions, bool shared) override {
    if (!shared) params += static_cast<std::int64_t>(k) * k * in_ch * out_ch + out_ch;
    flops.conv += 2LL * k * k * in_ch * out_ch * positions;
  }
  void inst_norm(int ch, std::int64_t elems, bool shared) override {
    if (!shared) params += 2LL * ch;
    flops.elementwise += 8 * elems;
  }
  void layer_norm_op(int dim, std::int64_t rows, bool shared) override {
    if (!shared) params += 2LL * dim;
    flops.elementwise += 8 * rows * dim;
    flops.transformer += 8 * rows * dim;
  }
  void linear(int in_dim, int out_dim, std::int64_t rows, bool shared) override {
    if (!shared) params += static_cast<std::int64_t>(in_dim) * out_dim + out_dim;
    flops.linear += 2LL * in_dim * out_dim * rows;
    flops.transformer += 2LL * in_dim * out_dim * rows;
  }
  void attention_op(std::int64_t tokens, int heads, int head_dim, bool shared) override {
    (void)shared;  // projection weights are visited separately as linears
    const std::int64_t f = 4LL * tokens * tokens * head_dim * heads;
    flops.attention += f;
    flops.transformer += f;
  }
  void param_bank(std::int64_t count, bool shared) override {
    if (!shared) params += count;
  }
  void eltwise(std::int64_t elems, int cost) override {
    flops.elementwise += elems * cost;
    if (in_tx) flops.transformer += elems * cost;
  }
  void residual_block() override { ++audit.residual_blocks; }
  void vit_block() override { ++audit.vit_blocks; }
  void enter_transformer() override { in_tx = true; }
  void leave_transformer() override { in_tx = false; }

  bool in_tx = false;
};

}  // namespace

ArchitectureAudit audit_architecture(const ModelConfig& cfg) {
  CountingVisitor v;
  walk_architecture(cfg, v);
  return v.audit;
}

std::int64_t count_params(const ModelConfig& cfg) {
  CountingVisitor v;
  walk_architecture(cfg, v);
  return v.params;
}

FlopBreakdown count_flops_breakdown(const ModelConfig& cfg, int batch) {
  if (batch < 1) throw ContractError("count_flops: batch must be >= 1");
  CountingVisitor v;
  walk_architecture(cfg, v);
  FlopBreakdown f = v.flops;
  f.conv *= batch;
  f.linear *= batch;
  f.attention *= batch;
  f.elementwise *= batch;
  f.transformer *= batch;
  return f;
}

std::int64_t count_flops(const ModelConfig& cfg, int batch) {
  return count_flops_breakdown(cfg, batch).total();
}

ShapeTrace trace_shapes(const ModelConfig& cfg) {
  cfg.validate();
  ShapeTrace t{};
  t.input_h = cfg.input_hw[0];
  t.input_w = cfg.input_hw[1];
  t.latent_h = t.input_h / 4;
  t.latent_w = t.input_w / 4;
  t.token_grid_h = ceil_half(ceil_half(t.latent_h));
  t.token_grid_w = ceil_half(ceil_half(t.latent_w));
  t.tokens = t.token_grid_h * t.token_grid_w;
  t.upsampled_h = 4 * t.token_grid_h;
  t.upsampled_w = 4 * t.token_grid_w;
  t.resized_h = t.latent_h;
  t.resized_w = t.latent_w;
  t.output_h = t.input_h;
  t.output_w = t.input_w;
  return t;
}

// ---------------------------------------------------------------------------
// Generator construction
// ---------------------------------------------------------------------------

namespace {

template <class S>
ConvLayerT<S> make_conv(ParamTableT<S>& table, Rng& rng, const std::string& name, int in_ch,
                        int out_ch, int k, int stride, bool transposed, int out_pad = 0) {
  ConvLayerT<S> layer;
  layer.stride = stride;
  layer.pad = k / 2;
  layer.out_pad = out_pad;
  layer.transposed = transposed;
  const Shape wshape = transposed
                           ? Shape{static_cast<std::size_t>(in_ch), static_cast<std::size_t>(out_ch),
                                   static_cast<std::size_t>(k), static_cast<std::size_t>(k)}
                           : Shape{static_cast<std::size_t>(out_ch), static_cast<std::size_t>(in_ch),
                                   static_cast<std::size_t>(k), static_cast<std::size_t>(k)};
  const std::size_t fan_in = static_cast<std::size_t>(in_ch) * k * k;
  layer.w = table.add(name + ".weight", TensorT<S>::he_uniform(wshape, fan_in, rng, true));
  layer.b = table.add(name + ".bias",
                      TensorT<S>::zeros(Shape{static_cast<std::size_t>(out_ch)}, true));
  return layer;
}

template <class S>
InstanceNormLayerT<S> make_norm(ParamTableT<S>& table, const std::string& name, int ch) {
  InstanceNormLayerT<S> n;
  n.gamma = table.add(name + ".gamma",
                      TensorT<S>::full(Shape{static_cast<std::size_t>(ch)}, S(1), true));
  n.beta = table.add(name + ".beta",
                     TensorT<S>::zeros(Shape{static_cast<std::size_t>(ch)}, true));
  return n;
}

template <class S>
ResidualBlockT<S> make_residual_block(ParamTableT<S>& table, Rng& rng, const std::string& name,
                                      int in_ch, int out_ch, int k, int stride, bool transposed) {
  ResidualBlockT<S> block;
  const int out_pad = (transposed && stride == 2) ? 1 : 0;
  block.conv = make_conv(table, rng, name + ".conv", in_ch, out_ch, k, stride, transposed, out_pad);
  block.norm = make_norm<S>(table, name + ".norm", out_ch);
  if (in_ch != out_ch || stride != 1) {
    block.has_proj = true;
    block.proj = make_conv(table, rng, name + ".proj", in_ch, out_ch, 1, stride, transposed,
                           transposed ? 1 : 0);
  }
  return block;
}

template <class S>
CombinedBlockT<S> make_combined_block(ParamTableT<S>& table, Rng& rng, const std::string& name,
                                      CombinedMode mode, int in_ch, int out_ch, int rb,
                                      bool entry_7x7) {
  CombinedBlockT<S> cb;
  cb.mode = mode;
  if (mode == CombinedMode::up) {
    cb.blocks.push_back(
        make_residual_block(table, rng, name + ".block0", in_ch, out_ch, 3, 2, true));
    for (int i = 1; i < rb; ++i) {
      cb.blocks.push_back(make_residual_block(table, rng, name + ".block" + std::to_string(i),
                                              out_ch, out_ch, 3, 1, false));
    }
    return cb;
  }
  const int mid = (mode == CombinedMode::down) ? out_ch / 2 : in_ch;
  for (int i = 0; i < rb - 1; ++i) {
    const int k = (entry_7x7 && i == 0) ? 7 : 3;
    const int ic = (i == 0) ? in_ch : mid;
    cb.blocks.push_back(
        make_residual_block(table, rng, name + ".block" + std::to_string(i), ic, mid, k, 1, false));
  }
  const int last_k = (entry_7x7 && rb == 1) ? 7 : 3;
  const int last_in = (rb == 1) ? in_ch : mid;
  const int last_stride = (mode == CombinedMode::down) ? 2 : 1;
  cb.blocks.push_back(make_residual_block(table, rng, name + ".block" + std::to_string(rb - 1),
                                          last_in, out_ch, last_k, last_stride, false));
  return cb;
}

}  // namespace

template <class S>
GeneratorT<S>::GeneratorT(const ModelConfig& cfg, std::uint64_t init_seed) : cfg_(cfg) {
  cfg.validate();
  Rng rng(init_seed);
  const int b = cfg.base_channels;
  const int rb = cfg.rb_per_combined;

  // Layer dims below must stay in lockstep with walk_architecture; a unit
  // test pins count_params() against the materialized table.

  encoder.push_back(make_combined_block(params_, rng, "encoder.cb0", CombinedMode::down,
                                        cfg.in_channels, 2 * b, rb, true));
  encoder.push_back(
      make_combined_block(params_, rng, "encoder.cb1", CombinedMode::down, 2 * b, 4 * b, rb, false));
  encoder.push_back(
      make_combined_block(params_, rng, "encoder.cb2", CombinedMode::keep, 4 * b, 4 * b, rb, false));

  // Shared transformer encoder (weights registered once; both ViT blocks
  // reference the same tensors).
  shared_tx.attn_cfg.num_heads = cfg.tx_heads;
  shared_tx.attn_cfg.head_dim = cfg.head_dim();
  const std::size_t d = static_cast<std::size_t>(cfg.token_dim);
  const std::size_t mlp = static_cast<std::size_t>(cfg.tx_mlp_dim);
  shared_tx.pos_emb = params_.add(
      "tx.pos_emb", TensorT<S>::uniform(Shape{static_cast<std::size_t>(cfg.max_tokens()), d},
                                        S(-0.02), S(0.02), rng, true));
  for (int l = 0; l < cfg.tx_layers; ++l) {
    const std::string base = "tx.layer" + std::to_string(l);
    TransformerLayerT<S> layer;
    layer.ln1_gamma = params_.add(base + ".ln1.gamma", TensorT<S>::full(Shape{d}, S(1), true));
    layer.ln1_beta = params_.add(base + ".ln1.beta", TensorT<S>::zeros(Shape{d}, true));
    layer.attn.wq = params_.add(base + ".attn.wq", TensorT<S>::he_uniform(Shape{d, d}, d, rng, true));
    layer.attn.bq = params_.add(base + ".attn.bq", TensorT<S>::zeros(Shape{d}, true));
    layer.attn.wk = params_.add(base + ".attn.wk", TensorT<S>::he_uniform(Shape{d, d}, d, rng, true));
    layer.attn.bk = params_.add(base + ".attn.bk", TensorT<S>::zeros(Shape{d}, true));
    layer.attn.wv = params_.add(base + ".attn.wv", TensorT<S>::he_uniform(Shape{d, d}, d, rng, true));
    layer.attn.bv = params_.add(base + ".attn.bv", TensorT<S>::zeros(Shape{d}, true));
    layer.attn.wo = params_.add(base + ".attn.wo", TensorT<S>::he_uniform(Shape{d, d}, d, rng, true));
    layer.attn.bo = params_.add(base + ".attn.bo", TensorT<S>::zeros(Shape{d}, true));
    layer.ln2_gamma = params_.add(base + ".ln2.gamma", TensorT<S>::full(Shape{d}, S(1), true));
    layer.ln2_beta = params_.add(base + ".ln2.beta", TensorT<S>::zeros(Shape{d}, true));
    layer.mlp_w1 = params_.add(base + ".mlp.w1", TensorT<S>::he_uniform(Shape{d, mlp}, d, rng, true));
    layer.mlp_b1 = params_.add(base + ".mlp.b1", TensorT<S>::zeros(Shape{mlp}, true));
    layer.mlp_w2 =
        params_.add(base + ".mlp.w2", TensorT<S>::he_uniform(Shape{mlp, d}, mlp, rng, true));
    layer.mlp_b2 = params_.add(base + ".mlp.b2", TensorT<S>::zeros(Shape{d}, true));
    shared_tx.layers.push_back(std::move(layer));
  }

  // Bottleneck layers (private conv adapters per ViT block).
  for (int layer = 1; layer <= cfg.bottleneck_layers; ++layer) {
    const std::string base = "bottleneck.layer" + std::to_string(layer);
    if (layer == cfg.vit_positions[0] || layer == cfg.vit_positions[1]) {
      VitBlockT<S> vit;
      const int c = 4 * b;
      vit.down1 = make_conv(params_, rng, base + ".vit.down1", c, 2 * c, 3, 2, false);
      vit.dnorm1 = make_norm<S>(params_, base + ".vit.dnorm1", 2 * c);
      vit.down2 = make_conv(params_, rng, base + ".vit.down2", 2 * c, cfg.token_dim, 3, 2, false);
      vit.dnorm2 = make_norm<S>(params_, base + ".vit.dnorm2", cfg.token_dim);
      vit.up1 = make_conv(params_, rng, base + ".vit.up1", cfg.token_dim, 2 * c, 3, 2, true, 1);
      vit.unorm1 = make_norm<S>(params_, base + ".vit.unorm1", 2 * c);
      vit.up2 = make_conv(params_, rng, base + ".vit.up2", 2 * c, c, 3, 2, true, 1);
      vit.unorm2 = make_norm<S>(params_, base + ".vit.unorm2", c);
      vit.compress = make_conv(params_, rng, base + ".vit.compress", 2 * c, c, 1, 1, false);
      bottleneck_layout.push_back(static_cast<int>(vit_blocks.size()));
      vit_blocks.push_back(std::move(vit));
    } else {
      BottleneckConvBlockT<S> block;
      block.conv1 = make_conv(params_, rng, base + ".conv1", 4 * b, 4 * b, 3, 1, false);
      block.norm = make_norm<S>(params_, base + ".norm", 4 * b);
      block.conv2 = make_conv(params_, rng, base + ".conv2", 4 * b, 4 * b, 3, 1, false);
      bottleneck_layout.push_back(-1);
      bottleneck_convs.push_back(std::move(block));
    }
  }
  // Pointers into this object; GeneratorT is therefore non-copyable in
  // practice (vit blocks reference shared_tx).
  for (auto& vit : vit_blocks) vit.shared_tx = &shared_tx;

  decoder.push_back(
      make_combined_block(params_, rng, "decoder.cb0", CombinedMode::keep, 4 * b, 4 * b, rb, false));
  decoder.push_back(
      make_combined_block(params_, rng, "decoder.cb1", CombinedMode::up, 4 * b, 2 * b, rb, false));
  decoder.push_back(
      make_combined_block(params_, rng, "decoder.cb2", CombinedMode::up, 2 * b, b, rb, false));

  head_conv = make_conv(params_, rng, "head.conv", b, cfg.out_channels, 7, 1, false);
  head_proj = make_conv(params_, rng, "head.proj", b, cfg.out_channels, 1, 1, false);
  // The residual chain grows activation variance roughly linearly with
  // depth, and the head has no norm before tanh: at plain He scale the
  // initial pre-tanh values sit far in the saturated tail (|z| ~ 5-6) and
  // optimization stalls. Tempering only the head keeps the init healthy.
  for (auto* layer : {&head_conv, &head_proj}) {
    for (auto& v : layer->w.data()) v *= S(0.125);
  }
}

template <class S>
TensorT<S> GeneratorT<S>::bottleneck_forward(const TensorT<S>& x) const {
  TensorT<S> h = x;
  std::size_t conv_i = 0;
  for (int tag : bottleneck_layout) {
    if (tag < 0) {
      h = bottleneck_convs[conv_i++].forward(h);
    } else {
      h = vit_blocks[static_cast<std::size_t>(tag)].forward(h);
    }
  }
  return h;
}

template <class S>
TensorT<S> GeneratorT<S>::forward(const TensorT<S>& x) const {
  if (x.rank() != 4) throw DimensionError("model: expected [B,C,H,W], got " + shape_str(x.shape()));
  if (x.extent(1) != static_cast<std::size_t>(cfg_.in_channels)) {
    throw DimensionError("model: expected " + std::to_string(cfg_.in_channels) + " input channels, got " +
                         std::to_string(x.extent(1)));
  }
  if (x.extent(2) % 4 != 0 || x.extent(3) % 4 != 0) {
    throw DimensionError("model: input extents must be divisible by 4, got " + shape_str(x.shape()));
  }
  TensorT<S> h = x;
  for (const auto& cb : encoder) h = cb.forward(h);
  h = bottleneck_forward(h);
  for (const auto& cb : decoder) h = cb.forward(h);
  TensorT<S> out = tanh_act(add(head_conv.forward(h), head_proj.forward(h)));
  if (!out.all_finite()) throw NumericFault("model: non-finite values in output");
  return out;
}

template <class S>
ArchitectureAudit GeneratorT<S>::audit() const {
  ArchitectureAudit a;
  for (const auto& cb : encoder) a.residual_blocks += static_cast<int>(cb.blocks.size());
  for (const auto& cb : decoder) a.residual_blocks += static_cast<int>(cb.blocks.size());
  a.residual_blocks += static_cast<int>(bottleneck_convs.size());
  a.vit_blocks = static_cast<int>(vit_blocks.size());
  return a;
}

// ---------------------------------------------------------------------------
// Explicit instantiations
// ---------------------------------------------------------------------------

#define MPRVIT_INSTANTIATE(S)              \
  template class ParamTableT<S>;           \
  template struct ResidualBlockT<S>;       \
  template struct CombinedBlockT<S>;       \
  template struct BottleneckConvBlockT<S>; \
  template struct TransformerEncoderT<S>;  \
  template struct VitBlockT<S>;            \
  template class GeneratorT<S>;

MPRVIT_INSTANTIATE(float)
MPRVIT_INSTANTIATE(double)

#undef MPRVIT_INSTANTIATE

}  // namespace mprvit
