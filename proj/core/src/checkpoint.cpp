#include "mprvit/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace mprvit {

namespace {

constexpr char kMagic[8] = {'M', 'P', 'R', 'V', 'I', 'T', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

struct Writer {
  std::ofstream out;
  explicit Writer(const std::filesystem::path& path) : out(path, std::ios::binary | std::ios::trunc) {
    if (!out) throw IoError("checkpoint_save: cannot open " + path.string());
  }
  void raw(const void* p, std::size_t n) { out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n)); }
  void u16(std::uint16_t v) { raw(&v, 2); }
  void u32(std::uint32_t v) { raw(&v, 4); }
  void u64(std::uint64_t v) { raw(&v, 8); }
  void tensor(const std::string& name, const Shape& shape, const float* data, std::size_t n) {
    if (name.size() > 0xffff) throw ContractError("checkpoint: tensor name too long");
    u16(static_cast<std::uint16_t>(name.size()));
    raw(name.data(), name.size());
    const std::uint8_t rank = static_cast<std::uint8_t>(shape.size());
    raw(&rank, 1);
    for (std::size_t e : shape) u64(e);
    raw(data, n * 4);
  }
};

struct Reader {
  std::ifstream in;
  std::size_t offset = 0;
  std::filesystem::path path;
  explicit Reader(const std::filesystem::path& p) : in(p, std::ios::binary), path(p) {
    if (!in) throw IoError("checkpoint_load: cannot open " + p.string());
  }
  [[noreturn]] void fail(const std::string& what) {
    throw FormatError("checkpoint_load: " + what + " at offset " + std::to_string(offset) + " in " +
                      path.string());
  }
  void raw(void* p, std::size_t n) {
    in.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in.gcount()) != n) fail("truncated file");
    offset += n;
  }
  std::uint16_t u16() { std::uint16_t v; raw(&v, 2); return v; }
  std::uint32_t u32() { std::uint32_t v; raw(&v, 4); return v; }
  std::uint64_t u64() { std::uint64_t v; raw(&v, 8); return v; }
};

std::vector<float> config_to_floats(const ModelConfig& cfg) {
  return {static_cast<float>(cfg.in_channels),     static_cast<float>(cfg.out_channels),
          static_cast<float>(cfg.base_channels),   static_cast<float>(cfg.rb_per_combined),
          static_cast<float>(cfg.bottleneck_layers), static_cast<float>(cfg.vit_positions[0]),
          static_cast<float>(cfg.vit_positions[1]), static_cast<float>(cfg.token_dim),
          static_cast<float>(cfg.tx_layers),        static_cast<float>(cfg.tx_heads),
          static_cast<float>(cfg.tx_mlp_dim),       static_cast<float>(cfg.input_hw[0]),
          static_cast<float>(cfg.input_hw[1])};
}

ModelConfig config_from_floats(const std::vector<float>& f) {
  if (f.size() != 13) throw FormatError("checkpoint_load: meta.config must hold 13 values");
  ModelConfig cfg;
  cfg.in_channels = static_cast<int>(f[0]);
  cfg.out_channels = static_cast<int>(f[1]);
  cfg.base_channels = static_cast<int>(f[2]);
  cfg.rb_per_combined = static_cast<int>(f[3]);
  cfg.bottleneck_layers = static_cast<int>(f[4]);
  cfg.vit_positions = {static_cast<int>(f[5]), static_cast<int>(f[6])};
  cfg.token_dim = static_cast<int>(f[7]);
  cfg.tx_layers = static_cast<int>(f[8]);
  cfg.tx_heads = static_cast<int>(f[9]);
  cfg.tx_mlp_dim = static_cast<int>(f[10]);
  cfg.input_hw = {static_cast<int>(f[11]), static_cast<int>(f[12])};
  return cfg;
}

}  // namespace

void checkpoint_save(const std::filesystem::path& path, const ParamTable& params,
                     const OptimizerState& state, int epoch, double val_loss,
                     const ModelConfig& cfg, const std::vector<Modality>& modalities) {
  if (state.initialized() && state.m.size() != params.size()) {
    throw ContractError("checkpoint_save: optimizer state does not match parameters");
  }
  Writer w(path);
  w.raw(kMagic, 8);
  w.u32(kVersion);

  const std::uint32_t opt_tensors = state.initialized() ? static_cast<std::uint32_t>(2 * params.size()) : 0;
  const std::uint32_t count = static_cast<std::uint32_t>(params.size()) + opt_tensors + 5;
  w.u32(count);

  for (const auto& [name, t] : params) {
    w.tensor("param." + name, t.shape(), t.data().data(), t.numel());
  }
  if (state.initialized()) {
    std::size_t pi = 0;
    for (const auto& [name, t] : params) {
      w.tensor("opt.m." + name, t.shape(), state.m[pi].data(), state.m[pi].size());
      w.tensor("opt.v." + name, t.shape(), state.v[pi].data(), state.v[pi].size());
      ++pi;
    }
  }
  const float step_f = static_cast<float>(state.step);
  w.tensor("opt.step", Shape{1}, &step_f, 1);
  const float epoch_f = static_cast<float>(epoch);
  w.tensor("meta.epoch", Shape{1}, &epoch_f, 1);
  const float val_f = static_cast<float>(val_loss);
  w.tensor("meta.val_loss", Shape{1}, &val_f, 1);
  const std::vector<float> cfg_f = config_to_floats(cfg);
  w.tensor("meta.config", Shape{cfg_f.size()}, cfg_f.data(), cfg_f.size());
  std::vector<float> mods;
  for (Modality m : modalities) mods.push_back(static_cast<float>(static_cast<int>(m)));
  w.tensor("meta.modalities", Shape{mods.size()}, mods.data(), mods.size());
  if (!w.out) throw IoError("checkpoint_save: write failed for " + path.string());
}

Checkpoint checkpoint_load(const std::filesystem::path& path) {
  Reader r(path);
  char magic[8];
  r.raw(magic, 8);
  if (std::memcmp(magic, kMagic, 8) != 0) {
    r.offset = 0;
    r.fail("bad magic");
  }
  const std::uint32_t version = r.u32();
  if (version != kVersion) {
    r.offset = 8;
    r.fail("unsupported version " + std::to_string(version));
  }
  const std::uint32_t count = r.u32();

  Checkpoint ck;
  std::vector<std::pair<std::string, std::vector<float>>> opt_m, opt_v;
  std::vector<float> cfg_floats;
  bool have_config = false, have_epoch = false;

  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint16_t name_len = r.u16();
    std::string name(name_len, '\0');
    r.raw(name.data(), name_len);
    std::uint8_t rank;
    r.raw(&rank, 1);
    if (rank > 8) r.fail("implausible rank " + std::to_string(rank));
    Shape shape(rank);
    std::size_t n = 1;
    for (std::uint8_t d = 0; d < rank; ++d) {
      shape[d] = static_cast<std::size_t>(r.u64());
      n *= shape[d];
    }
    if (n > (1ull << 31)) r.fail("implausible tensor size");
    std::vector<float> data(n);
    r.raw(data.data(), n * 4);

    if (name.rfind("param.", 0) == 0) {
      ck.params.emplace_back(name.substr(6), std::make_pair(std::move(shape), std::move(data)));
    } else if (name.rfind("opt.m.", 0) == 0) {
      opt_m.emplace_back(name.substr(6), std::move(data));
    } else if (name.rfind("opt.v.", 0) == 0) {
      opt_v.emplace_back(name.substr(6), std::move(data));
    } else if (name == "opt.step") {
      ck.opt.step = static_cast<std::int64_t>(data.at(0));
    } else if (name == "meta.epoch") {
      ck.epoch = static_cast<int>(data.at(0));
      have_epoch = true;
    } else if (name == "meta.val_loss") {
      ck.val_loss = data.at(0);
    } else if (name == "meta.config") {
      cfg_floats = std::move(data);
      have_config = true;
    } else if (name == "meta.modalities") {
      for (float m : data) ck.modalities.push_back(static_cast<Modality>(static_cast<int>(m)));
    } else {
      r.fail("unknown tensor '" + name + "'");
    }
  }
  // Reject trailing garbage.
  char extra;
  r.in.read(&extra, 1);
  if (r.in.gcount() != 0) r.fail("trailing bytes after last tensor");

  if (!have_config || !have_epoch) r.fail("missing metadata");
  ck.config = config_from_floats(cfg_floats);
  if (!opt_m.empty()) {
    if (opt_m.size() != ck.params.size() || opt_v.size() != ck.params.size()) {
      r.fail("optimizer state does not cover all parameters");
    }
    for (std::size_t i = 0; i < ck.params.size(); ++i) {
      if (opt_m[i].first != ck.params[i].first || opt_v[i].first != ck.params[i].first) {
        r.fail("optimizer tensor order mismatch");
      }
      ck.opt.m.push_back(std::move(opt_m[i].second));
      ck.opt.v.push_back(std::move(opt_v[i].second));
    }
  }
  return ck;
}

void Checkpoint::load_into(Generator& model) const {
  if (params.size() != model.params().size()) {
    throw FormatError("checkpoint: has " + std::to_string(params.size()) + " parameters, model needs " +
                      std::to_string(model.params().size()));
  }
  for (const auto& [name, payload] : params) {
    TensorT<float>& dst = model.params().at(name);
    const auto& [shape, data] = payload;
    if (dst.shape() != shape) {
      throw FormatError("checkpoint: shape mismatch for " + name + ": file " + shape_str(shape) +
                        " vs model " + shape_str(dst.shape()));
    }
    std::copy(data.begin(), data.end(), dst.data().begin());
  }
}

}  // namespace mprvit
