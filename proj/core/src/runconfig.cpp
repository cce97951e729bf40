#include "mprvit/runconfig.hpp"

#include <fstream>
#include <sstream>

namespace mprvit {

namespace {

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

[[noreturn]] void bad(const std::string& what, int line_no) {
  if (line_no > 0) {
    throw ConfigError("config line " + std::to_string(line_no) + ": " + what);
  }
  throw ConfigError("config: " + what);
}

int parse_int(const std::string& v, int line_no) {
  try {
    std::size_t pos = 0;
    const int x = std::stoi(v, &pos);
    if (pos != v.size()) bad("trailing characters in integer '" + v + "'", line_no);
    return x;
  } catch (const ConfigError&) {
    throw;
  } catch (...) {
    bad("expected integer, got '" + v + "'", line_no);
  }
}

double parse_double(const std::string& v, int line_no) {
  try {
    std::size_t pos = 0;
    const double x = std::stod(v, &pos);
    if (pos != v.size()) bad("trailing characters in number '" + v + "'", line_no);
    return x;
  } catch (const ConfigError&) {
    throw;
  } catch (...) {
    bad("expected number, got '" + v + "'", line_no);
  }
}

std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(trim(item));
  return out;
}

}  // namespace

void RunConfig::apply(const std::string& key, const std::string& value, int line_no) {
  // model
  if (key == "in_channels") model.in_channels = parse_int(value, line_no);
  else if (key == "out_channels") model.out_channels = parse_int(value, line_no);
  else if (key == "base_channels") model.base_channels = parse_int(value, line_no);
  else if (key == "rb_per_combined") model.rb_per_combined = parse_int(value, line_no);
  else if (key == "bottleneck_layers") model.bottleneck_layers = parse_int(value, line_no);
  else if (key == "vit_positions") {
    const auto parts = split_list(value);
    if (parts.size() != 2) bad("vit_positions needs two comma-separated indices", line_no);
    model.vit_positions = {parse_int(parts[0], line_no), parse_int(parts[1], line_no)};
  } else if (key == "token_dim") model.token_dim = parse_int(value, line_no);
  else if (key == "tx_layers") model.tx_layers = parse_int(value, line_no);
  else if (key == "tx_heads") model.tx_heads = parse_int(value, line_no);
  else if (key == "tx_mlp_dim") model.tx_mlp_dim = parse_int(value, line_no);
  else if (key == "input_hw") {
    const auto parts = split_list(value);
    if (parts.size() != 2) bad("input_hw needs two comma-separated extents", line_no);
    model.input_hw = {parse_int(parts[0], line_no), parse_int(parts[1], line_no)};
  }
  // train
  else if (key == "lr") train.lr = static_cast<float>(parse_double(value, line_no));
  else if (key == "beta1") train.beta1 = static_cast<float>(parse_double(value, line_no));
  else if (key == "beta2") train.beta2 = static_cast<float>(parse_double(value, line_no));
  else if (key == "eps") train.eps = static_cast<float>(parse_double(value, line_no));
  else if (key == "weight_decay") train.weight_decay = static_cast<float>(parse_double(value, line_no));
  else if (key == "batch_size") train.batch_size = parse_int(value, line_no);
  else if (key == "max_epochs") train.max_epochs = parse_int(value, line_no);
  else if (key == "patience") train.patience = parse_int(value, line_no);
  else if (key == "flip_prob") train.flip_prob = static_cast<float>(parse_double(value, line_no));
  else if (key == "seed") train.seed = static_cast<std::uint64_t>(parse_double(value, line_no));
  // data / eval
  else if (key == "split_fractions") {
    const auto parts = split_list(value);
    if (parts.size() != 3) bad("split_fractions needs three comma-separated values", line_no);
    split_fractions = {parse_double(parts[0], line_no), parse_double(parts[1], line_no),
                       parse_double(parts[2], line_no)};
  } else if (key == "modalities") {
    modalities.clear();
    for (const auto& name : split_list(value)) modalities.push_back(modality_from_name(name));
    if (modalities.empty()) bad("modalities must not be empty", line_no);
  } else if (key == "ssim_constants") {
    if (value == "paper_literal") ssim_constants = SsimConstants::paper_literal;
    else if (value == "standard") ssim_constants = SsimConstants::standard;
    else bad("ssim_constants must be paper_literal or standard", line_no);
  } else {
    bad("unknown key '" + key + "'", line_no);
  }
}

RunConfig RunConfig::load(const std::filesystem::path& path,
                          const std::vector<std::string>& overrides) {
  std::ifstream in(path);
  if (!in) throw IoError("config: cannot open " + path.string());
  RunConfig cfg;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) bad("expected 'key = value', got '" + line + "'", line_no);
    cfg.apply(trim(line.substr(0, eq)), trim(line.substr(eq + 1)), line_no);
  }
  for (const auto& ov : overrides) {
    const auto eq = ov.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + ov + "' is not key=value");
    cfg.apply(trim(ov.substr(0, eq)), trim(ov.substr(eq + 1)), 0);
  }
  cfg.validate();
  return cfg;
}

RunConfig RunConfig::from_overrides(const std::vector<std::string>& overrides) {
  RunConfig cfg;
  for (const auto& ov : overrides) {
    const auto eq = ov.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + ov + "' is not key=value");
    cfg.apply(trim(ov.substr(0, eq)), trim(ov.substr(eq + 1)), 0);
  }
  cfg.validate();
  return cfg;
}

void RunConfig::validate() const {
  model.validate();
  train.validate();
  const double fsum = split_fractions[0] + split_fractions[1] + split_fractions[2];
  if (std::abs(fsum - 1.0) > 1e-6) {
    throw ConfigError("config: split_fractions sum to " + std::to_string(fsum));
  }
  if (modalities.empty()) throw ConfigError("config: modalities must not be empty");
  for (Modality m : modalities) {
    if (m != Modality::t1w && m != Modality::flair) {
      throw ConfigError("config: input modalities must be t1w and/or flair");
    }
  }
  if (static_cast<int>(modalities.size()) != model.in_channels) {
    throw ConfigError("config: in_channels (" + std::to_string(model.in_channels) +
                      ") must match the modality count (" + std::to_string(modalities.size()) + ")");
  }
}

std::string RunConfig::serialize() const {
  std::ostringstream os;
  os << "# resolved run configuration\n";
  os << "in_channels = " << model.in_channels << '\n';
  os << "out_channels = " << model.out_channels << '\n';
  os << "base_channels = " << model.base_channels << '\n';
  os << "rb_per_combined = " << model.rb_per_combined << '\n';
  os << "bottleneck_layers = " << model.bottleneck_layers << '\n';
  os << "vit_positions = " << model.vit_positions[0] << ',' << model.vit_positions[1] << '\n';
  os << "token_dim = " << model.token_dim << '\n';
  os << "tx_layers = " << model.tx_layers << '\n';
  os << "tx_heads = " << model.tx_heads << '\n';
  os << "tx_mlp_dim = " << model.tx_mlp_dim << '\n';
  os << "input_hw = " << model.input_hw[0] << ',' << model.input_hw[1] << '\n';
  os << "lr = " << train.lr << '\n';
  os << "beta1 = " << train.beta1 << '\n';
  os << "beta2 = " << train.beta2 << '\n';
  os << "eps = " << train.eps << '\n';
  os << "weight_decay = " << train.weight_decay << '\n';
  os << "batch_size = " << train.batch_size << '\n';
  os << "max_epochs = " << train.max_epochs << '\n';
  os << "patience = " << train.patience << '\n';
  os << "flip_prob = " << train.flip_prob << '\n';
  os << "seed = " << train.seed << '\n';
  os << "split_fractions = " << split_fractions[0] << ',' << split_fractions[1] << ','
     << split_fractions[2] << '\n';
  os << "modalities = ";
  for (std::size_t i = 0; i < modalities.size(); ++i) {
    if (i) os << ',';
    os << modality_name(modalities[i]);
  }
  os << '\n';
  os << "ssim_constants = "
     << (ssim_constants == SsimConstants::paper_literal ? "paper_literal" : "standard") << '\n';
  return os.str();
}

void RunConfig::archive(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("config: cannot archive to " + path.string());
  out << serialize();
}

}  // namespace mprvit
