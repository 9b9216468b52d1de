#include "clusterformer/config.hpp"

#include <charconv>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace clusterformer {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto* end = v.data() + v.size();
  auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || ptr != end) throw ConfigError("config: '" + key + "' expects an unsigned integer, got '" + v + "'");
  return out;
}

double parse_real(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("config: '" + key + "' expects a number, got '" + v + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config: '" + key + "' expects true/false, got '" + v + "'");
}

std::vector<std::size_t> parse_list(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_uint(key, trim(item)));
  if (out.empty()) throw ConfigError("config: '" + key + "' is empty");
  return out;
}

std::string join(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

}  // namespace

KeyValues parse_key_values(const std::string& text) {
  KeyValues kv;
  std::stringstream ss(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key=value, got '" + line + "'");
    }
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return kv;
}

KeyValues read_key_value_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot read config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse_key_values(ss.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

ModelConfig ModelConfig::swin_tiny() { return ModelConfig{}; }

ModelConfig ModelConfig::tiny() {
  ModelConfig c;
  c.image_size = 32;
  c.patch_size = 2;
  c.in_channels = 1;
  c.stage_depths = {1, 1};
  c.stage_dims = {16, 32};
  c.stage_K = {4, 4};
  c.num_heads = {2, 4};
  c.head_dim = 8;
  c.T = 3;
  c.num_classes = 3;
  return c;
}

std::size_t ModelConfig::grid_side(std::size_t stage) const { return (image_size / patch_size) >> stage; }

std::size_t ModelConfig::effective_K(std::size_t stage) const {
  const std::size_t side = grid_side(stage);
  return std::min(stage_K.at(stage), side * side);
}

void ModelConfig::validate() const {
  const std::size_t S = stage_dims.size();
  if (S == 0) throw ConfigError("config: at least one stage required");
  if (stage_depths.size() != S || stage_K.size() != S || num_heads.size() != S) {
    throw ConfigError("config: stage_depths, stage_dims, stage_K and num_heads must have one entry per stage");
  }
  if (T < 1) throw ConfigError("config: T must be at least 1");
  if (patch_size < 1 || image_size < 1 || in_channels < 1 || num_classes < 1 || head_dim < 1 || ffn_ratio < 1) {
    throw ConfigError("config: image_size, patch_size, in_channels, num_classes, head_dim, ffn_ratio must be positive");
  }
  const std::size_t divisor = patch_size << (S - 1);
  if (image_size % divisor != 0) {
    throw ConfigError("config: image_size " + std::to_string(image_size) + " not divisible by patch_size*2^(stages-1) = " +
                      std::to_string(divisor));
  }
  for (std::size_t s = 0; s < S; ++s) {
    if (stage_depths[s] < 1) throw ConfigError("config: stage " + std::to_string(s) + " has depth 0");
    if (stage_K[s] < 1) throw ConfigError("config: stage " + std::to_string(s) + " has K = 0");
    if (stage_dims[s] != num_heads[s] * head_dim) {
      throw ConfigError("config: stage " + std::to_string(s) + " width " + std::to_string(stage_dims[s]) +
                        " != num_heads " + std::to_string(num_heads[s]) + " * head_dim " + std::to_string(head_dim));
    }
  }
  if (!(layer_norm_eps > 0.0)) throw ConfigError("config: layer_norm_eps must be positive");
  if (logit_scale < 0.0) throw ConfigError("config: logit_scale must be >= 0");
}

ModelConfig ModelConfig::from_key_values(const KeyValues& kv, ModelConfig c) {
  for (const auto& [key, v] : kv) {
    if (key == "image_size") c.image_size = parse_uint(key, v);
    else if (key == "patch_size") c.patch_size = parse_uint(key, v);
    else if (key == "in_channels") c.in_channels = parse_uint(key, v);
    else if (key == "stage_depths") c.stage_depths = parse_list(key, v);
    else if (key == "stage_dims") c.stage_dims = parse_list(key, v);
    else if (key == "stage_K") c.stage_K = parse_list(key, v);
    else if (key == "num_heads") c.num_heads = parse_list(key, v);
    else if (key == "T") c.T = parse_uint(key, v);
    else if (key == "head_dim") c.head_dim = parse_uint(key, v);
    else if (key == "num_classes") c.num_classes = parse_uint(key, v);
    else if (key == "seed") c.seed = parse_uint(key, v);
    else if (key == "ffn_ratio") c.ffn_ratio = parse_uint(key, v);
    else if (key == "layer_norm_eps") c.layer_norm_eps = parse_real(key, v);
    else if (key == "logit_scale") c.logit_scale = parse_real(key, v);
    else if (key == "m_step_residual") c.m_step_residual = parse_bool(key, v);
    else if (key == "activation") {
      if (v == "gelu") c.activation = Activation::kGelu;
      else if (v == "identity") c.activation = Activation::kIdentity;
      else throw ConfigError("config: unknown activation '" + v + "'");
    } else if (key == "similarity") {
      if (v == "cosine") c.similarity = Similarity::kCosine;
      else if (v == "scaled_dot") c.similarity = Similarity::kScaledDot;
      else throw ConfigError("config: unknown similarity '" + v + "'");
    }
  }
  return c;
}

std::string ModelConfig::to_text() const {
  std::ostringstream os;
  os << std::setprecision(17);
  os << "image_size=" << image_size << '\n'
     << "patch_size=" << patch_size << '\n'
     << "in_channels=" << in_channels << '\n'
     << "stage_depths=" << join(stage_depths) << '\n'
     << "stage_dims=" << join(stage_dims) << '\n'
     << "stage_K=" << join(stage_K) << '\n'
     << "num_heads=" << join(num_heads) << '\n'
     << "T=" << T << '\n'
     << "head_dim=" << head_dim << '\n'
     << "num_classes=" << num_classes << '\n'
     << "seed=" << seed << '\n'
     << "ffn_ratio=" << ffn_ratio << '\n'
     << "layer_norm_eps=" << layer_norm_eps << '\n'
     << "logit_scale=" << logit_scale << '\n'
     << "activation=" << (activation == Activation::kGelu ? "gelu" : "identity") << '\n'
     << "similarity=" << (similarity == Similarity::kCosine ? "cosine" : "scaled_dot") << '\n'
     << "m_step_residual=" << (m_step_residual ? "true" : "false") << '\n';
  return os.str();
}

}  // namespace clusterformer
