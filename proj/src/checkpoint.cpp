#include "clusterformer/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>

#include "clusterformer/errors.hpp"

namespace clusterformer {

namespace {

constexpr char kMagic[4] = {'C', 'F', 'K', '1'};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_bytes(std::vector<std::uint8_t>& out, const std::string& s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out.insert(out.end(), s.begin(), s.end());
}

class Reader {
 public:
  Reader(const std::vector<std::uint8_t>& bytes, const std::string& origin) : bytes_(bytes), origin_(origin) {}

  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }

  std::string text(const char* what) {
    const std::uint32_t n = u32(what);
    need(n, what);
    std::string s(bytes_.begin() + static_cast<std::ptrdiff_t>(pos_), bytes_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return s;
  }

  void need(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) fail(std::string("truncated while reading ") + what);
  }

  [[noreturn]] void fail(const std::string& msg) const { throw FormatError("checkpoint " + origin_ + ": " + msg); }

  std::size_t pos() const { return pos_; }
  const std::vector<std::uint8_t>& bytes() const { return bytes_; }
  void skip(std::size_t n) { pos_ += n; }

 private:
  const std::vector<std::uint8_t>& bytes_;
  const std::string& origin_;
  std::size_t pos_ = 0;
};

struct StoredArray {
  Shape shape;
  std::vector<double> values;
};

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const Model& model) {
  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(model.named.size()));
  for (const auto& [name, t] : model.named) {
    put_bytes(out, name);
    put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t e : t.shape()) put_u32(out, static_cast<std::uint32_t>(e));
    for (double v : t.data()) put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  }
  put_bytes(out, model.config.to_text());
  return out;
}

Model deserialize_checkpoint(const std::vector<std::uint8_t>& bytes, const std::string& origin) {
  Reader r(bytes, origin);
  r.need(4, "magic");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) r.fail("bad magic (not a checkpoint file)");
  r.skip(4);
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion) {
    r.fail("unsupported version " + std::to_string(version) + " (expected " + std::to_string(kCheckpointVersion) + ")");
  }
  const std::uint32_t count = r.u32("array count");
  std::map<std::string, StoredArray> arrays;
  for (std::uint32_t a = 0; a < count; ++a) {
    std::string name = r.text("array name");
    StoredArray arr;
    const std::uint32_t rank = r.u32("rank");
    for (std::uint32_t i = 0; i < rank; ++i) arr.shape.push_back(r.u32("extent"));
    const std::size_t n = shape_numel(arr.shape);
    r.need(4 * n, "array values");
    arr.values.resize(n);
    for (auto& v : arr.values) v = std::bit_cast<float>(r.u32("value"));
    if (!arrays.emplace(name, std::move(arr)).second) r.fail("duplicate array '" + name + "'");
  }
  const std::string config_text = r.text("config");
  if (r.pos() != bytes.size()) r.fail("trailing bytes after config");

  ModelConfig config;
  try {
    config = ModelConfig::from_key_values(parse_key_values(config_text));
    config.validate();
  } catch (const ConfigError& e) {
    r.fail(std::string("invalid embedded config: ") + e.what());
  }
  std::size_t used = 0;
  Model model = assemble(config, [&](const ParamSpec& spec) {
    auto it = arrays.find(spec.name);
    if (it == arrays.end()) r.fail("missing array '" + spec.name + "'");
    if (it->second.shape != spec.shape) {
      r.fail("array '" + spec.name + "' has shape " + shape_to_string(it->second.shape) + ", expected " +
             shape_to_string(spec.shape));
    }
    ++used;
    return Tensor::parameter(spec.shape, std::move(it->second.values));
  });
  if (used != arrays.size()) {
    for (const auto& [name, arr] : arrays) {
      bool known = false;
      for (const auto& [n, t] : model.named) known = known || n == name;
      if (!known) r.fail("unexpected array '" + name + "'");
    }
  }
  return model;
}

void save_checkpoint(const Model& model, const std::string& path) {
  const auto bytes = serialize_checkpoint(model);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open '" + path + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("write failed for '" + path + "'");
}

Model load_checkpoint(const std::string& path, const std::optional<ModelConfig>& expected) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint '" + path + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  Model model = deserialize_checkpoint(bytes, "'" + path + "'");
  if (expected && !(*expected == model.config)) {
    throw ConfigError("checkpoint '" + path + "' was saved with a different model config");
  }
  return model;
}

}  // namespace clusterformer
