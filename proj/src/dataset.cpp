#include "clusterformer/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>
#include <sstream>

#include "clusterformer/config.hpp"
#include "clusterformer/errors.hpp"
#include "clusterformer/pnm.hpp"

namespace clusterformer {

namespace fs = std::filesystem;

namespace {

const char* const kShapeNames[] = {"disk", "square", "cross"};
constexpr double kRadius = 0.28;  // fraction of the image side

bool inside(std::size_t shape, double dx, double dy, double r) {
  switch (shape) {
    case 0: return dx * dx + dy * dy <= r * r;
    case 1: return std::abs(dx) <= 0.85 * r && std::abs(dy) <= 0.85 * r;
    default: {
      const double arm = r / 3.0;
      return (std::abs(dx) <= r && std::abs(dy) <= arm) || (std::abs(dy) <= r && std::abs(dx) <= arm);
    }
  }
}

}  // namespace

SyntheticSpec SyntheticSpec::parse(const std::string& text) {
  if (!is_synthetic_source(text)) throw ConfigError("not a synthetic data spec: '" + text + "'");
  SyntheticSpec spec;
  const auto colon = text.find(':');
  if (colon == std::string::npos) return spec;
  std::string body = text.substr(colon + 1);
  std::replace(body.begin(), body.end(), ',', '\n');
  const KeyValues kv = parse_key_values(body);
  for (const auto& [key, value] : kv) {
    try {
      std::size_t used = 0;
      if (key == "noise") {
        spec.noise = std::stod(value, &used);
      } else {
        const auto v = std::stoull(value, &used);
        if (key == "per_class") spec.per_class = v;
        else if (key == "size") spec.image_size = v;
        else if (key == "classes") spec.classes = v;
        else if (key == "channels") spec.channels = v;
        else throw ConfigError("unknown synthetic key '" + key + "'");
      }
      if (used != value.size()) throw std::invalid_argument(value);
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception&) {
      throw ConfigError("synthetic spec: bad value '" + value + "' for '" + key + "'");
    }
  }
  if (spec.classes < 1 || spec.classes > 3) throw ConfigError("synthetic spec: classes must be 1..3");
  if (spec.channels != 1 && spec.channels != 3) throw ConfigError("synthetic spec: channels must be 1 or 3");
  if (spec.image_size < 8) throw ConfigError("synthetic spec: size must be at least 8");
  if (!(spec.noise >= 0.0 && spec.noise < 1.0)) throw ConfigError("synthetic spec: noise must be in [0, 1)");
  return spec;
}

bool is_synthetic_source(const std::string& source) { return source == "synthetic" || source.rfind("synthetic:", 0) == 0; }

Dataset make_synthetic(const SyntheticSpec& spec, std::uint64_t seed) {
  Dataset ds;
  for (std::size_t c = 0; c < spec.classes; ++c) ds.class_names.emplace_back(kShapeNames[c]);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double S = static_cast<double>(spec.image_size);
  const std::size_t n = spec.classes * spec.per_class;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t label = i % spec.classes;
    const double r = kRadius * S;
    const double cx = S * 0.5 + (unit(rng) - 0.5) * (S - 2 * r);
    const double cy = S * 0.5 + (unit(rng) - 0.5) * (S - 2 * r);
    std::vector<double> px(spec.image_size * spec.image_size * spec.channels);
    for (std::size_t y = 0; y < spec.image_size; ++y) {
      for (std::size_t x = 0; x < spec.image_size; ++x) {
        const double clean = inside(label, static_cast<double>(x) + 0.5 - cx, static_cast<double>(y) + 0.5 - cy, r) ? 1.0 : 0.0;
        for (std::size_t ch = 0; ch < spec.channels; ++ch) {
          px[(y * spec.image_size + x) * spec.channels + ch] = (1.0 - spec.noise) * clean + spec.noise * unit(rng);
        }
      }
    }
    ds.images.push_back(Tensor::from_data({spec.image_size, spec.image_size, spec.channels}, std::move(px)));
    ds.labels.push_back(label);
  }
  return ds;
}

Dataset load_image_directory(const std::string& root) {
  if (!fs::is_directory(root)) throw FormatError("dataset directory '" + root + "' does not exist");
  std::vector<fs::path> classes;
  for (const auto& e : fs::directory_iterator(root)) {
    if (e.is_directory()) classes.push_back(e.path());
  }
  std::sort(classes.begin(), classes.end());
  if (classes.empty()) throw FormatError("dataset directory '" + root + "' has no class subdirectories");
  Dataset ds;
  for (std::size_t c = 0; c < classes.size(); ++c) {
    ds.class_names.push_back(classes[c].filename().string());
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(classes[c])) {
      const auto ext = e.path().extension().string();
      if (e.is_regular_file() && (ext == ".pgm" || ext == ".ppm" || ext == ".pnm")) files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      Tensor img = read_pnm(f.string());
      if (!ds.images.empty() && img.shape() != ds.images.front().shape()) {
        throw FormatError("image '" + f.string() + "' has shape " + shape_to_string(img.shape()) + ", expected " +
                          shape_to_string(ds.images.front().shape()));
      }
      ds.images.push_back(std::move(img));
      ds.labels.push_back(c);
    }
  }
  if (ds.images.empty()) throw FormatError("dataset directory '" + root + "' contains no images");
  return ds;
}

Dataset load_dataset(const std::string& source, std::uint64_t seed) {
  if (is_synthetic_source(source)) return make_synthetic(SyntheticSpec::parse(source), seed);
  return load_image_directory(source);
}

}  // namespace clusterformer
