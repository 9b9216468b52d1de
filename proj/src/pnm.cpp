#include "clusterformer/pnm.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iterator>

#include "clusterformer/errors.hpp"

namespace clusterformer {

namespace {

class HeaderReader {
 public:
  HeaderReader(const std::vector<std::uint8_t>& bytes, const std::string& path) : bytes_(bytes), path_(path) {}

  std::size_t number(const char* what) {
    skip_space_and_comments();
    std::size_t v = 0;
    std::size_t digits = 0;
    while (pos_ < bytes_.size() && std::isdigit(bytes_[pos_])) {
      v = v * 10 + (bytes_[pos_++] - '0');
      if (++digits > 9) fail(std::string(what) + " too large");
    }
    if (digits == 0) fail(std::string("expected ") + what);
    return v;
  }

  // Exactly one whitespace byte separates the header from the raster.
  std::size_t raster_start() {
    if (pos_ >= bytes_.size() || !std::isspace(bytes_[pos_])) fail("missing whitespace before raster");
    return pos_ + 1;
  }

  [[noreturn]] void fail(const std::string& msg) const { throw FormatError("image '" + path_ + "': " + msg); }

 private:
  void skip_space_and_comments() {
    while (pos_ < bytes_.size()) {
      if (std::isspace(bytes_[pos_])) {
        ++pos_;
      } else if (bytes_[pos_] == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else {
        break;
      }
    }
  }

  const std::vector<std::uint8_t>& bytes_;
  const std::string& path_;
  std::size_t pos_ = 2;
};

void write_bytes(const std::string& path, const std::string& header, const std::vector<std::uint8_t>& raster) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open '" + path + "' for writing");
  out << header;
  out.write(reinterpret_cast<const char*>(raster.data()), static_cast<std::streamsize>(raster.size()));
  if (!out) throw FormatError("write failed for '" + path + "'");
}

}  // namespace

Tensor read_pnm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open image '" + path + "'");
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  HeaderReader r(bytes, path);
  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6')) r.fail("not a binary P5/P6 file");
  const std::size_t channels = bytes[1] == '5' ? 1 : 3;
  const std::size_t width = r.number("width"), height = r.number("height"), maxval = r.number("maxval");
  if (width == 0 || height == 0) r.fail("zero image extent");
  if (maxval == 0 || maxval > 65535) r.fail("maxval " + std::to_string(maxval) + " outside 1..65535");
  const std::size_t start = r.raster_start();
  const std::size_t bytes_per = maxval > 255 ? 2 : 1;
  const std::size_t n = width * height * channels;
  if (bytes.size() - start < n * bytes_per) r.fail("truncated raster");
  std::vector<double> values(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t p = start + i * bytes_per;
    const std::size_t raw = bytes_per == 2 ? (std::size_t{bytes[p]} << 8) | bytes[p + 1] : bytes[p];
    if (raw > maxval) r.fail("sample exceeds maxval");
    values[i] = static_cast<double>(raw) / static_cast<double>(maxval);
  }
  return Tensor::from_data({height, width, channels}, std::move(values));
}

void write_pnm(const std::string& path, const Tensor& image) {
  if (image.rank() != 3 || (image.dim(2) != 1 && image.dim(2) != 3)) {
    throw ShapeError("write_pnm: expected H x W x 1 or H x W x 3, got " + shape_to_string(image.shape()));
  }
  std::vector<std::uint8_t> raster(image.numel());
  for (std::size_t i = 0; i < raster.size(); ++i) {
    raster[i] = static_cast<std::uint8_t>(std::lround(std::clamp(image.data()[i], 0.0, 1.0) * 255.0));
  }
  const std::string header = std::string(image.dim(2) == 1 ? "P5" : "P6") + "\n" + std::to_string(image.dim(1)) + " " +
                             std::to_string(image.dim(0)) + "\n255\n";
  write_bytes(path, header, raster);
}

void write_ppm(const std::string& path, const RgbImage& image) {
  if (image.pixels.size() != image.width * image.height * 3) {
    throw ShapeError("write_ppm: pixel buffer does not match " + std::to_string(image.width) + "x" +
                     std::to_string(image.height));
  }
  write_bytes(path, "P6\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n255\n", image.pixels);
}

}  // namespace clusterformer
