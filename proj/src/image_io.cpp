#include "fewshot/image_io.hpp"

#include <cmath>
#include <fstream>
#include <string>

#include "fewshot/errors.hpp"

namespace fewshot::io {
namespace {

void write_netpbm(const std::filesystem::path& path, const Bytes& x, const char* magic) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << magic << "\n" << x.width() << " " << x.height() << "\n255\n";
  // Netpbm interleaves channels per pixel.
  std::string row(static_cast<std::size_t>(x.width()) * x.channels(), '\0');
  for (int y = 0; y < x.height(); ++y) {
    for (int col = 0; col < x.width(); ++col)
      for (int c = 0; c < x.channels(); ++c)
        row[static_cast<std::size_t>(col) * x.channels() + c] = static_cast<char>(x.at(c, y, col));
    out.write(row.data(), static_cast<std::streamsize>(row.size()));
  }
  if (!out) throw IoError("write failed: " + path.string());
}

int read_header_int(std::istream& in, const std::filesystem::path& path) {
  int value = 0;
  in >> std::ws;
  while (in.peek() == '#') {
    std::string skip;
    std::getline(in, skip);
    in >> std::ws;
  }
  if (!(in >> value)) throw ValidationError("malformed Netpbm header in " + path.string());
  return value;
}

}  // namespace

void write_ppm(const std::filesystem::path& path, const Bytes& rgb) {
  if (rgb.channels() != 3) throw ArgumentError("write_ppm: expected 3 channels");
  write_netpbm(path, rgb, "P6");
}

void write_pgm(const std::filesystem::path& path, const Bytes& gray) {
  if (gray.channels() != 1) throw ArgumentError("write_pgm: expected 1 channel");
  write_netpbm(path, gray, "P5");
}

Bytes read_netpbm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string magic;
  in >> magic;
  int channels = 0;
  if (magic == "P6")
    channels = 3;
  else if (magic == "P5")
    channels = 1;
  else
    throw ValidationError("unsupported image format '" + magic + "' in " + path.string());
  const int width = read_header_int(in, path);
  const int height = read_header_int(in, path);
  const int maxval = read_header_int(in, path);
  if (maxval != 255 || width <= 0 || height <= 0)
    throw ValidationError("unsupported Netpbm geometry in " + path.string());
  in.get();
  Bytes x(channels, height, width);
  std::string row(static_cast<std::size_t>(width) * channels, '\0');
  for (int y = 0; y < height; ++y) {
    if (!in.read(row.data(), static_cast<std::streamsize>(row.size())))
      throw ValidationError("truncated image data in " + path.string());
    for (int col = 0; col < width; ++col)
      for (int c = 0; c < channels; ++c)
        x.at(c, y, col) = static_cast<std::uint8_t>(row[static_cast<std::size_t>(col) * channels + c]);
  }
  return x;
}

Bytes to_bytes(const Tensor<float>& x) {
  Bytes out(x.channels(), x.height(), x.width());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const float v = std::clamp(x.data()[i], 0.0f, 1.0f);
    out.data()[i] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
  }
  return out;
}

Tensor<float> from_bytes(const Bytes& x) {
  Tensor<float> out(x.channels(), x.height(), x.width());
  for (std::size_t i = 0; i < x.size(); ++i) out.data()[i] = static_cast<float>(x.data()[i]) / 255.0f;
  return out;
}

}  // namespace fewshot::io
