#include "mmi/pyramid.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <sstream>

#include "mmi/ops.hpp"

namespace mmi {

namespace {

// Reads one whitespace-delimited header field, skipping '#' comments.
std::int64_t header_int(std::istream& in, const std::string& path) {
  int c = in.peek();
  while (c != EOF) {
    if (std::isspace(c)) {
      in.get();
    } else if (c == '#') {
      std::string skip;
      std::getline(in, skip);
    } else {
      break;
    }
    c = in.peek();
  }
  std::int64_t value = -1;
  if (!(in >> value) || value <= 0) throw FormatError(path + ": malformed PNM header");
  return value;
}

}  // namespace

RawImage read_pnm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open image '" + path + "'");
  std::string magic(2, '\0');
  in.read(magic.data(), 2);
  if (magic != "P6" && magic != "P5") throw FormatError(path + ": not a binary PPM/PGM file");
  RawImage image;
  image.channels = magic == "P6" ? 3 : 1;
  image.width = header_int(in, path);
  image.height = header_int(in, path);
  const auto maxval = header_int(in, path);
  if (maxval > 255) throw FormatError(path + ": only 8-bit images are supported");
  in.get();
  const auto n = static_cast<std::size_t>(image.height * image.width * image.channels);
  std::vector<unsigned char> bytes(n);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in.gcount()) != n) throw FormatError(path + ": truncated pixel data");
  image.pixels.resize(n);
  for (std::size_t i = 0; i < n; ++i) image.pixels[i] = static_cast<float>(bytes[i]) / static_cast<float>(maxval);
  return image;
}

void write_pnm(const std::string& path, const RawImage& image) {
  if (image.channels != 1 && image.channels != 3) throw DimensionError("write_pnm: 1 or 3 channels required");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write image '" + path + "'");
  out << (image.channels == 3 ? "P6" : "P5") << '\n' << image.width << ' ' << image.height << "\n255\n";
  std::vector<unsigned char> bytes(image.pixels.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    bytes[i] = static_cast<unsigned char>(std::lround(std::clamp(image.pixels[i], 0.0f, 1.0f) * 255.0f));
  }
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to '" + path + "'");
}

RawImage upscale_nearest(const RawImage& image, std::int64_t factor) {
  RawImage out{image.height * factor, image.width * factor, image.channels, {}};
  out.pixels.resize(static_cast<std::size_t>(out.height * out.width * out.channels));
  for (std::int64_t y = 0; y < out.height; ++y) {
    for (std::int64_t x = 0; x < out.width; ++x) {
      for (std::int64_t c = 0; c < out.channels; ++c) {
        out.pixels[static_cast<std::size_t>((y * out.width + x) * out.channels + c)] = image.at(y / factor, x / factor, c);
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> image_tensor(const RawImage& image) {
  return Tensor<T>::from({image.height, image.width, image.channels},
                         std::vector<T>(image.pixels.begin(), image.pixels.end()));
}

std::vector<std::pair<std::int64_t, std::int64_t>> pyramid_shapes(std::int64_t height, std::int64_t width,
                                                                  std::int64_t levels) {
  if (levels < 1) throw DimensionError("pyramid needs at least one level");
  const std::int64_t unit = std::int64_t{1} << (levels + 2);
  if (height <= 0 || width <= 0 || height % unit || width % unit) {
    throw DimensionError("image " + std::to_string(height) + "x" + std::to_string(width) + " is not divisible by " +
                         std::to_string(unit) + " for " + std::to_string(levels) + " pyramid levels");
  }
  std::vector<std::pair<std::int64_t, std::int64_t>> shapes;
  for (std::int64_t i = 1; i <= levels; ++i) shapes.emplace_back(height >> (i + 2), width >> (i + 2));
  return shapes;
}

template <typename T>
Tensor<T> ImagePyramid<T>::flatten() const {
  std::vector<Tensor<T>> rows;
  for (const auto& level : levels) rows.push_back(reshape(level, {level.dim(0) * level.dim(1), level.dim(2)}));
  return concat(rows, 0);
}

template <typename T>
PyramidEncoder<T>::PyramidEncoder(const PyramidConfig& config, ParamStore<T>& store, const std::string& prefix,
                                  Philox& rng)
    : config_(config) {
  const auto c = config.channels;
  const auto patch_in = 64 * config.image_channels;
  patch_w_ = store.add(prefix + "patch.w", Tensor<T>::randn({c, 8, 8, config.image_channels}, rng,
                                                           1.0 / std::sqrt(static_cast<double>(patch_in))));
  patch_b_ = store.add(prefix + "patch.b", Tensor<T>::zeros({c}));
  for (std::int64_t l = 1; l < config.levels; ++l) {
    const auto tag = prefix + "reduce" + std::to_string(l);
    reduce_w_.push_back(store.add(tag + ".w", Tensor<T>::randn({c, 2, 2, c}, rng, 1.0 / std::sqrt(4.0 * static_cast<double>(c)))));
    reduce_b_.push_back(store.add(tag + ".b", Tensor<T>::zeros({c})));
  }
}

template <typename T>
ImagePyramid<T> PyramidEncoder<T>::encode(const Tensor<T>& image) const {
  if (image.rank() != 3 || image.dim(2) != config_.image_channels) {
    throw DimensionError("encode_pyramid: expected [H, W, " + std::to_string(config_.image_channels) + "], got " +
                         to_string(image.shape()));
  }
  const auto shapes = pyramid_shapes(image.dim(0), image.dim(1), config_.levels);
  ImagePyramid<T> out;
  out.height = image.dim(0);
  out.width = image.dim(1);
  auto x = conv2d(reshape(image, {1, image.dim(0), image.dim(1), image.dim(2)}), patch_w_, patch_b_, 8, 0);
  for (std::int64_t l = 0; l < config_.levels; ++l) {
    if (l > 0) x = conv2d(x, reduce_w_[l - 1], reduce_b_[l - 1], 2, 0);
    out.levels.push_back(reshape(x, {shapes[l].first, shapes[l].second, config_.channels}));
  }
  return out;
}

template struct ImagePyramid<float>;
template struct ImagePyramid<double>;
template class PyramidEncoder<float>;
template class PyramidEncoder<double>;
template Tensor<float> image_tensor(const RawImage&);
template Tensor<double> image_tensor(const RawImage&);

}  // namespace mmi
