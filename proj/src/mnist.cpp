#include <algorithm>
#include <cstdint>
#include <fstream>

#include "sparseforge/data_io.hpp"
#include "sparseforge/errors.hpp"

namespace sparseforge {
namespace {

std::uint32_t read_be32(std::span<const std::uint8_t> bytes, std::size_t at) {
  return (std::uint32_t{bytes[at]} << 24) | (std::uint32_t{bytes[at + 1]} << 16) |
         (std::uint32_t{bytes[at + 2]} << 8) | std::uint32_t{bytes[at + 3]};
}

std::vector<std::uint8_t> read_idx(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(DataError::Kind::kMissingFile, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void check_header(const std::vector<std::uint8_t>& bytes, std::size_t header,
                  std::uint32_t magic, const std::filesystem::path& path) {
  if (bytes.size() < 4) throw DataError(DataError::Kind::kTruncated, path.string() + ": no header");
  if (read_be32(bytes, 0) != magic) {
    throw DataError(DataError::Kind::kBadMagic, path.string() + ": unexpected IDX magic");
  }
  if (bytes.size() < header) {
    throw DataError(DataError::Kind::kTruncated, path.string() + ": header truncated");
  }
}

}  // namespace

Dataset Dataset::slice(std::size_t begin, std::size_t count) const {
  if (begin + count > size() || count == 0) throw ShapeError("dataset slice out of range");
  const std::size_t per = images.size() / size();
  Shape s = images.shape();
  s[0] = count;
  std::vector<float> px(images.storage().begin() + begin * per,
                        images.storage().begin() + (begin + count) * per);
  return Dataset{Tensor<float>(std::move(s), std::move(px)),
                 std::vector<int>(labels.begin() + begin, labels.begin() + begin + count), split};
}

Tensor<float> read_idx_images(const std::filesystem::path& path) {
  const auto bytes = read_idx(path);
  check_header(bytes, 16, kIdxImageMagic, path);
  const std::size_t count = read_be32(bytes, 4);
  const std::size_t rows = read_be32(bytes, 8);
  const std::size_t cols = read_be32(bytes, 12);
  if (rows != kMnistSide || cols != kMnistSide) {
    throw DataError(DataError::Kind::kBadDimensions,
                    path.string() + ": images are " + std::to_string(rows) + "x" +
                        std::to_string(cols) + ", expected 28x28");
  }
  if (count == 0) throw DataError(DataError::Kind::kEmpty, path.string() + ": no images");
  const std::size_t pixels = count * rows * cols;
  if (bytes.size() < 16 + pixels) {
    throw DataError(DataError::Kind::kTruncated, path.string() + ": pixel data truncated");
  }
  std::vector<float> data(pixels);
  std::transform(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(pixels),
                 data.begin(), [](std::uint8_t v) { return static_cast<float>(v) / 255.0f; });
  return Tensor<float>({count, 1, rows, cols}, std::move(data));
}

std::vector<int> read_idx_labels(const std::filesystem::path& path) {
  const auto bytes = read_idx(path);
  check_header(bytes, 8, kIdxLabelMagic, path);
  const std::size_t count = read_be32(bytes, 4);
  if (count == 0) throw DataError(DataError::Kind::kEmpty, path.string() + ": no labels");
  if (bytes.size() < 8 + count) {
    throw DataError(DataError::Kind::kTruncated, path.string() + ": label data truncated");
  }
  std::vector<int> labels(count);
  for (std::size_t i = 0; i < count; ++i) {
    const int v = bytes[8 + i];
    if (v > 9) {
      throw DataError(DataError::Kind::kBadLabel,
                      path.string() + ": label " + std::to_string(v) + " at " + std::to_string(i));
    }
    labels[i] = v;
  }
  return labels;
}

Dataset load_mnist_split(const std::filesystem::path& dir, const std::string& prefix) {
  Dataset d;
  d.images = read_idx_images(dir / (prefix + "-images-idx3-ubyte"));
  d.labels = read_idx_labels(dir / (prefix + "-labels-idx1-ubyte"));
  d.split = prefix;
  if (d.images.dim(0) != d.labels.size()) {
    throw DataError(DataError::Kind::kCountMismatch,
                    prefix + ": " + std::to_string(d.images.dim(0)) + " images but " +
                        std::to_string(d.labels.size()) + " labels");
  }
  return d;
}

MnistData load_mnist(const std::filesystem::path& dir) {
  return {load_mnist_split(dir, "train"), load_mnist_split(dir, "t10k")};
}

}  // namespace sparseforge
