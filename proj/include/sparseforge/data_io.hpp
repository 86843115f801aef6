#ifndef SPARSEFORGE_DATA_IO_HPP_
#define SPARSEFORGE_DATA_IO_HPP_

// MNIST ingestion and model persistence.
//
// IDX (big-endian, as distributed):
//   images: u32 magic 0x00000803, u32 count, u32 rows (28), u32 cols (28),
//           count*rows*cols u8 pixels
//   labels: u32 magic 0x00000801, u32 count, count u8 labels
//
// SPFG model file (little-endian throughout):
//   char[4] "SPFG", u32 version (1), u32 kind (1 dense checkpoint, 2 sparse)
//   spec block:
//     u32 name_len, name bytes
//     u32 input_rank, u32 input_dims[input_rank], u32 classes, u32 layer_count
//     per layer: u8 kind, u8 prunable, u8 granularity, u8 reserved (0),
//                u32 units, u32 kernel, u32 stride, u32 padding,
//                u32 name_len, name bytes
//   one block per weighted layer, in layer order:
//     u8 tag (1 dense, 2 csr), u32 rows, u32 cols
//     dense: f32 weights[rows*cols]
//     csr:   u32 nnz, u32 row_offsets[rows+1], u32 col_indices[nnz], f32 values[nnz]
//     u32 bias_len, f32 bias[bias_len]
//     u32 threshold_count, f64 thresholds[threshold_count]
//   provenance block: f64 alpha, f64 gamma, u64 seed, u64 config_hash
//   u32 CRC-32 (IEEE, as zlib) of every preceding byte

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "sparseforge/pruning_export.hpp"
#include "sparseforge/tensor.hpp"

namespace sparseforge {

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;
inline constexpr std::size_t kMnistSide = 28;

struct Dataset {
  Tensor<float> images;     // [N x 1 x 28 x 28], pixels scaled to [0, 1]
  std::vector<int> labels;  // N labels in [0, 10)
  std::string split;

  std::size_t size() const noexcept { return labels.size(); }

  /// Copies samples [begin, begin + count).
  Dataset slice(std::size_t begin, std::size_t count) const;
};

Tensor<float> read_idx_images(const std::filesystem::path& path);
std::vector<int> read_idx_labels(const std::filesystem::path& path);

/// Reads <dir>/<prefix>-images-idx3-ubyte and <dir>/<prefix>-labels-idx1-ubyte.
Dataset load_mnist_split(const std::filesystem::path& dir, const std::string& prefix);

struct MnistData {
  Dataset train;
  Dataset test;
};

/// Loads the "train" and "t10k" splits.
MnistData load_mnist(const std::filesystem::path& dir);

inline constexpr std::uint32_t kModelFileVersion = 1;

enum class ModelKind : std::uint32_t {
  kDenseCheckpoint = 1,
  kSparseModel = 2,
};

std::vector<std::uint8_t> encode_model(const SparseModel& model);
std::vector<std::uint8_t> encode_model(const DenseCheckpoint& checkpoint);

/// Validates magic, checksum and version before parsing.
std::variant<DenseCheckpoint, SparseModel> decode_model(std::span<const std::uint8_t> bytes);

void save_model(const SparseModel& model, const std::filesystem::path& path);
void save_model(const DenseCheckpoint& checkpoint, const std::filesystem::path& path);

std::variant<DenseCheckpoint, SparseModel> load_model(const std::filesystem::path& path);
SparseModel load_sparse_model(const std::filesystem::path& path);
DenseCheckpoint load_checkpoint(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace sparseforge

#endif  // SPARSEFORGE_DATA_IO_HPP_
