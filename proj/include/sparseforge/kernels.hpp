#ifndef SPARSEFORGE_KERNELS_HPP_
#define SPARSEFORGE_KERNELS_HPP_

// Raw loops shared by the differentiable ops and the sparse inference path.

#include <cstddef>
#include <limits>
#include <span>

#include "sparseforge/tensor.hpp"

namespace sparseforge::kernels {

struct ConvGeometry {
  std::size_t batch, channels, height, width;
  std::size_t filters, kernel_h, kernel_w;
  std::size_t stride, padding;
  std::size_t out_h, out_w;

  std::size_t patch() const { return channels * kernel_h * kernel_w; }
  std::size_t positions() const { return out_h * out_w; }
};

inline ConvGeometry conv_geometry(const Shape& input, const Shape& kernels,
                                  std::size_t stride, std::size_t padding) {
  if (input.size() != 4 || kernels.size() != 4) {
    throw ShapeError("conv2d expects NCHW input and FCkk kernels");
  }
  if (input[1] != kernels[1]) {
    throw ShapeError("conv2d channel mismatch: input " + shape_string(input) +
                     ", kernels " + shape_string(kernels));
  }
  if (stride == 0) throw ShapeError("conv2d stride must be positive");
  ConvGeometry g{input[0], input[1], input[2], input[3], kernels[0], kernels[2],
                 kernels[3], stride, padding, 0, 0};
  if (g.height + 2 * padding < g.kernel_h || g.width + 2 * padding < g.kernel_w) {
    throw ShapeError("conv2d kernel larger than padded input");
  }
  g.out_h = (g.height + 2 * padding - g.kernel_h) / stride + 1;
  g.out_w = (g.width + 2 * padding - g.kernel_w) / stride + 1;
  return g;
}

/// col is [patch x batch*positions], column n*positions + p.
template <typename T>
void im2col(const ConvGeometry& g, std::span<const T> input, std::span<T> col) {
  const std::size_t cols = g.batch * g.positions();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t i = 0; i < g.kernel_h; ++i) {
      for (std::size_t j = 0; j < g.kernel_w; ++j) {
        T* row = col.data() + ((c * g.kernel_h + i) * g.kernel_w + j) * cols;
        for (std::size_t n = 0; n < g.batch; ++n) {
          const T* plane = input.data() + (n * g.channels + c) * g.height * g.width;
          T* dst = row + n * g.positions();
          for (std::size_t oh = 0; oh < g.out_h; ++oh) {
            const long y = static_cast<long>(oh * g.stride + i) - static_cast<long>(g.padding);
            for (std::size_t ow = 0; ow < g.out_w; ++ow) {
              const long x = static_cast<long>(ow * g.stride + j) - static_cast<long>(g.padding);
              const bool inside = y >= 0 && x >= 0 && y < static_cast<long>(g.height) &&
                                  x < static_cast<long>(g.width);
              dst[oh * g.out_w + ow] = inside ? plane[y * g.width + x] : T{0};
            }
          }
        }
      }
    }
  }
}

/// Adjoint of im2col: scatters-and-adds col back into input.
template <typename T>
void col2im_add(const ConvGeometry& g, std::span<const T> col, std::span<T> input) {
  const std::size_t cols = g.batch * g.positions();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t i = 0; i < g.kernel_h; ++i) {
      for (std::size_t j = 0; j < g.kernel_w; ++j) {
        const T* row = col.data() + ((c * g.kernel_h + i) * g.kernel_w + j) * cols;
        for (std::size_t n = 0; n < g.batch; ++n) {
          T* plane = input.data() + (n * g.channels + c) * g.height * g.width;
          const T* src = row + n * g.positions();
          for (std::size_t oh = 0; oh < g.out_h; ++oh) {
            const long y = static_cast<long>(oh * g.stride + i) - static_cast<long>(g.padding);
            if (y < 0 || y >= static_cast<long>(g.height)) continue;
            for (std::size_t ow = 0; ow < g.out_w; ++ow) {
              const long x = static_cast<long>(ow * g.stride + j) - static_cast<long>(g.padding);
              if (x < 0 || x >= static_cast<long>(g.width)) continue;
              plane[y * g.width + x] += src[oh * g.out_w + ow];
            }
          }
        }
      }
    }
  }
}

struct PoolGeometry {
  std::size_t batch, channels, height, width, size, stride, out_h, out_w;
};

inline PoolGeometry pool_geometry(const Shape& input, std::size_t size,
                                  std::size_t stride) {
  if (input.size() != 4) throw ShapeError("max_pool2d expects NCHW input");
  if (size == 0 || stride == 0) throw ShapeError("pool size and stride must be positive");
  if (input[2] < size || input[3] < size) throw ShapeError("pool window larger than input");
  return {input[0], input[1], input[2], input[3], size, stride,
          (input[2] - size) / stride + 1, (input[3] - size) / stride + 1};
}

/// Writes pooled maxima and, if argmax is non-empty, the flat input index of
/// each winner.
template <typename T>
void max_pool(const PoolGeometry& g, std::span<const T> input, std::span<T> out,
              std::span<std::size_t> argmax) {
  std::size_t o = 0;
  for (std::size_t nc = 0; nc < g.batch * g.channels; ++nc) {
    const std::size_t base = nc * g.height * g.width;
    for (std::size_t oh = 0; oh < g.out_h; ++oh) {
      for (std::size_t ow = 0; ow < g.out_w; ++ow, ++o) {
        T best = -std::numeric_limits<T>::infinity();
        std::size_t best_at = base + oh * g.stride * g.width + ow * g.stride;
        for (std::size_t i = 0; i < g.size; ++i) {
          for (std::size_t j = 0; j < g.size; ++j) {
            const std::size_t at = base + (oh * g.stride + i) * g.width + ow * g.stride + j;
            if (input[at] > best) {
              best = input[at];
              best_at = at;
            }
          }
        }
        out[o] = best;
        if (!argmax.empty()) argmax[o] = best_at;
      }
    }
  }
}

}  // namespace sparseforge::kernels

#endif  // SPARSEFORGE_KERNELS_HPP_
