#ifndef SPARSEFORGE_TESTS_ORACLES_HPP_
#define SPARSEFORGE_TESTS_ORACLES_HPP_

// Reference implementations used as test oracles. They are written directly
// from the closed forms in extended precision and share no code with the
// library.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

namespace oracle {

inline long double sigmoid(long double z) {
  if (z >= 0) return 1.0L / (1.0L + std::exp(-z));
  const long double e = std::exp(z);
  return e / (1.0L + e);
}

inline long double relu(long double u) { return u > 0 ? u : 0.0L; }

inline long double theta(long double x, long double alpha, long double t) {
  return relu(x - t) + t * sigmoid(alpha * (x - t)) - relu(-x - t) - t * sigmoid(alpha * (-x - t));
}

inline long double theta_bar(long double x, long double t) { return std::fabs(x) >= t ? x : 0.0L; }

/// |a - b| / max(|a|, |b|, floor).
inline double rel_err(double a, double b, double floor = 1e-3) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

/// Central difference of f at x with step h.
template <typename F>
double central(F&& f, double x, double h) {
  return static_cast<double>((f(x + h) - f(x - h)) / (2.0 * h));
}

/// Nearest-rank p-quantile of |v|.
inline double quantile_abs(std::vector<double> v, double p) {
  if (p == 0.0) return 0.0;
  for (auto& x : v) x = std::abs(x);
  std::sort(v.begin(), v.end());
  const auto rank = static_cast<std::size_t>(std::ceil(p * static_cast<double>(v.size())));
  return v[std::max<std::size_t>(rank, 1) - 1];
}

inline void put_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<std::uint8_t>(v >> s));
}

/// IDX image file bytes: magic, count, rows, cols, pixels.
inline std::vector<std::uint8_t> idx_images(std::uint32_t count, std::uint32_t rows,
                                            std::uint32_t cols,
                                            const std::vector<std::uint8_t>& pixels,
                                            std::uint32_t magic = 0x00000803) {
  std::vector<std::uint8_t> out;
  put_be32(out, magic);
  put_be32(out, count);
  put_be32(out, rows);
  put_be32(out, cols);
  out.insert(out.end(), pixels.begin(), pixels.end());
  return out;
}

inline std::vector<std::uint8_t> idx_labels(const std::vector<std::uint8_t>& labels,
                                            std::uint32_t magic = 0x00000801,
                                            std::int64_t count = -1) {
  std::vector<std::uint8_t> out;
  put_be32(out, magic);
  put_be32(out, count < 0 ? static_cast<std::uint32_t>(labels.size())
                          : static_cast<std::uint32_t>(count));
  out.insert(out.end(), labels.begin(), labels.end());
  return out;
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("sparseforge_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace oracle

#endif  // SPARSEFORGE_TESTS_ORACLES_HPP_
