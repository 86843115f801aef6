#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <limits>

#include "sparseforge/data_io.hpp"
#include "sparseforge/errors.hpp"

namespace sparseforge {
namespace {

constexpr std::uint8_t kMagic[4] = {'S', 'P', 'F', 'G'};
constexpr std::uint8_t kTagDense = 1;
constexpr std::uint8_t kTagCsr = 2;

class Writer {
 public:
  void u8(std::uint8_t v) { out_.push_back(v); }

  void u32(std::uint64_t v) {
    if (v > std::numeric_limits<std::uint32_t>::max()) {
      throw FormatError(FormatError::Kind::kMalformed, "value does not fit in u32");
    }
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }

  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }

  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

  void str(const std::string& s) {
    u32(s.size());
    out_.insert(out_.end(), s.begin(), s.end());
  }

  void bytes(std::span<const std::uint8_t> b) { out_.insert(out_.end(), b.begin(), b.end()); }

  std::vector<std::uint8_t> finish() {
    u32(static_cast<std::uint32_t>(crc32(0L, out_.data(), static_cast<uInt>(out_.size()))));
    return std::move(out_);
  }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}

  std::uint8_t u8() { return take(1)[0]; }

  std::uint32_t u32() {
    const auto b = take(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t{b[i]} << (8 * i);
    return v;
  }

  std::uint64_t u64() {
    const auto b = take(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t{b[i]} << (8 * i);
    return v;
  }

  float f32() { return std::bit_cast<float>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }

  std::string str() {
    const std::size_t n = u32();
    const auto b = take(n);
    return {b.begin(), b.end()};
  }

  /// Element count checked against what is left, so a corrupt length cannot
  /// trigger a huge allocation.
  std::size_t count(std::size_t element_bytes) {
    const std::size_t n = u32();
    if (n > remaining() / element_bytes) malformed("length exceeds file size");
    return n;
  }

  std::size_t remaining() const { return in_.size() - pos_; }

  [[noreturn]] static void malformed(const std::string& what) {
    throw FormatError(FormatError::Kind::kMalformed, "model file: " + what);
  }

 private:
  std::span<const std::uint8_t> take(std::size_t n) {
    if (n > remaining()) malformed("unexpected end of data");
    auto s = in_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

void write_spec(Writer& w, const NetworkSpec& spec) {
  w.str(spec.name());
  w.u32(spec.input_shape().size());
  for (auto d : spec.input_shape()) w.u32(d);
  w.u32(spec.classes());
  w.u32(spec.layers().size());
  for (const auto& l : spec.layers()) {
    w.u8(static_cast<std::uint8_t>(l.kind));
    w.u8(l.prunable ? 1 : 0);
    w.u8(static_cast<std::uint8_t>(l.granularity));
    w.u8(0);
    w.u32(l.units);
    w.u32(l.kernel);
    w.u32(l.stride);
    w.u32(l.padding);
    w.str(l.name);
  }
}

NetworkSpec read_spec(Reader& r) {
  std::string name = r.str();
  Shape input(r.count(4));
  for (auto& d : input) d = r.u32();
  const std::size_t classes = r.u32();
  std::vector<LayerSpec> layers(r.count(20));
  for (auto& l : layers) {
    const std::uint8_t kind = r.u8();
    const std::uint8_t prunable = r.u8();
    const std::uint8_t granularity = r.u8();
    r.u8();
    if (kind > static_cast<std::uint8_t>(LayerKind::kRelu) || prunable > 1 || granularity > 1) {
      Reader::malformed("bad layer descriptor");
    }
    l.kind = static_cast<LayerKind>(kind);
    l.prunable = prunable == 1;
    l.granularity = static_cast<ThresholdGranularity>(granularity);
    l.units = r.u32();
    l.kernel = r.u32();
    l.stride = r.u32();
    l.padding = r.u32();
    l.name = r.str();
  }
  try {
    return NetworkSpec(std::move(name), std::move(input), classes, std::move(layers));
  } catch (const Error& e) {
    Reader::malformed(std::string("invalid network: ") + e.what());
  }
}

void write_tail(Writer& w, const std::vector<float>& bias, const std::vector<double>& thresholds) {
  w.u32(bias.size());
  for (float v : bias) w.f32(v);
  w.u32(thresholds.size());
  for (double v : thresholds) w.f64(v);
}

void read_tail(Reader& r, std::vector<float>& bias, std::vector<double>& thresholds) {
  bias.resize(r.count(4));
  for (auto& v : bias) v = r.f32();
  thresholds.resize(r.count(8));
  for (auto& v : thresholds) v = r.f64();
}

void write_provenance(Writer& w, const Provenance& p) {
  w.f64(p.alpha);
  w.f64(p.gamma);
  w.u64(p.seed);
  w.u64(p.config_hash);
}

Provenance read_provenance(Reader& r) {
  Provenance p;
  p.alpha = r.f64();
  p.gamma = r.f64();
  p.seed = r.u64();
  p.config_hash = r.u64();
  return p;
}

Writer begin(ModelKind kind) {
  Writer w;
  w.bytes(kMagic);
  w.u32(kModelFileVersion);
  w.u32(static_cast<std::uint32_t>(kind));
  return w;
}

std::pair<std::size_t, std::size_t> read_dims(Reader& r, std::uint8_t expected_tag,
                                              const ParamLayerInfo& info) {
  if (r.u8() != expected_tag) Reader::malformed(info.name + ": unexpected block tag");
  const std::size_t rows = r.u32();
  const std::size_t cols = r.u32();
  if (rows != info.rows || cols != info.cols) {
    Reader::malformed(info.name + ": dimensions do not match the network");
  }
  return {rows, cols};
}

DenseCheckpoint read_checkpoint(Reader& r, NetworkSpec spec) {
  Parameters<float> params;
  std::vector<std::vector<double>> thresholds;
  for (const auto& info : spec.param_layers()) {
    const auto [rows, cols] = read_dims(r, kTagDense, info);
    std::vector<float> w(rows * cols);
    if (w.size() > r.remaining() / 4) Reader::malformed("weights exceed file size");
    for (auto& v : w) v = r.f32();
    std::vector<float> bias;
    std::vector<double> t;
    read_tail(r, bias, t);
    if (bias.size() != info.bias_size) Reader::malformed(info.name + ": bias length");
    if (t.size() != (info.prunable ? info.threshold_count : 0)) {
      Reader::malformed(info.name + ": threshold count");
    }
    params.weights.emplace_back(info.weight_shape, std::move(w));
    params.biases.emplace_back(Shape{bias.size()}, std::move(bias));
    thresholds.push_back(std::move(t));
  }
  Provenance p = read_provenance(r);
  return DenseCheckpoint{std::move(spec), std::move(params), std::move(thresholds), p};
}

SparseModel read_sparse(Reader& r, NetworkSpec spec) {
  std::vector<SparseLayer> layers;
  for (const auto& info : spec.param_layers()) {
    SparseLayer l;
    l.name = info.name;
    std::tie(l.rows, l.cols) = read_dims(r, kTagCsr, info);
    const std::size_t nnz = r.count(8);
    if (l.rows + 1 > r.remaining() / 4) Reader::malformed("row offsets exceed file size");
    l.row_offsets.resize(l.rows + 1);
    for (auto& v : l.row_offsets) v = r.u32();
    l.col_indices.resize(nnz);
    for (auto& v : l.col_indices) v = r.u32();
    l.values.resize(nnz);
    for (auto& v : l.values) v = r.f32();
    read_tail(r, l.bias, l.thresholds);
    layers.push_back(std::move(l));
  }
  Provenance p = read_provenance(r);
  SparseModel m{std::move(spec), std::move(layers), p};
  try {
    m.validate();
  } catch (const Error& e) {
    Reader::malformed(e.what());
  }
  return m;
}

}  // namespace

std::vector<std::uint8_t> encode_model(const SparseModel& model) {
  model.validate();
  Writer w = begin(ModelKind::kSparseModel);
  write_spec(w, model.spec);
  for (const auto& l : model.layers) {
    w.u8(kTagCsr);
    w.u32(l.rows);
    w.u32(l.cols);
    w.u32(l.nnz());
    for (auto v : l.row_offsets) w.u32(v);
    for (auto v : l.col_indices) w.u32(v);
    for (auto v : l.values) w.f32(v);
    write_tail(w, l.bias, l.thresholds);
  }
  write_provenance(w, model.provenance);
  return w.finish();
}

std::vector<std::uint8_t> encode_model(const DenseCheckpoint& checkpoint) {
  const auto& infos = checkpoint.spec.param_layers();
  if (checkpoint.params.weights.size() != infos.size() ||
      checkpoint.params.biases.size() != infos.size() ||
      checkpoint.thresholds.size() != infos.size()) {
    throw ShapeError("checkpoint does not match its network");
  }
  Writer w = begin(ModelKind::kDenseCheckpoint);
  write_spec(w, checkpoint.spec);
  for (std::size_t i = 0; i < infos.size(); ++i) {
    const auto& weights = checkpoint.params.weights[i];
    if (weights.size() != infos[i].rows * infos[i].cols) {
      throw ShapeError(infos[i].name + ": weight size mismatch");
    }
    w.u8(kTagDense);
    w.u32(infos[i].rows);
    w.u32(infos[i].cols);
    for (float v : weights.data()) w.f32(v);
    write_tail(w, checkpoint.params.biases[i].storage(), checkpoint.thresholds[i]);
  }
  write_provenance(w, checkpoint.provenance);
  return w.finish();
}

std::variant<DenseCheckpoint, SparseModel> decode_model(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw FormatError(FormatError::Kind::kBadMagic, "not a model file");
  }
  if (bytes.size() < 16) throw FormatError(FormatError::Kind::kMalformed, "model file truncated");
  const auto body = bytes.first(bytes.size() - 4);
  Reader crc_reader(bytes.last(4));
  const std::uint32_t stored = crc_reader.u32();
  const auto actual =
      static_cast<std::uint32_t>(crc32(0L, body.data(), static_cast<uInt>(body.size())));
  if (stored != actual) {
    throw FormatError(FormatError::Kind::kChecksumMismatch, "model file checksum mismatch");
  }
  Reader hdr(body.subspan(4));
  const std::uint32_t version = hdr.u32();
  if (version != kModelFileVersion) {
    throw FormatError(FormatError::Kind::kUnsupportedVersion,
                      "unsupported model file version " + std::to_string(version));
  }
  const std::uint32_t kind = hdr.u32();
  NetworkSpec spec = read_spec(hdr);
  std::variant<DenseCheckpoint, SparseModel> out = [&]() -> std::variant<DenseCheckpoint, SparseModel> {
    if (kind == static_cast<std::uint32_t>(ModelKind::kDenseCheckpoint)) {
      return read_checkpoint(hdr, std::move(spec));
    }
    if (kind == static_cast<std::uint32_t>(ModelKind::kSparseModel)) {
      return read_sparse(hdr, std::move(spec));
    }
    Reader::malformed("unknown model kind " + std::to_string(kind));
  }();
  if (hdr.remaining() != 0) Reader::malformed("trailing bytes");
  return out;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(FormatError::Kind::kIo, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError(FormatError::Kind::kIo, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError(FormatError::Kind::kIo, "write failed for " + path.string());
}

void save_model(const SparseModel& model, const std::filesystem::path& path) {
  write_file(path, encode_model(model));
}

void save_model(const DenseCheckpoint& checkpoint, const std::filesystem::path& path) {
  write_file(path, encode_model(checkpoint));
}

std::variant<DenseCheckpoint, SparseModel> load_model(const std::filesystem::path& path) {
  return decode_model(read_file(path));
}

SparseModel load_sparse_model(const std::filesystem::path& path) {
  auto m = load_model(path);
  if (auto* s = std::get_if<SparseModel>(&m)) return std::move(*s);
  throw FormatError(FormatError::Kind::kMalformed, path.string() + " is not a pruned model");
}

DenseCheckpoint load_checkpoint(const std::filesystem::path& path) {
  auto m = load_model(path);
  if (auto* c = std::get_if<DenseCheckpoint>(&m)) return std::move(*c);
  throw FormatError(FormatError::Kind::kMalformed, path.string() + " is not a dense checkpoint");
}

}  // namespace sparseforge
