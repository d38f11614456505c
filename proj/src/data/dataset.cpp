#include "knfu/data/dataset.hpp"

#include <zlib.h>

#include <cmath>
#include <fstream>
#include <iterator>
#include <limits>
#include <random>
#include <string>

#include "knfu/errors.hpp"
#include "knfu/rng.hpp"

namespace knfu::data {

namespace {

constexpr std::uint32_t kIdxImages = 0x00000803;
constexpr std::uint32_t kIdxLabels = 0x00000801;
constexpr std::size_t kCifarRecord = 1 + 3 * 32 * 32;

std::uint32_t read_be32(std::span<const std::uint8_t> bytes, std::size_t offset) {
  if (offset + 4 > bytes.size())
    throw ParseError("truncated IDX header", bytes.size());
  return (std::uint32_t{bytes[offset]} << 24) |
         (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

std::vector<std::uint8_t> gunzip(std::span<const std::uint8_t> in,
                                 const std::string& path) {
  z_stream zs{};
  if (inflateInit2(&zs, 16 + MAX_WBITS) != Z_OK)
    throw IoError(path, "cannot initialise gzip decoder");
  zs.next_in = const_cast<Bytef*>(in.data());
  zs.avail_in = static_cast<uInt>(in.size());
  std::vector<std::uint8_t> out;
  std::uint8_t chunk[1 << 16];
  int rc = Z_OK;
  while (rc != Z_STREAM_END) {
    zs.next_out = chunk;
    zs.avail_out = sizeof(chunk);
    rc = inflate(&zs, Z_NO_FLUSH);
    if (rc != Z_OK && rc != Z_STREAM_END) {
      inflateEnd(&zs);
      throw IoError(path, "corrupt gzip stream");
    }
    out.insert(out.end(), chunk, chunk + (sizeof(chunk) - zs.avail_out));
    if (rc == Z_OK && zs.avail_in == 0 && zs.avail_out != 0) {
      inflateEnd(&zs);
      throw IoError(path, "truncated gzip stream");
    }
  }
  inflateEnd(&zs);
  return out;
}

}  // namespace

LabeledSet LabeledSet::make(nn::Shape3 shape, std::vector<double> values,
                            std::vector<int> labels, std::size_t num_classes) {
  LabeledSet s;
  s.inputs = nn::Tensor({labels.size(), shape.channels, shape.height, shape.width},
                        std::move(values));
  s.labels = std::move(labels);
  s.num_classes = num_classes;
  s.validate();
  return s;
}

nn::Shape3 LabeledSet::sample_shape() const {
  const auto& sh = inputs.shape();
  if (sh.size() != 4) return {1, 1, inputs.row_size()};
  return {sh[1], sh[2], sh[3]};
}

LabeledSet LabeledSet::subset(std::span<const std::size_t> indices) const {
  const auto shape = sample_shape();
  const std::size_t n = shape.size();
  std::vector<double> values(indices.size() * n);
  std::vector<int> out_labels(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= size()) throw InputError("subset index out of range");
    const auto row = inputs.row(indices[i]);
    std::copy(row.begin(), row.end(),
              values.begin() + static_cast<std::ptrdiff_t>(i * n));
    out_labels[i] = labels[indices[i]];
  }
  return make(shape, std::move(values), std::move(out_labels), num_classes);
}

std::vector<std::size_t> LabeledSet::class_histogram() const {
  std::vector<std::size_t> h(num_classes, 0);
  for (int y : labels) ++h[static_cast<std::size_t>(y)];
  return h;
}

void LabeledSet::validate() const {
  if (inputs.rows() != labels.size())
    throw InputError("input count " + std::to_string(inputs.rows()) +
                     " differs from label count " + std::to_string(labels.size()));
  for (int y : labels)
    if (y < 0 || static_cast<std::size_t>(y) >= num_classes)
      throw InputError("label " + std::to_string(y) + " outside [0, " +
                       std::to_string(num_classes) + ")");
}

IdxData parse_idx(std::span<const std::uint8_t> bytes) {
  const std::uint32_t magic = read_be32(bytes, 0);
  if (magic == kIdxLabels) {
    const std::size_t count = read_be32(bytes, 4);
    constexpr std::size_t header = 8;
    if (bytes.size() < header + count)
      throw ParseError("truncated IDX label payload: expected " +
                           std::to_string(count) + " labels",
                       bytes.size());
    IdxLabels out;
    out.labels.assign(bytes.begin() + header, bytes.begin() + header + count);
    return out;
  }
  if (magic == kIdxImages) {
    const std::size_t count = read_be32(bytes, 4);
    IdxImages out;
    out.rows = read_be32(bytes, 8);
    out.cols = read_be32(bytes, 12);
    constexpr std::size_t header = 16;
    const std::size_t payload = count * out.rows * out.cols;
    if (bytes.size() < header + payload)
      throw ParseError("truncated IDX image payload: expected " +
                           std::to_string(payload) + " pixels",
                       bytes.size());
    out.pixels.resize(payload);
    for (std::size_t i = 0; i < payload; ++i)
      out.pixels[i] = static_cast<double>(bytes[header + i]) / 255.0;
    return out;
  }
  throw ParseError("bad IDX magic", 0);
}

LabeledSet parse_cifar10(std::span<const std::uint8_t> bytes) {
  if (bytes.size() % kCifarRecord != 0)
    throw ParseError("CIFAR-10 payload length " + std::to_string(bytes.size()) +
                         " is not a multiple of 3073",
                     bytes.size() - bytes.size() % kCifarRecord);
  const std::size_t n = bytes.size() / kCifarRecord;
  std::vector<double> values(n * (kCifarRecord - 1));
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t off = i * kCifarRecord;
    if (bytes[off] >= 10)
      throw ParseError("CIFAR-10 label " + std::to_string(bytes[off]) +
                           " out of range",
                       off);
    labels[i] = bytes[off];
    for (std::size_t j = 1; j < kCifarRecord; ++j)
      values[i * (kCifarRecord - 1) + j - 1] =
          static_cast<double>(bytes[off + j]) / 255.0;
  }
  return LabeledSet::make({3, 32, 32}, std::move(values), std::move(labels), 10);
}

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError(path.string(), "cannot open for reading");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                  std::istreambuf_iterator<char>());
  if (bytes.size() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b)
    return gunzip(bytes, path.string());
  return bytes;
}

LabeledSet load_mnist(const std::filesystem::path& images,
                      const std::filesystem::path& labels) {
  auto img = parse_idx(read_bytes(images));
  auto lab = parse_idx(read_bytes(labels));
  auto* pixels = std::get_if<IdxImages>(&img);
  auto* ys = std::get_if<IdxLabels>(&lab);
  if (!pixels) throw InputError(images.string() + " is not an IDX image file");
  if (!ys) throw InputError(labels.string() + " is not an IDX label file");
  if (pixels->count() != ys->labels.size())
    throw InputError("MNIST image count " + std::to_string(pixels->count()) +
                     " differs from label count " +
                     std::to_string(ys->labels.size()));
  return LabeledSet::make({1, pixels->rows, pixels->cols},
                          std::move(pixels->pixels), std::move(ys->labels), 10);
}

LabeledSet load_cifar10(std::span<const std::filesystem::path> batches) {
  std::vector<std::uint8_t> all;
  for (const auto& p : batches) {
    auto b = read_bytes(p);
    all.insert(all.end(), b.begin(), b.end());
  }
  return parse_cifar10(all);
}

LabeledSet synth_dataset(std::size_t num_classes, std::size_t per_class,
                         std::size_t input_dim, std::uint64_t seed,
                         double separation) {
  if (num_classes < 2) throw InputError("synthetic dataset needs at least 2 classes");
  if (input_dim == 0) throw InputError("synthetic input dimension must be positive");

  // Orthogonal means at distance 2 * separation apart when dim >= C;
  // otherwise fixed pseudo-random directions rescaled to the same minimum gap.
  std::vector<std::vector<double>> means(num_classes,
                                         std::vector<double>(input_dim, 0.0));
  if (input_dim >= num_classes) {
    for (std::size_t c = 0; c < num_classes; ++c)
      means[c][c] = separation * std::sqrt(2.0);
  } else {
    Rng mrng = make_rng(0x5eed, {num_classes, input_dim});
    std::normal_distribution<double> g(0.0, 1.0);
    for (auto& m : means)
      for (auto& v : m) v = g(mrng);
    double min_gap = std::numeric_limits<double>::infinity();
    for (std::size_t a = 0; a < num_classes; ++a)
      for (std::size_t b = a + 1; b < num_classes; ++b) {
        double d = 0.0;
        for (std::size_t k = 0; k < input_dim; ++k)
          d += (means[a][k] - means[b][k]) * (means[a][k] - means[b][k]);
        min_gap = std::min(min_gap, std::sqrt(d));
      }
    const double scale = min_gap > 0.0 ? 2.0 * separation / min_gap : 1.0;
    for (auto& m : means)
      for (auto& v : m) v *= scale;
  }

  Rng rng = make_rng(seed, {0xda7a});
  std::normal_distribution<double> noise(0.0, 1.0);
  const std::size_t n = num_classes * per_class;
  std::vector<double> values(n * input_dim);
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t c = i % num_classes;
    labels[i] = static_cast<int>(c);
    for (std::size_t k = 0; k < input_dim; ++k)
      values[i * input_dim + k] = means[c][k] + noise(rng);
  }
  return LabeledSet::make({1, 1, input_dim}, std::move(values), std::move(labels),
                          num_classes);
}

}  // namespace knfu::data
