#include "dasvit/data.hpp"

#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "dasvit/errors.hpp"
#include "dasvit/rng.hpp"

namespace dasvit {

namespace fs = std::filesystem;

void Dataset::validate() const {
  if (!images.defined() || images.rank() != 4) throw SchemaError("dataset: images must be [M,H,W,C]");
  if (images.dim(0) != labels.size()) {
    throw SchemaError("dataset: " + std::to_string(images.dim(0)) + " images but " +
                      std::to_string(labels.size()) + " labels");
  }
  for (int l : labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= classes) {
      throw SchemaError("dataset: label " + std::to_string(l) + " outside [0, " +
                        std::to_string(classes) + ")");
    }
  }
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  Batch b = make_batch(*this, indices);
  return {b.images, std::move(b.labels), classes};
}

Dataset make_synthetic(const SyntheticConfig& cfg) {
  if (cfg.classes == 0 || cfg.per_class == 0 || cfg.image == 0 || cfg.channels == 0) {
    throw ConfigError("synthetic data: classes, per_class, image and channels must be positive");
  }
  const std::size_t m = cfg.classes * cfg.per_class;
  const std::size_t side = cfg.image;
  const double center = 0.5 * static_cast<double>(side - 1);
  const double radius = 0.25 * static_cast<double>(side);
  const double sigma = std::max(0.75, static_cast<double>(side) / 8.0);
  Rng rng(derive_seed(cfg.seed, 0x5917));
  Dataset d;
  d.classes = cfg.classes;
  d.labels.resize(m);
  std::vector<double> pixels(m * side * side * cfg.channels);
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t c = i % cfg.classes;
    d.labels[i] = static_cast<int>(c);
    const double angle = 2.0 * std::numbers::pi * static_cast<double>(c) / static_cast<double>(cfg.classes);
    const double cy = center + radius * std::sin(angle);
    const double cx = center + radius * std::cos(angle);
    for (std::size_t y = 0; y < side; ++y) {
      for (std::size_t x = 0; x < side; ++x) {
        const double dy = static_cast<double>(y) - cy;
        const double dx = static_cast<double>(x) - cx;
        const double blob = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
        for (std::size_t ch = 0; ch < cfg.channels; ++ch) {
          double v = blob;
          if (cfg.noise > 0) v += rng.normal(0.0, cfg.noise);
          pixels[((i * side + y) * side + x) * cfg.channels + ch] = std::clamp(v, 0.0, 1.0);
        }
      }
    }
  }
  d.images = Tensor(Shape{m, side, side, cfg.channels}, std::move(pixels));
  return d;
}

Dataset load_cifar10_batch(const fs::path& path, std::size_t expected_records) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open CIFAR-10 batch " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.empty() || bytes.size() % kCifarRecordBytes != 0) {
    throw IoError("CIFAR-10 batch " + path.string() + ": size " + std::to_string(bytes.size()) +
                  " is not a whole number of " + std::to_string(kCifarRecordBytes) + "-byte records");
  }
  const std::size_t records = bytes.size() / kCifarRecordBytes;
  if (expected_records != 0 && records != expected_records) {
    throw IoError("CIFAR-10 batch " + path.string() + ": expected " +
                  std::to_string(expected_records) + " records, found " + std::to_string(records));
  }
  constexpr std::size_t plane = kCifarSide * kCifarSide;
  Dataset d;
  d.classes = 10;
  d.labels.resize(records);
  std::vector<double> pixels(records * plane * 3);
  for (std::size_t r = 0; r < records; ++r) {
    const auto* rec = reinterpret_cast<const unsigned char*>(bytes.data() + r * kCifarRecordBytes);
    if (rec[0] >= 10) {
      throw IoError("CIFAR-10 batch " + path.string() + ": record " + std::to_string(r) +
                    " has label " + std::to_string(rec[0]));
    }
    d.labels[r] = rec[0];
    for (std::size_t p = 0; p < plane; ++p)
      for (std::size_t ch = 0; ch < 3; ++ch)
        pixels[(r * plane + p) * 3 + ch] = static_cast<double>(rec[1 + ch * plane + p]) / 255.0;
  }
  d.images = Tensor(Shape{records, kCifarSide, kCifarSide, 3}, std::move(pixels));
  return d;
}

namespace {
Dataset concat_datasets(const std::vector<Dataset>& parts) {
  std::vector<double> pixels;
  Dataset out;
  out.classes = parts.front().classes;
  for (const auto& p : parts) {
    pixels.insert(pixels.end(), p.images.data().begin(), p.images.data().end());
    out.labels.insert(out.labels.end(), p.labels.begin(), p.labels.end());
  }
  Shape shape = parts.front().images.shape();
  shape[0] = out.labels.size();
  out.images = Tensor(shape, std::move(pixels));
  return out;
}
}  // namespace

Split load_cifar10(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError("CIFAR-10 directory not found: " + dir.string());
  std::vector<Dataset> train;
  for (int i = 1; i <= 5; ++i) {
    train.push_back(load_cifar10_batch(dir / ("data_batch_" + std::to_string(i) + ".bin"),
                                       kCifarRecordsPerFile));
  }
  return {concat_datasets(train), load_cifar10_batch(dir / "test_batch.bin", kCifarRecordsPerFile)};
}

ChannelStats channel_stats(const Dataset& d) {
  const std::size_t c = d.channels();
  ChannelStats s{std::vector<double>(c, 0.0), std::vector<double>(c, 0.0)};
  const auto px = d.images.data();
  const double count = static_cast<double>(px.size() / c);
  for (std::size_t i = 0; i < px.size(); ++i) s.mean[i % c] += px[i];
  for (auto& m : s.mean) m /= count;
  for (std::size_t i = 0; i < px.size(); ++i) {
    const double diff = px[i] - s.mean[i % c];
    s.std[i % c] += diff * diff;
  }
  for (auto& v : s.std) v = std::max(std::sqrt(v / count), 1e-8);
  return s;
}

namespace {
void check_stats(const Dataset& d, const ChannelStats& s) {
  if (s.mean.size() != d.channels() || s.std.size() != d.channels()) {
    throw ConfigError("normalization: expected " + std::to_string(d.channels()) +
                      " channel constants");
  }
  for (double v : s.std)
    if (!(v > 0)) throw ConfigError("normalization: std must be positive");
}
}  // namespace

void normalize(Dataset& d, const ChannelStats& s) {
  check_stats(d, s);
  const std::size_t c = d.channels();
  auto px = d.images.mutable_data();
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = (px[i] - s.mean[i % c]) / s.std[i % c];
}

void denormalize(Dataset& d, const ChannelStats& s) {
  check_stats(d, s);
  const std::size_t c = d.channels();
  auto px = d.images.mutable_data();
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = px[i] * s.std[i % c] + s.mean[i % c];
}

Tensor resize_images(const Tensor& images, std::size_t size, ResizeMode mode) {
  if (images.rank() != 4 || images.dim(1) != images.dim(2) || size == 0) {
    throw ShapeError("resize: expected square [B,H,W,C] images, got " + shape_str(images.shape()));
  }
  const std::size_t batch = images.dim(0), in = images.dim(1), chans = images.dim(3);
  const auto src = images.data();
  std::vector<double> out(batch * size * size * chans);
  const double ratio = static_cast<double>(in) / static_cast<double>(size);
  auto at = [&](std::size_t b, std::size_t y, std::size_t x, std::size_t c) {
    return src[((b * in + y) * in + x) * chans + c];
  };
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t y = 0; y < size; ++y) {
      for (std::size_t x = 0; x < size; ++x) {
        for (std::size_t c = 0; c < chans; ++c) {
          double v;
          if (mode == ResizeMode::Nearest) {
            const auto sy = std::min(in - 1, static_cast<std::size_t>((static_cast<double>(y) + 0.5) * ratio));
            const auto sx = std::min(in - 1, static_cast<std::size_t>((static_cast<double>(x) + 0.5) * ratio));
            v = at(b, sy, sx, c);
          } else {
            // Half-pixel centres, edge-clamped.
            const double fy = std::clamp((static_cast<double>(y) + 0.5) * ratio - 0.5, 0.0, static_cast<double>(in - 1));
            const double fx = std::clamp((static_cast<double>(x) + 0.5) * ratio - 0.5, 0.0, static_cast<double>(in - 1));
            const auto y0 = static_cast<std::size_t>(fy), x0 = static_cast<std::size_t>(fx);
            const std::size_t y1 = std::min(y0 + 1, in - 1), x1 = std::min(x0 + 1, in - 1);
            const double wy = fy - static_cast<double>(y0), wx = fx - static_cast<double>(x0);
            v = (1 - wy) * ((1 - wx) * at(b, y0, x0, c) + wx * at(b, y0, x1, c)) +
                wy * ((1 - wx) * at(b, y1, x0, c) + wx * at(b, y1, x1, c));
          }
          out[((b * size + y) * size + x) * chans + c] = v;
        }
      }
    }
  }
  return Tensor(Shape{batch, size, size, chans}, std::move(out));
}

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(
    std::size_t n, double first_fraction, std::uint64_t seed) {
  if (!(first_fraction > 0.0 && first_fraction < 1.0)) {
    throw ConfigError("split fraction must lie in (0, 1)");
  }
  Rng rng(seed);
  auto perm = rng.permutation(n);
  const auto cut = static_cast<std::size_t>(std::floor(first_fraction * static_cast<double>(n)));
  std::vector<std::size_t> a(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(cut));
  std::vector<std::size_t> b(perm.begin() + static_cast<std::ptrdiff_t>(cut), perm.end());
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  return {std::move(a), std::move(b)};
}

std::vector<std::vector<std::size_t>> epoch_batches(std::span<const std::size_t> indices,
                                                    const BatchPlan& plan, std::uint64_t seed) {
  if (plan.batch_size == 0) throw ConfigError("batch size must be positive");
  std::vector<std::size_t> order(indices.begin(), indices.end());
  Rng rng(seed);
  rng.shuffle(std::span<std::size_t>(order));
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t i = 0; i < order.size(); i += plan.batch_size) {
    const std::size_t end = std::min(order.size(), i + plan.batch_size);
    if (plan.drop_last && end - i < plan.batch_size) break;
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                         order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return batches;
}

Batch make_batch(const Dataset& d, std::span<const std::size_t> indices) {
  Shape shape = d.images.shape();
  const std::size_t per = d.images.numel() / shape[0];
  shape[0] = indices.size();
  std::vector<double> pixels(indices.size() * per);
  Batch b;
  b.labels.reserve(indices.size());
  const auto src = d.images.data();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= d.size()) throw ShapeError("batch: sample index out of range");
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(indices[i] * per), per,
                pixels.begin() + static_cast<std::ptrdiff_t>(i * per));
    b.labels.push_back(d.labels[indices[i]]);
  }
  b.images = Tensor(shape, std::move(pixels));
  return b;
}

double topk_accuracy(const Tensor& logits, std::span<const int> labels, std::size_t k) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
    throw ShapeError("topk: logits " + shape_str(logits.shape()) + " do not match " +
                     std::to_string(labels.size()) + " labels");
  }
  if (labels.empty()) return 0.0;
  const std::size_t classes = logits.dim(1);
  std::size_t hits = 0;
  for (std::size_t r = 0; r < labels.size(); ++r) {
    const auto row = logits.data().subspan(r * classes, classes);
    const auto label = static_cast<std::size_t>(labels[r]);
    std::size_t rank = 0;
    for (std::size_t c = 0; c < classes; ++c) {
      if (row[c] > row[label] || (row[c] == row[label] && c < label)) ++rank;
    }
    hits += rank < k;
  }
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

MetricsWriter::MetricsWriter(const fs::path& path, bool append) : path_(path) {
  const bool existing = append && fs::exists(path) && fs::file_size(path) > 0;
  file_ = std::fopen(path.c_str(), append ? "ab" : "wb");
  if (!file_) throw IoError("cannot open metrics file " + path.string());
  if (!existing && std::fputs("epoch,split,loss,top1,top5\n", file_) < 0) {
    throw IoError("cannot write metrics file " + path.string());
  }
}

MetricsWriter::~MetricsWriter() {
  if (file_) std::fclose(file_);
}

void MetricsWriter::write(const MetricsRow& row) {
  if (std::fprintf(file_, "%zu,%s,%.17g,%.17g,%.17g\n", row.epoch, row.split.c_str(), row.loss,
                   row.top1, row.top5) < 0 ||
      std::fflush(file_) != 0) {
    throw IoError("cannot write metrics file " + path_.string());
  }
}

void MetricsWriter::finalize() {
  if (std::fflush(file_) != 0 || ::fsync(::fileno(file_)) != 0) {
    throw IoError("cannot sync metrics file " + path_.string());
  }
}

std::vector<MetricsRow> read_metrics(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open metrics file " + path.string());
  std::string line;
  std::getline(in, line);
  if (line != "epoch,split,loss,top1,top5") throw SchemaError("metrics: bad header in " + path.string());
  std::vector<MetricsRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    MetricsRow r;
    std::string field;
    std::getline(ls, field, ',');
    r.epoch = std::stoul(field);
    std::getline(ls, r.split, ',');
    std::getline(ls, field, ',');
    r.loss = std::stod(field);
    std::getline(ls, field, ',');
    r.top1 = std::stod(field);
    std::getline(ls, field, ',');
    r.top5 = std::stod(field);
    rows.push_back(r);
  }
  return rows;
}

}  // namespace dasvit
