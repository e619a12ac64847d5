#pragma once

#include <array>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "dasvit/tensor.hpp"

namespace dasvit {

// Images [M,H,W,C] with integer labels in [0, classes).
struct Dataset {
  Tensor images;
  std::vector<int> labels;
  std::size_t classes = 0;

  std::size_t size() const { return labels.size(); }
  std::size_t image_size() const { return images.dim(1); }
  std::size_t channels() const { return images.dim(3); }

  // Throws SchemaError when labels or shapes are inconsistent.
  void validate() const;
  // Copy of the listed samples, in order.
  Dataset subset(std::span<const std::size_t> indices) const;
};

struct SyntheticConfig {
  std::size_t classes = 2;
  std::size_t per_class = 64;
  std::size_t image = 8;
  std::size_t channels = 3;
  double noise = 0.05;
  std::uint64_t seed = 0;
};

// One Gaussian blob per image, placed on a ring at a class-dependent angle,
// plus pixel noise clamped to [0, 1]. Labels cycle 0, 1, ..., classes-1.
Dataset make_synthetic(const SyntheticConfig& cfg);

inline constexpr std::size_t kCifarSide = 32;
inline constexpr std::size_t kCifarRecordBytes = 1 + 3 * kCifarSide * kCifarSide;
inline constexpr std::size_t kCifarRecordsPerFile = 10000;

// One CIFAR-10 binary batch. Pixels are scaled to [0, 1]. When
// expected_records is nonzero the file must hold exactly that many records.
Dataset load_cifar10_batch(const std::filesystem::path& path, std::size_t expected_records = 0);

struct Split {
  Dataset train;
  Dataset test;
};

// data_batch_1..5.bin for training and test_batch.bin for testing.
Split load_cifar10(const std::filesystem::path& dir);

struct ChannelStats {
  std::vector<double> mean;
  std::vector<double> std;
};

ChannelStats channel_stats(const Dataset& d);
// In place, per channel: (x - mean) / std.
void normalize(Dataset& d, const ChannelStats& stats);
void denormalize(Dataset& d, const ChannelStats& stats);

enum class ResizeMode { Nearest, Bilinear };
// [B,H,W,C] -> [B,size,size,C]; square inputs only.
Tensor resize_images(const Tensor& images, std::size_t size, ResizeMode mode);

// Disjoint, exhaustive seeded split: `first_fraction` of the indices go to
// the first part.
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(
    std::size_t n, double first_fraction, std::uint64_t seed);

struct BatchPlan {
  std::size_t batch_size = 64;
  bool drop_last = false;
};

// Seeded permutation of `indices` cut into batches.
std::vector<std::vector<std::size_t>> epoch_batches(std::span<const std::size_t> indices,
                                                    const BatchPlan& plan, std::uint64_t seed);

struct Batch {
  Tensor images;
  std::vector<int> labels;
};

Batch make_batch(const Dataset& d, std::span<const std::size_t> indices);

// Fraction of rows whose label is among the k largest logits. Equal logits
// rank the lower class index first.
double topk_accuracy(const Tensor& logits, std::span<const int> labels, std::size_t k);

struct MetricsRow {
  std::size_t epoch = 0;
  std::string split;
  double loss = 0;
  double top1 = 0;
  double top5 = 0;
};

// CSV with header "epoch,split,loss,top1,top5". Opening with append = true
// on an existing file keeps its rows and skips the header.
class MetricsWriter {
 public:
  explicit MetricsWriter(const std::filesystem::path& path, bool append = false);
  ~MetricsWriter();
  MetricsWriter(const MetricsWriter&) = delete;
  MetricsWriter& operator=(const MetricsWriter&) = delete;

  void write(const MetricsRow& row);
  // Flushes and fsyncs.
  void finalize();

 private:
  std::filesystem::path path_;
  std::FILE* file_ = nullptr;
};

std::vector<MetricsRow> read_metrics(const std::filesystem::path& path);

}  // namespace dasvit
