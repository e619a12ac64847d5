#include "dasvit/pipeline.hpp"

#include "dasvit/errors.hpp"
#include "dasvit/rng.hpp"

namespace dasvit {

namespace {

constexpr std::uint64_t kDataTag = 0xda7a;

Split load_raw(const RunConfig& cfg) {
  const ModelDims& dims = cfg.model.dims;
  Split s;
  if (cfg.data.source == DataSource::Cifar10) {
    s = load_cifar10(cfg.data.dir);
    if (s.train.classes != dims.classes) {
      // CIFAR-10 labels fit any head with at least 10 classes.
      if (dims.classes < s.train.classes) {
        throw ConfigError("config: /model/classes " + std::to_string(dims.classes) +
                          " is smaller than the 10 CIFAR-10 classes");
      }
      s.train.classes = s.test.classes = dims.classes;
    }
  } else {
    SyntheticConfig sc;
    sc.classes = dims.classes;
    sc.image = dims.image;
    sc.channels = dims.channels;
    sc.noise = cfg.data.noise;
    sc.per_class = cfg.data.per_class;
    sc.seed = derive_seed(cfg.seed, kDataTag, 0);
    s.train = make_synthetic(sc);
    sc.per_class = cfg.data.test_per_class;
    sc.seed = derive_seed(cfg.seed, kDataTag, 1);
    s.test = make_synthetic(sc);
  }
  if (s.train.channels() != dims.channels) {
    throw ConfigError("config: /model/channels " + std::to_string(dims.channels) +
                      " does not match the data (" + std::to_string(s.train.channels()) + ")");
  }
  if (s.train.image_size() != dims.image) {
    const ResizeMode mode =
        cfg.data.resize_mode == "nearest" ? ResizeMode::Nearest : ResizeMode::Bilinear;
    s.train.images = resize_images(s.train.images, dims.image, mode);
    s.test.images = resize_images(s.test.images, dims.image, mode);
  }
  return s;
}

}  // namespace

RunData load_run_data(RunConfig& cfg) {
  Split s = load_raw(cfg);
  ChannelStats norm{cfg.data.mean, cfg.data.std};
  if (norm.mean.empty()) {
    norm = channel_stats(s.train);
    cfg.data.mean = norm.mean;
    cfg.data.std = norm.std;
  }
  normalize(s.train, norm);
  normalize(s.test, norm);
  return {std::move(s.train), std::move(s.test), norm};
}

RunData load_run_data(const RunConfig& cfg, const ChannelStats& norm) {
  Split s = load_raw(cfg);
  normalize(s.train, norm);
  normalize(s.test, norm);
  return {std::move(s.train), std::move(s.test), norm};
}

}  // namespace dasvit
