#pragma once

#include "dasvit/config.hpp"
#include "dasvit/data.hpp"

namespace dasvit::oracle {

// Small configuration used by the search and retraining tests: D=32, 8x8
// images, 4 patches, 3 stages of 3 epochs.
inline RunConfig desk_config() {
  RunConfig c;
  c.seed = 7;
  c.model.dims = {32, 4, 8, 3, 2};
  c.search_space.msa_heads = {2, 4, 8};
  c.search.epochs_per_stage = 3;
  c.search.batch_size = 16;
  c.retrain.epochs = 100;
  c.retrain.warmup_epochs = 5;
  c.retrain.batch_size = 32;
  c.data.per_class = 64;
  return c;
}

inline Dataset desk_data(const RunConfig& c, std::uint64_t seed = 11) {
  SyntheticConfig s;
  s.classes = c.model.dims.classes;
  s.per_class = c.data.per_class;
  s.image = c.model.dims.image;
  s.channels = c.model.dims.channels;
  s.noise = c.data.noise;
  s.seed = seed;
  return make_synthetic(s);
}

}  // namespace dasvit::oracle
