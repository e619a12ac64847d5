#pragma once

#include "dasvit/config.hpp"
#include "dasvit/data.hpp"

namespace dasvit {

struct RunData {
  Dataset train;
  Dataset test;
  ChannelStats norm;
};

// Loads (or synthesizes) the configured dataset, resizes it to the model
// input and normalizes both splits. When the config carries no constants
// they are computed from the training split and written back into `cfg`.
RunData load_run_data(RunConfig& cfg);

// Same, but normalizes with fixed constants (e.g. those stored in a model).
RunData load_run_data(const RunConfig& cfg, const ChannelStats& norm);

}  // namespace dasvit
