#pragma once

#include <string>

#include "gridloop/codec.hpp"
#include "gridloop/model.hpp"
#include "gridloop/optim.hpp"

namespace gridloop {

// Checkpoint = <base>.json manifest + <base>.bin blob of little-endian f32
// tensors laid out in manifest order. Round-trips byte-exactly.
void save_checkpoint(const std::string& base, const Model<float>& model,
                     const WorldConfig& world);

struct LoadedCheckpoint {
  Model<float> model;
  WorldConfig world;
  Vocab vocab;
};
LoadedCheckpoint load_checkpoint(const std::string& base);

// Optimizer moments, step counters and rng streams for bit-exact resume.
struct TrainState {
  long step = 0;
  std::string data_rng;
  std::string aux_rng;
};
void save_train_state(const std::string& base, const AdamW<float>& opt,
                      const TrainState& ts);
void load_train_state(const std::string& base, AdamW<float>& opt, TrainState& ts);

}  // namespace gridloop
