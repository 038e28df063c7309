#pragma once

// Small worlds and configs that keep pipeline tests fast.

#include "mpo/trainer.hpp"

namespace mpo::testing {

inline WorldConfig tiny_world_config() {
  WorldConfig w;
  w.seed = 2;
  w.symbols = 6;
  w.speakers = 2;
  w.speech_count = 16;
  return w;
}

inline TrainingConfig tiny_config(const SynthWorld& world, Stage stage) {
  TrainingConfig c = TrainingConfig::defaults(stage);
  c.arch.vocab = world.vocab;
  c.arch.layers = 1;
  c.arch.dim = 8;
  c.arch.heads = 2;
  c.arch.context = 40;
  c.arch.max_response = 20;
  c.steps = 6;
  c.batch_size = 3;
  c.eval_interval = 3;
  c.warmup_steps = 0;
  c.n_candidates = 4;
  c.kl_prompts = 2;
  c.kl_samples = 2;
  return c;
}

}  // namespace mpo::testing
