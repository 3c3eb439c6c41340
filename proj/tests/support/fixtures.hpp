#pragma once

#include "cmadp/policy.hpp"
#include "cmadp/synthworld.hpp"

namespace cmadp::check {

inline ModelConfig tiny_model() {
  ModelConfig m;
  m.encoder.embed_dim = 16;
  m.cma.model_dim = 16;
  m.cma.heads = 2;
  m.cma.mlp_hidden = 32;
  m.cma.cond_dim = 12;
  m.unet.down_dims = {8, 16, 32};
  m.unet.groups = 2;
  m.unet.step_embed_dim = 8;
  m.unet.cond_dim = 12;
  return m;
}

inline Dataset small_dataset(int count = 3, int val = 1) {
  GenConfig g;
  g.count = count;
  g.val_count = val;
  return generate_dataset(g);
}

}  // namespace cmadp::check
