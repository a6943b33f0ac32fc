#pragma once

#include <vector>

#include "ehdk/ops.hpp"

namespace ehdk {

// Cascaded group attention. Channels are split into h groups; each group runs
// self-attention over spatial tokens with its own Q/K/V projections (1x1
// convs) and a depthwise 3x3 token-interaction refinement on Q. From the
// second group on, the previous group's output is added to the raw slice
// before attention. Group outputs are concatenated and mixed by a 1x1 conv.
struct AttentionGroupParams {
  struct Group {
    ConvParams wq;  // 1x1, group_dim -> group_dim
    ConvParams wk;
    ConvParams wv;
    ConvParams token_interaction;  // 3x3 depthwise on the Q map
  };
  std::vector<Group> groups;
  ConvParams mix;  // 1x1 over the concatenated group outputs
  int group_dim = 0;

  static AttentionGroupParams make(int channels, int h, Rng& rng);
  int head_count() const { return int(groups.size()); }
  int channels() const { return group_dim * head_count(); }
};

// Self-attention of one channel group. weights_out optionally receives the
// (n, 1, T, T) row-stochastic attention matrix.
Tensor group_self_attention(const Tensor& x_g, AttentionGroupParams::Group& g,
                            Tape* tape = nullptr, Tensor* weights_out = nullptr);

// premix_out optionally receives the per-group outputs before the final mix,
// in group order (used to verify the cascade wiring).
Tensor cascaded_group_attention(const Tensor& x, AttentionGroupParams& p,
                                Tape* tape = nullptr,
                                std::vector<Tensor>* premix_out = nullptr);

// 1x1 expansion (x2 channels) -> cascaded group attention -> 1x1 compression,
// added back onto the residual input.
struct C2PSACGABlock {
  ConvParams expand;
  AttentionGroupParams attn;
  ConvParams compress;

  static C2PSACGABlock make(int channels, int h, Rng& rng);
  Tensor forward(const Tensor& x, Tape* tape = nullptr);
};

}  // namespace ehdk
