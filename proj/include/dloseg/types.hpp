#pragma once

#include <string>
#include <vector>

#include <Eigen/Core>

#include "dloseg/common.hpp"
#include "dloseg/raster.hpp"

namespace dloseg {

// Shape contract shared by the backbone gateway and both adapter networks.
// Defaults are the full-scale values; tests shrink everything for probes.
struct ModelDims {
  int grid_h = 22;   // semantic grid
  int grid_w = 22;
  int sem_channels = 64;
  int embed_dim = 256;  // prompt token / DPE width
  int heads = 8;
  int n_prompts = 11;         // N, prompt batches per image
  int points_per_prompt = 3;  // N_p
  int mlp_hidden = 1024;
  int image_embed_hw = 64;  // image-embedding grid side
  int image_embed_channels = 256;
  int mask_upsample = 4;  // stub decoder native resolution = grid * this

  int grid_cells() const { return grid_h * grid_w; }
  int total_points() const { return n_prompts * points_per_prompt; }
  int freq_pairs() const { return embed_dim / 2; }
  int mask_h() const { return grid_h * mask_upsample; }
  int mask_w() const { return grid_w * mask_upsample; }

  void validate() const {
    require(embed_dim % 2 == 0, "embed_dim must be even");
    require(embed_dim % heads == 0, "embed_dim must divide into heads");
    require(grid_h >= 1 && grid_w >= 1 && n_prompts >= 1 && points_per_prompt >= 1,
            "all dims must be positive");
  }

  static ModelDims tiny_probe() {
    ModelDims d;
    d.grid_h = 4;
    d.grid_w = 4;
    d.sem_channels = 8;
    d.embed_dim = 16;
    d.heads = 2;
    d.n_prompts = 2;
    d.points_per_prompt = 2;
    d.mlp_hidden = 24;
    d.image_embed_hw = 8;
    d.image_embed_channels = 16;
    d.mask_upsample = 4;
    return d;
  }
};

// Text-conditioned embedding grid from the semantic backbone. Cell (i, j)
// occupies row i*w + j (row-major, top-left origin).
struct SemanticGrid {
  Eigen::MatrixXd flat;  // (h*w) x channels
  int h = 0;
  int w = 0;
  std::string source_text;
  int source_h = 0;
  int source_w = 0;
};

// Per-image embedding from the mask-decoder backbone's image encoder.
struct ImageEmbedding {
  Eigen::MatrixXd flat;  // (hw*hw) x channels
  int hw = 0;
  int source_h = 0;
  int source_w = 0;
};

// Output of the prompt encoder: N batches of N_p point tokens. Point
// (k, p) occupies row k*N_p + p.
struct PromptSet {
  Eigen::MatrixXd tokens;           // (N*N_p) x d, sampler output (pre-label)
  Eigen::MatrixXd category_logits;  // (N*N_p) x 3: foreground/background/no-point
  Eigen::MatrixXd final_tokens;     // (N*N_p) x d, after label-embedding mixture
  int n_prompts = 0;
  int points_per_prompt = 0;
};

// Decoder output: one mask per prompt batch (multi-mask disabled), with the
// per-mask decoder token and predicted-quality scalar. Masks are
// probabilities in [0, 1] at the decoder-native low resolution; gateways that
// natively emit logits convert before returning.
struct MaskBundle {
  std::vector<MaskArray> masks;  // N entries, native_h x native_w
  Eigen::MatrixXd mask_tokens;   // N x d
  Eigen::VectorXd quality;       // N
  int native_h = 0;
  int native_w = 0;

  int count() const { return static_cast<int>(masks.size()); }
};

}  // namespace dloseg
