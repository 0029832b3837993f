#pragma once

#include <vector>

#include "dloseg/autodiff.hpp"
#include "dloseg/nn.hpp"
#include "dloseg/positional_encoding.hpp"
#include "dloseg/types.hpp"

namespace dloseg {

// Graph-mode prompt encoder output; values() of these become a PromptSet.
struct PromptGraph {
  ad::Var tokens;           // (N*N_p) x d, sampler output before labeling
  ad::Var category_logits;  // (N*N_p) x 3
  ad::Var final_tokens;     // (N*N_p) x d
};

// Trainable network turning a semantic grid into decoder-ready point tokens:
// upscale MLP -> patch self-attention -> filter MLP -> learned-query sampler
// attention over the DPE -> category labeling.
struct PromptEncoder {
  ModelDims dims;
  nn::Mlp upscale_mlp;               // sem_channels -> hidden -> d, GELU
  nn::MultiheadAttention self_attn;  // over the grid patches
  nn::Mlp filter_mlp;                // d -> hidden -> d, GELU
  ad::Parameter queries;             // (N*N_p) x d learned point queries
  nn::MultiheadAttention sampler_attn;
  nn::Linear label_linear;           // d -> 3
  Eigen::MatrixXd label_embeds;      // frozen 3 x d category embeddings

  PromptEncoder() = default;
  PromptEncoder(const ModelDims& d, Eigen::MatrixXd frozen_label_embeds, Rng& rng)
      : dims(d),
        upscale_mlp("prompt.upscale", d.sem_channels, d.mlp_hidden, d.embed_dim,
                    nn::Activation::Gelu, rng),
        self_attn("prompt.self_attn", d.embed_dim, d.heads, 0.5, rng),
        filter_mlp("prompt.filter", d.embed_dim, d.mlp_hidden, d.embed_dim,
                   nn::Activation::Gelu, rng),
        queries("prompt.queries",
                rng.normal_matrix(d.total_points(), d.embed_dim, 0.0, 0.02)),
        sampler_attn("prompt.sampler_attn", d.embed_dim, d.heads, 0.5, rng),
        label_linear("prompt.label", d.embed_dim, 3, rng),
        label_embeds(std::move(frozen_label_embeds)) {
    require_shape(label_embeds.rows() == 3 && label_embeds.cols() == d.embed_dim,
                  "prompt encoder: label embeddings must be 3 x d");
  }

  // 22x22xC grid, flattened row-major, lifted per patch to the token width.
  ad::Var upscale(ad::Tape& t, const ad::Var& grid_flat) {
    require_shape(grid_flat.rows() == dims.grid_cells() &&
                      grid_flat.cols() == dims.sem_channels,
                  "upscale: semantic grid shape mismatch");
    return upscale_mlp.forward(t, grid_flat);
  }

  // Q = K = tokens + DPE, V = tokens; residual, layer norm, then the DPE is
  // added again after the layer.
  ad::Var self_attend_patches(ad::Tape& t, const ad::Var& tokens,
                              const Eigen::MatrixXd& dpe, Rng* dropout_rng) {
    require_shape(tokens.rows() == dpe.rows() && tokens.cols() == dpe.cols(),
                  "self_attend_patches: token/DPE shape mismatch");
    ad::Var with_pos = ad::add_elem_const(tokens, dpe);
    ad::Var attended = self_attn.forward(t, with_pos, with_pos, tokens, dropout_rng);
    ad::Var normed = ad::layernorm_rows(ad::add(attended, tokens));
    return ad::add_elem_const(normed, dpe);
  }

  ad::Var filter_patches(ad::Tape& t, const ad::Var& tokens) {
    return filter_mlp.forward(t, tokens);
  }

  // Learned queries attend over the patches; keys carry semantics plus
  // geometry, values are the DPE itself, so the output rows are mixtures of
  // positional encodings the decoder can read.
  ad::Var sample_points(ad::Tape& t, const ad::Var& filtered,
                        const Eigen::MatrixXd& dpe, Rng* dropout_rng) {
    ad::Var q = t.leaf(queries);
    ad::Var keys = ad::add_elem_const(filtered, dpe);
    ad::Var values = t.constant(dpe);
    ad::Var attended = sampler_attn.forward(t, q, keys, values, dropout_rng);
    return ad::layernorm_rows(ad::add(attended, q));
  }

  // Soft category mixture keeps the whole pipeline differentiable: the final
  // token is the sampled encoding plus the softmax-weighted label embedding.
  PromptGraph label_points(ad::Tape& t, const ad::Var& sampled) {
    PromptGraph out;
    out.tokens = sampled;
    out.category_logits = label_linear.forward(t, sampled);
    ad::Var mixture =
        ad::matmul_const_r(ad::softmax_rows(out.category_logits), label_embeds);
    out.final_tokens = ad::add(sampled, mixture);
    return out;
  }

  PromptGraph encode_graph(ad::Tape& t, const SemanticGrid& grid,
                           const DpeGrid& dpe, Rng* dropout_rng) {
    require_shape(grid.h == dims.grid_h && grid.w == dims.grid_w,
                  "encode: semantic grid resolution mismatch");
    ad::Var g = t.constant(grid.flat);
    ad::Var tokens = upscale(t, g);
    ad::Var attended = self_attend_patches(t, tokens, dpe.flat, dropout_rng);
    ad::Var filtered = filter_patches(t, attended);
    ad::Var sampled = sample_points(t, filtered, dpe.flat, dropout_rng);
    return label_points(t, sampled);
  }

  // Eval-mode forward (dropout off, deterministic).
  PromptSet encode(const SemanticGrid& grid, const DpeGrid& dpe) {
    ad::Tape t;
    PromptGraph g = encode_graph(t, grid, dpe, nullptr);
    PromptSet out;
    out.tokens = g.tokens.value();
    out.category_logits = g.category_logits.value();
    out.final_tokens = g.final_tokens.value();
    out.n_prompts = dims.n_prompts;
    out.points_per_prompt = dims.points_per_prompt;
    return out;
  }

  void collect(std::vector<ad::Parameter*>& out) {
    upscale_mlp.collect(out);
    self_attn.collect(out);
    filter_mlp.collect(out);
    out.push_back(&queries);
    sampler_attn.collect(out);
    label_linear.collect(out);
  }
};

}  // namespace dloseg
