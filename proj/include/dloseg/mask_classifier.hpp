#pragma once

#include <vector>

#include "dloseg/autodiff.hpp"
#include "dloseg/nn.hpp"
#include "dloseg/types.hpp"

namespace dloseg {

struct ClassifierOutput {
  Eigen::VectorXd logits;
  Eigen::VectorXd probabilities;
  std::vector<bool> keep_flags;

  int count() const { return static_cast<int>(logits.size()); }
};

// Binary keep/discard classifier over decoded masks. Text-conditioned prompt
// embeddings are pooled into one query per prospective mask, fused with the
// decoder's mask tokens by cross-attention, self-attended, and scored.
struct MaskClassifier {
  ModelDims dims;
  nn::Mlp pool_mlp;  // (N_p*d) -> hidden -> d, ReLU
  nn::MultiheadAttention cross_attn;
  nn::MultiheadAttention self_attn;
  nn::Mlp head_mlp;  // d -> hidden -> 1, ReLU
  double threshold = 0.5;

  MaskClassifier() = default;
  MaskClassifier(const ModelDims& d, Rng& rng)
      : dims(d),
        pool_mlp("classifier.pool", d.points_per_prompt * d.embed_dim, d.mlp_hidden,
                 d.embed_dim, nn::Activation::Relu, rng),
        cross_attn("classifier.cross_attn", d.embed_dim, d.heads, 0.5, rng),
        self_attn("classifier.self_attn", d.embed_dim, d.heads, 0.5, rng),
        head_mlp("classifier.head", d.embed_dim, d.mlp_hidden, 1,
                 nn::Activation::Relu, rng) {}

  // Concatenates each batch's N_p sampled point embeddings and pools them
  // with an MLP into one query per prospective mask.
  ad::Var pool_prompts(ad::Tape& t, const ad::Var& tokens) {
    const int np = dims.points_per_prompt;
    require_shape(tokens.rows() % np == 0 && tokens.cols() == dims.embed_dim,
                  "pool_prompts: token shape mismatch");
    const int n = static_cast<int>(tokens.rows()) / np;
    if (n == 0) return t.constant(Eigen::MatrixXd(0, dims.embed_dim));
    std::vector<ad::Var> rows;
    rows.reserve(n);
    for (int k = 0; k < n; ++k) {
      std::vector<ad::Var> points;
      points.reserve(np);
      for (int p = 0; p < np; ++p)
        points.push_back(ad::slice_rows(tokens, k * np + p, 1));
      rows.push_back(ad::concat_cols(points));
    }
    return pool_mlp.forward(t, ad::concat_rows(rows));
  }

  // Cross-attention over mask tokens, query residual, layer norm, one
  // self-attention block, then the scoring MLP. Returns N x 1 logits.
  ad::Var classify_graph(ad::Tape& t, const ad::Var& queries,
                         const ad::Var& mask_tokens, Rng* dropout_rng) {
    require_shape(queries.rows() == mask_tokens.rows(),
                  "classify: query/mask-token count mismatch");
    ad::Var fused = cross_attn.forward(t, queries, mask_tokens, mask_tokens, dropout_rng);
    ad::Var x = ad::layernorm_rows(ad::add(fused, queries));
    ad::Var s = self_attn.forward(t, x, x, x, dropout_rng);
    ad::Var y = ad::layernorm_rows(ad::add(s, x));
    return head_mlp.forward(t, y);
  }

  // Eval-mode classification of a decoded bundle against pooled queries.
  ClassifierOutput classify(const Eigen::MatrixXd& prompt_tokens,
                            const Eigen::MatrixXd& mask_tokens) {
    ad::Tape t;
    ad::Var q = pool_prompts(t, t.constant(prompt_tokens));
    ad::Var logits = classify_graph(t, q, t.constant(mask_tokens), nullptr);
    ClassifierOutput out;
    out.logits = logits.value().col(0);
    out.probabilities = (1.0 / (1.0 + (-out.logits.array()).exp())).matrix();
    for (Eigen::Index i = 0; i < out.logits.size(); ++i)
      out.keep_flags.push_back(out.probabilities[i] >= threshold);
    return out;
  }

  void collect(std::vector<ad::Parameter*>& out) {
    pool_mlp.collect(out);
    cross_attn.collect(out);
    self_attn.collect(out);
    head_mlp.collect(out);
  }
};

// Masks whose keep probability clears the threshold, order preserved.
// Thresholds 0 and 1 act as keep-all / keep-none probes.
inline std::vector<int> select_kept(const ClassifierOutput& out, double threshold) {
  require(threshold >= 0.0 && threshold <= 1.0, "select: threshold must be in [0,1]");
  std::vector<int> kept;
  for (int i = 0; i < out.count(); ++i)
    if (out.probabilities[i] >= threshold) kept.push_back(i);
  return kept;
}

}  // namespace dloseg
