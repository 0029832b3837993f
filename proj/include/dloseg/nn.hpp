#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "dloseg/autodiff.hpp"
#include "dloseg/random.hpp"

namespace dloseg::nn {

using ad::Mat;
using ad::Parameter;
using ad::Tape;
using ad::Var;

enum class Activation { Gelu, Relu };

inline Var activate(const Var& x, Activation a) {
  return a == Activation::Gelu ? ad::gelu(x) : ad::relu(x);
}

struct Linear {
  Parameter w;  // in x out
  Parameter b;  // 1 x out

  Linear() = default;
  Linear(const std::string& name, int in, int out, Rng& rng) {
    const double s = std::sqrt(2.0 / static_cast<double>(in + out));
    w = Parameter(name + ".w", rng.normal_matrix(in, out, 0.0, s));
    b = Parameter(name + ".b", Mat::Zero(1, out));
  }

  Var forward(Tape& t, const Var& x) {
    return ad::add_rowvec(ad::matmul(x, t.leaf(w)), t.leaf(b));
  }

  Mat forward_plain(const Mat& x) const {
    return (x * w.value).rowwise() + b.value.row(0);
  }

  void collect(std::vector<Parameter*>& out) {
    out.push_back(&w);
    out.push_back(&b);
  }
};

// Two-layer perceptron applied row-wise.
struct Mlp {
  Linear fc1, fc2;
  Activation act = Activation::Gelu;

  Mlp() = default;
  Mlp(const std::string& name, int in, int hidden, int out, Activation a, Rng& rng)
      : fc1(name + ".fc1", in, hidden, rng),
        fc2(name + ".fc2", hidden, out, rng),
        act(a) {}

  Var forward(Tape& t, const Var& x) {
    return fc2.forward(t, activate(fc1.forward(t, x), act));
  }

  void collect(std::vector<Parameter*>& out) {
    fc1.collect(out);
    fc2.collect(out);
  }
};

// Standard multi-head attention with optional dropout on the attention
// weights. Queries, keys and values may come from different sequences; all
// share the embedding dimension.
struct MultiheadAttention {
  int heads = 8;
  int dim = 256;
  double dropout_p = 0.0;
  Linear wq, wk, wv, wo;

  // When set, forward() appends the post-softmax attention matrix of every
  // head (values only, pre-dropout). Used by probes and diagnostics.
  std::vector<Mat>* attn_probe = nullptr;

  MultiheadAttention() = default;
  MultiheadAttention(const std::string& name, int dim_, int heads_,
                     double dropout, Rng& rng)
      : heads(heads_),
        dim(dim_),
        dropout_p(dropout),
        wq(name + ".wq", dim_, dim_, rng),
        wk(name + ".wk", dim_, dim_, rng),
        wv(name + ".wv", dim_, dim_, rng),
        wo(name + ".wo", dim_, dim_, rng) {
    require(dim_ % heads_ == 0, "attention dim must divide into heads");
  }

  // dropout_rng == nullptr means eval mode (deterministic).
  Var forward(Tape& t, const Var& q_in, const Var& k_in, const Var& v_in,
              Rng* dropout_rng) {
    require_shape(q_in.cols() == dim && k_in.cols() == dim && v_in.cols() == dim,
                  "attention: embedding dim mismatch");
    require_shape(k_in.rows() == v_in.rows(), "attention: key/value length mismatch");
    const int dh = dim / heads;
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
    Var q = wq.forward(t, q_in);
    Var k = wk.forward(t, k_in);
    Var v = wv.forward(t, v_in);
    std::vector<Var> head_outs;
    head_outs.reserve(heads);
    for (int h = 0; h < heads; ++h) {
      Var qh = ad::slice_cols(q, h * dh, dh);
      Var kh = ad::slice_cols(k, h * dh, dh);
      Var vh = ad::slice_cols(v, h * dh, dh);
      Var scores = ad::scale(ad::matmul(qh, ad::transpose(kh)), inv_sqrt_dh);
      Var probs = ad::softmax_rows(scores);
      if (attn_probe) attn_probe->push_back(probs.value());
      if (dropout_rng && dropout_p > 0.0)
        probs = ad::dropout(probs, dropout_p, *dropout_rng);
      head_outs.push_back(ad::matmul(probs, vh));
    }
    return wo.forward(t, ad::concat_cols(head_outs));
  }

  void collect(std::vector<Parameter*>& out) {
    wq.collect(out);
    wk.collect(out);
    wv.collect(out);
    wo.collect(out);
  }
};

inline Eigen::Index parameter_count(const std::vector<Parameter*>& params) {
  Eigen::Index n = 0;
  for (const Parameter* p : params) n += p->size();
  return n;
}

// Decoupled weight decay Adam. Gradients are clipped by global norm before
// the moment update; `clipped_last_step` reports when the clip was active.
struct AdamW {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  double clip_norm = 1.0;
  long step_count = 0;
  bool clipped_last_step = false;
  double last_grad_norm = 0.0;

  void zero_grad(const std::vector<Parameter*>& params) {
    for (Parameter* p : params) p->grad.setZero();
  }

  void step(const std::vector<Parameter*>& params, double lr) {
    double sq = 0.0;
    for (const Parameter* p : params) sq += p->grad.squaredNorm();
    last_grad_norm = std::sqrt(sq);
    clipped_last_step = clip_norm > 0.0 && last_grad_norm > clip_norm;
    const double scale = clipped_last_step ? clip_norm / last_grad_norm : 1.0;

    ++step_count;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_count));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_count));
    for (Parameter* p : params) {
      Mat g = p->grad * scale;
      p->adam_m = beta1 * p->adam_m + (1.0 - beta1) * g;
      p->adam_v = (beta2 * p->adam_v.array() + (1.0 - beta2) * g.array().square()).matrix();
      Mat m_hat = p->adam_m / bc1;
      Mat v_hat = p->adam_v / bc2;
      p->value -= lr * (m_hat.array() / (v_hat.array().sqrt() + eps)).matrix();
      p->value -= lr * weight_decay * p->value;
    }
  }
};

}  // namespace dloseg::nn
