#pragma once

#include <list>
#include <memory>
#include <mutex>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Core>
#include <opencv2/core.hpp>

#include "dloseg/autodiff.hpp"
#include "dloseg/common.hpp"
#include "dloseg/dataset.hpp"
#include "dloseg/positional_encoding.hpp"
#include "dloseg/random.hpp"
#include "dloseg/types.hpp"

namespace dloseg {

// Capacity-bounded LRU cache for image embeddings, keyed by image content
// hash. Disabled when capacity is zero. Writes are serialized internally.
class EmbeddingCache {
 public:
  explicit EmbeddingCache(std::size_t capacity = 0) : capacity_(capacity) {}

  const ImageEmbedding* find(std::uint64_t key) {
    if (capacity_ == 0) return nullptr;
    std::lock_guard<std::mutex> lock(mu_);
    auto it = map_.find(key);
    if (it == map_.end()) return nullptr;
    order_.splice(order_.begin(), order_, it->second.second);
    return &it->second.first;
  }

  void insert(std::uint64_t key, ImageEmbedding emb) {
    if (capacity_ == 0) return;
    std::lock_guard<std::mutex> lock(mu_);
    auto it = map_.find(key);
    if (it != map_.end()) return;
    order_.push_front(key);
    map_.emplace(key, std::make_pair(std::move(emb), order_.begin()));
    if (map_.size() > capacity_) {
      map_.erase(order_.back());
      order_.pop_back();
    }
  }

 private:
  std::size_t capacity_;
  std::mutex mu_;
  std::list<std::uint64_t> order_;
  std::unordered_map<std::uint64_t,
                     std::pair<ImageEmbedding, std::list<std::uint64_t>::iterator>>
      map_;
};

inline std::uint64_t image_content_hash(const cv::Mat& image) {
  std::uint64_t h = fnv1a(&image.rows, sizeof(image.rows));
  h = fnv1a(&image.cols, sizeof(image.cols), h);
  for (int y = 0; y < image.rows; ++y)
    h = fnv1a(image.ptr(y), image.cols * image.elemSize(), h);
  return h;
}

// Uniform access to the two frozen foundation backbones: the text-conditioned
// semantic encoder and the image encoder + point-promptable mask decoder.
// Implementations are read-only after construction and safe for concurrent
// inference.
class Backbones {
 public:
  virtual ~Backbones() = default;
  virtual SemanticGrid semantic_grid(const cv::Mat& image, const std::string& text) = 0;
  virtual ImageEmbedding image_embedding(const cv::Mat& image) = 0;
  virtual MaskBundle decode(const ImageEmbedding& emb, const PromptSet& prompts) = 0;
  virtual const FrequencyMatrix& frequency_matrix() const = 0;
  virtual const Eigen::MatrixXd& label_embeddings() const = 0;  // 3 x d
  virtual const ModelDims& dims() const = 0;
  virtual std::string mode() const = 0;
  // Hash over every internal constant; training must never change it.
  virtual std::uint64_t state_fingerprint() const = 0;
};

// Differentiable stub decode output (graph mode).
struct DecodeGraphOutput {
  ad::Var masks;        // N x (mask_h*mask_w), probabilities in [0,1]
  ad::Var mask_tokens;  // N x d
  std::vector<double> quality;
};

// Deterministic, fully differentiable stand-in for the frozen backbones.
// The semantic path recovers cable coverage from pixel colors (fixtures draw
// cables on a known background), the decoder path blends per-cell disk
// kernels weighted by token/DPE attention.
class StubBackbones : public Backbones {
 public:
  explicit StubBackbones(const ModelDims& dims, std::uint64_t seed,
                         std::size_t cache_capacity = 0)
      : dims_(dims), seed_(seed), cache_(cache_capacity) {
    dims_.validate();
    freq_ = FrequencyMatrix::from_seed(fnv1a("freq", seed), dims_.freq_pairs());
    dpe_ = build_dpe_grid(dims_.grid_h, dims_.grid_w, freq_);
    Rng r_label(fnv1a("labels", seed));
    label_embeds_ = r_label.normal_matrix(3, dims_.embed_dim);
    Rng r_sem(fnv1a("semproj", seed));
    sem_proj_ = r_sem.normal_matrix(1, dims_.sem_channels - 1);
    Rng r_img(fnv1a("imgproj", seed));
    img_proj_ = r_img.normal_matrix(1, dims_.image_embed_channels);
    Rng r_tok(fnv1a("tokmap", seed));
    token_map_ = r_tok.normal_matrix(dims_.embed_dim, dims_.embed_dim) /
                 std::sqrt(static_cast<double>(dims_.embed_dim));
    dpe_flat_transpose_ = dpe_.flat.transpose();
    build_kernel();
  }

  const DpeGrid& dpe_grid() const { return dpe_; }
  const ModelDims& dims() const override { return dims_; }
  std::string mode() const override { return "stub"; }
  const FrequencyMatrix& frequency_matrix() const override { return freq_; }
  const Eigen::MatrixXd& label_embeddings() const override { return label_embeds_; }

  int embedding_computes() const { return embed_computes_; }

  // Fraction of cable pixels per grid cell, from pixel colors. Channel 0 is
  // the coverage itself, the remaining channels a fixed random projection of
  // it, so the grid stays informative after upscaling.
  SemanticGrid semantic_grid(const cv::Mat& image, const std::string& text) override {
    require(!text.empty(), "semantic_grid: text prompt must be non-empty");
    require(image.type() == CV_8UC3, "semantic_grid: expected an RGB image");
    MaskArray coverage = coverage_from_pixels(image);
    return grid_from_coverage(coverage, text, image.rows, image.cols);
  }

  // Exact variant for fixtures with ground truth at hand.
  SemanticGrid semantic_grid_from_record(const InstanceRecord& record,
                                         const std::string& text) {
    require(!record.semantic_mask.empty(),
            "semantic_grid_from_record: record lacks a semantic mask");
    MaskArray cov = cell_coverage(mask_to_array(record.semantic_mask));
    return grid_from_coverage(cov, text, record.height(), record.width());
  }

  ImageEmbedding image_embedding(const cv::Mat& image) override {
    require(image.type() == CV_8UC3, "image_embedding: expected an RGB image");
    const std::uint64_t key = image_content_hash(image);
    if (const ImageEmbedding* hit = cache_.find(key)) return *hit;
    ++embed_computes_;
    ImageEmbedding emb;
    emb.hw = dims_.image_embed_hw;
    emb.source_h = image.rows;
    emb.source_w = image.cols;
    cv::Mat gray;
    cv::cvtColor(image, gray, cv::COLOR_BGR2GRAY);
    cv::Mat small;
    cv::resize(gray, small, cv::Size(emb.hw, emb.hw), 0, 0, cv::INTER_AREA);
    emb.flat.resize(static_cast<Eigen::Index>(emb.hw) * emb.hw,
                    dims_.image_embed_channels);
    for (int i = 0; i < emb.hw; ++i)
      for (int j = 0; j < emb.hw; ++j)
        emb.flat.row(static_cast<Eigen::Index>(i) * emb.hw + j) =
            (small.at<unsigned char>(i, j) / 255.0) * img_proj_;
    cache_.insert(key, emb);
    return emb;
  }

  MaskBundle decode(const ImageEmbedding& emb, const PromptSet& prompts) override {
    (void)emb;  // the stub decoder reads geometry from the DPE grid alone
    MaskBundle out;
    out.native_h = dims_.mask_h();
    out.native_w = dims_.mask_w();
    const int n = prompts.n_prompts;
    if (n == 0) {
      out.mask_tokens.resize(0, dims_.embed_dim);
      out.quality.resize(0);
      return out;
    }
    check_prompts(prompts);
    const Eigen::MatrixXd attn = point_attention(prompts.final_tokens);
    const Eigen::VectorXd w = sign_weights(prompts.category_logits);
    out.mask_tokens.resize(n, dims_.embed_dim);
    out.quality.resize(n);
    const int np = prompts.points_per_prompt;
    for (int k = 0; k < n; ++k) {
      Eigen::RowVectorXd flat = Eigen::RowVectorXd::Zero(kernel_.cols());
      Eigen::RowVectorXd mean_attn = Eigen::RowVectorXd::Zero(attn.cols());
      for (int p = 0; p < np; ++p) {
        const int row = k * np + p;
        flat += w[row] * (attn.row(row) * kernel_);
        mean_attn += attn.row(row);
      }
      mean_attn /= static_cast<double>(np);
      MaskArray mask(out.native_h, out.native_w);
      for (int y = 0; y < out.native_h; ++y)
        for (int x = 0; x < out.native_w; ++x)
          mask(y, x) = std::clamp(flat[y * out.native_w + x], 0.0, 1.0);
      out.quality[k] = mask.mean();
      out.masks.push_back(std::move(mask));
      out.mask_tokens.row(k) = (mean_attn * dpe_.flat) * token_map_;
    }
    return out;
  }

  // Differentiable decode used by the trainer; identical math to decode().
  DecodeGraphOutput decode_graph(ad::Tape& t, const ad::Var& final_tokens,
                                 const ad::Var& category_logits) const {
    const int np = dims_.points_per_prompt;
    const int n = static_cast<int>(final_tokens.rows()) / np;
    require_shape(final_tokens.cols() == dims_.embed_dim,
                  "decode_graph: token embedding axis mismatch");
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(dims_.embed_dim));
    ad::Var logits =
        ad::scale(ad::matmul_const_ptr(final_tokens, &dpe_flat_transpose_), inv_sqrt_d);
    ad::Var attn = ad::softmax_rows(logits);  // (N*Np) x cells
    Eigen::MatrixXd sign(3, 1);
    sign << 1.0, -1.0, 0.0;
    ad::Var w = ad::matmul_const_r(ad::softmax_rows(category_logits), sign);

    // all point disks in one pass: (N*Np) x pixels
    ad::Var disks = ad::matmul_const_ptr(attn, &kernel_);
    // per-batch attention means in one pass: N x cells
    Eigen::MatrixXd pool = Eigen::MatrixXd::Zero(n, n * np);
    for (int k = 0; k < n; ++k)
      for (int p = 0; p < np; ++p) pool(k, k * np + p) = 1.0 / np;
    ad::Var mean_attn = ad::matmul(t.constant(pool), attn);
    ad::Var tokens_all = ad::matmul_const_ptr(
        ad::matmul_const_ptr(mean_attn, &dpe_.flat), &token_map_);

    std::vector<ad::Var> mask_rows;
    DecodeGraphOutput out;
    for (int k = 0; k < n; ++k) {
      // signed blend of the batch's point disks: w_batch^T (1 x Np) * disks
      ad::Var w_batch = ad::transpose(ad::slice_rows(w, k * np, np));
      ad::Var blended = ad::matmul(w_batch, ad::slice_rows(disks, k * np, np));
      ad::Var mask = ad::clamp(blended, 0.0, 1.0);
      out.quality.push_back(mask.value().mean());
      mask_rows.push_back(mask);
    }
    out.masks = ad::concat_rows(mask_rows);
    out.mask_tokens = tokens_all;
    return out;
  }

  std::uint64_t state_fingerprint() const override {
    std::uint64_t h = fnv1a(&seed_, sizeof(seed_));
    auto mix = [&h](const Eigen::MatrixXd& m) {
      h = fnv1a(m.data(), sizeof(double) * m.size(), h);
    };
    mix(freq_.b);
    mix(dpe_.flat);
    mix(label_embeds_);
    mix(sem_proj_);
    mix(img_proj_);
    mix(token_map_);
    mix(kernel_);
    return h;
  }

  // Turns a mask row from decode_graph back into array form.
  MaskArray mask_row_to_array(const Eigen::RowVectorXd& row) const {
    MaskArray m(dims_.mask_h(), dims_.mask_w());
    for (int y = 0; y < dims_.mask_h(); ++y)
      for (int x = 0; x < dims_.mask_w(); ++x) m(y, x) = row[y * dims_.mask_w() + x];
    return m;
  }

 private:
  void check_prompts(const PromptSet& prompts) const {
    require_shape(prompts.points_per_prompt == dims_.points_per_prompt,
                  "decode: points-per-prompt axis mismatch");
    require_shape(prompts.final_tokens.cols() == dims_.embed_dim,
                  "decode: token embedding axis mismatch");
    require_shape(prompts.final_tokens.rows() ==
                      static_cast<Eigen::Index>(prompts.n_prompts) *
                          prompts.points_per_prompt,
                  "decode: token row count does not equal N*N_p");
    require_shape(prompts.category_logits.rows() == prompts.final_tokens.rows() &&
                      prompts.category_logits.cols() == 3,
                  "decode: category logits axis mismatch");
  }

  Eigen::MatrixXd point_attention(const Eigen::MatrixXd& tokens) const {
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(dims_.embed_dim));
    Eigen::MatrixXd logits = tokens * dpe_.flat.transpose() * inv_sqrt_d;
    Eigen::MatrixXd out(logits.rows(), logits.cols());
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
      Eigen::ArrayXd row = logits.row(i).array();
      row -= row.maxCoeff();
      Eigen::ArrayXd e = row.exp();
      out.row(i) = (e / e.sum()).matrix().transpose();
    }
    return out;
  }

  Eigen::VectorXd sign_weights(const Eigen::MatrixXd& category_logits) const {
    Eigen::VectorXd w(category_logits.rows());
    for (Eigen::Index i = 0; i < category_logits.rows(); ++i) {
      Eigen::Array3d row = category_logits.row(i).array();
      row -= row.maxCoeff();
      Eigen::Array3d e = row.exp();
      Eigen::Array3d sm = e / e.sum();
      w[i] = sm[0] - sm[1];  // foreground adds, background subtracts, no-point zero
    }
    return w;
  }

  MaskArray coverage_from_pixels(const cv::Mat& image) const {
    const cv::Vec3b bg = fixture_background();
    MaskArray cable(image.rows, image.cols);
    for (int y = 0; y < image.rows; ++y) {
      for (int x = 0; x < image.cols; ++x) {
        const cv::Vec3b px = image.at<cv::Vec3b>(y, x);
        const double d0 = static_cast<double>(px[0]) - bg[0];
        const double d1 = static_cast<double>(px[1]) - bg[1];
        const double d2 = static_cast<double>(px[2]) - bg[2];
        cable(y, x) = std::sqrt(d0 * d0 + d1 * d1 + d2 * d2) > 30.0 ? 1.0 : 0.0;
      }
    }
    return cell_coverage(cable);
  }

  MaskArray cell_coverage(const MaskArray& mask) const {
    MaskArray cov(dims_.grid_h, dims_.grid_w);
    const int H = static_cast<int>(mask.rows());
    const int W = static_cast<int>(mask.cols());
    for (int i = 0; i < dims_.grid_h; ++i) {
      const int y0 = i * H / dims_.grid_h;
      const int y1 = (i + 1) * H / dims_.grid_h;
      for (int j = 0; j < dims_.grid_w; ++j) {
        const int x0 = j * W / dims_.grid_w;
        const int x1 = (j + 1) * W / dims_.grid_w;
        double s = 0.0;
        for (int y = y0; y < y1; ++y)
          for (int x = x0; x < x1; ++x) s += mask(y, x);
        const int area = std::max(1, (y1 - y0) * (x1 - x0));
        cov(i, j) = s / area;
      }
    }
    return cov;
  }

  SemanticGrid grid_from_coverage(const MaskArray& cov, const std::string& text,
                                  int src_h, int src_w) const {
    SemanticGrid g;
    g.h = dims_.grid_h;
    g.w = dims_.grid_w;
    g.source_text = text;
    g.source_h = src_h;
    g.source_w = src_w;
    g.flat.resize(dims_.grid_cells(), dims_.sem_channels);
    for (int i = 0; i < g.h; ++i) {
      for (int j = 0; j < g.w; ++j) {
        const Eigen::Index row = static_cast<Eigen::Index>(i) * g.w + j;
        g.flat(row, 0) = cov(i, j);
        g.flat.row(row).tail(dims_.sem_channels - 1) = cov(i, j) * sem_proj_;
      }
    }
    return g;
  }

  // kernel_(cell, pixel): quadratic-falloff disk of radius 2 cells centered on
  // the cell, rasterized at the decoder-native mask resolution.
  void build_kernel() {
    const int up = dims_.mask_upsample;
    const int mh = dims_.mask_h(), mw = dims_.mask_w();
    kernel_.resize(dims_.grid_cells(), static_cast<Eigen::Index>(mh) * mw);
    kernel_.setZero();
    const double radius = 2.0;  // in cell units
    for (int ci = 0; ci < dims_.grid_h; ++ci) {
      for (int cj = 0; cj < dims_.grid_w; ++cj) {
        const Eigen::Index cell = static_cast<Eigen::Index>(ci) * dims_.grid_w + cj;
        const double cy = (ci + 0.5) * up;
        const double cx = (cj + 0.5) * up;
        for (int y = 0; y < mh; ++y) {
          for (int x = 0; x < mw; ++x) {
            const double dy = (y + 0.5 - cy) / up;
            const double dx = (x + 0.5 - cx) / up;
            const double d2 = dy * dy + dx * dx;
            if (d2 < radius * radius)
              kernel_(cell, static_cast<Eigen::Index>(y) * mw + x) =
                  1.0 - d2 / (radius * radius);
          }
        }
      }
    }
  }

  ModelDims dims_;
  std::uint64_t seed_;
  EmbeddingCache cache_;
  FrequencyMatrix freq_;
  DpeGrid dpe_;
  Eigen::MatrixXd label_embeds_;  // 3 x d
  Eigen::RowVectorXd sem_proj_;   // 1 x (sem_channels-1)
  Eigen::RowVectorXd img_proj_;   // 1 x image_embed_channels
  Eigen::MatrixXd token_map_;     // d x d
  Eigen::MatrixXd kernel_;        // cells x mask pixels
  int embed_computes_ = 0;
};

// Configuration surface for the released foundation checkpoints. Inference
// for them is not linked into this build; construction validates the paths
// and reports exactly what is missing and how to obtain it.
struct RealBackboneConfig {
  std::string semantic_checkpoint;  // text-conditioned encoder weights
  std::string decoder_checkpoint;   // image encoder + mask decoder weights
};

inline std::unique_ptr<Backbones> open_real_backbones(const RealBackboneConfig& cfg) {
  namespace fs = std::filesystem;
  if (cfg.semantic_checkpoint.empty() || !fs::exists(cfg.semantic_checkpoint))
    throw ConfigError(
        "real backbones: semantic encoder checkpoint not found at '" +
        cfg.semantic_checkpoint +
        "'; download the released CLIPSeg ViT-B/16 (reduce_dim=64) weights and "
        "set backbones.semantic_checkpoint to the file path");
  if (cfg.decoder_checkpoint.empty() || !fs::exists(cfg.decoder_checkpoint))
    throw ConfigError(
        "real backbones: mask decoder checkpoint not found at '" +
        cfg.decoder_checkpoint +
        "'; download the released SAM ViT-L weights and set "
        "backbones.decoder_checkpoint to the file path");
  throw ConfigError(
      "real backbones: this build ships the stub gateway only; in-process "
      "ViT inference requires an external runtime (see README, section "
      "'Real backbones').");
}

inline std::unique_ptr<StubBackbones> make_stub_backbones(const ModelDims& dims,
                                                          std::uint64_t seed,
                                                          std::size_t cache = 0) {
  return std::make_unique<StubBackbones>(dims, seed, cache);
}

}  // namespace dloseg
