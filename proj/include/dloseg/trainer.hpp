#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "dloseg/adapter.hpp"
#include "dloseg/augment.hpp"
#include "dloseg/backbones.hpp"
#include "dloseg/dataset.hpp"
#include "dloseg/pipeline.hpp"

namespace dloseg {

struct TrainConfig {
  int epochs = 50;
  double peak_lr = 8e-4;
  double warmup_epochs = 5.0;
  double weight_decay = 0.01;
  int batch_size = 1;  // the protocol trains with single-image batches
  std::uint64_t seed = 0;
  int steps_per_epoch = 0;  // 0: one pass over the train split
  double lambda_cls = 1.0;  // 0 trains the prompt encoder alone (staged mode)
  double grad_clip = 1.0;
  bool augment_enabled = true;
  std::string backbone_mode = "stub";  // stub | real
  std::uint64_t backbone_seed = 1234;
  std::size_t embed_cache = 8;
  std::string dataset_root;
  std::string run_dir = "run";
  std::string text_prompt = "cables";
  std::string val_split = "val";
  AugmentConfig aug;
  ModelDims dims;
  LossConfig loss;
  std::string semantic_checkpoint;
  std::string decoder_checkpoint;
};

inline nlohmann::json train_config_to_json(const TrainConfig& c) {
  nlohmann::json j;
  j["epochs"] = c.epochs;
  j["peak_lr"] = c.peak_lr;
  j["warmup_epochs"] = c.warmup_epochs;
  j["weight_decay"] = c.weight_decay;
  j["batch_size"] = c.batch_size;
  j["seed"] = c.seed;
  j["steps_per_epoch"] = c.steps_per_epoch;
  j["lambda_cls"] = c.lambda_cls;
  j["grad_clip"] = c.grad_clip;
  j["augment_enabled"] = c.augment_enabled;
  j["backbone_mode"] = c.backbone_mode;
  j["backbone_seed"] = c.backbone_seed;
  j["embed_cache"] = c.embed_cache;
  j["dataset_root"] = c.dataset_root;
  j["run_dir"] = c.run_dir;
  j["text_prompt"] = c.text_prompt;
  j["val_split"] = c.val_split;
  j["augment"] = {{"p_grayscale", c.aug.p_grayscale}, {"p_jitter", c.aug.p_jitter},
                  {"p_blur", c.aug.p_blur},           {"p_noise", c.aug.p_noise},
                  {"p_patch", c.aug.p_patch},         {"jitter_lo", c.aug.jitter_lo},
                  {"jitter_hi", c.aug.jitter_hi},     {"blur_sigma_lo", c.aug.blur_sigma_lo},
                  {"blur_sigma_hi", c.aug.blur_sigma_hi}, {"noise_sigma", c.aug.noise_sigma},
                  {"patch_area_fraction", c.aug.patch_area_fraction}};
  j["dims"] = {{"grid_h", c.dims.grid_h},
               {"grid_w", c.dims.grid_w},
               {"sem_channels", c.dims.sem_channels},
               {"embed_dim", c.dims.embed_dim},
               {"heads", c.dims.heads},
               {"n_prompts", c.dims.n_prompts},
               {"points_per_prompt", c.dims.points_per_prompt},
               {"mlp_hidden", c.dims.mlp_hidden},
               {"image_embed_hw", c.dims.image_embed_hw},
               {"image_embed_channels", c.dims.image_embed_channels},
               {"mask_upsample", c.dims.mask_upsample}};
  j["loss"] = {{"focal_weight", c.loss.focal_weight},
               {"dice_weight", c.loss.dice_weight},
               {"focal_gamma", c.loss.focal_gamma},
               {"focal_alpha", c.loss.focal_alpha},
               {"dice_epsilon", c.loss.dice_epsilon},
               {"bce_pos_weight", c.loss.bce_pos_weight},
               {"lambda_cls", c.loss.lambda_cls}};
  j["semantic_checkpoint"] = c.semantic_checkpoint;
  j["decoder_checkpoint"] = c.decoder_checkpoint;
  return j;
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  auto get = [&](const char* key, auto fallback) {
    using T = decltype(fallback);
    return j.contains(key) ? j.at(key).get<T>() : fallback;
  };
  c.epochs = get("epochs", c.epochs);
  c.peak_lr = get("peak_lr", c.peak_lr);
  c.warmup_epochs = get("warmup_epochs", c.warmup_epochs);
  c.weight_decay = get("weight_decay", c.weight_decay);
  c.batch_size = get("batch_size", c.batch_size);
  c.seed = get("seed", c.seed);
  c.steps_per_epoch = get("steps_per_epoch", c.steps_per_epoch);
  c.lambda_cls = get("lambda_cls", c.lambda_cls);
  c.grad_clip = get("grad_clip", c.grad_clip);
  c.augment_enabled = get("augment_enabled", c.augment_enabled);
  c.backbone_mode = get("backbone_mode", c.backbone_mode);
  c.backbone_seed = get("backbone_seed", c.backbone_seed);
  c.embed_cache = get("embed_cache", c.embed_cache);
  c.dataset_root = get("dataset_root", c.dataset_root);
  c.run_dir = get("run_dir", c.run_dir);
  c.text_prompt = get("text_prompt", c.text_prompt);
  c.val_split = get("val_split", c.val_split);
  if (j.contains("augment")) {
    const auto& a = j.at("augment");
    auto ga = [&](const char* key, double fb) {
      return a.contains(key) ? a.at(key).get<double>() : fb;
    };
    c.aug.p_grayscale = ga("p_grayscale", c.aug.p_grayscale);
    c.aug.p_jitter = ga("p_jitter", c.aug.p_jitter);
    c.aug.p_blur = ga("p_blur", c.aug.p_blur);
    c.aug.p_noise = ga("p_noise", c.aug.p_noise);
    c.aug.p_patch = ga("p_patch", c.aug.p_patch);
    c.aug.jitter_lo = ga("jitter_lo", c.aug.jitter_lo);
    c.aug.jitter_hi = ga("jitter_hi", c.aug.jitter_hi);
    c.aug.blur_sigma_lo = ga("blur_sigma_lo", c.aug.blur_sigma_lo);
    c.aug.blur_sigma_hi = ga("blur_sigma_hi", c.aug.blur_sigma_hi);
    c.aug.noise_sigma = ga("noise_sigma", c.aug.noise_sigma);
    c.aug.patch_area_fraction = ga("patch_area_fraction", c.aug.patch_area_fraction);
  }
  if (j.contains("dims")) c.dims = Adapter::dims_from_json(j.at("dims"));
  if (j.contains("loss")) {
    const auto& l = j.at("loss");
    auto gl = [&](const char* key, double fb) {
      return l.contains(key) ? l.at(key).get<double>() : fb;
    };
    c.loss.focal_weight = gl("focal_weight", c.loss.focal_weight);
    c.loss.dice_weight = gl("dice_weight", c.loss.dice_weight);
    c.loss.focal_gamma = gl("focal_gamma", c.loss.focal_gamma);
    c.loss.focal_alpha = gl("focal_alpha", c.loss.focal_alpha);
    c.loss.dice_epsilon = gl("dice_epsilon", c.loss.dice_epsilon);
    c.loss.bce_pos_weight = gl("bce_pos_weight", c.loss.bce_pos_weight);
    c.loss.lambda_cls = gl("lambda_cls", c.loss.lambda_cls);
  }
  c.semantic_checkpoint = get("semantic_checkpoint", c.semantic_checkpoint);
  c.decoder_checkpoint = get("decoder_checkpoint", c.decoder_checkpoint);
  return c;
}

// Linear warmup to the peak over warmup_epochs, then cosine decay to zero at
// the final epoch. Continuous, with the maximum exactly at warmup end.
inline double lr_at(double epoch, const TrainConfig& cfg) {
  require(epoch >= 0.0 && epoch <= cfg.epochs, "lr_at: epoch out of range");
  if (epoch <= cfg.warmup_epochs)
    return cfg.warmup_epochs == 0.0 ? cfg.peak_lr
                                    : cfg.peak_lr * epoch / cfg.warmup_epochs;
  const double progress =
      (epoch - cfg.warmup_epochs) / (static_cast<double>(cfg.epochs) - cfg.warmup_epochs);
  return cfg.peak_lr * 0.5 * (1.0 + std::cos(M_PI * progress));
}

struct StepBreakdown {
  double total = 0.0;
  double seg = 0.0;
  double cls = 0.0;
  int matched = 0;
  double lr = 0.0;
  bool clipped = false;
};

struct FitResult {
  std::string best_checkpoint;
  std::string last_checkpoint;
  double best_val_miou = 0.0;
  long steps = 0;
};

// End-to-end training driver with frozen backbones: only adapter parameters
// receive gradient updates. Single-writer; one step mutates state at a time.
class Trainer {
 public:
  explicit Trainer(const TrainConfig& cfg)
      : cfg_(cfg), rng_(cfg.seed) {
    require(cfg_.batch_size == 1, "trainer: the protocol fixes batch_size at 1");
    if (cfg_.backbone_mode != "stub")
      open_real_backbones({cfg_.semantic_checkpoint, cfg_.decoder_checkpoint});
    backbones_ = std::make_unique<StubBackbones>(cfg_.dims, cfg_.backbone_seed,
                                                 cfg_.embed_cache);
    Rng init_rng(fnv1a("adapter-init", cfg_.seed));
    adapter_ = Adapter(cfg_.dims, backbones_->label_embeddings(), init_rng);
  }

  Adapter& adapter() { return adapter_; }
  StubBackbones& backbones() { return *backbones_; }
  const TrainConfig& config() const { return cfg_; }
  long global_step() const { return global_step_; }
  int epoch() const { return epoch_; }

  std::vector<ad::Parameter*> trainable_parameters() {
    return cfg_.lambda_cls == 0.0 ? adapter_.encoder_parameters()
                                  : adapter_.parameters();
  }

  // One optimizer step on one record: augment, embed, encode, decode, match,
  // loss, backprop, AdamW update.
  StepBreakdown train_step(const InstanceRecord& rec) {
    const double epoch_f =
        static_cast<double>(global_step_) / std::max(1, resolved_steps_per_epoch_);
    StepBreakdown out;
    out.lr = lr_at(std::min(epoch_f, static_cast<double>(cfg_.epochs)), cfg_);

    cv::Mat img =
        cfg_.augment_enabled ? augment(rec.image, rng_, cfg_.aug) : rec.image;
    SemanticGrid grid = backbones_->semantic_grid(img, cfg_.text_prompt);
    ImageEmbedding emb = backbones_->image_embedding(img);
    (void)emb;  // stub decoding reads geometry from the DPE; kept for contract parity

    ad::Tape t;
    PromptGraph g = adapter_.encoder.encode_graph(t, grid, backbones_->dpe_grid(), &rng_);
    DecodeGraphOutput dec =
        backbones_->decode_graph(t, g.final_tokens, g.category_logits);

    std::vector<MaskArray> pred_lowres;
    for (int k = 0; k < cfg_.dims.n_prompts; ++k)
      pred_lowres.push_back(backbones_->mask_row_to_array(dec.masks.value().row(k)));
    std::vector<MaskArray> gt_lowres;
    std::vector<ad::Mat> gt_rows;
    for (const cv::Mat& m : rec.submasks) {
      MaskArray low = downsample_binary(mask_to_array(m), cfg_.dims.mask_h(),
                                        cfg_.dims.mask_w());
      ad::Mat row(1, low.size());
      for (int y = 0; y < low.rows(); ++y)
        for (int x = 0; x < low.cols(); ++x) row(0, y * low.cols() + x) = low(y, x);
      gt_lowres.push_back(std::move(low));
      gt_rows.push_back(std::move(row));
    }

    MatchResult match =
        solve_assignment(cost_matrix(pred_lowres, gt_lowres, cfg_.loss));
    out.matched = static_cast<int>(match.pairs.size());

    ad::Var seg;
    if (match.pairs.empty()) {
      std::cerr << "[dloseg] warning: no matched pairs in step " << global_step_ << "\n";
      seg = t.constant(ad::Mat::Zero(1, 1));
    } else {
      for (std::size_t p = 0; p < match.pairs.size(); ++p) {
        const auto& [pi, gj] = match.pairs[p];
        ad::Var pair_loss = combined_pair_loss_graph(
            ad::slice_rows(dec.masks, pi, 1), gt_rows[gj], cfg_.loss);
        seg = p == 0 ? pair_loss : ad::add(seg, pair_loss);
      }
      seg = ad::scale(seg, 1.0 / static_cast<double>(match.pairs.size()));
    }

    ad::Var total = seg;
    if (cfg_.lambda_cls != 0.0) {
      Eigen::ArrayXd labels = labels_from_matching(match, cfg_.dims.n_prompts);
      ad::Var queries = adapter_.classifier.pool_prompts(t, g.tokens);
      ad::Var logits =
          adapter_.classifier.classify_graph(t, queries, dec.mask_tokens, &rng_);
      ad::Var cls = weighted_bce_graph(logits, labels, cfg_.loss.bce_pos_weight);
      out.cls = cls.value()(0, 0);
      total = ad::add(seg, ad::scale(cls, cfg_.lambda_cls));
    }
    out.seg = seg.value()(0, 0);
    out.total = total.value()(0, 0);
    if (!std::isfinite(out.total)) {
      dump_state("crash_state.ckpt");
      throw std::runtime_error("trainer: non-finite loss at step " +
                               std::to_string(global_step_) + "; state dumped");
    }

    auto params = trainable_parameters();
    opt_.weight_decay = cfg_.weight_decay;
    opt_.clip_norm = cfg_.grad_clip;
    opt_.zero_grad(params);
    t.backward(total);
    opt_.step(params, out.lr);
    out.clipped = opt_.clipped_last_step;
    ++global_step_;
    return out;
  }

  // Mean eval-mode loss (no dropout, no augmentation) over a set of records.
  double eval_mode_mean_loss(const std::vector<InstanceRecord>& records) {
    double acc = 0.0;
    for (const InstanceRecord& rec : records) {
      ForwardResult f = run_forward(*backbones_, adapter_, rec.image, cfg_.text_prompt);
      std::vector<MaskArray> gt_lowres;
      for (const cv::Mat& m : rec.submasks)
        gt_lowres.push_back(downsample_binary(mask_to_array(m), cfg_.dims.mask_h(),
                                              cfg_.dims.mask_w()));
      MatchResult match =
          solve_assignment(cost_matrix(f.bundle.masks, gt_lowres, cfg_.loss));
      std::vector<MaskArray> mp, mg;
      for (const auto& [pi, gj] : match.pairs) {
        mp.push_back(f.bundle.masks[pi]);
        mg.push_back(gt_lowres[gj]);
      }
      const double seg = segmentation_loss(mp, mg, cfg_.loss);
      Eigen::ArrayXd labels = labels_from_matching(match, f.bundle.count());
      const double cls = weighted_bce(f.cls.logits.array(), labels,
                                      cfg_.loss.bce_pos_weight);
      acc += total_loss(seg, cls, cfg_.lambda_cls);
    }
    return acc / static_cast<double>(records.size());
  }

  using StepCallback = std::function<void(long step, const StepBreakdown&)>;

  FitResult fit(const StepCallback& on_step = nullptr) {
    namespace fs = std::filesystem;
    DatasetManifest train_manifest = scan_dataset(cfg_.dataset_root, "train");
    require(!train_manifest.ids.empty(), "trainer: empty train split");
    DatasetManifest val_manifest = train_manifest;
    if (fs::exists(fs::path(cfg_.dataset_root) / cfg_.val_split))
      val_manifest = scan_dataset(cfg_.dataset_root, cfg_.val_split);
    else
      std::cerr << "[dloseg] warning: no '" << cfg_.val_split
                << "' split; validating on train\n";

    std::vector<InstanceRecord> records;
    for (const std::string& id : train_manifest.ids)
      records.push_back(load_record(train_manifest, id));

    resolved_steps_per_epoch_ = cfg_.steps_per_epoch > 0
                                    ? cfg_.steps_per_epoch
                                    : static_cast<int>(records.size());

    fs::create_directories(cfg_.run_dir);
    write_manifest();
    const std::string csv_path = cfg_.run_dir + "/metrics.csv";
    std::ofstream csv;
    if (epoch_ == 0) {
      csv.open(csv_path);
      csv << "epoch,lr,seg_loss,cls_loss,val_miou_oracle,val_miou,val_cls_acc\n";
    } else {
      csv.open(csv_path, std::ios::app);
    }

    const std::uint64_t frozen_before = backbones_->state_fingerprint();
    std::cout << "[dloseg] trainable parameters: "
              << adapter_.trainable_parameter_count() << "\n";

    FitResult result;
    for (; epoch_ < cfg_.epochs; ++epoch_) {
      std::vector<int> order = epoch_order(static_cast<int>(records.size()));
      double seg_sum = 0.0, cls_sum = 0.0;
      for (int s = 0; s < resolved_steps_per_epoch_; ++s) {
        const InstanceRecord& rec = records[order[s % order.size()]];
        StepBreakdown b = train_step(rec);
        seg_sum += b.seg;
        cls_sum += b.cls;
        if (on_step) on_step(global_step_ - 1, b);
      }

      EvalProtocol proto;
      proto.cost_cfg = cfg_.loss;
      EvalReport oracle = evaluate_split(*backbones_, adapter_, val_manifest,
                                         EvalMode::Oracle, cfg_.text_prompt, proto);
      EvalReport cls_rep = evaluate_split(*backbones_, adapter_, val_manifest,
                                          EvalMode::Classifier, cfg_.text_prompt, proto);
      const double acc =
          classifier_accuracy(*backbones_, adapter_, val_manifest, cfg_.text_prompt, proto);

      const double lr_now = lr_at(std::min<double>(epoch_ + 1, cfg_.epochs), cfg_);
      csv << epoch_ << "," << lr_now << "," << seg_sum / resolved_steps_per_epoch_
          << "," << cls_sum / resolved_steps_per_epoch_ << ","
          << oracle.miou_percent / 100.0 << "," << cls_rep.miou_percent / 100.0
          << "," << acc << "\n";
      csv.flush();

      save_state(cfg_.run_dir + "/last.ckpt");
      if (cls_rep.miou_percent > best_val_miou_) {
        best_val_miou_ = cls_rep.miou_percent;
        adapter_.save_checkpoint(cfg_.run_dir + "/best.ckpt");
      }
    }

    require(backbones_->state_fingerprint() == frozen_before,
            "trainer: frozen backbone state changed during training");
    result.best_checkpoint = cfg_.run_dir + "/best.ckpt";
    result.last_checkpoint = cfg_.run_dir + "/last.ckpt";
    result.best_val_miou = best_val_miou_ / 100.0;
    result.steps = global_step_;
    return result;
  }

  void save_state(const std::string& path) {
    nlohmann::json extra;
    extra["train_state"] = {{"global_step", global_step_},
                            {"epoch", epoch_},
                            {"best_val_miou", best_val_miou_},
                            {"adam_step_count", opt_.step_count},
                            {"rng", rng_.serialize()},
                            {"steps_per_epoch", resolved_steps_per_epoch_}};
    adapter_.save_checkpoint(path, /*include_optimizer_state=*/true, extra);
  }

  void load_state(const std::string& path) {
    nlohmann::json meta = adapter_.load_checkpoint(path, /*load_optimizer_state=*/true);
    if (!meta.contains("train_state"))
      throw CheckpointError("not a training state checkpoint: " + path);
    const auto& ts = meta.at("train_state");
    global_step_ = ts.at("global_step").get<long>();
    epoch_ = ts.at("epoch").get<int>();
    best_val_miou_ = ts.at("best_val_miou").get<double>();
    opt_.step_count = ts.at("adam_step_count").get<long>();
    resolved_steps_per_epoch_ = ts.at("steps_per_epoch").get<int>();
    rng_.deserialize(ts.at("rng").get<std::string>());
  }

  static Trainer resume(const std::string& run_dir) {
    std::ifstream in(run_dir + "/manifest.json");
    if (!in) throw ConfigError("resume: no manifest.json under " + run_dir);
    nlohmann::json manifest = nlohmann::json::parse(in);
    TrainConfig cfg = train_config_from_json(manifest.at("config"));
    Trainer t(cfg);
    t.load_state(run_dir + "/last.ckpt");
    return t;
  }

 private:
  std::vector<int> epoch_order(int n) {
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng(fnv1a("epoch-order", cfg_.seed) + static_cast<std::uint64_t>(epoch_));
    for (int i = n - 1; i > 0; --i)
      std::swap(order[i], order[shuffle_rng.uniform_int(0, i)]);
    return order;
  }

  void write_manifest() {
    nlohmann::json m;
    m["command"] = "train";
    m["config"] = train_config_to_json(cfg_);
    m["seed"] = cfg_.seed;
    m["backbone_mode"] = cfg_.backbone_mode;
    m["code_version"] = DLOSEG_VERSION;
    m["trainable_parameters"] = adapter_.trainable_parameter_count();
    m["started_unix"] = static_cast<long>(
        std::chrono::duration_cast<std::chrono::seconds>(
            std::chrono::system_clock::now().time_since_epoch())
            .count());
    std::ofstream out(cfg_.run_dir + "/manifest.json");
    out << m.dump(2) << "\n";
  }

  void dump_state(const std::string& name) {
    try {
      std::filesystem::create_directories(cfg_.run_dir);
      save_state(cfg_.run_dir + "/" + name);
    } catch (...) {
    }
  }

  TrainConfig cfg_;
  Rng rng_;
  std::unique_ptr<StubBackbones> backbones_;
  Adapter adapter_;
  nn::AdamW opt_;
  long global_step_ = 0;
  int epoch_ = 0;
  double best_val_miou_ = -1.0;
  int resolved_steps_per_epoch_ = 1;
};

}  // namespace dloseg
