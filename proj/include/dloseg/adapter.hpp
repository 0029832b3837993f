#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "dloseg/checkpoint.hpp"
#include "dloseg/mask_classifier.hpp"
#include "dloseg/prompt_encoder.hpp"

namespace dloseg {

// The full trainable adapter: prompt encoder plus mask classifier. Both
// serialize into one checkpoint file; loading refuses hyperparameter
// mismatches.
struct Adapter {
  ModelDims dims;
  PromptEncoder encoder;
  MaskClassifier classifier;

  Adapter() = default;
  Adapter(const ModelDims& d, const Eigen::MatrixXd& label_embeds, Rng& rng)
      : dims(d), encoder(d, label_embeds, rng), classifier(d, rng) {}

  std::vector<ad::Parameter*> parameters() {
    std::vector<ad::Parameter*> out;
    encoder.collect(out);
    classifier.collect(out);
    return out;
  }

  std::vector<ad::Parameter*> encoder_parameters() {
    std::vector<ad::Parameter*> out;
    encoder.collect(out);
    return out;
  }

  std::vector<ad::Parameter*> classifier_parameters() {
    std::vector<ad::Parameter*> out;
    classifier.collect(out);
    return out;
  }

  Eigen::Index trainable_parameter_count() {
    return nn::parameter_count(parameters());
  }

  nlohmann::json dims_json() const {
    return {{"grid_h", dims.grid_h},
            {"grid_w", dims.grid_w},
            {"sem_channels", dims.sem_channels},
            {"embed_dim", dims.embed_dim},
            {"heads", dims.heads},
            {"n_prompts", dims.n_prompts},
            {"points_per_prompt", dims.points_per_prompt},
            {"mlp_hidden", dims.mlp_hidden},
            {"image_embed_hw", dims.image_embed_hw},
            {"image_embed_channels", dims.image_embed_channels},
            {"mask_upsample", dims.mask_upsample}};
  }

  static ModelDims dims_from_json(const nlohmann::json& j) {
    ModelDims d;
    d.grid_h = j.at("grid_h");
    d.grid_w = j.at("grid_w");
    d.sem_channels = j.at("sem_channels");
    d.embed_dim = j.at("embed_dim");
    d.heads = j.at("heads");
    d.n_prompts = j.at("n_prompts");
    d.points_per_prompt = j.at("points_per_prompt");
    d.mlp_hidden = j.at("mlp_hidden");
    d.image_embed_hw = j.at("image_embed_hw");
    d.image_embed_channels = j.at("image_embed_channels");
    d.mask_upsample = j.at("mask_upsample");
    return d;
  }

  // include_optimizer_state additionally stores AdamW moments, which makes
  // the file a full training snapshot rather than an inference checkpoint.
  void save_checkpoint(const std::string& path, bool include_optimizer_state = false,
                       const nlohmann::json& extra_meta = nlohmann::json::object()) {
    nlohmann::json meta = extra_meta;
    meta["kind"] = "adapter_checkpoint";
    meta["dims"] = dims_json();
    meta["optimizer_state"] = include_optimizer_state;
    std::vector<tensorfile::NamedTensor> tensors;
    tensors.push_back({"frozen.label_embeds", encoder.label_embeds});
    for (ad::Parameter* p : parameters()) {
      tensors.push_back({p->name, p->value});
      if (include_optimizer_state) {
        tensors.push_back({p->name + ".adam_m", p->adam_m});
        tensors.push_back({p->name + ".adam_v", p->adam_v});
      }
    }
    tensorfile::write(path, meta, tensors);
  }

  // Loads parameters into this adapter. Dimensions embedded in the file must
  // match the adapter's construction-time hyperparameters exactly.
  nlohmann::json load_checkpoint(const std::string& path,
                                 bool load_optimizer_state = false) {
    tensorfile::Contents c = tensorfile::read(path);
    if (c.meta.value("kind", "") != "adapter_checkpoint")
      throw CheckpointError("not an adapter checkpoint: " + path);
    if (c.meta.at("dims") != dims_json())
      throw CheckpointError(
          "checkpoint hyperparameters disagree with the configured model (" +
          c.meta.at("dims").dump() + " vs " + dims_json().dump() + ")");
    if (load_optimizer_state && !c.meta.value("optimizer_state", false))
      throw CheckpointError("checkpoint has no optimizer state: " + path);
    encoder.label_embeds = c.at("frozen.label_embeds");
    for (ad::Parameter* p : parameters()) {
      const Eigen::MatrixXd& v = c.at(p->name);
      if (v.rows() != p->value.rows() || v.cols() != p->value.cols())
        throw CheckpointError("checkpoint tensor shape mismatch for " + p->name);
      p->value = v;
      if (load_optimizer_state) {
        p->adam_m = c.at(p->name + ".adam_m");
        p->adam_v = c.at(p->name + ".adam_v");
      }
    }
    return c.meta;
  }
};

}  // namespace dloseg
