#pragma once

#include <cstdint>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "objembed/encoder.hpp"
#include "objembed/error.hpp"
#include "objembed/layout.hpp"
#include "objembed/model.hpp"
#include "objembed/objectives.hpp"
#include "objembed/scenegen.hpp"

namespace objembed {

using ojson = nlohmann::ordered_json;

struct TrainConfig {
  int steps = 20000;
  int batch_size = 8;
  double learning_rate = 1e-3;
  int warmup_steps = 200;
  double beta1 = 0.9, beta2 = 0.999, epsilon = 1e-8;
  std::uint64_t seed = 1234;
  int eval_every = 0;  // 0 disables periodic evaluation logging
  std::string checkpoint;
  TokenMode token_mode = TokenMode::dual_cls_iou;
  bool share_text_token = false;
  int global_tokens = 2;
  CaptionType caption_type = CaptionType::both;
  int train_proposals = 24;           // proposals sampled per image and step
  double referring_full_prob = 0.3;   // chance of a full-attribute referring text
  double mix_gt_prob = 0.5;           // chance an item's proposals include its ground-truth boxes
  double max_grad_norm = 0.0;         // 0 disables clipping

  void validate() const {
    if (steps <= 0) throw ConfigError("train.steps must be > 0");
    if (batch_size <= 0) throw ConfigError("train.batch_size must be > 0");
    if (!(learning_rate > 0)) throw ConfigError("train.learning_rate must be > 0");
    if (warmup_steps < 0) throw ConfigError("train.warmup_steps must be >= 0");
    if (global_tokens != 1 && global_tokens != 2) throw ConfigError("train.global_tokens must be 1 or 2");
    if (global_tokens == 2 && caption_type != CaptionType::both)
      throw ConfigError("two global tokens are supervised by both caption kinds");
    if (train_proposals <= 0) throw ConfigError("train.train_proposals must be > 0");
    if (!(referring_full_prob >= 0 && referring_full_prob <= 1) || !(mix_gt_prob >= 0 && mix_gt_prob <= 1))
      throw ConfigError("train probabilities must lie in [0,1]");
    if (max_grad_norm < 0) throw ConfigError("train.max_grad_norm must be >= 0");
  }
};

struct EvalConfig {
  bool nms = false;
  double nms_threshold = 0.7;
  std::vector<double> thresholds = {0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95};
  int k = 50;
  int max_dets = 100;
  double mix_fraction = 0.01;
  int heldout_scenes = 200;
  std::string caption_kind = "long";
  std::string gallery_task = "referring";

  void validate() const {
    if (k <= 0 || max_dets <= 0) throw ConfigError("eval.k and eval.max_dets must be > 0");
    if (thresholds.empty()) throw ConfigError("eval.thresholds must be nonempty");
    if (caption_kind != "short" && caption_kind != "long") throw ConfigError("eval.caption_kind must be short|long");
    if (gallery_task != "detection" && gallery_task != "referring")
      throw ConfigError("eval.gallery_task must be detection|referring");
  }
};

struct RunConfig {
  EncoderConfig encoder;
  LossConfig loss;
  TrainConfig train;
  GenConfig data;
  EvalConfig eval;

  LayoutOptions layout() const {
    LayoutOptions opt;
    opt.token_mode = train.token_mode;
    opt.share_text_token = train.share_text_token;
    opt.global_tokens = train.global_tokens;
    opt.patch_dim = encoder.patch_dim();
    opt.roi_dim = encoder.roi_dim();
    return opt;
  }

  ObjectiveOptions objective() const { return {train.token_mode, train.global_tokens, train.caption_type}; }

  void validate() const {
    encoder.validate();
    loss.validate();
    train.validate();
    data.validate();
    eval.validate();
    if (encoder.grid_channels != data.channels) throw ConfigError("encoder.grid_channels must equal data.channels");
    if (data.width % encoder.patch_size != 0 || data.height % encoder.patch_size != 0)
      throw ConfigError("encoder.patch_size must divide the canvas");
  }
};

namespace detail {

/// Reads `obj` into fields registered through `field`, rejecting keys that no
/// field claims.
class Reader {
 public:
  Reader(const ojson& obj, std::string section) : obj_(obj), section_(std::move(section)) {
    if (!obj_.is_object()) throw ConfigError("config section '" + section_ + "' must be an object");
  }

  template <typename V>
  Reader& field(const char* key, V& value) {
    seen_.insert(key);
    auto it = obj_.find(key);
    if (it == obj_.end()) return *this;
    try {
      value = it->template get<V>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError("config key '" + section_ + "." + key + "' has the wrong type");
    }
    return *this;
  }

  void finish() const {
    for (auto it = obj_.begin(); it != obj_.end(); ++it)
      if (!seen_.count(it.key())) throw ConfigError("unknown config key '" + section_ + "." + it.key() + "'");
  }

 private:
  const ojson& obj_;
  std::string section_;
  std::set<std::string> seen_;
};

}  // namespace detail

inline ojson to_json(const RunConfig& c) {
  ojson j;
  j["encoder"] = {{"d_model", c.encoder.d_model},       {"n_layers", c.encoder.n_layers},
                  {"n_heads", c.encoder.n_heads},       {"d_ff", c.encoder.d_ff},
                  {"max_seq_len", c.encoder.max_seq_len}, {"vocab_size", c.encoder.vocab_size},
                  {"roi_resolution", c.encoder.roi_resolution}, {"grid_channels", c.encoder.grid_channels},
                  {"patch_size", c.encoder.patch_size}, {"distance_bias", c.encoder.distance_bias}};
  j["loss"] = {{"gamma", c.loss.gamma},
               {"alpha", c.loss.alpha},
               {"lambda_region", c.loss.lambda_region},
               {"lambda_image", c.loss.lambda_image},
               {"lambda_iou", c.loss.lambda_iou},
               {"iou_pos_threshold", c.loss.iou_pos_threshold}};
  j["train"] = {{"steps", c.train.steps},
                {"batch_size", c.train.batch_size},
                {"learning_rate", c.train.learning_rate},
                {"warmup_steps", c.train.warmup_steps},
                {"beta1", c.train.beta1},
                {"beta2", c.train.beta2},
                {"epsilon", c.train.epsilon},
                {"seed", c.train.seed},
                {"eval_every", c.train.eval_every},
                {"checkpoint", c.train.checkpoint},
                {"token_mode", to_string(c.train.token_mode)},
                {"share_text_token", c.train.share_text_token},
                {"global_tokens", c.train.global_tokens},
                {"caption_type", to_string(c.train.caption_type)},
                {"train_proposals", c.train.train_proposals},
                {"referring_full_prob", c.train.referring_full_prob},
                {"mix_gt_prob", c.train.mix_gt_prob},
                {"max_grad_norm", c.train.max_grad_norm}};
  j["data"] = {{"seed", c.data.seed},
               {"scenes", c.data.scenes},
               {"min_objects", c.data.min_objects},
               {"max_objects", c.data.max_objects},
               {"proposals", c.data.proposals},
               {"jitter_per_band", c.data.jitter_per_band},
               {"jitter_bands", c.data.jitter_bands},
               {"band_halfwidth", c.data.band_halfwidth},
               {"gt_mix_fraction", c.data.gt_mix_fraction},
               {"width", c.data.width},
               {"height", c.data.height},
               {"channels", c.data.channels},
               {"noise_sigma", c.data.noise_sigma},
               {"id_offset", c.data.id_offset}};
  j["eval"] = {{"nms", c.eval.nms},
               {"nms_threshold", c.eval.nms_threshold},
               {"thresholds", c.eval.thresholds},
               {"k", c.eval.k},
               {"max_dets", c.eval.max_dets},
               {"mix_fraction", c.eval.mix_fraction},
               {"heldout_scenes", c.eval.heldout_scenes},
               {"caption_kind", c.eval.caption_kind},
               {"gallery_task", c.eval.gallery_task}};
  return j;
}

/// Missing keys keep their defaults; unknown keys are rejected. vocab_size is
/// filled from the standard vocabulary when absent or zero.
inline RunConfig run_config_from_json(const ojson& j) {
  RunConfig c;
  detail::Reader top(j, "config");
  ojson empty = ojson::object();
  auto section = [&](const char* name) -> const ojson& {
    auto it = j.find(name);
    return it == j.end() ? empty : *it;
  };
  ojson dummy;
  top.field("encoder", dummy).field("loss", dummy).field("train", dummy).field("data", dummy).field("eval", dummy);
  top.finish();

  detail::Reader(section("encoder"), "encoder")
      .field("d_model", c.encoder.d_model)
      .field("n_layers", c.encoder.n_layers)
      .field("n_heads", c.encoder.n_heads)
      .field("d_ff", c.encoder.d_ff)
      .field("max_seq_len", c.encoder.max_seq_len)
      .field("vocab_size", c.encoder.vocab_size)
      .field("roi_resolution", c.encoder.roi_resolution)
      .field("grid_channels", c.encoder.grid_channels)
      .field("patch_size", c.encoder.patch_size)
      .field("distance_bias", c.encoder.distance_bias)
      .finish();
  detail::Reader(section("loss"), "loss")
      .field("gamma", c.loss.gamma)
      .field("alpha", c.loss.alpha)
      .field("lambda_region", c.loss.lambda_region)
      .field("lambda_image", c.loss.lambda_image)
      .field("lambda_iou", c.loss.lambda_iou)
      .field("iou_pos_threshold", c.loss.iou_pos_threshold)
      .finish();
  std::string token_mode = to_string(c.train.token_mode), caption_type = to_string(c.train.caption_type);
  detail::Reader(section("train"), "train")
      .field("steps", c.train.steps)
      .field("batch_size", c.train.batch_size)
      .field("learning_rate", c.train.learning_rate)
      .field("warmup_steps", c.train.warmup_steps)
      .field("beta1", c.train.beta1)
      .field("beta2", c.train.beta2)
      .field("epsilon", c.train.epsilon)
      .field("seed", c.train.seed)
      .field("eval_every", c.train.eval_every)
      .field("checkpoint", c.train.checkpoint)
      .field("token_mode", token_mode)
      .field("share_text_token", c.train.share_text_token)
      .field("global_tokens", c.train.global_tokens)
      .field("caption_type", caption_type)
      .field("train_proposals", c.train.train_proposals)
      .field("referring_full_prob", c.train.referring_full_prob)
      .field("mix_gt_prob", c.train.mix_gt_prob)
      .field("max_grad_norm", c.train.max_grad_norm)
      .finish();
  c.train.token_mode = token_mode_from_string(token_mode);
  c.train.caption_type = caption_type_from_string(caption_type);
  detail::Reader(section("data"), "data")
      .field("seed", c.data.seed)
      .field("scenes", c.data.scenes)
      .field("min_objects", c.data.min_objects)
      .field("max_objects", c.data.max_objects)
      .field("proposals", c.data.proposals)
      .field("jitter_per_band", c.data.jitter_per_band)
      .field("jitter_bands", c.data.jitter_bands)
      .field("band_halfwidth", c.data.band_halfwidth)
      .field("gt_mix_fraction", c.data.gt_mix_fraction)
      .field("width", c.data.width)
      .field("height", c.data.height)
      .field("channels", c.data.channels)
      .field("noise_sigma", c.data.noise_sigma)
      .field("id_offset", c.data.id_offset)
      .finish();
  detail::Reader(section("eval"), "eval")
      .field("nms", c.eval.nms)
      .field("nms_threshold", c.eval.nms_threshold)
      .field("thresholds", c.eval.thresholds)
      .field("k", c.eval.k)
      .field("max_dets", c.eval.max_dets)
      .field("mix_fraction", c.eval.mix_fraction)
      .field("heldout_scenes", c.eval.heldout_scenes)
      .field("caption_kind", c.eval.caption_kind)
      .field("gallery_task", c.eval.gallery_task)
      .finish();
  if (c.encoder.vocab_size == 0) c.encoder.vocab_size = int(Vocabulary::standard().size());
  c.validate();
  return c;
}

inline RunConfig default_run_config() { return run_config_from_json(ojson::object()); }

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  ojson j;
  try {
    j = ojson::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("malformed config " + path + ": " + e.what());
  }
  return run_config_from_json(j);
}

/// 16 hex digits of FNV-1a over the canonical config dump.
inline std::string config_digest(const RunConfig& c) {
  const std::string s = to_json(c).dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << h;
  return os.str();
}

}  // namespace objembed
