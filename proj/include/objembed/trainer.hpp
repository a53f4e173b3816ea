#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "objembed/config.hpp"
#include "objembed/encoder.hpp"
#include "objembed/inputs.hpp"
#include "objembed/io.hpp"
#include "objembed/model.hpp"
#include "objembed/scenegen.hpp"

namespace objembed {

/// Assembles the batch for a training step. Every choice is a pure function
/// of (seed, step), which is what makes resumed runs bit-exact.
class BatchBuilder {
 public:
  BatchBuilder(const RunConfig& cfg, const Vocabulary& vocab, const std::vector<Scene>& scenes)
      : cfg_(cfg), vocab_(vocab), scenes_(scenes) {
    if (scenes_.empty()) throw ConfigError("training dataset is empty");
  }

  TrainBatch build(std::int64_t step) const {
    TrainBatch batch;
    std::map<std::vector<int>, int> text_index;
    auto add_text = [&](TokenSequence seq) {
      auto [it, fresh] = text_index.emplace(seq.ids, int(batch.texts.size()));
      if (fresh) batch.texts.push_back(std::move(seq));
      return it->second;
    };
    const auto layout = cfg_.layout();
    const std::int64_t B = cfg_.train.batch_size;
    for (std::int64_t i = 0; i < B; ++i) {
      const std::int64_t item = step * B + i;
      const Scene& scene = scenes_[scene_for(item)];
      Rng rng(derive_seed(cfg_.train.seed, "item", std::uint64_t(item)));
      const TaskKind task = uniform(rng, 0, 1) < 0.5 ? TaskKind::detection : TaskKind::referring;
      const auto instruction = instruction_tokens(task, &rng);
      const auto proposals = pick_proposals(scene, rng);
      const auto gts = scene.gt_boxes();

      std::vector<std::vector<std::string>> texts;
      std::vector<std::vector<int>> groups;
      if (task == TaskKind::detection) {
        for (int c = 0; c < int(kShapes.size()); ++c) {
          const auto d = class_description(c);
          texts.push_back(d.tokens());
          groups.push_back(matching_objects(scene, d));
        }
      } else {
        for (std::size_t o = 0; o < scene.objects.size(); ++o) {
          const bool full = uniform(rng, 0, 1) < cfg_.train.referring_full_prob;
          const auto d = full ? full_description(scene.objects[o], scene.width, scene.height, false)
                              : describe(scene, o, DescriptionKind::referring);
          texts.push_back(d.tokens());
          groups.push_back(matching_objects(scene, d));
        }
      }

      TrainImage img;
      const auto grid = render_features(scene, cfg_.data.channels, cfg_.data.noise_sigma);
      img.seq = scene_sequence(cfg_, vocab_, grid, proposals, instruction);
      img.labels = assign_grouped_labels(proposals, gts, groups, cfg_.loss.iou_pos_threshold);
      for (const auto& t : texts) img.local_texts.push_back(add_text(build_local_text_sequence(vocab_, layout, t)));
      img.short_text = add_text(build_global_text_sequence(vocab_, layout, scene.short_caption));
      img.long_text = add_text(build_global_text_sequence(vocab_, layout, scene.long_caption));
      img.use_long = uniform(rng, 0, 1) < 0.5;
      batch.images.push_back(std::move(img));
    }
    return batch;
  }

 private:
  std::size_t scene_for(std::int64_t item) const {
    const std::int64_t n = std::int64_t(scenes_.size());
    const std::int64_t epoch = item / n;
    if (epoch != cached_epoch_) {
      order_.resize(scenes_.size());
      std::iota(order_.begin(), order_.end(), std::size_t(0));
      Rng rng(derive_seed(cfg_.train.seed, "epoch", std::uint64_t(epoch)));
      std::shuffle(order_.begin(), order_.end(), rng);
      cached_epoch_ = epoch;
    }
    return order_[std::size_t(item % n)];
  }

  /// Random subset of the scene's proposals; with probability mix_gt_prob the
  /// ground-truth boxes take the first slots of the subset.
  std::vector<Box> pick_proposals(const Scene& scene, Rng& rng) const {
    std::vector<std::size_t> idx(scene.proposals.size());
    std::iota(idx.begin(), idx.end(), std::size_t(0));
    std::shuffle(idx.begin(), idx.end(), rng);
    const std::size_t n = std::min(idx.size(), std::size_t(cfg_.train.train_proposals));
    std::vector<Box> out;
    for (std::size_t k = 0; k < n; ++k) out.push_back(scene.proposals[idx[k]]);
    if (uniform(rng, 0, 1) < cfg_.train.mix_gt_prob) {
      for (std::size_t g = 0; g < scene.objects.size() && g < out.size(); ++g) out[g] = scene.objects[g].box;
      std::shuffle(out.begin(), out.end(), rng);
    }
    return out;
  }

  const RunConfig& cfg_;
  const Vocabulary& vocab_;
  const std::vector<Scene>& scenes_;
  mutable std::int64_t cached_epoch_ = -1;
  mutable std::vector<std::size_t> order_;
};

struct TrainState {
  ParamStore<float> params, adam_m, adam_v;
  std::int64_t step = 0;  // completed optimizer steps
};

struct Checkpoint {
  RunConfig config;
  Vocabulary vocab;
  TrainState state;
};

inline Checkpoint initial_checkpoint(const RunConfig& cfg) {
  Checkpoint ck;
  ck.config = cfg;
  ck.vocab = Vocabulary::standard();
  if (std::size_t(cfg.encoder.vocab_size) != ck.vocab.size())
    throw ConfigError("encoder.vocab_size does not match the standard vocabulary (" +
                      std::to_string(ck.vocab.size()) + ")");
  ck.state.params = init_params<float>(cfg.encoder, derive_seed(cfg.train.seed, "init"));
  ck.state.adam_m = ck.state.params.zeros_like();
  ck.state.adam_v = ck.state.params.zeros_like();
  return ck;
}

inline double learning_rate_at(const TrainConfig& t, std::int64_t step) {
  if (t.warmup_steps <= 0) return t.learning_rate;
  return t.learning_rate * std::min(1.0, double(step + 1) / double(t.warmup_steps));
}

/// One Adam update with bias correction; `step` is the 0-based step index.
inline void adam_update(TrainState& s, const ParamStore<float>& grads, const TrainConfig& t, std::int64_t step) {
  const double lr = learning_rate_at(t, step);
  const double b1 = t.beta1, b2 = t.beta2;
  const double c1 = 1.0 - std::pow(b1, double(step + 1));
  const double c2 = 1.0 - std::pow(b2, double(step + 1));
  auto& p = s.params.data();
  auto& m = s.adam_m.data();
  auto& v = s.adam_v.data();
  const auto& g = grads.data();
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double gi = g[i];
    m[i] = float(b1 * m[i] + (1 - b1) * gi);
    v[i] = float(b2 * v[i] + (1 - b2) * gi * gi);
    const double mhat = m[i] / c1, vhat = v[i] / c2;
    p[i] = float(p[i] - lr * mhat / (std::sqrt(vhat) + t.epsilon));
  }
}

struct StepRecord {
  std::int64_t step = 0;  // 1-based
  LossBreakdown loss;
};

inline std::string step_record_json(const StepRecord& r) {
  nlohmann::ordered_json j;
  j["step"] = r.step;
  j["L_region"] = r.loss.region;
  j["L_image"] = r.loss.image;
  j["L_iou"] = r.loss.iou;
  j["L_total"] = r.loss.total;
  return j.dump();
}

/// Runs steps until ck.state.step == until. on_step sees every completed step.
inline void train(Checkpoint& ck, const std::vector<Scene>& scenes, std::int64_t until,
                  const std::function<void(const StepRecord&)>& on_step = {}) {
  const RunConfig& cfg = ck.config;
  cfg.validate();
  const Encoder<float> enc(cfg.encoder);
  const BatchBuilder builder(cfg, ck.vocab, scenes);
  const auto objective = cfg.objective();
  while (ck.state.step < until) {
    const std::int64_t step = ck.state.step;
    const TrainBatch batch = builder.build(step);
    ParamStore<float> grads = ck.state.params.zeros_like();
    LossBreakdown loss;
    try {
      loss = compute_gradients(enc, ck.state.params, batch, cfg.loss, objective, &grads);
    } catch (const DivergenceError& e) {
      throw DivergenceError("step " + std::to_string(step + 1) + " (last finite step " + std::to_string(step) +
                            "): " + e.what());
    }
    double norm2 = 0;
    for (float g : grads.data()) norm2 += double(g) * g;
    if (!std::isfinite(norm2))
      throw DivergenceError("step " + std::to_string(step + 1) + " (last finite step " + std::to_string(step) +
                            "): non-finite gradient");
    if (cfg.train.max_grad_norm > 0 && std::sqrt(norm2) > cfg.train.max_grad_norm) {
      const float scale = float(cfg.train.max_grad_norm / std::sqrt(norm2));
      for (float& g : grads.data()) g *= scale;
    }
    adam_update(ck.state, grads, cfg.train, step);
    ck.state.step = step + 1;
    if (on_step) on_step({ck.state.step, loss});
  }
}

// Checkpoint file: "OBCK", u32 version, u32 header length, JSON header, then
// every tensor as little-endian f32 in manifest order.

inline constexpr std::uint32_t kCheckpointVersion = 1;

inline std::string serialize_checkpoint(const Checkpoint& ck) {
  nlohmann::ordered_json header;
  header["config"] = to_json(ck.config);
  header["vocabulary"] = ck.vocab.tokens();
  header["step"] = ck.state.step;
  nlohmann::ordered_json manifest = nlohmann::ordered_json::array();
  std::size_t offset = 0;
  auto describe = [&](const ParamStore<float>& store, const std::string& prefix) {
    for (const auto& t : store.tensors()) {
      manifest.push_back({{"name", prefix + t.name}, {"shape", t.shape}, {"offset", offset}});
      offset += t.size * 4;
    }
  };
  describe(ck.state.params, "");
  describe(ck.state.adam_m, "adam.m/");
  describe(ck.state.adam_v, "adam.v/");
  header["tensors"] = manifest;
  const std::string json = header.dump();

  std::string out = "OBCK";
  binio::put_u32(out, kCheckpointVersion);
  binio::put_u32(out, std::uint32_t(json.size()));
  out += json;
  out.reserve(out.size() + offset);
  for (const auto* store : {&ck.state.params, &ck.state.adam_m, &ck.state.adam_v})
    for (float f : store->data()) binio::put_f32(out, f);
  return out;
}

inline Checkpoint deserialize_checkpoint(std::string_view bytes) {
  binio::Cursor cur(bytes, "checkpoint");
  if (bytes.size() < 4 || bytes.substr(0, 4) != "OBCK") throw FormatError("unrecognized checkpoint");
  cur.take(4);
  const std::uint32_t version = cur.u32();
  if (version != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(version) + " (this reader handles " +
                      std::to_string(kCheckpointVersion) + ")");
  const std::uint32_t len = cur.u32();
  nlohmann::ordered_json header;
  try {
    header = nlohmann::ordered_json::parse(cur.take(len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("corrupt checkpoint header: ") + e.what());
  }

  Checkpoint ck;
  try {
    ck.config = run_config_from_json(header.at("config"));
    ck.vocab = Vocabulary(header.at("vocabulary").get<std::vector<std::string>>());
    ck.state.step = header.at("step").get<std::int64_t>();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint config invalid: ") + e.what());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("corrupt checkpoint header: ") + e.what());
  }
  if (std::size_t(ck.config.encoder.vocab_size) != ck.vocab.size())
    throw FormatError("checkpoint vocabulary size disagrees with its config");
  ck.state.params = make_param_layout<float>(ck.config.encoder);
  ck.state.adam_m = ck.state.params.zeros_like();
  ck.state.adam_v = ck.state.params.zeros_like();

  const auto& manifest = header.at("tensors");
  std::size_t k = 0, offset = 0;
  auto expect = [&](const ParamStore<float>& store, const std::string& prefix) {
    for (const auto& t : store.tensors()) {
      if (k >= manifest.size()) throw FormatError("checkpoint manifest is missing " + prefix + t.name);
      const auto& e = manifest[k++];
      if (e.at("name").get<std::string>() != prefix + t.name ||
          e.at("shape").get<std::vector<std::size_t>>() != t.shape || e.at("offset").get<std::size_t>() != offset)
        throw FormatError("checkpoint manifest mismatch at " + prefix + t.name);
      offset += t.size * 4;
    }
  };
  try {
    expect(ck.state.params, "");
    expect(ck.state.adam_m, "adam.m/");
    expect(ck.state.adam_v, "adam.v/");
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("corrupt checkpoint manifest: ") + e.what());
  }
  if (k != manifest.size()) throw FormatError("checkpoint manifest has unexpected tensors");
  if (cur.remaining() < offset) throw FormatError("truncated checkpoint");
  if (cur.remaining() > offset) throw FormatError("trailing bytes in checkpoint");
  for (auto* store : {&ck.state.params, &ck.state.adam_m, &ck.state.adam_v})
    for (float& f : store->data()) f = cur.f32();
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  write_file_atomic(path, serialize_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::string& path) { return deserialize_checkpoint(read_file(path)); }

struct GradCheckOptions {
  int random_entries = 6;  // sampled per tensor
  int top_entries = 3;     // largest analytic |g| per tensor
  double step = 1e-5;
  double floor = 1e-5;     // denominator floor for near-zero gradients
  bool inject_fault = false;
};

struct GradCheckReport {
  double max_rel_error = 0;
  std::string worst_param;
  std::size_t worst_entry = 0;
  double analytic = 0, numeric = 0;
  std::size_t entries_checked = 0;
  double loss = 0;

  bool passed(double tol = 1e-4) const { return max_rel_error < tol; }
};

/// Compares analytic gradients with central differences in double precision on
/// a small random batch drawn from cfg.data.
inline GradCheckReport grad_check(RunConfig cfg, std::uint64_t seed, const GradCheckOptions& opt = {}) {
  cfg.train.seed = seed;
  cfg.data.seed = derive_seed(seed, "gradcheck-data");
  cfg.data.scenes = cfg.train.batch_size;
  cfg.validate();
  const Vocabulary vocab = Vocabulary::standard();
  const auto scenes = generate_dataset(cfg.data);
  const BatchBuilder builder(cfg, vocab, scenes);
  const TrainBatch batch = builder.build(0);

  const Encoder<double> enc(cfg.encoder);
  ParamStore<double> p = init_params<double>(cfg.encoder, derive_seed(seed, "init"));
  // Move gains and heads off their initial constants so their gradients are exercised generically.
  Rng jitter(derive_seed(seed, "gradcheck-jitter"));
  for (double& v : p.data()) v += uniform(jitter, -0.05, 0.05);
  const auto objective = cfg.objective();

  ParamStore<double> grads = p.zeros_like();
  GradCheckReport report;
  report.loss = compute_gradients(enc, p, batch, cfg.loss, objective, &grads, 1).total;
  if (opt.inject_fault) {
    const std::size_t t = grads.index("layers.0.wq");
    grads.vec(t) *= 1.5;
  }

  Rng pick(derive_seed(seed, "gradcheck-entries"));
  for (std::size_t t = 0; t < p.tensors().size(); ++t) {
    const auto& info = p.info(t);
    std::vector<std::size_t> entries;
    std::vector<std::size_t> order(info.size);
    std::iota(order.begin(), order.end(), std::size_t(0));
    const auto g = grads.vec(t);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return std::abs(g(Eigen::Index(a))) > std::abs(g(Eigen::Index(b))); });
    for (std::size_t k = 0; k < order.size() && k < std::size_t(opt.top_entries); ++k) entries.push_back(order[k]);
    for (int k = 0; k < opt.random_entries; ++k)
      entries.push_back(std::size_t(uniform_int(pick, 0, int(info.size) - 1)));
    std::sort(entries.begin(), entries.end());
    entries.erase(std::unique(entries.begin(), entries.end()), entries.end());

    for (std::size_t e : entries) {
      double& w = p.data()[info.offset + e];
      const double saved = w;
      w = saved + opt.step;
      const double up = compute_gradients(enc, p, batch, cfg.loss, objective, nullptr, 1).total;
      w = saved - opt.step;
      const double down = compute_gradients(enc, p, batch, cfg.loss, objective, nullptr, 1).total;
      w = saved;
      const double numeric = (up - down) / (2 * opt.step);
      const double analytic = grads.data()[info.offset + e];
      const double rel = std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), opt.floor});
      ++report.entries_checked;
      if (rel > report.max_rel_error || report.worst_param.empty()) {
        report.max_rel_error = rel;
        report.worst_param = info.name;
        report.worst_entry = e;
        report.analytic = analytic;
        report.numeric = numeric;
      }
    }
  }
  return report;
}

}  // namespace objembed
