#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "objembed/config.hpp"
#include "objembed/encoder.hpp"
#include "objembed/geometry.hpp"
#include "objembed/inputs.hpp"
#include "objembed/io.hpp"
#include "objembed/parallel.hpp"
#include "objembed/scenegen.hpp"
#include "objembed/trainer.hpp"

namespace objembed {

struct Detection {
  std::int64_t image_id = 0;
  Box box;
  int query = 0;
  double score = 0;
};

struct GroundTruth {
  std::int64_t image_id = 0;
  Box box;
  int query = 0;
};

/// IoU thresholds 0.50, 0.55, ..., 0.95, each computed as an exact decimal.
inline std::vector<double> coco_thresholds() {
  std::vector<double> t;
  for (int k = 0; k < 10; ++k) t.push_back(double(50 + 5 * k) / 100.0);
  return t;
}

struct ApResult {
  std::optional<double> ap, ap_small, ap_medium, ap_large;  // nullopt when no ground truth qualifies
};

namespace detail {

struct CocoTable {
  std::vector<double> ap;      // one entry per (threshold, query) with ground truth
  std::vector<double> recall;  // same indexing
};

/// COCO-style evaluation. Per (image, query): detections sorted by score and
/// capped at max_dets, greedy matching with ties to the lower ground-truth
/// index. With `area` set, ground truths of other buckets are ignored, as are
/// unmatched detections of other buckets.
inline CocoTable coco_table(std::span<const Detection> dets, std::span<const GroundTruth> gts,
                            std::span<const double> thresholds, int max_dets, std::optional<AreaBucket> area) {
  using Key = std::pair<std::int64_t, int>;
  std::map<Key, std::vector<std::size_t>> det_groups, gt_groups;
  std::set<int> queries;
  std::set<std::int64_t> images;
  for (std::size_t i = 0; i < dets.size(); ++i) {
    det_groups[{dets[i].image_id, dets[i].query}].push_back(i);
    queries.insert(dets[i].query);
    images.insert(dets[i].image_id);
  }
  for (std::size_t i = 0; i < gts.size(); ++i) {
    gt_groups[{gts[i].image_id, gts[i].query}].push_back(i);
    queries.insert(gts[i].query);
    images.insert(gts[i].image_id);
  }
  const std::size_t T = thresholds.size();
  auto ignored_area = [&](const Box& b) { return area && area_bucket(b) != *area; };

  CocoTable out;
  for (int q : queries) {
    struct Scored {
      double score;
      std::vector<char> tp, ig;  // per threshold
    };
    std::vector<Scored> all;
    std::size_t npig = 0;
    for (std::int64_t img : images) {
      std::vector<std::size_t> g, d;
      if (auto it = gt_groups.find({img, q}); it != gt_groups.end()) g = it->second;
      if (auto it = det_groups.find({img, q}); it != det_groups.end()) d = it->second;
      std::stable_partition(g.begin(), g.end(), [&](std::size_t i) { return !ignored_area(gts[i].box); });
      std::stable_sort(d.begin(), d.end(), [&](std::size_t x, std::size_t y) { return dets[x].score > dets[y].score; });
      if (d.size() > std::size_t(max_dets)) d.resize(std::size_t(max_dets));
      std::vector<char> g_ig(g.size());
      for (std::size_t k = 0; k < g.size(); ++k) {
        g_ig[k] = ignored_area(gts[g[k]].box) ? 1 : 0;
        if (!g_ig[k]) ++npig;
      }
      std::vector<Scored> local(d.size());
      for (std::size_t k = 0; k < d.size(); ++k) {
        local[k].score = dets[d[k]].score;
        local[k].tp.assign(T, 0);
        local[k].ig.assign(T, 0);
      }
      for (std::size_t t = 0; t < T; ++t) {
        std::vector<char> taken(g.size(), 0);
        for (std::size_t k = 0; k < d.size(); ++k) {
          double best = std::min(thresholds[t], 1.0 - 1e-10);
          std::ptrdiff_t m = -1;
          for (std::size_t j = 0; j < g.size(); ++j) {
            if (taken[j]) continue;
            // once a regular ground truth is matched, ignored ones cannot replace it
            if (m >= 0 && !g_ig[std::size_t(m)] && g_ig[j]) break;
            const double v = iou(dets[d[k]].box, gts[g[j]].box);
            if (v < best || (m >= 0 && v == best)) continue;
            best = v;
            m = std::ptrdiff_t(j);
          }
          if (m >= 0) {
            taken[std::size_t(m)] = 1;
            local[k].ig[t] = g_ig[std::size_t(m)];
            local[k].tp[t] = 1;
          } else {
            local[k].ig[t] = ignored_area(dets[d[k]].box) ? 1 : 0;
          }
        }
      }
      for (auto& s : local) all.push_back(std::move(s));
    }
    if (npig == 0) continue;
    std::stable_sort(all.begin(), all.end(), [](const Scored& x, const Scored& y) { return x.score > y.score; });
    for (std::size_t t = 0; t < T; ++t) {
      std::vector<double> rc, pr;
      double tp = 0, fp = 0;
      for (const auto& s : all) {
        if (s.ig[t]) continue;
        if (s.tp[t])
          tp += 1;
        else
          fp += 1;
        rc.push_back(tp / double(npig));
        pr.push_back(tp / (tp + fp));
      }
      for (std::size_t i = pr.size(); i > 1; --i) pr[i - 2] = std::max(pr[i - 2], pr[i - 1]);
      double sum = 0;
      for (int r = 0; r <= 100; ++r) {
        const double level = double(r) / 100.0;
        const auto it = std::lower_bound(rc.begin(), rc.end(), level);
        if (it != rc.end()) sum += pr[std::size_t(it - rc.begin())];
      }
      out.ap.push_back(sum / 101.0);
      out.recall.push_back(rc.empty() ? 0.0 : rc.back());
    }
  }
  return out;
}

inline std::optional<double> mean_of(const std::vector<double>& v) {
  if (v.empty()) return std::nullopt;
  double s = 0;
  for (double x : v) s += x;
  return s / double(v.size());
}

}  // namespace detail

inline ApResult coco_ap(std::span<const Detection> dets, std::span<const GroundTruth> gts,
                        std::span<const double> thresholds, int max_dets = 100) {
  ApResult r;
  r.ap = detail::mean_of(detail::coco_table(dets, gts, thresholds, max_dets, std::nullopt).ap);
  r.ap_small = detail::mean_of(detail::coco_table(dets, gts, thresholds, max_dets, AreaBucket::small).ap);
  r.ap_medium = detail::mean_of(detail::coco_table(dets, gts, thresholds, max_dets, AreaBucket::medium).ap);
  r.ap_large = detail::mean_of(detail::coco_table(dets, gts, thresholds, max_dets, AreaBucket::large).ap);
  return r;
}

/// Mean over thresholds (and queries) of recall with at most max_dets
/// detections per image and query; 0 when there is no ground truth.
inline double average_recall(std::span<const Detection> dets, std::span<const GroundTruth> gts,
                             std::span<const double> thresholds, int max_dets = 100) {
  return detail::mean_of(detail::coco_table(dets, gts, thresholds, max_dets, std::nullopt).recall).value_or(0.0);
}

// ---- ranking metrics ----

/// Fraction of queries with a positive among the first k ranked ids.
inline double recall_at_k(const std::vector<std::vector<std::int64_t>>& ranked,
                          const std::vector<std::set<std::int64_t>>& positives, int k) {
  if (ranked.size() != positives.size()) throw Error("recall_at_k: ranking and positive lists differ in length");
  if (ranked.empty()) return 0.0;
  double hits = 0;
  for (std::size_t q = 0; q < ranked.size(); ++q) {
    const std::size_t n = std::min(ranked[q].size(), std::size_t(std::max(k, 0)));
    for (std::size_t r = 0; r < n; ++r)
      if (positives[q].count(ranked[q][r])) {
        hits += 1;
        break;
      }
  }
  return hits / double(ranked.size());
}

/// Mean over queries of AP truncated at rank k, normalised by min(|positives|, k).
inline double map_at_k(const std::vector<std::vector<std::int64_t>>& ranked,
                       const std::vector<std::set<std::int64_t>>& positives, int k = 50) {
  if (ranked.size() != positives.size()) throw Error("map_at_k: ranking and positive lists differ in length");
  if (ranked.empty()) return 0.0;
  double total = 0;
  for (std::size_t q = 0; q < ranked.size(); ++q) {
    if (positives[q].empty()) throw Error("map_at_k: query without positives");
    const std::size_t n = std::min(ranked[q].size(), std::size_t(k));
    double hits = 0, sum = 0;
    for (std::size_t r = 0; r < n; ++r) {
      if (!positives[q].count(ranked[q][r])) continue;
      hits += 1;
      sum += hits / double(r + 1);
    }
    total += sum / double(std::min<std::size_t>(positives[q].size(), std::size_t(k)));
  }
  return total / double(ranked.size());
}

/// True iff the highest-scoring box overlaps the target by more than 0.5.
/// Ties go to the earlier proposal; no proposals counts as a miss.
inline bool rec_hit(std::span<const Box> boxes, std::span<const double> scores, const Box& target) {
  if (boxes.empty()) return false;
  std::size_t best = 0;
  for (std::size_t j = 1; j < boxes.size(); ++j)
    if (scores[j] > scores[best]) best = j;
  return iou(boxes[best], target) > 0.5;
}

/// Spearman rank correlation; tied values share their average rank.
inline double spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw Error("spearman: inputs differ in length");
  if (x.size() < 2) throw Error("spearman: need at least two points");
  auto ranks = [](std::span<const double> v) {
    std::vector<std::size_t> order(v.size());
    std::iota(order.begin(), order.end(), std::size_t(0));
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < order.size();) {
      std::size_t j = i;
      while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
      const double avg = (double(i) + double(j)) / 2.0 + 1.0;
      for (std::size_t k = i; k <= j; ++k) r[order[k]] = avg;
      i = j + 1;
    }
    return r;
  };
  const auto rx = ranks(x), ry = ranks(y);
  const double mean = (double(x.size()) + 1.0) / 2.0;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mean) * (ry[i] - mean);
    sxx += (rx[i] - mean) * (rx[i] - mean);
    syy += (ry[i] - mean) * (ry[i] - mean);
  }
  if (sxx == 0 || syy == 0) throw Error("spearman: constant input");
  return sxy / std::sqrt(sxx * syy);
}

// ---- model-side pipelines ----

/// A loaded checkpoint ready for inference.
struct Model {
  RunConfig cfg;
  Vocabulary vocab;
  Encoder<float> enc;
  ParamStore<float> params;

  explicit Model(const Checkpoint& ck) : cfg(ck.config), vocab(ck.vocab), enc(ck.config.encoder), params(ck.state.params) {}

  double scale() const { return double(params.scalar(enc.sim_scale_index())); }
  double bias() const { return double(params.scalar(enc.sim_bias_index())); }
};

/// One encoded image: boxes, object embeddings, IoU logits, global embeddings.
struct GalleryEntry {
  std::int64_t image_id = 0;
  std::vector<Box> boxes;
  Mat<float> objects;            // N x d
  std::vector<float> iou_logits;  // +inf in single-token modes, so p_iou = 1
  Vec<float> coarse, detailed;
};

inline GalleryEntry embed_scene(const Model& m, const Scene& scene, std::span<const Box> proposals, TaskKind task) {
  const auto seq = scene_sequence(m.cfg, m.vocab, scene, proposals, task);
  const auto st = m.enc.forward(m.params, seq);
  const auto bundle = extract_bundle(st.hidden, *seq.image);
  GalleryEntry e;
  e.image_id = scene.id;
  e.boxes.assign(proposals.begin(), proposals.end());
  const Eigen::Index d = m.cfg.encoder.d_model;
  e.objects.resize(Eigen::Index(proposals.size()), d);
  for (std::size_t j = 0; j < proposals.size(); ++j) {
    e.objects.row(Eigen::Index(j)) = bundle.object_embs[j].transpose();
    e.iou_logits.push_back(bundle.iou_hiddens.empty() ? std::numeric_limits<float>::infinity()
                                                      : m.enc.iou_logit(m.params, bundle.iou_hiddens[j]));
  }
  e.coarse = bundle.global_coarse;
  e.detailed = bundle.global_detailed;
  return e;
}

inline Vec<float> embed_text(const Model& m, std::span<const std::string> words, TextKind kind) {
  const auto layout = m.cfg.layout();
  const auto seq = kind == TextKind::local ? build_local_text_sequence(m.vocab, layout, words)
                                           : build_global_text_sequence(m.vocab, layout, words);
  return encode_text(m.enc, m.params, seq).vector;
}

inline double similarity_logit(double a, double b, const Eigen::Ref<const Vec<float>>& u,
                               const Eigen::Ref<const Vec<float>>& v) {
  const Vec<double> x = u.cast<double>(), y = v.cast<double>();
  const double nx = x.norm(), ny = y.norm();
  if (!(nx > 0) || !(ny > 0)) throw Error("degenerate embedding");
  return a * x.dot(y) / (nx * ny) + b;
}

/// Match score of object j in an encoded image against a text embedding.
inline MatchScore object_score(double a, double b, const GalleryEntry& e, std::size_t j, const Vec<float>& text) {
  const double p_cls = double(sigmoid(similarity_logit(a, b, e.objects.row(Eigen::Index(j)).transpose(), text)));
  return combine_scores(p_cls, double(sigmoid(double(e.iou_logits[j]))));
}

/// Proposals used at evaluation time; with mix_gt the ground-truth boxes are
/// substituted into random slots.
inline std::vector<Box> eval_proposals(const RunConfig& cfg, const Scene& scene, bool mix_gt) {
  std::vector<Box> props = scene.proposals;
  if (mix_gt) {
    Rng rng(derive_seed(cfg.data.seed, "eval-mix", std::uint64_t(scene.id)));
    const auto gts = scene.gt_boxes();
    mix_ground_truth(props, gts, cfg.eval.mix_fraction, rng);
  }
  return props;
}

/// Scores every (proposal, query) pair, optionally applies per-query NMS, and
/// keeps the max_dets best detections of the image.
inline std::vector<Detection> detect(const GalleryEntry& e, double a, double b, std::span<const Vec<float>> queries,
                                     bool nms_flag, double nms_threshold, int max_dets) {
  std::vector<Detection> out;
  for (std::size_t q = 0; q < queries.size(); ++q) {
    std::vector<double> scores(e.boxes.size());
    for (std::size_t j = 0; j < e.boxes.size(); ++j) scores[j] = object_score(a, b, e, j, queries[q]).score;
    std::vector<std::size_t> keep;
    if (nms_flag) {
      keep = nms(e.boxes, scores, nms_threshold);
    } else {
      keep.resize(e.boxes.size());
      std::iota(keep.begin(), keep.end(), std::size_t(0));
    }
    for (std::size_t j : keep) out.push_back({e.image_id, e.boxes[j], int(q), scores[j]});
  }
  std::stable_sort(out.begin(), out.end(), [](const Detection& x, const Detection& y) { return x.score > y.score; });
  if (out.size() > std::size_t(max_dets)) out.resize(std::size_t(max_dets));
  return out;
}

struct RetrievalHit {
  std::int64_t image_id = 0;
  Box box;
  double score = 0;
};

/// Image score = max over its objects of the match score; descending, ties by id.
inline std::vector<RetrievalHit> local_retrieve(double a, double b, const Vec<float>& query,
                                                std::span<const GalleryEntry> gallery, int k) {
  std::vector<RetrievalHit> hits;
  for (const auto& e : gallery) {
    RetrievalHit h{e.image_id, {}, -std::numeric_limits<double>::infinity()};
    for (std::size_t j = 0; j < e.boxes.size(); ++j) {
      const double s = object_score(a, b, e, j, query).score;
      if (s > h.score) {
        h.score = s;
        h.box = e.boxes[j];
      }
    }
    hits.push_back(h);
  }
  std::sort(hits.begin(), hits.end(), [](const RetrievalHit& x, const RetrievalHit& y) {
    return x.score != y.score ? x.score > y.score : x.image_id < y.image_id;
  });
  if (k >= 0 && hits.size() > std::size_t(k)) hits.resize(std::size_t(k));
  return hits;
}

struct RankedItem {
  std::int64_t id = 0;
  double logit = 0;
};

/// Ranks candidate vectors by a*cos+b against the query; ties by ascending id.
inline std::vector<RankedItem> global_retrieve(double a, double b, const Vec<float>& query,
                                               std::span<const std::pair<std::int64_t, Vec<float>>> candidates,
                                               int k = -1) {
  std::vector<RankedItem> out;
  for (const auto& [id, v] : candidates) out.push_back({id, similarity_logit(a, b, query, v)});
  std::sort(out.begin(), out.end(), [](const RankedItem& x, const RankedItem& y) {
    return x.logit != y.logit ? x.logit > y.logit : x.id < y.id;
  });
  if (k >= 0 && out.size() > std::size_t(k)) out.resize(std::size_t(k));
  return out;
}

/// Short captions pair with coarse embeddings, long captions with detailed ones.
inline const Vec<float>& global_embedding(const GalleryEntry& e, std::string_view caption_kind) {
  return caption_kind == "short" ? e.coarse : e.detailed;
}

// ---- gallery file ----

inline constexpr std::uint32_t kGalleryVersion = 1;

inline std::string serialize_gallery(std::span<const GalleryEntry> entries, int d_model) {
  std::string out = "OBEM";
  binio::put_u32(out, kGalleryVersion);
  binio::put_u32(out, std::uint32_t(d_model));
  binio::put_u32(out, std::uint32_t(entries.size()));
  for (const auto& e : entries) {
    if (e.objects.cols() != d_model || e.coarse.size() != d_model || e.detailed.size() != d_model)
      throw Error("gallery entry width differs from d_model");
    binio::put_u64(out, std::uint64_t(e.image_id));
    binio::put_u32(out, std::uint32_t(e.boxes.size()));
    for (const auto& b : e.boxes)
      for (double c : {b.x1, b.y1, b.x2, b.y2}) binio::put_f32(out, float(c));
    for (Eigen::Index i = 0; i < e.objects.size(); ++i) binio::put_f32(out, e.objects.data()[i]);
    for (float v : e.iou_logits) binio::put_f32(out, v);
    for (Eigen::Index i = 0; i < d_model; ++i) binio::put_f32(out, e.coarse(i));
    for (Eigen::Index i = 0; i < d_model; ++i) binio::put_f32(out, e.detailed(i));
  }
  return out;
}

struct Gallery {
  int d_model = 0;
  std::vector<GalleryEntry> entries;
};

inline Gallery deserialize_gallery(std::string_view bytes) {
  if (bytes.size() < 4 || bytes.substr(0, 4) != "OBEM") throw FormatError("unrecognized gallery");
  binio::Cursor cur(bytes, "gallery");
  cur.take(4);
  const std::uint32_t version = cur.u32();
  if (version != kGalleryVersion)
    throw FormatError("unsupported gallery version " + std::to_string(version) + " (this reader handles " +
                      std::to_string(kGalleryVersion) + ")");
  Gallery g;
  g.d_model = int(cur.u32());
  const std::uint32_t count = cur.u32();
  const Eigen::Index d = g.d_model;
  for (std::uint32_t i = 0; i < count; ++i) {
    GalleryEntry e;
    e.image_id = std::int64_t(cur.u64());
    const std::uint32_t n = cur.u32();
    if (cur.remaining() / 4 < std::size_t(n) * (5 + std::size_t(d))) throw FormatError("truncated gallery");
    for (std::uint32_t j = 0; j < n; ++j) {
      Box b;
      b.x1 = cur.f32();
      b.y1 = cur.f32();
      b.x2 = cur.f32();
      b.y2 = cur.f32();
      e.boxes.push_back(b);
    }
    e.objects.resize(Eigen::Index(n), d);
    for (Eigen::Index k = 0; k < e.objects.size(); ++k) e.objects.data()[k] = cur.f32();
    for (std::uint32_t j = 0; j < n; ++j) e.iou_logits.push_back(cur.f32());
    e.coarse.resize(d);
    e.detailed.resize(d);
    for (Eigen::Index k = 0; k < d; ++k) e.coarse(k) = cur.f32();
    for (Eigen::Index k = 0; k < d; ++k) e.detailed(k) = cur.f32();
    g.entries.push_back(std::move(e));
  }
  if (cur.remaining() != 0) throw FormatError("trailing bytes in gallery");
  return g;
}

inline TaskKind gallery_task(const RunConfig& cfg) {
  return cfg.eval.gallery_task == "detection" ? TaskKind::detection : TaskKind::referring;
}

inline std::vector<GalleryEntry> embed_gallery(const Model& m, const std::vector<Scene>& scenes, bool mix_gt = false) {
  std::vector<GalleryEntry> out(scenes.size());
  parallel_for(scenes.size(), [&](std::size_t i) {
    const auto props = eval_proposals(m.cfg, scenes[i], mix_gt);
    out[i] = embed_scene(m, scenes[i], props, gallery_task(m.cfg));
  });
  return out;
}

// ---- reports ----

struct EvalReport {
  std::string task;
  std::vector<std::pair<std::string, std::optional<double>>> metrics;
  nlohmann::ordered_json settings = nlohmann::ordered_json::object();
  std::string config_digest;

  std::optional<double> metric(std::string_view name) const {
    for (const auto& [k, v] : metrics)
      if (k == name) return v;
    return std::nullopt;
  }
  void set(std::string name, std::optional<double> v) { metrics.emplace_back(std::move(name), v); }
};

inline nlohmann::ordered_json settings_of(const RunConfig& cfg) {
  return {{"token_mode", to_string(cfg.train.token_mode)},
          {"share_text_token", cfg.train.share_text_token},
          {"global_tokens", cfg.train.global_tokens},
          {"caption_type", to_string(cfg.train.caption_type)}};
}

inline nlohmann::ordered_json to_json(const EvalReport& r) {
  nlohmann::ordered_json j;
  j["task"] = r.task;
  j["config_digest"] = r.config_digest;
  j["settings"] = r.settings;
  nlohmann::ordered_json m = nlohmann::ordered_json::object();
  for (const auto& [k, v] : r.metrics) m[k] = v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr);
  j["metrics"] = m;
  return j;
}

inline EvalReport report_from_json(const nlohmann::ordered_json& j) {
  EvalReport r;
  try {
    r.task = j.at("task").get<std::string>();
    r.config_digest = j.at("config_digest").get<std::string>();
    if (j.contains("settings")) r.settings = j.at("settings");
    for (auto it = j.at("metrics").begin(); it != j.at("metrics").end(); ++it)
      r.set(it.key(), it->is_null() ? std::nullopt : std::optional<double>(it->get<double>()));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed report: ") + e.what());
  }
  return r;
}

namespace detail {
inline std::string format_metric(std::optional<double> v) {
  if (!v) return "";
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(6);
  os << *v;
  return os.str();
}

inline std::string setting_text(const nlohmann::ordered_json& s, const char* key) {
  if (!s.contains(key)) return "";
  const auto& v = s.at(key);
  return v.is_string() ? v.get<std::string>() : v.dump();
}
}  // namespace detail

/// Header line plus one row, tab separated.
inline std::string to_tsv(const EvalReport& r) {
  std::string head = "task\tconfig_digest", row = r.task + "\t" + r.config_digest;
  for (const auto& [k, v] : r.metrics) {
    head += "\t" + k;
    row += "\t" + detail::format_metric(v);
  }
  return head + "\n" + row + "\n";
}

/// Comparison table over reports: one row per report, ordered by (digest,
/// task); columns are the union of metric names in first-seen order.
inline std::string report_table(std::vector<EvalReport> reports, bool markdown) {
  std::stable_sort(reports.begin(), reports.end(), [](const EvalReport& x, const EvalReport& y) {
    return std::tie(x.config_digest, x.task) < std::tie(y.config_digest, y.task);
  });
  std::vector<std::string> cols;
  for (const auto& r : reports)
    for (const auto& [k, v] : r.metrics)
      if (std::find(cols.begin(), cols.end(), k) == cols.end()) cols.push_back(k);
  std::vector<std::string> header = {"config_digest", "token_mode", "share_text_token", "global_tokens", "task"};
  header.insert(header.end(), cols.begin(), cols.end());
  std::vector<std::vector<std::string>> rows;
  for (const auto& r : reports) {
    std::vector<std::string> row = {r.config_digest, detail::setting_text(r.settings, "token_mode"),
                                    detail::setting_text(r.settings, "share_text_token"),
                                    detail::setting_text(r.settings, "global_tokens"), r.task};
    for (const auto& c : cols) row.push_back(detail::format_metric(r.metric(c)));
    rows.push_back(std::move(row));
  }
  std::ostringstream os;
  auto emit = [&](const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (markdown)
        os << (i == 0 ? "| " : " | ") << cells[i];
      else
        os << (i == 0 ? "" : "\t") << cells[i];
    }
    os << (markdown ? " |\n" : "\n");
  };
  emit(header);
  if (markdown) emit(std::vector<std::string>(header.size(), "---"));
  for (const auto& row : rows) emit(row);
  return os.str();
}

// ---- task evaluations over a scene split ----

struct DetectOptions {
  bool nms = false;
  bool mix_gt = false;
};

inline EvalReport evaluate_detection(const Model& m, const std::vector<Scene>& scenes, const DetectOptions& opt) {
  const auto& ev = m.cfg.eval;
  std::vector<Vec<float>> queries;
  for (int c = 0; c < int(kShapes.size()); ++c) {
    const auto words = class_description(c).tokens();
    queries.push_back(embed_text(m, words, TextKind::local));
  }
  const double a = m.scale(), b = m.bias();
  std::vector<std::vector<Detection>> per_image(scenes.size()), agnostic(scenes.size());
  parallel_for(scenes.size(), [&](std::size_t i) {
    const auto props = eval_proposals(m.cfg, scenes[i], opt.mix_gt);
    const auto e = embed_scene(m, scenes[i], props, TaskKind::detection);
    per_image[i] = detect(e, a, b, queries, opt.nms, ev.nms_threshold, ev.max_dets);
    // proposal recall: one class-agnostic detection per proposal
    for (std::size_t j = 0; j < e.boxes.size(); ++j) {
      double best = 0;
      for (const auto& q : queries) best = std::max(best, object_score(a, b, e, j, q).score);
      agnostic[i].push_back({e.image_id, e.boxes[j], 0, best});
    }
  });
  std::vector<Detection> dets, boxes;
  std::vector<GroundTruth> gts, agnostic_gts;
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    dets.insert(dets.end(), per_image[i].begin(), per_image[i].end());
    boxes.insert(boxes.end(), agnostic[i].begin(), agnostic[i].end());
    for (const auto& o : scenes[i].objects) {
      gts.push_back({scenes[i].id, o.box, o.shape});
      agnostic_gts.push_back({scenes[i].id, o.box, 0});
    }
  }
  const auto ap = coco_ap(dets, gts, ev.thresholds, ev.max_dets);
  EvalReport r;
  r.task = "detect";
  r.set("AP", ap.ap);
  r.set("AP_s", ap.ap_small);
  r.set("AP_m", ap.ap_medium);
  r.set("AP_l", ap.ap_large);
  r.set("AR", average_recall(boxes, agnostic_gts, ev.thresholds, ev.max_dets));
  r.set("images", double(scenes.size()));
  r.settings = settings_of(m.cfg);
  r.settings["nms"] = opt.nms;
  r.settings["mix_gt"] = opt.mix_gt;
  r.config_digest = config_digest(m.cfg);
  return r;
}

/// REC: every object's minimal referring expression is a query with exactly
/// that object as its target.
inline EvalReport evaluate_rec(const Model& m, const std::vector<Scene>& scenes, bool mix_gt) {
  const double a = m.scale(), b = m.bias();
  std::vector<double> correct(scenes.size(), 0), chance(scenes.size(), 0), count(scenes.size(), 0);
  parallel_for(scenes.size(), [&](std::size_t i) {
    const Scene& s = scenes[i];
    const auto props = eval_proposals(m.cfg, s, mix_gt);
    const auto e = embed_scene(m, s, props, TaskKind::referring);
    for (std::size_t o = 0; o < s.objects.size(); ++o) {
      const auto words = describe_object(s, o, DescriptionKind::referring);
      const auto q = embed_text(m, words, TextKind::local);
      std::vector<double> scores(props.size());
      double good = 0;
      for (std::size_t j = 0; j < props.size(); ++j) {
        scores[j] = object_score(a, b, e, j, q).score;
        if (iou(props[j], s.objects[o].box) > 0.5) good += 1;
      }
      correct[i] += rec_hit(props, scores, s.objects[o].box) ? 1 : 0;
      chance[i] += props.empty() ? 0 : good / double(props.size());
      count[i] += 1;
    }
  });
  double c = 0, ch = 0, n = 0;
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    c += correct[i];
    ch += chance[i];
    n += count[i];
  }
  EvalReport r;
  r.task = "rec";
  r.set("acc@0.5", n > 0 ? std::optional<double>(c / n) : std::nullopt);
  r.set("chance", n > 0 ? std::optional<double>(ch / n) : std::nullopt);
  r.set("queries", n);
  r.settings = settings_of(m.cfg);
  r.settings["mix_gt"] = mix_gt;
  r.config_digest = config_digest(m.cfg);
  return r;
}

struct LocalQuery {
  std::int64_t source_id = 0;
  Description description;
  std::set<std::int64_t> positives;
};

/// One query per scene: the full attribute tuple of its smallest object.
/// Scenes whose smallest object covers 10% of the canvas or more are skipped.
inline std::vector<LocalQuery> local_queries(const std::vector<Scene>& scenes) {
  std::vector<LocalQuery> out;
  for (const auto& s : scenes) {
    if (s.objects.empty()) continue;
    std::size_t smallest = 0;
    for (std::size_t o = 1; o < s.objects.size(); ++o)
      if (s.objects[o].box.area() < s.objects[smallest].box.area()) smallest = o;
    const ObjectSpec& target = s.objects[smallest];
    if (target.box.area() >= 0.1 * double(s.width) * double(s.height)) continue;
    LocalQuery q;
    q.source_id = s.id;
    q.description = full_description(target, s.width, s.height, false);
    for (const auto& other : scenes)
      if (!matching_objects(other, q.description).empty()) q.positives.insert(other.id);
    out.push_back(std::move(q));
  }
  return out;
}

/// Object-level ranking (max over objects) next to global-embedding ranking of
/// the same queries encoded as global text against detailed embeddings.
inline EvalReport evaluate_local_retrieval(const Model& m, const std::vector<Scene>& scenes,
                                           const std::vector<GalleryEntry>& gallery) {
  const double a = m.scale(), b = m.bias();
  const int k = m.cfg.eval.k;
  const auto queries = local_queries(scenes);
  std::vector<std::vector<std::int64_t>> ranked_local(queries.size()), ranked_global(queries.size());
  std::vector<std::pair<std::int64_t, Vec<float>>> globals;
  for (const auto& e : gallery) globals.emplace_back(e.image_id, e.detailed);
  parallel_for(queries.size(), [&](std::size_t qi) {
    const auto words = queries[qi].description.tokens();
    const auto local = embed_text(m, words, TextKind::local);
    for (const auto& h : local_retrieve(a, b, local, gallery, -1)) ranked_local[qi].push_back(h.image_id);
    const auto global = embed_text(m, words, TextKind::global);
    for (const auto& h : global_retrieve(a, b, global, globals)) ranked_global[qi].push_back(h.id);
  });
  std::vector<std::set<std::int64_t>> positives;
  for (const auto& q : queries) positives.push_back(q.positives);
  EvalReport r;
  r.task = "local-retrieval";
  const bool any = !queries.empty();
  r.set("Recall@1", any ? std::optional<double>(recall_at_k(ranked_local, positives, 1)) : std::nullopt);
  r.set("mAP@" + std::to_string(k), any ? std::optional<double>(map_at_k(ranked_local, positives, k)) : std::nullopt);
  r.set("Recall@1_global", any ? std::optional<double>(recall_at_k(ranked_global, positives, 1)) : std::nullopt);
  r.set("mAP@" + std::to_string(k) + "_global",
        any ? std::optional<double>(map_at_k(ranked_global, positives, k)) : std::nullopt);
  r.set("queries", double(queries.size()));
  r.set("gallery", double(gallery.size()));
  r.settings = settings_of(m.cfg);
  r.settings["k"] = k;
  r.config_digest = config_digest(m.cfg);
  return r;
}

/// Rank agreement of the IoU head with the true best overlap u* over every
/// positive proposal (u* above the label threshold) of the split.
inline EvalReport evaluate_iou_fidelity(const Model& m, const std::vector<Scene>& scenes) {
  if (!is_dual(m.cfg.train.token_mode)) throw ConfigError("iou-fidelity needs a dual-token checkpoint");
  std::vector<std::vector<std::pair<double, double>>> pairs(scenes.size());
  parallel_for(scenes.size(), [&](std::size_t i) {
    const auto e = embed_scene(m, scenes[i], scenes[i].proposals, TaskKind::detection);
    const auto gts = scenes[i].gt_boxes();
    const auto labels = assign_labels(e.boxes, gts, m.cfg.loss.iou_pos_threshold);
    for (std::size_t j : labels.positives)
      pairs[i].emplace_back(double(sigmoid(double(e.iou_logits[j]))), labels.u_star[j]);
  });
  std::vector<double> predicted, actual;
  for (const auto& v : pairs)
    for (const auto& [p, u] : v) {
      predicted.push_back(p);
      actual.push_back(u);
    }
  EvalReport r;
  r.task = "iou-fidelity";
  r.set("spearman", predicted.size() >= 2 ? std::optional<double>(spearman(predicted, actual)) : std::nullopt);
  r.set("positives", double(predicted.size()));
  r.settings = settings_of(m.cfg);
  r.config_digest = config_digest(m.cfg);
  return r;
}

/// Caption-to-image and image-to-caption retrieval. Positives are the images
/// (captions) whose caption text equals the query's.
inline EvalReport evaluate_global_retrieval(const Model& m, const std::vector<Scene>& scenes,
                                            const std::vector<GalleryEntry>& gallery, const std::string& caption_kind) {
  if (scenes.size() != gallery.size()) throw Error("gallery and scene list differ in length");
  const double a = m.scale(), b = m.bias();
  const int k = m.cfg.eval.k;
  const bool is_short = caption_kind == "short";
  std::vector<Vec<float>> texts(scenes.size());
  parallel_for(scenes.size(), [&](std::size_t i) {
    const auto& cap = is_short ? scenes[i].short_caption : scenes[i].long_caption;
    texts[i] = embed_text(m, cap, TextKind::global);
  });
  std::map<std::vector<std::string>, std::set<std::int64_t>> same;
  for (const auto& s : scenes) same[is_short ? s.short_caption : s.long_caption].insert(s.id);
  std::vector<std::pair<std::int64_t, Vec<float>>> images, captions;
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    if (gallery[i].image_id != scenes[i].id) throw Error("gallery order differs from the scene list");
    images.emplace_back(scenes[i].id, global_embedding(gallery[i], caption_kind));
    captions.emplace_back(scenes[i].id, texts[i]);
  }
  std::vector<std::vector<std::int64_t>> t2i(scenes.size()), i2t(scenes.size());
  std::vector<std::set<std::int64_t>> positives(scenes.size());
  parallel_for(scenes.size(), [&](std::size_t i) {
    for (const auto& h : global_retrieve(a, b, texts[i], images)) t2i[i].push_back(h.id);
    for (const auto& h : global_retrieve(a, b, images[i].second, captions)) i2t[i].push_back(h.id);
  });
  for (std::size_t i = 0; i < scenes.size(); ++i)
    positives[i] = same[is_short ? scenes[i].short_caption : scenes[i].long_caption];
  EvalReport r;
  r.task = "global-retrieval";
  const bool any = !scenes.empty();
  auto opt = [&](double v) { return any ? std::optional<double>(v) : std::nullopt; };
  r.set("T2I_Recall@1", opt(recall_at_k(t2i, positives, 1)));
  r.set("T2I_Recall@5", opt(recall_at_k(t2i, positives, 5)));
  r.set("I2T_Recall@1", opt(recall_at_k(i2t, positives, 1)));
  r.set("I2T_Recall@5", opt(recall_at_k(i2t, positives, 5)));
  r.set("T2I_mAP@" + std::to_string(k), opt(map_at_k(t2i, positives, k)));
  r.settings = settings_of(m.cfg);
  r.settings["caption_kind"] = caption_kind;
  r.config_digest = config_digest(m.cfg);
  return r;
}

}  // namespace objembed
