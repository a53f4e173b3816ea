#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "objembed/attributes.hpp"
#include "objembed/error.hpp"
#include "objembed/geometry.hpp"
#include "objembed/rng.hpp"

namespace objembed {

struct ObjectSpec {
  Box box;
  int shape = 0;    // index into kShapes
  int color = 0;    // index into kColors
  int size = 0;     // index into kSizes
  int texture = 0;  // index into kTextures
  friend bool operator==(const ObjectSpec&, const ObjectSpec&) = default;
};

struct Scene {
  std::int64_t id = 0;
  int width = 64, height = 64;
  std::vector<ObjectSpec> objects;
  std::vector<std::string> short_caption, long_caption;
  std::vector<Box> proposals;
  friend bool operator==(const Scene&, const Scene&) = default;

  std::vector<Box> gt_boxes() const {
    std::vector<Box> out;
    for (const auto& o : objects) out.push_back(o.box);
    return out;
  }
};

struct GenConfig {
  std::uint64_t seed = 7;
  int scenes = 2000;
  int min_objects = 1;
  int max_objects = 6;
  int proposals = 100;
  int jitter_per_band = 3;
  std::vector<double> jitter_bands = {0.9, 0.7, 0.55, 0.3};
  double band_halfwidth = 0.05;
  double gt_mix_fraction = 0.0;
  int width = 64, height = 64, channels = 8;
  double noise_sigma = 0.1;
  std::int64_t id_offset = 0;

  void validate() const {
    if (scenes < 0) throw ConfigError("data.scenes must be >= 0");
    if (min_objects < 0 || max_objects < min_objects || max_objects > 24)
      throw ConfigError("data object range must satisfy 0 <= min <= max <= 24");
    if (proposals < max_objects) throw ConfigError("data.proposals must be >= max_objects");
    if (!(gt_mix_fraction >= 0 && gt_mix_fraction <= 1)) throw ConfigError("data.gt_mix_fraction must lie in [0,1]");
    if (channels < 8) throw ConfigError("data.channels must be >= 8 (attribute code width)");
    if (width < 16 || height < 16) throw ConfigError("canvas must be at least 16 x 16");
    for (double b : jitter_bands)
      if (!(b > 0 && b < 1)) throw ConfigError("jitter bands must lie in (0,1)");
  }
};

inline Location location_of(const Box& b, int width, int height) {
  const double cx = b.cx(), cy = b.cy();
  if (std::abs(cx - width / 2.0) < width / 6.0 && std::abs(cy - height / 2.0) < height / 6.0) return Location::center;
  const bool top = cy < height / 2.0, left = cx < width / 2.0;
  if (top) return left ? Location::top_left : Location::top_right;
  return left ? Location::bottom_left : Location::bottom_right;
}

inline std::vector<std::string> location_words(Location loc) {
  switch (loc) {
    case Location::top_left: return {"top", "left"};
    case Location::top_right: return {"top", "right"};
    case Location::bottom_left: return {"bottom", "left"};
    case Location::bottom_right: return {"bottom", "right"};
    case Location::center: return {"center"};
  }
  return {};
}

/// An attribute conjunction naming objects: a class name (shape only), a
/// referring expression, or a retrieval query.
struct Description {
  std::optional<int> shape, color, size, texture;
  std::optional<Location> location;

  bool matches(const ObjectSpec& o, int width, int height) const {
    if (shape && *shape != o.shape) return false;
    if (color && *color != o.color) return false;
    if (size && *size != o.size) return false;
    if (texture && *texture != o.texture) return false;
    if (location && *location != location_of(o.box, width, height)) return false;
    return true;
  }

  std::vector<std::string> tokens() const {
    std::vector<std::string> out;
    if (color) out.emplace_back(kColors[std::size_t(*color)]);
    if (size) out.emplace_back(kSizes[std::size_t(*size)]);
    if (texture) out.emplace_back(kTextures[std::size_t(*texture)]);
    if (shape) out.emplace_back(kShapes[std::size_t(*shape)]);
    if (location)
      for (auto& w : location_words(*location)) out.push_back(w);
    return out;
  }

  friend bool operator==(const Description&, const Description&) = default;
};

inline Description class_description(int shape) {
  Description d;
  d.shape = shape;
  return d;
}

inline Description full_description(const ObjectSpec& o, int width, int height, bool with_location) {
  Description d;
  d.shape = o.shape;
  d.color = o.color;
  d.size = o.size;
  d.texture = o.texture;
  if (with_location) d.location = location_of(o.box, width, height);
  return d;
}

inline std::vector<int> matching_objects(const Scene& s, const Description& d) {
  std::vector<int> out;
  for (std::size_t i = 0; i < s.objects.size(); ++i)
    if (d.matches(s.objects[i], s.width, s.height)) out.push_back(static_cast<int>(i));
  return out;
}

enum class DescriptionKind { class_name, referring };

/// Referring form: shape plus the shortest prefix of (color, size, texture,
/// location) that singles the object out.
inline Description describe(const Scene& scene, std::size_t index, DescriptionKind kind) {
  const ObjectSpec& o = scene.objects.at(index);
  Description d = class_description(o.shape);
  if (kind == DescriptionKind::class_name) return d;
  for (int k = 0; k <= 4; ++k) {
    if (k >= 1) d.color = o.color;
    if (k >= 2) d.size = o.size;
    if (k >= 3) d.texture = o.texture;
    if (k >= 4) d.location = location_of(o.box, scene.width, scene.height);
    if (matching_objects(scene, d).size() == 1) return d;
  }
  throw Error("scene " + std::to_string(scene.id) + " has no unique description for object " + std::to_string(index));
}

inline std::vector<std::string> describe_object(const Scene& scene, std::size_t index, DescriptionKind kind) {
  return describe(scene, index, kind).tokens();
}

/// (short, long) captions. Short: sorted shape names. Long: full attribute
/// tuples with coarse location, objects in reading order, joined by "and".
inline std::pair<std::vector<std::string>, std::vector<std::string>> captions(const Scene& scene) {
  std::vector<std::string> short_cap;
  for (const auto& o : scene.objects) short_cap.emplace_back(kShapes[std::size_t(o.shape)]);
  std::sort(short_cap.begin(), short_cap.end());

  std::vector<const ObjectSpec*> order;
  for (const auto& o : scene.objects) order.push_back(&o);
  std::sort(order.begin(), order.end(), [](const ObjectSpec* a, const ObjectSpec* b) {
    if (a->box.cy() != b->box.cy()) return a->box.cy() < b->box.cy();
    if (a->box.cx() != b->box.cx()) return a->box.cx() < b->box.cx();
    return std::tie(a->shape, a->color, a->size, a->texture) < std::tie(b->shape, b->color, b->size, b->texture);
  });
  std::vector<std::string> long_cap;
  for (std::size_t i = 0; i < order.size(); ++i) {
    if (i > 0) long_cap.emplace_back(kCaptionSeparator);
    for (auto& w : full_description(*order[i], scene.width, scene.height, true).tokens()) long_cap.push_back(w);
  }
  return {short_cap, long_cap};
}

/// Channel layout: 0-3 shape code (one or two hot), 4-6 color bits, 7 the
/// texture-signed interior profile (1 at the box center, 0 at its border).
inline std::array<float, 7> attribute_code(const ObjectSpec& o) {
  static constexpr std::array<std::array<int, 2>, 10> shape_channels = {
      {{0, -1}, {1, -1}, {2, -1}, {3, -1}, {0, 1}, {0, 2}, {0, 3}, {1, 2}, {1, 3}, {2, 3}}};
  std::array<float, 7> code{};
  for (int c : shape_channels[std::size_t(o.shape)])
    if (c >= 0) code[std::size_t(c)] = 1.0f;
  for (int bit = 0; bit < 3; ++bit)
    if ((o.color >> bit) & 1) code[std::size_t(4 + bit)] = 1.0f;
  return code;
}

inline std::uint64_t render_seed(std::int64_t scene_id) {
  return derive_seed(0x0b1ec7e3b5ULL, "render", static_cast<std::uint64_t>(scene_id));
}

inline FeatureGrid render_features(const Scene& scene, int channels = 8, double noise_sigma = 0.1) {
  FeatureGrid grid(scene.width, scene.height, channels);
  Rng rng(render_seed(scene.id));
  for (auto& v : grid.data) v = static_cast<float>(gaussian(rng, noise_sigma));
  for (const auto& o : scene.objects) {
    const auto code = attribute_code(o);
    const float sign = o.texture == 0 ? 1.0f : -1.0f;
    const int x0 = std::max(0, int(std::floor(o.box.x1))), x1 = std::min(scene.width, int(std::ceil(o.box.x2)));
    const int y0 = std::max(0, int(std::floor(o.box.y1))), y1 = std::min(scene.height, int(std::ceil(o.box.y2)));
    for (int y = y0; y < y1; ++y) {
      for (int x = x0; x < x1; ++x) {
        const double px = x + 0.5, py = y + 0.5;
        if (px < o.box.x1 || px > o.box.x2 || py < o.box.y1 || py > o.box.y2) continue;
        for (std::size_t c = 0; c < code.size(); ++c) grid.at(x, y, int(c)) += code[c];
        const double rx = std::abs(2.0 * (px - o.box.cx()) / o.box.width());
        const double ry = std::abs(2.0 * (py - o.box.cy()) / o.box.height());
        grid.at(x, y, 7) += sign * static_cast<float>(1.0 - std::max(rx, ry));
      }
    }
  }
  return grid;
}

inline double quantize(double v) { return std::round(v * 100.0) / 100.0; }

inline Box quantize(Box b) { return {quantize(b.x1), quantize(b.y1), quantize(b.x2), quantize(b.y2)}; }

/// Perturbs gt until IoU falls within target +- halfwidth. Returns nullopt when
/// the rejection budget runs out.
inline std::optional<Box> jitter_box(const Box& gt, double target, double halfwidth, int width, int height, Rng& rng) {
  double sigma = std::max(0.02, (1.0 - target) * 0.6);
  for (int attempt = 0; attempt < 4000; ++attempt) {
    const double w = gt.width(), h = gt.height();
    Box b{gt.x1 + gaussian(rng, sigma * w), gt.y1 + gaussian(rng, sigma * h), gt.x2 + gaussian(rng, sigma * w),
          gt.y2 + gaussian(rng, sigma * h)};
    b = quantize(clamp_box(b, width, height));
    if (b.width() < 1 || b.height() < 1) continue;
    const double v = iou(b, gt);
    if (std::abs(v - target) <= halfwidth) return b;
    if (attempt % 50 == 49) sigma *= v > target ? 1.15 : 0.87;
  }
  return std::nullopt;
}

inline Box random_box(int width, int height, Rng& rng) {
  const double w = uniform(rng, 3.0, std::min(30.0, width - 1.0));
  const double h = uniform(rng, 3.0, std::min(30.0, height - 1.0));
  const double x = uniform(rng, 0.0, width - w), y = uniform(rng, 0.0, height - h);
  return quantize(Box{x, y, x + w, y + h});
}

/// Replaces max(M, round(fraction * N)) random slots with exact ground-truth
/// boxes, cycling through the ground truths so each appears at least once.
inline void mix_ground_truth(std::vector<Box>& proposals, std::span<const Box> gts, double fraction, Rng& rng) {
  if (fraction <= 0 || gts.empty() || proposals.empty()) return;
  std::size_t count = std::max<std::size_t>(gts.size(), std::size_t(std::llround(fraction * double(proposals.size()))));
  count = std::min(count, proposals.size());
  std::vector<std::size_t> slots(proposals.size());
  for (std::size_t i = 0; i < slots.size(); ++i) slots[i] = i;
  for (std::size_t i = 0; i < count; ++i) {
    const auto j = i + std::size_t(uniform_int(rng, 0, int(slots.size() - i) - 1));
    std::swap(slots[i], slots[j]);
    proposals[slots[i]] = gts[i % gts.size()];
  }
}

inline std::vector<Box> sample_proposals(const Scene& scene, const GenConfig& cfg, Rng& rng) {
  std::vector<Box> out;
  const std::size_t n = std::size_t(cfg.proposals);
  for (std::size_t g = 0; g < scene.objects.size(); ++g) {
    const Box& gt = scene.objects[g].box;
    bool has_positive = cfg.jitter_bands.empty();
    for (double band : cfg.jitter_bands) {
      for (int r = 0; r < cfg.jitter_per_band; ++r) {
        auto b = jitter_box(gt, band, cfg.band_halfwidth, scene.width, scene.height, rng);
        if (!b) continue;
        if (iou(*b, gt) > 0.5) has_positive = true;
        out.push_back(*b);
      }
    }
    if (!has_positive) throw Error("scene " + std::to_string(scene.id) + ": no positive proposal for an object");
  }
  if (out.size() > n) out.resize(n);
  while (out.size() < n) out.push_back(random_box(scene.width, scene.height, rng));
  for (std::size_t i = out.size(); i > 1; --i) std::swap(out[i - 1], out[std::size_t(uniform_int(rng, 0, int(i) - 1))]);
  if (cfg.gt_mix_fraction > 0) {
    auto gts = scene.gt_boxes();
    mix_ground_truth(out, gts, cfg.gt_mix_fraction, rng);
  }
  return out;
}

inline Scene generate_scene(const GenConfig& cfg, std::int64_t id, Rng& rng) {
  Scene s;
  s.id = id;
  s.width = cfg.width;
  s.height = cfg.height;
  const int count = uniform_int(rng, cfg.min_objects, cfg.max_objects);
  int retries = 0;
  while (int(s.objects.size()) < count) {
    if (++retries > 5000) throw Error("scene constraints unsatisfiable");
    ObjectSpec o;
    o.shape = uniform_int(rng, 0, int(kShapes.size()) - 1);
    o.color = uniform_int(rng, 0, int(kColors.size()) - 1);
    o.size = uniform_int(rng, 0, 1);
    o.texture = uniform_int(rng, 0, 1);
    const int lo = o.size == 0 ? 6 : 14, hi = o.size == 0 ? 12 : 22;
    const int w = uniform_int(rng, lo, hi), h = uniform_int(rng, lo, hi);
    const int x = uniform_int(rng, 0, cfg.width - w), y = uniform_int(rng, 0, cfg.height - h);
    o.box = Box{double(x), double(y), double(x + w), double(y + h)};
    bool ok = true;
    for (const auto& other : s.objects) {
      // disjoint boxes also satisfy the pairwise IoU < 0.3 requirement
      if (intersection_area(o.box, other.box) > 0 ||
          full_description(o, s.width, s.height, true).matches(other, s.width, s.height)) {
        ok = false;
        break;
      }
    }
    if (ok) s.objects.push_back(o);
  }
  auto [sc, lc] = captions(s);
  s.short_caption = std::move(sc);
  s.long_caption = std::move(lc);
  s.proposals = sample_proposals(s, cfg, rng);
  return s;
}

inline std::vector<Scene> generate_dataset(const GenConfig& cfg) {
  cfg.validate();
  std::vector<Scene> out;
  out.reserve(std::size_t(cfg.scenes));
  for (int i = 0; i < cfg.scenes; ++i) {
    const std::int64_t id = cfg.id_offset + i;
    Rng rng(derive_seed(cfg.seed, "scene", static_cast<std::uint64_t>(id)));
    out.push_back(generate_scene(cfg, id, rng));
  }
  return out;
}

/// Held-out split: distinct ids and seed.
inline GenConfig heldout_config(GenConfig cfg, int scenes) {
  cfg.seed = derive_seed(cfg.seed, "heldout");
  cfg.id_offset = cfg.id_offset + 1000000;
  cfg.scenes = scenes;
  return cfg;
}

// ---- features fed to the encoder ----

/// Non-overlapping patch x patch tiles, row-major; cells then channels inside a tile.
inline std::vector<std::vector<float>> patch_features(const FeatureGrid& grid, int patch) {
  if (patch <= 0 || grid.width % patch != 0 || grid.height % patch != 0)
    throw ConfigError("patch_size must divide the canvas");
  std::vector<std::vector<float>> out;
  for (int py = 0; py < grid.height / patch; ++py) {
    for (int px = 0; px < grid.width / patch; ++px) {
      std::vector<float> v;
      v.reserve(std::size_t(patch) * patch * grid.channels);
      for (int y = 0; y < patch; ++y)
        for (int x = 0; x < patch; ++x)
          for (float f : grid.cell(px * patch + x, py * patch + y)) v.push_back(f);
      out.push_back(std::move(v));
    }
  }
  return out;
}

/// Pooled RoI samples followed by the box corners normalised to [0,1].
inline std::vector<float> roi_descriptor(const FeatureGrid& grid, const Box& box, int resolution) {
  const auto pooled = roi_pool(grid, box, resolution);
  std::vector<float> v(pooled.begin(), pooled.end());
  v.push_back(float(box.x1 / grid.width));
  v.push_back(float(box.y1 / grid.height));
  v.push_back(float(box.x2 / grid.width));
  v.push_back(float(box.y2 / grid.height));
  return v;
}

// ---- scenes.jsonl ----

inline nlohmann::json box_to_json(const Box& b) { return nlohmann::json::array({b.x1, b.y1, b.x2, b.y2}); }

inline Box box_from_json(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 4) throw FormatError("box must be an array of 4 numbers");
  Box b{j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>()};
  if (!b.valid()) throw FormatError("box has non-positive extent");
  return b;
}

template <std::size_t N>
int index_of(const std::array<std::string_view, N>& names, const std::string& value, const char* what) {
  for (std::size_t i = 0; i < N; ++i)
    if (names[i] == value) return int(i);
  throw FormatError(std::string("unknown ") + what + " '" + value + "'");
}

inline nlohmann::json scene_to_json(const Scene& s) {
  nlohmann::json objs = nlohmann::json::array();
  for (const auto& o : s.objects) {
    objs.push_back({{"box", box_to_json(o.box)},
                    {"shape", kShapes[std::size_t(o.shape)]},
                    {"color", kColors[std::size_t(o.color)]},
                    {"size", kSizes[std::size_t(o.size)]},
                    {"texture", kTextures[std::size_t(o.texture)]}});
  }
  nlohmann::json props = nlohmann::json::array();
  for (const auto& b : s.proposals) props.push_back(box_to_json(b));
  return {{"id", s.id}, {"w", s.width}, {"h", s.height}, {"objects", objs}, {"short", s.short_caption},
          {"long", s.long_caption}, {"proposals", props}};
}

inline Scene scene_from_json(const nlohmann::json& j) {
  try {
    Scene s;
    s.id = j.at("id").get<std::int64_t>();
    s.width = j.at("w").get<int>();
    s.height = j.at("h").get<int>();
    for (const auto& o : j.at("objects")) {
      ObjectSpec spec;
      spec.box = box_from_json(o.at("box"));
      spec.shape = index_of(kShapes, o.at("shape").get<std::string>(), "shape");
      spec.color = index_of(kColors, o.at("color").get<std::string>(), "color");
      spec.size = index_of(kSizes, o.at("size").get<std::string>(), "size");
      spec.texture = index_of(kTextures, o.at("texture").get<std::string>(), "texture");
      s.objects.push_back(spec);
    }
    s.short_caption = j.at("short").get<std::vector<std::string>>();
    s.long_caption = j.at("long").get<std::vector<std::string>>();
    for (const auto& b : j.at("proposals")) s.proposals.push_back(box_from_json(b));
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed scene record: ") + e.what());
  }
}

inline std::string scenes_to_jsonl(std::span<const Scene> scenes) {
  std::string out;
  for (const auto& s : scenes) {
    out += scene_to_json(s).dump();
    out += '\n';
  }
  return out;
}

inline std::vector<Scene> read_scenes(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::vector<Scene> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(scene_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace objembed
