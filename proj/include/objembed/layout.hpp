#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "objembed/attributes.hpp"
#include "objembed/error.hpp"
#include "objembed/rng.hpp"

namespace objembed {

inline constexpr int kMaxObjects = 128;

namespace tokens {
inline constexpr std::string_view vision_start = "<|vision_start|>";
inline constexpr std::string_view vision_end = "<|vision_end|>";
inline constexpr std::string_view vision_pad = "<|vision_pad|>";
inline constexpr std::string_view object = "<object>";
inline constexpr std::string_view iou = "<iou>";
inline constexpr std::string_view global = "<global>";
inline constexpr std::string_view local_text = "<local_text>";
inline constexpr std::string_view global_text = "<global_text>";
}  // namespace tokens

enum class TaskKind { detection, referring, local_text, global_text };

/// Object-token design: two tokens (cls then iou, or iou then cls), or a single
/// token trained with binary or IoU-valued labels.
enum class TokenMode { dual_cls_iou, dual_iou_cls, single_label_one, single_label_iou };

inline bool is_dual(TokenMode m) { return m == TokenMode::dual_cls_iou || m == TokenMode::dual_iou_cls; }

inline const char* to_string(TokenMode m) {
  switch (m) {
    case TokenMode::dual_cls_iou: return "dual_cls_iou";
    case TokenMode::dual_iou_cls: return "dual_iou_cls";
    case TokenMode::single_label_one: return "single_label_one";
    case TokenMode::single_label_iou: return "single_label_iou";
  }
  return "?";
}

inline TokenMode token_mode_from_string(std::string_view s) {
  if (s == "dual_cls_iou") return TokenMode::dual_cls_iou;
  if (s == "dual_iou_cls") return TokenMode::dual_iou_cls;
  if (s == "single_label_one") return TokenMode::single_label_one;
  if (s == "single_label_iou") return TokenMode::single_label_iou;
  throw ConfigError("unknown token_mode '" + std::string(s) + "'");
}

/// Lower-cases and splits on whitespace; sentence punctuation becomes its own token.
inline std::vector<std::string> word_tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(cur);
    cur.clear();
  };
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      flush();
    } else if (ch == ',' || ch == '.' || ch == ':' || ch == ')') {
      flush();
      out.emplace_back(1, ch);
    } else {
      cur.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  flush();
  return out;
}

/// Instruction families. Training samples within a family; evaluation uses entry 0.
inline std::span<const std::string_view> instruction_family(TaskKind kind) {
  static constexpr std::array<std::string_view, 3> detection = {
      "Detect all objects in the image by identifying the common visual features of their respective classes.",
      "Localize each object by matching it to the archetypal visual form of its category.",
      "Detect all objects in the image by recognizing the shared visual attributes of their respective categories.",
  };
  static constexpr std::array<std::string_view, 3> referring = {
      "Locate the specific object being described by analyzing its unique instance-level attributes, its spatial "
      "position, and its relationship with surrounding objects.",
      "Identify the single instance mentioned in the text by considering its distinct visual features, its location "
      "within the scene, and its context relative to nearby items.",
      "Ground the referring expression by pinpointing the object that matches the description's details regarding its "
      "appearance, placement, and interaction with other elements.",
  };
  static constexpr std::array<std::string_view, 1> local = {"Find an object that matches the given caption."};
  static constexpr std::array<std::string_view, 1> global = {"Find an image that matches the given caption."};
  switch (kind) {
    case TaskKind::detection: return detection;
    case TaskKind::referring: return referring;
    case TaskKind::local_text: return local;
    case TaskKind::global_text: return global;
  }
  return {};
}

inline constexpr std::array<std::string_view, 5> kCoarseGlobalPhrase = {"the", "coarse", "global", "image", "is"};
inline constexpr std::array<std::string_view, 5> kDetailedGlobalPhrase = {"the", "detailed", "global", "image", "is"};

inline std::string object_index_token(int i) { return "<idx_" + std::to_string(i) + ">"; }

class Vocabulary {
 public:
  Vocabulary() = default;

  explicit Vocabulary(std::vector<std::string> ordered) : tokens_(std::move(ordered)) {
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      if (!index_.emplace(tokens_[i], static_cast<int>(i)).second)
        throw FormatError("duplicate vocabulary token '" + tokens_[i] + "'");
    }
    for (auto t : {tokens::object, tokens::iou, tokens::global, tokens::local_text, tokens::global_text,
                   tokens::vision_start, tokens::vision_end, tokens::vision_pad})
      if (!contains(t)) throw FormatError("vocabulary lacks special token " + std::string(t));
  }

  /// Structural and special tokens, object indices, then the sorted word list.
  static Vocabulary standard() {
    std::vector<std::string> list = {std::string(tokens::vision_start), std::string(tokens::vision_end),
                                     std::string(tokens::vision_pad),   std::string(tokens::object),
                                     std::string(tokens::iou),          std::string(tokens::global),
                                     std::string(tokens::local_text),   std::string(tokens::global_text)};
    for (int i = 0; i < kMaxObjects; ++i) list.push_back(object_index_token(i));
    std::vector<std::string> words = {":", ".", ",", ")", "object", std::string(kCaptionSeparator)};
    for (auto w : kCoarseGlobalPhrase) words.emplace_back(w);
    for (auto w : kDetailedGlobalPhrase) words.emplace_back(w);
    for (auto kind : {TaskKind::detection, TaskKind::referring, TaskKind::local_text, TaskKind::global_text})
      for (auto sentence : instruction_family(kind))
        for (auto& w : word_tokenize(sentence)) words.push_back(w);
    auto add = [&](auto const& arr) {
      for (auto w : arr) words.emplace_back(w);
    };
    add(kShapes);
    add(kColors);
    add(kSizes);
    add(kTextures);
    add(kLocationWords);
    std::sort(words.begin(), words.end());
    words.erase(std::unique(words.begin(), words.end()), words.end());
    list.insert(list.end(), words.begin(), words.end());
    return Vocabulary(std::move(list));
  }

  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  bool contains(std::string_view t) const { return index_.find(std::string(t)) != index_.end(); }
  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }

  int id(std::string_view t) const {
    auto it = index_.find(std::string(t));
    if (it == index_.end()) throw Error("out-of-vocabulary token: '" + std::string(t) + "'");
    return it->second;
  }

  std::vector<int> ids(std::span<const std::string> words) const {
    std::vector<int> out;
    out.reserve(words.size());
    for (auto& w : words) out.push_back(id(w));
    return out;
  }

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.tokens_ == b.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::map<std::string, int> index_;
};

enum class OverrideKind { patch, roi };

/// Input-embedding replacement: raw features projected inside the encoder.
struct Override {
  int position = 0;
  OverrideKind kind = OverrideKind::patch;
  std::vector<float> features;
  friend bool operator==(const Override&, const Override&) = default;
};

struct ObjectSlot {
  int object_pos = -1;
  int iou_pos = -1;  // -1 in single-token modes
  friend bool operator==(const ObjectSlot&, const ObjectSlot&) = default;
};

struct ImageSlots {
  int global_coarse = -1;
  int global_detailed = -1;  // equals global_coarse when only one global token is used
  std::vector<ObjectSlot> objects;
  friend bool operator==(const ImageSlots&, const ImageSlots&) = default;
};

enum class TextKind { local, global };

struct TextSlot {
  int position = -1;
  TextKind kind = TextKind::local;
  friend bool operator==(const TextSlot&, const TextSlot&) = default;
};

struct TokenSequence {
  std::vector<int> ids;
  std::vector<Override> overrides;  // ascending positions
  std::optional<ImageSlots> image;
  std::optional<TextSlot> text;

  std::size_t size() const { return ids.size(); }
  friend bool operator==(const TokenSequence&, const TokenSequence&) = default;
};

struct LayoutOptions {
  TokenMode token_mode = TokenMode::dual_cls_iou;
  bool share_text_token = false;
  int global_tokens = 2;
  std::size_t patch_dim = 0;  // required width of every vision feature
  std::size_t roi_dim = 0;    // required width of every RoI feature
};

inline int object_block_length(TokenMode mode) { return is_dual(mode) ? 6 : 5; }

/// Instruction words for a task. rng == nullptr selects the family's first entry.
inline std::vector<std::string> instruction_tokens(TaskKind kind, Rng* rng = nullptr) {
  auto family = instruction_family(kind);
  std::size_t pick = 0;
  if (rng != nullptr && family.size() > 1)
    pick = static_cast<std::size_t>(uniform_int(*rng, 0, static_cast<int>(family.size()) - 1));
  return word_tokenize(family[pick]);
}

inline TokenSequence build_image_sequence(const Vocabulary& vocab, const LayoutOptions& opt,
                                          std::span<const std::vector<float>> vision_features,
                                          std::span<const std::string> instruction,
                                          std::span<const std::vector<float>> roi_features) {
  if (roi_features.size() > static_cast<std::size_t>(kMaxObjects))
    throw Error("too many objects for the index vocabulary (max " + std::to_string(kMaxObjects) + ")");
  if (opt.global_tokens != 1 && opt.global_tokens != 2) throw ConfigError("global_tokens must be 1 or 2");
  TokenSequence seq;
  seq.image.emplace();
  auto push = [&](int id) {
    seq.ids.push_back(id);
    return static_cast<int>(seq.ids.size()) - 1;
  };
  auto push_words = [&](auto const& words) {
    for (const auto& w : words) push(vocab.id(w));
  };

  push(vocab.id(tokens::vision_start));
  const int pad = vocab.id(tokens::vision_pad);
  for (const auto& f : vision_features) {
    if (f.size() != opt.patch_dim) throw Error("projector width mismatch");
    seq.overrides.push_back({push(pad), OverrideKind::patch, f});
  }
  push(vocab.id(tokens::vision_end));
  push_words(instruction);

  const int global = vocab.id(tokens::global);
  const int dot = vocab.id(".");
  if (opt.global_tokens == 2) {
    push_words(kCoarseGlobalPhrase);
    seq.image->global_coarse = push(global);
    push(dot);
  }

  const int object = vocab.id(tokens::object);
  const int iou_tok = vocab.id(tokens::iou);
  const int colon = vocab.id(":");
  const int object_word = vocab.id("object");
  for (std::size_t i = 0; i < roi_features.size(); ++i) {
    if (roi_features[i].size() != opt.roi_dim) throw Error("projector width mismatch");
    push(object_word);
    push(vocab.id(object_index_token(static_cast<int>(i))));
    push(colon);
    ObjectSlot slot;
    switch (opt.token_mode) {
      case TokenMode::dual_cls_iou:
        slot.object_pos = push(object);
        slot.iou_pos = push(iou_tok);
        seq.overrides.push_back({slot.object_pos, OverrideKind::roi, roi_features[i]});
        break;
      case TokenMode::dual_iou_cls:
        // The RoI feature sits on the leading token so both tokens of the pair can see it.
        slot.iou_pos = push(iou_tok);
        slot.object_pos = push(object);
        seq.overrides.push_back({slot.iou_pos, OverrideKind::roi, roi_features[i]});
        break;
      case TokenMode::single_label_one:
      case TokenMode::single_label_iou:
        slot.object_pos = push(object);
        seq.overrides.push_back({slot.object_pos, OverrideKind::roi, roi_features[i]});
        break;
    }
    push(dot);
    seq.image->objects.push_back(slot);
  }

  push_words(kDetailedGlobalPhrase);
  seq.image->global_detailed = push(global);
  push(dot);
  if (opt.global_tokens == 1) seq.image->global_coarse = seq.image->global_detailed;
  return seq;
}

inline TokenSequence build_image_sequence(const Vocabulary& vocab, const LayoutOptions& opt,
                                          std::span<const std::vector<float>> vision_features, TaskKind instruction,
                                          std::span<const std::vector<float>> roi_features) {
  auto words = instruction_tokens(instruction);
  return build_image_sequence(vocab, opt, vision_features, words, roi_features);
}

namespace detail {
inline TokenSequence build_text_sequence(const Vocabulary& vocab, const LayoutOptions& opt,
                                         std::span<const std::string> caption, TextKind kind) {
  TokenSequence seq;
  const TaskKind task = kind == TextKind::local ? TaskKind::local_text : TaskKind::global_text;
  for (auto& w : instruction_tokens(task)) seq.ids.push_back(vocab.id(w));
  for (auto& w : caption) seq.ids.push_back(vocab.id(w));
  std::string_view terminal = (kind == TextKind::local || opt.share_text_token) ? tokens::local_text : tokens::global_text;
  seq.ids.push_back(vocab.id(terminal));
  seq.text = TextSlot{static_cast<int>(seq.ids.size()) - 1, kind};
  return seq;
}
}  // namespace detail

inline TokenSequence build_local_text_sequence(const Vocabulary& vocab, const LayoutOptions& opt,
                                               std::span<const std::string> caption) {
  return detail::build_text_sequence(vocab, opt, caption, TextKind::local);
}

inline TokenSequence build_global_text_sequence(const Vocabulary& vocab, const LayoutOptions& opt,
                                                std::span<const std::string> caption) {
  return detail::build_text_sequence(vocab, opt, caption, TextKind::global);
}

}  // namespace objembed
