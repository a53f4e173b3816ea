#pragma once

#include <span>
#include <string>
#include <vector>

#include "objembed/config.hpp"
#include "objembed/layout.hpp"
#include "objembed/scenegen.hpp"

namespace objembed {

/// Image sequence of a scene over the given proposal boxes.
inline TokenSequence scene_sequence(const RunConfig& cfg, const Vocabulary& vocab, const FeatureGrid& grid,
                                    std::span<const Box> proposals, std::span<const std::string> instruction) {
  const auto patches = patch_features(grid, cfg.encoder.patch_size);
  std::vector<std::vector<float>> rois;
  rois.reserve(proposals.size());
  for (const auto& b : proposals) rois.push_back(roi_descriptor(grid, b, cfg.encoder.roi_resolution));
  return build_image_sequence(vocab, cfg.layout(), patches, instruction, rois);
}

inline TokenSequence scene_sequence(const RunConfig& cfg, const Vocabulary& vocab, const Scene& scene,
                                    std::span<const Box> proposals, TaskKind task) {
  const auto grid = render_features(scene, cfg.data.channels, cfg.data.noise_sigma);
  const auto words = instruction_tokens(task);
  return scene_sequence(cfg, vocab, grid, proposals, words);
}

}  // namespace objembed
