#pragma once

#include <array>
#include <string_view>

namespace objembed {

inline constexpr std::array<std::string_view, 10> kShapes = {"circle", "square", "triangle", "star",  "cross",
                                                               "ring",   "diamond", "bar",    "dot",  "wedge"};
inline constexpr std::array<std::string_view, 8> kColors = {"red",    "green", "blue",  "yellow",
                                                              "purple", "orange", "white", "black"};
inline constexpr std::array<std::string_view, 2> kSizes = {"small", "large"};
inline constexpr std::array<std::string_view, 2> kTextures = {"solid", "striped"};

/// Coarse location of an object center: four quadrants plus a central zone.
enum class Location { top_left, top_right, bottom_left, bottom_right, center };

inline constexpr std::array<std::string_view, 5> kLocationWords = {"top", "bottom", "left", "right", "center"};
inline constexpr std::string_view kCaptionSeparator = "and";

}  // namespace objembed
