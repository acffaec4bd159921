#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <vector>

namespace evosam {

/// Interleaved RGB image, values in [0, 1], row-major.
struct Image {
  int width = 0;
  int height = 0;
  std::vector<float> rgb;

  Image() = default;
  Image(int w, int h, float fill = 0.f) : width(w), height(h), rgb(static_cast<std::size_t>(w) * h * 3, fill) {}

  float& at(int x, int y, int c) { return rgb[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  float at(int x, int y, int c) const { return rgb[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }

  bool operator==(const Image&) const = default;
};

/// Binary mask, one byte per pixel holding 0 or 1.
struct Mask {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> px;

  Mask() = default;
  Mask(int w, int h) : width(w), height(h), px(static_cast<std::size_t>(w) * h, 0) {}

  std::uint8_t& at(int x, int y) { return px[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t at(int x, int y) const { return px[static_cast<std::size_t>(y) * width + x]; }
  std::size_t count() const;

  bool operator==(const Mask&) const = default;
};

/// Axis-aligned box in pixel coordinates, half-open: columns [x_min, x_max).
struct BoxPrompt {
  int x_min = 0;
  int y_min = 0;
  int x_max = 0;
  int y_max = 0;

  int width() const { return x_max - x_min; }
  int height() const { return y_max - y_min; }
  bool valid_for(int image_w, int image_h) const {
    return 0 <= x_min && x_min < x_max && x_max <= image_w && 0 <= y_min && y_min < y_max && y_max <= image_h;
  }
  bool contains(const BoxPrompt& o) const {
    return x_min <= o.x_min && y_min <= o.y_min && x_max >= o.x_max && y_max >= o.y_max;
  }
  bool operator==(const BoxPrompt&) const = default;
};

class InvalidBox : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ImageIoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Rgb {
  float r = 0, g = 0, b = 0;
};
struct Hsv {
  float h = 0, s = 0, v = 0;  // h in [0, 1) turns
};
Rgb hsv_to_rgb(Hsv c);
Hsv rgb_to_hsv(Rgb c);

/// Tight bounding box of the foreground; throws std::invalid_argument on an empty mask.
BoxPrompt tight_bbox(const Mask& m);

void write_ppm(const Image& img, const std::filesystem::path& path);
Image read_ppm(const std::filesystem::path& path);
/// Masks are stored as P5 with 0/255 values.
void write_pgm(const Mask& m, const std::filesystem::path& path);
Mask read_pgm(const std::filesystem::path& path);

}  // namespace evosam
