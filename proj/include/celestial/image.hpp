#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace celestial {

struct ImageSize {
  int height = 64;
  int width = 64;
  friend bool operator==(const ImageSize&, const ImageSize&) = default;
};

/// Pixel grid stored channel-major: pixels(c, y * width + x), values in [0,1].
struct Image {
  int height = 0;
  int width = 0;
  int channels = 0;
  Eigen::MatrixXf pixels;

  Image() = default;
  Image(int h, int w, int c) : height(h), width(w), channels(c), pixels(c, h * w) {
    pixels.setZero();
  }

  float& at(int c, int y, int x) { return pixels(c, y * width + x); }
  float at(int c, int y, int x) const { return pixels(c, y * width + x); }
  bool square() const { return height == width; }
  ImageSize size() const { return {height, width}; }

  friend bool operator==(const Image& a, const Image& b) {
    return a.height == b.height && a.width == b.width && a.channels == b.channels &&
           a.pixels == b.pixels;
  }
};

/// Rotate counter-clockwise by quarter_turns * 90 degrees. Requires a square image.
Image rotate_quarter(const Image& image, int quarter_turns);

/// Bilinear resize with half-pixel centers (corners not aligned), edge-clamped.
Image resize_bilinear(const Image& image, ImageSize target);

/// Throws ValidationError unless every pixel is in [0,1] and the shape is valid.
void check_pixel_range(const Image& image);

/// Decode an encoded image (PNG, JPEG, TIFF, ...) to RGB in [0,1].
Image decode_image_bytes(std::span<const std::uint8_t> bytes);
Image decode_image_file(const std::string& path);

/// Encode as 8-bit PNG (values rounded from [0,1]).
std::vector<std::uint8_t> encode_png(const Image& image);
void write_png(const Image& image, const std::string& path);

}  // namespace celestial
