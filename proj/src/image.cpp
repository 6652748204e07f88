#include "celestial/image.hpp"

#include "celestial/errors.hpp"

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>

namespace celestial {

Image rotate_quarter(const Image& image, int quarter_turns) {
  if (!image.square()) throw ValidationError("rotation requires a square image");
  const int k = ((quarter_turns % 4) + 4) % 4;
  if (k == 0) return image;
  const int n = image.height;
  Image out(n, n, image.channels);
  for (int c = 0; c < image.channels; ++c) {
    for (int y = 0; y < n; ++y) {
      for (int x = 0; x < n; ++x) {
        int sy = y, sx = x;
        switch (k) {
          case 1: sy = x; sx = n - 1 - y; break;
          case 2: sy = n - 1 - y; sx = n - 1 - x; break;
          case 3: sy = n - 1 - x; sx = y; break;
        }
        out.at(c, y, x) = image.at(c, sy, sx);
      }
    }
  }
  return out;
}

Image resize_bilinear(const Image& image, ImageSize target) {
  if (target.height <= 0 || target.width <= 0)
    throw ValidationError("resize target must be positive");
  if (image.size() == target) return image;

  // Source coordinate for each destination row/column: (d + 0.5) * scale - 0.5.
  struct Tap {
    int lo, hi;
    double frac;
  };
  auto taps = [](int src, int dst) {
    std::vector<Tap> t(dst);
    const double scale = static_cast<double>(src) / dst;
    for (int d = 0; d < dst; ++d) {
      double s = std::clamp((d + 0.5) * scale - 0.5, 0.0, static_cast<double>(src - 1));
      int lo = static_cast<int>(std::floor(s));
      int hi = std::min(lo + 1, src - 1);
      t[d] = {lo, hi, s - lo};
    }
    return t;
  };
  const auto ty = taps(image.height, target.height);
  const auto tx = taps(image.width, target.width);

  Image out(target.height, target.width, image.channels);
  for (int c = 0; c < image.channels; ++c) {
    for (int y = 0; y < target.height; ++y) {
      const Tap& a = ty[y];
      for (int x = 0; x < target.width; ++x) {
        const Tap& b = tx[x];
        double top = (1.0 - b.frac) * image.at(c, a.lo, b.lo) + b.frac * image.at(c, a.lo, b.hi);
        double bot = (1.0 - b.frac) * image.at(c, a.hi, b.lo) + b.frac * image.at(c, a.hi, b.hi);
        out.at(c, y, x) = static_cast<float>((1.0 - a.frac) * top + a.frac * bot);
      }
    }
  }
  return out;
}

void check_pixel_range(const Image& image) {
  if (image.height <= 0 || image.width <= 0)
    throw ValidationError("image dimensions must be positive");
  if (image.channels != 1 && image.channels != 3)
    throw ValidationError("image must have 1 or 3 channels");
  if (image.pixels.rows() != image.channels ||
      image.pixels.cols() != static_cast<Eigen::Index>(image.height) * image.width)
    throw ValidationError("pixel storage does not match image shape");
  if (image.pixels.size() > 0 &&
      (!(image.pixels.minCoeff() >= 0.0f) || !(image.pixels.maxCoeff() <= 1.0f)))
    throw ValidationError("pixel value outside [0,1]");
}

namespace {

Image from_mat(const cv::Mat& bgr) {
  cv::Mat rgb;
  cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
  Image out(rgb.rows, rgb.cols, 3);
  for (int y = 0; y < rgb.rows; ++y) {
    const auto* row = rgb.ptr<cv::Vec3b>(y);
    for (int x = 0; x < rgb.cols; ++x)
      for (int c = 0; c < 3; ++c) out.at(c, y, x) = row[x][c] / 255.0f;
  }
  return out;
}

cv::Mat to_mat(const Image& image) {
  auto to_byte = [](float v) {
    return static_cast<uchar>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
  };
  if (image.channels == 1) {
    cv::Mat m(image.height, image.width, CV_8UC1);
    for (int y = 0; y < image.height; ++y)
      for (int x = 0; x < image.width; ++x) m.at<uchar>(y, x) = to_byte(image.at(0, y, x));
    return m;
  }
  cv::Mat m(image.height, image.width, CV_8UC3);
  for (int y = 0; y < image.height; ++y)
    for (int x = 0; x < image.width; ++x)
      for (int c = 0; c < 3; ++c) m.at<cv::Vec3b>(y, x)[2 - c] = to_byte(image.at(c, y, x));
  return m;
}

}  // namespace

Image decode_image_bytes(std::span<const std::uint8_t> bytes) {
  if (bytes.empty()) throw DecodeError("empty image buffer");
  cv::Mat buf(1, static_cast<int>(bytes.size()), CV_8UC1, const_cast<std::uint8_t*>(bytes.data()));
  cv::Mat bgr;
  try {
    bgr = cv::imdecode(buf, cv::IMREAD_COLOR);
  } catch (const cv::Exception& e) {
    throw DecodeError(std::string("image decode failed: ") + e.what());
  }
  if (bgr.empty()) throw DecodeError("unrecognized or corrupt image data");
  return from_mat(bgr);
}

Image decode_image_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DecodeError("cannot open image file: " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), {});
  try {
    return decode_image_bytes(bytes);
  } catch (const DecodeError& e) {
    throw DecodeError(path + ": " + e.what());
  }
}

std::vector<std::uint8_t> encode_png(const Image& image) {
  std::vector<std::uint8_t> out;
  if (!cv::imencode(".png", to_mat(image), out)) throw Error("PNG encoding failed");
  return out;
}

void write_png(const Image& image, const std::string& path) {
  auto bytes = encode_png(image);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("cannot write " + path);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace celestial
