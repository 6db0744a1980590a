#include "wpclip/image.hpp"

#include <algorithm>
#include <cmath>
#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "wpclip/errors.hpp"
#include "wpclip/rng.hpp"

namespace wpclip {

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes, std::uint64_t h) noexcept {
  for (std::uint8_t c : bytes) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

namespace {

// Converts whatever imread/imdecode produced into 8-bit RGB.
Image from_mat(cv::Mat mat, const std::string& label) {
  if (mat.empty() || mat.cols == 0 || mat.rows == 0) {
    throw InputError("cannot decode image: " + label);
  }
  if (mat.depth() == CV_16U) {
    mat.convertTo(mat, CV_8U, 1.0 / 257.0);
  } else if (mat.depth() == CV_32F || mat.depth() == CV_64F) {
    mat.convertTo(mat, CV_8U, 255.0);
  } else if (mat.depth() != CV_8U) {
    mat.convertTo(mat, CV_8U);
  }

  cv::Mat rgb;
  switch (mat.channels()) {
    case 1:
      cv::cvtColor(mat, rgb, cv::COLOR_GRAY2RGB);
      break;
    case 2: {
      // Gray + alpha.
      std::vector<cv::Mat> planes;
      cv::split(mat, planes);
      cv::Mat bgra;
      cv::merge(std::vector<cv::Mat>{planes[0], planes[0], planes[0], planes[1]}, bgra);
      mat = bgra;
      [[fallthrough]];
    }
    case 4: {
      rgb.create(mat.rows, mat.cols, CV_8UC3);
      for (int y = 0; y < mat.rows; ++y) {
        const auto* src = mat.ptr<cv::Vec4b>(y);
        auto* dst = rgb.ptr<cv::Vec3b>(y);
        for (int x = 0; x < mat.cols; ++x) {
          const int a = src[x][3];
          for (int c = 0; c < 3; ++c) {
            // Composite over white, channel order BGR -> RGB.
            const int v = (src[x][2 - c] * a + 255 * (255 - a) + 127) / 255;
            dst[x][c] = static_cast<std::uint8_t>(v);
          }
        }
      }
      break;
    }
    case 3:
      cv::cvtColor(mat, rgb, cv::COLOR_BGR2RGB);
      break;
    default:
      throw InputError("unsupported channel count " + std::to_string(mat.channels()) + ": " +
                       label);
  }

  Image out;
  out.width = rgb.cols;
  out.height = rgb.rows;
  out.rgb.resize(std::size_t(out.width) * out.height * 3);
  for (int y = 0; y < rgb.rows; ++y) {
    std::copy_n(rgb.ptr<std::uint8_t>(y), std::size_t(out.width) * 3,
                out.rgb.data() + std::size_t(y) * out.width * 3);
  }
  return out;
}

cv::Mat as_mat(const Image& image) {
  // Wraps without copying; callers clone when they need to mutate.
  return cv::Mat(image.height, image.width, CV_8UC3,
                 const_cast<std::uint8_t*>(image.rgb.data()));
}

Image from_rgb_mat(const cv::Mat& rgb) {
  Image out;
  out.width = rgb.cols;
  out.height = rgb.rows;
  out.rgb.resize(std::size_t(out.width) * out.height * 3);
  for (int y = 0; y < rgb.rows; ++y) {
    std::copy_n(rgb.ptr<std::uint8_t>(y), std::size_t(out.width) * 3,
                out.rgb.data() + std::size_t(y) * out.width * 3);
  }
  return out;
}

cv::Mat resize_mat(const cv::Mat& src, int width, int height) {
  cv::Mat dst;
  const bool shrinking = width < src.cols || height < src.rows;
  cv::resize(src, dst, cv::Size(width, height), 0, 0,
             shrinking ? cv::INTER_AREA : cv::INTER_CUBIC);
  return dst;
}

std::vector<std::uint8_t> encode(const Image& image, const std::string& ext,
                                 const std::vector<int>& params) {
  if (image.empty()) throw InputError("cannot encode an empty image");
  cv::Mat bgr;
  cv::cvtColor(as_mat(image), bgr, cv::COLOR_RGB2BGR);
  std::vector<std::uint8_t> buf;
  if (!cv::imencode(ext, bgr, buf, params)) {
    throw Error("image encoding failed (" + ext + ")");
  }
  return buf;
}

}  // namespace

Image Image::filled(int width, int height, std::array<std::uint8_t, 3> color) {
  Image img;
  img.width = width;
  img.height = height;
  img.rgb.resize(std::size_t(width) * height * 3);
  for (std::size_t i = 0; i < img.rgb.size(); i += 3) {
    img.rgb[i] = color[0];
    img.rgb[i + 1] = color[1];
    img.rgb[i + 2] = color[2];
  }
  return img;
}

Image decode_image(const std::filesystem::path& path) {
  std::error_code ec;
  if (!std::filesystem::is_regular_file(path, ec)) {
    throw InputError("image not found: " + path.string());
  }
  cv::Mat mat;
  try {
    mat = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  } catch (const cv::Exception& e) {
    throw InputError("cannot decode image: " + path.string() + " (" + e.what() + ")");
  }
  return from_mat(std::move(mat), path.string());
}

Image decode_image_bytes(std::span<const std::uint8_t> encoded, const std::string& label) {
  cv::Mat buf(1, static_cast<int>(encoded.size()), CV_8UC1,
              const_cast<std::uint8_t*>(encoded.data()));
  cv::Mat mat;
  try {
    mat = cv::imdecode(buf, cv::IMREAD_UNCHANGED);
  } catch (const cv::Exception& e) {
    throw InputError("cannot decode image: " + label + " (" + e.what() + ")");
  }
  return from_mat(std::move(mat), label);
}

std::vector<std::uint8_t> encode_png(const Image& image) { return encode(image, ".png", {}); }

std::vector<std::uint8_t> encode_jpeg(const Image& image, int quality) {
  return encode(image, ".jpg", {cv::IMWRITE_JPEG_QUALITY, quality});
}

void write_png(const Image& image, const std::filesystem::path& path) {
  if (image.empty()) throw InputError("cannot write an empty image");
  cv::Mat bgr;
  cv::cvtColor(as_mat(image), bgr, cv::COLOR_RGB2BGR);
  if (!cv::imwrite(path.string(), bgr)) {
    throw Error("failed to write image: " + path.string());
  }
}

Image crop(const Image& image, int x, int y, int width, int height) {
  if (x < 0 || y < 0 || width <= 0 || height <= 0 || x + width > image.width ||
      y + height > image.height) {
    throw DomainError("crop rectangle outside image");
  }
  return from_rgb_mat(as_mat(image)(cv::Rect(x, y, width, height)).clone());
}

Image resize_to_height(const Image& image, int height) {
  if (image.empty()) throw InputError("cannot resize an empty image");
  if (height == image.height) return image;
  const int width =
      std::max(1, static_cast<int>(std::lround(double(image.width) * height / image.height)));
  return from_rgb_mat(resize_mat(as_mat(image), width, height));
}

ImageTensor preprocess(const Image& image, const PreprocessSpec& spec) {
  if (image.empty()) throw InputError("cannot preprocess an empty image");
  if (spec.target_size <= 0) throw ConfigError("preprocess target_size must be positive");
  const int s = spec.target_size;

  // Shorter side -> s; the longer side is truncated as torchvision does.
  int w, h;
  if (image.width <= image.height) {
    w = s;
    h = static_cast<int>(double(s) * image.height / image.width);
  } else {
    h = s;
    w = static_cast<int>(double(s) * image.width / image.height);
  }
  h = std::max(h, s);
  w = std::max(w, s);
  cv::Mat src = as_mat(image);
  cv::Mat resized = (w == image.width && h == image.height) ? src : resize_mat(src, w, h);

  const int top = static_cast<int>(std::lround((h - s) / 2.0));
  const int left = static_cast<int>(std::lround((w - s) / 2.0));

  ImageTensor t;
  t.size = s;
  t.data.resize(std::size_t(3) * s * s);
  for (int y = 0; y < s; ++y) {
    const auto* row = resized.ptr<std::uint8_t>(y + top) + std::size_t(left) * 3;
    for (int x = 0; x < s; ++x) {
      for (int c = 0; c < 3; ++c) {
        const float v = row[std::size_t(x) * 3 + c] / 255.0f;
        t.data[(std::size_t(c) * s + y) * s + x] =
            (v - spec.channel_mean[c]) / spec.channel_std[c];
      }
    }
  }
  return t;
}

}  // namespace wpclip
