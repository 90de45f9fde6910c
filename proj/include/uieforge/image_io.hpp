#pragma once

// 8-bit PNG/JPEG I/O and resampling on (3,H,W) float tensors in [0,1].

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "uieforge/tensor.hpp"

namespace uieforge {

using Image = Tensor<float>;  // (3,H,W), RGB, [0,1]

namespace detail {

inline cv::Mat to_mat(const Image& img) {
  if (img.rank() != 3 || img.dim(0) != 3) shape_fail("image", "expected (3,H,W), got " + to_string(img.shape()));
  const int h = int(img.dim(1)), w = int(img.dim(2));
  cv::Mat m(h, w, CV_32FC3);
  for (int y = 0; y < h; ++y) {
    auto* row = m.ptr<cv::Vec3f>(y);
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) row[x][c] = img[(std::size_t(c) * h + y) * w + x];
  }
  return m;
}

inline Image from_mat(const cv::Mat& m) {
  Image img({3, std::size_t(m.rows), std::size_t(m.cols)});
  const std::size_t h = m.rows, w = m.cols;
  for (std::size_t y = 0; y < h; ++y) {
    const auto* row = m.ptr<cv::Vec3f>(int(y));
    for (std::size_t x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) img[(c * h + y) * w + x] = row[x][c];
  }
  return img;
}

}  // namespace detail

inline bool is_image_file(const std::filesystem::path& p) {
  auto ext = p.extension().string();
  for (auto& ch : ext) ch = char(std::tolower(static_cast<unsigned char>(ch)));
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

// Sorted image files directly under `dir`.
inline std::vector<std::filesystem::path> list_images(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> out;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_regular_file() && is_image_file(e.path())) out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

// Returns nullopt when the file cannot be decoded.
inline std::optional<Image> read_image(const std::filesystem::path& path) {
  cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) return std::nullopt;
  cv::Mat rgb, f;
  cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
  rgb.convertTo(f, CV_32FC3, 1.0 / 255.0);
  return detail::from_mat(f);
}

inline std::vector<unsigned char> to_bytes(const Image& img) {
  std::vector<unsigned char> out(img.size());
  for (std::size_t i = 0; i < img.size(); ++i)
    out[i] = static_cast<unsigned char>(std::lround(std::clamp(img[i], 0.f, 1.f) * 255.f));
  return out;
}

inline void write_png(const std::filesystem::path& path, const Image& img) {
  cv::Mat f = detail::to_mat(img), u8, bgr;
  cv::Mat clipped = cv::min(cv::max(f, 0.0), 1.0);
  clipped.convertTo(u8, CV_8UC3, 255.0);
  cv::cvtColor(u8, bgr, cv::COLOR_RGB2BGR);
  if (!cv::imwrite(path.string(), bgr)) throw Error("cannot write image " + path.string());
}

// Area resampling when shrinking, bilinear when enlarging.
inline Image resize(const Image& img, std::size_t h, std::size_t w) {
  if (img.dim(1) == h && img.dim(2) == w) return img;
  cv::Mat out;
  const bool shrink = h < img.dim(1) || w < img.dim(2);
  cv::resize(detail::to_mat(img), out, cv::Size(int(w), int(h)), 0, 0, shrink ? cv::INTER_AREA : cv::INTER_LINEAR);
  return detail::from_mat(out);
}

// Stack (3,H,W) images into an (N,3,H,W) batch.
template <class T = float>
Tensor<T> stack(const std::vector<const Image*>& imgs) {
  if (imgs.empty()) throw Error("stack: empty batch");
  const Shape s = imgs[0]->shape();
  AlignedVector<T> data;
  data.reserve(imgs.size() * imgs[0]->size());
  for (const auto* im : imgs) {
    if (im->shape() != s) shape_fail("stack", s, im->shape());
    data.insert(data.end(), im->storage().begin(), im->storage().end());
  }
  return Tensor<T>({imgs.size(), s[0], s[1], s[2]}, std::move(data));
}

}  // namespace uieforge
