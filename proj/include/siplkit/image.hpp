// Copyright 2026 The sipl-kit Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <vector>

#include "siplkit/error.hpp"
#include "siplkit/tensor.hpp"

namespace siplkit {

/// H×W×C float image, nominally in [0,1].
using Image = Tensor<float>;

inline std::int64_t height(const Image& img) { return img.dim(0); }
inline std::int64_t width(const Image& img) { return img.dim(1); }
inline std::int64_t channels(const Image& img) { return img.dim(2); }

inline void require_image(const Image& img, const char* what) {
  if (img.rank() != 3) throw ShapeError(std::string(what) + ": expected H×W×C image, got " + to_string(img.shape()));
}

inline Image clip01(Image img) {
  for (auto& v : img.values()) v = std::clamp(v, 0.0f, 1.0f);
  return img;
}

template <typename T>
Tensor<T> clip01(Tensor<T> t) {
  for (auto& v : t.values()) v = std::clamp(v, T(0), T(1));
  return t;
}

/// Stacks same-shape H×W×C images into N×H×W×C.
template <typename T = float>
Tensor<T> stack_images(std::span<const Image> images) {
  if (images.empty()) throw ShapeError("stack_images: empty batch");
  const Shape s = images.front().shape();
  std::vector<T> data;
  data.reserve(images.size() * images.front().size());
  for (const auto& im : images) {
    if (im.shape() != s) throw ShapeMismatch("stack_images: images differ in shape");
    for (float v : im.values()) data.push_back(static_cast<T>(v));
  }
  return Tensor<T>(Shape{static_cast<std::int64_t>(images.size()), s[0], s[1], s[2]}, std::move(data));
}

template <typename T>
std::vector<Image> unstack_images(const Tensor<T>& batch) {
  if (batch.rank() != 4) throw ShapeError("unstack_images: expected N×H×W×C");
  const auto n = batch.dim(0);
  const std::size_t per = batch.size() / static_cast<std::size_t>(n);
  std::vector<Image> out;
  for (std::int64_t i = 0; i < n; ++i) {
    std::vector<float> d(per);
    for (std::size_t k = 0; k < per; ++k) d[k] = static_cast<float>(batch[i * per + k]);
    out.emplace_back(Shape{batch.dim(1), batch.dim(2), batch.dim(3)}, std::move(d));
  }
  return out;
}

inline std::uint8_t to_u8(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

/// Writes an 8-bit RGB PNG. Values are clipped to [0,1] and rounded.
inline void write_png(const std::filesystem::path& path, const Image& img) {
  require_image(img, "write_png");
  if (channels(img) != 3) throw ShapeError("write_png: expected 3 channels");
  std::vector<std::uint8_t> bytes(img.size());
  std::transform(img.values().begin(), img.values().end(), bytes.begin(), to_u8);
  png_image pimg;
  std::memset(&pimg, 0, sizeof(pimg));
  pimg.version = PNG_IMAGE_VERSION;
  pimg.width = static_cast<png_uint_32>(width(img));
  pimg.height = static_cast<png_uint_32>(height(img));
  pimg.format = PNG_FORMAT_RGB;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  if (png_image_write_to_file(&pimg, path.c_str(), 0, bytes.data(), 0, nullptr) == 0) {
    throw IoError("cannot write PNG " + path.string() + ": " + pimg.message);
  }
}

inline Image read_png(const std::filesystem::path& path) {
  png_image pimg;
  std::memset(&pimg, 0, sizeof(pimg));
  pimg.version = PNG_IMAGE_VERSION;
  if (png_image_begin_read_from_file(&pimg, path.c_str()) == 0) {
    throw IoError("cannot read PNG " + path.string() + ": " + pimg.message);
  }
  pimg.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> bytes(PNG_IMAGE_SIZE(pimg));
  if (png_image_finish_read(&pimg, nullptr, bytes.data(), 0, nullptr) == 0) {
    png_image_free(&pimg);
    throw IoError("cannot decode PNG " + path.string() + ": " + pimg.message);
  }
  Image img(Shape{static_cast<std::int64_t>(pimg.height), static_cast<std::int64_t>(pimg.width), 3});
  for (std::size_t i = 0; i < bytes.size(); ++i) img[i] = static_cast<float>(bytes[i]) / 255.0f;
  return img;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace siplkit
