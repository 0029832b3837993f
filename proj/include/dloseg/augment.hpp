#pragma once

#include <algorithm>

#include <opencv2/core.hpp>
#include <opencv2/imgproc.hpp>

#include "dloseg/common.hpp"
#include "dloseg/random.hpp"

namespace dloseg {

// Photometric training augmentations. Geometry is never touched, so masks
// stay valid unchanged. Each transform fires independently.
struct AugmentConfig {
  double p_grayscale = 0.25;
  double p_jitter = 0.25;
  double p_blur = 0.25;
  double p_noise = 0.25;
  double p_patch = 0.25;
  double jitter_lo = 0.7;
  double jitter_hi = 1.3;
  double blur_sigma_lo = 0.5;
  double blur_sigma_hi = 2.0;
  double noise_sigma = 8.0;          // 8-bit scale
  double patch_area_fraction = 0.25;
};

namespace detail {

inline void add_noise(cv::Mat& img, Rng& rng, double sigma, const cv::Rect& roi) {
  for (int y = roi.y; y < roi.y + roi.height; ++y) {
    for (int x = roi.x; x < roi.x + roi.width; ++x) {
      cv::Vec3b& px = img.at<cv::Vec3b>(y, x);
      for (int c = 0; c < 3; ++c) {
        const double v = px[c] + rng.normal(0.0, sigma);
        px[c] = static_cast<unsigned char>(std::clamp(v, 0.0, 255.0));
      }
    }
  }
}

}  // namespace detail

inline cv::Mat augment(const cv::Mat& image, Rng& rng, const AugmentConfig& cfg = {}) {
  require(image.type() == CV_8UC3, "augment: expected an 8-bit RGB image");
  cv::Mat img = image.clone();

  if (rng.bernoulli(cfg.p_grayscale)) {
    cv::Mat gray;
    cv::cvtColor(img, gray, cv::COLOR_BGR2GRAY);
    cv::cvtColor(gray, img, cv::COLOR_GRAY2BGR);
  }

  if (rng.bernoulli(cfg.p_jitter)) {
    const double fb = rng.uniform(cfg.jitter_lo, cfg.jitter_hi);  // brightness
    const double fc = rng.uniform(cfg.jitter_lo, cfg.jitter_hi);  // contrast
    const double fs = rng.uniform(cfg.jitter_lo, cfg.jitter_hi);  // saturation
    cv::Mat f;
    img.convertTo(f, CV_32FC3);
    f *= fb;
    const cv::Scalar mean = cv::mean(f);
    f = (f - mean) * fc + mean;
    cv::Mat gray;
    cv::cvtColor(f, gray, cv::COLOR_BGR2GRAY);
    cv::Mat gray3;
    cv::cvtColor(gray, gray3, cv::COLOR_GRAY2BGR);
    f = f * fs + gray3 * (1.0 - fs);
    f.convertTo(img, CV_8UC3);
  }

  if (rng.bernoulli(cfg.p_blur)) {
    const double sigma = rng.uniform(cfg.blur_sigma_lo, cfg.blur_sigma_hi);
    cv::GaussianBlur(img, img, cv::Size(0, 0), sigma);
  }

  if (rng.bernoulli(cfg.p_noise))
    detail::add_noise(img, rng, cfg.noise_sigma, cv::Rect(0, 0, img.cols, img.rows));

  if (rng.bernoulli(cfg.p_patch)) {
    // rectangle covering patch_area_fraction of the image at a random offset
    const double side = std::sqrt(cfg.patch_area_fraction);
    const int pw = std::max(1, static_cast<int>(img.cols * side));
    const int ph = std::max(1, static_cast<int>(img.rows * side));
    const int x0 = rng.uniform_int(0, img.cols - pw);
    const int y0 = rng.uniform_int(0, img.rows - ph);
    const cv::Rect roi(x0, y0, pw, ph);
    if (rng.bernoulli(0.5)) {
      cv::Mat patch = img(roi);
      cv::GaussianBlur(patch, patch, cv::Size(0, 0), 1.5);
    } else {
      detail::add_noise(img, rng, cfg.noise_sigma, roi);
    }
  }

  return img;
}

}  // namespace dloseg
