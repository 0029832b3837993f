#pragma once

#include <Eigen/Core>
#include <opencv2/core.hpp>
#include <opencv2/imgproc.hpp>

#include "dloseg/common.hpp"

namespace dloseg {

using MaskArray = Eigen::ArrayXXd;  // row-major semantics: (row, col) = (y, x)

// 0/1 8-bit mask -> double array.
inline MaskArray mask_to_array(const cv::Mat& mask) {
  require(mask.type() == CV_8UC1, "mask_to_array: expected 8UC1");
  MaskArray out(mask.rows, mask.cols);
  for (int y = 0; y < mask.rows; ++y)
    for (int x = 0; x < mask.cols; ++x)
      out(y, x) = mask.at<unsigned char>(y, x) ? 1.0 : 0.0;
  return out;
}

inline cv::Mat array_to_mask8(const MaskArray& a, double threshold = 0.5) {
  cv::Mat m(static_cast<int>(a.rows()), static_cast<int>(a.cols()), CV_8UC1);
  for (int y = 0; y < m.rows; ++y)
    for (int x = 0; x < m.cols; ++x)
      m.at<unsigned char>(y, x) = a(y, x) >= threshold ? 255 : 0;
  return m;
}

inline cv::Mat array_to_mat64(const MaskArray& a) {
  cv::Mat m(static_cast<int>(a.rows()), static_cast<int>(a.cols()), CV_64FC1);
  for (int y = 0; y < m.rows; ++y)
    for (int x = 0; x < m.cols; ++x) m.at<double>(y, x) = a(y, x);
  return m;
}

inline MaskArray mat64_to_array(const cv::Mat& m) {
  require(m.type() == CV_64FC1, "mat64_to_array: expected 64FC1");
  MaskArray out(m.rows, m.cols);
  for (int y = 0; y < m.rows; ++y)
    for (int x = 0; x < m.cols; ++x) out(y, x) = m.at<double>(y, x);
  return out;
}

// Area-averaged downsample of a binary mask followed by a 0.5 threshold.
// Used to express full-resolution ground truth at the decoder's native mask
// resolution.
inline MaskArray downsample_binary(const MaskArray& mask, int out_h, int out_w) {
  cv::Mat src = array_to_mat64(mask);
  cv::Mat dst;
  cv::resize(src, dst, cv::Size(out_w, out_h), 0, 0, cv::INTER_AREA);
  MaskArray out = mat64_to_array(dst);
  return (out >= 0.5).cast<double>();
}

// Fractional coverage (no thresholding) of a binary mask per output cell.
inline MaskArray downsample_coverage(const MaskArray& mask, int out_h, int out_w) {
  cv::Mat src = array_to_mat64(mask);
  cv::Mat dst;
  cv::resize(src, dst, cv::Size(out_w, out_h), 0, 0, cv::INTER_AREA);
  return mat64_to_array(dst);
}

// Bilinear upsample of a soft mask to the target resolution.
inline MaskArray upsample_bilinear(const MaskArray& mask, int out_h, int out_w) {
  cv::Mat src = array_to_mat64(mask);
  cv::Mat dst;
  cv::resize(src, dst, cv::Size(out_w, out_h), 0, 0, cv::INTER_LINEAR);
  return mat64_to_array(dst);
}

}  // namespace dloseg
