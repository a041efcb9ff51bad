#include "screenreg/image_io.hpp"

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include <algorithm>
#include <cmath>

namespace screenreg {

namespace fs = std::filesystem;

EncodedImage read_image(const fs::path& path) {
  if (!fs::exists(path)) throw Error(ErrorKind::Io, "no such image: " + path.string());
  cv::Mat m = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  if (m.empty()) throw Error(ErrorKind::Io, "cannot decode image: " + path.string());

  EncodedImage out;
  double scale = 1.0;
  switch (m.depth()) {
    case CV_8U: out.bit_depth = 8; scale = 1.0 / 255.0; break;
    case CV_16U: out.bit_depth = 16; scale = 1.0 / 65535.0; break;
    case CV_32F: out.bit_depth = 32; scale = 1.0; break;
    default: throw Error(ErrorKind::Format, "unsupported sample type in " + path.string());
  }
  const int cn = m.channels();
  if (cn != 1 && cn != 3 && cn != 4)
    throw Error(ErrorKind::Format, "unsupported channel count in " + path.string());
  const int out_cn = cn == 1 ? 1 : 3;
  cv::Mat f;
  m.convertTo(f, CV_MAKETYPE(CV_32F, cn), scale);
  out.samples = LinearImage(f.cols, f.rows, out_cn);
  for (int y = 0; y < f.rows; ++y) {
    const float* row = f.ptr<float>(y);
    for (int x = 0; x < f.cols; ++x) {
      float* px = out.samples.pixel(x, y);
      if (out_cn == 1) {
        px[0] = row[x];
      } else {
        // OpenCV stores BGR(A).
        px[0] = row[x * cn + 2];
        px[1] = row[x * cn + 1];
        px[2] = row[x * cn + 0];
      }
    }
  }
  return out;
}

namespace {

cv::Mat to_mat(const LinearImage& img, int cv_depth, double max_code, float scale) {
  const int cn = img.channels();
  cv::Mat m(img.height(), img.width(), CV_MAKETYPE(cv_depth, cn));
  for (int y = 0; y < img.height(); ++y) {
    for (int x = 0; x < img.width(); ++x) {
      const float* px = img.pixel(x, y);
      for (int c = 0; c < cn; ++c) {
        const int dst_c = cn == 3 ? 2 - c : c;
        double v = std::clamp(static_cast<double>(px[c]) / scale, 0.0, 1.0) * max_code;
        v = std::round(v);
        if (cv_depth == CV_8U)
          m.ptr<std::uint8_t>(y)[x * cn + dst_c] = static_cast<std::uint8_t>(v);
        else
          m.ptr<std::uint16_t>(y)[x * cn + dst_c] = static_cast<std::uint16_t>(v);
      }
    }
  }
  return m;
}

void write_mat(const fs::path& path, const cv::Mat& m) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  bool ok = false;
  try {
    ok = cv::imwrite(path.string(), m);
  } catch (const cv::Exception& e) {
    throw Error(ErrorKind::Io, "cannot write " + path.string() + ": " + e.what());
  }
  if (!ok) throw Error(ErrorKind::Io, "cannot write " + path.string());
}

}  // namespace

void write_image(const fs::path& path, const LinearImage& img, SampleDepth depth, float scale) {
  if (depth == SampleDepth::U8)
    write_mat(path, to_mat(img, CV_8U, 255.0, scale));
  else
    write_mat(path, to_mat(img, CV_16U, 65535.0, scale));
}

void write_float_tiff(const fs::path& path, const LinearImage& img) {
  const int cn = img.channels();
  cv::Mat m(img.height(), img.width(), CV_MAKETYPE(CV_32F, cn));
  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < img.width(); ++x)
      for (int c = 0; c < cn; ++c)
        m.ptr<float>(y)[x * cn + (cn == 3 ? 2 - c : c)] = img.at(x, y, c);
  write_mat(path, m);
}

void write_display(const fs::path& path, const DisplayImage& img) {
  const int type = img.depth == SampleDepth::U8 ? CV_8UC(img.channels) : CV_16UC(img.channels);
  cv::Mat m(img.height, img.width, type);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < img.channels; ++c) {
        const std::uint16_t v =
            img.data[(static_cast<std::size_t>(y) * img.width + x) * img.channels + c];
        const int dst_c = img.channels == 3 ? 2 - c : c;
        if (img.depth == SampleDepth::U8)
          m.ptr<std::uint8_t>(y)[x * img.channels + dst_c] = static_cast<std::uint8_t>(v);
        else
          m.ptr<std::uint16_t>(y)[x * img.channels + dst_c] = v;
      }
  write_mat(path, m);
}

}  // namespace screenreg
