#pragma once

#include "screenreg/core.hpp"

#include <cstdint>
#include <filesystem>
#include <vector>

namespace screenreg {

/// Encoded (not yet linearized) image as read from disk, samples scaled
/// to [0,1] from the file's integer range.
struct EncodedImage {
  LinearImage samples;
  int bit_depth = 16;
};

/// Reads 8/16-bit (or float) TIFF and PNG. Gray and RGB are supported;
/// alpha channels are dropped.
EncodedImage read_image(const std::filesystem::path& path);

enum class SampleDepth { U8, U16 };

/// Writes a 1- or 3-channel image, clipping samples to [0, scale] and
/// quantizing to the requested depth. Format follows the extension.
void write_image(const std::filesystem::path& path, const LinearImage& img, SampleDepth depth,
                 float scale = 1.0f);

/// Writes a 32-bit float TIFF (lossless round trip of LinearImage).
void write_float_tiff(const std::filesystem::path& path, const LinearImage& img);

/// Integer display image produced by rendering.
struct DisplayImage {
  int width = 0;
  int height = 0;
  int channels = 3;
  SampleDepth depth = SampleDepth::U16;
  std::vector<std::uint16_t> data;  // 8-bit images use the low byte range 0..255

  std::uint32_t max_code() const { return depth == SampleDepth::U8 ? 255u : 65535u; }
};

void write_display(const std::filesystem::path& path, const DisplayImage& img);

}  // namespace screenreg
