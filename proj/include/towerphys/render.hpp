#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "towerphys/physics.hpp"

namespace towerphys {

inline constexpr int kFrameSize = 64;
inline constexpr int kChannels = 3;
inline constexpr std::size_t kFrameBytes = kFrameSize * kFrameSize * kChannels;
inline constexpr int kClipLength = 39;

using Rgb = std::array<std::uint8_t, 3>;

// 64x64 RGB, row-major, top row first, channels interleaved.
struct Frame {
  std::array<std::uint8_t, kFrameBytes> pixels{};

  Rgb at(int row, int col) const {
    const std::size_t i = (static_cast<std::size_t>(row) * kFrameSize + col) * kChannels;
    return {pixels[i], pixels[i + 1], pixels[i + 2]};
  }
  friend bool operator==(const Frame&, const Frame&) = default;
};

struct VideoClip {
  std::vector<Frame> frames;  // exactly kClipLength

  friend bool operator==(const VideoClip&, const VideoClip&) = default;
};

struct CameraConfig {
  double x_min = -4.0;
  double x_max = 4.0;
  double y_min = -0.5;
  double y_max = 7.5;
  double ground_height = 0.0;
  double block_side = 1.0;
  Rgb background{236, 240, 245};
  Rgb ground{90, 90, 90};
  std::vector<Rgb> palette{
      {220, 40, 40}, {240, 200, 20}, {40, 170, 60}, {30, 110, 230}, {170, 50, 200}};
};

// Pixel-center coverage, no blending; later blocks overdraw earlier ones.
Frame render_frame(std::span<const BlockState> blocks, const CameraConfig& camera = {});

// 39 frames at evenly spaced steps, inclusive of first and last.
VideoClip render_clip(const Trajectory& trajectory, const CameraConfig& camera = {});

// Indices render_clip samples from a trajectory with `steps` states.
std::vector<std::size_t> clip_indices(std::size_t steps);

Frame flip_horizontal(const Frame& frame);

// Lossless PNG export of a grid of frames, `columns` frames per row.
void write_png(const std::filesystem::path& path, std::span<const Frame> frames,
               int columns);

}  // namespace towerphys
