#include "towerphys/render.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>

#include "towerphys/error.hpp"
#include "towerphys/io.hpp"

namespace towerphys {
namespace {

void validate(const CameraConfig& camera) {
  const double w = camera.x_max - camera.x_min;
  const double h = camera.y_max - camera.y_min;
  require(w > 0.0 && h > 0.0, "camera: empty window");
  require(w == h, "camera: window must have a 1:1 aspect ratio");
  require(!camera.palette.empty(), "camera: palette must not be empty");
}

void put(Frame& frame, int row, int col, const Rgb& color) {
  const std::size_t i = (static_cast<std::size_t>(row) * kFrameSize + col) * kChannels;
  frame.pixels[i] = color[0];
  frame.pixels[i + 1] = color[1];
  frame.pixels[i + 2] = color[2];
}

}  // namespace

Frame render_frame(std::span<const BlockState> blocks, const CameraConfig& camera) {
  validate(camera);
  const double scale = (camera.x_max - camera.x_min) / kFrameSize;
  auto center_x = [&](int col) { return camera.x_min + (col + 0.5) * scale; };
  auto center_y = [&](int row) { return camera.y_max - (row + 0.5) * scale; };

  Frame frame;
  for (int row = 0; row < kFrameSize; ++row) {
    const Rgb& color = center_y(row) < camera.ground_height ? camera.ground : camera.background;
    for (int col = 0; col < kFrameSize; ++col) put(frame, row, col, color);
  }

  const double half = 0.5 * camera.block_side;
  const double radius = half * std::sqrt(2.0);
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    const BlockState& s = blocks[b];
    const double c = std::cos(s.angle);
    const double sn = std::sin(s.angle);
    const Rgb& color = camera.palette[b % camera.palette.size()];
    // Conservative pixel bounds from the circumscribed circle.
    auto to_pixel = [](double v) { return static_cast<int>(std::clamp(v, -1e6, 1e6)); };
    const int col_lo = std::max(0, to_pixel(std::floor((s.position.x - radius - camera.x_min) / scale)) - 1);
    const int col_hi = std::min(kFrameSize - 1, to_pixel(std::ceil((s.position.x + radius - camera.x_min) / scale)) + 1);
    const int row_lo = std::max(0, to_pixel(std::floor((camera.y_max - s.position.y - radius) / scale)) - 1);
    const int row_hi = std::min(kFrameSize - 1, to_pixel(std::ceil((camera.y_max - s.position.y + radius) / scale)) + 1);
    for (int row = row_lo; row <= row_hi; ++row) {
      const double dy = center_y(row) - s.position.y;
      for (int col = col_lo; col <= col_hi; ++col) {
        const double dx = center_x(col) - s.position.x;
        const double lx = c * dx + sn * dy;
        const double ly = c * dy - sn * dx;
        if (std::abs(lx) <= half && std::abs(ly) <= half) put(frame, row, col, color);
      }
    }
  }
  return frame;
}

std::vector<std::size_t> clip_indices(std::size_t steps) {
  require(steps >= static_cast<std::size_t>(kClipLength),
          "render_clip: trajectory too short (need at least 39 states, got " +
              std::to_string(steps) + ")");
  std::vector<std::size_t> idx(kClipLength);
  const std::size_t span = steps - 1;
  constexpr std::size_t intervals = kClipLength - 1;
  for (std::size_t k = 0; k < idx.size(); ++k) {
    // round(k * span / intervals), halves rounded up, in exact integer arithmetic.
    idx[k] = (2 * k * span + intervals) / (2 * intervals);
  }
  return idx;
}

VideoClip render_clip(const Trajectory& trajectory, const CameraConfig& camera) {
  VideoClip clip;
  clip.frames.reserve(kClipLength);
  for (std::size_t i : clip_indices(trajectory.states.size())) {
    clip.frames.push_back(render_frame(trajectory.states[i], camera));
  }
  return clip;
}

Frame flip_horizontal(const Frame& frame) {
  Frame out;
  for (int row = 0; row < kFrameSize; ++row) {
    for (int col = 0; col < kFrameSize; ++col) {
      put(out, row, kFrameSize - 1 - col, frame.at(row, col));
    }
  }
  return out;
}

void write_png(const std::filesystem::path& path, std::span<const Frame> frames, int columns) {
  require(!frames.empty() && columns > 0, "write_png: nothing to write");
  const int cols = std::min<int>(columns, static_cast<int>(frames.size()));
  const int rows = (static_cast<int>(frames.size()) + cols - 1) / cols;
  const int width = cols * kFrameSize;
  const int height = rows * kFrameSize;

  std::vector<std::uint8_t> raw;
  raw.reserve(static_cast<std::size_t>(height) * (1 + width * 3));
  for (int y = 0; y < height; ++y) {
    raw.push_back(0);  // filter type: none
    for (int x = 0; x < width; ++x) {
      const std::size_t f = static_cast<std::size_t>((y / kFrameSize) * cols + x / kFrameSize);
      const Rgb px = f < frames.size() ? frames[f].at(y % kFrameSize, x % kFrameSize)
                                       : Rgb{255, 255, 255};
      raw.insert(raw.end(), px.begin(), px.end());
    }
  }
  uLongf packed_size = compressBound(static_cast<uLong>(raw.size()));
  std::vector<std::uint8_t> packed(packed_size);
  if (compress2(packed.data(), &packed_size, raw.data(), static_cast<uLong>(raw.size()), 9) != Z_OK) {
    fail(ErrorKind::io, "write_png: compression failed");
  }
  packed.resize(packed_size);

  std::vector<std::uint8_t> png = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  auto be32 = [&](std::uint32_t v) {
    for (int s = 24; s >= 0; s -= 8) png.push_back(static_cast<std::uint8_t>(v >> s));
  };
  auto chunk = [&](const char* type, std::span<const std::uint8_t> data) {
    be32(static_cast<std::uint32_t>(data.size()));
    const std::size_t start = png.size();
    png.insert(png.end(), type, type + 4);
    png.insert(png.end(), data.begin(), data.end());
    be32(io::crc32(std::span(png).subspan(start)));
  };
  std::vector<std::uint8_t> ihdr;
  for (std::uint32_t v : {static_cast<std::uint32_t>(width), static_cast<std::uint32_t>(height)}) {
    for (int s = 24; s >= 0; s -= 8) ihdr.push_back(static_cast<std::uint8_t>(v >> s));
  }
  ihdr.insert(ihdr.end(), {8, 2, 0, 0, 0});  // 8-bit RGB, no interlace
  chunk("IHDR", ihdr);
  chunk("IDAT", packed);
  chunk("IEND", {});
  io::write_file_atomic(path, png);
}

}  // namespace towerphys
