#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "qmri/image.hpp"

namespace qmri::io {

// ---------------------------------------------------------------------------
// QMAP container
//
//   "QMAP" | u16 version | u8 channel count
//   per channel: u16 name length | UTF-8 name bytes
//   u32 H | u32 W | u8 dtype (1 = float32)
//   payload: channels back to back, row-major, little-endian float32
//
// All integers are little-endian.

inline constexpr std::uint16_t kQmapVersion = 1;
inline constexpr std::uint8_t kDtypeFloat32 = 1;

struct QmapChannel {
  std::string name;
  Image image;
};

struct QmapFile {
  std::vector<QmapChannel> channels;

  std::size_t height() const { return channels.empty() ? 0 : channels.front().image.height; }
  std::size_t width() const { return channels.empty() ? 0 : channels.front().image.width; }
  const Image& channel(const std::string& name) const;
  bool has(const std::string& name) const;
  void add(std::string name, Image image);
};

std::vector<std::uint8_t> encode_qmap(const QmapFile& file);
QmapFile decode_qmap(const std::vector<std::uint8_t>& bytes);

void write_qmap(const std::filesystem::path& path, const QmapFile& file);
QmapFile read_qmap(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Whole-file helpers

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path);
void write_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);
std::string read_text(const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, const std::string& text);

/// FNV-1a over a byte range.
std::uint64_t fnv1a(const std::uint8_t* data, std::size_t size, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::uint64_t fnv1a(const std::string& text);
std::string hex64(std::uint64_t value);

// ---------------------------------------------------------------------------
// Preprocessing

/// Percentile over masked voxels, linear interpolation between order
/// statistics at rank q/100 * (n-1).
double masked_percentile(const Image& img, const Mask& mask, double q);

/// Clamps every voxel to [p_lo, p_hi] computed over the mask.
Image clip_percentile(const Image& img, const Mask& mask, double lo = 0.5, double hi = 99.5);

/// Divides by the masked maximum. Returns the divisor through `max_out`.
Image normalize_max(const Image& img, const Mask& mask, double* max_out = nullptr);

/// Centred window; odd leftovers are dropped from the bottom/right.
template <typename T>
Grid<T> center_crop(const Grid<T>& img, std::size_t h, std::size_t w);

/// Top-left corner of the centre_crop window.
std::pair<std::size_t, std::size_t> crop_offset(std::size_t src_h, std::size_t src_w, std::size_t h, std::size_t w);

// ---------------------------------------------------------------------------
// PGM (P5) rendering

/// Affine window [lo, hi] -> [0, maxval], clamped, round-half-up.
void write_pgm(const std::filesystem::path& path, const Image& img, int depth, double lo, double hi);
std::vector<std::uint8_t> encode_pgm(const Image& img, int depth, double lo, double hi);

}  // namespace qmri::io
