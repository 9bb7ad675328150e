#include "qmri/dataio.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>

namespace qmri::io {

namespace fs = std::filesystem;

const Image& QmapFile::channel(const std::string& name) const {
  for (const auto& c : channels) {
    if (c.name == name) return c.image;
  }
  throw FormatError(FormatError::Kind::Schema, "QMAP has no channel named '" + name + "'");
}

bool QmapFile::has(const std::string& name) const {
  return std::any_of(channels.begin(), channels.end(), [&](const QmapChannel& c) { return c.name == name; });
}

void QmapFile::add(std::string name, Image image) {
  channels.push_back(QmapChannel{std::move(name), std::move(image)});
}

namespace {

bool valid_utf8(const std::string& s) {
  std::size_t i = 0;
  while (i < s.size()) {
    const auto c = static_cast<unsigned char>(s[i]);
    std::size_t extra = 0;
    std::uint32_t cp = 0;
    if (c < 0x80) {
      ++i;
      continue;
    } else if ((c & 0xE0) == 0xC0) {
      extra = 1;
      cp = c & 0x1F;
    } else if ((c & 0xF0) == 0xE0) {
      extra = 2;
      cp = c & 0x0F;
    } else if ((c & 0xF8) == 0xF0) {
      extra = 3;
      cp = c & 0x07;
    } else {
      return false;
    }
    if (i + extra >= s.size()) return false;
    for (std::size_t k = 1; k <= extra; ++k) {
      const auto cc = static_cast<unsigned char>(s[i + k]);
      if ((cc & 0xC0) != 0x80) return false;
      cp = (cp << 6) | (cc & 0x3F);
    }
    static constexpr std::uint32_t kMin[4] = {0, 0x80, 0x800, 0x10000};
    if (cp < kMin[extra] || cp > 0x10FFFF || (cp >= 0xD800 && cp <= 0xDFFF)) return false;
    i += extra + 1;
  }
  return true;
}

class Writer {
 public:
  void u8(std::uint8_t v) { out.push_back(v); }
  void u16(std::uint16_t v) {
    for (int i = 0; i < 2; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void bytes(const std::string& s) { out.insert(out.end(), s.begin(), s.end()); }
  std::vector<std::uint8_t> out;
};

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& b) : buf(b) {}
  void need(std::size_t n, const char* what) const {
    if (buf.size() - pos < n) {
      throw FormatError(FormatError::Kind::Truncated, std::string("QMAP truncated while reading ") + what);
    }
  }
  std::uint8_t u8(const char* what) {
    need(1, what);
    return buf[pos++];
  }
  std::uint16_t u16(const char* what) {
    need(2, what);
    std::uint16_t v = static_cast<std::uint16_t>(buf[pos] | (buf[pos + 1] << 8));
    pos += 2;
    return v;
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(buf[pos + static_cast<std::size_t>(i)]) << (8 * i);
    pos += 4;
    return v;
  }
  float f32() {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(buf[pos + static_cast<std::size_t>(i)]) << (8 * i);
    pos += 4;
    return std::bit_cast<float>(v);
  }
  std::string str(std::size_t n, const char* what) {
    need(n, what);
    std::string s(buf.begin() + static_cast<std::ptrdiff_t>(pos), buf.begin() + static_cast<std::ptrdiff_t>(pos + n));
    pos += n;
    return s;
  }
  std::size_t remaining() const { return buf.size() - pos; }

 private:
  const std::vector<std::uint8_t>& buf;
  std::size_t pos = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_qmap(const QmapFile& file) {
  if (file.channels.empty()) throw InvalidArgument("QMAP needs at least one channel");
  if (file.channels.size() > 255) throw InvalidArgument("QMAP holds at most 255 channels");
  const std::size_t h = file.height(), w = file.width();
  if (h == 0 || w == 0 || h > 0xFFFFFFFFu || w > 0xFFFFFFFFu) throw InvalidArgument("QMAP dimensions out of range");
  Writer wr;
  wr.bytes("QMAP");
  wr.u16(kQmapVersion);
  wr.u8(static_cast<std::uint8_t>(file.channels.size()));
  for (const auto& c : file.channels) {
    if (c.name.size() > 0xFFFF) throw InvalidArgument("QMAP channel name too long");
    if (!valid_utf8(c.name)) throw InvalidArgument("QMAP channel name is not valid UTF-8");
    if (!c.image.same_shape(h, w)) throw ShapeError("QMAP channel '" + c.name + "' has a different size");
    wr.u16(static_cast<std::uint16_t>(c.name.size()));
    wr.bytes(c.name);
  }
  wr.u32(static_cast<std::uint32_t>(h));
  wr.u32(static_cast<std::uint32_t>(w));
  wr.u8(kDtypeFloat32);
  wr.out.reserve(wr.out.size() + file.channels.size() * h * w * 4);
  for (const auto& c : file.channels) {
    for (float v : c.image.data) wr.f32(v);
  }
  return std::move(wr.out);
}

QmapFile decode_qmap(const std::vector<std::uint8_t>& bytes) {
  Reader rd(bytes);
  if (rd.str(4, "magic") != "QMAP") throw FormatError(FormatError::Kind::BadMagic, "not a QMAP file (bad magic)");
  const auto version = rd.u16("version");
  if (version != kQmapVersion) {
    throw FormatError(FormatError::Kind::UnsupportedVersion, "unsupported QMAP version " + std::to_string(version));
  }
  const auto count = rd.u8("channel count");
  if (count == 0) throw FormatError(FormatError::Kind::Schema, "QMAP declares zero channels");
  std::vector<std::string> names;
  for (unsigned i = 0; i < count; ++i) {
    const auto len = rd.u16("channel name length");
    auto name = rd.str(len, "channel name");
    if (!valid_utf8(name)) throw FormatError(FormatError::Kind::BadEncoding, "QMAP channel name is not valid UTF-8");
    names.push_back(std::move(name));
  }
  const auto h = rd.u32("height");
  const auto w = rd.u32("width");
  const auto dtype = rd.u8("dtype");
  if (dtype != kDtypeFloat32) {
    throw FormatError(FormatError::Kind::UnsupportedDtype, "unsupported QMAP dtype code " + std::to_string(dtype));
  }
  if (h == 0 || w == 0) throw FormatError(FormatError::Kind::Schema, "QMAP has zero-sized dimensions");
  const std::uint64_t payload = static_cast<std::uint64_t>(count) * h * w * 4;
  if (rd.remaining() < payload) {
    throw FormatError(FormatError::Kind::Truncated, "QMAP payload truncated: expected " + std::to_string(payload) +
                                                        " bytes, found " + std::to_string(rd.remaining()));
  }
  if (rd.remaining() > payload) {
    throw FormatError(FormatError::Kind::TrailingBytes,
                      "QMAP has " + std::to_string(rd.remaining() - payload) + " unexpected trailing bytes");
  }
  QmapFile file;
  for (auto& name : names) {
    Image img(h, w);
    for (auto& v : img.data) v = rd.f32();
    file.add(std::move(name), std::move(img));
  }
  return file;
}

std::vector<std::uint8_t> read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path.string(), "cannot open for reading");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError(path.string(), "read failed");
  return bytes;
}

void write_bytes(const fs::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(path.string(), "cannot open for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError(path.string(), "write failed");
}

std::string read_text(const fs::path& path) {
  const auto bytes = read_bytes(path);
  return std::string(bytes.begin(), bytes.end());
}

void write_text(const fs::path& path, const std::string& text) {
  write_bytes(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

void write_qmap(const fs::path& path, const QmapFile& file) { write_bytes(path, encode_qmap(file)); }

QmapFile read_qmap(const fs::path& path) {
  try {
    return decode_qmap(read_bytes(path));
  } catch (const FormatError& e) {
    throw FormatError(e.kind(), path.string() + ": " + e.what());
  }
}

std::uint64_t fnv1a(const std::uint8_t* data, std::size_t size, std::uint64_t seed) {
  std::uint64_t h = seed;
  for (std::size_t i = 0; i < size; ++i) {
    h ^= data[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t fnv1a(const std::string& text) {
  return fnv1a(reinterpret_cast<const std::uint8_t*>(text.data()), text.size());
}

std::string hex64(std::uint64_t value) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(value));
  return buf;
}

// ---------------------------------------------------------------------------

double masked_percentile(const Image& img, const Mask& mask, double q) {
  require_same_shape(img, mask, "masked_percentile");
  if (!(q >= 0.0 && q <= 100.0)) throw InvalidArgument("percentile must lie in [0, 100]");
  std::vector<double> values;
  for (std::size_t i = 0; i < img.size(); ++i) {
    if (mask.data[i]) values.push_back(img.data[i]);
  }
  if (values.empty()) throw InvalidArgument("percentile over an empty mask");
  std::sort(values.begin(), values.end());
  const double rank = q / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(rank));
  const auto hi = std::min(lo + 1, values.size() - 1);
  const double frac = rank - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

Image clip_percentile(const Image& img, const Mask& mask, double lo, double hi) {
  if (!(lo <= hi)) throw InvalidArgument("clip_percentile: lo must not exceed hi");
  const auto p_lo = static_cast<float>(masked_percentile(img, mask, lo));
  const auto p_hi = static_cast<float>(masked_percentile(img, mask, hi));
  Image out = img;
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (mask.data[i]) out.data[i] = std::clamp(out.data[i], p_lo, p_hi);
  }
  return out;
}

Image normalize_max(const Image& img, const Mask& mask, double* max_out) {
  require_same_shape(img, mask, "normalize_max");
  float peak = 0.0f;
  bool any = false;
  for (std::size_t i = 0; i < img.size(); ++i) {
    if (!mask.data[i]) continue;
    peak = any ? std::max(peak, img.data[i]) : img.data[i];
    any = true;
  }
  if (!any) throw InvalidArgument("normalize_max: empty mask");
  if (!(peak > 0.0f)) throw InvalidArgument("normalize_max: masked maximum is not positive");
  Image out = img;
  for (auto& v : out.data) v = v / peak;
  if (max_out) *max_out = peak;
  return out;
}

std::pair<std::size_t, std::size_t> crop_offset(std::size_t src_h, std::size_t src_w, std::size_t h, std::size_t w) {
  if (h > src_h || w > src_w) {
    throw InvalidArgument("center_crop: target " + std::to_string(h) + "x" + std::to_string(w) +
                          " larger than source " + std::to_string(src_h) + "x" + std::to_string(src_w));
  }
  if (h == 0 || w == 0) throw InvalidArgument("center_crop: target size must be positive");
  return {(src_h - h) / 2, (src_w - w) / 2};
}

template <typename T>
Grid<T> center_crop(const Grid<T>& img, std::size_t h, std::size_t w) {
  const auto [r0, c0] = crop_offset(img.height, img.width, h, w);
  Grid<T> out(h, w);
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) out(r, c) = img(r0 + r, c0 + c);
  }
  return out;
}

template Grid<float> center_crop(const Grid<float>&, std::size_t, std::size_t);
template Grid<std::uint8_t> center_crop(const Grid<std::uint8_t>&, std::size_t, std::size_t);

// ---------------------------------------------------------------------------

std::vector<std::uint8_t> encode_pgm(const Image& img, int depth, double lo, double hi) {
  if (depth != 8 && depth != 16) throw InvalidArgument("write_pgm: depth must be 8 or 16");
  if (!(lo < hi)) throw InvalidArgument("write_pgm: window requires lo < hi");
  if (img.empty()) throw InvalidArgument("write_pgm: empty image");
  const int maxval = depth == 8 ? 255 : 65535;
  const std::string header =
      "P5\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n" + std::to_string(maxval) + "\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  for (float v : img.data) {
    double t = (static_cast<double>(v) - lo) / (hi - lo);
    t = std::isnan(t) ? 0.0 : std::clamp(t, 0.0, 1.0);
    const auto q = static_cast<unsigned>(std::floor(t * maxval + 0.5));
    if (depth == 8) {
      out.push_back(static_cast<std::uint8_t>(q));
    } else {
      out.push_back(static_cast<std::uint8_t>(q >> 8));
      out.push_back(static_cast<std::uint8_t>(q & 0xFF));
    }
  }
  return out;
}

void write_pgm(const fs::path& path, const Image& img, int depth, double lo, double hi) {
  write_bytes(path, encode_pgm(img, depth, lo, hi));
}

}  // namespace qmri::io
