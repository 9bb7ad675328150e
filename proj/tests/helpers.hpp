#pragma once

#include <filesystem>
#include <random>
#include <string>

#include "qmri/image.hpp"

namespace testutil {

// Fresh directory under the system temp dir, removed on destruction.
struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    static std::uint64_t counter = 0;
    std::random_device rd;
    path = std::filesystem::temp_directory_path() /
           ("qmri_" + tag + "_" + std::to_string(rd()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
};

inline qmri::Image random_image(std::size_t h, std::size_t w, std::mt19937_64& rng, double lo = 0.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  qmri::Image img(h, w);
  for (auto& v : img.data) v = static_cast<float>(u(rng));
  return img;
}

inline qmri::Mask full_mask(std::size_t h, std::size_t w) { return qmri::Mask(h, w, 1); }

}  // namespace testutil
