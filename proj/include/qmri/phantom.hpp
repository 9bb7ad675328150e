#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "qmri/physics.hpp"

namespace qmri {

enum class Tissue : std::uint8_t { Background = 0, Csf = 1, Gm = 2, Wm = 3, Lesion = 4 };

std::string to_string(Tissue t);
Tissue tissue_from_string(const std::string& name);

struct TissueStats {
  double mean = 0.0;
  double std = 0.0;
};

struct TissueProperties {
  TissueStats t1;  // ms
  TissueStats t2;  // ms
  TissueStats pd;
};

/// Per-class relaxation priors. Defaults for WM/GM/CSF are the adult
/// literature values (mean +- std); the lesion class is a generic
/// T2-hyperintense white-matter lesion.
struct TissueTable {
  TissueProperties wm{{789.78, 74.12}, {83.12, 5.69}, {766.01, 44.87}};
  TissueProperties gm{{1266.35, 169.82}, {100.28, 12.90}, {988.17, 71.18}};
  TissueProperties csf{{3918.05, 155.11}, {1064.94, 214.37}, {1737.31, 55.78}};
  TissueProperties lesion{{1350.0, 150.0}, {150.0, 25.0}, {1000.0, 60.0}};

  const TissueProperties& at(Tissue t) const;
  void validate() const;
};

/// Voxel-value bounds enforced inside the mask.
inline constexpr double kT1Min = 100.0, kT1Max = 6000.0;
inline constexpr double kT2Min = 10.0, kT2Max = 3000.0;

/// Circular region of interest: voxels whose centre lies within
/// diameter/2 of (row, col), inclusive.
struct RoiDisc {
  int row = 0;
  int col = 0;
  double diameter = 8.0;
  Tissue label = Tissue::Wm;

  bool operator==(const RoiDisc&) const = default;
};

/// Integer offsets (dy, dx) covered by a disc of the given diameter.
std::vector<std::pair<int, int>> disc_offsets(double diameter);

struct PhantomConfig {
  std::size_t height = 64;
  std::size_t width = 64;
  double lesion_probability = 0.3;
  int max_lesions = 2;
  bool jitter_tissues = true;  // per-phantom Gaussian draw around each class mean
  TissueTable tissues;

  void validate() const;
};

struct Phantom {
  ParametricMaps maps;
  Grid<std::uint8_t> labels;  // Tissue codes
  std::vector<RoiDisc> rois;  // one per WM, GM, CSF
};

/// Elliptical brain with cortical GM ribbon, a ventricle, a deep GM nucleus,
/// WM elsewhere and optional lesions. Requires H, W >= 32.
Phantom generate_phantom(const PhantomConfig& cfg, Rng& rng);

}  // namespace qmri
