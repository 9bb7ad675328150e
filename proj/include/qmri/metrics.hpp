#pragma once

#include <array>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "qmri/phantom.hpp"
#include "qmri/physics.hpp"

namespace qmri::metrics {

using json = nlohmann::json;

/// Mean |x - y| over the mask.
double mae(const Image& x, const Image& y, const Mask& mask);

/// Mean |(x - y) / y| over masked voxels with |y| > eps. Returned as a
/// fraction, not a percentage.
double mpe(const Image& x, const Image& y, const Mask& mask, double eps);
/// eps = 1e-6 times the masked range of y.
double mpe(const Image& x, const Image& y, const Mask& mask);

/// 10 log10(max_mask(y)^2 / MSE_mask). Returns +infinity when MSE is zero.
double psnr(const Image& x, const Image& y, const Mask& mask);

struct SsimOptions {
  int window = 11;
  double k1 = 0.01;
  double k2 = 0.03;
  std::optional<double> data_range;  // default: masked range of y
};

/// Mean local SSIM over window centres whose whole uniform window lies in
/// the mask. Variances are population variances of the window.
double ssim(const Image& x, const Image& y, const Mask& mask, const SsimOptions& opts = {});

/// (pred - ref)^2 / |ref| * 100 where |ref| > eps, 0 elsewhere and outside
/// the mask.
Image nse_map(const Image& pred, const Image& ref, const Mask& mask, double eps = 1e-12);

/// Mean over voxels whose centre lies within diameter/2 of the ROI centre.
double roi_mean(const Image& map, const RoiDisc& roi);

/// Divides by the masked maximum (no-op when it is not positive); zero
/// outside the mask.
Image rescale_unit(const Image& img, const Mask& mask);

// ---------------------------------------------------------------------------
// Reports

inline constexpr std::array<const char*, 3> kMapNames{"t1", "t2", "pd"};

struct MapMetrics {
  double mae = 0.0;       // ms for T1/T2, unit scale for PD
  double mae_unit = 0.0;  // T1/t1_ref, T2/t2_ref, PD unit scale
  double mpe = 0.0;
  double psnr_db = 0.0;
  double ssim = 0.0;
  bool operator==(const MapMetrics&) const = default;
};

struct RoiComparison {
  RoiDisc roi;
  std::array<double, 3> pred{};  // T1 ms, T2 ms, PD unit
  std::array<double, 3> ref{};
  bool operator==(const RoiComparison&) const = default;
};

struct SliceMetrics {
  std::string id;
  std::array<MapMetrics, 3> maps;
  std::vector<RoiComparison> rois;
  bool operator==(const SliceMetrics&) const = default;
};

/// Mean and population std over finite values; `infinite` counts +inf
/// values left out. All-infinite input gives mean = +inf, std = 0.
struct Summary {
  double mean = 0.0;
  double std = 0.0;
  std::size_t count = 0;
  std::size_t infinite = 0;
  bool operator==(const Summary&) const = default;
};
Summary summarize(std::span<const double> values);

struct MapSummary {
  Summary mae, mae_unit, mpe, psnr_db, ssim;
  bool operator==(const MapSummary&) const = default;
};

struct TissueSummary {
  Tissue label = Tissue::Wm;
  std::array<Summary, 3> pred;
  std::array<Summary, 3> ref;
  bool operator==(const TissueSummary&) const = default;
};

struct MetricsReport {
  std::vector<SliceMetrics> slices;
  std::array<MapSummary, 3> maps;
  std::vector<TissueSummary> tissues;  // CSF, GM, WM, lesion order; absent labels omitted
  std::vector<std::string> renders;    // relative paths of written PGM files
  bool operator==(const MetricsReport&) const = default;
};

struct EvalOptions {
  double t1_ref = 6000.0;
  double t2_ref = 3000.0;
  SsimOptions ssim;
};

/// Compares one predicted slice with its reference on the reference mask.
/// PD of both is rescaled by its masked maximum first.
SliceMetrics evaluate(const ParametricMaps& pred, const ParametricMaps& ref, std::span<const RoiDisc> rois,
                      const std::string& id, const EvalOptions& opts = {});

/// Per-map and per-tissue aggregation in slice order.
MetricsReport build_report(std::vector<SliceMetrics> slices);

json to_json(const MetricsReport& report);
MetricsReport report_from_json(const json& j);

/// Doubles with +-inf and nan encoded as strings.
json number_json(double v);
double number_from_json(const json& j);

}  // namespace qmri::metrics
