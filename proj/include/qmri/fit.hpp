#pragma once

#include <span>
#include <vector>

#include "qmri/phantom.hpp"
#include "qmri/physics.hpp"

namespace qmri::fit {

struct FitOptions {
  double t1_min = 100.0;
  double t1_max = 6000.0;
  double t2_min = 10.0;
  double t2_max = 3000.0;
  int n_t1 = 24;  // log-spaced seeding grid
  int n_t2 = 24;
  int max_iterations = 100;
  double step_tolerance = 1e-10;      // max relative parameter change
  double residual_tolerance = 1e-12;  // residual norm relative to |signals|
  double damping_init = 1e-3;
  double damping_up = 10.0;
  double damping_down = 0.5;
  // Tie-break between equally good fits: nearest tissue class in (T1, T2)
  // when set, otherwise the smaller T1.
  bool use_prior = true;
  TissueTable prior;

  void validate() const;
};

struct FitResult {
  double t1_ms = 0.0;
  double t2_ms = 0.0;
  double pd = 0.0;
  double residual_norm = 0.0;
  int iterations = 0;
  bool converged = false;
  bool ill_posed = false;  // protocols cannot identify (T1, T2, PD)
};

/// Least-squares PD for fixed (T1, T2): sum(y f) / sum(f^2), where f holds
/// the model signals at PD = 1.
double pd_closed_form(std::span<const double> signals, std::span<const double> basis);

/// Grid search over log-spaced (T1, T2) with closed-form PD; the best grid
/// local minima are refined by Levenberg-Marquardt on (PD, T1, T2) with box
/// clamping. When `trace` is given, it receives the residual norm after the
/// best seed and after every accepted step of its refinement.
FitResult fit_voxel(std::span<const double> signals, std::span<const ScanParams> protocols, const FitOptions& opts,
                    std::vector<double>* trace = nullptr);

struct FitMapResult {
  ParametricMaps maps;
  Mask converged;  // 1 where the voxel fit converged
  std::size_t fitted = 0;
  std::size_t converged_count = 0;
  std::size_t ill_posed_count = 0;
  std::vector<double> residuals;  // per fitted voxel, raster order
};

/// Fits every masked voxel of an aligned stack. Voxels are independent, so
/// the result does not depend on `threads`.
FitMapResult fit_map(std::span<const WeightedImage> stack, const Mask& mask, const FitOptions& opts, int threads = 1);

/// Analytic signal Jacobian versus central differences; max relative error
/// over the (PD, T1, T2) columns.
double jacobian_check(double t1_ms, double t2_ms, double pd, const ScanParams& protocol);

}  // namespace qmri::fit
