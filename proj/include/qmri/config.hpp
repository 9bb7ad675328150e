#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "qmri/dataset.hpp"
#include "qmri/fit.hpp"
#include "qmri/model.hpp"
#include "qmri/train.hpp"

namespace qmri::config {

struct EvalSettings {
  double min_psnr = 28.0;  // repro gate, dB, every map
  double min_ssim = 0.90;  // repro gate, every map
  bool renders = true;     // write PGM renders next to reports
  bool operator==(const EvalSettings&) const = default;
};

/// Whole-pipeline configuration. Every key is optional; the INI layout is
///
///   seed = 0
///   [phantom]          height, width, n_train, n_test, lesion_probability,
///                      max_lesions, jitter_tissues, <tissue>_<map>_<mean|std>
///   [protocol_ranges]  <t1w|t2w|flair>_<tr|te|ti>_<min|max>
///   [preprocess]       crop_height, crop_width, clip_lo, clip_hi, t1_ref,
///                      t2_ref, noise_sigma
///   [model]            levels, base_channels, embed_dim, tr_ref, te_ref,
///                      ti_ref, param_embedding
///   [train]            lr, max_epochs, patience, batch_size,
///                      validation_fraction, augment_flip, augment_zoom,
///                      lambda_t1, lambda_t2, lambda_pd
///   [fit]              t1_min, t1_max, t2_min, t2_max, n_t1, n_t2,
///                      max_iterations, step_tolerance, residual_tolerance,
///                      damping_init, damping_up, damping_down, threads
///   [eval]             min_psnr, min_ssim, renders
///   [paths]            work_dir
struct PipelineConfig {
  std::uint64_t seed = 0;
  PhantomConfig phantom;
  std::size_t n_train = 256;
  std::size_t n_test = 32;
  ProtocolRanges protocol_ranges;
  data::PreprocessConfig preprocess;
  double noise_sigma = 0.005;  // relative to the masked mean signal
  model::ModelConfig model;    // height/width follow the crop size
  model::TrainConfig train;    // seed follows the top-level seed
  model::LossConfig loss;
  fit::FitOptions fit;
  int threads = 1;
  EvalSettings eval;
  std::string work_dir = "qmri_work";

  void validate() const;
  /// Dataset specification for `count` records from `seed`.
  data::DatasetSpec dataset_spec(std::size_t count, std::uint64_t seed) const;
};

/// Throws ConfigError naming the offending line, section or key.
PipelineConfig parse_config(const std::string& text);
PipelineConfig load_config(const std::filesystem::path& path);
/// Every key with its value, in the fixed order of the layout above.
std::string canonical(const PipelineConfig& cfg);

}  // namespace qmri::config
