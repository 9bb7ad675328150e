#pragma once

#include <array>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "qmri/dataset.hpp"
#include "qmri/model.hpp"

namespace qmri::model {

struct TrainConfig {
  double lr = 0.001;
  int max_epochs = 300;
  int patience = 150;
  int batch_size = 1;
  double validation_fraction = 0.1;
  std::uint64_t seed = 0;
  bool augment_flip = true;
  bool augment_zoom = true;
  // "constant" or "cosine" (anneals lr to zero at max_epochs)
  std::string lr_schedule = "cosine";

  void validate() const;
  double lr_at(int epoch) const;
  bool operator==(const TrainConfig&) const = default;
};

json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const json& j);

// ---------------------------------------------------------------------------
// Augmentation

struct AugmentToggles {
  bool flip = true;
  bool zoom = true;
};

/// Mirrors columns of every image, target map and the mask.
data::SampleRecord flip_horizontal(const data::SampleRecord& rec);
/// Shared bilinear zoom by `factor` about the image centre, zero padded;
/// the mask uses nearest neighbour. Inputs and targets are re-masked.
data::SampleRecord zoom(const data::SampleRecord& rec, double factor);
/// Flip with probability 0.5, then zoom by U(0.9, 1.1) with probability
/// 0.5. Always draws three numbers from `rng`.
data::SampleRecord augment(const data::SampleRecord& rec, Rng& rng, const AugmentToggles& toggles);

// ---------------------------------------------------------------------------
// Training

/// Network-ready tensors of one record.
struct Example {
  std::array<Tensor<float>, 3> inputs;  // [1,H,W] each
  Tensor<float> target;                 // [3,H,W]
  Tensor<float> mask;                   // [H,W]
  std::array<ScanParams, 3> params;
};
Example make_example(const data::SampleRecord& rec);

struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> validation;
};
/// Seeded shuffle; the validation share is rounded and kept in [1, n-1].
/// A single record serves as both sets.
Split split_dataset(std::size_t n, double validation_fraction, std::uint64_t seed);

struct ValidationScore {
  double psnr_t1 = 0.0;
  double psnr_t2 = 0.0;
  double psnr_pd = 0.0;
  double sum() const { return psnr_t1 + psnr_t2 + psnr_pd; }
};
/// Mean masked PSNR per map over `records`, on the unit target scale, with
/// predictions clamped at zero.
ValidationScore score(const ModelWeights<float>& w, std::span<const data::SampleRecord> records);
ValidationScore score(const ModelWeights<float>& w, std::span<const data::SampleRecord* const> records);

struct TrainOptions {
  std::optional<std::filesystem::path> out_dir;      // checkpoint + train_log.jsonl, rewritten every epoch
  std::optional<std::filesystem::path> resume_from;  // checkpoint directory to continue
  std::function<void(const json&)> on_epoch;         // receives each log line
};

struct TrainResult {
  ModelWeights<float> best;
  ModelWeights<float> last;
  ValidationScore best_score;
  TrainState state;
  std::vector<json> log;  // header followed by one line per epoch
  bool stopped_early = false;
};

TrainResult train(const std::vector<data::SampleRecord>& records, const data::PreprocessConfig& pre,
                  const ModelConfig& model, const TrainConfig& cfg, const LossConfig& loss,
                  const TrainOptions& opts = {});

// ---------------------------------------------------------------------------
// Inference

/// Raw [3,H,W] network output for a record.
Tensor<float> predict_record(const ModelWeights<float>& w, const data::SampleRecord& rec);

/// T1 x t1_ref, T2 x t2_ref, PD left on its unit scale; negative values
/// clamp to zero and everything outside the mask is zero.
ParametricMaps to_maps(const Tensor<float>& raw, const Mask& mask, const data::NormConstants& norm);

/// Refuses records whose preprocessing hash differs from the checkpoint's.
ParametricMaps infer(const Checkpoint& ckpt, const data::SampleRecord& rec);

}  // namespace qmri::model
