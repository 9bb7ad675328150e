#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "qmri/autodiff.hpp"
#include "qmri/physics.hpp"

namespace qmri::model {

using json = nlohmann::json;
using ad::Graph;
using ad::Tensor;
using ad::TensorPtr;
using ad::Var;

struct ModelConfig {
  int levels = 3;
  int base_channels = 16;  // level l has base_channels * 2^l channels
  int embed_dim = 8;
  std::size_t height = 64;
  std::size_t width = 64;
  double tr_ref = 10000.0;
  double te_ref = 200.0;
  double ti_ref = 5000.0;
  bool param_embedding = true;  // false: embedding planes are forced to zero

  void validate() const;
  int channels(int level) const { return base_channels << level; }
  std::string hash() const;
  bool operator==(const ModelConfig&) const = default;
};

struct LossConfig {
  double lambda_t1 = 0.1;
  double lambda_t2 = 0.5;
  double lambda_pd = 0.15;

  void validate() const;
  bool operator==(const LossConfig&) const = default;
};

json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const json& j);
json to_json(const LossConfig& c);
LossConfig loss_config_from_json(const json& j);

/// Name and shape of every trainable array, in storage order.
struct ParamSpec {
  std::string name;
  ad::Shape shape;
};
std::vector<ParamSpec> layout(const ModelConfig& cfg);

/// Number of scan parameters seen by a branch: (TR, TE) or (TR, TE, TI).
std::size_t branch_param_count(Sequence branch);

template <typename T>
struct ModelWeights {
  ModelConfig config;
  std::vector<std::string> names;
  std::vector<TensorPtr<T>> tensors;
  std::map<std::string, std::size_t> index;

  const TensorPtr<T>& at(const std::string& name) const;
  std::size_t parameter_count() const;
  /// All values concatenated in storage order.
  std::vector<T> flatten() const;
  void assign(std::span<const T> flat);
  ModelWeights clone() const;
};

/// Kaiming fan-in normal weights and zero biases from `seed`.
template <typename T>
ModelWeights<T> init_weights(const ModelConfig& cfg, std::uint64_t seed);

/// Zero-filled weights with the layout of `cfg`.
template <typename T>
ModelWeights<T> empty_weights(const ModelConfig& cfg);

template <typename To, typename From>
ModelWeights<To> cast_weights(const ModelWeights<From>& w) {
  ModelWeights<To> out = empty_weights<To>(w.config);
  for (std::size_t i = 0; i < w.tensors.size(); ++i) {
    const auto& src = w.tensors[i]->data;
    auto& dst = out.tensors[i]->data;
    for (std::size_t k = 0; k < src.size(); ++k) dst[k] = static_cast<To>(src[k]);
  }
  return out;
}

/// Registers every weight as a graph leaf, same order as `w.tensors`.
template <typename T>
std::vector<Var<T>> bind(Graph<T>& g, const ModelWeights<T>& w);

/// Scan parameters of `branch` divided by their reference constants.
std::vector<double> scaled_params(const ScanParams& p, Sequence branch, const ModelConfig& cfg);

/// Embedding planes [embed_dim, H_l, W_l] of one branch at one level.
template <typename T>
Var<T> embed_params(Graph<T>& g, const ModelWeights<T>& w, std::span<const Var<T>> vars, const ScanParams& p,
                    Sequence branch, int level);

/// Value-only convenience form of embed_params.
template <typename T>
Tensor<T> embed_planes(const ModelWeights<T>& w, const ScanParams& p, Sequence branch, int level);

/// inputs: three [1,H,W] images in T1w, T2w, FLAIR order. Returns [3,H,W].
template <typename T>
Var<T> forward(Graph<T>& g, const ModelWeights<T>& w, std::span<const Var<T>> vars, std::span<const Var<T>, 3> inputs,
               const std::array<ScanParams, 3>& params);

/// Value-only forward pass.
template <typename T>
Tensor<T> predict(const ModelWeights<T>& w, const std::array<Tensor<T>, 3>& inputs,
                  const std::array<ScanParams, 3>& params);

/// lambda-weighted sum of the per-map masked MSEs. mask: [H,W].
template <typename T>
Var<T> loss_total(Var<T> pred, Var<T> target, Var<T> mask, const LossConfig& loss);

/// Value-only loss_total.
double loss_value(const Tensor<float>& pred, const Tensor<float>& target, const Tensor<float>& mask,
                  const LossConfig& loss);

// ---------------------------------------------------------------------------
// Checkpoints
//
// A checkpoint is a directory holding model.json and weights.qmap. The QMAP
// file carries flat 1xP channels: "params" (selected weights), and for
// resuming "last_params", "adam_m", "adam_v". model.json records the
// configuration, its hash and an FNV-1a checksum of weights.qmap.

struct TrainState {
  int epoch = 0;  // completed epochs
  std::int64_t adam_step = 0;
  int best_epoch = 0;
  int epochs_since_best = 0;
  double best_score = 0.0;  // PSNR_T1 + PSNR_T2 + PSNR_PD of the selected weights
  bool has_best = false;
};

struct Checkpoint {
  ModelWeights<float> weights;  // selected (best) weights
  std::string preprocess_hash;
  json preprocess;  // preprocessing config the model was trained for
  json train;       // training config, informational
  LossConfig loss;
  TrainState state;
  std::vector<float> last_params;  // empty when saved for inference only
  std::vector<float> adam_m;
  std::vector<float> adam_v;
};

void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& ckpt);
/// Throws FormatError(Corrupt) on checksum mismatch, FormatError(Truncated)
/// on short files and CompatError when `expected` differs from the stored
/// configuration.
Checkpoint load_checkpoint(const std::filesystem::path& dir, const ModelConfig* expected = nullptr);

}  // namespace qmri::model
