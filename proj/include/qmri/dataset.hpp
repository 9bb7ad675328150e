#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "qmri/phantom.hpp"
#include "qmri/physics.hpp"

namespace qmri::data {

using json = nlohmann::json;

/// Map clipping, target scaling and crop size shared by training and inference.
struct PreprocessConfig {
  std::size_t crop_height = 64;
  std::size_t crop_width = 64;
  double clip_lo = 0.5;
  double clip_hi = 99.5;
  double t1_ref = 6000.0;  // T1 target = T1 / t1_ref
  double t2_ref = 3000.0;  // T2 target = T2 / t2_ref

  void validate() const;
  /// Identifies preprocessing that produced a record; models refuse inputs
  /// with a different hash.
  std::string hash() const;
};

struct NormConstants {
  double t1_ref = 6000.0;
  double t2_ref = 3000.0;
  double pd_max = 1.0;
  std::array<double, 3> contrast_max{1.0, 1.0, 1.0};  // t1w, t2w, flair
};

/// One training/test slice: three max-normalized weighted images with their
/// protocols, unit-scaled target maps and provenance.
struct SampleRecord {
  std::string record_id;
  std::uint64_t seed = 0;
  double noise_sigma = 0.0;  // relative to the masked mean clean signal of each contrast
  std::array<WeightedImage, 3> inputs;
  Image t1;  // T1 / t1_ref
  Image t2;  // T2 / t2_ref
  Image pd;  // PD / pd_max
  Mask mask;
  NormConstants norm;
  std::vector<RoiDisc> rois;
  std::string preprocess_hash;

  std::array<ScanParams, 3> params() const;
  std::size_t height() const { return mask.height; }
  std::size_t width() const { return mask.width; }
};

struct DatasetSpec {
  PhantomConfig phantom;
  ProtocolRanges ranges;
  PreprocessConfig preprocess;
  std::size_t count = 1;
  double noise_sigma = 0.0;
  std::uint64_t seed = 0;
};

/// Clip maps -> simulate -> add noise -> normalize -> crop.
SampleRecord make_record(const Phantom& phantom, const std::array<ScanParams, 3>& params, double noise_sigma,
                         Rng& noise_rng, const PreprocessConfig& pre);

/// Record `index` of the dataset described by `spec`; independent of every
/// other record.
SampleRecord simulate_record(const DatasetSpec& spec, std::size_t index);

/// Re-runs the simulation of a stored record from its seed and protocols.
SampleRecord resimulate(const SampleRecord& stored, const PhantomConfig& phantom, const PreprocessConfig& pre);

/// Writes `spec.count` records plus dataset.json into `dir`.
void build_dataset(const DatasetSpec& spec, const std::filesystem::path& dir, int threads = 1);

std::string record_stem(std::size_t index);
void write_record(const std::filesystem::path& dir, const SampleRecord& rec);
/// `qmap_path` names the record's .qmap; the .json sidecar sits next to it.
SampleRecord read_record(const std::filesystem::path& qmap_path);
/// All record_*.qmap files in `dir`, sorted by name.
std::vector<std::filesystem::path> list_records(const std::filesystem::path& dir);
std::vector<SampleRecord> load_dataset(const std::filesystem::path& dir);
DatasetSpec read_dataset_spec(const std::filesystem::path& dir);

/// Reference maps in physical units (ms) with PD left on its unit scale.
ParametricMaps target_maps(const SampleRecord& rec);
/// Weighted images on their original (pre-normalization) scale.
std::array<WeightedImage, 3> raw_inputs(const SampleRecord& rec);

// JSON encodings
json to_json(const ScanParams& p);
ScanParams scan_params_from_json(Sequence s, const json& j);
json to_json(const ProtocolRanges& r);
ProtocolRanges protocol_ranges_from_json(const json& j);
json to_json(const PhantomConfig& c);
PhantomConfig phantom_config_from_json(const json& j);
json to_json(const PreprocessConfig& c);
PreprocessConfig preprocess_config_from_json(const json& j);
json to_json(const RoiDisc& r);
RoiDisc roi_from_json(const json& j);
json sidecar_json(const SampleRecord& rec);

}  // namespace qmri::data
