#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <random>
#include <string>

#include "qmri/image.hpp"

namespace qmri {

/// Deterministic generator used everywhere a seed is recorded.
using Rng = std::mt19937_64;

/// Derives an independent stream seed from a base seed and a stream index
/// (splitmix64 finalizer over both words).
std::uint64_t stream_seed(std::uint64_t base, std::uint64_t stream);

enum class Sequence { T1w = 0, T2w = 1, Flair = 2 };

inline constexpr std::array<Sequence, 3> kSequences{Sequence::T1w, Sequence::T2w, Sequence::Flair};

std::string to_string(Sequence s);
Sequence sequence_from_string(const std::string& name);

struct ScanParams {
  Sequence sequence = Sequence::T1w;
  double tr_ms = 0.0;
  double te_ms = 0.0;
  std::optional<double> ti_ms;

  /// Throws InvalidArgument when te >= tr, values are non-positive, or TI
  /// presence does not match the sequence.
  void validate() const;
  bool operator==(const ScanParams&) const = default;
};

struct ParametricMaps {
  Image t1;  // ms
  Image t2;  // ms
  Image pd;  // arbitrary units
  Mask mask;

  std::size_t height() const { return mask.height; }
  std::size_t width() const { return mask.width; }
  void validate_shapes() const;
};

struct WeightedImage {
  Sequence contrast = Sequence::T1w;
  Image data;
  ScanParams params;
  double noise_sigma = 0.0;
};

// ---------------------------------------------------------------------------
// Signal equations

/// PD (1 - exp(-TR/T1)) exp(-TE/T2)
double signal_tse(double pd, double t1_ms, double t2_ms, double tr_ms, double te_ms);

/// Signed inversion-recovery signal PD (1 - 2 exp(-TI/T1) + exp(-TR/T1)) exp(-TE/T2).
double signal_flair_signed(double pd, double t1_ms, double t2_ms, double tr_ms, double te_ms, double ti_ms);

/// Magnitude of signal_flair_signed.
double signal_flair(double pd, double t1_ms, double t2_ms, double tr_ms, double te_ms, double ti_ms);

/// Magnitude signal for any protocol.
double signal(double pd, double t1_ms, double t2_ms, const ScanParams& p);

/// Signal and partial derivatives with respect to (PD, T1, T2). For FLAIR
/// the derivatives follow the magnitude, i.e. are multiplied by the sign of
/// the pre-magnitude signal; `signed_value` keeps that signal.
struct SignalJacobian {
  double value = 0.0;
  double signed_value = 0.0;
  double d_pd = 0.0;
  double d_t1 = 0.0;
  double d_t2 = 0.0;
};
SignalJacobian signal_with_jacobian(double pd, double t1_ms, double t2_ms, const ScanParams& p);

// ---------------------------------------------------------------------------
// Protocol randomization

struct Range {
  double min = 0.0;
  double max = 0.0;
};

struct SequenceRanges {
  Range tr;
  Range te;
  std::optional<Range> ti;
};

struct ProtocolRanges {
  SequenceRanges t1w{{300, 900}, {5, 25}, std::nullopt};
  SequenceRanges t2w{{2000, 6000}, {70, 130}, std::nullopt};
  SequenceRanges flair{{6000, 10000}, {80, 140}, Range{1800, 2800}};

  const SequenceRanges& for_sequence(Sequence s) const;
  SequenceRanges& for_sequence(Sequence s);
  void validate() const;
};

/// Independent uniform draws for TR, TE (and TI), resampled when the draw
/// violates ScanParams invariants. Gives up after 100 attempts.
ScanParams sample_protocol(Sequence contrast, const ProtocolRanges& ranges, Rng& rng);

/// Applies the signal equation voxel by voxel; zero outside the mask.
WeightedImage synthesize_weighted(const ParametricMaps& maps, const ScanParams& params);

/// Magnitude of complex Gaussian noise: sqrt((v + n1)^2 + n2^2).
WeightedImage add_rician_noise(const WeightedImage& img, double sigma, Rng& rng);

}  // namespace qmri
