#include "qmri/physics.hpp"

#include <cmath>

namespace qmri {

std::uint64_t stream_seed(std::uint64_t base, std::uint64_t stream) {
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  return mix(mix(base) ^ (stream * 0xd1b54a32d192ed03ULL + 0x8cb92ba72f3d8dd7ULL));
}

std::string to_string(Sequence s) {
  switch (s) {
    case Sequence::T1w:
      return "t1w";
    case Sequence::T2w:
      return "t2w";
    case Sequence::Flair:
      return "flair";
  }
  return "?";
}

Sequence sequence_from_string(const std::string& name) {
  if (name == "t1w") return Sequence::T1w;
  if (name == "t2w") return Sequence::T2w;
  if (name == "flair") return Sequence::Flair;
  throw InvalidArgument("unknown sequence '" + name + "'");
}

void ScanParams::validate() const {
  const std::string tag = to_string(sequence);
  if (!(tr_ms > 0.0) || !(te_ms > 0.0) || !std::isfinite(tr_ms) || !std::isfinite(te_ms)) {
    throw InvalidArgument(tag + ": TR and TE must be positive and finite");
  }
  if (!(te_ms < tr_ms)) throw InvalidArgument(tag + ": TE must be shorter than TR");
  if (sequence == Sequence::Flair) {
    if (!ti_ms) throw InvalidArgument("flair: TI is required");
    if (!(*ti_ms > 0.0) || !std::isfinite(*ti_ms)) throw InvalidArgument("flair: TI must be positive");
    if (!(*ti_ms < tr_ms)) throw InvalidArgument("flair: TI must be shorter than TR");
  } else if (ti_ms) {
    throw InvalidArgument(tag + ": TI is only defined for FLAIR");
  }
}

void ParametricMaps::validate_shapes() const {
  require_same_shape(t1, mask, "parametric maps (t1)");
  require_same_shape(t2, mask, "parametric maps (t2)");
  require_same_shape(pd, mask, "parametric maps (pd)");
}

// ---------------------------------------------------------------------------

namespace {

void require_relaxation(double t1_ms, double t2_ms) {
  if (!(t1_ms > 0.0) || !(t2_ms > 0.0)) {
    throw InvalidArgument("signal: T1 and T2 must be positive (got T1=" + std::to_string(t1_ms) +
                          ", T2=" + std::to_string(t2_ms) + ")");
  }
}

void require_timing(double tr_ms, double te_ms) {
  if (!(tr_ms > 0.0) || !(te_ms > 0.0)) throw InvalidArgument("signal: TR and TE must be positive");
}

}  // namespace

double signal_tse(double pd, double t1_ms, double t2_ms, double tr_ms, double te_ms) {
  require_relaxation(t1_ms, t2_ms);
  require_timing(tr_ms, te_ms);
  if (pd == 0.0) return 0.0;
  return pd * (1.0 - std::exp(-tr_ms / t1_ms)) * std::exp(-te_ms / t2_ms);
}

double signal_flair_signed(double pd, double t1_ms, double t2_ms, double tr_ms, double te_ms, double ti_ms) {
  require_relaxation(t1_ms, t2_ms);
  require_timing(tr_ms, te_ms);
  if (!(ti_ms > 0.0) || !(ti_ms < tr_ms)) throw InvalidArgument("signal_flair: TI must lie in (0, TR)");
  if (pd == 0.0) return 0.0;
  const double recovery = 1.0 - 2.0 * std::exp(-ti_ms / t1_ms) + std::exp(-tr_ms / t1_ms);
  return pd * recovery * std::exp(-te_ms / t2_ms);
}

double signal_flair(double pd, double t1_ms, double t2_ms, double tr_ms, double te_ms, double ti_ms) {
  return std::abs(signal_flair_signed(pd, t1_ms, t2_ms, tr_ms, te_ms, ti_ms));
}

double signal(double pd, double t1_ms, double t2_ms, const ScanParams& p) {
  if (p.sequence == Sequence::Flair) {
    if (!p.ti_ms) throw InvalidArgument("flair: TI is required");
    return signal_flair(pd, t1_ms, t2_ms, p.tr_ms, p.te_ms, *p.ti_ms);
  }
  return signal_tse(pd, t1_ms, t2_ms, p.tr_ms, p.te_ms);
}

SignalJacobian signal_with_jacobian(double pd, double t1_ms, double t2_ms, const ScanParams& p) {
  require_relaxation(t1_ms, t2_ms);
  require_timing(p.tr_ms, p.te_ms);
  const double e_tr = std::exp(-p.tr_ms / t1_ms);
  const double decay = std::exp(-p.te_ms / t2_ms);
  const double inv_t1_sq = 1.0 / (t1_ms * t1_ms);

  double recovery = 1.0 - e_tr;
  double d_recovery = -e_tr * p.tr_ms * inv_t1_sq;
  if (p.sequence == Sequence::Flair) {
    if (!p.ti_ms) throw InvalidArgument("flair: TI is required");
    const double e_ti = std::exp(-*p.ti_ms / t1_ms);
    recovery = 1.0 - 2.0 * e_ti + e_tr;
    d_recovery = -2.0 * e_ti * *p.ti_ms * inv_t1_sq + e_tr * p.tr_ms * inv_t1_sq;
  }

  SignalJacobian j;
  j.signed_value = pd * recovery * decay;
  const double sign = (p.sequence == Sequence::Flair && j.signed_value < 0.0) ? -1.0 : 1.0;
  j.value = sign * j.signed_value;
  j.d_pd = sign * recovery * decay;
  j.d_t1 = sign * pd * d_recovery * decay;
  j.d_t2 = sign * pd * recovery * decay * p.te_ms / (t2_ms * t2_ms);
  return j;
}

// ---------------------------------------------------------------------------

const SequenceRanges& ProtocolRanges::for_sequence(Sequence s) const {
  switch (s) {
    case Sequence::T1w:
      return t1w;
    case Sequence::T2w:
      return t2w;
    case Sequence::Flair:
      return flair;
  }
  return t1w;
}

SequenceRanges& ProtocolRanges::for_sequence(Sequence s) {
  return const_cast<SequenceRanges&>(static_cast<const ProtocolRanges&>(*this).for_sequence(s));
}

void ProtocolRanges::validate() const {
  auto check = [](const Range& r, const std::string& what) {
    if (!(r.min > 0.0) || !(r.min < r.max) || !std::isfinite(r.max)) {
      throw InvalidArgument(what + " range must satisfy 0 < min < max");
    }
  };
  for (auto s : kSequences) {
    const auto& r = for_sequence(s);
    check(r.tr, to_string(s) + " TR");
    check(r.te, to_string(s) + " TE");
    if (s == Sequence::Flair) {
      if (!r.ti) throw InvalidArgument("flair TI range is required");
      check(*r.ti, "flair TI");
    } else if (r.ti) {
      throw InvalidArgument(to_string(s) + " has a TI range but is not an inversion sequence");
    }
  }
}

ScanParams sample_protocol(Sequence contrast, const ProtocolRanges& ranges, Rng& rng) {
  const auto& r = ranges.for_sequence(contrast);
  auto draw = [&rng](const Range& range) {
    if (!(range.min <= range.max)) throw InvalidArgument("sample_protocol: range min exceeds max");
    std::uniform_real_distribution<double> dist(range.min, range.max);
    return dist(rng);
  };
  for (int attempt = 0; attempt < 100; ++attempt) {
    ScanParams p;
    p.sequence = contrast;
    p.tr_ms = draw(r.tr);
    p.te_ms = draw(r.te);
    if (contrast == Sequence::Flair) {
      if (!r.ti) throw InvalidArgument("sample_protocol: flair TI range is required");
      p.ti_ms = draw(*r.ti);
    }
    try {
      p.validate();
      return p;
    } catch (const InvalidArgument&) {
    }
  }
  throw InvalidArgument("sample_protocol: " + to_string(contrast) +
                        " ranges produced no valid protocol after 100 draws");
}

WeightedImage synthesize_weighted(const ParametricMaps& maps, const ScanParams& params) {
  maps.validate_shapes();
  params.validate();
  WeightedImage out;
  out.contrast = params.sequence;
  out.params = params;
  out.data = Image(maps.height(), maps.width(), 0.0f);
  for (std::size_t r = 0; r < maps.height(); ++r) {
    for (std::size_t c = 0; c < maps.width(); ++c) {
      if (!maps.mask(r, c)) continue;
      try {
        out.data(r, c) = static_cast<float>(signal(maps.pd(r, c), maps.t1(r, c), maps.t2(r, c), params));
      } catch (const InvalidArgument& e) {
        throw InvalidArgument("voxel (" + std::to_string(r) + "," + std::to_string(c) + "): " + e.what());
      }
    }
  }
  return out;
}

WeightedImage add_rician_noise(const WeightedImage& img, double sigma, Rng& rng) {
  if (!(sigma >= 0.0)) throw InvalidArgument("add_rician_noise: sigma must be >= 0");
  WeightedImage out = img;
  out.noise_sigma = sigma;
  if (sigma == 0.0) return out;
  std::normal_distribution<double> noise(0.0, sigma);
  for (auto& v : out.data.data) {
    const double re = static_cast<double>(v) + noise(rng);
    const double im = noise(rng);
    v = static_cast<float>(std::sqrt(re * re + im * im));
  }
  return out;
}

}  // namespace qmri
