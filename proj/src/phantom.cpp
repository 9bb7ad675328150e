#include "qmri/phantom.hpp"

#include <algorithm>
#include <cmath>

namespace qmri {

std::string to_string(Tissue t) {
  switch (t) {
    case Tissue::Background:
      return "background";
    case Tissue::Csf:
      return "CSF";
    case Tissue::Gm:
      return "GM";
    case Tissue::Wm:
      return "WM";
    case Tissue::Lesion:
      return "lesion";
  }
  return "?";
}

Tissue tissue_from_string(const std::string& name) {
  for (auto t : {Tissue::Background, Tissue::Csf, Tissue::Gm, Tissue::Wm, Tissue::Lesion}) {
    if (to_string(t) == name) return t;
  }
  throw InvalidArgument("unknown tissue label '" + name + "'");
}

const TissueProperties& TissueTable::at(Tissue t) const {
  switch (t) {
    case Tissue::Csf:
      return csf;
    case Tissue::Gm:
      return gm;
    case Tissue::Wm:
      return wm;
    case Tissue::Lesion:
      return lesion;
    case Tissue::Background:
      break;
  }
  throw InvalidArgument("background has no tissue properties");
}

void TissueTable::validate() const {
  for (auto t : {Tissue::Csf, Tissue::Gm, Tissue::Wm, Tissue::Lesion}) {
    const auto& p = at(t);
    for (const auto* s : {&p.t1, &p.t2, &p.pd}) {
      if (!(s->mean > 0.0) || !(s->std >= 0.0)) {
        throw InvalidArgument("tissue table: " + to_string(t) + " needs positive means and non-negative stds");
      }
    }
  }
}

std::vector<std::pair<int, int>> disc_offsets(double diameter) {
  const double r = diameter / 2.0;
  const int reach = static_cast<int>(std::floor(r));
  std::vector<std::pair<int, int>> out;
  for (int dy = -reach; dy <= reach; ++dy) {
    for (int dx = -reach; dx <= reach; ++dx) {
      if (dx * dx + dy * dy <= r * r) out.emplace_back(dy, dx);
    }
  }
  return out;
}

void PhantomConfig::validate() const {
  if (height < 32 || width < 32) {
    throw InvalidArgument("phantom: H and W must be at least 32 (got " + std::to_string(height) + "x" +
                          std::to_string(width) + ")");
  }
  if (!(lesion_probability >= 0.0 && lesion_probability <= 1.0)) {
    throw InvalidArgument("phantom: lesion probability must lie in [0, 1]");
  }
  if (max_lesions < 0) throw InvalidArgument("phantom: max_lesions must be >= 0");
  tissues.validate();
}

namespace {

struct Ellipse {
  double cx, cy, ax, ay;
  bool contains(double x, double y) const {
    const double u = (x - cx) / ax, v = (y - cy) / ay;
    return u * u + v * v <= 1.0;
  }
};

// Largest disc (integer radius, capped) of a single label centred at (r, c).
int label_depth(const Grid<std::uint8_t>& labels, int r, int c, std::uint8_t label, int cap) {
  const int h = static_cast<int>(labels.height), w = static_cast<int>(labels.width);
  int depth = -1;
  for (int rad = 0; rad <= cap; ++rad) {
    for (int dy = -rad; dy <= rad; ++dy) {
      for (int dx = -rad; dx <= rad; ++dx) {
        const int d2 = dx * dx + dy * dy;
        if (d2 > rad * rad || d2 <= (rad - 1) * (rad - 1)) continue;
        const int y = r + dy, x = c + dx;
        if (y < 0 || y >= h || x < 0 || x >= w) return depth;
        if (labels(static_cast<std::size_t>(y), static_cast<std::size_t>(x)) != label) return depth;
      }
    }
    depth = rad;
  }
  return depth;
}

RoiDisc place_roi(const Grid<std::uint8_t>& labels, Tissue tissue) {
  const auto label = static_cast<std::uint8_t>(tissue);
  const int h = static_cast<int>(labels.height), w = static_cast<int>(labels.width);
  int best = -1;
  RoiDisc roi;
  roi.label = tissue;
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      if (labels(static_cast<std::size_t>(r), static_cast<std::size_t>(c)) != label) continue;
      const int d = label_depth(labels, r, c, label, 8);
      if (d > best) {
        best = d;
        roi.row = r;
        roi.col = c;
      }
    }
  }
  if (best < 4) {
    throw InvalidArgument("phantom: image too small to place an 8 px ROI inside " + to_string(tissue));
  }
  return roi;
}

double draw_value(const TissueStats& s, bool jitter, Rng& rng) {
  if (!jitter || s.std == 0.0) return s.mean;
  std::normal_distribution<double> dist(s.mean, s.std);
  return dist(rng);
}

}  // namespace

Phantom generate_phantom(const PhantomConfig& cfg, Rng& rng) {
  cfg.validate();
  const std::size_t h = cfg.height, w = cfg.width;
  const double hd = static_cast<double>(h), wd = static_cast<double>(w);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };

  // Geometry, in a frame rotated by theta about the head centre.
  const double cx = wd / 2.0 - 0.5 + uniform(-1.0, 1.0);
  const double cy = hd / 2.0 - 0.5 + uniform(-1.0, 1.0);
  const double ax = 0.45 * wd * uniform(0.95, 1.0);
  const double ay = 0.40 * hd * uniform(0.95, 1.0);
  const double theta = uniform(-0.08, 0.08);
  const double ribbon = std::max(2.0, 0.05 * std::min(hd, wd));

  const Ellipse brain{0.0, 0.0, ax, ay};
  const Ellipse inner{0.0, 0.0, ax - ribbon, ay - ribbon};
  const Ellipse ventricle{uniform(-0.03, 0.03) * ax, (-0.3 + uniform(-0.03, 0.03)) * ay, std::max(4.6, 0.28 * ax),
                          std::max(4.6, 0.22 * ay)};
  const double nucleus_r = std::max(4.6, 0.3 * ay);
  const Ellipse nucleus{uniform(-0.03, 0.03) * ax, (0.5 + uniform(-0.03, 0.03)) * ay, nucleus_r, nucleus_r};

  Phantom ph;
  ph.labels = Grid<std::uint8_t>(h, w, 0);
  const double ct = std::cos(theta), st = std::sin(theta);
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      const double dx = static_cast<double>(c) - cx, dy = static_cast<double>(r) - cy;
      const double u = ct * dx + st * dy, v = -st * dx + ct * dy;
      if (!brain.contains(u, v)) continue;
      Tissue t = inner.contains(u, v) ? Tissue::Wm : Tissue::Gm;
      if (nucleus.contains(u, v)) t = Tissue::Gm;
      if (ventricle.contains(u, v)) t = Tissue::Csf;
      ph.labels(r, c) = static_cast<std::uint8_t>(t);
    }
  }

  for (auto t : {Tissue::Wm, Tissue::Gm, Tissue::Csf}) ph.rois.push_back(place_roi(ph.labels, t));

  // Per-phantom tissue values.
  struct Values {
    double t1, t2, pd;
  };
  std::array<Values, 5> values{};
  for (auto t : {Tissue::Csf, Tissue::Gm, Tissue::Wm, Tissue::Lesion}) {
    const auto& p = cfg.tissues.at(t);
    Values v{};
    v.t1 = std::clamp(draw_value(p.t1, cfg.jitter_tissues, rng), kT1Min, kT1Max);
    v.t2 = std::clamp(draw_value(p.t2, cfg.jitter_tissues, rng), kT2Min, kT2Max);
    v.t2 = std::min(v.t2, v.t1);
    v.pd = std::max(0.0, draw_value(p.pd, cfg.jitter_tissues, rng));
    values[static_cast<std::size_t>(t)] = v;
  }

  // Lesions sit in WM and keep clear of the ROI discs.
  if (cfg.max_lesions > 0 && unit(rng) < cfg.lesion_probability) {
    std::vector<std::size_t> wm_voxels;
    for (std::size_t i = 0; i < ph.labels.size(); ++i) {
      if (ph.labels.data[i] == static_cast<std::uint8_t>(Tissue::Wm)) wm_voxels.push_back(i);
    }
    const int count = 1 + static_cast<int>(unit(rng) * cfg.max_lesions) % cfg.max_lesions;
    for (int placed = 0, attempt = 0; placed < count && attempt < 20 && !wm_voxels.empty(); ++attempt) {
      const std::size_t idx = wm_voxels[static_cast<std::size_t>(unit(rng) * static_cast<double>(wm_voxels.size())) %
                                        wm_voxels.size()];
      const double lr = static_cast<double>(idx / w), lc = static_cast<double>(idx % w);
      const double radius = uniform(1.5, 3.0);
      bool clear = true;
      for (const auto& roi : ph.rois) {
        if (std::hypot(lr - roi.row, lc - roi.col) < radius + roi.diameter / 2.0 + 1.5) clear = false;
      }
      if (!clear) continue;
      for (std::size_t r = 0; r < h; ++r) {
        for (std::size_t c = 0; c < w; ++c) {
          if (ph.labels(r, c) != static_cast<std::uint8_t>(Tissue::Wm)) continue;
          if (std::hypot(static_cast<double>(r) - lr, static_cast<double>(c) - lc) <= radius) {
            ph.labels(r, c) = static_cast<std::uint8_t>(Tissue::Lesion);
          }
        }
      }
      ++placed;
    }
  }

  auto& m = ph.maps;
  m.t1 = Image(h, w, 0.0f);
  m.t2 = Image(h, w, 0.0f);
  m.pd = Image(h, w, 0.0f);
  m.mask = Mask(h, w, 0);
  for (std::size_t i = 0; i < ph.labels.size(); ++i) {
    const auto label = ph.labels.data[i];
    if (label == 0) continue;
    const auto& v = values[label];
    m.t1.data[i] = static_cast<float>(v.t1);
    m.t2.data[i] = static_cast<float>(v.t2);
    m.pd.data[i] = static_cast<float>(v.pd);
    m.mask.data[i] = 1;
  }
  return ph;
}

}  // namespace qmri
