#include "qmri/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

namespace qmri::metrics {

namespace {

std::size_t require_inputs(const Image& x, const Image& y, const Mask& mask, const char* what) {
  require_same_shape(x, y, what);
  require_same_shape(x, mask, what);
  const std::size_t n = mask_count(mask);
  if (n == 0) throw InvalidArgument(std::string(what) + ": mask is empty");
  return n;
}

std::pair<double, double> masked_min_max(const Image& y, const Mask& mask) {
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (!mask.data[i]) continue;
    lo = std::min(lo, static_cast<double>(y.data[i]));
    hi = std::max(hi, static_cast<double>(y.data[i]));
  }
  return {lo, hi};
}

}  // namespace

double mae(const Image& x, const Image& y, const Mask& mask) {
  const std::size_t n = require_inputs(x, y, mask, "mae");
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (mask.data[i]) s += std::abs(static_cast<double>(x.data[i]) - static_cast<double>(y.data[i]));
  }
  return s / static_cast<double>(n);
}

double mpe(const Image& x, const Image& y, const Mask& mask, double eps) {
  require_inputs(x, y, mask, "mpe");
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double yi = y.data[i];
    if (!mask.data[i] || !(std::abs(yi) > eps)) continue;
    s += std::abs((static_cast<double>(x.data[i]) - yi) / yi);
    ++n;
  }
  if (n == 0) throw InvalidArgument("mpe: every masked reference voxel is within eps of zero");
  return s / static_cast<double>(n);
}

double mpe(const Image& x, const Image& y, const Mask& mask) {
  require_inputs(x, y, mask, "mpe");
  const auto [lo, hi] = masked_min_max(y, mask);
  return mpe(x, y, mask, 1e-6 * (hi - lo));
}

double psnr(const Image& x, const Image& y, const Mask& mask) {
  const std::size_t n = require_inputs(x, y, mask, "psnr");
  double se = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!mask.data[i]) continue;
    const double d = static_cast<double>(x.data[i]) - static_cast<double>(y.data[i]);
    se += d * d;
  }
  const double mse = se / static_cast<double>(n);
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  const double peak = masked_min_max(y, mask).second;
  return 10.0 * std::log10(peak * peak / mse);
}

double ssim(const Image& x, const Image& y, const Mask& mask, const SsimOptions& opts) {
  require_same_shape(x, y, "ssim");
  require_same_shape(x, mask, "ssim");
  if (opts.window < 1 || opts.window % 2 == 0) throw InvalidArgument("ssim: window must be odd and positive");
  const auto win = static_cast<std::size_t>(opts.window);
  if (x.height < win || x.width < win) {
    throw ShapeError("ssim: image " + std::to_string(x.height) + "x" + std::to_string(x.width) +
                     " is smaller than the " + std::to_string(win) + "x" + std::to_string(win) + " window");
  }
  double range = 0.0;
  if (opts.data_range) {
    range = *opts.data_range;
  } else {
    if (mask_count(mask) == 0) throw InvalidArgument("ssim: mask is empty");
    const auto [lo, hi] = masked_min_max(y, mask);
    range = hi - lo;
  }
  const double c1 = (opts.k1 * range) * (opts.k1 * range);
  const double c2 = (opts.k2 * range) * (opts.k2 * range);
  const std::size_t r = win / 2;
  const double count = static_cast<double>(win * win);

  double total = 0.0;
  std::size_t centres = 0;
  for (std::size_t i = r; i + r < x.height; ++i) {
    for (std::size_t j = r; j + r < x.width; ++j) {
      bool inside = true;
      double sx = 0.0, sy = 0.0;
      for (std::size_t a = i - r; a <= i + r && inside; ++a) {
        for (std::size_t b = j - r; b <= j + r; ++b) {
          if (!mask(a, b)) {
            inside = false;
            break;
          }
          sx += x(a, b);
          sy += y(a, b);
        }
      }
      if (!inside) continue;
      const double mx = sx / count, my = sy / count;
      double vx = 0.0, vy = 0.0, cxy = 0.0;
      for (std::size_t a = i - r; a <= i + r; ++a) {
        for (std::size_t b = j - r; b <= j + r; ++b) {
          const double dx = x(a, b) - mx, dy = y(a, b) - my;
          vx += dx * dx;
          vy += dy * dy;
          cxy += dx * dy;
        }
      }
      vx /= count;
      vy /= count;
      cxy /= count;
      const double num = (2.0 * mx * my + c1) * (2.0 * cxy + c2);
      const double den = (mx * mx + my * my + c1) * (vx + vy + c2);
      total += den == 0.0 ? 1.0 : num / den;
      ++centres;
    }
  }
  if (centres == 0) throw InvalidArgument("ssim: no window fits entirely inside the mask");
  return total / static_cast<double>(centres);
}

Image nse_map(const Image& pred, const Image& ref, const Mask& mask, double eps) {
  require_same_shape(pred, ref, "nse_map");
  require_same_shape(pred, mask, "nse_map");
  Image out(pred.height, pred.width, 0.0f);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double r = ref.data[i];
    if (!mask.data[i] || !(std::abs(r) > eps)) continue;
    const double d = static_cast<double>(pred.data[i]) - r;
    out.data[i] = static_cast<float>(d * d / std::abs(r) * 100.0);
  }
  return out;
}

double roi_mean(const Image& map, const RoiDisc& roi) {
  const auto offsets = disc_offsets(roi.diameter);
  double s = 0.0;
  for (const auto& [dy, dx] : offsets) {
    const long row = roi.row + dy, col = roi.col + dx;
    if (row < 0 || col < 0 || row >= static_cast<long>(map.height) || col >= static_cast<long>(map.width)) {
      throw InvalidArgument("roi_mean: disc at (" + std::to_string(roi.row) + "," + std::to_string(roi.col) +
                            ") leaves the " + std::to_string(map.height) + "x" + std::to_string(map.width) + " image");
    }
    s += map(static_cast<std::size_t>(row), static_cast<std::size_t>(col));
  }
  return s / static_cast<double>(offsets.size());
}

Image rescale_unit(const Image& img, const Mask& mask) {
  require_same_shape(img, mask, "rescale_unit");
  double peak = 0.0;
  for (std::size_t i = 0; i < img.size(); ++i) {
    if (mask.data[i]) peak = std::max(peak, static_cast<double>(img.data[i]));
  }
  Image out(img.height, img.width, 0.0f);
  for (std::size_t i = 0; i < img.size(); ++i) {
    if (!mask.data[i]) continue;
    out.data[i] = peak > 0.0 ? static_cast<float>(img.data[i] / peak) : img.data[i];
  }
  return out;
}

SliceMetrics evaluate(const ParametricMaps& pred, const ParametricMaps& ref, std::span<const RoiDisc> rois,
                      const std::string& id, const EvalOptions& opts) {
  pred.validate_shapes();
  ref.validate_shapes();
  require_same_shape(pred.mask, ref.mask, "evaluate");
  const Mask& mask = ref.mask;
  const Image pd_pred = rescale_unit(pred.pd, mask);
  const Image pd_ref = rescale_unit(ref.pd, mask);
  const std::array<const Image*, 3> p{&pred.t1, &pred.t2, &pd_pred};
  const std::array<const Image*, 3> r{&ref.t1, &ref.t2, &pd_ref};
  const std::array<double, 3> unit{opts.t1_ref, opts.t2_ref, 1.0};

  SliceMetrics out;
  out.id = id;
  for (std::size_t c = 0; c < 3; ++c) {
    auto& m = out.maps[c];
    m.mae = mae(*p[c], *r[c], mask);
    m.mae_unit = m.mae / unit[c];
    m.mpe = mpe(*p[c], *r[c], mask);
    m.psnr_db = psnr(*p[c], *r[c], mask);
    m.ssim = ssim(*p[c], *r[c], mask, opts.ssim);
  }
  for (const auto& roi : rois) {
    RoiComparison cmp;
    cmp.roi = roi;
    for (std::size_t c = 0; c < 3; ++c) {
      cmp.pred[c] = roi_mean(*p[c], roi);
      cmp.ref[c] = roi_mean(*r[c], roi);
    }
    out.rois.push_back(cmp);
  }
  return out;
}

Summary summarize(std::span<const double> values) {
  Summary s;
  s.count = values.size();
  std::vector<double> finite;
  for (double v : values) {
    if (std::isinf(v) && v > 0) {
      ++s.infinite;
    } else {
      finite.push_back(v);
    }
  }
  if (finite.empty()) {
    s.mean = s.infinite > 0 ? std::numeric_limits<double>::infinity() : 0.0;
    return s;
  }
  double sum = 0.0;
  for (double v : finite) sum += v;
  s.mean = sum / static_cast<double>(finite.size());
  double ss = 0.0;
  for (double v : finite) ss += (v - s.mean) * (v - s.mean);
  s.std = std::sqrt(ss / static_cast<double>(finite.size()));
  return s;
}

MetricsReport build_report(std::vector<SliceMetrics> slices) {
  MetricsReport rep;
  rep.slices = std::move(slices);
  for (std::size_t c = 0; c < 3; ++c) {
    std::vector<double> a, b, d, e, f;
    for (const auto& s : rep.slices) {
      a.push_back(s.maps[c].mae);
      b.push_back(s.maps[c].mae_unit);
      d.push_back(s.maps[c].mpe);
      e.push_back(s.maps[c].psnr_db);
      f.push_back(s.maps[c].ssim);
    }
    rep.maps[c] = {summarize(a), summarize(b), summarize(d), summarize(e), summarize(f)};
  }
  for (Tissue t : {Tissue::Csf, Tissue::Gm, Tissue::Wm, Tissue::Lesion}) {
    std::array<std::vector<double>, 3> pv, rv;
    for (const auto& s : rep.slices) {
      for (const auto& cmp : s.rois) {
        if (cmp.roi.label != t) continue;
        for (std::size_t c = 0; c < 3; ++c) {
          pv[c].push_back(cmp.pred[c]);
          rv[c].push_back(cmp.ref[c]);
        }
      }
    }
    if (pv[0].empty()) continue;
    TissueSummary ts;
    ts.label = t;
    for (std::size_t c = 0; c < 3; ++c) {
      ts.pred[c] = summarize(pv[c]);
      ts.ref[c] = summarize(rv[c]);
    }
    rep.tissues.push_back(ts);
  }
  return rep;
}

// ---------------------------------------------------------------------------
// JSON

json number_json(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  return v;
}

double number_from_json(const json& j) {
  if (j.is_number()) return j.get<double>();
  if (j.is_string()) {
    const auto s = j.get<std::string>();
    if (s == "inf") return std::numeric_limits<double>::infinity();
    if (s == "-inf") return -std::numeric_limits<double>::infinity();
    if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  }
  throw InvalidArgument("expected a number or one of \"inf\", \"-inf\", \"nan\", got " + j.dump());
}

namespace {

json summary_json(const Summary& s) {
  return {{"mean", number_json(s.mean)}, {"std", number_json(s.std)}, {"count", s.count}, {"infinite", s.infinite}};
}

Summary summary_from(const json& j) {
  Summary s;
  s.mean = number_from_json(j.at("mean"));
  s.std = number_from_json(j.at("std"));
  s.count = j.at("count").get<std::size_t>();
  s.infinite = j.at("infinite").get<std::size_t>();
  return s;
}

json roi_json(const RoiDisc& r) {
  return {{"row", r.row}, {"col", r.col}, {"diameter", r.diameter}, {"label", to_string(r.label)}};
}

RoiDisc roi_from(const json& j) {
  RoiDisc r;
  r.row = j.at("row").get<int>();
  r.col = j.at("col").get<int>();
  r.diameter = j.at("diameter").get<double>();
  r.label = tissue_from_string(j.at("label").get<std::string>());
  return r;
}

json triple_json(const std::array<double, 3>& v) {
  json j;
  for (std::size_t c = 0; c < 3; ++c) j[kMapNames[c]] = number_json(v[c]);
  return j;
}

std::array<double, 3> triple_from(const json& j) {
  std::array<double, 3> v{};
  for (std::size_t c = 0; c < 3; ++c) v[c] = number_from_json(j.at(kMapNames[c]));
  return v;
}

}  // namespace

json to_json(const MetricsReport& report) {
  json j;
  json maps;
  for (std::size_t c = 0; c < 3; ++c) {
    const auto& m = report.maps[c];
    maps[kMapNames[c]] = {{"mae", summary_json(m.mae)},
                          {"mae_unit", summary_json(m.mae_unit)},
                          {"mpe", summary_json(m.mpe)},
                          {"psnr_db", summary_json(m.psnr_db)},
                          {"ssim", summary_json(m.ssim)}};
  }
  j["maps"] = maps;
  json tissues = json::array();
  for (const auto& t : report.tissues) {
    json row{{"label", to_string(t.label)}};
    for (std::size_t c = 0; c < 3; ++c) {
      row["pred"][kMapNames[c]] = summary_json(t.pred[c]);
      row["ref"][kMapNames[c]] = summary_json(t.ref[c]);
    }
    tissues.push_back(row);
  }
  j["tissues"] = tissues;
  json slices = json::array();
  for (const auto& s : report.slices) {
    json row{{"id", s.id}};
    for (std::size_t c = 0; c < 3; ++c) {
      const auto& m = s.maps[c];
      row["maps"][kMapNames[c]] = {{"mae", number_json(m.mae)},
                                   {"mae_unit", number_json(m.mae_unit)},
                                   {"mpe", number_json(m.mpe)},
                                   {"psnr_db", number_json(m.psnr_db)},
                                   {"ssim", number_json(m.ssim)}};
    }
    row["rois"] = json::array();
    for (const auto& r : s.rois) {
      row["rois"].push_back({{"roi", roi_json(r.roi)}, {"pred", triple_json(r.pred)}, {"ref", triple_json(r.ref)}});
    }
    slices.push_back(row);
  }
  j["slices"] = slices;
  j["renders"] = report.renders;
  return j;
}

MetricsReport report_from_json(const json& j) {
  try {
    MetricsReport rep;
    for (std::size_t c = 0; c < 3; ++c) {
      const auto& m = j.at("maps").at(kMapNames[c]);
      rep.maps[c] = {summary_from(m.at("mae")), summary_from(m.at("mae_unit")), summary_from(m.at("mpe")),
                     summary_from(m.at("psnr_db")), summary_from(m.at("ssim"))};
    }
    for (const auto& row : j.at("tissues")) {
      TissueSummary t;
      t.label = tissue_from_string(row.at("label").get<std::string>());
      for (std::size_t c = 0; c < 3; ++c) {
        t.pred[c] = summary_from(row.at("pred").at(kMapNames[c]));
        t.ref[c] = summary_from(row.at("ref").at(kMapNames[c]));
      }
      rep.tissues.push_back(t);
    }
    for (const auto& row : j.at("slices")) {
      SliceMetrics s;
      s.id = row.at("id").get<std::string>();
      for (std::size_t c = 0; c < 3; ++c) {
        const auto& m = row.at("maps").at(kMapNames[c]);
        s.maps[c] = {number_from_json(m.at("mae")), number_from_json(m.at("mae_unit")), number_from_json(m.at("mpe")),
                     number_from_json(m.at("psnr_db")), number_from_json(m.at("ssim"))};
      }
      for (const auto& r : row.at("rois")) {
        s.rois.push_back({roi_from(r.at("roi")), triple_from(r.at("pred")), triple_from(r.at("ref"))});
      }
      rep.slices.push_back(s);
    }
    rep.renders = j.at("renders").get<std::vector<std::string>>();
    return rep;
  } catch (const json::exception& e) {
    throw InvalidArgument(std::string("metrics report: ") + e.what());
  }
}

}  // namespace qmri::metrics
