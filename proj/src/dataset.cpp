#include "qmri/dataset.hpp"

#include <algorithm>
#include <cstdio>
#include <thread>

#include "qmri/dataio.hpp"

namespace qmri::data {

namespace fs = std::filesystem;

void PreprocessConfig::validate() const {
  if (crop_height == 0 || crop_width == 0) throw InvalidArgument("preprocess: crop size must be positive");
  if (!(clip_lo >= 0.0 && clip_lo < clip_hi && clip_hi <= 100.0)) {
    throw InvalidArgument("preprocess: clip percentiles must satisfy 0 <= lo < hi <= 100");
  }
  if (!(t1_ref > 0.0) || !(t2_ref > 0.0)) throw InvalidArgument("preprocess: reference scales must be positive");
}

std::string PreprocessConfig::hash() const { return io::hex64(io::fnv1a(to_json(*this).dump())); }

std::array<ScanParams, 3> SampleRecord::params() const {
  return {inputs[0].params, inputs[1].params, inputs[2].params};
}

namespace {

double masked_mean(const Image& img, const Mask& mask) {
  double acc = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < img.size(); ++i) {
    if (!mask.data[i]) continue;
    acc += img.data[i];
    ++n;
  }
  return n ? acc / static_cast<double>(n) : 0.0;
}

json parse_json(const fs::path& path) {
  const auto text = io::read_text(path);
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw FormatError(FormatError::Kind::Schema, path.string() + ": " + e.what());
  }
}

}  // namespace

SampleRecord make_record(const Phantom& phantom, const std::array<ScanParams, 3>& params, double noise_sigma,
                         Rng& noise_rng, const PreprocessConfig& pre) {
  pre.validate();
  if (!(noise_sigma >= 0.0)) throw InvalidArgument("noise sigma must be >= 0");
  for (std::size_t i = 0; i < 3; ++i) {
    if (params[i].sequence != kSequences[i]) throw InvalidArgument("protocols must be ordered t1w, t2w, flair");
  }
  const Mask& mask = phantom.maps.mask;
  ParametricMaps maps;
  maps.mask = mask;
  maps.t1 = io::clip_percentile(phantom.maps.t1, mask, pre.clip_lo, pre.clip_hi);
  maps.t2 = io::clip_percentile(phantom.maps.t2, mask, pre.clip_lo, pre.clip_hi);
  maps.pd = io::clip_percentile(phantom.maps.pd, mask, pre.clip_lo, pre.clip_hi);

  SampleRecord rec;
  rec.noise_sigma = noise_sigma;
  rec.norm.t1_ref = pre.t1_ref;
  rec.norm.t2_ref = pre.t2_ref;
  rec.preprocess_hash = pre.hash();

  const auto [r0, c0] = io::crop_offset(mask.height, mask.width, pre.crop_height, pre.crop_width);
  for (std::size_t i = 0; i < 3; ++i) {
    WeightedImage img = synthesize_weighted(maps, params[i]);
    if (noise_sigma > 0.0) {
      const double sigma_abs = noise_sigma * masked_mean(img.data, mask);
      img = add_rician_noise(img, sigma_abs, noise_rng);
      for (std::size_t k = 0; k < img.data.size(); ++k) {
        if (!mask.data[k]) img.data.data[k] = 0.0f;
      }
    }
    double peak = 1.0;
    img.data = io::normalize_max(img.data, mask, &peak);
    rec.norm.contrast_max[i] = peak;
    img.data = io::center_crop(img.data, pre.crop_height, pre.crop_width);
    img.noise_sigma = noise_sigma;
    rec.inputs[i] = std::move(img);
  }

  double pd_max = 1.0;
  const Image pd_unit = io::normalize_max(maps.pd, mask, &pd_max);
  rec.norm.pd_max = pd_max;
  rec.mask = io::center_crop(mask, pre.crop_height, pre.crop_width);
  rec.pd = io::center_crop(pd_unit, pre.crop_height, pre.crop_width);
  rec.t1 = io::center_crop(maps.t1, pre.crop_height, pre.crop_width);
  rec.t2 = io::center_crop(maps.t2, pre.crop_height, pre.crop_width);
  const auto t1_scale = static_cast<float>(pre.t1_ref), t2_scale = static_cast<float>(pre.t2_ref);
  for (auto& v : rec.t1.data) v /= t1_scale;
  for (auto& v : rec.t2.data) v /= t2_scale;

  const int h = static_cast<int>(pre.crop_height), w = static_cast<int>(pre.crop_width);
  for (auto roi : phantom.rois) {
    roi.row -= static_cast<int>(r0);
    roi.col -= static_cast<int>(c0);
    const int reach = static_cast<int>(roi.diameter / 2.0);
    if (roi.row - reach >= 0 && roi.row + reach < h && roi.col - reach >= 0 && roi.col + reach < w) {
      rec.rois.push_back(roi);
    }
  }
  return rec;
}

std::string record_stem(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "record_%05zu", index);
  return buf;
}

SampleRecord simulate_record(const DatasetSpec& spec, std::size_t index) {
  spec.ranges.validate();
  const std::uint64_t seed = stream_seed(spec.seed, index);
  Rng phantom_rng(stream_seed(seed, 0));
  Rng protocol_rng(stream_seed(seed, 1));
  Rng noise_rng(stream_seed(seed, 2));
  const Phantom ph = generate_phantom(spec.phantom, phantom_rng);
  std::array<ScanParams, 3> params;
  for (std::size_t i = 0; i < 3; ++i) params[i] = sample_protocol(kSequences[i], spec.ranges, protocol_rng);
  SampleRecord rec = make_record(ph, params, spec.noise_sigma, noise_rng, spec.preprocess);
  rec.record_id = record_stem(index);
  rec.seed = seed;
  return rec;
}

SampleRecord resimulate(const SampleRecord& stored, const PhantomConfig& phantom, const PreprocessConfig& pre) {
  Rng phantom_rng(stream_seed(stored.seed, 0));
  Rng noise_rng(stream_seed(stored.seed, 2));
  const Phantom ph = generate_phantom(phantom, phantom_rng);
  SampleRecord rec = make_record(ph, stored.params(), stored.noise_sigma, noise_rng, pre);
  rec.record_id = stored.record_id;
  rec.seed = stored.seed;
  return rec;
}

// ---------------------------------------------------------------------------
// JSON

json to_json(const ScanParams& p) {
  json j{{"tr", p.tr_ms}, {"te", p.te_ms}};
  if (p.ti_ms) j["ti"] = *p.ti_ms;
  return j;
}

ScanParams scan_params_from_json(Sequence s, const json& j) {
  ScanParams p;
  p.sequence = s;
  p.tr_ms = j.at("tr").get<double>();
  p.te_ms = j.at("te").get<double>();
  if (j.contains("ti")) p.ti_ms = j.at("ti").get<double>();
  p.validate();
  return p;
}

json to_json(const ProtocolRanges& r) {
  json j;
  for (auto s : kSequences) {
    const auto& sr = r.for_sequence(s);
    json e{{"tr", {sr.tr.min, sr.tr.max}}, {"te", {sr.te.min, sr.te.max}}};
    if (sr.ti) e["ti"] = {sr.ti->min, sr.ti->max};
    j[to_string(s)] = e;
  }
  return j;
}

ProtocolRanges protocol_ranges_from_json(const json& j) {
  ProtocolRanges r;
  auto range = [](const json& a) { return Range{a.at(0).get<double>(), a.at(1).get<double>()}; };
  for (auto s : kSequences) {
    const auto& e = j.at(to_string(s));
    auto& sr = r.for_sequence(s);
    sr.tr = range(e.at("tr"));
    sr.te = range(e.at("te"));
    sr.ti = e.contains("ti") ? std::optional<Range>(range(e.at("ti"))) : std::nullopt;
  }
  r.validate();
  return r;
}

json to_json(const PhantomConfig& c) {
  auto props = [](const TissueProperties& p) {
    return json{{"t1", {p.t1.mean, p.t1.std}}, {"t2", {p.t2.mean, p.t2.std}}, {"pd", {p.pd.mean, p.pd.std}}};
  };
  return json{{"height", c.height},
              {"width", c.width},
              {"lesion_probability", c.lesion_probability},
              {"max_lesions", c.max_lesions},
              {"jitter_tissues", c.jitter_tissues},
              {"tissues",
               {{"WM", props(c.tissues.wm)},
                {"GM", props(c.tissues.gm)},
                {"CSF", props(c.tissues.csf)},
                {"lesion", props(c.tissues.lesion)}}}};
}

PhantomConfig phantom_config_from_json(const json& j) {
  PhantomConfig c;
  c.height = j.at("height").get<std::size_t>();
  c.width = j.at("width").get<std::size_t>();
  c.lesion_probability = j.at("lesion_probability").get<double>();
  c.max_lesions = j.at("max_lesions").get<int>();
  c.jitter_tissues = j.at("jitter_tissues").get<bool>();
  auto props = [](const json& e) {
    auto stats = [](const json& a) { return TissueStats{a.at(0).get<double>(), a.at(1).get<double>()}; };
    return TissueProperties{stats(e.at("t1")), stats(e.at("t2")), stats(e.at("pd"))};
  };
  const auto& t = j.at("tissues");
  c.tissues.wm = props(t.at("WM"));
  c.tissues.gm = props(t.at("GM"));
  c.tissues.csf = props(t.at("CSF"));
  c.tissues.lesion = props(t.at("lesion"));
  c.validate();
  return c;
}

json to_json(const PreprocessConfig& c) {
  return json{{"crop", {c.crop_height, c.crop_width}},
              {"clip", {c.clip_lo, c.clip_hi}},
              {"t1_ref", c.t1_ref},
              {"t2_ref", c.t2_ref}};
}

PreprocessConfig preprocess_config_from_json(const json& j) {
  PreprocessConfig c;
  c.crop_height = j.at("crop").at(0).get<std::size_t>();
  c.crop_width = j.at("crop").at(1).get<std::size_t>();
  c.clip_lo = j.at("clip").at(0).get<double>();
  c.clip_hi = j.at("clip").at(1).get<double>();
  c.t1_ref = j.at("t1_ref").get<double>();
  c.t2_ref = j.at("t2_ref").get<double>();
  c.validate();
  return c;
}

json to_json(const RoiDisc& r) {
  return json{{"row", r.row}, {"col", r.col}, {"diameter", r.diameter}, {"label", to_string(r.label)}};
}

RoiDisc roi_from_json(const json& j) {
  RoiDisc r;
  r.row = j.at("row").get<int>();
  r.col = j.at("col").get<int>();
  r.diameter = j.at("diameter").get<double>();
  r.label = tissue_from_string(j.at("label").get<std::string>());
  return r;
}

json sidecar_json(const SampleRecord& rec) {
  json params;
  for (std::size_t i = 0; i < 3; ++i) params[to_string(kSequences[i])] = to_json(rec.inputs[i].params);
  json rois = json::array();
  for (const auto& r : rec.rois) rois.push_back(to_json(r));
  return json{{"record_id", rec.record_id},
              {"seed", rec.seed},
              {"noise_sigma", rec.noise_sigma},
              {"params", params},
              {"norm",
               {{"t1_ref", rec.norm.t1_ref},
                {"t2_ref", rec.norm.t2_ref},
                {"pd_max", rec.norm.pd_max},
                {"per_contrast_max",
                 {{"t1w", rec.norm.contrast_max[0]},
                  {"t2w", rec.norm.contrast_max[1]},
                  {"flair", rec.norm.contrast_max[2]}}}}},
              {"rois", rois},
              {"preprocess_hash", rec.preprocess_hash}};
}

// ---------------------------------------------------------------------------
// Files

void write_record(const fs::path& dir, const SampleRecord& rec) {
  io::QmapFile file;
  file.add("t1w", rec.inputs[0].data);
  file.add("t2w", rec.inputs[1].data);
  file.add("flair", rec.inputs[2].data);
  file.add("t1_norm", rec.t1);
  file.add("t2_norm", rec.t2);
  file.add("pd_norm", rec.pd);
  Image mask(rec.mask.height, rec.mask.width);
  for (std::size_t i = 0; i < mask.size(); ++i) mask.data[i] = rec.mask.data[i] ? 1.0f : 0.0f;
  file.add("mask", std::move(mask));
  io::write_qmap(dir / (rec.record_id + ".qmap"), file);
  io::write_text(dir / (rec.record_id + ".json"), sidecar_json(rec).dump(2) + "\n");
}

SampleRecord read_record(const fs::path& qmap_path) {
  const auto file = io::read_qmap(qmap_path);
  auto sidecar_path = qmap_path;
  sidecar_path.replace_extension(".json");
  const json j = parse_json(sidecar_path);
  SampleRecord rec;
  try {
    rec.record_id = j.at("record_id").get<std::string>();
    rec.seed = j.at("seed").get<std::uint64_t>();
    rec.noise_sigma = j.at("noise_sigma").get<double>();
    const auto& norm = j.at("norm");
    rec.norm.t1_ref = norm.at("t1_ref").get<double>();
    rec.norm.t2_ref = norm.at("t2_ref").get<double>();
    rec.norm.pd_max = norm.at("pd_max").get<double>();
    for (std::size_t i = 0; i < 3; ++i) {
      const auto name = to_string(kSequences[i]);
      rec.norm.contrast_max[i] = norm.at("per_contrast_max").at(name).get<double>();
      WeightedImage& img = rec.inputs[i];
      img.contrast = kSequences[i];
      img.params = scan_params_from_json(kSequences[i], j.at("params").at(name));
      img.data = file.channel(name);
      img.noise_sigma = rec.noise_sigma;
    }
    for (const auto& r : j.at("rois")) rec.rois.push_back(roi_from_json(r));
    rec.preprocess_hash = j.at("preprocess_hash").get<std::string>();
  } catch (const json::exception& e) {
    throw FormatError(FormatError::Kind::Schema, sidecar_path.string() + ": " + e.what());
  } catch (const InvalidArgument& e) {
    throw FormatError(FormatError::Kind::Schema, sidecar_path.string() + ": " + e.what());
  }
  rec.t1 = file.channel("t1_norm");
  rec.t2 = file.channel("t2_norm");
  rec.pd = file.channel("pd_norm");
  const Image& m = file.channel("mask");
  rec.mask = Mask(m.height, m.width, 0);
  for (std::size_t i = 0; i < m.size(); ++i) rec.mask.data[i] = m.data[i] != 0.0f;
  return rec;
}

std::vector<fs::path> list_records(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError(dir.string(), "not a directory");
  std::vector<fs::path> out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const auto name = entry.path().filename().string();
    if (entry.is_regular_file() && name.rfind("record_", 0) == 0 && entry.path().extension() == ".qmap") {
      out.push_back(entry.path());
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<SampleRecord> load_dataset(const fs::path& dir) {
  std::vector<SampleRecord> out;
  for (const auto& p : list_records(dir)) out.push_back(read_record(p));
  if (out.empty()) throw IoError(dir.string(), "no records found");
  return out;
}

DatasetSpec read_dataset_spec(const fs::path& dir) {
  const auto path = dir / "dataset.json";
  const json j = parse_json(path);
  try {
    DatasetSpec spec;
    spec.count = j.at("count").get<std::size_t>();
    spec.seed = j.at("seed").get<std::uint64_t>();
    spec.noise_sigma = j.at("noise_sigma").get<double>();
    spec.phantom = phantom_config_from_json(j.at("phantom"));
    spec.ranges = protocol_ranges_from_json(j.at("protocol_ranges"));
    spec.preprocess = preprocess_config_from_json(j.at("preprocess"));
    return spec;
  } catch (const json::exception& e) {
    throw FormatError(FormatError::Kind::Schema, path.string() + ": " + e.what());
  }
}

void build_dataset(const DatasetSpec& spec, const fs::path& dir, int threads) {
  spec.phantom.validate();
  spec.ranges.validate();
  spec.preprocess.validate();
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError(dir.string(), "cannot create directory: " + ec.message());

  const json manifest{{"count", spec.count},
                      {"seed", spec.seed},
                      {"noise_sigma", spec.noise_sigma},
                      {"phantom", to_json(spec.phantom)},
                      {"protocol_ranges", to_json(spec.ranges)},
                      {"preprocess", to_json(spec.preprocess)},
                      {"preprocess_hash", spec.preprocess.hash()}};
  io::write_text(dir / "dataset.json", manifest.dump(2) + "\n");

  const auto workers = static_cast<std::size_t>(std::max(1, threads));
  if (workers == 1) {
    for (std::size_t i = 0; i < spec.count; ++i) write_record(dir, simulate_record(spec, i));
    return;
  }
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < workers; ++t) {
    pool.emplace_back([&, t] {
      try {
        for (std::size_t i = t; i < spec.count; i += workers) write_record(dir, simulate_record(spec, i));
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

ParametricMaps target_maps(const SampleRecord& rec) {
  ParametricMaps m;
  m.mask = rec.mask;
  m.t1 = rec.t1;
  m.t2 = rec.t2;
  m.pd = rec.pd;
  const auto t1s = static_cast<float>(rec.norm.t1_ref), t2s = static_cast<float>(rec.norm.t2_ref);
  for (auto& v : m.t1.data) v *= t1s;
  for (auto& v : m.t2.data) v *= t2s;
  return m;
}

std::array<WeightedImage, 3> raw_inputs(const SampleRecord& rec) {
  auto out = rec.inputs;
  for (std::size_t i = 0; i < 3; ++i) {
    const auto s = static_cast<float>(rec.norm.contrast_max[i]);
    for (auto& v : out[i].data.data) v *= s;
  }
  return out;
}

}  // namespace qmri::data
