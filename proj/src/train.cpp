#include "qmri/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "qmri/dataio.hpp"
#include "qmri/metrics.hpp"

namespace qmri::model {

void TrainConfig::validate() const {
  if (!(lr > 0.0) || !std::isfinite(lr)) throw InvalidArgument("train: lr must be positive");
  if (max_epochs < 1) throw InvalidArgument("train: max_epochs must be >= 1");
  if (patience < 1 || patience >= max_epochs) throw InvalidArgument("train: patience must be in [1, max_epochs)");
  if (lr_schedule != "constant" && lr_schedule != "cosine") {
    throw InvalidArgument("train: lr_schedule must be constant or cosine, got " + lr_schedule);
  }
  if (batch_size < 1) throw InvalidArgument("train: batch_size must be >= 1");
  if (!(validation_fraction > 0.0 && validation_fraction < 1.0)) {
    throw InvalidArgument("train: validation_fraction must lie in (0, 1)");
  }
}

double TrainConfig::lr_at(int epoch) const {
  if (lr_schedule == "constant") return lr;
  const double pi = std::acos(-1.0);
  return 0.5 * lr * (1.0 + std::cos(pi * (epoch - 1) / max_epochs));
}

json to_json(const TrainConfig& c) {
  return {{"lr", c.lr},
          {"max_epochs", c.max_epochs},
          {"patience", c.patience},
          {"batch_size", c.batch_size},
          {"validation_fraction", c.validation_fraction},
          {"seed", c.seed},
          {"augment_flip", c.augment_flip},
          {"augment_zoom", c.augment_zoom},
          {"lr_schedule", c.lr_schedule}};
}

TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  c.lr = j.at("lr").get<double>();
  c.max_epochs = j.at("max_epochs").get<int>();
  c.patience = j.at("patience").get<int>();
  c.batch_size = j.at("batch_size").get<int>();
  c.validation_fraction = j.at("validation_fraction").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.augment_flip = j.at("augment_flip").get<bool>();
  c.augment_zoom = j.at("augment_zoom").get<bool>();
  c.lr_schedule = j.at("lr_schedule").get<std::string>();
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Augmentation

namespace {

template <typename T>
Grid<T> flip_grid(const Grid<T>& g) {
  Grid<T> out(g.height, g.width);
  for (std::size_t i = 0; i < g.height; ++i) {
    for (std::size_t j = 0; j < g.width; ++j) out(i, j) = g(i, g.width - 1 - j);
  }
  return out;
}

Image zoom_bilinear(const Image& img, double factor) {
  Image out(img.height, img.width, 0.0f);
  const double cy = (static_cast<double>(img.height) - 1.0) / 2.0;
  const double cx = (static_cast<double>(img.width) - 1.0) / 2.0;
  auto at = [&](long r, long c) -> double {
    if (r < 0 || c < 0 || r >= static_cast<long>(img.height) || c >= static_cast<long>(img.width)) return 0.0;
    return img(static_cast<std::size_t>(r), static_cast<std::size_t>(c));
  };
  for (std::size_t i = 0; i < img.height; ++i) {
    const double y = cy + (static_cast<double>(i) - cy) / factor;
    const double y0 = std::floor(y), fy = y - y0;
    for (std::size_t j = 0; j < img.width; ++j) {
      const double x = cx + (static_cast<double>(j) - cx) / factor;
      const double x0 = std::floor(x), fx = x - x0;
      const auto r = static_cast<long>(y0), c = static_cast<long>(x0);
      const double top = fx == 0.0 ? at(r, c) : (1.0 - fx) * at(r, c) + fx * at(r, c + 1);
      const double bottom = fx == 0.0 ? at(r + 1, c) : (1.0 - fx) * at(r + 1, c) + fx * at(r + 1, c + 1);
      out(i, j) = static_cast<float>(fy == 0.0 ? top : (1.0 - fy) * top + fy * bottom);
    }
  }
  return out;
}

Mask zoom_nearest(const Mask& m, double factor) {
  Mask out(m.height, m.width, 0);
  const double cy = (static_cast<double>(m.height) - 1.0) / 2.0;
  const double cx = (static_cast<double>(m.width) - 1.0) / 2.0;
  for (std::size_t i = 0; i < m.height; ++i) {
    const auto r = static_cast<long>(std::lround(cy + (static_cast<double>(i) - cy) / factor));
    for (std::size_t j = 0; j < m.width; ++j) {
      const auto c = static_cast<long>(std::lround(cx + (static_cast<double>(j) - cx) / factor));
      if (r < 0 || c < 0 || r >= static_cast<long>(m.height) || c >= static_cast<long>(m.width)) continue;
      out(i, j) = m(static_cast<std::size_t>(r), static_cast<std::size_t>(c)) ? 1 : 0;
    }
  }
  return out;
}

void apply_mask(Image& img, const Mask& m) {
  for (std::size_t k = 0; k < img.size(); ++k) {
    if (!m.data[k]) img.data[k] = 0.0f;
  }
}

}  // namespace

data::SampleRecord flip_horizontal(const data::SampleRecord& rec) {
  data::SampleRecord out = rec;
  for (auto& in : out.inputs) in.data = flip_grid(in.data);
  out.t1 = flip_grid(rec.t1);
  out.t2 = flip_grid(rec.t2);
  out.pd = flip_grid(rec.pd);
  out.mask = flip_grid(rec.mask);
  for (auto& roi : out.rois) roi.col = static_cast<int>(rec.width()) - 1 - roi.col;
  return out;
}

data::SampleRecord zoom(const data::SampleRecord& rec, double factor) {
  if (!(factor > 0.0) || !std::isfinite(factor)) throw InvalidArgument("zoom: factor must be positive");
  data::SampleRecord out = rec;
  out.mask = zoom_nearest(rec.mask, factor);
  for (auto& in : out.inputs) {
    in.data = zoom_bilinear(in.data, factor);
    apply_mask(in.data, out.mask);
  }
  for (Image* m : {&out.t1, &out.t2, &out.pd}) {
    *m = zoom_bilinear(*m, factor);
    apply_mask(*m, out.mask);
  }
  out.rois.clear();
  return out;
}

data::SampleRecord augment(const data::SampleRecord& rec, Rng& rng, const AugmentToggles& toggles) {
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  std::uniform_real_distribution<double> scale(0.9, 1.1);
  const double c_flip = coin(rng);
  const double c_zoom = coin(rng);
  const double factor = scale(rng);
  const bool do_flip = toggles.flip && c_flip < 0.5;
  const bool do_zoom = toggles.zoom && c_zoom < 0.5;
  if (!do_flip && !do_zoom) return rec;
  data::SampleRecord out = do_flip ? flip_horizontal(rec) : rec;
  if (do_zoom) out = zoom(out, factor);
  return out;
}

// ---------------------------------------------------------------------------
// Examples and scoring

Example make_example(const data::SampleRecord& rec) {
  const std::size_t h = rec.height(), w = rec.width();
  Example ex;
  for (std::size_t b = 0; b < 3; ++b) {
    if (rec.inputs[b].contrast != kSequences[b]) {
      throw InvalidArgument("record " + rec.record_id + ": inputs must be ordered T1w, T2w, FLAIR");
    }
    require_same_shape(rec.inputs[b].data, rec.mask, "make_example");
    ex.inputs[b] = Tensor<float>({1, h, w}, rec.inputs[b].data.data);
    ex.params[b] = rec.inputs[b].params;
  }
  std::vector<float> tgt;
  tgt.reserve(3 * h * w);
  for (const Image* m : {&rec.t1, &rec.t2, &rec.pd}) {
    require_same_shape(*m, rec.mask, "make_example");
    tgt.insert(tgt.end(), m->data.begin(), m->data.end());
  }
  ex.target = Tensor<float>({3, h, w}, std::move(tgt));
  std::vector<float> mk(rec.mask.data.begin(), rec.mask.data.end());
  ex.mask = Tensor<float>({h, w}, std::move(mk));
  return ex;
}

Split split_dataset(std::size_t n, double validation_fraction, std::uint64_t seed) {
  if (n == 0) throw InvalidArgument("split: dataset is empty");
  Split s;
  if (n == 1) {
    s.train = {0};
    s.validation = {0};
    return s;
  }
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(stream_seed(seed, 0));
  std::shuffle(idx.begin(), idx.end(), rng);
  auto nv = static_cast<std::size_t>(std::lround(validation_fraction * static_cast<double>(n)));
  nv = std::clamp<std::size_t>(nv, 1, n - 1);
  s.validation.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(nv));
  s.train.assign(idx.begin() + static_cast<std::ptrdiff_t>(nv), idx.end());
  std::sort(s.validation.begin(), s.validation.end());
  std::sort(s.train.begin(), s.train.end());
  return s;
}

Tensor<float> predict_record(const ModelWeights<float>& w, const data::SampleRecord& rec) {
  const Example ex = make_example(rec);
  return predict<float>(w, ex.inputs, ex.params);
}

ValidationScore score(const ModelWeights<float>& w, std::span<const data::SampleRecord* const> records) {
  if (records.empty()) throw InvalidArgument("score: no validation records");
  ValidationScore s;
  for (const auto* rec : records) {
    const auto raw = predict_record(w, *rec);
    const std::size_t hw = rec->height() * rec->width();
    std::array<double, 3> p{};
    const std::array<const Image*, 3> targets{&rec->t1, &rec->t2, &rec->pd};
    for (std::size_t c = 0; c < 3; ++c) {
      Image pred(rec->height(), rec->width(), 0.0f);
      for (std::size_t k = 0; k < hw; ++k) {
        if (rec->mask.data[k]) pred.data[k] = std::max(0.0f, raw.data[c * hw + k]);
      }
      p[c] = metrics::psnr(pred, *targets[c], rec->mask);
    }
    s.psnr_t1 += p[0];
    s.psnr_t2 += p[1];
    s.psnr_pd += p[2];
  }
  const auto n = static_cast<double>(records.size());
  s.psnr_t1 /= n;
  s.psnr_t2 /= n;
  s.psnr_pd /= n;
  return s;
}

ValidationScore score(const ModelWeights<float>& w, std::span<const data::SampleRecord> records) {
  std::vector<const data::SampleRecord*> ptrs;
  for (const auto& r : records) ptrs.push_back(&r);
  return score(w, std::span<const data::SampleRecord* const>(ptrs));
}

// ---------------------------------------------------------------------------
// Training loop

namespace {

json log_number(double v) { return metrics::number_json(v); }

std::vector<float> flatten_moments(const std::vector<std::vector<float>>& m) {
  std::vector<float> out;
  for (const auto& v : m) out.insert(out.end(), v.begin(), v.end());
  return out;
}

std::vector<std::vector<float>> split_moments(const std::vector<float>& flat, const ModelWeights<float>& w) {
  std::vector<std::vector<float>> out;
  std::size_t k = 0;
  for (const auto& t : w.tensors) {
    out.emplace_back(flat.begin() + static_cast<std::ptrdiff_t>(k),
                     flat.begin() + static_cast<std::ptrdiff_t>(k + t->numel()));
    k += t->numel();
  }
  return out;
}

void write_log(const std::filesystem::path& path, const std::vector<json>& lines) {
  std::string text;
  for (const auto& l : lines) text += l.dump() + "\n";
  io::write_text(path, text);
}

}  // namespace

TrainResult train(const std::vector<data::SampleRecord>& records, const data::PreprocessConfig& pre,
                  const ModelConfig& model_cfg, const TrainConfig& cfg, const LossConfig& loss,
                  const TrainOptions& opts) {
  model_cfg.validate();
  cfg.validate();
  loss.validate();
  pre.validate();
  if (records.empty()) throw InvalidArgument("train: dataset is empty");
  const std::string pre_hash = pre.hash();
  for (const auto& r : records) {
    if (r.preprocess_hash != pre_hash) {
      throw CompatError("train: record " + r.record_id + " was preprocessed with " + r.preprocess_hash +
                        ", dataset declares " + pre_hash);
    }
    if (r.height() != model_cfg.height || r.width() != model_cfg.width) {
      throw ShapeError("train: record " + r.record_id + " is " + std::to_string(r.height()) + "x" +
                       std::to_string(r.width()) + ", model expects " + std::to_string(model_cfg.height) + "x" +
                       std::to_string(model_cfg.width));
    }
  }

  const Split split = split_dataset(records.size(), cfg.validation_fraction, cfg.seed);
  std::vector<const data::SampleRecord*> val;
  for (auto i : split.validation) val.push_back(&records[i]);

  ModelWeights<float> w = init_weights<float>(model_cfg, stream_seed(cfg.seed, 1));
  ModelWeights<float> best = w.clone();
  ad::AdamState<float> adam;
  TrainState state;
  state.best_score = -std::numeric_limits<double>::infinity();
  ValidationScore best_score{};

  TrainResult result;
  json header{{"type", "header"},
              {"seed", cfg.seed},
              {"model", to_json(model_cfg)},
              {"train", to_json(cfg)},
              {"loss", to_json(loss)},
              {"preprocess_hash", pre_hash},
              {"train_records", split.train.size()},
              {"validation_records", split.validation.size()}};
  result.log.push_back(header);

  if (opts.resume_from) {
    Checkpoint ck = load_checkpoint(*opts.resume_from, &model_cfg);
    if (ck.last_params.empty()) throw CompatError("train: checkpoint " + opts.resume_from->string() + " is not resumable");
    if (ck.preprocess_hash != pre_hash) throw CompatError("train: checkpoint was trained on other preprocessing");
    w.assign(ck.last_params);
    best = ck.weights.clone();
    state = ck.state;
    if (!state.has_best) state.best_score = -std::numeric_limits<double>::infinity();
    adam.step = state.adam_step;
    adam.m = split_moments(ck.adam_m, w);
    adam.v = split_moments(ck.adam_v, w);
    std::istringstream old(io::read_text(*opts.resume_from / "train_log.jsonl"));
    std::string line;
    while (std::getline(old, line)) {
      if (line.empty()) continue;
      json j = json::parse(line, nullptr, false);
      if (j.is_discarded() || !j.contains("epoch")) continue;
      if (j.at("epoch").get<int>() > state.epoch) break;
      result.log.push_back(j);
      if (j.at("epoch").get<int>() == state.best_epoch) {
        best_score = {metrics::number_from_json(j.at("psnr_t1")), metrics::number_from_json(j.at("psnr_t2")),
                      metrics::number_from_json(j.at("psnr_pd"))};
      }
    }
  }

  auto save = [&](const std::filesystem::path& dir) {
    Checkpoint ck;
    ck.weights = best;
    ck.preprocess_hash = pre_hash;
    ck.preprocess = data::to_json(pre);
    ck.train = to_json(cfg);
    ck.loss = loss;
    ck.state = state;
    ck.state.adam_step = adam.step;
    ck.last_params = w.flatten();
    if (adam.m.empty()) {
      ck.adam_m.assign(ck.last_params.size(), 0.0f);
      ck.adam_v.assign(ck.last_params.size(), 0.0f);
    } else {
      ck.adam_m = flatten_moments(adam.m);
      ck.adam_v = flatten_moments(adam.v);
    }
    save_checkpoint(dir, ck);
    write_log(dir / "train_log.jsonl", result.log);
  };

  const AugmentToggles toggles{cfg.augment_flip, cfg.augment_zoom};
  const auto batch = static_cast<std::size_t>(cfg.batch_size);
  std::vector<std::vector<float>> acc(w.tensors.size());

  while (state.epoch < cfg.max_epochs && state.epochs_since_best < cfg.patience) {
    const int epoch = state.epoch + 1;
    std::vector<std::size_t> order = split.train;
    Rng perm_rng(stream_seed(stream_seed(cfg.seed, 2), static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), perm_rng);
    const double lr = cfg.lr_at(epoch);
    const std::uint64_t aug_base = stream_seed(stream_seed(cfg.seed, 3), static_cast<std::uint64_t>(epoch));

    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t end = std::min(order.size(), start + batch);
      for (std::size_t t = 0; t < w.tensors.size(); ++t) acc[t].assign(w.tensors[t]->numel(), 0.0f);
      for (std::size_t k = start; k < end; ++k) {
        const std::size_t idx = order[k];
        Rng aug_rng(stream_seed(aug_base, idx));
        const Example ex = make_example(augment(records[idx], aug_rng, toggles));
        Graph<float> g;
        const auto vars = bind(g, w);
        const std::array<Var<float>, 3> in{g.constant(ex.inputs[0]), g.constant(ex.inputs[1]),
                                           g.constant(ex.inputs[2])};
        auto pred = forward<float>(g, w, vars, in, ex.params);
        auto l = loss_total(pred, g.constant(ex.target), g.constant(ex.mask), loss);
        const double lv = l.value().data[0];
        if (!std::isfinite(lv)) {
          throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch) + " (record " +
                             records[idx].record_id + "); last good checkpoint kept");
        }
        loss_sum += lv;
        g.backward(l);
        for (std::size_t t = 0; t < w.tensors.size(); ++t) {
          const auto& gr = w.tensors[t]->grad;
          for (std::size_t q = 0; q < gr.size(); ++q) acc[t][q] += gr[q];
        }
      }
      const float inv = 1.0f / static_cast<float>(end - start);
      for (std::size_t t = 0; t < w.tensors.size(); ++t) {
        auto& gr = w.tensors[t]->grad;
        for (std::size_t q = 0; q < gr.size(); ++q) gr[q] = acc[t][q] * inv;
      }
      try {
        ad::adam_step<float>(w.tensors, adam, lr);
      } catch (const NumericError& e) {
        throw NumericError("train: " + std::string(e.what()) + " at epoch " + std::to_string(epoch) +
                           "; last good checkpoint kept");
      }
    }

    const ValidationScore sc = score(w, std::span<const data::SampleRecord* const>(val));
    const double total = sc.sum();
    if (std::isnan(total)) throw NumericError("train: validation PSNR is NaN at epoch " + std::to_string(epoch));
    state.epoch = epoch;
    state.adam_step = adam.step;
    if (total > state.best_score) {
      state.best_score = total;
      state.best_epoch = epoch;
      state.epochs_since_best = 0;
      state.has_best = true;
      best = w.clone();
      best_score = sc;
    } else {
      state.epochs_since_best += 1;
    }
    json line{{"epoch", epoch},
              {"loss", log_number(loss_sum / static_cast<double>(order.size()))},
              {"psnr_t1", log_number(sc.psnr_t1)},
              {"psnr_t2", log_number(sc.psnr_t2)},
              {"psnr_pd", log_number(sc.psnr_pd)},
              {"best", log_number(state.best_score)}};
    result.log.push_back(line);
    if (opts.on_epoch) opts.on_epoch(line);
    if (opts.out_dir) save(*opts.out_dir);
  }

  result.stopped_early = state.epochs_since_best >= cfg.patience;
  result.best = best;
  result.last = w;
  result.best_score = best_score;
  result.state = state;
  if (opts.out_dir && state.epoch == 0) save(*opts.out_dir);
  return result;
}

// ---------------------------------------------------------------------------
// Inference

ParametricMaps to_maps(const Tensor<float>& raw, const Mask& mask, const data::NormConstants& norm) {
  const std::size_t h = mask.height, w = mask.width, hw = h * w;
  if (raw.shape != ad::Shape{3, h, w}) throw ShapeError("to_maps: prediction shape " + ad::to_string(raw.shape));
  ParametricMaps out;
  out.mask = mask;
  out.t1 = Image(h, w, 0.0f);
  out.t2 = Image(h, w, 0.0f);
  out.pd = Image(h, w, 0.0f);
  const std::array<Image*, 3> maps{&out.t1, &out.t2, &out.pd};
  const std::array<double, 3> scale{norm.t1_ref, norm.t2_ref, 1.0};
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t k = 0; k < hw; ++k) {
      if (!mask.data[k]) continue;
      maps[c]->data[k] = static_cast<float>(std::max(0.0f, raw.data[c * hw + k]) * scale[c]);
    }
  }
  return out;
}

ParametricMaps infer(const Checkpoint& ckpt, const data::SampleRecord& rec) {
  if (rec.preprocess_hash != ckpt.preprocess_hash) {
    throw CompatError("infer: record " + rec.record_id + " was preprocessed with " + rec.preprocess_hash +
                      " but the checkpoint expects " + ckpt.preprocess_hash);
  }
  const auto& cfg = ckpt.weights.config;
  if (rec.height() != cfg.height || rec.width() != cfg.width) {
    throw CompatError("infer: record " + rec.record_id + " is " + std::to_string(rec.height()) + "x" +
                      std::to_string(rec.width()) + ", checkpoint expects " + std::to_string(cfg.height) + "x" +
                      std::to_string(cfg.width));
  }
  return to_maps(predict_record(ckpt.weights, rec), rec.mask, rec.norm);
}

}  // namespace qmri::model
