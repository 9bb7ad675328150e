#include "qmri/model.hpp"

#include <cmath>
#include <limits>
#include <random>

#include "qmri/dataio.hpp"

namespace qmri::model {

namespace {

const char* branch_name(Sequence s) {
  switch (s) {
    case Sequence::T1w: return "t1w";
    case Sequence::T2w: return "t2w";
    case Sequence::Flair: return "flair";
  }
  return "?";
}

std::string lvl(const char* part, int l) { return std::string(part) + std::to_string(l); }

}  // namespace

void ModelConfig::validate() const {
  if (levels < 1 || levels > 6) throw InvalidArgument("model: levels must be in [1, 6]");
  if (base_channels < 1 || embed_dim < 1) throw InvalidArgument("model: base_channels and embed_dim must be positive");
  const std::size_t div = std::size_t{1} << levels;
  if (height == 0 || width == 0 || height % div != 0 || width % div != 0) {
    throw InvalidArgument("model: input " + std::to_string(height) + "x" + std::to_string(width) +
                          " must be divisible by 2^levels = " + std::to_string(div));
  }
  if (!(tr_ref > 0 && te_ref > 0 && ti_ref > 0)) throw InvalidArgument("model: reference constants must be positive");
}

std::string ModelConfig::hash() const { return io::hex64(io::fnv1a(to_json(*this).dump())); }

void LossConfig::validate() const {
  for (double v : {lambda_t1, lambda_t2, lambda_pd}) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw InvalidArgument("loss: weights must be finite and nonnegative");
  }
}

json to_json(const ModelConfig& c) {
  return {{"levels", c.levels},
          {"base_channels", c.base_channels},
          {"embed_dim", c.embed_dim},
          {"height", c.height},
          {"width", c.width},
          {"tr_ref", c.tr_ref},
          {"te_ref", c.te_ref},
          {"ti_ref", c.ti_ref},
          {"param_embedding", c.param_embedding}};
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  c.levels = j.at("levels").get<int>();
  c.base_channels = j.at("base_channels").get<int>();
  c.embed_dim = j.at("embed_dim").get<int>();
  c.height = j.at("height").get<std::size_t>();
  c.width = j.at("width").get<std::size_t>();
  c.tr_ref = j.at("tr_ref").get<double>();
  c.te_ref = j.at("te_ref").get<double>();
  c.ti_ref = j.at("ti_ref").get<double>();
  c.param_embedding = j.at("param_embedding").get<bool>();
  c.validate();
  return c;
}

json to_json(const LossConfig& c) {
  return {{"lambda_t1", c.lambda_t1}, {"lambda_t2", c.lambda_t2}, {"lambda_pd", c.lambda_pd}};
}

LossConfig loss_config_from_json(const json& j) {
  LossConfig c{j.at("lambda_t1").get<double>(), j.at("lambda_t2").get<double>(), j.at("lambda_pd").get<double>()};
  c.validate();
  return c;
}

std::size_t branch_param_count(Sequence branch) { return branch == Sequence::Flair ? 3 : 2; }

std::vector<ParamSpec> layout(const ModelConfig& cfg) {
  cfg.validate();
  std::vector<ParamSpec> out;
  auto conv = [&](const std::string& name, std::size_t cout, std::size_t cin, std::size_t k) {
    out.push_back({name + ".w", {cout, cin, k, k}});
    out.push_back({name + ".b", {cout}});
  };
  const auto e = static_cast<std::size_t>(cfg.embed_dim);
  const int L = cfg.levels;
  for (Sequence s : kSequences) {
    const std::string br = branch_name(s);
    for (int l = 0; l < L; ++l) {
      const auto c = static_cast<std::size_t>(cfg.channels(l));
      const std::size_t cin = l == 0 ? 1 : static_cast<std::size_t>(cfg.channels(l - 1));
      const std::string p = br + "." + lvl("enc", l);
      conv(p + ".conv1", c, cin, 3);
      conv(p + ".conv2", c, c, 3);
      out.push_back({p + ".embed.w", {e, branch_param_count(s)}});
      out.push_back({p + ".embed.b", {e}});
      conv(p + ".fuse1", c, c + e, 1);
      conv(p + ".fuse2", c, c, 1);
    }
  }
  const auto cb = static_cast<std::size_t>(cfg.channels(L));
  conv("bottleneck.conv1", cb, 3 * static_cast<std::size_t>(cfg.channels(L - 1)), 3);
  conv("bottleneck.conv2", cb, cb, 3);
  for (int l = L - 1; l >= 0; --l) {
    const auto c = static_cast<std::size_t>(cfg.channels(l));
    const auto up = static_cast<std::size_t>(cfg.channels(l + 1));
    conv(lvl("dec", l) + ".conv1", c, up + 3 * c, 3);
    conv(lvl("dec", l) + ".conv2", c, c, 3);
  }
  conv("head", 3, static_cast<std::size_t>(cfg.channels(0)), 1);
  return out;
}

template <typename T>
const TensorPtr<T>& ModelWeights<T>::at(const std::string& name) const {
  const auto it = index.find(name);
  if (it == index.end()) throw InvalidArgument("model weights: no array named '" + name + "'");
  return tensors[it->second];
}

template <typename T>
std::size_t ModelWeights<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors) n += t->numel();
  return n;
}

template <typename T>
std::vector<T> ModelWeights<T>::flatten() const {
  std::vector<T> flat;
  flat.reserve(parameter_count());
  for (const auto& t : tensors) flat.insert(flat.end(), t->data.begin(), t->data.end());
  return flat;
}

template <typename T>
void ModelWeights<T>::assign(std::span<const T> flat) {
  if (flat.size() != parameter_count()) {
    throw ShapeError("model weights: expected " + std::to_string(parameter_count()) + " values, got " +
                     std::to_string(flat.size()));
  }
  std::size_t k = 0;
  for (auto& t : tensors) {
    std::copy(flat.begin() + static_cast<std::ptrdiff_t>(k), flat.begin() + static_cast<std::ptrdiff_t>(k + t->numel()),
              t->data.begin());
    k += t->numel();
  }
}

template <typename T>
ModelWeights<T> ModelWeights<T>::clone() const {
  ModelWeights out = *this;
  for (auto& t : out.tensors) t = std::make_shared<Tensor<T>>(*t);
  return out;
}

template <typename T>
ModelWeights<T> empty_weights(const ModelConfig& cfg) {
  ModelWeights<T> w;
  w.config = cfg;
  for (const auto& spec : layout(cfg)) {
    w.index[spec.name] = w.names.size();
    w.names.push_back(spec.name);
    w.tensors.push_back(std::make_shared<Tensor<T>>(Tensor<T>::zeros(spec.shape, true)));
  }
  return w;
}

template <typename T>
ModelWeights<T> init_weights(const ModelConfig& cfg, std::uint64_t seed) {
  ModelWeights<T> w = empty_weights<T>(cfg);
  Rng rng(seed);
  for (auto& t : w.tensors) {
    if (t->rank() == 1) continue;  // biases stay zero
    std::size_t fan_in = 1;
    for (std::size_t d = 1; d < t->rank(); ++d) fan_in *= t->dim(d);
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
    for (auto& v : t->data) v = static_cast<T>(dist(rng));
  }
  return w;
}

template <typename T>
std::vector<Var<T>> bind(Graph<T>& g, const ModelWeights<T>& w) {
  std::vector<Var<T>> vars;
  vars.reserve(w.tensors.size());
  for (const auto& t : w.tensors) vars.push_back(g.leaf(t));
  return vars;
}

std::vector<double> scaled_params(const ScanParams& p, Sequence branch, const ModelConfig& cfg) {
  if (p.sequence != branch) {
    throw InvalidArgument("embed: " + to_string(p.sequence) + " parameters given to the " + to_string(branch) +
                          " branch");
  }
  if (branch == Sequence::Flair && !p.ti_ms) throw InvalidArgument("embed: FLAIR parameters require TI");
  std::vector<double> v{p.tr_ms / cfg.tr_ref, p.te_ms / cfg.te_ref};
  if (branch == Sequence::Flair) v.push_back(*p.ti_ms / cfg.ti_ref);
  return v;
}

template <typename T>
Var<T> embed_params(Graph<T>& g, const ModelWeights<T>& w, std::span<const Var<T>> vars, const ScanParams& p,
                    Sequence branch, int level) {
  const auto& cfg = w.config;
  const auto raw = scaled_params(p, branch, cfg);
  const std::size_t h = cfg.height >> level, wd = cfg.width >> level;
  const auto e = static_cast<std::size_t>(cfg.embed_dim);
  if (!cfg.param_embedding) return g.constant(Tensor<T>::zeros({e, h, wd}));
  std::vector<T> vals(raw.begin(), raw.end());
  auto v = g.constant(Tensor<T>({vals.size()}, vals));
  const std::string p_name = std::string(branch_name(branch)) + "." + lvl("enc", level) + ".embed";
  auto z = ad::linear(v, vars[w.index.at(p_name + ".w")], vars[w.index.at(p_name + ".b")]);
  return ad::broadcast_spatial(z, h, wd);
}

template <typename T>
Tensor<T> embed_planes(const ModelWeights<T>& w, const ScanParams& p, Sequence branch, int level) {
  Graph<T> g;
  const auto vars = bind(g, w);
  return embed_params<T>(g, w, vars, p, branch, level).value();
}

template <typename T>
Var<T> forward(Graph<T>& g, const ModelWeights<T>& w, std::span<const Var<T>> vars, std::span<const Var<T>, 3> inputs,
               const std::array<ScanParams, 3>& params) {
  const auto& cfg = w.config;
  if (vars.size() != w.tensors.size()) throw ShapeError("forward: weight bindings do not match the model");
  auto V = [&](const std::string& name) { return vars[w.index.at(name)]; };
  auto conv = [&](Var<T> x, const std::string& name, int pad) {
    return ad::conv2d(x, V(name + ".w"), V(name + ".b"), 1, pad);
  };
  for (std::size_t b = 0; b < 3; ++b) {
    const auto& s = inputs[b].shape();
    if (s.size() != 3 || s[0] != 1 || s[1] != cfg.height || s[2] != cfg.width) {
      throw ShapeError("forward: input " + std::to_string(b) + " has shape " + ad::to_string(s) + ", model expects [1," +
                       std::to_string(cfg.height) + "," + std::to_string(cfg.width) + "]");
    }
  }
  const int L = cfg.levels;
  std::array<std::vector<Var<T>>, 3> skips;
  std::array<Var<T>, 3> deepest;
  for (std::size_t b = 0; b < 3; ++b) {
    const Sequence s = kSequences[b];
    const std::string br = branch_name(s);
    Var<T> x = inputs[b];
    for (int l = 0; l < L; ++l) {
      const std::string p = br + "." + lvl("enc", l);
      x = ad::relu(conv(x, p + ".conv1", 1));
      x = ad::relu(conv(x, p + ".conv2", 1));
      const std::array<Var<T>, 2> parts{x, embed_params<T>(g, w, vars, params[b], s, l)};
      x = ad::concat_channels<T>(parts);
      x = ad::relu(conv(x, p + ".fuse1", 0));
      x = ad::relu(conv(x, p + ".fuse2", 0));
      skips[b].push_back(x);
      x = ad::maxpool2(x);
    }
    deepest[b] = x;
  }
  Var<T> d = ad::concat_channels<T>(deepest);
  d = ad::relu(conv(d, "bottleneck.conv1", 1));
  d = ad::relu(conv(d, "bottleneck.conv2", 1));
  for (int l = L - 1; l >= 0; --l) {
    const auto i = static_cast<std::size_t>(l);
    const std::array<Var<T>, 4> parts{ad::upsample_nearest2(d), skips[0][i], skips[1][i], skips[2][i]};
    d = ad::concat_channels<T>(parts);
    d = ad::relu(conv(d, lvl("dec", l) + ".conv1", 1));
    d = ad::relu(conv(d, lvl("dec", l) + ".conv2", 1));
  }
  return conv(d, "head", 0);
}

template <typename T>
Tensor<T> predict(const ModelWeights<T>& w, const std::array<Tensor<T>, 3>& inputs,
                  const std::array<ScanParams, 3>& params) {
  Graph<T> g;
  const auto vars = bind(g, w);
  const std::array<Var<T>, 3> in{g.constant(inputs[0]), g.constant(inputs[1]), g.constant(inputs[2])};
  return forward<T>(g, w, vars, in, params).value();
}

template <typename T>
Var<T> loss_total(Var<T> pred, Var<T> target, Var<T> mask, const LossConfig& loss) {
  loss.validate();
  auto per_map = ad::masked_mse_per_channel(pred, target, mask);
  return ad::weighted_sum(per_map, std::vector<T>{static_cast<T>(loss.lambda_t1), static_cast<T>(loss.lambda_t2),
                                                  static_cast<T>(loss.lambda_pd)});
}

double loss_value(const Tensor<float>& pred, const Tensor<float>& target, const Tensor<float>& mask,
                  const LossConfig& loss) {
  Graph<float> g;
  return loss_total(g.constant(pred), g.constant(target), g.constant(mask), loss).value().data[0];
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr const char* kFormat = "qmri-checkpoint";
constexpr int kFormatVersion = 1;

Image row_image(const std::vector<float>& v) {
  Image img(1, v.size());
  img.data = v;
  return img;
}

json score_json(double v) {
  if (std::isinf(v)) return v > 0 ? json("inf") : json("-inf");
  return v;
}

double score_from(const json& j) {
  if (j.is_string()) {
    const auto s = j.get<std::string>();
    if (s == "inf") return std::numeric_limits<double>::infinity();
    if (s == "-inf") return -std::numeric_limits<double>::infinity();
  }
  return j.get<double>();
}

}  // namespace

void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& ckpt) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError(dir.string(), "cannot create directory: " + ec.message());

  const std::size_t n = ckpt.weights.parameter_count();
  io::QmapFile file;
  file.add("params", row_image(ckpt.weights.flatten()));
  const bool resumable = !ckpt.last_params.empty();
  if (resumable) {
    if (ckpt.last_params.size() != n || ckpt.adam_m.size() != n || ckpt.adam_v.size() != n) {
      throw ShapeError("checkpoint: optimizer state does not match the parameter count");
    }
    file.add("last_params", row_image(ckpt.last_params));
    file.add("adam_m", row_image(ckpt.adam_m));
    file.add("adam_v", row_image(ckpt.adam_v));
  }
  const auto bytes = io::encode_qmap(file);

  const auto& s = ckpt.state;
  json j{{"format", kFormat},
         {"version", kFormatVersion},
         {"model", to_json(ckpt.weights.config)},
         {"model_hash", ckpt.weights.config.hash()},
         {"parameter_count", n},
         {"loss", to_json(ckpt.loss)},
         {"train", ckpt.train},
         {"preprocess", ckpt.preprocess},
         {"preprocess_hash", ckpt.preprocess_hash},
         {"state",
          {{"epoch", s.epoch},
           {"adam_step", s.adam_step},
           {"best_epoch", s.best_epoch},
           {"epochs_since_best", s.epochs_since_best},
           {"best_score", score_json(s.best_score)},
           {"has_best", s.has_best}}},
         {"resumable", resumable},
         {"weights_checksum", io::hex64(io::fnv1a(bytes.data(), bytes.size()))}};
  j["checksum"] = io::hex64(io::fnv1a(j.dump()));
  io::write_bytes(dir / "weights.qmap", bytes);
  io::write_text(dir / "model.json", j.dump(2) + "\n");
}

Checkpoint load_checkpoint(const std::filesystem::path& dir, const ModelConfig* expected) {
  json j;
  const std::string text = io::read_text(dir / "model.json");
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    const auto kind = e.byte >= text.size() ? FormatError::Kind::Truncated : FormatError::Kind::Schema;
    throw FormatError(kind, (dir / "model.json").string() + ": " + e.what());
  }
  {
    json body = j;
    const auto it = body.find("checksum");
    if (!body.is_object() || it == body.end() || !it->is_string()) {
      throw FormatError(FormatError::Kind::Schema, (dir / "model.json").string() + ": missing checksum");
    }
    const std::string stored = it->get<std::string>();
    body.erase("checksum");
    if (io::hex64(io::fnv1a(body.dump())) != stored) {
      throw FormatError(FormatError::Kind::Corrupt, (dir / "model.json").string() + ": checksum mismatch");
    }
  }
  Checkpoint ckpt;
  ModelConfig cfg;
  std::string checksum;
  bool resumable = false;
  std::size_t n = 0;
  try {
    if (j.at("format").get<std::string>() != kFormat) {
      throw FormatError(FormatError::Kind::Schema, (dir / "model.json").string() + ": not a checkpoint");
    }
    if (j.at("version").get<int>() != kFormatVersion) {
      throw FormatError(FormatError::Kind::UnsupportedVersion,
                        (dir / "model.json").string() + ": unsupported checkpoint version " + j.at("version").dump());
    }
    cfg = model_config_from_json(j.at("model"));
    if (j.at("model_hash").get<std::string>() != cfg.hash()) {
      throw FormatError(FormatError::Kind::Corrupt, (dir / "model.json").string() + ": model hash does not match config");
    }
    n = j.at("parameter_count").get<std::size_t>();
    ckpt.loss = loss_config_from_json(j.at("loss"));
    ckpt.train = j.at("train");
    ckpt.preprocess = j.at("preprocess");
    ckpt.preprocess_hash = j.at("preprocess_hash").get<std::string>();
    const auto& s = j.at("state");
    ckpt.state.epoch = s.at("epoch").get<int>();
    ckpt.state.adam_step = s.at("adam_step").get<std::int64_t>();
    ckpt.state.best_epoch = s.at("best_epoch").get<int>();
    ckpt.state.epochs_since_best = s.at("epochs_since_best").get<int>();
    ckpt.state.best_score = score_from(s.at("best_score"));
    ckpt.state.has_best = s.at("has_best").get<bool>();
    resumable = j.at("resumable").get<bool>();
    checksum = j.at("weights_checksum").get<std::string>();
  } catch (const json::exception& e) {
    throw FormatError(FormatError::Kind::Schema, (dir / "model.json").string() + ": " + e.what());
  } catch (const InvalidArgument& e) {
    throw FormatError(FormatError::Kind::Schema, (dir / "model.json").string() + ": " + e.what());
  }
  if (expected && expected->hash() != cfg.hash()) {
    throw CompatError("checkpoint " + dir.string() + " was built for model config " + cfg.hash() + ", expected " +
                      expected->hash());
  }

  const auto bytes = io::read_bytes(dir / "weights.qmap");
  io::QmapFile file;
  try {
    file = io::decode_qmap(bytes);
  } catch (const FormatError& e) {
    throw FormatError(e.kind(), (dir / "weights.qmap").string() + ": " + e.what());
  }
  if (io::hex64(io::fnv1a(bytes.data(), bytes.size())) != checksum) {
    throw FormatError(FormatError::Kind::Corrupt, (dir / "weights.qmap").string() + ": checksum mismatch");
  }
  ckpt.weights = empty_weights<float>(cfg);
  if (ckpt.weights.parameter_count() != n) {
    throw FormatError(FormatError::Kind::Schema, dir.string() + ": parameter count does not match the model layout");
  }
  auto flat = [&](const char* name) {
    if (!file.has(name)) throw FormatError(FormatError::Kind::Schema, dir.string() + ": missing array " + name);
    const Image& img = file.channel(name);
    if (img.height != 1 || img.width != n) {
      throw FormatError(FormatError::Kind::Schema, dir.string() + ": array " + name + " has the wrong size");
    }
    return img.data;
  };
  ckpt.weights.assign(flat("params"));
  if (resumable) {
    ckpt.last_params = flat("last_params");
    ckpt.adam_m = flat("adam_m");
    ckpt.adam_v = flat("adam_v");
  }
  return ckpt;
}

#define QMRI_MODEL_INSTANTIATE(T)                                                                                 \
  template struct ModelWeights<T>;                                                                                \
  template ModelWeights<T> init_weights<T>(const ModelConfig&, std::uint64_t);                                    \
  template ModelWeights<T> empty_weights<T>(const ModelConfig&);                                                  \
  template std::vector<Var<T>> bind<T>(Graph<T>&, const ModelWeights<T>&);                                        \
  template Var<T> embed_params<T>(Graph<T>&, const ModelWeights<T>&, std::span<const Var<T>>, const ScanParams&, \
                                  Sequence, int);                                                                 \
  template Tensor<T> embed_planes<T>(const ModelWeights<T>&, const ScanParams&, Sequence, int);                   \
  template Var<T> forward<T>(Graph<T>&, const ModelWeights<T>&, std::span<const Var<T>>,                          \
                             std::span<const Var<T>, 3>, const std::array<ScanParams, 3>&);                       \
  template Tensor<T> predict<T>(const ModelWeights<T>&, const std::array<Tensor<T>, 3>&,                          \
                                const std::array<ScanParams, 3>&);                                                \
  template Var<T> loss_total<T>(Var<T>, Var<T>, Var<T>, const LossConfig&);

QMRI_MODEL_INSTANTIATE(float)
QMRI_MODEL_INSTANTIATE(double)

}  // namespace qmri::model
