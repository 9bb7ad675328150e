#include "qmri/config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <charconv>
#include <functional>
#include <set>
#include <sstream>
#include <vector>

#include "qmri/dataio.hpp"

namespace qmri::config {

namespace {

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const char* expected) {
  throw ConfigError("config key '" + key + "': expected " + expected + ", got '" + value + "'");
}

double parse_double(const std::string& key, const std::string& raw) {
  const std::string v = trim(raw);
  double out = 0.0;
  const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || res.ec != std::errc() || res.ptr != v.data() + v.size()) bad_value(key, raw, "a number");
  return out;
}

template <typename I>
I parse_int(const std::string& key, const std::string& raw) {
  const std::string v = trim(raw);
  I out{};
  const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || res.ec != std::errc() || res.ptr != v.data() + v.size()) bad_value(key, raw, "an integer");
  return out;
}

bool parse_bool(const std::string& key, const std::string& raw) {
  const std::string v = trim(raw);
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  bad_value(key, raw, "true or false");
}

struct Field {
  std::string section;  // empty: top level
  std::string key;
  std::function<std::string()> get;
  std::function<void(const std::string&)> set;
};

std::vector<Field> fields(PipelineConfig& c) {
  std::vector<Field> f;
  auto num = [&f](std::string sec, std::string key, double& ref) {
    const std::string full = sec.empty() ? key : sec + "." + key;
    f.push_back({sec, key, [&ref] { return format_double(ref); },
                 [&ref, full](const std::string& v) { ref = parse_double(full, v); }});
  };
  auto integer = [&f](std::string sec, std::string key, auto& ref) {
    using I = std::remove_reference_t<decltype(ref)>;
    const std::string full = sec.empty() ? key : sec + "." + key;
    f.push_back({sec, key, [&ref] { return std::to_string(ref); },
                 [&ref, full](const std::string& v) { ref = parse_int<I>(full, v); }});
  };
  auto flag = [&f](std::string sec, std::string key, bool& ref) {
    const std::string full = sec.empty() ? key : sec + "." + key;
    f.push_back({sec, key, [&ref] { return std::string(ref ? "true" : "false"); },
                 [&ref, full](const std::string& v) { ref = parse_bool(full, v); }});
  };
  auto text = [&f](std::string sec, std::string key, std::string& ref) {
    f.push_back({sec, key, [&ref] { return ref; }, [&ref](const std::string& v) { ref = trim(v); }});
  };

  integer("", "seed", c.seed);

  integer("phantom", "height", c.phantom.height);
  integer("phantom", "width", c.phantom.width);
  integer("phantom", "n_train", c.n_train);
  integer("phantom", "n_test", c.n_test);
  num("phantom", "lesion_probability", c.phantom.lesion_probability);
  integer("phantom", "max_lesions", c.phantom.max_lesions);
  flag("phantom", "jitter_tissues", c.phantom.jitter_tissues);
  const std::pair<const char*, TissueProperties*> tissues[] = {{"wm", &c.phantom.tissues.wm},
                                                               {"gm", &c.phantom.tissues.gm},
                                                               {"csf", &c.phantom.tissues.csf},
                                                               {"lesion", &c.phantom.tissues.lesion}};
  for (const auto& [name, props] : tissues) {
    const std::pair<const char*, TissueStats*> maps[] = {{"t1", &props->t1}, {"t2", &props->t2}, {"pd", &props->pd}};
    for (const auto& [m, stats] : maps) {
      num("phantom", std::string(name) + "_" + m + "_mean", stats->mean);
      num("phantom", std::string(name) + "_" + m + "_std", stats->std);
    }
  }

  const std::pair<const char*, SequenceRanges*> seqs[] = {{"t1w", &c.protocol_ranges.t1w},
                                                          {"t2w", &c.protocol_ranges.t2w},
                                                          {"flair", &c.protocol_ranges.flair}};
  for (const auto& [name, r] : seqs) {
    const std::string n = name;
    num("protocol_ranges", n + "_tr_min", r->tr.min);
    num("protocol_ranges", n + "_tr_max", r->tr.max);
    num("protocol_ranges", n + "_te_min", r->te.min);
    num("protocol_ranges", n + "_te_max", r->te.max);
    if (r->ti) {
      num("protocol_ranges", n + "_ti_min", r->ti->min);
      num("protocol_ranges", n + "_ti_max", r->ti->max);
    }
  }

  integer("preprocess", "crop_height", c.preprocess.crop_height);
  integer("preprocess", "crop_width", c.preprocess.crop_width);
  num("preprocess", "clip_lo", c.preprocess.clip_lo);
  num("preprocess", "clip_hi", c.preprocess.clip_hi);
  num("preprocess", "t1_ref", c.preprocess.t1_ref);
  num("preprocess", "t2_ref", c.preprocess.t2_ref);
  num("preprocess", "noise_sigma", c.noise_sigma);

  integer("model", "levels", c.model.levels);
  integer("model", "base_channels", c.model.base_channels);
  integer("model", "embed_dim", c.model.embed_dim);
  num("model", "tr_ref", c.model.tr_ref);
  num("model", "te_ref", c.model.te_ref);
  num("model", "ti_ref", c.model.ti_ref);
  flag("model", "param_embedding", c.model.param_embedding);

  num("train", "lr", c.train.lr);
  integer("train", "max_epochs", c.train.max_epochs);
  integer("train", "patience", c.train.patience);
  integer("train", "batch_size", c.train.batch_size);
  num("train", "validation_fraction", c.train.validation_fraction);
  flag("train", "augment_flip", c.train.augment_flip);
  flag("train", "augment_zoom", c.train.augment_zoom);
  text("train", "lr_schedule", c.train.lr_schedule);
  num("train", "lambda_t1", c.loss.lambda_t1);
  num("train", "lambda_t2", c.loss.lambda_t2);
  num("train", "lambda_pd", c.loss.lambda_pd);

  num("fit", "t1_min", c.fit.t1_min);
  num("fit", "t1_max", c.fit.t1_max);
  num("fit", "t2_min", c.fit.t2_min);
  num("fit", "t2_max", c.fit.t2_max);
  integer("fit", "n_t1", c.fit.n_t1);
  integer("fit", "n_t2", c.fit.n_t2);
  integer("fit", "max_iterations", c.fit.max_iterations);
  num("fit", "step_tolerance", c.fit.step_tolerance);
  num("fit", "residual_tolerance", c.fit.residual_tolerance);
  num("fit", "damping_init", c.fit.damping_init);
  num("fit", "damping_up", c.fit.damping_up);
  num("fit", "damping_down", c.fit.damping_down);
  integer("fit", "threads", c.threads);

  num("eval", "min_psnr", c.eval.min_psnr);
  num("eval", "min_ssim", c.eval.min_ssim);
  flag("eval", "renders", c.eval.renders);

  text("paths", "work_dir", c.work_dir);
  return f;
}

void sync_derived(PipelineConfig& c) {
  c.model.height = c.preprocess.crop_height;
  c.model.width = c.preprocess.crop_width;
  c.train.seed = c.seed;
  c.fit.prior = c.phantom.tissues;
}

}  // namespace

void PipelineConfig::validate() const {
  try {
    phantom.validate();
    protocol_ranges.validate();
    preprocess.validate();
    model.validate();
    train.validate();
    loss.validate();
    fit.validate();
  } catch (const InvalidArgument& e) {
    throw ConfigError(std::string("invalid configuration: ") + e.what());
  }
  if (n_train == 0 || n_test == 0) throw ConfigError("invalid configuration: phantom.n_train and n_test must be >= 1");
  if (preprocess.crop_height > phantom.height || preprocess.crop_width > phantom.width) {
    throw ConfigError("invalid configuration: crop exceeds the phantom size");
  }
  if (!(noise_sigma >= 0.0)) throw ConfigError("invalid configuration: preprocess.noise_sigma must be >= 0");
  if (threads < 1) throw ConfigError("invalid configuration: fit.threads must be >= 1");
  if (!(eval.min_ssim <= 1.0)) throw ConfigError("invalid configuration: eval.min_ssim must be <= 1");
  if (work_dir.empty()) throw ConfigError("invalid configuration: paths.work_dir is empty");
  if (model.height != preprocess.crop_height || model.width != preprocess.crop_width || train.seed != seed) {
    throw ConfigError("invalid configuration: derived model/train fields out of sync");
  }
}

data::DatasetSpec PipelineConfig::dataset_spec(std::size_t count, std::uint64_t spec_seed) const {
  data::DatasetSpec s;
  s.phantom = phantom;
  s.ranges = protocol_ranges;
  s.preprocess = preprocess;
  s.count = count;
  s.noise_sigma = noise_sigma;
  s.seed = spec_seed;
  return s;
}

PipelineConfig parse_config(const std::string& text) {
  boost::property_tree::ptree pt;
  std::istringstream in(text);
  try {
    boost::property_tree::ini_parser::read_ini(in, pt);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError("config line " + std::to_string(e.line()) + ": " + e.message());
  }
  PipelineConfig cfg;
  auto table = fields(cfg);
  std::set<std::pair<std::string, std::string>> known;
  for (const auto& f : table) known.emplace(f.section, f.key);
  std::set<std::string> sections;
  for (const auto& f : table) sections.insert(f.section);

  for (const auto& [name, node] : pt) {
    if (node.empty()) {
      if (sections.count(name) && !name.empty() && node.data().empty()) continue;  // empty section
      if (!known.count({"", name})) throw ConfigError("unknown config key '" + name + "'");
      continue;
    }
    if (!sections.count(name) || name.empty()) throw ConfigError("unknown config section [" + name + "]");
    for (const auto& [key, leaf] : node) {
      if (!leaf.empty() || !known.count({name, key})) throw ConfigError("unknown config key '" + name + "." + key + "'");
    }
  }
  // Top-level values first, then sections in table order.
  for (auto& f : table) {
    const std::string path = f.section.empty() ? f.key : f.section + "." + f.key;
    const auto child = f.section.empty() ? pt.get_child_optional(boost::property_tree::ptree::path_type(f.key, '\0'))
                                         : pt.get_child_optional(boost::property_tree::ptree::path_type(path, '.'));
    if (child) f.set(child->data());
  }
  sync_derived(cfg);
  cfg.validate();
  return cfg;
}

PipelineConfig load_config(const std::filesystem::path& path) { return parse_config(io::read_text(path)); }

std::string canonical(const PipelineConfig& cfg) {
  PipelineConfig copy = cfg;
  const auto table = fields(copy);
  std::ostringstream os;
  std::string section = "\x01";
  for (const auto& f : table) {
    if (f.section != section) {
      section = f.section;
      if (!section.empty()) os << "\n[" << section << "]\n";
    }
    os << f.key << " = " << f.get() << "\n";
  }
  return os.str();
}

}  // namespace qmri::config
