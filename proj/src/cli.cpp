#include "qmri/cli.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>

#include "qmri/config.hpp"
#include "qmri/dataio.hpp"
#include "qmri/dataset.hpp"
#include "qmri/error.hpp"
#include "qmri/fit.hpp"
#include "qmri/metrics.hpp"
#include "qmri/train.hpp"

namespace qmri::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

struct Common {
  std::string config_path;
  bool print_config = false;
};

config::PipelineConfig load(const Common& c) {
  return c.config_path.empty() ? config::parse_config("") : config::load_config(c.config_path);
}

Image mask_image(const Mask& m) {
  Image out(m.height, m.width);
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = m.data[i] ? 1.0f : 0.0f;
  return out;
}

double masked_max(const Image& img, const Mask& mask) {
  double mx = 0.0;
  for (std::size_t i = 0; i < img.size(); ++i) {
    if (mask.data[i]) mx = std::max(mx, static_cast<double>(img.data[i]));
  }
  return mx;
}

void render(const fs::path& path, const Image& img, const Mask& mask) {
  io::write_pgm(path, img, 8, 0.0, std::max(masked_max(img, mask), 1e-12));
}

// Map files: QMAP with t1_ms, t2_ms, pd and mask channels plus a JSON sidecar.
void write_maps(const fs::path& dir, const std::string& stem, const ParametricMaps& maps, const json& meta,
                bool renders) {
  io::QmapFile file;
  file.add("t1_ms", maps.t1);
  file.add("t2_ms", maps.t2);
  file.add("pd", maps.pd);
  file.add("mask", mask_image(maps.mask));
  io::write_qmap(dir / (stem + ".qmap"), file);
  io::write_text(dir / (stem + ".json"), meta.dump(2) + "\n");
  if (renders) {
    render(dir / (stem + "_t1.pgm"), maps.t1, maps.mask);
    render(dir / (stem + "_t2.pgm"), maps.t2, maps.mask);
    render(dir / (stem + "_pd.pgm"), maps.pd, maps.mask);
  }
}

// Accepts map files and dataset records (whose targets become the maps).
ParametricMaps read_maps(const fs::path& path, std::vector<RoiDisc>* rois = nullptr) {
  const auto file = io::read_qmap(path);
  if (file.has("t1_ms")) {
    ParametricMaps m;
    m.t1 = file.channel("t1_ms");
    m.t2 = file.channel("t2_ms");
    m.pd = file.channel("pd");
    const Image& mk = file.channel("mask");
    m.mask = Mask(mk.height, mk.width);
    for (std::size_t i = 0; i < mk.size(); ++i) m.mask.data[i] = mk.data[i] != 0.0f;
    m.validate_shapes();
    return m;
  }
  const auto rec = data::read_record(path);
  if (rois) *rois = rec.rois;
  return data::target_maps(rec);
}

std::vector<fs::path> map_files(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError(dir.string(), "not a directory");
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".qmap") out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  if (out.empty()) throw IoError(dir.string(), "no .qmap files found");
  return out;
}

void make_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError(dir.string(), "cannot create directory: " + ec.message());
}

std::string rel(const fs::path& p, const fs::path& base) { return p.lexically_relative(base).generic_string(); }

// ---------------------------------------------------------------------------
// Subcommands

json do_gen(const config::PipelineConfig& cfg, const fs::path& out, std::size_t n, std::uint64_t seed, int threads) {
  const auto spec = cfg.dataset_spec(n, seed);
  data::build_dataset(spec, out, threads);
  return {{"command", "gen"}, {"records", n}, {"seed", seed}, {"preprocess_hash", spec.preprocess.hash()}};
}

json do_train(const config::PipelineConfig& cfg, const fs::path& data_dir, const fs::path& out,
              const std::optional<fs::path>& resume) {
  const auto spec = data::read_dataset_spec(data_dir);
  const auto records = data::load_dataset(data_dir);
  auto mc = cfg.model;
  mc.height = records.front().height();
  mc.width = records.front().width();
  model::TrainOptions opts;
  opts.out_dir = out;
  opts.resume_from = resume;
  const auto res = model::train(records, spec.preprocess, mc, cfg.train, cfg.loss, opts);
  return {{"command", "train"},
          {"seed", cfg.train.seed},
          {"epochs", res.state.epoch},
          {"best_epoch", res.state.best_epoch},
          {"stopped_early", res.stopped_early},
          {"best_psnr", {{"t1", res.best_score.psnr_t1}, {"t2", res.best_score.psnr_t2}, {"pd", res.best_score.psnr_pd}}}};
}

json do_infer(const fs::path& ckpt_dir, const fs::path& in, const fs::path& out, bool renders) {
  const auto ckpt = model::load_checkpoint(ckpt_dir);
  const auto paths = fs::is_directory(in) ? data::list_records(in) : std::vector<fs::path>{in};
  if (paths.empty()) throw IoError(in.string(), "no records found");
  make_dir(out);
  for (const auto& p : paths) {
    const auto rec = data::read_record(p);
    const auto maps = model::infer(ckpt, rec);
    write_maps(out, rec.record_id, maps,
               {{"kind", "maps"}, {"source", "pdpe"}, {"record_id", rec.record_id},
                {"model_hash", ckpt.weights.config.hash()}},
               renders);
  }
  return {{"command", "infer"}, {"records", paths.size()}};
}

json do_fit(const fit::FitOptions& opts, int threads, const fs::path& in, const fs::path& out, bool renders) {
  const auto paths = fs::is_directory(in) ? data::list_records(in) : std::vector<fs::path>{in};
  if (paths.empty()) throw IoError(in.string(), "no records found");
  make_dir(out);
  std::size_t fitted = 0, converged = 0, ill = 0;
  json per = json::array();
  for (const auto& p : paths) {
    const auto rec = data::read_record(p);
    const auto stack = data::raw_inputs(rec);
    const auto r = fit::fit_map(stack, rec.mask, opts, threads);
    fitted += r.fitted;
    converged += r.converged_count;
    ill += r.ill_posed_count;
    per.push_back({{"record_id", rec.record_id},
                   {"fitted", r.fitted},
                   {"converged", r.converged_count},
                   {"ill_posed", r.ill_posed_count}});
    write_maps(out, rec.record_id, r.maps, {{"kind", "maps"}, {"source", "fit"}, {"record_id", rec.record_id}},
               renders);
  }
  const double frac = fitted ? static_cast<double>(converged) / static_cast<double>(fitted) : 0.0;
  json stats{{"command", "fit"},
             {"records", paths.size()},
             {"voxels", fitted},
             {"converged", converged},
             {"ill_posed", ill},
             {"converged_fraction", frac},
             {"non_converged_fraction", fitted ? 1.0 - frac : 0.0}};
  json full = stats;
  full["per_record"] = per;
  io::write_text(out / "fit_stats.json", full.dump(2) + "\n");
  return stats;
}

std::string roi_table(const metrics::MetricsReport& rep) {
  std::ostringstream os;
  os << "tissue\tmap\tpred_mean\tpred_std\tref_mean\tref_std\tn\n";
  const char* names[3] = {"t1_ms", "t2_ms", "pd"};
  for (const auto& t : rep.tissues) {
    for (int m = 0; m < 3; ++m) {
      os << to_string(t.label) << '\t' << names[m] << '\t' << t.pred[m].mean << '\t' << t.pred[m].std << '\t'
         << t.ref[m].mean << '\t' << t.ref[m].std << '\t' << t.pred[m].count << '\n';
    }
  }
  return os.str();
}

metrics::MetricsReport do_eval(const fs::path& pred_dir, const fs::path& ref_dir, const std::optional<fs::path>& rois_path,
                               const fs::path& out, bool renders) {
  std::optional<std::vector<RoiDisc>> fixed;
  if (rois_path) {
    json j;
    try {
      j = json::parse(io::read_text(*rois_path));
      fixed.emplace();
      for (const auto& r : j) fixed->push_back(data::roi_from_json(r));
    } catch (const json::exception& e) {
      throw FormatError(FormatError::Kind::Schema, rois_path->string() + ": " + e.what());
    }
  }
  make_dir(out);
  if (renders) make_dir(out / "renders");
  std::vector<metrics::SliceMetrics> slices;
  std::vector<std::string> rendered;
  for (const auto& pp : map_files(pred_dir)) {
    const auto stem = pp.stem().string();
    const auto rp = ref_dir / pp.filename();
    if (!fs::exists(rp)) throw IoError(rp.string(), "no reference for prediction " + pp.string());
    std::vector<RoiDisc> rec_rois;
    const auto pred = read_maps(pp);
    const auto ref = read_maps(rp, &rec_rois);
    const auto& rois = fixed ? *fixed : rec_rois;
    slices.push_back(metrics::evaluate(pred, ref, rois, stem));
    if (renders) {
      const Image pd_p = metrics::rescale_unit(pred.pd, ref.mask);
      const Image pd_r = metrics::rescale_unit(ref.pd, ref.mask);
      const std::pair<const char*, Image> nse[] = {{"t1", metrics::nse_map(pred.t1, ref.t1, ref.mask)},
                                                   {"t2", metrics::nse_map(pred.t2, ref.t2, ref.mask)},
                                                   {"pd", metrics::nse_map(pd_p, pd_r, ref.mask)}};
      for (const auto& [name, img] : nse) {
        const auto path = out / "renders" / (stem + "_nse_" + name + ".pgm");
        render(path, img, ref.mask);
        rendered.push_back(rel(path, out));
      }
    }
  }
  auto rep = metrics::build_report(std::move(slices));
  rep.renders = std::move(rendered);
  io::write_text(out / "report.json", metrics::to_json(rep).dump(2) + "\n");
  io::write_text(out / "roi_table.tsv", roi_table(rep));
  return rep;
}

json map_summary(const metrics::MetricsReport& rep) {
  json j = metrics::to_json(rep);
  return {{"maps", j.at("maps")}, {"tissues", j.at("tissues")}};
}

int do_repro(const config::PipelineConfig& cfg, const fs::path& work, std::ostream& out) {
  make_dir(work);
  io::write_text(work / "config.ini", config::canonical(cfg));
  const std::uint64_t train_seed = stream_seed(cfg.seed, 1);
  const std::uint64_t test_seed = stream_seed(cfg.seed, 2);
  do_gen(cfg, work / "train_data", cfg.n_train, train_seed, cfg.threads);
  do_gen(cfg, work / "test_data", cfg.n_test, test_seed, cfg.threads);
  const json tr = do_train(cfg, work / "train_data", work / "model", std::nullopt);
  do_infer(work / "model", work / "test_data", work / "pred", cfg.eval.renders);
  const json ft = do_fit(cfg.fit, cfg.threads, work / "test_data", work / "fit", cfg.eval.renders);
  const auto pdpe = do_eval(work / "pred", work / "test_data", std::nullopt, work / "eval_pdpe", cfg.eval.renders);
  const auto fitted = do_eval(work / "fit", work / "test_data", std::nullopt, work / "eval_fit", cfg.eval.renders);

  json failures = json::array();
  const char* names[3] = {"t1", "t2", "pd"};
  for (int m = 0; m < 3; ++m) {
    const double p = pdpe.maps[m].psnr_db.mean;
    const double s = pdpe.maps[m].ssim.mean;
    if (!(p >= cfg.eval.min_psnr)) failures.push_back(std::string(names[m]) + " psnr " + metrics::number_json(p).dump());
    if (!(s >= cfg.eval.min_ssim)) failures.push_back(std::string(names[m]) + " ssim " + metrics::number_json(s).dump());
  }
  const bool passed = failures.empty();
  json report{{"format", "qmri-repro-report"},
              {"version", 1},
              {"config", "config.ini"},
              {"config_hash", io::hex64(io::fnv1a(config::canonical(cfg)))},
              {"seed", cfg.seed},
              {"datasets",
               {{"train", {{"dir", "train_data"}, {"records", cfg.n_train}, {"seed", train_seed}}},
                {"test", {{"dir", "test_data"}, {"records", cfg.n_test}, {"seed", test_seed}}}}},
              {"training",
               {{"checkpoint", "model"},
                {"epochs", tr.at("epochs")},
                {"best_epoch", tr.at("best_epoch")},
                {"stopped_early", tr.at("stopped_early")},
                {"best_psnr", tr.at("best_psnr")}}},
              {"pdpe", {{"maps_dir", "pred"}, {"report", "eval_pdpe/report.json"}, {"summary", map_summary(pdpe)}}},
              {"fit",
               {{"maps_dir", "fit"},
                {"report", "eval_fit/report.json"},
                {"converged_fraction", ft.at("converged_fraction")},
                {"summary", map_summary(fitted)}}},
              {"gate",
               {{"min_psnr", cfg.eval.min_psnr}, {"min_ssim", cfg.eval.min_ssim}, {"passed", passed}, {"failures", failures}}}};
  io::write_text(work / "report.json", report.dump(2) + "\n");
  out << json{{"command", "repro"}, {"report", (work / "report.json").generic_string()}, {"passed", passed}}.dump()
      << "\n";
  return passed ? kOk : kGateFailed;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Quantitative MRI mapping toolkit", "qmri"};
  app.require_subcommand(0, 1);
  app.fallthrough();
  Common common;
  app.add_option("--config", common.config_path, "pipeline config (INI)");
  app.add_flag("--print-config", common.print_config, "print the canonical config and exit");

  auto* gen = app.add_subcommand("gen", "simulate a phantom dataset");
  std::string gen_out;
  std::optional<std::size_t> gen_n;
  std::optional<std::uint64_t> gen_seed;
  std::optional<int> gen_threads;
  gen->add_option("--out", gen_out, "dataset directory")->required();
  gen->add_option("--n", gen_n, "number of records");
  gen->add_option("--seed", gen_seed, "dataset seed");
  gen->add_option("--threads", gen_threads, "worker threads");

  auto* train = app.add_subcommand("train", "train the network");
  std::string train_data, train_out, train_resume;
  std::optional<std::uint64_t> train_seed;
  train->add_option("--data", train_data, "training dataset directory")->required();
  train->add_option("--out", train_out, "checkpoint directory")->required();
  train->add_option("--resume", train_resume, "checkpoint directory to continue from");
  train->add_option("--seed", train_seed, "training seed");

  auto* infer = app.add_subcommand("infer", "predict maps with a checkpoint");
  std::string infer_ckpt, infer_in, infer_out;
  infer->add_option("--ckpt", infer_ckpt, "checkpoint directory")->required();
  infer->add_option("--in", infer_in, "dataset directory or record file")->required();
  infer->add_option("--out", infer_out, "output directory")->required();

  auto* fitc = app.add_subcommand("fit", "voxel-wise least-squares maps");
  std::string fit_in, fit_out;
  std::optional<int> fit_threads, fit_iters;
  fitc->add_option("--in", fit_in, "dataset directory or record file")->required();
  fitc->add_option("--out", fit_out, "output directory")->required();
  fitc->add_option("--threads", fit_threads, "worker threads");
  fitc->add_option("--max-iterations", fit_iters, "iteration cap per voxel");

  auto* eval = app.add_subcommand("eval", "compare predicted and reference maps");
  std::string eval_pred, eval_ref, eval_rois, eval_out;
  eval->add_option("--pred", eval_pred, "predicted maps directory")->required();
  eval->add_option("--ref", eval_ref, "reference maps or dataset directory")->required();
  eval->add_option("--rois", eval_rois, "JSON array of ROI discs");
  eval->add_option("--out", eval_out, "report directory")->required();

  auto* repro = app.add_subcommand("repro", "run the whole pipeline");
  std::string repro_out;
  repro->add_option("--out", repro_out, "work directory (overrides paths.work_dir)");

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, err, err);
    return kConfig;
  }

  try {
    auto cfg = load(common);
    if (common.print_config) {
      out << config::canonical(cfg);
      return kOk;
    }
    if (gen->parsed()) {
      const int threads = gen_threads.value_or(cfg.threads);
      out << do_gen(cfg, gen_out, gen_n.value_or(cfg.n_train), gen_seed.value_or(cfg.seed), threads).dump() << "\n";
    } else if (train->parsed()) {
      if (train_seed) cfg.train.seed = *train_seed;
      std::optional<fs::path> resume;
      if (!train_resume.empty()) resume = train_resume;
      out << do_train(cfg, train_data, train_out, resume).dump() << "\n";
    } else if (infer->parsed()) {
      out << do_infer(infer_ckpt, infer_in, infer_out, true).dump() << "\n";
    } else if (fitc->parsed()) {
      auto opts = cfg.fit;
      if (fit_iters) opts.max_iterations = *fit_iters;
      opts.validate();
      const int threads = fit_threads.value_or(cfg.threads);
      if (threads < 1) throw ConfigError("--threads must be >= 1");
      out << do_fit(opts, threads, fit_in, fit_out, true).dump() << "\n";
    } else if (eval->parsed()) {
      std::optional<fs::path> rois;
      if (!eval_rois.empty()) rois = eval_rois;
      const auto rep = do_eval(eval_pred, eval_ref, rois, eval_out, true);
      out << json{{"command", "eval"}, {"slices", rep.slices.size()}, {"report", (fs::path(eval_out) / "report.json").generic_string()}}
                 .dump()
          << "\n";
    } else if (repro->parsed()) {
      return do_repro(cfg, repro_out.empty() ? fs::path(cfg.work_dir) : fs::path(repro_out), out);
    } else {
      err << app.help();
      return kConfig;
    }
    return kOk;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const InvalidArgument& e) {
    err << "invalid argument: " << e.what() << "\n";
    return kConfig;
  } catch (const IoError& e) {
    err << "i/o error: " << e.what() << "\n";
    return kIo;
  } catch (const FormatError& e) {
    err << "format error: " << e.what() << "\n";
    return kIo;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << "\n";
    return kNumeric;
  } catch (const CompatError& e) {
    err << "incompatible artifacts: " << e.what() << "\n";
    return kCompat;
  } catch (const ShapeError& e) {
    err << "shape mismatch: " << e.what() << "\n";
    return kIo;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kGateFailed;
  }
}

int run(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(args, std::cout, std::cerr);
}

}  // namespace qmri::cli
