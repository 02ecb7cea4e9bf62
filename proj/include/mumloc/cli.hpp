#ifndef MUMLOC_CLI_HPP
#define MUMLOC_CLI_HPP

#include <cstdio>
#include <functional>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "mumloc/error.hpp"
#include "mumloc/evaluation.hpp"
#include "mumloc/io.hpp"
#include "mumloc/parallel.hpp"
#include "mumloc/psf.hpp"
#include "mumloc/simulator.hpp"
#include "mumloc/solver.hpp"

namespace mumloc::cli {

inline constexpr int kFormatVersion = 1;
inline constexpr const char* kDatasetFormat = "mumloc-dataset-1";
inline constexpr const char* kResultFormat = "mumloc-result-1";

enum class DetectMode { Threshold, Top1 };

struct EvalConfig {
  DetectMode detect = DetectMode::Threshold;
  double threshold = kThresholdSimulated;
  double bin_width = 100.0;  ///< nm
  double depth_min = 0.0;    ///< nm
  double depth_max = 1200.0; ///< nm
};

/// Everything a pipeline stage needs, merged from preset, config file and
/// --set overrides. Thread count is a run-time flag and not part of it.
struct RunConfig {
  std::uint64_t seed = 1;
  SimulationConfig sim;
  SolverConfig solver;
  MatchConfig match;
  EvalConfig eval;
};

inline Json to_json(const RunConfig& c) {
  return {{"format_version", kFormatVersion},
          {"seed", c.seed},
          {"grid", mumloc::to_json(c.sim.grid)},
          {"psf", mumloc::to_json(c.sim.psf)},
          {"noise", mumloc::to_json(c.sim.noise)},
          {"scene", mumloc::to_json(c.sim.scene)},
          {"helix", mumloc::to_json(c.sim.helix)},
          {"simulation",
           {{"mode", to_string(c.sim.mode)},
            {"frames", c.sim.frames},
            {"batches", c.sim.batches},
            {"drift_range", c.sim.drift_range}}},
          {"solver", mumloc::to_json(c.solver)},
          {"match", mumloc::to_json(c.match)},
          {"evaluation",
           {{"detect", c.eval.detect == DetectMode::Top1 ? "top1" : "threshold"},
            {"threshold", c.eval.threshold},
            {"bin_width_nm", c.eval.bin_width},
            {"depth_min_nm", c.eval.depth_min},
            {"depth_max_nm", c.eval.depth_max}}}};
}

/// Strict parse: format_version must be present and equal kFormatVersion,
/// and every key must be known. Absent keys keep their defaults.
inline RunConfig run_config_from_json(const Json& j) {
  RunConfig c;
  ObjectReader r(j, "");
  int version = 0;
  r.require("format_version", version);
  if (version != kFormatVersion) {
    throw Error(ErrorKind::ConfigError, "format_version " + std::to_string(version) + " is not supported (expected " +
                                            std::to_string(kFormatVersion) + ")");
  }
  r.get("seed", c.seed);
  if (const Json* s = r.child("grid")) from_json(*s, c.sim.grid);
  if (const Json* s = r.child("psf")) from_json(*s, c.sim.psf);
  if (const Json* s = r.child("noise")) from_json(*s, c.sim.noise);
  if (const Json* s = r.child("scene")) from_json(*s, c.sim.scene);
  if (const Json* s = r.child("helix")) from_json(*s, c.sim.helix);
  if (const Json* s = r.child("simulation")) {
    ObjectReader sr(*s, "simulation");
    std::string mode = to_string(c.sim.mode);
    if (sr.get("mode", mode)) c.sim.mode = scene_mode_from_string(mode);
    sr.get("frames", c.sim.frames);
    sr.get("batches", c.sim.batches);
    sr.get("drift_range", c.sim.drift_range);
    sr.finish();
  }
  if (const Json* s = r.child("solver")) from_json(*s, c.solver);
  if (const Json* s = r.child("match")) from_json(*s, c.match);
  if (const Json* s = r.child("evaluation")) {
    ObjectReader er(*s, "evaluation");
    std::string detect = c.eval.detect == DetectMode::Top1 ? "top1" : "threshold";
    if (er.get("detect", detect)) {
      if (detect == "top1") c.eval.detect = DetectMode::Top1;
      else if (detect == "threshold") c.eval.detect = DetectMode::Threshold;
      else throw Error(ErrorKind::ConfigError, "evaluation.detect must be threshold or top1");
    }
    er.get("threshold", c.eval.threshold);
    er.get("bin_width_nm", c.eval.bin_width);
    er.get("depth_min_nm", c.eval.depth_min);
    er.get("depth_max_nm", c.eval.depth_max);
    er.finish();
  }
  r.finish();
  validate(c.sim);
  validate(c.solver);
  validate(c.match);
  if (!(c.eval.threshold >= 0.0)) throw Error(ErrorKind::ConfigError, "evaluation.threshold must be >= 0");
  uniform_bins(c.eval.depth_min, c.eval.depth_max, c.eval.bin_width);
  return c;
}

/// Named starting points.
///   full:            16x16x4 frames, K = 3, drifts in [-2, 2], default noise
///   single-molecule: K = 1, noiseless, for drift-recovery checks
///   sweep:           one molecule per frame stratified over depth, top-1 scoring
///   helix:           300 frames of three molecules on the default helix
inline RunConfig preset(const std::string& name) {
  RunConfig c;
  c.sim.scene.volume = {c.sim.grid.extent().x, c.sim.grid.extent().y, 1200.0};
  if (name == "full" || name == "default") return c;
  if (name == "single-molecule") {
    c.sim.scene.molecules = 1;
    c.sim.noise = NoiseConfig::noiseless();
    c.solver.lambda_rel = 0.01;
    return c;
  }
  if (name == "sweep") {
    c.sim.mode = SceneMode::Sweep;
    c.sim.scene.molecules = 1;
    c.sim.frames = 10;
    c.sim.batches = 50;
    c.eval.detect = DetectMode::Top1;
    return c;
  }
  if (name == "helix") {
    c.sim.mode = SceneMode::Helix;
    c.sim.frames = 10;
    c.sim.batches = 30;
    return c;
  }
  throw Error(ErrorKind::ConfigError, "unknown preset '" + name + "' (full|single-molecule|sweep|helix)");
}

/// Applies "a.b.c=value"; value is read as JSON when it parses, otherwise
/// as a string. Unknown paths are caught later by the strict parse.
inline void apply_set(Json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw Error(ErrorKind::ConfigError, "--set expects key.path=value, got '" + assignment + "'");
  }
  const std::string path = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  Json value;
  try {
    value = Json::parse(text);
  } catch (const Json::parse_error&) {
    value = text;
  }
  Json* node = &j;
  std::size_t start = 0;
  for (;;) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) throw Error(ErrorKind::ConfigError, "--set: empty key in '" + path + "'");
    if (!node->is_object()) throw Error(ErrorKind::ConfigError, "--set: '" + path + "' descends into a non-object");
    if (dot == std::string::npos) {
      (*node)[key] = value;
      return;
    }
    node = &(*node)[key];
    if (node->is_null()) *node = Json::object();
    start = dot + 1;
  }
}

/// Deep merge: objects merge key by key, everything else is replaced.
inline void merge_into(Json& base, const Json& over) {
  if (!base.is_object() || !over.is_object()) {
    base = over;
    return;
  }
  for (const auto& [k, v] : over.items()) {
    if (base.contains(k)) merge_into(base[k], v);
    else base[k] = v;
  }
}

inline RunConfig load_run_config(const std::string& preset_name, const std::string& config_path,
                                 const std::vector<std::string>& sets, const Json* base = nullptr) {
  Json j = base ? *base : to_json(preset(preset_name.empty() ? "full" : preset_name));
  if (!config_path.empty()) {
    const Json file = read_json(config_path);
    if (!file.is_object() || !file.contains("format_version")) {
      throw Error(ErrorKind::ConfigError, config_path + ": format_version is required");
    }
    merge_into(j, file);
  }
  for (const auto& s : sets) apply_set(j, s);
  return run_config_from_json(j);
}

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

inline std::string frame_name(std::size_t t) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "frame_%05zu", t);
  return buf;
}

inline std::string batch_name(std::size_t b) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "batch_%03zu", b);
  return buf;
}

/// Writes frames/, ground_truth.csv and manifest.json into `dir`.
inline Json simulate_to_dir(const RunConfig& cfg, const fs::path& dir, int threads) {
  const Dataset ds = generate_dataset(cfg.sim, cfg.seed, threads);
  Json files = Json::array();
  for (std::size_t t = 0; t < ds.frames.size(); ++t) {
    const fs::path base = dir / "frames" / frame_name(t);
    write_image(base, ds.frames[t].image, ds.batch_drifts[std::size_t(ds.frames[t].batch)]);
    fs::path raw = base;
    raw += ".f32";
    files.push_back({{"name", "frames/" + frame_name(t)}, {"batch", ds.frames[t].batch}, {"hash", file_hash(raw)}});
  }
  write_text(dir / "ground_truth.csv", ground_truth_csv(ds));
  Json drifts = Json::array();
  for (const auto& d : ds.batch_drifts) drifts.push_back(mumloc::to_json(d));
  Json manifest{{"format_version", kDatasetFormat},
                {"seed", cfg.seed},
                {"config", to_json(cfg)},
                {"frames", files},
                {"batch_drifts", drifts},
                {"ground_truth", {{"file", "ground_truth.csv"}, {"hash", file_hash(dir / "ground_truth.csv")}}}};
  write_json(dir / "manifest.json", manifest);
  return manifest;
}

struct LoadedDataset {
  RunConfig config;
  Json manifest;
  std::vector<LowResImage> images;
  std::vector<int> batch_of;
  std::vector<DriftSet> batch_drifts;
  std::vector<Scene> truth;
};

inline LoadedDataset load_dataset(const fs::path& dir) {
  LoadedDataset d;
  d.manifest = read_json(dir / "manifest.json");
  if (d.manifest.value("format_version", "") != kDatasetFormat) {
    throw Error(ErrorKind::ParseError, (dir / "manifest.json").string() + ": not a dataset manifest");
  }
  d.config = run_config_from_json(d.manifest.at("config"));
  for (const auto& f : d.manifest.at("frames")) {
    const fs::path base = dir / f.at("name").get<std::string>();
    fs::path raw = base;
    raw += ".f32";
    if (file_hash(raw) != f.at("hash").get<std::string>()) {
      throw Error(ErrorKind::ParseError, raw.string() + ": content does not match the manifest hash");
    }
    d.images.push_back(read_image(base, d.config.sim.grid));
    d.batch_of.push_back(f.at("batch").get<int>());
  }
  for (const auto& b : d.manifest.at("batch_drifts")) d.batch_drifts.push_back(drifts_from_json(b));
  d.truth = read_ground_truth_csv(dir / "ground_truth.csv", d.images.size());
  return d;
}

struct SolveOptions {
  fs::path dataset;
  fs::path out;
  std::string config_path;
  std::vector<std::string> sets;
  std::string drifts = "estimate";  ///< estimate | zero
  bool resume = false;
  int threads = 1;
  bool progress = true;  ///< per-round JSON lines on stderr
  /// Called after every completed round, once its checkpoint is written.
  std::function<void(std::size_t batch, int round)> after_round;
};

/// Solver settings for a dataset: its stored config with the solve-time
/// config file, --set overrides and --drifts applied.
inline RunConfig solve_config(const LoadedDataset& data, const SolveOptions& opt) {
  const Json base = to_json(data.config);
  RunConfig cfg = load_run_config("", opt.config_path, opt.sets, &base);
  if (opt.drifts == "zero") cfg.solver.estimate_drifts = false;
  else if (opt.drifts != "estimate") throw Error(ErrorKind::ConfigError, "--drifts must be zero or estimate");
  cfg.solver.threads = opt.threads;
  return cfg;
}

/// Solves every batch of a dataset. Writes batches/<batch>.json as batches
/// finish, checkpoints/<batch>.json after every round, then weights.csv,
/// manifest.json and timing.json. With `resume`, finished batches are read
/// back and an unfinished one continues from its checkpoint.
inline Json solve_dir(const SolveOptions& opt) {
  const LoadedDataset data = load_dataset(opt.dataset);
  const RunConfig cfg = solve_config(data, opt);
  const GridConfig& grid = cfg.sim.grid;
  const std::size_t nb = data.batch_drifts.size();
  std::vector<std::vector<std::size_t>> members(nb);
  for (std::size_t t = 0; t < data.images.size(); ++t) members[std::size_t(data.batch_of[t])].push_back(t);

  std::vector<SparseWeights> weights(data.images.size());
  Json batches = Json::array();
  Json timing_batches = Json::array();
  for (std::size_t b = 0; b < nb; ++b) {
    const fs::path done = opt.out / "batches" / (batch_name(b) + ".json");
    const fs::path ckpt = opt.out / "checkpoints" / (batch_name(b) + ".json");
    Json rec;
    double seconds = 0.0;
    if (opt.resume && fs::exists(done)) {
      rec = read_json(done);
    } else {
      std::vector<LowResImage> ys;
      for (std::size_t t : members[b]) ys.push_back(data.images[t]);
      std::optional<AlternatingState> resume;
      if (opt.resume && fs::exists(ckpt)) resume = state_from_json(read_json(ckpt));
      const auto on_round = [&](const AlternatingState& st) {
        write_json(ckpt, mumloc::to_json(st));
        if (opt.progress) {
          std::cerr << Json{{"batch", b},
                            {"round", st.round},
                            {"objective", st.objective_trace.back()},
                            {"drifts", mumloc::to_json(st.drifts)}}
                           .dump()
                    << "\n";
        }
        if (opt.after_round) opt.after_round(b, st.round);
      };
      SolveResult res;
      try {
        res = alternating_minimize(ys, cfg.sim.psf, grid, cfg.solver, std::nullopt, on_round, resume);
      } catch (const Error& e) {
        throw Error(e.kind(), "batch " + std::to_string(b) + " (frames " + std::to_string(members[b].front()) + "-" +
                                  std::to_string(members[b].back()) + "): " + e.what());
      }
      seconds = res.wall_seconds;
      Json w = Json::array();
      for (const auto& x : res.weights) w.push_back(mumloc::to_json(x));
      rec = {{"batch", b},
             {"frames", members[b]},
             {"drifts", mumloc::to_json(res.drifts)},
             {"lambda", res.lambda},
             {"objective_trace", res.objective_trace},
             {"inner_iterations", res.inner_iterations},
             {"rounds", res.rounds},
             {"converged", res.converged},
             {"weights", w}};
      write_json(done, rec);
    }
    const auto& w = rec.at("weights");
    for (std::size_t k = 0; k < members[b].size(); ++k) weights[members[b][k]] = sparse_from_json(w.at(k));
    Json summary = rec;
    summary.erase("weights");
    batches.push_back(summary);
    timing_batches.push_back({{"batch", b}, {"frames", members[b].size()}, {"seconds", seconds}});
  }
  write_text(opt.out / "weights.csv", weights_csv(weights));
  Json manifest{{"format_version", kResultFormat},
                {"dataset_manifest_hash", file_hash(opt.dataset / "manifest.json")},
                {"solver", mumloc::to_json(cfg.solver)},
                {"frames", data.images.size()},
                {"batches", batches},
                {"weights", {{"file", "weights.csv"}, {"hash", file_hash(opt.out / "weights.csv")}}}};
  write_json(opt.out / "manifest.json", manifest);
  double total = 0.0;
  for (const auto& t : timing_batches) total += t.at("seconds").get<double>();
  write_json(opt.out / "timing.json", {{"pixels", grid.n_low()},
                                       {"frames", data.images.size()},
                                       {"seconds", total},
                                       {"threads", opt.threads},
                                       {"batches", timing_batches}});
  return manifest;
}

struct EvaluateOptions {
  fs::path dataset;
  fs::path result;
  fs::path out;
  std::string config_path;
  std::vector<std::string> sets;
};

/// Detections per frame, error report, drift accuracy and the merged
/// reconstruction with per-slice PGM exports.
inline Json evaluate_dir(const EvaluateOptions& opt) {
  const LoadedDataset data = load_dataset(opt.dataset);
  const Json base = to_json(data.config);
  const RunConfig cfg = load_run_config("", opt.config_path, opt.sets, &base);
  const GridConfig& grid = cfg.sim.grid;
  const Json result = read_json(opt.result / "manifest.json");
  if (result.value("format_version", "") != kResultFormat) {
    throw Error(ErrorKind::ParseError, (opt.result / "manifest.json").string() + ": not a result manifest");
  }
  const auto weights = read_weights_csv(opt.result / "weights.csv", data.images.size());

  std::vector<std::vector<Detection>> dets(weights.size());
  for (std::size_t t = 0; t < weights.size(); ++t) {
    dets[t] = cfg.eval.detect == DetectMode::Top1 ? top1_detect(weights[t]) : threshold_detect(weights[t], cfg.eval.threshold);
  }

  Matching all;
  if (cfg.eval.detect == DetectMode::Top1) {
    std::vector<Coord3> truth;
    std::vector<std::optional<Coord3>> top;
    for (std::size_t t = 0; t < dets.size(); ++t) {
      const auto vt = voxelized_truth(data.truth[t], grid);
      if (vt.empty()) continue;
      truth.push_back(vt.front());
      top.push_back(dets[t].empty() ? std::nullopt : std::optional<Coord3>(grid.high_center(dets[t].front().voxel)));
    }
    all = match_top1(truth, top);
  } else {
    for (std::size_t t = 0; t < dets.size(); ++t) {
      const auto truth = voxelized_truth(data.truth[t], grid);
      const auto pos = detection_positions(dets[t], grid);
      const Matching m = match_detections(truth, pos, cfg.match);
      const int to = int(all.truth.size()), d0 = int(all.det.size());
      all.truth.insert(all.truth.end(), m.truth.begin(), m.truth.end());
      all.det.insert(all.det.end(), m.det.begin(), m.det.end());
      for (auto p : m.pairs) all.pairs.push_back({p.truth + to, p.det + d0, p.distance});
      for (int i : m.missed) all.missed.push_back(i + to);
      for (int i : m.spurious) all.spurious.push_back(i + d0);
    }
  }
  const auto edges = uniform_bins(cfg.eval.depth_min, cfg.eval.depth_max, cfg.eval.bin_width);
  const ErrorReport rep = per_axis_errors(all, edges);
  write_text(opt.out / "errors.csv", error_report_csv(rep));

  Json drift_eval = Json::array();
  const auto& batches = result.at("batches");
  for (std::size_t b = 0; b < batches.size(); ++b) {
    const DriftSet est = drifts_from_json(batches[b].at("drifts"));
    drift_eval.push_back({{"batch", b},
                          {"true", mumloc::to_json(data.batch_drifts[b])},
                          {"estimated", mumloc::to_json(est)},
                          {"exact", est == data.batch_drifts[b]}});
  }

  const Reconstruction rec = reconstruct(dets, grid);
  std::vector<double> hits(rec.hits.begin(), rec.hits.end());
  write_volume(opt.out / "reconstruction", hits, grid.high_dims, "hits", grid);
  for (int jz = 0; jz < grid.mz(); ++jz) {
    char name[32];
    std::snprintf(name, sizeof name, "slice_%02d.pgm", jz);
    write_pgm(opt.out / "slices" / name, rec.slice_occupancy(jz), grid.mx(), grid.my());
  }

  Json out{{"errors", mumloc::to_json(rep)},
           {"drifts", drift_eval},
           {"reconstruction", {{"occupied_voxels", rec.occupied_count()}, {"hits", rec.total_hits()}}},
           {"match", mumloc::to_json(cfg.match)},
           {"detect", cfg.eval.detect == DetectMode::Top1 ? "top1" : "threshold"}};
  if (cfg.sim.mode == SceneMode::Helix) {
    const HelixScore hs = score_helix(rec, cfg.sim.helix);
    out["helix"] = {{"occupied", hs.occupied},
                    {"occupied_within_one_voxel", hs.occupied_near},
                    {"occupied_fraction", hs.occupied_fraction()},
                    {"hit_fraction", hs.hit_fraction()}};
  }
  write_json(opt.out / "evaluation.json", out);
  return out;
}

/// Throughput table over result directories, written as CSV.
inline TimingReport report_dirs(const std::vector<fs::path>& dirs) {
  std::vector<TimingRun> runs;
  for (const auto& d : dirs) {
    const Json t = read_json(d / "timing.json");
    runs.push_back({d.filename().empty() ? d.parent_path().filename().string() : d.filename().string(),
                    t.at("pixels").get<std::size_t>(), t.at("frames").get<int>(), t.at("seconds").get<double>()});
  }
  return timing_report(runs);
}

// ---------------------------------------------------------------------------
// Command line
// ---------------------------------------------------------------------------

inline void print_error(std::ostream& err, ErrorKind kind, const std::string& message) {
  err << Json{{"error", std::string(to_string(kind))}, {"message", message}, {"exit_code", exit_code(kind)}}.dump()
      << "\n";
}

/// Runs the tool; returns the process exit code. 0 success, 2 config
/// error, 3 data error, 4 numerical failure.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Joint localization and drift estimation for quad-plane microscopy"};
  app.require_subcommand(1);
  int threads = default_threads();
  app.add_option("--threads", threads, "worker threads (default: hardware concurrency)")->check(CLI::PositiveNumber);

  std::string preset_name = "full", config_path, out_path, data_dir, result_dir, samples, init_path, drifts = "estimate";
  std::vector<std::string> sets, result_dirs;
  bool dry_run = false, resume = false, fit_offset = false;

  auto* cal = app.add_subcommand("calibrate", "fit the defocus curve to width samples");
  cal->add_option("--samples", samples, "CSV of depth_nm,width_nm")->required();
  cal->add_option("--init", init_path, "initial PSF parameters (JSON)");
  cal->add_option("--out", out_path, "output PSF parameters (JSON)");
  cal->add_flag("--fit-offset", fit_offset, "also fit a common depth offset");
  cal->add_flag("--dry-run", dry_run, "validate inputs without writing");

  auto* sim = app.add_subcommand("simulate", "generate a synthetic dataset");
  sim->add_option("--preset", preset_name, "full|single-molecule|sweep|helix");
  sim->add_option("--config", config_path, "run config JSON");
  sim->add_option("--set", sets, "dotted override, e.g. scene.molecules=1");
  sim->add_option("--out", out_path, "dataset directory");
  sim->add_flag("--dry-run", dry_run, "print the merged config without writing");

  auto* sol = app.add_subcommand("solve", "estimate weights and drifts for every batch");
  sol->add_option("--data", data_dir, "dataset directory")->required();
  sol->add_option("--out", out_path, "result directory");
  sol->add_option("--config", config_path, "run config JSON overriding the dataset's");
  sol->add_option("--set", sets, "dotted override, e.g. solver.lambda_rel=0.01");
  sol->add_option("--drifts", drifts, "estimate|zero")->check(CLI::IsMember({"estimate", "zero"}));
  sol->add_flag("--resume", resume, "continue from checkpoints in --out");
  sol->add_flag("--dry-run", dry_run, "validate inputs without solving");

  auto* ev = app.add_subcommand("evaluate", "score a result against the dataset ground truth");
  ev->add_option("--data", data_dir, "dataset directory")->required();
  ev->add_option("--result", result_dir, "result directory")->required();
  ev->add_option("--out", out_path, "evaluation directory");
  ev->add_option("--config", config_path, "run config JSON overriding the dataset's");
  ev->add_option("--set", sets, "dotted override, e.g. match.matching=optimal");
  ev->add_flag("--dry-run", dry_run, "validate inputs without writing");

  auto* rep = app.add_subcommand("report", "throughput table over result directories");
  rep->add_option("results", result_dirs, "result directories")->required();
  rep->add_option("--out", out_path, "CSV output (default: standard output)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    print_error(err, ErrorKind::ConfigError, e.what());
    return exit_code(ErrorKind::ConfigError);
  }

  auto need_out = [&](const char* cmd) {
    if (out_path.empty() && !dry_run) throw Error(ErrorKind::ConfigError, std::string(cmd) + ": --out is required");
  };

  try {
    if (*cal) {
      need_out("calibrate");
      PsfParams init;
      if (!init_path.empty()) from_json(read_json(init_path), init, "init");
      const auto s = read_width_csv(samples);
      FitOptions fo;
      fo.fit_depth_offset = fit_offset;
      const FitResult fit = fit_defocus_curve(s, init, fo);
      Json summary{{"params", to_json(fit.params)},
                   {"depth_offset", fit.depth_offset},
                   {"initial_residual_norm", fit.initial_residual_norm},
                   {"residual_norm", fit.residual_norm},
                   {"iterations", fit.iterations},
                   {"samples", s.size()},
                   {"dry_run", dry_run}};
      if (!dry_run) write_json(out_path, to_json(fit.params));
      out << summary.dump() << "\n";
    } else if (*sim) {
      need_out("simulate");
      const RunConfig cfg = load_run_config(preset_name, config_path, sets);
      if (dry_run) {
        out << to_json(cfg).dump(2) << "\n";
      } else {
        const Json m = simulate_to_dir(cfg, out_path, threads);
        out << Json{{"dataset", out_path}, {"frames", m.at("frames").size()}, {"seed", cfg.seed}}.dump() << "\n";
      }
    } else if (*sol) {
      need_out("solve");
      SolveOptions so;
      so.dataset = data_dir;
      so.out = out_path;
      so.config_path = config_path;
      so.sets = sets;
      so.drifts = drifts;
      so.resume = resume;
      so.threads = threads;
      if (dry_run) {
        const LoadedDataset d = load_dataset(so.dataset);
        const RunConfig cfg = solve_config(d, so);
        out << Json{{"frames", d.images.size()}, {"batches", d.batch_drifts.size()}, {"solver", to_json(cfg.solver)}}.dump()
            << "\n";
      } else {
        const Json m = solve_dir(so);
        Json est = Json::array();
        for (const auto& b : m.at("batches")) est.push_back(b.at("drifts"));
        out << Json{{"result", out_path}, {"drifts", est}}.dump() << "\n";
      }
    } else if (*ev) {
      need_out("evaluate");
      EvaluateOptions eo{data_dir, result_dir, out_path, config_path, sets};
      if (dry_run) {
        const LoadedDataset d = load_dataset(eo.dataset);
        read_json(eo.result / "manifest.json");
        out << Json{{"frames", d.images.size()}, {"dry_run", true}}.dump() << "\n";
      } else {
        const Json e = evaluate_dir(eo);
        out << Json{{"evaluation", out_path}, {"jaccard", e.at("errors").at("jaccard")}}.dump() << "\n";
      }
    } else if (*rep) {
      std::vector<fs::path> dirs(result_dirs.begin(), result_dirs.end());
      const TimingReport tr = report_dirs(dirs);
      if (out_path.empty()) out << timing_csv(tr);
      else write_text(out_path, timing_csv(tr));
      out << Json{{"scaling_exponent", tr.exponent ? Json(*tr.exponent) : Json(nullptr)}}.dump() << "\n";
    }
  } catch (const Error& e) {
    print_error(err, e.kind(), e.what());
    return exit_code(e.kind());
  } catch (const fs::filesystem_error& e) {
    print_error(err, ErrorKind::IoError, e.what());
    return exit_code(ErrorKind::IoError);
  } catch (const Json::exception& e) {
    print_error(err, ErrorKind::ParseError, e.what());
    return exit_code(ErrorKind::ParseError);
  }
  return 0;
}

}  // namespace mumloc::cli

#endif  // MUMLOC_CLI_HPP
