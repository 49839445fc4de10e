#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "prf/eval.hpp"
#include "prf/threading.hpp"
#include "prf/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace prf;

namespace {

constexpr const char* kVersion = "0.1.0";

std::string utcNow() {
  auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

// One JSON record per command, enough to rerun it bit-for-bit.
json manifestBase(const std::string& command, uint64_t seed) {
  json m;
  m["command"] = command;
  m["seed"] = seed;
  m["version"] = kVersion;
  m["threads"] = ThreadPool::instance().threadCount();
  return m;
}

void writeJsonFile(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path);
  if (!f) throw err("cannot write " + path.string());
  f << j.dump(2) << "\n";
}

struct GenSceneArgs {
  std::string preset, specFile, out;
  int frames = 60, width = 64, height = 64;
  uint64_t seed = 0;
};

int cmdGenScene(const GenSceneArgs& a) {
  if (a.preset.empty() == a.specFile.empty())
    throw err("gen-scene: give exactly one of --preset or --spec");
  scene::SceneSpec spec =
      a.preset.empty() ? scene::loadSceneSpec(a.specFile) : scene::SceneSpec::preset(a.preset);
  scene::generateDataset(spec, a.out, a.frames, a.width, a.height);

  // No timestamps or execution parameters here: two runs with the same inputs
  // must produce byte-identical directory trees.
  json m = manifestBase("gen-scene", a.seed);
  m.erase("threads");
  m["scene"] = spec.name;
  m["frames"] = a.frames;
  m["width"] = a.width;
  m["height"] = a.height;
  m["artifacts"] = {"manifest.json", "scene_spec.json", "frames/"};
  writeJsonFile(fs::path(a.out) / "run_manifest.json", m);
  std::cout << "wrote " << a.frames << " frames of '" << spec.name << "' to " << a.out << "\n";
  return 0;
}

struct TrainArgs {
  std::string data, out, configFile;
  std::vector<std::string> sets;
  int64_t steps = -1, particles = -1;
  int grid = 0;
  int64_t seed = -1;
};

int cmdTrain(const TrainArgs& a) {
  std::string started = utcNow();
  scene::Dataset ds = scene::loadDataset(a.data);
  TrainConfig cfg = a.configFile.empty() ? TrainConfig{} : loadConfigFile(a.configFile);
  if (a.seed >= 0) cfg.seed = static_cast<uint64_t>(a.seed);
  if (a.steps >= 0) cfg.steps = a.steps;
  if (a.particles >= 0) cfg.particles = a.particles;
  if (a.grid > 0) {
    cfg.gridFineNodes = a.grid;
    cfg.gridMidNodes = std::min(cfg.gridMidNodes, a.grid);
    cfg.gridCoarseNodes = std::min(cfg.gridCoarseNodes, a.grid);
  }
  for (const auto& kv : a.sets) {
    auto eq = kv.find('=');
    if (eq == std::string::npos) throw err("--set wants key=value, got '" + kv + "'");
    applyConfigKey(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  validateConfig(cfg);

  Trainer<double> trainer(cfg, ds);
  trainer.run(a.out);

  json m = manifestBase("train", cfg.seed);
  m["dataset"] = fs::absolute(a.data).string();
  m["config"] = serializeConfig(cfg);
  m["started"] = started;
  m["finished"] = utcNow();
  m["artifacts"] = {"config.txt", "loss.csv", "removal_events.csv", "checkpoint.bin"};
  writeJsonFile(fs::path(a.out) / "run_manifest.json", m);
  std::cout << "trained " << cfg.steps << " steps -> " << a.out << "/checkpoint.bin\n";
  return 0;
}

struct RenderArgs {
  std::string checkpoint, data, out;
  int frame = -1;
  std::vector<double> times;
  int samples = 0;
};

int cmdRender(const RenderArgs& a) {
  std::string started = utcNow();
  auto ckpt = readCheckpoint<double>(a.checkpoint);
  Model<double> model = modelFromCheckpoint(ckpt);
  scene::Dataset ds = scene::loadDataset(a.data);
  int frame = a.frame >= 0 ? a.frame : (ds.testIdx.empty() ? 0 : ds.testIdx.front());
  if (frame >= static_cast<int>(ds.frames.size()))
    throw err("render: frame " + std::to_string(frame) + " outside dataset (" +
              std::to_string(ds.frames.size()) + " frames)");
  std::vector<double> times = a.times.empty()
                                  ? std::vector<double>{ds.frames[frame].time}
                                  : a.times;
  for (double t : times)
    if (!(t >= 0.0 && t <= 1.0))
      throw err("render: time " + std::to_string(t) + " outside [0,1]");
  int samples = a.samples > 0 ? a.samples : ckpt.cfg.samplesPerRay;
  std::array<double, 3> bg{1, 1, 1};
  if (!ckpt.cfg.bgWhite) bg = {0, 0, 0};

  fs::create_directories(a.out);
  json artifacts = json::array();
  for (size_t k = 0; k < times.size(); ++k) {
    Image img = renderModelFrame(model, ds, frame, times[k], samples, nullptr, bg);
    char name[32];
    std::snprintf(name, sizeof(name), "render_%04zu.png", k);
    writePng((fs::path(a.out) / name).string(), img);
    artifacts.push_back({{"file", name}, {"frame", frame}, {"time", times[k]}});
  }

  json m = manifestBase("render", ckpt.cfg.seed);
  m["checkpoint"] = fs::absolute(a.checkpoint).string();
  m["dataset"] = fs::absolute(a.data).string();
  m["samples_per_ray"] = samples;
  m["started"] = started;
  m["finished"] = utcNow();
  m["artifacts"] = artifacts;
  writeJsonFile(fs::path(a.out) / "run_manifest.json", m);
  std::cout << "rendered " << times.size() << " frame(s) -> " << a.out << "\n";
  return 0;
}

struct EvalArgs {
  std::string checkpoint, data, out = "eval.json", baseline;
  int resolution = 0;
  double dt = 0;
  std::vector<double> times;
  int samples = 0;
};

int cmdEval(const EvalArgs& a) {
  std::string started = utcNow();
  auto ckpt = readCheckpoint<double>(a.checkpoint);
  Model<double> model = modelFromCheckpoint(ckpt);
  scene::Dataset ds = scene::loadDataset(a.data);

  EvalOptions opt;
  opt.samplesPerRay = a.samples > 0 ? a.samples : ckpt.cfg.samplesPerRay;
  opt.epsAlpha = ckpt.cfg.epsAlpha;
  if (!ckpt.cfg.bgWhite) opt.background = {0, 0, 0};
  if (a.resolution > 0) opt.resolution = a.resolution;
  if (a.dt > 0) opt.dt = a.dt;
  if (!a.times.empty()) opt.times = a.times;
  for (double t : opt.times)
    if (!(t >= 0.0 && t <= 1.0))
      throw err("eval: time " + std::to_string(t) + " outside [0,1]");

  Model<double> baseline;
  const Model<double>* baselinePtr = nullptr;
  if (!a.baseline.empty()) {
    baseline = modelFromCheckpoint(readCheckpoint<double>(a.baseline));
    baselinePtr = &baseline;
  }

  EvalReport rep = evaluate(model, ckpt.step, ds, opt, baselinePtr);
  if (fs::path(a.out).has_parent_path()) fs::create_directories(fs::path(a.out).parent_path());
  std::ofstream f(a.out);
  if (!f) throw err("cannot write " + a.out);
  f << rep.toJson() << "\n";

  json m = manifestBase("eval", ckpt.cfg.seed);
  m["checkpoint"] = fs::absolute(a.checkpoint).string();
  m["dataset"] = fs::absolute(a.data).string();
  m["started"] = started;
  m["finished"] = utcNow();
  m["artifacts"] = {a.out};
  writeJsonFile(a.out + ".manifest.json", m);
  std::cout << "psnr_mean " << rep.psnrMean << "  ssim_mean " << rep.ssimMean;
  if (rep.hasMotionMetrics)
    std::cout << "  mfe " << rep.mfeParticles << " (zero-motion " << rep.mfeZeroMotion << ")";
  std::cout << "  -> " << a.out << "\n";
  return 0;
}

struct ExportArgs {
  std::string checkpoint, what, out;
  double time = 0;
  int samples = 33;
};

int cmdExport(const ExportArgs& a) {
  auto ckpt = readCheckpoint<double>(a.checkpoint);
  Model<double> model = modelFromCheckpoint(ckpt);
  if (fs::path(a.out).has_parent_path()) fs::create_directories(fs::path(a.out).parent_path());

  if (a.what == "trajectories") {
    if (model.kind != "dap") throw err("export trajectories: checkpoint has no particles");
    if (a.samples < 2) throw err("export trajectories: need at least 2 time samples");
    auto ids = model.ps.aliveIndices();
    auto starts = model.ps.aliveStarts();
    std::ofstream f(a.out);
    if (!f) throw err("cannot write " + a.out);
    f << "particle_id,t,x,y,z\n";
    char line[160];
    for (int k = 0; k < a.samples; ++k) {
      double t = static_cast<double>(k) / (a.samples - 1);
      auto pos = motionPositions(model.motion, starts, t);
      for (size_t i = 0; i < ids->size(); ++i) {
        std::snprintf(line, sizeof(line), "%lld,%.10g,%.10g,%.10g,%.10g\n",
                      static_cast<long long>((*ids)[i]), t, pos[i * 3], pos[i * 3 + 1],
                      pos[i * 3 + 2]);
        f << line;
      }
    }
  } else if (a.what == "particles-at-t") {
    if (model.kind != "dap") throw err("export particles-at-t: checkpoint has no particles");
    if (!(a.time >= 0.0 && a.time <= 1.0))
      throw err("export: time " + std::to_string(a.time) + " outside [0,1]");
    auto starts = model.ps.aliveStarts();
    auto pos = motionPositions(model.motion, starts, a.time);
    std::ofstream f(a.out);
    if (!f) throw err("cannot write " + a.out);
    f << "ply\nformat ascii 1.0\nelement vertex " << pos.size() / 3
      << "\nproperty double x\nproperty double y\nproperty double z\nend_header\n";
    char line[120];
    for (size_t i = 0; i * 3 < pos.size(); ++i) {
      std::snprintf(line, sizeof(line), "%.10g %.10g %.10g\n", pos[i * 3], pos[i * 3 + 1],
                    pos[i * 3 + 2]);
      f << line;
    }
  } else {  // static-grid
    std::ofstream f(a.out, std::ios::binary);
    if (!f) throw err("cannot write " + a.out);
    f.write("PRFGRID1", 8);
    int32_t ext[3] = {model.geom.extents.x, model.geom.extents.y, model.geom.extents.z};
    f.write(reinterpret_cast<const char*>(ext), sizeof ext);
    int64_t channels = model.staticG.cols;
    f.write(reinterpret_cast<const char*>(&channels), sizeof channels);
    double box[6] = {model.geom.bbox.min.x, model.geom.bbox.min.y, model.geom.bbox.min.z,
                     model.geom.bbox.max.x, model.geom.bbox.max.y, model.geom.bbox.max.z};
    f.write(reinterpret_cast<const char*>(box), sizeof box);
    f.write(reinterpret_cast<const char*>(model.staticG.data.data()),
            static_cast<std::streamsize>(model.staticG.data.size() * sizeof(double)));
  }
  std::cout << "exported " << a.what << " -> " << a.out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"particle radiance field toolkit: synthetic scenes, training, evaluation"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);
  app.fallthrough();
  int threads = 0;
  if (const char* env = std::getenv("PRF_THREADS")) threads = std::atoi(env);
  app.add_option("--threads", threads, "thread cap (0: hardware; never changes results)")
      ->envname("PRF_THREADS");

  GenSceneArgs gen;
  auto* cGen = app.add_subcommand("gen-scene", "generate a synthetic monocular dataset");
  cGen->add_option("--preset", gen.preset, "built-in scene: fall, orbit, bounce");
  cGen->add_option("--spec", gen.specFile, "scene description JSON file");
  cGen->add_option("--out", gen.out, "dataset directory")->required();
  cGen->add_option("--frames", gen.frames, "frame count (default 60)");
  cGen->add_option("--width", gen.width, "image width");
  cGen->add_option("--height", gen.height, "image height");
  cGen->add_option("--seed", gen.seed, "recorded in the manifest");

  TrainArgs train;
  auto* cTrain = app.add_subcommand("train", "train a model on a dataset");
  cTrain->add_option("--data", train.data, "dataset directory")->required();
  cTrain->add_option("--out", train.out, "run directory")->required();
  cTrain->add_option("--config", train.configFile, "key=value config file");
  cTrain->add_option("--seed", train.seed, "override config seed");
  cTrain->add_option("--steps", train.steps, "override step count");
  cTrain->add_option("--particles", train.particles, "override particle count");
  cTrain->add_option("--grid", train.grid, "final grid nodes per axis (earlier stages clamped)");
  cTrain->add_option("--set", train.sets, "extra key=value config overrides")
      ->take_all();

  RenderArgs render;
  auto* cRender = app.add_subcommand("render", "render a checkpoint at a dataset pose");
  cRender->add_option("--checkpoint", render.checkpoint, "checkpoint file")->required();
  cRender->add_option("--data", render.data, "dataset directory (camera poses)")->required();
  cRender->add_option("--out", render.out, "output directory")->required();
  cRender->add_option("--frame", render.frame, "pose frame index (default: first test frame)");
  cRender->add_option("--times", render.times, "times in [0,1] (default: the frame's time)");
  cRender->add_option("--samples", render.samples, "samples per ray (default: from config)");

  EvalArgs eval;
  auto* cEval = app.add_subcommand("eval", "score a checkpoint on held-out views");
  cEval->add_option("--checkpoint", eval.checkpoint, "checkpoint file")->required();
  cEval->add_option("--data", eval.data, "dataset directory")->required();
  cEval->add_option("--out", eval.out, "report file (default eval.json)");
  cEval->add_option("--baseline", eval.baseline, "baseline checkpoint for the motion metric");
  cEval->add_option("--resolution", eval.resolution, "velocity lattice nodes per axis");
  cEval->add_option("--dt", eval.dt, "finite-difference step");
  cEval->add_option("--times", eval.times, "motion protocol times");
  cEval->add_option("--samples", eval.samples, "samples per ray (default: from config)");

  ExportArgs exp;
  auto* cExport = app.add_subcommand("export", "dump model state as CSV/PLY/binary");
  cExport->add_option("--checkpoint", exp.checkpoint, "checkpoint file")->required();
  cExport
      ->add_option("--what", exp.what, "trajectories | particles-at-t | static-grid")
      ->required()
      ->check(CLI::IsMember({"trajectories", "particles-at-t", "static-grid"}));
  cExport->add_option("--out", exp.out, "output file")->required();
  cExport->add_option("--time", exp.time, "sample time for particles-at-t");
  cExport->add_option("--samples", exp.samples, "trajectory time samples");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (threads < 0) throw err("--threads must be >= 0");
    ThreadPool::instance().configure(static_cast<unsigned>(threads));
    if (cGen->parsed()) return cmdGenScene(gen);
    if (cTrain->parsed()) return cmdTrain(train);
    if (cRender->parsed()) return cmdRender(render);
    if (cEval->parsed()) return cmdEval(eval);
    if (cExport->parsed()) return cmdExport(exp);
    return 2;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::runtime_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 1;
  }
}
