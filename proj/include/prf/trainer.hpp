#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "prf/common.hpp"
#include "prf/config.hpp"
#include "prf/grids.hpp"
#include "prf/losses.hpp"
#include "prf/ndiff.hpp"
#include "prf/nets.hpp"
#include "prf/particles.hpp"
#include "prf/radiance.hpp"
#include "prf/rng.hpp"
#include "prf/scene.hpp"

namespace prf {

// base * decay^(step/total): full rate at step 0, base*decay at the last step.
inline double lrDecayFactor(int64_t step, int64_t total, double decay) {
  if (total <= 0) return 1.0;
  return std::pow(decay, static_cast<double>(step) / static_cast<double>(total));
}

// Learnables fall into five rate groups, keyed by tensor name.
enum ParamGroup { kGroupGrids = 0, kGroupFeatures, kGroupStarts, kGroupMotion, kGroupNets };
constexpr int kNumGroups = 5;

inline int groupOf(const std::string& name) {
  if (name.rfind("grid.", 0) == 0) return kGroupGrids;
  if (name == "particles.features") return kGroupFeatures;
  if (name == "particles.starts") return kGroupStarts;
  if (name.rfind("motion.", 0) == 0) return kGroupMotion;
  if (name.rfind("radiance.", 0) == 0) return kGroupNets;
  throw err("groupOf: unknown tensor " + name);
}

template <typename T>
struct AdamSlot {
  std::vector<T> m, v;
};

// Adam with bias correction, epsilon outside the root. Each group carries its
// own step counter so grid moments can restart cleanly after a grid resize.
template <typename T>
struct Adam {
  double beta1 = 0.9, beta2 = 0.99, eps = 1e-8;
  std::vector<AdamSlot<T>> slots;
  std::array<int64_t, kNumGroups> groupStep{};

  void attach(const std::vector<Tensor<T>*>& tensors) {
    slots.resize(tensors.size());
    for (size_t i = 0; i < tensors.size(); ++i) {
      slots[i].m.assign(tensors[i]->size(), T(0));
      slots[i].v.assign(tensors[i]->size(), T(0));
    }
  }

  void update(size_t slot, Tensor<T>& t, const std::vector<T>& grad, double lr,
              int64_t tstep) {
    auto& s = slots[slot];
    if (grad.size() != t.data.size() || s.m.size() != t.data.size())
      throw err("Adam: size mismatch for " + t.name);
    const T b1 = T(beta1), b2 = T(beta2);
    const T bc1 = T(1) - T(std::pow(beta1, static_cast<double>(tstep)));
    const T bc2 = T(1) - T(std::pow(beta2, static_cast<double>(tstep)));
    const T e = T(eps), step = T(lr);
    for (size_t j = 0; j < t.data.size(); ++j) {
      const T gj = grad[j];
      s.m[j] = b1 * s.m[j] + (T(1) - b1) * gj;
      s.v[j] = b2 * s.v[j] + (T(1) - b2) * gj * gj;
      t.data[j] -= step * (s.m[j] / bc1) / (std::sqrt(s.v[j] / bc2) + e);
    }
  }
};

// The whole learnable state. The static grid always exists; particles ride
// along for the full model, while the deformation baseline reuses the motion
// net as a backward warp of sample positions into the canonical grid.
template <typename T>
struct Model {
  std::string kind = "dap";  // dap | deform | static
  FeatureGrid<T> geom;       // geometry only; values stay empty
  Tensor<T> staticG;         // "grid.static" [Nn,C]
  ParticleSystem<T> ps;
  MotionNet<T> motion;
  RadianceNets<T> nets;

  static Model init(const TrainConfig& cfg, const AABB& bbox, Rng& rng) {
    Model m;
    m.kind = cfg.model;
    const int64_t side = cfg.gridCoarseNodes;
    Vec3i ext = shapeFromBbox(bbox, side * side * side);
    m.geom = FeatureGrid<T>::zeros(ext, cfg.channels, bbox);
    m.geom.values.clear();
    m.staticG = Tensor<T>::zeros("grid.static", m.geom.nodeCount(), cfg.channels);
    m.ps = ParticleSystem<T>::init(cfg.model == "dap" ? cfg.particles : 0, cfg.channels,
                                   bbox, rng);
    m.motion = MotionNet<T>::init(cfg.widthMotion, rng);
    m.nets = RadianceNets<T>::init(cfg.channels, cfg.widthRadiance, rng);
    return m;
  }

  std::vector<Tensor<T>*> learnables() {
    std::vector<Tensor<T>*> t = {&staticG};
    if (kind == "dap") {
      t.push_back(&ps.features);
      t.push_back(&ps.starts);
    }
    if (kind != "static")
      for (auto& p : motion.params) t.push_back(&p);
    for (auto& p : nets.params) t.push_back(&p);
    return t;
  }
};

// ---- shared render paths (training eval, validation, CLI) ----

// Deformation-baseline forward: warp sample positions with the motion net,
// fetch canonical features through the point-differentiable sampler, feed the
// warped point to the radiance trunk. Shared by training and evaluation.
template <typename T>
RenderOut<T> renderSamplesWarped(nd::Graph<T>& g, const Model<T>& model,
                                 const std::vector<typename nd::Graph<T>::Ref>& mrefs,
                                 const std::vector<typename nd::Graph<T>::Ref>& nrefs,
                                 typename nd::Graph<T>::Ref staticRef,
                                 const SampleBatch<T>& batch, T t, const std::array<T, 3>& bg) {
  RenderOut<T> out;
  out.weights = std::make_shared<std::vector<T>>();
  const int64_t q = batch.count();
  if (q == 0) {
    std::vector<T> c(batch.rays() * 4);
    for (int64_t i = 0; i < batch.rays(); ++i) {
      c[i * 4] = bg[0];
      c[i * 4 + 1] = bg[1];
      c[i * 4 + 2] = bg[2];
      c[i * 4 + 3] = T(1);
    }
    out.color = g.constant(batch.rays(), 4, c);
    return out;
  }
  auto x = g.constant(q, 3, *batch.points);
  auto warped = g.add(x, model.motion.offsets(g, mrefs, x, t));
  auto fv = g.gridSampleDiff(staticRef, worldToGridRef(g, warped, model.geom),
                             model.geom.extents);
  auto v = model.nets.trunk(g, nrefs, fv, warped);
  out.sigma = model.nets.density(g, nrefs, v);
  out.rgb = model.nets.color(g, nrefs, v, g.constant(q, 3, *batch.dirs));
  out.color = g.renderComposite(out.sigma, out.rgb, batch.deltas, batch.offsets, bg,
                                out.weights.get());
  return out;
}

// [R,4] colors for arbitrary rays at time t, chunked and tape-free.
template <typename T>
std::vector<T> renderModelRays(const Model<T>& model, const std::vector<Vec3>& origins,
                               const std::vector<Vec3>& dirs, double t, int samplesPerRay,
                               const OccupancyMask* occ, const std::array<T, 3>& bg) {
  if (model.kind != "deform") {
    auto vals = superposedFieldValues(model.staticG, model.geom, model.ps, model.motion, T(t));
    return renderRaysEval(vals, model.geom, model.nets, origins, dirs, samplesPerRay, occ, bg);
  }
  const int64_t nRays = static_cast<int64_t>(origins.size());
  std::vector<T> out(nRays * 4);
  const int64_t chunk = 2048;
  for (int64_t r0 = 0; r0 < nRays; r0 += chunk) {
    const int64_t r1 = std::min(nRays, r0 + chunk);
    std::vector<Vec3> o(origins.begin() + r0, origins.begin() + r1);
    std::vector<Vec3> d(dirs.begin() + r0, dirs.begin() + r1);
    auto batch = buildSampleBatch<T>(o, d, model.geom.bbox, samplesPerRay, nullptr);
    nd::Graph<T> g;
    auto mrefs = bindTensors(g, model.motion.params);
    auto nrefs = bindTensors(g, model.nets.params);
    auto staticRef = g.constant(model.staticG.rows, model.staticG.cols, model.staticG.data);
    auto render = renderSamplesWarped(g, model, mrefs, nrefs, staticRef, batch, T(t), bg);
    const auto& cv = g.val(render.color);
    std::copy(cv.begin(), cv.end(), out.begin() + r0 * 4);
  }
  return out;
}

// Full-frame render at a dataset pose; colors clamped to [0,1].
template <typename T>
Image renderModelFrame(const Model<T>& model, const scene::Dataset& ds, int frame, double t,
                       int samplesPerRay, const OccupancyMask* occ,
                       const std::array<T, 3>& bg) {
  std::vector<Vec3> origins, dirs;
  origins.reserve(static_cast<size_t>(ds.width) * ds.height);
  dirs.reserve(origins.capacity());
  for (int y = 0; y < ds.height; ++y)
    for (int x = 0; x < ds.width; ++x) {
      Vec3 o, d;
      ds.pixelRay(frame, x + 0.5, y + 0.5, o, d);
      origins.push_back(o);
      dirs.push_back(d);
    }
  auto colors = renderModelRays(model, origins, dirs, t, samplesPerRay, occ, bg);
  Image img(ds.width, ds.height);
  for (int64_t p = 0; p < static_cast<int64_t>(origins.size()); ++p)
    for (int c = 0; c < 3; ++c)
      img.rgb[p * 3 + c] = clampv(static_cast<double>(colors[p * 4 + c]), 0.0, 1.0);
  return img;
}

// ---- checkpointing ----

template <typename T>
struct CheckpointData {
  TrainConfig cfg;
  std::string kind;
  Vec3i extents;
  int64_t channels = 0;
  AABB bbox;
  std::vector<uint8_t> alive;
  std::vector<Tensor<T>> tensors;
  std::vector<AdamSlot<T>> slots;
  std::array<int64_t, kNumGroups> groupStep{};
  std::array<uint64_t, 4> rngState{};
  OccupancyMask occ;
  int64_t step = 0;
  int64_t consecutiveBad = 0;
};

namespace detail {

template <typename V>
void putRaw(std::ofstream& f, const V& v) {
  f.write(reinterpret_cast<const char*>(&v), sizeof v);
}
template <typename V>
void putVec(std::ofstream& f, const std::vector<V>& v) {
  uint64_t n = v.size();
  putRaw(f, n);
  f.write(reinterpret_cast<const char*>(v.data()), n * sizeof(V));
}
inline void putStr(std::ofstream& f, const std::string& s) {
  uint64_t n = s.size();
  putRaw(f, n);
  f.write(s.data(), n);
}
template <typename V>
void getRaw(std::ifstream& f, V& v) {
  f.read(reinterpret_cast<char*>(&v), sizeof v);
}
template <typename V>
void getVec(std::ifstream& f, std::vector<V>& v) {
  uint64_t n = 0;
  getRaw(f, n);
  v.resize(n);
  f.read(reinterpret_cast<char*>(v.data()), n * sizeof(V));
}
inline void getStr(std::ifstream& f, std::string& s) {
  uint64_t n = 0;
  getRaw(f, n);
  s.resize(n);
  f.read(s.data(), n);
}

}  // namespace detail

template <typename T>
void writeCheckpoint(const std::string& path, const CheckpointData<T>& d) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw err("writeCheckpoint: cannot open " + path);
  f.write("PRFCKPT1", 8);
  uint32_t scalar = sizeof(T);
  detail::putRaw(f, scalar);
  detail::putRaw(f, d.step);
  for (uint64_t w : d.rngState) detail::putRaw(f, w);
  detail::putStr(f, serializeConfig(d.cfg));
  detail::putStr(f, d.kind);
  int32_t ext[3] = {d.extents.x, d.extents.y, d.extents.z};
  f.write(reinterpret_cast<const char*>(ext), sizeof ext);
  detail::putRaw(f, d.channels);
  double box[6] = {d.bbox.min.x, d.bbox.min.y, d.bbox.min.z,
                   d.bbox.max.x, d.bbox.max.y, d.bbox.max.z};
  f.write(reinterpret_cast<const char*>(box), sizeof box);
  detail::putVec(f, d.alive);
  uint64_t k = d.tensors.size();
  detail::putRaw(f, k);
  for (size_t i = 0; i < d.tensors.size(); ++i) {
    const auto& t = d.tensors[i];
    detail::putStr(f, t.name);
    detail::putRaw(f, t.rows);
    detail::putRaw(f, t.cols);
    detail::putVec(f, t.data);
    detail::putVec(f, d.slots[i].m);
    detail::putVec(f, d.slots[i].v);
  }
  for (int64_t s : d.groupStep) detail::putRaw(f, s);
  int32_t oext[3] = {d.occ.extents.x, d.occ.extents.y, d.occ.extents.z};
  f.write(reinterpret_cast<const char*>(oext), sizeof oext);
  detail::putRaw(f, d.occ.epsAlpha);
  detail::putVec(f, d.occ.occupied);
  detail::putRaw(f, d.consecutiveBad);
  if (!f) throw err("writeCheckpoint: write failed for " + path);
}

template <typename T>
CheckpointData<T> readCheckpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw err("readCheckpoint: cannot open " + path);
  char magic[8];
  f.read(magic, 8);
  if (!f || std::memcmp(magic, "PRFCKPT1", 8) != 0) throw err("readCheckpoint: bad magic");
  uint32_t scalar = 0;
  detail::getRaw(f, scalar);
  if (scalar != sizeof(T)) throw err("readCheckpoint: scalar width mismatch");
  CheckpointData<T> d;
  detail::getRaw(f, d.step);
  for (auto& w : d.rngState) detail::getRaw(f, w);
  std::string cfgText;
  detail::getStr(f, cfgText);
  d.cfg = parseConfigText(cfgText);
  detail::getStr(f, d.kind);
  int32_t ext[3];
  f.read(reinterpret_cast<char*>(ext), sizeof ext);
  d.extents = {ext[0], ext[1], ext[2]};
  detail::getRaw(f, d.channels);
  double box[6];
  f.read(reinterpret_cast<char*>(box), sizeof box);
  d.bbox = {{box[0], box[1], box[2]}, {box[3], box[4], box[5]}};
  detail::getVec(f, d.alive);
  uint64_t k = 0;
  detail::getRaw(f, k);
  d.tensors.resize(k);
  d.slots.resize(k);
  for (uint64_t i = 0; i < k; ++i) {
    auto& t = d.tensors[i];
    detail::getStr(f, t.name);
    detail::getRaw(f, t.rows);
    detail::getRaw(f, t.cols);
    detail::getVec(f, t.data);
    detail::getVec(f, d.slots[i].m);
    detail::getVec(f, d.slots[i].v);
  }
  for (auto& s : d.groupStep) detail::getRaw(f, s);
  int32_t oext[3];
  f.read(reinterpret_cast<char*>(oext), sizeof oext);
  d.occ.extents = {oext[0], oext[1], oext[2]};
  detail::getRaw(f, d.occ.epsAlpha);
  detail::getVec(f, d.occ.occupied);
  detail::getRaw(f, d.consecutiveBad);
  if (!f) throw err("readCheckpoint: truncated file");
  return d;
}

// Rebuilds a model from checkpoint tensors (moments ignored); the piece CLI
// render/eval/export need without a dataset.
template <typename T>
Model<T> modelFromCheckpoint(const CheckpointData<T>& d) {
  Model<T> m;
  m.kind = d.kind;
  m.geom = FeatureGrid<T>::zeros(d.extents, d.channels, d.bbox);
  m.geom.values.clear();
  m.motion.width = d.cfg.widthMotion;
  m.nets.width = d.cfg.widthRadiance;
  m.ps.bbox = d.bbox;
  m.ps.alive = d.alive;
  std::map<std::string, const Tensor<T>*> byName;
  for (const auto& t : d.tensors) byName[t.name] = &t;
  auto take = [&](const std::string& name) {
    auto it = byName.find(name);
    if (it == byName.end()) throw err("checkpoint missing tensor " + name);
    return *it->second;
  };
  m.staticG = take("grid.static");
  if (m.kind == "dap") {
    m.ps.features = take("particles.features");
    m.ps.starts = take("particles.starts");
  } else {
    m.ps.features = Tensor<T>::zeros("particles.features", 0, d.channels);
    m.ps.starts = Tensor<T>::zeros("particles.starts", 0, 3);
  }
  if (m.kind != "static") {
    Rng dummy(0);
    m.motion = MotionNet<T>::init(d.cfg.widthMotion, dummy);
    for (auto& p : m.motion.params) p = take(p.name);
  }
  {
    Rng dummy(0);
    m.nets = RadianceNets<T>::init(d.channels, d.cfg.widthRadiance, dummy);
    for (auto& p : m.nets.params) p = take(p.name);
  }
  return m;
}

// ---- the training loop ----

struct StepRecord {
  int64_t step = 0;
  double photo = 0, ptrgb = 0, bg = 0, tvf = 0, tvm = 0, total = 0;
  double lrFactor = 1;
  int64_t alive = 0;
  bool skipped = false;
};

struct RemovalEvent {
  int64_t step = 0;
  int64_t removed = 0;
  int64_t resampled = 0;
};

template <typename T>
class Trainer {
 public:
  Trainer(const TrainConfig& cfg, const scene::Dataset& ds)
      : cfg_(cfg), ds_(&ds), rng_(cfg.seed) {
    validateConfig(cfg);
    if (ds.trainIdx.empty()) throw err("Trainer: dataset has no training frames");
    model_ = Model<T>::init(cfg, ds.bbox, rng_);
    opt_.beta1 = cfg.beta1;
    opt_.beta2 = cfg.beta2;
    opt_.eps = cfg.adamEps;
    opt_.attach(model_.learnables());
    resetOccupancyAllOn();
    bg_ = cfg.bgWhite ? std::array<T, 3>{T(1), T(1), T(1)}
                      : std::array<T, 3>{T(0), T(0), T(0)};
  }

  Model<T>& model() { return model_; }
  const Model<T>& model() const { return model_; }
  const OccupancyMask& occupancy() const { return occ_; }
  int64_t currentStep() const { return step_; }
  const std::vector<RemovalEvent>& removalEvents() const { return removals_; }
  const std::vector<StepRecord>& history() const { return history_; }
  std::array<uint64_t, 4> rngState() const { return rng_.state(); }
  void setRngState(const std::array<uint64_t, 4>& s) { rng_.setState(s); }
  const std::array<T, 3>& background() const { return bg_; }

  // One full step: milestone resize and removal cadence first, then the
  // gradient update. Loss values in the record are pre-update.
  StepRecord step() {
    if (step_ > 0 && (step_ == cfg_.milestone1Step() || step_ == cfg_.milestone2Step()))
      resizeGrid(step_ == cfg_.milestone2Step() ? cfg_.gridFineNodes : cfg_.gridMidNodes);
    if (step_ > 0 && step_ % cfg_.removalCadenceSteps == 0 && model_.kind != "deform")
      removalEvent();
    StepRecord rec = gradientStep();
    rec.step = step_;
    history_.push_back(rec);
    ++step_;
    return rec;
  }

  void run(const std::string& outDir) {
    namespace fs = std::filesystem;
    std::ofstream csv;
    if (!outDir.empty()) {
      fs::create_directories(outDir);
      std::ofstream cfgOut(outDir + "/config.txt");
      cfgOut << serializeConfig(cfg_);
      csv.open(outDir + "/loss.csv");
      csv << "step,L_photo,L_ptrgb,L_bg,L_tvf,L_tvm,total,lr,alive_particles\n";
      csv.precision(10);
    }
    while (step_ < cfg_.steps) {
      StepRecord r = step();
      if (csv && (r.step % cfg_.logEvery == 0 || r.step + 1 == cfg_.steps)) {
        csv << r.step << "," << r.photo << "," << r.ptrgb << "," << r.bg << "," << r.tvf
            << "," << r.tvm << "," << r.total << "," << r.lrFactor << "," << r.alive
            << "\n";
        csv.flush();  // rows stay observable while a long run is in flight
      }
      if (!outDir.empty() && cfg_.checkpointEvery > 0 && r.step > 0 &&
          r.step % cfg_.checkpointEvery == 0)
        save(outDir + "/checkpoint_" + std::to_string(r.step) + ".bin");
      if (!outDir.empty() && cfg_.valEvery > 0 && r.step > 0 &&
          r.step % cfg_.valEvery == 0 && !ds_->testIdx.empty())
        writePng(outDir + "/val_" + std::to_string(r.step) + ".png", renderValFrame());
    }
    if (!outDir.empty()) {
      save(outDir + "/checkpoint.bin");
      std::ofstream rem(outDir + "/removal_events.csv");
      rem << "step,removed,resampled\n";
      for (const auto& e : removals_) rem << e.step << "," << e.removed << "," << e.resampled
                                          << "\n";
    }
  }

  void save(const std::string& path) {
    CheckpointData<T> d;
    d.cfg = cfg_;
    d.kind = model_.kind;
    d.extents = model_.geom.extents;
    d.channels = model_.geom.channels;
    d.bbox = model_.geom.bbox;
    d.alive = model_.ps.alive;
    auto tensors = model_.learnables();
    for (auto* t : tensors) d.tensors.push_back(*t);
    d.slots = opt_.slots;
    d.groupStep = opt_.groupStep;
    d.rngState = rng_.state();
    d.occ = occ_;
    d.step = step_;
    d.consecutiveBad = consecutiveBad_;
    writeCheckpoint(path, d);
  }

  static Trainer load(const std::string& path, const scene::Dataset& ds) {
    CheckpointData<T> d = readCheckpoint<T>(path);
    Trainer tr(d.cfg, ds);
    tr.model_ = modelFromCheckpoint(d);
    tr.opt_.slots = d.slots;
    tr.opt_.groupStep = d.groupStep;
    tr.rng_.setState(d.rngState);
    tr.occ_ = d.occ;
    tr.step_ = d.step;
    tr.consecutiveBad_ = d.consecutiveBad;
    return tr;
  }

  // Validation render of the first held-out frame.
  Image renderValFrame() {
    int frame = ds_->testIdx.front();
    return renderModelFrame(model_, *ds_, frame, ds_->frames[frame].time, cfg_.samplesPerRay,
                            cullingMask(), bg_);
  }

 private:
  const OccupancyMask* cullingMask() const {
    return model_.kind == "deform" ? nullptr : &occ_;
  }

  void resetOccupancyAllOn() {
    occ_.extents = model_.geom.extents;
    occ_.epsAlpha = cfg_.epsAlpha;
    occ_.occupied.assign(model_.geom.nodeCount(), 1);
  }

  void resizeGrid(int nodesPerAxis) {
    const int64_t target = static_cast<int64_t>(nodesPerAxis) * nodesPerAxis * nodesPerAxis;
    Vec3i newExt = shapeFromBbox(model_.geom.bbox, target);
    if (newExt == model_.geom.extents) return;
    FeatureGrid<T> cur;
    cur.extents = model_.geom.extents;
    cur.channels = model_.geom.channels;
    cur.bbox = model_.geom.bbox;
    cur.values = model_.staticG.data;
    FeatureGrid<T> grown = resizeTrilinear(cur, newExt);
    model_.geom.extents = newExt;
    model_.staticG.rows = grown.nodeCount();
    model_.staticG.data = std::move(grown.values);
    // Fresh grid coordinates get fresh moments; only this group restarts.
    opt_.slots[0].m.assign(model_.staticG.size(), T(0));
    opt_.slots[0].v.assign(model_.staticG.size(), T(0));
    opt_.groupStep[kGroupGrids] = 0;
    refreshOccupancy();
  }

  void refreshOccupancy() {
    if (model_.kind == "deform") {
      resetOccupancyAllOn();
      return;
    }
    occ_ = updateOccupancy(model_.staticG, model_.geom, model_.ps, model_.motion, model_.nets,
                           cfg_.epsAlpha);
  }

  void removalEvent() {
    refreshOccupancy();
    if (model_.kind != "dap") return;
    auto removed = removeParticles(model_.ps, model_.motion, occ_.occupied, model_.geom,
                                   cfg_.epsTrajBboxUnits, cfg_.trajSamples);
    const double radius = cfg_.resampleRadiusVoxels * model_.geom.voxelEdge();
    int64_t restored = resampleParticles(model_.ps, removed, radius, rng_);
    // Reborn rows start with clean moments, like any fresh parameter.
    for (int64_t idx : removed) {
      auto zeroRow = [&](size_t slot, int64_t cols) {
        std::fill_n(opt_.slots[slot].m.begin() + idx * cols, cols, T(0));
        std::fill_n(opt_.slots[slot].v.begin() + idx * cols, cols, T(0));
      };
      zeroRow(1, model_.ps.features.cols);
      zeroRow(2, 3);
    }
    removals_.push_back({step_, static_cast<int64_t>(removed.size()), restored});
  }

  StepRecord gradientStep() {
    using Ref = typename nd::Graph<T>::Ref;
    StepRecord rec;
    rec.alive = model_.ps.aliveCount();
    rec.lrFactor = lrDecayFactor(step_, cfg_.steps, cfg_.lrDecay);

    // One frame per step, uniform pixels within it.
    const int frame = ds_->trainIdx[rng_.uniformInt(ds_->trainIdx.size())];
    const double t = ds_->frames[frame].time;
    const Image& img = frameImage(frame);
    const int64_t nRays = cfg_.batchRays;
    std::vector<Vec3> origins(nRays), dirs(nRays);
    std::vector<T> target(nRays * 3);
    for (int64_t r = 0; r < nRays; ++r) {
      int px = static_cast<int>(rng_.uniformInt(ds_->width));
      int py = static_cast<int>(rng_.uniformInt(ds_->height));
      ds_->pixelRay(frame, px + 0.5, py + 0.5, origins[r], dirs[r]);
      for (int c = 0; c < 3; ++c) target[r * 3 + c] = T(img.at(px, py, c));
    }
    auto batch = buildSampleBatch<T>(origins, dirs, model_.geom.bbox, cfg_.samplesPerRay,
                                     &rng_, cullingMask(), &model_.geom);

    nd::Graph<T> g;
    auto tensors = model_.learnables();
    std::vector<Ref> refs;
    refs.reserve(tensors.size());
    for (auto* tns : tensors) refs.push_back(g.leaf(tns->rows, tns->cols, tns->data.data()));
    const Ref staticRef = refs[0];
    size_t cursor = 1;
    Ref featRef, startRef;
    if (model_.kind == "dap") {
      featRef = refs[cursor++];
      startRef = refs[cursor++];
    }
    std::vector<Ref> mrefs, nrefs;
    if (model_.kind != "static") {
      mrefs.assign(refs.begin() + cursor, refs.begin() + cursor + model_.motion.params.size());
      cursor += model_.motion.params.size();
    }
    nrefs.assign(refs.begin() + cursor, refs.end());

    LossTerms<T> terms;
    RenderOut<T> render;
    Ref fieldG = staticRef;
    DynamicGrids<T> dg;
    bool motionGrid = false;
    if (model_.kind == "deform") {
      render = renderSamplesWarped(g, model_, mrefs, nrefs, staticRef, batch, T(t), bg_);
    } else {
      if (model_.kind == "dap" && rec.alive > 0) {
        auto aliveIdx = model_.ps.aliveIndices();
        auto starts = g.gatherRows(startRef, aliveIdx);
        auto feats = g.gatherRows(featRef, aliveIdx);
        auto off = model_.motion.offsets(g, mrefs, starts, T(t));
        auto bin = binForScatter(g, g.add(starts, off), model_.geom);
        dg = scatterParticles(g, bin, feats, off, model_.geom);
        fieldG = superpose(g, staticRef, dg.dynamicG, *dg.mask);
        motionGrid = true;
      }
      render = renderSamples(g, model_.nets, nrefs, fieldG, model_.geom, batch, bg_);
    }

    terms.photo = photometricLoss(g, g.sliceCols(render.color, 0, 3), target);
    if (batch.count() > 0)
      terms.ptrgb = perPointRgbLoss(g, render.rgb, render.weights, batch.offsets, target);
    terms.bg = bgEntropyLoss(g, g.sliceCols(render.color, 3, 4));
    terms.tvf = g.tv3d(fieldG, model_.geom.extents);
    if (motionGrid) terms.tvm = g.tv3d(dg.motionG, model_.geom.extents, dg.mask);

    auto value = [&](Ref r) { return r.valid() ? static_cast<double>(g.val(r)[0]) : 0.0; };
    rec.photo = value(terms.photo);
    rec.ptrgb = value(terms.ptrgb);
    rec.bg = value(terms.bg);
    rec.tvf = value(terms.tvf);
    rec.tvm = value(terms.tvm);
    const bool finite = std::isfinite(rec.photo) && std::isfinite(rec.ptrgb) &&
                        std::isfinite(rec.bg) && std::isfinite(rec.tvf) &&
                        std::isfinite(rec.tvm);
    if (!finite) {
      rec.total = std::numeric_limits<double>::quiet_NaN();
      rec.skipped = true;
      if (++consecutiveBad_ >= 3)
        throw err("training aborted: 3 consecutive non-finite losses at step " +
                  std::to_string(step_));
      std::fprintf(stderr, "step %lld: non-finite loss, skipped\n",
                   static_cast<long long>(step_));
      return rec;
    }
    consecutiveBad_ = 0;

    LossWeights<T> w{T(cfg_.wPtrgb), T(cfg_.wBg), T(cfg_.wTvf), T(cfg_.wTvm)};
    auto total = totalLoss(g, terms, w);
    rec.total = static_cast<double>(g.val(total)[0]);
    g.backward(total);

    static const double TrainConfig::* groupLr[kNumGroups] = {
        &TrainConfig::lrGrids, &TrainConfig::lrFeatures, &TrainConfig::lrStarts,
        &TrainConfig::lrMotion, &TrainConfig::lrNets};
    for (auto& s : opt_.groupStep) ++s;
    for (size_t i = 0; i < tensors.size(); ++i) {
      const int grp = groupOf(tensors[i]->name);
      const double lr = cfg_.*groupLr[grp] * rec.lrFactor;
      opt_.update(i, *tensors[i], g.grad(refs[i]), lr, opt_.groupStep[grp]);
    }
    if (model_.kind == "dap") projectStartsIntoBbox();
    return rec;
  }

  void projectStartsIntoBbox() {
    auto& s = model_.ps.starts.data;
    const AABB& b = model_.ps.bbox;
    for (int64_t i = 0; i < model_.ps.starts.rows; ++i) {
      s[i * 3] = clampv(s[i * 3], T(b.min.x), T(b.max.x));
      s[i * 3 + 1] = clampv(s[i * 3 + 1], T(b.min.y), T(b.max.y));
      s[i * 3 + 2] = clampv(s[i * 3 + 2], T(b.min.z), T(b.max.z));
    }
  }

  const Image& frameImage(int frame) {
    auto it = frames_.find(frame);
    if (it == frames_.end()) it = frames_.emplace(frame, ds_->loadFrame(frame)).first;
    return it->second;
  }

  TrainConfig cfg_;
  const scene::Dataset* ds_;
  Rng rng_;
  Model<T> model_;
  Adam<T> opt_;
  OccupancyMask occ_;
  std::array<T, 3> bg_{T(1), T(1), T(1)};
  int64_t step_ = 0;
  int64_t consecutiveBad_ = 0;
  std::vector<StepRecord> history_;
  std::vector<RemovalEvent> removals_;
  std::map<int, Image> frames_;
};

}  // namespace prf
