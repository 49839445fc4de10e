#pragma once

#include <array>
#include <cmath>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "prf/common.hpp"
#include "prf/ndiff.hpp"
#include "prf/particles.hpp"
#include "prf/rng.hpp"

namespace prf {

// Appearance head over the superposed feature field. A feature trunk maps the
// interpolated grid feature and the sample position (both positionally
// encoded) to a hidden vector V; a one-layer density head applies a shifted
// softplus so the untrained field is near transparent; a two-layer color head
// mixes V with the encoded view direction and squashes through a logistic.
// The density head weights start at 0.1x the usual scale so that no node of a
// freshly initialized model crosses the occupancy threshold.
template <typename T>
struct RadianceNets {
  int width = 64;
  int levelsFeat = 2;
  int levelsPos = 10;
  int levelsDir = 4;
  double sigmaShift = -10.0;
  std::vector<Tensor<T>> params;

  static RadianceNets init(int64_t channels, int width, Rng& rng, int levelsFeat = 2,
                           int levelsPos = 10, int levelsDir = 4) {
    RadianceNets n;
    n.width = width;
    n.levelsFeat = levelsFeat;
    n.levelsPos = levelsPos;
    n.levelsDir = levelsDir;
    const int64_t fin = channels * (1 + 2 * levelsFeat) + 3 * (1 + 2 * levelsPos);
    const int64_t cin = width + 3 * (1 + 2 * levelsDir);
    n.params.push_back(Tensor<T>::he("radiance.fv.w1", fin, width, rng));
    n.params.push_back(Tensor<T>::zeros("radiance.fv.b1", 1, width));
    n.params.push_back(Tensor<T>::he("radiance.fv.w2", width, width, rng));
    n.params.push_back(Tensor<T>::zeros("radiance.fv.b2", 1, width));
    n.params.push_back(Tensor<T>::he("radiance.sigma.w", width, 1, rng));
    for (auto& v : n.params.back().data) v *= T(0.1);
    n.params.push_back(Tensor<T>::zeros("radiance.sigma.b", 1, 1));
    n.params.push_back(Tensor<T>::he("radiance.color.w1", cin, width, rng));
    n.params.push_back(Tensor<T>::zeros("radiance.color.b1", 1, width));
    n.params.push_back(Tensor<T>::he("radiance.color.w2", width, 3, rng));
    n.params.push_back(Tensor<T>::zeros("radiance.color.b2", 1, 3));
    return n;
  }

  using Ref = typename nd::Graph<T>::Ref;

  // V = linear(relu(linear([enc(f_v) | enc(x)])))
  Ref trunk(nd::Graph<T>& g, const std::vector<Ref>& r, Ref fv, Ref x) const {
    auto h = g.concatCols({g.posenc(fv, levelsFeat), g.posenc(x, levelsPos)});
    return denseLayer(g, g.relu(denseLayer(g, h, r, 0)), r, 2);
  }
  Ref density(nd::Graph<T>& g, const std::vector<Ref>& r, Ref v) const {
    return g.softplusShifted(denseLayer(g, v, r, 4), T(sigmaShift));
  }
  Ref color(nd::Graph<T>& g, const std::vector<Ref>& r, Ref v, Ref dir) const {
    auto h = g.relu(denseLayer(g, g.concatCols({v, g.posenc(dir, levelsDir)}), r, 6));
    return g.sigmoid(denseLayer(g, h, r, 8));
  }

  struct Query {
    Ref sigma;  // [Q,1]
    Ref rgb;    // [Q,3]
  };

  // Full field query on the tape: interpolate the (learnable) field at world
  // points, then run the heads. Points and directions enter as constants.
  Query query(nd::Graph<T>& g, const std::vector<Ref>& r, Ref fieldG,
              const FeatureGrid<T>& geom, const std::shared_ptr<std::vector<T>>& worldPts,
              const std::shared_ptr<std::vector<T>>& dirs) const {
    const int64_t q = static_cast<int64_t>(worldPts->size()) / 3;
    auto fv = g.gridSample(fieldG, worldToGridCoords(geom, *worldPts), geom.extents);
    auto x = g.constant(q, 3, *worldPts);
    auto d = g.constant(q, 3, *dirs);
    auto v = trunk(g, r, fv, x);
    return {density(g, r, v), color(g, r, v, d)};
  }
};

// ---- ray sampling ----

// Stratified quadrature samples along one ray: the span [sn, sf] splits into
// n equal bins, each contributing one depth (uniform inside the bin when rng
// is given, the midpoint otherwise) and a constant bin width delta.
template <typename T>
struct RaySampleSet {
  Vec3 origin, dir;
  std::vector<T> depths;
  std::vector<T> deltas;
};

template <typename T>
RaySampleSet<T> sampleRay(const Vec3& origin, const Vec3& dir, double sn, double sf, int n,
                          Rng* rng) {
  if (!(sn > 0) || !(sf > sn)) throw err("sampleRay: need sf > sn > 0");
  if (n < 2) throw err("sampleRay: need n >= 2");
  RaySampleSet<T> s;
  s.origin = origin;
  s.dir = dir;
  const double w = (sf - sn) / n;
  s.depths.resize(n);
  s.deltas.assign(n, T(w));
  for (int k = 0; k < n; ++k) {
    double u = rng ? rng->uniform() : 0.5;
    s.depths[k] = T(sn + (k + u) * w);
  }
  return s;
}

// Boolean node grid marking where the field can be dense; sample positions
// and particle trajectories in fully free cells are skipped.
struct OccupancyMask {
  Vec3i extents{0, 0, 0};
  double epsAlpha = 1e-4;
  std::vector<uint8_t> occupied;
};

// Flattened per-ray samples for a batch. Ray r owns samples
// [offsets[r], offsets[r+1]); rays that miss the box or whose samples all
// fall in free cells keep an empty slice and composite to the background.
template <typename T>
struct SampleBatch {
  std::shared_ptr<std::vector<T>> points;  // [Q,3] world
  std::shared_ptr<std::vector<T>> dirs;    // [Q,3]
  std::shared_ptr<std::vector<T>> deltas;  // [Q]
  std::vector<T> depths;                   // [Q]
  nd::IdxBuf offsets;                      // [R+1]

  int64_t count() const { return static_cast<int64_t>(deltas->size()); }
  int64_t rays() const { return static_cast<int64_t>(offsets->size()) - 1; }
};

template <typename T>
SampleBatch<T> buildSampleBatch(const std::vector<Vec3>& origins, const std::vector<Vec3>& dirs,
                                const AABB& bbox, int n, Rng* rng,
                                const OccupancyMask* occ = nullptr,
                                const FeatureGrid<T>* geom = nullptr) {
  if (origins.size() != dirs.size()) throw err("buildSampleBatch: origin/dir count");
  if (occ && !geom) throw err("buildSampleBatch: occupancy culling needs the grid");
  SampleBatch<T> b;
  b.points = std::make_shared<std::vector<T>>();
  b.dirs = std::make_shared<std::vector<T>>();
  b.deltas = std::make_shared<std::vector<T>>();
  auto offsets = std::make_shared<std::vector<int64_t>>();
  offsets->push_back(0);
  for (size_t r = 0; r < origins.size(); ++r) {
    double tn, tf;
    bool hit = bbox.intersectRay(origins[r], dirs[r], tn, tf);
    tn = std::max(tn, 1e-4);
    if (hit && tf > tn) {
      auto s = sampleRay<T>(origins[r], dirs[r], tn, tf, n, rng);
      for (int k = 0; k < n; ++k) {
        Vec3 p = origins[r] + dirs[r] * double(s.depths[k]);
        if (occ && cellIsFree(occ->occupied, geom->extents, geom->worldToGrid(p))) continue;
        b.points->push_back(T(p.x));
        b.points->push_back(T(p.y));
        b.points->push_back(T(p.z));
        b.dirs->push_back(T(dirs[r].x));
        b.dirs->push_back(T(dirs[r].y));
        b.dirs->push_back(T(dirs[r].z));
        b.deltas->push_back(s.deltas[k]);
        b.depths.push_back(s.depths[k]);
      }
    }
    offsets->push_back(static_cast<int64_t>(b.deltas->size()));
  }
  b.offsets = offsets;
  return b;
}

// ---- rendering ----

template <typename T>
struct RenderOut {
  typename nd::Graph<T>::Ref color;  // [R,4] rgb + residual transmittance
  typename nd::Graph<T>::Ref sigma;  // [Q,1]
  typename nd::Graph<T>::Ref rgb;    // [Q,3]
  std::shared_ptr<std::vector<T>> weights;  // [Q] detached
};

// Training path: field query plus compositing on one shared tape.
template <typename T>
RenderOut<T> renderSamples(nd::Graph<T>& g, const RadianceNets<T>& nets,
                           const std::vector<typename nd::Graph<T>::Ref>& r,
                           typename nd::Graph<T>::Ref fieldG, const FeatureGrid<T>& geom,
                           const SampleBatch<T>& batch, const std::array<T, 3>& bg) {
  RenderOut<T> out;
  out.weights = std::make_shared<std::vector<T>>();
  if (batch.count() == 0) {
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
  auto q = nets.query(g, r, fieldG, geom, batch.points, batch.dirs);
  out.sigma = q.sigma;
  out.rgb = q.rgb;
  out.color = g.renderComposite(q.sigma, q.rgb, batch.deltas, batch.offsets, bg,
                                out.weights.get());
  return out;
}

// Superposed field values at time t without gradients: move the alive
// particles, scatter them, and blend with the static grid.
template <typename T>
std::vector<T> superposedFieldValues(const Tensor<T>& staticValues, const FeatureGrid<T>& geom,
                                     const ParticleSystem<T>& ps, const MotionNet<T>& motion,
                                     T t) {
  const int64_t nn = geom.nodeCount();
  if (staticValues.rows != nn) throw err("superposedFieldValues: static grid shape");
  if (ps.aliveCount() == 0) return staticValues.data;
  nd::Graph<T> g;
  auto mrefs = bindTensors(g, motion.params);
  std::vector<T> startBuf = ps.aliveStarts();
  const int64_t a = static_cast<int64_t>(startBuf.size()) / 3;
  auto pos = motion.positions(g, mrefs, g.constant(a, 3, startBuf), t);
  auto bin = binForScatter(g, pos, geom);
  auto feats = g.constant(a, ps.features.cols, ps.aliveFeatures());
  auto dg = scatterParticles(g, bin, feats, {}, geom);
  auto field = superpose(g, g.constant(nn, staticValues.cols, staticValues.data), dg.dynamicG,
                         *dg.mask);
  return g.val(field);
}

// Evaluation renderer over a fixed field snapshot: midpoint sampling unless
// rng is given, features interpolated off the tape, then a forward-only pass
// through the heads per chunk of rays. Returns [R,4] rgb + T_far.
template <typename T>
std::vector<T> renderRaysEval(const std::vector<T>& fieldValues, const FeatureGrid<T>& geom,
                              const RadianceNets<T>& nets, const std::vector<Vec3>& origins,
                              const std::vector<Vec3>& dirs, int samplesPerRay,
                              const OccupancyMask* occ, const std::array<T, 3>& bg) {
  const int64_t nRays = static_cast<int64_t>(origins.size());
  const int64_t c = geom.channels;
  std::vector<T> out(nRays * 4);
  const int64_t chunk = 2048;
  for (int64_t r0 = 0; r0 < nRays; r0 += chunk) {
    const int64_t r1 = std::min(nRays, r0 + chunk);
    std::vector<Vec3> o(origins.begin() + r0, origins.begin() + r1);
    std::vector<Vec3> d(dirs.begin() + r0, dirs.begin() + r1);
    auto batch = buildSampleBatch<T>(o, d, geom.bbox, samplesPerRay, nullptr, occ, &geom);
    const int64_t q = batch.count();
    if (q == 0) {
      for (int64_t i = r0; i < r1; ++i) {
        out[i * 4] = bg[0];
        out[i * 4 + 1] = bg[1];
        out[i * 4 + 2] = bg[2];
        out[i * 4 + 3] = T(1);
      }
      continue;
    }
    std::vector<T> fv(q * c);
    for (int64_t i = 0; i < q; ++i) {
      Vec3 p{double((*batch.points)[i * 3]), double((*batch.points)[i * 3 + 1]),
             double((*batch.points)[i * 3 + 2])};
      sampleTrilinear(fieldValues, geom.extents, c, geom.worldToGrid(p), fv.data() + i * c);
    }
    nd::Graph<T> g;
    auto refs = bindTensors(g, nets.params);
    auto v = nets.trunk(g, refs, g.constant(q, c, fv), g.constant(q, 3, *batch.points));
    auto col = g.renderComposite(nets.density(g, refs, v),
                                 nets.color(g, refs, v, g.constant(q, 3, *batch.dirs)),
                                 batch.deltas, batch.offsets, bg, nullptr);
    const auto& cv = g.val(col);
    std::copy(cv.begin(), cv.end(), out.begin() + r0 * 4);
  }
  return out;
}

// Densities at every grid node against a fixed field snapshot. Node features
// are the grid rows themselves (interpolation is exact at nodes).
template <typename T>
std::vector<T> densityAtNodes(const std::vector<T>& fieldValues, const FeatureGrid<T>& geom,
                              const RadianceNets<T>& nets) {
  const int64_t nn = geom.nodeCount();
  const int64_t c = geom.channels;
  std::vector<T> sigma(nn);
  const int64_t chunk = 32768;
  for (int64_t n0 = 0; n0 < nn; n0 += chunk) {
    const int64_t n1 = std::min(nn, n0 + chunk);
    const int64_t m = n1 - n0;
    std::vector<T> pts(m * 3);
    for (int64_t n = n0; n < n1; ++n) {
      const int64_t i = n / (geom.extents.y * geom.extents.z);
      const int64_t j = (n / geom.extents.z) % geom.extents.y;
      const int64_t k = n % geom.extents.z;
      Vec3 w = geom.nodeWorld(i, j, k);
      pts[(n - n0) * 3] = T(w.x);
      pts[(n - n0) * 3 + 1] = T(w.y);
      pts[(n - n0) * 3 + 2] = T(w.z);
    }
    nd::Graph<T> g;
    auto refs = bindTensors(g, nets.params);
    auto fv = g.constant(m, c, std::vector<T>(fieldValues.begin() + n0 * c,
                                              fieldValues.begin() + n1 * c));
    auto sig = nets.density(g, refs, nets.trunk(g, refs, fv, g.constant(m, 3, pts)));
    const auto& sv = g.val(sig);
    std::copy(sv.begin(), sv.end(), sigma.begin() + n0);
  }
  return sigma;
}

// A node counts as occupied when its alpha (one voxel edge as the segment
// length) reaches epsAlpha at any of five uniformly spread probe times.
template <typename T>
OccupancyMask updateOccupancy(const Tensor<T>& staticValues, const FeatureGrid<T>& geom,
                              const ParticleSystem<T>& ps, const MotionNet<T>& motion,
                              const RadianceNets<T>& nets, double epsAlpha) {
  static constexpr double kProbeTimes[5] = {0.0, 0.25, 0.5, 0.75, 1.0};
  const int64_t nn = geom.nodeCount();
  const double edge = geom.voxelEdge();
  std::vector<double> maxAlpha(nn, 0.0);
  for (double t : kProbeTimes) {
    auto vals = superposedFieldValues(staticValues, geom, ps, motion, T(t));
    auto sig = densityAtNodes(vals, geom, nets);
    for (int64_t n = 0; n < nn; ++n)
      maxAlpha[n] = std::max(maxAlpha[n], 1.0 - std::exp(-double(sig[n]) * edge));
  }
  OccupancyMask m;
  m.extents = geom.extents;
  m.epsAlpha = epsAlpha;
  m.occupied.resize(nn);
  for (int64_t n = 0; n < nn; ++n) m.occupied[n] = maxAlpha[n] >= epsAlpha ? 1 : 0;
  return m;
}

// Per-sample dump (ray id, depth, density, weight) for render debugging.
template <typename T>
void writeRayDebugCsv(const std::string& path, const SampleBatch<T>& batch,
                      const std::vector<T>& sigma, const std::vector<T>& weights) {
  std::ofstream f(path);
  if (!f) throw err("writeRayDebugCsv: cannot open " + path);
  f << "ray,sample,depth,sigma,weight\n";
  for (int64_t r = 0; r < batch.rays(); ++r)
    for (int64_t i = (*batch.offsets)[r]; i < (*batch.offsets)[r + 1]; ++i)
      f << r << "," << (i - (*batch.offsets)[r]) << "," << batch.depths[i] << "," << sigma[i]
        << "," << weights[i] << "\n";
  if (!f) throw err("writeRayDebugCsv: write failed for " + path);
}

}  // namespace prf
