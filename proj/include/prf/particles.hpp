#pragma once

#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "prf/common.hpp"
#include "prf/grids.hpp"
#include "prf/nets.hpp"
#include "prf/rng.hpp"

namespace prf {

// Shared motion model. A time trunk phi_t (2 linear layers, relu between, no
// trailing activation) feeds, next to the encoded start position, the offset
// head phi_m (3 linear layers, relu between). The final layer starts at zero
// so p(t) = s exactly until training moves it: the static hypothesis.
template <typename T>
struct MotionNet {
  int width = 64;
  int levelsTime = 8;
  int levelsPos = 10;
  std::vector<Tensor<T>> params;

  static MotionNet init(int width, Rng& rng, int levelsTime = 8, int levelsPos = 10) {
    MotionNet n;
    n.width = width;
    n.levelsTime = levelsTime;
    n.levelsPos = levelsPos;
    const int64_t tin = 1 + 2 * levelsTime;
    const int64_t min = width + 3 * (1 + 2 * levelsPos);
    n.params.push_back(Tensor<T>::he("motion.t.w1", tin, width, rng));
    n.params.push_back(Tensor<T>::zeros("motion.t.b1", 1, width));
    n.params.push_back(Tensor<T>::he("motion.t.w2", width, width, rng));
    n.params.push_back(Tensor<T>::zeros("motion.t.b2", 1, width));
    n.params.push_back(Tensor<T>::he("motion.m.w1", min, width, rng));
    n.params.push_back(Tensor<T>::zeros("motion.m.b1", 1, width));
    n.params.push_back(Tensor<T>::he("motion.m.w2", width, width, rng));
    n.params.push_back(Tensor<T>::zeros("motion.m.b2", 1, width));
    n.params.push_back(Tensor<T>::zeros("motion.m.w3", width, 3));
    n.params.push_back(Tensor<T>::zeros("motion.m.b3", 1, 3));
    return n;
  }

  // Offset vectors [P,3] at one shared time; refs from bindTensors(params).
  typename nd::Graph<T>::Ref offsets(nd::Graph<T>& g,
                                     const std::vector<typename nd::Graph<T>::Ref>& r,
                                     typename nd::Graph<T>::Ref starts, T t) const {
    const int64_t P = g.rows(starts);
    auto tenc = g.posenc(g.scalarConst(t), levelsTime);
    auto tf = denseLayer(g, g.relu(denseLayer(g, tenc, r, 0)), r, 2);
    auto h = g.concatCols({g.repeatRow(tf, P), g.posenc(starts, levelsPos)});
    h = g.relu(denseLayer(g, h, r, 4));
    h = g.relu(denseLayer(g, h, r, 6));
    return denseLayer(g, h, r, 8);
  }

  typename nd::Graph<T>::Ref positions(nd::Graph<T>& g,
                                       const std::vector<typename nd::Graph<T>::Ref>& r,
                                       typename nd::Graph<T>::Ref starts, T t) const {
    return g.add(starts, offsets(g, r, starts, t));
  }
};

// Tape-free forward pass: positions (flat [P,3]) of the given starts at time t.
template <typename T>
std::vector<T> motionPositions(const MotionNet<T>& net, const std::vector<T>& starts, T t) {
  const int64_t P = static_cast<int64_t>(starts.size()) / 3;
  if (P == 0) return {};
  nd::Graph<T> g;
  auto refs = bindTensors(g, net.params);
  auto pos = net.positions(g, refs, g.constant(P, 3, starts), t);
  return g.val(pos);
}

// Polyline approximation of per-particle trajectory length over K uniform
// times in [0,1]; exact for linear motion at any K >= 2.
template <typename T>
std::vector<T> trajectoryLengths(const MotionNet<T>& net, const std::vector<T>& starts,
                                 int K) {
  if (K < 2) throw err("trajectoryLengths: K must be >= 2");
  const int64_t P = static_cast<int64_t>(starts.size()) / 3;
  std::vector<T> len(P, T(0));
  if (P == 0) return len;
  std::vector<T> prev = motionPositions(net, starts, T(0));
  for (int k = 1; k < K; ++k) {
    std::vector<T> cur = motionPositions(net, starts, T(double(k) / (K - 1)));
    for (int64_t i = 0; i < P; ++i) {
      double dx = cur[i * 3] - prev[i * 3];
      double dy = cur[i * 3 + 1] - prev[i * 3 + 1];
      double dz = cur[i * 3 + 2] - prev[i * 3 + 2];
      len[i] += T(std::sqrt(dx * dx + dy * dy + dz * dz));
    }
    prev.swap(cur);
  }
  return len;
}

// The Lagrangian half of the model: learnable start positions and appearance
// features, plus the alive mask driven by the removal/resampling lifecycle.
// Rows of dead particles keep their storage and are re-used by resampling.
template <typename T>
struct ParticleSystem {
  Tensor<T> starts;    // [N,3] world units
  Tensor<T> features;  // [N,C]
  std::vector<uint8_t> alive;
  AABB bbox;

  static ParticleSystem init(int64_t n, int64_t channels, const AABB& box, Rng& rng) {
    ParticleSystem ps;
    ps.bbox = box;
    ps.starts = Tensor<T>::zeros("particles.starts", n, 3);
    ps.features = Tensor<T>::zeros("particles.features", n, channels);
    ps.alive.assign(n, 1);
    for (int64_t i = 0; i < n; ++i) {
      Vec3 p = rng.uniformInBox(box);
      ps.starts.data[i * 3] = T(p.x);
      ps.starts.data[i * 3 + 1] = T(p.y);
      ps.starts.data[i * 3 + 2] = T(p.z);
    }
    for (auto& f : ps.features.data) f = T(rng.normal() * 0.01);
    return ps;
  }

  int64_t count() const { return starts.rows; }
  int64_t aliveCount() const {
    int64_t c = 0;
    for (uint8_t a : alive) c += a;
    return c;
  }
  nd::IdxBuf aliveIndices() const {
    auto idx = std::make_shared<std::vector<int64_t>>();
    idx->reserve(alive.size());
    for (size_t i = 0; i < alive.size(); ++i)
      if (alive[i]) idx->push_back(static_cast<int64_t>(i));
    return idx;
  }
  std::vector<T> aliveStarts() const {
    std::vector<T> s;
    s.reserve(aliveCount() * 3);
    for (size_t i = 0; i < alive.size(); ++i)
      if (alive[i])
        s.insert(s.end(), starts.data.begin() + i * 3, starts.data.begin() + (i + 1) * 3);
    return s;
  }
  std::vector<T> aliveFeatures() const {
    const int64_t c = features.cols;
    std::vector<T> f;
    f.reserve(aliveCount() * c);
    for (size_t i = 0; i < alive.size(); ++i)
      if (alive[i])
        f.insert(f.end(), features.data.begin() + i * c, features.data.begin() + (i + 1) * c);
    return f;
  }
};

// Length of one alive particle's trajectory; dead particles are rejected.
template <typename T>
T trajectoryLength(const ParticleSystem<T>& ps, const MotionNet<T>& net, int64_t i, int K) {
  if (i < 0 || i >= ps.count()) throw err("trajectoryLength: index out of range");
  if (!ps.alive[i]) throw err("trajectoryLength: dead particle");
  std::vector<T> s(ps.starts.data.begin() + i * 3, ps.starts.data.begin() + (i + 1) * 3);
  return trajectoryLengths(net, s, K)[0];
}

// A world position counts as free space when all 8 corner nodes of its
// containing cell are unoccupied (conservative).
inline bool cellIsFree(const std::vector<uint8_t>& occupied, const Vec3i& extents,
                       const Vec3& gridPt) {
  const int64_t E[3] = {extents.x, extents.y, extents.z};
  int64_t c0[3];
  for (int a = 0; a < 3; ++a) {
    double v = clampv(gridPt[a], 0.0, double(E[a] - 1));
    c0[a] = std::min<int64_t>(static_cast<int64_t>(v), E[a] - 2);
  }
  const int64_t sx = E[1] * E[2], sy = E[2];
  const int64_t base = c0[0] * sx + c0[1] * sy + c0[2];
  for (int dx = 0; dx < 2; ++dx)
    for (int dy = 0; dy < 2; ++dy)
      for (int dz = 0; dz < 2; ++dz)
        if (occupied[base + dx * sx + dy * sy + dz]) return false;
  return true;
}

// Lifecycle rule: a particle goes when its whole sampled trajectory sits in
// known free space, or when it barely moves (trajectory shorter than
// epsTraj). Returns the removed global indices, ascending.
template <typename T>
std::vector<int64_t> removeParticles(ParticleSystem<T>& ps, const MotionNet<T>& net,
                                     const std::vector<uint8_t>& occupied,
                                     const FeatureGrid<T>& geom, double epsTraj, int K) {
  if (K < 2) throw err("removeParticles: K must be >= 2");
  auto idx = ps.aliveIndices();
  const int64_t A = static_cast<int64_t>(idx->size());
  std::vector<int64_t> removed;
  if (A == 0) return removed;
  std::vector<T> starts = ps.aliveStarts();
  std::vector<uint8_t> freeAll(A, 1);
  std::vector<double> length(A, 0.0);
  std::vector<T> prev;
  for (int k = 0; k < K; ++k) {
    std::vector<T> cur = motionPositions(net, starts, T(double(k) / (K - 1)));
    for (int64_t i = 0; i < A; ++i) {
      Vec3 w{double(cur[i * 3]), double(cur[i * 3 + 1]), double(cur[i * 3 + 2])};
      if (!cellIsFree(occupied, geom.extents, geom.worldToGrid(w))) freeAll[i] = 0;
      if (k > 0) {
        double dx = cur[i * 3] - prev[i * 3];
        double dy = cur[i * 3 + 1] - prev[i * 3 + 1];
        double dz = cur[i * 3 + 2] - prev[i * 3 + 2];
        length[i] += std::sqrt(dx * dx + dy * dy + dz * dz);
      }
    }
    prev.swap(cur);
  }
  for (int64_t i = 0; i < A; ++i)
    if (freeAll[i] || length[i] < epsTraj) {
      ps.alive[(*idx)[i]] = 0;
      removed.push_back((*idx)[i]);
    }
  return removed;
}

// Each removed slot is reborn from a uniformly chosen survivor: start drawn
// uniformly in the ball of `radius` around the survivor's start (clamped into
// the bbox), feature copied. Returns how many were restored; zero survivors
// skip with a warning.
template <typename T>
int64_t resampleParticles(ParticleSystem<T>& ps, const std::vector<int64_t>& removed,
                          double radius, Rng& rng) {
  if (removed.empty()) return 0;
  if (radius <= 0) throw err("resampleParticles: radius must be > 0");
  std::vector<int64_t> survivors;
  for (size_t i = 0; i < ps.alive.size(); ++i)
    if (ps.alive[i]) survivors.push_back(static_cast<int64_t>(i));
  if (survivors.empty()) {
    std::fprintf(stderr, "resample skipped: no surviving particles\n");
    return 0;
  }
  const int64_t C = ps.features.cols;
  for (int64_t dead : removed) {
    int64_t src = survivors[rng.uniformInt(survivors.size())];
    Vec3 dir = rng.unitVector();
    double r = radius * std::cbrt(rng.uniform());
    Vec3 s{double(ps.starts.data[src * 3]) + dir.x * r,
           double(ps.starts.data[src * 3 + 1]) + dir.y * r,
           double(ps.starts.data[src * 3 + 2]) + dir.z * r};
    s = ps.bbox.clampPoint(s);
    ps.starts.data[dead * 3] = T(s.x);
    ps.starts.data[dead * 3 + 1] = T(s.y);
    ps.starts.data[dead * 3 + 2] = T(s.z);
    std::copy(ps.features.data.begin() + src * C, ps.features.data.begin() + (src + 1) * C,
              ps.features.data.begin() + dead * C);
    ps.alive[dead] = 1;
  }
  return static_cast<int64_t>(removed.size());
}

// ---- exports ----

inline void writePlyPoints(const std::string& path, const std::vector<double>& xyz) {
  std::ofstream f(path);
  if (!f) throw err("writePlyPoints: cannot open " + path);
  const size_t n = xyz.size() / 3;
  f << "ply\nformat ascii 1.0\nelement vertex " << n
    << "\nproperty float x\nproperty float y\nproperty float z\nend_header\n";
  for (size_t i = 0; i < n; ++i)
    f << float(xyz[i * 3]) << " " << float(xyz[i * 3 + 1]) << " " << float(xyz[i * 3 + 2])
      << "\n";
  if (!f) throw err("writePlyPoints: write failed for " + path);
}

template <typename T>
void exportParticlePly(const std::string& path, const ParticleSystem<T>& ps,
                       const MotionNet<T>& net, T t) {
  std::vector<T> pos = motionPositions(net, ps.aliveStarts(), t);
  writePlyPoints(path, std::vector<double>(pos.begin(), pos.end()));
}

template <typename T>
void exportTrajectoriesCsv(const std::string& path, const ParticleSystem<T>& ps,
                           const MotionNet<T>& net, int nTimes) {
  if (nTimes < 2) throw err("exportTrajectoriesCsv: need at least 2 samples");
  std::ofstream f(path);
  if (!f) throw err("exportTrajectoriesCsv: cannot open " + path);
  f << "particle_id,t,x,y,z\n";
  auto idx = ps.aliveIndices();
  std::vector<T> starts = ps.aliveStarts();
  for (int k = 0; k < nTimes; ++k) {
    double t = double(k) / (nTimes - 1);
    std::vector<T> pos = motionPositions(net, starts, T(t));
    for (size_t i = 0; i < idx->size(); ++i)
      f << (*idx)[i] << "," << t << "," << pos[i * 3] << "," << pos[i * 3 + 1] << ","
        << pos[i * 3 + 2] << "\n";
  }
  if (!f) throw err("exportTrajectoriesCsv: write failed for " + path);
}

}  // namespace prf
