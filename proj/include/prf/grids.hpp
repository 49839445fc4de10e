#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "prf/common.hpp"
#include "prf/ndiff.hpp"

namespace prf {

// Node counts per axis for a grid of roughly `targetNodes` cubic cells over
// the box: s = cbrt(V / target), extent = ceil(L / s), floored at 2. The tiny
// slack keeps exact divisions (unit cube, target 8^3) from ceiling up.
inline Vec3i shapeFromBbox(const AABB& bbox, int64_t targetNodes) {
  if (targetNodes < 8) throw err("shapeFromBbox: target must be >= 8");
  const Vec3 L = bbox.extent();
  if (L.x <= 0 || L.y <= 0 || L.z <= 0) throw err("shapeFromBbox: degenerate bbox");
  const double s = std::cbrt(L.x * L.y * L.z / static_cast<double>(targetNodes));
  auto ext = [&](double l) {
    return static_cast<int>(std::max<int64_t>(2, static_cast<int64_t>(std::ceil(l / s - 1e-9))));
  };
  return {ext(L.x), ext(L.y), ext(L.z)};
}

// Dense node grid over a box. Node (i,j,k) sits at bbox.min + (i,j,k) * cell
// with cell = extent / (extents - 1); storage is node-major [Nx*Ny*Nz, C]
// with flat index (i*Ny + j)*Nz + k.
template <typename T>
struct FeatureGrid {
  Vec3i extents{0, 0, 0};
  int64_t channels = 0;
  AABB bbox;
  std::vector<T> values;

  static FeatureGrid zeros(Vec3i extents, int64_t channels, const AABB& bbox) {
    FeatureGrid g;
    g.extents = extents;
    g.channels = channels;
    g.bbox = bbox;
    g.values.assign(static_cast<size_t>(g.nodeCount() * channels), T(0));
    return g;
  }

  int64_t nodeCount() const {
    return static_cast<int64_t>(extents.x) * extents.y * extents.z;
  }
  int64_t nodeIndex(int64_t i, int64_t j, int64_t k) const {
    return (i * extents.y + j) * extents.z + k;
  }
  Vec3 cellSize() const {
    return {bbox.extent().x / (extents.x - 1), bbox.extent().y / (extents.y - 1),
            bbox.extent().z / (extents.z - 1)};
  }
  double voxelEdge() const {
    Vec3 c = cellSize();
    return std::cbrt(c.x * c.y * c.z);
  }
  Vec3 nodeWorld(int64_t i, int64_t j, int64_t k) const {
    Vec3 c = cellSize();
    return {bbox.min.x + i * c.x, bbox.min.y + j * c.y, bbox.min.z + k * c.z};
  }
  Vec3 worldToGrid(const Vec3& x) const {
    Vec3 c = cellSize();
    return {(x.x - bbox.min.x) / c.x, (x.y - bbox.min.y) / c.y, (x.z - bbox.min.z) / c.z};
  }
};

// World points (flat [R,3], same units as the bbox) to continuous grid index
// coordinates for gridSample. Non-finite coordinates are rejected.
template <typename T>
std::shared_ptr<std::vector<T>> worldToGridCoords(const FeatureGrid<T>& geom,
                                                  const std::vector<T>& worldPts) {
  if (worldPts.size() % 3 != 0) throw err("worldToGridCoords: flat [R,3] expected");
  auto out = std::make_shared<std::vector<T>>(worldPts.size());
  const Vec3 c = geom.cellSize();
  const T sc[3] = {T(1.0 / c.x), T(1.0 / c.y), T(1.0 / c.z)};
  const T mn[3] = {T(geom.bbox.min.x), T(geom.bbox.min.y), T(geom.bbox.min.z)};
  for (size_t i = 0; i < worldPts.size(); ++i) {
    if (!std::isfinite(static_cast<double>(worldPts[i])))
      throw err("worldToGridCoords: non-finite coordinate");
    (*out)[i] = (worldPts[i] - mn[i % 3]) * sc[i % 3];
  }
  return out;
}

// Trilinear sample without the tape (evaluation paths). Grid-space point,
// clamped like gridSample.
template <typename T>
inline void sampleTrilinear(const std::vector<T>& values, Vec3i extents, int64_t C,
                            const Vec3& gridPt, T* out) {
  const int64_t E[3] = {extents.x, extents.y, extents.z};
  const double p[3] = {gridPt.x, gridPt.y, gridPt.z};
  int64_t c0[3];
  double f[3];
  for (int a = 0; a < 3; ++a) {
    double v = clampv(p[a], 0.0, static_cast<double>(E[a] - 1));
    int64_t ci = std::min<int64_t>(static_cast<int64_t>(v), E[a] - 2);
    c0[a] = ci;
    f[a] = v - ci;
  }
  const int64_t sx = E[1] * E[2], sy = E[2];
  const int64_t base = c0[0] * sx + c0[1] * sy + c0[2];
  for (int64_t j = 0; j < C; ++j) out[j] = T(0);
  for (int dx = 0; dx < 2; ++dx)
    for (int dy = 0; dy < 2; ++dy)
      for (int dz = 0; dz < 2; ++dz) {
        T w = T((dx ? f[0] : 1 - f[0]) * (dy ? f[1] : 1 - f[1]) * (dz ? f[2] : 1 - f[2]));
        const T* row = values.data() + (base + dx * sx + dy * sy + dz) * C;
        for (int64_t j = 0; j < C; ++j) out[j] += w * row[j];
      }
}

// Coarse-to-fine growth: new nodes sample the old grid trilinearly at the
// matching index position (bbox unchanged, so corners map exactly). Shrinking
// the node count is rejected.
template <typename T>
FeatureGrid<T> resizeTrilinear(const FeatureGrid<T>& g, Vec3i newExtents) {
  FeatureGrid<T> out = FeatureGrid<T>::zeros(newExtents, g.channels, g.bbox);
  if (out.nodeCount() < g.nodeCount()) throw err("resizeTrilinear: shrinking rejected");
  const Vec3 scale = {
      newExtents.x > 1 ? double(g.extents.x - 1) / (newExtents.x - 1) : 0.0,
      newExtents.y > 1 ? double(g.extents.y - 1) / (newExtents.y - 1) : 0.0,
      newExtents.z > 1 ? double(g.extents.z - 1) / (newExtents.z - 1) : 0.0};
  const int64_t C = g.channels;
  parallelFor(newExtents.x, 1, [&](size_t i0, size_t i1, size_t) {
    for (size_t i = i0; i < i1; ++i)
      for (int64_t j = 0; j < newExtents.y; ++j)
        for (int64_t k = 0; k < newExtents.z; ++k) {
          Vec3 p = {i * scale.x, j * scale.y, k * scale.z};
          sampleTrilinear(g.values, g.extents, C, p,
                          out.values.data() + out.nodeIndex(i, j, k) * C);
        }
  });
  return out;
}

// ---- binary grid snapshot: "PRFGRID1", extents, C, bbox, f32 row-major ----

template <typename T>
void saveGrid(const FeatureGrid<T>& g, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw err("saveGrid: cannot open " + path);
  f.write("PRFGRID1", 8);
  int32_t hdr[4] = {int32_t(g.extents.x), int32_t(g.extents.y), int32_t(g.extents.z),
                    int32_t(g.channels)};
  f.write(reinterpret_cast<const char*>(hdr), sizeof hdr);
  double box[6] = {g.bbox.min.x, g.bbox.min.y, g.bbox.min.z,
                   g.bbox.max.x, g.bbox.max.y, g.bbox.max.z};
  f.write(reinterpret_cast<const char*>(box), sizeof box);
  std::vector<float> vals(g.values.begin(), g.values.end());
  f.write(reinterpret_cast<const char*>(vals.data()), vals.size() * sizeof(float));
  if (!f) throw err("saveGrid: write failed for " + path);
}

template <typename T>
FeatureGrid<T> loadGrid(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw err("loadGrid: cannot open " + path);
  char magic[8];
  f.read(magic, 8);
  if (!f || std::memcmp(magic, "PRFGRID1", 8) != 0) throw err("loadGrid: bad magic");
  int32_t hdr[4];
  f.read(reinterpret_cast<char*>(hdr), sizeof hdr);
  double box[6];
  f.read(reinterpret_cast<char*>(box), sizeof box);
  if (!f || hdr[0] < 2 || hdr[1] < 2 || hdr[2] < 2 || hdr[3] < 1)
    throw err("loadGrid: bad header");
  FeatureGrid<T> g = FeatureGrid<T>::zeros({hdr[0], hdr[1], hdr[2]}, hdr[3],
                                           {{box[0], box[1], box[2]}, {box[3], box[4], box[5]}});
  std::vector<float> vals(g.values.size());
  f.read(reinterpret_cast<char*>(vals.data()), vals.size() * sizeof(float));
  if (!f) throw err("loadGrid: truncated values");
  std::copy(vals.begin(), vals.end(), g.values.begin());
  return g;
}

// World-space positions [P,3] to continuous grid index coordinates, on the
// tape (no clamping; samplers clamp themselves).
template <typename T>
typename nd::Graph<T>::Ref worldToGridRef(nd::Graph<T>& g, typename nd::Graph<T>::Ref pts,
                                          const FeatureGrid<T>& geom) {
  const Vec3 c = geom.cellSize();
  return g.affineCols(pts, {T(1.0 / c.x), T(1.0 / c.y), T(1.0 / c.z)},
                      {T(-geom.bbox.min.x / c.x), T(-geom.bbox.min.y / c.y),
                       T(-geom.bbox.min.z / c.z)});
}

// ---- particle -> grid transfer, assembled on the tape ----

// Corner binning of world positions: positions are clamped to the bbox for
// the transfer (the learnable values keep their gradients zeroed outside, not
// overwritten), converted to grid coordinates, and expanded into the 8 cell
// corner indices plus their trilinear weights. Corner order k = dx*4+dy*2+dz.
template <typename T>
struct ScatterBinning {
  typename nd::Graph<T>::Ref gridPts;  // [P,3] clamped continuous grid coords
  typename nd::Graph<T>::Ref weights;  // [P,8]
  nd::IdxBuf idx;                      // [P*8] node ids
};

template <typename T>
ScatterBinning<T> binForScatter(nd::Graph<T>& g, typename nd::Graph<T>::Ref worldPos,
                                const FeatureGrid<T>& geom) {
  const int64_t P = g.rows(worldPos);
  if (g.cols(worldPos) != 3) throw err("binForScatter: positions must be [P,3]");
  const Vec3i E = geom.extents;
  const Vec3 c = geom.cellSize();
  const std::vector<T> lo = {T(geom.bbox.min.x), T(geom.bbox.min.y), T(geom.bbox.min.z)};
  const std::vector<T> hi = {T(geom.bbox.max.x), T(geom.bbox.max.y), T(geom.bbox.max.z)};
  const std::vector<T> scale = {T(1.0 / c.x), T(1.0 / c.y), T(1.0 / c.z)};
  const std::vector<T> off = {T(-geom.bbox.min.x / c.x), T(-geom.bbox.min.y / c.y),
                              T(-geom.bbox.min.z / c.z)};
  auto gp = g.affineCols(g.clampCols(worldPos, lo, hi), scale, off);

  const auto& gv = g.val(gp);
  auto idx = std::make_shared<std::vector<int64_t>>(P * 8);
  std::vector<T> c0(P * 3);
  const int64_t ext[3] = {E.x, E.y, E.z};
  const int64_t sx = E.y * E.z, sy = E.z;
  for (int64_t p = 0; p < P; ++p) {
    int64_t ci[3];
    for (int a = 0; a < 3; ++a) {
      double v = clampv(static_cast<double>(gv[p * 3 + a]), 0.0, double(ext[a] - 1));
      ci[a] = std::min<int64_t>(static_cast<int64_t>(v), ext[a] - 2);
      c0[p * 3 + a] = T(ci[a]);
    }
    const int64_t base = ci[0] * sx + ci[1] * sy + ci[2];
    for (int dx = 0; dx < 2; ++dx)
      for (int dy = 0; dy < 2; ++dy)
        for (int dz = 0; dz < 2; ++dz)
          (*idx)[p * 8 + dx * 4 + dy * 2 + dz] = base + dx * sx + dy * sy + dz;
  }

  auto frac = g.sub(gp, g.constant(P, 3, c0));
  auto fx = g.sliceCols(frac, 0, 1);
  auto fy = g.sliceCols(frac, 1, 2);
  auto fz = g.sliceCols(frac, 2, 3);
  auto one = g.fill(P, 1, T(1));
  auto ox = g.sub(one, fx);
  auto oy = g.sub(one, fy);
  auto oz = g.sub(one, fz);
  std::vector<typename nd::Graph<T>::Ref> ws;
  for (int dx = 0; dx < 2; ++dx)
    for (int dy = 0; dy < 2; ++dy)
      for (int dz = 0; dz < 2; ++dz)
        ws.push_back(g.mul(g.mul(dx ? fx : ox, dy ? fy : oy), dz ? fz : oz));
  return {gp, g.concatCols(ws), idx};
}

// One scatter pass builds the unnormalized dynamic feature grid, the
// normalized mean-offset motion grid (when offsets are given), and the strict
// node mask w_n > 0 from an appended column of ones.
template <typename T>
struct DynamicGrids {
  typename nd::Graph<T>::Ref dynamicG;  // [Nn, C] unnormalized feature sums
  typename nd::Graph<T>::Ref motionG;   // [Nn, 3]; invalid unless offsets given
  std::shared_ptr<std::vector<uint8_t>> mask;
  std::shared_ptr<std::vector<T>> weightSums;
};

template <typename T>
DynamicGrids<T> scatterParticles(nd::Graph<T>& g, const ScatterBinning<T>& bin,
                                 typename nd::Graph<T>::Ref features,
                                 typename nd::Graph<T>::Ref offsets,
                                 const FeatureGrid<T>& geom) {
  using Ref = typename nd::Graph<T>::Ref;
  const int64_t P = g.rows(features), C = g.cols(features);
  const int64_t Nn = geom.nodeCount();
  const bool withMotion = offsets.valid();
  std::vector<Ref> cols = {features};
  if (withMotion) cols.push_back(offsets);
  cols.push_back(g.fill(P, 1, T(1)));
  auto out = g.scatterAddWeighted(g.concatCols(cols), bin.weights, bin.idx, Nn);
  const int64_t wcol = withMotion ? C + 3 : C;
  auto wsumRef = g.sliceCols(out, wcol, wcol + 1);
  DynamicGrids<T> r;
  r.dynamicG = g.sliceCols(out, 0, C);
  if (withMotion) r.motionG = g.normalizeRowsMasked(g.sliceCols(out, C, C + 3), wsumRef);
  r.weightSums = std::make_shared<std::vector<T>>(g.val(wsumRef));
  r.mask = std::make_shared<std::vector<uint8_t>>(Nn);
  for (int64_t n = 0; n < Nn; ++n) (*r.mask)[n] = (*r.weightSums)[n] > T(0) ? 1 : 0;
  return r;
}

// G = (1 - m) Gs + m Gd with the mask a constant in differentiation.
template <typename T>
typename nd::Graph<T>::Ref superpose(nd::Graph<T>& g, typename nd::Graph<T>::Ref staticG,
                                     typename nd::Graph<T>::Ref dynamicG,
                                     const std::vector<uint8_t>& mask) {
  const int64_t Nn = g.rows(staticG);
  if (static_cast<int64_t>(mask.size()) != Nn) throw err("superpose: mask size");
  if (g.rows(dynamicG) != Nn || g.cols(dynamicG) != g.cols(staticG))
    throw err("superpose: shape mismatch");
  std::vector<T> m(Nn), om(Nn);
  for (int64_t n = 0; n < Nn; ++n) {
    m[n] = mask[n] ? T(1) : T(0);
    om[n] = T(1) - m[n];
  }
  return g.add(g.mulColBroadcast(staticG, g.constant(Nn, 1, om)),
               g.mulColBroadcast(dynamicG, g.constant(Nn, 1, m)));
}

}  // namespace prf
