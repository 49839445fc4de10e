#include "prf/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "json.hpp"
#include "prf/threading.hpp"

namespace prf {

using nlohmann::json;

// ----------------------------------------------------------------- image scores

double psnr(const Image& img, const Image& ref) {
  if (img.width != ref.width || img.height != ref.height)
    throw err("psnr: shape mismatch");
  double se = 0;
  for (size_t i = 0; i < img.rgb.size(); ++i) {
    double d = img.rgb[i] - ref.rgb[i];
    se += d * d;
  }
  double mse = se / static_cast<double>(img.rgb.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / mse);
}

namespace {

constexpr int kWin = 11;

std::array<double, kWin * kWin> gaussianWindow() {
  std::array<double, kWin * kWin> w{};
  const double sigma = 1.5, c = (kWin - 1) / 2.0;
  double sum = 0;
  for (int y = 0; y < kWin; ++y)
    for (int x = 0; x < kWin; ++x) {
      double g = std::exp(-((x - c) * (x - c) + (y - c) * (y - c)) / (2 * sigma * sigma));
      w[y * kWin + x] = g;
      sum += g;
    }
  for (auto& g : w) g /= sum;
  return w;
}

std::vector<double> grayscale(const Image& img) {
  std::vector<double> g(static_cast<size_t>(img.width) * img.height);
  for (size_t p = 0; p < g.size(); ++p)
    g[p] = (img.rgb[p * 3] + img.rgb[p * 3 + 1] + img.rgb[p * 3 + 2]) / 3.0;
  return g;
}

}  // namespace

double ssim(const Image& img, const Image& ref) {
  if (img.width != ref.width || img.height != ref.height)
    throw err("ssim: shape mismatch");
  if (img.width < kWin || img.height < kWin)
    throw err("ssim: image smaller than the 11x11 window");
  static const auto w = gaussianWindow();
  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  const auto gx = grayscale(img), gy = grayscale(ref);
  const int W = img.width, H = img.height;
  double total = 0;
  int64_t windows = 0;
  for (int y0 = 0; y0 + kWin <= H; ++y0)
    for (int x0 = 0; x0 + kWin <= W; ++x0) {
      double mx = 0, my = 0, xx = 0, yy = 0, xy = 0;
      for (int dy = 0; dy < kWin; ++dy)
        for (int dx = 0; dx < kWin; ++dx) {
          double wk = w[dy * kWin + dx];
          double a = gx[(y0 + dy) * W + x0 + dx];
          double b = gy[(y0 + dy) * W + x0 + dx];
          mx += wk * a;
          my += wk * b;
          xx += wk * a * a;
          yy += wk * b * b;
          xy += wk * a * b;
        }
      double vx = xx - mx * mx, vy = yy - my * my, cxy = xy - mx * my;
      total += ((2 * mx * my + c1) * (2 * cxy + c2)) /
               ((mx * mx + my * my + c1) * (vx + vy + c2));
      ++windows;
    }
  return total / static_cast<double>(windows);
}

// -------------------------------------------------------------- velocity fields

VelocityField VelocityField::zeros(int n, const AABB& bbox) {
  VelocityField f;
  f.n = n;
  f.bbox = bbox;
  f.v.assign(static_cast<size_t>(n) * n * n, Vec3{0, 0, 0});
  f.valid.assign(f.v.size(), 1);
  return f;
}

VelocityField gtVelocityField(const scene::SceneSpec& spec, double t, int n) {
  VelocityField f = VelocityField::zeros(n, spec.bbox);
  f.v = scene::gtVelocityGrid(spec, t, n);
  return f;
}

namespace {

// Voxel index of a point, or -1 outside the lattice. Matches the x-major
// layout of the ground-truth grid.
int64_t voxelOf(const Vec3& p, const AABB& bbox, int n) {
  Vec3 ext = bbox.extent();
  int ix = static_cast<int>(std::floor((p.x - bbox.min.x) / ext.x * n));
  int iy = static_cast<int>(std::floor((p.y - bbox.min.y) / ext.y * n));
  int iz = static_cast<int>(std::floor((p.z - bbox.min.z) / ext.z * n));
  if (ix < 0 || iy < 0 || iz < 0 || ix >= n || iy >= n || iz >= n) return -1;
  return (static_cast<int64_t>(ix) * n + iy) * n + iz;
}

Vec3 cellCenter(const AABB& bbox, int n, int ix, int iy, int iz) {
  Vec3 ext = bbox.extent();
  return {bbox.min.x + (ix + 0.5) * ext.x / n, bbox.min.y + (iy + 0.5) * ext.y / n,
          bbox.min.z + (iz + 0.5) * ext.z / n};
}

}  // namespace

VelocityField particleVelocityField(const ParticleSystem<double>& ps,
                                    const MotionNet<double>& motion, const AABB& bbox,
                                    double t, double dt, int n) {
  if (dt <= 0) throw err("particleVelocityField: dt must be > 0");
  if (t + dt > 1.0 + 1e-12) throw err("particleVelocityField: t + dt must stay within [0,1]");
  VelocityField f = VelocityField::zeros(n, bbox);
  f.valid.assign(f.v.size(), 0);
  std::vector<double> starts = ps.aliveStarts();
  const int64_t a = static_cast<int64_t>(starts.size()) / 3;
  if (a == 0) return f;
  std::vector<double> p0 = motionPositions(motion, starts, t);
  std::vector<double> p1 = motionPositions(motion, starts, t + dt);
  std::vector<int> count(f.v.size(), 0);
  for (int64_t i = 0; i < a; ++i) {
    Vec3 at{p0[i * 3], p0[i * 3 + 1], p0[i * 3 + 2]};
    int64_t cell = voxelOf(at, bbox, n);
    if (cell < 0) continue;
    Vec3 vel{(p1[i * 3] - p0[i * 3]) / dt, (p1[i * 3 + 1] - p0[i * 3 + 1]) / dt,
             (p1[i * 3 + 2] - p0[i * 3 + 2]) / dt};
    f.v[cell] += vel;
    ++count[cell];
  }
  for (size_t c = 0; c < f.v.size(); ++c) {
    if (count[c] > 0) {
      f.v[c] = f.v[c] / static_cast<double>(count[c]);
      f.valid[c] = 1;
    }
  }
  return f;
}

VelocityField deformationVelocityField(
    const std::function<Vec3(const Vec3&, double)>& df,
    const std::function<bool(const Vec3&, double)>& occupied, const AABB& bbox, double t,
    double dt, int n) {
  if (dt <= 0) throw err("deformationVelocityField: dt must be > 0");
  VelocityField f = VelocityField::zeros(n, bbox);
  f.valid.assign(f.v.size(), 0);
  for (int ix = 0; ix < n; ++ix)
    for (int iy = 0; iy < n; ++iy)
      for (int iz = 0; iz < n; ++iz) {
        Vec3 x = cellCenter(bbox, n, ix, iy, iz);
        if (!occupied(x, t)) continue;
        size_t cell = (static_cast<size_t>(ix) * n + iy) * n + iz;
        f.v[cell] = (df(x, t) - df(x, t + dt)) / dt;
        f.valid[cell] = 1;
      }
  return f;
}

double mfe(const VelocityField& a, const VelocityField& b) {
  if (a.n != b.n || a.v.size() != b.v.size()) throw err("mfe: resolution mismatch");
  double s = 0;
  for (size_t i = 0; i < a.v.size(); ++i) s += (a.v[i] - b.v[i]).norm();
  return s / static_cast<double>(a.v.size());
}

// ------------------------------------------------------- model velocity fields

namespace {

// Batched warp offsets of the deformation baseline on the full lattice.
std::vector<double> warpOffsetsAt(const Model<double>& model,
                                  const std::vector<double>& pts, double t) {
  nd::Graph<double> g;
  auto mrefs = bindTensors(g, model.motion.params);
  auto p = g.constant(static_cast<int64_t>(pts.size()) / 3, 3, pts);
  return g.val(model.motion.offsets(g, mrefs, p, t));
}

// Density of the warped canonical field at arbitrary points.
std::vector<double> warpDensityAt(const Model<double>& model, const std::vector<double>& pts,
                                  const std::vector<double>& offsets) {
  const int64_t q = static_cast<int64_t>(pts.size()) / 3;
  const int64_t c = model.geom.channels;
  std::vector<double> warped(pts.size());
  for (size_t i = 0; i < pts.size(); ++i) warped[i] = pts[i] + offsets[i];
  auto gridPts = worldToGridCoords(model.geom, warped);
  std::vector<double> fv(q * c);
  for (int64_t i = 0; i < q; ++i) {
    Vec3 p{(*gridPts)[i * 3], (*gridPts)[i * 3 + 1], (*gridPts)[i * 3 + 2]};
    sampleTrilinear(model.staticG.data, model.geom.extents, c, p, fv.data() + i * c);
  }
  nd::Graph<double> g;
  auto nrefs = bindTensors(g, model.nets.params);
  auto v = model.nets.trunk(g, nrefs, g.constant(q, c, fv), g.constant(q, 3, warped));
  return g.val(model.nets.density(g, nrefs, v));
}

VelocityField deformModelField(const Model<double>& model, double t, double dt, int n,
                               double epsAlpha) {
  const AABB& bbox = model.geom.bbox;
  std::vector<double> centers;
  centers.reserve(static_cast<size_t>(n) * n * n * 3);
  for (int ix = 0; ix < n; ++ix)
    for (int iy = 0; iy < n; ++iy)
      for (int iz = 0; iz < n; ++iz) {
        Vec3 x = cellCenter(bbox, n, ix, iy, iz);
        centers.push_back(x.x);
        centers.push_back(x.y);
        centers.push_back(x.z);
      }
  std::vector<double> off0 = warpOffsetsAt(model, centers, t);
  std::vector<double> off1 = warpOffsetsAt(model, centers, t + dt);
  std::vector<double> sigma = warpDensityAt(model, centers, off0);
  const double edge = model.geom.voxelEdge();
  VelocityField f = VelocityField::zeros(n, bbox);
  f.valid.assign(f.v.size(), 0);
  for (size_t c = 0; c < f.v.size(); ++c) {
    double alpha = 1.0 - std::exp(-sigma[c] * edge);
    if (alpha < epsAlpha) continue;
    f.v[c] = Vec3{off0[c * 3] - off1[c * 3], off0[c * 3 + 1] - off1[c * 3 + 1],
                  off0[c * 3 + 2] - off1[c * 3 + 2]} /
             dt;
    f.valid[c] = 1;
  }
  return f;
}

}  // namespace

VelocityField modelVelocityField(const Model<double>& model, double t, double dt, int n,
                                 double epsAlpha) {
  if (model.kind == "dap")
    return particleVelocityField(model.ps, model.motion, model.geom.bbox, t, dt, n);
  if (model.kind == "deform") return deformModelField(model, t, dt, n, epsAlpha);
  return VelocityField::zeros(n, model.geom.bbox);
}

// -------------------------------------------------------------------- evaluate

EvalReport evaluate(const Model<double>& model, int64_t steps, const scene::Dataset& ds,
                    const EvalOptions& opt, const Model<double>* baseline) {
  if (ds.testIdx.empty()) throw err("evaluate: dataset has no held-out views");
  EvalReport rep;
  rep.steps = steps;
  rep.protocol = opt;
  rep.sceneName = ds.spec ? ds.spec->name : "unknown";

  const std::array<double, 3> bg = {opt.background[0], opt.background[1], opt.background[2]};
  double psnrSum = 0, ssimSum = 0;
  for (int frame : ds.testIdx) {
    Image target = ds.loadFrame(frame);
    Image rendered = renderModelFrame(model, ds, frame, ds.frames[frame].time,
                                      opt.samplesPerRay, nullptr, bg);
    PerView pv;
    pv.frame = frame;
    pv.time = ds.frames[frame].time;
    pv.psnr = psnr(rendered, target);
    pv.ssim = ssim(rendered, target);
    rep.perView.push_back(pv);
    psnrSum += pv.psnr;
    ssimSum += pv.ssim;
  }
  rep.psnrMean = psnrSum / static_cast<double>(rep.perView.size());
  rep.ssimMean = ssimSum / static_cast<double>(rep.perView.size());

  if (ds.spec) {
    rep.hasMotionMetrics = true;
    const int n = opt.resolution;
    double pSum = 0, zSum = 0, bSum = 0;
    for (double t : opt.times) {
      VelocityField gt = gtVelocityField(*ds.spec, t, n);
      VelocityField mine = modelVelocityField(model, t, opt.dt, n, opt.epsAlpha);
      VelocityField zero = VelocityField::zeros(n, ds.spec->bbox);
      double mp = mfe(mine, gt), mz = mfe(zero, gt);
      rep.mfeParticlesPerTime.push_back(mp);
      rep.mfeZeroPerTime.push_back(mz);
      pSum += mp;
      zSum += mz;
      if (baseline) {
        double mb = mfe(modelVelocityField(*baseline, t, opt.dt, n, opt.epsAlpha), gt);
        rep.mfeBaselinePerTime.push_back(mb);
        bSum += mb;
      }
    }
    const double nt = static_cast<double>(opt.times.size());
    rep.mfeParticles = pSum / nt;
    rep.mfeZeroMotion = zSum / nt;
    if (baseline) rep.mfeBaseline = bSum / nt;
  }
  return rep;
}

std::string EvalReport::toJson() const {
  auto num = [](double v) -> json {
    if (std::isfinite(v)) return v;
    return v > 0 ? "+inf" : "-inf";
  };
  json j;
  j["scene"] = sceneName;
  j["steps"] = steps;
  j["psnr_mean"] = num(psnrMean);
  j["ssim_mean"] = num(ssimMean);
  j["per_view"] = json::array();
  for (const auto& pv : perView)
    j["per_view"].push_back({{"frame", pv.frame},
                             {"time", pv.time},
                             {"psnr", num(pv.psnr)},
                             {"ssim", num(pv.ssim)}});
  if (hasMotionMetrics) {
    j["mfe_particles"] = num(mfeParticles);
    j["mfe_zero_motion"] = num(mfeZeroMotion);
    if (mfeBaseline) j["mfe_baseline"] = num(*mfeBaseline);
    j["mfe_particles_per_time"] = mfeParticlesPerTime;
    j["mfe_zero_motion_per_time"] = mfeZeroPerTime;
    if (!mfeBaselinePerTime.empty()) j["mfe_baseline_per_time"] = mfeBaselinePerTime;
  }
  j["protocol"] = {{"N", static_cast<int64_t>(protocol.resolution) * protocol.resolution *
                             protocol.resolution},
                   {"resolution", protocol.resolution},
                   {"dt", protocol.dt},
                   {"times", protocol.times}};
  return j.dump(2);
}

}  // namespace prf
