#include "prf/scene.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>

#include "json.hpp"
#include "prf/threading.hpp"

namespace prf::scene {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------- trajectory

Vec3 Trajectory::offsetAt(double t) const {
  switch (kind) {
    case Kind::Static:
      return {0, 0, 0};
    case Kind::Linear:
      return u * t;
    case Kind::Circular: {
      double a = omega * t + phase;
      return {radius * (std::cos(a) - std::cos(phase)), 0,
              radius * (std::sin(a) - std::sin(phase))};
    }
    case Kind::Bounce: {
      double cyc = t / period - std::floor(t / period);
      double tri = 1.0 - std::abs(1.0 - 2.0 * cyc);
      return drift * t + Vec3{0, rise * tri, 0};
    }
  }
  return {0, 0, 0};
}

Vec3 Trajectory::velocityAt(double t) const {
  switch (kind) {
    case Kind::Static:
      return {0, 0, 0};
    case Kind::Linear:
      return u;
    case Kind::Circular: {
      double a = omega * t + phase;
      return {-radius * omega * std::sin(a), 0, radius * omega * std::cos(a)};
    }
    case Kind::Bounce: {
      double cyc = t / period - std::floor(t / period);
      if (t > 0 && cyc == 0.0) cyc = 1.0; // left-sided limit at fold points
      double slope = (cyc <= 0.5) ? 2.0 : -2.0;
      return drift + Vec3{0, rise * slope / period, 0};
    }
  }
  return {0, 0, 0};
}

// ------------------------------------------------------------------- presets

SceneSpec SceneSpec::preset(const std::string& name) {
  SceneSpec s;
  s.name = name;
  s.lightDir = Vec3{0.4, 1.0, 0.25}.normalized();
  Primitive floor;
  floor.shape = Primitive::Shape::Box;
  floor.center = {0, -0.85, 0};
  floor.half = {0.9, 0.05, 0.9};
  floor.albedo = {0.72, 0.72, 0.75};
  if (name == "fall") {
    Primitive ball;
    ball.center = {0, 0.55, 0};
    ball.radius = 0.25;
    ball.albedo = {0.85, 0.2, 0.15};
    ball.dynamic = true;
    ball.traj.kind = Trajectory::Kind::Linear;
    ball.traj.u = {0, -1.1, 0};
    s.prims = {ball, floor};
  } else if (name == "orbit") {
    Primitive ball;
    ball.center = {0.5, 0.1, 0};
    ball.radius = 0.22;
    ball.albedo = {0.2, 0.35, 0.85};
    ball.dynamic = true;
    ball.traj.kind = Trajectory::Kind::Circular;
    ball.traj.radius = 0.5;
    ball.traj.omega = 2.0 * std::numbers::pi;
    ball.traj.phase = 0.0;
    Primitive block;
    block.shape = Primitive::Shape::Box;
    block.center = {0, -0.1, 0};
    block.half = {0.16, 0.3, 0.16};
    block.albedo = {0.82, 0.68, 0.25};
    s.prims = {ball, block};
  } else if (name == "bounce") {
    Primitive ball;
    ball.center = {-0.45, -0.55, 0};
    ball.radius = 0.22;
    ball.albedo = {0.2, 0.75, 0.3};
    ball.dynamic = true;
    ball.traj.kind = Trajectory::Kind::Bounce;
    ball.traj.rise = 0.85;
    ball.traj.period = 0.5;
    ball.traj.drift = {0.9, 0, 0};
    s.prims = {ball, floor};
  } else {
    throw err("unknown scene preset: " + name);
  }
  return s;
}

// ------------------------------------------------------------------- tracing

namespace {

bool hitSphere(const Vec3& c, double r, const Vec3& o, const Vec3& d, double& tHit,
               Vec3& normal) {
  Vec3 oc = o - c;
  double b = oc.dot(d);
  double disc = b * b - (oc.norm2() - r * r);
  if (disc < 0) return false;
  double sq = std::sqrt(disc);
  double t = -b - sq;
  if (t < 1e-6) t = -b + sq;
  if (t < 1e-6) return false;
  tHit = t;
  normal = (o + d * t - c) / r;
  return true;
}

bool hitBox(const Vec3& c, const Vec3& half, const Vec3& o, const Vec3& d, double& tHit,
            Vec3& normal) {
  AABB box{c - half, c + half};
  double t0, t1;
  if (!box.intersectRay(o, d, t0, t1)) return false;
  double t = t0 > 1e-6 ? t0 : t1;
  if (t < 1e-6) return false;
  Vec3 p = (o + d * t - c).cwiseMul({1.0 / half.x, 1.0 / half.y, 1.0 / half.z});
  int axis = 0;
  double best = std::abs(p.x);
  if (std::abs(p.y) > best) { axis = 1; best = std::abs(p.y); }
  if (std::abs(p.z) > best) axis = 2;
  normal = {0, 0, 0};
  normal[axis] = p[axis] > 0 ? 1.0 : -1.0;
  tHit = t;
  return true;
}

}  // namespace

Vec3 traceRay(const SceneSpec& spec, const Vec3& origin, const Vec3& dir, double t) {
  double bestT = std::numeric_limits<double>::infinity();
  Vec3 bestN, bestAlbedo;
  for (const auto& p : spec.prims) {
    double th;
    Vec3 n;
    bool hit = p.shape == Primitive::Shape::Sphere
                   ? hitSphere(p.centerAt(t), p.radius, origin, dir, th, n)
                   : hitBox(p.centerAt(t), p.half, origin, dir, th, n);
    if (hit && th < bestT) {
      bestT = th;
      bestN = n;
      bestAlbedo = p.albedo;
    }
  }
  if (!std::isfinite(bestT)) return spec.background;
  double lambert = std::max(0.0, bestN.dot(spec.lightDir));
  return bestAlbedo * (0.3 + 0.7 * lambert);
}

Image renderFrame(const SceneSpec& spec, int width, int height, double focalPx,
                  const std::array<double, 9>& rotation, const Vec3& position, double t) {
  Image img(width, height);
  const double cx = width / 2.0, cy = height / 2.0;
  parallelFor(height, 8, [&](size_t y0, size_t y1, size_t) {
    for (size_t y = y0; y < y1; ++y)
      for (int x = 0; x < width; ++x) {
        Vec3 dc{(x + 0.5 - cx) / focalPx, (y + 0.5 - cy) / focalPx, 1.0};
        Vec3 dw{rotation[0] * dc.x + rotation[1] * dc.y + rotation[2] * dc.z,
                rotation[3] * dc.x + rotation[4] * dc.y + rotation[5] * dc.z,
                rotation[6] * dc.x + rotation[7] * dc.y + rotation[8] * dc.z};
        img.setPixel(x, static_cast<int>(y), traceRay(spec, position, dw.normalized(), t));
      }
  });
  return img;
}

// ------------------------------------------------------------------- oracles

namespace {

double primSdf(const Primitive& p, const Vec3& x, double t) {
  Vec3 c = p.centerAt(t);
  if (p.shape == Primitive::Shape::Sphere) return (x - c).norm() - p.radius;
  Vec3 q{std::abs(x.x - c.x) - p.half.x, std::abs(x.y - c.y) - p.half.y,
         std::abs(x.z - c.z) - p.half.z};
  Vec3 qp = q.cwiseMax({0, 0, 0});
  double outside = qp.norm();
  double inside = std::min(0.0, q.maxCoeff());
  return outside + inside;
}

}  // namespace

double sdfAt(const SceneSpec& spec, const Vec3& x, double t, bool dynamicOnly) {
  double best = std::numeric_limits<double>::infinity();
  for (const auto& p : spec.prims) {
    if (dynamicOnly && !p.dynamic) continue;
    best = std::min(best, primSdf(p, x, t));
  }
  return best;
}

Vec3 gtVelocityAt(const SceneSpec& spec, const Vec3& x, double t) {
  for (const auto& p : spec.prims) {
    if (!p.dynamic) continue;
    if (primSdf(p, x, t) <= 0.0) return p.traj.velocityAt(t);
  }
  return {0, 0, 0};
}

std::vector<Vec3> gtVelocityGrid(const SceneSpec& spec, double t, int n) {
  std::vector<Vec3> out(static_cast<size_t>(n) * n * n);
  Vec3 ext = spec.bbox.extent();
  for (int ix = 0; ix < n; ++ix)
    for (int iy = 0; iy < n; ++iy)
      for (int iz = 0; iz < n; ++iz) {
        Vec3 x{spec.bbox.min.x + (ix + 0.5) * ext.x / n,
               spec.bbox.min.y + (iy + 0.5) * ext.y / n,
               spec.bbox.min.z + (iz + 0.5) * ext.z / n};
        out[(static_cast<size_t>(ix) * n + iy) * n + iz] = gtVelocityAt(spec, x, t);
      }
  return out;
}

// ------------------------------------------------------------------- dataset

namespace {

// Camera-to-world rotation for a camera at `pos` looking at `target`,
// x right / y down / z forward.
std::array<double, 9> lookAtRotation(const Vec3& pos, const Vec3& target) {
  Vec3 forward = (target - pos).normalized();
  Vec3 right = forward.cross({0, 1, 0}).normalized();
  Vec3 down = forward.cross(right);
  return {right.x, down.x, forward.x,
          right.y, down.y, forward.y,
          right.z, down.z, forward.z};
}

json vecToJson(const Vec3& v) { return json::array({v.x, v.y, v.z}); }

Vec3 vecFromJson(const json& j) { return {j.at(0), j.at(1), j.at(2)}; }

json trajToJson(const Trajectory& t) {
  json j;
  switch (t.kind) {
    case Trajectory::Kind::Static: j["kind"] = "static"; break;
    case Trajectory::Kind::Linear: j["kind"] = "linear"; break;
    case Trajectory::Kind::Circular: j["kind"] = "circular"; break;
    case Trajectory::Kind::Bounce: j["kind"] = "bounce"; break;
  }
  j["u"] = vecToJson(t.u);
  j["radius"] = t.radius;
  j["omega"] = t.omega;
  j["phase"] = t.phase;
  j["rise"] = t.rise;
  j["period"] = t.period;
  j["drift"] = vecToJson(t.drift);
  return j;
}

Trajectory trajFromJson(const json& j) {
  Trajectory t;
  std::string k = j.at("kind");
  if (k == "static") t.kind = Trajectory::Kind::Static;
  else if (k == "linear") t.kind = Trajectory::Kind::Linear;
  else if (k == "circular") t.kind = Trajectory::Kind::Circular;
  else if (k == "bounce") t.kind = Trajectory::Kind::Bounce;
  else throw err("bad trajectory kind: " + k);
  t.u = vecFromJson(j.at("u"));
  t.radius = j.at("radius");
  t.omega = j.at("omega");
  t.phase = j.at("phase");
  t.rise = j.at("rise");
  t.period = j.at("period");
  t.drift = vecFromJson(j.at("drift"));
  return t;
}

json specToJson(const SceneSpec& s) {
  json j;
  j["name"] = s.name;
  j["bbox"] = {{"min", vecToJson(s.bbox.min)}, {"max", vecToJson(s.bbox.max)}};
  j["light_dir"] = vecToJson(s.lightDir);
  j["background"] = vecToJson(s.background);
  j["primitives"] = json::array();
  for (const auto& p : s.prims) {
    json pj;
    pj["shape"] = p.shape == Primitive::Shape::Sphere ? "sphere" : "box";
    pj["center"] = vecToJson(p.center);
    pj["radius"] = p.radius;
    pj["half"] = vecToJson(p.half);
    pj["albedo"] = vecToJson(p.albedo);
    pj["dynamic"] = p.dynamic;
    pj["trajectory"] = trajToJson(p.traj);
    j["primitives"].push_back(pj);
  }
  return j;
}

SceneSpec specFromJson(const json& j) {
  SceneSpec s;
  s.name = j.at("name");
  s.bbox.min = vecFromJson(j.at("bbox").at("min"));
  s.bbox.max = vecFromJson(j.at("bbox").at("max"));
  s.lightDir = vecFromJson(j.at("light_dir"));
  s.background = vecFromJson(j.at("background"));
  for (const auto& pj : j.at("primitives")) {
    Primitive p;
    p.shape = pj.at("shape") == "sphere" ? Primitive::Shape::Sphere : Primitive::Shape::Box;
    p.center = vecFromJson(pj.at("center"));
    p.radius = pj.at("radius");
    p.half = vecFromJson(pj.at("half"));
    p.albedo = vecFromJson(pj.at("albedo"));
    p.dynamic = pj.at("dynamic");
    p.traj = trajFromJson(pj.at("trajectory"));
    s.prims.push_back(p);
  }
  return s;
}

}  // namespace

SceneSpec loadSceneSpec(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw err("loadSceneSpec: cannot open " + path);
  std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  try {
    return specFromJson(json::parse(text));
  } catch (const json::parse_error& e) {
    size_t line = 1 + std::count(text.begin(), text.begin() + std::min(text.size(), e.byte), '\n');
    throw err(path + ":" + std::to_string(line) + ": " + e.what());
  } catch (const json::exception& e) {
    throw err(path + ": " + e.what());
  }
}

void generateDataset(const SceneSpec& spec, const std::string& outDir, int nFrames,
                     int width, int height) {
  if (nFrames < 2) throw err("generateDataset: need at least 2 frames");
  fs::create_directories(fs::path(outDir) / "frames");
  const double orbitRadius = 2.8, camHeight = 0.9;
  const Vec3 target{0, -0.05, 0};
  const double focalPx = 0.5 * width / std::tan(25.0 * std::numbers::pi / 180.0);

  json manifest;
  manifest["width"] = width;
  manifest["height"] = height;
  manifest["focal_px"] = focalPx;
  manifest["bbox"] = {{"min", vecToJson(spec.bbox.min)}, {"max", vecToJson(spec.bbox.max)}};
  manifest["frames"] = json::array();
  json train = json::array(), test = json::array();

  for (int i = 0; i < nFrames; ++i) {
    double t = static_cast<double>(i) / (nFrames - 1);
    double ang = 2.0 * std::numbers::pi * i / nFrames;
    Vec3 pos{orbitRadius * std::sin(ang), camHeight, orbitRadius * std::cos(ang)};
    auto rot = lookAtRotation(pos, target);
    Image img = renderFrame(spec, width, height, focalPx, rot, pos, t);
    char name[32];
    std::snprintf(name, sizeof(name), "frames/%04d.png", i);
    writePng((fs::path(outDir) / name).string(), img);
    json fj;
    fj["file"] = name;
    fj["time"] = t;
    fj["rotation"] = rot;
    fj["position"] = vecToJson(pos);
    manifest["frames"].push_back(fj);
    (i % 8 == 4 ? test : train).push_back(i);
  }
  manifest["split"] = {{"train", train}, {"test", test}};

  std::ofstream mf(fs::path(outDir) / "manifest.json");
  mf << manifest.dump(2) << "\n";
  std::ofstream sf(fs::path(outDir) / "scene_spec.json");
  sf << specToJson(spec).dump(2) << "\n";
}

Dataset loadDataset(const std::string& dir) {
  std::ifstream mf(fs::path(dir) / "manifest.json");
  if (!mf) throw err("loadDataset: no manifest.json in " + dir);
  json manifest = json::parse(mf);
  Dataset d;
  d.dir = dir;
  d.width = manifest.at("width");
  d.height = manifest.at("height");
  d.focalPx = manifest.at("focal_px");
  d.bbox.min = vecFromJson(manifest.at("bbox").at("min"));
  d.bbox.max = vecFromJson(manifest.at("bbox").at("max"));
  for (const auto& fj : manifest.at("frames")) {
    FrameMeta m;
    m.file = fj.at("file");
    m.time = fj.at("time");
    for (int k = 0; k < 9; ++k) m.rotation[k] = fj.at("rotation").at(k);
    m.position = vecFromJson(fj.at("position"));
    d.frames.push_back(m);
  }
  for (int i : manifest.at("split").at("train")) d.trainIdx.push_back(i);
  for (int i : manifest.at("split").at("test")) d.testIdx.push_back(i);
  auto sidecar = fs::path(dir) / "scene_spec.json";
  if (fs::exists(sidecar)) {
    std::ifstream sf(sidecar);
    d.spec = specFromJson(json::parse(sf));
  }
  return d;
}

Image Dataset::loadFrame(int i) const {
  return readPng((fs::path(dir) / frames.at(i).file).string());
}

void Dataset::pixelRay(int frame, double px, double py, Vec3& origin, Vec3& dir) const {
  const FrameMeta& m = frames.at(frame);
  const double cx = width / 2.0, cy = height / 2.0;
  Vec3 dc{(px - cx) / focalPx, (py - cy) / focalPx, 1.0};
  dir = Vec3{m.rotation[0] * dc.x + m.rotation[1] * dc.y + m.rotation[2] * dc.z,
             m.rotation[3] * dc.x + m.rotation[4] * dc.y + m.rotation[5] * dc.z,
             m.rotation[6] * dc.x + m.rotation[7] * dc.y + m.rotation[8] * dc.z}
            .normalized();
  origin = m.position;
}

}  // namespace prf::scene
