#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "prf/common.hpp"
#include "prf/image.hpp"

namespace prf::scene {

// Analytic object trajectories with closed-form velocities. Positions are
// center + offsetAt(t) with offsetAt(0) = 0; velocities at fold points of the
// bounce wave take the left-sided limit (right-sided at t = 0).
struct Trajectory {
  enum class Kind { Static, Linear, Circular, Bounce };
  Kind kind = Kind::Static;
  Vec3 u;                                  // linear velocity
  double radius = 0, omega = 0, phase = 0; // circular, in the xz-plane
  double rise = 0, period = 1;             // bounce amplitude and full period
  Vec3 drift;                              // bounce lateral drift velocity

  Vec3 offsetAt(double t) const;
  Vec3 velocityAt(double t) const;
};

struct Primitive {
  enum class Shape { Sphere, Box };
  Shape shape = Shape::Sphere;
  Vec3 center;
  double radius = 0; // sphere
  Vec3 half;         // box half-extents
  Vec3 albedo{0.8, 0.8, 0.8};
  bool dynamic = false;
  Trajectory traj;

  Vec3 centerAt(double t) const { return dynamic ? center + traj.offsetAt(t) : center; }
};

struct SceneSpec {
  std::string name;
  AABB bbox{{-1, -1, -1}, {1, 1, 1}};
  std::vector<Primitive> prims;
  Vec3 lightDir{0.436436, 0.872872, 0.218218}; // toward light, unit
  Vec3 background{1, 1, 1};

  // "fall": sphere dropping onto a floor slab. "orbit": sphere circling a
  // static block. "bounce": sphere on a triangle-wave vertical path with
  // lateral drift.
  static SceneSpec preset(const std::string& name);
};

// Reads a scene description file (the same JSON the generator writes as its
// sidecar). Parse errors report the line in the file.
SceneSpec loadSceneSpec(const std::string& path);

// Nearest-hit Lambertian trace; background where nothing is hit.
Vec3 traceRay(const SceneSpec& spec, const Vec3& origin, const Vec3& dir, double t);
Image renderFrame(const SceneSpec& spec, int width, int height, double focalPx,
                  const std::array<double, 9>& rotation, const Vec3& position, double t);

// Signed distance to the union of primitives at time t (dynamicOnly restricts
// to moving primitives). Negative inside.
double sdfAt(const SceneSpec& spec, const Vec3& x, double t, bool dynamicOnly = false);

// Velocity of the moving material at x (zero outside every dynamic primitive).
Vec3 gtVelocityAt(const SceneSpec& spec, const Vec3& x, double t);

// Velocity field voxelized on an n^3 lattice of cell centers over the bbox.
std::vector<Vec3> gtVelocityGrid(const SceneSpec& spec, double t, int n);

struct FrameMeta {
  std::string file;
  double time = 0;
  std::array<double, 9> rotation{}; // camera-to-world, row-major; x right,
                                    // y down, z forward
  Vec3 position;
};

struct Dataset {
  int width = 0, height = 0;
  double focalPx = 0;
  AABB bbox;
  std::vector<FrameMeta> frames;
  std::vector<int> trainIdx, testIdx;
  std::string dir;
  std::optional<SceneSpec> spec; // recovered when the generator's sidecar file exists

  Image loadFrame(int i) const;
  // World ray through pixel coordinates (px, py are continuous; pixel centers
  // sit at integer + 0.5).
  void pixelRay(int frame, double px, double py, Vec3& origin, Vec3& dir) const;
};

// Writes frames/####.png, manifest.json, and a scene sidecar for ground-truth
// queries. Frame i sits at time i/(nFrames-1); every 8th frame (offset 4) is
// held out as test.
void generateDataset(const SceneSpec& spec, const std::string& outDir, int nFrames,
                     int width, int height);

Dataset loadDataset(const std::string& dir);

}  // namespace prf::scene
