#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "prf/common.hpp"
#include "prf/image.hpp"
#include "prf/scene.hpp"
#include "prf/trainer.hpp"

namespace prf {

// 10 log10(1 / MSE) over all pixels and channels; +inf when the images match.
double psnr(const Image& img, const Image& ref);

// Mean local SSIM on channel-mean grayscale, 11x11 Gaussian window sigma=1.5,
// K1=0.01, K2=0.03, windows fully inside the image.
double ssim(const Image& img, const Image& ref);

// Voxelized velocities on an n^3 lattice of cell centers, x-major. Invalid
// voxels always carry zero vectors.
struct VelocityField {
  int n = 0;
  AABB bbox;
  std::vector<Vec3> v;
  std::vector<uint8_t> valid;

  static VelocityField zeros(int n, const AABB& bbox);
};

// Ground truth voxelized from the analytic scene velocities; every voxel valid.
VelocityField gtVelocityField(const scene::SceneSpec& spec, double t, int n);

// Per voxel, the mean finite-difference velocity (p(t+dt) - p(t)) / dt of the
// alive particles whose position at t falls inside it; empty voxels invalid.
VelocityField particleVelocityField(const ParticleSystem<double>& ps,
                                    const MotionNet<double>& motion, const AABB& bbox,
                                    double t, double dt, int n);

// Velocity implied by a backward deformation field, (df(x,t) - df(x,t+dt)) / dt
// at occupied cell centers; unoccupied voxels are zeroed and marked invalid.
VelocityField deformationVelocityField(
    const std::function<Vec3(const Vec3&, double)>& df,
    const std::function<bool(const Vec3&, double)>& occupied, const AABB& bbox, double t,
    double dt, int n);

// Mean Euclidean norm of per-voxel differences over the full lattice; invalid
// voxels contribute their zero vectors.
double mfe(const VelocityField& a, const VelocityField& b);

struct EvalOptions {
  int resolution = 30;     // voxels per axis
  double dt = 0.01;
  std::vector<double> times{0.1, 0.3, 0.5, 0.7, 0.9};
  int samplesPerRay = 128;
  double epsAlpha = 1e-4;  // density threshold for the deformation zero-out
  std::array<double, 3> background{1, 1, 1};
};

struct PerView {
  int frame = 0;
  double time = 0, psnr = 0, ssim = 0;
};

struct EvalReport {
  std::string sceneName;
  int64_t steps = 0;
  double psnrMean = 0, ssimMean = 0;
  std::vector<PerView> perView;
  double mfeParticles = 0, mfeZeroMotion = 0;
  std::optional<double> mfeBaseline;
  std::vector<double> mfeParticlesPerTime, mfeZeroPerTime, mfeBaselinePerTime;
  bool hasMotionMetrics = false;
  EvalOptions protocol;

  std::string toJson() const;
};

// Velocity field the model itself implies at time t: particles for the full
// model, the warp for the deformation baseline, zeros for the static one.
VelocityField modelVelocityField(const Model<double>& model, double t, double dt, int n,
                                 double epsAlpha);

// Renders every held-out view, scores it, and runs the motion protocol when
// the dataset carries its generating scene.
EvalReport evaluate(const Model<double>& model, int64_t steps, const scene::Dataset& ds,
                    const EvalOptions& opt = {}, const Model<double>* baseline = nullptr);

}  // namespace prf
