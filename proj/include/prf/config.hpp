#pragma once

#include <cstdint>
#include <string>

namespace prf {

// Flat key=value training configuration. Unknown keys are rejected so that a
// misspelled override can never silently fall back to a default.
struct TrainConfig {
  int64_t steps = 5000;
  int64_t batchRays = 1024;
  int samplesPerRay = 128;
  int64_t particles = 20000;
  int64_t channels = 12;

  // Coarse-to-fine node counts per axis; the grid grows at the two milestone
  // fractions of the step budget.
  int gridCoarseNodes = 24;
  int gridMidNodes = 36;
  int gridFineNodes = 48;
  double milestone1Frac = 0.25;
  double milestone2Frac = 0.5;

  double lrFeatures = 0.005;
  double lrMotion = 0.001;
  double lrGrids = 0.1;
  double lrNets = 8e-4;
  double lrStarts = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double adamEps = 1e-8;
  double lrDecay = 0.1;

  int64_t removalCadenceSteps = 2000;
  double epsAlpha = 1e-4;
  double epsTrajBboxUnits = 0.1;
  double resampleRadiusVoxels = 0.1;
  int trajSamples = 16;

  int widthMotion = 64;
  int widthRadiance = 64;

  double wPtrgb = 0.01;
  double wBg = 0.001;
  double wTvf = 0.01;
  double wTvm = 0.01;

  uint64_t seed = 0;
  int bgWhite = 1;
  std::string model = "dap";  // dap | deform | static

  int64_t logEvery = 1;
  int64_t checkpointEvery = 0;  // 0: final checkpoint only
  int64_t valEvery = 0;         // 0: no periodic validation renders

  int64_t milestone1Step() const { return static_cast<int64_t>(milestone1Frac * steps); }
  int64_t milestone2Step() const { return static_cast<int64_t>(milestone2Frac * steps); }
};

// Applies one key=value pair; throws on unknown keys or unparsable values.
void applyConfigKey(TrainConfig& cfg, const std::string& key, const std::string& value);

// Parses "key = value" lines; '#' starts a comment; blank lines are skipped.
// Errors carry the 1-based line number.
TrainConfig parseConfigText(const std::string& text);
TrainConfig loadConfigFile(const std::string& path);

// Canonical round-trippable echo: one line per key, fixed order.
std::string serializeConfig(const TrainConfig& cfg);

// Enforces the documented invariants (positive rates, ordered milestones,
// a known model kind, positive geometry).
void validateConfig(const TrainConfig& cfg);

}  // namespace prf
