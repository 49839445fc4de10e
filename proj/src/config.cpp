#include "prf/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "prf/common.hpp"

namespace prf {

namespace {

struct Field {
  std::function<void(TrainConfig&, const std::string&)> set;
  std::function<std::string(const TrainConfig&)> get;
};

template <typename T>
T parseNumber(const std::string& s) {
  T out{};
  if constexpr (std::is_floating_point_v<T>) {
    size_t used = 0;
    out = static_cast<T>(std::stod(s, &used));
    if (used != s.size()) throw err("trailing characters");
  } else {
    auto r = std::from_chars(s.data(), s.data() + s.size(), out);
    if (r.ec != std::errc() || r.ptr != s.data() + s.size()) throw err("not an integer");
  }
  return out;
}

template <typename T>
std::string printNumber(T v) {
  std::ostringstream s;
  if constexpr (std::is_floating_point_v<T>)
    s.precision(17);
  s << v;
  return s.str();
}

#define NUM_FIELD(member)                                                        \
  Field {                                                                        \
    [](TrainConfig& c, const std::string& v) {                                   \
      c.member = parseNumber<decltype(c.member)>(v);                             \
    },                                                                           \
        [](const TrainConfig& c) { return printNumber(c.member); }               \
  }

// Declaration order here is the canonical serialization order.
const std::vector<std::pair<std::string, Field>>& fields() {
  static const std::vector<std::pair<std::string, Field>> f = {
      {"steps", NUM_FIELD(steps)},
      {"batch_rays", NUM_FIELD(batchRays)},
      {"samples_per_ray", NUM_FIELD(samplesPerRay)},
      {"particles", NUM_FIELD(particles)},
      {"channels", NUM_FIELD(channels)},
      {"grid_coarse_nodes", NUM_FIELD(gridCoarseNodes)},
      {"grid_mid_nodes", NUM_FIELD(gridMidNodes)},
      {"grid_fine_nodes", NUM_FIELD(gridFineNodes)},
      {"milestone1_frac", NUM_FIELD(milestone1Frac)},
      {"milestone2_frac", NUM_FIELD(milestone2Frac)},
      {"lr_features", NUM_FIELD(lrFeatures)},
      {"lr_motion", NUM_FIELD(lrMotion)},
      {"lr_grids", NUM_FIELD(lrGrids)},
      {"lr_nets", NUM_FIELD(lrNets)},
      {"lr_starts", NUM_FIELD(lrStarts)},
      {"beta1", NUM_FIELD(beta1)},
      {"beta2", NUM_FIELD(beta2)},
      {"adam_eps", NUM_FIELD(adamEps)},
      {"lr_decay", NUM_FIELD(lrDecay)},
      {"removal_cadence_steps", NUM_FIELD(removalCadenceSteps)},
      {"eps_alpha", NUM_FIELD(epsAlpha)},
      {"eps_traj_bbox_units", NUM_FIELD(epsTrajBboxUnits)},
      {"resample_radius_voxels", NUM_FIELD(resampleRadiusVoxels)},
      {"traj_samples", NUM_FIELD(trajSamples)},
      {"width_motion", NUM_FIELD(widthMotion)},
      {"width_radiance", NUM_FIELD(widthRadiance)},
      {"w_ptrgb", NUM_FIELD(wPtrgb)},
      {"w_bg", NUM_FIELD(wBg)},
      {"w_tvf", NUM_FIELD(wTvf)},
      {"w_tvm", NUM_FIELD(wTvm)},
      {"seed", NUM_FIELD(seed)},
      {"bg_white", NUM_FIELD(bgWhite)},
      {"model",
       Field{[](TrainConfig& c, const std::string& v) { c.model = v; },
             [](const TrainConfig& c) { return c.model; }}},
      {"log_every", NUM_FIELD(logEvery)},
      {"checkpoint_every", NUM_FIELD(checkpointEvery)},
      {"val_every", NUM_FIELD(valEvery)},
  };
  return f;
}

#undef NUM_FIELD

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

}  // namespace

void applyConfigKey(TrainConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& [name, field] : fields())
    if (name == key) {
      try {
        field.set(cfg, value);
      } catch (const std::exception& e) {
        throw err("config: bad value for '" + key + "': " + e.what());
      }
      return;
    }
  throw err("config: unknown key '" + key + "'");
}

TrainConfig parseConfigText(const std::string& text) {
  TrainConfig cfg;
  std::istringstream in(text);
  std::string line;
  int lineNo = 0;
  while (std::getline(in, line)) {
    ++lineNo;
    auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw err("config line " + std::to_string(lineNo) + ": expected key=value");
    try {
      applyConfigKey(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const std::exception& e) {
      throw err("config line " + std::to_string(lineNo) + ": " + e.what());
    }
  }
  return cfg;
}

TrainConfig loadConfigFile(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw err("config: cannot open " + path);
  std::ostringstream buf;
  buf << f.rdbuf();
  return parseConfigText(buf.str());
}

std::string serializeConfig(const TrainConfig& cfg) {
  std::ostringstream out;
  for (const auto& [name, field] : fields()) out << name << " = " << field.get(cfg) << "\n";
  return out.str();
}

void validateConfig(const TrainConfig& cfg) {
  auto need = [](bool ok, const std::string& what) {
    if (!ok) throw err("config: " + what);
  };
  need(cfg.steps >= 0, "steps must be >= 0");
  need(cfg.batchRays > 0, "batch_rays must be > 0");
  need(cfg.samplesPerRay >= 2, "samples_per_ray must be >= 2");
  need(cfg.particles >= 0, "particles must be >= 0");
  need(cfg.channels > 0, "channels must be > 0");
  need(cfg.gridCoarseNodes >= 2 && cfg.gridMidNodes >= 2 && cfg.gridFineNodes >= 2,
       "grid node counts must be >= 2");
  // Zero is allowed so a single group can be frozen in place.
  need(cfg.lrFeatures >= 0 && cfg.lrMotion >= 0 && cfg.lrGrids >= 0 && cfg.lrNets >= 0 &&
           cfg.lrStarts >= 0,
       "learning rates must be >= 0");
  need(cfg.beta1 >= 0 && cfg.beta1 < 1 && cfg.beta2 >= 0 && cfg.beta2 < 1,
       "betas must lie in [0,1)");
  need(cfg.adamEps > 0, "adam_eps must be > 0");
  need(cfg.lrDecay > 0 && cfg.lrDecay <= 1, "lr_decay must lie in (0,1]");
  need(cfg.removalCadenceSteps > 0, "removal_cadence_steps must be > 0");
  need(cfg.epsAlpha > 0, "eps_alpha must be > 0");
  need(cfg.epsTrajBboxUnits >= 0, "eps_traj_bbox_units must be >= 0");
  need(cfg.resampleRadiusVoxels > 0, "resample_radius_voxels must be > 0");
  need(cfg.trajSamples >= 2, "traj_samples must be >= 2");
  need(cfg.widthMotion > 0 && cfg.widthRadiance > 0, "net widths must be > 0");
  need(cfg.wPtrgb >= 0 && cfg.wBg >= 0 && cfg.wTvf >= 0 && cfg.wTvm >= 0,
       "loss weights must be >= 0");
  need(cfg.model == "dap" || cfg.model == "deform" || cfg.model == "static",
       "model must be dap, deform, or static");
  need(cfg.model != "dap" || cfg.particles > 0, "dap model needs particles > 0");
  need(cfg.logEvery > 0, "log_every must be > 0");
  if (cfg.steps > 0) {
    need(cfg.milestone1Frac > 0 && cfg.milestone2Frac > cfg.milestone1Frac &&
             cfg.milestone2Frac < 1,
         "milestone fractions must satisfy 0 < m1 < m2 < 1");
  }
}

}  // namespace prf
