#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <vector>

#include "oracles.hpp"
#include "prf/grids.hpp"
#include "prf/ndiff.hpp"
#include "prf/particles.hpp"
#include "prf/radiance.hpp"
#include "prf/rng.hpp"

using prf::AABB;
using prf::FeatureGrid;
using prf::MotionNet;
using prf::OccupancyMask;
using prf::ParticleSystem;
using prf::RadianceNets;
using prf::Rng;
using prf::SampleBatch;
using prf::Vec3;
using prf::Vec3i;
using GraphD = prf::nd::Graph<double>;
using RefD = GraphD::Ref;

namespace {

constexpr std::array<double, 3> kWhite = {1.0, 1.0, 1.0};

// Heads forced to constants: sigma = softplus(sigmaBias + shift), rgb =
// sigmoid(colorBias) at every sample, regardless of field and position.
void pinHeads(RadianceNets<double>& nets, double sigmaBias,
              const std::array<double, 3>& colorBias) {
  for (int i : {4, 8}) std::fill(nets.params[i].data.begin(), nets.params[i].data.end(), 0.0);
  nets.params[5].data[0] = sigmaBias;
  for (int a = 0; a < 3; ++a) nets.params[9].data[a] = colorBias[a];
}

FeatureGrid<double> unitGeom(Vec3i extents, int64_t channels) {
  return FeatureGrid<double>::zeros(extents, channels, {{-1, -1, -1}, {1, 1, 1}});
}

std::vector<Vec3> rayThroughCenter() { return {Vec3{0, 0, -3}}; }
std::vector<Vec3> dirForward() { return {Vec3{0, 0, 1}}; }

}  // namespace

TEST_CASE("stratified sampling hits midpoints without jitter and stays ordered") {
  auto s = prf::sampleRay<double>({0, 0, 0}, {0, 0, 1}, 1.0, 3.0, 2, nullptr);
  CHECK(s.depths[0] == doctest::Approx(1.5).epsilon(1e-15));
  CHECK(s.depths[1] == doctest::Approx(2.5).epsilon(1e-15));
  CHECK(s.deltas[0] == doctest::Approx(1.0));
  CHECK(s.deltas[1] == doctest::Approx(1.0));

  Rng rng(7);
  for (int rep = 0; rep < 200; ++rep) {
    auto r = prf::sampleRay<double>({0, 0, 0}, {0, 0, 1}, 0.5, 2.7, 9, &rng);
    for (int k = 0; k < 9; ++k) {
      CHECK(r.depths[k] >= 0.5);
      CHECK(r.depths[k] <= 2.7);
      if (k) CHECK(r.depths[k] > r.depths[k - 1]);
      CHECK(r.deltas[k] == doctest::Approx((2.7 - 0.5) / 9));
    }
  }

  CHECK_THROWS(prf::sampleRay<double>({0, 0, 0}, {0, 0, 1}, 0.0, 1.0, 4, nullptr));
  CHECK_THROWS(prf::sampleRay<double>({0, 0, 0}, {0, 0, 1}, 2.0, 1.0, 4, nullptr));
  CHECK_THROWS(prf::sampleRay<double>({0, 0, 0}, {0, 0, 1}, 1.0, 2.0, 1, nullptr));
}

TEST_CASE("stratified sample means converge to sub-interval centers") {
  const int n = 4, seeds = 10000;
  const double sn = 0.5, sf = 2.5, w = (sf - sn) / n;
  std::vector<double> mean(n, 0.0);
  for (int s = 0; s < seeds; ++s) {
    Rng rng(1000 + s);
    auto r = prf::sampleRay<double>({0, 0, 0}, {0, 0, 1}, sn, sf, n, &rng);
    for (int k = 0; k < n; ++k) mean[k] += r.depths[k];
  }
  // 4 sigma Monte-Carlo band: sd of a bin-uniform draw is w/sqrt(12).
  const double tol = 4.0 * w / std::sqrt(12.0 * seeds);
  for (int k = 0; k < n; ++k)
    CHECK(std::abs(mean[k] / seeds - (sn + (k + 0.5) * w)) < tol);
}

TEST_CASE("query with pinned heads is constant; repeated queries are identical") {
  Rng rng(11);
  auto geom = unitGeom({5, 5, 5}, 4);
  auto nets = RadianceNets<double>::init(4, 16, rng);
  pinHeads(nets, 0.0, {0.0, 0.0, 0.0});

  auto pts = std::make_shared<std::vector<double>>(std::vector<double>{
      0.1, -0.4, 0.8, -0.9, 0.2, 0.0, 0.5, 0.5, -0.5});
  auto dirs = std::make_shared<std::vector<double>>(9, 0.0);
  for (int i = 0; i < 3; ++i) (*dirs)[i * 3 + 2] = 1.0;

  std::vector<double> gridVals(geom.nodeCount() * 4);
  for (auto& v : gridVals) v = rng.uniform(-1, 1);

  const double sigmaWant = std::log1p(std::exp(-10.0));
  GraphD g;
  auto refs = bindTensors(g, nets.params);
  auto q = nets.query(g, refs, g.constant(geom.nodeCount(), 4, gridVals), geom, pts, dirs);
  for (double s : g.val(q.sigma)) CHECK(s == doctest::Approx(sigmaWant).epsilon(1e-12));
  for (double c : g.val(q.rgb)) CHECK(c == doctest::Approx(0.5).epsilon(1e-12));

  // Purity: a second graph reproduces the first bitwise.
  GraphD g2;
  auto refs2 = bindTensors(g2, nets.params);
  auto q2 = nets.query(g2, refs2, g2.constant(geom.nodeCount(), 4, gridVals), geom, pts, dirs);
  CHECK(g.val(q.sigma) == g2.val(q2.sigma));
  CHECK(g.val(q.rgb) == g2.val(q2.rgb));
}

TEST_CASE("density gradients w.r.t. grid node features match finite differences") {
  Rng rng(23);
  auto geom = unitGeom({4, 4, 4}, 3);
  auto nets = RadianceNets<double>::init(3, 16, rng);
  nets.sigmaShift = 0.0;  // keep softplus slopes O(1) so FD is well conditioned

  std::vector<double> gridVals(geom.nodeCount() * 3);
  for (auto& v : gridVals) v = rng.uniform(-1, 1);
  auto pts = std::make_shared<std::vector<double>>();
  for (int i = 0; i < 6; ++i)
    for (int a = 0; a < 3; ++a) pts->push_back(rng.uniform(-0.9, 0.9));
  auto dirs = std::make_shared<std::vector<double>>(pts->size(), 0.0);
  for (size_t i = 0; i < dirs->size() / 3; ++i) (*dirs)[i * 3 + 1] = 1.0;

  auto sigmaSum = [&](const std::vector<double>& gv, std::vector<double>* grad) {
    GraphD g;
    auto refs = bindTensors(g, nets.params);
    auto grid = g.leaf(geom.nodeCount(), 3, gv.data());
    auto q = nets.query(g, refs, grid, geom, pts, dirs);
    auto root = g.sum(q.sigma);
    if (grad) {
      g.backward(root);
      *grad = g.grad(grid);
    }
    return g.val(root)[0];
  };

  std::vector<double> grad;
  sigmaSum(gridVals, &grad);
  const double h = 1e-6;
  for (int rep = 0; rep < 24; ++rep) {
    size_t e = rng.uniformInt(gridVals.size());
    auto plus = gridVals, minus = gridVals;
    plus[e] += h;
    minus[e] -= h;
    double fd = (sigmaSum(plus, nullptr) - sigmaSum(minus, nullptr)) / (2 * h);
    CHECK(std::abs(grad[e] - fd) / std::max({1.0, std::abs(fd)}) < 1e-6);
  }
}

TEST_CASE("near-zero density renders the background with full transmittance") {
  Rng rng(3);
  auto geom = unitGeom({4, 4, 4}, 2);
  auto nets = RadianceNets<double>::init(2, 8, rng);
  nets.sigmaShift = -40.0;
  pinHeads(nets, 0.0, {0.3, -0.2, 0.9});

  auto batch = prf::buildSampleBatch<double>(rayThroughCenter(), dirForward(), geom.bbox, 16,
                                             nullptr);
  GraphD g;
  auto refs = bindTensors(g, nets.params);
  std::vector<double> zeros(geom.nodeCount() * 2, 0.0);
  auto out = prf::renderSamples(g, nets, refs, g.constant(geom.nodeCount(), 2, zeros), geom,
                                batch, kWhite);
  const auto& c = g.val(out.color);
  CHECK(c[0] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(c[1] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(c[2] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(c[3] == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("an opaque first sample owns the ray") {
  Rng rng(5);
  auto geom = unitGeom({4, 4, 4}, 2);
  auto nets = RadianceNets<double>::init(2, 8, rng);
  pinHeads(nets, 1e4, {0.2, -0.3, 0.8});

  auto batch = prf::buildSampleBatch<double>(rayThroughCenter(), dirForward(), geom.bbox, 8,
                                             nullptr);
  GraphD g;
  auto refs = bindTensors(g, nets.params);
  std::vector<double> zeros(geom.nodeCount() * 2, 0.0);
  auto out = prf::renderSamples(g, nets, refs, g.constant(geom.nodeCount(), 2, zeros), geom,
                                batch, kWhite);
  const auto& c = g.val(out.color);
  auto sig = [](double b) { return 1.0 / (1.0 + std::exp(-b)); };
  CHECK(c[0] == doctest::Approx(sig(0.2)).epsilon(1e-12));
  CHECK(c[1] == doctest::Approx(sig(-0.3)).epsilon(1e-12));
  CHECK(c[2] == doctest::Approx(sig(0.8)).epsilon(1e-12));
  CHECK(c[3] == 0.0);
  CHECK((*out.weights)[0] == 1.0);
  for (size_t i = 1; i < out.weights->size(); ++i) CHECK((*out.weights)[i] == 0.0);
}

TEST_CASE("constant density and color match the closed-form transmittance") {
  Rng rng(9);
  auto geom = unitGeom({4, 4, 4}, 2);
  auto nets = RadianceNets<double>::init(2, 8, rng);
  const double sigmaBias = 9.2;  // sigma = softplus(9.2 - 10), order one
  pinHeads(nets, sigmaBias, {0.4, 0.1, -0.6});
  const double sigma0 = std::log1p(std::exp(sigmaBias - 10.0));

  auto origins = rayThroughCenter();
  auto dirs = dirForward();
  auto batch = prf::buildSampleBatch<double>(origins, dirs, geom.bbox, 256, nullptr);
  double tn, tf;
  REQUIRE(geom.bbox.intersectRay(origins[0], dirs[0], tn, tf));
  tn = std::max(tn, 1e-4);

  GraphD g;
  auto refs = bindTensors(g, nets.params);
  std::vector<double> zeros(geom.nodeCount() * 2, 0.0);
  auto out = prf::renderSamples(g, nets, refs, g.constant(geom.nodeCount(), 2, zeros), geom,
                                batch, kWhite);
  const auto& c = g.val(out.color);
  const double tFarWant = std::exp(-sigma0 * (tf - tn));
  CHECK(std::abs(c[3] - tFarWant) < 1e-3);
  auto sig = [](double b) { return 1.0 / (1.0 + std::exp(-b)); };
  for (int a = 0; a < 3; ++a) {
    double want = sig(std::array<double, 3>{0.4, 0.1, -0.6}[a]) * (1 - tFarWant) + tFarWant;
    CHECK(std::abs(c[a] - want) < 1e-3);
  }
}

TEST_CASE("weights plus residual transmittance partition unity; denser is dimmer") {
  Rng rng(31);
  auto geom = unitGeom({5, 5, 5}, 4);
  auto nets = RadianceNets<double>::init(4, 16, rng);
  std::vector<double> gridVals(geom.nodeCount() * 4);
  for (auto& v : gridVals) v = rng.uniform(-2, 2);

  std::vector<Vec3> origins, dirs;
  for (int i = 0; i < 6; ++i) {
    origins.push_back({rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), -3.0});
    dirs.push_back(Vec3{rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2), 1.0}.normalized());
  }
  Rng jitter(77);
  auto batch = prf::buildSampleBatch<double>(origins, dirs, geom.bbox, 32, &jitter);

  auto render = [&](double biasBump) {
    GraphD g;
    auto netsB = nets;
    netsB.params[5].data[0] += biasBump;
    auto refs = bindTensors(g, netsB.params);
    auto out = prf::renderSamples(g, netsB, refs,
                                  g.constant(geom.nodeCount(), 4, gridVals), geom, batch,
                                  kWhite);
    return std::make_pair(g.val(out.color), *out.weights);
  };

  auto [color, weights] = render(0.0);
  for (size_t r = 0; r + 1 < batch.offsets->size(); ++r) {
    double sum = color[r * 4 + 3];
    double tPrev = 1.0, tCur = 1.0;
    for (int64_t i = (*batch.offsets)[r]; i < (*batch.offsets)[r + 1]; ++i) {
      sum += weights[i];
      tCur -= weights[i];  // T_{k+1} = T_k - w_k
      CHECK(tCur <= tPrev + 1e-12);
      tPrev = tCur;
    }
    CHECK(std::abs(sum - 1.0) < 1e-6);
    CHECK(color[r * 4 + 3] <= tCur + 1e-9);
  }

  auto [denser, w2] = render(3.0);
  for (size_t r = 0; r + 1 < batch.offsets->size(); ++r)
    CHECK(denser[r * 4 + 3] <= color[r * 4 + 3] + 1e-12);
}

TEST_CASE("rays that miss the box stay empty and composite to the background") {
  auto geom = unitGeom({4, 4, 4}, 2);
  std::vector<Vec3> origins = {{0, 0, -3}, {10, 10, -3}};
  std::vector<Vec3> dirs = {{0, 0, -1}, {0, 0, 1}};  // first points away, second misses
  auto batch = prf::buildSampleBatch<double>(origins, dirs, geom.bbox, 8, nullptr);
  CHECK(batch.count() == 0);
  CHECK(batch.rays() == 2);

  Rng rng(2);
  auto nets = RadianceNets<double>::init(2, 8, rng);
  GraphD g;
  auto refs = bindTensors(g, nets.params);
  std::vector<double> zeros(geom.nodeCount() * 2, 0.0);
  auto out = prf::renderSamples(g, nets, refs, g.constant(geom.nodeCount(), 2, zeros), geom,
                                batch, kWhite);
  const auto& c = g.val(out.color);
  for (int r = 0; r < 2; ++r) {
    CHECK(c[r * 4] == 1.0);
    CHECK(c[r * 4 + 3] == 1.0);
  }
}

TEST_CASE("occupancy culling drops samples in free cells") {
  auto geom = unitGeom({5, 5, 5}, 2);
  std::vector<Vec3> origins = {{0, 0, -3}};
  std::vector<Vec3> dirs = {{0, 0, 1}};

  OccupancyMask allFree;
  allFree.extents = geom.extents;
  allFree.occupied.assign(geom.nodeCount(), 0);
  auto culled = prf::buildSampleBatch<double>(origins, dirs, geom.bbox, 32, nullptr, &allFree,
                                              &geom);
  CHECK(culled.count() == 0);

  OccupancyMask allOcc = allFree;
  allOcc.occupied.assign(geom.nodeCount(), 1);
  auto full = prf::buildSampleBatch<double>(origins, dirs, geom.bbox, 32, nullptr, &allOcc,
                                            &geom);
  auto plain = prf::buildSampleBatch<double>(origins, dirs, geom.bbox, 32, nullptr);
  CHECK(full.count() == plain.count());
  CHECK(*full.points == *plain.points);

  // Only the far half (grid z >= 2) occupied: every kept sample's cell must
  // touch an occupied node, so grid z >= 1 after the corner rule.
  OccupancyMask half = allFree;
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 5; ++j)
      for (int k = 2; k < 5; ++k) half.occupied[geom.nodeIndex(i, j, k)] = 1;
  auto part = prf::buildSampleBatch<double>(origins, dirs, geom.bbox, 32, nullptr, &half,
                                            &geom);
  CHECK(part.count() > 0);
  CHECK(part.count() < plain.count());
  for (int64_t q = 0; q < part.count(); ++q) {
    Vec3 p{(*part.points)[q * 3], (*part.points)[q * 3 + 1], (*part.points)[q * 3 + 2]};
    CHECK(geom.worldToGrid(p).z >= 1.0);
  }
}

TEST_CASE("evaluation renderer agrees with the training path") {
  Rng rng(41);
  auto geom = unitGeom({5, 5, 5}, 4);
  auto nets = RadianceNets<double>::init(4, 16, rng);
  std::vector<double> gridVals(geom.nodeCount() * 4);
  for (auto& v : gridVals) v = rng.uniform(-1.5, 1.5);

  std::vector<Vec3> origins, dirs;
  for (int i = 0; i < 5; ++i) {
    origins.push_back({rng.uniform(-0.4, 0.4), rng.uniform(-0.4, 0.4), -2.5});
    dirs.push_back(Vec3{rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3), 1.0}.normalized());
  }
  origins.push_back({5, 5, 5});  // misses
  dirs.push_back({0, 1, 0});

  auto batch = prf::buildSampleBatch<double>(origins, dirs, geom.bbox, 24, nullptr);
  GraphD g;
  auto refs = bindTensors(g, nets.params);
  auto out = prf::renderSamples(g, nets, refs, g.constant(geom.nodeCount(), 4, gridVals),
                                geom, batch, kWhite);
  const auto& train = g.val(out.color);

  auto eval = prf::renderRaysEval(gridVals, geom, nets, origins, dirs, 24, nullptr,
                                  std::array<double, 3>{1, 1, 1});
  REQUIRE(eval.size() == train.size());
  for (size_t i = 0; i < eval.size(); ++i)
    CHECK(std::abs(eval[i] - train[i]) < 1e-12);
}

TEST_CASE("untrained occupancy is uniformly free; hot features switch nodes on") {
  Rng rng(55);
  AABB box{{-1, -1, -1}, {1, 1, 1}};
  auto geom = unitGeom({8, 8, 8}, 2);
  auto motion = MotionNet<double>::init(8, rng);
  auto ps = ParticleSystem<double>::init(20, 2, box, rng);
  auto nets = RadianceNets<double>::init(2, 16, rng);

  prf::Tensor<double> staticVals = prf::Tensor<double>::zeros("grid.static", geom.nodeCount(), 2);
  auto occ = prf::updateOccupancy(staticVals, geom, ps, motion, nets, 1e-4);
  CHECK(int64_t(occ.occupied.size()) == geom.nodeCount());
  for (auto o : occ.occupied) CHECK(o == 0);

  // Route the raw feature sum into the density pre-activation: sigma =
  // softplus(f0 + f1 - 10), so nodes with feature 30 turn on.
  for (auto& p : nets.params)
    std::fill(p.data.begin(), p.data.end(), 0.0);
  nets.params[0].data[0 * 16 + 0] = 1.0;                      // raw f0 -> h0
  nets.params[0].data[1 * 16 + 0] = 1.0;                      // raw f1 -> h0
  nets.params[2].data[0 * 16 + 0] = 1.0;                      // h0 -> v0
  nets.params[4].data[0] = 1.0;                               // v0 -> sigma preact
  ParticleSystem<double> none = ParticleSystem<double>::init(0, 2, box, rng);

  for (int i = 2; i < 5; ++i)
    for (int j = 2; j < 5; ++j)
      for (int k = 2; k < 5; ++k) staticVals.data[geom.nodeIndex(i, j, k) * 2] = 30.0;
  auto occ2 = prf::updateOccupancy(staticVals, geom, none, motion, nets, 1e-4);
  for (int i = 0; i < 8; ++i)
    for (int j = 0; j < 8; ++j)
      for (int k = 0; k < 8; ++k) {
        bool hot = i >= 2 && i < 5 && j >= 2 && j < 5 && k >= 2 && k < 5;
        CHECK(occ2.occupied[geom.nodeIndex(i, j, k)] == (hot ? 1 : 0));
      }
}

TEST_CASE("occupancy tracks a particle across probe times") {
  Rng rng(66);
  AABB box{{-1, -1, -1}, {1, 1, 1}};
  auto geom = unitGeom({5, 5, 5}, 1);

  // Hand-routed motion: offset = u * t through relu-transparent channels.
  auto motion = MotionNet<double>::init(8, rng);
  for (auto& p : motion.params) std::fill(p.data.begin(), p.data.end(), 0.0);
  motion.params[0].data[0 * 8 + 0] = 1.0;
  motion.params[2].data[0 * 8 + 0] = 1.0;
  motion.params[4].data[0 * 8 + 0] = 1.0;
  motion.params[6].data[0 * 8 + 0] = 1.0;
  motion.params[8].data[0 * 3 + 0] = 1.0;  // moves +x by t

  ParticleSystem<double> ps = ParticleSystem<double>::init(1, 1, box, rng);
  ps.starts.data = {-0.5, 0.0, 0.0};  // node (1,2,2); lands on (3,2,2) at t=1
  ps.features.data = {60.0};

  auto nets = RadianceNets<double>::init(1, 16, rng);
  for (auto& p : nets.params) std::fill(p.data.begin(), p.data.end(), 0.0);
  nets.params[0].data[0 * 16 + 0] = 1.0;
  nets.params[2].data[0 * 16 + 0] = 1.0;
  nets.params[4].data[0] = 1.0;

  prf::Tensor<double> staticVals = prf::Tensor<double>::zeros("grid.static", geom.nodeCount(), 1);
  auto occ = prf::updateOccupancy(staticVals, geom, ps, motion, nets, 1e-4);
  CHECK(occ.occupied[geom.nodeIndex(1, 2, 2)] == 1);  // t = 0
  CHECK(occ.occupied[geom.nodeIndex(3, 2, 2)] == 1);  // t = 1
  CHECK(occ.occupied[geom.nodeIndex(0, 0, 0)] == 0);
  CHECK(occ.occupied[geom.nodeIndex(4, 4, 4)] == 0);
}

TEST_CASE("ray debug dump is one row per kept sample") {
  Rng rng(8);
  auto geom = unitGeom({4, 4, 4}, 2);
  auto nets = RadianceNets<double>::init(2, 8, rng);
  std::vector<Vec3> origins = {{0, 0, -3}, {9, 9, 9}};
  std::vector<Vec3> dirs = {{0, 0, 1}, {0, 1, 0}};
  auto batch = prf::buildSampleBatch<double>(origins, dirs, geom.bbox, 4, nullptr);

  GraphD g;
  auto refs = bindTensors(g, nets.params);
  std::vector<double> zeros(geom.nodeCount() * 2, 0.0);
  auto out = prf::renderSamples(g, nets, refs, g.constant(geom.nodeCount(), 2, zeros), geom,
                                batch, kWhite);
  const std::string path = "/tmp/prf_ray_debug.csv";
  prf::writeRayDebugCsv(path, batch, g.val(out.sigma), *out.weights);

  std::ifstream f(path);
  std::string line;
  std::getline(f, line);
  CHECK(line == "ray,sample,depth,sigma,weight");
  int rows = 0;
  while (std::getline(f, line))
    if (!line.empty()) ++rows;
  CHECK(rows == batch.count());
  std::remove(path.c_str());
}
