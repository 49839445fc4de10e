#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "prf/config.hpp"
#include "prf/scene.hpp"
#include "prf/trainer.hpp"

using prf::Adam;
using prf::readCheckpoint;
using prf::Tensor;
using prf::TrainConfig;
using prf::Trainer;

namespace {

std::string fileBytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  REQUIRE(f.good());
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

// One shared miniature dataset for every trainer case.
const prf::scene::Dataset& testDataset() {
  static const prf::scene::Dataset ds = [] {
    const std::string dir = "trainer_test_data";
    if (!std::filesystem::exists(dir + "/manifest.json"))
      prf::scene::generateDataset(prf::scene::SceneSpec::preset("fall"), dir, 6, 16, 16);
    return prf::scene::loadDataset(dir);
  }();
  return ds;
}

TrainConfig tinyConfig() {
  TrainConfig cfg;
  cfg.steps = 16;
  cfg.batchRays = 8;
  cfg.samplesPerRay = 8;
  cfg.particles = 24;
  cfg.channels = 4;
  cfg.gridCoarseNodes = 2;
  cfg.gridMidNodes = 3;
  cfg.gridFineNodes = 4;
  cfg.removalCadenceSteps = 6;
  cfg.trajSamples = 4;
  cfg.widthMotion = 8;
  cfg.widthRadiance = 8;
  cfg.seed = 7;
  return cfg;
}

// Same geometry at every milestone, so resizes are no-ops.
TrainConfig flatGridConfig() {
  TrainConfig cfg = tinyConfig();
  cfg.gridCoarseNodes = cfg.gridMidNodes = cfg.gridFineNodes = 4;
  cfg.removalCadenceSteps = 100;
  return cfg;
}

std::vector<std::vector<double>> snapshot(prf::Model<double>& m) {
  std::vector<std::vector<double>> out;
  for (auto* t : m.learnables()) out.push_back(t->data);
  return out;
}

}  // namespace

TEST_CASE("decay factor follows the tenth-per-run schedule") {
  CHECK(prf::lrDecayFactor(0, 5000, 0.1) == 1.0);
  CHECK(prf::lrDecayFactor(5000, 5000, 0.1) == 0.1);
  CHECK(prf::lrDecayFactor(2500, 5000, 0.1) == doctest::Approx(std::pow(10.0, -0.5)).epsilon(1e-12));
  double prev = 2.0;
  for (int s = 0; s <= 10; ++s) {
    double f = prf::lrDecayFactor(s, 10, 0.1);
    CHECK(f < prev);
    prev = f;
  }
}

TEST_CASE("adam matches a longhand trace on a quadratic") {
  Tensor<double> theta = Tensor<double>::zeros("grid.static", 1, 2);
  theta.data = {3.0, -1.5};
  Adam<double> opt;
  opt.attach({&theta});
  std::vector<double> ref = theta.data;
  oracle::AdamTrace trace;
  for (int64_t t = 1; t <= 3; ++t) {
    std::vector<double> grad = {ref[0], ref[1]};  // f = 0.5 |theta|^2
    trace.step(ref, grad, 0.1);
    opt.update(0, theta, {theta.data[0], theta.data[1]}, 0.1, t);
    for (int j = 0; j < 2; ++j) CHECK(theta.data[j] == doctest::Approx(ref[j]).epsilon(1e-12));
  }
}

TEST_CASE("tensor names route to their rate groups") {
  CHECK(prf::groupOf("grid.static") == prf::kGroupGrids);
  CHECK(prf::groupOf("particles.features") == prf::kGroupFeatures);
  CHECK(prf::groupOf("particles.starts") == prf::kGroupStarts);
  CHECK(prf::groupOf("motion.t.w1") == prf::kGroupMotion);
  CHECK(prf::groupOf("radiance.sigma.w") == prf::kGroupNets);
  CHECK_THROWS_AS(prf::groupOf("mystery"), std::runtime_error);
}

TEST_CASE("config text round-trips and rejects unknown keys") {
  TrainConfig cfg = tinyConfig();
  cfg.lrFeatures = 0.0125;
  cfg.model = "deform";
  std::string text = prf::serializeConfig(cfg);
  TrainConfig back = prf::parseConfigText(text);
  CHECK(prf::serializeConfig(back) == text);
  CHECK(back.lrFeatures == cfg.lrFeatures);
  CHECK(back.model == "deform");

  TrainConfig c2 = prf::parseConfigText("steps = 10 # trailing comment\n\n# full line\nbatch_rays=4\n");
  CHECK(c2.steps == 10);
  CHECK(c2.batchRays == 4);

  CHECK_THROWS_WITH_AS(prf::parseConfigText("nonsense = 3\n"),
                       doctest::Contains("unknown key"), std::runtime_error);
  CHECK_THROWS_WITH_AS(prf::parseConfigText("steps = abc\n"), doctest::Contains("line 1"),
                       std::runtime_error);
}

TEST_CASE("config validation accepts zero rates but rejects bad shapes") {
  TrainConfig cfg = tinyConfig();
  cfg.lrMotion = 0.0;
  CHECK_NOTHROW(prf::validateConfig(cfg));
  cfg.lrMotion = -1.0;
  CHECK_THROWS_AS(prf::validateConfig(cfg), std::runtime_error);
  cfg = tinyConfig();
  cfg.samplesPerRay = 1;
  CHECK_THROWS_AS(prf::validateConfig(cfg), std::runtime_error);
  cfg = tinyConfig();
  cfg.model = "hybrid";
  CHECK_THROWS_AS(prf::validateConfig(cfg), std::runtime_error);
  cfg = tinyConfig();
  cfg.particles = 0;
  CHECK_THROWS_AS(prf::validateConfig(cfg), std::runtime_error);
  cfg.model = "static";
  CHECK_NOTHROW(prf::validateConfig(cfg));
}

TEST_CASE("config files load from disk") {
  TrainConfig cfg = tinyConfig();
  cfg.seed = 123;
  std::filesystem::create_directories("trainer_test_out");
  {
    std::ofstream f("trainer_test_out/cfg.txt");
    f << prf::serializeConfig(cfg);
  }
  TrainConfig back = prf::loadConfigFile("trainer_test_out/cfg.txt");
  CHECK(back.seed == 123);
  CHECK_THROWS_AS(prf::loadConfigFile("trainer_test_out/missing.txt"), std::runtime_error);
}

TEST_CASE("zero learning rates freeze every parameter") {
  TrainConfig cfg = flatGridConfig();
  cfg.steps = 3;
  cfg.lrFeatures = cfg.lrMotion = cfg.lrGrids = cfg.lrNets = cfg.lrStarts = 0.0;
  Trainer<double> tr(cfg, testDataset());
  auto before = snapshot(tr.model());
  for (int s = 0; s < 3; ++s) tr.step();
  auto after = snapshot(tr.model());
  REQUIRE(after.size() == before.size());
  for (size_t i = 0; i < before.size(); ++i) CHECK(after[i] == before[i]);
}

TEST_CASE("a zero rate freezes exactly that group") {
  auto changed = [](const std::vector<double>& a, const std::vector<double>& b) {
    return a != b;
  };

  SUBCASE("motion frozen") {
    TrainConfig cfg = flatGridConfig();
    cfg.steps = 3;
    cfg.lrMotion = 0.0;
    Trainer<double> tr(cfg, testDataset());
    auto before = snapshot(tr.model());
    for (int s = 0; s < 3; ++s) tr.step();
    auto tensors = tr.model().learnables();
    for (size_t i = 0; i < tensors.size(); ++i) {
      if (prf::groupOf(tensors[i]->name) == prf::kGroupMotion)
        CHECK(tensors[i]->data == before[i]);
    }
    CHECK(changed(tensors[0]->data, before[0]));                    // grid moved
    CHECK(changed(tensors.back()->data, before[before.size() - 1]));  // nets moved
  }

  SUBCASE("grid frozen") {
    TrainConfig cfg = flatGridConfig();
    cfg.steps = 3;
    cfg.lrGrids = 0.0;
    Trainer<double> tr(cfg, testDataset());
    auto before = snapshot(tr.model());
    for (int s = 0; s < 3; ++s) tr.step();
    auto tensors = tr.model().learnables();
    CHECK(tensors[0]->data == before[0]);
    CHECK(changed(tensors.back()->data, before[before.size() - 1]));
  }
}

TEST_CASE("a small step along the gradient lowers the batch loss") {
  TrainConfig cfg = flatGridConfig();
  cfg.lrFeatures = 5e-4;
  cfg.lrMotion = 1e-4;
  cfg.lrGrids = 1e-2;
  cfg.lrNets = 8e-5;
  cfg.lrStarts = 1e-4;
  // The zero grid sits at the total-variation kink where the subgradient is
  // zero, so only the smooth terms are expected to descend.
  cfg.wTvf = 0.0;
  cfg.wTvm = 0.0;
  Trainer<double> tr(cfg, testDataset());
  auto state = tr.rngState();
  auto first = tr.step();
  tr.setRngState(state);
  auto second = tr.step();  // same frame, pixels, and jitter as the first step
  CHECK(std::isfinite(first.total));
  CHECK(second.total < first.total);
}

TEST_CASE("fixed seeds give identical runs and checkpoints resume bit-exactly") {
  namespace fs = std::filesystem;
  TrainConfig cfg = tinyConfig();
  fs::remove_all("trainer_test_run_a");
  fs::remove_all("trainer_test_run_b");
  Trainer<double> a(cfg, testDataset());
  a.run("trainer_test_run_a");
  Trainer<double> b(cfg, testDataset());
  b.run("trainer_test_run_b");
  const std::string bytesA = fileBytes("trainer_test_run_a/checkpoint.bin");
  CHECK(bytesA == fileBytes("trainer_test_run_b/checkpoint.bin"));
  CHECK(fileBytes("trainer_test_run_a/loss.csv") == fileBytes("trainer_test_run_b/loss.csv"));

  // Stop at step 10, reload, run the remaining 6: same bytes as the straight run.
  Trainer<double> c(cfg, testDataset());
  for (int s = 0; s < 10; ++s) c.step();
  c.save("trainer_test_run_a/mid.bin");
  Trainer<double> d = Trainer<double>::load("trainer_test_run_a/mid.bin", testDataset());
  CHECK(d.currentStep() == 10);
  for (int s = 0; s < 6; ++s) d.step();
  d.save("trainer_test_run_a/resumed.bin");
  CHECK(bytesA == fileBytes("trainer_test_run_a/resumed.bin"));
}

TEST_CASE("a zero-step run checkpoints the initial state") {
  namespace fs = std::filesystem;
  TrainConfig cfg = tinyConfig();
  cfg.steps = 0;
  fs::remove_all("trainer_test_run_zero");
  Trainer<double> tr(cfg, testDataset());
  tr.run("trainer_test_run_zero");
  Trainer<double> fresh(cfg, testDataset());
  fresh.save("trainer_test_run_zero/direct.bin");
  CHECK(fileBytes("trainer_test_run_zero/checkpoint.bin") ==
        fileBytes("trainer_test_run_zero/direct.bin"));
  auto d = readCheckpoint<double>("trainer_test_run_zero/checkpoint.bin");
  CHECK(d.step == 0);
}

TEST_CASE("checkpoints round-trip every field") {
  TrainConfig cfg = flatGridConfig();
  Trainer<double> tr(cfg, testDataset());
  tr.step();
  tr.step();
  std::filesystem::create_directories("trainer_test_out");
  tr.save("trainer_test_out/two.bin");
  auto d = readCheckpoint<double>("trainer_test_out/two.bin");
  CHECK(d.step == 2);
  CHECK(d.kind == "dap");
  CHECK(d.extents == tr.model().geom.extents);
  CHECK(d.rngState == tr.rngState());
  CHECK(prf::serializeConfig(d.cfg) == prf::serializeConfig(cfg));
  auto tensors = tr.model().learnables();
  REQUIRE(d.tensors.size() == tensors.size());
  for (size_t i = 0; i < tensors.size(); ++i) {
    CHECK(d.tensors[i].name == tensors[i]->name);
    CHECK(d.tensors[i].data == tensors[i]->data);
  }
  CHECK(d.occ.occupied.size() == static_cast<size_t>(tr.model().geom.nodeCount()));
  CHECK_THROWS_AS(readCheckpoint<float>("trainer_test_out/two.bin"), std::runtime_error);
}

TEST_CASE("grid milestones grow the grid and restart its moments") {
  TrainConfig cfg = tinyConfig();  // milestones at 4 and 8, sizes 2/3/4 per axis
  Trainer<double> tr(cfg, testDataset());
  CHECK(tr.model().geom.extents == prf::Vec3i{2, 2, 2});
  for (int s = 0; s < 5; ++s) tr.step();
  CHECK(tr.model().geom.extents == prf::Vec3i{3, 3, 3});
  CHECK(tr.model().staticG.rows == 27);
  for (int s = 0; s < 4; ++s) tr.step();
  CHECK(tr.model().geom.extents == prf::Vec3i{4, 4, 4});
  CHECK(tr.model().staticG.rows == 64);
  CHECK(tr.occupancy().occupied.size() == 64);
}

TEST_CASE("removal cadence records events and survives a full wipe") {
  TrainConfig cfg = tinyConfig();
  cfg.steps = 14;
  Trainer<double> tr(cfg, testDataset());
  for (int s = 0; s < 14; ++s) tr.step();
  REQUIRE(tr.removalEvents().size() == 2);  // steps 6 and 12
  CHECK(tr.removalEvents()[0].step == 6);
  CHECK(tr.removalEvents()[1].step == 12);
  // Untrained trajectories are shorter than the threshold, so the first event
  // removes everything; later steps keep training on the static field alone.
  CHECK(tr.removalEvents()[0].removed == cfg.particles);
  CHECK(tr.model().ps.aliveCount() == 0);
  CHECK(std::isfinite(tr.history().back().total));
}

TEST_CASE("non-finite losses skip the step and abort after three in a row") {
  TrainConfig cfg = flatGridConfig();
  Trainer<double> tr(cfg, testDataset());
  for (auto& v : tr.model().staticG.data) v = std::numeric_limits<double>::quiet_NaN();
  tr.model().nets.params[5].data[0] = std::numeric_limits<double>::quiet_NaN();
  auto r1 = tr.step();
  CHECK(r1.skipped);
  auto r2 = tr.step();
  CHECK(r2.skipped);
  CHECK_THROWS_WITH_AS(tr.step(), doctest::Contains("3 consecutive"), std::runtime_error);
}

TEST_CASE("deform and static baselines train and checkpoint") {
  for (const std::string kind : {"deform", "static"}) {
    TrainConfig cfg = flatGridConfig();
    cfg.steps = 2;
    cfg.model = kind;
    cfg.particles = 0;
    Trainer<double> tr(cfg, testDataset());
    auto r0 = tr.step();
    auto r1 = tr.step();
    CHECK(std::isfinite(r0.total));
    CHECK(std::isfinite(r1.total));
    CHECK(r0.alive == 0);
    CHECK(r0.tvm == 0.0);
    std::filesystem::create_directories("trainer_test_out");
    const std::string path = "trainer_test_out/" + kind + ".bin";
    tr.save(path);
    Trainer<double> back = Trainer<double>::load(path, testDataset());
    CHECK(back.model().kind == kind);
    auto ta = tr.model().learnables();
    auto tb = back.model().learnables();
    REQUIRE(ta.size() == tb.size());
    for (size_t i = 0; i < ta.size(); ++i) CHECK(ta[i]->data == tb[i]->data);
  }
}

TEST_CASE("rendered frames have the right shape and clamp to unit range") {
  TrainConfig cfg = flatGridConfig();
  Trainer<double> tr(cfg, testDataset());
  tr.step();
  prf::Image img = tr.renderValFrame();
  CHECK(img.width == 16);
  CHECK(img.height == 16);
  for (double v : img.rgb) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
}
