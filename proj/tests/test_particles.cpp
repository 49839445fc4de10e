#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <vector>

#include "oracles.hpp"
#include "prf/particles.hpp"
#include "prf/rng.hpp"

using prf::AABB;
using prf::FeatureGrid;
using prf::MotionNet;
using prf::ParticleSystem;
using prf::Rng;
using prf::Vec3;
using GraphD = prf::nd::Graph<double>;
using RefD = GraphD::Ref;

namespace {

// All-zero parameters except hand-placed routing entries, so the MLP computes
// a closed-form motion we can check against.
MotionNet<double> blankNet(int width) {
  Rng rng(1);
  auto net = MotionNet<double>::init(width, rng);
  for (auto& t : net.params) std::fill(t.data.begin(), t.data.end(), 0.0);
  return net;
}

// offset(t) = u * t (relu-transparent since t >= 0).
MotionNet<double> linearNet(const Vec3& u, int width = 8) {
  auto net = blankNet(width);
  const int W = width;
  net.params[0].data[0 * W + 0] = 1.0;  // raw t column -> hidden 0
  net.params[2].data[0 * W + 0] = 1.0;
  net.params[4].data[0 * W + 0] = 1.0;
  net.params[6].data[0 * W + 0] = 1.0;
  for (int a = 0; a < 3; ++a) net.params[8].data[0 * 3 + a] = u[a];
  return net;
}

// offset(t) = (R(cos(pi t) - 1), R sin(pi t), 0): a half circle of radius R.
// cos changes sign on [0,1], so it rides through the relus split into
// positive and negative parts.
MotionNet<double> circleNet(double R, int width = 8) {
  auto net = blankNet(width);
  const int W = width;
  net.params[0].data[1 * W + 0] = 1.0;   // sin(pi t) -> h0
  net.params[0].data[2 * W + 1] = 1.0;   // cos(pi t) -> h1
  net.params[0].data[2 * W + 2] = -1.0;  // -cos(pi t) -> h2
  for (int c = 0; c < 3; ++c) {
    net.params[2].data[c * W + c] = 1.0;
    net.params[4].data[c * W + c] = 1.0;
    net.params[6].data[c * W + c] = 1.0;
  }
  net.params[8].data[0 * 3 + 1] = R;   // sin -> y
  net.params[8].data[1 * 3 + 0] = R;   // cos+ -> x
  net.params[8].data[2 * 3 + 0] = -R;  // cos- -> x
  net.params[9].data[0] = -R;
  return net;
}

}  // namespace

TEST_CASE("positional encoding matches the stated sizes and values") {
  GraphD g;
  std::vector<double> x3 = {0.0, 0.0, 0.0};
  auto e = g.posenc(g.constant(1, 3, x3), 10);
  CHECK(g.cols(e) == 63);  // 3 + 3*2*10
  for (int l = 0; l < 10; ++l)
    for (int j = 0; j < 3; ++j) {
      CHECK(g.val(e)[(1 + 2 * l) * 3 + j] == 0.0);  // sines at x=0
      CHECK(g.val(e)[(2 + 2 * l) * 3 + j] == 1.0);  // cosines at x=0
    }
  std::vector<double> half = {0.5};
  auto e1 = g.posenc(g.constant(1, 1, half), 1);
  CHECK(g.val(e1)[1] == doctest::Approx(1.0).epsilon(1e-6));  // sin(pi/2)
  CHECK(std::abs(g.val(e1)[2]) < 1e-6);                       // cos(pi/2)
}

TEST_CASE("zero-initialized motion head keeps particles at their starts") {
  Rng rng(7);
  auto net = MotionNet<double>::init(16, rng);
  const int64_t P = 20;
  std::vector<double> starts(P * 3);
  for (auto& s : starts) s = rng.uniform(-1, 1);
  for (double t : {0.0, 0.31, 1.0}) {
    auto pos = prf::motionPositions(net, starts, t);
    CHECK(pos == starts);
  }
  auto a = prf::motionPositions(net, starts, 0.42);
  auto b = prf::motionPositions(net, starts, 0.42);
  CHECK(a == b);
}

TEST_CASE("hand-wired nets realize closed-form motion through the full stack") {
  std::vector<double> starts = {0.2, -0.3, 0.5, -0.6, 0.1, -0.4};

  SUBCASE("linear displacement") {
    Vec3 u{0.4, -0.2, 0.7};
    auto net = linearNet(u);
    for (double t : {0.0, 0.25, 0.8, 1.0}) {
      auto pos = prf::motionPositions(net, starts, t);
      for (int i = 0; i < 2; ++i)
        for (int a = 0; a < 3; ++a)
          CHECK(pos[i * 3 + a] == doctest::Approx(starts[i * 3 + a] + u[a] * t).epsilon(1e-12));
    }
    auto len = prf::trajectoryLengths(net, starts, 2);
    auto len16 = prf::trajectoryLengths(net, starts, 16);
    for (int i = 0; i < 2; ++i) {
      CHECK(len[i] == doctest::Approx(u.norm()).epsilon(1e-12));
      CHECK(len16[i] == doctest::Approx(u.norm()).epsilon(1e-12));
    }
  }

  SUBCASE("half-circle arc length within 0.5% at K=64") {
    const double R = 0.3;
    auto net = circleNet(R);
    auto pos = prf::motionPositions(net, starts, 0.5);  // quarter turn
    CHECK(pos[0] == doctest::Approx(starts[0] - R).epsilon(1e-12));
    CHECK(pos[1] == doctest::Approx(starts[1] + R).epsilon(1e-12));
    auto len = prf::trajectoryLengths(net, starts, 64);
    const double arc = M_PI * R;
    for (int i = 0; i < 2; ++i) CHECK(std::abs(len[i] - arc) / arc < 0.005);
  }

  SUBCASE("motionless particles have zero length") {
    auto net = blankNet(8);
    auto len = prf::trajectoryLengths(net, starts, 16);
    CHECK(len[0] == 0.0);
    CHECK(len[1] == 0.0);
  }
}

TEST_CASE("motion position gradients match central differences") {
  Rng rng(13);
  auto net = MotionNet<double>::init(8, rng);
  // The zero head hides the upstream chain; randomize it for the check.
  for (auto& w : net.params[8].data) w = rng.normal() * 0.2;
  for (auto& w : net.params[9].data) w = rng.normal() * 0.05;
  const int64_t P = 5;
  std::vector<double> x0;
  for (auto& t : net.params) x0.insert(x0.end(), t.data.begin(), t.data.end());
  std::vector<double> starts(P * 3);
  for (auto& s : starts) s = rng.uniform(-0.9, 0.9);
  x0.insert(x0.end(), starts.begin(), starts.end());
  std::vector<double> mix(P * 3);
  for (auto& m : mix) m = rng.uniform(-1, 1);
  const double t = 0.37;

  auto eval = [&](const std::vector<double>& x, GraphD* keep, std::vector<RefD>* refsOut) {
    GraphD local;
    GraphD& g = keep ? *keep : local;
    std::vector<RefD> refs;
    const double* p = x.data();
    for (auto& tn : net.params) {
      refs.push_back(g.leaf(tn.rows, tn.cols, p));
      p += tn.size();
    }
    auto s = g.leaf(P, 3, p);
    refs.push_back(s);
    auto root = g.sum(g.mul(net.positions(g, refs, s, t), g.constant(P, 3, mix)));
    if (refsOut) *refsOut = refs;
    if (keep) g.backward(root);
    return g.val(root)[0];
  };
  // Position encodings reach frequency 2^9 pi, so the FD oracle needs a small
  // step to keep its own truncation error (h^2/6 * f''') below tolerance.
  auto fd = prf::nd::finiteDifferenceGradient(
      [&](const std::vector<double>& x) { return eval(x, nullptr, nullptr); }, x0, 3e-7);
  GraphD g;
  std::vector<RefD> refs;
  eval(x0, &g, &refs);
  double worst = 0;
  size_t off = 0;
  for (auto& r : refs)
    for (double gv : g.grad(r)) {
      worst = std::max(worst, std::abs(gv - fd[off]) / std::max(1.0, std::abs(fd[off])));
      ++off;
    }
  CHECK(worst < 1e-5);
}

TEST_CASE("initialization fills the box and keeps features small") {
  Rng rng(17);
  AABB box{{-1, -0.5, 0}, {1, 0.5, 2}};
  auto ps = ParticleSystem<double>::init(500, 4, box, rng);
  CHECK(ps.count() == 500);
  CHECK(ps.aliveCount() == 500);
  double fmax = 0;
  for (auto f : ps.features.data) fmax = std::max(fmax, std::abs(f));
  CHECK(fmax < 0.06);
  for (int64_t i = 0; i < 500; ++i) {
    Vec3 p{ps.starts.data[i * 3], ps.starts.data[i * 3 + 1], ps.starts.data[i * 3 + 2]};
    CHECK(box.contains(p));
  }
}

TEST_CASE("removal applies the free-space and short-trajectory rules") {
  AABB box{{0, 0, 0}, {4, 4, 4}};
  auto geom = FeatureGrid<double>::zeros({5, 5, 5}, 1, box);
  const int64_t Nn = geom.nodeCount();

  // Particles: A rides through the freed cells, B stays in occupied space.
  ParticleSystem<double> ps;
  ps.bbox = box;
  ps.starts = prf::Tensor<double>::zeros("s", 2, 3);
  ps.features = prf::Tensor<double>::zeros("v", 2, 2);
  ps.starts.data = {0.5, 0.5, 0.5, 2.5, 2.5, 2.5};
  ps.features.data = {1, 2, 3, 4};
  ps.alive = {1, 1};

  SUBCASE("free space at every sample removes the particle") {
    auto net = linearNet({0.5, 0, 0});
    std::vector<uint8_t> occ(Nn, 1);
    for (int i = 0; i <= 2; ++i)
      for (int j = 0; j <= 1; ++j)
        for (int k = 0; k <= 1; ++k) occ[geom.nodeIndex(i, j, k)] = 0;
    auto removed = prf::removeParticles(ps, net, occ, geom, 0.1, 16);
    CHECK(removed == std::vector<int64_t>{0});
    CHECK(ps.alive[0] == 0);
    CHECK(ps.alive[1] == 1);
  }

  SUBCASE("short trajectories go, epsTraj=0 keeps everything") {
    auto net = blankNet(8);
    std::vector<uint8_t> occ(Nn, 1);
    auto kept = prf::removeParticles(ps, net, occ, geom, 0.0, 16);
    CHECK(kept.empty());
    CHECK(ps.aliveCount() == 2);
    auto removed = prf::removeParticles(ps, net, occ, geom, 0.1, 16);
    CHECK(removed.size() == 2);
    CHECK(ps.aliveCount() == 0);
  }

  SUBCASE("dead particles reject trajectory queries") {
    auto net = blankNet(8);
    ps.alive[1] = 0;
    CHECK_THROWS(prf::trajectoryLength(ps, net, 1, 16));
    CHECK(prf::trajectoryLength(ps, net, 0, 16) == 0.0);
  }
}

TEST_CASE("resampling restores the population from survivors") {
  Rng rng(23);
  AABB box{{-1, -1, -1}, {1, 1, 1}};
  auto ps = ParticleSystem<double>::init(6, 3, box, rng);
  for (int64_t i : {0LL, 2LL, 3LL, 4LL, 5LL}) ps.alive[i] = 0;
  std::vector<int64_t> removed = {0, 2, 3, 4, 5};  // survivor: 1
  const double radius = 0.05;
  int64_t n = prf::resampleParticles(ps, removed, radius, rng);
  CHECK(n == 5);
  CHECK(ps.aliveCount() == 6);
  Vec3 src{ps.starts.data[3], ps.starts.data[4], ps.starts.data[5]};
  for (int64_t i : removed) {
    Vec3 p{ps.starts.data[i * 3], ps.starts.data[i * 3 + 1], ps.starts.data[i * 3 + 2]};
    CHECK((p - src).norm() <= radius + 1e-12);
    CHECK(box.contains(p));
    for (int c = 0; c < 3; ++c)
      CHECK(ps.features.data[i * 3 + c] == ps.features.data[1 * 3 + c]);
  }

  SUBCASE("no removals is a no-op, no survivors skips") {
    auto before = ps.starts.data;
    CHECK(prf::resampleParticles(ps, {}, radius, rng) == 0);
    CHECK(ps.starts.data == before);
    for (auto& a : ps.alive) a = 0;
    std::vector<int64_t> all = {0, 1, 2, 3, 4, 5};
    CHECK(prf::resampleParticles(ps, all, radius, rng) == 0);
    CHECK(ps.aliveCount() == 0);
  }
}

TEST_CASE("count is conserved across one remove plus resample cycle") {
  Rng rng(29);
  AABB box{{0, 0, 0}, {4, 4, 4}};
  auto geom = FeatureGrid<double>::zeros({5, 5, 5}, 1, box);
  auto ps = ParticleSystem<double>::init(100, 2, box, rng);
  auto net = linearNet({0.3, 0, 0});
  std::vector<uint8_t> occ(geom.nodeCount(), 1);
  for (int j = 0; j < 5; ++j)
    for (int k = 0; k < 5; ++k) occ[geom.nodeIndex(0, j, k)] = 0;  // free slab
  auto removed = prf::removeParticles(ps, net, occ, geom, 0.1, 16);
  CHECK(ps.aliveCount() == 100 - int64_t(removed.size()));
  prf::resampleParticles(ps, removed, 0.05, rng);
  CHECK(ps.aliveCount() == 100);
}

TEST_CASE("exports write well-formed point clouds and trajectories") {
  Rng rng(31);
  AABB box{{-1, -1, -1}, {1, 1, 1}};
  auto ps = ParticleSystem<double>::init(7, 2, box, rng);
  ps.alive[3] = 0;
  auto net = linearNet({0.1, 0.2, 0.0});

  const std::string ply = "/tmp/prf_particles.ply";
  prf::exportParticlePly(ply, ps, net, 0.5);
  std::ifstream f(ply);
  std::string line;
  std::getline(f, line);
  CHECK(line == "ply");
  int vertexCount = -1;
  while (std::getline(f, line)) {
    if (line.rfind("element vertex", 0) == 0) vertexCount = std::stoi(line.substr(15));
    if (line == "end_header") break;
  }
  CHECK(vertexCount == 6);
  int rows = 0;
  while (std::getline(f, line))
    if (!line.empty()) ++rows;
  CHECK(rows == 6);
  std::remove(ply.c_str());

  const std::string csv = "/tmp/prf_traj.csv";
  prf::exportTrajectoriesCsv(csv, ps, net, 4);
  std::ifstream c(csv);
  std::getline(c, line);
  CHECK(line == "particle_id,t,x,y,z");
  rows = 0;
  while (std::getline(c, line))
    if (!line.empty()) ++rows;
  CHECK(rows == 6 * 4);
  std::remove(csv.c_str());
}
