#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "pscsim/linalg.hpp"
#include "pscsim/orbit_feedback.hpp"
#include "rig.hpp"

using namespace pscsim;
using namespace pscsim::orbit;
using testing_support::Rig;

namespace {

oracle::Mat to_rows(const Matrix& m) {
  oracle::Mat out(m.rows(), std::vector<double>(m.cols()));
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t c = 0; c < m.cols(); ++c) out[r][c] = m(r, c);
  return out;
}

Matrix random_matrix(std::mt19937_64& rng, std::size_t rows, std::size_t cols) {
  std::normal_distribution<double> n(0.0, 1.0);
  Matrix m(rows, cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) m(r, c) = n(rng);
  return m;
}

struct FeedbackRig {
  Rig rig;
  std::unique_ptr<OrbitFeedback> fb;

  FeedbackRig(std::size_t n, FeedbackConfig cfg) {
    std::vector<CorrectorPort> ports;
    for (std::size_t k = 0; k < n; ++k) {
      const std::string id = "SR-CH" + std::to_string(k);
      auto& u = rig.add(id, "corrector", 0.0);
      cfg.correctors.push_back(id);
      cfg.bpms.push_back("BPM" + std::to_string(k));
      CorrectorPort p;
      p.ps = id;
      p.link = u.link.get();
      p.lsb = u.cls.lsb();
      p.i_min = u.cls.params.i_min();
      p.i_max = u.cls.params.i_max;
      ports.push_back(p);
    }
    if (cfg.r_om.rows() == 0) cfg.r_om = Matrix::identity(n);
    fb = std::make_unique<OrbitFeedback>(rig.sched, std::move(cfg), std::move(ports));
    fb->attach(*rig.server);
  }
};

}  // namespace

// ---------------------------------------------------------------------------
// pseudo-inverse

TEST(Pinv, IdentityAndDiagonal) {
  const auto p = pinv(Matrix::identity(2));
  EXPECT_EQ(p(0, 0), 1.0);
  EXPECT_EQ(p(1, 1), 1.0);
  EXPECT_EQ(p(0, 1), 0.0);
  const auto d = pinv(Matrix::diagonal({2.0, 4.0}));
  EXPECT_EQ(d(0, 0), 0.5);
  EXPECT_EQ(d(1, 1), 0.25);
  EXPECT_EQ(d(1, 0), 0.0);
}

TEST(Pinv, RandomTallMatchesQrOracle) {
  std::mt19937_64 rng(99);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t rows = 6 + static_cast<std::size_t>(trial % 20);
    const std::size_t cols = 4 + static_cast<std::size_t>(trial % 3);
    const auto r = random_matrix(rng, rows, cols);
    const auto p = pinv(r);
    ASSERT_EQ(p.rows(), cols);
    ASSERT_EQ(p.cols(), rows);
    EXPECT_LT((p * r - Matrix::identity(cols)).max_abs(), 1e-9);
    const auto q = oracle::pinv_qr(to_rows(r));
    for (std::size_t i = 0; i < cols; ++i)
      for (std::size_t j = 0; j < rows; ++j) EXPECT_NEAR(p(i, j), q[i][j], 1e-9);
  }
}

TEST(Pinv, SingularResponseRejected) {
  Matrix r{{1.0, 2.0}, {2.0, 4.0}, {3.0, 6.0}};
  EXPECT_THROW(pinv(r), SingularResponse);
  Matrix nearly{{1.0, 0.0}, {0.0, 1e-7}};
  EXPECT_THROW(pinv(nearly), SingularResponse);
  EXPECT_TRUE(std::isinf(condition_1(Matrix{{1.0, 1.0}, {1.0, 1.0}})));
  EXPECT_NEAR(condition_1(Matrix::diagonal({2.0, 4.0})), 2.0, 1e-12);
}

// ---------------------------------------------------------------------------
// feedback loop

TEST(Feedback, IdentityResponseFollowsGeometricRecurrence) {
  FeedbackConfig cfg;
  cfg.alpha = 0.5;
  cfg.d = {0.5, -0.3};
  FeedbackRig f(2, cfg);
  f.rig.server->start(0);
  f.fb->start(0);
  f.rig.run_for(20 * sim::kNsPerMs + 1);
  const auto& h = f.fb->history();
  ASSERT_GE(h.size(), 20u);
  const double rms0 = std::sqrt((0.25 + 0.09) / 2.0);
  for (int k = 0; k <= 10; ++k) EXPECT_NEAR(h[k].rms, oracle::feedback_rms(rms0, 0.5, k), 1e-6) << k;
  for (std::size_t k = 0; k < h.size(); ++k) EXPECT_EQ(h[k].t_ns, static_cast<sim::TimeNs>(k) * sim::kNsPerMs);
  // below 2 lsb of correction the dead-band holds the orbit at the floor
  const double floor = 2.0 * f.rig.units[0]->cls.lsb() * 1.0;
  for (std::size_t k = 11; k < h.size(); ++k)
    EXPECT_LE(h[k].max_abs, std::max(oracle::feedback_rms(0.5, 0.5, static_cast<int>(k)), floor) + 1e-7) << k;
  EXPECT_LE(h[10].max_abs, 4.9e-4);
  EXPECT_LE(h[10].rms, rms0 / 1000.0);
  EXPECT_EQ(f.fb->writes_failed(), 0u);
  EXPECT_LE(f.fb->max_write_latency(), 30'000);

  // every feedback write went through the priority path
  for (const auto& u : f.rig.units) {
    EXPECT_EQ(u->link->issued(link::Priority::kNormal, link::Origin::kFeedback), 0u);
    EXPECT_GT(u->link->issued(link::Priority::kHigh, link::Origin::kFeedback), 0u);
  }
}

TEST(Feedback, ZeroDisturbanceWritesNothing) {
  FeedbackConfig cfg;
  cfg.alpha = 0.5;
  FeedbackRig f(3, cfg);
  f.fb->start(0);
  f.rig.run_for(50 * sim::kNsPerMs);
  EXPECT_EQ(f.fb->steps(), 51u);  // 0 ms .. 50 ms inclusive
  EXPECT_EQ(f.fb->writes_issued(), 0u);
}

TEST(Feedback, EightCorrectorsCompleteInOneBudget) {
  FeedbackConfig cfg;
  cfg.alpha = 1.0;
  cfg.d.assign(8, 0.2);
  FeedbackRig f(8, cfg);
  f.fb->start(0);
  f.rig.run_for(5 * sim::kNsPerMs);
  EXPECT_EQ(f.fb->history()[0].writes, 8u);
  // parallel links: the step finishes with a single write time
  EXPECT_EQ(f.fb->max_step_completion(), 24'800);
  EXPECT_LE(f.fb->max_step_completion(), 30'000);
}

TEST(Feedback, LinkDownPausesWithMajorAlarm) {
  FeedbackConfig cfg;
  cfg.d = {0.5, 0.5};
  FeedbackRig f(2, cfg);
  f.fb->start(0);
  f.rig.run_for(3 * sim::kNsPerMs);
  EXPECT_EQ(f.fb->state(), FeedbackState::kRunning);
  f.rig.unit("SR-CH1").link->set_link_broken(link::Direction::kTx, true);
  f.rig.run_for(1 * sim::kNsPerMs);
  EXPECT_EQ(f.fb->state(), FeedbackState::kPaused);
  EXPECT_EQ(std::get<std::string>(f.rig.get("FB:STATE")), "paused");
  EXPECT_EQ(f.rig.server->get("FB:ALARM").alarm, chan::Severity::kMajor);
  const auto steps = f.fb->steps();
  f.rig.run_for(5 * sim::kNsPerMs);
  EXPECT_EQ(f.fb->steps(), steps);

  f.rig.unit("SR-CH1").link->set_link_broken(link::Direction::kTx, false);
  f.rig.run_for(5 * sim::kNsPerMs);
  EXPECT_EQ(f.fb->state(), FeedbackState::kRunning);
  EXPECT_EQ(f.rig.server->get("FB:ALARM").alarm, chan::Severity::kNone);

  ASSERT_TRUE(f.rig.put("FB:ENABLE", false).ok);
  EXPECT_EQ(std::get<std::string>(f.rig.get("FB:STATE")), "off");
}

TEST(Feedback, ConfigValidation) {
  FeedbackConfig cfg;
  cfg.correctors = {"A"};
  cfg.bpms = {"B1", "B2"};
  cfg.r_om = Matrix::identity(2);
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg.r_om = Matrix(2, 1, 1.0);
  EXPECT_NO_THROW(cfg.validate());
  cfg.alpha = 0.0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg.alpha = 0.5;
  cfg.d = {1.0};
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
}
