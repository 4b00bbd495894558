#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "nrsfm/diffusion.h"
#include "nrsfm/io.h"
#include "test_support.h"

#include <cmath>
#include <filesystem>
#include <memory>

using namespace nrsfm;
using nrsfm::testing::ToyFamily;

namespace {

// Returns the same normalized pose for every row.
class ConstantDenoiser final : public PoseDenoiser {
 public:
  ConstantDenoiser(Eigen::RowVectorXd out, std::size_t cond_dim) : out_(std::move(out)), cond_dim_(cond_dim) {}
  std::size_t pose_dim() const override { return static_cast<std::size_t>(out_.size()); }
  std::size_t condition_dim() const override { return cond_dim_; }
  bool frozen() const override { return true; }
  ad::Var predict(ad::Graph& g, ad::Var noisy, ad::Var, const std::vector<int>&) const override {
    return g.constant(ad::Tensor::from_matrix(out_.replicate(static_cast<Eigen::Index>(noisy.value().rows()), 1)));
  }

 private:
  Eigen::RowVectorXd out_;
  std::size_t cond_dim_;
};

double gelu_ref(double x) { return 0.5 * x * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (x + 0.044715 * x * x * x))); }

// Plain Eigen forward pass of the two-hidden-layer denoiser.
Eigen::RowVectorXd mlp_ref(const MlpDenoiser& net, const Eigen::RowVectorXd& noisy, const Eigen::RowVectorXd& cond, int t) {
  const auto& p = net.params();
  Eigen::RowVectorXd x(noisy.size() + cond.size() + kTimeEmbeddingDim);
  x << noisy, cond, timestep_embedding(t);
  Eigen::RowVectorXd h1 = (x * p.get("w1").to_matrix() + p.get("b1").to_matrix()).unaryExpr(&gelu_ref);
  Eigen::RowVectorXd h2 = (h1 * p.get("w2").to_matrix() + p.get("b2").to_matrix()).unaryExpr(&gelu_ref);
  return h2 * p.get("w3").to_matrix() + p.get("b3").to_matrix();
}

DiffusionPrior trained_toy_prior(int epochs = 20) {
  const ToyFamily fam = ToyFamily::make();
  const NoiseSchedule sched = NoiseSchedule::linear(50);
  DenoiserTrainOptions o;
  o.epochs = epochs;
  o.seed = 3;
  DenoiserTrainResult r = train_denoiser(fam.dataset(2000, 1), sched, o);
  r.denoiser->freeze();
  return DiffusionPrior(sched, r.denoiser, r.data_scale);
}

}  // namespace

TEST_CASE("noise schedule") {
  const NoiseSchedule s = NoiseSchedule::linear(50);
  CHECK(s.steps() == 50);
  CHECK(s.beta(1) == doctest::Approx(1e-4));
  CHECK(s.beta(50) == doctest::Approx(0.1));
  CHECK(s.alpha_bar(0) == 1.0);
  CHECK(s.alpha_bar(1) == doctest::Approx(1.0 - 1e-4));
  double prod = 1.0;
  for (int t = 1; t <= 50; ++t) {
    prod *= 1.0 - s.beta(t);
    CHECK(s.alpha_bar(t) == doctest::Approx(prod).epsilon(1e-14));
    CHECK(s.alpha_bar(t) < s.alpha_bar(t - 1));
  }
  CHECK(s.alpha_bar(50) < 0.1);
  for (int t = 2; t <= 50; ++t) {
    const double want = (1.0 - s.alpha_bar(t - 1)) / (1.0 - s.alpha_bar(t)) * s.beta(t);
    CHECK(s.posterior_variance(t) == doctest::Approx(want).epsilon(1e-14));
  }
  CHECK_THROWS_AS(s.beta(51), ValidationError);
  CHECK_THROWS_AS(NoiseSchedule({0.1, 1.0}), ValidationError);
  CHECK_THROWS_AS(NoiseSchedule(std::vector<double>{}), ValidationError);
}

TEST_CASE("forward noise") {
  const NoiseSchedule s = NoiseSchedule::linear(50);
  std::mt19937_64 rng(1);
  const Eigen::VectorXd y0 = testing::random_matrix(rng, 6, 1);
  const Eigen::VectorXd eps = testing::random_matrix(rng, 6, 1);
  CHECK(forward_noise(s, y0, 0, eps) == y0);
  const NoiseSchedule hot({0.999999999999});
  CHECK((forward_noise(hot, y0, 1, eps) - eps).norm() < 1e-5);
  CHECK_THROWS_AS(forward_noise(s, y0, 51, eps), ValidationError);
  CHECK_THROWS_AS(forward_noise(s, y0, 3, Eigen::VectorXd::Zero(5)), ValidationError);

  // Empirical marginal against the closed form.
  const int n = 100000;
  for (int t : {1, 10, 25, 50}) {
    Eigen::VectorXd one = Eigen::VectorXd::Constant(1, 0.7);
    std::normal_distribution<double> nd;
    double mean = 0.0, sq = 0.0;
    for (int i = 0; i < n; ++i) {
      const double y = forward_noise(s, one, t, Eigen::VectorXd::Constant(1, nd(rng)))(0);
      mean += y;
      sq += y * y;
    }
    mean /= n;
    const double var = sq / n - mean * mean;
    const double sd = std::sqrt(1.0 - s.alpha_bar(t));
    CHECK(std::abs(mean - std::sqrt(s.alpha_bar(t)) * 0.7) < 3.0 * sd / std::sqrt(n) + 1e-12);
    if (t > 1) CHECK(var == doctest::Approx(1.0 - s.alpha_bar(t)).epsilon(0.02));
  }
}

TEST_CASE("timestep embedding") {
  const Eigen::RowVectorXd e = timestep_embedding(7);
  REQUIRE(e.size() == 16);
  for (int k = 0; k < 8; ++k) {
    const double f = std::pow(10000.0, -k / 8.0);
    CHECK(e[k] == doctest::Approx(std::sin(7.0 * f)).epsilon(1e-14));
    CHECK(e[8 + k] == doctest::Approx(std::cos(7.0 * f)).epsilon(1e-14));
  }
}

TEST_CASE("mlp denoiser matches a plain forward pass") {
  MlpDenoiser net(5, 32, 9);
  CHECK(net.pose_dim() == 15);
  CHECK(net.condition_dim() == 10);
  std::mt19937_64 rng(2);
  const Eigen::MatrixXd noisy = testing::random_matrix(rng, 3, 15), cond = testing::random_matrix(rng, 3, 10);
  // Perturb biases so they take part in the check.
  for (const char* b : {"b1", "b2", "b3"}) {
    for (double& v : net.mutable_params().get(b).data()) v = 0.1;
  }
  ad::Graph g;
  const std::vector<int> steps{1, 17, 50};
  const Eigen::MatrixXd out =
      net.predict(g, g.constant(ad::Tensor::from_matrix(noisy)), g.constant(ad::Tensor::from_matrix(cond)), steps)
          .value()
          .to_matrix();
  REQUIRE(out.rows() == 3);
  REQUIRE(out.cols() == 15);
  for (int i = 0; i < 3; ++i) CHECK((out.row(i) - mlp_ref(net, noisy.row(i), cond.row(i), steps[i])).norm() < 1e-12);

  ad::ParameterSet bad = net.params();
  bad.get("w2") = ad::Tensor({3, 3});
  try {
    MlpDenoiser(5, 32, bad);
    FAIL("expected ValidationError");
  } catch (const ValidationError& e) {
    CHECK(std::string(e.what()).find("w2") != std::string::npos);
  }
  net.freeze();
  CHECK_THROWS_AS(net.mutable_params(), std::logic_error);
}

TEST_CASE("training on one repeated pose collapses onto it") {
  PoseDataset d;
  std::mt19937_64 rng(3);
  const Eigen::RowVectorXd pose = testing::random_matrix(rng, 1, 12);
  d.poses = pose.replicate(256, 1);
  d.conditions = Eigen::MatrixXd::Ones(256, 8);
  DenoiserTrainOptions o;
  o.epochs = 30;
  o.hidden = 64;
  o.seed = 1;
  const DenoiserTrainResult r = train_denoiser(d, NoiseSchedule::linear(50), o);
  REQUIRE(r.loss_trace.size() == 31);
  CHECK(r.loss_trace.back() < 0.05 * r.loss_trace.front());
}

TEST_CASE("zero learning rate leaves the denoiser unchanged") {
  const ToyFamily fam = ToyFamily::make();
  DenoiserTrainOptions o;
  o.epochs = 3;
  o.lr = 0.0;
  o.hidden = 16;
  o.seed = 4;
  const DenoiserTrainResult a = train_denoiser(fam.dataset(100, 2), NoiseSchedule::linear(10), o);
  const MlpDenoiser fresh(4, 16, std::mt19937_64(4)());
  CHECK(a.denoiser->params().checksum() == fresh.params().checksum());
  for (double v : a.loss_trace) CHECK(v == a.loss_trace.front());
}

TEST_CASE("training validates its input") {
  DenoiserTrainOptions o;
  CHECK_THROWS_AS(train_denoiser(PoseDataset{}, NoiseSchedule::linear(10), o), ValidationError);
  PoseDataset d;
  d.poses = Eigen::MatrixXd::Zero(4, 12);
  d.conditions = Eigen::MatrixXd::Zero(3, 8);
  CHECK_THROWS_AS(train_denoiser(d, NoiseSchedule::linear(10), o), ValidationError);
  d.conditions = Eigen::MatrixXd::Zero(4, 8);
  d.poses(0, 0) = std::nan("");
  CHECK_THROWS_AS(train_denoiser(d, NoiseSchedule::linear(10), o), ValidationError);
}

TEST_CASE("conditioning beats the unconditional mean on two clusters") {
  const DiffusionPrior prior = trained_toy_prior();
  const ToyFamily fam = ToyFamily::make();
  const PoseDataset test = fam.dataset(400, 77);
  const Eigen::RowVectorXd mean = test.poses.colwise().mean();
  double uncond = 0.0, cond = 0.0;
  std::mt19937_64 rng(5);
  const PriorDraws draws = draw_prior_noise(prior.schedule(), 400, 12, 1, rng);
  const double s = prior.data_scale();
  for (Eigen::Index i = 0; i < 400; ++i) {
    uncond += (test.poses.row(i) - mean).squaredNorm();
    const int t = draws.steps[static_cast<std::size_t>(i)];
    const Eigen::VectorXd noisy = forward_noise(prior.schedule(), test.poses.row(i).transpose() / s, t,
                                                draws.noise.row(i).transpose());
    ad::Graph g;
    const Eigen::RowVectorXd pred = prior.denoiser()
                                        .predict(g, g.constant(ad::Tensor::from_matrix(noisy.transpose())),
                                                 g.constant(ad::Tensor::from_matrix(test.conditions.row(i) / s)), {t})
                                        .value()
                                        .to_matrix();
    cond += (test.poses.row(i) - s * pred).squaredNorm();
  }
  CHECK(cond < uncond);
}

TEST_CASE("sampling") {
  const Eigen::RowVectorXd mu = (Eigen::RowVectorXd(6) << 1, -2, 0.5, 3, 0, -1).finished();
  DiffusionPrior constant(NoiseSchedule::linear(50), std::make_shared<ConstantDenoiser>(mu, 4));
  Eigen::VectorXd acc = Eigen::VectorXd::Zero(6);
  const Eigen::VectorXd c = Eigen::VectorXd::Zero(4);
  for (std::uint64_t seed = 0; seed < 100; ++seed) acc += constant.sample(c, seed);
  acc /= 100.0;
  CHECK((acc - mu.transpose()).norm() < 0.1 * mu.norm());

  DiffusionPrior one_step(NoiseSchedule::linear(1, 0.02, 0.02), std::make_shared<ConstantDenoiser>(mu, 4));
  CHECK(one_step.sample(c, 3) == mu.transpose());

  const DiffusionPrior prior = trained_toy_prior(2);
  const Eigen::VectorXd cond = Eigen::VectorXd::LinSpaced(8, -1, 1);
  CHECK(prior.sample(cond, 11) == prior.sample(cond, 11));
  CHECK(prior.sample(cond, 11) != prior.sample(cond, 12));
  CHECK_THROWS_AS(prior.sample(Eigen::VectorXd::Zero(3), 1), ValidationError);
}

TEST_CASE("prior loss closed-form cases") {
  std::mt19937_64 rng(6);
  const Eigen::VectorXd y0 = testing::random_matrix(rng, 6, 1);
  DiffusionPrior oracle(NoiseSchedule::linear(50), std::make_shared<ConstantDenoiser>(y0.transpose(), 4));
  CHECK(oracle.prior_loss(y0, Eigen::VectorXd::Zero(4), 8, 1) < 1e-24);
  DiffusionPrior zero(NoiseSchedule::linear(50), std::make_shared<ConstantDenoiser>(Eigen::RowVectorXd::Zero(6), 4));
  for (std::uint64_t seed : {1, 2, 3}) {
    CHECK(zero.prior_loss(y0, Eigen::VectorXd::Zero(4), 1, seed) == doctest::Approx(y0.squaredNorm()).epsilon(1e-14));
  }
  auto unfrozen = std::make_shared<MlpDenoiser>(2, 8, 1);
  DiffusionPrior bad(NoiseSchedule::linear(10), unfrozen);
  CHECK_THROWS_AS(bad.prior_loss(y0, Eigen::VectorXd::Zero(4), 1, 1), std::logic_error);
}

TEST_CASE("prior loss value route matches a per-draw recomputation") {
  const DiffusionPrior prior = trained_toy_prior(2);
  const ToyFamily fam = ToyFamily::make();
  std::mt19937_64 rng(7);
  const Eigen::VectorXd y0 = fam.draw(rng, 1);
  const Eigen::VectorXd c = ToyFamily::condition(y0);
  std::mt19937_64 drng(42);
  const PriorDraws draws = draw_prior_noise(prior.schedule(), 1, 12, 5, drng);
  const double s = prior.data_scale();
  const auto& net = dynamic_cast<const MlpDenoiser&>(prior.denoiser());
  double want = 0.0;
  for (int k = 0; k < 5; ++k) {
    const int t = draws.steps[static_cast<std::size_t>(k)];
    const Eigen::VectorXd noisy = forward_noise(prior.schedule(), y0 / s, t, draws.noise.row(k).transpose());
    want += (y0.transpose() - s * mlp_ref(net, noisy.transpose(), c.transpose() / s, t)).squaredNorm();
  }
  want /= 5.0;
  CHECK(prior.prior_loss(y0, c, 5, 42) == doctest::Approx(want).epsilon(1e-10));
}

TEST_CASE("prior loss gradient matches finite differences") {
  const DiffusionPrior prior = trained_toy_prior(2);
  const ToyFamily fam = ToyFamily::make();
  std::mt19937_64 rng(8);
  for (bool detach : {false, true}) {
    ad::Graph g;
    Eigen::MatrixXd poses(3, 12), conds(3, 8);
    for (int i = 0; i < 3; ++i) {
      const Eigen::VectorXd p = fam.draw(rng, i % 2);
      poses.row(i) = p.transpose();
      conds.row(i) = ToyFamily::condition(p).transpose();
    }
    ad::Var y = g.input("poses", ad::Tensor::from_matrix(poses));
    const PriorDraws draws = draw_prior_noise(prior.schedule(), 3, 12, 2, rng);
    ad::Var loss = prior.prior_loss(g, y, conds, draws, detach);
    CHECK(testing::check_gradients(g, loss, 1e-6).max_rel < 1e-3);
  }
}

TEST_CASE("trained toy prior") {
  const DiffusionPrior prior = trained_toy_prior();
  const ToyFamily fam = ToyFamily::make();
  std::mt19937_64 rng(9);

  SUBCASE("Monte-Carlo estimates converge") {
    const Eigen::VectorXd y0 = fam.draw(rng, 0);
    const Eigen::VectorXd c = ToyFamily::condition(y0);
    const double a = prior.prior_loss(y0, c, 10000, 1), b = prior.prior_loss(y0, c, 100000, 2);
    CHECK(std::abs(a - b) < 0.02 * b);
  }
  SUBCASE("in-family poses score lower than random ones") {
    int wins = 0;
    std::normal_distribution<double> n;
    for (int trial = 0; trial < 100; ++trial) {
      const Eigen::VectorXd y = fam.draw(rng, trial % 2);
      Eigen::VectorXd r(12);
      for (auto& v : r) v = n(rng);
      r *= y.norm() / r.norm();
      const Eigen::VectorXd c = ToyFamily::condition(y);
      if (prior.prior_loss(y, c, 16, trial) < prior.prior_loss(r, c, 16, trial)) ++wins;
    }
    CHECK(wins >= 95);
  }
  SUBCASE("freezing holds across calls") {
    const auto before = dynamic_cast<const MlpDenoiser&>(prior.denoiser()).params().checksum();
    const std::size_t calls = prior.invocations();
    const Eigen::VectorXd y = fam.draw(rng, 0);
    prior.prior_loss(y, ToyFamily::condition(y), 4, 1);
    prior.sample(ToyFamily::condition(y), 1);
    CHECK(prior.invocations() == calls + 2);
    CHECK(dynamic_cast<const MlpDenoiser&>(prior.denoiser()).params().checksum() == before);
  }
}

TEST_CASE("checkpoint round trip") {
  const ToyFamily fam = ToyFamily::make();
  DenoiserTrainOptions o;
  o.epochs = 1;
  o.hidden = 8;
  const NoiseSchedule sched = NoiseSchedule::linear(12);
  const DenoiserTrainResult r = train_denoiser(fam.dataset(64, 3), sched, o);
  const std::string path = (std::filesystem::temp_directory_path() / "nrsfm_test_prior.json").string();
  save_diffusion_checkpoint(path, sched, *r.denoiser, r.data_scale);
  const DiffusionPrior back = load_diffusion_checkpoint(path);
  CHECK(back.denoiser().frozen());
  CHECK(back.schedule().betas() == sched.betas());
  CHECK(back.data_scale() == r.data_scale);
  CHECK(dynamic_cast<const MlpDenoiser&>(back.denoiser()).params().checksum() == r.denoiser->params().checksum());

  nlohmann::json j = io::read_json(path);
  j["header"]["steps"] = 13;
  io::write_file_atomic(path, j.dump());
  CHECK_THROWS_AS(load_diffusion_checkpoint(path), ValidationError);
  std::filesystem::remove(path);
}
