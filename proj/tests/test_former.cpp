#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "nrsfm/data.h"
#include "nrsfm/former.h"
#include "test_support.h"

#include <Eigen/LU>

#include <filesystem>

using namespace nrsfm;

namespace {

ModelConfig tiny(std::size_t f = 3, std::size_t p = 4) {
  ModelConfig c;
  c.frames = f;
  c.joints = p;
  c.dim = 8;
  c.blocks = 1;
  c.heads = 2;
  c.seed = 5;
  return c;
}

MeasurementSequence random_w(std::mt19937_64& rng, std::size_t f, std::size_t p) {
  MeasurementSequence w;
  for (std::size_t i = 0; i < f; ++i) w.push_back(testing::random_matrix(rng, static_cast<Eigen::Index>(p), 2, 100.0));
  return w;
}

// Replaces every parameter by a draw of the given spread.
void randomize(FormerModel& m, std::uint64_t seed, double sigma) {
  std::mt19937_64 rng(seed);
  for (auto& [name, t] : m.mutable_params().all()) t = testing::random_tensor(rng, t.shape(), sigma);
}

}  // namespace

TEST_CASE("model config validation and parameter count") {
  ModelConfig c = tiny();
  CHECK_NOTHROW(c.validate());
  c.heads = 3;
  CHECK_THROWS_AS(c.validate(), ValidationError);
  c = tiny();
  c.blocks = 0;
  CHECK_THROWS_AS(c.validate(), ValidationError);

  // Hand count: embedding, positions, tokens, 2 sub-blocks per block, heads.
  const std::size_t d = 8, f = 3, p = 4, h = 16;
  const std::size_t sub = 4 * d + 4 * d * d + (d * h + h) + (h * d + d);
  const std::size_t want = (2 * d + d) + (p + 1) * d + (f + 1) * d + 2 * d + 2 * sub + (d * 3 * p + 3 * p) +
                           (d * 3 + 3) + (d * 6 + 6);
  CHECK(FormerModel::parameter_count(tiny()) == want);
  CHECK(FormerModel(tiny()).params().scalar_count() == want);
  ModelConfig other = tiny();
  other.seed = 99;
  CHECK(FormerModel::parameter_count(other) == want);
}

TEST_CASE("embedding") {
  ModelConfig c = tiny(4, 5);
  FormerModel m(c);
  randomize(m, 1, 0.3);
  std::mt19937_64 rng(2);
  const ad::Tensor z = m.embed(random_w(rng, 4, 5));
  CHECK(z.shape() == ad::Shape{30, 8});

  // Token rows and columns do not depend on W.
  const ad::Tensor z2 = m.embed(random_w(rng, 4, 5));
  for (std::size_t r = 0; r < 30; ++r) {
    if (r < 6 || r % 6 == 0) {
      for (std::size_t k = 0; k < 8; ++k) CHECK(z.at(r, k) == z2.at(r, k));
    }
  }

  // Zero input: non-token entries are the position embeddings plus the bias.
  const ad::Tensor z0 = m.embed(MeasurementSequence(4, Joints2D::Zero(5, 2)));
  const auto& p = m.params();
  for (std::size_t i = 1; i <= 4; ++i) {
    for (std::size_t j = 1; j <= 5; ++j) {
      for (std::size_t k = 0; k < 8; ++k) {
        const double want = p.get("embed.b").at(0, k) + p.get("pos.spatial").at(j, k) + p.get("pos.temporal").at(i, k);
        CHECK(z0.at(i * 6 + j, k) == doctest::Approx(want).epsilon(1e-14));
      }
    }
  }
  // A keypoint enters through the 2 x D projection after unit scaling.
  MeasurementSequence one(4, Joints2D::Zero(5, 2));
  one[1](2, 0) = 250.0;
  one[1](2, 1) = -40.0;
  const ad::Tensor z1 = m.embed(one);
  for (std::size_t k = 0; k < 8; ++k) {
    const double want = z0.at(2 * 6 + 3, k) + 2.5 * p.get("embed.w").at(0, k) - 0.4 * p.get("embed.w").at(1, k);
    CHECK(z1.at(2 * 6 + 3, k) == doctest::Approx(want).epsilon(1e-12));
  }

  CHECK_THROWS_AS(m.embed(MeasurementSequence(3, Joints2D::Zero(5, 2))), ValidationError);
  CHECK_THROWS_AS(m.embed(MeasurementSequence(4, Joints2D::Zero(6, 2))), ValidationError);
}

TEST_CASE("forward contract") {
  ModelConfig c = tiny(5, 6);
  c.blocks = 2;
  FormerModel m(c);
  std::mt19937_64 rng(3);
  for (std::uint64_t s = 0; s < 5; ++s) {
    randomize(m, 10 + s, 0.5);
    const MeasurementSequence w = random_w(rng, 5, 6);
    ad::Graph g;
    const FormerOutputs o = m.forward(g, w);
    CHECK(o.reference.value().shape() == ad::Shape{6, 3});
    CHECK(o.deformations.value().shape() == ad::Shape{30, 3});
    CHECK(o.rotations.value().shape() == ad::Shape{5, 9});
    CHECK(o.activations.value().shape() == ad::Shape{42, 8});
    const Eigen::MatrixXd ref = o.reference.value().to_matrix();
    CHECK(ref.colwise().mean().cwiseAbs().maxCoeff() < 1e-9);
    REQUIRE(o.attention.size() == 2 * 2 * 2);
    for (const ad::Var& a : o.attention) {
      const Eigen::MatrixXd am = a.value().to_matrix();
      CHECK((am.rowwise().sum().array() - 1.0).abs().maxCoeff() < 1e-12);
    }
    const RmnrdDecomposition d = m.predict(w);
    REQUIRE(d.frames() == 5);
    for (const auto& r : d.rotations) {
      CHECK((r.matrix().transpose() * r.matrix() - Eigen::Matrix3d::Identity()).norm() < 1e-9);
      CHECK(r.matrix().determinant() == doctest::Approx(1.0).epsilon(1e-9));
    }
    CHECK(d.reference == m.predict(w).reference);
  }
}

TEST_CASE("spatial attention stays inside a frame and temporal attention inside a position") {
  FormerModel m(tiny(3, 4));
  randomize(m, 4, 0.5);
  std::mt19937_64 rng(4);
  ad::Graph g;
  const FormerOutputs o = m.forward(g, random_w(rng, 3, 4));
  const std::size_t cols = 5;
  for (std::size_t h = 0; h < o.attention.size(); ++h) {
    const bool spatial = h < 2;
    const ad::Tensor& a = o.attention[h].value();
    for (std::size_t r = 0; r < 20; ++r) {
      for (std::size_t s = 0; s < 20; ++s) {
        const bool same = spatial ? r / cols == s / cols : r % cols == s % cols;
        if (!same) CHECK(a.at(r, s) == 0.0);
        else CHECK(a.at(r, s) > 0.0);
      }
    }
  }
}

TEST_CASE("frame permutation equivariance without temporal embeddings") {
  FormerModel m(tiny(4, 5));
  randomize(m, 6, 0.4);
  for (double& v : m.mutable_params().get("pos.temporal").data()) v = 0.0;
  std::mt19937_64 rng(7);
  const MeasurementSequence w = random_w(rng, 4, 5);
  const std::vector<std::size_t> perm{2, 0, 3, 1};
  MeasurementSequence wp;
  for (std::size_t k : perm) wp.push_back(w[k]);
  const RmnrdDecomposition a = m.predict(w), b = m.predict(wp);
  CHECK((a.reference - b.reference).norm() < 1e-9 * std::max(1.0, a.reference.norm()));
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK((b.deformations[i] - a.deformations[perm[i]]).norm() < 1e-9 * std::max(1.0, a.deformations[perm[i]].norm()));
    CHECK((b.rotations[i].matrix() - a.rotations[perm[i]].matrix()).norm() < 1e-9);
  }

  // With temporal embeddings in place the frame order matters.
  randomize(m, 6, 0.4);
  CHECK((m.predict(w).reference - m.predict(wp).reference).norm() > 1e-6);
}

TEST_CASE("gradient of the total loss matches finite differences") {
  FormerModel m(tiny());
  randomize(m, 8, 0.3);
  std::mt19937_64 rng(8);
  const MeasurementSequence w = random_w(rng, 3, 4);
  LossConfig lc;
  lc.beta = {1.0, 1.0, 0.0, 1.0};
  ad::Graph g;
  const auto p = m.params().bind(g);
  const FormerOutputs o = m.forward(g, p, w);
  const Joints3D ref = o.reference.value().to_matrix();
  const graph::LossTerms t = graph::total(g, o.rotations, o.shapes, ref, w, nullptr, lc, 1);
  const testing::GradCheck gc = testing::check_gradients(g, t.total, 1e-6);
  CHECK(gc.checked == FormerModel::parameter_count(tiny()));
  INFO("worst parameter: " << gc.worst);
  CHECK(gc.max_rel < 1e-3);
}

TEST_CASE("train step") {
  GeneratorParams gp;
  gp.frames = 8;
  gp.seed = 2;
  const SyntheticScene sc = generate(Skeleton::rod(10), gp);
  ModelConfig c = tiny(8, 10);
  c.dim = 16;
  LossConfig lc;

  SUBCASE("zero learning rate") {
    FormerModel m(c);
    FormerTrainer tr(m);
    const auto before = m.params().checksum();
    const LossBreakdown a = tr.step({sc.w}, nullptr, lc, 0.0), b = tr.step({sc.w}, nullptr, lc, 0.0);
    CHECK(m.params().checksum() == before);
    CHECK(a.total == b.total);
    CHECK(a.reproj == b.reproj);
    CHECK(tr.evaluate({sc.w}, nullptr, lc).total == a.total);
  }
  SUBCASE("a step lowers the loss on its batch") {
    FormerModel m(c);
    FormerTrainer tr(m);
    const LossBreakdown a = tr.step({sc.w}, nullptr, lc, 1e-3);
    CHECK(tr.evaluate({sc.w}, nullptr, lc).total < a.total);
  }
  SUBCASE("the prior is left alone at zero weight and at inference") {
    auto net = std::make_shared<MlpDenoiser>(10, 8, 1);
    net->freeze();
    const DiffusionPrior prior(NoiseSchedule::linear(10), net);
    FormerModel m(c);
    FormerTrainer tr(m);
    lc.beta[2] = 0.0;
    tr.step({sc.w}, &prior, lc, 1e-3);
    tr.evaluate({sc.w}, &prior, lc);
    m.predict(sc.w);
    CHECK(prior.invocations() == 0);
    lc.beta[2] = 1e-3;
    tr.step({sc.w}, &prior, lc, 1e-3);
    CHECK(prior.invocations() > 0);
  }
  SUBCASE("validation") {
    FormerModel m(c);
    FormerTrainer tr(m);
    CHECK_THROWS_AS(tr.step({}, nullptr, lc, 1e-3), ValidationError);
    CHECK_THROWS_AS(tr.step({sc.w}, nullptr, lc, -1.0), ValidationError);
  }
}

TEST_CASE("checkpoint round trip") {
  FormerModel m(tiny());
  randomize(m, 9, 0.2);
  const std::string path = (std::filesystem::temp_directory_path() / "nrsfm_test_former.json").string();
  save_former_checkpoint(path, m);
  const FormerModel back = load_former_checkpoint(path);
  CHECK(back.params().checksum() == m.params().checksum());
  CHECK(back.config().heads == 2);
  std::mt19937_64 rng(10);
  const MeasurementSequence w = random_w(rng, 3, 4);
  CHECK(back.predict(w).reference == m.predict(w).reference);
  std::filesystem::remove(path);

  ad::ParameterSet bad = m.params();
  bad.get("head.rot.w") = ad::Tensor({8, 5});
  CHECK_THROWS_AS(FormerModel(tiny(), bad), ValidationError);
}
