#pragma once

// Conditional denoising diffusion over flattened 3D poses.
//
// The denoiser regresses the clean pose directly (y0-parameterization) from
// the noised pose, the flattened 2D measurement of the same frame and a
// sinusoidal timestep embedding. Poses are handled in a normalized space
// (divided by `data_scale`) so that the unit-variance noise is commensurate
// with the data; every loss returned to callers is in the caller's units.

#include "nrsfm/optim.h"
#include "nrsfm/tensor.h"

#include <Eigen/Core>

#include <atomic>
#include <cstdint>
#include <memory>
#include <random>
#include <vector>

namespace nrsfm {

// Linear beta schedule. Steps are 1-based: t in [1, T].
class NoiseSchedule {
 public:
  NoiseSchedule() = default;
  explicit NoiseSchedule(std::vector<double> betas);
  static NoiseSchedule linear(int steps = 50, double beta_start = 1e-4, double beta_end = 0.1);

  int steps() const { return static_cast<int>(betas_.size()); }
  double beta(int t) const { return betas_.at(index(t)); }
  double alpha(int t) const { return 1.0 - beta(t); }
  // Cumulative product up to t; alpha_bar(0) == 1.
  double alpha_bar(int t) const { return t == 0 ? 1.0 : alpha_bars_.at(index(t)); }
  // Variance of q(y_{t-1} | y_t, y_0).
  double posterior_variance(int t) const;
  const std::vector<double>& betas() const { return betas_; }

 private:
  std::size_t index(int t) const;
  std::vector<double> betas_;
  std::vector<double> alpha_bars_;
};

// sqrt(abar_t) * y0 + sqrt(1 - abar_t) * eps.
Eigen::VectorXd forward_noise(const NoiseSchedule& schedule, const Eigen::VectorXd& y0, int t,
                              const Eigen::VectorXd& eps);

constexpr int kTimeEmbeddingDim = 16;
Eigen::RowVectorXd timestep_embedding(int t, int dim = kTimeEmbeddingDim);

// g_omega: (noisy pose, condition, step) -> clean pose, all normalized.
class PoseDenoiser {
 public:
  virtual ~PoseDenoiser() = default;
  virtual std::size_t pose_dim() const = 0;
  virtual std::size_t condition_dim() const = 0;
  virtual bool frozen() const = 0;
  // noisy [N, pose_dim], condition [N, condition_dim], one step per row.
  virtual ad::Var predict(ad::Graph& g, ad::Var noisy, ad::Var condition, const std::vector<int>& steps) const = 0;
};

// Two hidden GELU layers over [noisy | condition | time embedding].
class MlpDenoiser final : public PoseDenoiser {
 public:
  MlpDenoiser(std::size_t joints, std::size_t hidden, std::uint64_t seed);
  // Wraps existing parameters (e.g. from a checkpoint); shapes are validated.
  MlpDenoiser(std::size_t joints, std::size_t hidden, ad::ParameterSet params);

  std::size_t joints() const { return joints_; }
  std::size_t hidden() const { return hidden_; }
  std::size_t pose_dim() const override { return 3 * joints_; }
  std::size_t condition_dim() const override { return 2 * joints_; }
  bool frozen() const override { return frozen_; }
  void freeze() { frozen_ = true; }

  const ad::ParameterSet& params() const { return params_; }
  // Throws std::logic_error once frozen.
  ad::ParameterSet& mutable_params();

  ad::Var predict(ad::Graph& g, ad::Var noisy, ad::Var condition, const std::vector<int>& steps) const override;
  // Same network with caller-bound parameter variables (used for training).
  ad::Var predict_with(ad::Graph& g, const std::map<std::string, ad::Var>& p, ad::Var noisy, ad::Var condition,
                       const std::vector<int>& steps) const;

 private:
  void check_shapes() const;
  std::size_t joints_;
  std::size_t hidden_;
  ad::ParameterSet params_;
  bool frozen_ = false;
};

// Paired training data: row i of `poses` is a flattened P x 3 pose (x, y, z
// per joint), row i of `conditions` the matching flattened P x 2 measurement.
struct PoseDataset {
  Eigen::MatrixXd poses;
  Eigen::MatrixXd conditions;
  std::size_t size() const { return static_cast<std::size_t>(poses.rows()); }
};

struct DenoiserTrainOptions {
  int epochs = 20;
  double lr = 1e-3;
  int batch_size = 64;
  std::size_t hidden = 128;
  std::uint64_t seed = 0;
  // Divide poses and conditions by the RMS pose coordinate before training.
  bool normalize = true;
};

struct DenoiserTrainResult {
  std::shared_ptr<MlpDenoiser> denoiser;  // not frozen
  double data_scale = 1.0;
  // Monte-Carlo estimate of the training objective on a fixed set of
  // (t, eps) draws: entry 0 at initialization, then one per epoch.
  std::vector<double> loss_trace;
};

DenoiserTrainResult train_denoiser(const PoseDataset& data, const NoiseSchedule& schedule,
                                   const DenoiserTrainOptions& opts);

// Draws shared by the value and graph routes of the prior loss.
struct PriorDraws {
  std::vector<int> steps;  // one per (draw, pose), draw-major
  Eigen::MatrixXd noise;   // rows aligned with `steps`
};
PriorDraws draw_prior_noise(const NoiseSchedule& schedule, std::size_t poses, std::size_t pose_dim, int mc_samples,
                            std::mt19937_64& rng);

// Frozen denoiser plus its schedule.
class DiffusionPrior {
 public:
  DiffusionPrior(NoiseSchedule schedule, std::shared_ptr<const PoseDenoiser> denoiser, double data_scale = 1.0);
  // Copies share the denoiser and start from the source's invocation count.
  DiffusionPrior(const DiffusionPrior& o)
      : schedule_(o.schedule_), denoiser_(o.denoiser_), data_scale_(o.data_scale_), invocations_(o.invocations()) {}
  DiffusionPrior& operator=(const DiffusionPrior&) = delete;

  const NoiseSchedule& schedule() const { return schedule_; }
  const PoseDenoiser& denoiser() const { return *denoiser_; }
  double data_scale() const { return data_scale_; }

  // Ancestral sampling conditioned on one flattened measurement.
  Eigen::VectorXd sample(const Eigen::VectorXd& condition, std::uint64_t seed) const;

  // (1/N) sum_n ||y0 - g(y_t, c, t)||^2 over N Monte-Carlo draws of (t, eps).
  double prior_loss(const Eigen::VectorXd& pose, const Eigen::VectorXd& condition, int mc_samples,
                    std::uint64_t seed) const;

  // Graph route, averaged over poses and draws. `poses` is [N, 3P]. Gradients
  // reach `poses` through the clean term and through the noised input unless
  // `detach_noisy` is set.
  ad::Var prior_loss(ad::Graph& g, ad::Var poses, const Eigen::MatrixXd& conditions, const PriorDraws& draws,
                     bool detach_noisy = false) const;

  // Number of prior_loss / sample calls so far.
  std::size_t invocations() const { return invocations_.load(); }

 private:
  void require_frozen() const;
  NoiseSchedule schedule_;
  std::shared_ptr<const PoseDenoiser> denoiser_;
  double data_scale_;
  mutable std::atomic<std::size_t> invocations_{0};
};

// Checkpoint round trip for an MLP-backed prior.
void save_diffusion_checkpoint(const std::string& path, const NoiseSchedule& schedule, const MlpDenoiser& denoiser,
                               double data_scale);
// Returns a prior whose denoiser is frozen.
DiffusionPrior load_diffusion_checkpoint(const std::string& path);

}  // namespace nrsfm
