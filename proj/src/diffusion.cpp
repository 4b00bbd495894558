#include "nrsfm/diffusion.h"

#include "nrsfm/errors.h"
#include "nrsfm/io.h"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace nrsfm {

namespace {

constexpr std::size_t kEvalChunk = 4096;

ad::Tensor gaussian(ad::Shape shape, double sigma, std::mt19937_64& rng) {
  ad::Tensor t(std::move(shape));
  std::normal_distribution<double> n(0.0, sigma);
  for (double& v : t.data()) v = n(rng);
  return t;
}

// Each row r holds value(r) in every column.
ad::Tensor row_constant(std::size_t rows, std::size_t cols, const std::vector<double>& per_row) {
  ad::Tensor t({rows, cols});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) t.at(r, c) = per_row[r];
  return t;
}

}  // namespace

// --- schedule --------------------------------------------------------------

NoiseSchedule::NoiseSchedule(std::vector<double> betas) : betas_(std::move(betas)) {
  if (betas_.empty()) throw ValidationError("noise schedule needs at least one step");
  double prod = 1.0;
  for (double b : betas_) {
    if (!(b > 0.0 && b < 1.0)) throw ValidationError("noise schedule betas must lie in (0, 1)");
    prod *= 1.0 - b;
    alpha_bars_.push_back(prod);
  }
}

NoiseSchedule NoiseSchedule::linear(int steps, double beta_start, double beta_end) {
  if (steps < 1) throw ValidationError("noise schedule needs at least one step");
  std::vector<double> betas(static_cast<std::size_t>(steps));
  for (int i = 0; i < steps; ++i) {
    const double f = steps == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(steps - 1);
    betas[static_cast<std::size_t>(i)] = beta_start + f * (beta_end - beta_start);
  }
  return NoiseSchedule(std::move(betas));
}

std::size_t NoiseSchedule::index(int t) const {
  if (t < 1 || t > steps()) {
    throw ValidationError("diffusion step " + std::to_string(t) + " outside [1, " + std::to_string(steps()) + "]");
  }
  return static_cast<std::size_t>(t - 1);
}

double NoiseSchedule::posterior_variance(int t) const {
  return (1.0 - alpha_bar(t - 1)) / (1.0 - alpha_bar(t)) * beta(t);
}

Eigen::VectorXd forward_noise(const NoiseSchedule& schedule, const Eigen::VectorXd& y0, int t,
                              const Eigen::VectorXd& eps) {
  if (eps.size() != y0.size()) throw ValidationError("forward_noise: noise and pose sizes differ");
  const double ab = schedule.alpha_bar(t);
  return std::sqrt(ab) * y0 + std::sqrt(1.0 - ab) * eps;
}

Eigen::RowVectorXd timestep_embedding(int t, int dim) {
  const int half = dim / 2;
  Eigen::RowVectorXd e(dim);
  for (int k = 0; k < half; ++k) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(k) / static_cast<double>(half));
    e[k] = std::sin(t * freq);
    e[half + k] = std::cos(t * freq);
  }
  return e;
}

// --- denoiser --------------------------------------------------------------

MlpDenoiser::MlpDenoiser(std::size_t joints, std::size_t hidden, std::uint64_t seed)
    : joints_(joints), hidden_(hidden) {
  if (joints == 0 || hidden == 0) throw ValidationError("denoiser dimensions must be positive");
  std::mt19937_64 rng(seed);
  const std::size_t in = 5 * joints + kTimeEmbeddingDim;
  const std::size_t out = 3 * joints;
  params_.add("w1", gaussian({in, hidden}, 1.0 / std::sqrt(static_cast<double>(in)), rng));
  params_.add("b1", ad::Tensor({1, hidden}, 0.0));
  params_.add("w2", gaussian({hidden, hidden}, 1.0 / std::sqrt(static_cast<double>(hidden)), rng));
  params_.add("b2", ad::Tensor({1, hidden}, 0.0));
  params_.add("w3", gaussian({hidden, out}, 1.0 / std::sqrt(static_cast<double>(hidden)), rng));
  params_.add("b3", ad::Tensor({1, out}, 0.0));
}

MlpDenoiser::MlpDenoiser(std::size_t joints, std::size_t hidden, ad::ParameterSet params)
    : joints_(joints), hidden_(hidden), params_(std::move(params)) {
  check_shapes();
}

void MlpDenoiser::check_shapes() const {
  const std::size_t in = 5 * joints_ + kTimeEmbeddingDim;
  const std::size_t out = 3 * joints_;
  const std::map<std::string, ad::Shape> expected{
      {"w1", {in, hidden_}},  {"b1", {1, hidden_}}, {"w2", {hidden_, hidden_}},
      {"b2", {1, hidden_}},   {"w3", {hidden_, out}}, {"b3", {1, out}},
  };
  for (const auto& [name, shape] : expected) {
    if (!params_.contains(name)) throw ValidationError("denoiser parameter '" + name + "' missing");
    if (params_.get(name).shape() != shape) {
      throw ValidationError("denoiser parameter '" + name + "' has shape " +
                            ad::shape_string(params_.get(name).shape()) + ", expected " + ad::shape_string(shape));
    }
  }
  if (params_.all().size() != expected.size()) throw ValidationError("denoiser checkpoint has unexpected parameters");
}

ad::ParameterSet& MlpDenoiser::mutable_params() {
  if (frozen_) throw std::logic_error("denoiser is frozen");
  return params_;
}

ad::Var MlpDenoiser::predict(ad::Graph& g, ad::Var noisy, ad::Var condition, const std::vector<int>& steps) const {
  std::map<std::string, ad::Var> p;
  for (const auto& [name, t] : params_.all()) p.emplace(name, g.constant(t));
  return predict_with(g, p, noisy, condition, steps);
}

ad::Var MlpDenoiser::predict_with(ad::Graph& g, const std::map<std::string, ad::Var>& p, ad::Var noisy,
                                  ad::Var condition, const std::vector<int>& steps) const {
  const std::size_t n = noisy.value().rows();
  if (steps.size() != n || condition.value().rows() != n) {
    throw ValidationError("denoiser: batch sizes of pose, condition and steps differ");
  }
  ad::Tensor temb({n, static_cast<std::size_t>(kTimeEmbeddingDim)});
  for (std::size_t r = 0; r < n; ++r) {
    const Eigen::RowVectorXd e = timestep_embedding(steps[r]);
    for (int c = 0; c < kTimeEmbeddingDim; ++c) temb.at(r, static_cast<std::size_t>(c)) = e[c];
  }
  ad::Var x = ad::concat_cols({noisy, condition, g.constant(std::move(temb))});
  ad::Var h = ad::gelu(ad::matmul(x, p.at("w1")) + ad::tile_rows(p.at("b1"), n));
  h = ad::gelu(ad::matmul(h, p.at("w2")) + ad::tile_rows(p.at("b2"), n));
  return ad::matmul(h, p.at("w3")) + ad::tile_rows(p.at("b3"), n);
}

// --- training --------------------------------------------------------------

PriorDraws draw_prior_noise(const NoiseSchedule& schedule, std::size_t poses, std::size_t pose_dim, int mc_samples,
                            std::mt19937_64& rng) {
  if (mc_samples < 1) throw ValidationError("prior needs at least one Monte-Carlo sample");
  const std::size_t rows = poses * static_cast<std::size_t>(mc_samples);
  PriorDraws d;
  d.steps.resize(rows);
  d.noise.resize(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(pose_dim));
  std::uniform_int_distribution<int> step(1, schedule.steps());
  std::normal_distribution<double> n(0.0, 1.0);
  for (std::size_t r = 0; r < rows; ++r) {
    d.steps[r] = step(rng);
    for (std::size_t c = 0; c < pose_dim; ++c) d.noise(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = n(rng);
  }
  return d;
}

namespace {

// Mean over rows of ||y0 - g(y_t, c, t)||^2 with every input normalized.
ad::Var denoising_objective(ad::Graph& g, const MlpDenoiser& net, const std::map<std::string, ad::Var>* trainable,
                            const NoiseSchedule& schedule, const Eigen::MatrixXd& clean, const Eigen::MatrixXd& cond,
                            const std::vector<int>& steps, const Eigen::MatrixXd& noise) {
  const auto rows = clean.rows();
  Eigen::MatrixXd noisy(rows, clean.cols());
  for (Eigen::Index r = 0; r < rows; ++r) {
    const double ab = schedule.alpha_bar(steps[static_cast<std::size_t>(r)]);
    noisy.row(r) = std::sqrt(ab) * clean.row(r) + std::sqrt(1.0 - ab) * noise.row(r);
  }
  ad::Var y0 = g.constant(ad::Tensor::from_matrix(clean));
  ad::Var yt = g.constant(ad::Tensor::from_matrix(noisy));
  ad::Var c = g.constant(ad::Tensor::from_matrix(cond));
  ad::Var pred = trainable ? net.predict_with(g, *trainable, yt, c, steps) : net.predict(g, yt, c, steps);
  return ad::scale(ad::frobenius_sq(pred - y0), 1.0 / static_cast<double>(rows));
}

double monitor_loss(const MlpDenoiser& net, const NoiseSchedule& schedule, const Eigen::MatrixXd& clean,
                    const Eigen::MatrixXd& cond, const std::vector<int>& steps, const Eigen::MatrixXd& noise) {
  double total = 0.0;
  const auto n = clean.rows();
  for (Eigen::Index start = 0; start < n; start += static_cast<Eigen::Index>(kEvalChunk)) {
    const Eigen::Index len = std::min<Eigen::Index>(static_cast<Eigen::Index>(kEvalChunk), n - start);
    ad::Graph g;
    std::vector<int> s(steps.begin() + start, steps.begin() + start + len);
    ad::Var l = denoising_objective(g, net, nullptr, schedule, clean.middleRows(start, len),
                                    cond.middleRows(start, len), s, noise.middleRows(start, len));
    total += l.value().item() * static_cast<double>(len);
  }
  return total / static_cast<double>(n);
}

}  // namespace

DenoiserTrainResult train_denoiser(const PoseDataset& data, const NoiseSchedule& schedule,
                                   const DenoiserTrainOptions& opts) {
  if (data.size() == 0) throw ValidationError("train_denoiser: empty dataset");
  if (data.poses.cols() % 3 != 0 || data.conditions.cols() * 3 != data.poses.cols() * 2 ||
      data.conditions.rows() != data.poses.rows()) {
    throw ValidationError("train_denoiser: pose and condition dimensions are inconsistent");
  }
  if (opts.epochs < 0 || opts.batch_size < 1 || opts.lr < 0.0) throw ValidationError("train_denoiser: bad options");
  if (!data.poses.allFinite() || !data.conditions.allFinite()) throw ValidationError("train_denoiser: non-finite data");

  const auto joints = static_cast<std::size_t>(data.poses.cols() / 3);
  DenoiserTrainResult out;
  out.data_scale = 1.0;
  if (opts.normalize) {
    const double rms = std::sqrt(data.poses.squaredNorm() / static_cast<double>(data.poses.size()));
    if (rms > 0.0) out.data_scale = rms;
  }
  const Eigen::MatrixXd clean = data.poses / out.data_scale;
  const Eigen::MatrixXd cond = data.conditions / out.data_scale;
  const std::size_t n = data.size();

  std::mt19937_64 rng(opts.seed);
  out.denoiser = std::make_shared<MlpDenoiser>(joints, opts.hidden, rng());
  MlpDenoiser& net = *out.denoiser;

  std::mt19937_64 monitor_rng(rng());
  const PriorDraws monitor = draw_prior_noise(schedule, n, 3 * joints, 1, monitor_rng);
  out.loss_trace.push_back(monitor_loss(net, schedule, clean, cond, monitor.steps, monitor.noise));

  ad::Adam adam;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  const auto batch = static_cast<std::size_t>(opts.batch_size);

  for (int epoch = 0; epoch < opts.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < n; start += batch) {
      const std::size_t len = std::min(batch, n - start);
      Eigen::MatrixXd y(static_cast<Eigen::Index>(len), clean.cols());
      Eigen::MatrixXd c(static_cast<Eigen::Index>(len), cond.cols());
      for (std::size_t i = 0; i < len; ++i) {
        y.row(static_cast<Eigen::Index>(i)) = clean.row(static_cast<Eigen::Index>(order[start + i]));
        c.row(static_cast<Eigen::Index>(i)) = cond.row(static_cast<Eigen::Index>(order[start + i]));
      }
      const PriorDraws d = draw_prior_noise(schedule, len, 3 * joints, 1, rng);
      ad::Graph g;
      const auto p = net.params().bind(g);
      ad::Var loss = denoising_objective(g, net, &p, schedule, y, c, d.steps, d.noise);
      if (!std::isfinite(loss.value().item())) {
        throw NumericalError("train_denoiser: non-finite loss in epoch " + std::to_string(epoch));
      }
      adam.step(net.mutable_params(), g.backward(loss), opts.lr);
    }
    out.loss_trace.push_back(monitor_loss(net, schedule, clean, cond, monitor.steps, monitor.noise));
    if (!std::isfinite(out.loss_trace.back())) {
      throw NumericalError("train_denoiser: non-finite loss after epoch " + std::to_string(epoch));
    }
  }
  return out;
}

// --- prior -----------------------------------------------------------------

DiffusionPrior::DiffusionPrior(NoiseSchedule schedule, std::shared_ptr<const PoseDenoiser> denoiser, double data_scale)
    : schedule_(std::move(schedule)), denoiser_(std::move(denoiser)), data_scale_(data_scale) {
  if (!denoiser_) throw ValidationError("diffusion prior needs a denoiser");
  if (!(data_scale_ > 0.0) || !std::isfinite(data_scale_)) throw ValidationError("data_scale must be positive");
  if (schedule_.steps() < 1) throw ValidationError("diffusion prior needs a non-empty schedule");
}

void DiffusionPrior::require_frozen() const {
  if (!denoiser_->frozen()) throw std::logic_error("diffusion prior used with an unfrozen denoiser");
}

Eigen::VectorXd DiffusionPrior::sample(const Eigen::VectorXd& condition, std::uint64_t seed) const {
  require_frozen();
  ++invocations_;
  if (static_cast<std::size_t>(condition.size()) != denoiser_->condition_dim()) {
    throw ValidationError("sample: condition has the wrong size");
  }
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  const auto dim = static_cast<Eigen::Index>(denoiser_->pose_dim());
  Eigen::RowVectorXd y(dim);
  for (Eigen::Index i = 0; i < dim; ++i) y[i] = n(rng);
  const Eigen::RowVectorXd c = condition.transpose() / data_scale_;

  for (int t = schedule_.steps(); t >= 1; --t) {
    ad::Graph g;
    ad::Var pred = denoiser_->predict(g, g.constant(ad::Tensor::from_matrix(y)),
                                      g.constant(ad::Tensor::from_matrix(c)), {t});
    const Eigen::RowVectorXd x0 = pred.value().to_matrix();
    if (t == 1) {
      y = x0;
      break;
    }
    const double ab = schedule_.alpha_bar(t);
    const double ab_prev = schedule_.alpha_bar(t - 1);
    const double beta = schedule_.beta(t);
    const double c0 = std::sqrt(ab_prev) * beta / (1.0 - ab);
    const double ct = std::sqrt(schedule_.alpha(t)) * (1.0 - ab_prev) / (1.0 - ab);
    const double sigma = std::sqrt(schedule_.posterior_variance(t));
    Eigen::RowVectorXd next = c0 * x0 + ct * y;
    for (Eigen::Index i = 0; i < dim; ++i) next[i] += sigma * n(rng);
    y = next;
  }
  return data_scale_ * y.transpose();
}

ad::Var DiffusionPrior::prior_loss(ad::Graph& g, ad::Var poses, const Eigen::MatrixXd& conditions,
                                   const PriorDraws& draws, bool detach_noisy) const {
  require_frozen();
  ++invocations_;
  const std::size_t n = poses.value().rows();
  const std::size_t dim = denoiser_->pose_dim();
  if (poses.value().cols() != dim) throw ValidationError("prior_loss: pose dimension mismatch");
  if (static_cast<std::size_t>(conditions.rows()) != n ||
      static_cast<std::size_t>(conditions.cols()) != denoiser_->condition_dim()) {
    throw ValidationError("prior_loss: condition shape mismatch");
  }
  if (n == 0 || draws.steps.size() % n != 0 || static_cast<std::size_t>(draws.noise.rows()) != draws.steps.size()) {
    throw ValidationError("prior_loss: draws do not match the pose batch");
  }
  const std::size_t reps = draws.steps.size() / n;
  const std::size_t rows = draws.steps.size();

  std::vector<double> clean_coef(rows), noise_coef(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double ab = schedule_.alpha_bar(draws.steps[r]);
    clean_coef[r] = std::sqrt(ab) / data_scale_;
    noise_coef[r] = std::sqrt(1.0 - ab);
  }
  ad::Tensor noise_term({rows, dim});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < dim; ++c)
      noise_term.at(r, c) = noise_coef[r] * draws.noise(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));

  ad::Var clean = reps == 1 ? poses : ad::tile_rows(poses, reps);
  ad::Var noisy = ad::mul(clean, g.constant(row_constant(rows, dim, clean_coef))) + g.constant(std::move(noise_term));
  if (detach_noisy) noisy = g.constant(noisy.value());

  Eigen::MatrixXd cond_rep(static_cast<Eigen::Index>(rows), conditions.cols());
  for (std::size_t k = 0; k < reps; ++k) cond_rep.middleRows(static_cast<Eigen::Index>(k * n), static_cast<Eigen::Index>(n)) = conditions / data_scale_;
  ad::Var pred = denoiser_->predict(g, noisy, g.constant(ad::Tensor::from_matrix(cond_rep)), draws.steps);
  ad::Var diff = clean - ad::scale(pred, data_scale_);
  return ad::scale(ad::frobenius_sq(diff), 1.0 / static_cast<double>(rows));
}

double DiffusionPrior::prior_loss(const Eigen::VectorXd& pose, const Eigen::VectorXd& condition, int mc_samples,
                                  std::uint64_t seed) const {
  require_frozen();
  std::mt19937_64 rng(seed);
  const PriorDraws all = draw_prior_noise(schedule_, 1, denoiser_->pose_dim(), mc_samples, rng);
  const std::size_t total = all.steps.size();
  double acc = 0.0;
  for (std::size_t start = 0; start < total; start += kEvalChunk) {
    const std::size_t len = std::min(kEvalChunk, total - start);
    PriorDraws part;
    part.steps.assign(all.steps.begin() + static_cast<std::ptrdiff_t>(start),
                      all.steps.begin() + static_cast<std::ptrdiff_t>(start + len));
    part.noise = all.noise.middleRows(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(len));
    ad::Graph g;
    ad::Var y0 = g.constant(ad::Tensor::from_matrix(pose.transpose()));
    const double chunk = prior_loss(g, y0, condition.transpose(), part).value().item();
    --invocations_;
    acc += chunk * static_cast<double>(len);
  }
  ++invocations_;
  return acc / static_cast<double>(total);
}

// --- checkpoint ------------------------------------------------------------

void save_diffusion_checkpoint(const std::string& path, const NoiseSchedule& schedule, const MlpDenoiser& denoiser,
                               double data_scale) {
  io::Checkpoint ck;
  ck.kind = "diffusion";
  ck.header = {{"joints", denoiser.joints()},
               {"hidden", denoiser.hidden()},
               {"time_embedding_dim", kTimeEmbeddingDim},
               {"data_scale", data_scale},
               {"steps", schedule.steps()},
               {"betas", schedule.betas()}};
  ck.params = denoiser.params();
  io::save_checkpoint(path, ck);
}

DiffusionPrior load_diffusion_checkpoint(const std::string& path) {
  io::Checkpoint ck = io::load_checkpoint(path, "diffusion");
  const auto& h = ck.header;
  try {
    const auto steps = h.at("steps").get<int>();
    auto betas = h.at("betas").get<std::vector<double>>();
    if (static_cast<int>(betas.size()) != steps) {
      throw ValidationError(path + ": field 'steps' is " + std::to_string(steps) + " but 'betas' has " +
                            std::to_string(betas.size()) + " entries");
    }
    if (h.at("time_embedding_dim").get<int>() != kTimeEmbeddingDim) {
      throw ValidationError(path + ": unsupported field 'time_embedding_dim'");
    }
    auto net = std::make_shared<MlpDenoiser>(h.at("joints").get<std::size_t>(), h.at("hidden").get<std::size_t>(),
                                             std::move(ck.params));
    net->freeze();
    return DiffusionPrior(NoiseSchedule(std::move(betas)), std::move(net), h.at("data_scale").get<double>());
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(path + ": malformed diffusion header: " + e.what());
  }
}

}  // namespace nrsfm
