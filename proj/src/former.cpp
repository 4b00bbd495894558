#include "nrsfm/former.h"

#include "nrsfm/errors.h"
#include "nrsfm/io.h"

#include <cmath>
#include <random>

namespace nrsfm {

namespace {

constexpr double kMasked = -1e30;

std::string block_prefix(std::size_t b, const char* kind) { return "block" + std::to_string(b) + "." + kind + "."; }

// Additive mask allowing attention only between rows that share a group.
ad::Tensor group_mask(std::size_t frames, std::size_t joints, bool spatial) {
  const std::size_t cols = joints + 1;
  const std::size_t n = (frames + 1) * cols;
  ad::Tensor m({n, n}, kMasked);
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t b = 0; b < n; ++b) {
      const bool same = spatial ? (a / cols == b / cols) : (a % cols == b % cols);
      if (same) m.at(a, b) = 0.0;
    }
  }
  return m;
}

ad::Var affine(ad::Var x, ad::Var w, ad::Var b) { return ad::matmul(x, w) + ad::tile_rows(b, x.value().rows()); }

ad::Var layer_norm(ad::Var x, ad::Var gain, ad::Var bias) {
  const std::size_t n = x.value().rows();
  return ad::mul(ad::layer_norm_rows(x), ad::tile_rows(gain, n)) + ad::tile_rows(bias, n);
}

}  // namespace

void ModelConfig::validate() const {
  if (frames < 1 || joints < 1 || blocks < 1 || heads < 1 || dim < 1 || ffn_mult < 1) {
    throw ValidationError("model frames, joints, dim, blocks and heads must be >= 1");
  }
  if (dim % heads != 0) {
    throw ValidationError("model dim " + std::to_string(dim) + " is not divisible by heads " + std::to_string(heads));
  }
  if (!(init_sigma >= 0.0) || !(unit_mm > 0.0)) throw ValidationError("init_sigma must be >= 0 and unit_mm > 0");
}

std::vector<std::pair<std::string, ad::Shape>> FormerModel::parameter_layout(const ModelConfig& cfg) {
  cfg.validate();
  const std::size_t d = cfg.dim, h = cfg.ffn_mult * cfg.dim;
  std::vector<std::pair<std::string, ad::Shape>> out = {
      {"embed.w", {2, d}},
      {"embed.b", {1, d}},
      {"pos.spatial", {cfg.joints + 1, d}},
      {"pos.temporal", {cfg.frames + 1, d}},
      {"token.seq", {1, d}},
      {"token.pose", {1, d}},
  };
  for (std::size_t b = 0; b < cfg.blocks; ++b) {
    for (const char* kind : {"stb", "ttb"}) {
      const std::string p = block_prefix(b, kind);
      out.push_back({p + "ln1.g", {1, d}});
      out.push_back({p + "ln1.b", {1, d}});
      out.push_back({p + "wq", {d, d}});
      out.push_back({p + "wk", {d, d}});
      out.push_back({p + "wv", {d, d}});
      out.push_back({p + "wo", {d, d}});
      out.push_back({p + "ln2.g", {1, d}});
      out.push_back({p + "ln2.b", {1, d}});
      out.push_back({p + "ffn.w1", {d, h}});
      out.push_back({p + "ffn.b1", {1, h}});
      out.push_back({p + "ffn.w2", {h, d}});
      out.push_back({p + "ffn.b2", {1, d}});
    }
  }
  out.push_back({"head.ref.w", {d, 3 * cfg.joints}});
  out.push_back({"head.ref.b", {1, 3 * cfg.joints}});
  out.push_back({"head.def.w", {d, 3}});
  out.push_back({"head.def.b", {1, 3}});
  out.push_back({"head.rot.w", {d, 6}});
  out.push_back({"head.rot.b", {1, 6}});
  return out;
}

std::size_t FormerModel::parameter_count(const ModelConfig& cfg) {
  std::size_t n = 0;
  for (const auto& [name, shape] : parameter_layout(cfg)) n += ad::shape_size(shape);
  return n;
}

FormerModel::FormerModel(const ModelConfig& cfg) : cfg_(cfg) {
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> n(0.0, 1.0);
  for (const auto& [name, shape] : parameter_layout(cfg)) {
    const bool gain = name.ends_with("ln1.g") || name.ends_with("ln2.g");
    const bool ln_bias = name.ends_with("ln1.b") || name.ends_with("ln2.b");
    ad::Tensor t(shape, gain ? 1.0 : 0.0);
    if (!gain && !ln_bias) {
      for (double& v : t.data()) v = cfg.init_sigma * n(rng);
    }
    params_.add(name, std::move(t));
  }
}

FormerModel::FormerModel(const ModelConfig& cfg, ad::ParameterSet params) : cfg_(cfg), params_(std::move(params)) {
  const auto layout = parameter_layout(cfg);
  for (const auto& [name, shape] : layout) {
    if (!params_.contains(name)) throw ValidationError("model parameter '" + name + "' missing");
    if (params_.get(name).shape() != shape) {
      throw ValidationError("model parameter '" + name + "' has shape " + ad::shape_string(params_.get(name).shape()) +
                            ", expected " + ad::shape_string(shape));
    }
  }
  if (params_.all().size() != layout.size()) throw ValidationError("model checkpoint has unexpected parameters");
}

void FormerModel::check_input(const MeasurementSequence& w) const {
  if (w.size() != cfg_.frames) {
    throw ValidationError("model expects " + std::to_string(cfg_.frames) + " frames, got " + std::to_string(w.size()));
  }
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (static_cast<std::size_t>(w[i].rows()) != cfg_.joints) {
      throw ValidationError("model expects " + std::to_string(cfg_.joints) + " joints, frame " + std::to_string(i) +
                            " has " + std::to_string(w[i].rows()));
    }
    if (!w[i].allFinite()) throw ValidationError("non-finite measurement in frame " + std::to_string(i));
  }
}

FormerOutputs FormerModel::forward(ad::Graph& g, const MeasurementSequence& w) const {
  std::map<std::string, ad::Var> p;
  for (const auto& [name, t] : params_.all()) p.emplace(name, g.constant(t));
  return forward(g, p, w);
}

FormerOutputs FormerModel::forward(ad::Graph& g, const std::map<std::string, ad::Var>& p,
                                   const MeasurementSequence& w) const {
  check_input(w);
  const std::size_t f = cfg_.frames, pj = cfg_.joints, cols = pj + 1, n = cfg_.positions();
  const std::size_t d = cfg_.dim, dh = d / cfg_.heads;
  FormerOutputs out;

  // Embedding.
  ad::Var kp = affine(g.constant(ad::Tensor::from_matrix(stack_rows(w) / cfg_.unit_mm)), p.at("embed.w"), p.at("embed.b"));
  ad::Var pool = ad::concat_rows({p.at("token.seq"), p.at("token.pose"), kp});
  std::vector<std::size_t> src(n), spatial(n), temporal(n);
  for (std::size_t r = 0; r < n; ++r) {
    const std::size_t i = r / cols, j = r % cols;
    src[r] = i == 0 ? 0 : (j == 0 ? 1 : 2 + (i - 1) * pj + (j - 1));
    spatial[r] = j;
    temporal[r] = i;
  }
  ad::Var z = ad::gather_rows(pool, src) + ad::gather_rows(p.at("pos.spatial"), spatial) +
              ad::gather_rows(p.at("pos.temporal"), temporal);
  out.embedded = z;

  const ad::Var masks[2] = {g.constant(group_mask(f, pj, true)), g.constant(group_mask(f, pj, false))};
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  for (std::size_t b = 0; b < cfg_.blocks; ++b) {
    for (int s = 0; s < 2; ++s) {
      const std::string pre = block_prefix(b, s == 0 ? "stb" : "ttb");
      ad::Var h = layer_norm(z, p.at(pre + "ln1.g"), p.at(pre + "ln1.b"));
      ad::Var q = ad::matmul(h, p.at(pre + "wq"));
      ad::Var k = ad::matmul(h, p.at(pre + "wk"));
      ad::Var v = ad::matmul(h, p.at(pre + "wv"));
      std::vector<ad::Var> heads;
      for (std::size_t hd = 0; hd < cfg_.heads; ++hd) {
        ad::Var qh = ad::slice_cols(q, hd * dh, dh);
        ad::Var kh = ad::slice_cols(k, hd * dh, dh);
        ad::Var vh = ad::slice_cols(v, hd * dh, dh);
        ad::Var a = ad::softmax_rows(ad::scale(ad::matmul(qh, ad::transpose(kh)), inv_sqrt) + masks[s]);
        out.attention.push_back(a);
        heads.push_back(ad::matmul(a, vh));
      }
      z = z + ad::matmul(heads.size() == 1 ? heads[0] : ad::concat_cols(heads), p.at(pre + "wo"));
      ad::Var h2 = layer_norm(z, p.at(pre + "ln2.g"), p.at(pre + "ln2.b"));
      z = z + affine(ad::gelu(affine(h2, p.at(pre + "ffn.w1"), p.at(pre + "ffn.b1"))), p.at(pre + "ffn.w2"),
                     p.at(pre + "ffn.b2"));
    }
    if (!z.value().all_finite()) throw NumericalError("former: non-finite activations in block " + std::to_string(b));
  }
  out.activations = z;

  // Reference head: mean over the sequence-token row.
  ad::Var row0 = ad::slice_rows(z, 0, cols);
  ad::Var pooled = ad::matmul(g.constant(ad::Tensor({1, cols}, 1.0 / static_cast<double>(cols))), row0);
  ad::Var ref = ad::reshape(affine(pooled, p.at("head.ref.w"), p.at("head.ref.b")), {pj, 3});
  ad::Tensor center({pj, pj}, -1.0 / static_cast<double>(pj));
  for (std::size_t j = 0; j < pj; ++j) center.at(j, j) += 1.0;
  out.reference = ad::scale(ad::matmul(g.constant(std::move(center)), ref), cfg_.unit_mm);

  std::vector<std::size_t> kp_rows, pose_rows;
  for (std::size_t i = 1; i <= f; ++i) {
    pose_rows.push_back(i * cols);
    for (std::size_t j = 1; j <= pj; ++j) kp_rows.push_back(i * cols + j);
  }
  out.deformations = ad::scale(affine(ad::gather_rows(z, kp_rows), p.at("head.def.w"), p.at("head.def.b")), cfg_.unit_mm);

  ad::Tensor ident({f, 6}, 0.0);
  for (std::size_t i = 0; i < f; ++i) {
    ident.at(i, 0) = 1.0;
    ident.at(i, 4) = 1.0;
  }
  ad::Var six = affine(ad::gather_rows(z, pose_rows), p.at("head.rot.w"), p.at("head.rot.b")) + g.constant(std::move(ident));
  out.rotations = ad::gram_schmidt(six);
  out.shapes = ad::tile_rows(out.reference, f) + out.deformations;
  return out;
}

ad::Tensor FormerModel::embed(const MeasurementSequence& w) const {
  ad::Graph g;
  return forward(g, w).embedded.value();
}

RmnrdDecomposition FormerModel::predict(const MeasurementSequence& w) const {
  ad::Graph g;
  const FormerOutputs o = forward(g, w);
  RmnrdDecomposition d;
  d.reference = o.reference.value().to_matrix();
  const Eigen::MatrixXd def = o.deformations.value().to_matrix();
  const auto pj = static_cast<Eigen::Index>(cfg_.joints);
  const ad::Tensor& r = o.rotations.value();
  for (std::size_t i = 0; i < cfg_.frames; ++i) {
    d.deformations.push_back(def.middleRows(static_cast<Eigen::Index>(i) * pj, pj));
    Eigen::Matrix3d m;
    for (int a = 0; a < 3; ++a)
      for (int b = 0; b < 3; ++b) m(a, b) = r.at(i, static_cast<std::size_t>(3 * a + b));
    d.rotations.push_back(Rotation::from_matrix(m, 1e-8));
  }
  return d;
}

// --- training --------------------------------------------------------------

namespace {

struct BatchLoss {
  ad::Var loss;
  LossBreakdown mean;
};

BatchLoss batch_loss(ad::Graph& g, const FormerModel& model, const std::map<std::string, ad::Var>& p,
                     const std::vector<MeasurementSequence>& batch, const DiffusionPrior* prior, const LossConfig& cfg,
                     std::uint64_t seed) {
  if (batch.empty()) throw ValidationError("empty training batch");
  cfg.validate();
  const DiffusionPrior* used = cfg.beta[2] > 0.0 ? prior : nullptr;
  BatchLoss out;
  ad::Var acc;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const FormerOutputs o = model.forward(g, p, batch[b]);
    const Joints3D ref = o.reference.value().to_matrix();
    const graph::LossTerms t = graph::total(g, o.rotations, o.shapes, ref, batch[b], used, cfg, seed + b);
    const LossBreakdown v = t.values();
    out.mean.reproj += v.reproj;
    out.mean.proc += v.proc;
    out.mean.prior += v.prior;
    out.mean.smooth += v.smooth;
    acc = b == 0 ? t.total : acc + t.total;
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  out.mean.reproj *= inv;
  out.mean.proc *= inv;
  out.mean.prior *= inv;
  out.mean.smooth *= inv;
  out.mean.total = weighted_total(cfg, out.mean.reproj, out.mean.proc, out.mean.prior, out.mean.smooth);
  out.loss = ad::scale(acc, inv);
  return out;
}

}  // namespace

LossBreakdown FormerTrainer::step(const std::vector<MeasurementSequence>& batch, const DiffusionPrior* prior,
                                  const LossConfig& cfg, double lr, std::uint64_t seed) {
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw ValidationError("learning rate must be finite and >= 0");
  ad::Graph g;
  const auto p = model_.params().bind(g);
  const BatchLoss bl = batch_loss(g, model_, p, batch, prior, cfg, seed);
  if (!std::isfinite(bl.loss.value().item())) throw NumericalError("former: non-finite training loss");
  adam_.step(model_.mutable_params(), g.backward(bl.loss), lr);
  return bl.mean;
}

LossBreakdown FormerTrainer::evaluate(const std::vector<MeasurementSequence>& batch, const DiffusionPrior* prior,
                                      const LossConfig& cfg, std::uint64_t seed) const {
  ad::Graph g;
  std::map<std::string, ad::Var> p;
  for (const auto& [name, t] : model_.params().all()) p.emplace(name, g.constant(t));
  return batch_loss(g, model_, p, batch, prior, cfg, seed).mean;
}

// --- checkpoint ------------------------------------------------------------

void save_former_checkpoint(const std::string& path, const FormerModel& model) {
  const ModelConfig& c = model.config();
  io::Checkpoint ck;
  ck.kind = "former";
  ck.header = {{"frames", c.frames}, {"joints", c.joints},     {"dim", c.dim},
               {"blocks", c.blocks}, {"heads", c.heads},       {"ffn_mult", c.ffn_mult},
               {"seed", c.seed},     {"init_sigma", c.init_sigma}, {"unit_mm", c.unit_mm}};
  ck.params = model.params();
  io::save_checkpoint(path, ck);
}

FormerModel load_former_checkpoint(const std::string& path) {
  io::Checkpoint ck = io::load_checkpoint(path, "former");
  ModelConfig c;
  try {
    const auto& h = ck.header;
    c.frames = h.at("frames").get<std::size_t>();
    c.joints = h.at("joints").get<std::size_t>();
    c.dim = h.at("dim").get<std::size_t>();
    c.blocks = h.at("blocks").get<std::size_t>();
    c.heads = h.at("heads").get<std::size_t>();
    c.ffn_mult = h.at("ffn_mult").get<std::size_t>();
    c.seed = h.at("seed").get<std::uint64_t>();
    c.init_sigma = h.at("init_sigma").get<double>();
    c.unit_mm = h.at("unit_mm").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(path + ": malformed model header: " + e.what());
  }
  return FormerModel(c, std::move(ck.params));
}

}  // namespace nrsfm
