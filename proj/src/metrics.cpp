#include "nrsfm/metrics.h"

#include <cmath>
#include <numeric>

namespace nrsfm {

namespace {

void check_pair(const PoseSequence& pred, const PoseSequence& gt) {
  if (pred.size() != gt.size()) {
    throw ValidationError("num_frames differs: prediction has " + std::to_string(pred.size()) +
                          ", ground truth has " + std::to_string(gt.size()));
  }
  if (pred.empty()) throw ValidationError("empty pose sequence");
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i].rows() != gt[i].rows()) {
      throw ValidationError("num_joints differs in frame " + std::to_string(i) + ": prediction has " +
                            std::to_string(pred[i].rows()) + ", ground truth has " + std::to_string(gt[i].rows()));
    }
    if (pred[i].rows() == 0) throw ValidationError("frame " + std::to_string(i) + " has no joints");
  }
}

std::vector<double> row_errors(const Joints3D& a, const Joints3D& b) {
  std::vector<double> e(static_cast<std::size_t>(a.rows()));
  for (Eigen::Index j = 0; j < a.rows(); ++j) e[static_cast<std::size_t>(j)] = (a.row(j) - b.row(j)).norm();
  return e;
}

double mean_of(const std::vector<std::vector<double>>& errs) {
  double acc = 0.0;
  std::size_t n = 0;
  for (const auto& f : errs) {
    for (double v : f) acc += v;
    n += f.size();
  }
  return acc / static_cast<double>(n);
}

double frame_mean(const std::vector<double>& e) {
  return std::accumulate(e.begin(), e.end(), 0.0) / static_cast<double>(e.size());
}

}  // namespace

std::vector<std::vector<double>> joint_errors(const PoseSequence& pred, const PoseSequence& gt) {
  check_pair(pred, gt);
  std::vector<std::vector<double>> out;
  for (std::size_t i = 0; i < pred.size(); ++i) out.push_back(row_errors(pred[i], gt[i]));
  return out;
}

std::vector<std::vector<double>> joint_errors_scaled(const PoseSequence& pred, const PoseSequence& gt,
                                                     bool per_frame_scale) {
  check_pair(pred, gt);
  PoseSequence p, g;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    p.push_back(centralize(pred[i]));
    g.push_back(centralize(gt[i]));
  }
  std::vector<double> scales(pred.size());
  if (per_frame_scale) {
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double pp = p[i].squaredNorm();
      if (!(pp > 0.0)) throw ValidationError("n_mpjpe: prediction frame " + std::to_string(i) + " has zero norm");
      scales[i] = p[i].cwiseProduct(g[i]).sum() / pp;
    }
  } else {
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      num += p[i].cwiseProduct(g[i]).sum();
      den += p[i].squaredNorm();
    }
    if (!(den > 0.0)) throw ValidationError("n_mpjpe: prediction has zero norm");
    std::fill(scales.begin(), scales.end(), num / den);
  }
  std::vector<std::vector<double>> out;
  for (std::size_t i = 0; i < p.size(); ++i) out.push_back(row_errors(Joints3D(scales[i] * p[i]), g[i]));
  return out;
}

std::vector<std::vector<double>> joint_errors_procrustes(const PoseSequence& pred, const PoseSequence& gt) {
  check_pair(pred, gt);
  std::vector<std::vector<double>> out;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const Joints3D p = centralize(pred[i]);
    const Joints3D g = centralize(gt[i]);
    KabschResult k;
    try {
      k = kabsch(p, g, true);
    } catch (const DegenerateError&) {
      throw DegenerateError("frame " + std::to_string(i));
    }
    out.push_back(row_errors(Joints3D(k.scale * k.rotation.apply(p)), g));
  }
  return out;
}

double mpjpe(const PoseSequence& pred, const PoseSequence& gt) { return mean_of(joint_errors(pred, gt)); }

double n_mpjpe(const PoseSequence& pred, const PoseSequence& gt, bool per_frame_scale) {
  return mean_of(joint_errors_scaled(pred, gt, per_frame_scale));
}

double pa_mpjpe(const PoseSequence& pred, const PoseSequence& gt) { return mean_of(joint_errors_procrustes(pred, gt)); }

PoseSequence flip_depth(const PoseSequence& seq) {
  PoseSequence out = seq;
  for (auto& s : out) s.col(2) *= -1.0;
  return out;
}

PoseSequence resolve_depth_flip(const PoseSequence& pred, const PoseSequence& gt, bool* flipped) {
  PoseSequence f = flip_depth(pred);
  const bool use = pa_mpjpe(f, gt) < pa_mpjpe(pred, gt);
  if (flipped) *flipped = use;
  return use ? f : pred;
}

std::vector<double> default_auc_thresholds() {
  std::vector<double> t;
  for (int i = 0; i <= 30; ++i) t.push_back(5.0 * i);
  return t;
}

PckAuc pck_auc(const PoseSequence& pred, const PoseSequence& gt, double threshold,
               const std::vector<double>& auc_thresholds, PckAlignment alignment) {
  if (auc_thresholds.empty()) throw ValidationError("auc threshold grid is empty");
  const auto errs = alignment == PckAlignment::kRaw ? joint_errors(pred, gt) : joint_errors_procrustes(pred, gt);
  auto pct = [&](double thr) {
    std::size_t hit = 0, n = 0;
    for (const auto& f : errs) {
      for (double e : f) hit += (e < thr || e == 0.0) ? 1 : 0;
      n += f.size();
    }
    return 100.0 * static_cast<double>(hit) / static_cast<double>(n);
  };
  PckAuc out;
  out.pck = pct(threshold);
  double acc = 0.0;
  for (double t : auc_thresholds) acc += pct(t);
  out.auc = acc / static_cast<double>(auc_thresholds.size());
  return out;
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json frames = nlohmann::json::array();
  for (const auto& f : per_frame) {
    frames.push_back({{"mpjpe_mm", f.mpjpe}, {"n_mpjpe_mm", f.n_mpjpe}, {"pa_mpjpe_mm", f.pa_mpjpe}});
  }
  return {{"mpjpe_mm", mpjpe}, {"n_mpjpe_mm", n_mpjpe}, {"pa_mpjpe_mm", pa_mpjpe},
          {"pck_pct", pck},    {"auc_pct", auc},         {"depth_flipped", depth_flipped},
          {"per_frame", frames}};
}

EvalReport evaluate(const PoseSequence& pred_in, const PoseSequence& gt, const EvalOptions& opts) {
  bool flipped = false;
  const PoseSequence pred = opts.resolve_flip ? resolve_depth_flip(pred_in, gt, &flipped) : pred_in;
  const auto raw = joint_errors(pred, gt);
  const auto scaled = joint_errors_scaled(pred, gt, opts.per_frame_scale);
  const auto pa = joint_errors_procrustes(pred, gt);
  EvalReport r;
  r.depth_flipped = flipped;
  r.mpjpe = mean_of(raw);
  r.n_mpjpe = mean_of(scaled);
  r.pa_mpjpe = mean_of(pa);
  const PckAuc pk = pck_auc(pred, gt, opts.pck_threshold, opts.auc_thresholds, opts.pck_alignment);
  r.pck = pk.pck;
  r.auc = pk.auc;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    r.per_frame.push_back({frame_mean(raw[i]), frame_mean(scaled[i]), frame_mean(pa[i])});
  }
  return r;
}

}  // namespace nrsfm
