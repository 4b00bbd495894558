#include "nrsfm/procrustes.h"

#include <algorithm>
#include <exception>
#include <thread>

namespace nrsfm {

namespace {

void check_sequence(const PoseSequence& seq, Eigen::Index joints) {
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (seq[i].rows() != joints) {
      throw ValidationError("frame " + std::to_string(i) + " has " + std::to_string(seq[i].rows()) +
                            " joints, expected " + std::to_string(joints));
    }
  }
  if (joints < 3) throw ValidationError("alignment needs at least 3 joints");
}

}  // namespace

AlignmentResult align_to_reference(const PoseSequence& seq, const Joints3D& reference, int threads) {
  check_sequence(seq, reference.rows());
  const Joints3D ref = centralize(reference);
  const std::size_t n = seq.size();

  AlignmentResult out;
  out.aligned.resize(n);
  out.rotations.resize(n);
  out.per_frame_residual.resize(n);

  auto solve = [&](std::size_t i) {
    const Joints3D s = centralize(seq[i]);
    KabschResult k;
    try {
      k = kabsch(s, ref, false);
    } catch (const DegenerateError&) {
      throw DegenerateError("frame " + std::to_string(i));
    }
    out.rotations[i] = k.rotation;
    out.aligned[i] = k.rotation.apply(s);
    out.per_frame_residual[i] = (out.aligned[i] - ref).norm();
  };

  const std::size_t workers = std::clamp<std::size_t>(threads > 0 ? static_cast<std::size_t>(threads) : 1, 1, std::max<std::size_t>(n, 1));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) solve(i);
    return out;
  }

  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += workers) solve(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return out;
}

GpaResult generalized_procrustes(const PoseSequence& seq, const GpaOptions& opts) {
  if (seq.empty()) throw ValidationError("generalized_procrustes: empty sequence");
  if (opts.max_iters < 1) throw ValidationError("generalized_procrustes: max_iters must be >= 1");

  GpaResult out;
  out.reference = centralize(seq.front());
  check_sequence(seq, out.reference.rows());

  double previous = 0.0;
  for (int it = 0; it < opts.max_iters; ++it) {
    const AlignmentResult a = align_to_reference(seq, out.reference, opts.threads);
    Joints3D mean = Joints3D::Zero(out.reference.rows(), 3);
    for (const auto& s : a.aligned) mean += s;
    mean /= static_cast<double>(seq.size());

    double objective = 0.0;
    for (const auto& s : a.aligned) objective += (s - mean).squaredNorm();
    out.reference = centralize(mean);
    out.objective.push_back(objective);

    if (it > 0 && previous - objective < opts.tol) break;
    previous = objective;
  }
  out.alignment = align_to_reference(seq, out.reference, opts.threads);
  return out;
}

}  // namespace nrsfm
