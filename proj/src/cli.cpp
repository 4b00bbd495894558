#include "nrsfm/cli.h"

#include "nrsfm/data.h"
#include "nrsfm/diffusion.h"
#include "nrsfm/errors.h"
#include "nrsfm/former.h"
#include "nrsfm/io.h"
#include "nrsfm/metrics.h"
#include "nrsfm/procrustes.h"
#include "nrsfm/rmnrd.h"

#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <iostream>

namespace nrsfm::cli {

namespace {

using nlohmann::json;

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

struct Common {
  std::uint64_t seed = 0;
  CLI::Option* seed_opt = nullptr;
  int threads = 1;
  std::string config;
  CLI::App* app = nullptr;

  void add(CLI::App* a, bool with_threads = false) {
    app = a;
    app->add_option("--config", config, "JSON file of option values (flags take precedence)");
    seed_opt = app->add_option("--seed", seed, "Random seed (falls back to NRSFM_SEED, then 0)");
    if (with_threads) app->add_option("--threads", threads, "Worker threads")->check(CLI::PositiveNumber);
  }

  // Fills options not given on the command line from the --config object.
  // Keys are long option names; "_" and "-" are interchangeable.
  void apply_config() const {
    if (config.empty()) return;
    const json j = io::read_json(config);
    if (!j.is_object()) throw ValidationError(config + ": expected a JSON object");
    for (auto it = j.begin(); it != j.end(); ++it) {
      std::string name = it.key();
      for (char& c : name) {
        if (c == '_') c = '-';
      }
      CLI::Option* opt = name == "config" ? nullptr : app->get_option_no_throw("--" + name);
      if (!opt) throw ValidationError(config + ": unknown key '" + it.key() + "' for " + app->get_name());
      if (opt->count() > 0) continue;
      std::vector<std::string> values;
      auto push = [&](const json& v) {
        if (v.is_string()) {
          values.push_back(v.get<std::string>());
        } else if (v.is_boolean()) {
          values.push_back(v.get<bool>() ? "true" : "false");
        } else if (v.is_number()) {
          values.push_back(v.dump());
        } else {
          throw ValidationError(config + ": key '" + it.key() + "' must hold a scalar or a list of scalars");
        }
      };
      if (it->is_array()) {
        for (const auto& v : *it) push(v);
      } else {
        push(*it);
      }
      try {
        for (const auto& v : values) opt->add_result(v);
        opt->run_callback();
      } catch (const CLI::Error& e) {
        throw ValidationError(config + ": key '" + it.key() + "': " + e.what());
      }
    }
  }

  std::uint64_t resolve_seed() const {
    if (seed_opt && seed_opt->count() > 0) return seed;
    if (const char* env = std::getenv("NRSFM_SEED"); env && *env) {
      char* end = nullptr;
      const unsigned long long v = std::strtoull(env, &end, 10);
      if (*end != '\0') throw ValidationError("NRSFM_SEED is not an unsigned integer: '" + std::string(env) + "'");
      return v;
    }
    return 0;
  }
};

void write_text(const std::string& path, const std::string& text) { io::write_file_atomic(path, text); }

void write_json(const std::string& path, const json& j) { write_text(path, j.dump(1) + "\n"); }

std::string loss_csv(const std::vector<std::pair<long, LossBreakdown>>& rows) {
  std::string out = "iteration,reproj,proc,prior,smooth,total\n";
  for (const auto& [it, b] : rows) {
    out += std::to_string(it) + "," + fmt(b.reproj) + "," + fmt(b.proc) + "," + fmt(b.prior) + "," + fmt(b.smooth) +
           "," + fmt(b.total) + "\n";
  }
  return out;
}

// Measurements from a scene file or a plain 2D sequence file.
MeasurementSequence load_measurements(const std::string& path) {
  const SequenceFile f = load_sequence(path);
  if (f.dims != 2) throw ValidationError(path + ": expected 2D measurements ('dims' must be 2)");
  return f.measurements;
}

// 3D poses with optional rotations. Scene files yield their ground truth.
SequenceFile load_poses(const std::string& path) {
  SequenceFile f = load_sequence(path);
  if (f.dims == 3) return f;
  if (auto gt = f.extra.find("ground_truth"); gt != f.extra.end()) {
    return sequence_from_json(*gt, path + " (ground_truth)");
  }
  throw ValidationError(path + ": expected 3D poses or a scene file with 'ground_truth'");
}

Skeleton pick_skeleton(const std::string& name, std::size_t joints) {
  if (!name.empty()) return Skeleton::by_name(name, joints);
  if (joints == 0 || joints == 17) return Skeleton::human17();
  if (joints == 14) return Skeleton::human14();
  return Skeleton::rod(joints);
}

struct LossFlags {
  LossConfig cfg;
  void add(CLI::App* app) {
    app->add_option("--beta-reproj", cfg.beta[0], "Weight of the reprojection loss")->check(CLI::NonNegativeNumber);
    app->add_option("--beta-proc", cfg.beta[1], "Weight of the Procrustes loss")->check(CLI::NonNegativeNumber);
    app->add_option("--beta-prior", cfg.beta[2], "Weight of the diffusion prior loss")->check(CLI::NonNegativeNumber);
    app->add_option("--beta-smooth", cfg.beta[3], "Weight of the smoothness loss")->check(CLI::NonNegativeNumber);
    app->add_option("--lambda-r", cfg.lambda_R, "Rotation smoothness weight")->check(CLI::NonNegativeNumber);
    app->add_option("--lambda-s", cfg.lambda_S, "Shape smoothness weight")->check(CLI::NonNegativeNumber);
    app->add_option("--mc-samples", cfg.prior_mc_samples, "Monte-Carlo draws per frame for the prior")
        ->check(CLI::PositiveNumber);
    app->add_flag("--squared-proc", cfg.squared_procrustes, "Use the squared Procrustes norm");
    app->add_flag("--detach-prior-noise", cfg.detach_prior_noise, "Stop prior gradients through the noised pose");
  }
};

// --- subcommands -----------------------------------------------------------

struct Synth {
  Common common;
  std::string skeleton, out;
  std::size_t joints = 0;
  GeneratorParams gen;

  void add(CLI::App& root) {
    CLI::App* app = root.add_subcommand("synth", "Generate a synthetic scene with ground truth");
    common.add(app);
    app->add_option("--skeleton", skeleton, "human17, human14 or rod");
    app->add_option("--joints", joints, "Joint count (17 and 14 select the human skeletons, others a rod)");
    app->add_option("--frames", gen.frames, "Number of frames")->check(CLI::PositiveNumber);
    app->add_option("--amplitude", gen.deformation_amplitude, "Joint-angle amplitude (rad)")->check(CLI::NonNegativeNumber);
    app->add_option("--angular-step", gen.angular_step, "Joint-angle phase step per frame (rad)")
        ->check(CLI::NonNegativeNumber);
    app->add_option("--camera-sweep", gen.camera_sweep, "Total camera rotation (rad)");
    app->add_option("--noise", gen.noise_sigma, "Measurement noise sigma (mm)")->check(CLI::NonNegativeNumber);
    app->add_option("--out", out, "Scene JSON to write")->required();
    app->callback([this] {
      common.apply_config();
      run();
    });
  }

  void run() {
    gen.seed = common.resolve_seed();
    const SyntheticScene s = generate(pick_skeleton(skeleton, joints), gen);
    save_scene(out, s);
  }
};

struct Align {
  Common common;
  std::string in, reference, out, residuals;
  double tol = 1e-10;
  int max_iters = 100;

  void add(CLI::App& root) {
    CLI::App* app = root.add_subcommand("align", "Procrustean alignment of a 3D sequence");
    common.add(app, true);
    app->add_option("--in", in, "3D sequence or scene file")->required();
    app->add_option("--reference", reference, "Pose file whose first frame is the reference (default: Procrustean mean)");
    app->add_option("--out", out, "Aligned sequence JSON to write")->required();
    app->add_option("--residuals", residuals, "Per-frame residual CSV to write");
    app->add_option("--tol", tol, "Objective decrease tolerance for the mean estimate")->check(CLI::NonNegativeNumber);
    app->add_option("--max-iters", max_iters, "Iteration cap for the mean estimate")->check(CLI::PositiveNumber);
    app->callback([this] {
      common.apply_config();
      run();
    });
  }

  void run() {
    const SequenceFile f = load_poses(in);
    AlignmentResult a;
    Joints3D ref;
    if (!reference.empty()) {
      ref = load_poses(reference).poses.front();
      a = align_to_reference(f.poses, ref, common.threads);
    } else {
      GpaOptions opts;
      opts.tol = tol;
      opts.max_iters = max_iters;
      opts.threads = common.threads;
      GpaResult g = generalized_procrustes(f.poses, opts);
      ref = g.reference;
      a = std::move(g.alignment);
    }
    SequenceFile o = pose_file(a.aligned, a.rotations);
    json rj = json::array();
    for (Eigen::Index j = 0; j < ref.rows(); ++j) rj.push_back({ref(j, 0), ref(j, 1), ref(j, 2)});
    o.extra["reference"] = std::move(rj);
    std::string csv = "frame,residual\n";
    for (std::size_t i = 0; i < a.per_frame_residual.size(); ++i) {
      csv += std::to_string(i) + "," + fmt(a.per_frame_residual[i]) + "\n";
    }
    if (!residuals.empty()) write_text(residuals, csv);
    save_sequence(out, o);
  }
};

struct Baseline {
  Common common;
  std::string in, out;
  int k_max = 0;

  void add(CLI::App& root) {
    CLI::App* app = root.add_subcommand("baseline", "Low-rank shape-basis factorization residual versus K");
    common.add(app);
    app->add_option("--in", in, "Measurement or scene file")->required();
    app->add_option("--k-max", k_max, "Largest K (default: the rank bound)")->check(CLI::NonNegativeNumber);
    app->add_option("--out", out, "CSV to write")->required();
    app->callback([this] {
      common.apply_config();
      run();
    });
  }

  void run() {
    const MeasurementSequence w = load_measurements(in);
    const int bound = static_cast<int>(std::min<std::size_t>(2 * w.size(), static_cast<std::size_t>(w[0].rows())) / 3);
    const int top = k_max == 0 ? bound : k_max;
    if (top > bound) throw ValidationError("--k-max " + std::to_string(top) + " exceeds the rank bound " + std::to_string(bound));
    std::string csv = "k,residual\n";
    for (int k = 1; k <= top; ++k) csv += std::to_string(k) + "," + fmt(low_rank_factorize(w, k).residual) + "\n";
    write_text(out, csv);
  }
};

struct Fit {
  Common common;
  LossFlags loss;
  SolverConfig solver;
  std::string in, out, trace, prior;
  int log_every = 10;

  void add(CLI::App& root) {
    CLI::App* app = root.add_subcommand("fit", "Fit a reference-plus-deformation reconstruction to measurements");
    common.add(app);
    loss.add(app);
    app->add_option("--in", in, "Measurement or scene file")->required();
    app->add_option("--out", out, "Decomposition JSON to write")->required();
    app->add_option("--trace", trace, "Loss-trace CSV to write");
    app->add_option("--prior", prior, "Diffusion prior checkpoint");
    app->add_option("--iterations", solver.iterations, "Optimizer iterations")->check(CLI::PositiveNumber);
    app->add_option("--lr", solver.learning_rate, "Adam learning rate")->check(CLI::PositiveNumber);
    app->add_option("--init-noise", solver.init_noise, "Noise on the initial rotation parameters")
        ->check(CLI::NonNegativeNumber);
    app->add_option("--log-every", log_every, "Trace row interval")->check(CLI::PositiveNumber);
    app->callback([this] {
      common.apply_config();
      run();
    });
  }

  void run() {
    solver.loss = loss.cfg;
    solver.seed = common.resolve_seed();
    solver.validate();
    const MeasurementSequence w = load_measurements(in);
    std::optional<DiffusionPrior> p;
    if (!prior.empty()) p.emplace(load_diffusion_checkpoint(prior));
    if (solver.loss.beta[2] > 0.0 && !p) std::cerr << "fit: no --prior given, prior term disabled\n";
    const FitResult r = fit_sequence(w, p ? &*p : nullptr, solver);
    if (!trace.empty()) {
      std::vector<std::pair<long, LossBreakdown>> rows;
      for (std::size_t i = 0; i < r.trace.size(); i += static_cast<std::size_t>(log_every)) {
        rows.emplace_back(static_cast<long>(i), r.trace[i]);
      }
      write_text(trace, loss_csv(rows));
    }
    save_decomposition(out, r.decomposition);
  }
};

struct TrainPrior {
  Common common;
  std::string skeleton, out, loss_out;
  std::size_t joints = 0;
  std::size_t sequences = 1000;
  GeneratorParams gen;
  DenoiserTrainOptions opts;
  int steps = 50;

  void add(CLI::App& root) {
    CLI::App* app = root.add_subcommand("train-prior", "Train the diffusion pose prior on synthetic scenes");
    common.add(app);
    gen.frames = 10;
    gen.noise_sigma = 1.0;
    app->add_option("--skeleton", skeleton, "human17, human14 or rod");
    app->add_option("--joints", joints, "Joint count");
    app->add_option("--sequences", sequences, "Number of generated sequences")->check(CLI::PositiveNumber);
    app->add_option("--frames", gen.frames, "Frames per generated sequence")->check(CLI::PositiveNumber);
    app->add_option("--amplitude", gen.deformation_amplitude, "Joint-angle amplitude (rad)")->check(CLI::NonNegativeNumber);
    app->add_option("--angular-step", gen.angular_step, "Joint-angle phase step per frame (rad)")
        ->check(CLI::NonNegativeNumber);
    app->add_option("--camera-sweep", gen.camera_sweep, "Total camera rotation per sequence (rad)");
    app->add_option("--noise", gen.noise_sigma, "Measurement noise sigma (mm)")->check(CLI::NonNegativeNumber);
    app->add_option("--steps", steps, "Diffusion steps T")->check(CLI::PositiveNumber);
    app->add_option("--epochs", opts.epochs, "Training epochs")->check(CLI::NonNegativeNumber);
    app->add_option("--lr", opts.lr, "Adam learning rate")->check(CLI::NonNegativeNumber);
    app->add_option("--batch", opts.batch_size, "Batch size")->check(CLI::PositiveNumber);
    app->add_option("--hidden", opts.hidden, "Hidden width")->check(CLI::PositiveNumber);
    app->add_option("--out", out, "Checkpoint to write")->required();
    app->add_option("--loss-out", loss_out, "Epoch loss CSV to write");
    app->callback([this] {
      common.apply_config();
      run();
    });
  }

  void run() {
    const std::uint64_t seed = common.resolve_seed();
    const Skeleton sk = pick_skeleton(skeleton, joints);
    std::vector<SyntheticScene> scenes;
    for (std::size_t s = 0; s < sequences; ++s) {
      GeneratorParams g = gen;
      g.seed = seed * 1000003ULL + s + 1;
      scenes.push_back(generate(sk, g));
    }
    opts.seed = seed;
    const NoiseSchedule schedule = NoiseSchedule::linear(steps);
    const DenoiserTrainResult r = train_denoiser(camera_frame_dataset(scenes), schedule, opts);
    if (!loss_out.empty()) {
      std::string csv = "epoch,loss\n";
      for (std::size_t e = 0; e < r.loss_trace.size(); ++e) csv += std::to_string(e) + "," + fmt(r.loss_trace[e]) + "\n";
      write_text(loss_out, csv);
    }
    save_diffusion_checkpoint(out, schedule, *r.denoiser, r.data_scale);
  }
};

struct TrainFormer {
  Common common;
  LossFlags loss;
  ModelConfig model;
  std::vector<std::string> inputs;
  std::string out, loss_out, prior;
  int steps = 500;
  double lr = 1e-3;

  void add(CLI::App& root) {
    CLI::App* app = root.add_subcommand("train-former", "Train the transformer on measurement windows");
    common.add(app);
    loss.add(app);
    app->add_option("--in", inputs, "Measurement or scene files; each is cut into windows of --frames")->required();
    app->add_option("--frames", model.frames, "Window length F")->check(CLI::PositiveNumber);
    app->add_option("--dim", model.dim, "Feature width D")->check(CLI::PositiveNumber);
    app->add_option("--blocks", model.blocks, "Encoder blocks L")->check(CLI::PositiveNumber);
    app->add_option("--heads", model.heads, "Attention heads H")->check(CLI::PositiveNumber);
    app->add_option("--steps", steps, "Training steps")->check(CLI::PositiveNumber);
    app->add_option("--lr", lr, "Adam learning rate")->check(CLI::NonNegativeNumber);
    app->add_option("--prior", prior, "Diffusion prior checkpoint");
    app->add_option("--out", out, "Checkpoint to write")->required();
    app->add_option("--loss-out", loss_out, "Loss-trace CSV to write");
    app->callback([this] {
      common.apply_config();
      run();
    });
  }

  void run() {
    std::vector<MeasurementSequence> batch;
    for (const auto& path : inputs) {
      const MeasurementSequence w = load_measurements(path);
      for (std::size_t s = 0; s + model.frames <= w.size(); s += model.frames) {
        batch.emplace_back(w.begin() + static_cast<std::ptrdiff_t>(s), w.begin() + static_cast<std::ptrdiff_t>(s + model.frames));
      }
    }
    if (batch.empty()) throw ValidationError("no input holds a full window of " + std::to_string(model.frames) + " frames");
    model.joints = static_cast<std::size_t>(batch[0][0].rows());
    const std::uint64_t seed = common.resolve_seed();
    model.seed = seed;
    std::optional<DiffusionPrior> p;
    if (!prior.empty()) p.emplace(load_diffusion_checkpoint(prior));
    FormerModel net(model);
    FormerTrainer trainer(net);
    std::vector<std::pair<long, LossBreakdown>> rows;
    for (int it = 0; it < steps; ++it) {
      const LossBreakdown b = trainer.step(batch, p ? &*p : nullptr, loss.cfg, lr, seed + static_cast<std::uint64_t>(it));
      if (it % 10 == 0) rows.emplace_back(it, b);
    }
    if (!loss_out.empty()) write_text(loss_out, loss_csv(rows));
    save_former_checkpoint(out, net);
  }
};

struct Eval {
  Common common;
  std::string pred, gt, out, frame = "camera", pck_align = "raw";
  EvalOptions opts;
  bool sequence_scale = false;

  void add(CLI::App& root) {
    CLI::App* app = root.add_subcommand("eval", "Compare a reconstruction with ground truth");
    common.add(app);
    app->add_option("--pred", pred, "Decomposition or 3D sequence file")->required();
    app->add_option("--gt", gt, "Scene or 3D sequence file")->required();
    app->add_option("--out", out, "Report JSON to write (default: standard output)");
    app->add_option("--frame", frame, "camera (R_i S_i, when both files carry rotations) or canonical (S_i)")
        ->check(CLI::IsMember({"camera", "canonical"}));
    app->add_option("--pck-threshold", opts.pck_threshold, "PCK threshold (mm)")->check(CLI::PositiveNumber);
    app->add_option("--pck-align", pck_align, "raw or procrustes")->check(CLI::IsMember({"raw", "procrustes"}));
    app->add_flag("--sequence-scale", sequence_scale, "One N-MPJPE scale for the whole sequence");
    app->add_flag("--resolve-flip", opts.resolve_flip, "Score the depth-flipped prediction if it matches better");
    app->callback([this] {
      common.apply_config();
      run();
    });
  }

  static PoseSequence posed(const SequenceFile& f, bool camera) {
    if (!camera) return f.poses;
    PoseSequence out;
    for (std::size_t i = 0; i < f.poses.size(); ++i) out.push_back(f.rotations[i].apply(f.poses[i]));
    return out;
  }

  void run() {
    const SequenceFile p = load_poses(pred);
    const SequenceFile g = load_poses(gt);
    if (p.frames() != g.frames()) {
      throw ValidationError("num_frames differs: " + pred + " has " + std::to_string(p.frames()) + ", " + gt + " has " +
                            std::to_string(g.frames()));
    }
    if (p.poses[0].rows() != g.poses[0].rows()) {
      throw ValidationError("num_joints differs: " + pred + " has " + std::to_string(p.poses[0].rows()) + ", " + gt +
                            " has " + std::to_string(g.poses[0].rows()));
    }
    const bool camera = frame == "camera" && !p.rotations.empty() && !g.rotations.empty();
    opts.pck_alignment = pck_align == "raw" ? PckAlignment::kRaw : PckAlignment::kProcrustes;
    opts.per_frame_scale = !sequence_scale;
    json report = evaluate(posed(p, camera), posed(g, camera), opts).to_json();
    report["frame"] = camera ? "camera" : "canonical";
    if (out.empty()) {
      std::cout << report.dump(1) << "\n";
    } else {
      write_json(out, report);
    }
  }
};

}  // namespace

int run(const std::vector<std::string>& args) {
  CLI::App app{"Non-rigid structure from motion toolkit", args.empty() ? "nrsfm" : args[0]};
  app.require_subcommand(1);
  Synth synth;
  Align align;
  Baseline baseline;
  Fit fit;
  TrainPrior train_prior;
  TrainFormer train_former;
  Eval eval;
  synth.add(app);
  align.add(app);
  baseline.add(app);
  fit.add(app);
  train_prior.add(app);
  train_former.add(app);
  eval.add(app);

  std::vector<std::string> rest(args.rbegin(), args.rend());
  if (!rest.empty()) rest.pop_back();
  try {
    app.parse(rest);
  } catch (const CLI::CallForHelp&) {
    std::cout << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    std::cout << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    const auto subs = app.get_subcommands();
    std::cerr << (subs.empty() ? app.help() : subs.front()->help());
    return 1;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const ad::ShapeError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 2;
  } catch (const ad::NonFiniteError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

int run(int argc, const char* const* argv) {
  return run(std::vector<std::string>(argv, argv + argc));
}

}  // namespace nrsfm::cli
