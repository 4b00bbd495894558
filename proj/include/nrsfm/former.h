#pragma once

// Toy NRSfMFormer. Activations live in a 2-D tensor Z of shape
// [(F+1)(P+1), D] with row i*(P+1)+j holding position (frame i, joint j).
// Row group i = 0 is the sequence-token row and column j = 0 the pose token of
// each frame. Spatial attention mixes rows of one frame, temporal attention
// rows of one joint position; both are realized as full attention with an
// additive block mask.

#include "nrsfm/decomposition.h"
#include "nrsfm/diffusion.h"
#include "nrsfm/losses.h"
#include "nrsfm/optim.h"

#include <cstdint>
#include <string>
#include <vector>

namespace nrsfm {

struct ModelConfig {
  std::size_t frames = 8;
  std::size_t joints = 17;
  std::size_t dim = 32;
  std::size_t blocks = 2;
  std::size_t heads = 4;
  std::size_t ffn_mult = 2;
  std::uint64_t seed = 0;
  double init_sigma = 0.001;
  // Inputs are divided by this and shape outputs multiplied by it (mm).
  double unit_mm = 100.0;

  void validate() const;
  std::size_t positions() const { return (frames + 1) * (joints + 1); }
};

// Graph handles for one forward pass.
struct FormerOutputs {
  ad::Var embedded;      // Z before the first block
  ad::Var activations;   // Z after the last block
  ad::Var reference;     // [P, 3], centralized
  ad::Var deformations;  // [F*P, 3]
  ad::Var rotations;     // [F, 9]
  ad::Var shapes;        // [F*P, 3], reference + deformations
  std::vector<ad::Var> attention;  // softmax weights, one per (sub-block, head)
};

class FormerModel {
 public:
  explicit FormerModel(const ModelConfig& cfg);
  // Wraps existing parameters; names and shapes are validated.
  FormerModel(const ModelConfig& cfg, ad::ParameterSet params);

  const ModelConfig& config() const { return cfg_; }
  const ad::ParameterSet& params() const { return params_; }
  ad::ParameterSet& mutable_params() { return params_; }

  // Parameter names and shapes implied by a configuration.
  static std::vector<std::pair<std::string, ad::Shape>> parameter_layout(const ModelConfig& cfg);
  static std::size_t parameter_count(const ModelConfig& cfg);

  FormerOutputs forward(ad::Graph& g, const std::map<std::string, ad::Var>& p, const MeasurementSequence& w) const;
  // Forward with the parameters bound as constants.
  FormerOutputs forward(ad::Graph& g, const MeasurementSequence& w) const;

  ad::Tensor embed(const MeasurementSequence& w) const;
  RmnrdDecomposition predict(const MeasurementSequence& w) const;

 private:
  void check_input(const MeasurementSequence& w) const;
  ModelConfig cfg_;
  ad::ParameterSet params_;
};

// Adam state bound to one model.
class FormerTrainer {
 public:
  explicit FormerTrainer(FormerModel& model, ad::AdamConfig adam = {}) : model_(model), adam_(adam) {}

  // One update against the batch-mean total loss. Returns the breakdown
  // before the update. `prior` is consulted only when beta[2] > 0.
  LossBreakdown step(const std::vector<MeasurementSequence>& batch, const DiffusionPrior* prior,
                     const LossConfig& cfg, double lr, std::uint64_t seed = 0);

  // Batch-mean breakdown without an update.
  LossBreakdown evaluate(const std::vector<MeasurementSequence>& batch, const DiffusionPrior* prior,
                         const LossConfig& cfg, std::uint64_t seed = 0) const;

 private:
  FormerModel& model_;
  ad::Adam adam_;
};

void save_former_checkpoint(const std::string& path, const FormerModel& model);
FormerModel load_former_checkpoint(const std::string& path);

}  // namespace nrsfm
