#pragma once

#include "nrsfm/tensor.h"

#include <cstdint>
#include <map>
#include <string>

namespace nrsfm::ad {

// Named trainable tensors. Ordered by name so iteration (and therefore
// serialization and checksums) is deterministic.
class ParameterSet {
 public:
  void add(const std::string& name, Tensor value);
  bool contains(const std::string& name) const { return params_.count(name) != 0; }
  const Tensor& get(const std::string& name) const;
  Tensor& get(const std::string& name);
  const std::map<std::string, Tensor>& all() const { return params_; }
  std::map<std::string, Tensor>& all() { return params_; }
  std::size_t scalar_count() const;

  // Binds every parameter as a graph input under its own name.
  std::map<std::string, Var> bind(Graph& g, bool requires_grad = true) const;

  // FNV-1a over the raw bytes of all parameter data.
  std::uint64_t checksum() const;

 private:
  std::map<std::string, Tensor> params_;
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  // Normalize by the running maximum of the bias-corrected second moment.
  bool amsgrad = false;
};

class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  // One update of every parameter that has an entry in `grads`.
  void step(ParameterSet& params, const NamedTensors& grads, double lr);
  long steps() const { return t_; }

 private:
  AdamConfig cfg_;
  long t_ = 0;
  std::map<std::string, Tensor> m_, v_, vmax_;
};

}  // namespace nrsfm::ad
