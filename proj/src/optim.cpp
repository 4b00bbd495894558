#include "nrsfm/optim.h"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>

namespace nrsfm::ad {

void ParameterSet::add(const std::string& name, Tensor value) {
  if (!params_.emplace(name, std::move(value)).second) {
    throw std::invalid_argument("duplicate parameter '" + name + "'");
  }
}

const Tensor& ParameterSet::get(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("no parameter '" + name + "'");
  return it->second;
}

Tensor& ParameterSet::get(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("no parameter '" + name + "'");
  return it->second;
}

std::size_t ParameterSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [_, t] : params_) n += t.size();
  return n;
}

std::map<std::string, Var> ParameterSet::bind(Graph& g, bool requires_grad) const {
  std::map<std::string, Var> out;
  for (const auto& [name, t] : params_) out.emplace(name, g.input(name, t, requires_grad));
  return out;
}

std::uint64_t ParameterSet::checksum() const {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& [name, t] : params_) {
    for (char c : name) {
      h ^= static_cast<unsigned char>(c);
      h *= 1099511628211ULL;
    }
    for (double v : t.data()) {
      unsigned char bytes[sizeof(double)];
      std::memcpy(bytes, &v, sizeof(double));
      for (unsigned char b : bytes) {
        h ^= b;
        h *= 1099511628211ULL;
      }
    }
  }
  return h;
}

void Adam::step(ParameterSet& params, const NamedTensors& grads, double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (auto& [name, p] : params.all()) {
    auto git = grads.find(name);
    if (git == grads.end()) continue;
    const Tensor& g = git->second;
    if (g.shape() != p.shape()) throw ShapeError("gradient shape mismatch for '" + name + "'");
    auto& m = m_.try_emplace(name, Tensor(p.shape(), 0.0)).first->second;
    auto& v = v_.try_emplace(name, Tensor(p.shape(), 0.0)).first->second;
    Tensor* vmax = cfg_.amsgrad ? &vmax_.try_emplace(name, Tensor(p.shape(), 0.0)).first->second : nullptr;
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      double vhat = v[i] / bc2;
      if (vmax) {
        (*vmax)[i] = std::max((*vmax)[i], vhat);
        vhat = (*vmax)[i];
      }
      p[i] -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
  }
}

}  // namespace nrsfm::ad
