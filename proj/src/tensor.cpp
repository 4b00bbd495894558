#include "nrsfm/tensor.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace nrsfm::ad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

ConstMap as_matrix(const Tensor& t) {
  return ConstMap(t.data().data(), static_cast<Eigen::Index>(t.rows()),
                  static_cast<Eigen::Index>(t.cols()));
}

MutMap as_matrix(Tensor& t) {
  return MutMap(t.data().data(), static_cast<Eigen::Index>(t.rows()),
                static_cast<Eigen::Index>(t.cols()));
}

[[noreturn]] void shape_fail(NodeId id, OpKind k, const std::string& what) {
  std::ostringstream os;
  os << "node " << id << " (" << op_name(k) << "): " << what;
  throw ShapeError(os.str());
}

void require_rank2(NodeId id, OpKind k, const Tensor& t, const char* which) {
  if (t.rank() != 2) {
    shape_fail(id, k, std::string(which) + " must be 2-D, got " + shape_string(t.shape()));
  }
}

void require_same(NodeId id, OpKind k, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    shape_fail(id, k, "operand shapes differ: " + shape_string(a.shape()) + " vs " +
                          shape_string(b.shape()));
  }
}

Shape with_leading(const Shape& s, std::size_t lead) {
  Shape out = s;
  if (out.empty()) out.push_back(lead);
  else out[0] = lead;
  return out;
}

void accumulate(Tensor& dst, const Tensor& src) {
  auto d = dst.data();
  auto s = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

struct GramSchmidtParts {
  double e1[3], e2[3], e3[3], u[3], b[3];
  double na, nu;
};

GramSchmidtParts gram_schmidt_parts(const double* v) {
  GramSchmidtParts p{};
  const double* a = v;
  for (int k = 0; k < 3; ++k) p.b[k] = v[3 + k];
  p.na = std::sqrt(a[0] * a[0] + a[1] * a[1] + a[2] * a[2]);
  for (int k = 0; k < 3; ++k) p.e1[k] = a[k] / p.na;
  const double d = p.e1[0] * p.b[0] + p.e1[1] * p.b[1] + p.e1[2] * p.b[2];
  for (int k = 0; k < 3; ++k) p.u[k] = p.b[k] - d * p.e1[k];
  p.nu = std::sqrt(p.u[0] * p.u[0] + p.u[1] * p.u[1] + p.u[2] * p.u[2]);
  for (int k = 0; k < 3; ++k) p.e2[k] = p.u[k] / p.nu;
  p.e3[0] = p.e1[1] * p.e2[2] - p.e1[2] * p.e2[1];
  p.e3[1] = p.e1[2] * p.e2[0] - p.e1[0] * p.e2[2];
  p.e3[2] = p.e1[0] * p.e2[1] - p.e1[1] * p.e2[0];
  return p;
}

void cross(const double* x, const double* y, double* out) {
  out[0] = x[1] * y[2] - x[2] * y[1];
  out[1] = x[2] * y[0] - x[0] * y[2];
  out[2] = x[0] * y[1] - x[1] * y[0];
}

double dot3(const double* x, const double* y) { return x[0] * y[0] + x[1] * y[1] + x[2] * y[2]; }

}  // namespace

// --- Tensor ----------------------------------------------------------------

std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_size(shape_) != data_.size()) {
    throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                     " does not match shape " + shape_string(shape_));
  }
}

Tensor Tensor::scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

Tensor Tensor::from_matrix(const Eigen::MatrixXd& m) {
  Tensor t({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
  as_matrix(t) = m;
  return t;
}

Eigen::MatrixXd Tensor::to_matrix() const { return as_matrix(*this); }

std::size_t Tensor::rows() const { return shape_.empty() ? 1 : shape_[0]; }

std::size_t Tensor::cols() const {
  if (shape_.empty()) return 1;
  return rows() == 0 ? 0 : data_.size() / rows();
}

double Tensor::item() const {
  if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + shape_string(shape_));
  return data_[0];
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::kInput: return "input";
    case OpKind::kConstant: return "constant";
    case OpKind::kMatMul: return "matmul";
    case OpKind::kTranspose: return "transpose";
    case OpKind::kAdd: return "add";
    case OpKind::kSub: return "sub";
    case OpKind::kMul: return "mul";
    case OpKind::kScale: return "scale";
    case OpKind::kSoftmaxRows: return "softmax";
    case OpKind::kLayerNormRows: return "layer_norm";
    case OpKind::kGelu: return "gelu";
    case OpKind::kReshape: return "reshape";
    case OpKind::kSliceRows: return "slice_rows";
    case OpKind::kSliceCols: return "slice_cols";
    case OpKind::kConcatRows: return "concat_rows";
    case OpKind::kConcatCols: return "concat_cols";
    case OpKind::kGatherRows: return "gather_rows";
    case OpKind::kTileRows: return "tile_rows";
    case OpKind::kSum: return "sum";
    case OpKind::kFrobeniusSq: return "frobenius_sq";
    case OpKind::kNorm: return "norm";
    case OpKind::kGramSchmidt: return "gram_schmidt";
    case OpKind::kRotateFrames: return "rotate_frames";
  }
  return "?";
}

double gelu_value(double x) {
  const double u = kGeluC * (x + kGeluA * x * x * x);
  return 0.5 * x * (1.0 + std::tanh(u));
}

double gelu_derivative(double x) {
  const double u = kGeluC * (x + kGeluA * x * x * x);
  const double th = std::tanh(u);
  return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
}

void gram_schmidt_value(std::span<const double, 6> v, std::span<double, 9> out) {
  const auto p = gram_schmidt_parts(v.data());
  for (int r = 0; r < 3; ++r) {
    out[3 * r + 0] = p.e1[r];
    out[3 * r + 1] = p.e2[r];
    out[3 * r + 2] = p.e3[r];
  }
}

// --- forward ---------------------------------------------------------------

Tensor compute_node(const Node& n, const std::vector<const Tensor*>& in, NodeId id) {
  const OpKind k = n.kind;
  switch (k) {
    case OpKind::kInput:
    case OpKind::kConstant:
      return n.value;

    case OpKind::kMatMul: {
      const Tensor& a = *in[0];
      const Tensor& b = *in[1];
      require_rank2(id, k, a, "lhs");
      require_rank2(id, k, b, "rhs");
      if (a.dim(1) != b.dim(0)) {
        shape_fail(id, k, "inner dimensions " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
      }
      Tensor out({a.dim(0), b.dim(1)});
      as_matrix(out).noalias() = as_matrix(a) * as_matrix(b);
      return out;
    }
    case OpKind::kTranspose: {
      const Tensor& a = *in[0];
      require_rank2(id, k, a, "operand");
      Tensor out({a.dim(1), a.dim(0)});
      as_matrix(out) = as_matrix(a).transpose();
      return out;
    }
    case OpKind::kAdd:
    case OpKind::kSub:
    case OpKind::kMul: {
      const Tensor& a = *in[0];
      const Tensor& b = *in[1];
      require_same(id, k, a, b);
      Tensor out(a.shape());
      auto o = out.data();
      auto x = a.data();
      auto y = b.data();
      if (k == OpKind::kAdd) for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] + y[i];
      else if (k == OpKind::kSub) for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] - y[i];
      else for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * y[i];
      return out;
    }
    case OpKind::kScale: {
      Tensor out = *in[0];
      for (double& v : out.data()) v *= n.scalar;
      return out;
    }
    case OpKind::kSoftmaxRows: {
      const Tensor& a = *in[0];
      if (a.rank() == 0) shape_fail(id, k, "softmax of a scalar");
      Tensor out(a.shape());
      const std::size_t c = a.shape().back(), r = a.size() / c;
      const double* x = a.data().data();
      double* y = out.data().data();
      for (std::size_t i = 0; i < r; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, x[i * c + j]);
        double s = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
          y[i * c + j] = std::exp(x[i * c + j] - mx);
          s += y[i * c + j];
        }
        for (std::size_t j = 0; j < c; ++j) y[i * c + j] /= s;
      }
      return out;
    }
    case OpKind::kLayerNormRows: {
      const Tensor& a = *in[0];
      if (a.rank() == 0) shape_fail(id, k, "layer norm of a scalar");
      Tensor out(a.shape());
      const std::size_t c = a.shape().back(), r = a.size() / c;
      const double* x = a.data().data();
      double* y = out.data().data();
      for (std::size_t i = 0; i < r; ++i) {
        double mean = 0.0;
        for (std::size_t j = 0; j < c; ++j) mean += x[i * c + j];
        mean /= static_cast<double>(c);
        double var = 0.0;
        for (std::size_t j = 0; j < c; ++j) var += (x[i * c + j] - mean) * (x[i * c + j] - mean);
        var /= static_cast<double>(c);
        const double inv = 1.0 / std::sqrt(var + n.scalar);
        for (std::size_t j = 0; j < c; ++j) y[i * c + j] = (x[i * c + j] - mean) * inv;
      }
      return out;
    }
    case OpKind::kGelu: {
      Tensor out = *in[0];
      for (double& v : out.data()) v = gelu_value(v);
      return out;
    }
    case OpKind::kReshape: {
      const Tensor& a = *in[0];
      if (shape_size(n.new_shape) != a.size()) {
        shape_fail(id, k, "cannot reshape " + shape_string(a.shape()) + " to " + shape_string(n.new_shape));
      }
      return Tensor(n.new_shape, std::vector<double>(a.data().begin(), a.data().end()));
    }
    case OpKind::kSliceRows: {
      const Tensor& a = *in[0];
      if (a.rank() == 0 || n.begin + n.count > a.rows()) {
        shape_fail(id, k, "rows [" + std::to_string(n.begin) + ", " + std::to_string(n.begin + n.count) +
                              ") out of range for " + shape_string(a.shape()));
      }
      const std::size_t c = a.cols();
      Tensor out(with_leading(a.shape(), n.count));
      std::copy_n(a.data().begin() + static_cast<std::ptrdiff_t>(n.begin * c), n.count * c, out.data().begin());
      return out;
    }
    case OpKind::kSliceCols: {
      const Tensor& a = *in[0];
      require_rank2(id, k, a, "operand");
      if (n.begin + n.count > a.dim(1)) {
        shape_fail(id, k, "columns out of range for " + shape_string(a.shape()));
      }
      Tensor out({a.dim(0), n.count});
      for (std::size_t i = 0; i < a.dim(0); ++i)
        for (std::size_t j = 0; j < n.count; ++j) out.at(i, j) = a.at(i, n.begin + j);
      return out;
    }
    case OpKind::kConcatRows: {
      if (in.empty()) shape_fail(id, k, "nothing to concatenate");
      Shape tail(in[0]->shape().begin() + (in[0]->rank() ? 1 : 0), in[0]->shape().end());
      std::size_t total = 0;
      for (const Tensor* t : in) {
        if (t->rank() == 0 || Shape(t->shape().begin() + 1, t->shape().end()) != tail) {
          shape_fail(id, k, "trailing shapes differ: " + shape_string(in[0]->shape()) + " vs " +
                                shape_string(t->shape()));
        }
        total += t->rows();
      }
      Tensor out(with_leading(in[0]->shape(), total));
      auto dst = out.data().begin();
      for (const Tensor* t : in) dst = std::copy(t->data().begin(), t->data().end(), dst);
      return out;
    }
    case OpKind::kConcatCols: {
      if (in.empty()) shape_fail(id, k, "nothing to concatenate");
      std::size_t total = 0;
      for (const Tensor* t : in) {
        require_rank2(id, k, *t, "part");
        if (t->dim(0) != in[0]->dim(0)) {
          shape_fail(id, k, "row counts differ: " + shape_string(in[0]->shape()) + " vs " +
                                shape_string(t->shape()));
        }
        total += t->dim(1);
      }
      const std::size_t r = in[0]->dim(0);
      Tensor out({r, total});
      std::size_t off = 0;
      for (const Tensor* t : in) {
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < t->dim(1); ++j) out.at(i, off + j) = t->at(i, j);
        off += t->dim(1);
      }
      return out;
    }
    case OpKind::kGatherRows: {
      const Tensor& a = *in[0];
      if (a.rank() == 0) shape_fail(id, k, "gather from a scalar");
      const std::size_t c = a.cols();
      Tensor out(with_leading(a.shape(), n.index.size()));
      for (std::size_t i = 0; i < n.index.size(); ++i) {
        if (n.index[i] >= a.rows()) shape_fail(id, k, "row index " + std::to_string(n.index[i]) + " out of range");
        std::copy_n(a.data().begin() + static_cast<std::ptrdiff_t>(n.index[i] * c), c,
                    out.data().begin() + static_cast<std::ptrdiff_t>(i * c));
      }
      return out;
    }
    case OpKind::kTileRows: {
      const Tensor& a = *in[0];
      if (a.rank() == 0) shape_fail(id, k, "tile of a scalar");
      Tensor out(with_leading(a.shape(), a.rows() * n.count));
      auto dst = out.data().begin();
      for (std::size_t r = 0; r < n.count; ++r) dst = std::copy(a.data().begin(), a.data().end(), dst);
      return out;
    }
    case OpKind::kSum: {
      double s = 0.0;
      for (double v : in[0]->data()) s += v;
      return Tensor::scalar(s);
    }
    case OpKind::kFrobeniusSq: {
      double s = 0.0;
      for (double v : in[0]->data()) s += v * v;
      return Tensor::scalar(s);
    }
    case OpKind::kNorm: {
      double s = 0.0;
      for (double v : in[0]->data()) s += v * v;
      return Tensor::scalar(std::sqrt(s));
    }
    case OpKind::kGramSchmidt: {
      const Tensor& a = *in[0];
      if (a.rank() != 2 || a.dim(1) != 6) shape_fail(id, k, "expects [N,6], got " + shape_string(a.shape()));
      Tensor out({a.dim(0), 9});
      for (std::size_t i = 0; i < a.dim(0); ++i) {
        gram_schmidt_value(std::span<const double, 6>(a.data().data() + 6 * i, 6),
                           std::span<double, 9>(out.data().data() + 9 * i, 9));
      }
      return out;
    }
    case OpKind::kRotateFrames: {
      const Tensor& rot = *in[0];
      const Tensor& pts = *in[1];
      if (rot.rank() != 2 || rot.dim(1) != 9) shape_fail(id, k, "rotations must be [F,9], got " + shape_string(rot.shape()));
      if (pts.rank() != 2 || pts.dim(1) != 3 || rot.dim(0) == 0 || pts.dim(0) % rot.dim(0) != 0) {
        shape_fail(id, k, "points " + shape_string(pts.shape()) + " incompatible with rotations " +
                              shape_string(rot.shape()));
      }
      const std::size_t frames = rot.dim(0);
      const std::size_t per = pts.dim(0) / frames;
      Tensor out(pts.shape());
      for (std::size_t f = 0; f < frames; ++f) {
        const double* R = rot.data().data() + 9 * f;
        for (std::size_t p = 0; p < per; ++p) {
          const std::size_t row = f * per + p;
          for (int r = 0; r < 3; ++r) {
            out.at(row, r) = R[3 * r] * pts.at(row, 0) + R[3 * r + 1] * pts.at(row, 1) + R[3 * r + 2] * pts.at(row, 2);
          }
        }
      }
      return out;
    }
  }
  shape_fail(id, k, "unknown op");
}

// --- graph -----------------------------------------------------------------

const Tensor& Var::value() const { return graph_->node(id_).value; }

Var Graph::input(const std::string& name, Tensor value, bool requires_grad) {
  if (!value.all_finite()) throw NonFiniteError("input '" + name + "' contains non-finite values");
  for (const Node& n : nodes_) {
    if (n.kind == OpKind::kInput && n.name == name) throw std::invalid_argument("duplicate input name '" + name + "'");
  }
  Node n;
  n.kind = OpKind::kInput;
  n.name = name;
  value.requires_grad = requires_grad;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Graph::constant(Tensor value) {
  Node n;
  n.kind = OpKind::kConstant;
  value.requires_grad = false;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Graph::record(Node node) {
  const NodeId id = nodes_.size();
  std::vector<const Tensor*> in;
  in.reserve(node.inputs.size());
  for (NodeId i : node.inputs) {
    if (i >= id) shape_fail(id, node.kind, "input id " + std::to_string(i) + " does not precede the node");
    in.push_back(&nodes_[i].value);
  }
  node.value = compute_node(node, in, id);
  nodes_.push_back(std::move(node));
  return Var(this, id);
}

NamedTensors Graph::bound_inputs() const {
  NamedTensors out;
  for (const Node& n : nodes_) {
    if (n.kind == OpKind::kInput) out.emplace(n.name, n.value);
  }
  return out;
}

Tensor Graph::evaluate(Var root, const NamedTensors& inputs) const {
  if (&root.graph() != this) throw std::invalid_argument("evaluate: root belongs to another graph");
  std::vector<Tensor> values(root.id() + 1);
  std::vector<const Tensor*> in;
  for (NodeId id = 0; id <= root.id(); ++id) {
    const Node& n = nodes_[id];
    if (n.kind == OpKind::kInput) {
      auto it = inputs.find(n.name);
      if (it == inputs.end()) throw std::invalid_argument("evaluate: input '" + n.name + "' is not bound");
      if (it->second.shape() != n.value.shape()) {
        shape_fail(id, n.kind, "binding for '" + n.name + "' has shape " + shape_string(it->second.shape()) +
                                   ", recorded " + shape_string(n.value.shape()));
      }
      if (!it->second.all_finite()) throw NonFiniteError("input '" + n.name + "' contains non-finite values");
      values[id] = it->second;
      continue;
    }
    in.clear();
    for (NodeId i : n.inputs) in.push_back(&values[i]);
    values[id] = compute_node(n, in, id);
  }
  return values[root.id()];
}

NamedTensors Graph::backward(Var root) const {
  if (&root.graph() != this) throw std::invalid_argument("backward: root belongs to another graph");
  const Tensor& rv = root.value();
  if (rv.size() != 1) throw ShapeError("backward: root must be scalar, got shape " + shape_string(rv.shape()));

  std::vector<Tensor> grads(root.id() + 1);
  std::vector<bool> has(root.id() + 1, false);
  grads[root.id()] = Tensor(rv.shape(), 1.0);
  has[root.id()] = true;

  auto add_grad = [&](NodeId target, Tensor g) {
    if (nodes_[target].kind == OpKind::kConstant) return;
    if (!has[target]) {
      grads[target] = std::move(g);
      has[target] = true;
    } else {
      accumulate(grads[target], g);
    }
  };

  for (NodeId id = root.id() + 1; id-- > 0;) {
    if (!has[id]) continue;
    const Node& n = nodes_[id];
    const Tensor& g = grads[id];
    const auto& ins = n.inputs;
    auto val = [&](std::size_t k) -> const Tensor& { return nodes_[ins[k]].value; };

    switch (n.kind) {
      case OpKind::kInput:
      case OpKind::kConstant:
        break;
      case OpKind::kMatMul: {
        const Tensor& a = val(0);
        const Tensor& b = val(1);
        Tensor ga(a.shape()), gb(b.shape());
        as_matrix(ga).noalias() = as_matrix(g) * as_matrix(b).transpose();
        as_matrix(gb).noalias() = as_matrix(a).transpose() * as_matrix(g);
        add_grad(ins[0], std::move(ga));
        add_grad(ins[1], std::move(gb));
        break;
      }
      case OpKind::kTranspose: {
        Tensor ga({g.dim(1), g.dim(0)});
        as_matrix(ga) = as_matrix(g).transpose();
        add_grad(ins[0], std::move(ga));
        break;
      }
      case OpKind::kAdd:
        add_grad(ins[0], g);
        add_grad(ins[1], g);
        break;
      case OpKind::kSub: {
        Tensor neg = g;
        for (double& v : neg.data()) v = -v;
        add_grad(ins[0], g);
        add_grad(ins[1], std::move(neg));
        break;
      }
      case OpKind::kMul: {
        Tensor ga(g.shape()), gb(g.shape());
        for (std::size_t i = 0; i < g.size(); ++i) {
          ga[i] = g[i] * val(1)[i];
          gb[i] = g[i] * val(0)[i];
        }
        add_grad(ins[0], std::move(ga));
        add_grad(ins[1], std::move(gb));
        break;
      }
      case OpKind::kScale: {
        Tensor ga = g;
        for (double& v : ga.data()) v *= n.scalar;
        add_grad(ins[0], std::move(ga));
        break;
      }
      case OpKind::kSoftmaxRows: {
        const Tensor& y = n.value;
        Tensor ga(y.shape());
        const std::size_t c = y.shape().back(), r = y.size() / c;
        for (std::size_t i = 0; i < r; ++i) {
          double s = 0.0;
          for (std::size_t j = 0; j < c; ++j) s += g[i * c + j] * y[i * c + j];
          for (std::size_t j = 0; j < c; ++j) ga[i * c + j] = y[i * c + j] * (g[i * c + j] - s);
        }
        add_grad(ins[0], std::move(ga));
        break;
      }
      case OpKind::kLayerNormRows: {
        const Tensor& x = val(0);
        const Tensor& y = n.value;
        Tensor ga(y.shape());
        const std::size_t c = y.shape().back(), r = y.size() / c;
        for (std::size_t i = 0; i < r; ++i) {
          const std::size_t o = i * c;
          double mean = 0.0;
          for (std::size_t j = 0; j < c; ++j) mean += x[o + j];
          mean /= static_cast<double>(c);
          double var = 0.0;
          for (std::size_t j = 0; j < c; ++j) var += (x[o + j] - mean) * (x[o + j] - mean);
          var /= static_cast<double>(c);
          const double inv = 1.0 / std::sqrt(var + n.scalar);
          double mg = 0.0, mgy = 0.0;
          for (std::size_t j = 0; j < c; ++j) {
            mg += g[o + j];
            mgy += g[o + j] * y[o + j];
          }
          mg /= static_cast<double>(c);
          mgy /= static_cast<double>(c);
          for (std::size_t j = 0; j < c; ++j) ga[o + j] = inv * (g[o + j] - mg - y[o + j] * mgy);
        }
        add_grad(ins[0], std::move(ga));
        break;
      }
      case OpKind::kGelu: {
        Tensor ga(g.shape());
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * gelu_derivative(val(0)[i]);
        add_grad(ins[0], std::move(ga));
        break;
      }
      case OpKind::kReshape: {
        add_grad(ins[0], Tensor(val(0).shape(), std::vector<double>(g.data().begin(), g.data().end())));
        break;
      }
      case OpKind::kSliceRows: {
        const Tensor& a = val(0);
        Tensor ga(a.shape());
        const std::size_t c = a.cols();
        std::copy(g.data().begin(), g.data().end(), ga.data().begin() + static_cast<std::ptrdiff_t>(n.begin * c));
        add_grad(ins[0], std::move(ga));
        break;
      }
      case OpKind::kSliceCols: {
        const Tensor& a = val(0);
        Tensor ga(a.shape());
        for (std::size_t i = 0; i < a.dim(0); ++i)
          for (std::size_t j = 0; j < n.count; ++j) ga.at(i, n.begin + j) = g.at(i, j);
        add_grad(ins[0], std::move(ga));
        break;
      }
      case OpKind::kConcatRows: {
        std::size_t off = 0;
        for (std::size_t k = 0; k < ins.size(); ++k) {
          const Tensor& part = val(k);
          Tensor gp(part.shape());
          std::copy_n(g.data().begin() + static_cast<std::ptrdiff_t>(off), part.size(), gp.data().begin());
          off += part.size();
          add_grad(ins[k], std::move(gp));
        }
        break;
      }
      case OpKind::kConcatCols: {
        std::size_t off = 0;
        for (std::size_t k = 0; k < ins.size(); ++k) {
          const Tensor& part = val(k);
          Tensor gp(part.shape());
          for (std::size_t i = 0; i < part.dim(0); ++i)
            for (std::size_t j = 0; j < part.dim(1); ++j) gp.at(i, j) = g.at(i, off + j);
          off += part.dim(1);
          add_grad(ins[k], std::move(gp));
        }
        break;
      }
      case OpKind::kGatherRows: {
        const Tensor& a = val(0);
        Tensor ga(a.shape());
        const std::size_t c = a.cols();
        for (std::size_t i = 0; i < n.index.size(); ++i)
          for (std::size_t j = 0; j < c; ++j) ga[n.index[i] * c + j] += g[i * c + j];
        add_grad(ins[0], std::move(ga));
        break;
      }
      case OpKind::kTileRows: {
        const Tensor& a = val(0);
        Tensor ga(a.shape());
        for (std::size_t r = 0; r < n.count; ++r)
          for (std::size_t i = 0; i < a.size(); ++i) ga[i] += g[r * a.size() + i];
        add_grad(ins[0], std::move(ga));
        break;
      }
      case OpKind::kSum: {
        add_grad(ins[0], Tensor(val(0).shape(), g.item()));
        break;
      }
      case OpKind::kFrobeniusSq: {
        Tensor ga = val(0);
        const double s = 2.0 * g.item();
        for (double& v : ga.data()) v *= s;
        add_grad(ins[0], std::move(ga));
        break;
      }
      case OpKind::kNorm: {
        Tensor ga = val(0);
        const double nv = n.value.item();
        const double s = nv > 0.0 ? g.item() / nv : 0.0;
        for (double& v : ga.data()) v *= s;
        add_grad(ins[0], std::move(ga));
        break;
      }
      case OpKind::kGramSchmidt: {
        const Tensor& a = val(0);
        Tensor ga(a.shape());
        for (std::size_t i = 0; i < a.dim(0); ++i) {
          const auto p = gram_schmidt_parts(a.data().data() + 6 * i);
          const double* gr = g.data().data() + 9 * i;
          double g1[3], g2[3], g3[3];
          for (int r = 0; r < 3; ++r) {
            g1[r] = gr[3 * r + 0];
            g2[r] = gr[3 * r + 1];
            g3[r] = gr[3 * r + 2];
          }
          // e3 = e1 x e2
          double t[3];
          cross(p.e2, g3, t);
          for (int r = 0; r < 3; ++r) g1[r] += t[r];
          cross(g3, p.e1, t);
          for (int r = 0; r < 3; ++r) g2[r] += t[r];
          // e2 = u / |u|
          double gu[3];
          const double e2g2 = dot3(p.e2, g2);
          for (int r = 0; r < 3; ++r) gu[r] = (g2[r] - p.e2[r] * e2g2) / p.nu;
          // u = b - (e1.b) e1
          const double e1gu = dot3(p.e1, gu);
          const double e1b = dot3(p.e1, p.b);
          double* out = ga.data().data() + 6 * i;
          for (int r = 0; r < 3; ++r) {
            out[3 + r] = gu[r] - p.e1[r] * e1gu;
            g1[r] += -e1b * gu[r] - p.b[r] * e1gu;
          }
          // e1 = a / |a|
          const double e1g1 = dot3(p.e1, g1);
          for (int r = 0; r < 3; ++r) out[r] = (g1[r] - p.e1[r] * e1g1) / p.na;
        }
        add_grad(ins[0], std::move(ga));
        break;
      }
      case OpKind::kRotateFrames: {
        const Tensor& rot = val(0);
        const Tensor& pts = val(1);
        const std::size_t frames = rot.dim(0);
        const std::size_t per = pts.dim(0) / frames;
        Tensor grot(rot.shape()), gpts(pts.shape());
        for (std::size_t f = 0; f < frames; ++f) {
          const double* R = rot.data().data() + 9 * f;
          double* gR = grot.data().data() + 9 * f;
          for (std::size_t p = 0; p < per; ++p) {
            const std::size_t row = f * per + p;
            for (int r = 0; r < 3; ++r) {
              const double go = g.at(row, r);
              for (int c = 0; c < 3; ++c) {
                gR[3 * r + c] += go * pts.at(row, c);
                gpts.at(row, c) += R[3 * r + c] * go;
              }
            }
          }
        }
        add_grad(ins[0], std::move(grot));
        add_grad(ins[1], std::move(gpts));
        break;
      }
    }
  }

  NamedTensors out;
  for (NodeId id = 0; id < nodes_.size(); ++id) {
    const Node& n = nodes_[id];
    if (n.kind != OpKind::kInput || !n.value.requires_grad) continue;
    if (id <= root.id() && has[id]) out.emplace(n.name, grads[id]);
    else out.emplace(n.name, Tensor(n.value.shape(), 0.0));
  }
  return out;
}

// --- op constructors -------------------------------------------------------

namespace {

Graph& same_graph(Var a, Var b) {
  if (&a.graph() != &b.graph()) throw std::invalid_argument("operands belong to different graphs");
  return a.graph();
}

Var unary(OpKind k, Var a) {
  Node n;
  n.kind = k;
  n.inputs = {a.id()};
  return a.graph().record(std::move(n));
}

Var binary(OpKind k, Var a, Var b) {
  Graph& g = same_graph(a, b);
  Node n;
  n.kind = k;
  n.inputs = {a.id(), b.id()};
  return g.record(std::move(n));
}

Var nary(OpKind k, const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError(std::string(op_name(k)) + ": nothing to concatenate");
  Node n;
  n.kind = k;
  for (const Var& p : parts) {
    same_graph(parts.front(), p);
    n.inputs.push_back(p.id());
  }
  return parts.front().graph().record(std::move(n));
}

}  // namespace

Var matmul(Var a, Var b) { return binary(OpKind::kMatMul, a, b); }
Var transpose(Var a) { return unary(OpKind::kTranspose, a); }
Var add(Var a, Var b) { return binary(OpKind::kAdd, a, b); }
Var sub(Var a, Var b) { return binary(OpKind::kSub, a, b); }
Var mul(Var a, Var b) { return binary(OpKind::kMul, a, b); }

Var scale(Var a, double s) {
  Node n;
  n.kind = OpKind::kScale;
  n.inputs = {a.id()};
  n.scalar = s;
  return a.graph().record(std::move(n));
}

Var softmax_rows(Var a) { return unary(OpKind::kSoftmaxRows, a); }

Var layer_norm_rows(Var a, double eps) {
  Node n;
  n.kind = OpKind::kLayerNormRows;
  n.inputs = {a.id()};
  n.scalar = eps;
  return a.graph().record(std::move(n));
}

Var gelu(Var a) { return unary(OpKind::kGelu, a); }

Var reshape(Var a, Shape shape) {
  Node n;
  n.kind = OpKind::kReshape;
  n.inputs = {a.id()};
  n.new_shape = std::move(shape);
  return a.graph().record(std::move(n));
}

Var slice_rows(Var a, std::size_t begin, std::size_t count) {
  Node n;
  n.kind = OpKind::kSliceRows;
  n.inputs = {a.id()};
  n.begin = begin;
  n.count = count;
  return a.graph().record(std::move(n));
}

Var slice_cols(Var a, std::size_t begin, std::size_t count) {
  Node n;
  n.kind = OpKind::kSliceCols;
  n.inputs = {a.id()};
  n.begin = begin;
  n.count = count;
  return a.graph().record(std::move(n));
}

Var concat_rows(const std::vector<Var>& parts) { return nary(OpKind::kConcatRows, parts); }
Var concat_cols(const std::vector<Var>& parts) { return nary(OpKind::kConcatCols, parts); }

Var gather_rows(Var a, std::vector<std::size_t> index) {
  Node n;
  n.kind = OpKind::kGatherRows;
  n.inputs = {a.id()};
  n.index = std::move(index);
  return a.graph().record(std::move(n));
}

Var tile_rows(Var a, std::size_t repeats) {
  Node n;
  n.kind = OpKind::kTileRows;
  n.inputs = {a.id()};
  n.count = repeats;
  return a.graph().record(std::move(n));
}

Var sum(Var a) { return unary(OpKind::kSum, a); }
Var frobenius_sq(Var a) { return unary(OpKind::kFrobeniusSq, a); }
Var norm(Var a) { return unary(OpKind::kNorm, a); }
Var gram_schmidt(Var a) { return unary(OpKind::kGramSchmidt, a); }
Var rotate_frames(Var rotations, Var points) { return binary(OpKind::kRotateFrames, rotations, points); }

}  // namespace nrsfm::ad
