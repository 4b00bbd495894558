#pragma once

// Dense row-major tensors with an eagerly built reverse-mode tape.
//
// Every op computes its value immediately and appends a node to the owning
// Graph. The recorded graph can be replayed with rebound inputs
// (Graph::evaluate) and differentiated from a scalar root (Graph::backward).
// There is no implicit broadcasting: apart from scale(), operands must agree
// in shape, and expansion is spelled out with tile_rows() or gather_rows().

#include <Eigen/Core>

#include <cstddef>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace nrsfm::ad {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double v);
  // 2-D tensor copied from an Eigen matrix (row-major layout).
  static Tensor from_matrix(const Eigen::MatrixXd& m);
  // Interprets the tensor as [dim0, product(rest)].
  Eigen::MatrixXd to_matrix() const;

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const { return data_.size(); }
  // Leading dimension and the flattened remainder.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
  double item() const;

  bool all_finite() const;

  bool requires_grad = false;

 private:
  Shape shape_;
  std::vector<double> data_;
};

std::size_t shape_size(const Shape& s);
std::string shape_string(const Shape& s);

enum class OpKind {
  kInput,
  kConstant,
  kMatMul,
  kTranspose,
  kAdd,
  kSub,
  kMul,
  kScale,
  kSoftmaxRows,
  kLayerNormRows,
  kGelu,
  kReshape,
  kSliceRows,
  kSliceCols,
  kConcatRows,
  kConcatCols,
  kGatherRows,
  kTileRows,
  kSum,
  kFrobeniusSq,
  kNorm,
  kGramSchmidt,
  kRotateFrames,
};

const char* op_name(OpKind k);

using NodeId = std::size_t;

struct Node {
  OpKind kind = OpKind::kConstant;
  std::vector<NodeId> inputs;
  Tensor value;
  // Op attributes. Only the ones relevant to `kind` are meaningful.
  std::string name;                 // kInput
  double scalar = 0.0;              // kScale
  std::size_t begin = 0, count = 0; // kSliceRows / kSliceCols, kTileRows (count = repeats)
  Shape new_shape;                  // kReshape
  std::vector<std::size_t> index;   // kGatherRows
};

class Graph;

// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
class Var {
 public:
  Var() = default;
  Var(Graph* g, NodeId id) : graph_(g), id_(id) {}

  Graph& graph() const { return *graph_; }
  NodeId id() const { return id_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool valid() const { return graph_ != nullptr; }

 private:
  Graph* graph_ = nullptr;
  NodeId id_ = 0;
};

using NamedTensors = std::map<std::string, Tensor>;

class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // Named leaf. Inputs with requires_grad receive gradients in backward().
  Var input(const std::string& name, Tensor value, bool requires_grad = true);
  Var constant(Tensor value);

  // Appends a node, computes its value and validates shapes.
  Var record(Node node);

  const Node& node(NodeId id) const { return nodes_.at(id); }
  std::size_t size() const { return nodes_.size(); }

  // Current value bound to every input node, by name.
  NamedTensors bound_inputs() const;

  // Replays the recorded ops with new input bindings and returns the value of
  // `root`. Every input node must be bound. The graph itself is not modified.
  Tensor evaluate(Var root, const NamedTensors& inputs) const;

  // Gradients of the scalar `root` w.r.t. every requires_grad input. Inputs
  // that do not influence the root get zero tensors.
  NamedTensors backward(Var root) const;

 private:
  std::vector<Node> nodes_;
};

// Forward value of one node from its input values. Shared by recording and
// replay so both paths run identical arithmetic.
Tensor compute_node(const Node& node, const std::vector<const Tensor*>& in, NodeId id);

// --- ops -------------------------------------------------------------------

Var matmul(Var a, Var b);
Var transpose(Var a);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);  // elementwise, identical shapes
Var scale(Var a, double s);
Var softmax_rows(Var a);
// Per-row standardization, (x - mean) / sqrt(var + eps); no affine part.
Var layer_norm_rows(Var a, double eps = 1e-5);
Var gelu(Var a);
Var reshape(Var a, Shape shape);
Var slice_rows(Var a, std::size_t begin, std::size_t count);
Var slice_cols(Var a, std::size_t begin, std::size_t count);
Var concat_rows(const std::vector<Var>& parts);
Var concat_cols(const std::vector<Var>& parts);
Var gather_rows(Var a, std::vector<std::size_t> index);
// Stacks `repeats` copies of `a` along the leading dimension.
Var tile_rows(Var a, std::size_t repeats);
Var sum(Var a);
Var frobenius_sq(Var a);
// Frobenius norm; the gradient at the origin is taken as zero.
Var norm(Var a);
// [N, 6] -> [N, 9]: two 3-vectors orthonormalized into the columns of a
// proper rotation, stored row-major.
Var gram_schmidt(Var a);
// rotations [F, 9] (row-major 3x3), points [F*P, 3] -> [F*P, 3] with every
// point of frame i multiplied by R_i.
Var rotate_frames(Var rotations, Var points);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(double s, Var a) { return scale(a, s); }

// --- helpers ---------------------------------------------------------------

// GELU, tanh approximation.
double gelu_value(double x);
double gelu_derivative(double x);

// Rotation from one 6-vector; writes 9 row-major entries.
void gram_schmidt_value(std::span<const double, 6> v, std::span<double, 9> out);

}  // namespace nrsfm::ad
