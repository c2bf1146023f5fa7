#pragma once

// A small reverse-mode differentiation engine over dense 2-D tensors.
//
// A Graph owns its nodes in creation order, which is already a topological
// order, so backward() is a single reverse sweep. Graphs are built per
// training step and dropped afterwards; Parameters outlive them and collect
// gradients when backward() finishes.

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "noisyfs/common.hpp"

namespace noisyfs::ad {

using Tensor = Eigen::MatrixXd;

class Graph;

struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  bool trainable = true;

  Parameter() = default;
  Parameter(std::string n, Tensor v, bool train = true)
      : name(std::move(n)), value(std::move(v)), grad(Tensor::Zero(value.rows(), value.cols())),
        trainable(train) {}

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

/// Handle to a node of a Graph.
class Var {
 public:
  Var() = default;
  Var(Graph* g, std::size_t id) : graph_(g), id_(id) {}

  Graph& graph() const { return *graph_; }
  std::size_t id() const { return id_; }
  const Tensor& value() const;
  const Tensor& grad() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const { return value()(0, 0); }

 private:
  Graph* graph_ = nullptr;
  std::size_t id_ = 0;
};

/// The dimension an axis-wise op runs along: kRows reduces/normalises over
/// the rows of each column, kCols over the columns of each row.
enum class Axis { kRows = 0, kCols = 1 };

class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, const Tensor& upstream)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor value);
  /// Leaf bound to `p`; its gradient is added to p.grad by backward().
  Var parameter(Parameter& p);

  /// Records a computed node. `backward` receives the node's upstream
  /// gradient and must push contributions into its inputs via accumulate().
  Var record(Tensor value, bool requires_grad, BackwardFn backward);

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  const Tensor& grad(std::size_t id) const;
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  void accumulate(std::size_t id, const Tensor& g);

  /// Reverse sweep from a 1x1 root. A graph can be differentiated once.
  void backward(Var root);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool has_grad = false;
    bool requires_grad = false;
    Parameter* param = nullptr;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

// Primitives. All check shapes before computing and throw ShapeError.

Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
/// a (m x n) plus a 1 x n row broadcast over rows.
Var add_row(Var a, Var row);
Var scale(Var a, double s);
Var mul(Var a, Var b);
Var softmax(Var a, Axis axis);
Var log_softmax(Var a, Axis axis);
/// Normalises each row to zero mean / unit variance, then row-broadcast gain and bias (1 x n).
Var layer_normalize(Var a, Var gain, Var bias, double eps = 1e-5);
Var gelu(Var a);
Var sigmoid(Var a);
Var log_sigmoid(Var a);
Var log(Var a);
Var sum(Var a);
Var sum(Var a, Axis axis);
Var mean(Var a);
Var squared_difference(Var a, Var b);
Var concat(const std::vector<Var>& parts, Axis axis);
Var slice(Var a, Axis axis, Eigen::Index begin, Eigen::Index count);
Var transpose(Var a);

struct AdamState {
  Tensor m;
  Tensor v;
  long step = 0;
};

struct AdamWConfig {
  double learning_rate = 5e-4;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One decoupled-weight-decay Adam update of `value` in place.
void adamw_update(Tensor& value, const Tensor& grad, AdamState& state, const AdamWConfig& config);

/// Applies adamw_update to every trainable parameter with its own state.
void adamw_step(std::vector<Parameter*>& params, std::vector<AdamState>& states,
                const AdamWConfig& config);

}  // namespace noisyfs::ad
