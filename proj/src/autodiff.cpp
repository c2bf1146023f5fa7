#include "noisyfs/autodiff.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

namespace noisyfs::ad {

namespace {

std::string shape(const Tensor& t) {
  std::ostringstream os;
  os << t.rows() << "x" << t.cols();
  return os.str();
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape(a) + " vs " + shape(b));
}

bool any_requires(const Graph& g, std::initializer_list<Var> vs) {
  for (const auto& v : vs)
    if (g.requires_grad(v.id())) return true;
  return false;
}

// Row-wise (Axis::kCols) or column-wise (Axis::kRows) softmax.
Tensor softmax_values(const Tensor& a, Axis axis) {
  Tensor y(a.rows(), a.cols());
  if (axis == Axis::kCols) {
    for (Eigen::Index r = 0; r < a.rows(); ++r) {
      const double top = a.row(r).maxCoeff();
      y.row(r) = (a.row(r).array() - top).exp().matrix();
      y.row(r) /= y.row(r).sum();
    }
  } else {
    for (Eigen::Index c = 0; c < a.cols(); ++c) {
      const double top = a.col(c).maxCoeff();
      y.col(c) = (a.col(c).array() - top).exp().matrix();
      y.col(c) /= y.col(c).sum();
    }
  }
  return y;
}

}  // namespace

const Tensor& Var::value() const { return graph_->value(id_); }
const Tensor& Var::grad() const { return graph_->grad(id_); }

Var Graph::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, false, false, nullptr, {}});
  return {this, nodes_.size() - 1};
}

Var Graph::parameter(Parameter& p) {
  nodes_.push_back(Node{p.value, {}, false, p.trainable, &p, {}});
  return {this, nodes_.size() - 1};
}

Var Graph::record(Tensor value, bool requires_grad, BackwardFn backward) {
  if (!requires_grad) backward = nullptr;
  nodes_.push_back(Node{std::move(value), {}, false, requires_grad, nullptr, std::move(backward)});
  return {this, nodes_.size() - 1};
}

const Tensor& Graph::grad(std::size_t id) const {
  static const Tensor kEmpty;
  const auto& n = nodes_[id];
  return n.has_grad ? n.grad : kEmpty;
}

void Graph::accumulate(std::size_t id, const Tensor& g) {
  auto& n = nodes_[id];
  if (!n.requires_grad) return;
  if (!n.has_grad) {
    n.grad = g;
    n.has_grad = true;
  } else {
    n.grad += g;
  }
}

void Graph::backward(Var root) {
  if (&root.graph() != this) throw ContractError("backward: root belongs to another graph");
  if (backward_done_) throw ContractError("backward: graph was already differentiated");
  const auto& r = nodes_[root.id()];
  if (r.value.rows() != 1 || r.value.cols() != 1)
    throw ContractError("backward: root must be scalar, got " + shape(r.value));
  backward_done_ = true;

  accumulate(root.id(), Tensor::Ones(1, 1));
  for (std::size_t i = root.id() + 1; i-- > 0;) {
    auto& n = nodes_[i];
    if (!n.has_grad) continue;
    if (n.backward) n.backward(*this, n.grad);
    if (n.param != nullptr) n.param->grad += n.grad;
  }
}

Var matmul(Var a, Var b) {
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.cols() != bv.rows())
    throw ShapeError("matmul: inner dimensions differ " + shape(av) + " * " + shape(bv));
  auto& g = a.graph();
  const auto ia = a.id();
  const auto ib = b.id();
  return g.record(av * bv, any_requires(g, {a, b}), [ia, ib](Graph& gr, const Tensor& up) {
    if (gr.requires_grad(ia)) gr.accumulate(ia, up * gr.value(ib).transpose());
    if (gr.requires_grad(ib)) gr.accumulate(ib, gr.value(ia).transpose() * up);
  });
}

Var add(Var a, Var b) {
  require_same_shape("add", a.value(), b.value());
  auto& g = a.graph();
  const auto ia = a.id();
  const auto ib = b.id();
  return g.record(a.value() + b.value(), any_requires(g, {a, b}),
                  [ia, ib](Graph& gr, const Tensor& up) {
                    gr.accumulate(ia, up);
                    gr.accumulate(ib, up);
                  });
}

Var sub(Var a, Var b) {
  require_same_shape("sub", a.value(), b.value());
  auto& g = a.graph();
  const auto ia = a.id();
  const auto ib = b.id();
  return g.record(a.value() - b.value(), any_requires(g, {a, b}),
                  [ia, ib](Graph& gr, const Tensor& up) {
                    gr.accumulate(ia, up);
                    if (gr.requires_grad(ib)) gr.accumulate(ib, -up);
                  });
}

Var add_row(Var a, Var row) {
  const auto& rv = row.value();
  if (rv.rows() != 1 || rv.cols() != a.cols())
    throw ShapeError("add_row: expected 1x" + std::to_string(a.cols()) + " row, got " + shape(rv));
  auto& g = a.graph();
  const auto ia = a.id();
  const auto ir = row.id();
  Tensor out = a.value().rowwise() + rv.row(0);
  return g.record(std::move(out), any_requires(g, {a, row}), [ia, ir](Graph& gr, const Tensor& up) {
    gr.accumulate(ia, up);
    if (gr.requires_grad(ir)) gr.accumulate(ir, up.colwise().sum());
  });
}

Var scale(Var a, double s) {
  auto& g = a.graph();
  const auto ia = a.id();
  return g.record(a.value() * s, g.requires_grad(ia),
                  [ia, s](Graph& gr, const Tensor& up) { gr.accumulate(ia, up * s); });
}

Var mul(Var a, Var b) {
  require_same_shape("mul", a.value(), b.value());
  auto& g = a.graph();
  const auto ia = a.id();
  const auto ib = b.id();
  return g.record(a.value().cwiseProduct(b.value()), any_requires(g, {a, b}),
                  [ia, ib](Graph& gr, const Tensor& up) {
                    if (gr.requires_grad(ia)) gr.accumulate(ia, up.cwiseProduct(gr.value(ib)));
                    if (gr.requires_grad(ib)) gr.accumulate(ib, up.cwiseProduct(gr.value(ia)));
                  });
}

Var softmax(Var a, Axis axis) {
  auto& g = a.graph();
  const auto ia = a.id();
  Tensor y = softmax_values(a.value(), axis);
  Tensor yc = y;
  return g.record(std::move(y), g.requires_grad(ia),
                  [ia, yv = std::move(yc), axis](Graph& gr, const Tensor& up) {
                    const Tensor prod = up.cwiseProduct(yv);
                    Tensor d;
                    if (axis == Axis::kCols) {
                      const Eigen::VectorXd s = prod.rowwise().sum();
                      d = prod - (yv.array().colwise() * s.array()).matrix();
                    } else {
                      const Eigen::RowVectorXd s = prod.colwise().sum();
                      d = prod - (yv.array().rowwise() * s.array()).matrix();
                    }
                    gr.accumulate(ia, d);
                  });
}

Var log_softmax(Var a, Axis axis) {
  auto& g = a.graph();
  const auto ia = a.id();
  const auto& av = a.value();
  const Tensor p = softmax_values(av, axis);
  Tensor y(av.rows(), av.cols());
  if (axis == Axis::kCols) {
    for (Eigen::Index r = 0; r < av.rows(); ++r) {
      const double top = av.row(r).maxCoeff();
      const double lse = top + std::log((av.row(r).array() - top).exp().sum());
      y.row(r) = av.row(r).array() - lse;
    }
  } else {
    for (Eigen::Index c = 0; c < av.cols(); ++c) {
      const double top = av.col(c).maxCoeff();
      const double lse = top + std::log((av.col(c).array() - top).exp().sum());
      y.col(c) = av.col(c).array() - lse;
    }
  }
  return g.record(std::move(y), g.requires_grad(ia), [ia, p, axis](Graph& gr, const Tensor& up) {
    Tensor d;
    if (axis == Axis::kCols) {
      const Eigen::VectorXd s = up.rowwise().sum();
      d = up - (p.array().colwise() * s.array()).matrix();
    } else {
      const Eigen::RowVectorXd s = up.colwise().sum();
      d = up - (p.array().rowwise() * s.array()).matrix();
    }
    gr.accumulate(ia, d);
  });
}

Var layer_normalize(Var a, Var gain, Var bias, double eps) {
  const auto& av = a.value();
  const auto n = av.cols();
  if (gain.rows() != 1 || gain.cols() != n || bias.rows() != 1 || bias.cols() != n)
    throw ShapeError("layer_normalize: gain/bias must be 1x" + std::to_string(n));
  auto& g = a.graph();
  const auto ia = a.id();
  const auto ig = gain.id();
  const auto ib = bias.id();

  const Eigen::VectorXd mu = av.rowwise().mean();
  const Tensor centered = av.colwise() - mu;
  const Eigen::VectorXd inv_std =
      ((centered.array().square().rowwise().sum() / static_cast<double>(n)) + eps).rsqrt();
  Tensor xhat = (centered.array().colwise() * inv_std.array()).matrix();
  Tensor y = (xhat.array().rowwise() * gain.value().row(0).array()).matrix();
  y.rowwise() += bias.value().row(0);

  return g.record(std::move(y), any_requires(g, {a, gain, bias}),
                  [ia, ig, ib, xhat = std::move(xhat), inv_std, n](Graph& gr, const Tensor& up) {
                    if (gr.requires_grad(ig))
                      gr.accumulate(ig, up.cwiseProduct(xhat).colwise().sum());
                    if (gr.requires_grad(ib)) gr.accumulate(ib, up.colwise().sum());
                    if (!gr.requires_grad(ia)) return;
                    const Tensor dx =
                        (up.array().rowwise() * gr.value(ig).row(0).array()).matrix();
                    const Eigen::VectorXd m1 = dx.rowwise().mean();
                    const Eigen::VectorXd m2 =
                        dx.cwiseProduct(xhat).rowwise().sum() / static_cast<double>(n);
                    Tensor da = dx.colwise() - m1;
                    da -= (xhat.array().colwise() * m2.array()).matrix();
                    da = (da.array().colwise() * inv_std.array()).matrix();
                    gr.accumulate(ia, da);
                  });
}

Var gelu(Var a) {
  auto& g = a.graph();
  const auto ia = a.id();
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
  Tensor y = a.value().unaryExpr([](double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); });
  return g.record(std::move(y), g.requires_grad(ia),
                  [ia, inv_sqrt_2pi](Graph& gr, const Tensor& up) {
                    const Tensor d = gr.value(ia).unaryExpr([inv_sqrt_2pi](double x) {
                      return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) +
                             x * inv_sqrt_2pi * std::exp(-0.5 * x * x);
                    });
                    gr.accumulate(ia, up.cwiseProduct(d));
                  });
}

namespace {
double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}
}  // namespace

Var sigmoid(Var a) {
  auto& g = a.graph();
  const auto ia = a.id();
  Tensor y = a.value().unaryExpr(&stable_sigmoid);
  Tensor dy = y.array() * (1.0 - y.array());
  return g.record(std::move(y), g.requires_grad(ia),
                  [ia, dy = std::move(dy)](Graph& gr, const Tensor& up) {
                    gr.accumulate(ia, up.cwiseProduct(dy));
                  });
}

Var log_sigmoid(Var a) {
  auto& g = a.graph();
  const auto ia = a.id();
  Tensor y = a.value().unaryExpr(
      [](double x) { return std::min(x, 0.0) - std::log1p(std::exp(-std::abs(x))); });
  return g.record(std::move(y), g.requires_grad(ia), [ia](Graph& gr, const Tensor& up) {
    const Tensor d = gr.value(ia).unaryExpr([](double x) { return stable_sigmoid(-x); });
    gr.accumulate(ia, up.cwiseProduct(d));
  });
}

Var log(Var a) {
  const auto& av = a.value();
  if ((av.array() <= 0.0).any()) throw NumericError("log of a non-positive value");
  auto& g = a.graph();
  const auto ia = a.id();
  return g.record(av.array().log().matrix(), g.requires_grad(ia),
                  [ia](Graph& gr, const Tensor& up) {
                    gr.accumulate(ia, up.cwiseQuotient(gr.value(ia)));
                  });
}

Var sum(Var a) {
  auto& g = a.graph();
  const auto ia = a.id();
  const auto r = a.rows();
  const auto c = a.cols();
  Tensor s(1, 1);
  s(0, 0) = a.value().sum();
  return g.record(std::move(s), g.requires_grad(ia), [ia, r, c](Graph& gr, const Tensor& up) {
    gr.accumulate(ia, Tensor::Constant(r, c, up(0, 0)));
  });
}

Var sum(Var a, Axis axis) {
  auto& g = a.graph();
  const auto ia = a.id();
  const auto r = a.rows();
  const auto c = a.cols();
  if (axis == Axis::kRows) {
    return g.record(a.value().colwise().sum(), g.requires_grad(ia),
                    [ia, r](Graph& gr, const Tensor& up) {
                      gr.accumulate(ia, up.replicate(r, 1));
                    });
  }
  return g.record(a.value().rowwise().sum(), g.requires_grad(ia),
                  [ia, c](Graph& gr, const Tensor& up) { gr.accumulate(ia, up.replicate(1, c)); });
}

Var mean(Var a) {
  const auto n = static_cast<double>(a.value().size());
  if (n == 0) throw ShapeError("mean of an empty tensor");
  return scale(sum(a), 1.0 / n);
}

Var squared_difference(Var a, Var b) {
  require_same_shape("squared_difference", a.value(), b.value());
  auto& g = a.graph();
  const auto ia = a.id();
  const auto ib = b.id();
  Tensor diff = a.value() - b.value();
  Tensor out = diff.array().square().matrix();
  return g.record(std::move(out), any_requires(g, {a, b}),
                  [ia, ib, diff = std::move(diff)](Graph& gr, const Tensor& up) {
                    const Tensor d = 2.0 * up.cwiseProduct(diff);
                    gr.accumulate(ia, d);
                    if (gr.requires_grad(ib)) gr.accumulate(ib, -d);
                  });
}

Var concat(const std::vector<Var>& parts, Axis axis) {
  if (parts.empty()) throw ShapeError("concat of no tensors");
  auto& g = parts.front().graph();
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;
  bool needs_grad = false;
  for (const auto& p : parts) {
    if (axis == Axis::kRows) {
      if (p.cols() != parts.front().cols()) throw ShapeError("concat rows: column counts differ");
      rows += p.rows();
    } else {
      if (p.rows() != parts.front().rows()) throw ShapeError("concat cols: row counts differ");
      cols += p.cols();
    }
    needs_grad = needs_grad || g.requires_grad(p.id());
  }
  if (axis == Axis::kRows) cols = parts.front().cols();
  else rows = parts.front().rows();

  Tensor out(rows, cols);
  std::vector<std::pair<std::size_t, Eigen::Index>> spans;  // (id, extent)
  Eigen::Index offset = 0;
  for (const auto& p : parts) {
    if (axis == Axis::kRows) {
      out.middleRows(offset, p.rows()) = p.value();
      spans.emplace_back(p.id(), p.rows());
      offset += p.rows();
    } else {
      out.middleCols(offset, p.cols()) = p.value();
      spans.emplace_back(p.id(), p.cols());
      offset += p.cols();
    }
  }
  return g.record(std::move(out), needs_grad, [spans, axis](Graph& gr, const Tensor& up) {
    Eigen::Index off = 0;
    for (const auto& [id, extent] : spans) {
      if (gr.requires_grad(id)) {
        if (axis == Axis::kRows) gr.accumulate(id, up.middleRows(off, extent));
        else gr.accumulate(id, up.middleCols(off, extent));
      }
      off += extent;
    }
  });
}

Var slice(Var a, Axis axis, Eigen::Index begin, Eigen::Index count) {
  const auto extent = axis == Axis::kRows ? a.rows() : a.cols();
  if (begin < 0 || count < 0 || begin + count > extent)
    throw ShapeError("slice [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                     ") out of range for extent " + std::to_string(extent));
  auto& g = a.graph();
  const auto ia = a.id();
  const auto r = a.rows();
  const auto c = a.cols();
  Tensor out = axis == Axis::kRows ? Tensor(a.value().middleRows(begin, count))
                                   : Tensor(a.value().middleCols(begin, count));
  return g.record(std::move(out), g.requires_grad(ia),
                  [ia, r, c, axis, begin, count](Graph& gr, const Tensor& up) {
                    Tensor d = Tensor::Zero(r, c);
                    if (axis == Axis::kRows) d.middleRows(begin, count) = up;
                    else d.middleCols(begin, count) = up;
                    gr.accumulate(ia, d);
                  });
}

Var transpose(Var a) {
  auto& g = a.graph();
  const auto ia = a.id();
  return g.record(a.value().transpose(), g.requires_grad(ia),
                  [ia](Graph& gr, const Tensor& up) { gr.accumulate(ia, up.transpose()); });
}

void adamw_update(Tensor& value, const Tensor& grad, AdamState& state, const AdamWConfig& config) {
  if (grad.rows() != value.rows() || grad.cols() != value.cols())
    throw ShapeError("adamw: gradient shape " + shape(grad) + " vs parameter " + shape(value));
  if (state.step == 0) {
    state.m = Tensor::Zero(value.rows(), value.cols());
    state.v = Tensor::Zero(value.rows(), value.cols());
  } else if (state.m.rows() != value.rows() || state.m.cols() != value.cols()) {
    throw ShapeError("adamw: optimizer state shape does not match parameter");
  }
  ++state.step;
  state.m = config.beta1 * state.m + (1.0 - config.beta1) * grad;
  state.v = config.beta2 * state.v + (1.0 - config.beta2) * grad.cwiseProduct(grad);
  const double bc1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.step));

  value *= 1.0 - config.learning_rate * config.weight_decay;
  value.array() -= config.learning_rate * (state.m.array() / bc1) /
                   ((state.v.array() / bc2).sqrt() + config.eps);
}

void adamw_step(std::vector<Parameter*>& params, std::vector<AdamState>& states,
                const AdamWConfig& config) {
  if (states.size() != params.size()) states.resize(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = *params[i];
    if (!p.trainable) continue;
    adamw_update(p.value, p.grad, states[i], config);
  }
}

}  // namespace noisyfs::ad
