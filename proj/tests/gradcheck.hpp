#pragma once

// Finite-difference checks of the autodiff primitives, shared by the unit
// tests and the acceptance run.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "noisyfs/autodiff.hpp"
#include "oracles.hpp"

namespace gradcheck {

using namespace noisyfs::ad;


using Builder = std::function<Var(Graph&, const std::vector<Var>&)>;

inline Tensor random_tensor(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c, double lo = -1.5, double hi = 1.5) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(r, c);
  for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = u(rng);
  return t;
}

// Contracts the op's output with a fixed random cotangent so every output
// entry contributes to the checked scalar.
inline double scalar_value(const Builder& build, const std::vector<Tensor>& inputs, const Tensor& cotangent) {
  Graph g;
  std::vector<Var> vars;
  for (const auto& x : inputs) vars.push_back(g.constant(x));
  const Var out = build(g, vars);
  return (out.value().array() * cotangent.array()).sum();
}

// Worst entrywise error of the analytic gradient against central differences,
// relative to the largest gradient entry of that input.
inline double gradient_error(const Builder& build, const std::vector<Tensor>& inputs, std::mt19937_64& rng,
                      double step = 1e-3) {
  Tensor cotangent;
  {
    Graph g;
    std::vector<Var> vars;
    for (const auto& x : inputs) vars.push_back(g.constant(x));
    const Var out = build(g, vars);
    cotangent = random_tensor(rng, out.rows(), out.cols());
  }
  std::vector<Parameter> params;
  for (std::size_t i = 0; i < inputs.size(); ++i) params.emplace_back("x" + std::to_string(i), inputs[i]);
  Graph g;
  std::vector<Var> vars;
  for (auto& p : params) vars.push_back(g.parameter(p));
  const Var out = build(g, vars);
  const Var root = sum(mul(out, g.constant(cotangent)));
  g.backward(root);

  double worst = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const auto f = [&](const Tensor& x) {
      auto moved = inputs;
      moved[i] = x;
      return scalar_value(build, moved, cotangent);
    };
    const Tensor fd = oracle::numeric_gradient(f, inputs[i], step);
    worst = std::max(worst, oracle::scaled_error(params[i].grad, fd));
  }
  return worst;
}

struct Case {
  std::string name;
  // Input shapes from a random (rows, cols) pair.
  std::function<std::vector<Tensor>(std::mt19937_64&, Eigen::Index, Eigen::Index)> inputs;
  Builder build;
};

inline std::vector<Case> primitive_cases() {
  auto same = [](int n) {
    return [n](std::mt19937_64& rng, Eigen::Index r, Eigen::Index c) {
      std::vector<Tensor> v;
      for (int i = 0; i < n; ++i) v.push_back(random_tensor(rng, r, c));
      return v;
    };
  };
  return {
      {"matmul",
       [](std::mt19937_64& rng, Eigen::Index r, Eigen::Index c) {
         return std::vector<Tensor>{random_tensor(rng, r, c), random_tensor(rng, c, r + 1)};
       },
       [](Graph&, const std::vector<Var>& x) { return matmul(x[0], x[1]); }},
      {"add", same(2), [](Graph&, const std::vector<Var>& x) { return add(x[0], x[1]); }},
      {"sub", same(2), [](Graph&, const std::vector<Var>& x) { return sub(x[0], x[1]); }},
      {"add_row",
       [](std::mt19937_64& rng, Eigen::Index r, Eigen::Index c) {
         return std::vector<Tensor>{random_tensor(rng, r, c), random_tensor(rng, 1, c)};
       },
       [](Graph&, const std::vector<Var>& x) { return add_row(x[0], x[1]); }},
      {"scale", same(1), [](Graph&, const std::vector<Var>& x) { return scale(x[0], -2.5); }},
      {"mul", same(2), [](Graph&, const std::vector<Var>& x) { return mul(x[0], x[1]); }},
      {"softmax rows", same(1), [](Graph&, const std::vector<Var>& x) { return softmax(x[0], Axis::kRows); }},
      {"softmax cols", same(1), [](Graph&, const std::vector<Var>& x) { return softmax(x[0], Axis::kCols); }},
      {"log_softmax rows", same(1), [](Graph&, const std::vector<Var>& x) { return log_softmax(x[0], Axis::kRows); }},
      {"log_softmax cols", same(1), [](Graph&, const std::vector<Var>& x) { return log_softmax(x[0], Axis::kCols); }},
      {"layer_normalize",
       [](std::mt19937_64& rng, Eigen::Index r, Eigen::Index c) {
         // Rows with a spread near the difference step make the check measure
         // truncation error instead of the gradient; keep rows well spread.
         Tensor x = random_tensor(rng, r, c + 1);
         for (Eigen::Index i = 0; i < r; ++i)
           while (std::sqrt((x.row(i).array() - x.row(i).mean()).square().mean()) < 0.25)
             x.row(i) = random_tensor(rng, 1, c + 1);
         return std::vector<Tensor>{x, random_tensor(rng, 1, c + 1), random_tensor(rng, 1, c + 1)};
       },
       [](Graph&, const std::vector<Var>& x) { return layer_normalize(x[0], x[1], x[2]); }},
      {"gelu", same(1), [](Graph&, const std::vector<Var>& x) { return gelu(x[0]); }},
      {"sigmoid", same(1), [](Graph&, const std::vector<Var>& x) { return sigmoid(x[0]); }},
      {"log_sigmoid", same(1), [](Graph&, const std::vector<Var>& x) { return log_sigmoid(x[0]); }},
      {"log",
       [](std::mt19937_64& rng, Eigen::Index r, Eigen::Index c) {
         return std::vector<Tensor>{random_tensor(rng, r, c, 0.5, 2.0)};
       },
       [](Graph&, const std::vector<Var>& x) { return log(x[0]); }},
      {"sum", same(1), [](Graph&, const std::vector<Var>& x) { return sum(x[0]); }},
      {"sum rows", same(1), [](Graph&, const std::vector<Var>& x) { return sum(x[0], Axis::kRows); }},
      {"sum cols", same(1), [](Graph&, const std::vector<Var>& x) { return sum(x[0], Axis::kCols); }},
      {"mean", same(1), [](Graph&, const std::vector<Var>& x) { return mean(x[0]); }},
      {"squared_difference", same(2), [](Graph&, const std::vector<Var>& x) { return squared_difference(x[0], x[1]); }},
      {"concat rows", same(3), [](Graph&, const std::vector<Var>& x) { return concat(x, Axis::kRows); }},
      {"concat cols", same(2), [](Graph&, const std::vector<Var>& x) { return concat(x, Axis::kCols); }},
      {"slice rows",
       [](std::mt19937_64& rng, Eigen::Index r, Eigen::Index c) {
         return std::vector<Tensor>{random_tensor(rng, r + 2, c)};
       },
       [](Graph&, const std::vector<Var>& x) { return slice(x[0], Axis::kRows, 1, x[0].rows() - 2); }},
      {"slice cols",
       [](std::mt19937_64& rng, Eigen::Index r, Eigen::Index c) {
         return std::vector<Tensor>{random_tensor(rng, r, c + 1)};
       },
       [](Graph&, const std::vector<Var>& x) { return slice(x[0], Axis::kCols, 1, x[0].cols() - 1); }},
      {"transpose", same(1), [](Graph&, const std::vector<Var>& x) { return transpose(x[0]); }},
  };
}

}  // namespace gradcheck
