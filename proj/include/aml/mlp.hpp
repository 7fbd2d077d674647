#pragma once

#include <cmath>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "aml/diffgraph.hpp"
#include "aml/error.hpp"
#include "aml/matrix.hpp"

namespace aml {

/// Fully connected network: tanh on every hidden layer, linear output.
/// weights[l] has shape layer_sizes[l] x layer_sizes[l+1]; biases[l] is 1 x layer_sizes[l+1].
struct Mlp {
  std::vector<std::size_t> layer_sizes;
  std::vector<Matrix> weights;
  std::vector<Matrix> biases;

  /// Uniform init in +-1/sqrt(fan_in) for weights and biases.
  static Mlp init(std::vector<std::size_t> sizes, std::mt19937_64& rng) {
    if (sizes.size() < 2) throw ContractError("Mlp: need at least input and output sizes");
    Mlp net;
    net.layer_sizes = std::move(sizes);
    for (std::size_t l = 0; l + 1 < net.layer_sizes.size(); ++l) {
      const std::size_t in = net.layer_sizes[l], out = net.layer_sizes[l + 1];
      if (in == 0 || out == 0) throw ContractError("Mlp: zero-width layer");
      const double bound = 1.0 / std::sqrt(static_cast<double>(in));
      std::uniform_real_distribution<double> u(-bound, bound);
      Matrix w(in, out), b(1, out);
      for (double& x : w.flat()) x = u(rng);
      for (double& x : b.flat()) x = u(rng);
      net.weights.push_back(std::move(w));
      net.biases.push_back(std::move(b));
    }
    return net;
  }

  static Mlp zeros(std::vector<std::size_t> sizes) {
    Mlp net;
    net.layer_sizes = std::move(sizes);
    for (std::size_t l = 0; l + 1 < net.layer_sizes.size(); ++l) {
      net.weights.emplace_back(net.layer_sizes[l], net.layer_sizes[l + 1]);
      net.biases.emplace_back(1, net.layer_sizes[l + 1]);
    }
    return net;
  }

  std::size_t input_dim() const { return layer_sizes.front(); }
  std::size_t output_dim() const { return layer_sizes.back(); }
  std::size_t num_layers() const { return weights.size(); }

  std::vector<Matrix*> parameters() {
    std::vector<Matrix*> out;
    for (std::size_t l = 0; l < weights.size(); ++l) {
      out.push_back(&weights[l]);
      out.push_back(&biases[l]);
    }
    return out;
  }

  /// Plain forward pass over a batch (rows are samples).
  Matrix forward(const Matrix& x) const {
    if (x.cols() != input_dim())
      throw ContractError("Mlp::forward: expected " + std::to_string(input_dim()) + " inputs, got " +
                          std::to_string(x.cols()));
    Matrix h = x;
    for (std::size_t l = 0; l < weights.size(); ++l) {
      const Matrix& w = weights[l];
      const Matrix& b = biases[l];
      Matrix next(h.rows(), w.cols());
      for (std::size_t r = 0; r < h.rows(); ++r) {
        double* o = &next(r, 0);
        for (std::size_t q = 0; q < w.rows(); ++q) {
          const double a = h(r, q);
          const double* wr = w.row(q).data();
          for (std::size_t s = 0; s < w.cols(); ++s) o[s] += a * wr[s];
        }
        for (std::size_t s = 0; s < w.cols(); ++s) o[s] += b[s];
        if (l + 1 < weights.size())
          for (std::size_t s = 0; s < w.cols(); ++s) o[s] = std::tanh(o[s]);
      }
      h = std::move(next);
    }
    return h;
  }

  friend bool operator==(const Mlp&, const Mlp&) = default;
};

/// Parameter leaves of an Mlp inside a Graph.
struct MlpNodes {
  std::vector<dg::Var> weights;
  std::vector<dg::Var> biases;

  std::vector<dg::Var> all() const {
    std::vector<dg::Var> out;
    for (std::size_t l = 0; l < weights.size(); ++l) {
      out.push_back(weights[l]);
      out.push_back(biases[l]);
    }
    return out;
  }

  dg::Var forward(dg::Var x) const {
    dg::Graph& g = *x.graph();
    dg::Var h = x;
    for (std::size_t l = 0; l < weights.size(); ++l) {
      h = g.add(g.dot(h, weights[l]), g.broadcast_rows(biases[l], h));
      if (l + 1 < weights.size()) h = g.tanh(h);
    }
    return h;
  }
};

inline MlpNodes declare(dg::Graph& g, const Mlp& net, const std::string& prefix) {
  MlpNodes nodes;
  for (std::size_t l = 0; l < net.weights.size(); ++l) {
    nodes.weights.push_back(g.parameter({net.weights[l].rows(), net.weights[l].cols()},
                                        prefix + ".W" + std::to_string(l)));
    nodes.biases.push_back(g.parameter({1, net.biases[l].cols()}, prefix + ".b" + std::to_string(l)));
  }
  return nodes;
}

inline void bind(dg::Graph& g, const MlpNodes& nodes, const Mlp& net) {
  for (std::size_t l = 0; l < net.weights.size(); ++l) {
    g.bind(nodes.weights[l], net.weights[l]);
    g.bind(nodes.biases[l], net.biases[l]);
  }
}

}  // namespace aml
