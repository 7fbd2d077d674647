#pragma once

// Test-only oracles for the differentiation checks. Everything here works on
// the plain Mlp weights and never goes through dg::Graph.

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "aml/diffgraph.hpp"
#include "aml/matrix.hpp"
#include "aml/mlp.hpp"

namespace aml::testing {

/// |a-b| relative to the larger magnitude; differences below 1e-8 count as exact.
inline double relative_error(double a, double b) {
  const double diff = std::abs(a - b);
  if (diff <= 1e-8) return 0.0;
  return diff / std::max(std::abs(a), std::abs(b));
}

/// Input Jacobian of a single-output tanh Mlp at one point, by forward-mode
/// propagation of dh/dx through each layer.
inline std::vector<double> input_gradient_forward_mode(const Mlp& net, std::span<const double> x) {
  const std::size_t n = x.size();
  std::vector<double> h(x.begin(), x.end());
  // J is (width x n): derivative of each unit w.r.t. each input
  std::vector<double> J(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) J[i * n + i] = 1.0;
  std::size_t width = n;
  for (std::size_t l = 0; l < net.num_layers(); ++l) {
    const Matrix& W = net.weights[l];
    const Matrix& b = net.biases[l];
    const std::size_t out = W.cols();
    std::vector<double> z(out, 0.0), Jz(out * n, 0.0);
    for (std::size_t s = 0; s < out; ++s) {
      z[s] = b[s];
      for (std::size_t q = 0; q < width; ++q) {
        z[s] += h[q] * W(q, s);
        for (std::size_t i = 0; i < n; ++i) Jz[s * n + i] += W(q, s) * J[q * n + i];
      }
    }
    if (l + 1 < net.num_layers()) {
      for (std::size_t s = 0; s < out; ++s) {
        const double t = std::tanh(z[s]);
        z[s] = t;
        for (std::size_t i = 0; i < n; ++i) Jz[s * n + i] *= (1.0 - t * t);
      }
    }
    h = std::move(z);
    J = std::move(Jz);
    width = out;
  }
  return J;  // 1 x n
}

inline Mlp random_tanh_net(std::mt19937_64& rng, std::size_t inputs, std::size_t max_width,
                           std::size_t max_hidden) {
  std::uniform_int_distribution<std::size_t> depth(1, max_hidden), width(1, max_width);
  std::vector<std::size_t> sizes{inputs};
  const std::size_t d = depth(rng);
  for (std::size_t i = 0; i < d; ++i) sizes.push_back(width(rng));
  sizes.push_back(1);
  Mlp net = Mlp::init(sizes, rng);
  // spread weights a little beyond the init range so tanh leaves its linear regime
  for (Matrix* p : net.parameters())
    for (double& v : p->flat()) v *= 1.5;
  return net;
}

struct CheckReport {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;

  void add(double analytic, double numeric) {
    max_rel_error = std::max(max_rel_error, relative_error(analytic, numeric));
    max_abs_error = std::max(max_abs_error, std::abs(analytic - numeric));
    ++entries;
  }
  std::size_t entries = 0;
};

/// Gradient of sum(net(x)) w.r.t. input and every parameter, from the graph,
/// against central differences (h = 1e-5) of the plain forward pass.
inline CheckReport first_order_check(std::mt19937_64& rng, std::size_t max_hidden, std::size_t max_width,
                                     std::size_t inputs) {
  Mlp net = random_tanh_net(rng, inputs, max_width, max_hidden);
  std::normal_distribution<double> nd(0.0, 1.0);
  Matrix x(1, inputs);
  for (double& v : x.flat()) v = nd(rng);

  dg::Graph g;
  dg::Var xin = g.input({1, inputs}, "x");
  MlpNodes nodes = declare(g, net, "net");
  dg::Var root = g.sum(nodes.forward(xin));
  std::vector<dg::Var> wrt = nodes.all();
  wrt.push_back(xin);
  auto grads = g.gradient(root, wrt);
  bind(g, nodes, net);
  g.bind(xin, x);
  g.evaluate(grads);

  const double h = 1e-5;
  auto f = [&](const Mlp& n, const Matrix& xv) { return n.forward(xv)[0]; };
  CheckReport rep;
  auto params = net.parameters();
  for (std::size_t p = 0; p < params.size(); ++p) {
    const Matrix& analytic = g.value(grads[p]);
    for (std::size_t k = 0; k < params[p]->size(); ++k) {
      const double orig = (*params[p])[k];
      (*params[p])[k] = orig + h;
      const double fp = f(net, x);
      (*params[p])[k] = orig - h;
      const double fm = f(net, x);
      (*params[p])[k] = orig;
      rep.add(analytic[k], (fp - fm) / (2 * h));
    }
  }
  const Matrix& gx = g.value(grads.back());
  for (std::size_t k = 0; k < inputs; ++k) {
    Matrix xp = x, xm = x;
    xp[k] += h;
    xm[k] -= h;
    rep.add(gx[k], (f(net, xp) - f(net, xm)) / (2 * h));
  }
  return rep;
}

/// s(theta) = mean over a small batch of ||grad_x g_theta(x)||^2. The graph's
/// ds/dtheta (double backprop) is compared with central differences of s,
/// where s itself is computed by forward-mode Jacobians.
inline CheckReport second_order_check(std::mt19937_64& rng, std::size_t max_hidden, std::size_t max_width,
                                      std::size_t inputs) {
  Mlp net = random_tanh_net(rng, inputs, max_width, max_hidden);
  std::normal_distribution<double> nd(0.0, 1.0);
  const std::size_t batch = 4;
  Matrix x(batch, inputs);
  for (double& v : x.flat()) v = nd(rng);

  dg::Graph g;
  dg::Var xin = g.input({dg::kDynamic, inputs}, "x");
  MlpNodes nodes = declare(g, net, "net");
  dg::Var out = nodes.forward(xin);
  const dg::Var xs[] = {xin};
  dg::Var v = g.gradient(g.sum(out), xs)[0];
  dg::Var s = g.mean(g.sum_cols(g.mul(v, v)));
  auto grads = g.gradient(s, nodes.all());
  bind(g, nodes, net);
  g.bind(xin, x);
  g.evaluate(grads);

  auto s_oracle = [&](const Mlp& n) {
    double acc = 0.0;
    for (std::size_t r = 0; r < batch; ++r) {
      auto J = input_gradient_forward_mode(n, x.row(r));
      for (double d : J) acc += d * d;
    }
    return acc / static_cast<double>(batch);
  };

  const double h = 1e-5;
  CheckReport rep;
  auto params = net.parameters();
  for (std::size_t p = 0; p < params.size(); ++p) {
    const Matrix& analytic = g.value(grads[p]);
    for (std::size_t k = 0; k < params[p]->size(); ++k) {
      const double orig = (*params[p])[k];
      (*params[p])[k] = orig + h;
      const double sp = s_oracle(net);
      (*params[p])[k] = orig - h;
      const double sm = s_oracle(net);
      (*params[p])[k] = orig;
      rep.add(analytic[k], (sp - sm) / (2 * h));
    }
  }
  return rep;
}

}  // namespace aml::testing
