#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "occflow/tensor.hpp"

namespace occflow {

enum class Activation { SiLU, ReLU, Tanh, Identity };

Activation activation_from_string(const std::string& name);
const char* activation_name(Activation a);

// Low-rank additive adapter on a linear layer. The effective weight is
// W + (alpha / rank) * B * A with the base W frozen while the adapter trains.
struct LoraAdapter {
  Tensor A;      // rank x fan_in
  Tensor B;      // fan_out x rank
  double alpha = 1.0;
  int64_t rank = 1;

  // A gets a small Gaussian init, B starts at zero so the adapted layer is
  // exactly the base layer at step 0.
  static LoraAdapter init(int64_t fan_in, int64_t fan_out, int64_t rank, double alpha, Rng& rng);
};

struct Linear {
  Tensor weight;  // fan_out x fan_in
  Tensor bias;    // fan_out
  std::optional<LoraAdapter> adapter;

  int64_t fan_in() const { return weight.dim(1); }
  int64_t fan_out() const { return weight.dim(0); }
};

// Plain fully connected net. The hidden activation sits between layers; the
// final layer output is affine.
struct Mlp {
  std::vector<Linear> layers;
  Activation activation = Activation::SiLU;

  Mlp() = default;
  // dims = {in, hidden..., out}
  Mlp(const std::vector<int64_t>& dims, Activation act, Rng& rng);

  int64_t in_dim() const { return layers.front().fan_in(); }
  int64_t out_dim() const { return layers.back().fan_out(); }
  void attach_lora(int64_t rank, double alpha, Rng& rng);
  void drop_lora();
};

// Named reference into a model's parameter storage; `decay` marks tensors
// that receive decoupled weight decay (weights yes, biases no).
struct ParamRef {
  std::string name;
  Tensor* value = nullptr;
  bool decay = false;
};

// Parameter listing in a stable order: per layer weight, bias, then adapter
// A, B when attached. `base`/`adapters` select which groups are included.
std::vector<ParamRef> mlp_params(Mlp& m, bool base = true, bool adapters = true);

// x: (..., in_dim); leading axes are batch.
Tensor mlp_forward(const Mlp& m, const Tensor& x);

struct MlpBackward {
  std::vector<Tensor> param_grads;  // aligned with mlp_params(m, true, true)
  Tensor input_grad;                // dL/dx, shaped like x
};

// Gradients of <upstream, forward(x)> w.r.t. every parameter and the input.
MlpBackward mlp_backward(const Mlp& m, const Tensor& x, const Tensor& upstream);

// v^T * d(forward)/dx for a single input row; equals the input_grad of
// mlp_backward with upstream = v.
Tensor input_vjp(const Mlp& m, const Tensor& x, const Tensor& v);

// Standalone adapted-layer application: (W + alpha/r * B A) x + b.
Tensor lora_forward(const Linear& layer, const LoraAdapter& adapter, const Tensor& x);

// Central finite differences (f(x+h e_i) - f(x-h e_i)) / (2h); the testing
// oracle for every analytic gradient in this project.
Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x, double h);

// Dense matmul helpers, all fixed-order loops.
// a: (n, k), b: (m, k) -> (n, m) = a b^T
Tensor matmul_nt(const Tensor& a, const Tensor& b);
// a: (n, k), b: (k, m) -> (n, m)
Tensor matmul_nn(const Tensor& a, const Tensor& b);
// a: (k, n), b: (k, m) -> (n, m) = a^T b
Tensor matmul_tn(const Tensor& a, const Tensor& b);

}  // namespace occflow
