#include "occflow/nn.hpp"

#include <cmath>

namespace occflow {

Activation activation_from_string(const std::string& name) {
  if (name == "silu") return Activation::SiLU;
  if (name == "relu") return Activation::ReLU;
  if (name == "tanh") return Activation::Tanh;
  if (name == "identity") return Activation::Identity;
  throw std::invalid_argument("unknown activation: " + name);
}

const char* activation_name(Activation a) {
  switch (a) {
    case Activation::SiLU: return "silu";
    case Activation::ReLU: return "relu";
    case Activation::Tanh: return "tanh";
    case Activation::Identity: return "identity";
  }
  return "?";
}

namespace {

double act_eval(Activation a, double x) {
  switch (a) {
    case Activation::SiLU: return x / (1.0 + std::exp(-x));
    case Activation::ReLU: return x > 0.0 ? x : 0.0;
    case Activation::Tanh: return std::tanh(x);
    case Activation::Identity: return x;
  }
  return x;
}

double act_grad(Activation a, double x) {
  switch (a) {
    case Activation::SiLU: {
      double s = 1.0 / (1.0 + std::exp(-x));
      return s * (1.0 + x * (1.0 - s));
    }
    case Activation::ReLU: return x > 0.0 ? 1.0 : 0.0;
    case Activation::Tanh: {
      double t = std::tanh(x);
      return 1.0 - t * t;
    }
    case Activation::Identity: return 1.0;
  }
  return 1.0;
}

// Flatten (..., c) into (rows, c).
int64_t batch_rows(const Tensor& x, int64_t feature_dim, const char* what) {
  if (x.ndim() < 1 || x.last_dim() != feature_dim)
    throw std::invalid_argument(std::string(what) + ": last dim " + shape_str(x.shape) +
                                " != " + std::to_string(feature_dim));
  return x.size() / feature_dim;
}

}  // namespace

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  int64_t n = a.dim(0), k = a.dim(1), m = b.dim(0);
  if (b.dim(1) != k) throw std::invalid_argument("matmul_nt: inner dims");
  Tensor r({n, m});
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < m; ++j) {
      double s = 0.0;
      const double* ar = &a.data[static_cast<size_t>(i * k)];
      const double* br = &b.data[static_cast<size_t>(j * k)];
      for (int64_t t = 0; t < k; ++t) s += ar[t] * br[t];
      r.at2(i, j, m) = s;
    }
  return r;
}

Tensor matmul_nn(const Tensor& a, const Tensor& b) {
  int64_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
  if (b.dim(0) != k) throw std::invalid_argument("matmul_nn: inner dims");
  Tensor r({n, m});
  for (int64_t i = 0; i < n; ++i) {
    double* rr = &r.data[static_cast<size_t>(i * m)];
    for (int64_t t = 0; t < k; ++t) {
      double av = a.at2(i, t, k);
      const double* br = &b.data[static_cast<size_t>(t * m)];
      for (int64_t j = 0; j < m; ++j) rr[j] += av * br[j];
    }
  }
  return r;
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  int64_t k = a.dim(0), n = a.dim(1), m = b.dim(1);
  if (b.dim(0) != k) throw std::invalid_argument("matmul_tn: inner dims");
  Tensor r({n, m});
  for (int64_t t = 0; t < k; ++t) {
    const double* ar = &a.data[static_cast<size_t>(t * n)];
    const double* br = &b.data[static_cast<size_t>(t * m)];
    for (int64_t i = 0; i < n; ++i) {
      double av = ar[i];
      double* rr = &r.data[static_cast<size_t>(i * m)];
      for (int64_t j = 0; j < m; ++j) rr[j] += av * br[j];
    }
  }
  return r;
}

LoraAdapter LoraAdapter::init(int64_t fan_in, int64_t fan_out, int64_t rank, double alpha, Rng& rng) {
  if (rank < 1 || rank > std::min(fan_in, fan_out))
    throw std::invalid_argument("lora rank out of range");
  LoraAdapter a;
  a.rank = rank;
  a.alpha = alpha;
  a.A = Tensor({rank, fan_in});
  double std = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (int64_t i = 0; i < a.A.size(); ++i) a.A[i] = std * rng.normal();
  a.B = Tensor({fan_out, rank});
  return a;
}

Mlp::Mlp(const std::vector<int64_t>& dims, Activation act, Rng& rng) : activation(act) {
  if (dims.size() < 2) throw std::invalid_argument("Mlp needs at least one layer");
  for (size_t l = 0; l + 1 < dims.size(); ++l) {
    Linear lin;
    int64_t fin = dims[l], fout = dims[l + 1];
    if (fin <= 0 || fout <= 0) throw std::invalid_argument("Mlp layer dims must be positive");
    lin.weight = Tensor({fout, fin});
    double std = 1.0 / std::sqrt(static_cast<double>(fin));
    for (int64_t i = 0; i < lin.weight.size(); ++i) lin.weight[i] = std * rng.normal();
    lin.bias = Tensor({fout});
    layers.push_back(std::move(lin));
  }
}

void Mlp::attach_lora(int64_t rank, double alpha, Rng& rng) {
  for (auto& l : layers) {
    int64_t r = std::min<int64_t>(rank, std::min(l.fan_in(), l.fan_out()));
    l.adapter = LoraAdapter::init(l.fan_in(), l.fan_out(), r, alpha > 0 ? alpha : static_cast<double>(r), rng);
  }
}

void Mlp::drop_lora() {
  for (auto& l : layers) l.adapter.reset();
}

std::vector<ParamRef> mlp_params(Mlp& m, bool base, bool adapters) {
  std::vector<ParamRef> out;
  for (size_t l = 0; l < m.layers.size(); ++l) {
    std::string p = "layers." + std::to_string(l) + ".";
    if (base) {
      out.push_back({p + "weight", &m.layers[l].weight, true});
      out.push_back({p + "bias", &m.layers[l].bias, false});
    }
    if (adapters && m.layers[l].adapter) {
      out.push_back({p + "lora_A", &m.layers[l].adapter->A, true});
      out.push_back({p + "lora_B", &m.layers[l].adapter->B, true});
    }
  }
  return out;
}

namespace {

// One affine layer on a (rows, fan_in) matrix, including the adapter path.
Tensor layer_apply(const Linear& l, const Tensor& h) {
  int64_t rows = h.dim(0), fout = l.fan_out();
  Tensor a = matmul_nt(h, l.weight);
  for (int64_t i = 0; i < rows; ++i)
    for (int64_t j = 0; j < fout; ++j) a.at2(i, j, fout) += l.bias[j];
  if (l.adapter) {
    const LoraAdapter& ad = *l.adapter;
    double c = ad.alpha / static_cast<double>(ad.rank);
    Tensor u = matmul_nt(h, ad.A);           // rows x rank
    Tensor d = matmul_nt(u, ad.B);           // rows x fan_out
    for (int64_t i = 0; i < a.size(); ++i) a[i] += c * d[i];
  }
  return a;
}

struct ForwardTrace {
  std::vector<Tensor> pre;   // pre-activation per layer, (rows, fan_out)
  std::vector<Tensor> post;  // activated output per layer (last = pre)
};

ForwardTrace run_forward(const Mlp& m, const Tensor& x_rows) {
  ForwardTrace tr;
  const Tensor* h = &x_rows;
  for (size_t l = 0; l < m.layers.size(); ++l) {
    Tensor a = layer_apply(m.layers[l], *h);
    bool last = (l + 1 == m.layers.size());
    Tensor out = a;
    if (!last)
      for (int64_t i = 0; i < out.size(); ++i) out[i] = act_eval(m.activation, out[i]);
    tr.pre.push_back(std::move(a));
    tr.post.push_back(std::move(out));
    h = &tr.post.back();
  }
  return tr;
}

}  // namespace

Tensor mlp_forward(const Mlp& m, const Tensor& x) {
  int64_t rows = batch_rows(x, m.in_dim(), "mlp_forward");
  Tensor xr = x.reshaped({rows, m.in_dim()});
  ForwardTrace tr = run_forward(m, xr);
  Tensor out = std::move(tr.post.back());
  std::vector<int64_t> oshape(x.shape.begin(), x.shape.end() - 1);
  oshape.push_back(m.out_dim());
  return out.reshaped(std::move(oshape));
}

MlpBackward mlp_backward(const Mlp& m, const Tensor& x, const Tensor& upstream) {
  int64_t rows = batch_rows(x, m.in_dim(), "mlp_backward");
  if (upstream.size() != rows * m.out_dim())
    throw std::invalid_argument("mlp_backward: upstream shape mismatch");
  Tensor xr = x.reshaped({rows, m.in_dim()});
  ForwardTrace tr = run_forward(m, xr);

  size_t L = m.layers.size();
  std::vector<Tensor> grad_w(L), grad_b(L), grad_A(L), grad_B(L);

  Tensor g = upstream.reshaped({rows, m.out_dim()});
  for (size_t li = L; li-- > 0;) {
    const Linear& lay = m.layers[li];
    int64_t fout = lay.fan_out();
    bool last = (li + 1 == L);
    if (!last) {
      const Tensor& a = tr.pre[li];
      for (int64_t i = 0; i < g.size(); ++i) g[i] *= act_grad(m.activation, a[i]);
    }
    const Tensor& h_in = (li == 0) ? xr : tr.post[li - 1];

    grad_w[li] = matmul_tn(g, h_in);  // fout x fin
    Tensor gb({fout});
    for (int64_t i = 0; i < rows; ++i)
      for (int64_t j = 0; j < fout; ++j) gb[j] += g.at2(i, j, fout);
    grad_b[li] = std::move(gb);

    Tensor g_prev;
    if (lay.adapter) {
      const LoraAdapter& ad = *lay.adapter;
      double c = ad.alpha / static_cast<double>(ad.rank);
      Tensor u = matmul_nt(h_in, ad.A);   // rows x rank
      Tensor gB = matmul_tn(g, u);        // fout x rank
      grad_B[li] = scale(gB, c);
      Tensor gu = matmul_nn(g, ad.B);     // rows x rank
      Tensor gA = matmul_tn(gu, h_in);    // rank x fin
      grad_A[li] = scale(gA, c);
      g_prev = matmul_nn(g, lay.weight);  // rows x fin
      Tensor g_lora = matmul_nn(gu, ad.A);
      axpy(g_prev, g_lora, c);
    } else {
      g_prev = matmul_nn(g, lay.weight);
    }
    g = std::move(g_prev);
  }

  MlpBackward out;
  for (size_t li = 0; li < L; ++li) {
    out.param_grads.push_back(std::move(grad_w[li]));
    out.param_grads.push_back(std::move(grad_b[li]));
    if (m.layers[li].adapter) {
      out.param_grads.push_back(std::move(grad_A[li]));
      out.param_grads.push_back(std::move(grad_B[li]));
    }
  }
  out.input_grad = g.reshaped(x.shape);
  return out;
}

Tensor input_vjp(const Mlp& m, const Tensor& x, const Tensor& v) {
  if (v.size() != (x.size() / m.in_dim()) * m.out_dim())
    throw std::invalid_argument("input_vjp: v shape mismatch");
  return mlp_backward(m, x, v).input_grad;
}

Tensor lora_forward(const Linear& layer, const LoraAdapter& adapter, const Tensor& x) {
  if (adapter.A.dim(1) != layer.fan_in() || adapter.B.dim(0) != layer.fan_out() ||
      adapter.A.dim(0) != adapter.rank || adapter.B.dim(1) != adapter.rank)
    throw std::invalid_argument("lora_forward: adapter rank mismatch");
  int64_t rows = batch_rows(x, layer.fan_in(), "lora_forward");
  Tensor xr = x.reshaped({rows, layer.fan_in()});
  Linear tmp = layer;
  tmp.adapter = adapter;
  Tensor a = layer_apply(tmp, xr);
  std::vector<int64_t> oshape(x.shape.begin(), x.shape.end() - 1);
  oshape.push_back(layer.fan_out());
  return a.reshaped(std::move(oshape));
}

Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x, double h) {
  if (!(h > 0.0)) throw std::invalid_argument("finite_diff_grad: h must be positive");
  Tensor g(x.shape);
  Tensor xp = x;
  for (int64_t i = 0; i < x.size(); ++i) {
    double orig = xp[i];
    xp[i] = orig + h;
    double fp = f(xp);
    xp[i] = orig - h;
    double fm = f(xp);
    xp[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw std::runtime_error("finite_diff_grad: non-finite evaluation");
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

}  // namespace occflow
