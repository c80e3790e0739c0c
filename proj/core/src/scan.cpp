#include "skinmamba/scan.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <string>
#include <vector>

#include "skinmamba/errors.hpp"

namespace skinmamba::scan {
namespace {

void require_finite(const torch::Tensor& t, const char* what) {
  if (t.numel() > 0 && !torch::isfinite(t).all().item<bool>()) {
    throw NumericError(std::string(what) + " contains NaN or Inf");
  }
}

void validate(const ScanInputs& in) {
  if (!in.u.defined() || in.u.dim() != 3) {
    throw ShapeError("scan input u must be (batch, L, C)");
  }
  const int64_t batch = in.u.size(0);
  const int64_t len = in.u.size(1);
  const int64_t ch = in.u.size(2);
  if (len < 1) throw EmptyInputError("scan sequence length must be >= 1");
  if (in.A.dim() != 2 || in.A.size(0) != ch) {
    throw ShapeError("state matrix must be (C, N), got " + shape_string(in.A.sizes().vec()));
  }
  const int64_t st = in.A.size(1);
  const std::vector<int64_t> seq_c{batch, len, ch};
  const std::vector<int64_t> seq_n{batch, len, st};
  if (in.delta.sizes().vec() != seq_c) {
    throw ShapeError("delta must be " + shape_string(seq_c) + ", got " +
                     shape_string(in.delta.sizes().vec()));
  }
  if (in.B.sizes().vec() != seq_n || in.C.sizes().vec() != seq_n) {
    throw ShapeError("B and C must be " + shape_string(seq_n));
  }
  if (in.D.dim() != 1 || in.D.size(0) != ch) {
    throw ShapeError("D must be (C)");
  }
  for (const auto* t : {&in.delta, &in.A, &in.B, &in.C, &in.D}) {
    if (t->scalar_type() != in.u.scalar_type()) {
      throw ContractError("scan operands must share one dtype");
    }
  }
  require_finite(in.u, "scan input u");
  require_finite(in.delta, "delta");
  require_finite(in.A, "state matrix");
  require_finite(in.B, "B");
  require_finite(in.C, "C");
  require_finite(in.D, "D");
  if (!(in.delta > 0).all().item<bool>()) {
    throw ContractError("delta must be strictly positive");
  }
}

// Steps per chunk so that one chunk of exp(delta * A) stays around 1 MiB.
int64_t chunk_steps(int64_t channels, int64_t state_dim) {
  return std::max<int64_t>(1, (int64_t{1} << 18) / (channels * state_dim));
}

template <typename T>
struct Operands {
  const T* u;
  const T* delta;
  const T* A;
  const T* B;
  const T* C;
  const T* D;
  int64_t batch, len, ch, st;

  explicit Operands(const ScanInputs& in)
      : u(in.u.data_ptr<T>()),
        delta(in.delta.data_ptr<T>()),
        A(in.A.data_ptr<T>()),
        B(in.B.data_ptr<T>()),
        C(in.C.data_ptr<T>()),
        D(in.D.data_ptr<T>()),
        batch(in.u.size(0)),
        len(in.u.size(1)),
        ch(in.u.size(2)),
        st(in.A.size(1)) {}
};

// exp(delta[b, t0:t1, :, None] * A) as a contiguous (t1 - t0, C, N) block.
torch::Tensor decay_chunk(const ScanInputs& in, int64_t b, int64_t t0, int64_t t1) {
  return torch::exp(in.delta[b].slice(0, t0, t1).unsqueeze(-1) * in.A).contiguous();
}

template <typename T>
void forward_kernel(const ScanInputs& in, T* y, T* states) {
  const Operands<T> op(in);
  const int64_t cn = op.ch * op.st;
  const int64_t chunk = chunk_steps(op.ch, op.st);
  std::vector<T> h(static_cast<size_t>(cn));

  for (int64_t b = 0; b < op.batch; ++b) {
    std::fill(h.begin(), h.end(), T(0));
    for (int64_t t0 = 0; t0 < op.len; t0 += chunk) {
      const int64_t t1 = std::min(op.len, t0 + chunk);
      const torch::Tensor decay = decay_chunk(in, b, t0, t1);
      const T* a = decay.data_ptr<T>();
      for (int64_t t = t0; t < t1; ++t) {
        const int64_t row = b * op.len + t;
        const T* a_t = a + (t - t0) * cn;
        const T* u_t = op.u + row * op.ch;
        const T* d_t = op.delta + row * op.ch;
        const T* B_t = op.B + row * op.st;
        const T* C_t = op.C + row * op.st;
        T* y_t = y + row * op.ch;
        for (int64_t c = 0; c < op.ch; ++c) {
          const T du = d_t[c] * u_t[c];
          T* hc = h.data() + c * op.st;
          const T* ac = a_t + c * op.st;
          T acc = 0;
#pragma omp simd reduction(+ : acc)
          for (int64_t n = 0; n < op.st; ++n) {
            hc[n] = ac[n] * hc[n] + du * B_t[n];
            acc += C_t[n] * hc[n];
          }
          y_t[c] = acc + op.D[c] * u_t[c];
          if (!std::isfinite(y_t[c])) {
            throw NumericError("selective scan produced a non-finite value at step " +
                               std::to_string(t));
          }
        }
        if (states != nullptr) {
          std::memcpy(states + row * cn, h.data(), sizeof(T) * static_cast<size_t>(cn));
        }
      }
    }
  }
}

struct Gradients {
  torch::Tensor u, delta, A, B, C, D;
};

template <typename T>
Gradients backward_kernel(const ScanInputs& in, const torch::Tensor& states_t,
                          const torch::Tensor& grad_y_t) {
  const Operands<T> op(in);
  const int64_t cn = op.ch * op.st;
  const int64_t chunk = chunk_steps(op.ch, op.st);
  const T* states = states_t.data_ptr<T>();
  const T* gy = grad_y_t.data_ptr<T>();

  Gradients g;
  g.u = torch::zeros_like(in.u);
  g.delta = torch::zeros_like(in.delta);
  g.B = torch::zeros_like(in.B);
  g.C = torch::zeros_like(in.C);
  T* gu = g.u.data_ptr<T>();
  T* gdelta = g.delta.data_ptr<T>();
  T* gB = g.B.data_ptr<T>();
  T* gC = g.C.data_ptr<T>();
  // Parameter gradients are reductions over batch and time; accumulate wide.
  std::vector<double> gA(static_cast<size_t>(cn), 0.0);
  std::vector<double> gD(static_cast<size_t>(op.ch), 0.0);

  std::vector<T> gh(static_cast<size_t>(cn));
  const std::vector<T> zero_state(static_cast<size_t>(cn), T(0));

  for (int64_t b = 0; b < op.batch; ++b) {
    std::fill(gh.begin(), gh.end(), T(0));
    const int64_t last_chunk = ((op.len - 1) / chunk) * chunk;
    for (int64_t t0 = last_chunk; t0 >= 0; t0 -= chunk) {
      const int64_t t1 = std::min(op.len, t0 + chunk);
      const torch::Tensor decay = decay_chunk(in, b, t0, t1);
      const T* a = decay.data_ptr<T>();
      for (int64_t t = t1 - 1; t >= t0; --t) {
        const int64_t row = b * op.len + t;
        const T* a_t = a + (t - t0) * cn;
        const T* u_t = op.u + row * op.ch;
        const T* d_t = op.delta + row * op.ch;
        const T* B_t = op.B + row * op.st;
        const T* C_t = op.C + row * op.st;
        const T* gy_t = gy + row * op.ch;
        const T* h_t = states + row * cn;
        const T* h_prev = t > 0 ? states + (row - 1) * cn : zero_state.data();
        T* gB_t = gB + row * op.st;
        T* gC_t = gC + row * op.st;
        for (int64_t c = 0; c < op.ch; ++c) {
          const T gyc = gy_t[c];
          const T uc = u_t[c];
          const T dc = d_t[c];
          const T* ac = a_t + c * op.st;
          const T* Ac = op.A + c * op.st;
          const T* hc = h_t + c * op.st;
          const T* hp = h_prev + c * op.st;
          T* ghc = gh.data() + c * op.st;
          double* gAc = gA.data() + c * op.st;
          T gu_acc = 0;
          T gd_acc = 0;
          for (int64_t n = 0; n < op.st; ++n) {
            const T gh_n = ghc[n] + gyc * C_t[n];
            const T g_decay = gh_n * hp[n];
            gC_t[n] += gyc * hc[n];
            gB_t[n] += gh_n * dc * uc;
            gu_acc += gh_n * dc * B_t[n];
            gd_acc += gh_n * B_t[n] * uc + g_decay * ac[n] * Ac[n];
            gAc[n] += static_cast<double>(g_decay * ac[n] * dc);
            ghc[n] = gh_n * ac[n];
          }
          gu[row * op.ch + c] = gu_acc + gyc * op.D[c];
          gdelta[row * op.ch + c] = gd_acc;
          gD[static_cast<size_t>(c)] += static_cast<double>(gyc * uc);
        }
      }
    }
  }

  const auto f64 = torch::TensorOptions().dtype(torch::kFloat64);
  g.A = torch::from_blob(gA.data(), {op.ch, op.st}, f64).clone().to(in.A.scalar_type());
  g.D = torch::from_blob(gD.data(), {op.ch}, f64).clone().to(in.D.scalar_type());
  return g;
}

ScanInputs contiguous(const ScanInputs& in) {
  return {in.u.contiguous(), in.delta.contiguous(), in.A.contiguous(),
          in.B.contiguous(), in.C.contiguous(), in.D.contiguous()};
}

torch::Tensor run_forward(const ScanInputs& in, torch::Tensor* states) {
  auto y = torch::empty_like(in.u);
  if (states != nullptr) {
    *states = torch::empty({in.u.size(0), in.u.size(1), in.u.size(2), in.A.size(1)},
                           in.u.options());
  }
  AT_DISPATCH_FLOATING_TYPES(in.u.scalar_type(), "selective_scan_forward", [&] {
    forward_kernel<scalar_t>(in, y.data_ptr<scalar_t>(),
                             states != nullptr ? states->data_ptr<scalar_t>() : nullptr);
  });
  return y;
}

class SelectiveScanFunction : public torch::autograd::Function<SelectiveScanFunction> {
 public:
  static torch::Tensor forward(torch::autograd::AutogradContext* ctx, const torch::Tensor& u,
                               const torch::Tensor& delta, const torch::Tensor& A,
                               const torch::Tensor& B, const torch::Tensor& C,
                               const torch::Tensor& D) {
    const ScanInputs in{u, delta, A, B, C, D};
    torch::Tensor states;
    auto y = run_forward(in, &states);
    ctx->save_for_backward({u, delta, A, B, C, D, states});
    return y;
  }

  static torch::autograd::tensor_list backward(torch::autograd::AutogradContext* ctx,
                                               torch::autograd::tensor_list grad_outputs) {
    const auto saved = ctx->get_saved_variables();
    const ScanInputs in{saved[0], saved[1], saved[2], saved[3], saved[4], saved[5]};
    const auto grad_y = grad_outputs[0].contiguous();
    Gradients g;
    AT_DISPATCH_FLOATING_TYPES(in.u.scalar_type(), "selective_scan_backward", [&] {
      g = backward_kernel<scalar_t>(in, saved[6], grad_y);
    });
    return {g.u, g.delta, g.A, g.B, g.C, g.D};
  }
};

bool any_requires_grad(const ScanInputs& in) {
  return in.u.requires_grad() || in.delta.requires_grad() || in.A.requires_grad() ||
         in.B.requires_grad() || in.C.requires_grad() || in.D.requires_grad();
}

}  // namespace

Discretized discretize(const torch::Tensor& delta, const torch::Tensor& A,
                       const torch::Tensor& B, StepCheck check) {
  if (delta.dim() < 2 || B.dim() != delta.dim() || A.dim() != 2) {
    throw ShapeError("discretize expects delta (..., L, C), A (C, N), B (..., L, N)");
  }
  if (delta.size(-1) != A.size(0) || B.size(-1) != A.size(1) || B.size(-2) != delta.size(-2)) {
    throw ShapeError("discretize operand shapes disagree: delta " +
                     shape_string(delta.sizes().vec()) + ", A " + shape_string(A.sizes().vec()) +
                     ", B " + shape_string(B.sizes().vec()));
  }
  require_finite(delta, "delta");
  require_finite(A, "state matrix");
  require_finite(B, "B");
  const bool ok = check == StepCheck::Strict ? (delta > 0).all().item<bool>()
                                             : (delta >= 0).all().item<bool>();
  if (!ok) {
    throw ContractError(check == StepCheck::Strict ? "delta must be strictly positive"
                                                   : "delta must be non-negative");
  }
  const auto step = delta.unsqueeze(-1);
  return {torch::exp(step * A), step * B.unsqueeze(-2)};
}

torch::Tensor scan_reference(const ScanInputs& raw) {
  validate(raw);
  const auto u = raw.u.to(torch::kFloat64).contiguous();
  const auto A = raw.A.to(torch::kFloat64);
  const auto C = raw.C.to(torch::kFloat64).contiguous();
  const auto D = raw.D.to(torch::kFloat64).contiguous();
  const auto [a_bar_t, b_bar_t] =
      discretize(raw.delta.to(torch::kFloat64), A, raw.B.to(torch::kFloat64));
  const auto a_bar_c = a_bar_t.contiguous();
  const auto b_bar_c = b_bar_t.contiguous();

  const int64_t batch = u.size(0), len = u.size(1), ch = u.size(2), st = A.size(1);
  auto y = torch::zeros({batch, len, ch}, u.options());
  const double* u_p = u.data_ptr<double>();
  const double* a_p = a_bar_c.data_ptr<double>();
  const double* b_p = b_bar_c.data_ptr<double>();
  const double* c_p = C.data_ptr<double>();
  const double* d_p = D.data_ptr<double>();
  double* y_p = y.data_ptr<double>();

  std::vector<double> h(static_cast<size_t>(ch * st));
  for (int64_t b = 0; b < batch; ++b) {
    std::fill(h.begin(), h.end(), 0.0);
    for (int64_t t = 0; t < len; ++t) {
      const int64_t row = b * len + t;
      for (int64_t c = 0; c < ch; ++c) {
        double out = d_p[c] * u_p[row * ch + c];
        for (int64_t n = 0; n < st; ++n) {
          const int64_t k = (row * ch + c) * st + n;
          double& state = h[static_cast<size_t>(c * st + n)];
          state = a_p[k] * state + b_p[k] * u_p[row * ch + c];
          out += c_p[row * st + n] * state;
        }
        if (!std::isfinite(out)) {
          throw NumericError("sequential scan produced a non-finite value at step " +
                             std::to_string(t));
        }
        y_p[row * ch + c] = out;
      }
    }
  }
  return y;
}

torch::Tensor scan_fused(const ScanInputs& raw) {
  validate(raw);
  const auto in = contiguous(raw);
  if (torch::GradMode::is_enabled() && any_requires_grad(in)) {
    return SelectiveScanFunction::apply(in.u, in.delta, in.A, in.B, in.C, in.D);
  }
  torch::NoGradGuard no_grad;
  return run_forward(in, nullptr);
}

SelectiveScanImpl::SelectiveScanImpl(int64_t channels, int64_t state_dim)
    : channels_(channels), state_dim_(state_dim) {
  if (channels < 1 || state_dim < 1) {
    throw ConfigError("selective scan needs channels >= 1 and state_dim >= 1");
  }
  delta_proj = register_module("delta_proj", torch::nn::Linear(channels, channels));
  bc_proj = register_module("bc_proj", torch::nn::Linear(channels, 2 * state_dim));

  // S4D-real: A = -(1..N) per channel.
  const auto ramp = torch::arange(1, state_dim + 1, torch::kFloat32);
  A_log = register_parameter("A_log", torch::log(ramp).repeat({channels, 1}));
  D = register_parameter("D", torch::ones({channels}));

  // Initial step sizes log-uniform in [1e-3, 1e-1], stored through the
  // inverse softplus in the delta bias.
  torch::NoGradGuard no_grad;
  const double dt_min = 1e-3;
  const double dt_max = 1e-1;
  const auto dt = torch::exp(torch::rand({channels}) * (std::log(dt_max) - std::log(dt_min)) +
                             std::log(dt_min));
  delta_proj->bias.copy_(dt + torch::log(-torch::expm1(-dt)));
  const double bound = 1.0 / std::sqrt(static_cast<double>(channels));
  delta_proj->weight.uniform_(-bound, bound);
}

torch::Tensor SelectiveScanImpl::state_matrix() const { return -torch::exp(A_log); }

ScanInputs SelectiveScanImpl::project(const torch::Tensor& x) const {
  if (x.dim() != 3 || x.size(2) != channels_) {
    throw ShapeError("selective scan expects (batch, L, " + std::to_string(channels_) +
                     "), got " + shape_string(x.sizes().vec()));
  }
  const auto delta = torch::softplus(torch::linear(x, delta_proj->weight, delta_proj->bias));
  const auto bc = torch::linear(x, bc_proj->weight, bc_proj->bias);
  return {x, delta, state_matrix(), bc.narrow(-1, 0, state_dim_),
          bc.narrow(-1, state_dim_, state_dim_), D};
}

torch::Tensor SelectiveScanImpl::forward(const torch::Tensor& x) { return scan_fused(project(x)); }

torch::Tensor selective_scan(const torch::Tensor& x, SelectiveScanImpl& params) {
  return params.forward(x);
}

torch::Tensor selective_scan_sequential(const torch::Tensor& x, const SelectiveScanImpl& params) {
  if (x.dim() != 3 || x.size(2) != params.channels()) {
    throw ShapeError("selective scan expects (batch, L, " + std::to_string(params.channels()) +
                     "), got " + shape_string(x.sizes().vec()));
  }
  torch::NoGradGuard no_grad;
  const auto f64 = [](const torch::Tensor& t) { return t.detach().to(torch::kFloat64); };
  const auto xd = f64(x);
  const int64_t n = params.state_dim();
  const auto delta = torch::softplus(torch::matmul(xd, f64(params.delta_proj->weight).t()) +
                                     f64(params.delta_proj->bias));
  const auto bc = torch::matmul(xd, f64(params.bc_proj->weight).t()) + f64(params.bc_proj->bias);
  const ScanInputs in{xd,
                      delta,
                      -torch::exp(f64(params.A_log)),
                      bc.narrow(-1, 0, n).contiguous(),
                      bc.narrow(-1, n, n).contiguous(),
                      f64(params.D)};
  return scan_reference(in);
}

}  // namespace skinmamba::scan
