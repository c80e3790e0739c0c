#pragma once

#include <torch/torch.h>

#include <cstdint>

namespace skinmamba::scan {

// Discretized state transition for every (step, channel, state) triple.
struct Discretized {
  torch::Tensor a_bar;  // exp(delta * A)
  torch::Tensor b_bar;  // delta * B (Euler)
};

enum class StepCheck {
  Strict,     // delta must be > 0
  AllowZero,  // delta >= 0; only for probing the delta -> 0 limit
};

// delta: (..., L, C), A: (C, N), B: (..., L, N). Outputs are (..., L, C, N).
Discretized discretize(const torch::Tensor& delta, const torch::Tensor& A,
                       const torch::Tensor& B,
                       StepCheck check = StepCheck::Strict);

// Already-projected operands of the recurrence
//   h_t = exp(delta_t A) h_{t-1} + delta_t B_t u_t,   y_t = C_t . h_t + D u_t
// with h_0 = 0.
struct ScanInputs {
  torch::Tensor u;      // (batch, L, C)
  torch::Tensor delta;  // (batch, L, C), strictly positive
  torch::Tensor A;      // (C, N)
  torch::Tensor B;      // (batch, L, N)
  torch::Tensor C;      // (batch, L, N)
  torch::Tensor D;      // (C)
};

// Step-by-step evaluation in double precision. No autograd; used as ground
// truth. Returns a double tensor of shape (batch, L, C).
torch::Tensor scan_reference(const ScanInputs& in);

// Chunked production kernel in the inputs' dtype (float or double), with a
// hand-written reverse-time backward pass registered with autograd.
torch::Tensor scan_fused(const ScanInputs& in);

// Learnable parameters of one selective scan: the state matrix in log form,
// the skip gain, and the input-dependent projections for delta, B and C.
class SelectiveScanImpl : public torch::nn::Module {
 public:
  SelectiveScanImpl(int64_t channels, int64_t state_dim = 16);

  // x: (batch, L, channels) -> (batch, L, channels)
  torch::Tensor forward(const torch::Tensor& x);

  // Projects x into the operands of the recurrence.
  ScanInputs project(const torch::Tensor& x) const;

  // A = -exp(A_log), strictly negative.
  torch::Tensor state_matrix() const;

  int64_t channels() const { return channels_; }
  int64_t state_dim() const { return state_dim_; }

  torch::Tensor A_log;  // (C, N)
  torch::Tensor D;      // (C)
  torch::nn::Linear delta_proj{nullptr};  // C -> C, bias is the delta bias
  torch::nn::Linear bc_proj{nullptr};     // C -> 2N

 private:
  int64_t channels_;
  int64_t state_dim_;
};
TORCH_MODULE(SelectiveScan);

// Production path: project + scan_fused.
torch::Tensor selective_scan(const torch::Tensor& x, SelectiveScanImpl& params);

// Oracle path: parameters are copied to double, projected with plain matmuls
// and run through scan_reference.
torch::Tensor selective_scan_sequential(const torch::Tensor& x,
                                        const SelectiveScanImpl& params);

}  // namespace skinmamba::scan
