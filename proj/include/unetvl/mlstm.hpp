#pragma once

#include <cstddef>
#include <vector>

#include "unetvl/tensor.hpp"

namespace uvl {

/// Recurrent state of one head: d x d matrix memory, normalizer, stabilizer.
/// C and n are held in stabilized form (scaled by exp(-m)).
struct MLSTMState {
  std::size_t d = 0;
  std::vector<double> C;  // row-major, C[i*d + j] accumulates v_i k_j
  std::vector<double> n;
  double m;  // -inf before the first step

  explicit MLSTMState(std::size_t head_dim);
  std::size_t size_bytes(DType dtype) const { return (C.size() + n.size() + 1) * dtype_size(dtype); }
};

/// Multi-head matrix-memory recurrence over N steps from a zero state.
///
/// q, k, v: [N, H*d] (head h owns columns h*d .. h*d+d-1); igate, fgate:
/// [N, H] gate preactivations. Per head and step:
///   m_t = max(f_t + m_{t-1}, i_t)
///   a = exp(f_t + m_{t-1} - m_t), b = exp(i_t - m_t)
///   C_t = a C_{t-1} + b v k^T,  n_t = a n_{t-1} + b k
///   h_t = C_t q / max(|n_t . q|, 1)
/// Returns [N, H*d]. Output gating is left to the caller. Throws
/// NumericError naming the step if the state turns non-finite.
Tensor mlstm_sequence(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& igate, const Tensor& fgate);

/// Same recurrence evaluated chunk by chunk: within a chunk all outputs are
/// read from the carried state plus a decay-weighted intra-chunk sum; the
/// state is carried between chunks. chunk_size 1 reproduces mlstm_sequence
/// bitwise. Backward recomputes the sequential trace.
Tensor mlstm_chunkwise(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& igate, const Tensor& fgate,
                       std::size_t chunk_size);

/// Final per-head states after a sequential scan (no graph is recorded).
std::vector<MLSTMState> mlstm_final_states(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& igate,
                                           const Tensor& fgate);

}  // namespace uvl
