#ifndef C2VAE_STRUCTURE_HPP
#define C2VAE_STRUCTURE_HPP

// Causal layer and correlation layer primitives: the linear SCM solve, the
// Gumbel-relaxed lower-triangular mask and mask pooling.

#include <torch/torch.h>

#include <vector>

namespace c2vae::model {

/// Solves w = Aᵀw + ε, i.e. w = (I − Aᵀ)⁻¹ε, independently for every latent
/// dimension. `adjacency` is n×n with A(i, j) the weight of edge i→j;
/// `epsilon` is (..., n, d). Differentiable in both arguments.
/// Throws NumericError if |det(I − Aᵀ)| < 1e-12.
torch::Tensor scm_forward(const torch::Tensor& adjacency, const torch::Tensor& epsilon);

/// Positions i > j (strictly below the diagonal): the only learnable entries.
torch::Tensor learnable_entries(int64_t n, int64_t m, torch::TensorOptions options = {});
/// Positions i == j < m: fixed to one.
torch::Tensor diagonal_entries(int64_t n, int64_t m, torch::TensorOptions options = {});

/// Logistic noise (difference of two Gumbel draws), shaped like `logits`.
torch::Tensor draw_mask_noise(const torch::Tensor& logits, torch::Generator& gen);

/// Binary Gumbel-Softmax relaxation of the mask with structural zeros above
/// the diagonal and structural ones on it. With `hard`, the forward value is
/// rounded while gradients flow through the relaxed value (straight-through).
torch::Tensor sample_mask(const torch::Tensor& logits, double temperature, bool hard, const torch::Tensor& noise);
torch::Tensor sample_mask(const torch::Tensor& logits, double temperature, bool hard, torch::Generator& gen);

/// Deterministic read-out used at evaluation: logit > 0 on learnable entries.
torch::Tensor hard_mask(const torch::Tensor& logits);

/// S_j = {i : M(i, j) = 1}. Throws std::out_of_range for a bad column.
std::vector<int64_t> correlated_set(const torch::Tensor& mask, int64_t j);

/// Two concepts are correlated when some factor feeds both.
bool concepts_correlated(const torch::Tensor& mask, int64_t j1, int64_t j2);

/// r_i = ⟨u_i, w_i⟩ for w of shape (..., n, d) and read-out u of shape (n, d).
torch::Tensor factor_readout(const torch::Tensor& w, const torch::Tensor& readout);

/// w'_j = Σ_i softplus(β_ij) · M_ij · r_i. Returns (..., m).
torch::Tensor mask_pool(const torch::Tensor& w, const torch::Tensor& mask, const torch::Tensor& readout,
                        const torch::Tensor& pool_logits);

} // namespace c2vae::model

#endif // C2VAE_STRUCTURE_HPP
