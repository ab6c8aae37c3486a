#include "c2vae/structure.hpp"

#include "c2vae/common.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace c2vae::model {

torch::Tensor scm_forward(const torch::Tensor& adjacency, const torch::Tensor& epsilon)
{
    TORCH_CHECK(adjacency.dim() == 2 && adjacency.size(0) == adjacency.size(1), "adjacency must be square");
    TORCH_CHECK(epsilon.dim() >= 2 && epsilon.size(-2) == adjacency.size(0),
                "epsilon must be (..., n, d) with n = ", adjacency.size(0));
    const auto n = adjacency.size(0);
    const auto system = torch::eye(n, adjacency.options()) - adjacency.transpose(0, 1);
    const double det = torch::linalg_det(system.detach()).item<double>();
    if (!std::isfinite(det) || std::abs(det) < 1e-12) {
        throw NumericError("scm_forward: I - A^T is singular (|det| = " + std::to_string(std::abs(det)) + ")");
    }
    // one factorisation, every batch element and latent dimension as a column
    auto moved = epsilon.movedim(-2, 0);
    const auto moved_sizes = moved.sizes().vec();
    auto rhs = moved.reshape({n, -1});
    auto solved = torch::linalg_solve(system, rhs);
    return solved.reshape(moved_sizes).movedim(0, -2);
}

torch::Tensor learnable_entries(int64_t n, int64_t m, torch::TensorOptions options)
{
    auto rows = torch::arange(n, torch::kLong).unsqueeze(1);
    auto cols = torch::arange(m, torch::kLong).unsqueeze(0);
    return (rows > cols).to(torch::typeMetaToScalarType(options.dtype()));
}

torch::Tensor diagonal_entries(int64_t n, int64_t m, torch::TensorOptions options)
{
    auto rows = torch::arange(n, torch::kLong).unsqueeze(1);
    auto cols = torch::arange(m, torch::kLong).unsqueeze(0);
    return (rows == cols).to(torch::typeMetaToScalarType(options.dtype()));
}

torch::Tensor draw_mask_noise(const torch::Tensor& logits, torch::Generator& gen)
{
    // U ~ (0,1) → log U − log(1 − U) is the difference of two Gumbel variables.
    auto u = torch::rand(logits.sizes(), gen, logits.options().requires_grad(false));
    u = u.clamp(1e-7, 1.0 - 1e-7);
    return torch::log(u) - torch::log1p(-u);
}

torch::Tensor sample_mask(const torch::Tensor& logits, double temperature, bool hard, const torch::Tensor& noise)
{
    TORCH_CHECK(temperature > 0.0, "temperature must be positive");
    TORCH_CHECK(logits.dim() == 2, "mask logits must be n x m");
    const auto n = logits.size(0);
    const auto m = logits.size(1);
    const auto opts = logits.options().requires_grad(false);
    const auto learn = learnable_entries(n, m, opts);
    const auto diag = diagonal_entries(n, m, opts);
    auto relaxed = torch::sigmoid((logits + noise) / temperature);
    if (hard) {
        const auto rounded = (relaxed > 0.5).to(relaxed.dtype());
        relaxed = rounded + (relaxed - relaxed.detach());
    }
    return relaxed * learn + diag;
}

torch::Tensor sample_mask(const torch::Tensor& logits, double temperature, bool hard, torch::Generator& gen)
{
    return sample_mask(logits, temperature, hard, draw_mask_noise(logits, gen));
}

torch::Tensor hard_mask(const torch::Tensor& logits)
{
    const auto n = logits.size(0);
    const auto m = logits.size(1);
    const auto opts = logits.options().requires_grad(false);
    const auto on = (logits.detach() > 0.0).to(logits.dtype());
    return on * learnable_entries(n, m, opts) + diagonal_entries(n, m, opts);
}

std::vector<int64_t> correlated_set(const torch::Tensor& mask, int64_t j)
{
    if (j < 0 || j >= mask.size(1)) {
        throw std::out_of_range("concept index " + std::to_string(j) + " out of range");
    }
    auto column = mask.detach().to(torch::kCPU, torch::kFloat64).select(1, j).contiguous();
    const auto* data = column.data_ptr<double>();
    std::vector<int64_t> out;
    for (int64_t i = 0; i < column.size(0); ++i) {
        if (data[i] > 0.5) {
            out.push_back(i);
        }
    }
    return out;
}

bool concepts_correlated(const torch::Tensor& mask, int64_t j1, int64_t j2)
{
    const auto a = correlated_set(mask, j1);
    const auto b = correlated_set(mask, j2);
    for (const auto i : a) {
        for (const auto k : b) {
            if (i == k) {
                return true;
            }
        }
    }
    return false;
}

torch::Tensor factor_readout(const torch::Tensor& w, const torch::Tensor& readout)
{
    return (w * readout).sum(-1);
}

torch::Tensor mask_pool(const torch::Tensor& w, const torch::Tensor& mask, const torch::Tensor& readout,
                        const torch::Tensor& pool_logits)
{
    const auto r = factor_readout(w, readout);
    const auto weights = torch::nn::functional::softplus(pool_logits) * mask;
    return torch::matmul(r, weights);
}

} // namespace c2vae::model
