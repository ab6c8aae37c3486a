#include "c2vae/objectives.hpp"

#include "c2vae/common.hpp"
#include "c2vae/structure.hpp"

#include <cmath>

namespace c2vae::loss {

void LossWeights::validate() const
{
    for (const double v : {rho1, rho2, lambda_dag, lambda_sparse, lambda_lip}) {
        if (!(v >= 0.0) || !std::isfinite(v)) {
            throw UsageError("loss weights must be finite and non-negative");
        }
    }
    if (!(sigma_x > 0.0) || !(sigma_y > 0.0)) {
        throw UsageError("sigma_x and sigma_y must be positive");
    }
}

std::vector<std::string> LossReport::csv_header()
{
    return {"total", "recon", "concept_nll", "kl_structured", "kl_tc", "dag_penalty", "mask_l1", "lip_penalty"};
}

std::vector<double> LossReport::csv_values() const
{
    return {total, recon, concept_nll, kl_structured, kl_tc, dag_penalty, mask_l1, lip_penalty};
}

torch::Tensor LossTerms::total(const LossWeights& w) const
{
    return recon + concept_nll + w.rho1 * kl_structured + w.rho2 * kl_tc + w.lambda_dag * dag_penalty +
           w.lambda_sparse * mask_l1 + w.lambda_lip * lip_penalty;
}

LossReport LossTerms::report(const LossWeights& w) const
{
    auto v = [](const torch::Tensor& t) { return t.detach().to(torch::kFloat64).item<double>(); };
    LossReport r;
    r.recon = v(recon);
    r.concept_nll = v(concept_nll);
    r.kl_structured = v(kl_structured);
    r.kl_tc = v(kl_tc);
    r.dag_penalty = v(dag_penalty);
    r.mask_l1 = v(mask_l1);
    r.lip_penalty = v(lip_penalty);
    r.total = r.recon + r.concept_nll + w.rho1 * r.kl_structured + w.rho2 * r.kl_tc + w.lambda_dag * r.dag_penalty +
              w.lambda_sparse * r.mask_l1 + w.lambda_lip * r.lip_penalty;
    return r;
}

torch::Tensor recon_nll(const torch::Tensor& image, const torch::Tensor& reconstruction, double sigma_x)
{
    TORCH_CHECK(image.sizes() == reconstruction.sizes(), "recon_nll: shape mismatch ", image.sizes(), " vs ",
                reconstruction.sizes());
    const auto diff = image - reconstruction;
    const auto per_image = (diff * diff).flatten(1).sum(1);
    return per_image.mean() / (2.0 * sigma_x * sigma_x);
}

std::pair<torch::Tensor, torch::Tensor> concept_nll_and_lip(const torch::Tensor& y, const torch::Tensor& w_prime,
                                                            const model::HeadTensors& heads,
                                                            const torch::Tensor& probe_grid, double sigma_y)
{
    const auto pred = model::concept_predict(heads, w_prime);
    TORCH_CHECK(pred.sizes() == y.sizes(), "concept shape mismatch");
    const auto diff = y - pred;
    const auto nll = (diff * diff).sum(-1).mean() / (2.0 * sigma_y * sigma_y);
    const auto lip = model::lipschitz_estimates(heads, probe_grid);
    const auto penalty = torch::linalg_vector_norm(lip - 1.0, 2, c10::nullopt, false, c10::nullopt);
    return {nll, penalty};
}

torch::Tensor kl_structured(const model::LatentBundle& latents)
{
    auto kl = [](const torch::Tensor& mean, const torch::Tensor& logvar) {
        return 0.5 * (mean * mean + torch::exp(logvar) - logvar - 1.0).flatten(1).sum(1);
    };
    auto per_sample = kl(latents.epsilon_mean, latents.epsilon_logvar);
    if (latents.z_mean.numel() > 0) {
        per_sample = per_sample + kl(latents.z_mean, latents.z_logvar);
    }
    return per_sample.mean();
}

namespace {

/// log N(sample_i; mean_j, exp(logvar_j)) summed over coordinates: (B, B).
torch::Tensor pairwise_log_density(const torch::Tensor& sample, const torch::Tensor& mean,
                                   const torch::Tensor& logvar)
{
    const auto s = sample.flatten(1).unsqueeze(1);   // (B, 1, D)
    const auto mu = mean.flatten(1).unsqueeze(0);    // (1, B, D)
    const auto lv = logvar.flatten(1).unsqueeze(0);  // (1, B, D)
    const auto diff = s - mu;
    const double log2pi = std::log(2.0 * M_PI);
    return (-0.5 * (diff * diff * torch::exp(-lv) + lv + log2pi)).sum(-1);
}

} // namespace

torch::Tensor kl_dependence(const model::LatentBundle& latents)
{
    const auto batch = latents.epsilon.size(0);
    if (latents.z.numel() == 0 || batch < 2) {
        return torch::zeros({}, latents.epsilon.options());
    }
    const auto a = pairwise_log_density(latents.epsilon, latents.epsilon_mean, latents.epsilon_logvar);
    const auto b = pairwise_log_density(latents.z, latents.z_mean, latents.z_logvar);
    const auto log_joint = torch::logsumexp(a + b, 1);
    const auto log_eps = torch::logsumexp(a, 1);
    const auto log_z = torch::logsumexp(b, 1);
    const auto estimate = (log_joint - log_eps - log_z).mean() + std::log(static_cast<double>(batch));
    return torch::clamp_min(estimate, 0.0);
}

std::pair<torch::Tensor, torch::Tensor> kl_terms(const model::LatentBundle& latents)
{
    const auto finite = [](const torch::Tensor& t) {
        return t.numel() == 0 || torch::isfinite(t.detach()).all().item<bool>();
    };
    if (!finite(latents.epsilon_mean) || !finite(latents.epsilon_logvar) || !finite(latents.z_mean) ||
        !finite(latents.z_logvar)) {
        throw NumericError("kl_terms: non-finite posterior parameters");
    }
    return {kl_structured(latents), kl_dependence(latents)};
}

torch::Tensor matrix_exp_series(const torch::Tensor& matrix, int terms)
{
    TORCH_CHECK(matrix.dim() == 2 && matrix.size(0) == matrix.size(1), "matrix_exp_series needs a square matrix");
    const auto n = matrix.size(0);
    const double norm = matrix.detach().abs().sum(0).max().item<double>();
    int squarings = 0;
    if (norm > 0.5) {
        squarings = static_cast<int>(std::ceil(std::log2(norm / 0.5)));
    }
    const auto scaled = matrix / std::ldexp(1.0, squarings);
    auto term = torch::eye(n, matrix.options());
    auto sum = term;
    for (int k = 1; k < terms; ++k) {
        term = torch::matmul(term, scaled) / static_cast<double>(k);
        sum = sum + term;
    }
    for (int s = 0; s < squarings; ++s) {
        sum = torch::matmul(sum, sum);
    }
    return sum;
}

torch::Tensor dag_penalty(const torch::Tensor& adjacency)
{
    const auto n = adjacency.size(0);
    return torch::trace(matrix_exp_series(adjacency * adjacency)) - static_cast<double>(n);
}

torch::Tensor mask_l1(const torch::Tensor& relaxed_mask)
{
    const auto learn = model::learnable_entries(relaxed_mask.size(0), relaxed_mask.size(1),
                                                relaxed_mask.options().requires_grad(false));
    return (relaxed_mask * learn).sum();
}

LossTerms compute_terms(const LossInputs& in, const LossWeights& weights)
{
    LossTerms t;
    const auto& fwd = in.forward;
    t.recon = recon_nll(in.images, fwd.reconstruction, weights.sigma_x);
    std::tie(t.concept_nll, t.lip_penalty) =
        concept_nll_and_lip(in.concepts, fwd.latents.w_prime, in.heads, in.probe_grid, weights.sigma_y);
    std::tie(t.kl_structured, t.kl_tc) = kl_terms(fwd.latents);
    if (in.structure_pinned) {
        t.dag_penalty = torch::zeros({}, t.recon.options());
        t.mask_l1 = torch::zeros({}, t.recon.options());
    } else {
        t.dag_penalty = dag_penalty(in.adjacency);
        t.mask_l1 = mask_l1(in.mask);
    }
    return t;
}

} // namespace c2vae::loss
