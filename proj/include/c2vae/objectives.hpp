#ifndef C2VAE_OBJECTIVES_HPP
#define C2VAE_OBJECTIVES_HPP

#include "c2vae/concept_head.hpp"
#include "c2vae/model.hpp"

#include <torch/torch.h>

#include <string>
#include <utility>
#include <vector>

namespace c2vae::loss {

struct LossWeights {
    double rho1 = 1.0;
    double rho2 = 1.0;
    double lambda_dag = 1.0;
    double lambda_sparse = 0.1;
    double lambda_lip = 1.0;
    double sigma_x = 0.1;
    double sigma_y = 0.05;

    void validate() const;
};

/// Unweighted loss components plus the weighted total.
struct LossReport {
    double total = 0.0;
    double recon = 0.0;
    double concept_nll = 0.0;
    double kl_structured = 0.0;
    double kl_tc = 0.0;
    double dag_penalty = 0.0;
    double mask_l1 = 0.0;
    double lip_penalty = 0.0;

    static std::vector<std::string> csv_header();
    std::vector<double> csv_values() const;
};

/// Same fields as LossReport, kept as graph tensors.
struct LossTerms {
    torch::Tensor recon;
    torch::Tensor concept_nll;
    torch::Tensor kl_structured;
    torch::Tensor kl_tc;
    torch::Tensor dag_penalty;
    torch::Tensor mask_l1;
    torch::Tensor lip_penalty;

    torch::Tensor total(const LossWeights& w) const;
    LossReport report(const LossWeights& w) const;
};

/// Σ_pixels (x − x̂)² / (2σ²) per image, averaged over the batch. The Gaussian
/// normalising constant is dropped.
torch::Tensor recon_nll(const torch::Tensor& image, const torch::Tensor& reconstruction, double sigma_x);

/// (Σ_j (y_j − f_c(w'_j))² / (2σ_y²) averaged over the batch,  ‖Lip_j − 1‖₂ over heads).
std::pair<torch::Tensor, torch::Tensor> concept_nll_and_lip(const torch::Tensor& y, const torch::Tensor& w_prime,
                                                            const model::HeadTensors& heads,
                                                            const torch::Tensor& probe_grid, double sigma_y);

/// First term: KL(q(ε|x)q(z|x) ‖ N(0,I)⊗N(0,I)), summed over coordinates and
/// averaged over the batch. The SCM prior on w is the push-forward of the
/// ε prior, so the divergence is measured in ε-space.
torch::Tensor kl_structured(const model::LatentBundle& latents);

/// Second term: minibatch estimate of KL(q(w, z) ‖ q(w) q(z)), the dependence
/// between the causal block and the free block of the aggregate posterior.
/// The aggregate posterior is the uniform mixture of the batch posteriors;
/// the block mutual information is invariant to the SCM bijection, so it is
/// evaluated on ε. Clamped at zero.
torch::Tensor kl_dependence(const model::LatentBundle& latents);

std::pair<torch::Tensor, torch::Tensor> kl_terms(const model::LatentBundle& latents);

/// Matrix exponential by scaling and squaring with a truncated power series.
torch::Tensor matrix_exp_series(const torch::Tensor& matrix, int terms = 30);

/// h(A) = tr(exp(A∘A)) − n; zero exactly when the support of A is acyclic.
torch::Tensor dag_penalty(const torch::Tensor& adjacency);

/// Sum of the learnable (strictly lower) entries of a relaxed mask.
torch::Tensor mask_l1(const torch::Tensor& relaxed_mask);

struct LossInputs {
    torch::Tensor images;
    torch::Tensor concepts;
    model::ForwardOutput forward;
    torch::Tensor adjacency;
    torch::Tensor mask;  ///< mask used in the pass (relaxed or hard)
    model::HeadTensors heads;
    torch::Tensor probe_grid;
    bool structure_pinned = false;  ///< skips dag and sparsity terms
};

LossTerms compute_terms(const LossInputs& inputs, const LossWeights& weights);

} // namespace c2vae::loss

#endif // C2VAE_OBJECTIVES_HPP
