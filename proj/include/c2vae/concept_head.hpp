#ifndef C2VAE_CONCEPT_HEAD_HPP
#define C2VAE_CONCEPT_HEAD_HPP

#include <torch/torch.h>

#include <vector>

namespace c2vae::model {

/// Raw parameters of m monotone scalar heads, each
///     g_j(t) = softplus(slope_j)·t + bias_j + Σ_h softplus(amp_jh)·tanh(softplus(gain_jh)·t + offset_jh)
/// followed by the logistic map y = σ(g(t)). Every slope factor is positive,
/// so g_j is strictly increasing and maps ℝ onto ℝ.
struct HeadTensors {
    torch::Tensor slope;   ///< (m)
    torch::Tensor bias;    ///< (m)
    torch::Tensor amp;     ///< (m, H)
    torch::Tensor gain;    ///< (m, H)
    torch::Tensor offset;  ///< (m, H)

    int64_t concepts() const { return slope.size(0); }
    int64_t hidden() const { return amp.dim() == 2 ? amp.size(1) : 0; }
};

/// g evaluated per concept; t has shape (..., m).
torch::Tensor head_logit(const HeadTensors& heads, const torch::Tensor& t);
/// dg/dt per concept, analytic; t has shape (..., m).
torch::Tensor head_slope(const HeadTensors& heads, const torch::Tensor& t);
/// y = σ(g(w')), shape (..., m).
torch::Tensor concept_predict(const HeadTensors& heads, const torch::Tensor& w_prime);

/// 512 points evenly covering [−6, 6].
torch::Tensor default_probe_grid(torch::TensorOptions options = {});

/// max_t |g_j'(t)| over the grid, for every concept at once: shape (m).
torch::Tensor lipschitz_estimates(const HeadTensors& heads, const torch::Tensor& grid);
double lipschitz_estimate(const HeadTensors& heads, int64_t j, const torch::Tensor& grid);

/// Plain double view of one head, used by bisection and test oracles.
struct MonotoneHead {
    double slope = 1.0;
    double bias = 0.0;
    std::vector<double> amp;
    std::vector<double> gain;
    std::vector<double> offset;

    double logit(double t) const;
    double derivative(double t) const;
    double predict(double t) const;
};

/// Extracts head j with the positivity transforms applied.
MonotoneHead extract_head(const HeadTensors& heads, int64_t j);

/// Builds raw tensors whose transformed values equal the given heads. Amplitudes,
/// gains and the slope must be positive. All heads must share one hidden width.
HeadTensors make_heads(const std::vector<MonotoneHead>& heads, torch::Dtype dtype = torch::kFloat64);

double softplus(double x);
/// Inverse of softplus for y > 0.
double softplus_inverse(double y);

} // namespace c2vae::model

#endif // C2VAE_CONCEPT_HEAD_HPP
