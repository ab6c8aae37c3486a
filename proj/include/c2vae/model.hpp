#ifndef C2VAE_MODEL_HPP
#define C2VAE_MODEL_HPP

#include "c2vae/concept_head.hpp"

#include <torch/torch.h>

#include <optional>
#include <vector>

namespace c2vae::model {

/// Latent layout: n causal factors w, k free factors z, each d-dimensional,
/// and m supervised concepts.
struct LatentSpec {
    int64_t n = 5;
    int64_t k = 3;
    int64_t d = 4;
    int64_t m = 5;

    void validate() const;
    int64_t total_dim() const { return (n + k) * d; }
    bool operator==(const LatentSpec&) const = default;
};

struct ModelConfig {
    LatentSpec spec;
    int64_t image_size = 32;
    int64_t hidden_width = 64;
    int64_t head_hidden = 8;

    void validate() const;
};

/// Per-example latent state. Shapes carry a leading batch dimension B.
struct LatentBundle {
    torch::Tensor epsilon_mean;    ///< (B, n, d)
    torch::Tensor epsilon_logvar;  ///< (B, n, d)
    torch::Tensor z_mean;          ///< (B, k, d)
    torch::Tensor z_logvar;        ///< (B, k, d)
    torch::Tensor epsilon;         ///< (B, n, d)
    torch::Tensor z;               ///< (B, k, d)
    torch::Tensor w;               ///< (B, n, d)
    torch::Tensor w_prime;         ///< (B, m)
    torch::Tensor mask;            ///< (n, m)
};

/// All stochastic inputs of one forward pass, drawn up front so that a pass is
/// a deterministic function of parameters and noise.
struct ForwardNoise {
    torch::Tensor epsilon;  ///< standard normal, (B, n, d)
    torch::Tensor z;        ///< standard normal, (B, k, d)
    torch::Tensor mask;     ///< logistic, (n, m)
};

struct ForwardOptions {
    bool train = false;         ///< sample latents and a relaxed mask
    double temperature = 1.0;
    bool hard = false;          ///< straight-through rounding of the sampled mask
};

struct ForwardOutput {
    LatentBundle latents;
    torch::Tensor concepts;        ///< predicted y, (B, m)
    torch::Tensor reconstruction;  ///< (B, 1, H, W)
};

class C2VaeImpl : public torch::nn::Module {
public:
    explicit C2VaeImpl(const ModelConfig& config);

    const ModelConfig& config() const { return config_; }
    const LatentSpec& spec() const { return config_.spec; }

    ForwardNoise draw_noise(int64_t batch, torch::Generator& gen) const;

    /// Encoder posteriors for ε and z; then ε/z sampling (train) or means (eval),
    /// the SCM solve, the mask and the pooled bridge variables.
    LatentBundle encode(const torch::Tensor& images, const ForwardOptions& options,
                        const ForwardNoise* noise = nullptr) const;

    /// Decoder: (B, n, d) and (B, k, d) latents to images in [0, 1].
    torch::Tensor decode(const torch::Tensor& w, const torch::Tensor& z) const;

    ForwardOutput forward(const torch::Tensor& images, const ForwardOptions& options,
                          const ForwardNoise* noise = nullptr) const;

    /// Adjacency with a structurally zero diagonal.
    torch::Tensor adjacency() const;
    /// Mask used by this forward mode (relaxed/hard sample, hard read-out, or fixed).
    torch::Tensor current_mask(const ForwardOptions& options, const ForwardNoise* noise) const;
    /// Deterministic evaluation mask.
    torch::Tensor eval_mask() const;
    /// σ(logits) restricted to the structure; the fixed mask when pinned.
    torch::Tensor mask_probabilities() const;

    torch::Tensor pool(const torch::Tensor& w, const torch::Tensor& mask) const;
    torch::Tensor predict_concepts(const torch::Tensor& w_prime) const;
    torch::Tensor readout_values(const torch::Tensor& w) const;

    HeadTensors heads() const;

    /// Pins A and M to the given structure (n×n adjacency, n×m mask). Pinned
    /// tensors stop requiring gradients and are excluded from optimisation.
    void pin_structure(const torch::Tensor& adjacency, const torch::Tensor& mask);
    bool structure_pinned() const { return pinned_; }

    /// Parameters that the optimiser updates (excludes pinned structure).
    std::vector<torch::Tensor> trainable_parameters() const;

    /// Named parameter groups used by gradient checks.
    std::vector<std::pair<std::string, std::vector<torch::Tensor>>> parameter_groups() const;

    torch::Tensor adjacency_raw;
    torch::Tensor mask_logits;
    torch::Tensor pool_logits;   ///< β, (n, m)
    torch::Tensor readout;       ///< u, (n, d)
    torch::Tensor head_slope_raw;
    torch::Tensor head_bias;
    torch::Tensor head_amp;
    torch::Tensor head_gain;
    torch::Tensor head_offset;
    torch::Tensor fixed_mask;    ///< buffer; defined (non-empty) only when pinned

private:
    ModelConfig config_;
    bool pinned_ = false;
    // forward() on torch submodules is non-const
    mutable torch::nn::Sequential encoder_{nullptr};
    mutable torch::nn::Linear encoder_head_{nullptr};
    mutable torch::nn::Linear decoder_input_{nullptr};
    mutable torch::nn::Sequential decoder_{nullptr};
    int64_t base_size_ = 2;
};

TORCH_MODULE(C2Vae);

/// Re-initialises every parameter from a seed (deterministic construction).
C2Vae make_model(const ModelConfig& config, uint64_t seed, torch::Dtype dtype = torch::kFloat32);

} // namespace c2vae::model

#endif // C2VAE_MODEL_HPP
