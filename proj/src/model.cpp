#include "c2vae/model.hpp"

#include "c2vae/common.hpp"
#include "c2vae/structure.hpp"

#include <cmath>
#include <string>

namespace c2vae::model {

namespace nn = torch::nn;

void LatentSpec::validate() const
{
    if (m < 1 || n < m || d < 1 || k < 0) {
        throw UsageError("latent spec requires n >= m >= 1, d >= 1, k >= 0 (got n=" + std::to_string(n) +
                         ", k=" + std::to_string(k) + ", d=" + std::to_string(d) + ", m=" + std::to_string(m) + ")");
    }
}

void ModelConfig::validate() const
{
    spec.validate();
    if (image_size != 32 && image_size != 64) {
        throw UsageError("image_size must be 32 or 64");
    }
    if (hidden_width < 1 || head_hidden < 0) {
        throw UsageError("hidden_width must be positive and head_hidden non-negative");
    }
}

namespace {

nn::Conv2dOptions down(int64_t in, int64_t out)
{
    return nn::Conv2dOptions(in, out, 4).stride(2).padding(1);
}

nn::ConvTranspose2dOptions up(int64_t in, int64_t out)
{
    return nn::ConvTranspose2dOptions(in, out, 4).stride(2).padding(1);
}

} // namespace

C2VaeImpl::C2VaeImpl(const ModelConfig& config) : config_(config)
{
    config_.validate();
    const auto& s = config_.spec;
    const auto width = config_.hidden_width;
    base_size_ = config_.image_size / 16;
    const auto flat = width * base_size_ * base_size_;

    encoder_ = register_module("encoder", nn::Sequential(nn::Conv2d(down(1, width)), nn::SiLU(),
                                                         nn::Conv2d(down(width, width)), nn::SiLU(),
                                                         nn::Conv2d(down(width, width)), nn::SiLU(),
                                                         nn::Conv2d(down(width, width)), nn::SiLU()));
    encoder_head_ = register_module("encoder_head", nn::Linear(flat, 2 * s.total_dim()));
    decoder_input_ = register_module("decoder_input", nn::Linear(s.total_dim(), flat));
    decoder_ = register_module("decoder", nn::Sequential(nn::ConvTranspose2d(up(width, width)), nn::SiLU(),
                                                         nn::ConvTranspose2d(up(width, width)), nn::SiLU(),
                                                         nn::ConvTranspose2d(up(width, width)), nn::SiLU(),
                                                         nn::ConvTranspose2d(up(width, 1))));

    const auto h = std::max<int64_t>(config_.head_hidden, 0);
    adjacency_raw = register_parameter("adjacency", torch::zeros({s.n, s.n}));
    mask_logits = register_parameter("mask_logits", torch::zeros({s.n, s.m}));
    pool_logits = register_parameter("pool_logits", torch::full({s.n, s.m}, softplus_inverse(1.0)));
    readout = register_parameter("readout", torch::full({s.n, s.d}, 1.0 / std::sqrt(static_cast<double>(s.d))));
    head_slope_raw = register_parameter("head_slope", torch::full({s.m}, softplus_inverse(1.0)));
    head_bias = register_parameter("head_bias", torch::zeros({s.m}));
    head_amp = register_parameter("head_amp", torch::full({s.m, h}, -3.0));
    head_gain = register_parameter("head_gain", torch::full({s.m, h}, softplus_inverse(1.0)));
    head_offset = register_parameter("head_offset", torch::zeros({s.m, h}));
    fixed_mask = register_buffer("fixed_mask", torch::zeros({s.n, s.m}));
}

ForwardNoise C2VaeImpl::draw_noise(int64_t batch, torch::Generator& gen) const
{
    const auto& s = config_.spec;
    const auto opts = mask_logits.options().requires_grad(false);
    ForwardNoise noise;
    noise.epsilon = torch::randn({batch, s.n, s.d}, gen, opts);
    noise.z = torch::randn({batch, s.k, s.d}, gen, opts);
    noise.mask = draw_mask_noise(mask_logits.detach(), gen);
    return noise;
}

torch::Tensor C2VaeImpl::adjacency() const
{
    const auto n = config_.spec.n;
    const auto off_diag = 1.0 - torch::eye(n, adjacency_raw.options().requires_grad(false));
    return adjacency_raw * off_diag;
}

torch::Tensor C2VaeImpl::eval_mask() const
{
    return pinned_ ? fixed_mask : hard_mask(mask_logits);
}

torch::Tensor C2VaeImpl::mask_probabilities() const
{
    if (pinned_) {
        return fixed_mask;
    }
    const auto& s = config_.spec;
    const auto opts = mask_logits.options().requires_grad(false);
    return torch::sigmoid(mask_logits.detach()) * learnable_entries(s.n, s.m, opts) +
           diagonal_entries(s.n, s.m, opts);
}

torch::Tensor C2VaeImpl::current_mask(const ForwardOptions& options, const ForwardNoise* noise) const
{
    if (pinned_) {
        return fixed_mask;
    }
    if (!options.train) {
        return hard_mask(mask_logits);
    }
    TORCH_CHECK(noise != nullptr && noise->mask.defined(), "training forward pass needs mask noise");
    return sample_mask(mask_logits, options.temperature, options.hard, noise->mask);
}

torch::Tensor C2VaeImpl::pool(const torch::Tensor& w, const torch::Tensor& mask) const
{
    return mask_pool(w, mask, readout, pool_logits);
}

torch::Tensor C2VaeImpl::readout_values(const torch::Tensor& w) const
{
    return factor_readout(w, readout);
}

HeadTensors C2VaeImpl::heads() const
{
    return {head_slope_raw, head_bias, head_amp, head_gain, head_offset};
}

torch::Tensor C2VaeImpl::predict_concepts(const torch::Tensor& w_prime) const
{
    return concept_predict(heads(), w_prime);
}

LatentBundle C2VaeImpl::encode(const torch::Tensor& images, const ForwardOptions& options,
                               const ForwardNoise* noise) const
{
    const auto& s = config_.spec;
    TORCH_CHECK(images.dim() == 4 && images.size(1) == 1 && images.size(2) == config_.image_size &&
                    images.size(3) == config_.image_size,
                "expected images of shape (B, 1, ", config_.image_size, ", ", config_.image_size, "), got ",
                images.sizes());
    const auto batch = images.size(0);
    auto features = encoder_->forward(images).flatten(1);
    auto params = encoder_head_->forward(features);
    const auto nd = s.n * s.d;
    const auto kd = s.k * s.d;

    LatentBundle out;
    out.epsilon_mean = params.narrow(1, 0, nd).reshape({batch, s.n, s.d});
    out.epsilon_logvar = params.narrow(1, nd, nd).reshape({batch, s.n, s.d});
    out.z_mean = params.narrow(1, 2 * nd, kd).reshape({batch, s.k, s.d});
    out.z_logvar = params.narrow(1, 2 * nd + kd, kd).reshape({batch, s.k, s.d});
    if (options.train) {
        TORCH_CHECK(noise != nullptr, "training forward pass needs noise");
        out.epsilon = out.epsilon_mean + torch::exp(0.5 * out.epsilon_logvar) * noise->epsilon;
        out.z = out.z_mean + torch::exp(0.5 * out.z_logvar) * noise->z;
    } else {
        out.epsilon = out.epsilon_mean;
        out.z = out.z_mean;
    }
    out.w = scm_forward(adjacency(), out.epsilon);
    out.mask = current_mask(options, noise);
    out.w_prime = pool(out.w, out.mask);
    return out;
}

torch::Tensor C2VaeImpl::decode(const torch::Tensor& w, const torch::Tensor& z) const
{
    const auto& s = config_.spec;
    TORCH_CHECK(w.dim() == 3 && w.size(1) == s.n && w.size(2) == s.d, "w must be (B, n, d)");
    TORCH_CHECK(z.dim() == 3 && z.size(1) == s.k && z.size(2) == s.d && z.size(0) == w.size(0),
                "z must be (B, k, d)");
    const auto batch = w.size(0);
    auto latent = torch::cat({w.reshape({batch, s.n * s.d}), z.reshape({batch, s.k * s.d})}, 1);
    auto h = torch::silu(decoder_input_->forward(latent));
    h = h.reshape({batch, config_.hidden_width, base_size_, base_size_});
    return torch::sigmoid(decoder_->forward(h));
}

ForwardOutput C2VaeImpl::forward(const torch::Tensor& images, const ForwardOptions& options,
                                 const ForwardNoise* noise) const
{
    ForwardOutput out;
    out.latents = encode(images, options, noise);
    out.concepts = predict_concepts(out.latents.w_prime);
    out.reconstruction = decode(out.latents.w, out.latents.z);
    return out;
}

void C2VaeImpl::pin_structure(const torch::Tensor& adjacency_value, const torch::Tensor& mask_value)
{
    const auto& s = config_.spec;
    TORCH_CHECK(adjacency_value.sizes() == torch::IntArrayRef({s.n, s.n}), "pinned adjacency must be n x n");
    TORCH_CHECK(mask_value.sizes() == torch::IntArrayRef({s.n, s.m}), "pinned mask must be n x m");
    torch::NoGradGuard guard;
    adjacency_raw.copy_(adjacency_value.to(adjacency_raw.dtype()));
    adjacency_raw.fill_diagonal_(0.0);
    adjacency_raw.set_requires_grad(false);
    mask_logits.set_requires_grad(false);
    fixed_mask.copy_(mask_value.to(fixed_mask.dtype()));
    pinned_ = true;
}

std::vector<torch::Tensor> C2VaeImpl::trainable_parameters() const
{
    std::vector<torch::Tensor> out;
    for (const auto& p : parameters()) {
        if (p.requires_grad()) {
            out.push_back(p);
        }
    }
    return out;
}

std::vector<std::pair<std::string, std::vector<torch::Tensor>>> C2VaeImpl::parameter_groups() const
{
    std::vector<torch::Tensor> encoder;
    for (const auto& p : encoder_->parameters()) {
        encoder.push_back(p);
    }
    for (const auto& p : encoder_head_->parameters()) {
        encoder.push_back(p);
    }
    std::vector<torch::Tensor> decoder;
    for (const auto& p : decoder_input_->parameters()) {
        decoder.push_back(p);
    }
    for (const auto& p : decoder_->parameters()) {
        decoder.push_back(p);
    }
    return {
        {"encoder", encoder},
        {"decoder", decoder},
        {"adjacency", {adjacency_raw}},
        {"mask_logits", {mask_logits}},
        {"aggregator", {pool_logits, readout}},
        {"heads", {head_slope_raw, head_bias, head_amp, head_gain, head_offset}},
    };
}

C2Vae make_model(const ModelConfig& config, uint64_t seed, torch::Dtype dtype)
{
    C2Vae model(config);
    auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
    torch::NoGradGuard guard;
    // PyTorch-default style fan-in uniform init, drawn from a private stream.
    for (auto& item : model->named_parameters()) {
        const auto& name = item.key();
        auto& p = item.value();
        const bool conv_or_linear = name.rfind("encoder", 0) == 0 || name.rfind("decoder", 0) == 0;
        if (!conv_or_linear) {
            continue;
        }
        int64_t fan_in = 1;
        if (p.dim() >= 2) {
            const bool transposed = name.rfind("decoder.", 0) == 0;
            fan_in = transposed ? p.size(0) : p.size(1);
            for (int64_t i = 2; i < p.dim(); ++i) {
                fan_in *= p.size(i);
            }
        } else {
            // bias: use the matching weight's fan-in
            const auto weight_name = name.substr(0, name.size() - 4) + "weight";
            const auto& w = model->named_parameters()[weight_name];
            const bool transposed = weight_name.rfind("decoder.", 0) == 0;
            fan_in = transposed ? w.size(0) : w.size(1);
            for (int64_t i = 2; i < w.dim(); ++i) {
                fan_in *= w.size(i);
            }
        }
        const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        p.copy_(torch::rand(p.sizes(), gen) * (2.0 * bound) - bound);
    }
    const auto& s = config.spec;
    model->readout.copy_(torch::randn({s.n, s.d}, gen) / std::sqrt(static_cast<double>(s.d)));
    if (model->head_offset.numel() > 0) {
        model->head_offset.copy_(torch::rand(model->head_offset.sizes(), gen) * 4.0 - 2.0);
    }
    model->to(dtype);
    return model;
}

} // namespace c2vae::model
