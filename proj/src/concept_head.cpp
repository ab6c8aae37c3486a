#include "c2vae/concept_head.hpp"

#include <cmath>
#include <stdexcept>

namespace c2vae::model {

namespace F = torch::nn::functional;

double softplus(double x)
{
    return x > 30.0 ? x : std::log1p(std::exp(x));
}

double softplus_inverse(double y)
{
    if (!(y > 0.0)) {
        throw std::invalid_argument("softplus_inverse needs a positive argument");
    }
    return y > 30.0 ? y : std::log(std::expm1(y));
}

torch::Tensor head_logit(const HeadTensors& heads, const torch::Tensor& t)
{
    auto g = F::softplus(heads.slope) * t + heads.bias;
    if (heads.hidden() > 0) {
        auto pre = F::softplus(heads.gain) * t.unsqueeze(-1) + heads.offset;
        g = g + (F::softplus(heads.amp) * torch::tanh(pre)).sum(-1);
    }
    return g;
}

torch::Tensor head_slope(const HeadTensors& heads, const torch::Tensor& t)
{
    auto slope = F::softplus(heads.slope).expand_as(t);
    if (heads.hidden() > 0) {
        const auto gain = F::softplus(heads.gain);
        const auto th = torch::tanh(gain * t.unsqueeze(-1) + heads.offset);
        slope = slope + (F::softplus(heads.amp) * gain * (1.0 - th * th)).sum(-1);
    }
    return slope;
}

torch::Tensor concept_predict(const HeadTensors& heads, const torch::Tensor& w_prime)
{
    return torch::sigmoid(head_logit(heads, w_prime));
}

torch::Tensor default_probe_grid(torch::TensorOptions options)
{
    return torch::linspace(-6.0, 6.0, 512, options);
}

torch::Tensor lipschitz_estimates(const HeadTensors& heads, const torch::Tensor& grid)
{
    const auto m = heads.concepts();
    const auto probes = grid.to(heads.slope.dtype()).unsqueeze(1).expand({grid.size(0), m});
    return head_slope(heads, probes).abs().amax(0);
}

double lipschitz_estimate(const HeadTensors& heads, int64_t j, const torch::Tensor& grid)
{
    return lipschitz_estimates(heads, grid).detach()[j].item<double>();
}

double MonotoneHead::logit(double t) const
{
    double g = slope * t + bias;
    for (std::size_t h = 0; h < amp.size(); ++h) {
        g += amp[h] * std::tanh(gain[h] * t + offset[h]);
    }
    return g;
}

double MonotoneHead::derivative(double t) const
{
    double s = slope;
    for (std::size_t h = 0; h < amp.size(); ++h) {
        const double th = std::tanh(gain[h] * t + offset[h]);
        s += amp[h] * gain[h] * (1.0 - th * th);
    }
    return s;
}

double MonotoneHead::predict(double t) const
{
    return 1.0 / (1.0 + std::exp(-logit(t)));
}

MonotoneHead extract_head(const HeadTensors& heads, int64_t j)
{
    auto get = [](const torch::Tensor& t) { return t.detach().to(torch::kCPU, torch::kFloat64).contiguous(); };
    MonotoneHead out;
    out.slope = softplus(get(heads.slope)[j].item<double>());
    out.bias = get(heads.bias)[j].item<double>();
    const auto hidden = heads.hidden();
    if (hidden > 0) {
        const auto amp = get(heads.amp)[j];
        const auto gain = get(heads.gain)[j];
        const auto offset = get(heads.offset)[j];
        for (int64_t h = 0; h < hidden; ++h) {
            out.amp.push_back(softplus(amp[h].item<double>()));
            out.gain.push_back(softplus(gain[h].item<double>()));
            out.offset.push_back(offset[h].item<double>());
        }
    }
    return out;
}

HeadTensors make_heads(const std::vector<MonotoneHead>& heads, torch::Dtype dtype)
{
    const auto m = static_cast<int64_t>(heads.size());
    const auto hidden = m > 0 ? static_cast<int64_t>(heads.front().amp.size()) : 0;
    HeadTensors out;
    auto opts = torch::TensorOptions().dtype(torch::kFloat64);
    out.slope = torch::empty({m}, opts);
    out.bias = torch::empty({m}, opts);
    out.amp = torch::empty({m, hidden}, opts);
    out.gain = torch::empty({m, hidden}, opts);
    out.offset = torch::empty({m, hidden}, opts);
    for (int64_t j = 0; j < m; ++j) {
        const auto& h = heads[static_cast<std::size_t>(j)];
        if (static_cast<int64_t>(h.amp.size()) != hidden || h.gain.size() != h.amp.size() ||
            h.offset.size() != h.amp.size()) {
            throw std::invalid_argument("make_heads: heads must share one hidden width");
        }
        out.slope[j] = softplus_inverse(h.slope);
        out.bias[j] = h.bias;
        for (int64_t k = 0; k < hidden; ++k) {
            const auto idx = static_cast<std::size_t>(k);
            out.amp[j][k] = softplus_inverse(h.amp[idx]);
            out.gain[j][k] = softplus_inverse(h.gain[idx]);
            out.offset[j][k] = h.offset[idx];
        }
    }
    out.slope = out.slope.to(dtype);
    out.bias = out.bias.to(dtype);
    out.amp = out.amp.to(dtype);
    out.gain = out.gain.to(dtype);
    out.offset = out.offset.to(dtype);
    return out;
}

} // namespace c2vae::model
