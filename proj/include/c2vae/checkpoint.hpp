#ifndef C2VAE_CHECKPOINT_HPP
#define C2VAE_CHECKPOINT_HPP

#include "c2vae/model.hpp"

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include <filesystem>

namespace c2vae::ckpt {

/// Raw tensor files: little-endian float32, row-major, no header.
void write_raw(const std::filesystem::path& path, const torch::Tensor& tensor);
torch::Tensor read_raw(const std::filesystem::path& path, torch::IntArrayRef shape);

nlohmann::json model_config_to_json(const model::ModelConfig& config);
model::ModelConfig model_config_from_json(const nlohmann::json& j);

/// Writes `dir/manifest.json` plus one raw file per parameter and buffer, and
/// the optimiser moments when an optimiser is given. `state` is stored verbatim
/// under "state". The directory is replaced atomically.
void save(const std::filesystem::path& dir, const model::C2VaeImpl& model, const nlohmann::json& state,
          const torch::optim::AdamW* optimizer = nullptr);

struct Loaded {
    model::C2Vae model{nullptr};
    nlohmann::json manifest;
    const nlohmann::json& state() const { return manifest.at("state"); }
    bool has_optimizer() const { return manifest.contains("optimizer") && !manifest.at("optimizer").is_null(); }
};

/// Rebuilds the model (including pinned structure) from a checkpoint directory.
Loaded load(const std::filesystem::path& dir, torch::Dtype dtype = torch::kFloat32);

/// Restores AdamW moments saved by `save` into an optimiser built over
/// `model->trainable_parameters()` in the same order.
void restore_optimizer(const std::filesystem::path& dir, const nlohmann::json& manifest,
                       const model::C2VaeImpl& model, torch::optim::AdamW& optimizer);

} // namespace c2vae::ckpt

#endif // C2VAE_CHECKPOINT_HPP
