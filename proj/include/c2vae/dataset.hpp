#ifndef C2VAE_DATASET_HPP
#define C2VAE_DATASET_HPP

#include "c2vae/scenegen.hpp"

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <vector>

namespace c2vae::data {

/// A generated dataset held in memory as float32 tensors.
struct Dataset {
    std::filesystem::path root;
    scene::DatasetManifest manifest;
    torch::Tensor images;    ///< (N, 1, S, S) in [0, 1]
    torch::Tensor concepts;  ///< (N, m) in [0, 1]

    int64_t size() const { return images.defined() ? images.size(0) : 0; }
    int64_t concept_count() const { return concepts.size(1); }
};

/// Reads meta.json, concepts.csv and every image; checks that the three agree.
Dataset load_dataset(const std::filesystem::path& dir);

/// Train/validation assignment by a hash of the sample index (about 10% validation).
bool is_validation_index(uint64_t index);

struct Split {
    std::vector<int64_t> train;
    std::vector<int64_t> validation;
};

Split split_indices(int64_t count);

/// Rows of `tensor` picked by `indices`.
torch::Tensor gather_rows(const torch::Tensor& tensor, const std::vector<int64_t>& indices);

} // namespace c2vae::data

#endif // C2VAE_DATASET_HPP
