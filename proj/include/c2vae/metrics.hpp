#ifndef C2VAE_METRICS_HPP
#define C2VAE_METRICS_HPP

#include "c2vae/dataset.hpp"
#include "c2vae/model.hpp"
#include "c2vae/scenegen.hpp"

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace c2vae::metrics {

inline constexpr double kPsnrCap = 99.0;

/// Mean over the batch of 10·log10(1 / MSE_image), each image capped at 99 dB.
/// Inputs are (B, ...) in [0, 1].
double psnr(const torch::Tensor& reference, const torch::Tensor& reconstruction);

struct MaeResult {
    std::vector<double> per_concept;
    double mean = 0.0;
};

/// Mean |ŷ − y| per concept over rows of (N, m) tensors.
MaeResult concept_mae(const torch::Tensor& predicted, const torch::Tensor& labels);

/// Equal-width histogram entropy (nats) of one column.
double histogram_entropy(const std::vector<double>& x, int bins = 20);
/// Equal-width 2-D histogram mutual information (nats). Constant columns give 0.
double histogram_mi(const std::vector<double>& x, const std::vector<double>& y, int bins = 20);

struct AvgMiResult {
    double value = 0.0;
    std::vector<std::vector<double>> mi_normalized;  ///< n × m
    std::vector<std::string> warnings;
};

/// Factor read-outs (N, n) against labels (N, m). Each entry is the histogram
/// MI normalised by min(H(r_i), H(y_j)) so that it lies in [0, 1]; the score is
/// ‖MI_norm − M_gt‖_F with M_gt zero-padded to n × m. Needs at least 2000 rows.
AvgMiResult avg_mi(const torch::Tensor& readouts, const torch::Tensor& labels,
                   const std::vector<std::vector<int>>& mask_gt, int bins = 20);

struct StructureScores {
    int shd = 0;
    double mask_f1 = 1.0;
};

/// SHD between the thresholded learned graph on the first m factor slots and
/// adjacency_gt (a reversed edge counts once), and F1 of the hard mask against
/// mask_gt over the learnable strictly-lower entries.
StructureScores structure_scores(const torch::Tensor& adjacency, const torch::Tensor& hard_mask,
                                 const scene::GroundTruthStructure& truth, double tau_a = 0.1);

struct EvalReport {
    double psnr_db = 0.0;
    std::vector<double> mae;
    double mae_mean = 0.0;
    std::optional<double> avg_mi;
    int shd = 0;
    double mask_f1 = 0.0;
    int64_t sample_count = 0;
    uint64_t seed = 0;
    std::vector<std::string> concept_names;

    nlohmann::json to_json() const;
    static std::string csv_header();
    std::string csv_row(const std::string& checkpoint, const std::string& dataset) const;
};

enum class SplitChoice { validation, train, all };

struct EvalOptions {
    SplitChoice split = SplitChoice::validation;
    double tau_a = 0.1;
    int64_t batch_size = 256;
    uint64_t seed = 0;
};

/// PSNR and MAE on the chosen split; avgMI over all samples (needs ≥ 2000);
/// structure scores against the manifest's ground truth.
EvalReport evaluate(model::C2VaeImpl& model, const data::Dataset& dataset, const EvalOptions& options = {});

/// Appends one row, writing the header when the file is new.
void append_results_csv(const std::filesystem::path& path, const EvalReport& report, const std::string& checkpoint,
                        const std::string& dataset);

} // namespace c2vae::metrics

#endif // C2VAE_METRICS_HPP
