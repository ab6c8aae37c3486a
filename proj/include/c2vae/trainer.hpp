#ifndef C2VAE_TRAINER_HPP
#define C2VAE_TRAINER_HPP

#include "c2vae/dataset.hpp"
#include "c2vae/metrics.hpp"
#include "c2vae/model.hpp"
#include "c2vae/objectives.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace c2vae::train {

enum class StructureMode { learned, fixed_true };

StructureMode parse_structure_mode(const std::string& name);
std::string structure_mode_name(StructureMode mode);

/// Exponential temperature decay from tau_start to tau_end over the run, with
/// straight-through hard samples from epoch ⌈hard_after · epochs⌉ on.
struct GumbelSchedule {
    double tau_start = 1.0;
    double tau_end = 0.3;
    double hard_after = 0.5;

    double temperature(int epoch, int epochs) const;
    bool hard(int epoch, int epochs) const;
};

/// Two-stage acyclicity weight.
struct DagSchedule {
    double lambda_warmup = 1.0;
    double lambda_after = 10.0;
    double warmup_fraction = 0.3;

    double lambda(int epoch, int epochs) const;
};

struct TrainConfig {
    std::filesystem::path dataset;
    /// Factor counts; 0 means "derive from the dataset" (n = m, k = 8 − n).
    int64_t n = 0;
    int64_t k = -1;
    int64_t d = 4;
    int64_t hidden_width = 64;
    int64_t head_hidden = 8;
    int64_t image_size = 0;  ///< 0 accepts the dataset's size
    loss::LossWeights weights;
    DagSchedule dag;
    GumbelSchedule gumbel;
    double learning_rate = 1e-3;
    double weight_decay = 1e-3;
    int epochs = 200;
    int64_t batch_size = 64;
    uint64_t seed = 0;
    StructureMode structure_mode = StructureMode::learned;
    int checkpoint_every = 10;
    bool snapshots = true;

    void validate() const;
    nlohmann::json to_json() const;
    /// Fields present in `j` override the ones in `base`.
    static TrainConfig from_json(const nlohmann::json& j, const TrainConfig& base);
    static TrainConfig from_json(const nlohmann::json& j);
    /// Stable hex digest of the effective configuration.
    std::string hash() const;
};

/// Model shape implied by a config and a loaded dataset.
model::ModelConfig resolve_model_config(const TrainConfig& config, const data::Dataset& dataset);

struct EpochSummary {
    int epoch = 0;  ///< 1-based count of completed epochs
    double train_loss = 0.0;
    double validation_loss = 0.0;
    double temperature = 1.0;
    bool hard = false;
    double lambda_dag = 1.0;
};

struct TrainOptions {
    std::optional<std::filesystem::path> resume_from;
    /// Stop after this many completed epochs (the schedules still use `epochs`).
    std::optional<int> stop_after_epoch;
    std::function<void(const EpochSummary&)> on_epoch;
    /// Preloaded dataset; loaded from config.dataset when null.
    const data::Dataset* dataset = nullptr;
};

struct TrainResult {
    model::C2Vae model{nullptr};
    std::filesystem::path final_checkpoint;
    std::filesystem::path best_checkpoint;
    std::vector<EpochSummary> epochs;
    std::vector<loss::LossReport> step_losses;  ///< steps run in this call
};

/// Trains into `out_dir`: loss.csv, structure_trace.csv, snapshots/*.png,
/// checkpoints/epoch_XXXX, best/, final/, config.json.
TrainResult train(const TrainConfig& config, const std::filesystem::path& out_dir, const TrainOptions& options = {});

/// Builds the pinned ground-truth structure (unit-weight A, binary M) in model slots.
std::pair<torch::Tensor, torch::Tensor> ground_truth_structure(const scene::GroundTruthStructure& truth,
                                                               const model::LatentSpec& spec);

struct SweepCell {
    double rho1 = 1.0;
    double rho2 = 1.0;
};

/// The seven (ρ1, ρ2) settings of the sensitivity table.
std::vector<SweepCell> default_sweep_grid();

struct SweepRow {
    SweepCell cell;
    metrics::EvalReport report;
    std::filesystem::path run_dir;
};

/// Trains and evaluates one run per cell under `out_dir`, writing sweep.csv.
/// Runs whose final checkpoint already carries the same config hash are reused.
std::vector<SweepRow> sensitivity_sweep(const TrainConfig& base, const std::vector<SweepCell>& grid,
                                        const std::filesystem::path& out_dir,
                                        const metrics::EvalOptions& eval_options = {},
                                        const std::function<void(const std::string&)>& log = {});

/// Plain in-memory Fisher-Yates shuffle keyed by (seed, epoch).
std::vector<int64_t> epoch_order(const std::vector<int64_t>& indices, uint64_t seed, int epoch);

} // namespace c2vae::train

#endif // C2VAE_TRAINER_HPP
