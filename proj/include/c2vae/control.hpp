#ifndef C2VAE_CONTROL_HPP
#define C2VAE_CONTROL_HPP

#include "c2vae/concept_head.hpp"
#include "c2vae/image.hpp"
#include "c2vae/model.hpp"

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace c2vae::control {

inline constexpr double kDefaultTauA = 0.1;

struct RootSet {
    std::vector<bool> roots;
    std::vector<std::vector<int>> binary;  ///< binary[i][j] = 1 for an edge i→j with |A_ij| ≥ τ_A
    double tau_a = kDefaultTauA;

    std::vector<int64_t> indices() const;
};

/// Roots are factors with no incoming edge at or above τ_A. Throws NumericError
/// if the thresholded graph has a cycle.
RootSet find_roots(const torch::Tensor& adjacency, double tau_a = kDefaultTauA);

/// Kahn order of a binary graph; empty if the graph is cyclic.
std::vector<int64_t> topological_order(const std::vector<std::vector<int>>& binary);

/// do(w_i = value): `value` holds one entry (broadcast over d) or d entries.
struct Assignment {
    int64_t factor = 0;
    std::vector<double> value;
};

/// Graph surgery on the linear SCM: assigned factors lose their incoming
/// edges and take the assigned values; every other factor is recomputed from
/// its parents and its own ε. `epsilon` is (..., n, d). Without assignments
/// this is exactly scm_forward(adjacency, epsilon).
torch::Tensor intervene(const torch::Tensor& adjacency, const torch::Tensor& epsilon,
                        const std::vector<Assignment>& assignments, double tau_a = kDefaultTauA);

/// Per targeted concept, the w' with σ(g_j(w')) = y★ (bisection on [−20, 20]).
/// Targets at 0 or 1 are clamped to [1e-4, 1 − 1e-4] and reported in `warnings`.
struct Inversion {
    std::map<int64_t, double> w_prime;
    std::vector<std::string> warnings;
};

Inversion invert_concepts(const std::map<int64_t, double>& targets, const model::HeadTensors& heads);

struct OptimizerSettings {
    int steps = 500;
    double step_size = 0.05;
    int restarts = 8;
    double prior_weight = 1.0;
    double init_range = 2.0;
    bool deterministic = true;  ///< z = 0; otherwise z ~ N(0, I) from `seed`
    uint64_t seed = 0;
    double tau_a = kDefaultTauA;
};

/// Everything needed to evaluate the root objective without the image model.
struct LatentControlProblem {
    torch::Tensor adjacency;    ///< (n, n)
    torch::Tensor mask;         ///< (n, m), binary
    torch::Tensor readout;      ///< (n, d)
    torch::Tensor pool_logits;  ///< (n, m)
};

struct RootOptimum {
    torch::Tensor epsilon;  ///< (n, d), zero outside the roots
    torch::Tensor w;        ///< (n, d)
    torch::Tensor w_prime;  ///< (m)
    double objective = 0.0;
    bool converged = false;
    std::vector<double> restart_objectives;
    std::vector<double> trace;  ///< best objective so far after each step of the winning restart
};

/// Minimises Σ_j (w'_j − w'★_j)² + λ_p ‖ε_root‖² / 2 over the root ε with
/// Adam and restarts; the best iterate over all restarts is returned and
/// `converged` is false when its objective exceeds 1e-2.
RootOptimum optimize_roots(const LatentControlProblem& problem, const std::map<int64_t, double>& w_prime_target,
                           const RootSet& roots, const OptimizerSettings& settings);

struct ControlResult {
    Inversion inversion;
    RootOptimum optimum;
    RootSet roots;
    torch::Tensor z;
    GrayImage image;
    std::vector<double> achieved;  ///< model-predicted concepts of the generated latents
    std::map<int64_t, double> targets;

    nlohmann::json to_json(const std::vector<std::string>& concept_names) const;
};

LatentControlProblem problem_from_model(const model::C2VaeImpl& model);

/// Concept control: invert targets to w'★, optimise the roots, decode.
ControlResult concept_control(model::C2VaeImpl& model, const std::map<int64_t, double>& targets,
                              const OptimizerSettings& settings);

/// Encodes `image` (1, 1, S, S) and decodes it with do(w_factor) moved along the
/// factor's read-out direction so that its read-out equals each value in turn.
std::vector<GrayImage> traverse(model::C2VaeImpl& model, const torch::Tensor& image, int64_t factor,
                                const std::vector<double>& values, double tau_a = kDefaultTauA);

/// Plain eval-mode reconstruction of (B, 1, S, S) images.
torch::Tensor reconstruct(model::C2VaeImpl& model, const torch::Tensor& images);

GrayImage to_gray(const torch::Tensor& image);

} // namespace c2vae::control

#endif // C2VAE_CONTROL_HPP
