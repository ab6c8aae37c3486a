#include "c2vae/control.hpp"

#include "c2vae/common.hpp"
#include "c2vae/structure.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace c2vae::control {

std::vector<int64_t> RootSet::indices() const
{
    std::vector<int64_t> out;
    for (std::size_t i = 0; i < roots.size(); ++i) {
        if (roots[i]) {
            out.push_back(static_cast<int64_t>(i));
        }
    }
    return out;
}

std::vector<int64_t> topological_order(const std::vector<std::vector<int>>& binary)
{
    const auto n = binary.size();
    std::vector<int> indegree(n, 0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            indegree[j] += binary[i][j] != 0 ? 1 : 0;
        }
    }
    std::vector<int64_t> order;
    std::vector<std::size_t> ready;
    for (std::size_t i = n; i-- > 0;) {
        if (indegree[i] == 0) {
            ready.push_back(i);
        }
    }
    while (!ready.empty()) {
        const auto i = ready.back();
        ready.pop_back();
        order.push_back(static_cast<int64_t>(i));
        for (std::size_t j = n; j-- > 0;) {
            if (binary[i][j] != 0 && --indegree[j] == 0) {
                ready.push_back(j);
            }
        }
    }
    if (order.size() != n) {
        return {};
    }
    return order;
}

RootSet find_roots(const torch::Tensor& adjacency, double tau_a)
{
    TORCH_CHECK(adjacency.dim() == 2 && adjacency.size(0) == adjacency.size(1), "adjacency must be square");
    const auto n = adjacency.size(0);
    const auto a = adjacency.detach().to(torch::kCPU, torch::kFloat64).contiguous();
    const auto acc = a.accessor<double, 2>();
    RootSet out;
    out.tau_a = tau_a;
    out.binary.assign(static_cast<std::size_t>(n), std::vector<int>(static_cast<std::size_t>(n), 0));
    out.roots.assign(static_cast<std::size_t>(n), true);
    for (int64_t i = 0; i < n; ++i) {
        for (int64_t j = 0; j < n; ++j) {
            if (i != j && std::abs(acc[i][j]) >= tau_a) {
                out.binary[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = 1;
                out.roots[static_cast<std::size_t>(j)] = false;
            }
        }
    }
    if (n > 0 && topological_order(out.binary).empty()) {
        throw NumericError("the thresholded graph at tau_A = " + format_sig(tau_a, 4) +
                           " has a cycle; use a larger tau_A or retrain the model");
    }
    return out;
}

torch::Tensor intervene(const torch::Tensor& adjacency, const torch::Tensor& epsilon,
                        const std::vector<Assignment>& assignments, double tau_a)
{
    if (assignments.empty()) {
        return model::scm_forward(adjacency, epsilon);
    }
    const auto n = adjacency.size(0);
    const auto d = epsilon.size(-1);
    find_roots(adjacency, tau_a);  // rejects cyclic graphs

    auto severed = adjacency.clone();
    auto noise = epsilon.clone();
    std::vector<std::pair<int64_t, torch::Tensor>> clamps;
    for (const auto& a : assignments) {
        if (a.factor < 0 || a.factor >= n) {
            throw UsageError("intervention on factor " + std::to_string(a.factor) + " but n = " + std::to_string(n));
        }
        if (a.value.size() != 1 && static_cast<int64_t>(a.value.size()) != d) {
            throw UsageError("intervention value needs 1 or d = " + std::to_string(d) + " entries");
        }
        auto value = torch::tensor(a.value, epsilon.options().requires_grad(false));
        if (a.value.size() == 1) {
            value = value.expand({d});
        }
        severed.select(1, a.factor).zero_();
        noise.select(-2, a.factor).copy_(value.expand_as(noise.select(-2, a.factor)));
        clamps.emplace_back(a.factor, value);
    }
    auto w = model::scm_forward(severed, noise).clone();
    for (const auto& [factor, value] : clamps) {
        w.select(-2, factor).copy_(value.expand_as(w.select(-2, factor)));
    }
    return w;
}

Inversion invert_concepts(const std::map<int64_t, double>& targets, const model::HeadTensors& heads)
{
    Inversion out;
    for (const auto& [j, raw_target] : targets) {
        if (j < 0 || j >= heads.concepts()) {
            throw UsageError("concept index " + std::to_string(j) + " out of range");
        }
        if (!(raw_target >= 0.0 && raw_target <= 1.0)) {
            throw UsageError("concept targets must lie in [0, 1]");
        }
        double target = raw_target;
        if (target < 1e-4 || target > 1.0 - 1e-4) {
            target = std::clamp(target, 1e-4, 1.0 - 1e-4);
            out.warnings.push_back("target for concept " + std::to_string(j) + " clamped to " +
                                   format_sig(target, 6));
        }
        const auto head = model::extract_head(heads, j);
        double lo = -20.0;
        double hi = 20.0;
        if (head.predict(lo) > target || head.predict(hi) < target) {
            out.warnings.push_back("target for concept " + std::to_string(j) +
                                   " lies outside the head's range on [-20, 20]");
        }
        for (int iter = 0; iter < 200 && hi - lo > 1e-13; ++iter) {
            const double mid = 0.5 * (lo + hi);
            (head.predict(mid) < target ? lo : hi) = mid;
        }
        out.w_prime[j] = 0.5 * (lo + hi);
    }
    return out;
}

namespace {

torch::Tensor pooled(const LatentControlProblem& p, const torch::Tensor& w)
{
    return model::mask_pool(w, p.mask, p.readout, p.pool_logits);
}

} // namespace

RootOptimum optimize_roots(const LatentControlProblem& problem, const std::map<int64_t, double>& w_prime_target,
                           const RootSet& roots, const OptimizerSettings& settings)
{
    const auto root_idx = roots.indices();
    if (root_idx.empty()) {
        throw NumericError("no root factors");
    }
    if (settings.steps < 0 || settings.restarts < 1 || !(settings.step_size > 0.0) || settings.prior_weight < 0.0) {
        throw UsageError("invalid root optimiser settings");
    }
    const auto opts = torch::TensorOptions().dtype(torch::kFloat64);
    const LatentControlProblem p{problem.adjacency.detach().to(torch::kFloat64),
                                 problem.mask.detach().to(torch::kFloat64),
                                 problem.readout.detach().to(torch::kFloat64),
                                 problem.pool_logits.detach().to(torch::kFloat64)};
    const auto n = p.adjacency.size(0);
    const auto d = p.readout.size(1);
    const auto r = static_cast<int64_t>(root_idx.size());
    const auto index = torch::tensor(root_idx, torch::kLong);

    std::vector<int64_t> target_cols;
    std::vector<double> target_vals;
    for (const auto& [j, v] : w_prime_target) {
        if (j < 0 || j >= p.mask.size(1)) {
            throw UsageError("concept index " + std::to_string(j) + " out of range");
        }
        target_cols.push_back(j);
        target_vals.push_back(v);
    }
    const auto cols = torch::tensor(target_cols, torch::kLong);
    const auto goal = torch::tensor(target_vals, opts);

    auto objective = [&](const torch::Tensor& eps_root) {
        const auto eps = torch::zeros({n, d}, opts).index_copy(0, index, eps_root);
        const auto w = model::scm_forward(p.adjacency, eps);
        const auto wp = pooled(p, w).index_select(0, cols);
        return (wp - goal).pow(2).sum() + 0.5 * settings.prior_weight * eps_root.pow(2).sum();
    };

    RootOptimum best;
    best.objective = std::numeric_limits<double>::infinity();
    torch::Tensor best_eps;
    for (int restart = 0; restart < settings.restarts; ++restart) {
        Rng rng(settings.seed, 0x524F4F54ULL + static_cast<uint64_t>(restart));
        std::vector<double> init(static_cast<std::size_t>(r * d));
        for (auto& v : init) {
            v = rng.uniform(-settings.init_range, settings.init_range);
        }
        auto eps_root = torch::tensor(init, opts).reshape({r, d}).requires_grad_(true);
        torch::optim::Adam adam({eps_root}, torch::optim::AdamOptions(settings.step_size));
        double restart_best = std::numeric_limits<double>::infinity();
        torch::Tensor restart_eps;
        std::vector<double> trace;
        for (int step = 0; step <= settings.steps; ++step) {
            adam.zero_grad();
            const auto j = objective(eps_root);
            const double value = j.item<double>();
            if (value < restart_best) {
                restart_best = value;
                restart_eps = eps_root.detach().clone();
            }
            trace.push_back(restart_best);
            if (step == settings.steps) {
                break;
            }
            j.backward();
            adam.step();
        }
        best.restart_objectives.push_back(restart_best);
        if (restart_best < best.objective) {
            best.objective = restart_best;
            best_eps = restart_eps;
            best.trace = trace;
        }
    }
    torch::NoGradGuard guard;
    best.epsilon = torch::zeros({n, d}, opts).index_copy(0, index, best_eps);
    best.w = model::scm_forward(p.adjacency, best.epsilon);
    best.w_prime = pooled(p, best.w);
    best.converged = best.objective <= 1e-2;
    return best;
}

LatentControlProblem problem_from_model(const model::C2VaeImpl& model)
{
    return {model.adjacency().detach(), model.eval_mask().detach(), model.readout.detach(),
            model.pool_logits.detach()};
}

torch::Tensor reconstruct(model::C2VaeImpl& model, const torch::Tensor& images)
{
    torch::NoGradGuard guard;
    model.eval();
    return model.forward(images.to(model.mask_logits.scalar_type()), model::ForwardOptions{}).reconstruction;
}

GrayImage to_gray(const torch::Tensor& image)
{
    const auto t = image.detach().to(torch::kCPU, torch::kFloat32).contiguous();
    const auto h = static_cast<int>(t.size(-2));
    const auto w = static_cast<int>(t.size(-1));
    TORCH_CHECK(t.numel() == static_cast<int64_t>(h) * w, "to_gray expects a single image");
    GrayImage out(h, w);
    std::copy(t.data_ptr<float>(), t.data_ptr<float>() + t.numel(), out.pixels.begin());
    return out;
}

ControlResult concept_control(model::C2VaeImpl& model, const std::map<int64_t, double>& targets,
                              const OptimizerSettings& settings)
{
    if (targets.empty()) {
        throw UsageError("concept control needs at least one target");
    }
    model.eval();
    ControlResult out;
    out.targets = targets;
    out.inversion = invert_concepts(targets, model.heads());
    out.roots = find_roots(model.adjacency(), settings.tau_a);
    out.optimum = optimize_roots(problem_from_model(model), out.inversion.w_prime, out.roots, settings);

    torch::NoGradGuard guard;
    const auto& s = model.spec();
    const auto dtype = model.mask_logits.scalar_type();
    if (settings.deterministic) {
        out.z = torch::zeros({1, s.k, s.d}, torch::TensorOptions().dtype(dtype));
    } else {
        auto gen = at::make_generator<at::CPUGeneratorImpl>(mix_seed(settings.seed, 0x5A));
        out.z = torch::randn({1, s.k, s.d}, gen, torch::TensorOptions().dtype(dtype));
    }
    const auto w = out.optimum.w.to(dtype).unsqueeze(0);
    out.image = to_gray(model.decode(w, out.z));
    const auto achieved = model.predict_concepts(model.pool(w, model.eval_mask())).to(torch::kFloat64).contiguous();
    out.achieved.assign(achieved.data_ptr<double>(), achieved.data_ptr<double>() + achieved.numel());
    return out;
}

nlohmann::json ControlResult::to_json(const std::vector<std::string>& names) const
{
    auto name_of = [&](int64_t j) {
        return j < static_cast<int64_t>(names.size()) ? names[static_cast<std::size_t>(j)] : std::to_string(j);
    };
    nlohmann::json requested = nlohmann::json::object();
    nlohmann::json errors = nlohmann::json::object();
    for (const auto& [j, v] : targets) {
        requested[name_of(j)] = v;
        errors[name_of(j)] = std::abs(achieved.at(static_cast<std::size_t>(j)) - v);
    }
    nlohmann::json achieved_json = nlohmann::json::object();
    for (std::size_t j = 0; j < achieved.size(); ++j) {
        achieved_json[name_of(static_cast<int64_t>(j))] = achieved[j];
    }
    return {{"requested", requested},
            {"achieved", achieved_json},
            {"abs_error", errors},
            {"objective", optimum.objective},
            {"converged", optimum.converged},
            {"restart_objectives", optimum.restart_objectives},
            {"roots", roots.indices()},
            {"tau_a", roots.tau_a},
            {"warnings", inversion.warnings}};
}

std::vector<GrayImage> traverse(model::C2VaeImpl& model, const torch::Tensor& image, int64_t factor,
                                const std::vector<double>& values, double tau_a)
{
    const auto& s = model.spec();
    if (factor < 0 || factor >= s.n) {
        throw UsageError("factor index " + std::to_string(factor) + " out of range (n = " + std::to_string(s.n) + ")");
    }
    torch::NoGradGuard guard;
    model.eval();
    const auto latents = model.encode(image.to(model.mask_logits.scalar_type()), model::ForwardOptions{});
    const auto u = model.readout.select(0, factor).to(torch::kFloat64);
    const auto w_i = latents.w.select(0, 0).select(0, factor).to(torch::kFloat64);
    const double current = (u * w_i).sum().item<double>();
    const double norm_sq = (u * u).sum().item<double>();
    std::vector<GrayImage> out;
    for (const double c : values) {
        const auto moved = (w_i + (c - current) / norm_sq * u).contiguous();
        Assignment a{factor, {moved.data_ptr<double>(), moved.data_ptr<double>() + moved.numel()}};
        const auto w = intervene(model.adjacency(), latents.epsilon, {a}, tau_a);
        out.push_back(to_gray(model.decode(w, latents.z)));
    }
    return out;
}

} // namespace c2vae::control
