#include "c2vae/trainer.hpp"

#include "c2vae/checkpoint.hpp"
#include "c2vae/common.hpp"
#include "c2vae/concept_head.hpp"
#include "c2vae/image.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

namespace c2vae::train {

namespace fs = std::filesystem;
using nlohmann::json;

StructureMode parse_structure_mode(const std::string& name)
{
    if (name == "learned") {
        return StructureMode::learned;
    }
    if (name == "fixed_true") {
        return StructureMode::fixed_true;
    }
    throw UsageError("unknown structure_mode '" + name + "' (expected learned or fixed_true)");
}

std::string structure_mode_name(StructureMode mode)
{
    return mode == StructureMode::learned ? "learned" : "fixed_true";
}

double GumbelSchedule::temperature(int epoch, int epochs) const
{
    if (epochs <= 1) {
        return tau_start;
    }
    const double frac = static_cast<double>(epoch) / static_cast<double>(epochs - 1);
    return tau_start * std::pow(tau_end / tau_start, std::clamp(frac, 0.0, 1.0));
}

bool GumbelSchedule::hard(int epoch, int epochs) const
{
    return static_cast<double>(epoch) >= hard_after * static_cast<double>(epochs);
}

double DagSchedule::lambda(int epoch, int epochs) const
{
    return static_cast<double>(epoch) < warmup_fraction * static_cast<double>(epochs) ? lambda_warmup : lambda_after;
}

void TrainConfig::validate() const
{
    weights.validate();
    if (dataset.empty()) {
        throw UsageError("config: dataset path is required");
    }
    if (epochs < 1 || batch_size < 1 || d < 1 || hidden_width < 1 || head_hidden < 0 || checkpoint_every < 1) {
        throw UsageError("config: epochs, batch_size, d, hidden_width and checkpoint_every must be positive");
    }
    if (n < 0) {
        throw UsageError("config: n must be non-negative (0 derives it from the dataset)");
    }
    if (!(learning_rate > 0.0) || !(weight_decay >= 0.0)) {
        throw UsageError("config: learning rate must be positive and weight decay non-negative");
    }
    if (!(gumbel.tau_start > 0.0) || !(gumbel.tau_end > 0.0) || gumbel.hard_after < 0.0) {
        throw UsageError("config: gumbel temperatures must be positive");
    }
    if (dag.lambda_warmup < 0.0 || dag.lambda_after < 0.0 || dag.warmup_fraction < 0.0) {
        throw UsageError("config: dag schedule values must be non-negative");
    }
    if (image_size != 0 && image_size != 32 && image_size != 64) {
        throw UsageError("config: image_size must be 32 or 64");
    }
}

json TrainConfig::to_json() const
{
    return {
        {"dataset", dataset.string()},
        {"latent", {{"n", n}, {"k", k}, {"d", d}}},
        {"model", {{"hidden_width", hidden_width}, {"head_hidden", head_hidden}, {"image_size", image_size}}},
        {"loss",
         {{"rho1", weights.rho1},
          {"rho2", weights.rho2},
          {"lambda_sparse", weights.lambda_sparse},
          {"lambda_lip", weights.lambda_lip},
          {"sigma_x", weights.sigma_x},
          {"sigma_y", weights.sigma_y}}},
        {"dag",
         {{"lambda_warmup", dag.lambda_warmup},
          {"lambda_after", dag.lambda_after},
          {"warmup_fraction", dag.warmup_fraction}}},
        {"gumbel", {{"tau_start", gumbel.tau_start}, {"tau_end", gumbel.tau_end}, {"hard_after", gumbel.hard_after}}},
        {"optimizer", {{"lr", learning_rate}, {"weight_decay", weight_decay}}},
        {"epochs", epochs},
        {"batch_size", batch_size},
        {"seed", seed},
        {"structure_mode", structure_mode_name(structure_mode)},
        {"checkpoint_every", checkpoint_every},
        {"snapshots", snapshots},
    };
}

namespace {

template <typename T>
void take(const json& j, const char* key, T& out)
{
    if (j.contains(key) && !j.at(key).is_null()) {
        out = j.at(key).get<T>();
    }
}

const json& section(const json& j, const char* key)
{
    static const json empty = json::object();
    return j.contains(key) && j.at(key).is_object() ? j.at(key) : empty;
}

} // namespace

TrainConfig TrainConfig::from_json(const json& j, const TrainConfig& base)
{
    TrainConfig c = base;
    try {
        if (j.contains("dataset")) {
            c.dataset = j.at("dataset").get<std::string>();
        }
        const auto& latent = section(j, "latent");
        take(latent, "n", c.n);
        take(latent, "k", c.k);
        take(latent, "d", c.d);
        const auto& model = section(j, "model");
        take(model, "hidden_width", c.hidden_width);
        take(model, "head_hidden", c.head_hidden);
        take(model, "image_size", c.image_size);
        const auto& loss = section(j, "loss");
        take(loss, "rho1", c.weights.rho1);
        take(loss, "rho2", c.weights.rho2);
        take(loss, "lambda_sparse", c.weights.lambda_sparse);
        take(loss, "lambda_lip", c.weights.lambda_lip);
        take(loss, "sigma_x", c.weights.sigma_x);
        take(loss, "sigma_y", c.weights.sigma_y);
        const auto& dag = section(j, "dag");
        take(dag, "lambda_warmup", c.dag.lambda_warmup);
        take(dag, "lambda_after", c.dag.lambda_after);
        take(dag, "warmup_fraction", c.dag.warmup_fraction);
        const auto& gumbel = section(j, "gumbel");
        take(gumbel, "tau_start", c.gumbel.tau_start);
        take(gumbel, "tau_end", c.gumbel.tau_end);
        take(gumbel, "hard_after", c.gumbel.hard_after);
        const auto& opt = section(j, "optimizer");
        take(opt, "lr", c.learning_rate);
        take(opt, "weight_decay", c.weight_decay);
        take(j, "epochs", c.epochs);
        take(j, "batch_size", c.batch_size);
        take(j, "seed", c.seed);
        if (j.contains("structure_mode")) {
            c.structure_mode = parse_structure_mode(j.at("structure_mode").get<std::string>());
        }
        take(j, "checkpoint_every", c.checkpoint_every);
        take(j, "snapshots", c.snapshots);
    } catch (const json::exception& e) {
        throw UsageError(std::string("config: ") + e.what());
    }
    return c;
}

TrainConfig TrainConfig::from_json(const json& j)
{
    return from_json(j, TrainConfig{});
}

std::string TrainConfig::hash() const
{
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(to_json().dump())));
    return buf;
}

model::ModelConfig resolve_model_config(const TrainConfig& config, const data::Dataset& dataset)
{
    model::ModelConfig mc;
    mc.spec.m = dataset.concept_count();
    mc.spec.n = config.n > 0 ? config.n : mc.spec.m;
    mc.spec.k = config.k >= 0 ? config.k : std::max<int64_t>(0, 8 - mc.spec.n);
    mc.spec.d = config.d;
    mc.hidden_width = config.hidden_width;
    mc.head_hidden = config.head_hidden;
    mc.image_size = dataset.manifest.image_size;
    if (config.image_size != 0 && config.image_size != mc.image_size) {
        throw DataError("dataset images are " + std::to_string(mc.image_size) + " px, config asks for " +
                        std::to_string(config.image_size));
    }
    try {
        mc.validate();
    } catch (const UsageError& e) {
        throw DataError(std::string("dataset does not fit the latent spec: ") + e.what());
    }
    return mc;
}

std::pair<torch::Tensor, torch::Tensor> ground_truth_structure(const scene::GroundTruthStructure& truth,
                                                               const model::LatentSpec& spec)
{
    const auto m = static_cast<int64_t>(truth.concept_count());
    if (m != spec.m || static_cast<int64_t>(truth.mask_gt.size()) > spec.n ||
        static_cast<int64_t>(truth.adjacency_gt.size()) != m) {
        throw DataError("ground-truth structure does not fit the latent spec");
    }
    auto a = torch::zeros({spec.n, spec.n}, torch::kFloat64);
    auto mk = torch::zeros({spec.n, spec.m}, torch::kFloat64);
    for (int64_t i = 0; i < m; ++i) {
        for (int64_t j = 0; j < m; ++j) {
            a[i][j] = static_cast<double>(truth.adjacency_gt[i].at(j));
        }
    }
    for (std::size_t i = 0; i < truth.mask_gt.size(); ++i) {
        for (int64_t j = 0; j < m; ++j) {
            mk[static_cast<int64_t>(i)][j] = static_cast<double>(truth.mask_gt[i].at(j));
        }
    }
    return {a, mk};
}

std::vector<int64_t> epoch_order(const std::vector<int64_t>& indices, uint64_t seed, int epoch)
{
    auto out = indices;
    Rng rng(mix_seed(seed, 0x5348554646ULL), static_cast<uint64_t>(epoch));
    for (std::size_t i = out.size(); i > 1; --i) {
        const auto j = rng.below(i);
        std::swap(out[i - 1], out[j]);
    }
    return out;
}

namespace {

std::string csv_number(double v)
{
    return format_sig(v, 9);
}

/// Rewrites `path` keeping the header and rows whose first integer column is < limit.
void truncate_csv(const fs::path& path, int64_t limit)
{
    if (!fs::exists(path)) {
        return;
    }
    std::ifstream in(path);
    std::vector<std::string> kept;
    std::string line;
    bool header = true;
    while (std::getline(in, line)) {
        if (header) {
            kept.push_back(line);
            header = false;
            continue;
        }
        if (!line.empty() && std::stoll(line.substr(0, line.find(','))) < limit) {
            kept.push_back(line);
        }
    }
    in.close();
    std::ofstream out(path, std::ios::trunc);
    for (const auto& l : kept) {
        out << l << '\n';
    }
}

std::vector<double> to_vector(const torch::Tensor& t)
{
    const auto c = t.detach().to(torch::kCPU, torch::kFloat64).contiguous();
    return {c.data_ptr<double>(), c.data_ptr<double>() + c.numel()};
}

struct Batch {
    torch::Tensor images;
    torch::Tensor concepts;
};

loss::LossInputs make_inputs(model::C2VaeImpl& model, const Batch& batch, model::ForwardOutput fwd,
                             const torch::Tensor& grid)
{
    loss::LossInputs in;
    in.images = batch.images;
    in.concepts = batch.concepts;
    in.mask = fwd.latents.mask;
    in.forward = std::move(fwd);
    in.adjacency = model.adjacency();
    in.heads = model.heads();
    in.probe_grid = grid;
    in.structure_pinned = model.structure_pinned();
    return in;
}

bool finite_report(const loss::LossReport& r)
{
    for (const double v : r.csv_values()) {
        if (!std::isfinite(v)) {
            return false;
        }
    }
    return true;
}

[[noreturn]] void numeric_abort(const fs::path& out_dir, model::C2VaeImpl& model, const loss::LossReport& r, int epoch,
                                int64_t step)
{
    json diag;
    diag["epoch"] = epoch;
    diag["step"] = step;
    json terms;
    const auto names = loss::LossReport::csv_header();
    const auto values = r.csv_values();
    for (std::size_t i = 0; i < names.size(); ++i) {
        terms[names[i]] = std::isfinite(values[i]) ? json(values[i]) : json(std::to_string(values[i]));
    }
    diag["terms"] = terms;
    json params;
    for (const auto& item : model.named_parameters()) {
        const auto& p = item.value();
        params[item.key()] = {{"norm", p.detach().norm().item<double>()},
                              {"finite", torch::isfinite(p.detach()).all().item<bool>()}};
    }
    diag["parameters"] = params;
    diag["adjacency"] = to_vector(model.adjacency());
    std::ofstream(out_dir / "diagnostics.json") << diag.dump(2) << '\n';
    throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + ", step " + std::to_string(step) +
                       "; diagnostics written to " + (out_dir / "diagnostics.json").string());
}

double validation_loss(model::C2VaeImpl& model, const data::Dataset& ds, const std::vector<int64_t>& rows,
                       const loss::LossWeights& weights, const torch::Tensor& grid)
{
    if (rows.empty()) {
        return std::numeric_limits<double>::quiet_NaN();
    }
    torch::NoGradGuard guard;
    model.eval();
    double total = 0.0;
    const auto count = static_cast<int64_t>(rows.size());
    const int64_t chunk = 256;
    for (int64_t start = 0; start < count; start += chunk) {
        const auto len = std::min(chunk, count - start);
        std::vector<int64_t> idx(rows.begin() + start, rows.begin() + start + len);
        Batch b{data::gather_rows(ds.images, idx), data::gather_rows(ds.concepts, idx)};
        auto fwd = model.forward(b.images, model::ForwardOptions{});
        const auto terms = loss::compute_terms(make_inputs(model, b, std::move(fwd), grid), weights);
        total += terms.report(weights).total * static_cast<double>(len);
    }
    model.train();
    return total / static_cast<double>(count);
}

void write_snapshot(const fs::path& out_dir, model::C2VaeImpl& model, int epoch, bool header)
{
    const auto& s = model.spec();
    const auto probs = to_vector(model.mask_probabilities());
    const auto adj = to_vector(model.adjacency().abs());
    const auto trace = out_dir / "structure_trace.csv";
    std::ofstream out(trace, std::ios::app);
    if (header) {
        out << "epoch";
        for (int64_t i = 0; i < s.n; ++i) {
            for (int64_t j = 0; j < s.m; ++j) {
                out << ",M_" << i << '_' << j;
            }
        }
        for (int64_t i = 0; i < s.n; ++i) {
            for (int64_t j = 0; j < s.n; ++j) {
                out << ",A_" << i << '_' << j;
            }
        }
        out << '\n';
    }
    out << epoch;
    for (const double v : probs) {
        out << ',' << csv_number(v);
    }
    for (const double v : adj) {
        out << ',' << csv_number(v);
    }
    out << '\n';

    const auto dir = out_dir / "snapshots";
    fs::create_directories(dir);
    char name[64];
    std::snprintf(name, sizeof name, "M_epoch%04d.png", epoch);
    write_png(dir / name, heatmap(probs, static_cast<int>(s.n), static_cast<int>(s.m), 1.0));
    std::snprintf(name, sizeof name, "A_epoch%04d.png", epoch);
    write_png(dir / name, heatmap(adj, static_cast<int>(s.n), static_cast<int>(s.n), 1.0));
}

/// One row of at most ten evenly spaced epoch heatmaps, ending at the last epoch.
void write_series(const fs::path& out_dir, int epochs)
{
    const auto dir = out_dir / "snapshots";
    for (const char* prefix : {"M", "A"}) {
        std::vector<GrayImage> tiles;
        const int count = std::min(epochs, 10);
        for (int t = 1; t <= count; ++t) {
            const int epoch = (epochs * t + count - 1) / count;
            char name[64];
            std::snprintf(name, sizeof name, "%s_epoch%04d.png", prefix, epoch);
            if (fs::exists(dir / name)) {
                tiles.push_back(read_png(dir / name));
            }
        }
        if (!tiles.empty()) {
            write_png(out_dir / (std::string(prefix) + "_series.png"), tile_row(tiles, 4, 1.0F));
        }
    }
}

} // namespace

TrainResult train(const TrainConfig& config, const fs::path& out_dir, const TrainOptions& options)
{
    config.validate();
    data::Dataset owned;
    const data::Dataset* ds = options.dataset;
    if (ds == nullptr) {
        owned = data::load_dataset(config.dataset);
        ds = &owned;
    }
    const auto mc = resolve_model_config(config, *ds);
    const auto split = data::split_indices(ds->size());
    if (split.train.empty()) {
        throw DataError("dataset has no training samples");
    }
    fs::create_directories(out_dir);
    std::ofstream(out_dir / "config.json") << config.to_json().dump(2) << '\n';

    TrainResult result;
    int start_epoch = 0;
    int64_t step = 0;
    double best = std::numeric_limits<double>::infinity();
    std::optional<ckpt::Loaded> resumed;
    if (options.resume_from) {
        resumed = ckpt::load(*options.resume_from);
        const auto& st = resumed->state();
        if (st.at("config_hash").get<std::string>() != config.hash()) {
            throw UsageError("checkpoint " + options.resume_from->string() + " was trained with a different config");
        }
        result.model = resumed->model;
        start_epoch = st.at("epoch").get<int>();
        step = st.at("step").get<int64_t>();
        if (st.contains("best_validation") && st.at("best_validation").is_number()) {
            best = st.at("best_validation").get<double>();
        }
    } else {
        result.model = model::make_model(mc, mix_seed(config.seed, 0x4D4F44454CULL));
        if (config.structure_mode == StructureMode::fixed_true) {
            const auto [a, mk] = ground_truth_structure(ds->manifest.structure, mc.spec);
            result.model->pin_structure(a, mk);
        }
    }
    auto& model = *result.model;
    model.train();

    torch::optim::AdamW optimizer(model.trainable_parameters(), torch::optim::AdamWOptions(config.learning_rate)
                                                                     .betas({0.9, 0.999})
                                                                     .eps(1e-8)
                                                                     .weight_decay(config.weight_decay));
    if (resumed) {
        ckpt::restore_optimizer(*options.resume_from, resumed->manifest, model, optimizer);
    }

    const auto loss_path = out_dir / "loss.csv";
    if (start_epoch == 0) {
        std::ofstream header(loss_path, std::ios::trunc);
        header << "step,epoch,temperature,hard,lambda_dag";
        for (const auto& name : loss::LossReport::csv_header()) {
            header << ',' << name;
        }
        header << '\n';
        fs::remove(out_dir / "structure_trace.csv");
        if (config.snapshots) {
            write_snapshot(out_dir, model, 0, true);
        }
    } else {
        truncate_csv(loss_path, step);
        truncate_csv(out_dir / "structure_trace.csv", start_epoch + 1);
    }
    std::ofstream loss_log(loss_path, std::ios::app);

    const auto grid = model::default_probe_grid(torch::TensorOptions().dtype(torch::kFloat32));
    const int last_epoch = std::min(config.epochs, options.stop_after_epoch.value_or(config.epochs));

    auto state_json = [&](int epoch) {
        return json{{"epoch", epoch},
                    {"step", step},
                    {"best_validation", std::isfinite(best) ? json(best) : json(nullptr)},
                    {"config_hash", config.hash()},
                    {"config", config.to_json()},
                    {"dataset", ds->manifest.name},
                    {"concept_names", ds->manifest.structure.concept_names}};
    };

    for (int epoch = start_epoch; epoch < last_epoch; ++epoch) {
        const double tau = config.gumbel.temperature(epoch, config.epochs);
        const bool hard = config.gumbel.hard(epoch, config.epochs);
        auto weights = config.weights;
        weights.lambda_dag = config.dag.lambda(epoch, config.epochs);

        const auto order = epoch_order(split.train, config.seed, epoch);
        double epoch_total = 0.0;
        int64_t batches = 0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
            const auto end = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
            const std::vector<int64_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                           order.begin() + static_cast<std::ptrdiff_t>(end));
            Batch b{data::gather_rows(ds->images, idx), data::gather_rows(ds->concepts, idx)};
            auto gen = at::make_generator<at::CPUGeneratorImpl>(mix_seed(config.seed, 0x4E4F495345ULL + step));
            const auto noise = model.draw_noise(static_cast<int64_t>(idx.size()), gen);
            auto fwd = model.forward(b.images, model::ForwardOptions{true, tau, hard}, &noise);
            const auto terms = loss::compute_terms(make_inputs(model, b, std::move(fwd), grid), weights);
            const auto total = terms.total(weights);
            const auto report = terms.report(weights);
            if (!finite_report(report)) {
                numeric_abort(out_dir, model, report, epoch, step);
            }
            optimizer.zero_grad();
            total.backward();
            optimizer.step();

            loss_log << step << ',' << epoch << ',' << csv_number(tau) << ',' << (hard ? 1 : 0) << ','
                     << csv_number(weights.lambda_dag);
            for (const double v : report.csv_values()) {
                loss_log << ',' << csv_number(v);
            }
            loss_log << '\n';
            result.step_losses.push_back(report);
            epoch_total += report.total;
            ++batches;
            ++step;
        }
        loss_log.flush();

        EpochSummary summary;
        summary.epoch = epoch + 1;
        summary.train_loss = epoch_total / static_cast<double>(batches);
        summary.validation_loss = validation_loss(model, *ds, split.validation, weights, grid);
        summary.temperature = tau;
        summary.hard = hard;
        summary.lambda_dag = weights.lambda_dag;
        result.epochs.push_back(summary);
        if (config.snapshots) {
            write_snapshot(out_dir, model, epoch + 1, false);
        }
        if (std::isfinite(summary.validation_loss) && summary.validation_loss < best) {
            best = summary.validation_loss;
            ckpt::save(out_dir / "best", model, state_json(epoch + 1), &optimizer);
        }
        if ((epoch + 1) % config.checkpoint_every == 0) {
            char name[32];
            std::snprintf(name, sizeof name, "epoch_%04d", epoch + 1);
            ckpt::save(out_dir / "checkpoints" / name, model, state_json(epoch + 1), &optimizer);
        }
        if (options.on_epoch) {
            options.on_epoch(summary);
        }
    }

    if (last_epoch == config.epochs) {
        result.final_checkpoint = out_dir / "final";
        ckpt::save(result.final_checkpoint, model, state_json(last_epoch), &optimizer);
        if (config.snapshots) {
            write_series(out_dir, config.epochs);
        }
    } else {
        result.final_checkpoint = out_dir / "last";
        ckpt::save(result.final_checkpoint, model, state_json(last_epoch), &optimizer);
    }
    if (fs::exists(out_dir / "best")) {
        result.best_checkpoint = out_dir / "best";
    }
    model.eval();
    return result;
}

std::vector<SweepCell> default_sweep_grid()
{
    return {{0.0, 1.0}, {1.0, 0.0}, {1.0, 1.0}, {10.0, 1.0}, {1.0, 10.0}, {0.1, 1.0}, {1.0, 0.1}};
}

std::vector<SweepRow> sensitivity_sweep(const TrainConfig& base, const std::vector<SweepCell>& grid,
                                        const fs::path& out_dir, const metrics::EvalOptions& eval_options,
                                        const std::function<void(const std::string&)>& log)
{
    if (grid.empty()) {
        throw UsageError("sweep grid is empty");
    }
    fs::create_directories(out_dir);
    const auto dataset = data::load_dataset(base.dataset);
    std::vector<SweepRow> rows;
    for (const auto& cell : grid) {
        auto cfg = base;
        cfg.weights.rho1 = cell.rho1;
        cfg.weights.rho2 = cell.rho2;
        const auto run_dir = out_dir / ("rho1_" + format_sig(cell.rho1, 6) + "_rho2_" + format_sig(cell.rho2, 6));
        model::C2Vae trained{nullptr};
        if (fs::exists(run_dir / "final" / "manifest.json")) {
            auto loaded = ckpt::load(run_dir / "final");
            if (loaded.state().value("config_hash", "") == cfg.hash()) {
                trained = loaded.model;
                if (log) {
                    log("reusing " + run_dir.string());
                }
            }
        }
        if (!trained) {
            if (log) {
                log("training rho1=" + format_sig(cell.rho1, 6) + " rho2=" + format_sig(cell.rho2, 6));
            }
            TrainOptions opts;
            opts.dataset = &dataset;
            trained = train(cfg, run_dir, opts).model;
        }
        auto report = metrics::evaluate(*trained, dataset, eval_options);
        std::ofstream(run_dir / "eval.json") << report.to_json().dump(2) << '\n';
        rows.push_back({cell, report, run_dir});
    }
    std::ofstream csv(out_dir / "sweep.csv", std::ios::trunc);
    csv << "rho1,rho2,psnr_db,mae_mean,avg_mi,shd,mask_f1\n";
    for (const auto& r : rows) {
        csv << format_sig(r.cell.rho1, 6) << ',' << format_sig(r.cell.rho2, 6) << ','
            << format_sig(r.report.psnr_db, 9) << ',' << format_sig(r.report.mae_mean, 9) << ','
            << (r.report.avg_mi ? format_sig(*r.report.avg_mi, 9) : std::string("nan")) << ',' << r.report.shd
            << ',' << format_sig(r.report.mask_f1, 9) << '\n';
    }
    return rows;
}

} // namespace c2vae::train
