#include "c2vae/cli.hpp"

#include "c2vae/checkpoint.hpp"
#include "c2vae/common.hpp"
#include "c2vae/control.hpp"
#include "c2vae/dataset.hpp"
#include "c2vae/image.hpp"
#include "c2vae/metrics.hpp"
#include "c2vae/scenegen.hpp"
#include "c2vae/trainer.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

namespace c2vae::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void write_json(const fs::path& path, const json& j)
{
    std::ofstream out(path);
    out << j.dump(2) << '\n';
    if (!out) {
        throw DataError("cannot write " + path.string());
    }
}

/// Reproducibility stamp plus the effective configuration of one command.
void stamp(const fs::path& dir, const std::string& command, const json& effective, uint64_t seed)
{
    fs::create_directories(dir);
    char hash[17];
    std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(fnv1a(effective.dump())));
    write_json(dir / "effective_config.json", effective);
    write_json(dir / "stamp.json",
               {{"command", command}, {"config_hash", hash}, {"seed", seed}, {"version", std::string(kVersion)}});
}

json read_json_file(const fs::path& path)
{
    std::ifstream in(path);
    if (!in) {
        throw DataError("cannot open " + path.string());
    }
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw UsageError("cannot parse " + path.string() + ": " + e.what());
    }
}

std::vector<std::string> split(const std::string& text, char sep)
{
    std::vector<std::string> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, sep)) {
        if (!item.empty()) {
            out.push_back(item);
        }
    }
    return out;
}

double parse_double(const std::string& text)
{
    try {
        std::size_t used = 0;
        const double v = std::stod(text, &used);
        if (used != text.size()) {
            throw UsageError("not a number: '" + text + "'");
        }
        return v;
    } catch (const std::logic_error&) {
        throw UsageError("not a number: '" + text + "'");
    }
}

std::vector<std::string> concept_names_of(const ckpt::Loaded& loaded)
{
    const auto& st = loaded.state();
    if (st.contains("concept_names")) {
        return st.at("concept_names").get<std::vector<std::string>>();
    }
    std::vector<std::string> out;
    for (int64_t j = 0; j < loaded.model->spec().m; ++j) {
        out.push_back("c" + std::to_string(j));
    }
    return out;
}

int64_t concept_index(const std::vector<std::string>& names, const std::string& key)
{
    for (std::size_t j = 0; j < names.size(); ++j) {
        if (names[j] == key) {
            return static_cast<int64_t>(j);
        }
    }
    try {
        std::size_t used = 0;
        const auto j = std::stoll(key, &used);
        if (used == key.size() && j >= 0 && j < static_cast<long long>(names.size())) {
            return j;
        }
    } catch (const std::logic_error&) {
    }
    throw UsageError("unknown concept '" + key + "'");
}

/// "name=value,name=value" with names or indices.
std::map<int64_t, double> parse_targets(const std::string& text, const std::vector<std::string>& names)
{
    std::map<int64_t, double> out;
    for (const auto& item : split(text, ',')) {
        const auto eq = item.find('=');
        if (eq == std::string::npos) {
            throw UsageError("target '" + item + "' must look like name=value");
        }
        const double v = parse_double(item.substr(eq + 1));
        if (!(v >= 0.0 && v <= 1.0)) {
            throw UsageError("target values must lie in [0, 1]");
        }
        out[concept_index(names, item.substr(0, eq))] = v;
    }
    if (out.empty()) {
        throw UsageError("no targets given");
    }
    return out;
}

std::string matrix_csv(const torch::Tensor& t)
{
    const auto c = t.detach().to(torch::kFloat64).contiguous();
    const auto acc = c.accessor<double, 2>();
    std::ostringstream os;
    for (int64_t i = 0; i < c.size(0); ++i) {
        for (int64_t j = 0; j < c.size(1); ++j) {
            os << (j == 0 ? "" : ",") << format_sig(acc[i][j], 9);
        }
        os << '\n';
    }
    return os.str();
}

// ---------------------------------------------------------------------------

struct GenArgs {
    std::string dataset;
    std::size_t count = 7000;
    uint64_t seed = 0;
    int size = 64;
    std::string out;
    unsigned threads = 0;
};

int cmd_gen(const GenArgs& a)
{
    const auto kind = scene::parse_kind(a.dataset);
    if (a.size != 32 && a.size != 64) {
        throw UsageError("--size must be 32 or 64");
    }
    if (a.count == 0) {
        throw UsageError("--n must be positive");
    }
    const auto manifest = scene::generate_dataset(kind, a.count, a.seed, a.size, a.out, a.threads);
    stamp(a.out, "gen-data",
          {{"dataset", a.dataset}, {"n", a.count}, {"seed", a.seed}, {"size", a.size}, {"out", a.out}}, a.seed);
    std::cout << "wrote " << manifest.sample_count << " samples to " << a.out << '\n';
    return kOk;
}

struct TrainArgs {
    std::optional<std::string> config;
    std::optional<std::string> dataset;
    std::optional<int> epochs;
    std::optional<uint64_t> seed;
    std::optional<int64_t> batch_size;
    std::optional<double> lr;
    std::optional<double> rho1;
    std::optional<double> rho2;
    std::optional<int64_t> hidden_width;
    std::optional<std::string> structure_mode;
    std::optional<std::string> resume;
    std::string out;
    bool quiet = false;
};

train::TrainConfig effective_train_config(const TrainArgs& a)
{
    train::TrainConfig c;
    if (a.config) {
        c = train::TrainConfig::from_json(read_json_file(*a.config), c);
    }
    if (a.dataset) {
        c.dataset = *a.dataset;
    }
    if (a.epochs) {
        c.epochs = *a.epochs;
    }
    if (a.seed) {
        c.seed = *a.seed;
    }
    if (a.batch_size) {
        c.batch_size = *a.batch_size;
    }
    if (a.lr) {
        c.learning_rate = *a.lr;
    }
    if (a.rho1) {
        c.weights.rho1 = *a.rho1;
    }
    if (a.rho2) {
        c.weights.rho2 = *a.rho2;
    }
    if (a.hidden_width) {
        c.hidden_width = *a.hidden_width;
    }
    if (a.structure_mode) {
        c.structure_mode = train::parse_structure_mode(*a.structure_mode);
    }
    c.validate();
    return c;
}

void add_train_flags(CLI::App* sub, TrainArgs& a)
{
    sub->add_option("--config", a.config, "JSON training config");
    sub->add_option("--dataset", a.dataset, "dataset directory");
    sub->add_option("--epochs", a.epochs, "number of epochs");
    sub->add_option("--seed", a.seed, "random seed");
    sub->add_option("--batch-size", a.batch_size, "minibatch size");
    sub->add_option("--lr", a.lr, "learning rate");
    sub->add_option("--rho1", a.rho1, "weight of the structured KL term");
    sub->add_option("--rho2", a.rho2, "weight of the dependence KL term");
    sub->add_option("--hidden-width", a.hidden_width, "conv channel width");
    sub->add_option("--structure-mode", a.structure_mode, "learned or fixed_true");
    sub->add_option("--out", a.out, "output directory")->required();
    sub->add_flag("--quiet", a.quiet, "suppress per-epoch lines");
}

int cmd_train(const TrainArgs& a)
{
    const auto cfg = effective_train_config(a);
    stamp(a.out, "train", cfg.to_json(), cfg.seed);
    train::TrainOptions opts;
    if (a.resume) {
        opts.resume_from = fs::path(*a.resume);
    }
    if (!a.quiet) {
        opts.on_epoch = [](const train::EpochSummary& s) {
            std::cout << "epoch " << s.epoch << " train " << format_sig(s.train_loss, 6) << " val "
                      << format_sig(s.validation_loss, 6) << " tau " << format_sig(s.temperature, 3)
                      << (s.hard ? " hard" : "") << std::endl;
        };
    }
    const auto result = train::train(cfg, a.out, opts);
    std::cout << "final checkpoint: " << result.final_checkpoint.string() << '\n';
    return kOk;
}

metrics::SplitChoice parse_split(const std::string& s)
{
    if (s == "validation") {
        return metrics::SplitChoice::validation;
    }
    if (s == "train") {
        return metrics::SplitChoice::train;
    }
    if (s == "all") {
        return metrics::SplitChoice::all;
    }
    throw UsageError("--split must be validation, train or all");
}

struct EvalArgs {
    std::string ckpt;
    std::string dataset;
    std::string split = "validation";
    uint64_t seed = 0;
    double tau = control::kDefaultTauA;
    std::string out;
    std::string results;
};

int cmd_eval(const EvalArgs& a)
{
    auto loaded = ckpt::load(a.ckpt);
    const auto ds = data::load_dataset(a.dataset);
    metrics::EvalOptions opts;
    opts.split = parse_split(a.split);
    opts.seed = a.seed;
    opts.tau_a = a.tau;
    const auto report = metrics::evaluate(*loaded.model, ds, opts);
    const auto j = report.to_json();
    std::cout << j.dump(2) << '\n';
    if (!a.out.empty()) {
        stamp(a.out, "eval",
              {{"ckpt", a.ckpt}, {"dataset", a.dataset}, {"split", a.split}, {"seed", a.seed}, {"tau", a.tau}},
              a.seed);
        write_json(fs::path(a.out) / "eval.json", j);
    }
    if (!a.results.empty()) {
        metrics::append_results_csv(a.results, report, a.ckpt, a.dataset);
    }
    return kOk;
}

struct SweepArgs {
    TrainArgs train;
    std::string cells;
    std::string split = "validation";
};

int cmd_sweep(const SweepArgs& a)
{
    const auto cfg = effective_train_config(a.train);
    auto grid = train::default_sweep_grid();
    if (!a.cells.empty()) {
        grid.clear();
        for (const auto& cell : split(a.cells, ';')) {
            const auto parts = split(cell, ',');
            if (parts.size() != 2) {
                throw UsageError("--cells expects 'rho1,rho2;rho1,rho2;...'");
            }
            grid.push_back({parse_double(parts[0]), parse_double(parts[1])});
        }
    }
    json effective = cfg.to_json();
    json cells = json::array();
    for (const auto& c : grid) {
        cells.push_back({c.rho1, c.rho2});
    }
    effective["sweep_cells"] = cells;
    effective["eval_split"] = a.split;
    stamp(a.train.out, "sweep", effective, cfg.seed);
    metrics::EvalOptions opts;
    opts.split = parse_split(a.split);
    opts.seed = cfg.seed;
    const auto rows = train::sensitivity_sweep(cfg, grid, a.train.out, opts, [&](const std::string& msg) {
        if (!a.train.quiet) {
            std::cout << msg << std::endl;
        }
    });
    std::cout << "wrote " << (fs::path(a.train.out) / "sweep.csv").string() << " (" << rows.size() << " cells)\n";
    return kOk;
}

struct ExportArgs {
    std::string ckpt;
    double tau = control::kDefaultTauA;
    std::string out;
};

int cmd_export(const ExportArgs& a)
{
    auto loaded = ckpt::load(a.ckpt);
    const auto& model = *loaded.model;
    const fs::path out = a.out.empty() ? fs::path(a.ckpt) / "structure" : fs::path(a.out);
    stamp(out, "export-structure", {{"ckpt", a.ckpt}, {"tau", a.tau}}, 0);
    const auto adjacency = model.adjacency().detach();
    const auto mask = model.eval_mask().detach();
    std::ofstream(out / "A.csv") << matrix_csv(adjacency);
    std::ofstream(out / "M.csv") << matrix_csv(mask);
    std::ofstream(out / "M_prob.csv") << matrix_csv(model.mask_probabilities());

    const auto names = concept_names_of(loaded);
    std::ostringstream dot;
    dot << "digraph latent {\n  rankdir=LR;\n";
    std::vector<bool> roots;
    bool cyclic = false;
    control::RootSet rs;
    try {
        rs = control::find_roots(adjacency, a.tau);
    } catch (const NumericError&) {
        cyclic = true;
        rs = control::RootSet{};
    }
    const auto n = adjacency.size(0);
    const auto acc = adjacency.to(torch::kFloat64).contiguous();
    const auto av = acc.accessor<double, 2>();
    for (int64_t i = 0; i < n; ++i) {
        const bool root = !cyclic && rs.roots[static_cast<std::size_t>(i)];
        const auto label = i < static_cast<int64_t>(names.size()) ? "w" + std::to_string(i) + "\\n" + names[i]
                                                                  : "w" + std::to_string(i);
        dot << "  w" << i << " [label=\"" << label << "\""
            << (root ? ", shape=doublecircle, style=filled, fillcolor=lightblue" : ", shape=circle") << "];\n";
    }
    for (int64_t i = 0; i < n; ++i) {
        for (int64_t j = 0; j < n; ++j) {
            if (i != j && std::abs(av[i][j]) >= a.tau) {
                dot << "  w" << i << " -> w" << j << " [label=\"" << format_sig(av[i][j], 3) << "\"];\n";
            }
        }
    }
    dot << "}\n";
    std::ofstream(out / "graph.dot") << dot.str();
    json roots_json = json::array();
    if (!cyclic) {
        roots_json = rs.indices();
    }
    write_json(out / "roots.json", {{"tau_a", a.tau}, {"roots", roots_json}, {"cyclic", cyclic}});
    std::cout << "wrote A.csv, M.csv, graph.dot to " << out.string() << '\n';
    return kOk;
}

struct InterveneArgs {
    std::string ckpt;
    std::string dataset;
    int64_t index = 0;
    std::string image;
    int64_t factor = 0;
    std::string values;
    double tau = control::kDefaultTauA;
    std::string out;
};

int cmd_intervene(const InterveneArgs& a)
{
    auto loaded = ckpt::load(a.ckpt);
    auto& model = *loaded.model;
    torch::Tensor base;
    if (!a.image.empty()) {
        const auto img = read_png(a.image);
        base = torch::from_blob(const_cast<float*>(img.pixels.data()), {1, 1, img.height, img.width},
                                torch::kFloat32)
                   .clone();
    } else if (!a.dataset.empty()) {
        const auto ds = data::load_dataset(a.dataset);
        if (a.index < 0 || a.index >= ds.size()) {
            throw UsageError("--index out of range");
        }
        base = ds.images.narrow(0, a.index, 1).clone();
    } else {
        throw UsageError("intervene needs --image or --dataset with --index");
    }
    if (base.size(2) != model.config().image_size || base.size(3) != model.config().image_size) {
        throw DataError("base image size does not match the model");
    }
    std::vector<double> values;
    for (const auto& v : split(a.values, ',')) {
        values.push_back(parse_double(v));
    }
    if (values.empty()) {
        throw UsageError("--values needs at least one number");
    }
    stamp(a.out, "intervene",
          {{"ckpt", a.ckpt}, {"dataset", a.dataset}, {"index", a.index}, {"image", a.image}, {"factor", a.factor},
           {"values", values}, {"tau", a.tau}},
          0);
    const auto tiles = control::traverse(model, base, a.factor, values, a.tau);
    write_png(fs::path(a.out) / "traversal.png", tile_row(tiles, 1, 1.0F));
    write_png(fs::path(a.out) / "base.png", control::to_gray(base));
    write_png(fs::path(a.out) / "reconstruction.png", control::to_gray(control::reconstruct(model, base)));
    write_json(fs::path(a.out) / "traversal.json",
               {{"factor", a.factor}, {"values", values}, {"tiles", tiles.size()}, {"tau_a", a.tau}});
    std::cout << "wrote " << tiles.size() << " tiles to " << (fs::path(a.out) / "traversal.png").string() << '\n';
    return kOk;
}

struct ControlArgs {
    std::string ckpt;
    std::string targets;
    control::OptimizerSettings settings;
    bool stochastic = false;
    std::string out;
};

int cmd_control(ControlArgs a)
{
    auto loaded = ckpt::load(a.ckpt);
    auto& model = *loaded.model;
    const auto names = concept_names_of(loaded);
    const auto targets = parse_targets(a.targets, names);
    a.settings.deterministic = !a.stochastic;
    stamp(a.out, "control",
          {{"ckpt", a.ckpt},
           {"targets", a.targets},
           {"steps", a.settings.steps},
           {"step_size", a.settings.step_size},
           {"restarts", a.settings.restarts},
           {"prior_weight", a.settings.prior_weight},
           {"deterministic", a.settings.deterministic},
           {"tau", a.settings.tau_a},
           {"seed", a.settings.seed}},
          a.settings.seed);
    const auto result = control::concept_control(model, targets, a.settings);
    for (const auto& w : result.inversion.warnings) {
        std::cerr << "warning: " << w << '\n';
    }
    write_png(fs::path(a.out) / "control.png", result.image);
    const auto sidecar = result.to_json(names);
    write_json(fs::path(a.out) / "control.json", sidecar);
    std::cout << sidecar.dump(2) << '\n';
    if (!result.optimum.converged) {
        std::cerr << "warning: root optimisation did not reach objective 1e-2 (best "
                  << format_sig(result.optimum.objective, 4) << ")\n";
    }
    return kOk;
}

} // namespace

int run(const std::vector<std::string>& args)
{
    CLI::App app{"C2VAE: structured latent VAE with a linear SCM and a correlation mask", "c2vae"};
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string(kVersion));

    GenArgs gen;
    auto* gen_cmd = app.add_subcommand("gen-data", "render a synthetic dataset");
    gen_cmd->add_option("--dataset", gen.dataset, "pendulum, flow or dsprites")->required();
    gen_cmd->add_option("--n", gen.count, "number of samples");
    gen_cmd->add_option("--seed", gen.seed, "global seed");
    gen_cmd->add_option("--size", gen.size, "image size (32 or 64)");
    gen_cmd->add_option("--threads", gen.threads, "worker threads (0 = all cores)");
    gen_cmd->add_option("--out", gen.out, "output directory")->required();

    TrainArgs tr;
    auto* train_cmd = app.add_subcommand("train", "train a model");
    add_train_flags(train_cmd, tr);
    train_cmd->add_option("--resume", tr.resume, "checkpoint directory to resume from");

    EvalArgs ev;
    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
    eval_cmd->add_option("--ckpt", ev.ckpt, "checkpoint directory")->required();
    eval_cmd->add_option("--dataset", ev.dataset, "dataset directory")->required();
    eval_cmd->add_option("--split", ev.split, "validation, train or all");
    eval_cmd->add_option("--seed", ev.seed, "seed recorded in the report");
    eval_cmd->add_option("--tau", ev.tau, "adjacency threshold");
    eval_cmd->add_option("--out", ev.out, "directory for eval.json");
    eval_cmd->add_option("--results", ev.results, "CSV file to append a row to");

    SweepArgs sw;
    auto* sweep_cmd = app.add_subcommand("sweep", "train and evaluate a grid of KL weights");
    add_train_flags(sweep_cmd, sw.train);
    sweep_cmd->add_option("--cells", sw.cells, "'rho1,rho2;...' (default: the seven standard cells)");
    sweep_cmd->add_option("--split", sw.split, "evaluation split");

    ExportArgs ex;
    auto* export_cmd = app.add_subcommand("export-structure", "write A, M and a DOT graph");
    export_cmd->add_option("--ckpt", ex.ckpt, "checkpoint directory")->required();
    export_cmd->add_option("--tau", ex.tau, "adjacency threshold");
    export_cmd->add_option("--out", ex.out, "output directory (default: <ckpt>/structure)");

    InterveneArgs iv;
    auto* intervene_cmd = app.add_subcommand("intervene", "factor traversal by do-interventions");
    intervene_cmd->add_option("--ckpt", iv.ckpt, "checkpoint directory")->required();
    intervene_cmd->add_option("--dataset", iv.dataset, "dataset providing the base image");
    intervene_cmd->add_option("--index", iv.index, "sample index of the base image");
    intervene_cmd->add_option("--image", iv.image, "PNG base image");
    intervene_cmd->add_option("--factor", iv.factor, "factor index")->required();
    intervene_cmd->add_option("--values", iv.values, "comma-separated read-out values")->required();
    intervene_cmd->add_option("--tau", iv.tau, "adjacency threshold");
    intervene_cmd->add_option("--out", iv.out, "output directory")->required();

    ControlArgs ct;
    auto* control_cmd = app.add_subcommand("control", "generate an image with requested concept values");
    control_cmd->add_option("--ckpt", ct.ckpt, "checkpoint directory")->required();
    control_cmd->add_option("--targets", ct.targets, "name=value,... in normalised units")->required();
    control_cmd->add_option("--steps", ct.settings.steps, "optimiser steps per restart");
    control_cmd->add_option("--step-size", ct.settings.step_size, "Adam step size");
    control_cmd->add_option("--restarts", ct.settings.restarts, "random restarts");
    control_cmd->add_option("--prior-weight", ct.settings.prior_weight, "weight of the root prior");
    control_cmd->add_option("--tau", ct.settings.tau_a, "adjacency threshold");
    control_cmd->add_option("--seed", ct.settings.seed, "seed for restarts and z");
    control_cmd->add_flag("--stochastic", ct.stochastic, "sample z ~ N(0, I) instead of z = 0");
    control_cmd->add_option("--out", ct.out, "output directory")->required();

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kUsage;
    }

    try {
        if (*gen_cmd) {
            return cmd_gen(gen);
        }
        if (*train_cmd) {
            return cmd_train(tr);
        }
        if (*eval_cmd) {
            return cmd_eval(ev);
        }
        if (*sweep_cmd) {
            return cmd_sweep(sw);
        }
        if (*export_cmd) {
            return cmd_export(ex);
        }
        if (*intervene_cmd) {
            return cmd_intervene(iv);
        }
        if (*control_cmd) {
            return cmd_control(ct);
        }
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << '\n';
        return kUsage;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return kData;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << '\n';
        return kNumeric;
    } catch (const fs::filesystem_error& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return kData;
    } catch (const c10::Error& e) {
        std::cerr << "numeric error: " << e.what_without_backtrace() << '\n';
        return kNumeric;
    }
    return kUsage;
}

int run(int argc, char** argv)
{
    std::vector<std::string> args;
    for (int i = 1; i < argc; ++i) {
        args.emplace_back(argv[i]);
    }
    return run(args);
}

} // namespace c2vae::cli
