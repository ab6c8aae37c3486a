#include "c2vae/metrics.hpp"

#include "c2vae/common.hpp"
#include "c2vae/structure.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

namespace c2vae::metrics {

double psnr(const torch::Tensor& reference, const torch::Tensor& reconstruction)
{
    if (reference.sizes() != reconstruction.sizes()) {
        throw UsageError("psnr: shape mismatch");
    }
    const auto a = reference.detach().to(torch::kFloat64).flatten(1);
    const auto b = reconstruction.detach().to(torch::kFloat64).flatten(1);
    const auto mse = (a - b).pow(2).mean(1);
    const auto acc = mse.contiguous();
    const auto* p = acc.data_ptr<double>();
    double total = 0.0;
    for (int64_t i = 0; i < acc.numel(); ++i) {
        const double value = p[i] > 0.0 ? -10.0 * std::log10(p[i]) : kPsnrCap;
        total += std::min(value, kPsnrCap);
    }
    return total / static_cast<double>(acc.numel());
}

MaeResult concept_mae(const torch::Tensor& predicted, const torch::Tensor& labels)
{
    if (predicted.sizes() != labels.sizes() || predicted.dim() != 2) {
        throw UsageError("concept_mae: expected matching (N, m) tensors");
    }
    if (predicted.size(0) == 0) {
        throw DataError("concept_mae: empty split");
    }
    const auto per = (predicted.detach().to(torch::kFloat64) - labels.detach().to(torch::kFloat64))
                         .abs()
                         .mean(0)
                         .contiguous();
    MaeResult r;
    r.per_concept.assign(per.data_ptr<double>(), per.data_ptr<double>() + per.numel());
    for (const double v : r.per_concept) {
        r.mean += v;
    }
    r.mean /= static_cast<double>(r.per_concept.size());
    return r;
}

namespace {

std::vector<int> bin_column(const std::vector<double>& x, int bins, bool& constant)
{
    const auto [lo_it, hi_it] = std::minmax_element(x.begin(), x.end());
    const double lo = *lo_it;
    const double hi = *hi_it;
    constant = !(hi > lo);
    std::vector<int> out(x.size(), 0);
    if (constant) {
        return out;
    }
    const double width = (hi - lo) / bins;
    for (std::size_t i = 0; i < x.size(); ++i) {
        out[i] = std::min(bins - 1, static_cast<int>((x[i] - lo) / width));
    }
    return out;
}

double entropy_of_counts(const std::vector<double>& counts, double total)
{
    double h = 0.0;
    for (const double c : counts) {
        if (c > 0.0) {
            const double p = c / total;
            h -= p * std::log(p);
        }
    }
    return h;
}

std::vector<double> column(const torch::Tensor& t, int64_t j)
{
    const auto c = t.detach().to(torch::kFloat64).select(1, j).contiguous();
    return {c.data_ptr<double>(), c.data_ptr<double>() + c.numel()};
}

} // namespace

double histogram_entropy(const std::vector<double>& x, int bins)
{
    if (x.empty()) {
        return 0.0;
    }
    bool constant = false;
    const auto b = bin_column(x, bins, constant);
    std::vector<double> counts(static_cast<std::size_t>(bins), 0.0);
    for (const int v : b) {
        counts[static_cast<std::size_t>(v)] += 1.0;
    }
    return entropy_of_counts(counts, static_cast<double>(x.size()));
}

double histogram_mi(const std::vector<double>& x, const std::vector<double>& y, int bins)
{
    if (x.size() != y.size()) {
        throw UsageError("histogram_mi: length mismatch");
    }
    if (x.empty()) {
        return 0.0;
    }
    bool cx = false;
    bool cy = false;
    const auto bx = bin_column(x, bins, cx);
    const auto by = bin_column(y, bins, cy);
    if (cx || cy) {
        return 0.0;
    }
    const auto nb = static_cast<std::size_t>(bins);
    std::vector<double> joint(nb * nb, 0.0);
    std::vector<double> px(nb, 0.0);
    std::vector<double> py(nb, 0.0);
    for (std::size_t i = 0; i < x.size(); ++i) {
        joint[static_cast<std::size_t>(bx[i]) * nb + static_cast<std::size_t>(by[i])] += 1.0;
        px[static_cast<std::size_t>(bx[i])] += 1.0;
        py[static_cast<std::size_t>(by[i])] += 1.0;
    }
    const double total = static_cast<double>(x.size());
    const double mi = entropy_of_counts(px, total) + entropy_of_counts(py, total) - entropy_of_counts(joint, total);
    return std::max(mi, 0.0);
}

AvgMiResult avg_mi(const torch::Tensor& readouts, const torch::Tensor& labels,
                   const std::vector<std::vector<int>>& mask_gt, int bins)
{
    if (readouts.dim() != 2 || labels.dim() != 2 || readouts.size(0) != labels.size(0)) {
        throw UsageError("avg_mi: expected (N, n) read-outs and (N, m) labels");
    }
    if (readouts.size(0) < 2000) {
        throw DataError("avg_mi needs at least 2000 samples (got " + std::to_string(readouts.size(0)) + ")");
    }
    const auto n = readouts.size(1);
    const auto m = labels.size(1);
    if (static_cast<int64_t>(mask_gt.size()) > n) {
        throw UsageError("avg_mi: ground-truth mask has more rows than factors");
    }
    AvgMiResult out;
    out.mi_normalized.assign(static_cast<std::size_t>(n), std::vector<double>(static_cast<std::size_t>(m), 0.0));
    std::vector<std::vector<double>> r_cols;
    std::vector<double> r_entropy;
    for (int64_t i = 0; i < n; ++i) {
        r_cols.push_back(column(readouts, i));
        r_entropy.push_back(histogram_entropy(r_cols.back(), bins));
        if (r_entropy.back() == 0.0) {
            out.warnings.push_back("factor " + std::to_string(i) + " read-out is constant; its MI is set to 0");
        }
    }
    double sum_sq = 0.0;
    for (int64_t j = 0; j < m; ++j) {
        const auto y = column(labels, j);
        const double hy = histogram_entropy(y, bins);
        if (hy == 0.0) {
            out.warnings.push_back("concept " + std::to_string(j) + " is constant; its MI is set to 0");
        }
        for (int64_t i = 0; i < n; ++i) {
            const double denom = std::min(r_entropy[static_cast<std::size_t>(i)], hy);
            double value = 0.0;
            if (denom > 0.0) {
                value = std::clamp(histogram_mi(r_cols[static_cast<std::size_t>(i)], y, bins) / denom, 0.0, 1.0);
            }
            out.mi_normalized[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = value;
            double target = 0.0;
            if (i < static_cast<int64_t>(mask_gt.size())) {
                target = mask_gt[static_cast<std::size_t>(i)].at(static_cast<std::size_t>(j));
            }
            sum_sq += (value - target) * (value - target);
        }
    }
    out.value = std::sqrt(sum_sq);
    return out;
}

StructureScores structure_scores(const torch::Tensor& adjacency, const torch::Tensor& hard_mask,
                                 const scene::GroundTruthStructure& truth, double tau_a)
{
    const auto m = static_cast<int64_t>(truth.concept_count());
    if (adjacency.dim() != 2 || adjacency.size(0) != adjacency.size(1) || adjacency.size(0) < m) {
        throw UsageError("structure_scores: adjacency must be n x n with n >= m");
    }
    if (hard_mask.dim() != 2 || hard_mask.size(0) != adjacency.size(0) || hard_mask.size(1) != m) {
        throw UsageError("structure_scores: mask must be n x m");
    }
    const auto a = adjacency.detach().to(torch::kFloat64).contiguous();
    const auto acc = a.accessor<double, 2>();
    auto learned = [&](int64_t i, int64_t j) { return i != j && std::abs(acc[i][j]) >= tau_a; };
    auto actual = [&](int64_t i, int64_t j) { return truth.adjacency_gt.at(i).at(j) != 0; };

    StructureScores s;
    for (int64_t i = 0; i < m; ++i) {
        for (int64_t j = i + 1; j < m; ++j) {
            if (learned(i, j) != actual(i, j) || learned(j, i) != actual(j, i)) {
                ++s.shd;
            }
        }
    }

    const auto mk = hard_mask.detach().to(torch::kFloat64).contiguous();
    const auto macc = mk.accessor<double, 2>();
    int tp = 0;
    int fp = 0;
    int fn = 0;
    for (int64_t i = 0; i < mk.size(0); ++i) {
        for (int64_t j = 0; j < std::min(i, m); ++j) {
            const bool predicted = macc[i][j] > 0.5;
            const bool gt = i < static_cast<int64_t>(truth.mask_gt.size()) && truth.mask_gt[i].at(j) != 0;
            tp += static_cast<int>(predicted && gt);
            fp += static_cast<int>(predicted && !gt);
            fn += static_cast<int>(!predicted && gt);
        }
    }
    s.mask_f1 = (tp + fp + fn == 0) ? 1.0 : 2.0 * tp / static_cast<double>(2 * tp + fp + fn);
    return s;
}

nlohmann::json EvalReport::to_json() const
{
    nlohmann::json mae_json = nlohmann::json::object();
    for (std::size_t j = 0; j < mae.size(); ++j) {
        mae_json[j < concept_names.size() ? concept_names[j] : std::to_string(j)] = mae[j];
    }
    return {{"psnr_db", psnr_db},
            {"mae", mae_json},
            {"mae_mean", mae_mean},
            {"avg_mi", avg_mi ? nlohmann::json(*avg_mi) : nlohmann::json(nullptr)},
            {"shd", shd},
            {"mask_f1", mask_f1},
            {"fid", "n/a"},
            {"sample_count", sample_count},
            {"seed", seed}};
}

std::string EvalReport::csv_header()
{
    return "checkpoint,dataset,seed,sample_count,psnr_db,mae_mean,avg_mi,shd,mask_f1";
}

std::string EvalReport::csv_row(const std::string& checkpoint, const std::string& dataset) const
{
    std::ostringstream os;
    os << checkpoint << ',' << dataset << ',' << seed << ',' << sample_count << ',' << format_sig(psnr_db, 9) << ','
       << format_sig(mae_mean, 9) << ',' << (avg_mi ? format_sig(*avg_mi, 9) : std::string("nan")) << ',' << shd
       << ',' << format_sig(mask_f1, 9);
    return os.str();
}

EvalReport evaluate(model::C2VaeImpl& model, const data::Dataset& dataset, const EvalOptions& options)
{
    const auto count = dataset.size();
    if (count == 0) {
        throw DataError("evaluate: empty dataset");
    }
    if (dataset.concept_count() != model.spec().m) {
        throw DataError("evaluate: dataset has " + std::to_string(dataset.concept_count()) +
                        " concepts, model expects " + std::to_string(model.spec().m));
    }
    torch::NoGradGuard guard;
    const bool was_training = model.is_training();
    model.eval();
    const auto dtype = model.mask_logits.scalar_type();
    std::vector<torch::Tensor> recon;
    std::vector<torch::Tensor> predicted;
    std::vector<torch::Tensor> readouts;
    for (int64_t start = 0; start < count; start += options.batch_size) {
        const auto len = std::min(options.batch_size, count - start);
        const auto images = dataset.images.narrow(0, start, len).to(dtype);
        const auto out = model.forward(images, model::ForwardOptions{});
        recon.push_back(out.reconstruction.to(torch::kFloat32));
        predicted.push_back(out.concepts.to(torch::kFloat32));
        readouts.push_back(model.readout_values(out.latents.w).to(torch::kFloat64));
    }
    model.train(was_training);
    const auto all_recon = torch::cat(recon);
    const auto all_pred = torch::cat(predicted);
    const auto all_read = torch::cat(readouts);

    std::vector<int64_t> rows;
    const auto split = data::split_indices(count);
    switch (options.split) {
    case SplitChoice::validation: rows = split.validation; break;
    case SplitChoice::train: rows = split.train; break;
    case SplitChoice::all:
        rows.resize(static_cast<std::size_t>(count));
        std::iota(rows.begin(), rows.end(), 0);
        break;
    }
    if (rows.empty()) {
        throw DataError("evaluate: the selected split is empty");
    }

    EvalReport r;
    r.seed = options.seed;
    r.sample_count = static_cast<int64_t>(rows.size());
    r.concept_names = dataset.manifest.structure.concept_names;
    r.psnr_db = psnr(data::gather_rows(dataset.images, rows), data::gather_rows(all_recon, rows));
    const auto mae = concept_mae(data::gather_rows(all_pred, rows), data::gather_rows(dataset.concepts, rows));
    r.mae = mae.per_concept;
    r.mae_mean = mae.mean;
    if (count >= 2000) {
        r.avg_mi = avg_mi(all_read, dataset.concepts, dataset.manifest.structure.mask_gt).value;
    }
    const auto scores =
        structure_scores(model.adjacency().detach(), model.eval_mask(), dataset.manifest.structure, options.tau_a);
    r.shd = scores.shd;
    r.mask_f1 = scores.mask_f1;
    return r;
}

void append_results_csv(const std::filesystem::path& path, const EvalReport& report, const std::string& checkpoint,
                        const std::string& dataset)
{
    const bool fresh = !std::filesystem::exists(path);
    std::ofstream out(path, std::ios::app);
    if (fresh) {
        out << EvalReport::csv_header() << '\n';
    }
    out << report.csv_row(checkpoint, dataset) << '\n';
}

} // namespace c2vae::metrics
