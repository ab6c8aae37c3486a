#include "../common/gradcheck.hpp"
#include "../common/oracles.hpp"

#include "c2vae/common.hpp"
#include "c2vae/concept_head.hpp"
#include "c2vae/objectives.hpp"

#include <doctest.h>
#include <torch/torch.h>

#include <cmath>

using namespace c2vae;
using namespace c2vae::loss;

namespace {

const auto kF64 = torch::TensorOptions().dtype(torch::kFloat64);

oracle::Matrix to_matrix(const torch::Tensor& t)
{
    oracle::Matrix m = oracle::zeros(static_cast<std::size_t>(t.size(0)), static_cast<std::size_t>(t.size(1)));
    for (int64_t i = 0; i < t.size(0); ++i) {
        for (int64_t j = 0; j < t.size(1); ++j) {
            m[i][j] = t[i][j].item<double>();
        }
    }
    return m;
}

model::LatentBundle gaussian_bundle(const torch::Tensor& eps_mean, const torch::Tensor& eps_logvar,
                                    const torch::Tensor& z_mean, const torch::Tensor& z_logvar)
{
    model::LatentBundle b;
    b.epsilon_mean = eps_mean;
    b.epsilon_logvar = eps_logvar;
    b.z_mean = z_mean;
    b.z_logvar = z_logvar;
    b.epsilon = eps_mean;
    b.z = z_mean;
    return b;
}

} // namespace

TEST_SUITE("objectives")
{
    TEST_CASE("reconstruction term")
    {
        auto gen = at::make_generator<at::CPUGeneratorImpl>(1);
        const auto x = torch::rand({3, 1, 4, 4}, gen, kF64);
        CHECK(recon_nll(x, x, 0.1).item<double>() == 0.0);
        auto off = x.clone();
        off[0][0][1][2] += 0.1;
        // one image carries 0.5, averaged over three images
        CHECK(recon_nll(x, off, 0.1).item<double>() == doctest::Approx(0.5 / 3.0));
        const auto y = torch::rand({3, 1, 4, 4}, gen, kF64);
        double sum = 0.0;
        const auto xa = x.contiguous();
        const auto ya = y.contiguous();
        for (int64_t i = 0; i < xa.numel(); ++i) {
            const double dlt = xa.data_ptr<double>()[i] - ya.data_ptr<double>()[i];
            sum += dlt * dlt;
        }
        CHECK(std::abs(recon_nll(x, y, 0.2).item<double>() - sum / 3.0 / (2 * 0.04)) <= 1e-9);
        CHECK_THROWS(recon_nll(x, torch::rand({3, 1, 4, 5}, kF64), 0.1));
    }

    TEST_CASE("concept term and Lipschitz penalty")
    {
        const auto grid = model::default_probe_grid(kF64);
        const auto ident = model::make_heads({model::MonotoneHead{}, model::MonotoneHead{}});
        const auto wp = torch::tensor({{0.3, -0.8}}, kF64);
        const auto y = model::concept_predict(ident, wp);
        auto [nll, lip] = concept_nll_and_lip(y, wp, ident, grid, 0.05);
        CHECK(nll.item<double>() == doctest::Approx(0.0).scale(1e-12));
        CHECK(lip.item<double>() == doctest::Approx(0.0).scale(1e-12));

        auto y_off = y.clone();
        y_off[0][1] += 0.05;
        CHECK(concept_nll_and_lip(y_off, wp, ident, grid, 0.05).first.item<double>() == doctest::Approx(0.5));

        model::MonotoneHead twice;
        twice.slope = 2.0;
        const auto mixed = model::make_heads({twice, model::MonotoneHead{}});
        CHECK(concept_nll_and_lip(y, wp, mixed, grid, 0.05).second.item<double>() == doctest::Approx(1.0));
        model::MonotoneHead thrice;
        thrice.slope = 3.0;
        const auto both = model::make_heads({twice, thrice});
        CHECK(concept_nll_and_lip(y, wp, both, grid, 0.05).second.item<double>() == doctest::Approx(std::sqrt(5.0)));
    }

    TEST_CASE("structured KL closed forms")
    {
        const auto zero = torch::zeros({4, 3, 2}, kF64);
        const auto zz = torch::zeros({4, 2, 2}, kF64);
        CHECK(kl_structured(gaussian_bundle(zero, zero, zz, zz)).item<double>() == 0.0);
        auto gen = at::make_generator<at::CPUGeneratorImpl>(2);
        const auto mu = torch::randn({4, 3, 2}, gen, kF64);
        const auto mz = torch::randn({4, 2, 2}, gen, kF64);
        const double expected = (mu.pow(2).sum() + mz.pow(2).sum()).item<double>() / 2.0 / 4.0;
        CHECK(kl_structured(gaussian_bundle(mu, zero, mz, zz)).item<double>() == doctest::Approx(expected));
        auto bad = mu.clone();
        bad[0][0][0] = std::numeric_limits<double>::quiet_NaN();
        CHECK_THROWS_AS(kl_terms(gaussian_bundle(bad, zero, mz, zz)), NumericError);
    }

    TEST_CASE("dependence estimate vanishes for independent blocks")
    {
        // factorised posteriors: broad, overlapping components with means drawn
        // independently per coordinate, so the aggregate is close to a product
        auto gen = at::make_generator<at::CPUGeneratorImpl>(3);
        double total = 0.0;
        const int reps = 20;
        for (int r = 0; r < reps; ++r) {
            const auto em = torch::randn({256, 3, 2}, gen, kF64) * 0.1;
            const auto zm = torch::randn({256, 2, 2}, gen, kF64) * 0.1;
            const auto lv_e = torch::zeros({256, 3, 2}, kF64);
            const auto lv_z = torch::zeros({256, 2, 2}, kF64);
            auto b = gaussian_bundle(em, lv_e, zm, lv_z);
            b.epsilon = em + torch::randn({256, 3, 2}, gen, kF64);
            b.z = zm + torch::randn({256, 2, 2}, gen, kF64);
            const double v = kl_dependence(b).item<double>();
            CHECK(v >= 0.0);
            total += v;
        }
        CHECK(total / reps <= 0.05);

        // a fully dependent pair (z copies ε) is clearly positive
        const auto em = torch::randn({256, 2, 2}, gen, kF64);
        const auto lv = torch::full({256, 2, 2}, std::log(0.01), kF64);
        auto dep = gaussian_bundle(em, lv, em.clone(), lv);
        dep.epsilon = em;
        dep.z = em.clone();
        CHECK(kl_dependence(dep).item<double>() > 1.0);
    }

    TEST_CASE("acyclicity penalty")
    {
        CHECK(dag_penalty(torch::zeros({5, 5}, kF64)).item<double>() == 0.0);
        auto cyc = torch::zeros({2, 2}, kF64);
        cyc[0][1] = 1.0;
        cyc[1][0] = 1.0;
        const double series = oracle::dag_h(to_matrix(cyc), 30);
        CHECK(std::abs(series - (2.0 * std::cosh(1.0) - 2.0)) <= 1e-12);
        CHECK(std::abs(dag_penalty(cyc).item<double>() - series) <= 1e-6);
        CHECK(dag_penalty(cyc).item<double>() == doctest::Approx(1.08616).epsilon(1e-5));

        auto gen = at::make_generator<at::CPUGeneratorImpl>(4);
        for (int i = 0; i < 50; ++i) {
            const auto a = torch::randn({6, 6}, gen, kF64).triu(1) * 2.0;
            REQUIRE(std::abs(dag_penalty(a).item<double>()) <= 1e-9);
            const auto dense = torch::randn({6, 6}, gen, kF64);
            const double h = dag_penalty(dense).item<double>();
            REQUIRE(h >= 0.0);
            REQUIRE(std::abs(h - dag_penalty(-dense).item<double>()) <= 1e-9 * std::max(1.0, h));
        }
        // scaled series agrees with the plain series where the latter converges
        const auto small = torch::randn({5, 5}, gen, kF64) * 0.3;
        CHECK(dag_penalty(small).item<double>() == doctest::Approx(oracle::dag_h(to_matrix(small), 60)).epsilon(1e-10));
    }

    TEST_CASE("mask sparsity term")
    {
        const auto eye = torch::eye(4, 3, kF64);
        CHECK(mask_l1(eye).item<double>() == 0.0);
        auto one = eye.clone();
        one[2][0] = 1.0;
        CHECK(mask_l1(one).item<double>() == 1.0);
        auto gen = at::make_generator<at::CPUGeneratorImpl>(5);
        const auto r = torch::rand({4, 3}, gen, kF64);
        double sum = 0.0;
        for (int64_t i = 0; i < 4; ++i) {
            for (int64_t j = 0; j < std::min<int64_t>(i, 3); ++j) {
                sum += r[i][j].item<double>();
            }
        }
        CHECK(mask_l1(r).item<double>() == doctest::Approx(sum));
    }

    TEST_CASE("total is the weighted recomposition of the report")
    {
        LossTerms t;
        auto s = [](double v) { return torch::tensor(v, kF64); };
        t.recon = s(0);
        t.concept_nll = s(0);
        t.kl_structured = s(0);
        t.kl_tc = s(0);
        t.dag_penalty = s(0);
        t.mask_l1 = s(0);
        t.lip_penalty = s(0);
        CHECK(t.total(LossWeights{}).item<double>() == 0.0);

        Rng rng(6);
        for (int i = 0; i < 20; ++i) {
            t.recon = s(rng.uniform(0, 100));
            t.concept_nll = s(rng.uniform(0, 10));
            t.kl_structured = s(rng.uniform(0, 10));
            t.kl_tc = s(rng.uniform(0, 1));
            t.dag_penalty = s(rng.uniform(0, 1));
            t.mask_l1 = s(rng.uniform(0, 5));
            t.lip_penalty = s(rng.uniform(0, 2));
            LossWeights w{rng.uniform(0, 10), rng.uniform(0, 10), rng.uniform(0, 10), rng.uniform(0, 1),
                          rng.uniform(0, 1), 0.1, 0.05};
            const auto r = t.report(w);
            const double hand = r.recon + r.concept_nll + w.rho1 * r.kl_structured + w.rho2 * r.kl_tc +
                                w.lambda_dag * r.dag_penalty + w.lambda_sparse * r.mask_l1 +
                                w.lambda_lip * r.lip_penalty;
            REQUIRE(std::abs(r.total - hand) <= 1e-6);
            REQUIRE(std::abs(t.total(w).item<double>() - r.total) <= 1e-6);
        }
        LossWeights recon_only{0, 0, 0, 0, 0, 0.1, 0.05};
        CHECK(t.total(recon_only).item<double>() == doctest::Approx(t.recon.item<double>() + t.concept_nll.item<double>()));
        CHECK_THROWS_AS((LossWeights{-1, 1, 1, 1, 1, 0.1, 0.05}.validate()), UsageError);
    }

    TEST_CASE("every term is non-negative and matches finite differences")
    {
        const auto rows = gradcheck::run(1);
        for (const auto& r : rows) {
            INFO(r.term, " / ", r.group, ": analytic ", r.analytic, " numeric ", r.numeric);
            CHECK(r.pass);
        }
    }
}
