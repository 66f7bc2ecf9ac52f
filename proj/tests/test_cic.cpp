#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "mmrank/cic.hpp"
#include "mmrank/errors.hpp"
#include "testutil.hpp"

using namespace mmrank;
using namespace mmrank::ad;
using testutil::check_gradients;
using testutil::random_vec;

namespace {

// Brute-force evaluation of the directional loss at extended precision.
long double brute_force_direction(const std::vector<std::vector<double>>& anchors,
                                  const std::vector<std::vector<double>>& others,
                                  const std::vector<std::vector<int>>& negatives, long double tau) {
    auto cosine = [](const std::vector<double>& a, const std::vector<double>& b) {
        long double d = 0, na = 0, nb = 0;
        for (size_t i = 0; i < a.size(); ++i) {
            d += (long double)a[i] * b[i];
            na += (long double)a[i] * a[i];
            nb += (long double)b[i] * b[i];
        }
        return d / ((sqrtl(na) + 1e-12L) * (sqrtl(nb) + 1e-12L));
    };
    long double total = 0;
    for (size_t i = 0; i < anchors.size(); ++i) {
        long double pos = expl(cosine(anchors[i], others[i]) / tau);
        long double denom = pos;
        for (int j : negatives[i]) denom += expl(cosine(anchors[i], others[size_t(j)]) / tau);
        total += -logl(pos / denom);
    }
    return total / (long double)anchors.size();
}

std::vector<Tensor> to_tensors(const std::vector<std::vector<double>>& rows) {
    std::vector<Tensor> out;
    for (const auto& r : rows) out.push_back(Tensor::constant({static_cast<int>(r.size())}, r));
    return out;
}

NegativeSets empty_negatives(int batch) {
    NegativeSets sets;
    sets.content_to_id.assign(size_t(batch), {});
    sets.id_to_content.assign(size_t(batch), {});
    return sets;
}

}  // namespace

TEST_CASE("negative sampling: forced choice, anchor exclusion, uniformity") {
    Rng rng(1);
    // B=2, H=1: the only legal negative for anchor 0 is 1
    for (int trial = 0; trial < 50; ++trial) {
        auto picks = sample_negatives(0, 2, 1, rng);
        REQUIRE(picks.size() == 1);
        CHECK(picks[0] == 1);
    }
    // anchor never appears among its own negatives
    for (int trial = 0; trial < 1000; ++trial) {
        int anchor = int(rng.uniform_int(8));
        auto picks = sample_negatives(anchor, 8, 3, rng);
        for (int p : picks) {
            CHECK(p != anchor);
            CHECK(p >= 0);
            CHECK(p < 8);
        }
    }
    // distinctness
    for (int trial = 0; trial < 200; ++trial) {
        auto picks = sample_negatives(2, 8, 7, rng);
        std::vector<int> sorted = picks;
        std::sort(sorted.begin(), sorted.end());
        CHECK(std::adjacent_find(sorted.begin(), sorted.end()) == sorted.end());
    }
    // marginal inclusion of each non-anchor is ~ H/(B-1) = 3/7
    const int draws = 100000;
    std::vector<int> counts(8, 0);
    for (int trial = 0; trial < draws; ++trial)
        for (int p : sample_negatives(0, 8, 3, rng)) ++counts[size_t(p)];
    double p = 3.0 / 7.0;
    double sigma = std::sqrt(draws * p * (1 - p));
    for (int i = 1; i < 8; ++i) CHECK(std::fabs(counts[size_t(i)] - draws * p) < 3 * sigma);

    CHECK_THROWS_AS(sample_negatives(0, 4, 4, rng), ConfigError);
}

TEST_CASE("H=0 gives exactly zero loss") {
    Rng rng(2);
    std::vector<std::vector<double>> c, ids;
    for (int i = 0; i < 3; ++i) {
        c.push_back(random_vec(rng, 5));
        ids.push_back(random_vec(rng, 5));
    }
    auto ct = to_tensors(c);
    auto it = to_tensors(ids);
    auto losses = cic_loss(ct, it, CicConfig{1.0, 0.1, 0}, empty_negatives(3));
    CHECK(losses.content_to_id.item() == 0.0);
    CHECK(losses.id_to_content.item() == 0.0);
    CHECK(losses.combined.item() == 0.0);
}

TEST_CASE("B=2 closed form: orthonormal pairs at tau=1 give -log(e/(e+1)) per direction") {
    std::vector<std::vector<double>> c{{1, 0}, {0, 1}};
    std::vector<std::vector<double>> ids{{1, 0}, {0, 1}};
    NegativeSets sets;
    sets.content_to_id = {{1}, {0}};
    sets.id_to_content = {{1}, {0}};
    auto losses = cic_loss(to_tensors(c), to_tensors(ids), CicConfig{1.0, 0.1, 1}, sets);
    double want = std::log1p(std::exp(-1.0));  // = -log(e/(e+1)) ~= 0.31326
    CHECK(losses.content_to_id.item() == doctest::Approx(want).epsilon(1e-9));
    CHECK(losses.id_to_content.item() == doctest::Approx(want).epsilon(1e-9));
    CHECK(std::fabs(losses.content_to_id.item() - 0.31326) < 1e-5);
    CHECK(losses.combined.item() == doctest::Approx(want).epsilon(1e-9));
}

TEST_CASE("B=4 H=2 random batches match the brute-force oracle within 1e-10") {
    for (uint64_t seed = 1; seed <= 10; ++seed) {
        Rng rng(seed * 7);
        std::vector<std::vector<double>> c, ids;
        for (int i = 0; i < 4; ++i) {
            auto cv = random_vec(rng, 6);
            auto iv = random_vec(rng, 6);
            // unit vectors, as in the spec example
            double nc = 0, ni = 0;
            for (double v : cv) nc += v * v;
            for (double v : iv) ni += v * v;
            for (double& v : cv) v /= std::sqrt(nc);
            for (double& v : iv) v /= std::sqrt(ni);
            c.push_back(cv);
            ids.push_back(iv);
        }
        Rng neg_rng(seed * 31);
        auto sets = sample_negative_sets(4, 2, neg_rng);
        CicConfig cfg{0.1, 0.1, 2};
        auto losses = cic_loss(to_tensors(c), to_tensors(ids), cfg, sets);
        long double want_c2i = brute_force_direction(c, ids, sets.content_to_id, 0.1L);
        long double want_i2c = brute_force_direction(ids, c, sets.id_to_content, 0.1L);
        CHECK(std::fabs(losses.content_to_id.item() - (double)want_c2i) < 1e-10);
        CHECK(std::fabs(losses.id_to_content.item() - (double)want_i2c) < 1e-10);
        CHECK(std::fabs(losses.combined.item() - 0.5 * (double)(want_c2i + want_i2c)) < 1e-10);
    }
}

TEST_CASE("loss is invariant to rescaling any single embedding by a positive scalar") {
    Rng rng(5);
    std::vector<std::vector<double>> c, ids;
    for (int i = 0; i < 4; ++i) {
        c.push_back(random_vec(rng, 5));
        ids.push_back(random_vec(rng, 5));
    }
    Rng neg_rng(6);
    auto sets = sample_negative_sets(4, 2, neg_rng);
    CicConfig cfg{0.5, 0.1, 2};
    double base = cic_loss(to_tensors(c), to_tensors(ids), cfg, sets).combined.item();
    for (double& v : c[1]) v *= 3.0;
    double scaled = cic_loss(to_tensors(c), to_tensors(ids), cfg, sets).combined.item();
    CHECK(std::fabs(base - scaled) < 1e-10);
}

TEST_CASE("loss is strictly positive whenever negatives exist with finite similarity") {
    for (uint64_t seed = 1; seed <= 10; ++seed) {
        Rng rng(seed);
        std::vector<std::vector<double>> c, ids;
        for (int i = 0; i < 3; ++i) {
            c.push_back(random_vec(rng, 4));
            ids.push_back(random_vec(rng, 4));
        }
        Rng neg_rng(seed + 100);
        auto sets = sample_negative_sets(3, 1, neg_rng);
        auto losses = cic_loss(to_tensors(c), to_tensors(ids), CicConfig{0.2, 0.1, 1}, sets);
        CHECK(losses.content_to_id.item() > 0.0);
        CHECK(losses.id_to_content.item() > 0.0);
    }
}

TEST_CASE("lower temperature sharpens a well-separated instance") {
    // positive pairs aligned, negatives orthogonal
    std::vector<std::vector<double>> c{{1, 0, 0}, {0, 1, 0}};
    std::vector<std::vector<double>> ids{{1, 0, 0}, {0, 1, 0}};
    NegativeSets sets;
    sets.content_to_id = {{1}, {0}};
    sets.id_to_content = {{1}, {0}};
    double sharp = cic_loss(to_tensors(c), to_tensors(ids), CicConfig{0.1, 0.1, 1}, sets).combined.item();
    double soft = cic_loss(to_tensors(c), to_tensors(ids), CicConfig{1.0, 0.1, 1}, sets).combined.item();
    CHECK(sharp < soft);
}

TEST_CASE("temperature must be positive") {
    std::vector<std::vector<double>> c{{1, 0}, {0, 1}};
    auto ct = to_tensors(c);
    CHECK_THROWS_AS(cic_loss(ct, ct, CicConfig{0.0, 0.1, 0}, empty_negatives(2)), ConfigError);
    CHECK_THROWS_AS(cic_loss(ct, ct, CicConfig{-1.0, 0.1, 0}, empty_negatives(2)), ConfigError);
}

TEST_CASE("one gradient step on the contrastive loss raises mean positive similarity") {
    nn::ParamRegistry reg;
    Rng rng(9);
    auto proj = make_cic_projection(reg, "cic", 6, 4, 5, rng, 0.3);
    Rng data_rng(10);
    std::vector<std::vector<double>> contents, bundles;
    for (int i = 0; i < 4; ++i) {
        contents.push_back(random_vec(data_rng, 6));
        bundles.push_back(random_vec(data_rng, 4));
    }
    auto eval_mean_pos = [&] {
        double total = 0;
        for (int i = 0; i < 4; ++i) {
            auto [ci, ii] = project_pair(Tensor::constant({6}, contents[size_t(i)]),
                                         Tensor::constant({4}, bundles[size_t(i)]), proj);
            total += cosine_similarity(ci, ii).item();
        }
        return total / 4;
    };
    double before = eval_mean_pos();

    Rng neg_rng(11);
    auto sets = sample_negative_sets(4, 3, neg_rng);
    Tape tape;
    {
        TapeScope scope(tape);
        std::vector<Tensor> cs, is;
        for (int i = 0; i < 4; ++i) {
            auto [ci, ii] = project_pair(Tensor::constant({6}, contents[size_t(i)]),
                                         Tensor::constant({4}, bundles[size_t(i)]), proj);
            cs.push_back(ci);
            is.push_back(ii);
        }
        auto losses = cic_loss(cs, is, CicConfig{0.5, 0.1, 3}, sets);
        tape.backward(losses.combined);
    }
    nn::Adam opt(nn::AdamConfig{.lr = 1e-2});
    opt.step(reg);
    double after = eval_mean_pos();
    CHECK(after > before);
}

TEST_CASE("combine_loss arithmetic and ablation identity") {
    Tensor lr = Tensor::scalar(0.7);
    Tensor lc = Tensor::scalar(0.3);
    CHECK(combine_loss(lr, lc, 0.0).item() == 0.7);  // alpha=0 recovers the pure ranking loss
    CHECK(combine_loss(lr, lc, 0.1).item() == doctest::Approx(0.73).epsilon(1e-12));
}

TEST_CASE("total-loss gradient splits additively across the two terms") {
    nn::ParamRegistry reg;
    Rng rng(12);
    auto proj = make_cic_projection(reg, "cic", 4, 3, 4, rng, 0.3);
    Rng data_rng(13);
    std::vector<std::vector<double>> contents, bundles;
    for (int i = 0; i < 3; ++i) {
        contents.push_back(random_vec(data_rng, 4));
        bundles.push_back(random_vec(data_rng, 3));
    }
    Tensor shared = Tensor::param({4}, random_vec(data_rng, 4));
    Rng neg_rng(14);
    auto sets = sample_negative_sets(3, 1, neg_rng);
    const double alpha = 0.25;

    auto forward_ranking = [&] { return mean(mul(shared, shared)); };
    auto forward_cic = [&] {
        std::vector<Tensor> cs, is;
        for (int i = 0; i < 3; ++i) {
            Tensor content = add(Tensor::constant({4}, contents[size_t(i)]), shared);
            auto [ci, ii] = project_pair(content, Tensor::constant({3}, bundles[size_t(i)]), proj);
            cs.push_back(ci);
            is.push_back(ii);
        }
        return cic_loss(cs, is, CicConfig{0.5, alpha, 1}, sets).combined;
    };

    auto grad_of = [&](const std::function<Tensor()>& f) {
        Tape tape;
        {
            TapeScope scope(tape);
            tape.backward(f());
        }
        std::vector<double> g(shared.grad().begin(), shared.grad().end());
        shared.zero_grad();
        reg.zero_grads();
        return g;
    };

    auto g_total = grad_of([&] { return combine_loss(forward_ranking(), forward_cic(), alpha); });
    auto g_rank = grad_of(forward_ranking);
    auto g_cic = grad_of(forward_cic);
    for (size_t i = 0; i < g_total.size(); ++i)
        CHECK(g_total[i] == doctest::Approx(g_rank[i] + alpha * g_cic[i]).epsilon(1e-10));
}

TEST_CASE("projection pair outputs share a dimension and support identity config") {
    nn::ParamRegistry reg;
    Rng rng(15);
    auto proj = make_cic_projection(reg, "cic", 4, 4, 4, rng, 0.3);
    // identity-initialized square projections pass inputs through
    for (auto* lin : {&proj.content_fc, &proj.id_fc}) {
        auto w = lin->weight.raw_data();
        std::fill(w.begin(), w.end(), 0.0);
        for (int i = 0; i < 4; ++i) w[size_t(i) * 4 + size_t(i)] = 1.0;
    }
    Rng data_rng(16);
    auto cv = random_vec(data_rng, 4);
    auto iv = random_vec(data_rng, 4);
    auto [ci, ii] = project_pair(Tensor::constant({4}, cv), Tensor::constant({4}, iv), proj);
    CHECK(ci.shape() == ii.shape());
    for (int i = 0; i < 4; ++i) {
        CHECK(ci.data()[size_t(i)] == cv[size_t(i)]);
        CHECK(ii.data()[size_t(i)] == iv[size_t(i)]);
    }

    // gradient check through both projections
    nn::ParamRegistry reg2;
    auto proj2 = make_cic_projection(reg2, "cic", 5, 3, 4, rng, 0.3);
    Tensor content = Tensor::param({5}, random_vec(data_rng, 5));
    Tensor bundle = Tensor::param({3}, random_vec(data_rng, 3));
    std::vector<Tensor> params{content, bundle, proj2.content_fc.weight, proj2.id_fc.weight};
    auto res = check_gradients(params, [&] {
        auto [c, i] = project_pair(content, bundle, proj2);
        return cosine_similarity(c, i);
    });
    CHECK(res.max_rel_err < 1e-4);
}
