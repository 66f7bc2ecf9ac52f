#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <vector>

#include "mmrank/errors.hpp"
#include "mmrank/fqformer.hpp"
#include "testutil.hpp"

using namespace mmrank;
using namespace mmrank::ad;
using testutil::check_gradients;
using testutil::random_vec;

namespace {

std::vector<ModalityToken> make_tokens(Rng& rng, int count, int dim) {
    std::vector<ModalityToken> tokens;
    for (int i = 0; i < count; ++i)
        tokens.push_back({i % 2 == 0 ? Modality::visual : Modality::text,
                          Tensor::constant({dim}, random_vec(rng, size_t(dim)))});
    return tokens;
}

bool bitwise_equal(std::span<const double> a, std::span<const double> b) {
    return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

// Independent plain-double trace of a one-block forward pass, used as the
// oracle for the masked single-token case.
struct LayerOracle {
    int q, d, heads, ff;
    std::vector<double> queries;
    std::vector<double> wq, bq, wk, bk, wv, bv, wo, bo, w1, b1, w2, b2;
    std::vector<double> ln1g, ln1b, ln2g, ln2b, lfg, lfb;

    static std::vector<double> get(const nn::ParamRegistry& reg, const std::string& name) {
        const Tensor* t = reg.find(name);
        REQUIRE(t != nullptr);
        return {t->data().begin(), t->data().end()};
    }

    LayerOracle(const nn::ParamRegistry& reg, const FqFormerConfig& cfg, const std::string& prefix)
        : q(cfg.num_queries), d(cfg.token_dim), heads(cfg.num_heads), ff(cfg.ff_dim) {
        queries = get(reg, prefix + ".queries");
        wq = get(reg, prefix + ".block0.wq.weight");
        bq = get(reg, prefix + ".block0.wq.bias");
        wk = get(reg, prefix + ".block0.wk.weight");
        bk = get(reg, prefix + ".block0.wk.bias");
        wv = get(reg, prefix + ".block0.wv.weight");
        bv = get(reg, prefix + ".block0.wv.bias");
        wo = get(reg, prefix + ".block0.wo.weight");
        bo = get(reg, prefix + ".block0.wo.bias");
        w1 = get(reg, prefix + ".block0.ff1.weight");
        b1 = get(reg, prefix + ".block0.ff1.bias");
        w2 = get(reg, prefix + ".block0.ff2.weight");
        b2 = get(reg, prefix + ".block0.ff2.bias");
        ln1g = get(reg, prefix + ".block0.ln1.gamma");
        ln1b = get(reg, prefix + ".block0.ln1.beta");
        ln2g = get(reg, prefix + ".block0.ln2.gamma");
        ln2b = get(reg, prefix + ".block0.ln2.beta");
        lfg = get(reg, prefix + ".final_ln.gamma");
        lfb = get(reg, prefix + ".final_ln.beta");
    }

    static std::vector<double> ln_rows(const std::vector<double>& x, int rows, int cols,
                                       const std::vector<double>& g, const std::vector<double>& b) {
        std::vector<double> y(x.size());
        for (int i = 0; i < rows; ++i) {
            double mu = 0;
            for (int j = 0; j < cols; ++j) mu += x[size_t(i) * cols + j];
            mu /= cols;
            double var = 0;
            for (int j = 0; j < cols; ++j) {
                double c = x[size_t(i) * cols + j] - mu;
                var += c * c;
            }
            var /= cols;
            double inv = 1.0 / std::sqrt(var + 1e-5);
            for (int j = 0; j < cols; ++j)
                y[size_t(i) * cols + j] = g[size_t(j)] * (x[size_t(i) * cols + j] - mu) * inv + b[size_t(j)];
        }
        return y;
    }

    // y[rows x out] = x[rows x in] * w[in x out] + b
    static std::vector<double> affine(const std::vector<double>& x, int rows, int in,
                                      const std::vector<double>& w, const std::vector<double>& b, int out) {
        std::vector<double> y(size_t(rows) * size_t(out), 0.0);
        for (int i = 0; i < rows; ++i)
            for (int p = 0; p < in; ++p)
                for (int j = 0; j < out; ++j)
                    y[size_t(i) * out + j] += x[size_t(i) * in + p] * w[size_t(p) * out + j];
        for (int i = 0; i < rows; ++i)
            for (int j = 0; j < out; ++j) y[size_t(i) * out + j] += b[size_t(j)];
        return y;
    }

    std::vector<double> run(const std::vector<std::vector<double>>& tokens, bool masked) const {
        int s = q + static_cast<int>(tokens.size());
        std::vector<double> x(size_t(s) * size_t(d));
        std::copy(queries.begin(), queries.end(), x.begin());
        for (size_t t = 0; t < tokens.size(); ++t)
            std::copy(tokens[t].begin(), tokens[t].end(), x.begin() + (size_t(q) + t) * size_t(d));

        auto h = ln_rows(x, s, d, ln1g, ln1b);
        auto qm = affine(h, s, d, wq, bq, d);
        auto km = affine(h, s, d, wk, bk, d);
        auto vm = affine(h, s, d, wv, bv, d);
        int dh = d / heads;
        std::vector<double> attn(size_t(s) * size_t(d), 0.0);
        for (int head = 0; head < heads; ++head) {
            int c0 = head * dh;
            for (int i = 0; i < s; ++i) {
                std::vector<double> scores(static_cast<size_t>(s));
                for (int j = 0; j < s; ++j) {
                    double dotv = 0;
                    for (int c = 0; c < dh; ++c)
                        dotv += qm[size_t(i) * d + c0 + c] * km[size_t(j) * d + c0 + c];
                    scores[size_t(j)] = dotv / std::sqrt(double(dh));
                }
                double mx = -1e300;
                for (int j = 0; j < s; ++j)
                    if (!masked || j >= q) mx = std::max(mx, scores[size_t(j)]);
                double z = 0;
                std::vector<double> p(static_cast<size_t>(s), 0.0);
                for (int j = 0; j < s; ++j)
                    if (!masked || j >= q) z += (p[size_t(j)] = std::exp(scores[size_t(j)] - mx));
                for (int j = 0; j < s; ++j) p[size_t(j)] /= z;
                for (int j = 0; j < s; ++j)
                    for (int c = 0; c < dh; ++c)
                        attn[size_t(i) * d + c0 + c] += p[size_t(j)] * vm[size_t(j) * d + c0 + c];
            }
        }
        auto proj = affine(attn, s, d, wo, bo, d);
        for (size_t i = 0; i < x.size(); ++i) x[i] += proj[i];
        auto h2 = ln_rows(x, s, d, ln2g, ln2b);
        auto f1 = affine(h2, s, d, w1, b1, ff);
        for (double& v : f1) v = std::max(v, 0.0);
        auto f2 = affine(f1, s, ff, w2, b2, d);
        for (size_t i = 0; i < x.size(); ++i) x[i] += f2[i];
        auto y = ln_rows(x, s, d, lfg, lfb);
        return {y.begin(), y.begin() + size_t(q) * size_t(d)};
    }
};

}  // namespace

TEST_CASE("output token count is Q for every (M,K) in the 0..3 grid") {
    FqFormerConfig cfg;
    cfg.token_dim = 16;
    cfg.ff_dim = 32;
    nn::ParamRegistry reg;
    Rng rng(31);
    FqFormer fusion(reg, "fusion", cfg, rng);
    Rng data_rng(32);
    for (int m = 0; m <= 3; ++m)
        for (int k = 0; k <= 3; ++k) {
            auto tokens = make_tokens(data_rng, m + k, cfg.token_dim);
            auto emb = fusion.fuse(tokens);
            CHECK(emb.tokens.shape() == Shape{cfg.num_queries, cfg.token_dim});
            CHECK(emb.flattened.shape() == Shape{cfg.num_queries * cfg.token_dim});
        }
}

TEST_CASE("queries-only input is valid and constant per parameter state") {
    FqFormerConfig cfg;
    cfg.token_dim = 8;
    cfg.ff_dim = 16;
    cfg.num_heads = 2;
    nn::ParamRegistry reg;
    Rng rng(33);
    FqFormer fusion(reg, "fusion", cfg, rng);
    auto a = fusion.fuse({});
    auto b = fusion.fuse({});
    CHECK(bitwise_equal(a.flattened.data(), b.flattened.data()));
}

TEST_CASE("fuse is bitwise invariant under every modality-token permutation") {
    FqFormerConfig cfg;
    cfg.token_dim = 8;
    cfg.ff_dim = 16;
    nn::ParamRegistry reg;
    Rng rng(34);
    FqFormer fusion(reg, "fusion", cfg, rng);
    Rng data_rng(35);
    for (int count = 2; count <= 5; ++count) {
        auto tokens = make_tokens(data_rng, count, cfg.token_dim);
        auto reference = fusion.fuse(tokens);
        std::vector<size_t> idx(tokens.size());
        std::iota(idx.begin(), idx.end(), size_t{0});
        do {
            std::vector<ModalityToken> permuted;
            for (size_t i : idx) permuted.push_back(tokens[i]);
            auto out = fusion.fuse(permuted);
            REQUIRE(bitwise_equal(out.flattened.data(), reference.flattened.data()));
        } while (std::next_permutation(idx.begin(), idx.end()));
    }
}

TEST_CASE("attention rows sum to one within 1e-12 in both modes") {
    FqFormerConfig cfg;
    cfg.token_dim = 8;
    cfg.ff_dim = 16;
    cfg.num_heads = 2;
    nn::ParamRegistry reg;
    Rng rng(36);
    FqFormer fusion(reg, "fusion", cfg, rng);
    Rng data_rng(37);
    auto tokens = make_tokens(data_rng, 3, cfg.token_dim);
    for (FusionMode mode : {FusionMode::standard, FusionMode::masked}) {
        FuseTrace trace;
        fusion.fuse(tokens, mode, &trace);
        REQUIRE(!trace.attention.empty());
        for (const Tensor& probs : trace.attention) {
            for (int i = 0; i < probs.dim(0); ++i) {
                double total = 0;
                for (int j = 0; j < probs.dim(1); ++j) total += probs.at(i, j);
                CHECK(std::fabs(total - 1.0) < 1e-12);
            }
        }
    }
}

TEST_CASE("masked fusion with zero modality tokens is rejected") {
    FqFormerConfig cfg;
    cfg.token_dim = 8;
    cfg.ff_dim = 16;
    cfg.num_heads = 2;
    nn::ParamRegistry reg;
    Rng rng(38);
    FqFormer fusion(reg, "fusion", cfg, rng);
    CHECK_THROWS_AS(fusion.fuse({}, FusionMode::masked), DegenerateInputError);
}

TEST_CASE("masked fusion with one token matches an independent layer trace") {
    FqFormerConfig cfg;
    cfg.num_queries = 2;
    cfg.num_layers = 1;
    cfg.num_heads = 2;
    cfg.token_dim = 8;
    cfg.ff_dim = 16;
    nn::ParamRegistry reg;
    Rng rng(39);
    FqFormer fusion(reg, "fusion", cfg, rng);
    Rng data_rng(40);
    auto tokens = make_tokens(data_rng, 1, cfg.token_dim);

    // renormalized weight is forced onto the single value position
    FuseTrace trace;
    auto out = fusion.fuse(tokens, FusionMode::masked, &trace);
    for (const Tensor& probs : trace.attention)
        for (int i = 0; i < probs.dim(0); ++i) {
            CHECK(probs.at(i, probs.dim(1) - 1) == doctest::Approx(1.0).epsilon(1e-14));
            for (int j = 0; j + 1 < probs.dim(1); ++j) CHECK(probs.at(i, j) == 0.0);
        }

    LayerOracle oracle(reg, cfg, "fusion");
    std::vector<std::vector<double>> tok_data{{tokens[0].vec.data().begin(), tokens[0].vec.data().end()}};
    auto expect = oracle.run(tok_data, true);
    REQUIRE(expect.size() == out.flattened.size());
    for (size_t i = 0; i < expect.size(); ++i)
        CHECK(std::fabs(out.flattened.data()[i] - expect[i]) < 1e-10);

    // and the standard mode agrees with the same oracle unmasked
    auto out_std = fusion.fuse(tokens, FusionMode::standard);
    auto expect_std = oracle.run(tok_data, false);
    for (size_t i = 0; i < expect.size(); ++i)
        CHECK(std::fabs(out_std.flattened.data()[i] - expect_std[i]) < 1e-10);
}

TEST_CASE("masked and standard outputs differ on a random instance") {
    FqFormerConfig cfg;
    cfg.token_dim = 8;
    cfg.ff_dim = 16;
    cfg.num_heads = 2;
    nn::ParamRegistry reg;
    Rng rng(41);
    FqFormer fusion(reg, "fusion", cfg, rng);
    Rng data_rng(42);
    auto tokens = make_tokens(data_rng, 3, cfg.token_dim);
    auto standard = fusion.fuse(tokens, FusionMode::standard);
    auto masked = fusion.fuse(tokens, FusionMode::masked);
    bool any_diff = false;
    for (size_t i = 0; i < standard.flattened.size(); ++i)
        any_diff |= standard.flattened.data()[i] != masked.flattened.data()[i];
    CHECK(any_diff);
}

TEST_CASE("gradient reaches the shared queries after one optimizer step") {
    FqFormerConfig cfg;
    cfg.token_dim = 8;
    cfg.ff_dim = 16;
    cfg.num_heads = 2;
    nn::ParamRegistry reg;
    Rng rng(43);
    FqFormer fusion(reg, "fusion", cfg, rng);
    Rng data_rng(44);
    auto tokens = make_tokens(data_rng, 2, cfg.token_dim);

    std::vector<double> before(fusion.queries().data().begin(), fusion.queries().data().end());
    Tape tape;
    {
        TapeScope scope(tape);
        tape.backward(sum(fusion.fuse(tokens).flattened));
    }
    nn::Adam opt;
    opt.step(reg);
    bool changed = false;
    for (size_t i = 0; i < before.size(); ++i) changed |= before[i] != fusion.queries().data()[i];
    CHECK(changed);
}

TEST_CASE("full finite-difference gradient check through fuse at Q=2 L=1 h=2 d=8") {
    FqFormerConfig cfg;
    cfg.num_queries = 2;
    cfg.num_layers = 1;
    cfg.num_heads = 2;
    cfg.token_dim = 8;
    cfg.ff_dim = 16;
    nn::ParamRegistry reg;
    Rng rng(45);
    FqFormer fusion(reg, "fusion", cfg, rng);
    Rng data_rng(46);

    std::vector<ModalityToken> tokens;
    tokens.push_back({Modality::visual, Tensor::param({8}, random_vec(data_rng, 8))});
    tokens.push_back({Modality::text, Tensor::param({8}, random_vec(data_rng, 8))});

    std::vector<Tensor> params;
    for (auto& [name, t] : reg.items()) params.push_back(t);
    for (auto& t : tokens) params.push_back(t.vec);

    auto w = random_vec(data_rng, 16);
    for (FusionMode mode : {FusionMode::standard, FusionMode::masked}) {
        auto res = check_gradients(params, [&] {
            return dot(fusion.fuse(tokens, mode).flattened, Tensor::constant({16}, w));
        });
        CAPTURE(res.worst);
        CHECK(res.max_rel_err < 1e-4);
    }
}
