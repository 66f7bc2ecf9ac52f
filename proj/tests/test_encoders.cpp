#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>

#include "mmrank/encoders.hpp"
#include "mmrank/errors.hpp"
#include "testutil.hpp"

using namespace mmrank;
using namespace mmrank::ad;
using testutil::check_gradients;
using testutil::random_vec;

namespace {

RawItemContent random_content(Rng& rng, const StubEncoderConfig& cfg, int m, int k) {
    RawItemContent raw;
    raw.item_id = 1;
    for (int i = 0; i < m; ++i) raw.images.push_back(random_vec(rng, size_t(cfg.raw_visual_dim)));
    for (int i = 0; i < k; ++i) raw.texts.push_back(random_vec(rng, size_t(cfg.raw_text_dim)));
    return raw;
}

}  // namespace

TEST_CASE("stub encoding is deterministic and reproducible across instances") {
    StubEncoderConfig cfg;
    StubEncoder enc_a(cfg), enc_b(cfg);
    Rng rng(1);
    auto raw = random_vec(rng, size_t(cfg.raw_visual_dim));
    auto out1 = enc_a.encode(Modality::visual, raw);
    auto out2 = enc_a.encode(Modality::visual, raw);
    auto out3 = enc_b.encode(Modality::visual, raw);  // fresh instance, same seed
    CHECK(std::memcmp(out1.values.data(), out2.values.data(), out1.values.size() * sizeof(double)) == 0);
    CHECK(std::memcmp(out1.values.data(), out3.values.data(), out1.values.size() * sizeof(double)) == 0);
    CHECK(enc_a.fingerprint() == enc_b.fingerprint());

    StubEncoderConfig other = cfg;
    other.seed = cfg.seed + 1;
    CHECK(StubEncoder(other).fingerprint() != enc_a.fingerprint());
}

TEST_CASE("zero raw vector maps to the fixed bias image, nonzero in general") {
    StubEncoderConfig cfg;
    StubEncoder enc(cfg);
    std::vector<double> zeros(size_t(cfg.raw_text_dim), 0.0);
    auto out = enc.encode(Modality::text, zeros);
    double norm = 0;
    for (double v : out.values) norm += v * v;
    CHECK(norm > 0.0);  // tanh of the bias vector
}

TEST_CASE("stub encoder rejects wrong raw dimension") {
    StubEncoder enc(StubEncoderConfig{});
    std::vector<double> bad(3, 0.0);
    CHECK_THROWS_AS(enc.encode(Modality::visual, bad), DimensionError);
}

TEST_CASE("projection yields one token of width d per modality") {
    StubEncoderConfig ecfg;
    StubEncoder enc(ecfg);
    ProjectionConfig pcfg;
    nn::ParamRegistry reg;
    Rng rng(3);
    auto params = make_projection(reg, "proj", ecfg, pcfg, rng);

    Rng data_rng(5);
    auto raw = random_content(data_rng, ecfg, 1, 1);
    auto encoded = enc.encode_item(raw);
    auto tokens = project(encoded, params);
    REQUIRE(tokens.size() == 2);
    CHECK(tokens[0].kind == Modality::visual);
    CHECK(tokens[1].kind == Modality::text);
    for (const auto& t : tokens) CHECK(t.vec.shape() == ad::Shape{pcfg.token_dim});

    // stub weights are not trainable parameters; only the projection stacks are
    CHECK(reg.items().size() == 4);  // two weights + two biases
    CHECK_THROWS_AS(project({}, params), DegenerateInputError);
}

TEST_CASE("identity-initialized square projection passes encodings through") {
    StubEncoderConfig ecfg;
    ecfg.visual_dim = 16;
    ecfg.text_dim = 16;
    ProjectionConfig pcfg;
    pcfg.token_dim = 16;
    nn::ParamRegistry reg;
    Rng rng(4);
    auto params = make_projection(reg, "proj", ecfg, pcfg, rng);
    auto w = params.visual_fc[0].weight.raw_data();
    std::fill(w.begin(), w.end(), 0.0);
    for (int i = 0; i < 16; ++i) w[size_t(i) * 16 + size_t(i)] = 1.0;

    StubEncoder enc(ecfg);
    Rng data_rng(6);
    auto raw = random_content(data_rng, ecfg, 1, 0);
    auto encoded = enc.encode_item(raw);
    auto tokens = project(encoded, params);
    for (size_t i = 0; i < 16; ++i) CHECK(tokens[0].vec.data()[i] == doctest::Approx(encoded[0].values[i]));
}

TEST_CASE("projection output dim is d for every modality count") {
    StubEncoderConfig ecfg;
    StubEncoder enc(ecfg);
    ProjectionConfig pcfg;
    nn::ParamRegistry reg;
    Rng rng(8);
    auto params = make_projection(reg, "proj", ecfg, pcfg, rng);
    Rng data_rng(9);
    for (int m = 0; m <= 3; ++m)
        for (int k = 0; k <= 2; ++k) {
            if (m + k == 0) continue;
            auto tokens = project(enc.encode_item(random_content(data_rng, ecfg, m, k)), params);
            CHECK(tokens.size() == size_t(m + k));
            for (const auto& t : tokens) CHECK(t.vec.dim(0) == pcfg.token_dim);
        }
}

TEST_CASE("finite-difference gradients flow through the projection") {
    StubEncoderConfig ecfg;
    ecfg.raw_visual_dim = 8;
    ecfg.raw_text_dim = 6;
    ecfg.visual_dim = 5;
    ecfg.text_dim = 4;
    ProjectionConfig pcfg;
    pcfg.token_dim = 3;
    StubEncoder enc(ecfg);
    nn::ParamRegistry reg;
    Rng rng(12);
    auto params = make_projection(reg, "proj", ecfg, pcfg, rng);

    Rng data_rng(13);
    auto raw = random_content(data_rng, ecfg, 2, 1);
    auto encoded = enc.encode_item(raw);

    std::vector<Tensor> ps;
    for (auto& [name, t] : reg.items()) ps.push_back(t);
    auto w3 = random_vec(data_rng, 3);
    auto res = check_gradients(ps, [&] {
        auto tokens = project(encoded, params);
        Tensor acc = Tensor::zeros({3});
        for (auto& t : tokens) acc = add(acc, t.vec);
        return dot(acc, Tensor::constant({3}, w3));
    });
    CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("projection depth 2 stacks fc layers with relu between") {
    StubEncoderConfig ecfg;
    ProjectionConfig pcfg;
    pcfg.depth = 2;
    nn::ParamRegistry reg;
    Rng rng(21);
    auto params = make_projection(reg, "proj", ecfg, pcfg, rng);
    CHECK(params.visual_fc.size() == 2);
    CHECK(params.visual_fc[1].in_features() == pcfg.token_dim);
    StubEncoder enc(ecfg);
    Rng data_rng(22);
    auto tokens = project(enc.encode_item(random_content(data_rng, ecfg, 1, 0)), params);
    CHECK(tokens[0].vec.dim(0) == pcfg.token_dim);
}
