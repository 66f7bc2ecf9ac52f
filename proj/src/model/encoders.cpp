#include "mmrank/encoders.hpp"

#include <cmath>

#include "mmrank/errors.hpp"
#include "mmrank/io.hpp"
#include "mmrank/kernels.hpp"

namespace mmrank {

StubEncoder::StubEncoder(const StubEncoderConfig& cfg) : cfg_(cfg) {
    Rng rng(split_seed(cfg.seed, 0xe11c0de));
    auto fill = [&rng](std::vector<double>& v, size_t n, double stddev) {
        v.resize(n);
        for (double& x : v) x = rng.normal(0.0, stddev);
    };
    // column scaling keeps the pre-activation variance near 1 for unit inputs
    fill(visual_w_, size_t(cfg.visual_dim) * size_t(cfg.raw_visual_dim),
         1.0 / std::sqrt(double(cfg.raw_visual_dim)));
    fill(visual_b_, size_t(cfg.visual_dim), 0.1);
    fill(text_w_, size_t(cfg.text_dim) * size_t(cfg.raw_text_dim), 1.0 / std::sqrt(double(cfg.raw_text_dim)));
    fill(text_b_, size_t(cfg.text_dim), 0.1);

    uint64_t h = io::fnv1a64(&cfg_.raw_visual_dim, sizeof(int));
    h = io::fnv1a64(&cfg_.raw_text_dim, sizeof(int), h);
    h = io::fnv1a64(&cfg_.visual_dim, sizeof(int), h);
    h = io::fnv1a64(&cfg_.text_dim, sizeof(int), h);
    h = io::fnv1a64(&cfg_.seed, sizeof(uint64_t), h);
    h = io::fnv1a64(visual_w_.data(), visual_w_.size() * sizeof(double), h);
    h = io::fnv1a64(text_w_.data(), text_w_.size() * sizeof(double), h);
    fingerprint_ = h;
}

EncodedModality StubEncoder::encode(Modality kind, std::span<const double> raw) const {
    const bool visual = kind == Modality::visual;
    const int raw_dim = visual ? cfg_.raw_visual_dim : cfg_.raw_text_dim;
    const int out_dim = visual ? cfg_.visual_dim : cfg_.text_dim;
    if (static_cast<int>(raw.size()) != raw_dim)
        throw DimensionError("stub encode: raw vector length " + std::to_string(raw.size()) +
                             " != configured " + std::to_string(raw_dim));
    const std::vector<double>& w = visual ? visual_w_ : text_w_;
    const std::vector<double>& b = visual ? visual_b_ : text_b_;
    EncodedModality out{kind, std::vector<double>(static_cast<size_t>(out_dim))};
    for (int i = 0; i < out_dim; ++i)
        out.values[size_t(i)] =
            std::tanh(kern::dot(w.data() + size_t(i) * size_t(raw_dim), raw.data(), size_t(raw_dim)) +
                      b[size_t(i)]);
    return out;
}

std::vector<EncodedModality> StubEncoder::encode_item(const RawItemContent& raw) const {
    std::vector<EncodedModality> out;
    out.reserve(raw.images.size() + raw.texts.size());
    for (const auto& img : raw.images) out.push_back(encode(Modality::visual, img));
    for (const auto& txt : raw.texts) out.push_back(encode(Modality::text, txt));
    return out;
}

ProjectionParams make_projection(nn::ParamRegistry& reg, const std::string& prefix,
                                 const StubEncoderConfig& enc, const ProjectionConfig& cfg, Rng& rng) {
    if (cfg.depth < 1) throw ConfigError("projection depth must be >= 1");
    ProjectionParams params;
    params.token_dim = cfg.token_dim;
    auto build_stack = [&](std::vector<nn::Linear>& stack, const std::string& name, int in_dim) {
        for (int layer = 0; layer < cfg.depth; ++layer) {
            int in = layer == 0 ? in_dim : cfg.token_dim;
            stack.push_back(nn::make_linear(reg, prefix + "." + name + std::to_string(layer), in,
                                            cfg.token_dim, true, rng, cfg.init_std));
        }
    };
    build_stack(params.visual_fc, "visual_fc", enc.visual_dim);
    build_stack(params.text_fc, "text_fc", enc.text_dim);
    return params;
}

std::vector<ModalityToken> project(std::span<const EncodedModality> encoded,
                                   const ProjectionParams& params) {
    if (encoded.empty()) throw DegenerateInputError("project: no encoded modalities");
    std::vector<ModalityToken> tokens;
    tokens.reserve(encoded.size());
    for (const EncodedModality& e : encoded) {
        const auto& stack = e.kind == Modality::visual ? params.visual_fc : params.text_fc;
        if (static_cast<int>(e.values.size()) != stack.front().in_features())
            throw DimensionError("project: encoded length " + std::to_string(e.values.size()) +
                                 " != fc input " + std::to_string(stack.front().in_features()));
        ad::Tensor x = ad::Tensor::constant({static_cast<int>(e.values.size())}, e.values);
        for (size_t layer = 0; layer < stack.size(); ++layer) {
            x = stack[layer].forward(x);
            if (layer + 1 < stack.size()) x = ad::relu(x);
        }
        tokens.push_back({e.kind, x});
    }
    return tokens;
}

}  // namespace mmrank
