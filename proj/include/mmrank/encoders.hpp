#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mmrank/nn.hpp"
#include "mmrank/rng.hpp"
#include "mmrank/tensor.hpp"

namespace mmrank {

enum class Modality : uint8_t { visual = 0, text = 1 };

// An item's raw content materials: variable counts of visual and text vectors.
struct RawItemContent {
    int64_t item_id = -1;
    std::vector<std::vector<double>> images;  // each raw_visual_dim wide
    std::vector<std::vector<double>> texts;   // each raw_text_dim wide
};

// Frozen single-modal feature; plain doubles, never gradient-tracked.
struct EncodedModality {
    Modality kind;
    std::vector<double> values;
};

struct StubEncoderConfig {
    int raw_visual_dim = 64;
    int raw_text_dim = 32;
    int visual_dim = 48;
    int text_dim = 24;
    uint64_t seed = 7;

    bool operator==(const StubEncoderConfig&) const = default;
};

// Stand-in for the frozen production backbones: a seeded affine map plus tanh
// per modality. Pure function of (config, input); nothing here ever trains.
class StubEncoder {
public:
    explicit StubEncoder(const StubEncoderConfig& cfg);

    EncodedModality encode(Modality kind, std::span<const double> raw) const;
    std::vector<EncodedModality> encode_item(const RawItemContent& raw) const;

    const StubEncoderConfig& config() const { return cfg_; }
    // hash over config and the fixed weights; offline caches validate against it
    uint64_t fingerprint() const { return fingerprint_; }

private:
    StubEncoderConfig cfg_;
    std::vector<double> visual_w_, visual_b_;  // {visual_dim x raw_visual_dim}, {visual_dim}
    std::vector<double> text_w_, text_b_;
    uint64_t fingerprint_ = 0;
};

// Down-projection of encoder outputs to the shared token dimension (trainable).
struct ModalityToken {
    Modality kind;
    ad::Tensor vec;  // {token_dim}
};

struct ProjectionConfig {
    int token_dim = 32;
    int depth = 1;  // FC layers per modality; relu between layers when depth > 1
    double init_std = 0.05;
};

struct ProjectionParams {
    std::vector<nn::Linear> visual_fc;
    std::vector<nn::Linear> text_fc;
    int token_dim = 0;
};

ProjectionParams make_projection(nn::ParamRegistry& reg, const std::string& prefix,
                                 const StubEncoderConfig& enc, const ProjectionConfig& cfg, Rng& rng);

std::vector<ModalityToken> project(std::span<const EncodedModality> encoded,
                                   const ProjectionParams& params);

}  // namespace mmrank
