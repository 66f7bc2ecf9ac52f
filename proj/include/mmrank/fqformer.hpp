#pragma once

#include <span>
#include <string>
#include <vector>

#include "mmrank/encoders.hpp"
#include "mmrank/nn.hpp"
#include "mmrank/tensor.hpp"

namespace mmrank {

enum class FusionMode { standard, masked };

struct FqFormerConfig {
    int num_queries = 2;
    int num_layers = 1;
    int num_heads = 4;
    int token_dim = 32;
    int ff_dim = 64;
    double init_std = 0.02;
};

// Fixed-length fused content representation: exactly num_queries tokens no
// matter how many modality tokens went in.
struct MultimodalEmbedding {
    ad::Tensor tokens;     // {Q, d}
    ad::Tensor flattened;  // {Q*d}, query-order concatenation
};

// Test hook: per (layer, head) attention probability matrices.
struct FuseTrace {
    std::vector<ad::Tensor> attention;
};

// Transformer over [queries ++ modality tokens]; output is the first Q
// positions. Pre-norm blocks, no positional encodings anywhere: modality
// tokens form a set, and fuse() canonicalizes their order internally so the
// permutation invariance is exact in floating point.
class FqFormer {
public:
    FqFormer(nn::ParamRegistry& reg, const std::string& prefix, const FqFormerConfig& cfg, Rng& rng);

    MultimodalEmbedding fuse(std::span<const ModalityToken> tokens, FusionMode mode = FusionMode::standard,
                             FuseTrace* trace = nullptr) const;

    const FqFormerConfig& config() const { return cfg_; }
    int flattened_dim() const { return cfg_.num_queries * cfg_.token_dim; }
    ad::Tensor& queries() { return queries_; }

    // named FC layers eligible for low-rank adapters
    std::vector<std::pair<std::string, nn::Linear*>> lora_sites();

private:
    struct Block {
        nn::Linear wq, wk, wv, wo, ff1, ff2;
        ad::Tensor ln1_gamma, ln1_beta, ln2_gamma, ln2_beta;
    };

    FqFormerConfig cfg_;
    std::string prefix_;
    ad::Tensor queries_;  // {Q, d}, globally shared across items
    std::vector<Block> blocks_;
    ad::Tensor final_gamma_, final_beta_;
};

}  // namespace mmrank
