#pragma once

#include <span>
#include <string>
#include <vector>

#include "mmrank/nn.hpp"
#include "mmrank/tensor.hpp"

namespace mmrank {

struct AttentionPoolConfig {
    int embed_dim = 64;  // flattened multimodal embedding width
    int score_dim = 16;
    double init_std = 0.05;
};

// Candidate-conditioned pooling over a behavior sequence of content
// embeddings: score each sequence element against the candidate with
// projected dot products, softmax the scores, return the weighted sum.
class AttentionPool {
public:
    AttentionPool(nn::ParamRegistry& reg, const std::string& prefix, const AttentionPoolConfig& cfg,
                  Rng& rng);

    ad::Tensor pool(const ad::Tensor& candidate, std::span<const ad::Tensor> sequence,
                    std::vector<double>* weights_out = nullptr) const;

    const AttentionPoolConfig& config() const { return cfg_; }
    std::vector<std::pair<std::string, nn::Linear*>> lora_sites();

private:
    AttentionPoolConfig cfg_;
    std::string prefix_;
    nn::Linear candidate_proj_, sequence_proj_;
};

}  // namespace mmrank
