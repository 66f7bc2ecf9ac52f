#pragma once

#include <span>
#include <string>
#include <vector>

#include "mmrank/nn.hpp"
#include "mmrank/rng.hpp"
#include "mmrank/tensor.hpp"

namespace mmrank {

struct CicConfig {
    double tau = 0.1;    // temperature, > 0
    double alpha = 0.1;  // weight of the contrastive term in the total loss
    int negatives = -1;  // per-anchor count H; -1 means all in-batch others
};

// Bias-free linear maps taking content embeddings and ID bundles into one
// shared space.
struct CicProjection {
    nn::Linear content_fc;
    nn::Linear id_fc;
};

CicProjection make_cic_projection(nn::ParamRegistry& reg, const std::string& prefix, int content_dim,
                                  int id_dim, int out_dim, Rng& rng, double init_std = 0.05);

// (C_i, I_i) for one item: both sides projected into the shared space.
std::pair<ad::Tensor, ad::Tensor> project_pair(const ad::Tensor& content, const ad::Tensor& id_bundle,
                                               const CicProjection& proj);

// H distinct indices != anchor, uniform without replacement.
std::vector<int> sample_negatives(int anchor, int batch_size, int count, Rng& rng);

// Independent draws for the two directions.
struct NegativeSets {
    std::vector<std::vector<int>> content_to_id;  // negatives among I for each C anchor
    std::vector<std::vector<int>> id_to_content;
};

NegativeSets sample_negative_sets(int batch_size, int count, Rng& rng);

struct CicLosses {
    ad::Tensor content_to_id;  // L over C anchors vs I negatives
    ad::Tensor id_to_content;
    ad::Tensor combined;  // 0.5 * (sum of both)
};

// Symmetric in-batch contrastive loss with cosine similarity at temperature
// tau. H = 0 yields exactly zero.
CicLosses cic_loss(std::span<const ad::Tensor> content, std::span<const ad::Tensor> ids,
                   const CicConfig& cfg, const NegativeSets& negatives);

ad::Tensor combine_loss(const ad::Tensor& ranking_loss, const ad::Tensor& cic_combined, double alpha);

int effective_negative_count(const CicConfig& cfg, int batch_size);

}  // namespace mmrank
