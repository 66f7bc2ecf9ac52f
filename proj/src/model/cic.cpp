#include "mmrank/cic.hpp"

#include "mmrank/errors.hpp"

namespace mmrank {

using namespace ad;

CicProjection make_cic_projection(nn::ParamRegistry& reg, const std::string& prefix, int content_dim,
                                  int id_dim, int out_dim, Rng& rng, double init_std) {
    CicProjection proj;
    proj.content_fc = nn::make_linear(reg, prefix + ".content_fc", content_dim, out_dim, false, rng, init_std);
    proj.id_fc = nn::make_linear(reg, prefix + ".id_fc", id_dim, out_dim, false, rng, init_std);
    return proj;
}

std::pair<Tensor, Tensor> project_pair(const Tensor& content, const Tensor& id_bundle,
                                       const CicProjection& proj) {
    return {proj.content_fc.forward(content), proj.id_fc.forward(id_bundle)};
}

int effective_negative_count(const CicConfig& cfg, int batch_size) {
    int h = cfg.negatives < 0 ? batch_size - 1 : cfg.negatives;
    if (h > batch_size - 1)
        throw ConfigError("negatives per anchor " + std::to_string(h) + " exceeds batch size - 1 = " +
                          std::to_string(batch_size - 1));
    return h;
}

std::vector<int> sample_negatives(int anchor, int batch_size, int count, Rng& rng) {
    if (count > batch_size - 1)
        throw ConfigError("cannot draw " + std::to_string(count) + " negatives from batch of " +
                          std::to_string(batch_size));
    // draw from [0, B-1) and skip over the anchor slot
    std::vector<int> picks = rng.sample_without_replacement(batch_size - 1, count);
    for (int& p : picks)
        if (p >= anchor) ++p;
    return picks;
}

NegativeSets sample_negative_sets(int batch_size, int count, Rng& rng) {
    NegativeSets sets;
    sets.content_to_id.reserve(static_cast<size_t>(batch_size));
    sets.id_to_content.reserve(static_cast<size_t>(batch_size));
    for (int i = 0; i < batch_size; ++i) sets.content_to_id.push_back(sample_negatives(i, batch_size, count, rng));
    for (int i = 0; i < batch_size; ++i) sets.id_to_content.push_back(sample_negatives(i, batch_size, count, rng));
    return sets;
}

namespace {

// -log( exp(pos/tau) / (exp(pos/tau) + sum_j exp(neg_j/tau)) ), averaged over
// anchors. Written as logsumexp(logits) - logits[0] per anchor.
Tensor directional_loss(std::span<const Tensor> anchors, std::span<const Tensor> others,
                        const std::vector<std::vector<int>>& negatives, double tau) {
    const int batch = static_cast<int>(anchors.size());
    std::vector<Tensor> per_anchor;
    per_anchor.reserve(static_cast<size_t>(batch));
    for (int i = 0; i < batch; ++i) {
        std::vector<Tensor> logits;
        logits.reserve(1 + negatives[size_t(i)].size());
        logits.push_back(scale(cosine_similarity(anchors[size_t(i)], others[size_t(i)]), 1.0 / tau));
        for (int j : negatives[size_t(i)])
            logits.push_back(scale(cosine_similarity(anchors[size_t(i)], others[size_t(j)]), 1.0 / tau));
        Tensor logit_vec = concat(logits);
        per_anchor.push_back(sub(logsumexp(logit_vec), slice(logit_vec, 0, 1)));
    }
    return mean(concat(per_anchor));
}

}  // namespace

CicLosses cic_loss(std::span<const Tensor> content, std::span<const Tensor> ids, const CicConfig& cfg,
                   const NegativeSets& negatives) {
    if (cfg.tau <= 0.0) throw ConfigError("cic temperature must be positive, got " + std::to_string(cfg.tau));
    if (content.size() != ids.size() || content.empty())
        throw DimensionError("cic loss: batch sizes " + std::to_string(content.size()) + " vs " +
                             std::to_string(ids.size()));
    if (negatives.content_to_id.size() != content.size() || negatives.id_to_content.size() != content.size())
        throw DimensionError("cic loss: negative sets sized for a different batch");

    CicLosses out;
    out.content_to_id = directional_loss(content, ids, negatives.content_to_id, cfg.tau);
    out.id_to_content = directional_loss(ids, content, negatives.id_to_content, cfg.tau);
    out.combined = scale(add(out.content_to_id, out.id_to_content), 0.5);
    return out;
}

Tensor combine_loss(const Tensor& ranking_loss, const Tensor& cic_combined, double alpha) {
    return add(ranking_loss, scale(cic_combined, alpha));
}

}  // namespace mmrank
