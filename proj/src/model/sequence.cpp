#include "mmrank/sequence.hpp"

#include <cmath>

#include "mmrank/errors.hpp"

namespace mmrank {

using namespace ad;

AttentionPool::AttentionPool(nn::ParamRegistry& reg, const std::string& prefix,
                             const AttentionPoolConfig& cfg, Rng& rng)
    : cfg_(cfg), prefix_(prefix) {
    candidate_proj_ =
        nn::make_linear(reg, prefix + ".candidate_proj", cfg.embed_dim, cfg.score_dim, false, rng, cfg.init_std);
    sequence_proj_ =
        nn::make_linear(reg, prefix + ".sequence_proj", cfg.embed_dim, cfg.score_dim, false, rng, cfg.init_std);
}

std::vector<std::pair<std::string, nn::Linear*>> AttentionPool::lora_sites() {
    return {{prefix_ + ".candidate_proj", &candidate_proj_}, {prefix_ + ".sequence_proj", &sequence_proj_}};
}

Tensor AttentionPool::pool(const Tensor& candidate, std::span<const Tensor> sequence,
                           std::vector<double>* weights_out) const {
    if (sequence.empty()) throw DegenerateInputError("attention pool over empty sequence");
    if (candidate.ndim() != 1 || candidate.dim(0) != cfg_.embed_dim)
        throw DimensionError("attention pool: candidate " + shape_str(candidate.shape()) + " != [" +
                             std::to_string(cfg_.embed_dim) + "]");
    for (const Tensor& e : sequence)
        if (e.ndim() != 1 || e.dim(0) != cfg_.embed_dim)
            throw DimensionError("attention pool: sequence element " + shape_str(e.shape()));

    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(cfg_.score_dim));
    Tensor cand_p = candidate_proj_.forward(candidate);
    std::vector<Tensor> scores;
    scores.reserve(sequence.size());
    for (const Tensor& e : sequence)
        scores.push_back(scale(dot(cand_p, sequence_proj_.forward(e)), inv_sqrt));
    Tensor w = softmax(concat(scores));
    if (weights_out) weights_out->assign(w.data().begin(), w.data().end());

    Tensor seq_mat = stack_rows(sequence);
    Tensor pooled = matmul(reshape(w, {1, static_cast<int>(sequence.size())}), seq_mat);
    return reshape(pooled, {cfg_.embed_dim});
}

}  // namespace mmrank
