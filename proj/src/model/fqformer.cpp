#include "mmrank/fqformer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mmrank/errors.hpp"

namespace mmrank {

using namespace ad;

FqFormer::FqFormer(nn::ParamRegistry& reg, const std::string& prefix, const FqFormerConfig& cfg, Rng& rng)
    : cfg_(cfg), prefix_(prefix) {
    if (cfg.num_queries < 1) throw ConfigError("fq-former needs at least one query");
    if (cfg.token_dim % cfg.num_heads != 0)
        throw ConfigError("token_dim " + std::to_string(cfg.token_dim) + " not divisible by heads " +
                          std::to_string(cfg.num_heads));
    queries_ = reg.add(prefix + ".queries",
                       Tensor::param({cfg.num_queries, cfg.token_dim},
                                     nn::gaussian_init(rng, size_t(cfg.num_queries) * size_t(cfg.token_dim),
                                                       cfg.init_std)));
    int d = cfg.token_dim;
    for (int l = 0; l < cfg.num_layers; ++l) {
        std::string base = prefix + ".block" + std::to_string(l);
        Block blk;
        blk.wq = nn::make_linear(reg, base + ".wq", d, d, true, rng, cfg.init_std);
        blk.wk = nn::make_linear(reg, base + ".wk", d, d, true, rng, cfg.init_std);
        blk.wv = nn::make_linear(reg, base + ".wv", d, d, true, rng, cfg.init_std);
        blk.wo = nn::make_linear(reg, base + ".wo", d, d, true, rng, cfg.init_std);
        blk.ff1 = nn::make_linear(reg, base + ".ff1", d, cfg.ff_dim, true, rng, cfg.init_std);
        blk.ff2 = nn::make_linear(reg, base + ".ff2", cfg.ff_dim, d, true, rng, cfg.init_std);
        blk.ln1_gamma = reg.add(base + ".ln1.gamma", Tensor::param({d}, std::vector<double>(size_t(d), 1.0)));
        blk.ln1_beta = reg.add(base + ".ln1.beta", Tensor::zeros({d}, true));
        blk.ln2_gamma = reg.add(base + ".ln2.gamma", Tensor::param({d}, std::vector<double>(size_t(d), 1.0)));
        blk.ln2_beta = reg.add(base + ".ln2.beta", Tensor::zeros({d}, true));
        blocks_.push_back(std::move(blk));
    }
    final_gamma_ = reg.add(prefix + ".final_ln.gamma", Tensor::param({d}, std::vector<double>(size_t(d), 1.0)));
    final_beta_ = reg.add(prefix + ".final_ln.beta", Tensor::zeros({d}, true));
}

std::vector<std::pair<std::string, nn::Linear*>> FqFormer::lora_sites() {
    std::vector<std::pair<std::string, nn::Linear*>> sites;
    for (size_t l = 0; l < blocks_.size(); ++l) {
        std::string base = prefix_ + ".block" + std::to_string(l);
        Block& blk = blocks_[l];
        sites.emplace_back(base + ".wq", &blk.wq);
        sites.emplace_back(base + ".wk", &blk.wk);
        sites.emplace_back(base + ".wv", &blk.wv);
        sites.emplace_back(base + ".wo", &blk.wo);
        sites.emplace_back(base + ".ff1", &blk.ff1);
        sites.emplace_back(base + ".ff2", &blk.ff2);
    }
    return sites;
}

MultimodalEmbedding FqFormer::fuse(std::span<const ModalityToken> tokens, FusionMode mode,
                                   FuseTrace* trace) const {
    const int d = cfg_.token_dim;
    const int q = cfg_.num_queries;
    for (const ModalityToken& t : tokens)
        if (t.vec.ndim() != 1 || t.vec.dim(0) != d)
            throw DimensionError("fuse: token shape " + shape_str(t.vec.shape()) + " != [" +
                                 std::to_string(d) + "]");
    if (mode == FusionMode::masked && tokens.empty())
        throw DegenerateInputError("masked fusion with no modality tokens: no value vectors to pool");

    // Canonical token order (lexicographic by content). The tokens are a set;
    // fixing the reduction order makes permutation invariance hold bitwise.
    std::vector<size_t> order(tokens.size());
    std::iota(order.begin(), order.end(), size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        auto da = tokens[a].vec.data();
        auto db = tokens[b].vec.data();
        return std::lexicographical_compare(da.begin(), da.end(), db.begin(), db.end());
    });

    std::vector<Tensor> rows;
    rows.reserve(size_t(q) + tokens.size());
    for (int i = 0; i < q; ++i) rows.push_back(row(queries_, i));
    for (size_t idx : order) rows.push_back(tokens[idx].vec);
    Tensor x = stack_rows(rows);

    const int s = static_cast<int>(rows.size());
    const int dh = d / cfg_.num_heads;
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

    // masked mode drops query positions from the value pool and renormalizes
    std::vector<uint8_t> allowed;
    if (mode == FusionMode::masked) {
        allowed.assign(size_t(s), 1);
        for (int i = 0; i < q; ++i) allowed[size_t(i)] = 0;
    }

    for (const Block& blk : blocks_) {
        Tensor h = layer_norm(x, blk.ln1_gamma, blk.ln1_beta);
        Tensor qm = blk.wq.forward(h);
        Tensor km = blk.wk.forward(h);
        Tensor vm = blk.wv.forward(h);
        std::vector<Tensor> head_outs;
        head_outs.reserve(size_t(cfg_.num_heads));
        for (int hd = 0; hd < cfg_.num_heads; ++hd) {
            int c0 = hd * dh, c1 = (hd + 1) * dh;
            Tensor qh = slice_cols(qm, c0, c1);
            Tensor kh = slice_cols(km, c0, c1);
            Tensor vh = slice_cols(vm, c0, c1);
            Tensor scores = scale(matmul(qh, transpose(kh)), inv_sqrt_dh);
            Tensor probs = softmax_rows(scores, allowed);
            if (trace) trace->attention.push_back(probs);
            head_outs.push_back(matmul(probs, vh));
        }
        Tensor attn = concat_cols(head_outs);
        x = add(x, blk.wo.forward(attn));
        Tensor h2 = layer_norm(x, blk.ln2_gamma, blk.ln2_beta);
        x = add(x, blk.ff2.forward(relu(blk.ff1.forward(h2))));
    }
    x = layer_norm(x, final_gamma_, final_beta_);

    MultimodalEmbedding out;
    out.tokens = slice_rows(x, 0, q);
    out.flattened = reshape(out.tokens, {q * d});
    return out;
}

}  // namespace mmrank
