#include "mmrank/ranking.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "mmrank/errors.hpp"
#include "mmrank/io.hpp"

namespace mmrank {

using namespace ad;
using nlohmann::json;

namespace {

constexpr char kCheckpointMagic[8] = {'M', 'M', 'R', 'K', 'C', 'K', 'P', '1'};
constexpr uint32_t kCheckpointVersion = 1;

json stub_to_json(const StubEncoderConfig& s) {
    return json{{"raw_visual_dim", s.raw_visual_dim},
                {"raw_text_dim", s.raw_text_dim},
                {"visual_dim", s.visual_dim},
                {"text_dim", s.text_dim},
                {"seed", s.seed}};
}

StubEncoderConfig stub_from_json(const json& j) {
    StubEncoderConfig s;
    s.raw_visual_dim = j.at("raw_visual_dim");
    s.raw_text_dim = j.at("raw_text_dim");
    s.visual_dim = j.at("visual_dim");
    s.text_dim = j.at("text_dim");
    s.seed = j.at("seed");
    return s;
}

}  // namespace

std::string ModelConfig::to_json() const {
    json j;
    j["stub"] = stub_to_json(stub);
    j["projection"] = {{"token_dim", projection.token_dim},
                       {"depth", projection.depth},
                       {"init_std", projection.init_std}};
    j["fusion"] = {{"num_queries", fusion.num_queries}, {"num_layers", fusion.num_layers},
                   {"num_heads", fusion.num_heads},     {"token_dim", fusion.token_dim},
                   {"ff_dim", fusion.ff_dim},           {"init_std", fusion.init_std}};
    j["pool_score_dim"] = pool_score_dim;
    j["cic"] = {{"tau", cic.tau}, {"alpha", cic.alpha}, {"negatives", cic.negatives}};
    j["cic_dim"] = cic_dim;
    j["user_embed_dim"] = user_embed_dim;
    j["item_embed_dim"] = item_embed_dim;
    j["category_embed_dim"] = category_embed_dim;
    j["context_dim"] = context_dim;
    j["dnn_hidden"] = dnn_hidden;
    j["use_item_content"] = use_item_content;
    j["use_user_interest"] = use_user_interest;
    j["use_id_embeddings"] = use_id_embeddings;
    j["use_visual"] = use_visual;
    j["use_text"] = use_text;
    j["max_visual_materials"] = max_visual_materials;
    j["max_text_materials"] = max_text_materials;
    j["fusion_mode"] = fusion_mode == FusionMode::masked ? "masked" : "standard";
    j["n_users"] = n_users;
    j["n_items"] = n_items;
    j["n_categories"] = n_categories;
    j["param_seed"] = param_seed;
    j["dnn_init_std"] = dnn_init_std;
    j["id_init_std"] = id_init_std;
    j["adam"] = {{"lr", adam.lr}, {"beta1", adam.beta1}, {"beta2", adam.beta2}, {"eps", adam.eps}};
    j["lora_targets"] = lora_targets;
    j["lora_rank"] = lora_rank;
    return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& text) {
    json j = json::parse(text);
    ModelConfig c;
    c.stub = stub_from_json(j.at("stub"));
    c.projection.token_dim = j.at("projection").at("token_dim");
    c.projection.depth = j.at("projection").at("depth");
    c.projection.init_std = j.at("projection").at("init_std");
    c.fusion.num_queries = j.at("fusion").at("num_queries");
    c.fusion.num_layers = j.at("fusion").at("num_layers");
    c.fusion.num_heads = j.at("fusion").at("num_heads");
    c.fusion.token_dim = j.at("fusion").at("token_dim");
    c.fusion.ff_dim = j.at("fusion").at("ff_dim");
    c.fusion.init_std = j.at("fusion").at("init_std");
    c.pool_score_dim = j.at("pool_score_dim");
    c.cic.tau = j.at("cic").at("tau");
    c.cic.alpha = j.at("cic").at("alpha");
    c.cic.negatives = j.at("cic").at("negatives");
    c.cic_dim = j.at("cic_dim");
    c.user_embed_dim = j.at("user_embed_dim");
    c.item_embed_dim = j.at("item_embed_dim");
    c.category_embed_dim = j.at("category_embed_dim");
    c.context_dim = j.at("context_dim");
    c.dnn_hidden = j.at("dnn_hidden").get<std::vector<int>>();
    c.use_item_content = j.at("use_item_content");
    c.use_user_interest = j.at("use_user_interest");
    c.use_id_embeddings = j.at("use_id_embeddings");
    c.use_visual = j.at("use_visual");
    c.use_text = j.at("use_text");
    c.max_visual_materials = j.at("max_visual_materials");
    c.max_text_materials = j.at("max_text_materials");
    c.fusion_mode = j.at("fusion_mode") == "masked" ? FusionMode::masked : FusionMode::standard;
    c.n_users = j.at("n_users");
    c.n_items = j.at("n_items");
    c.n_categories = j.at("n_categories");
    c.param_seed = j.at("param_seed");
    c.dnn_init_std = j.at("dnn_init_std");
    c.id_init_std = j.at("id_init_std");
    c.adam.lr = j.at("adam").at("lr");
    c.adam.beta1 = j.at("adam").at("beta1");
    c.adam.beta2 = j.at("adam").at("beta2");
    c.adam.eps = j.at("adam").at("eps");
    c.lora_targets = j.at("lora_targets").get<std::vector<std::string>>();
    c.lora_rank = j.at("lora_rank");
    return c;
}

Tensor ranking_loss(const Tensor& y_hat, const Tensor& labels) {
    if (y_hat.shape() != labels.shape() || y_hat.ndim() != 1)
        throw DimensionError("ranking loss: predictions " + shape_str(y_hat.shape()) + " vs labels " +
                             shape_str(labels.shape()));
    if (y_hat.size() == 0) throw DegenerateInputError("ranking loss over empty batch");
    for (double y : labels.data())
        if (y != 0.0 && y != 1.0) throw DataError("label " + std::to_string(y) + " is not binary");
    constexpr double kEps = 1e-7;
    Tensor p = clamp(y_hat, kEps, 1.0 - kEps);
    Tensor ones = Tensor::constant(labels.shape(), std::vector<double>(labels.size(), 1.0));
    Tensor ll = add(mul(labels, ad::log(p)), mul(sub(ones, labels), ad::log(sub(ones, p))));
    return scale(mean(ll), -1.0);
}

Model::Model(const ModelConfig& cfg)
    : cfg_(cfg), stub_(cfg.stub), adam_(cfg.adam), train_rng_(split_seed(cfg.param_seed, 1)) {
    if (cfg_.fusion.token_dim != cfg_.projection.token_dim)
        throw ConfigError("fusion token_dim " + std::to_string(cfg_.fusion.token_dim) +
                          " != projection token_dim " + std::to_string(cfg_.projection.token_dim));
    if (cfg_.n_users < 1 || cfg_.n_items < 1 || cfg_.n_categories < 1)
        throw ConfigError("model needs positive user/item/category counts");

    Rng init_rng(split_seed(cfg_.param_seed, 0));
    projection_ = make_projection(reg_, "content", cfg_.stub, cfg_.projection, init_rng);
    fusion_ = std::make_unique<FqFormer>(reg_, "fusion", cfg_.fusion, init_rng);

    AttentionPoolConfig pool_cfg;
    pool_cfg.embed_dim = fusion_->flattened_dim();
    pool_cfg.score_dim = cfg_.pool_score_dim;
    pool_ = std::make_unique<AttentionPool>(reg_, "interest", pool_cfg, init_rng);

    cic_proj_ = make_cic_projection(reg_, "cic", fusion_->flattened_dim(),
                                    cfg_.item_embed_dim + cfg_.category_embed_dim, cfg_.cic_dim, init_rng);

    user_table_ = reg_.add("ranking.user_table",
                           Tensor::param({cfg_.n_users, cfg_.user_embed_dim},
                                         nn::gaussian_init(init_rng, size_t(cfg_.n_users) * size_t(cfg_.user_embed_dim),
                                                           cfg_.id_init_std)));
    item_table_ = reg_.add("ranking.item_table",
                           Tensor::param({cfg_.n_items, cfg_.item_embed_dim},
                                         nn::gaussian_init(init_rng, size_t(cfg_.n_items) * size_t(cfg_.item_embed_dim),
                                                           cfg_.id_init_std)));
    category_table_ = reg_.add(
        "ranking.category_table",
        Tensor::param({cfg_.n_categories, cfg_.category_embed_dim},
                      nn::gaussian_init(init_rng, size_t(cfg_.n_categories) * size_t(cfg_.category_embed_dim),
                                        cfg_.id_init_std)));

    int width = dnn_input_width();
    int prev = width;
    for (size_t i = 0; i < cfg_.dnn_hidden.size(); ++i) {
        dnn_.push_back(nn::make_linear(reg_, "ranking.dnn" + std::to_string(i), prev, cfg_.dnn_hidden[i],
                                       true, init_rng, cfg_.dnn_init_std));
        prev = cfg_.dnn_hidden[i];
    }
    dnn_.push_back(nn::make_linear(reg_, "ranking.dnn" + std::to_string(cfg_.dnn_hidden.size()), prev, 1,
                                   true, init_rng, cfg_.dnn_init_std));
}

int Model::dnn_input_width() const {
    int width = cfg_.context_dim;
    if (cfg_.use_id_embeddings)
        width += cfg_.user_embed_dim + cfg_.item_embed_dim + cfg_.category_embed_dim;
    if (cfg_.use_item_content) width += fusion_->flattened_dim();
    if (cfg_.use_user_interest) width += fusion_->flattened_dim();
    if (width < 1) throw ConfigError("feature assembly is empty under the configured flags");
    return width;
}

MultimodalEmbedding Model::fuse_item(const ContentProvider& content, int64_t item_id) const {
    auto encoded = content.encoded(item_id);
    std::vector<EncodedModality> kept;
    int visual_seen = 0, text_seen = 0;
    for (const EncodedModality& e : encoded) {
        if (e.kind == Modality::visual) {
            if (!cfg_.use_visual) continue;
            if (cfg_.max_visual_materials >= 0 && visual_seen >= cfg_.max_visual_materials) continue;
            ++visual_seen;
        } else {
            if (!cfg_.use_text) continue;
            if (cfg_.max_text_materials >= 0 && text_seen >= cfg_.max_text_materials) continue;
            ++text_seen;
        }
        kept.push_back(e);
    }
    std::vector<ModalityToken> tokens;
    if (!kept.empty()) tokens = project(kept, projection_);
    return fusion_->fuse(tokens, cfg_.fusion_mode);
}

Tensor Model::id_bundle(const TrainingExample& ex) const {
    if (ex.item_id < 0 || ex.item_id >= cfg_.n_items)
        throw IndexError("item id " + std::to_string(ex.item_id) + " out of [0," +
                         std::to_string(cfg_.n_items) + ")");
    Tensor item_emb = embedding_lookup(item_table_, static_cast<int>(ex.item_id));
    Tensor cat_emb = embedding_lookup(category_table_, ex.category);
    std::vector<Tensor> parts{item_emb, cat_emb};
    return concat(parts);
}

Tensor Model::assemble_features(const TrainingExample& ex, const Tensor* item_content,
                                const Tensor* user_interest) const {
    if (static_cast<int>(ex.context.size()) != cfg_.context_dim)
        throw DimensionError("context vector length " + std::to_string(ex.context.size()) + " != " +
                             std::to_string(cfg_.context_dim));
    std::vector<Tensor> parts;
    if (cfg_.use_id_embeddings) {
        if (ex.user_id < 0 || ex.user_id >= cfg_.n_users)
            throw IndexError("user id " + std::to_string(ex.user_id) + " out of [0," +
                             std::to_string(cfg_.n_users) + ")");
        parts.push_back(embedding_lookup(user_table_, static_cast<int>(ex.user_id)));
        parts.push_back(embedding_lookup(item_table_, static_cast<int>(ex.item_id)));
        parts.push_back(embedding_lookup(category_table_, ex.category));
    }
    if (cfg_.context_dim > 0) parts.push_back(Tensor::constant({cfg_.context_dim}, ex.context));
    if (cfg_.use_item_content) {
        if (!item_content) throw StateError("use_item_content set but no content embedding supplied");
        parts.push_back(*item_content);
    }
    if (cfg_.use_user_interest) {
        if (!user_interest) throw StateError("use_user_interest set but no interest vector supplied");
        parts.push_back(*user_interest);
    }
    Tensor features = concat(parts);
    if (features.dim(0) != dnn_input_width())
        throw DimensionError("assembled width " + std::to_string(features.dim(0)) + " != dnn input " +
                             std::to_string(dnn_input_width()));
    return features;
}

Tensor Model::dnn_forward(const Tensor& features) const {
    Tensor x = features;
    for (size_t i = 0; i + 1 < dnn_.size(); ++i) x = relu(dnn_[i].forward(x));
    Tensor logit = dnn_.back().forward(x);
    Tensor prob = sigmoid(logit);
    if (!std::isfinite(prob.item())) throw NumericError("dnn produced a non-finite activation");
    return prob;
}

StepStats Model::train_step(std::span<const TrainingExample> batch, const ContentProvider& content) {
    if (batch.empty()) throw DegenerateInputError("train step on empty batch");
    const bool need_candidate_content =
        cfg_.use_item_content || cfg_.use_user_interest || cfg_.cic.alpha > 0.0;

    Tape tape;
    StepStats stats;
    {
        TapeScope scope(tape);
        std::unordered_map<int64_t, MultimodalEmbedding> memo;
        auto fused = [&](int64_t id) -> MultimodalEmbedding& {
            auto it = memo.find(id);
            if (it == memo.end()) it = memo.emplace(id, fuse_item(content, id)).first;
            return it->second;
        };

        std::vector<Tensor> preds;
        std::vector<double> labels;
        std::vector<Tensor> cic_content, cic_ids;
        preds.reserve(batch.size());
        for (const TrainingExample& ex : batch) {
            const Tensor* content_feat = nullptr;
            const Tensor* interest_feat = nullptr;
            Tensor interest;
            MultimodalEmbedding* cand = nullptr;
            if (need_candidate_content) cand = &fused(ex.item_id);
            if (cfg_.use_user_interest) {
                if (ex.behavior.empty()) throw DegenerateInputError("behavior sequence is empty");
                std::vector<Tensor> seq;
                seq.reserve(ex.behavior.size());
                for (int64_t id : ex.behavior) seq.push_back(fused(id).flattened);
                interest = pool_->pool(cand->flattened, seq);
                interest_feat = &interest;
            }
            if (cfg_.use_item_content) content_feat = &cand->flattened;
            preds.push_back(dnn_forward(assemble_features(ex, content_feat, interest_feat)));
            labels.push_back(static_cast<double>(ex.label));
            if (cfg_.cic.alpha > 0.0) {
                cic_content.push_back(cand->flattened);
                cic_ids.push_back(id_bundle(ex));
            }
        }

        Tensor y_hat = concat(preds);
        Tensor l_rank = ranking_loss(y_hat, Tensor::constant({static_cast<int>(labels.size())}, labels));

        Tensor total = l_rank;
        stats.ranking = l_rank.item();
        stats.cic = 0.0;
        if (cfg_.cic.alpha > 0.0) {
            int h = effective_negative_count(cfg_.cic, static_cast<int>(batch.size()));
            NegativeSets negatives = sample_negative_sets(static_cast<int>(batch.size()), h, train_rng_);
            CicLosses losses = cic_loss(cic_content, cic_ids, cfg_.cic, negatives);
            stats.cic = losses.combined.item();
            total = combine_loss(l_rank, losses.combined, cfg_.cic.alpha);
        }
        stats.total = total.item();
        if (!std::isfinite(stats.total))
            throw NumericError("non-finite loss at step " + std::to_string(step_) + " (ranking=" +
                               std::to_string(stats.ranking) + ", cic=" + std::to_string(stats.cic) + ")");

        tape.backward(total);
    }
    adam_.step(reg_);
    reg_.zero_grads();
    stats.step = step_++;
    return stats;
}

double Model::score(const TrainingExample& ex, const ContentProvider& content, EmbeddingMap* memo) const {
    const bool need_content = cfg_.use_item_content || cfg_.use_user_interest;
    Tensor content_feat, interest_feat;
    const Tensor* content_ptr = nullptr;
    const Tensor* interest_ptr = nullptr;
    if (need_content) {
        auto flattened = [&](int64_t id) -> Tensor {
            if (memo) {
                auto it = memo->find(id);
                if (it == memo->end()) {
                    auto emb = fuse_item(content, id);
                    it = memo->emplace(id, std::vector<double>(emb.flattened.data().begin(),
                                                               emb.flattened.data().end()))
                             .first;
                }
                return Tensor::constant({fusion_->flattened_dim()}, it->second);
            }
            return fuse_item(content, id).flattened;
        };
        Tensor cand = flattened(ex.item_id);
        if (cfg_.use_item_content) {
            content_feat = cand;
            content_ptr = &content_feat;
        }
        if (cfg_.use_user_interest) {
            std::vector<Tensor> seq;
            seq.reserve(ex.behavior.size());
            for (int64_t id : ex.behavior) seq.push_back(flattened(id));
            interest_feat = pool_->pool(cand, seq);
            interest_ptr = &interest_feat;
        }
    }
    return dnn_forward(assemble_features(ex, content_ptr, interest_ptr)).item();
}

std::vector<std::pair<std::string, nn::Linear*>> Model::lora_sites() {
    auto sites = fusion_->lora_sites();
    auto pool_sites = pool_->lora_sites();
    sites.insert(sites.end(), pool_sites.begin(), pool_sites.end());
    return sites;
}

std::vector<std::string> Model::lora_target_names() {
    if (!cfg_.lora_targets.empty()) return cfg_.lora_targets;
    std::vector<std::string> names;
    for (auto& [name, lin] : lora_sites()) names.push_back(name);
    return names;
}

void Model::freeze_and_attach_lora(int rank) {
    if (lora_attached_) throw StateError("low-rank adapters already attached");
    auto sites = lora_sites();
    Rng rng(split_seed(cfg_.param_seed, 2));
    for (const std::string& target : lora_target_names()) {
        nn::Linear* layer = nullptr;
        for (auto& [name, lin] : sites)
            if (name == target) layer = lin;
        if (!layer) throw ConfigError("lora target '" + target + "' is not an adaptable layer");
        nn::attach_lora(reg_, target, *layer, rank, rng);
    }
    lora_attached_ = true;
}

void Model::freeze_content_stack() {
    for (auto& [name, t] : reg_.items_mutable())
        if (name.rfind("content.", 0) == 0 || name.rfind("fusion.", 0) == 0) t.set_requires_grad(false);
    content_frozen_ = true;
}

void Model::reinit_ranking_side(uint64_t seed) {
    Rng rng(split_seed(seed, 5));
    for (auto& [name, t] : reg_.items_mutable()) {
        bool interest = name.rfind("interest.", 0) == 0;
        bool cic = name.rfind("cic.", 0) == 0;
        bool ranking = name.rfind("ranking.", 0) == 0;
        if (!interest && !cic && !ranking) continue;
        auto data = t.raw_data();
        if (name.ends_with(".bias")) {
            std::fill(data.begin(), data.end(), 0.0);
        } else {
            double stddev = ranking ? (name.find("dnn") != std::string::npos ? cfg_.dnn_init_std
                                                                             : cfg_.id_init_std)
                                    : 0.05;
            for (double& v : data) v = rng.normal(0.0, stddev);
        }
    }
    adam_.reset("interest.");
    adam_.reset("cic.");
    adam_.reset("ranking.");
}

uint64_t Model::content_params_fingerprint() const {
    uint64_t h = stub_.fingerprint();
    uint8_t mode = cfg_.fusion_mode == FusionMode::masked ? 1 : 0;
    h = io::fnv1a64(&mode, 1, h);
    uint8_t masks[2] = {cfg_.use_visual, cfg_.use_text};
    h = io::fnv1a64(masks, 2, h);
    h = io::fnv1a64(&cfg_.max_visual_materials, sizeof(int), h);
    h = io::fnv1a64(&cfg_.max_text_materials, sizeof(int), h);
    for (const auto& [name, t] : reg_.items()) {
        if (name.rfind("content.", 0) != 0 && name.rfind("fusion.", 0) != 0) continue;
        h = io::fnv1a64(name.data(), name.size(), h);
        h = io::fnv1a64(t.data().data(), t.size() * sizeof(double), h);
    }
    return h;
}

void Model::save_checkpoint(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open " + path + " for writing");
    io::CrcWriter w(os);
    w.bytes(kCheckpointMagic, sizeof(kCheckpointMagic));
    w.u32(kCheckpointVersion);
    w.str(cfg_.to_json());
    w.u64(static_cast<uint64_t>(step_));
    w.u32((lora_attached_ ? 1u : 0u) | (content_frozen_ ? 2u : 0u));

    w.u32(static_cast<uint32_t>(reg_.items().size()));
    for (const auto& [name, t] : reg_.items()) {
        w.str(name);
        w.u32(static_cast<uint32_t>(t.ndim()));
        for (int i = 0; i < t.ndim(); ++i) w.u32(static_cast<uint32_t>(t.dim(i)));
        w.u32(t.requires_grad() ? 1 : 0);
        w.f64_array(t.data());
    }

    const auto& slots = const_cast<nn::Adam&>(adam_).slots();
    w.u32(static_cast<uint32_t>(slots.size()));
    // deterministic layout: registry order, then any leftovers by name
    std::vector<std::string> names;
    for (const auto& [name, t] : reg_.items())
        if (slots.count(name)) names.push_back(name);
    for (const auto& [name, slot] : slots)
        if (std::find(names.begin(), names.end(), name) == names.end()) names.push_back(name);
    for (const std::string& name : names) {
        const auto& slot = slots.at(name);
        w.str(name);
        w.u64(static_cast<uint64_t>(slot.t));
        w.u32(static_cast<uint32_t>(slot.m.size()));
        w.f64_array(slot.m);
        w.f64_array(slot.v);
    }
    io::write_u32(os, w.crc());
    if (!os) throw IoError("checkpoint write failed: " + path);
}

std::unique_ptr<Model> Model::load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open checkpoint " + path);
    io::CrcReader r(is);
    char magic[8];
    r.bytes(magic, 8);
    if (std::memcmp(magic, kCheckpointMagic, 8) != 0) throw IoError("not a checkpoint file: " + path);
    uint32_t version = r.u32();
    if (version != kCheckpointVersion)
        throw IoError("unsupported checkpoint version " + std::to_string(version));
    ModelConfig cfg = ModelConfig::from_json(r.str(1u << 24));
    auto model = std::make_unique<Model>(cfg);
    model->step_ = static_cast<int64_t>(r.u64());
    uint32_t flags = r.u32();
    if (flags & 1u) model->freeze_and_attach_lora(cfg.lora_rank);
    if (flags & 2u) model->freeze_content_stack();

    uint32_t count = r.u32();
    for (uint32_t i = 0; i < count; ++i) {
        std::string name = r.str();
        uint32_t ndim = r.u32();
        Shape shape(ndim);
        size_t numel = 1;
        for (uint32_t d = 0; d < ndim; ++d) {
            shape[d] = static_cast<int>(r.u32());
            numel *= static_cast<size_t>(shape[d]);
        }
        bool requires_grad = r.u32() != 0;
        std::vector<double> data = r.f64_array(numel);
        Tensor* t = model->reg_.find(name);
        if (!t) throw IoError("checkpoint parameter '" + name + "' does not exist in the model");
        if (t->shape() != shape)
            throw IoError("checkpoint parameter '" + name + "' has shape " + shape_str(shape) +
                          ", model expects " + shape_str(t->shape()));
        std::copy(data.begin(), data.end(), t->raw_data().begin());
        t->set_requires_grad(requires_grad);
    }

    uint32_t slot_count = r.u32();
    for (uint32_t i = 0; i < slot_count; ++i) {
        std::string name = r.str();
        nn::Adam::Slot slot;
        slot.t = static_cast<int64_t>(r.u64());
        uint32_t n = r.u32();
        slot.m = r.f64_array(n);
        slot.v = r.f64_array(n);
        model->adam_.slots()[name] = std::move(slot);
    }
    uint32_t stored_crc = io::read_u32(is);
    if (stored_crc != r.crc())
        throw IoError("checkpoint checksum mismatch in " + path + " (file corrupted?)");
    return model;
}

}  // namespace mmrank
