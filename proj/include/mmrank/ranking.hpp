#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "mmrank/cic.hpp"
#include "mmrank/encoders.hpp"
#include "mmrank/fqformer.hpp"
#include "mmrank/nn.hpp"
#include "mmrank/sequence.hpp"

namespace mmrank {

struct TrainingExample {
    int64_t user_id = 0;
    int64_t item_id = 0;
    int category = 0;               // candidate item's category id
    std::vector<int64_t> behavior;  // clicked item ids, oldest first; nonempty
    std::vector<double> context;
    int label = 0;  // y in {0,1}
    int64_t time_index = 0;
};

// Source of frozen single-modal features. The direct path recomputes the stub
// encoders every call; the offline cache serves stored copies. Both must be
// bit-identical.
struct ContentProvider {
    virtual ~ContentProvider() = default;
    virtual std::span<const EncodedModality> encoded(int64_t item_id) const = 0;
};

struct ModelConfig {
    StubEncoderConfig stub;
    ProjectionConfig projection;
    FqFormerConfig fusion;
    int pool_score_dim = 16;
    CicConfig cic;
    int cic_dim = 32;

    int user_embed_dim = 16;
    int item_embed_dim = 16;
    int category_embed_dim = 8;
    int context_dim = 8;
    std::vector<int> dnn_hidden{64, 32};

    bool use_item_content = true;
    bool use_user_interest = true;
    bool use_id_embeddings = true;
    bool use_visual = true;
    bool use_text = true;
    int max_visual_materials = -1;  // -1: no cap
    int max_text_materials = -1;
    FusionMode fusion_mode = FusionMode::standard;

    int n_users = 0;
    int n_items = 0;
    int n_categories = 0;

    uint64_t param_seed = 1234;
    double dnn_init_std = 0.05;
    double id_init_std = 0.01;
    nn::AdamConfig adam;

    std::vector<std::string> lora_targets;  // empty: pool projections + fusion FC layers
    int lora_rank = 4;

    std::string to_json() const;
    static ModelConfig from_json(const std::string& text);
};

// Mean binary negative log-likelihood with predictions clamped to
// [1e-7, 1-1e-7]; labels must be exactly 0 or 1.
ad::Tensor ranking_loss(const ad::Tensor& y_hat, const ad::Tensor& labels);

struct StepStats {
    int64_t step = 0;
    double total = 0;
    double ranking = 0;
    double cic = 0;
};

// The whole trainable system: stub encoders (frozen), projections, fusion
// transformer, sequence interest, contrastive head, ID tables and the DNN.
class Model {
public:
    explicit Model(const ModelConfig& cfg);

    const ModelConfig& config() const { return cfg_; }
    const StubEncoder& stub_encoder() const { return stub_; }
    nn::ParamRegistry& params() { return reg_; }
    const nn::ParamRegistry& params() const { return reg_; }
    nn::Adam& optimizer() { return adam_; }
    int64_t step_count() const { return step_; }
    bool lora_attached() const { return lora_attached_; }
    bool content_frozen() const { return content_frozen_; }

    // Fused content embedding for one item under the current parameters.
    MultimodalEmbedding fuse_item(const ContentProvider& content, int64_t item_id) const;

    // Feature assembly in fixed order: [ids, context, item content, interest].
    ad::Tensor assemble_features(const TrainingExample& ex, const ad::Tensor* item_content,
                                 const ad::Tensor* user_interest) const;
    ad::Tensor dnn_forward(const ad::Tensor& features) const;  // probability in (0,1)
    int dnn_input_width() const;

    StepStats train_step(std::span<const TrainingExample> batch, const ContentProvider& content);

    // Forward-only scoring; memo caches flattened embeddings across calls
    // (valid while parameters are unchanged).
    using EmbeddingMap = std::unordered_map<int64_t, std::vector<double>>;
    double score(const TrainingExample& ex, const ContentProvider& content, EmbeddingMap* memo) const;

    // Switches the configured target layers to low-rank adapters. Forward
    // outputs are unchanged at the switch instant.
    void freeze_and_attach_lora(int rank);
    std::vector<std::string> lora_target_names();

    void freeze_content_stack();              // projections + fusion become untrainable
    void reinit_ranking_side(uint64_t seed);  // fresh ID tables, pool, cic head, DNN

    uint64_t content_params_fingerprint() const;

    const ad::Tensor& item_table() const { return item_table_; }
    const ad::Tensor& user_table() const { return user_table_; }

    void save_checkpoint(const std::string& path) const;
    static std::unique_ptr<Model> load_checkpoint(const std::string& path);

private:
    std::vector<std::pair<std::string, nn::Linear*>> lora_sites();
    ad::Tensor id_bundle(const TrainingExample& ex) const;

    ModelConfig cfg_;
    StubEncoder stub_;
    nn::ParamRegistry reg_;
    nn::Adam adam_;
    ProjectionParams projection_;
    std::unique_ptr<FqFormer> fusion_;
    std::unique_ptr<AttentionPool> pool_;
    CicProjection cic_proj_;
    ad::Tensor user_table_, item_table_, category_table_;
    std::vector<nn::Linear> dnn_;
    Rng train_rng_;
    int64_t step_ = 0;
    bool lora_attached_ = false;
    bool content_frozen_ = false;
};

}  // namespace mmrank
