#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "mmrank/encoders.hpp"
#include "mmrank/ranking.hpp"

namespace mmrank {

struct SynthConfig {
    int n_users = 500;
    int n_items = 1200;
    int n_categories = 12;
    int n_interactions = 62500;

    double content_signal_strength = 1.0;  // scales the user-item affinity logit
    double popularity_exponent = 1.0;      // exposure power law
    double popularity_bias_scale = 0.0;    // popularity term inside the label logit
    double cold_start_fraction = 0.1;      // items that appear only in the test split
    double test_fraction = 0.2;            // temporal split, test is the tail

    int m_max = 3;  // visual material slots per item
    int k_max = 2;  // text material slots per item
    double modality_dropout = 0.15;

    int latent_dim = 16;
    int context_dim = 8;
    int bootstrap_clicks = 3;  // pre-period clicks seeding each user's history
    int max_history = 64;      // behavior ids stored per example
    double affinity_gain = 3.0;
    double label_intercept = -0.2;
    double material_noise = 0.3;

    StubEncoderConfig stub;  // raw dims define material widths
    uint64_t seed = 1;

    std::string to_json() const;
    static SynthConfig from_json(const std::string& text);
};

struct SynthItem {
    int64_t id = 0;
    int category = 0;
    RawItemContent content;
    std::vector<double> latent;     // generator ground truth
    double popularity_logit = 0.0;  // standardized log exposure weight
};

struct SynthDataset {
    SynthConfig config;
    std::vector<SynthItem> items;  // indexed by id
    std::vector<std::vector<double>> user_latents;
    std::vector<TrainingExample> train;
    std::vector<TrainingExample> test;
    std::vector<int64_t> cold_items;
    int64_t split_time = 0;

    const SynthItem& item(int64_t id) const;
};

// Deterministic per (config, seed); labels follow the documented logit
//   sigmoid(signal * gain * <u,i>/sqrt(z) + pop_scale * pop_logit + intercept).
SynthDataset generate(const SynthConfig& cfg);

// generator ground-truth score, used by signal-existence checks
double ground_truth_logit(const SynthDataset& ds, int64_t user_id, int64_t item_id);

void save_dataset(const SynthDataset& ds, const std::string& dir);
SynthDataset load_dataset(const std::string& dir);

// Shuffled index mini-batches over n examples; the trailing partial batch is
// dropped.
std::vector<std::vector<size_t>> epoch_batches(size_t n, int batch_size, uint64_t seed);

// Behavior resized to exactly n_active ids: most recent kept on truncation,
// cyclic repetition on fill.
TrainingExample sized_example(const TrainingExample& ex, int n_active);
std::vector<TrainingExample> assemble_batch(std::span<const TrainingExample> examples,
                                            std::span<const size_t> indices, int n_active);

// Direct content path: recomputes the stub encoders on every call into a
// scratch buffer (returned span is valid until the next call). Single-threaded.
class DatasetContentProvider : public ContentProvider {
public:
    DatasetContentProvider(const SynthDataset& ds, const StubEncoder& stub) : ds_(ds), stub_(stub) {}
    std::span<const EncodedModality> encoded(int64_t item_id) const override;

private:
    const SynthDataset& ds_;
    const StubEncoder& stub_;
    mutable std::vector<EncodedModality> scratch_;
};

}  // namespace mmrank
