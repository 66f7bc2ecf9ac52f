#include "mmrank/datasynth.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "mmrank/errors.hpp"
#include "mmrank/io.hpp"
#include "mmrank/kernels.hpp"

namespace mmrank {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr char kVectorsMagic[8] = {'M', 'M', 'R', 'K', 'V', 'E', 'C', '1'};
constexpr int kSchemaVersion = 1;

double sigmoid(double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

struct ZipfSampler {
    std::vector<double> cumulative;
    std::vector<int> ids;

    void build(std::span<const double> weights, std::span<const int> id_list) {
        ids.assign(id_list.begin(), id_list.end());
        cumulative.resize(ids.size());
        double total = 0;
        for (size_t i = 0; i < ids.size(); ++i) cumulative[i] = (total += weights[size_t(ids[i])]);
        for (double& c : cumulative) c /= total;
    }

    int draw(Rng& rng) const {
        double u = rng.uniform();
        auto it = std::lower_bound(cumulative.begin(), cumulative.end(), u);
        size_t idx = std::min(static_cast<size_t>(it - cumulative.begin()), ids.size() - 1);
        return ids[idx];
    }
};

void validate(const SynthConfig& c) {
    if (c.n_users < 1 || c.n_items < 1 || c.n_categories < 1 || c.n_interactions < 1)
        throw ConfigError("all entity counts must be >= 1");
    for (auto [name, v] : {std::pair<const char*, double>{"content_signal_strength", c.content_signal_strength},
                           {"cold_start_fraction", c.cold_start_fraction},
                           {"modality_dropout", c.modality_dropout},
                           {"test_fraction", c.test_fraction}})
        if (v < 0.0 || v > 1.0) throw ConfigError(std::string(name) + " must lie in [0,1]");
    if (c.m_max < 0 || c.k_max < 0 || c.m_max + c.k_max < 1)
        throw ConfigError("need at least one material slot across modalities");
    if (c.bootstrap_clicks < 1)
        throw ConfigError("bootstrap_clicks must be >= 1 or behavior sequences can be empty");
    if (c.max_history < 1) throw ConfigError("max_history must be >= 1");
    if (c.latent_dim < 1) throw ConfigError("latent_dim must be >= 1");
    int n_cold = static_cast<int>(std::floor(c.cold_start_fraction * c.n_items));
    int n_train = static_cast<int>(std::llround((1.0 - c.test_fraction) * c.n_interactions));
    if (n_train < c.n_items - n_cold)
        throw ConfigError("train split (" + std::to_string(n_train) +
                          " events) cannot expose every warm item at least once (" +
                          std::to_string(c.n_items - n_cold) + " items)");
}

}  // namespace

std::string SynthConfig::to_json() const {
    json j;
    j["n_users"] = n_users;
    j["n_items"] = n_items;
    j["n_categories"] = n_categories;
    j["n_interactions"] = n_interactions;
    j["content_signal_strength"] = content_signal_strength;
    j["popularity_exponent"] = popularity_exponent;
    j["popularity_bias_scale"] = popularity_bias_scale;
    j["cold_start_fraction"] = cold_start_fraction;
    j["test_fraction"] = test_fraction;
    j["m_max"] = m_max;
    j["k_max"] = k_max;
    j["modality_dropout"] = modality_dropout;
    j["latent_dim"] = latent_dim;
    j["context_dim"] = context_dim;
    j["bootstrap_clicks"] = bootstrap_clicks;
    j["max_history"] = max_history;
    j["affinity_gain"] = affinity_gain;
    j["label_intercept"] = label_intercept;
    j["material_noise"] = material_noise;
    j["stub"] = {{"raw_visual_dim", stub.raw_visual_dim},
                 {"raw_text_dim", stub.raw_text_dim},
                 {"visual_dim", stub.visual_dim},
                 {"text_dim", stub.text_dim},
                 {"seed", stub.seed}};
    j["seed"] = seed;
    return j.dump(2);
}

SynthConfig SynthConfig::from_json(const std::string& text) {
    json j = json::parse(text);
    SynthConfig c;
    auto get = [&](const char* key, auto& field) {
        if (j.contains(key)) field = j.at(key);
    };
    get("n_users", c.n_users);
    get("n_items", c.n_items);
    get("n_categories", c.n_categories);
    get("n_interactions", c.n_interactions);
    get("content_signal_strength", c.content_signal_strength);
    get("popularity_exponent", c.popularity_exponent);
    get("popularity_bias_scale", c.popularity_bias_scale);
    get("cold_start_fraction", c.cold_start_fraction);
    get("test_fraction", c.test_fraction);
    get("m_max", c.m_max);
    get("k_max", c.k_max);
    get("modality_dropout", c.modality_dropout);
    get("latent_dim", c.latent_dim);
    get("context_dim", c.context_dim);
    get("bootstrap_clicks", c.bootstrap_clicks);
    get("max_history", c.max_history);
    get("affinity_gain", c.affinity_gain);
    get("label_intercept", c.label_intercept);
    get("material_noise", c.material_noise);
    if (j.contains("stub")) {
        const json& s = j.at("stub");
        if (s.contains("raw_visual_dim")) c.stub.raw_visual_dim = s.at("raw_visual_dim");
        if (s.contains("raw_text_dim")) c.stub.raw_text_dim = s.at("raw_text_dim");
        if (s.contains("visual_dim")) c.stub.visual_dim = s.at("visual_dim");
        if (s.contains("text_dim")) c.stub.text_dim = s.at("text_dim");
        if (s.contains("seed")) c.stub.seed = s.at("seed");
    }
    get("seed", c.seed);
    return c;
}

const SynthItem& SynthDataset::item(int64_t id) const {
    if (id < 0 || id >= static_cast<int64_t>(items.size()))
        throw IndexError("item id " + std::to_string(id) + " out of [0," + std::to_string(items.size()) + ")");
    return items[static_cast<size_t>(id)];
}

double ground_truth_logit(const SynthDataset& ds, int64_t user_id, int64_t item_id) {
    const SynthConfig& c = ds.config;
    const SynthItem& it = ds.item(item_id);
    const auto& u = ds.user_latents.at(static_cast<size_t>(user_id));
    double affinity = kern::dot(u.data(), it.latent.data(), u.size()) / std::sqrt(double(c.latent_dim));
    return c.content_signal_strength * c.affinity_gain * affinity +
           c.popularity_bias_scale * it.popularity_logit + c.label_intercept;
}

SynthDataset generate(const SynthConfig& cfg) {
    validate(cfg);
    SynthDataset ds;
    ds.config = cfg;

    Rng user_rng(split_seed(cfg.seed, 10));
    Rng item_rng(split_seed(cfg.seed, 11));
    Rng material_rng(split_seed(cfg.seed, 12));
    Rng cold_rng(split_seed(cfg.seed, 13));
    Rng event_rng(split_seed(cfg.seed, 14));
    Rng pop_rng(split_seed(cfg.seed, 15));

    const int z = cfg.latent_dim;
    for (int u = 0; u < cfg.n_users; ++u) {
        std::vector<double> lat(static_cast<size_t>(z));
        for (double& v : lat) v = user_rng.normal();
        ds.user_latents.push_back(std::move(lat));
    }

    std::vector<std::vector<double>> centers(static_cast<size_t>(cfg.n_categories));
    for (auto& c : centers) {
        c.resize(static_cast<size_t>(z));
        for (double& v : c) v = item_rng.normal();
    }

    // fixed affine views from latent space to raw material space
    std::vector<double> vis_map(size_t(cfg.stub.raw_visual_dim) * size_t(z));
    std::vector<double> txt_map(size_t(cfg.stub.raw_text_dim) * size_t(z));
    for (double& v : vis_map) v = material_rng.normal(0.0, 1.0 / std::sqrt(double(z)));
    for (double& v : txt_map) v = material_rng.normal(0.0, 1.0 / std::sqrt(double(z)));

    const double kHalf = std::sqrt(0.5);
    for (int i = 0; i < cfg.n_items; ++i) {
        SynthItem item;
        item.id = i;
        item.category = static_cast<int>(item_rng.uniform_int(static_cast<uint64_t>(cfg.n_categories)));
        item.latent.resize(static_cast<size_t>(z));
        for (int d = 0; d < z; ++d)
            item.latent[size_t(d)] = kHalf * centers[size_t(item.category)][size_t(d)] + kHalf * item_rng.normal();
        item.content.item_id = i;

        int m = 0, k = 0;
        for (int slot = 0; slot < cfg.m_max; ++slot)
            if (material_rng.uniform() >= cfg.modality_dropout) ++m;
        for (int slot = 0; slot < cfg.k_max; ++slot)
            if (material_rng.uniform() >= cfg.modality_dropout) ++k;
        if (m + k == 0) (cfg.m_max > 0 ? m : k) = 1;

        auto make_material = [&](const std::vector<double>& map, int raw_dim) {
            std::vector<double> raw(static_cast<size_t>(raw_dim));
            for (int r = 0; r < raw_dim; ++r) {
                double v = kern::dot(map.data() + size_t(r) * size_t(z), item.latent.data(), size_t(z));
                raw[size_t(r)] = v + cfg.material_noise * material_rng.normal();
            }
            return raw;
        };
        for (int s = 0; s < m; ++s) item.content.images.push_back(make_material(vis_map, cfg.stub.raw_visual_dim));
        for (int s = 0; s < k; ++s) item.content.texts.push_back(make_material(txt_map, cfg.stub.raw_text_dim));
        ds.items.push_back(std::move(item));
    }

    // exposure ranks decoupled from content by a seeded permutation
    std::vector<int> rank_of(static_cast<size_t>(cfg.n_items));
    {
        std::vector<int> perm(static_cast<size_t>(cfg.n_items));
        for (int i = 0; i < cfg.n_items; ++i) perm[size_t(i)] = i;
        pop_rng.shuffle(perm);
        for (int r = 0; r < cfg.n_items; ++r) rank_of[size_t(perm[size_t(r)])] = r;
    }
    std::vector<double> weights(static_cast<size_t>(cfg.n_items));
    double mean_log = 0;
    for (int i = 0; i < cfg.n_items; ++i) {
        weights[size_t(i)] = std::pow(double(rank_of[size_t(i)] + 1), -cfg.popularity_exponent);
        mean_log += std::log(weights[size_t(i)]);
    }
    mean_log /= cfg.n_items;
    double sd_log = 0;
    for (int i = 0; i < cfg.n_items; ++i) {
        double d = std::log(weights[size_t(i)]) - mean_log;
        sd_log += d * d;
    }
    sd_log = std::sqrt(sd_log / cfg.n_items);
    for (int i = 0; i < cfg.n_items; ++i)
        ds.items[size_t(i)].popularity_logit =
            sd_log > 0 ? (std::log(weights[size_t(i)]) - mean_log) / sd_log : 0.0;

    // cold items: never candidates or behavior entries before the split
    int n_cold = static_cast<int>(std::floor(cfg.cold_start_fraction * cfg.n_items));
    std::vector<uint8_t> is_cold(static_cast<size_t>(cfg.n_items), 0);
    for (int idx : cold_rng.sample_without_replacement(cfg.n_items, n_cold)) {
        ds.cold_items.push_back(idx);
        is_cold[size_t(idx)] = 1;
    }
    std::sort(ds.cold_items.begin(), ds.cold_items.end());

    std::vector<int> warm_ids, all_ids;
    for (int i = 0; i < cfg.n_items; ++i) {
        all_ids.push_back(i);
        if (!is_cold[size_t(i)]) warm_ids.push_back(i);
    }
    ZipfSampler warm_sampler, full_sampler;
    warm_sampler.build(weights, warm_ids);
    full_sampler.build(weights, all_ids);

    // bootstrap histories so every behavior sequence is nonempty
    std::vector<std::vector<int64_t>> history(static_cast<size_t>(cfg.n_users));
    for (int u = 0; u < cfg.n_users; ++u)
        for (int b = 0; b < cfg.bootstrap_clicks; ++b)
            history[size_t(u)].push_back(warm_sampler.draw(event_rng));

    const int64_t n_train = std::llround((1.0 - cfg.test_fraction) * cfg.n_interactions);
    ds.split_time = n_train;

    // one warm-up sweep guarantees every warm item at least one train exposure
    std::vector<int> sweep = warm_ids;
    event_rng.shuffle(sweep);

    for (int64_t t = 0; t < cfg.n_interactions; ++t) {
        const bool in_train = t < n_train;
        int item_id;
        if (in_train && t < static_cast<int64_t>(sweep.size()))
            item_id = sweep[static_cast<size_t>(t)];
        else if (in_train)
            item_id = warm_sampler.draw(event_rng);
        else
            item_id = full_sampler.draw(event_rng);
        int user_id = static_cast<int>(event_rng.uniform_int(static_cast<uint64_t>(cfg.n_users)));

        TrainingExample ex;
        ex.user_id = user_id;
        ex.item_id = item_id;
        ex.category = ds.items[size_t(item_id)].category;
        ex.time_index = t;
        const auto& h = history[size_t(user_id)];
        size_t keep = std::min<size_t>(h.size(), static_cast<size_t>(cfg.max_history));
        ex.behavior.assign(h.end() - static_cast<long>(keep), h.end());
        ex.context.resize(static_cast<size_t>(cfg.context_dim));
        for (double& v : ex.context) v = event_rng.normal();

        double p = sigmoid(ground_truth_logit(ds, user_id, item_id));
        ex.label = event_rng.uniform() < p ? 1 : 0;
        if (ex.label) {
            history[size_t(user_id)].push_back(item_id);
            if (history[size_t(user_id)].size() > 4096)
                history[size_t(user_id)].erase(history[size_t(user_id)].begin(),
                                               history[size_t(user_id)].end() - cfg.max_history);
        }
        (in_train ? ds.train : ds.test).push_back(std::move(ex));
    }
    return ds;
}

// --- persistence ---------------------------------------------------------------

void save_dataset(const SynthDataset& ds, const std::string& dir) {
    fs::create_directories(dir);
    const SynthConfig& cfg = ds.config;

    // vectors.bin layout (double offsets): per-item materials, per-example
    // contexts (train then test), item latents, user latents, popularity logits
    std::vector<double> pool;
    auto push = [&pool](std::span<const double> v) {
        size_t off = pool.size();
        pool.insert(pool.end(), v.begin(), v.end());
        return off;
    };

    json items_meta = json::array();
    std::vector<std::pair<size_t, size_t>> item_offsets;
    for (const SynthItem& it : ds.items) {
        size_t vis_off = pool.size();
        for (const auto& img : it.content.images) push(img);
        size_t txt_off = pool.size();
        for (const auto& txt : it.content.texts) push(txt);
        item_offsets.emplace_back(vis_off, txt_off);
        items_meta.push_back(json{{"id", it.id},
                                  {"cat", it.category},
                                  {"m", it.content.images.size()},
                                  {"k", it.content.texts.size()},
                                  {"vis_off", vis_off},
                                  {"txt_off", txt_off}});
    }

    std::ostringstream examples_text;
    auto dump_examples = [&](const std::vector<TrainingExample>& list) {
        for (const TrainingExample& ex : list) {
            size_t ctx_off = push(ex.context);
            json j{{"t", ex.time_index}, {"user", ex.user_id}, {"item", ex.item_id},
                   {"cat", ex.category},  {"label", ex.label},  {"hist", ex.behavior},
                   {"ctx_off", ctx_off}};
            examples_text << j.dump() << "\n";
        }
    };
    dump_examples(ds.train);
    dump_examples(ds.test);

    size_t item_latents_off = pool.size();
    for (const SynthItem& it : ds.items) push(it.latent);
    size_t user_latents_off = pool.size();
    for (const auto& u : ds.user_latents) push(u);
    size_t pop_off = pool.size();
    {
        std::vector<double> pops;
        for (const SynthItem& it : ds.items) pops.push_back(it.popularity_logit);
        push(pops);
    }

    json manifest;
    manifest["schema_version"] = kSchemaVersion;
    manifest["seed"] = cfg.seed;
    manifest["config"] = json::parse(cfg.to_json());
    manifest["counts"] = {{"n_users", cfg.n_users},
                          {"n_items", cfg.n_items},
                          {"n_categories", cfg.n_categories},
                          {"n_train", ds.train.size()},
                          {"n_test", ds.test.size()}};
    manifest["split_time"] = ds.split_time;
    manifest["cold_items"] = ds.cold_items;
    manifest["vectors"] = {{"item_latents_off", item_latents_off},
                           {"user_latents_off", user_latents_off},
                           {"popularity_off", pop_off},
                           {"total_doubles", pool.size()}};

    io::write_text_file(dir + "/manifest.json", manifest.dump(2) + "\n");
    {
        std::ostringstream items_text;
        for (const auto& j : items_meta) items_text << j.dump() << "\n";
        io::write_text_file(dir + "/items.jsonl", items_text.str());
    }
    io::write_text_file(dir + "/examples.jsonl", examples_text.str());

    std::ofstream os(dir + "/vectors.bin", std::ios::binary);
    if (!os) throw IoError("cannot open " + dir + "/vectors.bin for writing");
    io::CrcWriter w(os);
    w.bytes(kVectorsMagic, sizeof(kVectorsMagic));
    w.u32(kSchemaVersion);
    w.u64(pool.size());
    w.f64_array(pool);
    io::write_u32(os, w.crc());
    if (!os) throw IoError("vectors.bin write failed");
}

SynthDataset load_dataset(const std::string& dir) {
    json manifest = json::parse(io::read_text_file(dir + "/manifest.json"));
    if (manifest.at("schema_version") != kSchemaVersion)
        throw IoError("unsupported dataset schema version");

    SynthDataset ds;
    ds.config = SynthConfig::from_json(manifest.at("config").dump());
    ds.split_time = manifest.at("split_time");
    ds.cold_items = manifest.at("cold_items").get<std::vector<int64_t>>();

    std::vector<double> pool;
    {
        std::ifstream is(dir + "/vectors.bin", std::ios::binary);
        if (!is) throw IoError("cannot open " + dir + "/vectors.bin");
        io::CrcReader r(is);
        char magic[8];
        r.bytes(magic, 8);
        if (std::memcmp(magic, kVectorsMagic, 8) != 0) throw IoError("vectors.bin has a bad magic header");
        if (r.u32() != kSchemaVersion) throw IoError("vectors.bin schema version mismatch");
        uint64_t count = r.u64();
        pool = r.f64_array(count);
        uint32_t stored = io::read_u32(is);
        if (stored != r.crc()) throw IoError("vectors.bin checksum mismatch (file corrupted?)");
    }
    auto slice = [&pool](size_t off, size_t len) {
        if (off + len > pool.size()) throw IoError("vector offset out of range");
        return std::vector<double>(pool.begin() + static_cast<long>(off),
                                   pool.begin() + static_cast<long>(off + len));
    };

    const SynthConfig& cfg = ds.config;
    {
        std::istringstream items_in(io::read_text_file(dir + "/items.jsonl"));
        std::string line;
        while (std::getline(items_in, line)) {
            if (line.empty()) continue;
            json j = json::parse(line);
            SynthItem it;
            it.id = j.at("id");
            it.category = j.at("cat");
            it.content.item_id = it.id;
            size_t m = j.at("m"), k = j.at("k");
            size_t vis_off = j.at("vis_off"), txt_off = j.at("txt_off");
            for (size_t s = 0; s < m; ++s)
                it.content.images.push_back(
                    slice(vis_off + s * size_t(cfg.stub.raw_visual_dim), size_t(cfg.stub.raw_visual_dim)));
            for (size_t s = 0; s < k; ++s)
                it.content.texts.push_back(
                    slice(txt_off + s * size_t(cfg.stub.raw_text_dim), size_t(cfg.stub.raw_text_dim)));
            ds.items.push_back(std::move(it));
        }
    }
    size_t item_latents_off = manifest.at("vectors").at("item_latents_off");
    size_t user_latents_off = manifest.at("vectors").at("user_latents_off");
    size_t pop_off = manifest.at("vectors").at("popularity_off");
    for (size_t i = 0; i < ds.items.size(); ++i)
        ds.items[i].latent = slice(item_latents_off + i * size_t(cfg.latent_dim), size_t(cfg.latent_dim));
    for (int u = 0; u < cfg.n_users; ++u)
        ds.user_latents.push_back(slice(user_latents_off + size_t(u) * size_t(cfg.latent_dim), size_t(cfg.latent_dim)));
    {
        auto pops = slice(pop_off, ds.items.size());
        for (size_t i = 0; i < ds.items.size(); ++i) ds.items[i].popularity_logit = pops[i];
    }

    size_t n_train = manifest.at("counts").at("n_train");
    {
        std::istringstream ex_in(io::read_text_file(dir + "/examples.jsonl"));
        std::string line;
        size_t index = 0;
        while (std::getline(ex_in, line)) {
            if (line.empty()) continue;
            json j = json::parse(line);
            TrainingExample ex;
            ex.time_index = j.at("t");
            ex.user_id = j.at("user");
            ex.item_id = j.at("item");
            ex.category = j.at("cat");
            ex.label = j.at("label");
            ex.behavior = j.at("hist").get<std::vector<int64_t>>();
            size_t ctx_off = j.at("ctx_off");
            ex.context = slice(ctx_off, size_t(cfg.context_dim));
            (index < n_train ? ds.train : ds.test).push_back(std::move(ex));
            ++index;
        }
    }
    return ds;
}

// --- batching -------------------------------------------------------------------

std::vector<std::vector<size_t>> epoch_batches(size_t n, int batch_size, uint64_t seed) {
    if (batch_size < 1) throw ConfigError("batch size must be >= 1");
    std::vector<size_t> order(n);
    for (size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng(seed);
    rng.shuffle(order);
    std::vector<std::vector<size_t>> batches;
    size_t b = static_cast<size_t>(batch_size);
    for (size_t start = 0; start + b <= n; start += b)
        batches.emplace_back(order.begin() + static_cast<long>(start),
                             order.begin() + static_cast<long>(start + b));
    return batches;
}

TrainingExample sized_example(const TrainingExample& ex, int n_active) {
    if (n_active < 1) throw ConfigError("active sequence length must be >= 1");
    if (ex.behavior.empty()) throw DegenerateInputError("behavior sequence is empty");
    TrainingExample out = ex;
    size_t n = static_cast<size_t>(n_active);
    if (out.behavior.size() > n) {
        out.behavior.assign(ex.behavior.end() - static_cast<long>(n), ex.behavior.end());
    } else {
        size_t base = out.behavior.size();
        for (size_t i = 0; out.behavior.size() < n; ++i) out.behavior.push_back(out.behavior[i % base]);
    }
    return out;
}

std::vector<TrainingExample> assemble_batch(std::span<const TrainingExample> examples,
                                            std::span<const size_t> indices, int n_active) {
    std::vector<TrainingExample> batch;
    batch.reserve(indices.size());
    for (size_t idx : indices) batch.push_back(sized_example(examples[idx], n_active));
    return batch;
}

std::span<const EncodedModality> DatasetContentProvider::encoded(int64_t item_id) const {
    scratch_ = stub_.encode_item(ds_.item(item_id).content);
    return scratch_;
}

}  // namespace mmrank
