#pragma once

#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "mmrank/rng.hpp"
#include "mmrank/tensor.hpp"

namespace mmrank::nn {

using ad::Tensor;

// Ordered name -> parameter map. Registration order is the checkpoint layout
// and the optimizer iteration order, so it must be deterministic.
class ParamRegistry {
public:
    Tensor& add(const std::string& name, Tensor t);
    Tensor* find(const std::string& name);
    const Tensor* find(const std::string& name) const;
    const std::vector<std::pair<std::string, Tensor>>& items() const { return items_; }
    std::vector<std::pair<std::string, Tensor>>& items_mutable() { return items_; }
    size_t trainable_scalar_count() const;
    void zero_grads();

private:
    std::vector<std::pair<std::string, Tensor>> items_;
    std::unordered_map<std::string, size_t> index_;
};

std::vector<double> gaussian_init(Rng& rng, size_t n, double stddev);

// Low-rank bypass around a frozen base weight: down {in,r} Gaussian-init,
// up {r,out} zero-init so attaching changes no forward output.
struct LoraAdapter {
    Tensor down;
    Tensor up;
    int rank = 0;
};

struct Linear {
    Tensor weight;  // {in, out}
    Tensor bias;    // {out}; undefined handle means no bias
    std::optional<LoraAdapter> lora;

    int in_features() const { return weight.dim(0); }
    int out_features() const { return weight.dim(1); }

    // x: {in} or {batch, in}. With an adapter attached the base product goes
    // through stop_gradient: y = sg(x·W) + (x·down)·up (+ frozen bias).
    Tensor forward(const Tensor& x) const;
};

Linear make_linear(ParamRegistry& reg, const std::string& name, int in, int out, bool with_bias,
                   Rng& rng, double init_std);

// Freezes the base weight (and bias) and attaches a fresh adapter. Throws
// StateError when called twice on the same layer, ConfigError when the rank
// is not below min(in, out).
void attach_lora(ParamRegistry& reg, const std::string& name, Linear& layer, int rank, Rng& rng,
                 double init_std = 0.02);

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Per-parameter moment state keyed by name; parameters registered after the
// optimizer was created (LoRA adapters) get fresh slots with their own step
// counts, so bias correction stays right for them.
class Adam {
public:
    explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

    void step(ParamRegistry& params);
    void reset(const std::string& name_prefix = "");

    struct Slot {
        std::vector<double> m, v;
        int64_t t = 0;
    };
    const AdamConfig& config() const { return cfg_; }
    std::unordered_map<std::string, Slot>& slots() { return slots_; }

private:
    AdamConfig cfg_;
    std::unordered_map<std::string, Slot> slots_;
};

}  // namespace mmrank::nn
