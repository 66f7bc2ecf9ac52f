#include "mmrank/nn.hpp"

#include <cmath>

#include "mmrank/errors.hpp"

namespace mmrank::nn {

using namespace ad;

Tensor& ParamRegistry::add(const std::string& name, Tensor t) {
    if (index_.count(name)) throw StateError("parameter '" + name + "' registered twice");
    index_.emplace(name, items_.size());
    items_.emplace_back(name, std::move(t));
    return items_.back().second;
}

Tensor* ParamRegistry::find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &items_[it->second].second;
}

const Tensor* ParamRegistry::find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &items_[it->second].second;
}

size_t ParamRegistry::trainable_scalar_count() const {
    size_t n = 0;
    for (const auto& [name, t] : items_)
        if (t.requires_grad()) n += t.size();
    return n;
}

void ParamRegistry::zero_grads() {
    for (auto& [name, t] : items_) t.zero_grad();
}

std::vector<double> gaussian_init(Rng& rng, size_t n, double stddev) {
    std::vector<double> v(n);
    for (double& x : v) x = rng.normal(0.0, stddev);
    return v;
}

Tensor Linear::forward(const Tensor& x) const {
    bool vector_input = x.ndim() == 1;
    if ((vector_input ? x.dim(0) : x.dim(1)) != in_features())
        throw DimensionError("linear: input " + shape_str(x.shape()) + " vs weight " +
                             shape_str(weight.shape()));
    Tensor xm = vector_input ? reshape(x, {1, in_features()}) : x;
    Tensor y;
    if (lora) {
        Tensor base = stop_gradient(matmul(xm, weight));
        y = add(base, matmul(matmul(xm, lora->down), lora->up));
    } else {
        y = matmul(xm, weight);
    }
    if (bias.defined()) y = add_rowwise(y, bias);
    return vector_input ? reshape(y, {out_features()}) : y;
}

Linear make_linear(ParamRegistry& reg, const std::string& name, int in, int out, bool with_bias,
                   Rng& rng, double init_std) {
    Linear lin;
    lin.weight = reg.add(name + ".weight",
                         Tensor::param({in, out}, gaussian_init(rng, size_t(in) * size_t(out), init_std)));
    if (with_bias) lin.bias = reg.add(name + ".bias", Tensor::zeros({out}, true));
    return lin;
}

void attach_lora(ParamRegistry& reg, const std::string& name, Linear& layer, int rank, Rng& rng,
                 double init_std) {
    if (layer.lora) throw StateError("lora already attached to '" + name + "'");
    int in = layer.in_features(), out = layer.out_features();
    if (rank < 1 || rank >= std::min(in, out))
        throw ConfigError("lora rank " + std::to_string(rank) + " must lie in [1, min(" +
                          std::to_string(in) + "," + std::to_string(out) + "))");
    layer.weight.set_requires_grad(false);
    if (layer.bias.defined()) layer.bias.set_requires_grad(false);
    LoraAdapter adapter;
    adapter.rank = rank;
    adapter.down = reg.add(name + ".lora_down",
                           Tensor::param({in, rank}, gaussian_init(rng, size_t(in) * size_t(rank), init_std)));
    adapter.up = reg.add(name + ".lora_up", Tensor::zeros({rank, out}, true));
    layer.lora = std::move(adapter);
}

void Adam::step(ParamRegistry& params) {
    for (auto& [name, t] : params.items_mutable()) {
        if (!t.requires_grad()) continue;
        Slot& slot = slots_[name];
        if (slot.m.size() != t.size()) {
            slot.m.assign(t.size(), 0.0);
            slot.v.assign(t.size(), 0.0);
            slot.t = 0;
        }
        ++slot.t;
        auto g = t.raw_grad();
        auto w = t.raw_data();
        double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(slot.t));
        double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(slot.t));
        for (size_t i = 0; i < w.size(); ++i) {
            slot.m[i] = cfg_.beta1 * slot.m[i] + (1.0 - cfg_.beta1) * g[i];
            slot.v[i] = cfg_.beta2 * slot.v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
            double mhat = slot.m[i] / bc1;
            double vhat = slot.v[i] / bc2;
            w[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
        }
    }
}

void Adam::reset(const std::string& name_prefix) {
    if (name_prefix.empty()) {
        slots_.clear();
        return;
    }
    for (auto it = slots_.begin(); it != slots_.end();) {
        if (it->first.rfind(name_prefix, 0) == 0)
            it = slots_.erase(it);
        else
            ++it;
    }
}

}  // namespace mmrank::nn
