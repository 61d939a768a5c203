#include "geopeft/nn.hpp"

#include <cmath>

namespace geopeft::nn {

Tensor normal_param(Shape shape, double stddev, Rng& rng) {
    if (MetaScope::active()) return Tensor::zeros(std::move(shape));
    std::vector<float> v(shape_numel(shape));
    for (auto& x : v) x = static_cast<float>(rng.normal(0.0, stddev));
    return Tensor::from_data(std::move(shape), std::move(v));
}

Tensor uniform_param(Shape shape, double lo, double hi, Rng& rng) {
    if (MetaScope::active()) return Tensor::zeros(std::move(shape));
    std::vector<float> v(shape_numel(shape));
    for (auto& x : v) x = static_cast<float>(rng.uniform(lo, hi));
    return Tensor::from_data(std::move(shape), std::move(v));
}

Tensor constant_param(Shape shape, float value) { return Tensor::full(std::move(shape), value); }

Tensor copy_param(const Tensor& t) {
    if (!t.defined()) return t;
    if (t.is_meta()) {
        MetaScope scope;
        return Tensor::zeros(t.shape(), t.requires_grad());
    }
    return t.clone();
}

void add_param(ParameterList& out, const std::string& name, const Tensor& t) {
    if (t.defined()) out.push_back({name, t});
}

// ------------------------------------------------------------------ Linear

Linear Linear::make(std::size_t in, std::size_t out, Rng& rng, double stddev, bool with_bias) {
    Linear l;
    l.weight = normal_param({out, in}, stddev, rng);
    if (with_bias) l.bias = constant_param({out}, 0.0f);
    return l;
}

Tensor Linear::forward(const Tensor& x) const {
    auto y = ops::matmul(x, weight, true);
    if (bias.defined()) y = ops::bias_add(y, bias, y.dim() - 1);
    if (has_lora()) {
        auto delta = ops::matmul(ops::matmul(x, lora_a, true), lora_b, true);
        if (lora_scaling != 1.0f) delta = ops::scale(delta, lora_scaling);
        y = ops::add(y, delta);
    }
    return y;
}

Linear Linear::clone() const {
    Linear l;
    l.weight = copy_param(weight);
    l.bias = copy_param(bias);
    l.lora_a = copy_param(lora_a);
    l.lora_b = copy_param(lora_b);
    l.lora_scaling = lora_scaling;
    return l;
}

void Linear::parameters(ParameterList& out, const std::string& prefix, const std::string& lora_prefix) const {
    add_param(out, prefix + ".weight", weight);
    add_param(out, prefix + ".bias", bias);
    add_param(out, lora_prefix + ".A", lora_a);
    add_param(out, lora_prefix + ".B", lora_b);
}

// --------------------------------------------------------------- LayerNorm

LayerNorm LayerNorm::make(std::size_t dim, double eps) {
    return {constant_param({dim}, 1.0f), constant_param({dim}, 0.0f), eps};
}

Tensor LayerNorm::forward(const Tensor& x) const { return ops::layer_norm(x, gamma, beta, eps); }

Tensor LayerNorm::forward_channels(const Tensor& x) const {
    auto nhwc = ops::transpose(x, {0, 2, 3, 1});
    return ops::transpose(forward(nhwc), {0, 3, 1, 2});
}

LayerNorm LayerNorm::clone() const { return {copy_param(gamma), copy_param(beta), eps}; }

void LayerNorm::parameters(ParameterList& out, const std::string& prefix) const {
    add_param(out, prefix + ".weight", gamma);
    add_param(out, prefix + ".bias", beta);
}

// -------------------------------------------------------------------- Conv

Conv Conv::make(std::size_t in, std::size_t out, std::size_t kernel, ops::Conv2dOptions opts, Rng& rng,
                bool with_bias) {
    Conv c;
    c.weight = normal_param({out, in, kernel, kernel}, std::sqrt(2.0 / static_cast<double>(in * kernel * kernel)), rng);
    if (with_bias) c.bias = constant_param({out}, 0.0f);
    c.opts = opts;
    return c;
}

Conv Conv::make_transposed(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride, Rng& rng,
                           bool with_bias) {
    Conv c;
    c.weight = normal_param({in, out, kernel, kernel}, std::sqrt(1.0 / static_cast<double>(in)), rng);
    if (with_bias) c.bias = constant_param({out}, 0.0f);
    c.opts = {stride, 0, 0};
    c.transposed = true;
    return c;
}

Tensor Conv::forward(const Tensor& x) const {
    auto y = transposed ? ops::conv_transpose2d(x, weight, opts) : ops::conv2d(x, weight, opts);
    if (bias.defined()) y = ops::bias_add(y, bias, 1);
    return y;
}

Conv Conv::clone() const { return {copy_param(weight), copy_param(bias), opts, transposed}; }

void Conv::parameters(ParameterList& out, const std::string& prefix) const {
    add_param(out, prefix + ".weight", weight);
    add_param(out, prefix + ".bias", bias);
}

// --------------------------------------------------------------- BatchNorm

BatchNorm BatchNorm::make(std::size_t channels) {
    BatchNorm b;
    b.gamma = constant_param({channels}, 1.0f);
    b.beta = constant_param({channels}, 0.0f);
    b.running_mean = constant_param({channels}, 0.0f);
    b.running_var = constant_param({channels}, 1.0f);
    return b;
}

Tensor BatchNorm::forward(const Tensor& x, bool training) {
    if (!training) {
        if (x.is_meta()) return ops::batch_norm(x, gamma, beta, eps);
        const auto m = running_mean.to_vector();
        const auto v = running_var.to_vector();
        return ops::batch_norm_eval(x, gamma, beta, m, v, eps);
    }
    std::vector<float> mean, var;
    auto y = ops::batch_norm(x, gamma, beta, eps, &mean, &var);
    if (!x.is_meta()) {
        const double n = static_cast<double>(x.numel() / x.size(1));
        const double unbias = n > 1 ? n / (n - 1) : 1.0;
        auto rm = running_mean.mutable_data();
        auto rv = running_var.mutable_data();
        for (std::size_t c = 0; c < rm.size(); ++c) {
            rm[c] = static_cast<float>((1 - momentum) * rm[c] + momentum * mean[c]);
            rv[c] = static_cast<float>((1 - momentum) * rv[c] + momentum * var[c] * unbias);
        }
    }
    return y;
}

BatchNorm BatchNorm::clone() const {
    BatchNorm b = *this;
    b.gamma = copy_param(gamma);
    b.beta = copy_param(beta);
    b.running_mean = copy_param(running_mean);
    b.running_var = copy_param(running_var);
    return b;
}

void BatchNorm::parameters(ParameterList& out, const std::string& prefix) const {
    add_param(out, prefix + ".weight", gamma);
    add_param(out, prefix + ".bias", beta);
    out.push_back({prefix + ".running_mean", running_mean, true});
    out.push_back({prefix + ".running_var", running_var, true});
}

ConvBnRelu ConvBnRelu::make(std::size_t in, std::size_t out, std::size_t kernel, Rng& rng) {
    return {Conv::make(in, out, kernel, {1, kernel / 2}, rng, false), BatchNorm::make(out)};
}

Tensor ConvBnRelu::forward(const Tensor& x, bool training) { return ops::relu(bn.forward(conv.forward(x), training)); }

ConvBnRelu ConvBnRelu::clone() const { return {conv.clone(), bn.clone()}; }

void ConvBnRelu::parameters(ParameterList& out, const std::string& prefix) const {
    conv.parameters(out, prefix + ".conv");
    bn.parameters(out, prefix + ".bn");
}

// ----------------------------------------------------------------- helpers

Tensor broadcast_batch(const Tensor& x, std::size_t batch) {
    Shape s = x.shape();
    s.insert(s.begin(), 1);
    auto one = ops::reshape(x, s);
    if (batch == 1) return one;
    return ops::concat(std::vector<Tensor>(batch, one), 0);
}

Tensor map_to_tokens(const Tensor& x) {
    const std::size_t n = x.size(0), c = x.size(1), hw = x.size(2) * x.size(3);
    return ops::transpose(ops::reshape(x, {n, c, hw}), {0, 2, 1});
}

Tensor tokens_to_map(const Tensor& x, std::size_t h, std::size_t w) {
    const std::size_t n = x.size(0), c = x.size(2);
    return ops::reshape(ops::transpose(x, {0, 2, 1}), {n, c, h, w});
}

}  // namespace geopeft::nn
