#pragma once

#include <string>
#include <vector>

#include "geopeft/checkpoint.hpp"
#include "geopeft/ops.hpp"
#include "geopeft/random.hpp"

/// Small parameterised layers shared by the backbone, adapters and decoders.
namespace geopeft::nn {

// Parameter factories. Under a MetaScope they return storage-free tensors
// and leave the generator untouched.
Tensor normal_param(Shape shape, double stddev, Rng& rng);
Tensor uniform_param(Shape shape, double lo, double hi, Rng& rng);
Tensor constant_param(Shape shape, float value);

/// Deep copy that keeps the requires_grad flag.
Tensor copy_param(const Tensor& t);

void add_param(ParameterList& out, const std::string& name, const Tensor& t);

/// y = x W^T + b with W stored [out, in]. When a low-rank pair is attached,
/// y += scaling * (x A^T) B^T with A [r, in], B [out, r].
struct Linear {
    Tensor weight;
    Tensor bias;
    Tensor lora_a;
    Tensor lora_b;
    float lora_scaling = 1.0f;

    static Linear make(std::size_t in, std::size_t out, Rng& rng, double stddev = 0.02, bool with_bias = true);

    std::size_t in_features() const { return weight.size(1); }
    std::size_t out_features() const { return weight.size(0); }
    bool has_lora() const { return lora_a.defined(); }

    Tensor forward(const Tensor& x) const;
    Linear clone() const;
    void parameters(ParameterList& out, const std::string& prefix, const std::string& lora_prefix) const;
};

/// Normalises over the last axis.
struct LayerNorm {
    Tensor gamma;
    Tensor beta;
    double eps = 1e-6;

    static LayerNorm make(std::size_t dim, double eps = 1e-6);
    Tensor forward(const Tensor& x) const;
    /// Channel-wise on an [N, C, H, W] map.
    Tensor forward_channels(const Tensor& x) const;
    LayerNorm clone() const;
    void parameters(ParameterList& out, const std::string& prefix) const;
};

/// Conv2d (weight [O, C, k, k]) or transposed conv (weight [C, O, k, k]),
/// with an optional per-output-channel bias.
struct Conv {
    Tensor weight;
    Tensor bias;
    ops::Conv2dOptions opts;
    bool transposed = false;

    static Conv make(std::size_t in, std::size_t out, std::size_t kernel, ops::Conv2dOptions opts, Rng& rng,
                     bool with_bias = true);
    static Conv make_transposed(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride, Rng& rng,
                                bool with_bias = true);

    Tensor forward(const Tensor& x) const;
    Conv clone() const;
    void parameters(ParameterList& out, const std::string& prefix) const;
};

/// Batch norm with running statistics (momentum 0.1, unbiased running var).
struct BatchNorm {
    Tensor gamma;
    Tensor beta;
    Tensor running_mean;
    Tensor running_var;
    double eps = 1e-5;
    double momentum = 0.1;

    static BatchNorm make(std::size_t channels);
    /// In training mode the running statistics are updated in place.
    Tensor forward(const Tensor& x, bool training);
    BatchNorm clone() const;
    void parameters(ParameterList& out, const std::string& prefix) const;
};

/// conv -> batch norm -> relu.
struct ConvBnRelu {
    Conv conv;
    BatchNorm bn;

    static ConvBnRelu make(std::size_t in, std::size_t out, std::size_t kernel, Rng& rng);
    Tensor forward(const Tensor& x, bool training);
    ConvBnRelu clone() const;
    void parameters(ParameterList& out, const std::string& prefix) const;
};

/// Repeats a [rows, d] tensor into [batch, rows, d] on the tape.
Tensor broadcast_batch(const Tensor& x, std::size_t batch);

/// [N, C, H, W] <-> [N, H*W, C].
Tensor map_to_tokens(const Tensor& x);
Tensor tokens_to_map(const Tensor& x, std::size_t h, std::size_t w);

}  // namespace geopeft::nn
