#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <variant>
#include <vector>

#include "geopeft/tensor.hpp"

/// Differentiable primitives. Every function validates shapes, computes the
/// forward kernel (skipped for meta tensors) and records a backward rule when
/// any input requires a gradient.
namespace geopeft::ops {

inline constexpr int kIgnoreIndex = 255;

struct Conv2dOptions {
    std::size_t stride = 1;
    std::size_t padding = 0;
    /// conv_transpose2d only: extra rows/columns on the far side of the output.
    std::size_t output_padding = 0;
};

// Elementwise. `b` may match `a` or any suffix of a's shape (broadcast over
// the leading axes).
template <typename T> BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T> BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T> BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T> BasicTensor<T> scale(const BasicTensor<T>& x, T factor);

/// Adds a vector of length shape[axis] along `axis`.
template <typename T> BasicTensor<T> bias_add(const BasicTensor<T>& x, const BasicTensor<T>& bias, std::size_t axis);

/// [.., K] x [K, N], or batched [B, M, K] x [B, K, N]. With transpose_b the
/// second operand is stored as [N, K] (resp. [B, N, K]).
template <typename T> BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b, bool transpose_b = false);

template <typename T> BasicTensor<T> transpose(const BasicTensor<T>& x, const std::vector<std::size_t>& perm);
template <typename T> BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape);
template <typename T> BasicTensor<T> slice(const BasicTensor<T>& x, std::size_t axis, std::size_t begin, std::size_t end);
template <typename T> BasicTensor<T> concat(const std::vector<BasicTensor<T>>& parts, std::size_t axis);

template <typename T> BasicTensor<T> gelu(const BasicTensor<T>& x);
template <typename T> BasicTensor<T> relu(const BasicTensor<T>& x);
/// Softmax over the last axis.
template <typename T> BasicTensor<T> softmax(const BasicTensor<T>& x);
template <typename T> BasicTensor<T> dropout(const BasicTensor<T>& x, double p, std::uint64_t seed);

/// Normalizes over the last axis, then applies gamma/beta of that length.
template <typename T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& gamma, const BasicTensor<T>& beta, double eps);

/// Training-mode batch norm over (N, H, W) of an [N, C, H, W] tensor. The
/// batch statistics are written to the optional outputs (variance biased).
template <typename T>
BasicTensor<T> batch_norm(const BasicTensor<T>& x, const BasicTensor<T>& gamma, const BasicTensor<T>& beta, double eps,
                          std::vector<T>* batch_mean = nullptr, std::vector<T>* batch_var = nullptr);

/// Inference-mode batch norm with fixed statistics.
template <typename T>
BasicTensor<T> batch_norm_eval(const BasicTensor<T>& x, const BasicTensor<T>& gamma, const BasicTensor<T>& beta,
                               const std::vector<T>& mean, const std::vector<T>& var, double eps);

/// x: [N, C, H, W], weight: [O, C, kh, kw]; zero padding.
template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& weight, Conv2dOptions opts = {});

/// x: [N, Cin, H, W], weight: [Cin, Cout, kh, kw]. Adjoint of conv2d.
template <typename T>
BasicTensor<T> conv_transpose2d(const BasicTensor<T>& x, const BasicTensor<T>& weight, Conv2dOptions opts = {});

/// Half-pixel (align_corners = false) bilinear resize of [N, C, H, W].
template <typename T>
BasicTensor<T> bilinear_interpolate(const BasicTensor<T>& x, std::size_t out_h, std::size_t out_w);

/// Mirror padding without repeating the edge; each pad must be < extent.
template <typename T>
BasicTensor<T> reflect_pad(const BasicTensor<T>& x, std::size_t top, std::size_t bottom, std::size_t left,
                           std::size_t right);

template <typename T>
BasicTensor<T> adaptive_avg_pool2d(const BasicTensor<T>& x, std::size_t out_h, std::size_t out_w);
template <typename T> BasicTensor<T> max_pool2d(const BasicTensor<T>& x, std::size_t kernel);

template <typename T> BasicTensor<T> sum(const BasicTensor<T>& x);
template <typename T> BasicTensor<T> mean(const BasicTensor<T>& x);
/// Mean over one axis, which is removed from the shape.
template <typename T> BasicTensor<T> mean_axis(const BasicTensor<T>& x, std::size_t axis);

/// Pixel-wise cross-entropy of logits [N, K, H, W] against integer class ids
/// [N, H, W] (stored as reals). Pixels labelled kIgnoreIndex are skipped; the
/// result is the mean over the remaining pixels (0 if none remain).
template <typename T>
BasicTensor<T> cross_entropy(const BasicTensor<T>& logits, const BasicTensor<T>& targets);

/// softmax(q k^T / sqrt(dk)) v for [B, Tq, dk], [B, Tk, dk], [B, Tk, dv],
/// composed from matmul, scale and softmax.
template <typename T>
BasicTensor<T> scaled_dot_product_attention(const BasicTensor<T>& q, const BasicTensor<T>& k, const BasicTensor<T>& v);

/// Attribute bag for the string-dispatched entry point.
class Attrs {
public:
    using Value = std::variant<double, std::vector<std::int64_t>>;

    Attrs() = default;
    Attrs(std::initializer_list<std::pair<const std::string, Value>> init) : values_(init) {}

    Attrs& set(const std::string& key, Value v) {
        values_[key] = std::move(v);
        return *this;
    }
    bool has(const std::string& key) const { return values_.count(key) != 0; }
    double number(const std::string& op, const std::string& key) const;
    double number_or(const std::string& key, double fallback) const;
    std::vector<std::int64_t> ints(const std::string& op, const std::string& key) const;

private:
    std::map<std::string, Value> values_;
};

/// Dispatches a primitive by name, e.g. "matmul", "conv2d" {stride, padding},
/// "layer_norm" {eps}. Unknown names are rejected.
template <typename T>
BasicTensor<T> apply_primitive(const std::string& op_id, const std::vector<BasicTensor<T>>& inputs,
                               const Attrs& attrs = {});

/// Names accepted by apply_primitive.
const std::vector<std::string>& primitive_names();

}  // namespace geopeft::ops
