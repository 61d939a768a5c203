#pragma once

// Gradient-check cases for every differentiable primitive, shared by the
// unit tests and the acceptance runner. Each case builds a scalar function
// sum(w * op(x, ...)) with random weights w so that every output coordinate
// contributes with a distinct factor.

#include <functional>
#include <string>
#include <vector>

#include "geopeft/ops.hpp"
#include "geopeft/random.hpp"

namespace geopeft::testing {

template <typename T>
struct GradCase {
    std::string name;
    std::function<BasicTensor<T>(const BasicTensor<T>&)> f;
    BasicTensor<T> point;
};

template <typename T>
BasicTensor<T> random_tensor(Rng& rng, Shape shape, double scale = 1.0) {
    std::vector<T> v(shape_numel(shape));
    for (auto& x : v) x = static_cast<T>(rng.normal() * scale);
    return BasicTensor<T>::from_data(std::move(shape), std::move(v));
}

// Values bounded away from zero, for primitives with a kink there.
template <typename T>
BasicTensor<T> away_from_zero(Rng& rng, Shape shape) {
    std::vector<T> v(shape_numel(shape));
    for (auto& x : v) {
        const double u = rng.uniform(0.05, 1.5);
        x = static_cast<T>(rng.uniform() < 0.5 ? -u : u);
    }
    return BasicTensor<T>::from_data(std::move(shape), std::move(v));
}

// Distinct values separated by at least `gap`, shuffled.
template <typename T>
BasicTensor<T> separated(Rng& rng, Shape shape, double gap) {
    std::vector<T> v(shape_numel(shape));
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<T>((static_cast<double>(i) - v.size() / 2.0) * gap);
    rng.shuffle(v);
    return BasicTensor<T>::from_data(std::move(shape), std::move(v));
}

template <typename T>
std::function<BasicTensor<T>(const BasicTensor<T>&)> weighted(
    Rng& rng, Shape out_shape, std::function<BasicTensor<T>(const BasicTensor<T>&)> op) {
    auto w = random_tensor<T>(rng, out_shape);
    return [w, op](const BasicTensor<T>& x) { return ops::sum(ops::mul(op(x), w)); };
}

/// All cases for one random instance. Shapes are small so a full central
/// difference sweep stays cheap.
template <typename T>
std::vector<GradCase<T>> primitive_grad_cases(Rng& rng) {
    using Tn = BasicTensor<T>;
    std::vector<GradCase<T>> cases;
    auto add_case = [&](std::string name, Shape out, std::function<Tn(const Tn&)> op, Tn point) {
        cases.push_back({std::move(name), weighted<T>(rng, std::move(out), std::move(op)), std::move(point)});
    };

    {
        auto b = random_tensor<T>(rng, {4});
        add_case("add", {3, 4}, [b](const Tn& x) { return ops::add(x, b); }, random_tensor<T>(rng, {3, 4}));
        auto a = random_tensor<T>(rng, {3, 4});
        add_case("add/broadcast", {3, 4}, [a](const Tn& x) { return ops::add(a, x); }, random_tensor<T>(rng, {4}));
        add_case("sub", {3, 4}, [a](const Tn& x) { return ops::sub(a, x); }, random_tensor<T>(rng, {4}));
        add_case("mul", {3, 4}, [b](const Tn& x) { return ops::mul(x, b); }, random_tensor<T>(rng, {3, 4}));
        add_case("mul/broadcast", {3, 4}, [a](const Tn& x) { return ops::mul(a, x); }, random_tensor<T>(rng, {4}));
        add_case("scale", {3, 4}, [](const Tn& x) { return ops::scale(x, T(-1.7)); }, random_tensor<T>(rng, {3, 4}));
    }
    {
        auto x0 = random_tensor<T>(rng, {2, 3, 2, 2});
        add_case("bias_add", {2, 3, 2, 2}, [x0](const Tn& b) { return ops::bias_add(x0, b, 1); },
                 random_tensor<T>(rng, {3}));
    }
    {
        auto b = random_tensor<T>(rng, {4, 5});
        auto bt = random_tensor<T>(rng, {5, 4});
        auto a = random_tensor<T>(rng, {3, 4});
        add_case("matmul/a", {3, 5}, [b](const Tn& x) { return ops::matmul(x, b); }, random_tensor<T>(rng, {3, 4}));
        add_case("matmul/b", {3, 5}, [a](const Tn& x) { return ops::matmul(a, x); }, random_tensor<T>(rng, {4, 5}));
        add_case("matmul/b^T", {3, 5}, [a](const Tn& x) { return ops::matmul(a, x, true); },
                 random_tensor<T>(rng, {5, 4}));
        add_case("matmul/a,b^T", {3, 5}, [bt](const Tn& x) { return ops::matmul(x, bt, true); },
                 random_tensor<T>(rng, {3, 4}));
        auto bb = random_tensor<T>(rng, {2, 4, 3});
        add_case("matmul/batched", {2, 3, 3}, [bb](const Tn& x) { return ops::matmul(x, bb); },
                 random_tensor<T>(rng, {2, 3, 4}));
        auto ab = random_tensor<T>(rng, {2, 3, 4});
        add_case("matmul/batched b^T", {2, 3, 5}, [ab](const Tn& x) { return ops::matmul(ab, x, true); },
                 random_tensor<T>(rng, {2, 5, 4}));
    }
    add_case("transpose", {4, 2, 3}, [](const Tn& x) { return ops::transpose(x, {2, 0, 1}); },
             random_tensor<T>(rng, {2, 3, 4}));
    add_case("reshape", {6, 4}, [](const Tn& x) { return ops::reshape(x, {6, 4}); }, random_tensor<T>(rng, {2, 3, 4}));
    add_case("slice", {2, 2, 4}, [](const Tn& x) { return ops::slice(x, 1, 1, 3); }, random_tensor<T>(rng, {2, 3, 4}));
    {
        auto other = random_tensor<T>(rng, {2, 2, 3});
        add_case("concat", {2, 4, 3}, [other](const Tn& x) { return ops::concat<T>({other, x, x}, 1); },
                 random_tensor<T>(rng, {2, 1, 3}));
    }
    add_case("gelu", {8}, [](const Tn& x) { return ops::gelu(x); }, random_tensor<T>(rng, {8}));
    add_case("relu", {8}, [](const Tn& x) { return ops::relu(x); }, away_from_zero<T>(rng, {8}));
    add_case("dropout", {8}, [](const Tn& x) { return ops::dropout(x, 0.3, 11); }, random_tensor<T>(rng, {8}));
    add_case("softmax", {3, 5}, [](const Tn& x) { return ops::softmax(x); }, random_tensor<T>(rng, {3, 5}));
    {
        auto g = random_tensor<T>(rng, {6});
        auto b = random_tensor<T>(rng, {6});
        auto x0 = random_tensor<T>(rng, {4, 6});
        add_case("layer_norm/x", {4, 6}, [g, b](const Tn& x) { return ops::layer_norm(x, g, b, 1e-5); },
                 random_tensor<T>(rng, {4, 6}));
        add_case("layer_norm/gamma", {4, 6}, [x0, b](const Tn& g2) { return ops::layer_norm(x0, g2, b, 1e-5); },
                 random_tensor<T>(rng, {6}));
        add_case("layer_norm/beta", {4, 6}, [x0, g](const Tn& b2) { return ops::layer_norm(x0, g, b2, 1e-5); },
                 random_tensor<T>(rng, {6}));
    }
    {
        auto g = random_tensor<T>(rng, {3});
        auto b = random_tensor<T>(rng, {3});
        auto x0 = random_tensor<T>(rng, {2, 3, 2, 2});
        add_case("batch_norm/x", {2, 3, 2, 2}, [g, b](const Tn& x) { return ops::batch_norm(x, g, b, 1e-5); },
                 random_tensor<T>(rng, {2, 3, 2, 2}));
        add_case("batch_norm/gamma", {2, 3, 2, 2}, [x0, b](const Tn& g2) { return ops::batch_norm(x0, g2, b, 1e-5); },
                 random_tensor<T>(rng, {3}));
        std::vector<T> mu{T(0.1), T(-0.2), T(0.3)}, var{T(1.5), T(0.7), T(2.0)};
        add_case("batch_norm_eval/x", {2, 3, 2, 2},
                 [g, b, mu, var](const Tn& x) { return ops::batch_norm_eval(x, g, b, mu, var, 1e-5); },
                 random_tensor<T>(rng, {2, 3, 2, 2}));
    }
    {
        auto w = random_tensor<T>(rng, {4, 2, 3, 3}, 0.5);
        auto x0 = random_tensor<T>(rng, {1, 2, 5, 5});
        add_case("conv2d/x", {1, 4, 3, 3}, [w](const Tn& x) { return ops::conv2d(x, w, {2, 1}); },
                 random_tensor<T>(rng, {1, 2, 5, 5}));
        add_case("conv2d/w", {1, 4, 3, 3}, [x0](const Tn& w2) { return ops::conv2d(x0, w2, {2, 1}); },
                 random_tensor<T>(rng, {4, 2, 3, 3}, 0.5));
        auto wt = random_tensor<T>(rng, {2, 3, 2, 2}, 0.5);
        auto xt = random_tensor<T>(rng, {2, 2, 3, 3});
        add_case("conv_transpose2d/x", {2, 3, 6, 6}, [wt](const Tn& x) { return ops::conv_transpose2d(x, wt, {2, 0}); },
                 random_tensor<T>(rng, {2, 2, 3, 3}));
        add_case("conv_transpose2d/w", {2, 3, 6, 6}, [xt](const Tn& w2) { return ops::conv_transpose2d(xt, w2, {2, 0}); },
                 random_tensor<T>(rng, {2, 3, 2, 2}, 0.5));
        auto wp = random_tensor<T>(rng, {2, 2, 3, 3}, 0.5);
        add_case("conv_transpose2d/padded", {1, 2, 5, 5},
                 [wp](const Tn& x) { return ops::conv_transpose2d(x, wp, {2, 1}); }, random_tensor<T>(rng, {1, 2, 3, 3}));
    }
    add_case("bilinear_interpolate/up", {1, 2, 7, 5}, [](const Tn& x) { return ops::bilinear_interpolate(x, 7, 5); },
             random_tensor<T>(rng, {1, 2, 3, 2}));
    add_case("bilinear_interpolate/down", {1, 1, 2, 3}, [](const Tn& x) { return ops::bilinear_interpolate(x, 2, 3); },
             random_tensor<T>(rng, {1, 1, 5, 6}));
    add_case("reflect_pad", {1, 2, 6, 7}, [](const Tn& x) { return ops::reflect_pad(x, 1, 2, 2, 1); },
             random_tensor<T>(rng, {1, 2, 3, 4}));
    add_case("adaptive_avg_pool2d", {1, 2, 3, 2}, [](const Tn& x) { return ops::adaptive_avg_pool2d(x, 3, 2); },
             random_tensor<T>(rng, {1, 2, 5, 4}));
    add_case("adaptive_avg_pool2d/up", {1, 1, 6, 6}, [](const Tn& x) { return ops::adaptive_avg_pool2d(x, 6, 6); },
             random_tensor<T>(rng, {1, 1, 4, 4}));
    add_case("max_pool2d", {1, 2, 2, 2}, [](const Tn& x) { return ops::max_pool2d(x, 2); },
             separated<T>(rng, {1, 2, 4, 4}, 0.05));
    add_case("mean_axis", {2, 4}, [](const Tn& x) { return ops::mean_axis(x, 1); }, random_tensor<T>(rng, {2, 3, 4}));
    add_case("mean", {}, [](const Tn& x) { return ops::mean(x); }, random_tensor<T>(rng, {3, 4}));
    add_case("sum", {}, [](const Tn& x) { return ops::sum(x); }, random_tensor<T>(rng, {3, 4}));
    {
        std::vector<T> labels{0, 2, 1, static_cast<T>(ops::kIgnoreIndex), 1, 0, 2, 2};
        auto target = Tn::from_data({2, 2, 2}, labels);
        cases.push_back({"cross_entropy", [target](const Tn& x) { return ops::cross_entropy(x, target); },
                         random_tensor<T>(rng, {2, 3, 2, 2})});
    }
    {
        auto k = random_tensor<T>(rng, {2, 5, 4});
        auto v = random_tensor<T>(rng, {2, 5, 3});
        add_case("attention/q", {2, 3, 3}, [k, v](const Tn& q) { return ops::scaled_dot_product_attention(q, k, v); },
                 random_tensor<T>(rng, {2, 3, 4}));
        auto q = random_tensor<T>(rng, {2, 3, 4});
        add_case("attention/k", {2, 3, 3}, [q, v](const Tn& k2) { return ops::scaled_dot_product_attention(q, k2, v); },
                 random_tensor<T>(rng, {2, 5, 4}));
    }
    return cases;
}

}  // namespace geopeft::testing
