#include "geopeft/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

namespace geopeft::ops {

namespace {

template <typename T>
using NodeT = detail::Node<T>;

[[noreturn]] void shape_fail(const std::string& op, const std::string& what) {
    throw ShapeError(op + ": " + what);
}

template <typename T>
std::string shapes_of(const std::vector<BasicTensor<T>>& xs) {
    std::string s;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        if (i) s += ", ";
        s += shape_str(xs[i].shape());
    }
    return s;
}

// Creates the output node. Inputs are linked only when a gradient is needed,
// so frozen subgraphs never reach the tape.
template <typename T>
BasicTensor<T> new_node(Shape shape, const char* op, const std::vector<BasicTensor<T>>& inputs) {
    auto node = std::make_shared<NodeT<T>>();
    bool meta = MetaScope::active();
    bool track = false;
    for (const auto& in : inputs) {
        meta = meta || in.is_meta();
        track = track || in.requires_grad();
    }
    node->meta = meta;
    node->op = op;
    if (!meta) node->value.assign(shape_numel(shape), T(0));
    node->shape = std::move(shape);
    node->requires_grad = track;
    if (track) {
        for (const auto& in : inputs) node->inputs.push_back(in.node());
    }
    return BasicTensor<T>(std::move(node));
}

template <typename T>
bool live(const BasicTensor<T>& out) {
    return !out.is_meta();
}

template <typename T>
bool wants(NodeT<T>& self, std::size_t i) {
    return self.inputs[i]->requires_grad;
}

// C[M,N] += A[M,K] * B[K,N]; per-element accumulation over k in ascending order.
template <typename T>
void gemm(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        T* crow = c + i * n;
        const T* arow = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const T av = arow[p];
            const T* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

template <typename T>
std::vector<T> transposed(const T* src, std::size_t rows, std::size_t cols) {
    std::vector<T> out(rows * cols);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = src[r * cols + c];
    return out;
}

// Suffix broadcast: returns numel(b) if b's shape is a suffix of a's shape.
template <typename T>
std::size_t broadcast_inner(const char* op, const BasicTensor<T>& a, const BasicTensor<T>& b) {
    const auto& as = a.shape();
    const auto& bs = b.shape();
    if (bs.size() > as.size() || !std::equal(bs.rbegin(), bs.rend(), as.rbegin())) {
        shape_fail(op, "cannot broadcast " + shape_str(bs) + " onto " + shape_str(as));
    }
    return shape_numel(bs);
}

struct ConvGeometry {
    std::size_t channels, height, width, kh, kw, stride, pad, out_h, out_w;
};

template <typename T>
void im2col(const T* img, const ConvGeometry& g, T* col) {
    const std::size_t cols = g.out_h * g.out_w;
    for (std::size_t c = 0; c < g.channels; ++c)
        for (std::size_t ky = 0; ky < g.kh; ++ky)
            for (std::size_t kx = 0; kx < g.kw; ++kx) {
                T* row = col + ((c * g.kh + ky) * g.kw + kx) * cols;
                for (std::size_t oy = 0; oy < g.out_h; ++oy) {
                    const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
                    for (std::size_t ox = 0; ox < g.out_w; ++ox) {
                        const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
                        T v = T(0);
                        if (iy >= 0 && ix >= 0 && iy < static_cast<long>(g.height) && ix < static_cast<long>(g.width)) {
                            v = img[(c * g.height + iy) * g.width + ix];
                        }
                        row[oy * g.out_w + ox] = v;
                    }
                }
            }
}

template <typename T>
void col2im(const T* col, const ConvGeometry& g, T* img) {
    const std::size_t cols = g.out_h * g.out_w;
    for (std::size_t c = 0; c < g.channels; ++c)
        for (std::size_t ky = 0; ky < g.kh; ++ky)
            for (std::size_t kx = 0; kx < g.kw; ++kx) {
                const T* row = col + ((c * g.kh + ky) * g.kw + kx) * cols;
                for (std::size_t oy = 0; oy < g.out_h; ++oy) {
                    const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
                    if (iy < 0 || iy >= static_cast<long>(g.height)) continue;
                    for (std::size_t ox = 0; ox < g.out_w; ++ox) {
                        const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
                        if (ix < 0 || ix >= static_cast<long>(g.width)) continue;
                        img[(c * g.height + iy) * g.width + ix] += row[oy * g.out_w + ox];
                    }
                }
            }
}

struct LinearAxis {
    std::vector<std::size_t> i0, i1;
    std::vector<double> w0, w1;
};

LinearAxis bilinear_axis(std::size_t in, std::size_t out) {
    LinearAxis ax;
    const double scale = static_cast<double>(in) / static_cast<double>(out);
    for (std::size_t o = 0; o < out; ++o) {
        double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
        if (src < 0) src = 0;
        auto lo = std::min(static_cast<std::size_t>(std::floor(src)), in - 1);
        auto hi = std::min(lo + 1, in - 1);
        const double frac = src - static_cast<double>(lo);
        ax.i0.push_back(lo);
        ax.i1.push_back(hi);
        ax.w0.push_back(1.0 - frac);
        ax.w1.push_back(frac);
    }
    return ax;
}

std::size_t reflect_index(long i, std::size_t n) {
    if (i < 0) return static_cast<std::size_t>(-i);
    if (i >= static_cast<long>(n)) return static_cast<std::size_t>(2 * (static_cast<long>(n) - 1) - i);
    return static_cast<std::size_t>(i);
}

void require_rank(const char* op, const Shape& s, std::size_t rank) {
    if (s.size() != rank) shape_fail(op, "expected rank " + std::to_string(rank) + ", got " + shape_str(s));
}

}  // namespace

// ---------------------------------------------------------------- elementwise

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    const std::size_t inner = broadcast_inner("add", a, b);
    auto out = new_node<T>(a.shape(), "add", {a, b});
    if (live(out)) {
        auto y = out.node()->value.data();
        const auto& av = a.node()->value;
        const auto& bv = b.node()->value;
        for (std::size_t i = 0; i < av.size(); ++i) y[i] = av[i] + bv[i % inner];
    }
    if (out.requires_grad()) {
        out.node()->backward = [inner](NodeT<T>& self) {
            const auto& g = self.grad;
            if (wants(self, 0)) {
                auto& ga = self.inputs[0]->grad_buffer();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (wants(self, 1)) {
                auto& gb = self.inputs[1]->grad_buffer();
                for (std::size_t i = 0; i < g.size(); ++i) gb[i % inner] += g[i];
            }
        };
    }
    return out;
}

template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    const std::size_t inner = broadcast_inner("sub", a, b);
    auto out = new_node<T>(a.shape(), "sub", {a, b});
    if (live(out)) {
        auto y = out.node()->value.data();
        const auto& av = a.node()->value;
        const auto& bv = b.node()->value;
        for (std::size_t i = 0; i < av.size(); ++i) y[i] = av[i] - bv[i % inner];
    }
    if (out.requires_grad()) {
        out.node()->backward = [inner](NodeT<T>& self) {
            const auto& g = self.grad;
            if (wants(self, 0)) {
                auto& ga = self.inputs[0]->grad_buffer();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (wants(self, 1)) {
                auto& gb = self.inputs[1]->grad_buffer();
                for (std::size_t i = 0; i < g.size(); ++i) gb[i % inner] -= g[i];
            }
        };
    }
    return out;
}

template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    const std::size_t inner = broadcast_inner("mul", a, b);
    auto out = new_node<T>(a.shape(), "mul", {a, b});
    if (live(out)) {
        auto y = out.node()->value.data();
        const auto& av = a.node()->value;
        const auto& bv = b.node()->value;
        for (std::size_t i = 0; i < av.size(); ++i) y[i] = av[i] * bv[i % inner];
    }
    if (out.requires_grad()) {
        out.node()->backward = [inner](NodeT<T>& self) {
            const auto& g = self.grad;
            const auto& av = self.inputs[0]->value;
            const auto& bv = self.inputs[1]->value;
            if (wants(self, 0)) {
                auto& ga = self.inputs[0]->grad_buffer();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i % inner];
            }
            if (wants(self, 1)) {
                auto& gb = self.inputs[1]->grad_buffer();
                for (std::size_t i = 0; i < g.size(); ++i) gb[i % inner] += g[i] * av[i];
            }
        };
    }
    return out;
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& x, T factor) {
    auto out = new_node<T>(x.shape(), "scale", {x});
    if (live(out)) {
        auto y = out.node()->value.data();
        const auto& xv = x.node()->value;
        for (std::size_t i = 0; i < xv.size(); ++i) y[i] = xv[i] * factor;
    }
    if (out.requires_grad()) {
        out.node()->backward = [factor](NodeT<T>& self) {
            auto& gx = self.inputs[0]->grad_buffer();
            for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i] * factor;
        };
    }
    return out;
}

template <typename T>
BasicTensor<T> bias_add(const BasicTensor<T>& x, const BasicTensor<T>& bias, std::size_t axis) {
    const auto& s = x.shape();
    if (axis >= s.size() || bias.dim() != 1 || bias.size(0) != s[axis]) {
        shape_fail("bias_add", "bias " + shape_str(bias.shape()) + " does not match axis " + std::to_string(axis) +
                                   " of " + shape_str(s));
    }
    std::size_t inner = 1;
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
    const std::size_t channels = s[axis];
    auto out = new_node<T>(s, "bias_add", {x, bias});
    if (live(out)) {
        auto y = out.node()->value.data();
        const auto& xv = x.node()->value;
        const auto& bv = bias.node()->value;
        for (std::size_t i = 0; i < xv.size(); ++i) y[i] = xv[i] + bv[(i / inner) % channels];
    }
    if (out.requires_grad()) {
        out.node()->backward = [inner, channels](NodeT<T>& self) {
            const auto& g = self.grad;
            if (wants(self, 0)) {
                auto& gx = self.inputs[0]->grad_buffer();
                for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
            }
            if (wants(self, 1)) {
                auto& gb = self.inputs[1]->grad_buffer();
                for (std::size_t i = 0; i < g.size(); ++i) gb[(i / inner) % channels] += g[i];
            }
        };
    }
    return out;
}

// ------------------------------------------------------------------- matmul

namespace {

template <typename T>
void mm_forward(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n, bool tb) {
    if (tb) {
        auto bt = transposed(b, n, k);
        gemm(a, bt.data(), c, m, k, n);
    } else {
        gemm(a, b, c, m, k, n);
    }
}

template <typename T>
void mm_backward(const T* a, const T* b, const T* gc, T* ga, T* gb, std::size_t m, std::size_t k, std::size_t n,
                 bool tb) {
    if (ga) {
        if (tb) {
            gemm(gc, b, ga, m, n, k);
        } else {
            auto bt = transposed(b, k, n);
            gemm(gc, bt.data(), ga, m, n, k);
        }
    }
    if (gb) {
        if (tb) {
            auto gct = transposed(gc, m, n);
            gemm(gct.data(), a, gb, n, m, k);
        } else {
            auto at = transposed(a, m, k);
            gemm(at.data(), gc, gb, k, m, n);
        }
    }
}

}  // namespace

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b, bool transpose_b) {
    const auto& as = a.shape();
    const auto& bs = b.shape();
    auto mismatch = [&] { shape_fail("matmul", "incompatible shapes " + shape_str(as) + " and " + shape_str(bs)); };
    if (as.size() < 2 || (bs.size() != 2 && bs.size() != 3)) mismatch();
    const std::size_t k = as.back();
    std::size_t batch = 1, m = 0, n = 0;
    Shape out_shape;
    if (bs.size() == 2) {
        const std::size_t bk = transpose_b ? bs[1] : bs[0];
        n = transpose_b ? bs[0] : bs[1];
        if (bk != k) mismatch();
        m = shape_numel(as) / k;
        out_shape.assign(as.begin(), as.end() - 1);
        out_shape.push_back(n);
    } else {
        if (as.size() != 3 || as[0] != bs[0]) mismatch();
        const std::size_t bk = transpose_b ? bs[2] : bs[1];
        n = transpose_b ? bs[1] : bs[2];
        if (bk != k) mismatch();
        batch = as[0];
        m = as[1];
        out_shape = {batch, m, n};
    }
    const bool batched = bs.size() == 3;
    auto out = new_node<T>(out_shape, "matmul", {a, b});
    if (live(out)) {
        const T* av = a.node()->value.data();
        const T* bv = b.node()->value.data();
        T* cv = out.node()->value.data();
        for (std::size_t i = 0; i < batch; ++i) {
            mm_forward(av + i * m * k, bv + (batched ? i * k * n : 0), cv + i * m * n, m, k, n, transpose_b);
        }
    }
    if (out.requires_grad()) {
        out.node()->backward = [batch, m, k, n, batched, transpose_b](NodeT<T>& self) {
            const T* av = self.inputs[0]->value.data();
            const T* bv = self.inputs[1]->value.data();
            T* ga = wants(self, 0) ? self.inputs[0]->grad_buffer().data() : nullptr;
            T* gb = wants(self, 1) ? self.inputs[1]->grad_buffer().data() : nullptr;
            const T* gc = self.grad.data();
            for (std::size_t i = 0; i < batch; ++i) {
                const std::size_t boff = batched ? i * k * n : 0;
                mm_backward(av + i * m * k, bv + boff, gc + i * m * n, ga ? ga + i * m * k : nullptr,
                            gb ? gb + boff : nullptr, m, k, n, transpose_b);
            }
        };
    }
    return out;
}

// ------------------------------------------------------------ layout changes

template <typename T>
BasicTensor<T> transpose(const BasicTensor<T>& x, const std::vector<std::size_t>& perm) {
    const auto& s = x.shape();
    if (perm.size() != s.size()) shape_fail("transpose", "permutation rank mismatch for " + shape_str(s));
    std::vector<bool> used(s.size(), false);
    for (auto p : perm) {
        if (p >= s.size() || used[p]) shape_fail("transpose", "invalid permutation for " + shape_str(s));
        used[p] = true;
    }
    Shape os(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) os[i] = s[perm[i]];
    // source stride for each output axis
    std::vector<std::size_t> in_strides(s.size(), 1);
    for (std::size_t i = s.size(); i-- > 1;) in_strides[i - 1] = in_strides[i] * s[i];
    std::vector<std::size_t> src_stride(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) src_stride[i] = in_strides[perm[i]];

    auto index_map = [os, src_stride]() {
        const std::size_t total = shape_numel(os);
        std::vector<std::size_t> map(total);
        std::vector<std::size_t> idx(os.size(), 0);
        std::size_t src = 0;
        for (std::size_t o = 0; o < total; ++o) {
            map[o] = src;
            for (std::size_t ax = os.size(); ax-- > 0;) {
                ++idx[ax];
                src += src_stride[ax];
                if (idx[ax] < os[ax]) break;
                src -= src_stride[ax] * os[ax];
                idx[ax] = 0;
            }
        }
        return map;
    };

    auto out = new_node<T>(os, "transpose", {x});
    if (live(out)) {
        const auto map = index_map();
        auto y = out.node()->value.data();
        const auto& xv = x.node()->value;
        for (std::size_t o = 0; o < map.size(); ++o) y[o] = xv[map[o]];
    }
    if (out.requires_grad()) {
        out.node()->backward = [index_map](NodeT<T>& self) {
            const auto map = index_map();
            auto& gx = self.inputs[0]->grad_buffer();
            for (std::size_t o = 0; o < map.size(); ++o) gx[map[o]] += self.grad[o];
        };
    }
    return out;
}

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape) {
    if (shape_numel(shape) != x.numel()) {
        shape_fail("reshape", "cannot reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
    }
    auto out = new_node<T>(std::move(shape), "reshape", {x});
    if (live(out)) out.node()->value = x.node()->value;
    if (out.requires_grad()) {
        out.node()->backward = [](NodeT<T>& self) {
            auto& gx = self.inputs[0]->grad_buffer();
            for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i];
        };
    }
    return out;
}

template <typename T>
BasicTensor<T> slice(const BasicTensor<T>& x, std::size_t axis, std::size_t begin, std::size_t end) {
    const auto& s = x.shape();
    if (axis >= s.size() || begin >= end || end > s[axis]) {
        shape_fail("slice", "range [" + std::to_string(begin) + ", " + std::to_string(end) + ") on axis " +
                                std::to_string(axis) + " of " + shape_str(s));
    }
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
    const std::size_t len = end - begin;
    const std::size_t extent = s[axis];
    Shape os = s;
    os[axis] = len;
    auto out = new_node<T>(os, "slice", {x});
    if (live(out)) {
        auto y = out.node()->value.data();
        const auto& xv = x.node()->value;
        for (std::size_t o = 0; o < outer; ++o)
            std::copy_n(xv.data() + (o * extent + begin) * inner, len * inner, y + o * len * inner);
    }
    if (out.requires_grad()) {
        out.node()->backward = [outer, inner, len, extent, begin](NodeT<T>& self) {
            auto& gx = self.inputs[0]->grad_buffer();
            for (std::size_t o = 0; o < outer; ++o) {
                T* dst = gx.data() + (o * extent + begin) * inner;
                const T* src = self.grad.data() + o * len * inner;
                for (std::size_t i = 0; i < len * inner; ++i) dst[i] += src[i];
            }
        };
    }
    return out;
}

template <typename T>
BasicTensor<T> concat(const std::vector<BasicTensor<T>>& parts, std::size_t axis) {
    if (parts.empty()) shape_fail("concat", "no inputs");
    const auto& s0 = parts[0].shape();
    if (axis >= s0.size()) shape_fail("concat", "axis out of range for " + shape_str(s0));
    std::vector<std::size_t> extents;
    std::size_t total = 0;
    for (const auto& p : parts) {
        const auto& s = p.shape();
        bool ok = s.size() == s0.size();
        for (std::size_t i = 0; ok && i < s.size(); ++i) ok = (i == axis) || s[i] == s0[i];
        if (!ok) shape_fail("concat", "mismatched shapes " + shapes_of(parts));
        extents.push_back(s[axis]);
        total += s[axis];
    }
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s0[i];
    for (std::size_t i = axis + 1; i < s0.size(); ++i) inner *= s0[i];
    Shape os = s0;
    os[axis] = total;
    auto out = new_node<T>(os, "concat", parts);
    if (live(out)) {
        auto y = out.node()->value.data();
        std::size_t offset = 0;
        for (std::size_t p = 0; p < parts.size(); ++p) {
            const auto& xv = parts[p].node()->value;
            for (std::size_t o = 0; o < outer; ++o)
                std::copy_n(xv.data() + o * extents[p] * inner, extents[p] * inner,
                            y + (o * total + offset) * inner);
            offset += extents[p];
        }
    }
    if (out.requires_grad()) {
        out.node()->backward = [outer, inner, extents, total](NodeT<T>& self) {
            std::size_t offset = 0;
            for (std::size_t p = 0; p < extents.size(); ++p) {
                if (wants(self, p)) {
                    auto& gx = self.inputs[p]->grad_buffer();
                    for (std::size_t o = 0; o < outer; ++o) {
                        const T* src = self.grad.data() + (o * total + offset) * inner;
                        T* dst = gx.data() + o * extents[p] * inner;
                        for (std::size_t i = 0; i < extents[p] * inner; ++i) dst[i] += src[i];
                    }
                }
                offset += extents[p];
            }
        };
    }
    return out;
}

// ------------------------------------------------------------ nonlinearities

template <typename T>
BasicTensor<T> gelu(const BasicTensor<T>& x) {
    auto out = new_node<T>(x.shape(), "gelu", {x});
    if (live(out)) {
        auto y = out.node()->value.data();
        const auto& xv = x.node()->value;
        for (std::size_t i = 0; i < xv.size(); ++i) {
            const double v = xv[i];
            y[i] = static_cast<T>(0.5 * v * (1.0 + std::erf(v / std::numbers::sqrt2)));
        }
    }
    if (out.requires_grad()) {
        out.node()->backward = [](NodeT<T>& self) {
            const auto& xv = self.inputs[0]->value;
            auto& gx = self.inputs[0]->grad_buffer();
            const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
            for (std::size_t i = 0; i < xv.size(); ++i) {
                const double v = xv[i];
                const double cdf = 0.5 * (1.0 + std::erf(v / std::numbers::sqrt2));
                const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
                gx[i] += static_cast<T>(self.grad[i] * (cdf + v * pdf));
            }
        };
    }
    return out;
}

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x) {
    auto out = new_node<T>(x.shape(), "relu", {x});
    if (live(out)) {
        auto y = out.node()->value.data();
        const auto& xv = x.node()->value;
        for (std::size_t i = 0; i < xv.size(); ++i) y[i] = xv[i] > T(0) ? xv[i] : T(0);
    }
    if (out.requires_grad()) {
        out.node()->backward = [](NodeT<T>& self) {
            const auto& xv = self.inputs[0]->value;
            auto& gx = self.inputs[0]->grad_buffer();
            for (std::size_t i = 0; i < xv.size(); ++i)
                if (xv[i] > T(0)) gx[i] += self.grad[i];
        };
    }
    return out;
}

template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& x) {
    if (x.dim() == 0) shape_fail("softmax", "scalar input");
    const std::size_t d = x.shape().back();
    const std::size_t rows = x.numel() / d;
    auto out = new_node<T>(x.shape(), "softmax", {x});
    if (live(out)) {
        auto y = out.node()->value.data();
        const auto& xv = x.node()->value;
        for (std::size_t r = 0; r < rows; ++r) {
            const T* in = xv.data() + r * d;
            T* o = y + r * d;
            const T mx = *std::max_element(in, in + d);
            T total = 0;
            for (std::size_t j = 0; j < d; ++j) {
                o[j] = std::exp(in[j] - mx);
                total += o[j];
            }
            for (std::size_t j = 0; j < d; ++j) o[j] /= total;
        }
    }
    if (out.requires_grad()) {
        out.node()->backward = [d, rows](NodeT<T>& self) {
            const auto& y = self.value;
            auto& gx = self.inputs[0]->grad_buffer();
            for (std::size_t r = 0; r < rows; ++r) {
                const T* yr = y.data() + r * d;
                const T* gr = self.grad.data() + r * d;
                T dot = 0;
                for (std::size_t j = 0; j < d; ++j) dot += gr[j] * yr[j];
                for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += yr[j] * (gr[j] - dot);
            }
        };
    }
    return out;
}

template <typename T>
BasicTensor<T> dropout(const BasicTensor<T>& x, double p, std::uint64_t seed) {
    if (p < 0.0 || p >= 1.0) throw std::invalid_argument("dropout: p must lie in [0, 1)");
    auto out = new_node<T>(x.shape(), "dropout", {x});
    std::vector<T> keep;
    if (live(out)) {
        std::mt19937_64 gen(seed);
        keep.resize(x.numel());
        const T s = static_cast<T>(1.0 / (1.0 - p));
        const auto& xv = x.node()->value;
        auto y = out.node()->value.data();
        for (std::size_t i = 0; i < keep.size(); ++i) {
            const double u = static_cast<double>(gen() >> 11) * 0x1.0p-53;
            keep[i] = u >= p ? s : T(0);
            y[i] = xv[i] * keep[i];
        }
    }
    if (out.requires_grad()) {
        out.node()->backward = [keep](NodeT<T>& self) {
            auto& gx = self.inputs[0]->grad_buffer();
            for (std::size_t i = 0; i < keep.size(); ++i) gx[i] += self.grad[i] * keep[i];
        };
    }
    return out;
}

// ------------------------------------------------------------ normalization

template <typename T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& gamma, const BasicTensor<T>& beta, double eps) {
    if (x.dim() == 0) shape_fail("layer_norm", "scalar input");
    const std::size_t d = x.shape().back();
    if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) {
        shape_fail("layer_norm", "affine parameters " + shape_str(gamma.shape()) + "/" + shape_str(beta.shape()) +
                                     " do not match " + shape_str(x.shape()));
    }
    const std::size_t rows = x.numel() / d;
    auto out = new_node<T>(x.shape(), "layer_norm", {x, gamma, beta});
    if (!live(out)) return out;
    std::vector<T> mean(rows), rstd(rows);
    auto y = out.node()->value.data();
    const auto& xv = x.node()->value;
    const auto& g = gamma.node()->value;
    const auto& b = beta.node()->value;
    for (std::size_t r = 0; r < rows; ++r) {
        const T* in = xv.data() + r * d;
        double mu = 0;
        for (std::size_t j = 0; j < d; ++j) mu += in[j];
        mu /= static_cast<double>(d);
        double var = 0;
        for (std::size_t j = 0; j < d; ++j) var += (in[j] - mu) * (in[j] - mu);
        var /= static_cast<double>(d);
        mean[r] = static_cast<T>(mu);
        rstd[r] = static_cast<T>(1.0 / std::sqrt(var + eps));
        for (std::size_t j = 0; j < d; ++j) y[r * d + j] = (in[j] - mean[r]) * rstd[r] * g[j] + b[j];
    }
    if (out.requires_grad()) {
        out.node()->backward = [d, rows, mean = std::move(mean), rstd = std::move(rstd)](NodeT<T>& self) {
            const auto& xv = self.inputs[0]->value;
            const auto& g = self.inputs[1]->value;
            T* gx = wants(self, 0) ? self.inputs[0]->grad_buffer().data() : nullptr;
            T* gg = wants(self, 1) ? self.inputs[1]->grad_buffer().data() : nullptr;
            T* gb = wants(self, 2) ? self.inputs[2]->grad_buffer().data() : nullptr;
            std::vector<T> dxhat(d);
            for (std::size_t r = 0; r < rows; ++r) {
                const T* in = xv.data() + r * d;
                const T* gy = self.grad.data() + r * d;
                T sum_d = 0, sum_dx = 0;
                for (std::size_t j = 0; j < d; ++j) {
                    const T xhat = (in[j] - mean[r]) * rstd[r];
                    dxhat[j] = gy[j] * g[j];
                    sum_d += dxhat[j];
                    sum_dx += dxhat[j] * xhat;
                    if (gg) gg[j] += gy[j] * xhat;
                    if (gb) gb[j] += gy[j];
                }
                if (gx) {
                    const T inv_d = T(1) / static_cast<T>(d);
                    for (std::size_t j = 0; j < d; ++j) {
                        const T xhat = (in[j] - mean[r]) * rstd[r];
                        gx[r * d + j] += rstd[r] * (dxhat[j] - inv_d * sum_d - xhat * inv_d * sum_dx);
                    }
                }
            }
        };
    }
    return out;
}

template <typename T>
BasicTensor<T> batch_norm(const BasicTensor<T>& x, const BasicTensor<T>& gamma, const BasicTensor<T>& beta, double eps,
                          std::vector<T>* batch_mean, std::vector<T>* batch_var) {
    require_rank("batch_norm", x.shape(), 4);
    const std::size_t n = x.size(0), c = x.size(1), hw = x.size(2) * x.size(3);
    if (gamma.shape() != Shape{c} || beta.shape() != Shape{c}) {
        shape_fail("batch_norm", "affine parameters do not match channels of " + shape_str(x.shape()));
    }
    auto out = new_node<T>(x.shape(), "batch_norm", {x, gamma, beta});
    if (!live(out)) return out;
    const double count = static_cast<double>(n * hw);
    std::vector<T> mean(c), rstd(c), var_out(c);
    const auto& xv = x.node()->value;
    const auto& g = gamma.node()->value;
    const auto& b = beta.node()->value;
    auto y = out.node()->value.data();
    for (std::size_t ch = 0; ch < c; ++ch) {
        double mu = 0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t p = 0; p < hw; ++p) mu += xv[(i * c + ch) * hw + p];
        mu /= count;
        double var = 0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t p = 0; p < hw; ++p) {
                const double dv = xv[(i * c + ch) * hw + p] - mu;
                var += dv * dv;
            }
        var /= count;
        mean[ch] = static_cast<T>(mu);
        var_out[ch] = static_cast<T>(var);
        rstd[ch] = static_cast<T>(1.0 / std::sqrt(var + eps));
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t p = 0; p < hw; ++p) {
                const std::size_t idx = (i * c + ch) * hw + p;
                y[idx] = (xv[idx] - mean[ch]) * rstd[ch] * g[ch] + b[ch];
            }
    }
    if (batch_mean) *batch_mean = mean;
    if (batch_var) *batch_var = var_out;
    if (out.requires_grad()) {
        out.node()->backward = [n, c, hw, mean = std::move(mean), rstd = std::move(rstd)](NodeT<T>& self) {
            const auto& xv = self.inputs[0]->value;
            const auto& g = self.inputs[1]->value;
            T* gx = wants(self, 0) ? self.inputs[0]->grad_buffer().data() : nullptr;
            T* gg = wants(self, 1) ? self.inputs[1]->grad_buffer().data() : nullptr;
            T* gb = wants(self, 2) ? self.inputs[2]->grad_buffer().data() : nullptr;
            const T inv_m = T(1) / static_cast<T>(n * hw);
            for (std::size_t ch = 0; ch < c; ++ch) {
                T sum_d = 0, sum_dx = 0, sum_gy = 0, sum_gyx = 0;
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t p = 0; p < hw; ++p) {
                        const std::size_t idx = (i * c + ch) * hw + p;
                        const T xhat = (xv[idx] - mean[ch]) * rstd[ch];
                        const T dxh = self.grad[idx] * g[ch];
                        sum_d += dxh;
                        sum_dx += dxh * xhat;
                        sum_gy += self.grad[idx];
                        sum_gyx += self.grad[idx] * xhat;
                    }
                if (gg) gg[ch] += sum_gyx;
                if (gb) gb[ch] += sum_gy;
                if (!gx) continue;
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t p = 0; p < hw; ++p) {
                        const std::size_t idx = (i * c + ch) * hw + p;
                        const T xhat = (xv[idx] - mean[ch]) * rstd[ch];
                        const T dxh = self.grad[idx] * g[ch];
                        gx[idx] += rstd[ch] * (dxh - inv_m * sum_d - xhat * inv_m * sum_dx);
                    }
            }
        };
    }
    return out;
}

template <typename T>
BasicTensor<T> batch_norm_eval(const BasicTensor<T>& x, const BasicTensor<T>& gamma, const BasicTensor<T>& beta,
                               const std::vector<T>& mean, const std::vector<T>& var, double eps) {
    require_rank("batch_norm_eval", x.shape(), 4);
    const std::size_t n = x.size(0), c = x.size(1), hw = x.size(2) * x.size(3);
    if (gamma.shape() != Shape{c} || beta.shape() != Shape{c} || mean.size() != c || var.size() != c) {
        shape_fail("batch_norm_eval", "statistics do not match channels of " + shape_str(x.shape()));
    }
    std::vector<T> rstd(c);
    for (std::size_t ch = 0; ch < c; ++ch) rstd[ch] = static_cast<T>(1.0 / std::sqrt(var[ch] + eps));
    auto out = new_node<T>(x.shape(), "batch_norm_eval", {x, gamma, beta});
    if (!live(out)) return out;
    const auto& xv = x.node()->value;
    const auto& g = gamma.node()->value;
    const auto& b = beta.node()->value;
    auto y = out.node()->value.data();
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t p = 0; p < hw; ++p) {
                const std::size_t idx = (i * c + ch) * hw + p;
                y[idx] = (xv[idx] - mean[ch]) * rstd[ch] * g[ch] + b[ch];
            }
    if (out.requires_grad()) {
        out.node()->backward = [n, c, hw, mean, rstd](NodeT<T>& self) {
            const auto& xv = self.inputs[0]->value;
            const auto& g = self.inputs[1]->value;
            T* gx = wants(self, 0) ? self.inputs[0]->grad_buffer().data() : nullptr;
            T* gg = wants(self, 1) ? self.inputs[1]->grad_buffer().data() : nullptr;
            T* gb = wants(self, 2) ? self.inputs[2]->grad_buffer().data() : nullptr;
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t ch = 0; ch < c; ++ch)
                    for (std::size_t p = 0; p < hw; ++p) {
                        const std::size_t idx = (i * c + ch) * hw + p;
                        const T gy = self.grad[idx];
                        if (gx) gx[idx] += gy * g[ch] * rstd[ch];
                        if (gg) gg[ch] += gy * (xv[idx] - mean[ch]) * rstd[ch];
                        if (gb) gb[ch] += gy;
                    }
        };
    }
    return out;
}

// -------------------------------------------------------------- convolution

template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& weight, Conv2dOptions opts) {
    require_rank("conv2d", x.shape(), 4);
    require_rank("conv2d", weight.shape(), 4);
    const std::size_t n = x.size(0), c = x.size(1), h = x.size(2), w = x.size(3);
    const std::size_t o = weight.size(0), kh = weight.size(2), kw = weight.size(3);
    if (weight.size(1) != c || opts.stride == 0 || h + 2 * opts.padding < kh || w + 2 * opts.padding < kw) {
        shape_fail("conv2d", "input " + shape_str(x.shape()) + " incompatible with kernel " + shape_str(weight.shape()));
    }
    const ConvGeometry g{c, h, w, kh, kw, opts.stride, opts.padding, (h + 2 * opts.padding - kh) / opts.stride + 1,
                         (w + 2 * opts.padding - kw) / opts.stride + 1};
    const std::size_t ckk = c * kh * kw, cols = g.out_h * g.out_w;
    auto out = new_node<T>({n, o, g.out_h, g.out_w}, "conv2d", {x, weight});
    if (live(out)) {
        std::vector<T> col(ckk * cols);
        const T* xv = x.node()->value.data();
        const T* wv = weight.node()->value.data();
        T* y = out.node()->value.data();
        for (std::size_t i = 0; i < n; ++i) {
            im2col(xv + i * c * h * w, g, col.data());
            gemm(wv, col.data(), y + i * o * cols, o, ckk, cols);
        }
    }
    if (out.requires_grad()) {
        out.node()->backward = [g, n, o, ckk, cols](NodeT<T>& self) {
            const T* xv = self.inputs[0]->value.data();
            const T* wv = self.inputs[1]->value.data();
            T* gx = wants(self, 0) ? self.inputs[0]->grad_buffer().data() : nullptr;
            T* gw = wants(self, 1) ? self.inputs[1]->grad_buffer().data() : nullptr;
            const std::size_t img = g.channels * g.height * g.width;
            std::vector<T> col(ckk * cols), dcol(ckk * cols);
            const auto wt = transposed(wv, o, ckk);
            for (std::size_t i = 0; i < n; ++i) {
                const T* gy = self.grad.data() + i * o * cols;
                if (gw) {
                    im2col(xv + i * img, g, col.data());
                    const auto colt = transposed(col.data(), ckk, cols);
                    gemm(gy, colt.data(), gw, o, cols, ckk);
                }
                if (gx) {
                    std::fill(dcol.begin(), dcol.end(), T(0));
                    gemm(wt.data(), gy, dcol.data(), ckk, o, cols);
                    col2im(dcol.data(), g, gx + i * img);
                }
            }
        };
    }
    return out;
}

template <typename T>
BasicTensor<T> conv_transpose2d(const BasicTensor<T>& x, const BasicTensor<T>& weight, Conv2dOptions opts) {
    require_rank("conv_transpose2d", x.shape(), 4);
    require_rank("conv_transpose2d", weight.shape(), 4);
    const std::size_t n = x.size(0), cin = x.size(1), h = x.size(2), w = x.size(3);
    const std::size_t cout = weight.size(1), kh = weight.size(2), kw = weight.size(3);
    if (weight.size(0) != cin || opts.stride == 0 || opts.output_padding >= std::max(opts.stride, opts.padding + 1) ||
        (h - 1) * opts.stride + kh <= 2 * opts.padding || (w - 1) * opts.stride + kw <= 2 * opts.padding) {
        shape_fail("conv_transpose2d",
                   "input " + shape_str(x.shape()) + " incompatible with kernel " + shape_str(weight.shape()));
    }
    const std::size_t oh = (h - 1) * opts.stride + kh - 2 * opts.padding + opts.output_padding;
    const std::size_t ow = (w - 1) * opts.stride + kw - 2 * opts.padding + opts.output_padding;
    // Output-space geometry: im2col over the output image yields the input grid.
    const ConvGeometry g{cout, oh, ow, kh, kw, opts.stride, opts.padding, h, w};
    const std::size_t ckk = cout * kh * kw, hw = h * w;
    auto out = new_node<T>({n, cout, oh, ow}, "conv_transpose2d", {x, weight});
    if (live(out)) {
        const T* xv = x.node()->value.data();
        const auto wt = transposed(weight.node()->value.data(), cin, ckk);
        T* y = out.node()->value.data();
        std::vector<T> col(ckk * hw);
        for (std::size_t i = 0; i < n; ++i) {
            std::fill(col.begin(), col.end(), T(0));
            gemm(wt.data(), xv + i * cin * hw, col.data(), ckk, cin, hw);
            col2im(col.data(), g, y + i * cout * oh * ow);
        }
    }
    if (out.requires_grad()) {
        out.node()->backward = [g, n, cin, ckk, hw](NodeT<T>& self) {
            const T* xv = self.inputs[0]->value.data();
            const T* wv = self.inputs[1]->value.data();
            T* gx = wants(self, 0) ? self.inputs[0]->grad_buffer().data() : nullptr;
            T* gw = wants(self, 1) ? self.inputs[1]->grad_buffer().data() : nullptr;
            const std::size_t img = g.channels * g.height * g.width;
            std::vector<T> dcol(ckk * hw);
            for (std::size_t i = 0; i < n; ++i) {
                im2col(self.grad.data() + i * img, g, dcol.data());
                if (gx) gemm(wv, dcol.data(), gx + i * cin * hw, cin, ckk, hw);
                if (gw) {
                    const auto dcolt = transposed(dcol.data(), ckk, hw);
                    gemm(xv + i * cin * hw, dcolt.data(), gw, cin, hw, ckk);
                }
            }
        };
    }
    return out;
}

// ---------------------------------------------------------- spatial resampling

template <typename T>
BasicTensor<T> bilinear_interpolate(const BasicTensor<T>& x, std::size_t out_h, std::size_t out_w) {
    require_rank("bilinear_interpolate", x.shape(), 4);
    if (out_h == 0 || out_w == 0) shape_fail("bilinear_interpolate", "empty target size");
    const std::size_t planes = x.size(0) * x.size(1), h = x.size(2), w = x.size(3);
    auto out = new_node<T>({x.size(0), x.size(1), out_h, out_w}, "bilinear_interpolate", {x});
    const auto ay = bilinear_axis(h, out_h);
    const auto ax = bilinear_axis(w, out_w);
    if (live(out)) {
        const auto& xv = x.node()->value;
        auto y = out.node()->value.data();
        for (std::size_t p = 0; p < planes; ++p) {
            const T* in = xv.data() + p * h * w;
            T* o = y + p * out_h * out_w;
            for (std::size_t oy = 0; oy < out_h; ++oy)
                for (std::size_t ox = 0; ox < out_w; ++ox) {
                    const double v = ay.w0[oy] * (ax.w0[ox] * in[ay.i0[oy] * w + ax.i0[ox]] +
                                                  ax.w1[ox] * in[ay.i0[oy] * w + ax.i1[ox]]) +
                                     ay.w1[oy] * (ax.w0[ox] * in[ay.i1[oy] * w + ax.i0[ox]] +
                                                  ax.w1[ox] * in[ay.i1[oy] * w + ax.i1[ox]]);
                    o[oy * out_w + ox] = static_cast<T>(v);
                }
        }
    }
    if (out.requires_grad()) {
        out.node()->backward = [planes, h, w, out_h, out_w, ay, ax](NodeT<T>& self) {
            auto& gx = self.inputs[0]->grad_buffer();
            for (std::size_t p = 0; p < planes; ++p) {
                T* gi = gx.data() + p * h * w;
                const T* go = self.grad.data() + p * out_h * out_w;
                for (std::size_t oy = 0; oy < out_h; ++oy)
                    for (std::size_t ox = 0; ox < out_w; ++ox) {
                        const double gv = go[oy * out_w + ox];
                        gi[ay.i0[oy] * w + ax.i0[ox]] += static_cast<T>(gv * ay.w0[oy] * ax.w0[ox]);
                        gi[ay.i0[oy] * w + ax.i1[ox]] += static_cast<T>(gv * ay.w0[oy] * ax.w1[ox]);
                        gi[ay.i1[oy] * w + ax.i0[ox]] += static_cast<T>(gv * ay.w1[oy] * ax.w0[ox]);
                        gi[ay.i1[oy] * w + ax.i1[ox]] += static_cast<T>(gv * ay.w1[oy] * ax.w1[ox]);
                    }
            }
        };
    }
    return out;
}

template <typename T>
BasicTensor<T> reflect_pad(const BasicTensor<T>& x, std::size_t top, std::size_t bottom, std::size_t left,
                           std::size_t right) {
    require_rank("reflect_pad", x.shape(), 4);
    const std::size_t planes = x.size(0) * x.size(1), h = x.size(2), w = x.size(3);
    if (top >= h || bottom >= h || left >= w || right >= w) {
        shape_fail("reflect_pad", "padding must be smaller than the extent of " + shape_str(x.shape()));
    }
    const std::size_t oh = h + top + bottom, ow = w + left + right;
    std::vector<std::size_t> src(oh * ow);
    for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t xo = 0; xo < ow; ++xo)
            src[y * ow + xo] = reflect_index(static_cast<long>(y) - static_cast<long>(top), h) * w +
                               reflect_index(static_cast<long>(xo) - static_cast<long>(left), w);
    auto out = new_node<T>({x.size(0), x.size(1), oh, ow}, "reflect_pad", {x});
    if (live(out)) {
        const auto& xv = x.node()->value;
        auto y = out.node()->value.data();
        for (std::size_t p = 0; p < planes; ++p)
            for (std::size_t i = 0; i < src.size(); ++i) y[p * oh * ow + i] = xv[p * h * w + src[i]];
    }
    if (out.requires_grad()) {
        out.node()->backward = [planes, h, w, src](NodeT<T>& self) {
            auto& gx = self.inputs[0]->grad_buffer();
            for (std::size_t p = 0; p < planes; ++p)
                for (std::size_t i = 0; i < src.size(); ++i)
                    gx[p * h * w + src[i]] += self.grad[p * src.size() + i];
        };
    }
    return out;
}

template <typename T>
BasicTensor<T> adaptive_avg_pool2d(const BasicTensor<T>& x, std::size_t out_h, std::size_t out_w) {
    require_rank("adaptive_avg_pool2d", x.shape(), 4);
    if (out_h == 0 || out_w == 0) shape_fail("adaptive_avg_pool2d", "empty target size");
    const std::size_t planes = x.size(0) * x.size(1), h = x.size(2), w = x.size(3);
    auto bins = [](std::size_t in, std::size_t out) {
        std::vector<std::pair<std::size_t, std::size_t>> b(out);
        for (std::size_t i = 0; i < out; ++i) b[i] = {(i * in) / out, ((i + 1) * in + out - 1) / out};
        return b;
    };
    const auto by = bins(h, out_h);
    const auto bx = bins(w, out_w);
    auto out = new_node<T>({x.size(0), x.size(1), out_h, out_w}, "adaptive_avg_pool2d", {x});
    if (live(out)) {
        const auto& xv = x.node()->value;
        auto y = out.node()->value.data();
        for (std::size_t p = 0; p < planes; ++p)
            for (std::size_t oy = 0; oy < out_h; ++oy)
                for (std::size_t ox = 0; ox < out_w; ++ox) {
                    double acc = 0;
                    for (std::size_t iy = by[oy].first; iy < by[oy].second; ++iy)
                        for (std::size_t ix = bx[ox].first; ix < bx[ox].second; ++ix) acc += xv[(p * h + iy) * w + ix];
                    const double cnt = static_cast<double>((by[oy].second - by[oy].first) * (bx[ox].second - bx[ox].first));
                    y[(p * out_h + oy) * out_w + ox] = static_cast<T>(acc / cnt);
                }
    }
    if (out.requires_grad()) {
        out.node()->backward = [planes, h, w, out_h, out_w, by, bx](NodeT<T>& self) {
            auto& gx = self.inputs[0]->grad_buffer();
            for (std::size_t p = 0; p < planes; ++p)
                for (std::size_t oy = 0; oy < out_h; ++oy)
                    for (std::size_t ox = 0; ox < out_w; ++ox) {
                        const T cnt = static_cast<T>((by[oy].second - by[oy].first) * (bx[ox].second - bx[ox].first));
                        const T gv = self.grad[(p * out_h + oy) * out_w + ox] / cnt;
                        for (std::size_t iy = by[oy].first; iy < by[oy].second; ++iy)
                            for (std::size_t ix = bx[ox].first; ix < bx[ox].second; ++ix) gx[(p * h + iy) * w + ix] += gv;
                    }
        };
    }
    return out;
}

template <typename T>
BasicTensor<T> max_pool2d(const BasicTensor<T>& x, std::size_t kernel) {
    require_rank("max_pool2d", x.shape(), 4);
    const std::size_t planes = x.size(0) * x.size(1), h = x.size(2), w = x.size(3);
    if (kernel == 0 || kernel > h || kernel > w) shape_fail("max_pool2d", "kernel larger than " + shape_str(x.shape()));
    const std::size_t oh = h / kernel, ow = w / kernel;
    auto out = new_node<T>({x.size(0), x.size(1), oh, ow}, "max_pool2d", {x});
    if (!live(out)) return out;
    std::vector<std::size_t> argmax(planes * oh * ow);
    const auto& xv = x.node()->value;
    auto y = out.node()->value.data();
    for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t oy = 0; oy < oh; ++oy)
            for (std::size_t ox = 0; ox < ow; ++ox) {
                std::size_t best = (p * h + oy * kernel) * w + ox * kernel;
                for (std::size_t ky = 0; ky < kernel; ++ky)
                    for (std::size_t kx = 0; kx < kernel; ++kx) {
                        const std::size_t idx = (p * h + oy * kernel + ky) * w + ox * kernel + kx;
                        if (xv[idx] > xv[best]) best = idx;
                    }
                const std::size_t o = (p * oh + oy) * ow + ox;
                argmax[o] = best;
                y[o] = xv[best];
            }
    if (out.requires_grad()) {
        out.node()->backward = [argmax = std::move(argmax)](NodeT<T>& self) {
            auto& gx = self.inputs[0]->grad_buffer();
            for (std::size_t o = 0; o < argmax.size(); ++o) gx[argmax[o]] += self.grad[o];
        };
    }
    return out;
}

// ---------------------------------------------------------------- reductions

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& x) {
    auto out = new_node<T>({}, "sum", {x});
    if (live(out)) {
        double acc = 0;
        for (auto v : x.node()->value) acc += v;
        out.node()->value[0] = static_cast<T>(acc);
    }
    if (out.requires_grad()) {
        out.node()->backward = [](NodeT<T>& self) {
            auto& gx = self.inputs[0]->grad_buffer();
            for (auto& g : gx) g += self.grad[0];
        };
    }
    return out;
}

template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& x) {
    auto out = new_node<T>({}, "mean", {x});
    const double n = static_cast<double>(x.numel());
    if (live(out)) {
        double acc = 0;
        for (auto v : x.node()->value) acc += v;
        out.node()->value[0] = static_cast<T>(acc / n);
    }
    if (out.requires_grad()) {
        out.node()->backward = [n](NodeT<T>& self) {
            auto& gx = self.inputs[0]->grad_buffer();
            const T g = static_cast<T>(self.grad[0] / n);
            for (auto& v : gx) v += g;
        };
    }
    return out;
}

template <typename T>
BasicTensor<T> mean_axis(const BasicTensor<T>& x, std::size_t axis) {
    const auto& s = x.shape();
    if (axis >= s.size()) shape_fail("mean_axis", "axis out of range for " + shape_str(s));
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
    const std::size_t len = s[axis];
    Shape os;
    for (std::size_t i = 0; i < s.size(); ++i)
        if (i != axis) os.push_back(s[i]);
    auto out = new_node<T>(os, "mean_axis", {x});
    if (live(out)) {
        const auto& xv = x.node()->value;
        auto y = out.node()->value.data();
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t i = 0; i < inner; ++i) {
                double acc = 0;
                for (std::size_t l = 0; l < len; ++l) acc += xv[(o * len + l) * inner + i];
                y[o * inner + i] = static_cast<T>(acc / static_cast<double>(len));
            }
    }
    if (out.requires_grad()) {
        out.node()->backward = [outer, inner, len](NodeT<T>& self) {
            auto& gx = self.inputs[0]->grad_buffer();
            const T inv = T(1) / static_cast<T>(len);
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t l = 0; l < len; ++l)
                    for (std::size_t i = 0; i < inner; ++i) gx[(o * len + l) * inner + i] += self.grad[o * inner + i] * inv;
        };
    }
    return out;
}

template <typename T>
BasicTensor<T> cross_entropy(const BasicTensor<T>& logits, const BasicTensor<T>& targets) {
    require_rank("cross_entropy", logits.shape(), 4);
    const std::size_t n = logits.size(0), k = logits.size(1), hw = logits.size(2) * logits.size(3);
    if (targets.shape() != Shape{n, logits.size(2), logits.size(3)}) {
        shape_fail("cross_entropy", "targets " + shape_str(targets.shape()) + " do not match logits " +
                                        shape_str(logits.shape()));
    }
    auto out = new_node<T>({}, "cross_entropy", {logits, targets});
    if (!live(out)) return out;
    const auto& lv = logits.node()->value;
    const auto& tv = targets.node()->value;
    double total = 0;
    std::size_t count = 0;
    std::vector<double> z(k);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < hw; ++p) {
            const int t = static_cast<int>(tv[i * hw + p]);
            if (t == kIgnoreIndex) continue;
            if (t < 0 || static_cast<std::size_t>(t) >= k) {
                throw std::invalid_argument("cross_entropy: class id " + std::to_string(t) + " outside [0, " +
                                            std::to_string(k) + ")");
            }
            double mx = -INFINITY;
            for (std::size_t c = 0; c < k; ++c) mx = std::max(mx, static_cast<double>(lv[(i * k + c) * hw + p]));
            double se = 0;
            for (std::size_t c = 0; c < k; ++c) se += std::exp(lv[(i * k + c) * hw + p] - mx);
            total += mx + std::log(se) - lv[(i * k + t) * hw + p];
            ++count;
        }
    out.node()->value[0] = count ? static_cast<T>(total / static_cast<double>(count)) : T(0);
    if (out.requires_grad() && count > 0) {
        out.node()->backward = [n, k, hw, count](NodeT<T>& self) {
            if (!wants(self, 0)) return;
            const auto& lv = self.inputs[0]->value;
            const auto& tv = self.inputs[1]->value;
            auto& gl = self.inputs[0]->grad_buffer();
            const double scale_g = self.grad[0] / static_cast<double>(count);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t p = 0; p < hw; ++p) {
                    const int t = static_cast<int>(tv[i * hw + p]);
                    if (t == kIgnoreIndex) continue;
                    double mx = -INFINITY;
                    for (std::size_t c = 0; c < k; ++c) mx = std::max(mx, static_cast<double>(lv[(i * k + c) * hw + p]));
                    double se = 0;
                    for (std::size_t c = 0; c < k; ++c) se += std::exp(lv[(i * k + c) * hw + p] - mx);
                    for (std::size_t c = 0; c < k; ++c) {
                        const double prob = std::exp(lv[(i * k + c) * hw + p] - mx) / se;
                        const double onehot = static_cast<std::size_t>(t) == c ? 1.0 : 0.0;
                        gl[(i * k + c) * hw + p] += static_cast<T>(scale_g * (prob - onehot));
                    }
                }
        };
    }
    return out;
}

// ------------------------------------------------------------- compositions

template <typename T>
BasicTensor<T> scaled_dot_product_attention(const BasicTensor<T>& q, const BasicTensor<T>& k, const BasicTensor<T>& v) {
    require_rank("attention", q.shape(), 3);
    if (k.dim() != 3 || v.dim() != 3 || k.size(2) != q.size(2) || k.size(1) != v.size(1)) {
        shape_fail("attention", "incompatible q/k/v " + shapes_of<T>({q, k, v}));
    }
    const T inv = static_cast<T>(1.0 / std::sqrt(static_cast<double>(q.size(2))));
    auto scores = scale(matmul(q, k, /*transpose_b=*/true), inv);
    return matmul(softmax(scores), v);
}

// ------------------------------------------------------------------ dispatch

double Attrs::number(const std::string& op, const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end() || !std::holds_alternative<double>(it->second)) {
        throw std::invalid_argument(op + ": missing numeric attribute '" + key + "'");
    }
    return std::get<double>(it->second);
}

double Attrs::number_or(const std::string& key, double fallback) const {
    auto it = values_.find(key);
    if (it == values_.end() || !std::holds_alternative<double>(it->second)) return fallback;
    return std::get<double>(it->second);
}

std::vector<std::int64_t> Attrs::ints(const std::string& op, const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end() || !std::holds_alternative<std::vector<std::int64_t>>(it->second)) {
        throw std::invalid_argument(op + ": missing integer-list attribute '" + key + "'");
    }
    return std::get<std::vector<std::int64_t>>(it->second);
}

const std::vector<std::string>& primitive_names() {
    static const std::vector<std::string> names = {
        "add",        "sub",        "mul",        "scale",      "bias_add",   "matmul",       "transpose",
        "reshape",    "slice",      "concat",     "gelu",       "relu",       "softmax",      "dropout",
        "layer_norm", "batch_norm", "conv2d",     "conv_transpose2d",       "bilinear_interpolate",
        "reflect_pad", "adaptive_avg_pool2d",     "max_pool2d", "sum",      "mean",         "mean_axis",
        "cross_entropy"};
    return names;
}

template <typename T>
BasicTensor<T> apply_primitive(const std::string& op_id, const std::vector<BasicTensor<T>>& inputs, const Attrs& attrs) {
    auto arity = [&](std::size_t n) {
        if (inputs.size() != n) {
            throw ShapeError(op_id + ": expected " + std::to_string(n) + " inputs, got " + std::to_string(inputs.size()) +
                             (inputs.empty() ? "" : " (" + shapes_of(inputs) + ")"));
        }
    };
    auto idx = [&](const std::string& key) { return static_cast<std::size_t>(attrs.number(op_id, key)); };
    auto conv_opts = [&] {
        return Conv2dOptions{static_cast<std::size_t>(attrs.number_or("stride", 1)),
                             static_cast<std::size_t>(attrs.number_or("padding", 0)),
                             static_cast<std::size_t>(attrs.number_or("output_padding", 0))};
    };
    if (op_id == "add") return arity(2), add(inputs[0], inputs[1]);
    if (op_id == "sub") return arity(2), sub(inputs[0], inputs[1]);
    if (op_id == "mul") return arity(2), mul(inputs[0], inputs[1]);
    if (op_id == "scale") return arity(1), scale(inputs[0], static_cast<T>(attrs.number(op_id, "factor")));
    if (op_id == "bias_add") return arity(2), bias_add(inputs[0], inputs[1], idx("axis"));
    if (op_id == "matmul") return arity(2), matmul(inputs[0], inputs[1], attrs.number_or("transpose_b", 0) != 0);
    if (op_id == "transpose") {
        arity(1);
        std::vector<std::size_t> perm;
        for (auto v : attrs.ints(op_id, "perm")) perm.push_back(static_cast<std::size_t>(v));
        return transpose(inputs[0], perm);
    }
    if (op_id == "reshape") {
        arity(1);
        Shape s;
        for (auto v : attrs.ints(op_id, "shape")) s.push_back(static_cast<std::size_t>(v));
        return reshape(inputs[0], s);
    }
    if (op_id == "slice") return arity(1), slice(inputs[0], idx("axis"), idx("begin"), idx("end"));
    if (op_id == "concat") return concat(inputs, idx("axis"));
    if (op_id == "gelu") return arity(1), gelu(inputs[0]);
    if (op_id == "relu") return arity(1), relu(inputs[0]);
    if (op_id == "softmax") return arity(1), softmax(inputs[0]);
    if (op_id == "dropout") {
        return arity(1), dropout(inputs[0], attrs.number(op_id, "p"), static_cast<std::uint64_t>(attrs.number_or("seed", 0)));
    }
    if (op_id == "layer_norm") return arity(3), layer_norm(inputs[0], inputs[1], inputs[2], attrs.number_or("eps", 1e-5));
    if (op_id == "batch_norm") return arity(3), batch_norm(inputs[0], inputs[1], inputs[2], attrs.number_or("eps", 1e-5));
    if (op_id == "conv2d") return arity(2), conv2d(inputs[0], inputs[1], conv_opts());
    if (op_id == "conv_transpose2d") return arity(2), conv_transpose2d(inputs[0], inputs[1], conv_opts());
    if (op_id == "bilinear_interpolate") return arity(1), bilinear_interpolate(inputs[0], idx("height"), idx("width"));
    if (op_id == "reflect_pad") {
        arity(1);
        const auto p = attrs.ints(op_id, "pads");
        if (p.size() != 4) throw std::invalid_argument("reflect_pad: 'pads' needs [top, bottom, left, right]");
        return reflect_pad(inputs[0], static_cast<std::size_t>(p[0]), static_cast<std::size_t>(p[1]),
                           static_cast<std::size_t>(p[2]), static_cast<std::size_t>(p[3]));
    }
    if (op_id == "adaptive_avg_pool2d") return arity(1), adaptive_avg_pool2d(inputs[0], idx("height"), idx("width"));
    if (op_id == "max_pool2d") return arity(1), max_pool2d(inputs[0], idx("kernel"));
    if (op_id == "sum") return arity(1), sum(inputs[0]);
    if (op_id == "mean") return arity(1), mean(inputs[0]);
    if (op_id == "mean_axis") return arity(1), mean_axis(inputs[0], idx("axis"));
    if (op_id == "cross_entropy") return arity(2), cross_entropy(inputs[0], inputs[1]);
    throw std::invalid_argument("unknown primitive '" + op_id + "'");
}

#define GEOPEFT_INSTANTIATE(T)                                                                                         \
    template BasicTensor<T> add(const BasicTensor<T>&, const BasicTensor<T>&);                                        \
    template BasicTensor<T> sub(const BasicTensor<T>&, const BasicTensor<T>&);                                        \
    template BasicTensor<T> mul(const BasicTensor<T>&, const BasicTensor<T>&);                                        \
    template BasicTensor<T> scale(const BasicTensor<T>&, T);                                                          \
    template BasicTensor<T> bias_add(const BasicTensor<T>&, const BasicTensor<T>&, std::size_t);                      \
    template BasicTensor<T> matmul(const BasicTensor<T>&, const BasicTensor<T>&, bool);                               \
    template BasicTensor<T> transpose(const BasicTensor<T>&, const std::vector<std::size_t>&);                        \
    template BasicTensor<T> reshape(const BasicTensor<T>&, Shape);                                                    \
    template BasicTensor<T> slice(const BasicTensor<T>&, std::size_t, std::size_t, std::size_t);                      \
    template BasicTensor<T> concat(const std::vector<BasicTensor<T>>&, std::size_t);                                  \
    template BasicTensor<T> gelu(const BasicTensor<T>&);                                                              \
    template BasicTensor<T> relu(const BasicTensor<T>&);                                                              \
    template BasicTensor<T> softmax(const BasicTensor<T>&);                                                           \
    template BasicTensor<T> dropout(const BasicTensor<T>&, double, std::uint64_t);                                    \
    template BasicTensor<T> layer_norm(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&, double);  \
    template BasicTensor<T> batch_norm(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&, double,   \
                                       std::vector<T>*, std::vector<T>*);                                             \
    template BasicTensor<T> batch_norm_eval(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&,      \
                                            const std::vector<T>&, const std::vector<T>&, double);                    \
    template BasicTensor<T> conv2d(const BasicTensor<T>&, const BasicTensor<T>&, Conv2dOptions);                      \
    template BasicTensor<T> conv_transpose2d(const BasicTensor<T>&, const BasicTensor<T>&, Conv2dOptions);            \
    template BasicTensor<T> bilinear_interpolate(const BasicTensor<T>&, std::size_t, std::size_t);                    \
    template BasicTensor<T> reflect_pad(const BasicTensor<T>&, std::size_t, std::size_t, std::size_t, std::size_t);   \
    template BasicTensor<T> adaptive_avg_pool2d(const BasicTensor<T>&, std::size_t, std::size_t);                     \
    template BasicTensor<T> max_pool2d(const BasicTensor<T>&, std::size_t);                                           \
    template BasicTensor<T> sum(const BasicTensor<T>&);                                                               \
    template BasicTensor<T> mean(const BasicTensor<T>&);                                                              \
    template BasicTensor<T> mean_axis(const BasicTensor<T>&, std::size_t);                                            \
    template BasicTensor<T> cross_entropy(const BasicTensor<T>&, const BasicTensor<T>&);                              \
    template BasicTensor<T> scaled_dot_product_attention(const BasicTensor<T>&, const BasicTensor<T>&,               \
                                                         const BasicTensor<T>&);                                      \
    template BasicTensor<T> apply_primitive(const std::string&, const std::vector<BasicTensor<T>>&, const Attrs&);

GEOPEFT_INSTANTIATE(float)
GEOPEFT_INSTANTIATE(double)

#undef GEOPEFT_INSTANTIATE

}  // namespace geopeft::ops
