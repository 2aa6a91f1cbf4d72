#pragma once

// Dense row-major float32 tensors with reverse-mode autodiff on a
// thread-local tape. Covers exactly the operations the network needs;
// no broadcasting beyond scalar-with-tensor.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "mpers/errors.hpp"

namespace mpers {

using Shape = std::vector<int>;

inline int shape_numel(const Shape& s) {
    int n = 1;
    for (int e : s) n *= e;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

struct TensorImpl {
    Shape shape;
    std::vector<float> data;
    std::vector<float> grad;  // sized iff requires_grad
    bool requires_grad = false;
};

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape) {
        Tensor t;
        t.impl_ = std::make_shared<TensorImpl>();
        int n = shape_numel(shape);
        if (n <= 0) throw ContractError("tensor extents must be positive, got " + shape_str(shape));
        t.impl_->shape = std::move(shape);
        t.impl_->data.assign(static_cast<size_t>(n), 0.0f);
        return t;
    }

    static Tensor full(Shape shape, float v) {
        Tensor t = zeros(std::move(shape));
        std::fill(t.data().begin(), t.data().end(), v);
        return t;
    }

    static Tensor from(Shape shape, std::vector<float> values) {
        Tensor t;
        t.impl_ = std::make_shared<TensorImpl>();
        if (static_cast<int>(values.size()) != shape_numel(shape))
            throw ContractError("value count " + std::to_string(values.size()) +
                                " does not match shape " + shape_str(shape));
        t.impl_->shape = std::move(shape);
        t.impl_->data = std::move(values);
        return t;
    }

    static Tensor scalar(float v) { return from({1}, {v}); }

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    int rank() const { return static_cast<int>(impl_->shape.size()); }
    int numel() const { return static_cast<int>(impl_->data.size()); }
    // shared-handle semantics: const handles still reach the shared buffers
    std::vector<float>& data() const { return impl_->data; }
    std::vector<float>& grad() const { return impl_->grad; }
    bool requires_grad() const { return impl_->requires_grad; }

    void set_requires_grad(bool flag) {
        impl_->requires_grad = flag;
        if (flag)
            impl_->grad.assign(impl_->data.size(), 0.0f);
        else
            impl_->grad.clear();
    }

    void zero_grad() {
        if (impl_->requires_grad) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0f);
    }

    float item() const {
        if (numel() != 1) throw ContractError("item() on non-scalar tensor " + shape_str(shape()));
        return impl_->data[0];
    }

    std::shared_ptr<TensorImpl> impl_;
};

// Recorded backward closures in forward order; reverse replay visits each
// node exactly once. Grad buffers on leaves accumulate until zeroed.
class Tape {
public:
    void record(std::function<void()> fn) { nodes_.push_back(std::move(fn)); }

    void backward(Tensor loss) {
        if (!loss.defined() || loss.numel() != 1)
            throw ContractError("backward requires a scalar loss");
        if (loss.requires_grad()) loss.grad()[0] += 1.0f;
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
    }

    size_t size() const { return nodes_.size(); }

    static Tape*& active() {
        thread_local Tape* tape = nullptr;
        return tape;
    }

    struct Scope {
        Tape* prev;
        explicit Scope(Tape& t) : prev(active()) { active() = &t; }
        ~Scope() { active() = prev; }
    };

private:
    std::vector<std::function<void()>> nodes_;
};

namespace detail {

inline bool tracked(const Tensor& t) { return t.defined() && t.requires_grad(); }

inline Tensor result(Shape shape, bool any_input_tracked) {
    Tensor out = Tensor::zeros(std::move(shape));
    if (any_input_tracked && Tape::active() != nullptr) out.set_requires_grad(true);
    return out;
}

inline void record(std::function<void()> fn) {
    if (Tape* t = Tape::active()) t->record(std::move(fn));
}

inline void check_axis(const Tensor& t, int axis) {
    if (axis < 0 || axis >= t.rank())
        throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(t.shape()));
}

// sizes for iterating shape as outer x axis x inner
struct AxisSplit {
    int outer, extent, inner;
};
inline AxisSplit split(const Shape& s, int axis) {
    AxisSplit a{1, s[axis], 1};
    for (int i = 0; i < axis; ++i) a.outer *= s[i];
    for (int i = axis + 1; i < static_cast<int>(s.size()); ++i) a.inner *= s[i];
    return a;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// linear algebra

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0])
        throw DimensionError("matmul shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const int m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    Tensor c = detail::result({m, n}, a.requires_grad() || b.requires_grad());
    const float* pa = a.data().data();
    const float* pb = b.data().data();
    float* pc = c.data().data();
    for (int i = 0; i < m; ++i)
        for (int l = 0; l < k; ++l) {
            const float av = pa[i * k + l];
            if (av == 0.0f) continue;
            const float* brow = pb + l * n;
            float* crow = pc + i * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    if (c.requires_grad()) {
        detail::record([a, b, c, m, k, n]() {
            const float* dc = c.grad().data();
            if (a.requires_grad()) {
                float* da = a.grad().data();
                const float* pb2 = b.data().data();
                for (int i = 0; i < m; ++i)
                    for (int l = 0; l < k; ++l) {
                        double acc = 0.0;
                        for (int j = 0; j < n; ++j) acc += dc[i * n + j] * pb2[l * n + j];
                        da[i * k + l] += static_cast<float>(acc);
                    }
            }
            if (b.requires_grad()) {
                float* db = b.grad().data();
                const float* pa2 = a.data().data();
                for (int l = 0; l < k; ++l)
                    for (int j = 0; j < n; ++j) {
                        double acc = 0.0;
                        for (int i = 0; i < m; ++i) acc += pa2[i * k + l] * dc[i * n + j];
                        db[l * n + j] += static_cast<float>(acc);
                    }
            }
        });
    }
    return c;
}

inline Tensor transpose(const Tensor& a) {
    if (a.rank() != 2) throw DimensionError("transpose expects rank-2, got " + shape_str(a.shape()));
    const int m = a.shape()[0], n = a.shape()[1];
    Tensor out = detail::result({n, m}, a.requires_grad());
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out.data()[j * m + i] = a.data()[i * n + j];
    if (out.requires_grad()) {
        detail::record([a, out, m, n]() {
            if (!a.requires_grad()) return;
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) a.grad()[i * n + j] += out.grad()[j * m + i];
        });
    }
    return out;
}

// rows(n x d) * W(d x m) + bias(m)
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
    Tensor y = matmul(x, w);
    if (!bias.defined()) return y;
    if (bias.rank() != 1 || bias.shape()[0] != y.shape()[1])
        throw DimensionError("linear bias shape " + shape_str(bias.shape()) + " vs output " + shape_str(y.shape()));
    const int n = y.shape()[0], m = y.shape()[1];
    Tensor out = detail::result({n, m}, y.requires_grad() || bias.requires_grad());
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j) out.data()[i * m + j] = y.data()[i * m + j] + bias.data()[j];
    if (out.requires_grad()) {
        detail::record([y, bias, out, n, m]() {
            if (y.requires_grad())
                for (int i = 0; i < n * m; ++i) y.grad()[i] += out.grad()[i];
            if (bias.requires_grad())
                for (int i = 0; i < n; ++i)
                    for (int j = 0; j < m; ++j) bias.grad()[j] += out.grad()[i * m + j];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// convolution (cross-correlation, zero padding), input CxHxW, kernel OxCxkhxkw

inline Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias = Tensor(),
                     int stride = 1, int padding = 0, int dilation = 1) {
    if (input.rank() != 3 || kernel.rank() != 4)
        throw DimensionError("conv2d expects CxHxW input and OxCxkhxkw kernel, got " +
                             shape_str(input.shape()) + " and " + shape_str(kernel.shape()));
    const int C = input.shape()[0], H = input.shape()[1], W = input.shape()[2];
    const int O = kernel.shape()[0], kC = kernel.shape()[1], kh = kernel.shape()[2], kw = kernel.shape()[3];
    if (kC != C)
        throw DimensionError("conv2d channel mismatch " + shape_str(input.shape()) + " vs " + shape_str(kernel.shape()));
    if (kh < 1 || kw < 1 || stride < 1 || dilation < 1 || padding < 0)
        throw ContractError("conv2d hyperparameters must be positive");
    const int eff_h = dilation * (kh - 1) + 1;
    const int eff_w = dilation * (kw - 1) + 1;
    if (eff_h > H + 2 * padding || eff_w > W + 2 * padding)
        throw DimensionError("conv2d kernel footprint " + std::to_string(eff_h) + "x" + std::to_string(eff_w) +
                             " exceeds padded input " + std::to_string(H + 2 * padding) + "x" +
                             std::to_string(W + 2 * padding));
    if (bias.defined() && (bias.rank() != 1 || bias.shape()[0] != O))
        throw DimensionError("conv2d bias shape " + shape_str(bias.shape()) + " vs O=" + std::to_string(O));
    const int Ho = (H + 2 * padding - eff_h) / stride + 1;
    const int Wo = (W + 2 * padding - eff_w) / stride + 1;

    bool track = input.requires_grad() || kernel.requires_grad() || (bias.defined() && bias.requires_grad());
    Tensor out = detail::result({O, Ho, Wo}, track);

    const float* in = input.data().data();
    const float* kp = kernel.data().data();
    float* op = out.data().data();
    for (int o = 0; o < O; ++o) {
        const float b = bias.defined() ? bias.data()[o] : 0.0f;
        for (int oy = 0; oy < Ho; ++oy)
            for (int ox = 0; ox < Wo; ++ox) op[(o * Ho + oy) * Wo + ox] = b;
        for (int c = 0; c < C; ++c)
            for (int ky = 0; ky < kh; ++ky)
                for (int kx = 0; kx < kw; ++kx) {
                    const float kv = kp[((o * C + c) * kh + ky) * kw + kx];
                    if (kv == 0.0f) continue;
                    for (int oy = 0; oy < Ho; ++oy) {
                        const int iy = oy * stride - padding + ky * dilation;
                        if (iy < 0 || iy >= H) continue;
                        float* orow = op + (o * Ho + oy) * Wo;
                        const float* irow = in + (c * H + iy) * W;
                        for (int ox = 0; ox < Wo; ++ox) {
                            const int ix = ox * stride - padding + kx * dilation;
                            if (ix < 0 || ix >= W) continue;
                            orow[ox] += kv * irow[ix];
                        }
                    }
                }
    }
    if (out.requires_grad()) {
        detail::record([input, kernel, bias, out, C, H, W, O, kh, kw, Ho, Wo, stride, padding, dilation]() {
            const float* dout = out.grad().data();
            const float* in = input.data().data();
            const float* kp = kernel.data().data();
            for (int o = 0; o < O; ++o) {
                if (bias.defined() && bias.requires_grad()) {
                    double acc = 0.0;
                    for (int i = 0; i < Ho * Wo; ++i) acc += dout[o * Ho * Wo + i];
                    bias.grad()[o] += static_cast<float>(acc);
                }
                for (int c = 0; c < C; ++c)
                    for (int ky = 0; ky < kh; ++ky)
                        for (int kx = 0; kx < kw; ++kx) {
                            const int kidx = ((o * C + c) * kh + ky) * kw + kx;
                            double kacc = 0.0;
                            for (int oy = 0; oy < Ho; ++oy) {
                                const int iy = oy * stride - padding + ky * dilation;
                                if (iy < 0 || iy >= H) continue;
                                const float* drow = dout + (o * Ho + oy) * Wo;
                                const float* irow = in + (c * H + iy) * W;
                                float* girow = input.requires_grad() ? input.grad().data() + (c * H + iy) * W : nullptr;
                                const float kv = kp[kidx];
                                for (int ox = 0; ox < Wo; ++ox) {
                                    const int ix = ox * stride - padding + kx * dilation;
                                    if (ix < 0 || ix >= W) continue;
                                    if (kernel.requires_grad()) kacc += drow[ox] * irow[ix];
                                    if (girow) girow[ix] += kv * drow[ox];
                                }
                            }
                            if (kernel.requires_grad()) kernel.grad()[kidx] += static_cast<float>(kacc);
                        }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// pointwise / shape ops

inline Tensor sigmoid(const Tensor& x) {
    Tensor out = detail::result(x.shape(), x.requires_grad());
    for (int i = 0; i < x.numel(); ++i) {
        const float v = x.data()[i];
        out.data()[i] = v >= 0.0f ? 1.0f / (1.0f + std::exp(-v))
                                  : std::exp(v) / (1.0f + std::exp(v));
    }
    if (out.requires_grad()) {
        detail::record([x, out]() {
            if (!x.requires_grad()) return;
            for (int i = 0; i < x.numel(); ++i) {
                const float s = out.data()[i];
                x.grad()[i] += out.grad()[i] * s * (1.0f - s);
            }
        });
    }
    return out;
}

inline Tensor relu(const Tensor& x) {
    Tensor out = detail::result(x.shape(), x.requires_grad());
    for (int i = 0; i < x.numel(); ++i) out.data()[i] = x.data()[i] > 0.0f ? x.data()[i] : 0.0f;
    if (out.requires_grad()) {
        detail::record([x, out]() {
            if (!x.requires_grad()) return;
            for (int i = 0; i < x.numel(); ++i)
                if (x.data()[i] > 0.0f) x.grad()[i] += out.grad()[i];
        });
    }
    return out;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw DimensionError("add shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor out = detail::result(a.shape(), a.requires_grad() || b.requires_grad());
    for (int i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] + b.data()[i];
    if (out.requires_grad()) {
        detail::record([a, b, out]() {
            for (int i = 0; i < out.numel(); ++i) {
                if (a.requires_grad()) a.grad()[i] += out.grad()[i];
                if (b.requires_grad()) b.grad()[i] += out.grad()[i];
            }
        });
    }
    return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw DimensionError("mul shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor out = detail::result(a.shape(), a.requires_grad() || b.requires_grad());
    for (int i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] * b.data()[i];
    if (out.requires_grad()) {
        detail::record([a, b, out]() {
            for (int i = 0; i < out.numel(); ++i) {
                if (a.requires_grad()) a.grad()[i] += out.grad()[i] * b.data()[i];
                if (b.requires_grad()) b.grad()[i] += out.grad()[i] * a.data()[i];
            }
        });
    }
    return out;
}

inline Tensor mul_scalar(const Tensor& x, float s) {
    Tensor out = detail::result(x.shape(), x.requires_grad());
    for (int i = 0; i < x.numel(); ++i) out.data()[i] = x.data()[i] * s;
    if (out.requires_grad()) {
        detail::record([x, out, s]() {
            if (!x.requires_grad()) return;
            for (int i = 0; i < x.numel(); ++i) x.grad()[i] += out.grad()[i] * s;
        });
    }
    return out;
}

// multiply a whole tensor by a one-element tensor, differentiable into both
inline Tensor scale_by(const Tensor& x, const Tensor& s) {
    if (s.numel() != 1) throw DimensionError("scale_by expects a one-element scale, got " + shape_str(s.shape()));
    Tensor out = detail::result(x.shape(), x.requires_grad() || s.requires_grad());
    const float sv = s.data()[0];
    for (int i = 0; i < x.numel(); ++i) out.data()[i] = x.data()[i] * sv;
    if (out.requires_grad()) {
        detail::record([x, s, out, sv]() {
            if (x.requires_grad())
                for (int i = 0; i < x.numel(); ++i) x.grad()[i] += out.grad()[i] * sv;
            if (s.requires_grad()) {
                double acc = 0.0;
                for (int i = 0; i < x.numel(); ++i) acc += out.grad()[i] * x.data()[i];
                s.grad()[0] += static_cast<float>(acc);
            }
        });
    }
    return out;
}

inline Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.numel())
        throw DimensionError("reshape " + shape_str(x.shape()) + " -> " + shape_str(shape) + " changes element count");
    Tensor out = detail::result(shape, x.requires_grad());
    out.data() = x.data();
    if (out.requires_grad()) {
        detail::record([x, out]() {
            if (!x.requires_grad()) return;
            for (int i = 0; i < x.numel(); ++i) x.grad()[i] += out.grad()[i];
        });
    }
    return out;
}

inline Tensor mean_axis(const Tensor& x, int axis) {
    detail::check_axis(x, axis);
    auto sp = detail::split(x.shape(), axis);
    Shape out_shape;
    for (int i = 0; i < x.rank(); ++i)
        if (i != axis) out_shape.push_back(x.shape()[i]);
    if (out_shape.empty()) out_shape = {1};
    Tensor out = detail::result(out_shape, x.requires_grad());
    const float inv = 1.0f / static_cast<float>(sp.extent);
    for (int o = 0; o < sp.outer; ++o)
        for (int in = 0; in < sp.inner; ++in) {
            double acc = 0.0;
            for (int a = 0; a < sp.extent; ++a) acc += x.data()[(o * sp.extent + a) * sp.inner + in];
            out.data()[o * sp.inner + in] = static_cast<float>(acc) * inv;
        }
    if (out.requires_grad()) {
        detail::record([x, out, sp, inv]() {
            if (!x.requires_grad()) return;
            for (int o = 0; o < sp.outer; ++o)
                for (int in = 0; in < sp.inner; ++in) {
                    const float g = out.grad()[o * sp.inner + in] * inv;
                    for (int a = 0; a < sp.extent; ++a) x.grad()[(o * sp.extent + a) * sp.inner + in] += g;
                }
        });
    }
    return out;
}

inline Tensor sum_all(const Tensor& x) {
    Tensor out = detail::result({1}, x.requires_grad());
    double acc = 0.0;
    for (float v : x.data()) acc += v;
    out.data()[0] = static_cast<float>(acc);
    if (out.requires_grad()) {
        detail::record([x, out]() {
            if (!x.requires_grad()) return;
            for (int i = 0; i < x.numel(); ++i) x.grad()[i] += out.grad()[0];
        });
    }
    return out;
}

inline Tensor mean_all(const Tensor& x) { return mul_scalar(sum_all(x), 1.0f / static_cast<float>(x.numel())); }

inline Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) throw ContractError("concat of zero tensors");
    detail::check_axis(parts[0], axis);
    Shape out_shape = parts[0].shape();
    bool track = false;
    int total = 0;
    for (const Tensor& p : parts) {
        if (p.rank() != parts[0].rank())
            throw DimensionError("concat rank mismatch " + shape_str(p.shape()) + " vs " + shape_str(parts[0].shape()));
        for (int i = 0; i < p.rank(); ++i)
            if (i != axis && p.shape()[i] != parts[0].shape()[i])
                throw DimensionError("concat extent mismatch off axis: " + shape_str(p.shape()) + " vs " +
                                     shape_str(parts[0].shape()));
        total += p.shape()[axis];
        track = track || p.requires_grad();
    }
    out_shape[axis] = total;
    Tensor out = detail::result(out_shape, track);
    auto osp = detail::split(out_shape, axis);
    int offset = 0;
    for (const Tensor& p : parts) {
        auto psp = detail::split(p.shape(), axis);
        for (int o = 0; o < psp.outer; ++o)
            for (int a = 0; a < psp.extent; ++a)
                std::copy_n(p.data().data() + (o * psp.extent + a) * psp.inner, psp.inner,
                            out.data().data() + (o * osp.extent + offset + a) * osp.inner);
        offset += p.shape()[axis];
    }
    if (out.requires_grad()) {
        detail::record([parts, out, axis, osp]() {
            int off = 0;
            for (const Tensor& p : parts) {
                auto psp = detail::split(p.shape(), axis);
                if (p.requires_grad())
                    for (int o = 0; o < psp.outer; ++o)
                        for (int a = 0; a < psp.extent; ++a) {
                            const float* g = out.grad().data() + (o * osp.extent + off + a) * osp.inner;
                            float* pg = p.grad().data() + (o * psp.extent + a) * psp.inner;
                            for (int i = 0; i < psp.inner; ++i) pg[i] += g[i];
                        }
                off += p.shape()[axis];
            }
        });
    }
    return out;
}

inline Tensor upsample_nearest(const Tensor& x, int factor) {
    if (x.rank() != 3) throw DimensionError("upsample_nearest expects CxHxW, got " + shape_str(x.shape()));
    if (factor < 1) throw ContractError("upsample factor must be >= 1");
    const int C = x.shape()[0], H = x.shape()[1], W = x.shape()[2];
    Tensor out = detail::result({C, H * factor, W * factor}, x.requires_grad());
    for (int c = 0; c < C; ++c)
        for (int y = 0; y < H * factor; ++y)
            for (int xw = 0; xw < W * factor; ++xw)
                out.data()[(c * H * factor + y) * W * factor + xw] = x.data()[(c * H + y / factor) * W + xw / factor];
    if (out.requires_grad()) {
        detail::record([x, out, C, H, W, factor]() {
            if (!x.requires_grad()) return;
            for (int c = 0; c < C; ++c)
                for (int y = 0; y < H * factor; ++y)
                    for (int xw = 0; xw < W * factor; ++xw)
                        x.grad()[(c * H + y / factor) * W + xw / factor] +=
                            out.grad()[(c * H * factor + y) * W * factor + xw];
        });
    }
    return out;
}

// bilinear interpolation with half-pixel centers: output pixel o samples the
// input at (o + 0.5) / factor - 0.5, clamped to the border
inline Tensor upsample_bilinear(const Tensor& x, int factor) {
    if (x.rank() != 3) throw DimensionError("upsample_bilinear expects CxHxW, got " + shape_str(x.shape()));
    if (factor < 1) throw ContractError("upsample factor must be >= 1");
    const int C = x.shape()[0], H = x.shape()[1], W = x.shape()[2];
    const int Ho = H * factor, Wo = W * factor;
    auto src = [factor](int o, int extent, int& lo, float& frac) {
        const float pos = (static_cast<float>(o) + 0.5f) / static_cast<float>(factor) - 0.5f;
        const float clamped = std::min(std::max(pos, 0.0f), static_cast<float>(extent - 1));
        lo = std::min(static_cast<int>(clamped), extent - 2 >= 0 ? extent - 2 : 0);
        frac = clamped - static_cast<float>(lo);
    };
    Tensor out = detail::result({C, Ho, Wo}, x.requires_grad());
    for (int c = 0; c < C; ++c)
        for (int y = 0; y < Ho; ++y) {
            int y0;
            float fy;
            src(y, H, y0, fy);
            const int y1 = std::min(y0 + 1, H - 1);
            for (int xw = 0; xw < Wo; ++xw) {
                int x0;
                float fx;
                src(xw, W, x0, fx);
                const int x1 = std::min(x0 + 1, W - 1);
                out.data()[(c * Ho + y) * Wo + xw] =
                    (1 - fy) * ((1 - fx) * x.data()[(c * H + y0) * W + x0] + fx * x.data()[(c * H + y0) * W + x1]) +
                    fy * ((1 - fx) * x.data()[(c * H + y1) * W + x0] + fx * x.data()[(c * H + y1) * W + x1]);
            }
        }
    if (out.requires_grad()) {
        detail::record([x, out, src, C, H, W, Ho, Wo]() {
            if (!x.requires_grad()) return;
            for (int c = 0; c < C; ++c)
                for (int y = 0; y < Ho; ++y) {
                    int y0;
                    float fy;
                    src(y, H, y0, fy);
                    const int y1 = std::min(y0 + 1, H - 1);
                    for (int xw = 0; xw < Wo; ++xw) {
                        int x0;
                        float fx;
                        src(xw, W, x0, fx);
                        const int x1 = std::min(x0 + 1, W - 1);
                        const float g = out.grad()[(c * Ho + y) * Wo + xw];
                        x.grad()[(c * H + y0) * W + x0] += (1 - fy) * (1 - fx) * g;
                        x.grad()[(c * H + y0) * W + x1] += (1 - fy) * fx * g;
                        x.grad()[(c * H + y1) * W + x0] += fy * (1 - fx) * g;
                        x.grad()[(c * H + y1) * W + x1] += fy * fx * g;
                    }
                }
        });
    }
    return out;
}

// channel-wise scale of CxHxW by a length-C vector
inline Tensor channel_scale(const Tensor& x, const Tensor& w) {
    if (x.rank() != 3 || w.rank() != 1 || w.shape()[0] != x.shape()[0])
        throw DimensionError("channel_scale shapes " + shape_str(x.shape()) + " vs " + shape_str(w.shape()));
    const int C = x.shape()[0], HW = x.shape()[1] * x.shape()[2];
    Tensor out = detail::result(x.shape(), x.requires_grad() || w.requires_grad());
    for (int c = 0; c < C; ++c)
        for (int i = 0; i < HW; ++i) out.data()[c * HW + i] = x.data()[c * HW + i] * w.data()[c];
    if (out.requires_grad()) {
        detail::record([x, w, out, C, HW]() {
            for (int c = 0; c < C; ++c) {
                if (x.requires_grad())
                    for (int i = 0; i < HW; ++i) x.grad()[c * HW + i] += out.grad()[c * HW + i] * w.data()[c];
                if (w.requires_grad()) {
                    double acc = 0.0;
                    for (int i = 0; i < HW; ++i) acc += out.grad()[c * HW + i] * x.data()[c * HW + i];
                    w.grad()[c] += static_cast<float>(acc);
                }
            }
        });
    }
    return out;
}

inline Tensor select_index(const Tensor& x, int index) {
    if (x.rank() != 1) throw DimensionError("select_index expects rank-1, got " + shape_str(x.shape()));
    if (index < 0 || index >= x.shape()[0]) throw ContractError("select_index out of range");
    Tensor out = detail::result({1}, x.requires_grad());
    out.data()[0] = x.data()[index];
    if (out.requires_grad()) {
        detail::record([x, out, index]() {
            if (x.requires_grad()) x.grad()[index] += out.grad()[0];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// normalization

inline Tensor softmax(const Tensor& x, int axis) {
    detail::check_axis(x, axis);
    auto sp = detail::split(x.shape(), axis);
    Tensor out = detail::result(x.shape(), x.requires_grad());
    for (int o = 0; o < sp.outer; ++o)
        for (int in = 0; in < sp.inner; ++in) {
            float mx = -std::numeric_limits<float>::infinity();
            for (int a = 0; a < sp.extent; ++a) mx = std::max(mx, x.data()[(o * sp.extent + a) * sp.inner + in]);
            double denom = 0.0;
            for (int a = 0; a < sp.extent; ++a)
                denom += std::exp(static_cast<double>(x.data()[(o * sp.extent + a) * sp.inner + in] - mx));
            for (int a = 0; a < sp.extent; ++a) {
                const int idx = (o * sp.extent + a) * sp.inner + in;
                out.data()[idx] = static_cast<float>(std::exp(static_cast<double>(x.data()[idx] - mx)) / denom);
            }
        }
    if (out.requires_grad()) {
        detail::record([x, out, sp]() {
            if (!x.requires_grad()) return;
            for (int o = 0; o < sp.outer; ++o)
                for (int in = 0; in < sp.inner; ++in) {
                    double dot = 0.0;
                    for (int a = 0; a < sp.extent; ++a) {
                        const int idx = (o * sp.extent + a) * sp.inner + in;
                        dot += static_cast<double>(out.grad()[idx]) * out.data()[idx];
                    }
                    for (int a = 0; a < sp.extent; ++a) {
                        const int idx = (o * sp.extent + a) * sp.inner + in;
                        x.grad()[idx] += out.data()[idx] * (out.grad()[idx] - static_cast<float>(dot));
                    }
                }
        });
    }
    return out;
}

// normalize each length-d row of an n x d matrix, then affine by gamma/beta (d)
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps = 1e-5f) {
    if (x.rank() != 2 || gamma.rank() != 1 || beta.rank() != 1 || gamma.shape()[0] != x.shape()[1] ||
        beta.shape()[0] != x.shape()[1])
        throw DimensionError("layer_norm shapes " + shape_str(x.shape()) + ", " + shape_str(gamma.shape()));
    const int n = x.shape()[0], d = x.shape()[1];
    bool track = x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
    Tensor out = detail::result(x.shape(), track);
    std::vector<float> xhat(static_cast<size_t>(n) * d);
    std::vector<float> inv_sigma(n);
    for (int i = 0; i < n; ++i) {
        double mu = 0.0;
        for (int j = 0; j < d; ++j) mu += x.data()[i * d + j];
        mu /= d;
        double var = 0.0;
        for (int j = 0; j < d; ++j) {
            const double c = x.data()[i * d + j] - mu;
            var += c * c;
        }
        var /= d;
        const float is = static_cast<float>(1.0 / std::sqrt(var + eps));
        inv_sigma[i] = is;
        for (int j = 0; j < d; ++j) {
            const float xh = (x.data()[i * d + j] - static_cast<float>(mu)) * is;
            xhat[i * d + j] = xh;
            out.data()[i * d + j] = gamma.data()[j] * xh + beta.data()[j];
        }
    }
    if (out.requires_grad()) {
        detail::record([x, gamma, beta, out, xhat, inv_sigma, n, d]() {
            for (int i = 0; i < n; ++i) {
                double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
                for (int j = 0; j < d; ++j) {
                    const float dy = out.grad()[i * d + j];
                    const float dxhat = dy * gamma.data()[j];
                    mean_dxhat += dxhat;
                    mean_dxhat_xhat += static_cast<double>(dxhat) * xhat[i * d + j];
                    if (gamma.requires_grad()) gamma.grad()[j] += dy * xhat[i * d + j];
                    if (beta.requires_grad()) beta.grad()[j] += dy;
                }
                if (!x.requires_grad()) continue;
                mean_dxhat /= d;
                mean_dxhat_xhat /= d;
                for (int j = 0; j < d; ++j) {
                    const float dxhat = out.grad()[i * d + j] * gamma.data()[j];
                    x.grad()[i * d + j] += inv_sigma[i] * static_cast<float>(dxhat - mean_dxhat -
                                                                             xhat[i * d + j] * mean_dxhat_xhat);
                }
            }
        });
    }
    return out;
}

// per-channel normalization of a CxHxW map over its spatial extent
inline Tensor channel_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps = 1e-5f) {
    if (x.rank() != 3 || gamma.shape()[0] != x.shape()[0] || beta.shape()[0] != x.shape()[0])
        throw DimensionError("channel_norm shapes " + shape_str(x.shape()) + ", " + shape_str(gamma.shape()));
    const int C = x.shape()[0], HW = x.shape()[1] * x.shape()[2];
    bool track = x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
    Tensor out = detail::result(x.shape(), track);
    std::vector<float> xhat(static_cast<size_t>(C) * HW);
    std::vector<float> inv_sigma(C);
    for (int c = 0; c < C; ++c) {
        double mu = 0.0;
        for (int i = 0; i < HW; ++i) mu += x.data()[c * HW + i];
        mu /= HW;
        double var = 0.0;
        for (int i = 0; i < HW; ++i) {
            const double d = x.data()[c * HW + i] - mu;
            var += d * d;
        }
        var /= HW;
        const float is = static_cast<float>(1.0 / std::sqrt(var + eps));
        inv_sigma[c] = is;
        for (int i = 0; i < HW; ++i) {
            const float xh = (x.data()[c * HW + i] - static_cast<float>(mu)) * is;
            xhat[c * HW + i] = xh;
            out.data()[c * HW + i] = gamma.data()[c] * xh + beta.data()[c];
        }
    }
    if (out.requires_grad()) {
        detail::record([x, gamma, beta, out, xhat, inv_sigma, C, HW]() {
            for (int c = 0; c < C; ++c) {
                double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
                for (int i = 0; i < HW; ++i) {
                    const float dy = out.grad()[c * HW + i];
                    const float dxhat = dy * gamma.data()[c];
                    mean_dxhat += dxhat;
                    mean_dxhat_xhat += static_cast<double>(dxhat) * xhat[c * HW + i];
                    if (gamma.requires_grad()) gamma.grad()[c] += dy * xhat[c * HW + i];
                    if (beta.requires_grad()) beta.grad()[c] += dy;
                }
                if (!x.requires_grad()) continue;
                mean_dxhat /= HW;
                mean_dxhat_xhat /= HW;
                for (int i = 0; i < HW; ++i) {
                    const float dxhat = out.grad()[c * HW + i] * gamma.data()[c];
                    x.grad()[c * HW + i] += inv_sigma[c] * static_cast<float>(dxhat - mean_dxhat -
                                                                              xhat[c * HW + i] * mean_dxhat_xhat);
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// loss

constexpr int kIgnoreLabel = 255;

// mean over non-ignored pixels of -log softmax(logits)[target]
inline Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets, int ignore_label = kIgnoreLabel) {
    if (logits.rank() != 3)
        throw DimensionError("cross_entropy expects KxHxW logits, got " + shape_str(logits.shape()));
    const int K = logits.shape()[0], H = logits.shape()[1], W = logits.shape()[2];
    if (static_cast<int>(targets.size()) != H * W)
        throw DimensionError("cross_entropy target count " + std::to_string(targets.size()) + " vs " +
                             std::to_string(H * W) + " pixels");
    for (int p = 0; p < H * W; ++p) {
        const int t = targets[p];
        if (t != ignore_label && (t < 0 || t >= K))
            throw LabelError("label " + std::to_string(t) + " out of range at pixel (" + std::to_string(p / W) +
                             "," + std::to_string(p % W) + ")");
    }
    Tensor out = detail::result({1}, logits.requires_grad());
    const int HW = H * W;
    std::vector<float> probs(static_cast<size_t>(K) * HW);
    int n_valid = 0;
    double loss = 0.0;
    for (int p = 0; p < HW; ++p) {
        float mx = -std::numeric_limits<float>::infinity();
        for (int k = 0; k < K; ++k) mx = std::max(mx, logits.data()[k * HW + p]);
        double denom = 0.0;
        for (int k = 0; k < K; ++k) denom += std::exp(static_cast<double>(logits.data()[k * HW + p] - mx));
        const double log_denom = std::log(denom);
        for (int k = 0; k < K; ++k)
            probs[k * HW + p] = static_cast<float>(std::exp(static_cast<double>(logits.data()[k * HW + p] - mx)) / denom);
        if (targets[p] == ignore_label) continue;
        ++n_valid;
        loss -= static_cast<double>(logits.data()[targets[p] * HW + p] - mx) - log_denom;
    }
    if (n_valid == 0) throw ContractError("cross_entropy: no non-ignored pixels");
    out.data()[0] = static_cast<float>(loss / n_valid);
    if (out.requires_grad()) {
        detail::record([logits, out, targets, probs, n_valid, K, HW, ignore_label]() {
            if (!logits.requires_grad()) return;
            const float g = out.grad()[0] / static_cast<float>(n_valid);
            for (int p = 0; p < HW; ++p) {
                if (targets[p] == ignore_label) continue;
                for (int k = 0; k < K; ++k) {
                    const float onehot = (k == targets[p]) ? 1.0f : 0.0f;
                    logits.grad()[k * HW + p] += g * (probs[k * HW + p] - onehot);
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// finite-difference gradient check

inline float grad_check(const std::function<Tensor(const Tensor&)>& fn, Tensor x, float eps = 1e-3f) {
    x.set_requires_grad(true);
    x.zero_grad();
    {
        Tape tape;
        Tape::Scope scope(tape);
        Tensor loss = fn(x);
        tape.backward(loss);
    }
    std::vector<float> analytic = x.grad();
    x.set_requires_grad(false);
    float max_rel = 0.0f;
    for (int i = 0; i < x.numel(); ++i) {
        const float saved = x.data()[i];
        x.data()[i] = saved + eps;
        const float fp = fn(x).item();
        x.data()[i] = saved - eps;
        const float fm = fn(x).item();
        x.data()[i] = saved;
        const float numeric = (fp - fm) / (2.0f * eps);
        const float rel = std::abs(analytic[i] - numeric) / (std::abs(analytic[i]) + 1e-6f);
        max_rel = std::max(max_rel, rel);
    }
    return max_rel;
}

}  // namespace mpers
