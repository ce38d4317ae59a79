#pragma once

// Tape-based reverse-mode differentiation over dense row-major double tensors.
//
// Ops record onto the innermost live Tape when at least one input requires a
// gradient. Without a Tape (inference), ops only compute values.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "aben/errors.hpp"

namespace aben::ag {

using Shape = std::vector<int>;

inline std::size_t numel(const Shape& s) {
    std::size_t n = 1;
    for (int d : s) n *= static_cast<std::size_t>(d);
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;
    std::function<void()> backward;

    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    }
    std::size_t size() const { return value.size(); }
    int dim(std::size_t i) const { return shape.at(i); }
};

using Var = std::shared_ptr<Node>;

class Tape {
  public:
    Tape() : prev_(current()) { current() = this; }
    ~Tape() { current() = prev_; }
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* active() { return current(); }

    void record(Var v) { nodes_.push_back(std::move(v)); }

    // Seeds d(root)/d(root) = 1 and propagates to every leaf that requires grad.
    void backward(const Var& root) {
        if (root->size() != 1) throw ShapeError("backward root must be a scalar");
        root->ensure_grad();
        root->grad[0] += 1.0;
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            Node& n = **it;
            if (n.backward && !n.grad.empty()) n.backward();
        }
        for (auto& n : nodes_) n->backward = nullptr;
        nodes_.clear();
    }

    std::size_t size() const { return nodes_.size(); }

  private:
    friend class NoGrad;

    static Tape*& current() {
        thread_local Tape* tape = nullptr;
        return tape;
    }

    std::vector<Var> nodes_;
    Tape* prev_;
};

// Suspends recording inside its scope.
class NoGrad {
  public:
    NoGrad() : saved_(Tape::current()) { Tape::current() = nullptr; }
    ~NoGrad() { Tape::current() = saved_; }
    NoGrad(const NoGrad&) = delete;
    NoGrad& operator=(const NoGrad&) = delete;

  private:
    Tape* saved_;
};

inline Var constant(Shape shape, std::vector<double> values) {
    if (numel(shape) != values.size())
        throw ShapeError("constant: " + shape_str(shape) + " vs " + std::to_string(values.size()) + " values");
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    return n;
}

inline Var zeros(Shape shape) {
    std::vector<double> v(numel(shape), 0.0);
    return constant(std::move(shape), std::move(v));
}

inline Var leaf(Shape shape, std::vector<double> values) {
    auto n = constant(std::move(shape), std::move(values));
    n->requires_grad = true;
    return n;
}

namespace detail {

inline bool recording() { return Tape::active() != nullptr; }

inline Var make_result(Shape shape, std::initializer_list<const Var*> inputs) {
    auto out = std::make_shared<Node>();
    out->value.assign(numel(shape), 0.0);
    out->shape = std::move(shape);
    if (recording()) {
        for (const Var* in : inputs) {
            if ((*in)->requires_grad) {
                out->requires_grad = true;
                break;
            }
        }
    }
    return out;
}

inline Var make_result(Shape shape, const std::vector<Var>& inputs) {
    auto out = std::make_shared<Node>();
    out->value.assign(numel(shape), 0.0);
    out->shape = std::move(shape);
    if (recording()) {
        for (const auto& in : inputs) {
            if (in->requires_grad) {
                out->requires_grad = true;
                break;
            }
        }
    }
    return out;
}

inline void finish(const Var& out, std::function<void()> fn) {
    if (!out->requires_grad) return;
    out->backward = std::move(fn);
    Tape::active()->record(out);
}

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

inline void require_rank(const Var& v, std::size_t r, const char* op) {
    if (v->shape.size() != r)
        throw ShapeError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " + shape_str(v->shape));
}

} // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

inline Var add(const Var& a, const Var& b) {
    if (a->shape != b->shape) throw ShapeError("add: " + shape_str(a->shape) + " vs " + shape_str(b->shape));
    auto out = detail::make_result(a->shape, {&a, &b});
    for (std::size_t i = 0; i < out->size(); ++i) out->value[i] = a->value[i] + b->value[i];
    Node* o = out.get();
    detail::finish(out, [a, b, o] {
        for (const Var* in : {&a, &b}) {
            if (!(*in)->requires_grad) continue;
            (*in)->ensure_grad();
            for (std::size_t i = 0; i < o->size(); ++i) (*in)->grad[i] += o->grad[i];
        }
    });
    return out;
}

inline Var mul(const Var& a, const Var& b) {
    if (a->shape != b->shape) throw ShapeError("mul: " + shape_str(a->shape) + " vs " + shape_str(b->shape));
    auto out = detail::make_result(a->shape, {&a, &b});
    for (std::size_t i = 0; i < out->size(); ++i) out->value[i] = a->value[i] * b->value[i];
    Node* o = out.get();
    detail::finish(out, [a, b, o] {
        if (a->requires_grad) {
            a->ensure_grad();
            for (std::size_t i = 0; i < o->size(); ++i) a->grad[i] += o->grad[i] * b->value[i];
        }
        if (b->requires_grad) {
            b->ensure_grad();
            for (std::size_t i = 0; i < o->size(); ++i) b->grad[i] += o->grad[i] * a->value[i];
        }
    });
    return out;
}

inline Var relu(const Var& x) {
    auto out = detail::make_result(x->shape, {&x});
    for (std::size_t i = 0; i < out->size(); ++i) out->value[i] = x->value[i] > 0.0 ? x->value[i] : 0.0;
    Node* o = out.get();
    detail::finish(out, [x, o] {
        x->ensure_grad();
        for (std::size_t i = 0; i < o->size(); ++i)
            if (x->value[i] > 0.0) x->grad[i] += o->grad[i];
    });
    return out;
}

inline double sigmoid_scalar(double v) { return 1.0 / (1.0 + std::exp(-v)); }

inline Var sigmoid(const Var& x) {
    auto out = detail::make_result(x->shape, {&x});
    for (std::size_t i = 0; i < out->size(); ++i) out->value[i] = sigmoid_scalar(x->value[i]);
    Node* o = out.get();
    detail::finish(out, [x, o] {
        x->ensure_grad();
        for (std::size_t i = 0; i < o->size(); ++i) {
            const double s = o->value[i];
            x->grad[i] += o->grad[i] * s * (1.0 - s);
        }
    });
    return out;
}

inline Var tanh(const Var& x) {
    auto out = detail::make_result(x->shape, {&x});
    for (std::size_t i = 0; i < out->size(); ++i) out->value[i] = std::tanh(x->value[i]);
    Node* o = out.get();
    detail::finish(out, [x, o] {
        x->ensure_grad();
        for (std::size_t i = 0; i < o->size(); ++i) {
            const double t = o->value[i];
            x->grad[i] += o->grad[i] * (1.0 - t * t);
        }
    });
    return out;
}

// Sum of scalar nodes, accumulated left to right.
inline Var sum_scalars(const std::vector<Var>& xs) {
    for (const auto& x : xs)
        if (x->size() != 1) throw ShapeError("sum_scalars: non-scalar input");
    auto out = detail::make_result({1}, xs);
    double acc = 0.0;
    for (const auto& x : xs) acc += x->value[0];
    out->value[0] = acc;
    Node* o = out.get();
    detail::finish(out, [xs, o] {
        for (const auto& x : xs) {
            if (!x->requires_grad) continue;
            x->ensure_grad();
            x->grad[0] += o->grad[0];
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// Dense layers

// x [B, in], w [out, in], b [out] -> [B, out]
inline Var linear(const Var& x, const Var& w, const Var& b) {
    detail::require_rank(x, 2, "linear");
    detail::require_rank(w, 2, "linear weight");
    const int batch = x->dim(0), in = x->dim(1), outd = w->dim(0);
    if (w->dim(1) != in || b->size() != static_cast<std::size_t>(outd))
        throw ShapeError("linear: input " + shape_str(x->shape) + " weight " + shape_str(w->shape));
    auto out = detail::make_result({batch, outd}, {&x, &w, &b});
    detail::CMapMat X(x->value.data(), batch, in);
    detail::CMapMat W(w->value.data(), outd, in);
    detail::MapMat Y(out->value.data(), batch, outd);
    Y.noalias() = X * W.transpose();
    for (int r = 0; r < batch; ++r)
        for (int c = 0; c < outd; ++c) Y(r, c) += b->value[c];
    Node* o = out.get();
    detail::finish(out, [x, w, b, o, batch, in, outd] {
        detail::CMapMat dY(o->grad.data(), batch, outd);
        if (x->requires_grad) {
            x->ensure_grad();
            detail::MapMat dX(x->grad.data(), batch, in);
            dX.noalias() += dY * detail::CMapMat(w->value.data(), outd, in);
        }
        if (w->requires_grad) {
            w->ensure_grad();
            detail::MapMat dW(w->grad.data(), outd, in);
            dW.noalias() += dY.transpose() * detail::CMapMat(x->value.data(), batch, in);
        }
        if (b->requires_grad) {
            b->ensure_grad();
            for (int r = 0; r < batch; ++r)
                for (int c = 0; c < outd; ++c) b->grad[c] += dY(r, c);
        }
    });
    return out;
}

// Concatenation along axis 1 for tensors that agree on every other axis.
inline Var concat1(const std::vector<Var>& xs) {
    if (xs.empty()) throw ShapeError("concat1: no inputs");
    const Shape& ref = xs.front()->shape;
    if (ref.size() < 2) throw ShapeError("concat1: rank < 2");
    const int batch = ref[0];
    std::size_t inner = 1;
    for (std::size_t i = 2; i < ref.size(); ++i) inner *= static_cast<std::size_t>(ref[i]);
    int total = 0;
    for (const auto& x : xs) {
        if (x->shape.size() != ref.size() || x->shape[0] != batch ||
            !std::equal(x->shape.begin() + 2, x->shape.end(), ref.begin() + 2))
            throw ShapeError("concat1: " + shape_str(x->shape) + " vs " + shape_str(ref));
        total += x->shape[1];
    }
    Shape shape = ref;
    shape[1] = total;
    auto out = detail::make_result(shape, xs);
    const std::size_t out_row = static_cast<std::size_t>(total) * inner;
    std::size_t offset = 0;
    for (const auto& x : xs) {
        const std::size_t row = static_cast<std::size_t>(x->shape[1]) * inner;
        for (int bi = 0; bi < batch; ++bi)
            std::copy_n(x->value.begin() + static_cast<std::ptrdiff_t>(bi * row), row,
                        out->value.begin() + static_cast<std::ptrdiff_t>(bi * out_row + offset));
        offset += row;
    }
    Node* o = out.get();
    detail::finish(out, [xs, o, batch, inner, out_row] {
        std::size_t off = 0;
        for (const auto& x : xs) {
            const std::size_t row = static_cast<std::size_t>(x->shape[1]) * inner;
            if (x->requires_grad) {
                x->ensure_grad();
                for (int bi = 0; bi < batch; ++bi)
                    for (std::size_t j = 0; j < row; ++j) x->grad[bi * row + j] += o->grad[bi * out_row + off + j];
            }
            off += row;
        }
    });
    return out;
}

// x [B, F] -> columns [start, start + len)
inline Var slice_cols(const Var& x, int start, int len) {
    detail::require_rank(x, 2, "slice_cols");
    const int batch = x->dim(0), width = x->dim(1);
    if (start < 0 || len < 0 || start + len > width) throw ShapeError("slice_cols: out of range");
    auto out = detail::make_result({batch, len}, {&x});
    for (int bi = 0; bi < batch; ++bi)
        for (int j = 0; j < len; ++j) out->value[bi * len + j] = x->value[bi * width + start + j];
    Node* o = out.get();
    detail::finish(out, [x, o, batch, width, start, len] {
        x->ensure_grad();
        for (int bi = 0; bi < batch; ++bi)
            for (int j = 0; j < len; ++j) x->grad[bi * width + start + j] += o->grad[bi * len + j];
    });
    return out;
}

// table [V, E], ids (size B) -> [B, E]
inline Var embedding(const Var& table, const std::vector<int>& ids) {
    detail::require_rank(table, 2, "embedding");
    const int vocab = table->dim(0), width = table->dim(1);
    const int batch = static_cast<int>(ids.size());
    for (int id : ids)
        if (id < 0 || id >= vocab) throw ShapeError("embedding: id " + std::to_string(id) + " out of range");
    auto out = detail::make_result({batch, width}, {&table});
    for (int bi = 0; bi < batch; ++bi)
        std::copy_n(table->value.begin() + static_cast<std::ptrdiff_t>(ids[bi]) * width, width,
                    out->value.begin() + static_cast<std::ptrdiff_t>(bi) * width);
    Node* o = out.get();
    detail::finish(out, [table, ids, o, width] {
        table->ensure_grad();
        for (std::size_t bi = 0; bi < ids.size(); ++bi)
            for (int j = 0; j < width; ++j) table->grad[ids[bi] * width + j] += o->grad[bi * width + j];
    });
    return out;
}

// ---------------------------------------------------------------------------
// Spatial ops, layout [B, C, H, W]

struct Conv2dGeometry {
    int stride_h = 1, stride_w = 1, pad_h = 0, pad_w = 0;
};

// x [B,C,H,W], w [O,C,KH,KW], b [O] -> [B,O,HO,WO]. im2col + one GEMM per call.
inline Var conv2d(const Var& x, const Var& w, const Var& b, Conv2dGeometry g) {
    detail::require_rank(x, 4, "conv2d");
    detail::require_rank(w, 4, "conv2d weight");
    const int batch = x->dim(0), ch = x->dim(1), h = x->dim(2), wd = x->dim(3);
    const int oc = w->dim(0), kh = w->dim(2), kw = w->dim(3);
    if (w->dim(1) != ch || b->size() != static_cast<std::size_t>(oc))
        throw ShapeError("conv2d: input " + shape_str(x->shape) + " weight " + shape_str(w->shape));
    const int ho = (h + 2 * g.pad_h - kh) / g.stride_h + 1;
    const int wo = (wd + 2 * g.pad_w - kw) / g.stride_w + 1;
    if (ho <= 0 || wo <= 0) throw ShapeError("conv2d: empty output for " + shape_str(x->shape));
    const int krows = ch * kh * kw;
    const int plane = ho * wo;
    const int cols = batch * plane;

    auto col = std::make_shared<std::vector<double>>(static_cast<std::size_t>(krows) * cols, 0.0);
    for (int c = 0; c < ch; ++c)
        for (int i = 0; i < kh; ++i)
            for (int j = 0; j < kw; ++j) {
                double* dst = col->data() + static_cast<std::size_t>((c * kh + i) * kw + j) * cols;
                for (int bi = 0; bi < batch; ++bi) {
                    const double* src = x->value.data() + (static_cast<std::size_t>(bi) * ch + c) * h * wd;
                    for (int y = 0; y < ho; ++y) {
                        const int iy = y * g.stride_h - g.pad_h + i;
                        if (iy < 0 || iy >= h) continue;
                        for (int xo = 0; xo < wo; ++xo) {
                            const int ix = xo * g.stride_w - g.pad_w + j;
                            if (ix < 0 || ix >= wd) continue;
                            dst[bi * plane + y * wo + xo] = src[iy * wd + ix];
                        }
                    }
                }
            }

    auto out = detail::make_result({batch, oc, ho, wo}, {&x, &w, &b});
    detail::RowMat res = detail::CMapMat(w->value.data(), oc, krows) * detail::CMapMat(col->data(), krows, cols);
    for (int bi = 0; bi < batch; ++bi)
        for (int o = 0; o < oc; ++o) {
            double* dst = out->value.data() + (static_cast<std::size_t>(bi) * oc + o) * plane;
            for (int p = 0; p < plane; ++p) dst[p] = res(o, bi * plane + p) + b->value[o];
        }

    Node* o = out.get();
    detail::finish(out, [x, w, b, o, col, g, batch, ch, h, wd, oc, kh, kw, ho, wo, krows, plane, cols] {
        detail::RowMat dres(oc, cols);
        for (int bi = 0; bi < batch; ++bi)
            for (int oi = 0; oi < oc; ++oi) {
                const double* src = o->grad.data() + (static_cast<std::size_t>(bi) * oc + oi) * plane;
                for (int p = 0; p < plane; ++p) dres(oi, bi * plane + p) = src[p];
            }
        if (b->requires_grad) {
            b->ensure_grad();
            for (int oi = 0; oi < oc; ++oi) b->grad[oi] += dres.row(oi).sum();
        }
        if (w->requires_grad) {
            w->ensure_grad();
            detail::MapMat dW(w->grad.data(), oc, krows);
            dW.noalias() += dres * detail::CMapMat(col->data(), krows, cols).transpose();
        }
        if (x->requires_grad) {
            x->ensure_grad();
            detail::RowMat dcol = detail::CMapMat(w->value.data(), oc, krows).transpose() * dres;
            for (int c = 0; c < ch; ++c)
                for (int i = 0; i < kh; ++i)
                    for (int j = 0; j < kw; ++j) {
                        const double* src = dcol.data() + static_cast<std::size_t>((c * kh + i) * kw + j) * cols;
                        for (int bi = 0; bi < batch; ++bi) {
                            double* dst = x->grad.data() + (static_cast<std::size_t>(bi) * ch + c) * h * wd;
                            for (int y = 0; y < ho; ++y) {
                                const int iy = y * g.stride_h - g.pad_h + i;
                                if (iy < 0 || iy >= h) continue;
                                for (int xo = 0; xo < wo; ++xo) {
                                    const int ix = xo * g.stride_w - g.pad_w + j;
                                    if (ix < 0 || ix >= wd) continue;
                                    dst[iy * wd + ix] += src[bi * plane + y * wo + xo];
                                }
                            }
                        }
                    }
        }
    });
    return out;
}

// 2x2 average pooling, stride 2. Partial windows on odd edges average only
// the cells they cover (ceil mode), so a 7x7 map becomes 4x4.
inline Var avg_pool2x2(const Var& x) {
    detail::require_rank(x, 4, "avg_pool2x2");
    const int batch = x->dim(0), ch = x->dim(1), h = x->dim(2), wd = x->dim(3);
    const int ho = (h + 1) / 2, wo = (wd + 1) / 2;
    auto out = detail::make_result({batch, ch, ho, wo}, {&x});
    auto window = [h, wd](int y, int xo, auto&& fn) {
        int count = 0;
        for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx)
                if (2 * y + dy < h && 2 * xo + dx < wd) ++count;
        for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx)
                if (2 * y + dy < h && 2 * xo + dx < wd) fn((2 * y + dy) * wd + 2 * xo + dx, 1.0 / count);
    };
    for (int p = 0; p < batch * ch; ++p) {
        const double* src = x->value.data() + static_cast<std::size_t>(p) * h * wd;
        double* dst = out->value.data() + static_cast<std::size_t>(p) * ho * wo;
        for (int y = 0; y < ho; ++y)
            for (int xo = 0; xo < wo; ++xo) {
                double acc = 0.0;
                window(y, xo, [&](int idx, double wgt) { acc += src[idx] * wgt; });
                dst[y * wo + xo] = acc;
            }
    }
    Node* o = out.get();
    detail::finish(out, [x, o, batch, ch, h, wd, ho, wo, window] {
        x->ensure_grad();
        for (int p = 0; p < batch * ch; ++p) {
            double* dst = x->grad.data() + static_cast<std::size_t>(p) * h * wd;
            const double* src = o->grad.data() + static_cast<std::size_t>(p) * ho * wo;
            for (int y = 0; y < ho; ++y)
                for (int xo = 0; xo < wo; ++xo)
                    window(y, xo, [&](int idx, double wgt) { dst[idx] += src[y * wo + xo] * wgt; });
        }
    });
    return out;
}

// [B,C,H,W] -> [B,C], spatial mean per channel.
inline Var global_avg_pool(const Var& x) {
    detail::require_rank(x, 4, "global_avg_pool");
    const int batch = x->dim(0), ch = x->dim(1);
    const int plane = x->dim(2) * x->dim(3);
    auto out = detail::make_result({batch, ch}, {&x});
    for (int p = 0; p < batch * ch; ++p) {
        const double* src = x->value.data() + static_cast<std::size_t>(p) * plane;
        double acc = 0.0;
        for (int i = 0; i < plane; ++i) acc += src[i];
        out->value[p] = acc / plane;
    }
    Node* o = out.get();
    detail::finish(out, [x, o, batch, ch, plane] {
        x->ensure_grad();
        for (int p = 0; p < batch * ch; ++p) {
            const double g = o->grad[p] / plane;
            double* dst = x->grad.data() + static_cast<std::size_t>(p) * plane;
            for (int i = 0; i < plane; ++i) dst[i] += g;
        }
    });
    return out;
}

// [B,P] -> [B,P,H,W], each vector copied to every spatial cell.
inline Var broadcast_spatial(const Var& x, int h, int w) {
    detail::require_rank(x, 2, "broadcast_spatial");
    const int batch = x->dim(0), ch = x->dim(1), plane = h * w;
    auto out = detail::make_result({batch, ch, h, w}, {&x});
    for (int p = 0; p < batch * ch; ++p)
        std::fill_n(out->value.begin() + static_cast<std::ptrdiff_t>(p) * plane, plane, x->value[p]);
    Node* o = out.get();
    detail::finish(out, [x, o, batch, ch, plane] {
        x->ensure_grad();
        for (int p = 0; p < batch * ch; ++p) {
            const double* src = o->grad.data() + static_cast<std::size_t>(p) * plane;
            double acc = 0.0;
            for (int i = 0; i < plane; ++i) acc += src[i];
            x->grad[p] += acc;
        }
    });
    return out;
}

// features [B,C,H,W], mask [B,1,H,W] -> (1 + mask) * features, mask shared by all channels.
inline Var residual_mask(const Var& features, const Var& mask) {
    detail::require_rank(features, 4, "residual_mask");
    detail::require_rank(mask, 4, "residual_mask mask");
    const int batch = features->dim(0), ch = features->dim(1);
    const int plane = features->dim(2) * features->dim(3);
    if (mask->dim(0) != batch || mask->dim(1) != 1 || mask->dim(2) != features->dim(2) ||
        mask->dim(3) != features->dim(3))
        throw ShapeError("residual_mask: features " + shape_str(features->shape) + " mask " +
                         shape_str(mask->shape));
    auto out = detail::make_result(features->shape, {&features, &mask});
    for (int bi = 0; bi < batch; ++bi)
        for (int c = 0; c < ch; ++c)
            for (int i = 0; i < plane; ++i) {
                const std::size_t fi = (static_cast<std::size_t>(bi) * ch + c) * plane + i;
                out->value[fi] = (1.0 + mask->value[bi * plane + i]) * features->value[fi];
            }
    Node* o = out.get();
    detail::finish(out, [features, mask, o, batch, ch, plane] {
        if (features->requires_grad) features->ensure_grad();
        if (mask->requires_grad) mask->ensure_grad();
        for (int bi = 0; bi < batch; ++bi)
            for (int c = 0; c < ch; ++c)
                for (int i = 0; i < plane; ++i) {
                    const std::size_t fi = (static_cast<std::size_t>(bi) * ch + c) * plane + i;
                    if (features->requires_grad)
                        features->grad[fi] += o->grad[fi] * (1.0 + mask->value[bi * plane + i]);
                    if (mask->requires_grad) mask->grad[bi * plane + i] += o->grad[fi] * features->value[fi];
                }
    });
    return out;
}

// N vectors [B,D] -> [B,D,1,N]: features become channels, slots the width axis.
inline Var stack_slots(const std::vector<Var>& slots) {
    if (slots.empty()) throw ShapeError("stack_slots: no slots");
    const int batch = slots.front()->dim(0), width = slots.front()->dim(1);
    const int n = static_cast<int>(slots.size());
    for (const auto& s : slots)
        if (s->shape != Shape{batch, width}) throw ShapeError("stack_slots: " + shape_str(s->shape));
    auto out = detail::make_result({batch, width, 1, n}, slots);
    for (int j = 0; j < n; ++j)
        for (int bi = 0; bi < batch; ++bi)
            for (int c = 0; c < width; ++c) out->value[(bi * width + c) * n + j] = slots[j]->value[bi * width + c];
    Node* o = out.get();
    detail::finish(out, [slots, o, batch, width, n] {
        for (int j = 0; j < n; ++j) {
            const auto& s = slots[j];
            if (!s->requires_grad) continue;
            s->ensure_grad();
            for (int bi = 0; bi < batch; ++bi)
                for (int c = 0; c < width; ++c) s->grad[bi * width + c] += o->grad[(bi * width + c) * n + j];
        }
    });
    return out;
}

// [B,D,1,N] -> [B, N*D], slot-major: element (j, c) lands at j*D + c.
inline Var slots_to_rows(const Var& x) {
    detail::require_rank(x, 4, "slots_to_rows");
    const int batch = x->dim(0), width = x->dim(1), n = x->dim(3);
    if (x->dim(2) != 1) throw ShapeError("slots_to_rows: height must be 1");
    auto out = detail::make_result({batch, n * width}, {&x});
    for (int bi = 0; bi < batch; ++bi)
        for (int c = 0; c < width; ++c)
            for (int j = 0; j < n; ++j)
                out->value[static_cast<std::size_t>(bi) * n * width + j * width + c] = x->value[(bi * width + c) * n + j];
    Node* o = out.get();
    detail::finish(out, [x, o, batch, width, n] {
        x->ensure_grad();
        for (int bi = 0; bi < batch; ++bi)
            for (int c = 0; c < width; ++c)
                for (int j = 0; j < n; ++j)
                    x->grad[(bi * width + c) * n + j] += o->grad[static_cast<std::size_t>(bi) * n * width + j * width + c];
    });
    return out;
}

// Reinterprets [B, ...] as [B, prod(...)]; no data movement in value order.
inline Var flatten(const Var& x) {
    const int batch = x->dim(0);
    const int rest = static_cast<int>(x->size() / static_cast<std::size_t>(batch));
    auto out = detail::make_result({batch, rest}, {&x});
    out->value = x->value;
    Node* o = out.get();
    detail::finish(out, [x, o] {
        x->ensure_grad();
        for (std::size_t i = 0; i < o->size(); ++i) x->grad[i] += o->grad[i];
    });
    return out;
}

// ---------------------------------------------------------------------------
// Batch normalisation over (B, H, W) per channel.

struct BatchNormStats {
    std::vector<double> mean;
    std::vector<double> var;
};

inline Var batch_norm(const Var& x, const Var& gamma, const Var& beta, BatchNormStats& running, bool training,
                      double momentum = 0.1, double eps = 1e-5) {
    detail::require_rank(x, 4, "batch_norm");
    const int batch = x->dim(0), ch = x->dim(1), plane = x->dim(2) * x->dim(3);
    if (gamma->size() != static_cast<std::size_t>(ch) || beta->size() != static_cast<std::size_t>(ch))
        throw ShapeError("batch_norm: parameter width mismatch for " + shape_str(x->shape));
    if (running.mean.size() != static_cast<std::size_t>(ch)) {
        running.mean.assign(ch, 0.0);
        running.var.assign(ch, 1.0);
    }
    const double count = static_cast<double>(batch) * plane;
    auto mean = std::make_shared<std::vector<double>>(ch, 0.0);
    auto inv_std = std::make_shared<std::vector<double>>(ch, 0.0);
    for (int c = 0; c < ch; ++c) {
        double m, v;
        if (training) {
            double acc = 0.0;
            for (int bi = 0; bi < batch; ++bi)
                for (int i = 0; i < plane; ++i) acc += x->value[(bi * ch + c) * plane + i];
            m = acc / count;
            double sq = 0.0;
            for (int bi = 0; bi < batch; ++bi)
                for (int i = 0; i < plane; ++i) {
                    const double d = x->value[(bi * ch + c) * plane + i] - m;
                    sq += d * d;
                }
            v = sq / count;
            running.mean[c] = (1.0 - momentum) * running.mean[c] + momentum * m;
            running.var[c] = (1.0 - momentum) * running.var[c] + momentum * v;
        } else {
            m = running.mean[c];
            v = running.var[c];
        }
        (*mean)[c] = m;
        (*inv_std)[c] = 1.0 / std::sqrt(v + eps);
    }
    auto out = detail::make_result(x->shape, {&x, &gamma, &beta});
    auto xhat = std::make_shared<std::vector<double>>(x->size());
    for (int bi = 0; bi < batch; ++bi)
        for (int c = 0; c < ch; ++c)
            for (int i = 0; i < plane; ++i) {
                const std::size_t k = (static_cast<std::size_t>(bi) * ch + c) * plane + i;
                (*xhat)[k] = (x->value[k] - (*mean)[c]) * (*inv_std)[c];
                out->value[k] = gamma->value[c] * (*xhat)[k] + beta->value[c];
            }
    Node* o = out.get();
    detail::finish(out, [x, gamma, beta, o, xhat, inv_std, training, batch, ch, plane, count] {
        std::vector<double> sum_g(ch, 0.0), sum_gx(ch, 0.0);
        for (int bi = 0; bi < batch; ++bi)
            for (int c = 0; c < ch; ++c)
                for (int i = 0; i < plane; ++i) {
                    const std::size_t k = (static_cast<std::size_t>(bi) * ch + c) * plane + i;
                    sum_g[c] += o->grad[k];
                    sum_gx[c] += o->grad[k] * (*xhat)[k];
                }
        if (gamma->requires_grad) {
            gamma->ensure_grad();
            for (int c = 0; c < ch; ++c) gamma->grad[c] += sum_gx[c];
        }
        if (beta->requires_grad) {
            beta->ensure_grad();
            for (int c = 0; c < ch; ++c) beta->grad[c] += sum_g[c];
        }
        if (!x->requires_grad) return;
        x->ensure_grad();
        for (int bi = 0; bi < batch; ++bi)
            for (int c = 0; c < ch; ++c)
                for (int i = 0; i < plane; ++i) {
                    const std::size_t k = (static_cast<std::size_t>(bi) * ch + c) * plane + i;
                    const double gy = o->grad[k] * gamma->value[c];
                    if (training) {
                        const double mg = sum_g[c] * gamma->value[c] / count;
                        const double mgx = sum_gx[c] * gamma->value[c] / count;
                        x->grad[k] += (*inv_std)[c] * (gy - mg - (*xhat)[k] * mgx);
                    } else {
                        x->grad[k] += (*inv_std)[c] * gy;
                    }
                }
    });
    return out;
}

// ---------------------------------------------------------------------------
// Softmax and cross-entropy

inline std::vector<double> softmax_row(std::span<const double> logits) {
    std::vector<double> p(logits.size());
    const double mx = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        p[i] = std::exp(logits[i] - mx);
        z += p[i];
    }
    for (double& v : p) v /= z;
    return p;
}

inline constexpr double kLogEpsilon = 1e-12;

// Sum over rows of weight * -log(max(softmax(logits)[label], eps)). Label -1 skips the row.
inline Var softmax_cross_entropy(const Var& logits, const std::vector<int>& labels, double weight) {
    detail::require_rank(logits, 2, "softmax_cross_entropy");
    const int batch = logits->dim(0), classes = logits->dim(1);
    if (labels.size() != static_cast<std::size_t>(batch)) throw ShapeError("softmax_cross_entropy: label count");
    auto probs = std::make_shared<std::vector<std::vector<double>>>(batch);
    auto out = detail::make_result({1}, {&logits});
    double loss = 0.0;
    for (int bi = 0; bi < batch; ++bi) {
        if (labels[bi] < 0) continue;
        if (labels[bi] >= classes) throw ShapeError("softmax_cross_entropy: label out of range");
        (*probs)[bi] = softmax_row({logits->value.data() + static_cast<std::size_t>(bi) * classes,
                                    static_cast<std::size_t>(classes)});
        loss += weight * -std::log(std::max((*probs)[bi][labels[bi]], kLogEpsilon));
    }
    out->value[0] = loss;
    Node* o = out.get();
    detail::finish(out, [logits, labels, weight, probs, o, batch, classes] {
        logits->ensure_grad();
        const double g = o->grad[0] * weight;
        for (int bi = 0; bi < batch; ++bi) {
            if (labels[bi] < 0) continue;
            const auto& p = (*probs)[bi];
            if (p[labels[bi]] <= kLogEpsilon) continue;
            for (int c = 0; c < classes; ++c)
                logits->grad[static_cast<std::size_t>(bi) * classes + c] += g * (p[c] - (c == labels[bi] ? 1.0 : 0.0));
        }
    });
    return out;
}

} // namespace aben::ag
