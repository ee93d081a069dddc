#pragma once

// Dense row-major float64 tensors with a dynamic reverse-mode tape.
//
// Every op builds its result eagerly. When grad mode is on and at least one
// input requires a gradient, the result keeps its inputs alive as parents and
// stores a closure that pushes the result's gradient back into them. The
// graph is rebuilt on every forward pass and released with the last handle.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

#include "matchs/errors.hpp"

namespace matchs {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    std::vector<double>& grad_buffer() {
        if (grad.empty()) grad.assign(data.size(), 0.0);
        return grad;
    }
};

inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}

}  // namespace detail

// Disables graph construction on this thread for the guard's lifetime.
class NoGradGuard {
   public:
    NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
    ~NoGradGuard() { detail::grad_mode() = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

   private:
    bool previous_;
};

class Tensor {
   public:
    Tensor() = default;

    Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
        : node_(std::make_shared<detail::Node>()) {
        const std::size_t n = shape_numel(shape);
        if (data.size() != n) {
            throw DimensionError("tensor data length " + std::to_string(data.size()) +
                                 " does not match shape " + shape_str(shape));
        }
        node_->shape = std::move(shape);
        node_->data = std::move(data);
        node_->requires_grad = requires_grad;
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        const std::size_t n = shape_numel(shape);
        return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
    }

    static Tensor full(Shape shape, double value) {
        const std::size_t n = shape_numel(shape);
        return Tensor(std::move(shape), std::vector<double>(n, value));
    }

    static Tensor scalar(double value) { return Tensor({1}, {value}); }

    bool defined() const noexcept { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t numel() const { return node_->data.size(); }

    std::span<const double> data() const { return node_->data; }
    // Direct write access, for initialisation and optimiser updates only.
    std::span<double> mutable_data() { return node_->data; }
    const std::vector<double>& values() const { return node_->data; }

    double item() const {
        if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
        return node_->data[0];
    }

    bool requires_grad() const { return node_ && node_->requires_grad; }
    void set_requires_grad(bool flag) { node_->requires_grad = flag; }

    bool has_grad() const { return !node_->grad.empty(); }
    std::span<const double> grad() const { return node_->grad; }
    std::span<double> mutable_grad() { return node_->grad_buffer(); }
    void zero_grad() { node_->grad.clear(); }

    // Same values, no history, no gradient requirement.
    Tensor detach() const { return Tensor(shape(), node_->data); }

    const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }
    detail::Node& node() const { return *node_; }

   private:
    std::shared_ptr<detail::Node> node_;
};

inline Tensor parameter(Shape shape, std::vector<double> data) {
    return Tensor(std::move(shape), std::move(data), true);
}

namespace detail {

inline void check_finite(const std::vector<double>& values, std::string_view op) {
    for (double v : values) {
        if (!std::isfinite(v)) {
            throw NumericError("non-finite value produced by " + std::string(op));
        }
    }
}

// Builds an op result; records parents only when a gradient is needed.
inline Tensor make_result(Shape shape, std::vector<double> data, std::string_view op,
                          std::initializer_list<const Tensor*> inputs) {
    check_finite(data, op);
    Tensor out(std::move(shape), std::move(data));
    if (!grad_mode()) return out;
    bool needs = false;
    for (const Tensor* t : inputs) needs = needs || t->requires_grad();
    if (!needs) return out;
    Node& n = out.node();
    n.requires_grad = true;
    for (const Tensor* t : inputs) n.parents.push_back(t->node_ptr());
    return out;
}

inline bool tracks(const Tensor& t) { return t.requires_grad() && !t.node().parents.empty(); }

inline void require_rank(const Tensor& t, std::size_t r, std::string_view op) {
    if (t.rank() != r) {
        throw DimensionError(std::string(op) + ": expected rank " + std::to_string(r) + ", got shape " +
                             shape_str(t.shape()));
    }
}

inline void require_same_shape(const Tensor& a, const Tensor& b, std::string_view op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    }
}

}  // namespace detail

// Fills leaf gradients with d(loss)/d(leaf). Leaves accumulate across calls.
inline void backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1) {
        throw ContractError("backward() requires a scalar loss, got shape " +
                            (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
    }
    if (!loss.requires_grad()) return;

    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> seen;
    std::vector<std::pair<detail::Node*, std::size_t>> stack{{&loss.node(), 0}};
    seen.insert(&loss.node());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            detail::Node* p = node->parents[next++].get();
            if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    loss.node().grad_buffer()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        detail::Node* node = *it;
        if (!node->backward || node->grad.empty()) continue;
        node->backward(*node);
        node->grad.clear();
    }
}

// ---------------------------------------------------------------------------
// Elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "add");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + b.values()[i];
    Tensor r = detail::make_result(a.shape(), std::move(out), "add", {&a, &b});
    if (detail::tracks(r)) {
        r.node().backward = [pa = a.node_ptr().get(), pb = b.node_ptr().get()](detail::Node& self) {
            if (pa->requires_grad) {
                auto& g = pa->grad_buffer();
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
            }
            if (pb->requires_grad) {
                auto& g = pb->grad_buffer();
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
            }
        };
    }
    return r;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "sub");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] - b.values()[i];
    Tensor r = detail::make_result(a.shape(), std::move(out), "sub", {&a, &b});
    if (detail::tracks(r)) {
        r.node().backward = [pa = a.node_ptr().get(), pb = b.node_ptr().get()](detail::Node& self) {
            if (pa->requires_grad) {
                auto& g = pa->grad_buffer();
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
            }
            if (pb->requires_grad) {
                auto& g = pb->grad_buffer();
                for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
            }
        };
    }
    return r;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "mul");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * b.values()[i];
    Tensor r = detail::make_result(a.shape(), std::move(out), "mul", {&a, &b});
    if (detail::tracks(r)) {
        r.node().backward = [pa = a.node_ptr().get(), pb = b.node_ptr().get()](detail::Node& self) {
            if (pa->requires_grad) {
                auto& g = pa->grad_buffer();
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb->data[i];
            }
            if (pb->requires_grad) {
                auto& g = pb->grad_buffer();
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa->data[i];
            }
        };
    }
    return r;
}

inline Tensor square(const Tensor& a) {
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * a.values()[i];
    Tensor r = detail::make_result(a.shape(), std::move(out), "square", {&a});
    if (detail::tracks(r)) {
        r.node().backward = [pa = a.node_ptr().get()](detail::Node& self) {
            auto& g = pa->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += 2.0 * pa->data[i] * self.grad[i];
        };
    }
    return r;
}

inline Tensor scale(const Tensor& a, double s) {
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * s;
    Tensor r = detail::make_result(a.shape(), std::move(out), "scale", {&a});
    if (detail::tracks(r)) {
        r.node().backward = [pa = a.node_ptr().get(), s](detail::Node& self) {
            auto& g = pa->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
        };
    }
    return r;
}

namespace detail {

template <class F, class DF>
Tensor unary(const Tensor& a, std::string_view op, F f, DF df_from_xy) {
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(a.values()[i]);
    Tensor r = make_result(a.shape(), std::move(out), op, {&a});
    if (tracks(r)) {
        r.node().backward = [pa = a.node_ptr().get(), df_from_xy](Node& self) {
            auto& g = pa->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * df_from_xy(pa->data[i], self.data[i]);
        };
    }
    return r;
}

}  // namespace detail

inline Tensor sigmoid(const Tensor& a) {
    return detail::unary(
        a, "sigmoid", [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
        [](double, double y) { return y * (1.0 - y); });
}

inline Tensor tanh(const Tensor& a) {
    return detail::unary(
        a, "tanh", [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

inline Tensor relu(const Tensor& a) {
    return detail::unary(
        a, "relu", [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

// tanh approximation of GELU; smooth, which keeps finite-difference checks clean.
inline Tensor gelu(const Tensor& a) {
    constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
    return detail::unary(
        a, "gelu",
        [](double x) { return 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x))); },
        [](double x, double) {
            const double u = c * (x + 0.044715 * x * x * x);
            const double t = std::tanh(u);
            return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * 0.044715 * x * x);
        });
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (double v : a.values()) s += v;
    Tensor r = detail::make_result({1}, {s}, "sum", {&a});
    if (detail::tracks(r)) {
        r.node().backward = [pa = a.node_ptr().get()](detail::Node& self) {
            auto& g = pa->grad_buffer();
            for (double& gi : g) gi += self.grad[0];
        };
    }
    return r;
}

inline Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

// ---------------------------------------------------------------------------
// Shape manipulation

inline Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.numel()) {
        throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    }
    Tensor r = detail::make_result(std::move(shape), a.values(), "reshape", {&a});
    if (detail::tracks(r)) {
        r.node().backward = [pa = a.node_ptr().get()](detail::Node& self) {
            auto& g = pa->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        };
    }
    return r;
}

inline Tensor transpose(const Tensor& a) {
    detail::require_rank(a, 2, "transpose");
    const std::size_t m = a.dim(0), n = a.dim(1);
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a.values()[i * n + j];
    Tensor r = detail::make_result({n, m}, std::move(out), "transpose", {&a});
    if (detail::tracks(r)) {
        r.node().backward = [pa = a.node_ptr().get(), m, n](detail::Node& self) {
            auto& g = pa->grad_buffer();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[j * m + i];
        };
    }
    return r;
}

// Columns [begin, end) of a 2-D tensor.
inline Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end) {
    detail::require_rank(a, 2, "slice_cols");
    const std::size_t rows = a.dim(0), cols = a.dim(1);
    if (begin > end || end > cols) {
        throw DimensionError("slice_cols: range [" + std::to_string(begin) + "," + std::to_string(end) +
                             ") outside " + shape_str(a.shape()));
    }
    const std::size_t w = end - begin;
    std::vector<double> out(rows * w);
    for (std::size_t i = 0; i < rows; ++i)
        std::copy_n(a.values().begin() + static_cast<std::ptrdiff_t>(i * cols + begin), w,
                    out.begin() + static_cast<std::ptrdiff_t>(i * w));
    Tensor r = detail::make_result({rows, w}, std::move(out), "slice_cols", {&a});
    if (detail::tracks(r)) {
        r.node().backward = [pa = a.node_ptr().get(), rows, cols, begin, w](detail::Node& self) {
            auto& g = pa->grad_buffer();
            for (std::size_t i = 0; i < rows; ++i)
                for (std::size_t j = 0; j < w; ++j) g[i * cols + begin + j] += self.grad[i * w + j];
        };
    }
    return r;
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ContractError("concat_cols: no inputs");
    const std::size_t rows = parts.front().dim(0);
    std::size_t cols = 0;
    for (const auto& p : parts) {
        detail::require_rank(p, 2, "concat_cols");
        if (p.dim(0) != rows) {
            throw DimensionError("concat_cols: row mismatch " + shape_str(parts.front().shape()) + " vs " +
                                 shape_str(p.shape()));
        }
        cols += p.dim(1);
    }
    std::vector<double> out(rows * cols);
    std::size_t offset = 0;
    for (const auto& p : parts) {
        const std::size_t w = p.dim(1);
        for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < w; ++j) out[i * cols + offset + j] = p.values()[i * w + j];
        offset += w;
    }
    Tensor r(Shape{rows, cols}, std::move(out));
    if (!detail::grad_mode()) return r;
    bool needs = std::any_of(parts.begin(), parts.end(), [](const Tensor& t) { return t.requires_grad(); });
    if (!needs) return r;
    r.node().requires_grad = true;
    std::vector<detail::Node*> raw;
    for (const auto& p : parts) {
        r.node().parents.push_back(p.node_ptr());
        raw.push_back(p.node_ptr().get());
    }
    r.node().backward = [raw, rows, cols](detail::Node& self) {
        std::size_t offset = 0;
        for (detail::Node* p : raw) {
            const std::size_t w = p->shape[1];
            if (p->requires_grad) {
                auto& g = p->grad_buffer();
                for (std::size_t i = 0; i < rows; ++i)
                    for (std::size_t j = 0; j < w; ++j) g[i * w + j] += self.grad[i * cols + offset + j];
            }
            offset += w;
        }
    };
    return r;
}

// ---------------------------------------------------------------------------
// Linear algebra

namespace detail {

// c[m x n] += a[m x k] * b[k x n]
inline void gemm_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        double* ci = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = a[i * k + p];
            if (aip == 0.0) continue;
            const double* bp = b + p * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
        }
    }
}

}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    }
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<double> out(m * n, 0.0);
    detail::gemm_acc(a.values().data(), b.values().data(), out.data(), m, k, n);
    Tensor r = detail::make_result({m, n}, std::move(out), "matmul", {&a, &b});
    if (detail::tracks(r)) {
        r.node().backward = [pa = a.node_ptr().get(), pb = b.node_ptr().get(), m, k, n](detail::Node& self) {
            const double* g = self.grad.data();
            if (pa->requires_grad) {
                // dA = G * B^T
                auto& ga = pa->grad_buffer();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t p = 0; p < k; ++p) {
                        const double* bp = pb->data.data() + p * n;
                        const double* gi = g + i * n;
                        double s = 0.0;
                        for (std::size_t j = 0; j < n; ++j) s += gi[j] * bp[j];
                        ga[i * k + p] += s;
                    }
            }
            if (pb->requires_grad) {
                // dB = A^T * G
                auto& gb = pb->grad_buffer();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t p = 0; p < k; ++p) {
                        const double aip = pa->data[i * k + p];
                        if (aip == 0.0) continue;
                        double* gbp = gb.data() + p * n;
                        const double* gi = g + i * n;
                        for (std::size_t j = 0; j < n; ++j) gbp[j] += aip * gi[j];
                    }
            }
        };
    }
    return r;
}

// x[R x C] + bias[C] broadcast over rows.
inline Tensor add_row_bias(const Tensor& x, const Tensor& bias) {
    detail::require_rank(x, 2, "add_row_bias");
    const std::size_t rows = x.dim(0), cols = x.dim(1);
    if (bias.numel() != cols) {
        throw DimensionError("add_row_bias: bias " + shape_str(bias.shape()) + " vs input " + shape_str(x.shape()));
    }
    std::vector<double> out(x.values());
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) out[i * cols + j] += bias.values()[j];
    Tensor r = detail::make_result(x.shape(), std::move(out), "add_row_bias", {&x, &bias});
    if (detail::tracks(r)) {
        r.node().backward = [px = x.node_ptr().get(), pb = bias.node_ptr().get(), rows, cols](detail::Node& self) {
            if (px->requires_grad) {
                auto& g = px->grad_buffer();
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
            }
            if (pb->requires_grad) {
                auto& g = pb->grad_buffer();
                for (std::size_t i = 0; i < rows; ++i)
                    for (std::size_t j = 0; j < cols; ++j) g[j] += self.grad[i * cols + j];
            }
        };
    }
    return r;
}

// x[N x C x T] + bias[C] broadcast over N and T.
inline Tensor add_channel_bias(const Tensor& x, const Tensor& bias) {
    detail::require_rank(x, 3, "add_channel_bias");
    const std::size_t n = x.dim(0), c = x.dim(1), t = x.dim(2);
    if (bias.numel() != c) {
        throw DimensionError("add_channel_bias: bias " + shape_str(bias.shape()) + " vs input " +
                             shape_str(x.shape()));
    }
    std::vector<double> out(x.values());
    for (std::size_t s = 0; s < n; ++s)
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t k = 0; k < t; ++k) out[(s * c + ch) * t + k] += bias.values()[ch];
    Tensor r = detail::make_result(x.shape(), std::move(out), "add_channel_bias", {&x, &bias});
    if (detail::tracks(r)) {
        r.node().backward = [px = x.node_ptr().get(), pb = bias.node_ptr().get(), n, c, t](detail::Node& self) {
            if (px->requires_grad) {
                auto& g = px->grad_buffer();
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
            }
            if (pb->requires_grad) {
                auto& g = pb->grad_buffer();
                for (std::size_t s = 0; s < n; ++s)
                    for (std::size_t ch = 0; ch < c; ++ch)
                        for (std::size_t k = 0; k < t; ++k) g[ch] += self.grad[(s * c + ch) * t + k];
            }
        };
    }
    return r;
}

// ---------------------------------------------------------------------------
// Softmax family

inline Tensor softmax_rows(const Tensor& x) {
    detail::require_rank(x, 2, "softmax_rows");
    const std::size_t rows = x.dim(0), cols = x.dim(1);
    std::vector<double> out(rows * cols);
    for (std::size_t i = 0; i < rows; ++i) {
        const double* xi = x.values().data() + i * cols;
        double* yi = out.data() + i * cols;
        const double m = *std::max_element(xi, xi + cols);
        double z = 0.0;
        for (std::size_t j = 0; j < cols; ++j) {
            yi[j] = std::exp(xi[j] - m);
            z += yi[j];
        }
        for (std::size_t j = 0; j < cols; ++j) yi[j] /= z;
    }
    Tensor r = detail::make_result(x.shape(), std::move(out), "softmax_rows", {&x});
    if (detail::tracks(r)) {
        r.node().backward = [px = x.node_ptr().get(), rows, cols](detail::Node& self) {
            auto& g = px->grad_buffer();
            for (std::size_t i = 0; i < rows; ++i) {
                const double* y = self.data.data() + i * cols;
                const double* gy = self.grad.data() + i * cols;
                double dot = 0.0;
                for (std::size_t j = 0; j < cols; ++j) dot += y[j] * gy[j];
                for (std::size_t j = 0; j < cols; ++j) g[i * cols + j] += y[j] * (gy[j] - dot);
            }
        };
    }
    return r;
}

// Softmax restricted to entries with mask != 0; masked entries get exactly
// zero weight. `mask` is row-major with the same extents as `x`.
inline Tensor masked_softmax_rows(const Tensor& x, std::span<const std::uint8_t> mask) {
    detail::require_rank(x, 2, "masked_softmax_rows");
    const std::size_t rows = x.dim(0), cols = x.dim(1);
    if (mask.size() != rows * cols) {
        throw DimensionError("masked_softmax_rows: mask has " + std::to_string(mask.size()) +
                             " entries for input " + shape_str(x.shape()));
    }
    std::vector<double> out(rows * cols, 0.0);
    for (std::size_t i = 0; i < rows; ++i) {
        const double* xi = x.values().data() + i * cols;
        const std::uint8_t* mi = mask.data() + i * cols;
        double* yi = out.data() + i * cols;
        double m = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < cols; ++j)
            if (mi[j]) m = std::max(m, xi[j]);
        if (m == -std::numeric_limits<double>::infinity()) {
            throw ContractError("masked_softmax_rows: row " + std::to_string(i) + " has no admissible entry");
        }
        double z = 0.0;
        for (std::size_t j = 0; j < cols; ++j) {
            if (!mi[j]) continue;
            yi[j] = std::exp(xi[j] - m);
            z += yi[j];
        }
        for (std::size_t j = 0; j < cols; ++j) yi[j] /= z;
    }
    Tensor r = detail::make_result(x.shape(), std::move(out), "masked_softmax_rows", {&x});
    if (detail::tracks(r)) {
        r.node().backward = [px = x.node_ptr().get(), rows, cols](detail::Node& self) {
            auto& g = px->grad_buffer();
            for (std::size_t i = 0; i < rows; ++i) {
                const double* y = self.data.data() + i * cols;
                const double* gy = self.grad.data() + i * cols;
                double dot = 0.0;
                for (std::size_t j = 0; j < cols; ++j) dot += y[j] * gy[j];
                for (std::size_t j = 0; j < cols; ++j) g[i * cols + j] += y[j] * (gy[j] - dot);
            }
        };
    }
    return r;
}

// ---------------------------------------------------------------------------
// Normalisation and temporal kernels

// Per-row layer norm over the last axis of a 2-D tensor.
inline Tensor layer_norm_rows(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5) {
    detail::require_rank(x, 2, "layer_norm_rows");
    const std::size_t rows = x.dim(0), cols = x.dim(1);
    if (gamma.numel() != cols || beta.numel() != cols) {
        throw DimensionError("layer_norm_rows: affine params " + shape_str(gamma.shape()) + "/" +
                             shape_str(beta.shape()) + " vs input " + shape_str(x.shape()));
    }
    std::vector<double> out(rows * cols);
    std::vector<double> xhat(rows * cols);
    std::vector<double> inv_std(rows);
    for (std::size_t i = 0; i < rows; ++i) {
        const double* xi = x.values().data() + i * cols;
        double mu = 0.0;
        for (std::size_t j = 0; j < cols; ++j) mu += xi[j];
        mu /= static_cast<double>(cols);
        double var = 0.0;
        for (std::size_t j = 0; j < cols; ++j) var += (xi[j] - mu) * (xi[j] - mu);
        var /= static_cast<double>(cols);
        inv_std[i] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < cols; ++j) {
            xhat[i * cols + j] = (xi[j] - mu) * inv_std[i];
            out[i * cols + j] = xhat[i * cols + j] * gamma.values()[j] + beta.values()[j];
        }
    }
    Tensor r = detail::make_result(x.shape(), std::move(out), "layer_norm_rows", {&x, &gamma, &beta});
    if (detail::tracks(r)) {
        r.node().backward = [px = x.node_ptr().get(), pg = gamma.node_ptr().get(), pbeta = beta.node_ptr().get(),
                             xhat = std::move(xhat), inv_std = std::move(inv_std), rows, cols](detail::Node& self) {
            const double* g = self.grad.data();
            if (pg->requires_grad) {
                auto& gg = pg->grad_buffer();
                for (std::size_t i = 0; i < rows; ++i)
                    for (std::size_t j = 0; j < cols; ++j) gg[j] += g[i * cols + j] * xhat[i * cols + j];
            }
            if (pbeta->requires_grad) {
                auto& gb = pbeta->grad_buffer();
                for (std::size_t i = 0; i < rows; ++i)
                    for (std::size_t j = 0; j < cols; ++j) gb[j] += g[i * cols + j];
            }
            if (px->requires_grad) {
                auto& gx = px->grad_buffer();
                const double inv_n = 1.0 / static_cast<double>(cols);
                for (std::size_t i = 0; i < rows; ++i) {
                    double m1 = 0.0, m2 = 0.0;
                    for (std::size_t j = 0; j < cols; ++j) {
                        const double dxh = g[i * cols + j] * pg->data[j];
                        m1 += dxh;
                        m2 += dxh * xhat[i * cols + j];
                    }
                    m1 *= inv_n;
                    m2 *= inv_n;
                    for (std::size_t j = 0; j < cols; ++j) {
                        const double dxh = g[i * cols + j] * pg->data[j];
                        gx[i * cols + j] += inv_std[i] * (dxh - m1 - xhat[i * cols + j] * m2);
                    }
                }
            }
        };
    }
    return r;
}

// Causal dilated 1-D convolution.
//   x: [N x C_in x T], weight: [C_out x C_in x W], bias: [C_out]
//   y[n,o,t] = bias[o] + sum_{c,j} weight[o,c,j] * x[n,c,t - (W-1-j)*dilation]
// Positions before the start of the series read as zero (left padding), so
// y[..., t] depends only on x[..., <= t].
inline Tensor conv1d_causal(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t dilation) {
    detail::require_rank(x, 3, "conv1d_causal");
    detail::require_rank(weight, 3, "conv1d_causal");
    const std::size_t n = x.dim(0), cin = x.dim(1), len = x.dim(2);
    const std::size_t cout = weight.dim(0), width = weight.dim(2);
    if (weight.dim(1) != cin || bias.numel() != cout) {
        throw DimensionError("conv1d_causal: input " + shape_str(x.shape()) + ", weight " +
                             shape_str(weight.shape()) + ", bias " + shape_str(bias.shape()));
    }
    if (dilation == 0) throw ContractError("conv1d_causal: dilation must be >= 1");
    const double* xd = x.values().data();
    const double* wd = weight.values().data();
    std::vector<double> out(n * cout * len);
    for (std::size_t s = 0; s < n; ++s)
        for (std::size_t o = 0; o < cout; ++o) {
            double* y = out.data() + (s * cout + o) * len;
            std::fill(y, y + len, bias.values()[o]);
            for (std::size_t c = 0; c < cin; ++c) {
                const double* xc = xd + (s * cin + c) * len;
                for (std::size_t j = 0; j < width; ++j) {
                    const double w = wd[(o * cin + c) * width + j];
                    const std::size_t shift = (width - 1 - j) * dilation;
                    for (std::size_t t = shift; t < len; ++t) y[t] += w * xc[t - shift];
                }
            }
        }
    Tensor r = detail::make_result({n, cout, len}, std::move(out), "conv1d_causal", {&x, &weight, &bias});
    if (detail::tracks(r)) {
        r.node().backward = [px = x.node_ptr().get(), pw = weight.node_ptr().get(), pb = bias.node_ptr().get(), n,
                             cin, cout, len, width, dilation](detail::Node& self) {
            const double* g = self.grad.data();
            if (pb->requires_grad) {
                auto& gb = pb->grad_buffer();
                for (std::size_t s = 0; s < n; ++s)
                    for (std::size_t o = 0; o < cout; ++o) {
                        const double* go = g + (s * cout + o) * len;
                        for (std::size_t t = 0; t < len; ++t) gb[o] += go[t];
                    }
            }
            if (pw->requires_grad) {
                auto& gw = pw->grad_buffer();
                for (std::size_t s = 0; s < n; ++s)
                    for (std::size_t o = 0; o < cout; ++o) {
                        const double* go = g + (s * cout + o) * len;
                        for (std::size_t c = 0; c < cin; ++c) {
                            const double* xc = px->data.data() + (s * cin + c) * len;
                            for (std::size_t j = 0; j < width; ++j) {
                                const std::size_t shift = (width - 1 - j) * dilation;
                                double acc = 0.0;
                                for (std::size_t t = shift; t < len; ++t) acc += go[t] * xc[t - shift];
                                gw[(o * cin + c) * width + j] += acc;
                            }
                        }
                    }
            }
            if (px->requires_grad) {
                auto& gx = px->grad_buffer();
                for (std::size_t s = 0; s < n; ++s)
                    for (std::size_t o = 0; o < cout; ++o) {
                        const double* go = g + (s * cout + o) * len;
                        for (std::size_t c = 0; c < cin; ++c) {
                            double* gxc = gx.data() + (s * cin + c) * len;
                            for (std::size_t j = 0; j < width; ++j) {
                                const double w = pw->data[(o * cin + c) * width + j];
                                const std::size_t shift = (width - 1 - j) * dilation;
                                for (std::size_t t = shift; t < len; ++t) gxc[t - shift] += w * go[t];
                            }
                        }
                    }
            }
        };
    }
    return r;
}

// Running mean along the time axis of [N x C x T]: y[..., t] = mean(x[..., 0..t]).
inline Tensor cumulative_mean_time(const Tensor& x) {
    detail::require_rank(x, 3, "cumulative_mean_time");
    const std::size_t rows = x.dim(0) * x.dim(1), len = x.dim(2);
    std::vector<double> out(x.numel());
    for (std::size_t r = 0; r < rows; ++r) {
        double acc = 0.0;
        for (std::size_t t = 0; t < len; ++t) {
            acc += x.values()[r * len + t];
            out[r * len + t] = acc / static_cast<double>(t + 1);
        }
    }
    Tensor r = detail::make_result(x.shape(), std::move(out), "cumulative_mean_time", {&x});
    if (detail::tracks(r)) {
        r.node().backward = [px = x.node_ptr().get(), rows, len](detail::Node& self) {
            auto& g = px->grad_buffer();
            for (std::size_t row = 0; row < rows; ++row) {
                double acc = 0.0;
                for (std::size_t t = len; t-- > 0;) {
                    acc += self.grad[row * len + t] / static_cast<double>(t + 1);
                    g[row * len + t] += acc;
                }
            }
        };
    }
    return r;
}

}  // namespace matchs
