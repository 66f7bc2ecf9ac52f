#include "mmrank/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "mmrank/errors.hpp"
#include "mmrank/kernels.hpp"

namespace mmrank::ad {

namespace {

thread_local Tape* g_active_tape = nullptr;

void accumulate(Node& parent, const double* g, size_t n) {
    parent.ensure_grad();
    kern::axpy(parent.grad.data(), 1.0, g, n);
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(op) + ": shapes " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
}

void check_finite(std::span<const double> v, const char* op) {
    for (double x : v)
        if (!std::isfinite(x)) throw NumericError(std::string(op) + ": non-finite input");
}

}  // namespace

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
}

size_t shape_numel(const Shape& s) {
    size_t n = 1;
    for (int d : s) n *= static_cast<size_t>(d);
    return n;
}

void record_on_active_tape(std::shared_ptr<Node> node) {
    g_active_tape->nodes_.push_back(std::move(node));
}

TapeScope::TapeScope(Tape& tape) : prev_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = prev_; }

Tape* active_tape() { return g_active_tape; }

void Tape::backward(const Tensor& loss) {
    if (loss.size() != 1) throw DimensionError("backward: loss must be scalar, got " + shape_str(loss.shape()));
    Node& root = *loss.node();
    root.ensure_grad();
    root.grad[0] = 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        Node& n = **it;
        if (n.backward && !n.grad.empty()) n.backward(n);
    }
}

namespace {

Tensor make_op(Shape shape, std::vector<double> data,
               std::initializer_list<std::shared_ptr<Node>> parents,
               std::function<void(Node&)> backward) {
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    bool rg = false;
    for (const auto& p : parents) rg |= p->requires_grad;
    if (rg && g_active_tape != nullptr) {
        node->requires_grad = true;
        node->backward = std::move(backward);
        record_on_active_tape(node);
    }
    return Tensor(node);
}

}  // namespace

Tensor Tensor::constant(Shape shape, std::vector<double> data) {
    if (shape_numel(shape) != data.size())
        throw DimensionError("tensor: shape " + shape_str(shape) + " does not match data length " +
                             std::to_string(data.size()));
    for (int d : shape)
        if (d <= 0) throw DimensionError("tensor: non-positive dimension in " + shape_str(shape));
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    return Tensor(node);
}

Tensor Tensor::scalar(double v) { return constant({1}, {v}); }

Tensor Tensor::param(Shape shape, std::vector<double> data) {
    Tensor t = constant(std::move(shape), std::move(data));
    t.set_requires_grad(true);
    return t;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    Tensor t = constant(std::move(shape), std::vector<double>(shape_numel(shape), 0.0));
    t.set_requires_grad(requires_grad);
    return t;
}

double Tensor::item() const {
    if (size() != 1) throw DimensionError("item: tensor has shape " + shape_str(shape()));
    return node_->data[0];
}

double Tensor::at(int i, int j) const {
    return node_->data[static_cast<size_t>(i) * static_cast<size_t>(dim(1)) + static_cast<size_t>(j)];
}

std::span<const double> Tensor::grad() const {
    node_->ensure_grad();
    return node_->grad;
}

std::span<double> Tensor::raw_grad() {
    node_->ensure_grad();
    return node_->grad;
}

void Tensor::zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

// --- elementwise ------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    std::vector<double> out(a.size());
    kern::add(out.data(), a.data().data(), b.data().data(), out.size());
    return make_op(a.shape(), std::move(out), {a.node(), b.node()},
                   [pa = a.node(), pb = b.node()](Node& n) {
                       if (pa->requires_grad) accumulate(*pa, n.grad.data(), n.grad.size());
                       if (pb->requires_grad) accumulate(*pb, n.grad.data(), n.grad.size());
                   });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    std::vector<double> out(a.size());
    kern::sub(out.data(), a.data().data(), b.data().data(), out.size());
    return make_op(a.shape(), std::move(out), {a.node(), b.node()},
                   [pa = a.node(), pb = b.node()](Node& n) {
                       if (pa->requires_grad) accumulate(*pa, n.grad.data(), n.grad.size());
                       if (pb->requires_grad) {
                           pb->ensure_grad();
                           kern::axpy(pb->grad.data(), -1.0, n.grad.data(), n.grad.size());
                       }
                   });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    std::vector<double> out(a.size());
    kern::mul(out.data(), a.data().data(), b.data().data(), out.size());
    return make_op(a.shape(), std::move(out), {a.node(), b.node()},
                   [pa = a.node(), pb = b.node()](Node& n) {
                       size_t m = n.grad.size();
                       if (pa->requires_grad) {
                           pa->ensure_grad();
                           for (size_t i = 0; i < m; ++i) pa->grad[i] += n.grad[i] * pb->data[i];
                       }
                       if (pb->requires_grad) {
                           pb->ensure_grad();
                           for (size_t i = 0; i < m; ++i) pb->grad[i] += n.grad[i] * pa->data[i];
                       }
                   });
}

Tensor scale(const Tensor& x, double c) {
    std::vector<double> out(x.data().begin(), x.data().end());
    kern::scale(out.data(), c, out.size());
    return make_op(x.shape(), std::move(out), {x.node()}, [px = x.node(), c](Node& n) {
        if (!px->requires_grad) return;
        px->ensure_grad();
        kern::axpy(px->grad.data(), c, n.grad.data(), n.grad.size());
    });
}

Tensor add_const(const Tensor& x, double c) {
    std::vector<double> out(x.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] + c;
    return make_op(x.shape(), std::move(out), {x.node()}, [px = x.node()](Node& n) {
        if (px->requires_grad) accumulate(*px, n.grad.data(), n.grad.size());
    });
}

Tensor add_rowwise(const Tensor& mat, const Tensor& vec) {
    if (mat.ndim() != 2 || vec.ndim() != 1 || mat.dim(1) != vec.dim(0))
        throw DimensionError("add_rowwise: " + shape_str(mat.shape()) + " vs " + shape_str(vec.shape()));
    size_t rows = static_cast<size_t>(mat.dim(0)), cols = static_cast<size_t>(mat.dim(1));
    std::vector<double> out(mat.size());
    for (size_t i = 0; i < rows; ++i)
        kern::add(out.data() + i * cols, mat.data().data() + i * cols, vec.data().data(), cols);
    return make_op(mat.shape(), std::move(out), {mat.node(), vec.node()},
                   [pm = mat.node(), pv = vec.node(), rows, cols](Node& n) {
                       if (pm->requires_grad) accumulate(*pm, n.grad.data(), n.grad.size());
                       if (pv->requires_grad) {
                           pv->ensure_grad();
                           for (size_t i = 0; i < rows; ++i)
                               kern::axpy(pv->grad.data(), 1.0, n.grad.data() + i * cols, cols);
                       }
                   });
}

// --- linear algebra ----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
        throw DimensionError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    size_t m = static_cast<size_t>(a.dim(0)), k = static_cast<size_t>(a.dim(1)),
           n = static_cast<size_t>(b.dim(1));
    std::vector<double> out(m * n, 0.0);
    kern::matmul_nn(out.data(), a.data().data(), b.data().data(), m, k, n);
    return make_op({a.dim(0), b.dim(1)}, std::move(out), {a.node(), b.node()},
                   [pa = a.node(), pb = b.node(), m, k, n](Node& nd) {
                       if (pa->requires_grad) {
                           pa->ensure_grad();
                           kern::matmul_nt(pa->grad.data(), nd.grad.data(), pb->data.data(), m, n, k);
                       }
                       if (pb->requires_grad) {
                           pb->ensure_grad();
                           kern::matmul_tn(pb->grad.data(), pa->data.data(), nd.grad.data(), m, k, n);
                       }
                   });
}

Tensor transpose(const Tensor& x) {
    if (x.ndim() != 2) throw DimensionError("transpose: need 2-D, got " + shape_str(x.shape()));
    size_t m = static_cast<size_t>(x.dim(0)), n = static_cast<size_t>(x.dim(1));
    std::vector<double> out(m * n);
    for (size_t i = 0; i < m; ++i)
        for (size_t j = 0; j < n; ++j) out[j * m + i] = x.data()[i * n + j];
    return make_op({x.dim(1), x.dim(0)}, std::move(out), {x.node()}, [px = x.node(), m, n](Node& nd) {
        if (!px->requires_grad) return;
        px->ensure_grad();
        for (size_t i = 0; i < m; ++i)
            for (size_t j = 0; j < n; ++j) px->grad[i * n + j] += nd.grad[j * m + i];
    });
}

Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.size())
        throw DimensionError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
    std::vector<double> out(x.data().begin(), x.data().end());
    return make_op(std::move(shape), std::move(out), {x.node()}, [px = x.node()](Node& n) {
        if (px->requires_grad) accumulate(*px, n.grad.data(), n.grad.size());
    });
}

// --- structural ops ----------------------------------------------------------

Tensor concat(std::span<const Tensor> parts) {
    if (parts.empty()) throw DegenerateInputError("concat: no inputs");
    size_t total = 0;
    for (const Tensor& p : parts) {
        if (p.ndim() != 1) throw DimensionError("concat: need 1-D parts, got " + shape_str(p.shape()));
        total += p.size();
    }
    std::vector<double> out;
    out.reserve(total);
    std::vector<std::shared_ptr<Node>> parents;
    for (const Tensor& p : parts) {
        out.insert(out.end(), p.data().begin(), p.data().end());
        parents.push_back(p.node());
    }
    auto node = std::make_shared<Node>();
    node->shape = {static_cast<int>(total)};
    node->data = std::move(out);
    bool rg = false;
    for (const auto& p : parents) rg |= p->requires_grad;
    if (rg && active_tape() != nullptr) {
        node->requires_grad = true;
        node->backward = [parents](Node& n) {
            size_t off = 0;
            for (const auto& p : parents) {
                if (p->requires_grad) accumulate(*p, n.grad.data() + off, p->data.size());
                off += p->data.size();
            }
        };
        record_on_active_tape(node);
    }
    return Tensor(node);
}

Tensor stack_rows(std::span<const Tensor> rows) {
    if (rows.empty()) throw DegenerateInputError("stack_rows: no inputs");
    int d = rows[0].ndim() == 1 ? rows[0].dim(0) : -1;
    for (const Tensor& r : rows)
        if (r.ndim() != 1 || r.dim(0) != d)
            throw DimensionError("stack_rows: row shape " + shape_str(r.shape()));
    size_t cols = static_cast<size_t>(d);
    std::vector<double> out;
    out.reserve(rows.size() * cols);
    std::vector<std::shared_ptr<Node>> parents;
    for (const Tensor& r : rows) {
        out.insert(out.end(), r.data().begin(), r.data().end());
        parents.push_back(r.node());
    }
    auto node = std::make_shared<Node>();
    node->shape = {static_cast<int>(rows.size()), d};
    node->data = std::move(out);
    bool rg = false;
    for (const auto& p : parents) rg |= p->requires_grad;
    if (rg && active_tape() != nullptr) {
        node->requires_grad = true;
        node->backward = [parents, cols](Node& n) {
            for (size_t i = 0; i < parents.size(); ++i)
                if (parents[i]->requires_grad)
                    accumulate(*parents[i], n.grad.data() + i * cols, cols);
        };
        record_on_active_tape(node);
    }
    return Tensor(node);
}

Tensor concat_cols(std::span<const Tensor> parts) {
    if (parts.empty()) throw DegenerateInputError("concat_cols: no inputs");
    int rows = parts[0].ndim() == 2 ? parts[0].dim(0) : -1;
    size_t total_cols = 0;
    for (const Tensor& p : parts) {
        if (p.ndim() != 2 || p.dim(0) != rows)
            throw DimensionError("concat_cols: part shape " + shape_str(p.shape()));
        total_cols += static_cast<size_t>(p.dim(1));
    }
    size_t m = static_cast<size_t>(rows);
    std::vector<double> out(m * total_cols);
    std::vector<std::shared_ptr<Node>> parents;
    std::vector<size_t> widths;
    size_t off = 0;
    for (const Tensor& p : parts) {
        size_t w = static_cast<size_t>(p.dim(1));
        for (size_t i = 0; i < m; ++i)
            std::copy_n(p.data().data() + i * w, w, out.data() + i * total_cols + off);
        off += w;
        parents.push_back(p.node());
        widths.push_back(w);
    }
    auto node = std::make_shared<Node>();
    node->shape = {rows, static_cast<int>(total_cols)};
    node->data = std::move(out);
    bool rg = false;
    for (const auto& p : parents) rg |= p->requires_grad;
    if (rg && active_tape() != nullptr) {
        node->requires_grad = true;
        node->backward = [parents, widths, m, total_cols](Node& n) {
            size_t col = 0;
            for (size_t pi = 0; pi < parents.size(); ++pi) {
                size_t w = widths[pi];
                if (parents[pi]->requires_grad) {
                    parents[pi]->ensure_grad();
                    for (size_t i = 0; i < m; ++i)
                        kern::axpy(parents[pi]->grad.data() + i * w, 1.0,
                                   n.grad.data() + i * total_cols + col, w);
                }
                col += w;
            }
        };
        record_on_active_tape(node);
    }
    return Tensor(node);
}

Tensor slice(const Tensor& x, int begin, int end) {
    if (x.ndim() != 1) throw DimensionError("slice: need 1-D, got " + shape_str(x.shape()));
    if (begin < 0 || end > x.dim(0) || begin >= end)
        throw IndexError("slice [" + std::to_string(begin) + "," + std::to_string(end) + ") of " +
                         shape_str(x.shape()));
    std::vector<double> out(x.data().begin() + begin, x.data().begin() + end);
    size_t off = static_cast<size_t>(begin), len = static_cast<size_t>(end - begin);
    return make_op({end - begin}, std::move(out), {x.node()}, [px = x.node(), off, len](Node& n) {
        if (!px->requires_grad) return;
        px->ensure_grad();
        kern::axpy(px->grad.data() + off, 1.0, n.grad.data(), len);
    });
}

Tensor slice_rows(const Tensor& x, int begin, int end) {
    if (x.ndim() != 2) throw DimensionError("slice_rows: need 2-D, got " + shape_str(x.shape()));
    if (begin < 0 || end > x.dim(0) || begin >= end)
        throw IndexError("slice_rows [" + std::to_string(begin) + "," + std::to_string(end) + ") of " +
                         shape_str(x.shape()));
    size_t cols = static_cast<size_t>(x.dim(1));
    size_t off = static_cast<size_t>(begin) * cols, len = static_cast<size_t>(end - begin) * cols;
    std::vector<double> out(x.data().begin() + static_cast<long>(off),
                            x.data().begin() + static_cast<long>(off + len));
    return make_op({end - begin, x.dim(1)}, std::move(out), {x.node()},
                   [px = x.node(), off, len](Node& n) {
                       if (!px->requires_grad) return;
                       px->ensure_grad();
                       kern::axpy(px->grad.data() + off, 1.0, n.grad.data(), len);
                   });
}

Tensor slice_cols(const Tensor& x, int begin, int end) {
    if (x.ndim() != 2) throw DimensionError("slice_cols: need 2-D, got " + shape_str(x.shape()));
    if (begin < 0 || end > x.dim(1) || begin >= end)
        throw IndexError("slice_cols [" + std::to_string(begin) + "," + std::to_string(end) + ") of " +
                         shape_str(x.shape()));
    size_t m = static_cast<size_t>(x.dim(0)), n = static_cast<size_t>(x.dim(1));
    size_t b = static_cast<size_t>(begin), w = static_cast<size_t>(end - begin);
    std::vector<double> out(m * w);
    for (size_t i = 0; i < m; ++i) std::copy_n(x.data().data() + i * n + b, w, out.data() + i * w);
    return make_op({x.dim(0), end - begin}, std::move(out), {x.node()},
                   [px = x.node(), m, n, b, w](Node& nd) {
                       if (!px->requires_grad) return;
                       px->ensure_grad();
                       for (size_t i = 0; i < m; ++i)
                           kern::axpy(px->grad.data() + i * n + b, 1.0, nd.grad.data() + i * w, w);
                   });
}

Tensor row(const Tensor& x, int i) {
    if (x.ndim() != 2) throw DimensionError("row: need 2-D, got " + shape_str(x.shape()));
    if (i < 0 || i >= x.dim(0)) throw IndexError("row " + std::to_string(i) + " of " + shape_str(x.shape()));
    size_t cols = static_cast<size_t>(x.dim(1));
    size_t off = static_cast<size_t>(i) * cols;
    std::vector<double> out(x.data().begin() + static_cast<long>(off),
                            x.data().begin() + static_cast<long>(off + cols));
    return make_op({x.dim(1)}, std::move(out), {x.node()}, [px = x.node(), off, cols](Node& n) {
        if (!px->requires_grad) return;
        px->ensure_grad();
        kern::axpy(px->grad.data() + off, 1.0, n.grad.data(), cols);
    });
}

// --- reductions ----------------------------------------------------------------

Tensor sum(const Tensor& x) {
    double s = kern::sum(x.data().data(), x.size());
    return make_op({1}, {s}, {x.node()}, [px = x.node()](Node& n) {
        if (!px->requires_grad) return;
        px->ensure_grad();
        double g = n.grad[0];
        for (double& v : px->grad) v += g;
    });
}

Tensor mean(const Tensor& x) {
    double s = kern::sum(x.data().data(), x.size()) / static_cast<double>(x.size());
    double inv = 1.0 / static_cast<double>(x.size());
    return make_op({1}, {s}, {x.node()}, [px = x.node(), inv](Node& n) {
        if (!px->requires_grad) return;
        px->ensure_grad();
        double g = n.grad[0] * inv;
        for (double& v : px->grad) v += g;
    });
}

Tensor dot(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 1 || b.ndim() != 1 || a.dim(0) != b.dim(0))
        throw DimensionError("dot: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    double s = kern::dot(a.data().data(), b.data().data(), a.size());
    return make_op({1}, {s}, {a.node(), b.node()}, [pa = a.node(), pb = b.node()](Node& n) {
        double g = n.grad[0];
        if (pa->requires_grad) {
            pa->ensure_grad();
            kern::axpy(pa->grad.data(), g, pb->data.data(), pb->data.size());
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            kern::axpy(pb->grad.data(), g, pa->data.data(), pa->data.size());
        }
    });
}

// --- nonlinearities ---------------------------------------------------------

Tensor relu(const Tensor& x) {
    std::vector<double> out(x.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] > 0.0 ? x.data()[i] : 0.0;
    return make_op(x.shape(), std::move(out), {x.node()}, [px = x.node()](Node& n) {
        if (!px->requires_grad) return;
        px->ensure_grad();
        for (size_t i = 0; i < n.grad.size(); ++i)
            if (px->data[i] > 0.0) px->grad[i] += n.grad[i];
    });
}

Tensor sigmoid(const Tensor& x) {
    std::vector<double> out(x.size());
    for (size_t i = 0; i < out.size(); ++i) {
        double v = x.data()[i];
        out[i] = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
    }
    return make_op(x.shape(), std::move(out), {x.node()}, [px = x.node()](Node& n) {
        if (!px->requires_grad) return;
        px->ensure_grad();
        for (size_t i = 0; i < n.grad.size(); ++i) {
            double y = n.data[i];
            px->grad[i] += n.grad[i] * y * (1.0 - y);
        }
    });
}

Tensor exp(const Tensor& x) {
    std::vector<double> out(x.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = std::exp(x.data()[i]);
    return make_op(x.shape(), std::move(out), {x.node()}, [px = x.node()](Node& n) {
        if (!px->requires_grad) return;
        px->ensure_grad();
        for (size_t i = 0; i < n.grad.size(); ++i) px->grad[i] += n.grad[i] * n.data[i];
    });
}

Tensor log(const Tensor& x) {
    std::vector<double> out(x.size());
    for (size_t i = 0; i < out.size(); ++i) {
        if (!(x.data()[i] > 0.0)) throw NumericError("log: non-positive input");
        out[i] = std::log(x.data()[i]);
    }
    return make_op(x.shape(), std::move(out), {x.node()}, [px = x.node()](Node& n) {
        if (!px->requires_grad) return;
        px->ensure_grad();
        for (size_t i = 0; i < n.grad.size(); ++i) px->grad[i] += n.grad[i] / px->data[i];
    });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
    std::vector<double> out(x.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = std::min(std::max(x.data()[i], lo), hi);
    return make_op(x.shape(), std::move(out), {x.node()}, [px = x.node(), lo, hi](Node& n) {
        if (!px->requires_grad) return;
        px->ensure_grad();
        for (size_t i = 0; i < n.grad.size(); ++i)
            if (px->data[i] > lo && px->data[i] < hi) px->grad[i] += n.grad[i];
    });
}

// --- softmax family -----------------------------------------------------------

Tensor softmax(const Tensor& x) {
    if (x.ndim() != 1 || x.dim(0) < 1)
        throw DimensionError("softmax: need nonempty 1-D, got " + shape_str(x.shape()));
    check_finite(x.data(), "softmax");
    double m = *std::max_element(x.data().begin(), x.data().end());
    std::vector<double> out(x.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = std::exp(x.data()[i] - m);
    double z = kern::sum(out.data(), out.size());
    kern::scale(out.data(), 1.0 / z, out.size());
    return make_op(x.shape(), std::move(out), {x.node()}, [px = x.node()](Node& n) {
        if (!px->requires_grad) return;
        px->ensure_grad();
        double s = kern::dot(n.grad.data(), n.data.data(), n.grad.size());
        for (size_t i = 0; i < n.grad.size(); ++i) px->grad[i] += n.data[i] * (n.grad[i] - s);
    });
}

Tensor softmax_rows(const Tensor& x, std::span<const uint8_t> allowed_cols) {
    if (x.ndim() != 2) throw DimensionError("softmax_rows: need 2-D, got " + shape_str(x.shape()));
    size_t m = static_cast<size_t>(x.dim(0)), n = static_cast<size_t>(x.dim(1));
    check_finite(x.data(), "softmax_rows");
    std::vector<uint8_t> mask;
    if (allowed_cols.empty()) {
        mask.assign(n, 1);
    } else {
        if (allowed_cols.size() != n)
            throw DimensionError("softmax_rows: mask length " + std::to_string(allowed_cols.size()) +
                                 " vs " + std::to_string(n) + " columns");
        mask.assign(allowed_cols.begin(), allowed_cols.end());
    }
    size_t n_allowed = 0;
    for (uint8_t a : mask) n_allowed += a;
    if (n_allowed == 0) throw DegenerateInputError("softmax_rows: no allowed columns");

    std::vector<double> out(m * n, 0.0);
    for (size_t i = 0; i < m; ++i) {
        const double* xi = x.data().data() + i * n;
        double mx = -std::numeric_limits<double>::infinity();
        for (size_t j = 0; j < n; ++j)
            if (mask[j] && xi[j] > mx) mx = xi[j];
        double z = 0.0;
        double* oi = out.data() + i * n;
        for (size_t j = 0; j < n; ++j)
            if (mask[j]) z += (oi[j] = std::exp(xi[j] - mx));
        for (size_t j = 0; j < n; ++j)
            if (mask[j]) oi[j] /= z;
    }
    return make_op(x.shape(), std::move(out), {x.node()},
                   [px = x.node(), mask = std::move(mask), m, n](Node& nd) {
                       if (!px->requires_grad) return;
                       px->ensure_grad();
                       for (size_t i = 0; i < m; ++i) {
                           const double* y = nd.data.data() + i * n;
                           const double* g = nd.grad.data() + i * n;
                           double s = 0.0;
                           for (size_t j = 0; j < n; ++j)
                               if (mask[j]) s += g[j] * y[j];
                           double* gx = px->grad.data() + i * n;
                           for (size_t j = 0; j < n; ++j)
                               if (mask[j]) gx[j] += y[j] * (g[j] - s);
                       }
                   });
}

// --- normalization ------------------------------------------------------------

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    size_t rows, cols;
    if (x.ndim() == 1) {
        rows = 1;
        cols = static_cast<size_t>(x.dim(0));
    } else if (x.ndim() == 2) {
        rows = static_cast<size_t>(x.dim(0));
        cols = static_cast<size_t>(x.dim(1));
    } else {
        throw DimensionError("layer_norm: need 1-D or 2-D, got " + shape_str(x.shape()));
    }
    if (gamma.ndim() != 1 || static_cast<size_t>(gamma.dim(0)) != cols || gamma.shape() != beta.shape())
        throw DimensionError("layer_norm: params " + shape_str(gamma.shape()) + "/" +
                             shape_str(beta.shape()) + " vs input " + shape_str(x.shape()));
    std::vector<double> out(x.size());
    std::vector<double> xhat(x.size());
    std::vector<double> inv_std(rows);
    double inv_n = 1.0 / static_cast<double>(cols);
    for (size_t i = 0; i < rows; ++i) {
        const double* xi = x.data().data() + i * cols;
        double mu = kern::sum(xi, cols) * inv_n;
        double var = 0.0;
        for (size_t j = 0; j < cols; ++j) var += (xi[j] - mu) * (xi[j] - mu);
        var *= inv_n;
        double is = 1.0 / std::sqrt(var + eps);
        inv_std[i] = is;
        for (size_t j = 0; j < cols; ++j) {
            double xh = (xi[j] - mu) * is;
            xhat[i * cols + j] = xh;
            out[i * cols + j] = gamma.data()[j] * xh + beta.data()[j];
        }
    }
    return make_op(x.shape(), std::move(out), {x.node(), gamma.node(), beta.node()},
                   [px = x.node(), pg = gamma.node(), pb = beta.node(), xhat = std::move(xhat),
                    inv_std = std::move(inv_std), rows, cols, inv_n](Node& nd) {
                       for (size_t i = 0; i < rows; ++i) {
                           const double* g = nd.grad.data() + i * cols;
                           const double* xh = xhat.data() + i * cols;
                           if (pg->requires_grad) {
                               pg->ensure_grad();
                               for (size_t j = 0; j < cols; ++j) pg->grad[j] += g[j] * xh[j];
                           }
                           if (pb->requires_grad) {
                               pb->ensure_grad();
                               for (size_t j = 0; j < cols; ++j) pb->grad[j] += g[j];
                           }
                           if (px->requires_grad) {
                               px->ensure_grad();
                               double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
                               for (size_t j = 0; j < cols; ++j) {
                                   double dxh = g[j] * pg->data[j];
                                   mean_dxhat += dxh;
                                   mean_dxhat_xhat += dxh * xh[j];
                               }
                               mean_dxhat *= inv_n;
                               mean_dxhat_xhat *= inv_n;
                               double* gx = px->grad.data() + i * cols;
                               for (size_t j = 0; j < cols; ++j) {
                                   double dxh = g[j] * pg->data[j];
                                   gx[j] += inv_std[i] * (dxh - mean_dxhat - xh[j] * mean_dxhat_xhat);
                               }
                           }
                       }
                   });
}

// --- similarity ----------------------------------------------------------------

Tensor cosine_similarity(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 1 || b.ndim() != 1 || a.dim(0) != b.dim(0))
        throw DimensionError("cosine_similarity: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    constexpr double kNormEps = 1e-12;
    size_t n = a.size();
    double d = kern::dot(a.data().data(), b.data().data(), n);
    double na = std::sqrt(kern::dot(a.data().data(), a.data().data(), n));
    double nb = std::sqrt(kern::dot(b.data().data(), b.data().data(), n));
    double c = d / ((na + kNormEps) * (nb + kNormEps));
    return make_op({1}, {c}, {a.node(), b.node()},
                   [pa = a.node(), pb = b.node(), na, nb, c, n](Node& nd) {
                       double g = nd.grad[0];
                       double denom = (na + kNormEps) * (nb + kNormEps);
                       if (pa->requires_grad) {
                           pa->ensure_grad();
                           kern::axpy(pa->grad.data(), g / denom, pb->data.data(), n);
                           if (na > 0.0)
                               kern::axpy(pa->grad.data(), -g * c / (na * (na + kNormEps)), pa->data.data(), n);
                       }
                       if (pb->requires_grad) {
                           pb->ensure_grad();
                           kern::axpy(pb->grad.data(), g / denom, pa->data.data(), n);
                           if (nb > 0.0)
                               kern::axpy(pb->grad.data(), -g * c / (nb * (nb + kNormEps)), pb->data.data(), n);
                       }
                   });
}

Tensor embedding_lookup(const Tensor& table, int index) {
    if (table.ndim() != 2) throw DimensionError("embedding_lookup: table " + shape_str(table.shape()));
    if (index < 0 || index >= table.dim(0))
        throw IndexError("embedding_lookup: index " + std::to_string(index) + " out of [0," +
                         std::to_string(table.dim(0)) + ")");
    size_t cols = static_cast<size_t>(table.dim(1));
    size_t off = static_cast<size_t>(index) * cols;
    std::vector<double> out(table.data().begin() + static_cast<long>(off),
                            table.data().begin() + static_cast<long>(off + cols));
    return make_op({table.dim(1)}, std::move(out), {table.node()},
                   [pt = table.node(), off, cols](Node& n) {
                       if (!pt->requires_grad) return;
                       pt->ensure_grad();
                       kern::axpy(pt->grad.data() + off, 1.0, n.grad.data(), cols);
                   });
}

Tensor stop_gradient(const Tensor& x) {
    return Tensor::constant(x.shape(), std::vector<double>(x.data().begin(), x.data().end()));
}

Tensor logsumexp(const Tensor& x) {
    if (x.ndim() != 1 || x.dim(0) < 1)
        throw DimensionError("logsumexp: need nonempty 1-D, got " + shape_str(x.shape()));
    check_finite(x.data(), "logsumexp");
    double m = *std::max_element(x.data().begin(), x.data().end());
    return add_const(log(sum(exp(add_const(x, -m)))), m);
}

}  // namespace mmrank::ad
