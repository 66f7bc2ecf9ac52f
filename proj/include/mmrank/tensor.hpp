#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace mmrank::ad {

using Shape = std::vector<int>;

std::string shape_str(const Shape& s);
size_t shape_numel(const Shape& s);

// One value in the computation graph. Owned via shared_ptr by the Tensor
// handles that reference it and, for recorded ops, by the active tape.
struct Node {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until first needed; same length as data
    bool requires_grad = false;
    // Accumulates input gradients from this node's grad. Set only on recorded
    // op outputs; leaves and untracked results carry none.
    std::function<void(Node&)> backward;

    size_t numel() const { return data.size(); }
    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    }
};

// Ordered record of op applications. Reverse accumulation walks the record
// backwards, which visits every node exactly once in reverse topological
// order because nodes are appended at creation time.
class Tape {
public:
    void backward(const class Tensor& loss);
    void clear() { nodes_.clear(); }
    size_t size() const { return nodes_.size(); }

private:
    friend class TapeScope;
    friend void record_on_active_tape(std::shared_ptr<Node> node);
    std::vector<std::shared_ptr<Node>> nodes_;
};

// Makes a tape the recording target for ops on this thread. Ops called with
// no active scope run forward-only, which is the inference path.
class TapeScope {
public:
    explicit TapeScope(Tape& tape);
    ~TapeScope();
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape* prev_;
};

Tape* active_tape();

// Value handle. Copying shares the underlying node.
class Tensor {
public:
    Tensor() = default;

    static Tensor constant(Shape shape, std::vector<double> data);
    static Tensor scalar(double v);
    static Tensor param(Shape shape, std::vector<double> data);  // requires_grad leaf
    static Tensor zeros(Shape shape, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int ndim() const { return static_cast<int>(node_->shape.size()); }
    int dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
    size_t size() const { return node_->data.size(); }

    std::span<const double> data() const { return node_->data; }
    std::span<double> raw_data() { return node_->data; }
    double item() const;
    double at(int i) const { return node_->data[static_cast<size_t>(i)]; }
    double at(int i, int j) const;

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool rg) { node_->requires_grad = rg; }

    std::span<const double> grad() const;  // allocates a zero buffer on first use
    std::span<double> raw_grad();
    void zero_grad();

    const std::shared_ptr<Node>& node() const { return node_; }
    explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

private:
    std::shared_ptr<Node> node_;
};

// --- differentiable ops -----------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double c);
Tensor add_const(const Tensor& x, double c);
Tensor add_rowwise(const Tensor& mat, const Tensor& vec);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& x);
Tensor reshape(const Tensor& x, Shape shape);

Tensor concat(std::span<const Tensor> parts);  // 1-D
Tensor stack_rows(std::span<const Tensor> rows);
Tensor concat_cols(std::span<const Tensor> parts);
Tensor slice(const Tensor& x, int begin, int end);  // 1-D
Tensor slice_rows(const Tensor& x, int begin, int end);
Tensor slice_cols(const Tensor& x, int begin, int end);
Tensor row(const Tensor& x, int i);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor dot(const Tensor& a, const Tensor& b);

Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor clamp(const Tensor& x, double lo, double hi);

Tensor softmax(const Tensor& x);  // 1-D
// Row-wise softmax over a {m,n} matrix. When allowed_cols is nonempty it
// restricts the distribution to those columns; excluded columns output 0.
Tensor softmax_rows(const Tensor& x, std::span<const uint8_t> allowed_cols = {});

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

// Adds 1e-12 to each norm so zero vectors stay finite; gradient checks steer
// clear of that region.
Tensor cosine_similarity(const Tensor& a, const Tensor& b);

Tensor embedding_lookup(const Tensor& table, int index);

// Forward identity; reverse accumulation propagates nothing into x.
Tensor stop_gradient(const Tensor& x);

// max-shifted, so the H=0 contrastive case stays exactly zero
Tensor logsumexp(const Tensor& x);  // 1-D -> {1}

}  // namespace mmrank::ad
