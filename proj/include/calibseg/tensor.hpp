#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace calibseg {

using Shape = std::vector<int>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Caps the worker threads the math backend may use; values below 1 mean one.
void set_thread_cap(int n);

// Dense float32 tensor with an optional gradient buffer. Value-semantics
// handle over shared storage: copies alias the same data, which is what the
// tape closures rely on.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, float value, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<float> data, bool requires_grad = false);
    static Tensor scalar(float value, bool requires_grad = false);

    bool defined() const { return s_ != nullptr; }
    const Shape& shape() const { return s_->shape; }
    int rank() const { return static_cast<int>(s_->shape.size()); }
    int dim(int i) const { return s_->shape[static_cast<std::size_t>(i)]; }
    std::int64_t numel() const { return static_cast<std::int64_t>(s_->data.size()); }

    std::span<float> data() { return s_->data; }
    std::span<const float> data() const { return s_->data; }
    std::span<float> grad();
    std::span<const float> grad() const;

    bool requires_grad() const { return s_ && s_->requires_grad; }
    void set_requires_grad(bool rg);
    void zero_grad();

    // Scalar access; throws unless numel() == 1.
    float item() const;

    bool same_storage(const Tensor& other) const { return s_ == other.s_; }
    bool shape_equals(const Shape& shape) const { return s_ && s_->shape == shape; }

    Tensor clone(bool requires_grad = false) const;

private:
    struct Storage {
        Shape shape;
        std::vector<float> data;
        std::vector<float> grad; // allocated iff requires_grad
        bool requires_grad = false;
    };
    std::shared_ptr<Storage> s_;
};

// Ordered record of executed primitives. Each primitive that involves at
// least one gradient-requiring tensor registers one backward closure; a
// backward pass replays them exactly once in reverse order. Gradients
// accumulate into existing buffers; callers reset them explicitly.
class Tape {
public:
    void record(std::function<void()> backward_fn) { nodes_.push_back(std::move(backward_fn)); }

    // root must be a scalar produced on this tape with requires_grad set.
    void backward(const Tensor& root);

    std::size_t num_nodes() const { return nodes_.size(); }
    void clear() { nodes_.clear(); }

private:
    std::vector<std::function<void()>> nodes_;
};

// --- differentiable primitives -------------------------------------------

// Cross-correlation of [N,Cin,H,W] with [Cout,Cin,k,k] plus per-channel bias.
// k must be odd and the padded output non-empty.
Tensor conv2d(Tape& tape, const Tensor& input, const Tensor& kernel, const Tensor& bias,
              int padding);

Tensor relu(Tape& tape, const Tensor& x);

// 2x2 average pooling on [N,C,H,W]; H and W must be even.
Tensor downsample2x(Tape& tape, const Tensor& x);

// Nearest-neighbor 2x replication on [N,C,H,W].
Tensor upsample2x(Tape& tape, const Tensor& x);

Tensor concat_channels(Tape& tape, const Tensor& a, const Tensor& b);

// Per-pixel softmax over the channel axis of [N,C,H,W], max-stabilized.
Tensor softmax_channels(Tape& tape, const Tensor& logits);

// Elementwise helpers (same shape).
Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
Tensor mul_elem(Tape& tape, const Tensor& a, const Tensor& b);
Tensor scale(Tape& tape, const Tensor& x, float factor);

// Sum of all elements, accumulated in double; returns a scalar tensor.
Tensor sum_all(Tape& tape, const Tensor& x);

// Copy with a new shape of equal element count; gradients copy straight back.
Tensor reshape(Tape& tape, const Tensor& x, Shape shape);

} // namespace calibseg
