#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "segkit/common.hpp"
#include "segkit/rng.hpp"

namespace segkit {

using Shape = std::vector<int>;

std::string shape_str(const Shape& s);
std::int64_t shape_numel(const Shape& s);

// ----------------------------- Tensor -----------------------------
//
// Dense row-major float64 tensor with optional gradient buffer. Tensor is a
// cheap shared handle: copies alias the same storage, which is what ties the
// forward graph together (ops capture handles in their backward closures).
// Gradients are lazily allocated and accumulate additively.

struct TensorNode {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until touched by backward
    bool requires_grad = false;
};

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int ndim() const { return static_cast<int>(node_->shape.size()); }
    int dim(int i) const;
    std::int64_t numel() const { return static_cast<std::int64_t>(node_->data.size()); }

    std::vector<double>& data() { return node_->data; }
    const std::vector<double>& data() const { return node_->data; }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool v) { node_->requires_grad = v; }

    /// Gradient buffer, allocated (zero-filled) on first access.
    std::vector<double>& grad();
    bool has_grad() const { return !node_->grad.empty(); }
    void zero_grad();

    /// Value of a 1-element tensor.
    double value() const;

    double& at(std::initializer_list<int> idx);
    double at(std::initializer_list<int> idx) const;

    TensorNode* node() const { return node_.get(); }

private:
    explicit Tensor(std::shared_ptr<TensorNode> n) : node_(std::move(n)) {}
    std::shared_ptr<TensorNode> node_;
};

// ----------------------------- Tape -----------------------------
//
// Define-by-run record of backward rules. Ops append their closure as they
// execute, so the record order is a topological order of the forward graph;
// backward() replays it once, in reverse. A tape is single-use and rebuilt
// every forward pass. Independent tapes share no state.

class Tape {
public:
    explicit Tape(bool recording = true) : recording_(recording) {}

    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool recording() const { return recording_; }
    void set_recording(bool v) { recording_ = v; }

    void record(std::function<void()> backward_fn) {
        if (recording_) records_.push_back(std::move(backward_fn));
    }

    std::size_t size() const { return records_.size(); }

    /// Seed d(loss)/d(loss) = 1 and run every recorded rule in reverse order.
    /// Throws ShapeError if loss is not a 1-element tensor.
    void backward(const Tensor& loss);

private:
    std::vector<std::function<void()>> records_;
    bool recording_ = true;
};

// ----------------------------- ops -----------------------------
// All ops read their inputs, produce a fresh output tensor, and (when any
// input requires grad and the tape is recording) register a backward rule.
// Output requires_grad is the OR over inputs.

/// Batched matrix product. a: [..., m, k], b: [..., k, n]; leading batch
/// dims broadcast elementwise (size-1 or missing dims stretch).
Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b);

/// 2-D cross-correlation. x: [b, cin, h, w], weight: [cout, cin, kh, kw],
/// bias: [cout] (pass an undefined Tensor for no bias).
/// out spatial: floor((h + 2*padding - kh) / stride) + 1.
Tensor conv2d(Tape& tape, const Tensor& x, const Tensor& weight, const Tensor& bias,
              int stride = 1, int padding = 0);

/// Nearest-neighbor upsampling of the two trailing spatial dims by `factor`.
Tensor upsample_nearest(Tape& tape, const Tensor& x, int factor);

/// Batch normalization over every axis except `channel_axis`.
/// Training mode normalizes with batch statistics and folds them into the
/// running buffers with `momentum`; eval mode normalizes with the running
/// buffers. running_mean/running_var are plain (non-grad) tensors of shape
/// [channels], mutated in training mode.
Tensor batchnorm(Tape& tape, const Tensor& x, const Tensor& gamma, const Tensor& beta,
                 Tensor& running_mean, Tensor& running_var, bool training,
                 double momentum = 0.1, double eps = 1e-5, int channel_axis = 1);

inline Tensor batchnorm2d(Tape& tape, const Tensor& x, const Tensor& gamma, const Tensor& beta,
                          Tensor& running_mean, Tensor& running_var, bool training,
                          double momentum = 0.1, double eps = 1e-5) {
    return batchnorm(tape, x, gamma, beta, running_mean, running_var, training, momentum, eps, 1);
}

/// Numerically stable softmax along `axis` (negative axes count from the end).
Tensor softmax(Tape& tape, const Tensor& x, int axis);

Tensor relu(Tape& tape, const Tensor& x);
Tensor hardswish(Tape& tape, const Tensor& x);  // x * clip(x+3, 0, 6) / 6
Tensor sigmoid(Tape& tape, const Tensor& x);
Tensor gelu(Tape& tape, const Tensor& x);  // tanh approximation
Tensor log_op(Tape& tape, const Tensor& x);

/// Elementwise clamp; gradient passes only where lo < x < hi.
Tensor clamp(Tape& tape, const Tensor& x, double lo, double hi);

/// a * x + b, elementwise.
Tensor affine(Tape& tape, const Tensor& x, double a, double b);
inline Tensor scalar_mul(Tape& tape, const Tensor& x, double a) { return affine(tape, x, a, 0.0); }

/// Elementwise add. Shapes must match, or b's shape must be a trailing
/// suffix of a's (bias-style broadcast).
Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
/// Elementwise multiply / divide; shapes must match exactly.
Tensor mul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor div(Tape& tape, const Tensor& a, const Tensor& b);

/// Concatenate along `axis`; non-axis dims must match.
Tensor concat(Tape& tape, std::span<const Tensor> parts, int axis);

Tensor sum_all(Tape& tape, const Tensor& x);
Tensor mean_all(Tape& tape, const Tensor& x);
/// Sum over the given axes (dropped from the output shape).
Tensor sum_axes(Tape& tape, const Tensor& x, const std::vector<int>& axes);

/// 2x2 max pooling with stride 2 (trailing spatial dims; odd tails dropped).
/// Backward routes the gradient to each window's argmax only.
Tensor maxpool2d(Tape& tape, const Tensor& x);

/// Copy reshape; numel must be preserved.
Tensor reshape(Tape& tape, const Tensor& x, Shape new_shape);

/// Axis permutation (copy). perm must be a permutation of [0, ndim).
Tensor permute(Tape& tape, const Tensor& x, const std::vector<int>& perm);

/// Select rows along axis 1 of a [B, N, C] tensor. Backward scatter-adds.
Tensor gather_rows(Tape& tape, const Tensor& x, const std::vector<int>& rows);

/// logits: [B, H, Nq, Nk], table: [H, n_offsets], index: Nq*Nk flat matrix of
/// offset ids. out[b,h,q,k] = logits[b,h,q,k] + table[h, index[q*Nk+k]].
Tensor add_relative_bias(Tape& tape, const Tensor& logits, const Tensor& table,
                         const std::vector<int>& index);

// ----------------------------- raw GEMM -----------------------------
// Row-major double kernels used by matmul/conv2d. Exposed for tests.
// C[m,n] (+)= A·B with the noted transpositions; `accumulate` keeps C.
void gemm_nn(int m, int k, int n, const double* a, const double* b, double* c, bool accumulate);
void gemm_nt(int m, int k, int n, const double* a, const double* b, double* c, bool accumulate);
void gemm_tn(int m, int k, int n, const double* a, const double* b, double* c, bool accumulate);

}  // namespace segkit
