#include "segkit/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace segkit {

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << 'x';
        os << s[i];
    }
    os << ']';
    return os.str();
}

std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

namespace {

void validate_shape(const Shape& s) {
    for (int d : s) {
        if (d <= 0) throw ShapeError("nonpositive dimension in shape " + shape_str(s));
    }
    if (s.empty()) throw ShapeError("empty shape");
}

#ifndef NDEBUG
void debug_check_finite(const std::vector<double>& v, const char* op) {
    for (double x : v) {
        if (!std::isfinite(x)) throw NumericError(std::string("non-finite value produced by ") + op);
    }
}
#define SEGKIT_CHECK_FINITE(vec, op) debug_check_finite(vec, op)
#else
#define SEGKIT_CHECK_FINITE(vec, op) ((void)0)
#endif

std::int64_t trailing_product(const Shape& s, int from) {
    std::int64_t n = 1;
    for (std::size_t i = static_cast<std::size_t>(from); i < s.size(); ++i) n *= s[i];
    return n;
}

int normalize_axis(int axis, int ndim) {
    if (axis < 0) axis += ndim;
    if (axis < 0 || axis >= ndim) throw ShapeError("axis out of range");
    return axis;
}

}  // namespace

// ----------------------------- Tensor -----------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    validate_shape(shape);
    auto n = std::make_shared<TensorNode>();
    n->data.assign(static_cast<std::size_t>(shape_numel(shape)), 0.0);
    n->shape = std::move(shape);
    n->requires_grad = requires_grad;
    return Tensor{std::move(n)};
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.data().begin(), t.data().end(), value);
    return t;
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
    validate_shape(shape);
    if (shape_numel(shape) != static_cast<std::int64_t>(data.size()))
        throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                         shape_str(shape));
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    n->requires_grad = requires_grad;
    return Tensor{std::move(n)};
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return from_data({1}, {value}, requires_grad);
}

int Tensor::dim(int i) const {
    if (i < 0) i += ndim();
    if (i < 0 || i >= ndim()) throw ShapeError("dim index out of range");
    return node_->shape[static_cast<std::size_t>(i)];
}

std::vector<double>& Tensor::grad() {
    if (node_->grad.empty()) node_->grad.assign(node_->data.size(), 0.0);
    return node_->grad;
}

void Tensor::zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

double Tensor::value() const {
    if (numel() != 1) throw ShapeError("value() on non-scalar tensor " + shape_str(shape()));
    return node_->data[0];
}

namespace {
std::size_t flat_index(const Shape& shape, std::initializer_list<int> idx) {
    if (static_cast<int>(idx.size()) != static_cast<int>(shape.size()))
        throw ShapeError("index rank mismatch");
    std::size_t flat = 0;
    auto it = idx.begin();
    for (std::size_t d = 0; d < shape.size(); ++d, ++it) {
        if (*it < 0 || *it >= shape[d]) throw ShapeError("index out of bounds");
        flat = flat * static_cast<std::size_t>(shape[d]) + static_cast<std::size_t>(*it);
    }
    return flat;
}
}  // namespace

double& Tensor::at(std::initializer_list<int> idx) {
    return node_->data[flat_index(node_->shape, idx)];
}

double Tensor::at(std::initializer_list<int> idx) const {
    return node_->data[flat_index(node_->shape, idx)];
}

// ----------------------------- Tape -----------------------------

void Tape::backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1)
        throw ShapeError("backward() requires a scalar loss, got " +
                         (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
    loss.node()->grad.assign(1, 1.0);
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) (*it)();
}

// ----------------------------- GEMM kernels -----------------------------

void gemm_nn(int m, int k, int n, const double* a, const double* b, double* c, bool accumulate) {
    if (!accumulate) std::fill(c, c + static_cast<std::size_t>(m) * n, 0.0);
    for (int kk = 0; kk < k; ++kk) {
        const double* brow = b + static_cast<std::size_t>(kk) * n;
        for (int i = 0; i < m; ++i) {
            const double av = a[static_cast<std::size_t>(i) * k + kk];
            double* crow = c + static_cast<std::size_t>(i) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

void gemm_nt(int m, int k, int n, const double* a, const double* b, double* c, bool accumulate) {
    // c[m,n] += a[m,k] * b[n,k]^T
    if (!accumulate) std::fill(c, c + static_cast<std::size_t>(m) * n, 0.0);
    for (int j = 0; j < n; ++j) {
        const double* brow = b + static_cast<std::size_t>(j) * k;
        for (int i = 0; i < m; ++i) {
            const double* arow = a + static_cast<std::size_t>(i) * k;
            double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
            int kk = 0;
            for (; kk + 4 <= k; kk += 4) {
                s0 += arow[kk] * brow[kk];
                s1 += arow[kk + 1] * brow[kk + 1];
                s2 += arow[kk + 2] * brow[kk + 2];
                s3 += arow[kk + 3] * brow[kk + 3];
            }
            double s = (s0 + s1) + (s2 + s3);
            for (; kk < k; ++kk) s += arow[kk] * brow[kk];
            c[static_cast<std::size_t>(i) * n + j] += s;
        }
    }
}

void gemm_tn(int m, int k, int n, const double* a, const double* b, double* c, bool accumulate) {
    // c[m,n] += a[k,m]^T * b[k,n]
    if (!accumulate) std::fill(c, c + static_cast<std::size_t>(m) * n, 0.0);
    for (int i = 0; i < m; ++i) {
        double* crow = c + static_cast<std::size_t>(i) * n;
        for (int kk = 0; kk < k; ++kk) {
            const double av = a[static_cast<std::size_t>(kk) * m + i];
            const double* brow = b + static_cast<std::size_t>(kk) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// ----------------------------- matmul -----------------------------

namespace {

// Broadcast two batch-dim lists (aligned right). Throws on mismatch.
Shape broadcast_batch(const Shape& a, const Shape& b, const Shape& full_a, const Shape& full_b) {
    const int nd = std::max(a.size(), b.size());
    Shape out(static_cast<std::size_t>(nd), 1);
    for (int i = 0; i < nd; ++i) {
        const int da = i < static_cast<int>(a.size()) ? a[a.size() - 1 - i] : 1;
        const int db = i < static_cast<int>(b.size()) ? b[b.size() - 1 - i] : 1;
        if (da != db && da != 1 && db != 1)
            throw ShapeError("matmul batch dims not broadcastable: " + shape_str(full_a) + " vs " +
                             shape_str(full_b));
        out[static_cast<std::size_t>(nd - 1 - i)] = std::max(da, db);
    }
    return out;
}

// Map a flat index over `out_batch` to the flat batch index of an operand
// whose batch dims are `own` (right-aligned, 1s broadcast).
std::int64_t map_batch_index(std::int64_t flat, const Shape& out_batch, const Shape& own) {
    std::int64_t own_idx = 0;
    std::int64_t rem = flat;
    for (int i = static_cast<int>(out_batch.size()) - 1, j = static_cast<int>(own.size()) - 1,
             mul = 1;
         i >= 0; --i, --j) {
        const std::int64_t coord = rem % out_batch[static_cast<std::size_t>(i)];
        rem /= out_batch[static_cast<std::size_t>(i)];
        if (j >= 0) {
            const int dj = own[static_cast<std::size_t>(j)];
            own_idx += (dj == 1 ? 0 : coord) * mul;
            mul *= dj;
        }
    }
    return own_idx;
}

}  // namespace

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
    if (a.ndim() < 2 || b.ndim() < 2)
        throw ShapeError("matmul expects rank >= 2, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    const int m = a.dim(-2), ka = a.dim(-1);
    const int kb = b.dim(-2), n = b.dim(-1);
    if (ka != kb)
        throw ShapeError("matmul inner dimension mismatch: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));

    Shape batch_a(a.shape().begin(), a.shape().end() - 2);
    Shape batch_b(b.shape().begin(), b.shape().end() - 2);
    const Shape out_batch = broadcast_batch(batch_a, batch_b, a.shape(), b.shape());

    Shape out_shape = out_batch;
    out_shape.push_back(m);
    out_shape.push_back(n);
    Tensor out = Tensor::zeros(out_shape);

    const std::int64_t nb = shape_numel(out_batch.empty() ? Shape{1} : out_batch);
    const std::int64_t a_mat = static_cast<std::int64_t>(m) * ka;
    const std::int64_t b_mat = static_cast<std::int64_t>(ka) * n;
    const std::int64_t o_mat = static_cast<std::int64_t>(m) * n;

    for (std::int64_t ib = 0; ib < nb; ++ib) {
        const std::int64_t ia = map_batch_index(ib, out_batch, batch_a);
        const std::int64_t ib2 = map_batch_index(ib, out_batch, batch_b);
        gemm_nn(m, ka, n, a.data().data() + ia * a_mat, b.data().data() + ib2 * b_mat,
                out.data().data() + ib * o_mat, false);
    }
    SEGKIT_CHECK_FINITE(out.data(), "matmul");

    if (tape.recording() && (a.requires_grad() || b.requires_grad())) {
        out.set_requires_grad(true);
        const int k = ka;
        tape.record([a, b, out, out_batch, batch_a, batch_b, m, k, n, nb, a_mat, b_mat,
                     o_mat]() mutable {
            if (!out.has_grad()) return;
            const double* go = out.node()->grad.data();
            for (std::int64_t ib = 0; ib < nb; ++ib) {
                const std::int64_t ia = map_batch_index(ib, out_batch, batch_a);
                const std::int64_t ibb = map_batch_index(ib, out_batch, batch_b);
                if (a.requires_grad()) {
                    // dA = dC * B^T
                    gemm_nt(m, n, k, go + ib * o_mat, b.data().data() + ibb * b_mat,
                            a.grad().data() + ia * a_mat, true);
                }
                if (b.requires_grad()) {
                    // dB = A^T * dC
                    gemm_tn(k, m, n, a.data().data() + ia * a_mat, go + ib * o_mat,
                            b.grad().data() + ibb * b_mat, true);
                }
            }
        });
    }
    return out;
}

// ----------------------------- conv2d -----------------------------

namespace {

void im2col(const double* x, int cin, int h, int w, int kh, int kw, int stride, int pad, int oh,
            int ow, double* col) {
    const std::int64_t ohw = static_cast<std::int64_t>(oh) * ow;
    std::int64_t row = 0;
    for (int c = 0; c < cin; ++c) {
        const double* xc = x + static_cast<std::int64_t>(c) * h * w;
        for (int ky = 0; ky < kh; ++ky) {
            for (int kx = 0; kx < kw; ++kx, ++row) {
                double* dst = col + row * ohw;
                for (int oy = 0; oy < oh; ++oy) {
                    const int iy = oy * stride + ky - pad;
                    if (iy < 0 || iy >= h) {
                        std::fill(dst + static_cast<std::int64_t>(oy) * ow,
                                  dst + static_cast<std::int64_t>(oy + 1) * ow, 0.0);
                        continue;
                    }
                    const double* src = xc + static_cast<std::int64_t>(iy) * w;
                    for (int ox = 0; ox < ow; ++ox) {
                        const int ix = ox * stride + kx - pad;
                        dst[static_cast<std::int64_t>(oy) * ow + ox] =
                            (ix >= 0 && ix < w) ? src[ix] : 0.0;
                    }
                }
            }
        }
    }
}

void col2im_add(const double* col, int cin, int h, int w, int kh, int kw, int stride, int pad,
                int oh, int ow, double* dx) {
    const std::int64_t ohw = static_cast<std::int64_t>(oh) * ow;
    std::int64_t row = 0;
    for (int c = 0; c < cin; ++c) {
        double* xc = dx + static_cast<std::int64_t>(c) * h * w;
        for (int ky = 0; ky < kh; ++ky) {
            for (int kx = 0; kx < kw; ++kx, ++row) {
                const double* src = col + row * ohw;
                for (int oy = 0; oy < oh; ++oy) {
                    const int iy = oy * stride + ky - pad;
                    if (iy < 0 || iy >= h) continue;
                    for (int ox = 0; ox < ow; ++ox) {
                        const int ix = ox * stride + kx - pad;
                        if (ix >= 0 && ix < w) xc[static_cast<std::int64_t>(iy) * w + ix] +=
                            src[static_cast<std::int64_t>(oy) * ow + ox];
                    }
                }
            }
        }
    }
}

}  // namespace

Tensor conv2d(Tape& tape, const Tensor& x, const Tensor& weight, const Tensor& bias, int stride,
              int padding) {
    if (x.ndim() != 4 || weight.ndim() != 4)
        throw ShapeError("conv2d expects 4-D input and weight, got " + shape_str(x.shape()) +
                         " and " + shape_str(weight.shape()));
    if (stride < 1) throw ShapeError("conv2d stride must be >= 1");
    if (padding < 0) throw ShapeError("conv2d padding must be >= 0");
    const int batch = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
    const int cout = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
    if (weight.dim(1) != cin)
        throw ShapeError("conv2d channel mismatch: input " + shape_str(x.shape()) + ", weight " +
                         shape_str(weight.shape()));
    if (kh > h + 2 * padding || kw > w + 2 * padding)
        throw ShapeError("conv2d kernel " + shape_str(weight.shape()) +
                         " larger than padded input " + shape_str(x.shape()));
    if (bias.defined() && (bias.ndim() != 1 || bias.dim(0) != cout))
        throw ShapeError("conv2d bias shape " + shape_str(bias.shape()) + " != [" +
                         std::to_string(cout) + "]");

    const int oh = (h + 2 * padding - kh) / stride + 1;
    const int ow = (w + 2 * padding - kw) / stride + 1;
    const std::int64_t ckk = static_cast<std::int64_t>(cin) * kh * kw;
    const std::int64_t ohw = static_cast<std::int64_t>(oh) * ow;

    Tensor out = Tensor::zeros({batch, cout, oh, ow});
    std::vector<double> col(static_cast<std::size_t>(ckk * ohw));
    const std::int64_t x_item = static_cast<std::int64_t>(cin) * h * w;
    const std::int64_t o_item = static_cast<std::int64_t>(cout) * ohw;

    for (int b = 0; b < batch; ++b) {
        im2col(x.data().data() + b * x_item, cin, h, w, kh, kw, stride, padding, oh, ow,
               col.data());
        double* ob = out.data().data() + b * o_item;
        gemm_nn(cout, static_cast<int>(ckk), static_cast<int>(ohw), weight.data().data(),
                col.data(), ob, false);
        if (bias.defined()) {
            for (int c = 0; c < cout; ++c) {
                const double bv = bias.data()[static_cast<std::size_t>(c)];
                double* oc = ob + static_cast<std::int64_t>(c) * ohw;
                for (std::int64_t i = 0; i < ohw; ++i) oc[i] += bv;
            }
        }
    }
    SEGKIT_CHECK_FINITE(out.data(), "conv2d");

    const bool needs_grad =
        x.requires_grad() || weight.requires_grad() || (bias.defined() && bias.requires_grad());
    if (tape.recording() && needs_grad) {
        out.set_requires_grad(true);
        tape.record([x, weight, bias, out, batch, cin, h, w, cout, kh, kw, stride, padding, oh, ow,
                     ckk, ohw, x_item, o_item]() mutable {
            if (!out.has_grad()) return;
            const double* go = out.node()->grad.data();
            std::vector<double> col(static_cast<std::size_t>(ckk * ohw));
            std::vector<double> dcol;
            if (x.requires_grad()) dcol.resize(static_cast<std::size_t>(ckk * ohw));
            for (int b = 0; b < batch; ++b) {
                const double* gob = go + b * o_item;
                if (weight.requires_grad()) {
                    im2col(x.data().data() + b * x_item, cin, h, w, kh, kw, stride, padding, oh,
                           ow, col.data());
                    gemm_nt(cout, static_cast<int>(ohw), static_cast<int>(ckk), gob, col.data(),
                            weight.grad().data(), true);
                }
                if (x.requires_grad()) {
                    gemm_tn(static_cast<int>(ckk), cout, static_cast<int>(ohw),
                            weight.data().data(), gob, dcol.data(), false);
                    col2im_add(dcol.data(), cin, h, w, kh, kw, stride, padding, oh, ow,
                               x.grad().data() + b * x_item);
                }
                if (bias.defined() && bias.requires_grad()) {
                    auto& gb = bias.grad();
                    for (int c = 0; c < cout; ++c) {
                        const double* oc = gob + static_cast<std::int64_t>(c) * ohw;
                        double s = 0.0;
                        for (std::int64_t i = 0; i < ohw; ++i) s += oc[i];
                        gb[static_cast<std::size_t>(c)] += s;
                    }
                }
            }
        });
    }
    return out;
}

// ----------------------------- upsample -----------------------------

Tensor upsample_nearest(Tape& tape, const Tensor& x, int factor) {
    if (factor < 1) throw ShapeError("upsample_nearest factor must be positive");
    if (x.ndim() < 2) throw ShapeError("upsample_nearest expects rank >= 2");
    const int h = x.dim(-2), w = x.dim(-1);
    const int oh = h * factor, ow = w * factor;
    const std::int64_t nb = x.numel() / (static_cast<std::int64_t>(h) * w);

    Shape out_shape = x.shape();
    out_shape[out_shape.size() - 2] = oh;
    out_shape[out_shape.size() - 1] = ow;
    Tensor out = Tensor::zeros(out_shape);

    for (std::int64_t b = 0; b < nb; ++b) {
        const double* xi = x.data().data() + b * h * w;
        double* oi = out.data().data() + b * static_cast<std::int64_t>(oh) * ow;
        for (int y = 0; y < oh; ++y) {
            const double* src = xi + static_cast<std::int64_t>(y / factor) * w;
            double* dst = oi + static_cast<std::int64_t>(y) * ow;
            for (int xx = 0; xx < ow; ++xx) dst[xx] = src[xx / factor];
        }
    }

    if (tape.recording() && x.requires_grad()) {
        out.set_requires_grad(true);
        tape.record([x, out, nb, h, w, oh, ow, factor]() mutable {
            if (!out.has_grad()) return;
            const double* go = out.node()->grad.data();
            double* gx = x.grad().data();
            for (std::int64_t b = 0; b < nb; ++b) {
                const double* gob = go + b * static_cast<std::int64_t>(oh) * ow;
                double* gxb = gx + b * h * w;
                for (int y = 0; y < oh; ++y)
                    for (int xx = 0; xx < ow; ++xx)
                        gxb[static_cast<std::int64_t>(y / factor) * w + xx / factor] +=
                            gob[static_cast<std::int64_t>(y) * ow + xx];
            }
        });
    }
    return out;
}

// ----------------------------- batchnorm -----------------------------

Tensor batchnorm(Tape& tape, const Tensor& x, const Tensor& gamma, const Tensor& beta,
                 Tensor& running_mean, Tensor& running_var, bool training, double momentum,
                 double eps, int channel_axis) {
    const int axis = normalize_axis(channel_axis, x.ndim());
    const int channels = x.dim(axis);
    if (gamma.numel() != channels || beta.numel() != channels)
        throw ShapeError("batchnorm gamma/beta size != channel count " + std::to_string(channels));
    if (running_mean.numel() != channels || running_var.numel() != channels)
        throw ShapeError("batchnorm running stats size != channel count");
    const std::int64_t inner = trailing_product(x.shape(), axis + 1);
    const std::int64_t group = x.numel() / channels;  // elements per channel
    if (group == 0) throw ShapeError("batchnorm on an empty batch");

    std::vector<double> mean(static_cast<std::size_t>(channels), 0.0);
    std::vector<double> inv_std(static_cast<std::size_t>(channels), 0.0);
    const std::int64_t n = x.numel();
    const auto& xd = x.data();

    auto channel_of = [&](std::int64_t i) {
        return static_cast<std::size_t>((i / inner) % channels);
    };

    if (training) {
        std::vector<double> var(static_cast<std::size_t>(channels), 0.0);
        for (std::int64_t i = 0; i < n; ++i) mean[channel_of(i)] += xd[static_cast<std::size_t>(i)];
        for (auto& m : mean) m /= static_cast<double>(group);
        for (std::int64_t i = 0; i < n; ++i) {
            const double d = xd[static_cast<std::size_t>(i)] - mean[channel_of(i)];
            var[channel_of(i)] += d * d;
        }
        for (auto& v : var) v /= static_cast<double>(group);
        for (int c = 0; c < channels; ++c) {
            inv_std[static_cast<std::size_t>(c)] =
                1.0 / std::sqrt(var[static_cast<std::size_t>(c)] + eps);
            running_mean.data()[static_cast<std::size_t>(c)] =
                (1.0 - momentum) * running_mean.data()[static_cast<std::size_t>(c)] +
                momentum * mean[static_cast<std::size_t>(c)];
            running_var.data()[static_cast<std::size_t>(c)] =
                (1.0 - momentum) * running_var.data()[static_cast<std::size_t>(c)] +
                momentum * var[static_cast<std::size_t>(c)];
        }
    } else {
        for (int c = 0; c < channels; ++c) {
            mean[static_cast<std::size_t>(c)] = running_mean.data()[static_cast<std::size_t>(c)];
            inv_std[static_cast<std::size_t>(c)] =
                1.0 / std::sqrt(running_var.data()[static_cast<std::size_t>(c)] + eps);
        }
    }

    Tensor out = Tensor::zeros(x.shape());
    auto xhat = std::make_shared<std::vector<double>>(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
        const std::size_t c = channel_of(i);
        const double xh = (xd[static_cast<std::size_t>(i)] - mean[c]) * inv_std[c];
        (*xhat)[static_cast<std::size_t>(i)] = xh;
        out.data()[static_cast<std::size_t>(i)] =
            gamma.data()[c] * xh + beta.data()[c];
    }
    SEGKIT_CHECK_FINITE(out.data(), "batchnorm");

    const bool needs_grad = x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
    if (tape.recording() && needs_grad) {
        out.set_requires_grad(true);
        auto istd = std::make_shared<std::vector<double>>(std::move(inv_std));
        tape.record([x, gamma, beta, out, xhat, istd, channels, inner, group, n, training,
                     channel_of]() mutable {
            if (!out.has_grad()) return;
            const double* go = out.node()->grad.data();
            std::vector<double> sum_go(static_cast<std::size_t>(channels), 0.0);
            std::vector<double> sum_goxh(static_cast<std::size_t>(channels), 0.0);
            for (std::int64_t i = 0; i < n; ++i) {
                const std::size_t c = channel_of(i);
                sum_go[c] += go[i];
                sum_goxh[c] += go[i] * (*xhat)[static_cast<std::size_t>(i)];
            }
            if (gamma.requires_grad()) {
                auto& gg = gamma.grad();
                for (int c = 0; c < channels; ++c) gg[static_cast<std::size_t>(c)] += sum_goxh[static_cast<std::size_t>(c)];
            }
            if (beta.requires_grad()) {
                auto& gb = beta.grad();
                for (int c = 0; c < channels; ++c) gb[static_cast<std::size_t>(c)] += sum_go[static_cast<std::size_t>(c)];
            }
            if (x.requires_grad()) {
                auto& gx = x.grad();
                const double inv_n = 1.0 / static_cast<double>(group);
                for (std::int64_t i = 0; i < n; ++i) {
                    const std::size_t c = channel_of(i);
                    const double g = gamma.data()[c] * (*istd)[c];
                    if (training) {
                        gx[static_cast<std::size_t>(i)] +=
                            g * (go[i] - inv_n * sum_go[c] -
                                 (*xhat)[static_cast<std::size_t>(i)] * inv_n * sum_goxh[c]);
                    } else {
                        gx[static_cast<std::size_t>(i)] += g * go[i];
                    }
                }
            }
        });
    }
    return out;
}

// ----------------------------- softmax -----------------------------

Tensor softmax(Tape& tape, const Tensor& x, int axis) {
    const int ax = normalize_axis(axis, x.ndim());
    const int len = x.dim(ax);
    const std::int64_t inner = trailing_product(x.shape(), ax + 1);
    const std::int64_t outer = x.numel() / (static_cast<std::int64_t>(len) * inner);

    Tensor out = Tensor::zeros(x.shape());
    const auto& xd = x.data();
    auto& od = out.data();
    for (std::int64_t o = 0; o < outer; ++o) {
        for (std::int64_t in = 0; in < inner; ++in) {
            const std::int64_t base = o * len * inner + in;
            double mx = xd[static_cast<std::size_t>(base)];
            for (int i = 1; i < len; ++i)
                mx = std::max(mx, xd[static_cast<std::size_t>(base + i * inner)]);
            double denom = 0.0;
            for (int i = 0; i < len; ++i) {
                const double e = std::exp(xd[static_cast<std::size_t>(base + i * inner)] - mx);
                od[static_cast<std::size_t>(base + i * inner)] = e;
                denom += e;
            }
            const double inv = 1.0 / denom;
            for (int i = 0; i < len; ++i) od[static_cast<std::size_t>(base + i * inner)] *= inv;
        }
    }
    SEGKIT_CHECK_FINITE(out.data(), "softmax");

    if (tape.recording() && x.requires_grad()) {
        out.set_requires_grad(true);
        tape.record([x, out, outer, inner, len]() mutable {
            if (!out.has_grad()) return;
            const double* go = out.node()->grad.data();
            const double* y = out.data().data();
            auto& gx = x.grad();
            for (std::int64_t o = 0; o < outer; ++o) {
                for (std::int64_t in = 0; in < inner; ++in) {
                    const std::int64_t base = o * len * inner + in;
                    double dot = 0.0;
                    for (int i = 0; i < len; ++i) {
                        const std::int64_t ix = base + i * inner;
                        dot += go[ix] * y[ix];
                    }
                    for (int i = 0; i < len; ++i) {
                        const std::int64_t ix = base + i * inner;
                        gx[static_cast<std::size_t>(ix)] += (go[ix] - dot) * y[ix];
                    }
                }
            }
        });
    }
    return out;
}

// ----------------------------- elementwise unary -----------------------------

namespace {

template <typename Fwd, typename Bwd>
Tensor unary_op(Tape& tape, const Tensor& x, const char* name, Fwd f, Bwd dfdx) {
    Tensor out = Tensor::zeros(x.shape());
    const auto& xd = x.data();
    auto& od = out.data();
    for (std::size_t i = 0; i < xd.size(); ++i) od[i] = f(xd[i]);
    SEGKIT_CHECK_FINITE(out.data(), name);
    if (tape.recording() && x.requires_grad()) {
        out.set_requires_grad(true);
        tape.record([x, out, dfdx]() mutable {
            if (!out.has_grad()) return;
            const double* go = out.node()->grad.data();
            const auto& xd = x.data();
            auto& gx = x.grad();
            for (std::size_t i = 0; i < xd.size(); ++i) gx[i] += go[i] * dfdx(xd[i]);
        });
    }
    return out;
}

}  // namespace

Tensor relu(Tape& tape, const Tensor& x) {
    return unary_op(
        tape, x, "relu", [](double v) { return v > 0.0 ? v : 0.0; },
        [](double v) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor hardswish(Tape& tape, const Tensor& x) {
    return unary_op(
        tape, x, "hardswish",
        [](double v) {
            const double c = std::min(std::max(v + 3.0, 0.0), 6.0);
            return v * c / 6.0;
        },
        [](double v) {
            if (v <= -3.0) return 0.0;
            if (v >= 3.0) return 1.0;
            return (2.0 * v + 3.0) / 6.0;
        });
}

Tensor sigmoid(Tape& tape, const Tensor& x) {
    return unary_op(
        tape, x, "sigmoid",
        [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
        [](double v) {
            const double s = 1.0 / (1.0 + std::exp(-v));
            return s * (1.0 - s);
        });
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
}

Tensor gelu(Tape& tape, const Tensor& x) {
    return unary_op(
        tape, x, "gelu",
        [](double v) {
            const double u = kGeluC * (v + 0.044715 * v * v * v);
            return 0.5 * v * (1.0 + std::tanh(u));
        },
        [](double v) {
            const double u = kGeluC * (v + 0.044715 * v * v * v);
            const double t = std::tanh(u);
            const double du = kGeluC * (1.0 + 3.0 * 0.044715 * v * v);
            return 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
        });
}

Tensor log_op(Tape& tape, const Tensor& x) {
    return unary_op(
        tape, x, "log", [](double v) { return std::log(v); },
        [](double v) { return 1.0 / v; });
}

Tensor clamp(Tape& tape, const Tensor& x, double lo, double hi) {
    return unary_op(
        tape, x, "clamp",
        [lo, hi](double v) { return std::min(std::max(v, lo), hi); },
        [lo, hi](double v) { return (v > lo && v < hi) ? 1.0 : 0.0; });
}

Tensor affine(Tape& tape, const Tensor& x, double a, double b) {
    return unary_op(
        tape, x, "affine", [a, b](double v) { return a * v + b; },
        [a](double) { return a; });
}

// ----------------------------- elementwise binary -----------------------------

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
    const bool same = a.shape() == b.shape();
    if (!same) {
        // b must be a trailing suffix of a
        if (b.ndim() > a.ndim() || a.numel() % b.numel() != 0)
            throw ShapeError("add shape mismatch: " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
        for (int i = 0; i < b.ndim(); ++i)
            if (b.dim(b.ndim() - 1 - i) != a.dim(a.ndim() - 1 - i))
                throw ShapeError("add shape mismatch: " + shape_str(a.shape()) + " vs " +
                                 shape_str(b.shape()));
    }
    Tensor out = Tensor::zeros(a.shape());
    const std::size_t nb = b.data().size();
    for (std::size_t i = 0; i < a.data().size(); ++i)
        out.data()[i] = a.data()[i] + b.data()[i % nb];
    SEGKIT_CHECK_FINITE(out.data(), "add");

    if (tape.recording() && (a.requires_grad() || b.requires_grad())) {
        out.set_requires_grad(true);
        tape.record([a, b, out, nb]() mutable {
            if (!out.has_grad()) return;
            const auto& go = out.node()->grad;
            if (a.requires_grad()) {
                auto& ga = a.grad();
                for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
            }
            if (b.requires_grad()) {
                auto& gb = b.grad();
                for (std::size_t i = 0; i < go.size(); ++i) gb[i % nb] += go[i];
            }
        });
    }
    return out;
}

namespace {
void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + " shape mismatch: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}
}  // namespace

Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    Tensor out = Tensor::zeros(a.shape());
    for (std::size_t i = 0; i < a.data().size(); ++i) out.data()[i] = a.data()[i] * b.data()[i];
    SEGKIT_CHECK_FINITE(out.data(), "mul");
    if (tape.recording() && (a.requires_grad() || b.requires_grad())) {
        out.set_requires_grad(true);
        tape.record([a, b, out]() mutable {
            if (!out.has_grad()) return;
            const auto& go = out.node()->grad;
            if (a.requires_grad()) {
                auto& ga = a.grad();
                for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * b.data()[i];
            }
            if (b.requires_grad()) {
                auto& gb = b.grad();
                for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * a.data()[i];
            }
        });
    }
    return out;
}

Tensor div(Tape& tape, const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "div");
    Tensor out = Tensor::zeros(a.shape());
    for (std::size_t i = 0; i < a.data().size(); ++i) out.data()[i] = a.data()[i] / b.data()[i];
    SEGKIT_CHECK_FINITE(out.data(), "div");
    if (tape.recording() && (a.requires_grad() || b.requires_grad())) {
        out.set_requires_grad(true);
        tape.record([a, b, out]() mutable {
            if (!out.has_grad()) return;
            const auto& go = out.node()->grad;
            if (a.requires_grad()) {
                auto& ga = a.grad();
                for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] / b.data()[i];
            }
            if (b.requires_grad()) {
                auto& gb = b.grad();
                for (std::size_t i = 0; i < go.size(); ++i)
                    gb[i] -= go[i] * a.data()[i] / (b.data()[i] * b.data()[i]);
            }
        });
    }
    return out;
}

// ----------------------------- concat -----------------------------

Tensor concat(Tape& tape, std::span<const Tensor> parts, int axis) {
    if (parts.empty()) throw ShapeError("concat of zero tensors");
    const int nd = parts[0].ndim();
    const int ax = normalize_axis(axis, nd);
    int axis_total = 0;
    for (const Tensor& p : parts) {
        if (p.ndim() != nd)
            throw ShapeError("concat rank mismatch: " + shape_str(parts[0].shape()) + " vs " +
                             shape_str(p.shape()));
        for (int d = 0; d < nd; ++d) {
            if (d != ax && p.dim(d) != parts[0].dim(d))
                throw ShapeError("concat non-axis dim mismatch: " + shape_str(parts[0].shape()) +
                                 " vs " + shape_str(p.shape()));
        }
        axis_total += p.dim(ax);
    }
    Shape out_shape = parts[0].shape();
    out_shape[static_cast<std::size_t>(ax)] = axis_total;
    Tensor out = Tensor::zeros(out_shape);

    const std::int64_t inner = trailing_product(out_shape, ax + 1);
    const std::int64_t outer = out.numel() / (static_cast<std::int64_t>(axis_total) * inner);

    std::int64_t offset = 0;  // running offset along the axis
    bool any_grad = false;
    std::vector<std::int64_t> offsets;
    for (const Tensor& p : parts) {
        offsets.push_back(offset);
        const std::int64_t span = p.dim(ax) * inner;
        for (std::int64_t o = 0; o < outer; ++o) {
            std::copy_n(p.data().data() + o * span, span,
                        out.data().data() + o * axis_total * inner + offset * inner);
        }
        offset += p.dim(ax);
        any_grad = any_grad || p.requires_grad();
    }

    if (tape.recording() && any_grad) {
        out.set_requires_grad(true);
        std::vector<Tensor> held(parts.begin(), parts.end());
        tape.record([held = std::move(held), offsets, out, outer, inner, axis_total,
                     ax]() mutable {
            if (!out.has_grad()) return;
            const double* go = out.node()->grad.data();
            for (std::size_t pi = 0; pi < held.size(); ++pi) {
                Tensor& p = held[pi];
                if (!p.requires_grad()) continue;
                const std::int64_t span = p.dim(ax) * inner;
                auto& gp = p.grad();
                for (std::int64_t o = 0; o < outer; ++o) {
                    const double* src = go + o * axis_total * inner + offsets[pi] * inner;
                    double* dst = gp.data() + o * span;
                    for (std::int64_t i = 0; i < span; ++i) dst[i] += src[i];
                }
            }
        });
    }
    return out;
}

// ----------------------------- reductions -----------------------------

Tensor sum_all(Tape& tape, const Tensor& x) {
    double s = 0.0;
    for (double v : x.data()) s += v;
    Tensor out = Tensor::scalar(s);
    if (tape.recording() && x.requires_grad()) {
        out.set_requires_grad(true);
        tape.record([x, out]() mutable {
            if (!out.has_grad()) return;
            const double g = out.node()->grad[0];
            auto& gx = x.grad();
            for (auto& v : gx) v += g;
        });
    }
    return out;
}

Tensor mean_all(Tape& tape, const Tensor& x) {
    const double inv = 1.0 / static_cast<double>(x.numel());
    double s = 0.0;
    for (double v : x.data()) s += v;
    Tensor out = Tensor::scalar(s * inv);
    if (tape.recording() && x.requires_grad()) {
        out.set_requires_grad(true);
        tape.record([x, out, inv]() mutable {
            if (!out.has_grad()) return;
            const double g = out.node()->grad[0] * inv;
            auto& gx = x.grad();
            for (auto& v : gx) v += g;
        });
    }
    return out;
}

Tensor sum_axes(Tape& tape, const Tensor& x, const std::vector<int>& axes) {
    const int nd = x.ndim();
    std::vector<bool> reduced(static_cast<std::size_t>(nd), false);
    for (int a : axes) {
        const int ax = normalize_axis(a, nd);
        if (reduced[static_cast<std::size_t>(ax)]) throw ShapeError("sum_axes duplicate axis");
        reduced[static_cast<std::size_t>(ax)] = true;
    }
    Shape out_shape;
    for (int d = 0; d < nd; ++d)
        if (!reduced[static_cast<std::size_t>(d)]) out_shape.push_back(x.dim(d));
    if (out_shape.empty()) out_shape = {1};

    // Per-dim contribution of an input coordinate to the output flat index.
    std::vector<std::int64_t> out_mul(static_cast<std::size_t>(nd), 0);
    {
        std::int64_t mul = 1;
        for (int d = nd - 1; d >= 0; --d) {
            if (!reduced[static_cast<std::size_t>(d)]) {
                out_mul[static_cast<std::size_t>(d)] = mul;
                mul *= x.dim(d);
            }
        }
    }
    std::vector<std::int64_t> in_stride(static_cast<std::size_t>(nd), 1);
    for (int d = nd - 2; d >= 0; --d)
        in_stride[static_cast<std::size_t>(d)] =
            in_stride[static_cast<std::size_t>(d + 1)] * x.dim(d + 1);

    auto map_out = [nd, &in_stride, &out_mul, &x](std::int64_t i) {
        std::int64_t oi = 0;
        for (int d = 0; d < nd; ++d) {
            const std::int64_t coord = (i / in_stride[static_cast<std::size_t>(d)]) % x.dim(d);
            oi += coord * out_mul[static_cast<std::size_t>(d)];
        }
        return oi;
    };

    Tensor out = Tensor::zeros(out_shape);
    for (std::int64_t i = 0; i < x.numel(); ++i)
        out.data()[static_cast<std::size_t>(map_out(i))] += x.data()[static_cast<std::size_t>(i)];

    if (tape.recording() && x.requires_grad()) {
        out.set_requires_grad(true);
        tape.record([x, out, map_out]() mutable {
            if (!out.has_grad()) return;
            const auto& go = out.node()->grad;
            auto& gx = x.grad();
            for (std::int64_t i = 0; i < x.numel(); ++i)
                gx[static_cast<std::size_t>(i)] += go[static_cast<std::size_t>(map_out(i))];
        });
    }
    return out;
}

// ----------------------------- maxpool -----------------------------

Tensor maxpool2d(Tape& tape, const Tensor& x) {
    if (x.ndim() < 2) throw ShapeError("maxpool2d expects rank >= 2");
    const int h = x.dim(-2), w = x.dim(-1);
    if (h < 2 || w < 2)
        throw ShapeError("maxpool2d needs spatial dims >= 2, got " + shape_str(x.shape()));
    const int oh = h / 2, ow = w / 2;
    const std::int64_t nb = x.numel() / (static_cast<std::int64_t>(h) * w);

    Shape out_shape = x.shape();
    out_shape[out_shape.size() - 2] = oh;
    out_shape[out_shape.size() - 1] = ow;
    Tensor out = Tensor::zeros(out_shape);
    auto argmax = std::make_shared<std::vector<std::int64_t>>(
        static_cast<std::size_t>(out.numel()));

    for (std::int64_t b = 0; b < nb; ++b) {
        const double* xi = x.data().data() + b * h * w;
        for (int y = 0; y < oh; ++y) {
            for (int xx = 0; xx < ow; ++xx) {
                std::int64_t best = static_cast<std::int64_t>(2 * y) * w + 2 * xx;
                double bv = xi[best];
                const std::int64_t cands[3] = {best + 1, best + w, best + w + 1};
                for (std::int64_t c : cands) {
                    const double v = xi[c];
                    if (v > bv) {
                        bv = v;
                        best = c;
                    }
                }
                const std::int64_t oi = b * oh * ow + static_cast<std::int64_t>(y) * ow + xx;
                out.data()[static_cast<std::size_t>(oi)] = bv;
                (*argmax)[static_cast<std::size_t>(oi)] = b * h * w + best;
            }
        }
    }

    if (tape.recording() && x.requires_grad()) {
        out.set_requires_grad(true);
        tape.record([x, out, argmax]() mutable {
            if (!out.has_grad()) return;
            const auto& go = out.node()->grad;
            auto& gx = x.grad();
            for (std::size_t i = 0; i < go.size(); ++i)
                gx[static_cast<std::size_t>((*argmax)[i])] += go[i];
        });
    }
    return out;
}

// ----------------------------- layout ops -----------------------------

Tensor reshape(Tape& tape, const Tensor& x, Shape new_shape) {
    if (shape_numel(new_shape) != x.numel())
        throw ShapeError("reshape " + shape_str(x.shape()) + " -> " + shape_str(new_shape) +
                         " changes element count");
    Tensor out = Tensor::from_data(std::move(new_shape), x.data());
    if (tape.recording() && x.requires_grad()) {
        out.set_requires_grad(true);
        tape.record([x, out]() mutable {
            if (!out.has_grad()) return;
            const auto& go = out.node()->grad;
            auto& gx = x.grad();
            for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
        });
    }
    return out;
}

namespace {

// out[i] = in[perm_map(i)] index arithmetic for permutations, shared by
// forward and backward.
struct PermMap {
    Shape out_shape;
    std::vector<std::int64_t> out_stride_in;  // stride in the INPUT for each output axis

    std::int64_t to_input(std::int64_t out_flat, const Shape& os) const {
        std::int64_t in_flat = 0;
        for (int d = static_cast<int>(os.size()) - 1; d >= 0; --d) {
            const std::int64_t coord = out_flat % os[static_cast<std::size_t>(d)];
            out_flat /= os[static_cast<std::size_t>(d)];
            in_flat += coord * out_stride_in[static_cast<std::size_t>(d)];
        }
        return in_flat;
    }
};

}  // namespace

Tensor permute(Tape& tape, const Tensor& x, const std::vector<int>& perm) {
    const int nd = x.ndim();
    if (static_cast<int>(perm.size()) != nd) throw ShapeError("permute rank mismatch");
    std::vector<bool> seen(static_cast<std::size_t>(nd), false);
    for (int p : perm) {
        if (p < 0 || p >= nd || seen[static_cast<std::size_t>(p)])
            throw ShapeError("permute is not a permutation");
        seen[static_cast<std::size_t>(p)] = true;
    }
    std::vector<std::int64_t> in_stride(static_cast<std::size_t>(nd), 1);
    for (int d = nd - 2; d >= 0; --d)
        in_stride[static_cast<std::size_t>(d)] =
            in_stride[static_cast<std::size_t>(d + 1)] * x.dim(d + 1);

    PermMap pm;
    for (int d = 0; d < nd; ++d) {
        pm.out_shape.push_back(x.dim(perm[static_cast<std::size_t>(d)]));
        pm.out_stride_in.push_back(in_stride[static_cast<std::size_t>(perm[static_cast<std::size_t>(d)])]);
    }

    Tensor out = Tensor::zeros(pm.out_shape);
    for (std::int64_t i = 0; i < out.numel(); ++i)
        out.data()[static_cast<std::size_t>(i)] =
            x.data()[static_cast<std::size_t>(pm.to_input(i, pm.out_shape))];

    if (tape.recording() && x.requires_grad()) {
        out.set_requires_grad(true);
        tape.record([x, out, pm]() mutable {
            if (!out.has_grad()) return;
            const auto& go = out.node()->grad;
            auto& gx = x.grad();
            for (std::int64_t i = 0; i < out.numel(); ++i)
                gx[static_cast<std::size_t>(pm.to_input(i, pm.out_shape))] +=
                    go[static_cast<std::size_t>(i)];
        });
    }
    return out;
}

Tensor gather_rows(Tape& tape, const Tensor& x, const std::vector<int>& rows) {
    if (x.ndim() != 3) throw ShapeError("gather_rows expects [B,N,C], got " + shape_str(x.shape()));
    const int B = x.dim(0), N = x.dim(1), C = x.dim(2);
    for (int r : rows)
        if (r < 0 || r >= N) throw ShapeError("gather_rows row index out of range");
    const int R = static_cast<int>(rows.size());
    Tensor out = Tensor::zeros({B, R, C});
    for (int b = 0; b < B; ++b)
        for (int r = 0; r < R; ++r)
            std::copy_n(x.data().data() + (static_cast<std::int64_t>(b) * N + rows[static_cast<std::size_t>(r)]) * C,
                        C,
                        out.data().data() + (static_cast<std::int64_t>(b) * R + r) * C);

    if (tape.recording() && x.requires_grad()) {
        out.set_requires_grad(true);
        tape.record([x, out, rows, B, N, C, R]() mutable {
            if (!out.has_grad()) return;
            const double* go = out.node()->grad.data();
            auto& gx = x.grad();
            for (int b = 0; b < B; ++b)
                for (int r = 0; r < R; ++r) {
                    const double* src = go + (static_cast<std::int64_t>(b) * R + r) * C;
                    double* dst =
                        gx.data() + (static_cast<std::int64_t>(b) * N + rows[static_cast<std::size_t>(r)]) * C;
                    for (int c = 0; c < C; ++c) dst[c] += src[c];
                }
        });
    }
    return out;
}

Tensor add_relative_bias(Tape& tape, const Tensor& logits, const Tensor& table,
                         const std::vector<int>& index) {
    if (logits.ndim() != 4) throw ShapeError("add_relative_bias expects [B,H,Nq,Nk] logits");
    if (table.ndim() != 2) throw ShapeError("add_relative_bias expects [H,offsets] table");
    const int B = logits.dim(0), H = logits.dim(1), Nq = logits.dim(2), Nk = logits.dim(3);
    if (table.dim(0) != H) throw ShapeError("add_relative_bias head count mismatch");
    if (static_cast<int>(index.size()) != Nq * Nk)
        throw ShapeError("add_relative_bias index size != Nq*Nk");
    const int n_off = table.dim(1);
    for (int i : index)
        if (i < 0 || i >= n_off) throw ShapeError("add_relative_bias offset id out of range");

    Tensor out = Tensor::zeros(logits.shape());
    const std::int64_t qk = static_cast<std::int64_t>(Nq) * Nk;
    for (int b = 0; b < B; ++b)
        for (int h = 0; h < H; ++h) {
            const double* trow = table.data().data() + static_cast<std::int64_t>(h) * n_off;
            const double* src =
                logits.data().data() + (static_cast<std::int64_t>(b) * H + h) * qk;
            double* dst = out.data().data() + (static_cast<std::int64_t>(b) * H + h) * qk;
            for (std::int64_t i = 0; i < qk; ++i)
                dst[i] = src[i] + trow[index[static_cast<std::size_t>(i)]];
        }

    if (tape.recording() && (logits.requires_grad() || table.requires_grad())) {
        out.set_requires_grad(true);
        tape.record([logits, table, out, index, B, H, qk, n_off]() mutable {
            if (!out.has_grad()) return;
            const double* go = out.node()->grad.data();
            if (logits.requires_grad()) {
                auto& gl = logits.grad();
                for (std::size_t i = 0; i < gl.size(); ++i) gl[i] += go[i];
            }
            if (table.requires_grad()) {
                auto& gt = table.grad();
                for (int b = 0; b < B; ++b)
                    for (int h = 0; h < H; ++h) {
                        const double* src = go + (static_cast<std::int64_t>(b) * H + h) * qk;
                        double* trow = gt.data() + static_cast<std::int64_t>(h) * n_off;
                        for (std::int64_t i = 0; i < qk; ++i)
                            trow[index[static_cast<std::size_t>(i)]] += src[i];
                    }
            }
        });
    }
    return out;
}

}  // namespace segkit
