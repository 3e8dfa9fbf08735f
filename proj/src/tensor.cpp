#define EIGEN_DONT_PARALLELIZE
#include "calibseg/tensor.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>
#include <stdexcept>

namespace calibseg {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRowMat = Eigen::Map<RowMat>;
using MapConstRowMat = Eigen::Map<const RowMat>;

std::int64_t shape_numel(const Shape& shape) {
    std::int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << "]";
    return os.str();
}

void set_thread_cap(int n) { Eigen::setNbThreads(n < 1 ? 1 : n); }

static void check_shape_valid(const Shape& shape) {
    if (shape.size() > 4) throw std::invalid_argument("tensor rank > 4 not supported");
    for (int d : shape)
        if (d <= 0) throw std::invalid_argument("tensor extent must be positive, got " + shape_str(shape));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    check_shape_valid(shape);
    Tensor t;
    t.s_ = std::make_shared<Storage>();
    t.s_->shape = std::move(shape);
    t.s_->data.assign(static_cast<std::size_t>(shape_numel(t.s_->shape)), 0.0f);
    if (requires_grad) t.set_requires_grad(true);
    return t;
}

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.s_->data.begin(), t.s_->data.end(), value);
    return t;
}

Tensor Tensor::from_data(Shape shape, std::vector<float> data, bool requires_grad) {
    check_shape_valid(shape);
    if (static_cast<std::int64_t>(data.size()) != shape_numel(shape))
        throw std::invalid_argument("data size does not match shape " + shape_str(shape));
    Tensor t;
    t.s_ = std::make_shared<Storage>();
    t.s_->shape = std::move(shape);
    t.s_->data = std::move(data);
    if (requires_grad) t.set_requires_grad(true);
    return t;
}

Tensor Tensor::scalar(float value, bool requires_grad) {
    return from_data({1}, {value}, requires_grad);
}

std::span<float> Tensor::grad() {
    if (!requires_grad()) throw std::logic_error("grad() on tensor without requires_grad");
    return s_->grad;
}

std::span<const float> Tensor::grad() const {
    if (!requires_grad()) throw std::logic_error("grad() on tensor without requires_grad");
    return s_->grad;
}

void Tensor::set_requires_grad(bool rg) {
    if (!s_) throw std::logic_error("set_requires_grad on undefined tensor");
    s_->requires_grad = rg;
    if (rg && s_->grad.size() != s_->data.size()) s_->grad.assign(s_->data.size(), 0.0f);
    if (!rg) s_->grad.clear();
}

void Tensor::zero_grad() {
    if (requires_grad()) std::fill(s_->grad.begin(), s_->grad.end(), 0.0f);
}

float Tensor::item() const {
    if (!s_ || s_->data.size() != 1) throw std::logic_error("item() requires a scalar tensor");
    return s_->data[0];
}

Tensor Tensor::clone(bool requires_grad) const {
    if (!s_) return Tensor();
    return from_data(s_->shape, s_->data, requires_grad);
}

void Tape::backward(const Tensor& root) {
    if (!root.defined() || root.numel() != 1)
        throw std::invalid_argument("backward root must be a scalar tensor");
    if (!root.requires_grad())
        throw std::invalid_argument("backward root does not require grad");
    Tensor r = root;
    r.grad()[0] += 1.0f;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
}

// --- conv2d ----------------------------------------------------------------

namespace {

// Unrolls one image plane set [Cin,H,W] into a row-major (Cin*k*k) x (Ho*Wo)
// patch matrix, zero-filling outside the padded border.
void im2col(const float* in, int cin, int h, int w, int k, int pad, int ho, int wo, float* col) {
    for (int ci = 0; ci < cin; ++ci) {
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                float* dst = col + (static_cast<std::size_t>((ci * k + ky) * k + kx)) *
                                       static_cast<std::size_t>(ho) * static_cast<std::size_t>(wo);
                for (int yo = 0; yo < ho; ++yo) {
                    const int yi = yo + ky - pad;
                    float* row = dst + static_cast<std::size_t>(yo) * wo;
                    if (yi < 0 || yi >= h) {
                        std::memset(row, 0, sizeof(float) * static_cast<std::size_t>(wo));
                        continue;
                    }
                    const int xo_lo = std::min(wo, std::max(0, pad - kx));
                    const int xo_hi = std::max(xo_lo, std::min(wo, w - kx + pad));
                    if (xo_lo > 0) std::memset(row, 0, sizeof(float) * static_cast<std::size_t>(xo_lo));
                    if (xo_hi > xo_lo) {
                        const float* src = in + (static_cast<std::size_t>(ci) * h + yi) * w + (xo_lo + kx - pad);
                        std::memcpy(row + xo_lo, src, sizeof(float) * static_cast<std::size_t>(xo_hi - xo_lo));
                    }
                    if (xo_hi < wo)
                        std::memset(row + xo_hi, 0, sizeof(float) * static_cast<std::size_t>(wo - xo_hi));
                }
            }
        }
    }
}

// Adjoint of im2col: scatter-adds the patch matrix back into the image plane.
void col2im_add(const float* col, int cin, int h, int w, int k, int pad, int ho, int wo, float* in_grad) {
    for (int ci = 0; ci < cin; ++ci) {
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                const float* src = col + (static_cast<std::size_t>((ci * k + ky) * k + kx)) *
                                             static_cast<std::size_t>(ho) * static_cast<std::size_t>(wo);
                for (int yo = 0; yo < ho; ++yo) {
                    const int yi = yo + ky - pad;
                    if (yi < 0 || yi >= h) continue;
                    const float* row = src + static_cast<std::size_t>(yo) * wo;
                    const int xo_lo = std::min(wo, std::max(0, pad - kx));
                    const int xo_hi = std::max(xo_lo, std::min(wo, w - kx + pad));
                    if (xo_hi <= xo_lo) continue;
                    float* dst = in_grad + (static_cast<std::size_t>(ci) * h + yi) * w + (xo_lo + kx - pad);
                    for (int xo = xo_lo; xo < xo_hi; ++xo) dst[xo - xo_lo] += row[xo];
                }
            }
        }
    }
}

} // namespace

Tensor conv2d(Tape& tape, const Tensor& input, const Tensor& kernel, const Tensor& bias, int padding) {
    if (input.rank() != 4) throw std::invalid_argument("conv2d: input must be [N,Cin,H,W]");
    if (kernel.rank() != 4) throw std::invalid_argument("conv2d: kernel must be [Cout,Cin,k,k]");
    if (bias.rank() != 1) throw std::invalid_argument("conv2d: bias must be [Cout]");
    const int n = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
    const int cout = kernel.dim(0), k = kernel.dim(2);
    if (kernel.dim(2) != kernel.dim(3)) throw std::invalid_argument("conv2d: kernel must be square");
    if (kernel.dim(1) != cin)
        throw std::invalid_argument("conv2d: channel mismatch, input Cin=" + std::to_string(cin) +
                                    " kernel Cin=" + std::to_string(kernel.dim(1)));
    if (k % 2 == 0) throw std::invalid_argument("conv2d: kernel size must be odd");
    if (padding < 0) throw std::invalid_argument("conv2d: padding must be >= 0");
    if (bias.dim(0) != cout) throw std::invalid_argument("conv2d: bias size mismatch");
    const int ho = h + 2 * padding - k + 1;
    const int wo = w + 2 * padding - k + 1;
    if (ho < 1 || wo < 1) throw std::invalid_argument("conv2d: output would be empty");

    Tensor out = Tensor::zeros({n, cout, ho, wo});
    const std::size_t ckk = static_cast<std::size_t>(cin) * k * k;
    const std::size_t spatial = static_cast<std::size_t>(ho) * wo;
    std::vector<float> col(ckk * spatial);

    MapConstRowMat kmat(kernel.data().data(), cout, static_cast<Eigen::Index>(ckk));
    const float* bptr = bias.data().data();
    for (int i = 0; i < n; ++i) {
        const float* in_ptr = input.data().data() + static_cast<std::size_t>(i) * cin * h * w;
        float* out_ptr = out.data().data() + static_cast<std::size_t>(i) * cout * spatial;
        im2col(in_ptr, cin, h, w, k, padding, ho, wo, col.data());
        MapConstRowMat colmat(col.data(), static_cast<Eigen::Index>(ckk), static_cast<Eigen::Index>(spatial));
        MapRowMat omat(out_ptr, cout, static_cast<Eigen::Index>(spatial));
        omat.noalias() = kmat * colmat;
        for (int co = 0; co < cout; ++co) omat.row(co).array() += bptr[co];
    }

    if (input.requires_grad() || kernel.requires_grad() || bias.requires_grad()) {
        Tensor out_h = out;
        out_h.set_requires_grad(true);
        Tensor in_h = input, k_h = kernel, b_h = bias;
        tape.record([in_h, k_h, b_h, out_h, n, cin, h, w, cout, k, padding, ho, wo]() mutable {
            const std::size_t ckk = static_cast<std::size_t>(cin) * k * k;
            const std::size_t spatial = static_cast<std::size_t>(ho) * wo;
            std::vector<float> col(ckk * spatial);
            std::vector<float> dcol;
            if (in_h.requires_grad()) dcol.resize(ckk * spatial);
            MapConstRowMat kmat(k_h.data().data(), cout, static_cast<Eigen::Index>(ckk));
            for (int i = 0; i < n; ++i) {
                const float* go = out_h.grad().data() + static_cast<std::size_t>(i) * cout * spatial;
                MapConstRowMat gmat(go, cout, static_cast<Eigen::Index>(spatial));
                if (k_h.requires_grad()) {
                    const float* in_ptr = in_h.data().data() + static_cast<std::size_t>(i) * cin * h * w;
                    im2col(in_ptr, cin, h, w, k, padding, ho, wo, col.data());
                    MapConstRowMat colmat(col.data(), static_cast<Eigen::Index>(ckk),
                                          static_cast<Eigen::Index>(spatial));
                    MapRowMat kg(k_h.grad().data(), cout, static_cast<Eigen::Index>(ckk));
                    kg.noalias() += gmat * colmat.transpose();
                }
                if (b_h.requires_grad()) {
                    float* bg = b_h.grad().data();
                    for (int co = 0; co < cout; ++co) bg[co] += gmat.row(co).sum();
                }
                if (in_h.requires_grad()) {
                    MapRowMat dcolmat(dcol.data(), static_cast<Eigen::Index>(ckk),
                                      static_cast<Eigen::Index>(spatial));
                    dcolmat.noalias() = kmat.transpose() * gmat;
                    float* ig = in_h.grad().data() + static_cast<std::size_t>(i) * cin * h * w;
                    col2im_add(dcol.data(), cin, h, w, k, padding, ho, wo, ig);
                }
            }
        });
    }
    return out;
}

Tensor relu(Tape& tape, const Tensor& x) {
    Tensor y = Tensor::zeros(x.shape());
    auto xd = x.data();
    auto yd = y.data();
    for (std::size_t i = 0; i < xd.size(); ++i) yd[i] = xd[i] > 0.0f ? xd[i] : 0.0f;
    if (x.requires_grad()) {
        y.set_requires_grad(true);
        Tensor xh = x, yh = y;
        tape.record([xh, yh]() mutable {
            auto g = yh.grad();
            auto xg = xh.grad();
            auto xd = xh.data();
            for (std::size_t i = 0; i < xd.size(); ++i)
                if (xd[i] > 0.0f) xg[i] += g[i];
        });
    }
    return y;
}

Tensor downsample2x(Tape& tape, const Tensor& x) {
    if (x.rank() != 4) throw std::invalid_argument("downsample2x: input must be [N,C,H,W]");
    const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (h % 2 != 0 || w % 2 != 0) throw std::invalid_argument("downsample2x: H and W must be even");
    const int ho = h / 2, wo = w / 2;
    Tensor y = Tensor::zeros({n, c, ho, wo});
    auto xd = x.data();
    auto yd = y.data();
    for (int p = 0; p < n * c; ++p) {
        const float* in = xd.data() + static_cast<std::size_t>(p) * h * w;
        float* out = yd.data() + static_cast<std::size_t>(p) * ho * wo;
        for (int yy = 0; yy < ho; ++yy)
            for (int xx = 0; xx < wo; ++xx) {
                const float* q = in + (2 * yy) * w + 2 * xx;
                out[yy * wo + xx] = 0.25f * (q[0] + q[1] + q[w] + q[w + 1]);
            }
    }
    if (x.requires_grad()) {
        y.set_requires_grad(true);
        Tensor xh = x, yh = y;
        tape.record([xh, yh, n, c, h, w, ho, wo]() mutable {
            auto g = yh.grad();
            auto xg = xh.grad();
            for (int p = 0; p < n * c; ++p) {
                float* dst = xg.data() + static_cast<std::size_t>(p) * h * w;
                const float* src = g.data() + static_cast<std::size_t>(p) * ho * wo;
                for (int yy = 0; yy < ho; ++yy)
                    for (int xx = 0; xx < wo; ++xx) {
                        const float v = 0.25f * src[yy * wo + xx];
                        float* q = dst + (2 * yy) * w + 2 * xx;
                        q[0] += v;
                        q[1] += v;
                        q[w] += v;
                        q[w + 1] += v;
                    }
            }
        });
    }
    return y;
}

Tensor upsample2x(Tape& tape, const Tensor& x) {
    if (x.rank() != 4) throw std::invalid_argument("upsample2x: input must be [N,C,H,W]");
    const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const int ho = h * 2, wo = w * 2;
    Tensor y = Tensor::zeros({n, c, ho, wo});
    auto xd = x.data();
    auto yd = y.data();
    for (int p = 0; p < n * c; ++p) {
        const float* in = xd.data() + static_cast<std::size_t>(p) * h * w;
        float* out = yd.data() + static_cast<std::size_t>(p) * ho * wo;
        for (int yy = 0; yy < h; ++yy)
            for (int xx = 0; xx < w; ++xx) {
                const float v = in[yy * w + xx];
                float* q = out + (2 * yy) * wo + 2 * xx;
                q[0] = v;
                q[1] = v;
                q[wo] = v;
                q[wo + 1] = v;
            }
    }
    if (x.requires_grad()) {
        y.set_requires_grad(true);
        Tensor xh = x, yh = y;
        tape.record([xh, yh, n, c, h, w, wo]() mutable {
            auto g = yh.grad();
            auto xg = xh.grad();
            for (int p = 0; p < n * c; ++p) {
                float* dst = xg.data() + static_cast<std::size_t>(p) * h * w;
                const float* src = g.data() + static_cast<std::size_t>(p) * (2 * h) * wo;
                for (int yy = 0; yy < h; ++yy)
                    for (int xx = 0; xx < w; ++xx) {
                        const float* q = src + (2 * yy) * wo + 2 * xx;
                        dst[yy * w + xx] += q[0] + q[1] + q[wo] + q[wo + 1];
                    }
            }
        });
    }
    return y;
}

Tensor concat_channels(Tape& tape, const Tensor& a, const Tensor& b) {
    if (a.rank() != 4 || b.rank() != 4) throw std::invalid_argument("concat_channels: inputs must be [N,C,H,W]");
    if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3))
        throw std::invalid_argument("concat_channels: N/H/W mismatch " + shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
    const int n = a.dim(0), ca = a.dim(1), cb = b.dim(1), h = a.dim(2), w = a.dim(3);
    Tensor y = Tensor::zeros({n, ca + cb, h, w});
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    for (int i = 0; i < n; ++i) {
        std::memcpy(y.data().data() + (static_cast<std::size_t>(i) * (ca + cb)) * plane,
                    a.data().data() + static_cast<std::size_t>(i) * ca * plane, sizeof(float) * ca * plane);
        std::memcpy(y.data().data() + (static_cast<std::size_t>(i) * (ca + cb) + ca) * plane,
                    b.data().data() + static_cast<std::size_t>(i) * cb * plane, sizeof(float) * cb * plane);
    }
    if (a.requires_grad() || b.requires_grad()) {
        Tensor yh = y;
        yh.set_requires_grad(true);
        Tensor ah = a, bh = b;
        tape.record([ah, bh, yh, n, ca, cb, plane]() mutable {
            auto g = yh.grad();
            for (int i = 0; i < n; ++i) {
                if (ah.requires_grad()) {
                    float* dst = ah.grad().data() + static_cast<std::size_t>(i) * ca * plane;
                    const float* src = g.data() + (static_cast<std::size_t>(i) * (ca + cb)) * plane;
                    for (std::size_t j = 0; j < ca * plane; ++j) dst[j] += src[j];
                }
                if (bh.requires_grad()) {
                    float* dst = bh.grad().data() + static_cast<std::size_t>(i) * cb * plane;
                    const float* src = g.data() + (static_cast<std::size_t>(i) * (ca + cb) + ca) * plane;
                    for (std::size_t j = 0; j < cb * plane; ++j) dst[j] += src[j];
                }
            }
        });
    }
    return y;
}

Tensor softmax_channels(Tape& tape, const Tensor& logits) {
    if (logits.rank() != 4) throw std::invalid_argument("softmax_channels: input must be [N,C,H,W]");
    const int n = logits.dim(0), c = logits.dim(1), h = logits.dim(2), w = logits.dim(3);
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    Tensor y = Tensor::zeros(logits.shape());
    auto zd = logits.data();
    auto yd = y.data();
    for (int i = 0; i < n; ++i) {
        const float* z = zd.data() + static_cast<std::size_t>(i) * c * plane;
        float* out = yd.data() + static_cast<std::size_t>(i) * c * plane;
        for (std::size_t p = 0; p < plane; ++p) {
            float m = z[p];
            for (int ch = 1; ch < c; ++ch) m = std::max(m, z[ch * plane + p]);
            float sum = 0.0f;
            for (int ch = 0; ch < c; ++ch) {
                const float e = std::exp(z[ch * plane + p] - m);
                out[ch * plane + p] = e;
                sum += e;
            }
            const float inv = 1.0f / sum;
            for (int ch = 0; ch < c; ++ch) out[ch * plane + p] *= inv;
        }
    }
    if (logits.requires_grad()) {
        Tensor yh = y;
        yh.set_requires_grad(true);
        Tensor zh = logits;
        tape.record([zh, yh, n, c, plane]() mutable {
            auto g = yh.grad();
            auto yv = yh.data();
            auto zg = zh.grad();
            for (int i = 0; i < n; ++i) {
                const std::size_t base = static_cast<std::size_t>(i) * c * plane;
                for (std::size_t p = 0; p < plane; ++p) {
                    double dot = 0.0;
                    for (int ch = 0; ch < c; ++ch)
                        dot += static_cast<double>(g[base + ch * plane + p]) * yv[base + ch * plane + p];
                    for (int ch = 0; ch < c; ++ch) {
                        const std::size_t idx = base + ch * plane + p;
                        zg[idx] += yv[idx] * (g[idx] - static_cast<float>(dot));
                    }
                }
            }
        });
    }
    return y;
}

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) throw std::invalid_argument("add: shape mismatch");
    Tensor y = Tensor::zeros(a.shape());
    auto ad = a.data();
    auto bd = b.data();
    auto yd = y.data();
    for (std::size_t i = 0; i < yd.size(); ++i) yd[i] = ad[i] + bd[i];
    if (a.requires_grad() || b.requires_grad()) {
        Tensor yh = y;
        yh.set_requires_grad(true);
        Tensor ah = a, bh = b;
        tape.record([ah, bh, yh]() mutable {
            auto g = yh.grad();
            if (ah.requires_grad()) {
                auto ag = ah.grad();
                for (std::size_t i = 0; i < g.size(); ++i) ag[i] += g[i];
            }
            if (bh.requires_grad()) {
                auto bg = bh.grad();
                for (std::size_t i = 0; i < g.size(); ++i) bg[i] += g[i];
            }
        });
    }
    return y;
}

Tensor mul_elem(Tape& tape, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) throw std::invalid_argument("mul_elem: shape mismatch");
    Tensor y = Tensor::zeros(a.shape());
    auto ad = a.data();
    auto bd = b.data();
    auto yd = y.data();
    for (std::size_t i = 0; i < yd.size(); ++i) yd[i] = ad[i] * bd[i];
    if (a.requires_grad() || b.requires_grad()) {
        Tensor yh = y;
        yh.set_requires_grad(true);
        Tensor ah = a, bh = b;
        tape.record([ah, bh, yh]() mutable {
            auto g = yh.grad();
            if (ah.requires_grad()) {
                auto ag = ah.grad();
                auto bd = bh.data();
                for (std::size_t i = 0; i < g.size(); ++i) ag[i] += g[i] * bd[i];
            }
            if (bh.requires_grad()) {
                auto bg = bh.grad();
                auto ad = ah.data();
                for (std::size_t i = 0; i < g.size(); ++i) bg[i] += g[i] * ad[i];
            }
        });
    }
    return y;
}

Tensor scale(Tape& tape, const Tensor& x, float factor) {
    Tensor y = Tensor::zeros(x.shape());
    auto xd = x.data();
    auto yd = y.data();
    for (std::size_t i = 0; i < yd.size(); ++i) yd[i] = xd[i] * factor;
    if (x.requires_grad()) {
        Tensor yh = y;
        yh.set_requires_grad(true);
        Tensor xh = x;
        tape.record([xh, yh, factor]() mutable {
            auto g = yh.grad();
            auto xg = xh.grad();
            for (std::size_t i = 0; i < g.size(); ++i) xg[i] += g[i] * factor;
        });
    }
    return y;
}

Tensor reshape(Tape& tape, const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.numel())
        throw std::invalid_argument("reshape: element count mismatch " + shape_str(x.shape()) +
                                    " -> " + shape_str(shape));
    Tensor y = Tensor::from_data(std::move(shape), {x.data().begin(), x.data().end()});
    if (x.requires_grad()) {
        y.set_requires_grad(true);
        Tensor xh = x, yh = y;
        tape.record([xh, yh]() mutable {
            auto g = yh.grad();
            auto xg = xh.grad();
            for (std::size_t i = 0; i < g.size(); ++i) xg[i] += g[i];
        });
    }
    return y;
}

Tensor sum_all(Tape& tape, const Tensor& x) {
    double acc = 0.0;
    for (float v : x.data()) acc += v;
    Tensor y = Tensor::scalar(static_cast<float>(acc));
    if (x.requires_grad()) {
        y.set_requires_grad(true);
        Tensor xh = x, yh = y;
        tape.record([xh, yh]() mutable {
            const float g = yh.grad()[0];
            auto xg = xh.grad();
            for (std::size_t i = 0; i < xg.size(); ++i) xg[i] += g;
        });
    }
    return y;
}

} // namespace calibseg
