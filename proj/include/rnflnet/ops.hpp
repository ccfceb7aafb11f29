#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "rnflnet/tensor.hpp"

namespace rnfl {

namespace detail {

// C[m,n] += A[m,k] * B[k,n]
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        double* ci = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = a[i * k + p];
            if (av == 0.0) continue;
            const double* bp = b + p * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

// C[m,n] += A[m,k] * B[n,k]^T
inline void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* ai = a + i * k;
        for (std::size_t j = 0; j < n; ++j) {
            const double* bj = b + j * k;
            double s = 0.0;
            for (std::size_t p = 0; p < k; ++p) s += ai[p] * bj[p];
            c[i * n + j] += s;
        }
    }
}

// C[m,n] += A[k,m]^T * B[k,n]
inline void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t n) {
    for (std::size_t p = 0; p < k; ++p) {
        const double* ap = a + p * m;
        const double* bp = b + p * n;
        for (std::size_t i = 0; i < m; ++i) {
            const double av = ap[i];
            if (av == 0.0) continue;
            double* ci = c + i * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

struct ConvGeometry {
    std::size_t c, h, w, k, stride, pad, oh, ow;
    std::size_t rows() const { return c * k * k; }
    std::size_t cols() const { return oh * ow; }
};

inline void im2col(const double* x, const ConvGeometry& g, double* col) {
    for (std::size_t ci = 0; ci < g.c; ++ci)
        for (std::size_t ky = 0; ky < g.k; ++ky)
            for (std::size_t kx = 0; kx < g.k; ++kx) {
                double* row = col + ((ci * g.k + ky) * g.k + kx) * g.cols();
                for (std::size_t oy = 0; oy < g.oh; ++oy) {
                    const long iy = long(oy * g.stride + ky) - long(g.pad);
                    for (std::size_t ox = 0; ox < g.ow; ++ox) {
                        const long ix = long(ox * g.stride + kx) - long(g.pad);
                        const bool inside = iy >= 0 && iy < long(g.h) && ix >= 0 && ix < long(g.w);
                        row[oy * g.ow + ox] = inside ? x[(ci * g.h + iy) * g.w + ix] : 0.0;
                    }
                }
            }
}

inline void col2im(const double* col, const ConvGeometry& g, double* x) {
    for (std::size_t ci = 0; ci < g.c; ++ci)
        for (std::size_t ky = 0; ky < g.k; ++ky)
            for (std::size_t kx = 0; kx < g.k; ++kx) {
                const double* row = col + ((ci * g.k + ky) * g.k + kx) * g.cols();
                for (std::size_t oy = 0; oy < g.oh; ++oy) {
                    const long iy = long(oy * g.stride + ky) - long(g.pad);
                    if (iy < 0 || iy >= long(g.h)) continue;
                    for (std::size_t ox = 0; ox < g.ow; ++ox) {
                        const long ix = long(ox * g.stride + kx) - long(g.pad);
                        if (ix < 0 || ix >= long(g.w)) continue;
                        x[(ci * g.h + iy) * g.w + ix] += row[oy * g.ow + ox];
                    }
                }
            }
}

inline void expect_rank(const Tensor& t, std::size_t r, const char* what) {
    if (!t.defined() || t.rank() != r)
        throw ShapeError(std::string(what) + " must have rank " + std::to_string(r) + ", got " +
                         (t.defined() ? shape_str(t.shape()) : std::string("<undefined>")));
}

}  // namespace detail

inline std::size_t conv_out_extent(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad) {
    if (in + 2 * pad < k)
        throw ShapeError("kernel " + std::to_string(k) + " larger than padded extent " +
                         std::to_string(in + 2 * pad));
    return (in + 2 * pad - k) / stride + 1;
}

// 2-D cross-correlation, NCHW input with OIKK weights. `bias` may be undefined.
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, std::size_t stride,
                     std::size_t pad) {
    detail::expect_rank(x, 4, "conv2d input");
    detail::expect_rank(w, 4, "conv2d weight");
    if (stride < 1) throw ShapeError("conv2d stride must be >= 1");
    const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
    const std::size_t o = w.dim(0), k = w.dim(2);
    if (w.dim(1) != c)
        throw ShapeError("conv2d: input has " + std::to_string(c) + " channels but weight " +
                         shape_str(w.shape()) + " expects " + std::to_string(w.dim(1)));
    if (w.dim(3) != k) throw ShapeError("conv2d: weight kernel must be square, got " + shape_str(w.shape()));
    if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != o))
        throw ShapeError("conv2d: bias " + shape_str(bias.shape()) + " does not match " +
                         std::to_string(o) + " output channels");

    detail::ConvGeometry g{c, h, wd, k, stride, pad, conv_out_extent(h, k, stride, pad),
                           conv_out_extent(wd, k, stride, pad)};
    Tensor out(Shape{n, o, g.oh, g.ow});
    std::vector<double> col(g.rows() * g.cols());
    const double* xd = x.data().data();
    const double* wdat = w.data().data();
    double* od = out.data().data();
    for (std::size_t b = 0; b < n; ++b) {
        detail::im2col(xd + b * c * h * wd, g, col.data());
        double* ob = od + b * o * g.cols();
        if (bias.defined())
            for (std::size_t oc = 0; oc < o; ++oc)
                std::fill(ob + oc * g.cols(), ob + (oc + 1) * g.cols(), bias[oc]);
        detail::gemm_nn(wdat, col.data(), ob, o, g.rows(), g.cols());
    }
    detail::check_finite(out, OpKind::conv2d);

    detail::record(out, OpKind::conv2d, {x, w, bias}, [g, n, o](const TensorImpl& y) {
        // inputs captured through the node: x, w, bias
        const auto& node = *y.producer;
        const auto& xi = node.inputs[0];
        const auto& wi = node.inputs[1];
        const auto& bi = node.inputs[2];
        double* gx = detail::grad_sink(xi);
        double* gw = detail::grad_sink(wi);
        double* gb = detail::grad_sink(bi);
        const double* gy = y.grad.data();
        const std::size_t in_sz = g.c * g.h * g.w;
        std::vector<double> col(g.rows() * g.cols());
        std::vector<double> gcol(gx ? col.size() : 0);
        for (std::size_t b = 0; b < n; ++b) {
            const double* gyb = gy + b * o * g.cols();
            if (gb)
                for (std::size_t oc = 0; oc < o; ++oc)
                    for (std::size_t p = 0; p < g.cols(); ++p) gb[oc] += gyb[oc * g.cols() + p];
            if (gw) {
                detail::im2col(xi->data.data() + b * in_sz, g, col.data());
                detail::gemm_nt(gyb, col.data(), gw, o, g.cols(), g.rows());
            }
            if (gx) {
                std::fill(gcol.begin(), gcol.end(), 0.0);
                detail::gemm_tn(wi->data.data(), gyb, gcol.data(), g.rows(), o, g.cols());
                detail::col2im(gcol.data(), g, gx + b * in_sz);
            }
        }
    });
    return out;
}

enum class BnMode { train, eval };

struct BatchNormOptions {
    BnMode mode = BnMode::train;
    double momentum = 0.1;
    double eps = 1e-5;
    // Frozen layer groups normalize with batch statistics but leave the
    // running estimates untouched.
    bool update_running_stats = true;
};

// Per-channel batch normalization over (N, H, W). In train mode the running
// mean/var tensors are updated in place (unbiased variance) unless disabled.
inline Tensor batchnorm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor& running_mean,
                          Tensor& running_var, const BatchNormOptions& opt = {}) {
    detail::expect_rank(x, 4, "batchnorm2d input");
    const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    for (const Tensor* t : std::initializer_list<const Tensor*>{&gamma, &beta, &running_mean, &running_var})
        if (!t->defined() || t->numel() != c)
            throw ShapeError("batchnorm2d: per-channel tensor must have " + std::to_string(c) + " entries");
    const std::size_t m = n * hw;
    if (opt.mode == BnMode::train && m < 2)
        throw ShapeError("batchnorm2d: train mode needs N*H*W >= 2 (variance is degenerate for one element)");

    auto xhat = std::make_shared<std::vector<double>>(x.numel());
    auto inv_std = std::make_shared<std::vector<double>>(c);
    Tensor out(x.shape());
    const double* xd = x.data().data();
    for (std::size_t ch = 0; ch < c; ++ch) {
        double mean, var;
        if (opt.mode == BnMode::train) {
            double s = 0.0;
            for (std::size_t b = 0; b < n; ++b)
                for (std::size_t i = 0; i < hw; ++i) s += xd[(b * c + ch) * hw + i];
            mean = s / double(m);
            double ss = 0.0;
            for (std::size_t b = 0; b < n; ++b)
                for (std::size_t i = 0; i < hw; ++i) {
                    const double d = xd[(b * c + ch) * hw + i] - mean;
                    ss += d * d;
                }
            var = ss / double(m);
            if (opt.update_running_stats) {
                running_mean[ch] = (1.0 - opt.momentum) * running_mean[ch] + opt.momentum * mean;
                running_var[ch] =
                    (1.0 - opt.momentum) * running_var[ch] + opt.momentum * var * double(m) / double(m - 1);
            }
        } else {
            mean = running_mean[ch];
            var = running_var[ch];
        }
        const double is = 1.0 / std::sqrt(var + opt.eps);
        (*inv_std)[ch] = is;
        for (std::size_t b = 0; b < n; ++b)
            for (std::size_t i = 0; i < hw; ++i) {
                const std::size_t idx = (b * c + ch) * hw + i;
                const double xh = (xd[idx] - mean) * is;
                (*xhat)[idx] = xh;
                out[idx] = gamma[ch] * xh + beta[ch];
            }
    }
    detail::check_finite(out, OpKind::batchnorm2d);

    const bool train = opt.mode == BnMode::train;
    detail::record(out, OpKind::batchnorm2d, {x, gamma, beta},
                   [xhat, inv_std, n, c, hw, m, train](const TensorImpl& y) {
                       const auto& in = y.producer->inputs;
                       double* gx = detail::grad_sink(in[0]);
                       double* gg = detail::grad_sink(in[1]);
                       double* gbeta = detail::grad_sink(in[2]);
                       const double* gamma = in[1]->data.data();
                       const double* gy = y.grad.data();
                       for (std::size_t ch = 0; ch < c; ++ch) {
                           double sum_dy = 0.0, sum_dy_xh = 0.0;
                           for (std::size_t b = 0; b < n; ++b)
                               for (std::size_t i = 0; i < hw; ++i) {
                                   const std::size_t idx = (b * c + ch) * hw + i;
                                   sum_dy += gy[idx];
                                   sum_dy_xh += gy[idx] * (*xhat)[idx];
                               }
                           if (gg) gg[ch] += sum_dy_xh;
                           if (gbeta) gbeta[ch] += sum_dy;
                           if (!gx) continue;
                           const double scale = gamma[ch] * (*inv_std)[ch];
                           for (std::size_t b = 0; b < n; ++b)
                               for (std::size_t i = 0; i < hw; ++i) {
                                   const std::size_t idx = (b * c + ch) * hw + i;
                                   if (train)
                                       gx[idx] += scale * (gy[idx] - sum_dy / double(m) -
                                                           (*xhat)[idx] * sum_dy_xh / double(m));
                                   else
                                       gx[idx] += scale * gy[idx];
                               }
                       }
                   });
    return out;
}

inline Tensor relu(const Tensor& x) {
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
    detail::record(out, OpKind::relu, {x}, [](const TensorImpl& y) {
        const auto& xi = y.producer->inputs[0];
        double* gx = detail::grad_sink(xi);
        if (!gx) return;
        // subgradient at 0 is 0
        for (std::size_t i = 0; i < y.grad.size(); ++i)
            if (xi->data[i] > 0.0) gx[i] += y.grad[i];
    });
    return out;
}

// 2x2 max pooling with stride 2 (odd trailing rows/cols are dropped). Ties
// resolve to the first maximal element in row-major window order.
inline Tensor maxpool2x2(const Tensor& x) {
    detail::expect_rank(x, 4, "maxpool2x2 input");
    const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (h < 2 || w < 2) throw ShapeError("maxpool2x2 needs spatial extent >= 2, got " + shape_str(x.shape()));
    const std::size_t oh = h / 2, ow = w / 2;
    Tensor out(Shape{n, c, oh, ow});
    auto argmax = std::make_shared<std::vector<std::size_t>>(out.numel());
    for (std::size_t p = 0; p < n * c; ++p)
        for (std::size_t oy = 0; oy < oh; ++oy)
            for (std::size_t ox = 0; ox < ow; ++ox) {
                std::size_t best = (p * h + 2 * oy) * w + 2 * ox;
                for (std::size_t dy = 0; dy < 2; ++dy)
                    for (std::size_t dx = 0; dx < 2; ++dx) {
                        const std::size_t idx = (p * h + 2 * oy + dy) * w + 2 * ox + dx;
                        if (x[idx] > x[best]) best = idx;
                    }
                const std::size_t o = (p * oh + oy) * ow + ox;
                out[o] = x[best];
                (*argmax)[o] = best;
            }
    detail::record(out, OpKind::maxpool2x2, {x}, [argmax](const TensorImpl& y) {
        double* gx = detail::grad_sink(y.producer->inputs[0]);
        if (!gx) return;
        for (std::size_t o = 0; o < y.grad.size(); ++o) gx[(*argmax)[o]] += y.grad[o];
    });
    return out;
}

// [N,C,H,W] -> [N,C]
inline Tensor global_avg_pool(const Tensor& x) {
    detail::expect_rank(x, 4, "global_avg_pool input");
    const std::size_t nc = x.dim(0) * x.dim(1), hw = x.dim(2) * x.dim(3);
    Tensor out(Shape{x.dim(0), x.dim(1)});
    for (std::size_t p = 0; p < nc; ++p) {
        double s = 0.0;
        for (std::size_t i = 0; i < hw; ++i) s += x[p * hw + i];
        out[p] = s / double(hw);
    }
    detail::record(out, OpKind::global_avg_pool, {x}, [nc, hw](const TensorImpl& y) {
        double* gx = detail::grad_sink(y.producer->inputs[0]);
        if (!gx) return;
        for (std::size_t p = 0; p < nc; ++p) {
            const double g = y.grad[p] / double(hw);
            for (std::size_t i = 0; i < hw; ++i) gx[p * hw + i] += g;
        }
    });
    return out;
}

// x[N,I] * w[O,I]^T + b[O]
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    detail::expect_rank(x, 2, "linear input");
    detail::expect_rank(w, 2, "linear weight");
    const std::size_t n = x.dim(0), in = x.dim(1), o = w.dim(0);
    if (w.dim(1) != in)
        throw ShapeError("linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                         shape_str(w.shape()));
    if (b.defined() && b.numel() != o) throw ShapeError("linear: bias must have " + std::to_string(o) + " entries");
    Tensor out(Shape{n, o});
    if (b.defined())
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t j = 0; j < o; ++j) out[r * o + j] = b[j];
    detail::gemm_nt(x.data().data(), w.data().data(), out.data().data(), n, in, o);
    detail::check_finite(out, OpKind::linear);
    detail::record(out, OpKind::linear, {x, w, b}, [n, in, o](const TensorImpl& y) {
        const auto& ins = y.producer->inputs;
        double* gx = detail::grad_sink(ins[0]);
        double* gw = detail::grad_sink(ins[1]);
        double* gb = detail::grad_sink(ins[2]);
        const double* gy = y.grad.data();
        if (gx) detail::gemm_nn(gy, ins[1]->data.data(), gx, n, o, in);
        if (gw) detail::gemm_tn(gy, ins[0]->data.data(), gw, o, n, in);
        if (gb)
            for (std::size_t r = 0; r < n; ++r)
                for (std::size_t j = 0; j < o; ++j) gb[j] += gy[r * o + j];
    });
    return out;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw ShapeError("add: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) + " differ");
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] + b[i];
    detail::check_finite(out, OpKind::add);
    detail::record(out, OpKind::add, {a, b}, [](const TensorImpl& y) {
        // a and b may be the same tensor; each sink accumulates once per use
        for (const auto& in : y.producer->inputs) {
            double* g = detail::grad_sink(in);
            if (!g) continue;
            for (std::size_t i = 0; i < y.grad.size(); ++i) g[i] += y.grad[i];
        }
    });
    return out;
}

inline double sigmoid_value(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

inline Tensor sigmoid(const Tensor& x) {
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) out[i] = sigmoid_value(x[i]);
    auto s = std::make_shared<std::vector<double>>(out.values());
    detail::record(out, OpKind::sigmoid, {x}, [s](const TensorImpl& y) {
        double* gx = detail::grad_sink(y.producer->inputs[0]);
        if (!gx) return;
        for (std::size_t i = 0; i < y.grad.size(); ++i) gx[i] += y.grad[i] * (*s)[i] * (1.0 - (*s)[i]);
    });
    return out;
}

inline Tensor sum(const Tensor& x) {
    double s = 0.0;
    for (double v : x.data()) s += v;
    Tensor out = Tensor::scalar(s);
    detail::check_finite(out, OpKind::sum);
    detail::record(out, OpKind::sum, {x}, [](const TensorImpl& y) {
        const auto& xi = y.producer->inputs[0];
        double* gx = detail::grad_sink(xi);
        if (!gx) return;
        for (std::size_t i = 0; i < xi->data.size(); ++i) gx[i] += y.grad[0];
    });
    return out;
}

// mean((pred - target)^2) over all elements
inline Tensor mse_loss(const Tensor& pred, const Tensor& target) {
    if (pred.numel() != target.numel() || pred.numel() == 0)
        throw ShapeError("mse_loss: pred " + shape_str(pred.shape()) + " vs target " + shape_str(target.shape()));
    const double n = double(pred.numel());
    double s = 0.0;
    for (std::size_t i = 0; i < pred.numel(); ++i) {
        const double d = pred[i] - target[i];
        s += d * d;
    }
    Tensor out = Tensor::scalar(s / n);
    detail::check_finite(out, OpKind::mse_loss);
    detail::record(out, OpKind::mse_loss, {pred, target}, [n](const TensorImpl& y) {
        const auto& p = y.producer->inputs[0];
        const auto& t = y.producer->inputs[1];
        double* gp = detail::grad_sink(p);
        double* gt = detail::grad_sink(t);
        for (std::size_t i = 0; i < p->data.size(); ++i) {
            const double g = 2.0 * (p->data[i] - t->data[i]) / n * y.grad[0];
            if (gp) gp[i] += g;
            if (gt) gt[i] -= g;
        }
    });
    return out;
}

// Mean binary cross-entropy on logits, in the log-sum-exp stable form.
inline Tensor bce_loss(const Tensor& logits, const Tensor& targets) {
    if (logits.numel() != targets.numel() || logits.numel() == 0)
        throw ShapeError("bce_loss: logits " + shape_str(logits.shape()) + " vs targets " +
                         shape_str(targets.shape()));
    const double n = double(logits.numel());
    double s = 0.0;
    for (std::size_t i = 0; i < logits.numel(); ++i) {
        const double x = logits[i], t = targets[i];
        s += std::max(x, 0.0) - x * t + std::log1p(std::exp(-std::abs(x)));
    }
    Tensor out = Tensor::scalar(s / n);
    detail::check_finite(out, OpKind::bce_loss);
    // targets are treated as constants
    auto t = std::make_shared<std::vector<double>>(targets.values());
    detail::record(out, OpKind::bce_loss, {logits}, [n, t](const TensorImpl& y) {
        const auto& x = y.producer->inputs[0];
        double* gx = detail::grad_sink(x);
        if (!gx) return;
        for (std::size_t i = 0; i < x->data.size(); ++i)
            gx[i] += (sigmoid_value(x->data[i]) - (*t)[i]) / n * y.grad[0];
    });
    return out;
}

}  // namespace rnfl
