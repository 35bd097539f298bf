#include "punet/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "gemm.hpp"

namespace punet {

using detail::common_tape;
using detail::emit;
using detail::gemm;

namespace {

void require_same_shape(const char* op, const Shape& a, const Shape& b) {
    if (a != b) {
        throw ShapeError(op, "operand shapes differ: " + a.str() + " vs " + b.str());
    }
}

void require_axis(const char* op, const char* axis, Index expected, Index actual) {
    if (expected != actual) {
        throw ShapeError(op, axis, expected, actual);
    }
}

template <typename T>
Tensor<T> zeros_like(const Tensor<T>& t) {
    return Tensor<T>(t.shape());
}

// ---------------------------------------------------------------- conv2d

struct ConvGeometry {
    Index c_in, h, w, k, oh, ow;
    int stride, dilation, padding;
};

template <typename T>
void im2col(const T* img, const ConvGeometry& g, T* col) {
    const Index plane = g.oh * g.ow;
    for (Index ci = 0; ci < g.c_in; ++ci) {
        const T* src = img + ci * g.h * g.w;
        for (Index ky = 0; ky < g.k; ++ky) {
            for (Index kx = 0; kx < g.k; ++kx) {
                T* dst = col + ((ci * g.k + ky) * g.k + kx) * plane;
                for (Index oy = 0; oy < g.oh; ++oy) {
                    const Index iy = oy * g.stride - g.padding + ky * g.dilation;
                    T* row = dst + oy * g.ow;
                    if (iy < 0 || iy >= g.h) {
                        std::fill(row, row + g.ow, T(0));
                        continue;
                    }
                    const T* srow = src + iy * g.w;
                    for (Index ox = 0; ox < g.ow; ++ox) {
                        const Index ix = ox * g.stride - g.padding + kx * g.dilation;
                        row[ox] = (ix >= 0 && ix < g.w) ? srow[ix] : T(0);
                    }
                }
            }
        }
    }
}

template <typename T>
void col2im(const T* col, const ConvGeometry& g, T* img) {
    const Index plane = g.oh * g.ow;
    for (Index ci = 0; ci < g.c_in; ++ci) {
        T* dst = img + ci * g.h * g.w;
        for (Index ky = 0; ky < g.k; ++ky) {
            for (Index kx = 0; kx < g.k; ++kx) {
                const T* src = col + ((ci * g.k + ky) * g.k + kx) * plane;
                for (Index oy = 0; oy < g.oh; ++oy) {
                    const Index iy = oy * g.stride - g.padding + ky * g.dilation;
                    if (iy < 0 || iy >= g.h) {
                        continue;
                    }
                    const T* srow = src + oy * g.ow;
                    T* drow = dst + iy * g.w;
                    for (Index ox = 0; ox < g.ow; ++ox) {
                        const Index ix = ox * g.stride - g.padding + kx * g.dilation;
                        if (ix >= 0 && ix < g.w) {
                            drow[ix] += srow[ox];
                        }
                    }
                }
            }
        }
    }
}

bool is_pointwise(const ConvGeometry& g) {
    return g.k == 1 && g.stride == 1 && g.padding == 0;
}

}  // namespace

Index conv_output_size(Index in, Index kernel, int stride, int dilation, int padding) {
    return (in + 2 * padding - dilation * (kernel - 1) - 1) / stride + 1;
}

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, Conv2dOptions opt) {
    const Shape& xs = x.shape();
    const Shape& ws = weight.shape();
    require_axis("conv2d", "channel", ws.c, xs.c);
    if (ws.h != ws.w || ws.h % 2 == 0) {
        throw ShapeError("conv2d", "kernel must be square and odd, got " + ws.str());
    }
    require_axis("conv2d", "bias", ws.n, bias.shape().numel());
    if (opt.stride < 1 || opt.dilation < 1 || opt.padding < 0) {
        throw std::invalid_argument("conv2d: stride and dilation must be >= 1, padding >= 0");
    }
    ConvGeometry g{xs.c, xs.h, xs.w, ws.h, 0, 0, opt.stride, opt.dilation, opt.padding};
    g.oh = conv_output_size(xs.h, g.k, opt.stride, opt.dilation, opt.padding);
    g.ow = conv_output_size(xs.w, g.k, opt.stride, opt.dilation, opt.padding);
    if (g.oh <= 0 || g.ow <= 0) {
        throw ShapeError("conv2d", "input " + xs.str() + " too small for kernel " + ws.str());
    }
    const Index c_out = ws.n;
    const Index kdim = g.c_in * g.k * g.k;
    const Index plane = g.oh * g.ow;
    const bool pointwise = is_pointwise(g);

    Tensor<T> out(Shape{xs.n, c_out, g.oh, g.ow});
    std::vector<T> col(pointwise ? 0 : static_cast<std::size_t>(kdim * plane));
    for (Index b = 0; b < xs.n; ++b) {
        const T* img = x.value.ptr() + b * g.c_in * g.h * g.w;
        const T* cols = img;
        if (!pointwise) {
            im2col(img, g, col.data());
            cols = col.data();
        }
        T* dst = out.ptr() + b * c_out * plane;
        for (Index co = 0; co < c_out; ++co) {
            std::fill(dst + co * plane, dst + (co + 1) * plane, bias.value[co]);
        }
        gemm<T>(false, false, c_out, plane, kdim, weight.value.ptr(), cols, dst, T(1));
    }

    Tape<T>* tape = common_tape<T>({&x, &weight, &bias}, "conv2d");
    return emit<T>("conv2d", std::move(out), tape, [&] {
        return [xv = x.value, wv = weight.value, xid = x.node, wid = weight.node,
                bid = bias.node, g, c_out, kdim, plane,
                pointwise](const Tensor<T>& go, GradAccumulator<T>& acc) {
            const Index n = xv.n();
            Tensor<T> gx = xid ? zeros_like(xv) : Tensor<T>();
            Tensor<T> gw = wid ? zeros_like(wv) : Tensor<T>();
            Tensor<T> gb = bid ? Tensor<T>::vector(c_out) : Tensor<T>();
            std::vector<T> col(pointwise ? 0 : static_cast<std::size_t>(kdim * plane));
            std::vector<T> gcol(xid && !pointwise ? static_cast<std::size_t>(kdim * plane) : 0);
            for (Index b = 0; b < n; ++b) {
                const T* gb_ptr = go.ptr() + b * c_out * plane;
                const T* img = xv.ptr() + b * g.c_in * g.h * g.w;
                if (wid) {
                    const T* cols = img;
                    if (!pointwise) {
                        im2col(img, g, col.data());
                        cols = col.data();
                    }
                    gemm<T>(false, true, c_out, kdim, plane, gb_ptr, cols, gw.ptr(), T(1));
                }
                if (bid) {
                    for (Index co = 0; co < c_out; ++co) {
                        T s = 0;
                        for (Index p = 0; p < plane; ++p) {
                            s += gb_ptr[co * plane + p];
                        }
                        gb[co] += s;
                    }
                }
                if (xid) {
                    T* gimg = gx.ptr() + b * g.c_in * g.h * g.w;
                    if (pointwise) {
                        gemm<T>(true, false, kdim, plane, c_out, wv.ptr(), gb_ptr, gimg, T(0));
                    } else {
                        gemm<T>(true, false, kdim, plane, c_out, wv.ptr(), gb_ptr, gcol.data(),
                                T(0));
                        col2im(gcol.data(), g, gimg);
                    }
                }
            }
            acc.add(xid, std::move(gx));
            acc.add(wid, std::move(gw));
            acc.add(bid, std::move(gb));
        };
    });
}

// ------------------------------------------------------------ batch_norm

template <typename T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, BnState<T>& state,
                  BnOptions opt) {
    if (!(opt.eps > 0)) {
        throw std::invalid_argument("batch_norm: eps must be positive");
    }
    const Shape& s = x.shape();
    const Index C = s.c;
    require_axis("batch_norm", "gamma", C, gamma.shape().numel());
    require_axis("batch_norm", "beta", C, beta.shape().numel());
    require_axis("batch_norm", "running_mean", C, state.running_mean.numel());
    require_axis("batch_norm", "running_var", C, state.running_var.numel());
    const Index plane = s.h * s.w;
    const Index count = s.n * plane;

    std::vector<T> mean(static_cast<std::size_t>(C));
    std::vector<T> inv_std(static_cast<std::size_t>(C));
    if (opt.training) {
        if (count == 0) {
            throw ShapeError("batch_norm", "empty batch");
        }
        for (Index c = 0; c < C; ++c) {
            double sum = 0;
            for (Index b = 0; b < s.n; ++b) {
                const T* p = x.value.ptr() + (b * C + c) * plane;
                for (Index i = 0; i < plane; ++i) {
                    sum += p[i];
                }
            }
            const double mu = sum / static_cast<double>(count);
            double sq = 0;
            for (Index b = 0; b < s.n; ++b) {
                const T* p = x.value.ptr() + (b * C + c) * plane;
                for (Index i = 0; i < plane; ++i) {
                    const double d = p[i] - mu;
                    sq += d * d;
                }
            }
            const double var = sq / static_cast<double>(count);
            mean[c] = static_cast<T>(mu);
            inv_std[c] = static_cast<T>(1.0 / std::sqrt(var + opt.eps));
            const double unbiased = count > 1 ? sq / static_cast<double>(count - 1) : var;
            state.running_mean[c] =
                static_cast<T>((1.0 - opt.momentum) * state.running_mean[c] + opt.momentum * mu);
            state.running_var[c] = static_cast<T>((1.0 - opt.momentum) * state.running_var[c] +
                                                  opt.momentum * unbiased);
        }
    } else {
        for (Index c = 0; c < C; ++c) {
            mean[c] = state.running_mean[c];
            inv_std[c] = static_cast<T>(1.0 / std::sqrt(double(state.running_var[c]) + opt.eps));
        }
    }

    Tensor<T> xhat(s);
    Tensor<T> out(s);
    for (Index b = 0; b < s.n; ++b) {
        for (Index c = 0; c < C; ++c) {
            const Index off = (b * C + c) * plane;
            for (Index i = 0; i < plane; ++i) {
                const T v = (x.value[off + i] - mean[c]) * inv_std[c];
                xhat[off + i] = v;
                out[off + i] = gamma.value[c] * v + beta.value[c];
            }
        }
    }

    Tape<T>* tape = common_tape<T>({&x, &gamma, &beta}, "batch_norm");
    return emit<T>("batch_norm", std::move(out), tape, [&] {
        return [xhat = std::move(xhat), inv_std, gv = gamma.value, xid = x.node,
                gid = gamma.node, bid = beta.node, training = opt.training, C, plane,
                count](const Tensor<T>& go, GradAccumulator<T>& acc) {
            const Index n = xhat.n();
            std::vector<double> dgamma(static_cast<std::size_t>(C), 0.0);
            std::vector<double> dbeta(static_cast<std::size_t>(C), 0.0);
            for (Index b = 0; b < n; ++b) {
                for (Index c = 0; c < C; ++c) {
                    const Index off = (b * C + c) * plane;
                    for (Index i = 0; i < plane; ++i) {
                        dbeta[c] += go[off + i];
                        dgamma[c] += double(go[off + i]) * xhat[off + i];
                    }
                }
            }
            if (xid) {
                Tensor<T> gx(xhat.shape());
                for (Index c = 0; c < C; ++c) {
                    const double k = double(gv[c]) * inv_std[c];
                    const double mb = dbeta[c] / static_cast<double>(count);
                    const double mg = dgamma[c] / static_cast<double>(count);
                    for (Index b = 0; b < n; ++b) {
                        const Index off = (b * C + c) * plane;
                        for (Index i = 0; i < plane; ++i) {
                            gx[off + i] = training ? static_cast<T>(
                                                         k * (go[off + i] - mb - xhat[off + i] * mg))
                                                   : static_cast<T>(k * go[off + i]);
                        }
                    }
                }
                acc.add(xid, std::move(gx));
            }
            if (gid) {
                Tensor<T> g = Tensor<T>::vector(C);
                for (Index c = 0; c < C; ++c) g[c] = static_cast<T>(dgamma[c]);
                acc.add(gid, std::move(g));
            }
            if (bid) {
                Tensor<T> g = Tensor<T>::vector(C);
                for (Index c = 0; c < C; ++c) g[c] = static_cast<T>(dbeta[c]);
                acc.add(bid, std::move(g));
            }
        };
    });
}

// ------------------------------------------------------------ layer_norm

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, double eps) {
    if (!(eps > 0)) {
        throw std::invalid_argument("layer_norm: eps must be positive");
    }
    const Index d = x.value.cols();
    const Index rows = x.value.rows();
    require_axis("layer_norm", "gamma", d, gamma.shape().numel());
    require_axis("layer_norm", "beta", d, beta.shape().numel());

    Tensor<T> xhat(x.shape());
    Tensor<T> out(x.shape());
    std::vector<T> inv_std(static_cast<std::size_t>(rows));
    for (Index r = 0; r < rows; ++r) {
        const T* p = x.value.ptr() + r * d;
        double sum = 0;
        for (Index j = 0; j < d; ++j) sum += p[j];
        const double mu = sum / static_cast<double>(d);
        double sq = 0;
        for (Index j = 0; j < d; ++j) sq += (p[j] - mu) * (p[j] - mu);
        const double is = 1.0 / std::sqrt(sq / static_cast<double>(d) + eps);
        inv_std[r] = static_cast<T>(is);
        for (Index j = 0; j < d; ++j) {
            const T v = static_cast<T>((p[j] - mu) * is);
            xhat[r * d + j] = v;
            out[r * d + j] = gamma.value[j] * v + beta.value[j];
        }
    }

    Tape<T>* tape = common_tape<T>({&x, &gamma, &beta}, "layer_norm");
    return emit<T>("layer_norm", std::move(out), tape, [&] {
        return [xhat = std::move(xhat), inv_std = std::move(inv_std), gv = gamma.value,
                xid = x.node, gid = gamma.node, bid = beta.node, rows,
                d](const Tensor<T>& go, GradAccumulator<T>& acc) {
            Tensor<T> gx = xid ? Tensor<T>(xhat.shape()) : Tensor<T>();
            Tensor<T> gg = gid ? Tensor<T>::vector(d) : Tensor<T>();
            Tensor<T> gbeta = bid ? Tensor<T>::vector(d) : Tensor<T>();
            std::vector<double> dxh(static_cast<std::size_t>(d));
            for (Index r = 0; r < rows; ++r) {
                const Index off = r * d;
                double m1 = 0;
                double m2 = 0;
                for (Index j = 0; j < d; ++j) {
                    dxh[j] = double(go[off + j]) * gv[j];
                    m1 += dxh[j];
                    m2 += dxh[j] * xhat[off + j];
                    if (gid) gg[j] += go[off + j] * xhat[off + j];
                    if (bid) gbeta[j] += go[off + j];
                }
                m1 /= static_cast<double>(d);
                m2 /= static_cast<double>(d);
                if (xid) {
                    for (Index j = 0; j < d; ++j) {
                        gx[off + j] = static_cast<T>(inv_std[r] * (dxh[j] - m1 - xhat[off + j] * m2));
                    }
                }
            }
            acc.add(xid, std::move(gx));
            acc.add(gid, std::move(gg));
            acc.add(bid, std::move(gbeta));
        };
    });
}

// ---------------------------------------------------------------- matmul

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
    const Shape& as = a.shape();
    const Shape& bs = b.shape();
    const Index batches = as.n * as.c;
    const Index b_batches = bs.n * bs.c;
    if (b_batches != batches && b_batches != 1) {
        throw ShapeError("matmul", "batch", batches, b_batches);
    }
    require_axis("matmul", "inner", as.w, bs.h);
    const Index p = as.h;
    const Index q = as.w;
    const Index r = bs.w;
    const bool broadcast = b_batches != batches;

    Tensor<T> out(Shape{as.n, as.c, p, r});
    for (Index i = 0; i < batches; ++i) {
        const T* bp = b.value.ptr() + (broadcast ? 0 : i * q * r);
        gemm<T>(false, false, p, r, q, a.value.ptr() + i * p * q, bp, out.ptr() + i * p * r, T(0));
    }

    Tape<T>* tape = common_tape<T>({&a, &b}, "matmul");
    return emit<T>("matmul", std::move(out), tape, [&] {
        return [av = a.value, bv = b.value, aid = a.node, bid = b.node, batches, p, q, r,
                broadcast](const Tensor<T>& go, GradAccumulator<T>& acc) {
            if (aid) {
                Tensor<T> ga(av.shape());
                for (Index i = 0; i < batches; ++i) {
                    const T* bp = bv.ptr() + (broadcast ? 0 : i * q * r);
                    gemm<T>(false, true, p, q, r, go.ptr() + i * p * r, bp, ga.ptr() + i * p * q,
                            T(0));
                }
                acc.add(aid, std::move(ga));
            }
            if (bid) {
                Tensor<T> gb(bv.shape());
                for (Index i = 0; i < batches; ++i) {
                    T* dst = gb.ptr() + (broadcast ? 0 : i * q * r);
                    gemm<T>(true, false, q, r, p, av.ptr() + i * p * q, go.ptr() + i * p * r, dst,
                            T(1));
                }
                acc.add(bid, std::move(gb));
            }
        };
    });
}

namespace {
template <typename T>
Tensor<T> transpose_tensor(const Tensor<T>& a) {
    const Shape& s = a.shape();
    Tensor<T> out(Shape{s.n, s.c, s.w, s.h});
    const Index batches = s.n * s.c;
    for (Index i = 0; i < batches; ++i) {
        const T* src = a.ptr() + i * s.h * s.w;
        T* dst = out.ptr() + i * s.h * s.w;
        for (Index y = 0; y < s.h; ++y) {
            for (Index x = 0; x < s.w; ++x) {
                dst[x * s.h + y] = src[y * s.w + x];
            }
        }
    }
    return out;
}
}  // namespace

template <typename T>
Var<T> transpose(const Var<T>& a) {
    Tensor<T> out = transpose_tensor(a.value);
    Tape<T>* tape = common_tape<T>({&a}, "transpose");
    return emit<T>("transpose", std::move(out), tape, [&] {
        return [aid = a.node](const Tensor<T>& go, GradAccumulator<T>& acc) {
            acc.add(aid, transpose_tensor(go));
        };
    });
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
    const Index in = x.value.cols();
    const Index rows = x.value.rows();
    const Index out_dim = weight.shape().h;
    require_axis("linear", "in_features", weight.shape().w, in);
    require_axis("linear", "bias", out_dim, bias.shape().numel());

    const Shape& xs = x.shape();
    Tensor<T> out(Shape{xs.n, xs.c, xs.h, out_dim});
    for (Index r = 0; r < rows; ++r) {
        std::copy(bias.value.ptr(), bias.value.ptr() + out_dim, out.ptr() + r * out_dim);
    }
    gemm<T>(false, true, rows, out_dim, in, x.value.ptr(), weight.value.ptr(), out.ptr(), T(1));

    Tape<T>* tape = common_tape<T>({&x, &weight, &bias}, "linear");
    return emit<T>("linear", std::move(out), tape, [&] {
        return [xv = x.value, wv = weight.value, xid = x.node, wid = weight.node, bid = bias.node,
                rows, in, out_dim](const Tensor<T>& go, GradAccumulator<T>& acc) {
            if (xid) {
                Tensor<T> gx(xv.shape());
                gemm<T>(false, false, rows, in, out_dim, go.ptr(), wv.ptr(), gx.ptr(), T(0));
                acc.add(xid, std::move(gx));
            }
            if (wid) {
                Tensor<T> gw(wv.shape());
                gemm<T>(true, false, out_dim, in, rows, go.ptr(), xv.ptr(), gw.ptr(), T(0));
                acc.add(wid, std::move(gw));
            }
            if (bid) {
                Tensor<T> gb = Tensor<T>::vector(out_dim);
                for (Index r = 0; r < rows; ++r) {
                    for (Index j = 0; j < out_dim; ++j) gb[j] += go[r * out_dim + j];
                }
                acc.add(bid, std::move(gb));
            }
        };
    });
}

// ----------------------------------------------------------- elementwise

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    require_same_shape("add", a.shape(), b.shape());
    Tensor<T> out(a.shape());
    for (Index i = 0; i < out.numel(); ++i) out[i] = a.value[i] + b.value[i];
    Tape<T>* tape = common_tape<T>({&a, &b}, "add");
    return emit<T>("add", std::move(out), tape, [&] {
        return [aid = a.node, bid = b.node](const Tensor<T>& go, GradAccumulator<T>& acc) {
            acc.add(aid, go);
            acc.add(bid, go);
        };
    });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    require_same_shape("sub", a.shape(), b.shape());
    Tensor<T> out(a.shape());
    for (Index i = 0; i < out.numel(); ++i) out[i] = a.value[i] - b.value[i];
    Tape<T>* tape = common_tape<T>({&a, &b}, "sub");
    return emit<T>("sub", std::move(out), tape, [&] {
        return [aid = a.node, bid = b.node](const Tensor<T>& go, GradAccumulator<T>& acc) {
            acc.add(aid, go);
            if (bid) {
                Tensor<T> g(go.shape());
                for (Index i = 0; i < g.numel(); ++i) g[i] = -go[i];
                acc.add(bid, std::move(g));
            }
        };
    });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    require_same_shape("mul", a.shape(), b.shape());
    Tensor<T> out(a.shape());
    for (Index i = 0; i < out.numel(); ++i) out[i] = a.value[i] * b.value[i];
    Tape<T>* tape = common_tape<T>({&a, &b}, "mul");
    return emit<T>("mul", std::move(out), tape, [&] {
        return [av = a.value, bv = b.value, aid = a.node,
                bid = b.node](const Tensor<T>& go, GradAccumulator<T>& acc) {
            if (aid) {
                Tensor<T> g(go.shape());
                for (Index i = 0; i < g.numel(); ++i) g[i] = go[i] * bv[i];
                acc.add(aid, std::move(g));
            }
            if (bid) {
                Tensor<T> g(go.shape());
                for (Index i = 0; i < g.numel(); ++i) g[i] = go[i] * av[i];
                acc.add(bid, std::move(g));
            }
        };
    });
}

template <typename T>
Var<T> scale(const Var<T>& x, double s) {
    const T k = static_cast<T>(s);
    Tensor<T> out(x.shape());
    for (Index i = 0; i < out.numel(); ++i) out[i] = x.value[i] * k;
    Tape<T>* tape = common_tape<T>({&x}, "scale");
    return emit<T>("scale", std::move(out), tape, [&] {
        return [xid = x.node, k](const Tensor<T>& go, GradAccumulator<T>& acc) {
            Tensor<T> g(go.shape());
            for (Index i = 0; i < g.numel(); ++i) g[i] = go[i] * k;
            acc.add(xid, std::move(g));
        };
    });
}

template <typename T>
Var<T> add_scalar(const Var<T>& x, double s) {
    const T k = static_cast<T>(s);
    Tensor<T> out(x.shape());
    for (Index i = 0; i < out.numel(); ++i) out[i] = x.value[i] + k;
    Tape<T>* tape = common_tape<T>({&x}, "add_scalar");
    return emit<T>("add_scalar", std::move(out), tape, [&] {
        return [xid = x.node](const Tensor<T>& go, GradAccumulator<T>& acc) { acc.add(xid, go); };
    });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
    Tensor<T> out(x.shape());
    for (Index i = 0; i < out.numel(); ++i) out[i] = x.value[i] > T(0) ? x.value[i] : T(0);
    Tape<T>* tape = common_tape<T>({&x}, "relu");
    return emit<T>("relu", std::move(out), tape, [&] {
        return [xv = x.value, xid = x.node](const Tensor<T>& go, GradAccumulator<T>& acc) {
            Tensor<T> g(go.shape());
            for (Index i = 0; i < g.numel(); ++i) g[i] = xv[i] > T(0) ? go[i] : T(0);
            acc.add(xid, std::move(g));
        };
    });
}

template <typename T>
Var<T> gelu(const Var<T>& x) {
    Tensor<T> out(x.shape());
    for (Index i = 0; i < out.numel(); ++i) {
        const double v = x.value[i];
        const double u = kGeluSqrt2OverPi * (v + kGeluCubic * v * v * v);
        out[i] = static_cast<T>(0.5 * v * (1.0 + std::tanh(u)));
    }
    Tape<T>* tape = common_tape<T>({&x}, "gelu");
    return emit<T>("gelu", std::move(out), tape, [&] {
        return [xv = x.value, xid = x.node](const Tensor<T>& go, GradAccumulator<T>& acc) {
            Tensor<T> g(go.shape());
            for (Index i = 0; i < g.numel(); ++i) {
                const double v = xv[i];
                const double t = std::tanh(kGeluSqrt2OverPi * (v + kGeluCubic * v * v * v));
                const double du = kGeluSqrt2OverPi * (1.0 + 3.0 * kGeluCubic * v * v);
                const double d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
                g[i] = static_cast<T>(go[i] * d);
            }
            acc.add(xid, std::move(g));
        };
    });
}

template <typename T>
Var<T> exponential(const Var<T>& x) {
    Tensor<T> out(x.shape());
    for (Index i = 0; i < out.numel(); ++i) out[i] = std::exp(x.value[i]);
    Tape<T>* tape = common_tape<T>({&x}, "exp");
    Tensor<T> saved = tape ? out : Tensor<T>();
    return emit<T>("exp", std::move(out), tape, [&] {
        return [yv = std::move(saved), xid = x.node](const Tensor<T>& go, GradAccumulator<T>& acc) {
            Tensor<T> g(go.shape());
            for (Index i = 0; i < g.numel(); ++i) g[i] = go[i] * yv[i];
            acc.add(xid, std::move(g));
        };
    });
}

// --------------------------------------------------------------- softmax

template <typename T>
Var<T> softmax_lastdim(const Var<T>& x) {
    const Index d = x.value.cols();
    const Index rows = x.value.rows();
    Tensor<T> out(x.shape());
    for (Index r = 0; r < rows; ++r) {
        const T* p = x.value.ptr() + r * d;
        T* o = out.ptr() + r * d;
        T mx = -std::numeric_limits<T>::infinity();
        for (Index j = 0; j < d; ++j) mx = std::max(mx, p[j]);
        double sum = 0;
        for (Index j = 0; j < d; ++j) {
            o[j] = std::exp(p[j] - mx);
            sum += o[j];
        }
        const T inv = static_cast<T>(1.0 / sum);
        for (Index j = 0; j < d; ++j) o[j] *= inv;
    }
    Tape<T>* tape = common_tape<T>({&x}, "softmax");
    Tensor<T> saved = tape ? out : Tensor<T>();
    return emit<T>("softmax", std::move(out), tape, [&] {
        return [yv = std::move(saved), xid = x.node, rows, d](const Tensor<T>& go,
                                                                GradAccumulator<T>& acc) {
            Tensor<T> g(go.shape());
            for (Index r = 0; r < rows; ++r) {
                const Index off = r * d;
                double dot = 0;
                for (Index j = 0; j < d; ++j) dot += double(go[off + j]) * yv[off + j];
                for (Index j = 0; j < d; ++j) {
                    g[off + j] = static_cast<T>(yv[off + j] * (go[off + j] - dot));
                }
            }
            acc.add(xid, std::move(g));
        };
    });
}

// ------------------------------------------------------------- resampling

namespace {

struct LerpTable {
    std::vector<Index> lo;
    std::vector<Index> hi;
    std::vector<double> frac;
};

LerpTable half_pixel_table(Index in, Index out) {
    LerpTable t;
    t.lo.resize(static_cast<std::size_t>(out));
    t.hi.resize(static_cast<std::size_t>(out));
    t.frac.resize(static_cast<std::size_t>(out));
    const double ratio = static_cast<double>(in) / static_cast<double>(out);
    for (Index o = 0; o < out; ++o) {
        double src = (static_cast<double>(o) + 0.5) * ratio - 0.5;
        if (src < 0) src = 0;
        Index i0 = static_cast<Index>(std::floor(src));
        if (i0 > in - 1) i0 = in - 1;
        const Index i1 = std::min(i0 + 1, in - 1);
        t.lo[o] = i0;
        t.hi[o] = i1;
        t.frac[o] = src - static_cast<double>(i0);
    }
    return t;
}

}  // namespace

template <typename T>
Var<T> bilinear_upsample2x(const Var<T>& x) {
    const Shape& s = x.shape();
    const Index oh = 2 * s.h;
    const Index ow = 2 * s.w;
    const LerpTable ty = half_pixel_table(s.h, oh);
    const LerpTable tx = half_pixel_table(s.w, ow);
    Tensor<T> out(Shape{s.n, s.c, oh, ow});
    const Index planes = s.n * s.c;
    for (Index p = 0; p < planes; ++p) {
        const T* src = x.value.ptr() + p * s.h * s.w;
        T* dst = out.ptr() + p * oh * ow;
        for (Index oy = 0; oy < oh; ++oy) {
            const double fy = ty.frac[oy];
            const T* r0 = src + ty.lo[oy] * s.w;
            const T* r1 = src + ty.hi[oy] * s.w;
            for (Index ox = 0; ox < ow; ++ox) {
                const double fx = tx.frac[ox];
                const double top = (1 - fx) * r0[tx.lo[ox]] + fx * r0[tx.hi[ox]];
                const double bot = (1 - fx) * r1[tx.lo[ox]] + fx * r1[tx.hi[ox]];
                dst[oy * ow + ox] = static_cast<T>((1 - fy) * top + fy * bot);
            }
        }
    }
    Tape<T>* tape = common_tape<T>({&x}, "bilinear_upsample2x");
    return emit<T>("bilinear_upsample2x", std::move(out), tape, [&] {
        return [xid = x.node, s, ty, tx, oh, ow](const Tensor<T>& go, GradAccumulator<T>& acc) {
            Tensor<T> g(s);
            const Index planes = s.n * s.c;
            for (Index p = 0; p < planes; ++p) {
                const T* src = go.ptr() + p * oh * ow;
                T* dst = g.ptr() + p * s.h * s.w;
                for (Index oy = 0; oy < oh; ++oy) {
                    const double fy = ty.frac[oy];
                    T* r0 = dst + ty.lo[oy] * s.w;
                    T* r1 = dst + ty.hi[oy] * s.w;
                    for (Index ox = 0; ox < ow; ++ox) {
                        const double fx = tx.frac[ox];
                        const double v = src[oy * ow + ox];
                        r0[tx.lo[ox]] += static_cast<T>((1 - fy) * (1 - fx) * v);
                        r0[tx.hi[ox]] += static_cast<T>((1 - fy) * fx * v);
                        r1[tx.lo[ox]] += static_cast<T>(fy * (1 - fx) * v);
                        r1[tx.hi[ox]] += static_cast<T>(fy * fx * v);
                    }
                }
            }
            acc.add(xid, std::move(g));
        };
    });
}

namespace {

// Forward (to_depth=true) or inverse permutation between (n, c, h, w) and
// (n, 4c, h/2, w/2).
template <typename T>
void s2d_permute(const Tensor<T>& in, Tensor<T>& out, bool to_depth) {
    const Shape& ds = to_depth ? out.shape() : in.shape();  // depth-side shape
    const Index c = ds.c / 4;
    for (Index b = 0; b < ds.n; ++b) {
        for (Index phase = 0; phase < 4; ++phase) {
            const Index dy = phase / 2;
            const Index dx = phase % 2;
            for (Index k = 0; k < c; ++k) {
                for (Index y = 0; y < ds.h; ++y) {
                    for (Index x = 0; x < ds.w; ++x) {
                        if (to_depth) {
                            out(b, phase * c + k, y, x) = in(b, k, 2 * y + dy, 2 * x + dx);
                        } else {
                            out(b, k, 2 * y + dy, 2 * x + dx) = in(b, phase * c + k, y, x);
                        }
                    }
                }
            }
        }
    }
}

}  // namespace

template <typename T>
Var<T> space_to_depth2(const Var<T>& x) {
    const Shape& s = x.shape();
    if (s.h % 2 != 0 || s.w % 2 != 0) {
        throw ShapeError("space_to_depth2", "spatial dims must be even, got " + s.str());
    }
    Tensor<T> out(Shape{s.n, 4 * s.c, s.h / 2, s.w / 2});
    s2d_permute(x.value, out, true);
    Tape<T>* tape = common_tape<T>({&x}, "space_to_depth2");
    return emit<T>("space_to_depth2", std::move(out), tape, [&] {
        return [xid = x.node, s](const Tensor<T>& go, GradAccumulator<T>& acc) {
            Tensor<T> g(s);
            s2d_permute(go, g, false);
            acc.add(xid, std::move(g));
        };
    });
}

template <typename T>
Var<T> depth_to_space2(const Var<T>& x) {
    const Shape& s = x.shape();
    if (s.c % 4 != 0) {
        throw ShapeError("depth_to_space2", "channels must be a multiple of 4, got " + s.str());
    }
    Tensor<T> out(Shape{s.n, s.c / 4, s.h * 2, s.w * 2});
    s2d_permute(x.value, out, false);
    Tape<T>* tape = common_tape<T>({&x}, "depth_to_space2");
    return emit<T>("depth_to_space2", std::move(out), tape, [&] {
        return [xid = x.node, s](const Tensor<T>& go, GradAccumulator<T>& acc) {
            Tensor<T> g(s);
            s2d_permute(go, g, true);
            acc.add(xid, std::move(g));
        };
    });
}

// ---------------------------------------------------------- concat/slice

template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
    const Shape& as = a.shape();
    const Shape& bs = b.shape();
    require_axis("concat_channels", "batch", as.n, bs.n);
    require_axis("concat_channels", "height", as.h, bs.h);
    require_axis("concat_channels", "width", as.w, bs.w);
    const Index plane = as.h * as.w;
    Tensor<T> out(Shape{as.n, as.c + bs.c, as.h, as.w});
    for (Index n = 0; n < as.n; ++n) {
        std::copy_n(a.value.ptr() + n * as.c * plane, as.c * plane,
                    out.ptr() + n * (as.c + bs.c) * plane);
        std::copy_n(b.value.ptr() + n * bs.c * plane, bs.c * plane,
                    out.ptr() + (n * (as.c + bs.c) + as.c) * plane);
    }
    Tape<T>* tape = common_tape<T>({&a, &b}, "concat_channels");
    return emit<T>("concat_channels", std::move(out), tape, [&] {
        return [aid = a.node, bid = b.node, as, bs, plane](const Tensor<T>& go,
                                                             GradAccumulator<T>& acc) {
            Tensor<T> ga(as);
            Tensor<T> gb(bs);
            const Index ct = as.c + bs.c;
            for (Index n = 0; n < as.n; ++n) {
                std::copy_n(go.ptr() + n * ct * plane, as.c * plane, ga.ptr() + n * as.c * plane);
                std::copy_n(go.ptr() + (n * ct + as.c) * plane, bs.c * plane,
                            gb.ptr() + n * bs.c * plane);
            }
            acc.add(aid, std::move(ga));
            acc.add(bid, std::move(gb));
        };
    });
}

template <typename T>
Var<T> to_tokens(const Var<T>& x) {
    const Shape s = x.shape();
    const Index hw = s.h * s.w;
    Tensor<T> out(Shape{s.n, 1, hw, s.c});
    for (Index n = 0; n < s.n; ++n) {
        for (Index c = 0; c < s.c; ++c) {
            const T* src = x.value.ptr() + (n * s.c + c) * hw;
            T* dst = out.ptr() + n * hw * s.c + c;
            for (Index p = 0; p < hw; ++p) dst[p * s.c] = src[p];
        }
    }
    Tape<T>* tape = common_tape<T>({&x}, "to_tokens");
    return emit<T>("to_tokens", std::move(out), tape, [&] {
        return [xid = x.node, s, hw](const Tensor<T>& go, GradAccumulator<T>& acc) {
            Tensor<T> g(s);
            for (Index n = 0; n < s.n; ++n) {
                for (Index c = 0; c < s.c; ++c) {
                    T* dst = g.ptr() + (n * s.c + c) * hw;
                    const T* src = go.ptr() + n * hw * s.c + c;
                    for (Index p = 0; p < hw; ++p) dst[p] = src[p * s.c];
                }
            }
            acc.add(xid, std::move(g));
        };
    });
}

template <typename T>
Var<T> from_tokens(const Var<T>& tokens, Index h, Index w) {
    const Shape ts = tokens.shape();
    require_axis("from_tokens", "channel", 1, ts.c);
    require_axis("from_tokens", "tokens", h * w, ts.h);
    const Index C = ts.w;
    const Index hw = h * w;
    Tensor<T> out(Shape{ts.n, C, h, w});
    for (Index n = 0; n < ts.n; ++n) {
        for (Index c = 0; c < C; ++c) {
            T* dst = out.ptr() + (n * C + c) * hw;
            const T* src = tokens.value.ptr() + n * hw * C + c;
            for (Index p = 0; p < hw; ++p) dst[p] = src[p * C];
        }
    }
    Tape<T>* tape = common_tape<T>({&tokens}, "from_tokens");
    return emit<T>("from_tokens", std::move(out), tape, [&] {
        return [tid = tokens.node, ts, C, hw](const Tensor<T>& go, GradAccumulator<T>& acc) {
            Tensor<T> g(ts);
            for (Index n = 0; n < ts.n; ++n) {
                for (Index c = 0; c < C; ++c) {
                    const T* src = go.ptr() + (n * C + c) * hw;
                    T* dst = g.ptr() + n * hw * C + c;
                    for (Index p = 0; p < hw; ++p) dst[p * C] = src[p];
                }
            }
            acc.add(tid, std::move(g));
        };
    });
}

namespace {

// Copies a window along axis `rows` (h) or `cols` (w) between tensors whose
// other axes agree. dst_off/src_off are offsets along that axis.
template <typename T>
void copy_band(const Tensor<T>& src, Index src_off, Tensor<T>& dst, Index dst_off, Index len,
               bool along_rows) {
    const Shape& ss = src.shape();
    const Shape& ds = dst.shape();
    const Index batches = ss.n * ss.c;
    if (along_rows) {
        for (Index b = 0; b < batches; ++b) {
            std::copy_n(src.ptr() + (b * ss.h + src_off) * ss.w, len * ss.w,
                        dst.ptr() + (b * ds.h + dst_off) * ds.w);
        }
    } else {
        const Index rows = batches * ss.h;
        for (Index r = 0; r < rows; ++r) {
            std::copy_n(src.ptr() + r * ss.w + src_off, len, dst.ptr() + r * ds.w + dst_off);
        }
    }
}

template <typename T>
Var<T> concat_along(const std::vector<Var<T>>& parts, bool along_rows, const char* op) {
    if (parts.empty()) {
        throw ShapeError(op, "no inputs");
    }
    Shape s = parts.front().shape();
    Index total = 0;
    std::vector<Index> lens;
    for (const auto& p : parts) {
        const Shape& ps = p.shape();
        require_axis(op, "batch", s.n, ps.n);
        require_axis(op, "channel", s.c, ps.c);
        if (along_rows) {
            require_axis(op, "cols", s.w, ps.w);
        } else {
            require_axis(op, "rows", s.h, ps.h);
        }
        const Index len = along_rows ? ps.h : ps.w;
        lens.push_back(len);
        total += len;
    }
    if (along_rows) s.h = total; else s.w = total;
    Tensor<T> out(s);
    Index off = 0;
    for (std::size_t i = 0; i < parts.size(); ++i) {
        copy_band(parts[i].value, 0, out, off, lens[i], along_rows);
        off += lens[i];
    }
    Tape<T>* tape = common_tape<T>(parts, op);
    return emit<T>(op, std::move(out), tape, [&] {
        std::vector<std::optional<NodeId>> ids;
        std::vector<Shape> shapes;
        for (const auto& p : parts) {
            ids.push_back(p.node);
            shapes.push_back(p.shape());
        }
        return [ids, shapes, lens, along_rows](const Tensor<T>& go, GradAccumulator<T>& acc) {
            Index off = 0;
            for (std::size_t i = 0; i < ids.size(); ++i) {
                if (ids[i]) {
                    Tensor<T> g(shapes[i]);
                    copy_band(go, off, g, 0, lens[i], along_rows);
                    acc.add(ids[i], std::move(g));
                }
                off += lens[i];
            }
        };
    });
}

template <typename T>
Var<T> slice_along(const Var<T>& x, Index start, Index len, bool along_rows, const char* op) {
    Shape s = x.shape();
    const Index extent = along_rows ? s.h : s.w;
    if (start < 0 || len < 0 || start + len > extent) {
        throw ShapeError(op, "window [" + std::to_string(start) + ", " +
                                 std::to_string(start + len) + ") outside extent " +
                                 std::to_string(extent));
    }
    const Shape full = s;
    if (along_rows) s.h = len; else s.w = len;
    Tensor<T> out(s);
    copy_band(x.value, start, out, 0, len, along_rows);
    Tape<T>* tape = common_tape<T>({&x}, op);
    return emit<T>(op, std::move(out), tape, [&] {
        return [xid = x.node, full, start, len, along_rows](const Tensor<T>& go,
                                                             GradAccumulator<T>& acc) {
            Tensor<T> g(full);
            copy_band(go, 0, g, start, len, along_rows);
            acc.add(xid, std::move(g));
        };
    });
}

}  // namespace

template <typename T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
    return concat_along(parts, true, "concat_rows");
}
template <typename T>
Var<T> slice_rows(const Var<T>& x, Index start, Index len) {
    return slice_along(x, start, len, true, "slice_rows");
}
template <typename T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
    return concat_along(parts, false, "concat_cols");
}
template <typename T>
Var<T> slice_cols(const Var<T>& x, Index start, Index len) {
    return slice_along(x, start, len, false, "slice_cols");
}

// ----------------------------------------------------------- feature_map

template <typename T>
Var<T> feature_map(const Var<T>& x, const Tensor<T>& phi, FeatureMapOptions opt,
                   double* shift_out, std::vector<double>* row_shifts) {
    const Index d = x.value.cols();
    const Index rows = x.value.rows();
    const Index m = phi.h();
    require_axis("feature_map", "feature_dim", phi.w(), d);
    if (m < 1) {
        throw ShapeError("feature_map", "feature bank is empty");
    }
    const Shape& xs = x.shape();
    Tensor<T> z(Shape{xs.n, xs.c, xs.h, m});
    gemm<T>(false, true, rows, m, d, x.value.ptr(), phi.ptr(), z.ptr(), T(0));
    std::vector<double> phi_half_sq(static_cast<std::size_t>(m), 0.0);
    if (opt.form == FeatureForm::LiteralGaussian) {
        for (Index j = 0; j < m; ++j) {
            double s = 0;
            for (Index k = 0; k < d; ++k) s += double(phi[j * d + k]) * phi[j * d + k];
            phi_half_sq[j] = 0.5 * s;
        }
    }
    std::vector<double> shift(static_cast<std::size_t>(rows), -std::numeric_limits<double>::infinity());
    for (Index r = 0; r < rows; ++r) {
        double sq = 0;
        const T* xr = x.value.ptr() + r * d;
        for (Index k = 0; k < d; ++k) sq += double(xr[k]) * xr[k];
        for (Index j = 0; j < m; ++j) {
            const double v = double(static_cast<T>(double(z[r * m + j]) - 0.5 * sq - phi_half_sq[j]));
            z[r * m + j] = static_cast<T>(v);
            shift[r] = std::max(shift[r], v);
        }
    }
    // Widen each row's max to the requested scope. The shift is a max, so its
    // gradient goes to the arg-max entry of each group.
    const Index group = std::max<Index>(1, opt.scope == ShiftScope::Global     ? rows
                                           : opt.scope == ShiftScope::PerMatrix ? xs.h
                                                                                : 1);
    std::vector<Index> arg;
    for (Index g0 = 0; g0 < rows; g0 += group) {
        const auto b = shift.begin() + g0, e = shift.begin() + std::min(rows, g0 + group);
        const auto top = std::max_element(b, e);
        const Index r = g0 + (top - b);
        Index j = 0;
        while (j + 1 < m && double(z[r * m + j]) != *top) ++j;
        arg.push_back(r * m + j);
        std::fill(b, e, *top);
    }
    if (!opt.stabilize) {
        std::fill(shift.begin(), shift.end(), 0.0);
        arg.clear();
    }
    if (shift_out) {
        *shift_out = rows > 0 ? *std::max_element(shift.begin(), shift.end()) : 0.0;
    }
    if (row_shifts) *row_shifts = shift;
    const double norm = 1.0 / std::sqrt(static_cast<double>(m));
    Tensor<T> out(z.shape());
    for (Index r = 0; r < rows; ++r) {
        for (Index j = 0; j < m; ++j) {
            out[r * m + j] = static_cast<T>(norm * std::exp(double(z[r * m + j]) - shift[r]));
        }
    }
    Tape<T>* tape = common_tape<T>({&x}, "feature_map");
    Tensor<T> saved = tape ? out : Tensor<T>();
    return emit<T>("feature_map", std::move(out), tape, [&] {
        return [yv = std::move(saved), xv = x.value, phi, xid = x.node, rows, d, m, group,
                arg = std::move(arg)](const Tensor<T>& go, GradAccumulator<T>& acc) {
            // dL/dx_i = sum_j g_ij y_ij (phi_j - x_i); the phi-independent
            // |phi|^2 term of the literal form has no x dependence.
            Tensor<T> gz(yv.shape());
            std::vector<double> rowsum(static_cast<std::size_t>(rows), 0.0);
            for (Index r = 0; r < rows; ++r) {
                for (Index j = 0; j < m; ++j) {
                    const T v = go[r * m + j] * yv[r * m + j];
                    gz[r * m + j] = v;
                    rowsum[r] += v;
                }
            }
            for (std::size_t g = 0; g < arg.size(); ++g) {
                const Index g0 = static_cast<Index>(g) * group;
                double total = 0;
                for (Index r = g0; r < std::min(rows, g0 + group); ++r) total += rowsum[r];
                gz[arg[g]] = static_cast<T>(gz[arg[g]] - total);
                rowsum[arg[g] / m] -= total;
            }
            Tensor<T> gx(xv.shape());
            gemm<T>(false, false, rows, d, m, gz.ptr(), phi.ptr(), gx.ptr(), T(0));
            for (Index r = 0; r < rows; ++r) {
                for (Index k = 0; k < d; ++k) {
                    gx[r * d + k] -= static_cast<T>(rowsum[r] * xv[r * d + k]);
                }
            }
            acc.add(xid, std::move(gx));
        };
    });
}

// ------------------------------------------------------------ reductions

template <typename T>
Var<T> sum_all(const Var<T>& x) {
    double s = 0;
    for (Index i = 0; i < x.value.numel(); ++i) s += x.value[i];
    Tape<T>* tape = common_tape<T>({&x}, "sum_all");
    return emit<T>("sum_all", Tensor<T>::scalar(static_cast<T>(s)), tape, [&] {
        return [xid = x.node, xs = x.shape()](const Tensor<T>& go, GradAccumulator<T>& acc) {
            acc.add(xid, Tensor<T>(xs, go[0]));
        };
    });
}

template <typename T>
Var<T> sum_over_rows(const Var<T>& x) {
    const Shape s = x.shape();
    const Index batches = s.n * s.c;
    Tensor<T> out(Shape{s.n, s.c, 1, s.w});
    for (Index b = 0; b < batches; ++b) {
        for (Index j = 0; j < s.w; ++j) {
            double acc = 0;
            for (Index r = 0; r < s.h; ++r) acc += x.value[(b * s.h + r) * s.w + j];
            out[b * s.w + j] = static_cast<T>(acc);
        }
    }
    Tape<T>* tape = common_tape<T>({&x}, "sum_over_rows");
    return emit<T>("sum_over_rows", std::move(out), tape, [&] {
        return [xid = x.node, s, batches](const Tensor<T>& go, GradAccumulator<T>& acc) {
            Tensor<T> g(s);
            for (Index b = 0; b < batches; ++b) {
                for (Index r = 0; r < s.h; ++r) {
                    std::copy_n(go.ptr() + b * s.w, s.w, g.ptr() + (b * s.h + r) * s.w);
                }
            }
            acc.add(xid, std::move(g));
        };
    });
}

template <typename T>
Var<T> div_rows(const Var<T>& x, const Var<T>& d) {
    const Shape& xs = x.shape();
    const Shape& ds = d.shape();
    require_axis("div_rows", "batch", xs.n, ds.n);
    require_axis("div_rows", "channel", xs.c, ds.c);
    require_axis("div_rows", "rows", xs.h, ds.h);
    require_axis("div_rows", "cols", 1, ds.w);
    const Index rows = x.value.rows();
    const Index cols = xs.w;
    Tensor<T> out(xs);
    for (Index r = 0; r < rows; ++r) {
        for (Index j = 0; j < cols; ++j) out[r * cols + j] = x.value[r * cols + j] / d.value[r];
    }
    Tape<T>* tape = common_tape<T>({&x, &d}, "div_rows");
    return emit<T>("div_rows", std::move(out), tape, [&] {
        return [xv = x.value, dv = d.value, xid = x.node, did = d.node, rows,
                cols](const Tensor<T>& go, GradAccumulator<T>& acc) {
            if (xid) {
                Tensor<T> g(xv.shape());
                for (Index r = 0; r < rows; ++r) {
                    for (Index j = 0; j < cols; ++j) g[r * cols + j] = go[r * cols + j] / dv[r];
                }
                acc.add(xid, std::move(g));
            }
            if (did) {
                Tensor<T> g(dv.shape());
                for (Index r = 0; r < rows; ++r) {
                    double s = 0;
                    for (Index j = 0; j < cols; ++j) s += double(go[r * cols + j]) * xv[r * cols + j];
                    g[r] = static_cast<T>(-s / (double(dv[r]) * dv[r]));
                }
                acc.add(did, std::move(g));
            }
        };
    });
}

// ---------------------------------------------------------------- losses

namespace {

void check_labels(const char* op, const Shape& s, const LabelMap& labels) {
    require_axis(op, "batch", s.n, labels.n);
    require_axis(op, "height", s.h, labels.h);
    require_axis(op, "width", s.w, labels.w);
    for (auto v : labels.data) {
        if (v < 0 || v >= s.c) {
            throw std::invalid_argument(std::string(op) + ": label " + std::to_string(v) +
                                        " outside [0, " + std::to_string(s.c) + ")");
        }
    }
}

// Channel softmax of (n, C, h, w) logits, returned in the same layout.
template <typename T>
Tensor<double> channel_softmax(const Tensor<T>& logits) {
    const Shape& s = logits.shape();
    const Index plane = s.h * s.w;
    Tensor<double> p(s);
    for (Index n = 0; n < s.n; ++n) {
        for (Index i = 0; i < plane; ++i) {
            double mx = -std::numeric_limits<double>::infinity();
            for (Index c = 0; c < s.c; ++c) mx = std::max(mx, double(logits[(n * s.c + c) * plane + i]));
            double sum = 0;
            for (Index c = 0; c < s.c; ++c) {
                const double e = std::exp(double(logits[(n * s.c + c) * plane + i]) - mx);
                p[(n * s.c + c) * plane + i] = e;
                sum += e;
            }
            for (Index c = 0; c < s.c; ++c) p[(n * s.c + c) * plane + i] /= sum;
        }
    }
    return p;
}

}  // namespace

template <typename T>
Var<T> cross_entropy(const Var<T>& logits, const LabelMap& labels) {
    const Shape s = logits.shape();
    check_labels("cross_entropy", s, labels);
    const Index plane = s.h * s.w;
    const Index pixels = s.n * plane;
    Tensor<double> p = channel_softmax(logits.value);
    double loss = 0;
    for (Index n = 0; n < s.n; ++n) {
        for (Index i = 0; i < plane; ++i) {
            const Index cls = labels.data[static_cast<std::size_t>(n * plane + i)];
            const double mx = [&] {
                double m = -std::numeric_limits<double>::infinity();
                for (Index c = 0; c < s.c; ++c) m = std::max(m, double(logits.value[(n * s.c + c) * plane + i]));
                return m;
            }();
            double lse = 0;
            for (Index c = 0; c < s.c; ++c) lse += std::exp(double(logits.value[(n * s.c + c) * plane + i]) - mx);
            lse = mx + std::log(lse);
            loss += lse - logits.value[(n * s.c + cls) * plane + i];
        }
    }
    loss /= static_cast<double>(pixels);
    Tape<T>* tape = common_tape<T>({&logits}, "cross_entropy");
    return emit<T>("cross_entropy", Tensor<T>::scalar(static_cast<T>(loss)), tape, [&] {
        return [p = std::move(p), labels, lid = logits.node, s, plane,
                pixels](const Tensor<T>& go, GradAccumulator<T>& acc) {
            Tensor<T> g(s);
            const double k = double(go[0]) / static_cast<double>(pixels);
            for (Index n = 0; n < s.n; ++n) {
                for (Index c = 0; c < s.c; ++c) {
                    for (Index i = 0; i < plane; ++i) {
                        const Index idx = (n * s.c + c) * plane + i;
                        const double y = labels.data[static_cast<std::size_t>(n * plane + i)] == c;
                        g[idx] = static_cast<T>(k * (p[idx] - y));
                    }
                }
            }
            acc.add(lid, std::move(g));
        };
    });
}

template <typename T>
Var<T> soft_dice_loss(const Var<T>& logits, const LabelMap& labels, double smooth) {
    const Shape s = logits.shape();
    check_labels("soft_dice_loss", s, labels);
    const Index plane = s.h * s.w;
    const Index C = s.c;
    Tensor<double> p = channel_softmax(logits.value);
    std::vector<double> inter(static_cast<std::size_t>(C), 0.0);
    std::vector<double> denom(static_cast<std::size_t>(C), 0.0);
    for (Index n = 0; n < s.n; ++n) {
        for (Index c = 0; c < C; ++c) {
            for (Index i = 0; i < plane; ++i) {
                const double pv = p[(n * C + c) * plane + i];
                const double y = labels.data[static_cast<std::size_t>(n * plane + i)] == c;
                inter[c] += pv * y;
                denom[c] += pv + y;
            }
        }
    }
    double mean_dice = 0;
    for (Index c = 0; c < C; ++c) mean_dice += (2 * inter[c] + smooth) / (denom[c] + smooth);
    mean_dice /= static_cast<double>(C);
    Tape<T>* tape = common_tape<T>({&logits}, "soft_dice_loss");
    return emit<T>("soft_dice_loss", Tensor<T>::scalar(static_cast<T>(1.0 - mean_dice)), tape, [&] {
        return [p = std::move(p), labels, inter, denom, smooth, lid = logits.node, s, plane,
                C](const Tensor<T>& go, GradAccumulator<T>& acc) {
            Tensor<T> g(s);
            std::vector<double> gp(static_cast<std::size_t>(C));
            for (Index n = 0; n < s.n; ++n) {
                for (Index i = 0; i < plane; ++i) {
                    const Index cls = labels.data[static_cast<std::size_t>(n * plane + i)];
                    double dot = 0;
                    for (Index c = 0; c < C; ++c) {
                        const double y = cls == c;
                        const double den = denom[c] + smooth;
                        const double dd = 2 * y / den - (2 * inter[c] + smooth) / (den * den);
                        gp[c] = -double(go[0]) * dd / static_cast<double>(C);
                        dot += gp[c] * p[(n * C + c) * plane + i];
                    }
                    for (Index c = 0; c < C; ++c) {
                        const Index idx = (n * C + c) * plane + i;
                        g[idx] = static_cast<T>(p[idx] * (gp[c] - dot));
                    }
                }
            }
            acc.add(lid, std::move(g));
        };
    });
}

#define PUNET_INSTANTIATE_OPS(T)                                                            \
    template Var<T> conv2d(const Var<T>&, const Var<T>&, const Var<T>&, Conv2dOptions);     \
    template Var<T> batch_norm(const Var<T>&, const Var<T>&, const Var<T>&, BnState<T>&,    \
                               BnOptions);                                                  \
    template Var<T> layer_norm(const Var<T>&, const Var<T>&, const Var<T>&, double);        \
    template Var<T> matmul(const Var<T>&, const Var<T>&);                                   \
    template Var<T> transpose(const Var<T>&);                                               \
    template Var<T> linear(const Var<T>&, const Var<T>&, const Var<T>&);                    \
    template Var<T> add(const Var<T>&, const Var<T>&);                                      \
    template Var<T> sub(const Var<T>&, const Var<T>&);                                      \
    template Var<T> mul(const Var<T>&, const Var<T>&);                                      \
    template Var<T> scale(const Var<T>&, double);                                           \
    template Var<T> add_scalar(const Var<T>&, double);                                      \
    template Var<T> relu(const Var<T>&);                                                    \
    template Var<T> gelu(const Var<T>&);                                                    \
    template Var<T> exponential(const Var<T>&);                                             \
    template Var<T> softmax_lastdim(const Var<T>&);                                         \
    template Var<T> bilinear_upsample2x(const Var<T>&);                                     \
    template Var<T> space_to_depth2(const Var<T>&);                                         \
    template Var<T> depth_to_space2(const Var<T>&);                                         \
    template Var<T> concat_channels(const Var<T>&, const Var<T>&);                          \
    template Var<T> to_tokens(const Var<T>&);                                               \
    template Var<T> from_tokens(const Var<T>&, Index, Index);                               \
    template Var<T> concat_rows(const std::vector<Var<T>>&);                                \
    template Var<T> slice_rows(const Var<T>&, Index, Index);                                \
    template Var<T> concat_cols(const std::vector<Var<T>>&);                                \
    template Var<T> slice_cols(const Var<T>&, Index, Index);                                \
    template Var<T> feature_map(const Var<T>&, const Tensor<T>&, FeatureMapOptions, double*,   \
                                std::vector<double>*);                                       \
    template Var<T> sum_all(const Var<T>&);                                                 \
    template Var<T> sum_over_rows(const Var<T>&);                                           \
    template Var<T> div_rows(const Var<T>&, const Var<T>&);                                 \
    template Var<T> cross_entropy(const Var<T>&, const LabelMap&);                          \
    template Var<T> soft_dice_loss(const Var<T>&, const LabelMap&, double);

PUNET_INSTANTIATE_OPS(float)
PUNET_INSTANTIATE_OPS(double)

}  // namespace punet
